//! Per-account sliding windows of `(feature, predicted class)` pairs.
//!
//! Each window is a fixed-capacity ring buffer over one flat `f32` slab, so a
//! window of `N` entries in `d` dimensions costs exactly `4 * N * d` feature
//! bytes. New windows are seed-filled with `N` entries drawn without
//! replacement from a pool of training features.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::seq::index;

use crate::error::{Result, SentinelError};
use crate::rng;

/// Feature bytes held by one window of `capacity` entries in `dim` dimensions.
pub const fn window_feature_bytes(capacity: usize, dim: usize) -> usize {
    capacity * dim * std::mem::size_of::<f32>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountWindow {
    account_id: String,
    capacity: usize,
    dim: usize,
    features: Vec<f32>,
    classes: Vec<u32>,
    head: usize,
    len: usize,
    seeded_count: usize,
}

impl AccountWindow {
    pub fn new(account_id: impl Into<String>, capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be >= 1");
        Self {
            account_id: account_id.into(),
            capacity,
            dim,
            features: vec![0.0; capacity * dim],
            classes: vec![0; capacity],
            head: 0,
            len: 0,
            seeded_count: 0,
        }
    }

    pub fn account_id(&self) -> &str {
        &self.account_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Seed-fill entries that have not been evicted yet.
    pub fn seeded_count(&self) -> usize {
        self.seeded_count
    }

    pub fn feature_bytes(&self) -> usize {
        window_feature_bytes(self.capacity, self.dim)
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.capacity
    }

    /// The `i`-th entry in arrival order (0 is the oldest).
    pub fn get(&self, i: usize) -> Option<(&[f32], u32)> {
        if i >= self.len {
            return None;
        }
        let s = self.slot(i);
        Some((&self.features[s * self.dim..(s + 1) * self.dim], self.classes[s]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], u32)> + '_ {
        (0..self.len).map(move |i| self.get(i).expect("index below len"))
    }

    fn push_one(&mut self, feature: &[f32], class_id: u32) {
        let s = if self.len < self.capacity {
            self.len += 1;
            self.slot(self.len - 1)
        } else {
            let s = self.head;
            self.head = (self.head + 1) % self.capacity;
            self.seeded_count = self.seeded_count.saturating_sub(1);
            s
        };
        self.features[s * self.dim..(s + 1) * self.dim].copy_from_slice(feature);
        self.classes[s] = class_id;
    }

    fn check_dim(&self, feature: &[f32]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(SentinelError::DimensionMismatch {
                expected: self.dim,
                actual: feature.len(),
            });
        }
        Ok(())
    }

    /// Appends one entry, evicting the oldest when full.
    pub fn push(&mut self, feature: &[f32], class_id: u32) -> Result<()> {
        self.check_dim(feature)?;
        self.push_one(feature, class_id);
        Ok(())
    }

    /// Appends `items` in order. Dimensions are checked before any mutation.
    pub fn push_queries<F: AsRef<[f32]>>(&mut self, items: &[(F, u32)]) -> Result<()> {
        for (f, _) in items {
            self.check_dim(f.as_ref())?;
        }
        for (f, c) in items {
            self.push_one(f.as_ref(), *c);
        }
        Ok(())
    }

    /// Row indices (arrival order) of each predicted class.
    pub fn class_indices(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in 0..self.len {
            groups.entry(self.classes[self.slot(i)]).or_default().push(i);
        }
        groups
    }

    pub fn partition_by_class(&self) -> BTreeMap<u32, Vec<&[f32]>> {
        let mut groups: BTreeMap<u32, Vec<&[f32]>> = BTreeMap::new();
        for (f, c) in self.iter() {
            groups.entry(c).or_default().push(f);
        }
        groups
    }

    /// Fraction of unordered entry pairs whose cosine similarity exceeds
    /// `sim_threshold`.
    pub fn near_duplicate_rate(&self, sim_threshold: f64) -> Result<f64> {
        if self.len < 2 {
            return Err(SentinelError::WindowTooSmall(self.len));
        }
        if !(sim_threshold > 0.0 && sim_threshold <= 1.0) {
            return Err(SentinelError::InvalidArgument(format!(
                "similarity threshold {sim_threshold} outside (0, 1]"
            )));
        }
        let rows: Vec<&[f32]> = self.iter().map(|(f, _)| f).collect();
        let norms: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        let mut hits = 0usize;
        let mut pairs = 0usize;
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                pairs += 1;
                if cosine(rows[i], rows[j], norms[i], norms[j]) > sim_threshold {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / pairs as f64)
    }
}

fn cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (dot / (na * nb)).min(1.0)
}

/// A window plus caller-defined per-account state, guarded together.
#[derive(Debug)]
pub struct Session<X> {
    pub window: AccountWindow,
    pub ext: X,
}

struct Slot<X> {
    last_active: AtomicU64,
    session: Mutex<Session<X>>,
}

/// Seed-pool entry: a training feature and the class the target model
/// predicts for it.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedEntry {
    pub feature: Vec<f32>,
    pub class_id: u32,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub capacity: usize,
    pub dim: usize,
    pub seed: u64,
    /// Upper bound on live accounts; least recently active windows go first.
    pub max_accounts: usize,
}

/// One window per account. Different accounts proceed concurrently; work on
/// one account is serialized by its own mutex.
pub struct WindowStore<X = ()> {
    config: StoreConfig,
    seed_pool: Vec<SeedEntry>,
    slots: RwLock<HashMap<String, Arc<Slot<X>>>>,
    clock: AtomicU64,
    evictions: AtomicU64,
}

impl<X> WindowStore<X> {
    pub fn new(config: StoreConfig, seed_pool: Vec<SeedEntry>) -> Result<Self> {
        if config.capacity == 0 || config.max_accounts == 0 {
            return Err(SentinelError::InvalidArgument(
                "window capacity and max_accounts must be >= 1".into(),
            ));
        }
        if seed_pool.len() < config.capacity {
            return Err(SentinelError::SeedPoolTooSmall {
                available: seed_pool.len(),
                needed: config.capacity,
            });
        }
        if let Some(bad) = seed_pool.iter().find(|e| e.feature.len() != config.dim) {
            return Err(SentinelError::DimensionMismatch {
                expected: config.dim,
                actual: bad.feature.len(),
            });
        }
        Ok(Self {
            config,
            seed_pool,
            slots: RwLock::new(HashMap::new()),
            clock: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn seed_pool(&self) -> &[SeedEntry] {
        &self.seed_pool
    }

    pub fn num_accounts(&self) -> usize {
        self.slots.read().len()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions.load(Ordering::Relaxed)
    }

    pub fn window_feature_bytes(&self) -> usize {
        window_feature_bytes(self.config.capacity, self.config.dim)
    }

    pub fn total_feature_bytes(&self) -> usize {
        self.num_accounts() * self.window_feature_bytes()
    }

    /// A fresh window filled with `N` seed-pool entries sampled without
    /// replacement from the account's seeding substream.
    pub fn seeded_window(&self, account_id: &str) -> AccountWindow {
        let mut rng = rng::substream(self.config.seed, rng::SEEDING, account_id);
        let picks = index::sample(&mut rng, self.seed_pool.len(), self.config.capacity);
        let mut w = AccountWindow::new(account_id, self.config.capacity, self.config.dim);
        for i in picks.iter() {
            let e = &self.seed_pool[i];
            w.push_one(&e.feature, e.class_id);
        }
        w.seeded_count = w.len;
        w
    }

    fn touch(&self, slot: &Slot<X>) {
        let now = self.clock.fetch_add(1, Ordering::Relaxed) + 1;
        slot.last_active.store(now, Ordering::Relaxed);
    }

    fn evict_if_full(&self, slots: &mut HashMap<String, Arc<Slot<X>>>) {
        while slots.len() >= self.config.max_accounts {
            let oldest = slots
                .iter()
                .min_by_key(|(_, s)| s.last_active.load(Ordering::Relaxed))
                .map(|(k, _)| k.clone());
            match oldest {
                Some(k) => {
                    slots.remove(&k);
                    self.evictions.fetch_add(1, Ordering::Relaxed);
                }
                None => break,
            }
        }
    }

    fn slot_or_insert(&self, account_id: &str, make: impl FnOnce() -> Session<X>) -> Arc<Slot<X>> {
        if let Some(slot) = self.slots.read().get(account_id) {
            return Arc::clone(slot);
        }
        let mut slots = self.slots.write();
        if let Some(slot) = slots.get(account_id) {
            return Arc::clone(slot);
        }
        self.evict_if_full(&mut slots);
        let slot = Arc::new(Slot {
            last_active: AtomicU64::new(0),
            session: Mutex::new(make()),
        });
        slots.insert(account_id.to_string(), Arc::clone(&slot));
        slot
    }

    /// Runs `f` with exclusive access to the account's session, creating a
    /// seed-filled one (with `init` for the extension state) on first use.
    pub fn with_session<R>(
        &self,
        account_id: &str,
        init: impl FnOnce(&str) -> X,
        f: impl FnOnce(&mut Session<X>) -> R,
    ) -> R {
        let slot = self.slot_or_insert(account_id, || Session {
            window: self.seeded_window(account_id),
            ext: init(account_id),
        });
        self.touch(&slot);
        let mut session = slot.session.lock();
        f(&mut session)
    }

    /// Replaces (or creates) an account's window with one pre-filled from
    /// `items` instead of the seed pool. `items` must hold exactly `N` entries.
    pub fn insert_prefilled<F: AsRef<[f32]>>(
        &self,
        account_id: &str,
        items: &[(F, u32)],
        ext: X,
    ) -> Result<()> {
        if items.len() != self.config.capacity {
            return Err(SentinelError::InvalidArgument(format!(
                "prefill needs exactly {} entries, got {}",
                self.config.capacity,
                items.len()
            )));
        }
        let mut w = AccountWindow::new(account_id, self.config.capacity, self.config.dim);
        w.push_queries(items)?;
        let slot = Arc::new(Slot {
            last_active: AtomicU64::new(0),
            session: Mutex::new(Session { window: w, ext }),
        });
        self.touch(&slot);
        let mut slots = self.slots.write();
        if !slots.contains_key(account_id) {
            self.evict_if_full(&mut slots);
        }
        slots.insert(account_id.to_string(), slot);
        Ok(())
    }

    /// Snapshot of the account's window, if it exists.
    pub fn window(&self, account_id: &str) -> Option<AccountWindow> {
        let slot = self.slots.read().get(account_id).cloned()?;
        let w = slot.session.lock().window.clone();
        Some(w)
    }
}

impl<X: Default> WindowStore<X> {
    /// Returns the account's window, seed-filling it on first access.
    pub fn get_or_create_window(&self, account_id: &str) -> AccountWindow {
        self.with_session(account_id, |_| X::default(), |s| s.window.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn v(x: f32) -> Vec<f32> {
        vec![x]
    }

    fn pool(n: usize) -> Vec<SeedEntry> {
        (0..n)
            .map(|i| SeedEntry {
                feature: vec![i as f32, -(i as f32)],
                class_id: (i % 3) as u32,
            })
            .collect()
    }

    fn store(seed: u64) -> WindowStore {
        WindowStore::new(
            StoreConfig {
                capacity: 8,
                dim: 2,
                seed,
                max_accounts: 4,
            },
            pool(40),
        )
        .unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut w = AccountWindow::new("a", 4, 1);
        w.push_queries(&[(v(1.0), 0), (v(2.0), 0), (v(3.0), 0), (v(4.0), 0)])
            .unwrap();
        w.push_queries(&[(v(5.0), 1), (v(6.0), 1)]).unwrap();
        let got: Vec<f32> = w.iter().map(|(f, _)| f[0]).collect();
        assert_eq!(got, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn over_capacity_push_keeps_last_n() {
        let mut w = AccountWindow::new("a", 4, 1);
        let items: Vec<_> = (0..5).map(|i| (v(i as f32), 0u32)).collect();
        w.push_queries(&items).unwrap();
        let got: Vec<f32> = w.iter().map(|(f, _)| f[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn push_rejects_wrong_dim_without_mutating() {
        let mut w = AccountWindow::new("a", 4, 2);
        w.push(&[1.0, 2.0], 0).unwrap();
        let before = w.clone();
        let err = w.push_queries(&[(vec![1.0, 1.0], 0), (vec![1.0], 0)]);
        assert!(matches!(err, Err(SentinelError::DimensionMismatch { .. })));
        assert_eq!(w, before);
    }

    #[test]
    fn partition_counts() {
        let mut w = AccountWindow::new("a", 4, 1);
        for (i, c) in [0u32, 1, 0, 2].iter().enumerate() {
            w.push(&[i as f32], *c).unwrap();
        }
        let groups = w.partition_by_class();
        let sizes: Vec<(u32, usize)> = groups.iter().map(|(k, g)| (*k, g.len())).collect();
        assert_eq!(sizes, vec![(0, 2), (1, 1), (2, 1)]);

        let mut single = AccountWindow::new("b", 3, 1);
        for i in 0..3 {
            single.push(&[i as f32], 3).unwrap();
        }
        assert_eq!(single.partition_by_class()[&3].len(), 3);
    }

    #[test]
    fn near_duplicates() {
        let mut w = AccountWindow::new("a", 5, 3);
        for _ in 0..5 {
            w.push(&[0.3, -1.2, 4.0], 0).unwrap();
        }
        assert_eq!(w.near_duplicate_rate(0.99).unwrap(), 1.0);

        let mut o = AccountWindow::new("b", 2, 2);
        o.push(&[1.0, 0.0], 0).unwrap();
        o.push(&[0.0, 1.0], 0).unwrap();
        assert_eq!(o.near_duplicate_rate(0.99).unwrap(), 0.0);

        let mut tiny = AccountWindow::new("c", 2, 2);
        tiny.push(&[1.0, 0.0], 0).unwrap();
        assert!(matches!(
            tiny.near_duplicate_rate(0.5),
            Err(SentinelError::WindowTooSmall(1))
        ));
    }

    #[test]
    fn cold_start_fills_from_pool_and_is_idempotent() {
        let s = store(42);
        let w1 = s.get_or_create_window("u1");
        assert_eq!(w1.len(), 8);
        assert_eq!(w1.seeded_count(), 8);
        let pool = s.seed_pool();
        for (f, c) in w1.iter() {
            assert!(pool.iter().any(|e| e.feature == f && e.class_id == c));
        }
        // without replacement: pool features are distinct
        let mut firsts: Vec<i64> = w1.iter().map(|(f, _)| f[0] as i64).collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 8);
        assert_eq!(s.get_or_create_window("u1"), w1);
        assert_eq!(s.num_accounts(), 1);
    }

    #[test]
    fn seeding_is_deterministic_across_instances() {
        let a = store(42).get_or_create_window("u1");
        let b = store(42).get_or_create_window("u1");
        assert_eq!(a, b);
        let c = store(43).get_or_create_window("u1");
        assert_ne!(a, c);
    }

    #[test]
    fn seed_pool_must_cover_window() {
        let cfg = StoreConfig {
            capacity: 8,
            dim: 2,
            seed: 0,
            max_accounts: 1,
        };
        assert!(matches!(
            WindowStore::<()>::new(cfg, pool(7)),
            Err(SentinelError::SeedPoolTooSmall {
                available: 7,
                needed: 8
            })
        ));
    }

    #[test]
    fn least_recently_active_is_evicted() {
        let s = store(1);
        for a in ["a", "b", "c", "d"] {
            s.get_or_create_window(a);
        }
        s.get_or_create_window("a");
        s.get_or_create_window("e");
        assert_eq!(s.num_accounts(), 4);
        assert!(s.window("b").is_none());
        assert!(s.window("a").is_some());
        assert_eq!(s.evictions(), 1);
    }

    #[test]
    fn seeds_age_out() {
        let s = store(5);
        s.with_session(
            "u",
            |_| (),
            |sess| {
                sess.window.push(&[100.0, 100.0], 1).unwrap();
                assert_eq!(sess.window.seeded_count(), 7);
            },
        );
    }

    #[test]
    fn matches_shadow_deque() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut w = AccountWindow::new("a", 5, 1);
        let mut shadow: VecDeque<(f32, u32)> = VecDeque::new();
        for step in 0..500 {
            let batch = rng.random_range(1..8);
            let items: Vec<(Vec<f32>, u32)> = (0..batch)
                .map(|j| (vec![(step * 10 + j) as f32], rng.random_range(0..4)))
                .collect();
            w.push_queries(&items).unwrap();
            for (f, c) in items {
                shadow.push_back((f[0], c));
                if shadow.len() > 5 {
                    shadow.pop_front();
                }
            }
            let got: Vec<(f32, u32)> = w.iter().map(|(f, c)| (f[0], c)).collect();
            assert_eq!(got, shadow.iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn memory_accounting() {
        assert_eq!(window_feature_bytes(64, 256), 65_536);
        assert_eq!(16_384 * window_feature_bytes(64, 256), 1 << 30);
        assert_eq!(AccountWindow::new("x", 64, 256).feature_bytes(), 65_536);
    }
}
