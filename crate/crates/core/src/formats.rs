//! On-disk formats: the `ADDQRY01` query stream, `key=value` config text and
//! atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use crate::detector::DetectorConfig;
use crate::error::{Result, SentinelError};
use crate::gateway::{EngineConfig, ResponseMode};

pub const QUERY_MAGIC: &[u8; 8] = b"ADDQRY01";

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub account_id: String,
    pub feature: Vec<f32>,
    /// Ground-truth class, or -1 when unknown.
    pub label: i32,
}

/// Writes `path` through a sibling temp file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn encode_queries(dim: usize, records: &[QueryRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + records.len() * (dim * 4 + 16));
    out.extend_from_slice(QUERY_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.feature.len() != dim {
            return Err(SentinelError::DimensionMismatch {
                expected: dim,
                actual: r.feature.len(),
            });
        }
        let id = r.account_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| SentinelError::InvalidArgument(format!("account id of {} bytes", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        for v in &r.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.label.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            SentinelError::IoFailure(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("truncated query record at byte {}", self.pos),
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Returns `(d, records)`.
pub fn decode_queries(bytes: &[u8]) -> Result<(usize, Vec<QueryRecord>)> {
    if bytes.len() < 8 || &bytes[..8] != QUERY_MAGIC {
        return Err(SentinelError::FormatVersionMismatch(
            "query stream does not start with ADDQRY01".into(),
        ));
    }
    let mut c = Cursor { bytes, pos: 8 };
    let dim = c.u32()? as usize;
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u16()? as usize;
        let account_id = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|e| SentinelError::InvalidArgument(format!("account id is not UTF-8: {e}")))?;
        let raw = c.take(dim * 4)?;
        let feature: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let label = c.u32()? as i32;
        records.push(QueryRecord {
            account_id,
            feature,
            label,
        });
    }
    Ok((dim, records))
}

pub fn write_queries(path: &Path, dim: usize, records: &[QueryRecord]) -> Result<()> {
    write_atomic(path, &encode_queries(dim, records)?)
}

pub fn read_queries(path: &Path) -> Result<(usize, Vec<QueryRecord>)> {
    decode_queries(&fs::read(path)?)
}

/// Ordered `key = value` pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SentinelError::Config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim().to_ascii_lowercase();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(SentinelError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_ascii_lowercase(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses the first present key among `aliases`.
    pub fn parsed<T: FromStr>(&self, aliases: &[&str]) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        for &key in aliases {
            if let Some(raw) = self.get(key) {
                return raw
                    .parse()
                    .map(Some)
                    .map_err(|e| SentinelError::Config(format!("{key} = {raw:?}: {e}")));
            }
        }
        Ok(None)
    }

    /// Comma separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| SentinelError::Config(format!("{key}: {s:?}: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Applies `variant`, `n`/`window_size`, `tau`, `epsilon` and
    /// `temperature` on top of `base`.
    pub fn detector_config(&self, base: DetectorConfig) -> Result<DetectorConfig> {
        let mut cfg = base;
        if let Some(v) = self.parsed(&["variant"])? {
            cfg.variant = v;
        }
        if let Some(n) = self.parsed(&["n", "window_size"])? {
            cfg.window_size = n;
        }
        if let Some(t) = self.parsed::<f64>(&["tau", "threshold"])? {
            cfg.threshold = t;
        }
        if let Some(e) = self.parsed(&["epsilon"])? {
            cfg.epsilon = e;
        }
        if let Some(t) = self.parsed(&["temperature"])? {
            cfg.temperature = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Detector keys plus `seed` and `response_mode` on top of `base`.
    pub fn engine_config(&self, base: EngineConfig) -> Result<EngineConfig> {
        let mut cfg = base;
        cfg.detector = self.detector_config(cfg.detector)?;
        if let Some(seed) = self.seed()? {
            cfg.seed = seed;
        }
        if let Some(mode) = self.response_mode()? {
            cfg.response_mode = mode;
        }
        Ok(cfg)
    }

    pub fn response_mode(&self) -> Result<Option<ResponseMode>> {
        self.parsed(&["response_mode"])
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.parsed(&["seed"])
    }

    /// `key=value` lines in key order.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
