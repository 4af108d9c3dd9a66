//! Bundled scenarios. Each one renders every parameter it used into
//! `manifest.txt`; running `simulate --config manifest.txt` again reproduces
//! the output directory byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use add_sentinel::detector::{DetectorConfig, Variant};
use add_sentinel::formats::{encode_queries, write_atomic, KeyValues, QueryRecord};
use add_sentinel::gateway::EngineConfig;
use add_sentinel::metrics::{summarize, ScoredStream};
use add_sentinel::scenarios::{presets, replay, separation_study, variant_comparison, Setup};
use add_sentinel::simulator::{StreamItem, WorldParams};
use add_sentinel::SentinelError;

use crate::commands::{engine_config, engine_keys};
use crate::{CliError, CliResult};

type Files = Vec<(&'static str, Vec<u8>)>;

pub fn run(kv: &KeyValues, out: &Path) -> CliResult<()> {
    let scenario = kv
        .get("scenario")
        .ok_or_else(|| CliError::Usage("no scenario given: pass --scenario or scenario= in --config".into()))?;
    let files = match scenario {
        "detection" => detection(kv, false)?,
        "label-subset" => detection(kv, true)?,
        "separation-study" => separation(kv)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown scenario {other:?} (expected detection, separation-study or label-subset)"
            )))
        }
    };
    std::fs::create_dir_all(out).map_err(SentinelError::from)?;
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
        println!("{}", out.join(name).display());
    }
    Ok(())
}

/// Shared setup: engine config, world and training set.
struct Common {
    cfg: EngineConfig,
    setup: Setup,
    manifest: KeyValues,
}

fn common(kv: &KeyValues, scenario: &str, base: WorldParams) -> CliResult<Common> {
    let cfg = engine_config(
        kv,
        EngineConfig {
            detector: DetectorConfig {
                window_size: presets::WINDOW_SIZE,
                ..DetectorConfig::default()
            },
            ..EngineConfig::default()
        },
    )?;
    let params = WorldParams {
        dim: kv.parsed(&["dim", "d"])?.unwrap_or(base.dim),
        classes: kv.parsed(&["classes", "k"])?.unwrap_or(base.classes),
        surrogate_classes: kv.parsed(&["surrogate_classes"])?.unwrap_or(base.surrogate_classes),
        separation: kv.parsed(&["separation"])?.unwrap_or(base.separation),
        seed: cfg.seed,
    };
    let train_per_class = kv.parsed(&["train_per_class"])?.unwrap_or(presets::TRAIN_PER_CLASS);

    let mut manifest = KeyValues::default();
    manifest.set("scenario", scenario);
    engine_keys(&cfg, &mut manifest);
    manifest.set("dim", params.dim);
    manifest.set("classes", params.classes);
    manifest.set("surrogate_classes", params.surrogate_classes);
    manifest.set("separation", params.separation);
    manifest.set("train_per_class", train_per_class);

    let setup = Setup::new(params, train_per_class)?;
    Ok(Common { cfg, setup, manifest })
}

fn stream_file(account: &str, dim: usize, items: &[StreamItem]) -> CliResult<Vec<u8>> {
    let records: Vec<QueryRecord> = items
        .iter()
        .map(|s| QueryRecord {
            account_id: account.to_string(),
            feature: s.feature.clone(),
            label: s.label as i32,
        })
        .collect();
    Ok(encode_queries(dim, &records)?)
}

fn training_files(setup: &Setup) -> CliResult<Files> {
    let records: Vec<QueryRecord> = setup
        .train_features
        .iter()
        .zip(&setup.train_labels)
        .map(|(f, &l)| QueryRecord {
            account_id: "train".into(),
            feature: f.clone(),
            label: l as i32,
        })
        .collect();
    Ok(vec![
        ("train.addqry", encode_queries(setup.world.dim(), &records)?),
        ("model.addref", setup.reference.to_bytes()),
    ])
}

fn variant_list(kv: &KeyValues, default: &[Variant]) -> CliResult<Vec<Variant>> {
    Ok(kv.list("variants")?.unwrap_or_else(|| default.to_vec()))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Benign vs. malicious accounts scored query by query. With `subset`, the
/// benign account only asks about a few classes and its features are shifted.
fn detection(kv: &KeyValues, subset: bool) -> CliResult<Files> {
    let (name, base, default_len, default_variants): (_, _, usize, &[Variant]) = if subset {
        ("label-subset", presets::label_subset_world(0), 500, &[Variant::Add, Variant::Ew, Variant::Gdd])
    } else {
        (
            "detection",
            presets::detection_world(0),
            2000,
            &[Variant::Add, Variant::Ew, Variant::Gdd, Variant::Msp, Variant::Energy],
        )
    };
    let Common {
        cfg,
        setup,
        mut manifest,
    } = common(kv, name, base)?;
    let benign_len = kv.parsed(&["benign_len"])?.unwrap_or(default_len);
    let malicious_len = kv.parsed(&["malicious_len"])?.unwrap_or(default_len);
    let variants = variant_list(kv, default_variants)?;
    manifest.set("benign_len", benign_len);
    manifest.set("malicious_len", malicious_len);
    manifest.set("variants", join(&variants));

    let dim = setup.world.dim();
    let seed = cfg.seed;
    let benign_spec = if subset {
        presets::label_subset_benign(dim, benign_len)
    } else {
        presets::benign_id(benign_len)
    };
    let malicious_spec = presets::malicious(malicious_len);
    let benign = setup.stream(&benign_spec, seed)?;
    let malicious = setup.stream(&malicious_spec, seed)?;

    let engine = setup.engine(cfg.detector.clone(), seed)?;
    let mut verdicts = String::from("account_id,index,label,predicted,score,flagged,returned_class\n");
    let mut scored = ScoredStream::default();
    let mut flagged = [0usize; 2];
    for (account, items, is_benign) in [("benign", &benign, true), ("malicious", &malicious, false)] {
        for (i, (item, o)) in items.iter().zip(replay(&engine, account, items)?).enumerate() {
            writeln!(
                verdicts,
                "{account},{i},{},{},{},{},{}",
                item.label,
                o.predicted,
                o.score,
                o.poisoned,
                o.returned_class()
            )
            .expect("string write");
            scored.push(o.score, is_benign);
            flagged[usize::from(!is_benign)] += usize::from(o.poisoned);
        }
    }
    let summary = summarize(&scored)?;
    let mut metrics = KeyValues::default();
    metrics.set("variant", cfg.detector.variant);
    metrics.set("fpr_at_tpr95", summary.fpr_at_tpr95);
    metrics.set("auroc", summary.auroc);
    metrics.set("aupr", summary.aupr);
    metrics.set("benign_flagged", flagged[0]);
    metrics.set("malicious_flagged", flagged[1]);

    let mut table = String::from("variant,fpr_at_tpr95,auroc,aupr\n");
    for r in variant_comparison(&setup, &cfg.detector, &variants, &benign_spec, &malicious_spec, seed)? {
        writeln!(
            table,
            "{},{},{},{}",
            r.variant, r.metrics.fpr_at_tpr95, r.metrics.auroc, r.metrics.aupr
        )
        .expect("string write");
    }

    let mut files = training_files(&setup)?;
    files.push(("benign.addqry", stream_file("benign", dim, &benign)?));
    files.push(("malicious.addqry", stream_file("malicious", dim, &malicious)?));
    files.push(("verdicts.csv", verdicts.into_bytes()));
    files.push(("metrics.txt", metrics.render().into_bytes()));
    files.push(("variants.csv", table.into_bytes()));
    files.push(("manifest.txt", manifest.render().into_bytes()));
    Ok(files)
}

/// Gap between the lowest malicious and highest benign window score, per
/// window size.
fn separation(kv: &KeyValues) -> CliResult<Files> {
    let Common {
        cfg,
        setup,
        mut manifest,
    } = common(kv, "separation-study", presets::separation_world(0))?;
    let sizes = kv
        .list::<usize>("window_sizes")?
        .unwrap_or_else(|| presets::STUDY_WINDOW_SIZES.to_vec());
    let per_side = kv
        .parsed(&["windows_per_side"])?
        .unwrap_or(presets::STUDY_WINDOWS_PER_SIDE);
    manifest.set("window_sizes", join(&sizes));
    manifest.set("windows_per_side", per_side);

    let points = separation_study(&setup, &cfg.detector, &sizes, per_side, cfg.seed)?;
    let mut csv = String::from("window_size,gap,benign_max,malicious_min\n");
    let mut metrics = KeyValues::default();
    for p in &points {
        writeln!(csv, "{},{},{},{}", p.window_size, p.gap, p.benign_max, p.malicious_min).expect("string write");
        metrics.set(&format!("gap_n{}", p.window_size), p.gap);
    }
    let nondecreasing = points.windows(2).all(|w| w[1].gap >= w[0].gap);
    metrics.set("nondecreasing", nondecreasing);

    let mut files = training_files(&setup)?;
    files.push(("separation.csv", csv.into_bytes()));
    files.push(("metrics.txt", metrics.render().into_bytes()));
    files.push(("manifest.txt", manifest.render().into_bytes()));
    Ok(files)
}
