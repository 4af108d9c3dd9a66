use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use add_sentinel::calibration::calibrate_tau;
use add_sentinel::detector::DetectorConfig;
use add_sentinel::formats::{read_queries, write_atomic, KeyValues, QueryRecord};
use add_sentinel::gateway::{EngineConfig, QueryRequest};
use add_sentinel::reference::{fit_reference, save_reference};
use add_sentinel::scenarios::{presets, Setup};
use add_sentinel::simulator::WorldParams;
use add_sentinel::SentinelError;
use add_sentinel_client::Client;
use add_sentinel_server::{load_engine, serve as serve_http};

use crate::{CliError, CliResult};

pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_SEED: u64 = 1;

/// Every engine setting, rendered so that feeding it back through
/// [`KeyValues::engine_config`] gives the same config.
pub fn engine_keys(cfg: &EngineConfig, kv: &mut KeyValues) {
    let d = &cfg.detector;
    kv.set("variant", d.variant);
    kv.set("n", d.window_size);
    kv.set("tau", d.threshold);
    kv.set("epsilon", d.epsilon);
    kv.set("temperature", d.temperature);
    kv.set("seed", cfg.seed);
    kv.set("response_mode", cfg.response_mode);
}

/// Engine config from `kv`, with the seed made explicit.
pub fn engine_config(kv: &KeyValues, base: EngineConfig) -> CliResult<EngineConfig> {
    let base = EngineConfig {
        seed: DEFAULT_SEED,
        ..base
    };
    Ok(kv.engine_config(base)?)
}

pub fn fit(input: &Path, out: &Path, classes: Option<usize>) -> CliResult<()> {
    let (dim, records) = read_queries(input)?;
    let labels: Vec<i64> = records.iter().map(|r| r.label as i64).collect();
    let k = match classes {
        Some(k) => k,
        None => labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize),
    };
    let features: Vec<Vec<f32>> = records.into_iter().map(|r| r.feature).collect();
    let model = fit_reference(&features, &labels, k)?;
    save_reference(&model, out)?;
    println!("fitted K={k} classes, d={dim}, {} samples -> {}", features.len(), out.display());
    for c in model.classes() {
        println!("class {}: {}", c.class_id, c.stats.count);
    }
    Ok(())
}

fn split_labelled(records: Vec<QueryRecord>) -> (Vec<Vec<f32>>, Vec<i64>) {
    records.into_iter().map(|r| (r.feature, r.label as i64)).unzip()
}

pub fn calibrate(kv: &KeyValues, model: &Path, seeds: &Path, input: &Path, out: &Path, nudge: bool) -> CliResult<()> {
    let mut cfg = engine_config(kv, EngineConfig::default())?;
    cfg.detector.threshold = f64::INFINITY;
    let gamma = kv.parsed::<f64>(&["gamma"])?.unwrap_or(DEFAULT_GAMMA);
    let engine = load_engine(model, seeds, cfg.clone())?;
    let (dim, records) = read_queries(input)?;
    if dim != engine.dim() {
        return Err(SentinelError::DimensionMismatch {
            expected: engine.dim(),
            actual: dim,
        }
        .into());
    }
    let (features, labels) = split_labelled(records);
    let report = calibrate_tau(&engine, &features, &labels, gamma, nudge)?;

    let mut tuned = KeyValues::default();
    engine_keys(
        &EngineConfig {
            detector: DetectorConfig {
                threshold: report.tau,
                ..cfg.detector.clone()
            },
            ..cfg.clone()
        },
        &mut tuned,
    );
    tuned.set("gamma", gamma);
    tuned.set("acc_star", report.acc_star);
    tuned.set("target", report.target);
    tuned.set("achieved_acc", report.achieved_acc);
    tuned.set("tau_unnudged", report.tau_unnudged);
    tuned.set("unachievable", report.unachievable);
    tuned.set("queries", report.queries);

    let mut sweep = String::from("tau,accuracy\n");
    for p in &report.sweep {
        writeln!(sweep, "{},{}", p.tau, p.accuracy).expect("string write");
    }

    let mut manifest = KeyValues::default();
    engine_keys(&cfg, &mut manifest);
    manifest.set("command", "calibrate");
    manifest.set("gamma", gamma);
    manifest.set("nudge", nudge);
    manifest.set("model", model.display());
    manifest.set("seeds", seeds.display());
    manifest.set("input", input.display());

    std::fs::create_dir_all(out).map_err(SentinelError::from)?;
    write_atomic(&out.join("calibration.txt"), tuned.render().as_bytes())?;
    write_atomic(&out.join("sweep.csv"), sweep.as_bytes())?;
    write_atomic(&out.join("manifest.txt"), manifest.render().as_bytes())?;
    println!(
        "tau={} (unnudged {}), acc*={}, achieved={}, target={}",
        report.tau, report.tau_unnudged, report.acc_star, report.achieved_acc, report.target
    );
    Ok(())
}

const SCORE_HEADER: &str = "account_id,score,flagged,returned_class\n";

pub fn score(
    kv: &KeyValues,
    model: Option<PathBuf>,
    seeds: Option<PathBuf>,
    input: &Path,
    server: Option<String>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let (_, records) = read_queries(input)?;
    let mut csv = String::from(SCORE_HEADER);
    match server {
        Some(url) => {
            let client = Client::new(url);
            let rt = runtime()?;
            for r in records {
                let resp = rt.block_on(client.query(&QueryRequest {
                    account_id: r.account_id.clone(),
                    features: vec![r.feature],
                    response_mode: None,
                }))?;
                writeln!(csv, "{},{},{},{}", r.account_id, resp.scores[0], resp.poisoned[0], resp.classes[0])
                    .expect("string write");
            }
        }
        None => {
            let (Some(model), Some(seeds)) = (model, seeds) else {
                return Err(CliError::Usage("local scoring needs --model and --seeds (or use --server)".into()));
            };
            let engine = load_engine(&model, &seeds, engine_config(kv, EngineConfig::default())?)?;
            for r in &records {
                let o = &engine.process(&r.account_id, std::slice::from_ref(&r.feature))?[0];
                writeln!(csv, "{},{},{},{}", r.account_id, o.score, o.poisoned, o.returned_class())
                    .expect("string write");
            }
        }
    }
    match out {
        Some(path) => write_atomic(&path, csv.as_bytes())?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(SentinelError::from)?,
    }
    Ok(())
}

/// Nearest-rank quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn bench(kv: &KeyValues, out: Option<PathBuf>) -> CliResult<()> {
    let dim = kv.parsed(&["dim", "d"])?.unwrap_or(256);
    let classes = kv.parsed(&["classes", "k"])?.unwrap_or(10);
    let iterations: usize = kv.parsed(&["iterations"])?.unwrap_or(10_000);
    let train_per_class = kv.parsed(&["train_per_class"])?.unwrap_or(presets::TRAIN_PER_CLASS);
    let separation = kv.parsed(&["separation"])?.unwrap_or(6.0);
    if iterations == 0 {
        return Err(SentinelError::InvalidArgument("iterations must be >= 1".into()).into());
    }
    let cfg = engine_config(
        kv,
        EngineConfig {
            detector: DetectorConfig {
                window_size: 64,
                ..DetectorConfig::default()
            },
            ..EngineConfig::default()
        },
    )?;
    let setup = Setup::new(
        WorldParams {
            dim,
            classes,
            surrogate_classes: classes,
            separation,
            seed: cfg.seed,
        },
        train_per_class,
    )?;
    let engine = setup.engine(cfg.detector.clone(), cfg.seed)?;
    let stream = setup.stream(&presets::malicious(iterations), cfg.seed)?;

    let mut micros = Vec::with_capacity(iterations);
    for item in &stream {
        let start = Instant::now();
        engine.process("bench", std::slice::from_ref(&item.feature))?;
        micros.push(start.elapsed().as_secs_f64() * 1e6);
    }
    micros.sort_by(f64::total_cmp);

    let mut manifest = KeyValues::default();
    engine_keys(&cfg, &mut manifest);
    manifest.set("command", "bench");
    manifest.set("dim", dim);
    manifest.set("classes", classes);
    manifest.set("iterations", iterations);
    manifest.set("train_per_class", train_per_class);
    manifest.set("separation", separation);

    let mut report = KeyValues::default();
    report.set("dim", dim);
    report.set("n", cfg.detector.window_size);
    report.set("variant", cfg.detector.variant);
    report.set("iterations", iterations);
    report.set("p50_micros", format!("{:.1}", quantile(&micros, 0.50)));
    report.set("p95_micros", format!("{:.1}", quantile(&micros, 0.95)));
    report.set("p99_micros", format!("{:.1}", quantile(&micros, 0.99)));
    report.set("max_micros", format!("{:.1}", micros[micros.len() - 1]));
    report.set("window_feature_bytes", engine.stats().window_feature_bytes);
    let text = report.render();
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(SentinelError::from)?;
        write_atomic(&dir.join("bench.txt"), text.as_bytes())?;
        write_atomic(&dir.join("manifest.txt"), manifest.render().as_bytes())?;
    }
    Ok(())
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Runtime::new().map_err(SentinelError::from)?)
}

pub fn serve(kv: &KeyValues, model: &Path, seeds: &Path, listen: &str) -> CliResult<()> {
    let engine = std::sync::Arc::new(load_engine(model, seeds, engine_config(kv, EngineConfig::default())?)?);
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen).await.map_err(SentinelError::from)?;
        let addr = listener.local_addr().map_err(SentinelError::from)?;
        eprintln!("listening on http://{addr}");
        serve_http(listener, engine, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(SentinelError::from)?;
        Ok(())
    })
}
