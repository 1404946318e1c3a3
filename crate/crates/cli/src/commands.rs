use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use unlearn_core::config::RunConfig;
use unlearn_core::corpus::TARGET_SUBJECT;
use unlearn_core::engine::Variant;
use unlearn_core::experiment::{prepare, run_method, Method, MethodRun, Prepared};
use unlearn_core::UnlearnError;

use crate::artifacts::{self, AccuracyRecord, Metadata, RunRow, RunTiming};
use crate::error::{CliError, Result};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
}

/// Reads, overrides and validates a config. Every failure is a config error.
pub fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
    }
    if let Some(v) = &o.variant {
        cfg.variant = v.clone();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, o: &Overrides, verb: &str) -> PathBuf {
    o.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(verb))
}

/// Short digest of everything that determines the corpus for `seed`.
pub fn corpus_id(cfg: &RunConfig, seed: u64) -> String {
    let spec = toml::to_string(&cfg.corpus).expect("corpus section serializes");
    let mut h = Sha256::new();
    h.update(spec.as_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Result of one command: where it wrote and the rows it produced.
#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub rows: Vec<RunRow>,
}

fn row(cfg: &RunConfig, p: &Prepared, r: MethodRun) -> RunRow {
    RunRow {
        seed: p.seed,
        method: r.method.name().to_string(),
        corpus_id: corpus_id(cfg, p.seed),
        epsilon: r.epsilon,
        updated_params: r.updated_params,
        privacy: r.privacy,
        seconds: r.trace.elapsed_seconds,
        trace: r.trace.records,
        report: r.report,
    }
}

fn execute(cfg: &RunConfig, methods: &[Method], verb: &str, dir: &Path) -> Result<Outcome> {
    let started = now();
    let mut rows = Vec::new();
    let mut accuracy: Vec<AccuracyRecord> = Vec::new();
    for &seed in &cfg.seeds {
        let p = prepare(cfg, seed)?;
        accuracy.extend(artifacts::accuracy_records(seed, "Original", &p.original_report, TARGET_SUBJECT));
        // Time ratios are relative to the first method on the same seed.
        let mut reference: Option<f64> = None;
        for &m in methods {
            let r = run_method(cfg, &p, m, reference)?;
            reference.get_or_insert(r.trace.elapsed_seconds);
            accuracy.extend(artifacts::accuracy_records(seed, r.method.name(), &r.report, TARGET_SUBJECT));
            rows.push(row(cfg, &p, r));
        }
    }

    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    artifacts::write_text(&dir.join(artifacts::CONFIG_FILE), &cfg.to_toml())?;
    artifacts::write_text(&dir.join(artifacts::REPORTS_FILE), &artifacts::reports_csv(&rows)?)?;
    artifacts::write_text(&dir.join(artifacts::SUMMARY_FILE), &artifacts::summary_csv(&rows)?)?;
    artifacts::write_text(&dir.join(artifacts::ACCURACY_FILE), &artifacts::accuracy_csv(&accuracy)?)?;
    for r in &rows {
        artifacts::write_text(&artifacts::trace_path(dir, &r.method, r.seed), &artifacts::trace_jsonl(&r.trace))?;
    }
    let meta = Metadata {
        command: verb.to_string(),
        started_unix_s: started,
        finished_unix_s: now(),
        runs: rows
            .iter()
            .map(|r| RunTiming {
                seed: r.seed,
                method: r.method.clone(),
                seconds: r.seconds,
                tem_hours: r.report.tem_hours,
                tem_ratio: r.report.tem_ratio,
                privacy: (&r.privacy).into(),
            })
            .collect(),
    };
    let meta_text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    artifacts::write_text(&dir.join(artifacts::METADATA_FILE), &meta_text)?;
    Ok(Outcome {
        dir: dir.to_path_buf(),
        rows,
    })
}

fn runtime(e: UnlearnError) -> CliError {
    CliError::Runtime(e)
}

/// Runs the configured variant on every seed.
pub fn cmd_run(config: &Path, o: &Overrides) -> Result<Outcome> {
    let cfg = load_config(config, o)?;
    let v = cfg.variant_kind().map_err(runtime)?;
    execute(&cfg, &[Method::Variant(v)], "run", &out_dir(&cfg, o, "run"))
}

/// Runs all five variants on every seed.
pub fn cmd_ablate(config: &Path, o: &Overrides) -> Result<Outcome> {
    let cfg = load_config(config, o)?;
    let methods: Vec<Method> = Variant::ALL.iter().map(|&v| Method::Variant(v)).collect();
    execute(&cfg, &methods, "ablate", &out_dir(&cfg, o, "ablate"))
}

/// Runs plain gradient ascent next to the configured variant.
pub fn cmd_baseline(config: &Path, o: &Overrides) -> Result<Outcome> {
    let cfg = load_config(config, o)?;
    let v = cfg.variant_kind().map_err(runtime)?;
    execute(
        &cfg,
        &[Method::GradientAscent, Method::Variant(v)],
        "baseline",
        &out_dir(&cfg, o, "baseline"),
    )
}

pub fn cmd_emit_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    artifacts::emit_plots(run_dir)
}

/// Mean ± std table of the headline metrics, one line per method.
pub fn comparison_table(rows: &[RunRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = format!(
        "{:<15} {:>13} {:>13} {:>13} {:>13} {:>13}\n",
        "method", "FR (%)", "KP (%)", "US (%)", "HMTA", "MIA resist"
    );
    for m in methods {
        let sel: Vec<&RunRow> = rows.iter().filter(|r| r.method == m).collect();
        let cell = |f: &dyn Fn(&RunRow) -> f64, scale: f64| {
            let xs: Vec<f64> = sel.iter().map(|r| f(r) * scale).collect();
            let (mean, std) = unlearn_core::report::mean_std(&xs);
            format!("{mean:.1} ± {std:.1}")
        };
        let cell3 = |f: &dyn Fn(&RunRow) -> f64| {
            let xs: Vec<f64> = sel.iter().map(|r| f(r)).collect();
            let (mean, std) = unlearn_core::report::mean_std(&xs);
            format!("{mean:.3} ± {std:.3}")
        };
        out.push_str(&format!(
            "{:<15} {:>13} {:>13} {:>13} {:>13} {:>13}\n",
            m,
            cell(&|r| r.report.fr, 100.0),
            cell(&|r| r.report.kpr, 100.0),
            cell(&|r| r.report.us, 100.0),
            cell3(&|r| r.report.hmta),
            cell3(&|r| r.report.mia_resist),
        ));
    }
    out
}
