//! Files written to and read from a run directory.
//!
//! ```text
//! <run>/config.toml        resolved configuration
//! <run>/reports.csv        one row per (seed, method)
//! <run>/summary.csv        mean and sample std per method
//! <run>/accuracy.csv       per-level and per-subject accuracy, Original included
//! <run>/traces/*.jsonl     one step record per line
//! <run>/metadata.json      timestamps, wall-clock figures, privacy settings per run
//! <run>/plots/*.csv        written by emit-plots
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::engine::TraceRecord;
use unlearn_core::eval::EvalReport;
use unlearn_core::privacy::PrivacyParams;
use unlearn_core::report::{self, format_value, RowContext, METRIC_COLUMNS};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORTS_FILE: &str = "reports.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const TRACES_DIR: &str = "traces";
pub const PLOTS_DIR: &str = "plots";

/// Everything recorded for one (seed, method) pair.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub seed: u64,
    pub method: String,
    pub corpus_id: String,
    pub report: EvalReport,
    pub epsilon: f64,
    pub updated_params: usize,
    pub privacy: PrivacyParams,
    pub trace: Vec<TraceRecord>,
    pub seconds: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AccuracyRecord {
    pub seed: u64,
    pub method: String,
    /// `level` or `subject`.
    pub kind: String,
    pub key: String,
    pub accuracy: String,
}

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub command: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub runs: Vec<RunTiming>,
}

#[derive(Debug, Serialize)]
pub struct RunTiming {
    pub seed: u64,
    pub method: String,
    pub seconds: f64,
    pub tem_hours: f64,
    pub tem_ratio: f64,
    pub privacy: PrivacyRecord,
}

/// Privacy settings as written to metadata; infinities become `null`.
#[derive(Debug, Serialize)]
pub struct PrivacyRecord {
    pub enabled: bool,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sampling_rate_q: f64,
    pub clip_norm: Option<f64>,
    pub sigma: f64,
}

impl From<&PrivacyParams> for PrivacyRecord {
    fn from(p: &PrivacyParams) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        Self {
            enabled: p.enabled,
            epsilon: finite(p.epsilon),
            delta: p.delta,
            sampling_rate_q: p.sampling_rate_q,
            clip_norm: finite(p.clip_norm),
            sigma: p.sigma,
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::BadArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn trace_path(dir: &Path, method: &str, seed: u64) -> PathBuf {
    dir.join(TRACES_DIR).join(format!("{method}-seed{seed}.jsonl"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::write(path, text).map_err(CliError::io(path))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let bad = |e: csv::Error| CliError::BadArtifact {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    };
    w.write_record(header).map_err(bad)?;
    for r in rows {
        w.write_record(&r).map_err(bad)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::BadArtifact {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn reports_csv(rows: &[RunRow]) -> Result<String> {
    csv_text(
        &report::header(),
        rows.iter().map(|r| {
            report::csv_row(
                &r.report,
                &RowContext {
                    seed: r.seed,
                    method: &r.method,
                    corpus_id: &r.corpus_id,
                    epsilon: r.epsilon,
                    updated_params: r.updated_params,
                },
            )
        }),
    )
}

/// One row per method, in first-seen order: `method, n_seeds, <m>_mean, <m>_std, ...`.
pub fn summary_csv(rows: &[RunRow]) -> Result<String> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut header = vec!["method".to_string(), "n_seeds".to_string()];
    for c in METRIC_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let body = methods.iter().map(|&m| {
        let values: Vec<[f64; 18]> = rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| report::metric_values(&r.report, r.epsilon, r.updated_params))
            .collect();
        let mut out = vec![m.to_string(), values.len().to_string()];
        for j in 0..METRIC_COLUMNS.len() {
            let col: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let (mean, std) = if col.iter().all(|x| x.is_infinite()) {
                (col[0], 0.0)
            } else {
                report::mean_std(&col)
            };
            out.push(format_value(mean));
            out.push(format_value(std));
        }
        out
    });
    csv_text(&header_refs, body)
}

pub fn accuracy_records(seed: u64, method: &str, r: &EvalReport, target_subject: &str) -> Vec<AccuracyRecord> {
    let mut out: Vec<AccuracyRecord> = r
        .acc_by_level
        .iter()
        .map(|(l, a)| AccuracyRecord {
            seed,
            method: method.into(),
            kind: "level".into(),
            key: l.to_string(),
            accuracy: format_value(*a),
        })
        .collect();
    let mut subjects: Vec<(String, f64)> = r.acc_by_subject.iter().map(|(s, a)| (s.clone(), *a)).collect();
    subjects.push((target_subject.to_string(), 1.0 - r.fr));
    subjects.sort_by(|a, b| a.0.cmp(&b.0));
    out.extend(subjects.into_iter().map(|(s, a)| AccuracyRecord {
        seed,
        method: method.into(),
        kind: "subject".into(),
        key: s,
        accuracy: format_value(a),
    }));
    out
}

pub fn accuracy_csv(records: &[AccuracyRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let path = PathBuf::from(ACCURACY_FILE);
    for r in records {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::BadArtifact {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn trace_jsonl(records: &[TraceRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace records serialize") + "\n")
        .collect()
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::MissingArtifacts {
            dir: dir.to_path_buf(),
            what: name.to_string(),
        })
    }
}

fn read_accuracy(path: &Path) -> Result<Vec<AccuracyRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|x| x.map_err(csv_err(path))).collect()
}

/// Trace files as `(method, seed, records)`, sorted by file name.
fn read_traces(dir: &Path) -> Result<Vec<(String, u64, Vec<TraceRecord>)>> {
    let tdir = dir.join(TRACES_DIR);
    let entries = fs::read_dir(&tdir).map_err(|_| CliError::MissingArtifacts {
        dir: dir.to_path_buf(),
        what: TRACES_DIR.to_string(),
    })?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for p in names {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let bad = |m: String| CliError::BadArtifact {
            path: p.clone(),
            message: m,
        };
        let (method, seed) = stem
            .rsplit_once("-seed")
            .ok_or_else(|| bad("expected <method>-seed<N>.jsonl".into()))?;
        let seed: u64 = seed.parse().map_err(|_| bad(format!("bad seed {seed:?}")))?;
        let text = fs::read_to_string(&p).map_err(CliError::io(&p))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<TraceRecord>>>()?;
        out.push((method.to_string(), seed, records));
    }
    if out.is_empty() {
        return Err(CliError::MissingArtifacts {
            dir: dir.to_path_buf(),
            what: format!("{TRACES_DIR}/*.jsonl"),
        });
    }
    Ok(out)
}

/// Token-loss categories: surgical = L4, memorized = L3, general = mean of L1 and L2.
pub fn token_categories(r: &TraceRecord) -> [(&'static str, Option<f64>); 3] {
    let general: Vec<f64> = r.token_loss[..2].iter().flatten().copied().collect();
    [
        ("surgical", r.token_loss[3]),
        ("memorized", r.token_loss[2]),
        ("general", (!general.is_empty()).then(|| general.iter().sum::<f64>() / general.len() as f64)),
    ]
}

/// Writes the plot series under `<dir>/plots` and returns the file paths.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    require(dir, REPORTS_FILE)?;
    let acc = read_accuracy(&require(dir, ACCURACY_FILE)?)?;
    let traces = read_traces(dir)?;
    let pdir = dir.join(PLOTS_DIR);

    let levels: Vec<Vec<String>> = acc
        .iter()
        .filter(|a| a.kind == "level")
        .map(|a| vec![a.seed.to_string(), a.method.clone(), a.key.clone(), a.accuracy.clone()])
        .collect();

    let before: Vec<&AccuracyRecord> = acc.iter().filter(|a| a.kind == "subject" && a.method == "Original").collect();
    let mut subjects = Vec::new();
    for a in acc.iter().filter(|a| a.kind == "subject" && a.method != "Original") {
        let b = before
            .iter()
            .find(|b| b.seed == a.seed && b.key == a.key)
            .map_or("nan".to_string(), |b| b.accuracy.clone());
        subjects.push(vec![a.seed.to_string(), a.method.clone(), a.key.clone(), b, a.accuracy.clone()]);
    }

    let mut losses = Vec::new();
    for (method, seed, records) in &traces {
        for r in records {
            for (cat, v) in token_categories(r) {
                if let Some(v) = v {
                    losses.push(vec![seed.to_string(), method.clone(), r.step.to_string(), cat.to_string(), format_value(v)]);
                }
            }
        }
    }

    let files = [
        ("level_accuracy.csv", csv_text(&["seed", "checkpoint", "level", "accuracy"], levels)?),
        ("subject_accuracy.csv", csv_text(&["seed", "method", "subject", "before", "after"], subjects)?),
        ("token_loss.csv", csv_text(&["seed", "method", "step", "category", "loss"], losses)?),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let p = pdir.join(name);
        write_text(&p, &text)?;
        out.push(p);
    }
    Ok(out)
}
