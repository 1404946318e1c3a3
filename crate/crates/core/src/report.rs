//! Flat serializations of [`EvalReport`].
//!
//! The CSV layout is fixed: [`ID_COLUMNS`] followed by [`METRIC_COLUMNS`].
//! Wall-clock fields (`tem_hours`, `tem_ratio`) are left out of the CSV so
//! that rows depend only on the configuration; they appear in the key-value
//! document.

use crate::eval::EvalReport;
use crate::hierarchy::HierarchyLevel;

/// Identity columns of a report row.
pub const ID_COLUMNS: [&str; 3] = ["seed", "method", "corpus_id"];

/// Metric columns of a report row, in order.
pub const METRIC_COLUMNS: [&str; 18] = [
    "fr",
    "kpr",
    "us",
    "hmta",
    "mia_auc",
    "mia_resist",
    "privacy_risk",
    "dp_strength",
    "acc_l1",
    "acc_l2",
    "acc_l3",
    "acc_l4",
    "chs",
    "msd",
    "per",
    "mcr",
    "epsilon",
    "updated_params",
];

/// Extra inputs that identify a row and are not part of the report itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowContext<'a> {
    pub seed: u64,
    pub method: &'a str,
    pub corpus_id: &'a str,
    pub epsilon: f64,
    pub updated_params: usize,
}

fn level(r: &EvalReport, l: HierarchyLevel) -> f64 {
    r.acc_by_level.get(&l).copied().unwrap_or(f64::NAN)
}

/// Metric values in [`METRIC_COLUMNS`] order.
pub fn metric_values(r: &EvalReport, epsilon: f64, updated_params: usize) -> [f64; 18] {
    use HierarchyLevel::*;
    [
        r.fr,
        r.kpr,
        r.us,
        r.hmta,
        r.mia_auc,
        r.mia_resist,
        r.privacy_risk,
        r.dp_strength,
        level(r, L1),
        level(r, L2),
        level(r, L3),
        level(r, L4),
        r.chs,
        r.msd,
        r.per,
        r.mcr,
        epsilon,
        updated_params as f64,
    ]
}

/// Fixed-precision rendering used in every CSV cell.
pub fn format_value(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else if x.is_nan() {
        "nan".into()
    } else if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x:.6}")
    }
}

pub fn header() -> Vec<&'static str> {
    ID_COLUMNS.iter().chain(METRIC_COLUMNS.iter()).copied().collect()
}

pub fn csv_row(r: &EvalReport, ctx: &RowContext<'_>) -> Vec<String> {
    let mut row = vec![ctx.seed.to_string(), ctx.method.to_string(), ctx.corpus_id.to_string()];
    row.extend(metric_values(r, ctx.epsilon, ctx.updated_params).iter().map(|&x| format_value(x)));
    row
}

/// `key = value` lines covering every report field, including timing.
pub fn to_key_values(r: &EvalReport) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: f64| out.push_str(&format!("{k} = {}\n", format_value(v)));
    put("fr", r.fr);
    put("kpr", r.kpr);
    put("us", r.us);
    put("hmta", r.hmta);
    put("mia_auc", r.mia_auc);
    put("mia_resist", r.mia_resist);
    put("privacy_risk", r.privacy_risk);
    put("dp_strength", r.dp_strength);
    for (l, a) in &r.acc_by_level {
        put(&format!("acc_{}", l.to_string().to_lowercase()), *a);
    }
    for (s, a) in &r.acc_by_subject {
        put(&format!("acc_subject_{s}"), *a);
    }
    put("chs", r.chs);
    put("msd", r.msd);
    put("per", r.per);
    put("mcr", r.mcr);
    put("tem_hours", r.tem_hours);
    put("tem_ratio", r.tem_ratio);
    out
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report() -> EvalReport {
        EvalReport {
            fr: 0.8,
            kpr: 0.9,
            us: 0.85,
            hmta: 2.0 * 0.72 / 1.7,
            mia_auc: 0.555,
            mia_resist: 0.89,
            privacy_risk: 0.11,
            dp_strength: 0.2,
            acc_by_level: HierarchyLevel::ALL.iter().map(|&l| (l, 0.5)).collect(),
            acc_by_subject: BTreeMap::from([("cardiology".to_string(), 0.9)]),
            chs: 0.0,
            msd: 0.0,
            per: 0.01,
            mcr: 1.2,
            tem_hours: 0.001,
            tem_ratio: 1.0,
        }
    }

    #[test]
    fn row_matches_header() {
        let ctx = RowContext {
            seed: 42,
            method: "Full",
            corpus_id: "abc",
            epsilon: 4.0,
            updated_params: 100,
        };
        let row = csv_row(&report(), &ctx);
        assert_eq!(row.len(), header().len());
        assert_eq!(&row[..4], &["42", "Full", "abc", "0.800000"]);
        assert_eq!(row.last().unwrap(), "100");
    }

    #[test]
    fn key_values_include_timing() {
        let kv = to_key_values(&report());
        assert!(kv.contains("tem_hours = 0.001000\n"));
        assert!(kv.contains("acc_l4 = 0.500000\n"));
        assert!(kv.contains("acc_subject_cardiology = 0.900000\n"));
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(f64::INFINITY), "inf");
        assert_eq!(format_value(3.0), "3");
        assert_eq!(format_value(0.1234567), "0.123457");
    }

    #[test]
    fn sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
