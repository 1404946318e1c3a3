//! Browser bindings. Every export returns a JSON string so the page needs no
//! generated type glue beyond `wasm-bindgen`'s own.

use serde::Serialize;
use unlearn_core::config::RunConfig;
use unlearn_core::engine::{project_forget_gradient, Variant};
use unlearn_core::experiment::{prepare, run_method, Method};
use unlearn_core::eval::EvalReport;
use unlearn_core::hierarchy::HierarchyLevel;
use unlearn_core::privacy::{calibrate_sigma, dp_strength};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct Projection {
    pub projected: [f64; 2],
    /// Cosine between the projected forget gradient and the retain gradient.
    pub cos_with_retain: f64,
}

/// Projects `g_f` against `g_r` in the plane.
pub fn projection(g_f: [f64; 2], g_r: [f64; 2], alpha: f64) -> Result<Projection, String> {
    let p = project_forget_gradient(&g_f, &g_r, alpha, 1e-12).map_err(|e| e.to_string())?;
    let np = p[0].hypot(p[1]);
    let nr = g_r[0].hypot(g_r[1]);
    let cos = if np > 0.0 && nr > 0.0 {
        (p[0] * g_r[0] + p[1] * g_r[1]) / (np * nr)
    } else {
        0.0
    };
    Ok(Projection {
        projected: [p[0], p[1]],
        cos_with_retain: cos,
    })
}

#[derive(Serialize)]
pub struct SigmaPoint {
    pub epsilon: f64,
    pub sigma: f64,
    pub dp_strength: f64,
}

/// Noise level and reported strength for `n` budgets spaced evenly in `[eps_lo, eps_hi]`.
pub fn sigma_curve(q: f64, delta: f64, eps_lo: f64, eps_hi: f64, n: usize) -> Result<Vec<SigmaPoint>, String> {
    if n < 2 || !(eps_lo > 0.0 && eps_hi > eps_lo) {
        return Err("need n >= 2 and 0 < eps_lo < eps_hi".into());
    }
    (0..n)
        .map(|i| {
            let epsilon = eps_lo + (eps_hi - eps_lo) * i as f64 / (n - 1) as f64;
            Ok(SigmaPoint {
                epsilon,
                sigma: calibrate_sigma(q, epsilon, delta).map_err(|e| e.to_string())?,
                dp_strength: dp_strength(epsilon),
            })
        })
        .collect()
}

#[derive(Serialize)]
pub struct Snapshot {
    pub fr: f64,
    pub kpr: f64,
    pub hmta: f64,
    pub mia_resist: f64,
    /// Accuracy for L1..L4.
    pub acc_by_level: Vec<f64>,
}

impl From<&EvalReport> for Snapshot {
    fn from(r: &EvalReport) -> Self {
        Self {
            fr: r.fr,
            kpr: r.kpr,
            hmta: r.hmta,
            mia_resist: r.mia_resist,
            acc_by_level: HierarchyLevel::ALL
                .iter()
                .map(|l| r.acc_by_level.get(l).copied().unwrap_or(f64::NAN))
                .collect(),
        }
    }
}

#[derive(Serialize)]
pub struct DemoRun {
    pub variant: String,
    pub n_forget: usize,
    pub n_retain: usize,
    pub before: Snapshot,
    pub after: Snapshot,
    pub loss_forget: Vec<f64>,
    pub loss_retain: Vec<f64>,
}

/// The desk benchmark shrunk to run in a page in a few seconds.
pub fn demo_config(seed: u64, epsilon: f64) -> RunConfig {
    let mut cfg = RunConfig {
        seeds: vec![seed],
        ..RunConfig::default()
    };
    cfg.corpus.vocab_size = 128;
    cfg.corpus.n_examples = 800;
    cfg.privacy.epsilon = epsilon;
    cfg
}

pub fn unlearning_run(seed: u64, variant: &str, epsilon: f64) -> Result<DemoRun, String> {
    let mut cfg = demo_config(seed, epsilon);
    cfg.variant = variant.to_string();
    cfg.validate().map_err(|e| e.to_string())?;
    let v: Variant = cfg.variant_kind().map_err(|e| e.to_string())?;
    let p = prepare(&cfg, seed).map_err(|e| e.to_string())?;
    let r = run_method(&cfg, &p, Method::Variant(v), None).map_err(|e| e.to_string())?;
    Ok(DemoRun {
        variant: v.name().to_string(),
        n_forget: p.data.forget_train.len(),
        n_retain: p.data.retain_train.len(),
        before: (&p.original_report).into(),
        after: (&r.report).into(),
        loss_forget: r.trace.records.iter().map(|t| t.loss_forget).collect(),
        loss_retain: r.trace.records.iter().map(|t| t.loss_retain).collect(),
    })
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = project)]
pub fn project_js(fx: f64, fy: f64, rx: f64, ry: f64, alpha: f64) -> Result<String, JsValue> {
    json(projection([fx, fy], [rx, ry], alpha))
}

#[wasm_bindgen(js_name = sigmaCurve)]
pub fn sigma_curve_js(q: f64, delta: f64, eps_lo: f64, eps_hi: f64, n: usize) -> Result<String, JsValue> {
    json(sigma_curve(q, delta, eps_lo, eps_hi, n))
}

#[wasm_bindgen(js_name = runUnlearning)]
pub fn unlearning_run_js(seed: u32, variant: &str, epsilon: f64) -> Result<String, JsValue> {
    json(unlearning_run(seed as u64, variant, epsilon))
}
