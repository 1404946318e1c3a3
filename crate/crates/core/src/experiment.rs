//! Per-seed pipeline: corpus, original fit, unlearning methods, evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate_synthetic, partition, schedule_blocks, split_by_subject, Dataset, TARGET_SUBJECT};
use crate::engine::{run_unlearning, RunTrace, Strategy, Variant};
use crate::error::Result;
use crate::eval::{evaluate, EvalInputs, EvalReport};
use crate::hierarchy::{ConceptMap, HierarchyLevel};
use crate::model::{fit_backbone, init_model, FitSummary, ModelState};
use crate::privacy::{NoiseSource, PrivacyParams};

/// A method evaluated on one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Original,
    GradientAscent,
    Variant(Variant),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "Original",
            Method::GradientAscent => "GradientAscent",
            Method::Variant(v) => v.name(),
        }
    }
}

/// Independent stream seeds derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub corpus: u64,
    pub partition: u64,
    pub init: u64,
    pub fit: u64,
    pub schedule: u64,
    pub noise: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        // splitmix64 output of seed + k·golden.
        let mix = |k: u64| {
            let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            corpus: mix(1),
            partition: mix(2),
            init: mix(3),
            fit: mix(4),
            schedule: mix(5),
            noise: mix(6),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedData {
    pub token_levels: Vec<HierarchyLevel>,
    pub forget_train: Dataset,
    pub retain_train: Dataset,
    pub forget_test: Dataset,
    pub retain_test: Dataset,
    pub train: Dataset,
}

pub fn prepare_data(cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    let plan = SeedPlan::new(seed);
    let (all, token_levels) = generate_synthetic(&cfg.corpus_spec(plan.corpus))?;
    let (train, _val, test) = partition(&all, cfg.corpus.split, plan.partition)?;
    let (forget_train, retain_train) = split_by_subject(&train, TARGET_SUBJECT)?;
    let (forget_test, retain_test) = split_by_subject(&test, TARGET_SUBJECT)?;
    Ok(SeedData {
        token_levels,
        forget_train,
        retain_train,
        forget_test,
        retain_test,
        train,
    })
}

/// Data, fitted model and its evaluation for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub data: SeedData,
    pub original: ModelState,
    pub fit: FitSummary,
    pub original_report: EvalReport,
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let plan = SeedPlan::new(seed);
    let data = prepare_data(cfg, seed)?;
    let mut model = init_model(cfg.model_config(), plan.init)?;
    let fit = fit_backbone(&mut model, &data.train, &cfg.fit, plan.fit)?;
    let original_report = evaluate_model(&model, &data, f64::INFINITY, model.total_count(), 0.0, 1.0)?;
    Ok(Prepared {
        seed,
        data,
        original: model,
        fit,
        original_report,
    })
}

fn evaluate_model(
    m: &ModelState,
    data: &SeedData,
    epsilon: f64,
    updated_params: usize,
    runtime_hours: f64,
    baseline_runtime_hours: f64,
) -> Result<EvalReport> {
    evaluate(
        m,
        &EvalInputs {
            forget_test: &data.forget_test,
            retain_test: &data.retain_test,
            members: &data.forget_train,
            nonmembers: &data.forget_test,
            token_levels: &data.token_levels,
            epsilon,
            updated_params,
            runtime_hours,
            baseline_runtime_hours,
        },
    )
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub model: ModelState,
    pub report: EvalReport,
    pub trace: RunTrace,
    /// Privacy budget the run was reported under; infinite without noise.
    pub epsilon: f64,
    /// Clipping and noise settings the run used.
    pub privacy: PrivacyParams,
    /// Number of parameters the method updated.
    pub updated_params: usize,
}

/// Runs one unlearning method from the prepared original model.
///
/// `baseline_seconds` is the reference runtime for the time ratio; `None` uses
/// this run's own runtime.
pub fn run_method(cfg: &RunConfig, p: &Prepared, method: Method, baseline_seconds: Option<f64>) -> Result<MethodRun> {
    let plan = SeedPlan::new(p.seed);
    if method == Method::Original {
        return Ok(MethodRun {
            method,
            model: p.original.clone(),
            report: p.original_report.clone(),
            trace: RunTrace::default(),
            epsilon: f64::INFINITY,
            privacy: PrivacyParams::disabled(),
            updated_params: 0,
        });
    }
    let mut ucfg = cfg.unlearn_config()?;
    // Without the privacy strategy the step is still clipped, but no noise is added.
    let clip_only = PrivacyParams {
        clip_norm: cfg.privacy.clip_norm,
        ..PrivacyParams::disabled()
    };
    let (strategy, privacy) = match method {
        Method::Variant(v) => {
            ucfg.variant = v;
            let s = Strategy::for_variant(v);
            let privacy = if s.privacy {
                cfg.privacy_params(p.data.forget_train.len())?
            } else {
                clip_only
            };
            (s, privacy)
        }
        _ => (Strategy::gradient_ascent(), clip_only),
    };
    let schedule = schedule_blocks(
        &p.data.forget_train,
        &p.data.retain_train,
        cfg.unlearn.block_size,
        cfg.unlearn.retain_ratio_m,
        plan.schedule,
    )?;
    let concepts = ConceptMap {
        token_level: p.data.token_levels.clone(),
        param_level: BTreeMap::new(),
    };
    let mut noise = NoiseSource::new(plan.noise);
    let (model, trace) = run_unlearning(
        &p.original,
        &p.data.forget_train,
        &p.data.retain_train,
        &schedule,
        &ucfg,
        strategy,
        &privacy,
        &concepts,
        &mut noise,
    )?;
    let hours = trace.elapsed_seconds / 3600.0;
    let base_hours = baseline_seconds.map_or(hours, |s| s / 3600.0);
    let report = evaluate_model(
        &model,
        &p.data,
        privacy.effective_epsilon(),
        model.trainable_count(),
        hours,
        if base_hours > 0.0 { base_hours } else { 1.0 },
    )?;
    Ok(MethodRun {
        method,
        updated_params: model.trainable_count(),
        epsilon: privacy.effective_epsilon(),
        privacy,
        model,
        report,
        trace,
    })
}
