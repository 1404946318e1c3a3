//! Block-wise dual-strategy unlearning loop.
//!
//! One step, given a retain batch and a forget batch:
//!
//! 1. gradients `g_r`, `g_f` of the two batch losses;
//! 2. per parameter group, remove `alpha_L` times the retain-aligned component
//!    of `g_f`, where `L` is the group's current hierarchy level;
//! 3. `g = alpha_retain · g_r − lambda · g_f⊥ + gamma · ∇R` with
//!    `R(θ) = ‖θ − θ₀‖²` over the adapter factors;
//! 4. scale each token's embedding-adapter row by `1 + I(t)`;
//! 5. global-norm clip and Gaussian noise;
//! 6. `θ ← θ − eta · g`.
//!
//! Diagonal FIM estimates for both streams are kept over a sliding window and
//! refresh the parameter-group levels at every block boundary.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::corpus::{BlockSchedule, Dataset, Example};
use crate::error::{Result, UnlearnError};
use crate::hierarchy::{assign_parameter_levels, CoefficientTable, ConceptMap, HierarchyLevel, DEFAULT_FIM_CUTOFFS};
use crate::model::{apply_update, batch_gradients_with_losses, GradientBundle, ModelState};
use crate::privacy::{add_gaussian_noise, clip, NoiseSource, PrivacyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Full,
    GGOnly,
    CTOnly,
    NoDP,
    NoHierarchy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Full, Self::GGOnly, Self::CTOnly, Self::NoDP, Self::NoHierarchy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::GGOnly => "GGOnly",
            Self::CTOnly => "CTOnly",
            Self::NoDP => "NoDP",
            Self::NoHierarchy => "NoHierarchy",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = UnlearnError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnlearnError::Parse(format!("unknown variant {s:?}")))
    }
}

/// What a run does; derived from a [`Variant`] or the ascent baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub retain_term: bool,
    pub projection: bool,
    pub token_intervention: bool,
    pub privacy: bool,
    pub hierarchy: bool,
}

impl Strategy {
    pub fn for_variant(v: Variant) -> Self {
        let all = Self {
            retain_term: true,
            projection: true,
            token_intervention: true,
            privacy: true,
            hierarchy: true,
        };
        match v {
            Variant::Full => all,
            Variant::GGOnly => Self { token_intervention: false, ..all },
            Variant::CTOnly => Self { projection: false, ..all },
            Variant::NoDP => Self { privacy: false, ..all },
            Variant::NoHierarchy => Self { hierarchy: false, ..all },
        }
    }

    /// Plain gradient ascent on the forget loss.
    pub fn gradient_ascent() -> Self {
        Self {
            retain_term: false,
            projection: false,
            token_intervention: false,
            privacy: false,
            hierarchy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub lambda_forget: f64,
    pub gamma_reg: f64,
    pub eta_lr: f64,
    /// Weight on the retain gradient.
    pub alpha_retain_factor: f64,
    pub epsilon_stab: f64,
    /// Upper bound on the forget/retain norm ratio inside a token's importance.
    pub token_ratio_cap: f64,
    pub fim_window: usize,
    /// Optimization steps taken on each block before moving to the next.
    pub steps_per_block: usize,
    /// Passes over the whole block schedule.
    pub epochs: usize,
    pub fim_cutoffs: [f64; 3],
    pub coefficients: CoefficientTable,
    /// Forget-loss ceiling; `None` means ten times `max(initial forget loss, ln V)`.
    pub divergence_ceiling: Option<f64>,
    pub variant: Variant,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            lambda_forget: 1.0,
            gamma_reg: 0.0,
            eta_lr: 0.1,
            alpha_retain_factor: 1.0,
            epsilon_stab: 1e-5,
            token_ratio_cap: 100.0,
            fim_window: 32,
            steps_per_block: 1,
            epochs: 1,
            fim_cutoffs: DEFAULT_FIM_CUTOFFS,
            coefficients: CoefficientTable::default(),
            divergence_ceiling: None,
            variant: Variant::Full,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UnlearnError::InvalidConfig(m.to_string()));
        if !(self.epsilon_stab > 0.0) {
            return bad("epsilon_stab must be positive");
        }
        if !(self.token_ratio_cap >= 0.0) {
            return bad("token_ratio_cap must be non-negative");
        }
        if self.fim_window < 1 {
            return bad("fim_window must be at least 1");
        }
        if !(self.eta_lr >= 0.0) || !(self.lambda_forget >= 0.0) || !(self.gamma_reg >= 0.0) {
            return bad("eta_lr, lambda_forget and gamma_reg must be non-negative");
        }
        if !(self.alpha_retain_factor > 0.0) {
            return bad("alpha_retain_factor must be positive");
        }
        if !(self.fim_cutoffs[0] < self.fim_cutoffs[1] && self.fim_cutoffs[1] < self.fim_cutoffs[2]) {
            return Err(UnlearnError::InvalidCutoffs(self.fim_cutoffs));
        }
        self.coefficients.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Forget,
    Retain,
}

/// Sliding-window diagonal FIM (mean of squared gradients) for both streams.
#[derive(Debug, Clone)]
pub struct FimAccumulator {
    capacity: usize,
    forget: VecDeque<BTreeMap<String, Array2<f64>>>,
    retain: VecDeque<BTreeMap<String, Array2<f64>>>,
}

impl FimAccumulator {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            forget: VecDeque::new(),
            retain: VecDeque::new(),
        }
    }

    fn window(&self, stream: Stream) -> &VecDeque<BTreeMap<String, Array2<f64>>> {
        match stream {
            Stream::Forget => &self.forget,
            Stream::Retain => &self.retain,
        }
    }

    pub fn len(&self, stream: Stream) -> usize {
        self.window(stream).len()
    }

    pub fn update(&mut self, g: &GradientBundle, stream: Stream) {
        let snapshot = g
            .per_group
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| x * x)))
            .collect();
        let cap = self.capacity;
        let w = match stream {
            Stream::Forget => &mut self.forget,
            Stream::Retain => &mut self.retain,
        };
        w.push_back(snapshot);
        while w.len() > cap {
            w.pop_front();
        }
    }

    /// Windowed mean of squared gradients, per group.
    pub fn estimate(&self, stream: Stream) -> BTreeMap<String, Array2<f64>> {
        let w = self.window(stream);
        let mut out: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for snap in w {
            for (k, v) in snap {
                match out.get_mut(k) {
                    Some(acc) => *acc += v,
                    None => {
                        out.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        let n = w.len().max(1) as f64;
        for v in out.values_mut() {
            v.mapv_inplace(|x| x / n);
        }
        out
    }

    /// Per-unit (forget, retain) scalar summaries: the mean diagonal entry.
    /// The embedding adapter contributes one unit per token row.
    pub fn group_summary(&self) -> BTreeMap<String, (f64, f64)> {
        let f = self.estimate(Stream::Forget);
        let r = self.estimate(Stream::Retain);
        let mut out = BTreeMap::new();
        for k in f.keys().chain(r.keys()) {
            let (a, b) = (f.get(k), r.get(k));
            if k == EMBED_ROWS {
                let rows = a.or(b).map_or(0, |x| x.nrows());
                for t in 0..rows {
                    let row_mean = |m: Option<&Array2<f64>>| m.map_or(0.0, |m| m.row(t).mean().unwrap_or(0.0));
                    out.insert(row_unit(t), (row_mean(a), row_mean(b)));
                }
            } else {
                let mean = |m: Option<&Array2<f64>>| m.map_or(0.0, |m| m.mean().unwrap_or(0.0));
                out.insert(k.clone(), (mean(a), mean(b)));
            }
        }
        out
    }
}

/// Sliding window of per-token embedding-gradient norms for both streams.
#[derive(Debug, Clone)]
pub struct TokenNormWindow {
    capacity: usize,
    forget: VecDeque<BTreeMap<usize, f64>>,
    retain: VecDeque<BTreeMap<usize, f64>>,
}

impl TokenNormWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            forget: VecDeque::new(),
            retain: VecDeque::new(),
        }
    }

    pub fn push(&mut self, g_f: &GradientBundle, g_r: &GradientBundle) {
        let sq = |g: &GradientBundle| -> BTreeMap<usize, f64> {
            g.per_token_embedding
                .iter()
                .map(|(&t, v)| (t, v.iter().map(|x| x * x).sum()))
                .collect()
        };
        for (w, g) in [(&mut self.forget, g_f), (&mut self.retain, g_r)] {
            w.push_back(sq(g));
            while w.len() > self.capacity {
                w.pop_front();
            }
        }
    }

    /// Root-mean-square norm per token over the window; absent steps count as zero.
    pub fn rms(&self, stream: Stream) -> BTreeMap<usize, f64> {
        let w = match stream {
            Stream::Forget => &self.forget,
            Stream::Retain => &self.retain,
        };
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for snap in w {
            for (&t, &v) in snap {
                *out.entry(t).or_insert(0.0) += v;
            }
        }
        let n = w.len().max(1) as f64;
        out.values_mut().for_each(|v| *v = (*v / n).sqrt());
        out
    }
}

fn check_len(group: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(UnlearnError::ShapeMismatch {
            group: group.to_string(),
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// `g_f − alpha · ⟨g_f, g_r⟩ / (‖g_r‖² + eps) · g_r`.
pub fn project_forget_gradient(g_f: &[f64], g_r: &[f64], alpha_level: f64, epsilon_stab: f64) -> Result<Vec<f64>> {
    if g_f.len() != g_r.len() {
        return Err(UnlearnError::ShapeMismatch {
            group: "projection".into(),
            expected: (1, g_r.len()),
            got: (1, g_f.len()),
        });
    }
    let dot: f64 = g_f.iter().zip(g_r).map(|(a, b)| a * b).sum();
    let rr: f64 = g_r.iter().map(|b| b * b).sum();
    let denom = rr + epsilon_stab;
    let coef = if denom > 0.0 { alpha_level * dot / denom } else { 0.0 };
    Ok(g_f.iter().zip(g_r).map(|(f, r)| f - coef * r).collect())
}

/// Trainable group whose rows are projected independently, one per token.
pub const EMBED_ROWS: &str = "embed.lora_b";

/// Name of the projection unit for row `t` of [`EMBED_ROWS`].
pub fn row_unit(t: usize) -> String {
    format!("{EMBED_ROWS}[{t}]")
}

/// Projects `g_f` against `g_r` unit by unit: each group is one unit, except
/// [`EMBED_ROWS`], where each token row is its own unit.
pub fn project_bundle(
    g_f: &GradientBundle,
    g_r: &GradientBundle,
    epsilon_stab: f64,
    alpha_of: impl Fn(&str) -> f64,
) -> Result<GradientBundle> {
    let mut out = g_f.clone();
    for (group, f) in out.per_group.iter_mut() {
        let r = g_r
            .per_group
            .get(group)
            .ok_or_else(|| UnlearnError::UnknownGroup(group.clone()))?;
        check_len(group, r, f)?;
        if group == EMBED_ROWS {
            for t in 0..f.nrows() {
                let fr = f.row(t).to_vec();
                let rr = r.row(t).to_vec();
                let p = project_forget_gradient(&fr, &rr, alpha_of(&row_unit(t)), epsilon_stab)?;
                f.row_mut(t).iter_mut().zip(p).for_each(|(x, v)| *x = v);
            }
            continue;
        }
        let p = project_forget_gradient(
            f.as_slice().expect("standard layout"),
            r.as_slice().expect("standard layout"),
            alpha_of(group),
            epsilon_stab,
        )?;
        *f = Array2::from_shape_vec(f.dim(), p).expect("same length");
    }
    Ok(out)
}

/// Gradient of `gamma · ‖θ − θ₀‖²`.
pub fn regularizer_grad(
    current: &BTreeMap<String, Array2<f64>>,
    original: &BTreeMap<String, Array2<f64>>,
    gamma_reg: f64,
) -> Result<BTreeMap<String, Array2<f64>>> {
    current
        .iter()
        .map(|(k, c)| {
            let o = original.get(k).ok_or_else(|| UnlearnError::UnknownGroup(k.clone()))?;
            check_len(k, o, c)?;
            Ok((k.clone(), (c - o) * (2.0 * gamma_reg)))
        })
        .collect()
}

/// `g_r − lambda · g_f⊥ + reg`, group by group.
pub fn combine_objective(
    g_r: &GradientBundle,
    g_f_perp: &GradientBundle,
    lambda_forget: f64,
    reg: &BTreeMap<String, Array2<f64>>,
) -> Result<GradientBundle> {
    let mut out = g_r.clone();
    for (k, t) in out.per_group.iter_mut() {
        let f = g_f_perp.per_group.get(k).ok_or_else(|| UnlearnError::UnknownGroup(k.clone()))?;
        check_len(k, t, f)?;
        t.scaled_add(-lambda_forget, f);
        if let Some(r) = reg.get(k) {
            check_len(k, t, r)?;
            *t += r;
        }
    }
    out.per_token_embedding.clear();
    Ok(out)
}

/// `I = beta · ‖∇_forget‖ / (‖∇_retain‖ + eps)`.
pub fn token_importance(grad_f_norm: f64, grad_r_norm: f64, beta_level: f64, epsilon_stab: f64) -> f64 {
    if grad_f_norm == 0.0 {
        return 0.0;
    }
    beta_level * grad_f_norm / (grad_r_norm + epsilon_stab)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenImportanceTable {
    pub scores: BTreeMap<usize, f64>,
}

impl TokenImportanceTable {
    /// Scores each token in `tokens` from its forget and retain gradient norms.
    /// The norm ratio is capped at `ratio_cap` before `beta` is applied.
    pub fn build(
        tokens: impl IntoIterator<Item = usize>,
        forget_norms: &BTreeMap<usize, f64>,
        retain_norms: &BTreeMap<usize, f64>,
        token_levels: &[HierarchyLevel],
        coefficients: &CoefficientTable,
        epsilon_stab: f64,
        ratio_cap: f64,
    ) -> Self {
        let scores = tokens
            .into_iter()
            .map(|t| {
                let nf = forget_norms.get(&t).copied().unwrap_or(0.0);
                let nr = retain_norms.get(&t).copied().unwrap_or(0.0);
                let beta = coefficients.get(token_levels[t]).beta_unlearn;
                let ratio = token_importance(nf, nr, 1.0, epsilon_stab).min(ratio_cap);
                (t, beta * ratio)
            })
            .collect();
        Self { scores }
    }

    /// Single-batch table: norms come from `g_f` and `g_r` alone.
    pub fn from_batch(
        g_f: &GradientBundle,
        g_r: &GradientBundle,
        token_levels: &[HierarchyLevel],
        coefficients: &CoefficientTable,
        epsilon_stab: f64,
        ratio_cap: f64,
    ) -> Self {
        let mut w = TokenNormWindow::new(1);
        w.push(g_f, g_r);
        Self::build(
            g_f.per_token_embedding.keys().copied(),
            &w.rms(Stream::Forget),
            &w.rms(Stream::Retain),
            token_levels,
            coefficients,
            epsilon_stab,
            ratio_cap,
        )
    }
}

/// Scales each scored token's embedding-adapter row by `1 + I(t)`.
pub fn apply_token_intervention(g_total: &GradientBundle, table: &TokenImportanceTable) -> Result<GradientBundle> {
    if let Some((&t, _)) = table.scores.iter().find(|(_, s)| !s.is_finite() || **s < 0.0) {
        return Err(UnlearnError::NonFiniteScore(t));
    }
    let mut out = g_total.clone();
    if let Some(rows) = out.per_group.get_mut(EMBED_ROWS) {
        for (&t, &s) in &table.scores {
            if s != 0.0 && t < rows.nrows() {
                rows.row_mut(t).mapv_inplace(|x| x * (1.0 + s));
            }
        }
    }
    Ok(out)
}

pub fn compute_gradient_pair(
    m: &ModelState,
    b_r: &[&Example],
    b_f: &[&Example],
) -> Result<(GradientBundle, GradientBundle)> {
    if b_r.is_empty() || b_f.is_empty() {
        return Err(UnlearnError::EmptyBatch);
    }
    let (g_r, _) = batch_gradients_with_losses(m, b_r)?;
    let (g_f, _) = batch_gradients_with_losses(m, b_f)?;
    Ok((g_r, g_f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub block: usize,
    pub loss_forget: f64,
    pub loss_retain: f64,
    /// Mean answer-token loss per level over both batches; `None` when a level is absent.
    pub token_loss: [Option<f64>; 4],
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Parameter levels in force for each block.
    pub param_levels: Vec<BTreeMap<String, HierarchyLevel>>,
    pub elapsed_seconds: f64,
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// The increment added to the trainable groups (`−eta · g̃`).
    pub update: GradientBundle,
    pub g_r: GradientBundle,
    pub g_f: GradientBundle,
    pub record: TraceRecord,
}

/// Everything a step needs besides the model and batches.
pub struct StepContext<'a> {
    pub cfg: &'a UnlearnConfig,
    pub strategy: Strategy,
    pub privacy: &'a PrivacyParams,
    pub concepts: &'a ConceptMap,
    pub theta0: &'a BTreeMap<String, Array2<f64>>,
    /// Token-norm history before this step; `None` scores from the current batches only.
    pub token_window: Option<&'a TokenNormWindow>,
}

impl StepContext<'_> {
    fn coefficients(&self) -> CoefficientTable {
        if self.strategy.hierarchy {
            self.cfg.coefficients
        } else {
            self.cfg.coefficients.flattened()
        }
    }
}

fn level_means(batches: [(&[&Example], &[f64]); 2], token_levels: &[HierarchyLevel]) -> [Option<f64>; 4] {
    let mut sum = [0.0; 4];
    let mut n = [0usize; 4];
    for (batch, losses) in batches {
        for (e, l) in batch.iter().zip(losses) {
            let lvl = token_levels[e.answer[0]].index();
            sum[lvl] += l;
            n[lvl] += 1;
        }
    }
    std::array::from_fn(|i| (n[i] > 0).then(|| sum[i] / n[i] as f64))
}

/// One step on `(b_r, b_f)`. Returns the updated model and what was applied.
pub fn unlearning_step(
    m: &ModelState,
    b_r: &[&Example],
    b_f: &[&Example],
    ctx: &StepContext<'_>,
    noise: &mut NoiseSource,
) -> Result<(ModelState, StepOutcome)> {
    if b_r.is_empty() || b_f.is_empty() {
        return Err(UnlearnError::EmptyBatch);
    }
    let cfg = ctx.cfg;
    let s = ctx.strategy;
    let coeffs = ctx.coefficients();
    let (g_r, losses_r) = batch_gradients_with_losses(m, b_r)?;
    let (g_f, losses_f) = batch_gradients_with_losses(m, b_f)?;

    let g_f_perp = if s.projection {
        project_bundle(&g_f, &g_r, cfg.epsilon_stab, |group| {
            coeffs.get(ctx.concepts.param(group)).alpha_preserve
        })?
    } else {
        g_f.clone()
    };

    let mut retain_part = if s.retain_term {
        g_r.clone()
    } else {
        let mut z = g_r.clone();
        z.scale(0.0);
        z
    };
    retain_part.scale(cfg.alpha_retain_factor);
    let reg = if s.retain_term && cfg.gamma_reg > 0.0 {
        regularizer_grad(&m.trainable_params(), ctx.theta0, cfg.gamma_reg)?
    } else {
        BTreeMap::new()
    };
    let mut g_total = combine_objective(&retain_part, &g_f_perp, cfg.lambda_forget, &reg)?;

    if s.token_intervention {
        let mut window = ctx.token_window.cloned().unwrap_or_else(|| TokenNormWindow::new(1));
        window.push(&g_f, &g_r);
        let table = TokenImportanceTable::build(
            g_f.per_token_embedding.keys().copied(),
            &window.rms(Stream::Forget),
            &window.rms(Stream::Retain),
            &ctx.concepts.token_level,
            &coeffs,
            cfg.epsilon_stab,
            cfg.token_ratio_cap,
        );
        g_total = apply_token_intervention(&g_total, &table)?;
    }
    let grad_norm_pre = g_total.norm();
    // Clipping applies whenever a finite bound is set; noise only under the privacy strategy.
    let clipped = if ctx.privacy.clip_norm.is_finite() {
        clip(&g_total, ctx.privacy.clip_norm)
    } else {
        g_total
    };
    let g_tilde = if s.privacy && ctx.privacy.enabled {
        add_gaussian_noise(&clipped, ctx.privacy.sigma, noise)
    } else {
        clipped
    };
    let grad_norm_post = g_tilde.norm();
    let mut update = g_tilde;
    update.scale(-cfg.eta_lr);
    update.per_token_embedding.clear();
    let next = apply_update(m, &update)?;

    let record = TraceRecord {
        step: 0,
        block: 0,
        loss_forget: g_f.loss_value,
        loss_retain: g_r.loss_value,
        token_loss: level_means([(b_f, &losses_f), (b_r, &losses_r)], &ctx.concepts.token_level),
        grad_norm_pre,
        grad_norm_post,
    };
    Ok((next, StepOutcome { update, g_r, g_f, record }))
}

/// Runs the full block schedule and returns the unlearned model with its trace.
///
/// `concepts.token_level` must cover the model vocabulary; parameter levels are
/// recomputed from the FIM window at the first step of every block.
#[allow(clippy::too_many_arguments)]
pub fn run_unlearning(
    m: &ModelState,
    forget: &Dataset,
    retain: &Dataset,
    schedule: &BlockSchedule,
    cfg: &UnlearnConfig,
    strategy: Strategy,
    privacy: &PrivacyParams,
    concepts: &ConceptMap,
    noise: &mut NoiseSource,
) -> Result<(ModelState, RunTrace)> {
    cfg.validate()?;
    if concepts.vocab_size() != m.config.vocab_size {
        return Err(UnlearnError::InvalidConfig(format!(
            "concept map covers {} tokens, model has {}",
            concepts.vocab_size(),
            m.config.vocab_size
        )));
    }
    let start = Instant::now();
    let f_by_id = forget.by_id();
    let r_by_id = retain.by_id();
    let lookup = |map: &BTreeMap<u64, &Example>, ids: &[u64]| -> Result<Vec<Example>> {
        ids.iter()
            .map(|id| {
                map.get(id)
                    .map(|e| (*e).clone())
                    .ok_or_else(|| UnlearnError::InvalidConfig(format!("schedule references unknown example {id}")))
            })
            .collect()
    };
    let theta0 = m.trainable_params();
    let mut concepts = concepts.clone();
    let mut fim = FimAccumulator::new(cfg.fim_window);
    let mut token_window = TokenNormWindow::new(cfg.fim_window);
    let mut model = m.clone();
    let mut trace = RunTrace::default();
    let mut ceiling = cfg.divergence_ceiling;
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        for (bi, block) in schedule.blocks.iter().enumerate() {
            let b_f_owned = lookup(&f_by_id, &block.forget_ids)?;
            let b_r_owned = lookup(&r_by_id, &block.retain_ids)?;
            let b_f: Vec<&Example> = b_f_owned.iter().collect();
            let b_r: Vec<&Example> = b_r_owned.iter().collect();
            for k in 0..cfg.steps_per_block {
                if k == 0 {
                    // Levels for this block come from the window including its first gradients.
                    let (g_r, g_f) = compute_gradient_pair(&model, &b_r, &b_f)?;
                    fim.update(&g_f, Stream::Forget);
                    fim.update(&g_r, Stream::Retain);
                    concepts.param_level = assign_parameter_levels(&fim.group_summary(), cfg.fim_cutoffs)?;
                    trace.param_levels.push(concepts.param_level.clone());
                }
                let ctx = StepContext {
                    cfg,
                    strategy,
                    privacy,
                    concepts: &concepts,
                    theta0: &theta0,
                    token_window: Some(&token_window),
                };
                let (next, mut out) = unlearning_step(&model, &b_r, &b_f, &ctx, noise)?;
                if k > 0 {
                    fim.update(&out.g_f, Stream::Forget);
                    fim.update(&out.g_r, Stream::Retain);
                }
                token_window.push(&out.g_f, &out.g_r);
                let limit = *ceiling.get_or_insert_with(|| {
                    10.0 * out.record.loss_forget.max((m.config.vocab_size as f64).ln())
                });
                let loss = out.record.loss_forget;
                if !loss.is_finite() || loss > limit || !out.update.is_finite() {
                    return Err(UnlearnError::DivergenceDetected { step, loss, ceiling: limit });
                }
                out.record.step = step;
                out.record.block = bi;
                trace.records.push(out.record);
                model = next;
                step += 1;
            }
        }
    }
    trace.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}
