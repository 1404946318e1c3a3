//! Tiny next-token language model with LoRA adapters and exact reverse-mode
//! gradients.
//!
//! For position `p` the context is the mean of the effective embeddings of
//! tokens `0..p`. The context runs through `n_blocks` residual dense blocks
//! `h ← h + tanh(W'h + b)` and a linear output head. Losses are mean
//! cross-entropy over masked (answer) positions.
//!
//! Effective weights are `W' = W + scaling · B·A`. The backbone (`W`, biases,
//! embedding table, head) is frozen once unlearning starts; only the adapter
//! factors are trainable. Adapters sit on the embedding table (`B` is
//! `vocab × r`, so each token owns one trainable row) and on every dense block.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{loss_mask, Dataset, Example};
use crate::error::{Result, UnlearnError};

/// Adapter target name of the embedding table.
pub const EMBED: &str = "embed";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub lora_rank: usize,
    /// LoRA alpha; adapter scaling is `lora_alpha / lora_rank`.
    pub lora_alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UnlearnError::InvalidDimension(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.d_model < 4 {
            return bad("d_model must be at least 4");
        }
        if self.n_blocks < 1 {
            return bad("n_blocks must be at least 1");
        }
        if self.lora_rank < 1 || self.lora_rank > self.d_model {
            return bad("lora_rank must lie in 1..=d_model");
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive");
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embed: Array2<f64>,
    pub blocks: Vec<DenseBlock>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `EMBED` or `block<k>`.
    pub target: String,
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scaling
    }

    pub fn b_group(&self) -> String {
        format!("{}.lora_b", self.target)
    }

    pub fn a_group(&self) -> String {
        format!("{}.lora_a", self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// Index 0 adapts the embedding table, index `k + 1` adapts block `k`.
    pub adapters: Vec<LoraAdapter>,
    /// Bumped on every parameter change; forward caches are tied to it.
    pub revision: u64,
}

/// Gradients of trainable groups plus per-token embedding gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBundle {
    pub per_group: BTreeMap<String, Array2<f64>>,
    /// Gradient with respect to the effective embedding row of each token.
    pub per_token_embedding: BTreeMap<usize, Array1<f64>>,
    pub loss_value: f64,
}

impl GradientBundle {
    pub fn zeros_like(m: &ModelState) -> Self {
        Self {
            per_group: m
                .trainable_shapes()
                .into_iter()
                .map(|(g, (r, c))| (g, Array2::zeros((r, c))))
                .collect(),
            per_token_embedding: BTreeMap::new(),
            loss_value: 0.0,
        }
    }

    /// Global L2 norm over all groups.
    pub fn norm(&self) -> f64 {
        self.per_group
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.per_group.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_group.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Per-position activations needed by the backward pass.
#[derive(Debug, Clone)]
struct PositionCache {
    pos: usize,
    target: usize,
    /// `hs[0]` is the context, `hs[k+1]` the output of block `k`.
    hs: Vec<Array1<f64>>,
    acts: Vec<Array1<f64>>,
    probs: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    tokens: Vec<usize>,
    positions: Vec<PositionCache>,
    pub loss: f64,
}

/// Dense gradients with respect to every effective weight.
#[derive(Debug, Clone)]
struct FullGrads {
    embed_rows: BTreeMap<usize, Array1<f64>>,
    block_w: Vec<Array2<f64>>,
    block_b: Vec<Array1<f64>>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl FullGrads {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            embed_rows: BTreeMap::new(),
            block_w: vec![Array2::zeros((d, d)); c.n_blocks],
            block_b: vec![Array1::zeros(d); c.n_blocks],
            head_w: Array2::zeros((c.vocab_size, d)),
            head_b: Array1::zeros(c.vocab_size),
        }
    }
}

/// Gradients of the frozen backbone, used only while fitting the original model.
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub embed: Array2<f64>,
    pub block_w: Vec<Array2<f64>>,
    pub block_b: Vec<Array1<f64>>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub loss_value: f64,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Builds a model with seeded backbone weights, zero `B` and random `A`
/// factors, so the adapted model initially equals the backbone.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, r) = (config.vocab_size, config.d_model, config.lora_rank);
    let inv = 1.0 / (d as f64).sqrt();
    let embed = normal_matrix(&mut rng, v, d, 1.0);
    let blocks = (0..config.n_blocks)
        .map(|_| DenseBlock {
            weight: normal_matrix(&mut rng, d, d, inv),
            bias: Array1::zeros(d),
        })
        .collect();
    let head_weight = normal_matrix(&mut rng, v, d, inv);
    let mut adapters = vec![LoraAdapter {
        target: EMBED.to_string(),
        b: Array2::zeros((v, r)),
        a: normal_matrix(&mut rng, r, d, inv),
        scaling: config.scaling(),
    }];
    for k in 0..config.n_blocks {
        adapters.push(LoraAdapter {
            target: format!("block{k}"),
            b: Array2::zeros((d, r)),
            a: normal_matrix(&mut rng, r, d, inv),
            scaling: config.scaling(),
        });
    }
    Ok(ModelState {
        config,
        backbone: Backbone {
            embed,
            blocks,
            head_weight,
            head_bias: Array1::zeros(v),
        },
        adapters,
        revision: 0,
    })
}

impl ModelState {
    pub fn embed_adapter(&self) -> &LoraAdapter {
        &self.adapters[0]
    }

    pub fn block_adapter(&self, k: usize) -> &LoraAdapter {
        &self.adapters[k + 1]
    }

    /// Trainable group ids with their shapes, in a fixed order.
    pub fn trainable_shapes(&self) -> Vec<(String, (usize, usize))> {
        self.adapters
            .iter()
            .flat_map(|a| [(a.b_group(), a.b.dim()), (a.a_group(), a.a.dim())])
            .collect()
    }

    pub fn backbone_group_ids(&self) -> Vec<String> {
        let mut ids = vec![EMBED.to_string()];
        for k in 0..self.config.n_blocks {
            ids.push(format!("block{k}.weight"));
            ids.push(format!("block{k}.bias"));
        }
        ids.push("head.weight".into());
        ids.push("head.bias".into());
        ids
    }

    pub fn trainable_param(&self, group: &str) -> Option<&Array2<f64>> {
        self.adapters.iter().find_map(|a| {
            if group == a.b_group() {
                Some(&a.b)
            } else if group == a.a_group() {
                Some(&a.a)
            } else {
                None
            }
        })
    }

    fn trainable_param_mut(&mut self, group: &str) -> Option<&mut Array2<f64>> {
        self.adapters.iter_mut().find_map(|a| {
            if group == a.b_group() {
                Some(&mut a.b)
            } else if group == a.a_group() {
                Some(&mut a.a)
            } else {
                None
            }
        })
    }

    /// Snapshot of all trainable tensors, keyed by group id.
    pub fn trainable_params(&self) -> BTreeMap<String, Array2<f64>> {
        self.adapters
            .iter()
            .flat_map(|a| [(a.b_group(), a.b.clone()), (a.a_group(), a.a.clone())])
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(|a| a.b.len() + a.a.len()).sum()
    }

    pub fn backbone_count(&self) -> usize {
        let b = &self.backbone;
        b.embed.len()
            + b.blocks.iter().map(|k| k.weight.len() + k.bias.len()).sum::<usize>()
            + b.head_weight.len()
            + b.head_bias.len()
    }

    pub fn total_count(&self) -> usize {
        self.trainable_count() + self.backbone_count()
    }

    /// Effective embedding row for one token.
    pub fn embedding_row(&self, token: usize) -> Array1<f64> {
        let ad = self.embed_adapter();
        let mut row = self.backbone.embed.row(token).to_owned();
        let lora = ad.b.row(token).dot(&ad.a);
        row.scaled_add(ad.scaling, &lora);
        row
    }

    fn effective_block_weights(&self) -> Vec<Array2<f64>> {
        self.backbone
            .blocks
            .iter()
            .enumerate()
            .map(|(k, blk)| &blk.weight + &self.block_adapter(k).delta())
            .collect()
    }

    /// Removes the adapters' contribution, yielding a model equal to the backbone.
    pub fn without_adapters(&self) -> ModelState {
        let mut m = self.clone();
        for a in &mut m.adapters {
            a.b.fill(0.0);
        }
        m
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&t) => Err(UnlearnError::TokenOutOfRange {
                id: t,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }
}

fn logits_and_states(
    m: &ModelState,
    eff_w: &[Array2<f64>],
    context: Array1<f64>,
) -> (Vec<Array1<f64>>, Vec<Array1<f64>>, Array1<f64>) {
    let mut hs = Vec::with_capacity(eff_w.len() + 1);
    let mut acts = Vec::with_capacity(eff_w.len());
    hs.push(context);
    for (k, w) in eff_w.iter().enumerate() {
        let h = hs.last().expect("context pushed");
        let mut z = w.dot(h);
        z += &m.backbone.blocks[k].bias;
        let a = z.mapv(f64::tanh);
        let next = h + &a;
        acts.push(a);
        hs.push(next);
    }
    let mut logits = m.backbone.head_weight.dot(hs.last().expect("nonempty"));
    logits += &m.backbone.head_bias;
    (hs, acts, logits)
}

fn softmax(logits: &Array1<f64>) -> (Array1<f64>, f64) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|x| (x - max).exp());
    let z = exp.sum();
    (exp / z, max + z.ln())
}

/// Prefix means of effective embeddings for the requested positions.
fn contexts(m: &ModelState, tokens: &[usize], positions: &[usize]) -> Vec<Array1<f64>> {
    let d = m.config.d_model;
    let rows: BTreeMap<usize, Array1<f64>> = tokens
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|&t| (t, m.embedding_row(t)))
        .collect();
    let mut prefix = Array1::<f64>::zeros(d);
    let mut out = Vec::with_capacity(positions.len());
    let mut next = 0usize;
    for &p in positions {
        while next < p {
            prefix += &rows[&tokens[next]];
            next += 1;
        }
        out.push(if p == 0 { Array1::zeros(d) } else { &prefix / p as f64 });
    }
    out
}

/// Mean cross-entropy over masked positions, plus the cache for [`backward`].
pub fn forward_loss(m: &ModelState, tokens: &[usize], mask: &[bool]) -> Result<(f64, ForwardCache)> {
    if mask.len() != tokens.len() {
        return Err(UnlearnError::MaskLength {
            tokens: tokens.len(),
            mask: mask.len(),
        });
    }
    m.check_tokens(tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).filter(|&p| mask[p]).collect();
    if positions.is_empty() {
        return Err(UnlearnError::EmptyMask);
    }
    let eff_w = m.effective_block_weights();
    let ctx = contexts(m, tokens, &positions);
    let mut caches = Vec::with_capacity(positions.len());
    let mut total = 0.0;
    for (&p, c) in positions.iter().zip(ctx) {
        let (hs, acts, logits) = logits_and_states(m, &eff_w, c);
        let (probs, lse) = softmax(&logits);
        total += lse - logits[tokens[p]];
        caches.push(PositionCache {
            pos: p,
            target: tokens[p],
            hs,
            acts,
            probs,
        });
    }
    let loss = total / positions.len() as f64;
    Ok((
        loss,
        ForwardCache {
            revision: m.revision,
            tokens: tokens.to_vec(),
            positions: caches,
            loss,
        },
    ))
}

/// Adds `weight ×` the gradient of the cached loss to `acc`.
fn accumulate(m: &ModelState, eff_w: &[Array2<f64>], cache: &ForwardCache, weight: f64, acc: &mut FullGrads) {
    let n = cache.positions.len() as f64;
    let w = weight / n;
    let d = m.config.d_model;
    for pc in &cache.positions {
        let mut dlogits = pc.probs.clone();
        dlogits[pc.target] -= 1.0;
        dlogits *= w;
        let h_last = pc.hs.last().expect("nonempty");
        for (i, &g) in dlogits.iter().enumerate() {
            if g != 0.0 {
                acc.head_w.row_mut(i).scaled_add(g, h_last);
            }
        }
        acc.head_b += &dlogits;
        let mut dh = m.backbone.head_weight.t().dot(&dlogits);
        for k in (0..eff_w.len()).rev() {
            let a = &pc.acts[k];
            let dz = &dh * &a.mapv(|x| 1.0 - x * x);
            let h_in = &pc.hs[k];
            for (i, &g) in dz.iter().enumerate() {
                acc.block_w[k].row_mut(i).scaled_add(g, h_in);
            }
            acc.block_b[k] += &dz;
            dh = dh + eff_w[k].t().dot(&dz);
        }
        if pc.pos > 0 {
            let share = &dh / pc.pos as f64;
            for &t in &cache.tokens[..pc.pos] {
                acc.embed_rows
                    .entry(t)
                    .or_insert_with(|| Array1::zeros(d))
                    .scaled_add(1.0, &share);
            }
        }
    }
}

fn to_bundle(m: &ModelState, full: FullGrads, loss: f64) -> GradientBundle {
    let mut per_group = BTreeMap::new();
    let emb = m.embed_adapter();
    let (v, r, d) = (m.config.vocab_size, m.config.lora_rank, m.config.d_model);
    let mut db = Array2::<f64>::zeros((v, r));
    let mut da = Array2::<f64>::zeros((r, d));
    for (&t, g) in &full.embed_rows {
        let row = emb.a.dot(g) * emb.scaling;
        db.row_mut(t).assign(&row);
        let b_row = emb.b.row(t);
        for j in 0..r {
            if b_row[j] != 0.0 {
                da.row_mut(j).scaled_add(emb.scaling * b_row[j], g);
            }
        }
    }
    per_group.insert(emb.b_group(), db);
    per_group.insert(emb.a_group(), da);
    for (k, gw) in full.block_w.iter().enumerate() {
        let ad = m.block_adapter(k);
        per_group.insert(ad.b_group(), gw.dot(&ad.a.t()) * ad.scaling);
        per_group.insert(ad.a_group(), ad.b.t().dot(gw) * ad.scaling);
    }
    GradientBundle {
        per_group,
        per_token_embedding: full.embed_rows,
        loss_value: loss,
    }
}

/// Exact gradients of the cached loss for every trainable group, plus the
/// embedding-row gradient of every token that occurs in the input.
pub fn backward(m: &ModelState, cache: &ForwardCache) -> Result<GradientBundle> {
    if cache.revision != m.revision {
        return Err(UnlearnError::StaleCache {
            cache: cache.revision,
            model: m.revision,
        });
    }
    let eff_w = m.effective_block_weights();
    let mut full = FullGrads::zeros(&m.config);
    accumulate(m, &eff_w, cache, 1.0, &mut full);
    Ok(to_bundle(m, full, cache.loss))
}

fn batch_full(m: &ModelState, batch: &[&Example]) -> Result<(FullGrads, Vec<f64>)> {
    if batch.is_empty() {
        return Err(UnlearnError::EmptyBatch);
    }
    let eff_w = m.effective_block_weights();
    let mut full = FullGrads::zeros(&m.config);
    let w = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    for e in batch {
        let (l, cache) = forward_loss(m, &e.tokens(), &loss_mask(e))?;
        accumulate(m, &eff_w, &cache, w, &mut full);
        losses.push(l);
    }
    Ok((full, losses))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Gradient of the mean per-example loss over `batch`.
pub fn batch_gradients(m: &ModelState, batch: &[&Example]) -> Result<GradientBundle> {
    Ok(batch_gradients_with_losses(m, batch)?.0)
}

/// Like [`batch_gradients`], also returning each example's loss in batch order.
pub fn batch_gradients_with_losses(m: &ModelState, batch: &[&Example]) -> Result<(GradientBundle, Vec<f64>)> {
    let (full, losses) = batch_full(m, batch)?;
    let bundle = to_bundle(m, full, mean(&losses));
    Ok((bundle, losses))
}

/// Backbone gradients of the mean per-example loss (adapters held fixed).
pub fn backbone_gradients(m: &ModelState, batch: &[&Example]) -> Result<BackboneGrads> {
    let (full, losses) = batch_full(m, batch)?;
    let mut embed = Array2::zeros((m.config.vocab_size, m.config.d_model));
    for (t, g) in full.embed_rows {
        embed.row_mut(t).assign(&g);
    }
    Ok(BackboneGrads {
        embed,
        block_w: full.block_w,
        block_b: full.block_b,
        head_w: full.head_w,
        head_b: full.head_b,
        loss_value: mean(&losses),
    })
}

/// Returns `m` with `step` added to the named trainable groups.
pub fn apply_update(m: &ModelState, step: &GradientBundle) -> Result<ModelState> {
    let backbone: BTreeSet<String> = m.backbone_group_ids().into_iter().collect();
    let mut next = m.clone();
    for (group, delta) in &step.per_group {
        if backbone.contains(group) {
            return Err(UnlearnError::FrozenGroupTouched(group.clone()));
        }
        let param = next
            .trainable_param_mut(group)
            .ok_or_else(|| UnlearnError::UnknownGroup(group.clone()))?;
        if param.dim() != delta.dim() {
            return Err(UnlearnError::ShapeMismatch {
                group: group.clone(),
                expected: param.dim(),
                got: delta.dim(),
            });
        }
        *param += delta;
    }
    next.revision += 1;
    Ok(next)
}

/// Per-example loss (mean over answer positions).
pub fn example_loss(m: &ModelState, e: &Example) -> Result<f64> {
    Ok(forward_loss(m, &e.tokens(), &loss_mask(e))?.0)
}

/// Teacher-forced greedy predictions at each answer position.
pub fn predict_answers(m: &ModelState, e: &Example) -> Result<Vec<usize>> {
    let tokens = e.tokens();
    m.check_tokens(&tokens)?;
    let positions: Vec<usize> = (e.question.len()..tokens.len()).collect();
    let eff_w = m.effective_block_weights();
    Ok(contexts(m, &tokens, &positions)
        .into_iter()
        .map(|c| {
            let (_, _, logits) = logits_and_states(m, &eff_w, c);
            argmax(logits.view())
        })
        .collect())
}

/// Lowest index among the maxima.
fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn is_correct(m: &ModelState, e: &Example) -> Result<bool> {
    Ok(predict_answers(m, e)? == e.answer)
}

/// Fraction of examples whose every answer token is predicted exactly.
pub fn accuracy(m: &ModelState, d: &Dataset) -> Result<f64> {
    accuracy_of(m, d.examples.iter())
}

pub fn accuracy_of<'a>(m: &ModelState, examples: impl Iterator<Item = &'a Example>) -> Result<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for e in examples {
        n += 1;
        hits += is_correct(m, e)? as usize;
    }
    if n == 0 {
        return Err(UnlearnError::EmptyDataset);
    }
    Ok(hits as f64 / n as f64)
}

/// Settings for fitting the backbone before unlearning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop once train accuracy reaches this value.
    pub target_accuracy: f64,
    /// Continue this many epochs after reaching the target.
    pub extra_epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_epochs: 400,
            batch_size: 32,
            learning_rate: 0.01,
            target_accuracy: 1.0,
            extra_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step<'a>(&mut self, lr: f64, params: impl Iterator<Item = (&'a mut f64, f64)>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, (p, g)) in params.enumerate() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Fits the backbone with minibatch Adam (full fine-tuning, adapters untouched).
pub fn fit_backbone(m: &mut ModelState, train: &Dataset, cfg: &FitConfig, seed: u64) -> Result<FitSummary> {
    use rand::seq::SliceRandom;
    if train.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(m.backbone_count());
    let mut order: Vec<&Example> = train.examples.iter().collect();
    let mut summary = FitSummary { epochs: 0, train_accuracy: 0.0, final_loss: f64::NAN };
    let mut remaining_extra: Option<usize> = None;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let g = backbone_gradients(m, batch)?;
            loss += g.loss_value * batch.len() as f64;
            let b = &mut m.backbone;
            let params = b
                .embed
                .iter_mut()
                .zip(g.embed.iter().copied())
                .chain(b.blocks.iter_mut().zip(&g.block_w).zip(&g.block_b).flat_map(|((blk, gw), gb)| {
                    blk.weight
                        .iter_mut()
                        .zip(gw.iter().copied())
                        .chain(blk.bias.iter_mut().zip(gb.iter().copied()))
                }))
                .chain(b.head_weight.iter_mut().zip(g.head_w.iter().copied()))
                .chain(b.head_bias.iter_mut().zip(g.head_b.iter().copied()));
            adam.step(cfg.learning_rate, params);
            m.revision += 1;
        }
        summary.epochs = epoch + 1;
        summary.final_loss = loss / train.len() as f64;
        match remaining_extra {
            Some(0) => break,
            Some(ref mut k) => *k -= 1,
            None => {
                if epoch % 5 == 4 && accuracy(m, train)? >= cfg.target_accuracy {
                    remaining_extra = Some(cfg.extra_epochs);
                }
            }
        }
    }
    summary.train_accuracy = accuracy(m, train)?;
    Ok(summary)
}

const CHECKPOINT_MAGIC: &str = "unlearn-checkpoint v1";

/// Name, shape, frozen flag and values.
type NamedTensor = (String, (usize, usize), bool, Vec<f64>);

fn tensors_in_order(m: &ModelState) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    let b = &m.backbone;
    let mat = |a: &Array2<f64>| (a.dim(), a.iter().copied().collect::<Vec<_>>());
    let vec1 = |a: &Array1<f64>| ((1, a.len()), a.to_vec());
    let (s, v) = mat(&b.embed);
    out.push((EMBED.to_string(), s, true, v));
    for (k, blk) in b.blocks.iter().enumerate() {
        let (s, v) = mat(&blk.weight);
        out.push((format!("block{k}.weight"), s, true, v));
        let (s, v) = vec1(&blk.bias);
        out.push((format!("block{k}.bias"), s, true, v));
    }
    let (s, v) = mat(&b.head_weight);
    out.push(("head.weight".into(), s, true, v));
    let (s, v) = vec1(&b.head_bias);
    out.push(("head.bias".into(), s, true, v));
    for a in &m.adapters {
        let (s, v) = mat(&a.b);
        out.push((a.b_group(), s, false, v));
        let (s, v) = mat(&a.a);
        out.push((a.a_group(), s, false, v));
    }
    out
}

/// Writes `manifest.txt` and `tensors.bin` (little-endian f64, manifest order) into `dir`.
///
/// Manifest lines after the magic and config lines are
/// `tensor <group-id> <rows> <cols> <frozen|trainable>`.
pub fn save_checkpoint(m: &ModelState, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let c = &m.config;
    let mut manifest = format!(
        "{CHECKPOINT_MAGIC}\nvocab_size {}\nd_model {}\nn_blocks {}\nlora_rank {}\nlora_alpha {:016x}\nrevision {}\n",
        c.vocab_size,
        c.d_model,
        c.n_blocks,
        c.lora_rank,
        c.lora_alpha.to_bits(),
        m.revision
    );
    let mut bin = fs::File::create(dir.join("tensors.bin"))?;
    for (group, (r, cols), frozen, values) in tensors_in_order(m) {
        manifest.push_str(&format!(
            "tensor {group} {r} {cols} {}\n",
            if frozen { "frozen" } else { "trainable" }
        ));
        let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
        bin.write_all(&bytes)?;
    }
    fs::write(dir.join("manifest.txt"), manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let io = |e: std::io::Error| UnlearnError::Parse(format!("checkpoint io: {e}"));
    let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(io)?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("tensors.bin"))
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io)?;
    let mut lines = manifest.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(UnlearnError::Parse("bad checkpoint magic".into()));
    }
    let mut header = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f[..] {
            ["tensor", g, r, c, _] => {
                let p = |s: &str| s.parse::<usize>().map_err(|_| UnlearnError::Parse(line.into()));
                tensors.push((g.to_string(), p(r)?, p(c)?));
            }
            [k, v] => {
                header.insert(k.to_string(), v.to_string());
            }
            _ => return Err(UnlearnError::Parse(format!("bad manifest line {line:?}"))),
        }
    }
    let get = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| UnlearnError::Parse(format!("manifest lacks {k}")))
    };
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| UnlearnError::Parse(k.into()));
    let alpha_bits = u64::from_str_radix(&get("lora_alpha")?, 16)
        .map_err(|_| UnlearnError::Parse("lora_alpha".into()))?;
    let config = ModelConfig {
        vocab_size: num("vocab_size")?,
        d_model: num("d_model")?,
        n_blocks: num("n_blocks")?,
        lora_rank: num("lora_rank")?,
        lora_alpha: f64::from_bits(alpha_bits),
    };
    let mut m = init_model(config, 0)?;
    m.revision = get("revision")?.parse().map_err(|_| UnlearnError::Parse("revision".into()))?;
    let expected = tensors_in_order(&m);
    if expected.len() != tensors.len() {
        return Err(UnlearnError::Parse("tensor count mismatch".into()));
    }
    let mut floats = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = floats.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(UnlearnError::Parse("tensors.bin truncated".into()))
        }
    };
    let n_blocks = m.config.n_blocks;
    for ((group, r, c), (eg, es, _, _)) in tensors.iter().zip(&expected) {
        if group != eg || (*r, *c) != *es {
            return Err(UnlearnError::Parse(format!("unexpected tensor {group}")));
        }
        let vals = read(r * c)?;
        let as_mat = || Array2::from_shape_vec((*r, *c), vals.clone()).expect("shape checked");
        let b = &mut m.backbone;
        if group == EMBED {
            b.embed = as_mat();
        } else if group == "head.weight" {
            b.head_weight = as_mat();
        } else if group == "head.bias" {
            b.head_bias = Array1::from(vals);
        } else if let Some(k) = (0..n_blocks).find(|k| *group == format!("block{k}.weight")) {
            b.blocks[k].weight = as_mat();
        } else if let Some(k) = (0..n_blocks).find(|k| *group == format!("block{k}.bias")) {
            b.blocks[k].bias = Array1::from(vals);
        } else {
            *m.trainable_param_mut(group).expect("trainable group") = as_mat();
        }
    }
    if floats.next().is_some() {
        return Err(UnlearnError::Parse("tensors.bin has trailing data".into()));
    }
    Ok(m)
}

/// L2 norm of one token's embedding gradient (0 when the token is absent).
pub fn embedding_grad_norm(g: &GradientBundle, token: usize) -> f64 {
    g.per_token_embedding
        .get(&token)
        .map(|v| v.dot(v).sqrt())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitTag;

    fn cfg(v: usize, d: usize, n: usize, r: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            d_model: d,
            n_blocks: n,
            lora_rank: r,
            lora_alpha: 16.0,
        }
    }

    fn ex(q: Vec<usize>, a: Vec<usize>) -> Example {
        Example { id: 0, subject: "s".into(), question: q, answer: a }
    }

    #[test]
    fn zero_b_means_adapters_are_inert() {
        let m = init_model(cfg(16, 8, 2, 2), 3).unwrap();
        let toks = [1, 2, 3, 4];
        let mask = [false, false, true, true];
        let (a, _) = forward_loss(&m, &toks, &mask).unwrap();
        let mut stripped = m.clone();
        for ad in &mut stripped.adapters {
            ad.a.fill(0.0);
        }
        let (b, _) = forward_loss(&stripped, &toks, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_dimensions() {
        assert!(matches!(init_model(cfg(16, 8, 1, 0), 0), Err(UnlearnError::InvalidDimension(_))));
        assert!(matches!(init_model(cfg(16, 3, 1, 1), 0), Err(UnlearnError::InvalidDimension(_))));
        assert!(matches!(init_model(cfg(16, 8, 1, 9), 0), Err(UnlearnError::InvalidDimension(_))));
    }

    #[test]
    fn parameter_counts_match_enumeration() {
        let m = init_model(cfg(64, 32, 2, 4), 0).unwrap();
        let (v, d, n, r) = (64, 32, 2, 4);
        let backbone = v * d + n * (d * d + d) + v * d + v;
        let trainable = v * r + r * d + n * (d * r + r * d);
        assert_eq!(m.backbone_count(), backbone);
        assert_eq!(m.trainable_count(), trainable);
        let enumerated: usize = tensors_in_order(&m).iter().map(|t| t.3.len()).sum();
        assert_eq!(enumerated, m.total_count());
        let per = m.trainable_count() as f64 / m.total_count() as f64;
        assert!((per - 896.0 / 7168.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = init_model(cfg(64, 8, 1, 2), 1).unwrap();
        m.backbone.head_weight.fill(0.0);
        let (loss, _) = forward_loss(&m, &[3, 4, 5], &[false, true, true]).unwrap();
        assert!((loss - (64f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_bad_lengths() {
        let m = init_model(cfg(8, 4, 1, 1), 1).unwrap();
        assert_eq!(forward_loss(&m, &[1, 2], &[false, false]).unwrap_err(), UnlearnError::EmptyMask);
        assert!(matches!(forward_loss(&m, &[1, 2], &[true]), Err(UnlearnError::MaskLength { .. })));
        assert!(matches!(forward_loss(&m, &[1, 9], &[false, true]), Err(UnlearnError::TokenOutOfRange { .. })));
    }

    #[test]
    fn three_token_cross_entropy_by_hand() {
        // One block with zero weights leaves the context unchanged.
        let mut m = init_model(cfg(3, 4, 1, 1), 0).unwrap();
        m.backbone.blocks[0].weight.fill(0.0);
        m.backbone.embed = Array2::from_shape_vec(
            (3, 4),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        m.backbone.head_weight = Array2::from_shape_vec(
            (3, 4),
            vec![2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        // Context for position 2 is mean(e0, e1) = (0.5, 0.5, 0, 0).
        // logits = (1.0, 0.5, 1.0); target 2.
        let (loss, _) = forward_loss(&m, &[0, 1, 2], &[false, false, true]).unwrap();
        let expect = -(1.0f64.exp() / (1.0f64.exp() + 0.5f64.exp() + 1.0f64.exp())).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn stale_cache_rejected() {
        let m = init_model(cfg(8, 4, 1, 1), 1).unwrap();
        let (_, cache) = forward_loss(&m, &[1, 2, 3], &[false, false, true]).unwrap();
        let m2 = apply_update(&m, &GradientBundle::zeros_like(&m)).unwrap();
        assert!(matches!(backward(&m2, &cache), Err(UnlearnError::StaleCache { .. })));
        assert!(backward(&m, &cache).is_ok());
    }

    #[test]
    fn absent_tokens_have_no_embedding_gradient() {
        let m = init_model(cfg(8, 4, 1, 2), 5).unwrap();
        let (_, cache) = forward_loss(&m, &[1, 4, 6], &[false, true, true]).unwrap();
        let g = backward(&m, &cache).unwrap();
        for t in 0..8 {
            let present = [1usize, 4].contains(&t);
            assert_eq!(g.per_token_embedding.contains_key(&t), present, "token {t}");
            let row = g.per_group["embed.lora_b"].row(t).to_owned();
            if !present {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn zero_signal_gives_zero_gradients() {
        // A saturated one-hot head makes the target probability 1 to machine precision.
        let mut m = init_model(cfg(4, 4, 1, 1), 0).unwrap();
        m.backbone.blocks[0].weight.fill(0.0);
        m.backbone.embed.fill(0.0);
        m.backbone.head_weight.fill(0.0);
        m.backbone.head_bias = Array1::from(vec![0.0, 0.0, 800.0, 0.0]);
        let (loss, cache) = forward_loss(&m, &[1, 2], &[false, true]).unwrap();
        assert_eq!(loss, 0.0);
        let g = backward(&m, &cache).unwrap();
        assert!(g.per_group.values().all(|t| t.iter().all(|&x| x == 0.0)));
        assert!(g.per_token_embedding.values().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn update_rules() {
        let m = init_model(cfg(8, 4, 1, 2), 1).unwrap();
        let same = apply_update(&m, &GradientBundle::zeros_like(&m)).unwrap();
        assert_eq!(same.backbone, m.backbone);
        assert_eq!(same.adapters, m.adapters);

        let mut bad = GradientBundle::default();
        bad.per_group.insert("head.weight".into(), Array2::zeros((8, 4)));
        assert_eq!(apply_update(&m, &bad).unwrap_err(), UnlearnError::FrozenGroupTouched("head.weight".into()));

        let mut bad = GradientBundle::default();
        bad.per_group.insert("embed.lora_b".into(), Array2::zeros((3, 3)));
        assert!(matches!(apply_update(&m, &bad), Err(UnlearnError::ShapeMismatch { .. })));
    }

    #[test]
    fn accuracy_edges() {
        let m = init_model(cfg(8, 4, 1, 1), 1).unwrap();
        let empty = Dataset::new(vec![], 8, SplitTag::Test).unwrap();
        assert_eq!(accuracy(&m, &empty), Err(UnlearnError::EmptyDataset));
        // A head whose bias dominates always predicts token 5.
        let mut m = m;
        m.backbone.head_weight.fill(0.0);
        m.backbone.head_bias[5] = 10.0;
        let e = ex(vec![1, 2], vec![5]);
        let d = Dataset::new(vec![e], 8, SplitTag::Test).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = init_model(cfg(16, 8, 2, 2), 9).unwrap();
        m.adapters[1].b.fill(0.125);
        m.revision = 17;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("tensor block1.lora_b 8 2 trainable"));
        assert!(manifest.contains("tensor embed 16 8 frozen"));
    }
}
