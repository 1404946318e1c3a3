//! Evaluation metrics, the loss-threshold membership-inference attack, and the
//! per-run report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::error::{Result, UnlearnError};
use crate::hierarchy::HierarchyLevel;
use crate::model::{accuracy, accuracy_of, example_loss, ModelState};

/// `1 − accuracy` on the forget test set.
pub fn forgetting_rate(m: &ModelState, forget_test: &Dataset) -> Result<f64> {
    Ok(1.0 - accuracy(m, forget_test)?)
}

/// Accuracy on the retain test set.
pub fn knowledge_preservation(m: &ModelState, retain_test: &Dataset) -> Result<f64> {
    accuracy(m, retain_test)
}

pub fn unlearning_score(fr: f64, kpr: f64) -> f64 {
    (fr + kpr) / 2.0
}

/// Harmonic mean of FR and KPR; 0 when both are 0.
pub fn hmta(fr: f64, kpr: f64) -> f64 {
    if fr + kpr > 0.0 {
        2.0 * fr * kpr / (fr + kpr)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub auc: f64,
}

/// Probability that a random member outscores a random nonmember, ties counted
/// one half, computed from average ranks of the pooled scores.
pub fn auc_rank(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    let mut pooled: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of members keeps tie averages integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let twice_avg = (i + 1 + j + 1) as u128;
        let count = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_avg * count;
        i = j + 1;
    }
    let n_m = members.len() as u128;
    let n_n = nonmembers.len() as u128;
    // U = R − n_m(n_m+1)/2; doubled throughout.
    let twice_u = twice_rank_sum - n_m * (n_m + 1);
    Ok(twice_u as f64 / (2 * n_m * n_n) as f64)
}

/// Loss-threshold attack: each example scores `−loss` under `m`.
pub fn mia_attack(m: &ModelState, members: &Dataset, nonmembers: &Dataset) -> Result<AttackResult> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    let score = |d: &Dataset| -> Result<Vec<f64>> { d.examples.iter().map(|e| Ok(-example_loss(m, e)?)).collect() };
    let member_scores = score(members)?;
    let nonmember_scores = score(nonmembers)?;
    let auc = auc_rank(&member_scores, &nonmember_scores)?;
    Ok(AttackResult {
        member_scores,
        nonmember_scores,
        auc,
    })
}

pub fn mia_resistance(auc: f64) -> f64 {
    1.0 - 2.0 * (auc - 0.5).abs()
}

pub fn privacy_risk(auc: f64) -> f64 {
    2.0 * (auc - 0.5).abs()
}

/// `acc(L1) − acc(L4)`.
pub fn concept_hierarchy_separation(acc_by_level: &BTreeMap<HierarchyLevel, f64>) -> Result<f64> {
    let get = |l| acc_by_level.get(&l).copied().ok_or(UnlearnError::MissingLevel(l));
    Ok(get(HierarchyLevel::L1)? - get(HierarchyLevel::L4)?)
}

/// Population standard deviation of per-subject accuracies.
pub fn medical_subdomain_differentiation(acc_by_subject: &BTreeMap<String, f64>) -> Result<f64> {
    let n = acc_by_subject.len();
    if n < 2 {
        return Err(UnlearnError::TooFewSubjects(n));
    }
    let mean = acc_by_subject.values().sum::<f64>() / n as f64;
    let var = acc_by_subject.values().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub per: f64,
    /// Runtime ratio against the baseline.
    pub tem_ratio: f64,
    pub tem_hours: f64,
    pub mcr: f64,
}

pub fn efficiency_metrics(
    trainable: usize,
    total: usize,
    runtime_hours: f64,
    baseline_runtime_hours: f64,
    peak_mem: f64,
    baseline_peak_mem: f64,
) -> Result<Efficiency> {
    if total == 0 {
        return Err(UnlearnError::DivisionByZero("parameter efficiency ratio"));
    }
    if !(baseline_runtime_hours > 0.0) {
        return Err(UnlearnError::DivisionByZero("time efficiency ratio"));
    }
    if !(baseline_peak_mem > 0.0) {
        return Err(UnlearnError::DivisionByZero("memory consumption ratio"));
    }
    Ok(Efficiency {
        per: trainable as f64 / total as f64,
        tem_ratio: runtime_hours / baseline_runtime_hours,
        tem_hours: runtime_hours,
        mcr: peak_mem / baseline_peak_mem,
    })
}

/// Estimated peak bytes of one unlearning step: every weight, plus three
/// gradient-sized buffers (retain, forget, combined) over the updated parameters.
pub fn estimated_peak_bytes(total_params: usize, updated_params: usize) -> f64 {
    8.0 * (total_params + 3 * updated_params) as f64
}

/// Accuracy grouped by the level of each example's answer token.
pub fn accuracy_by_level<'a>(
    m: &ModelState,
    examples: impl Iterator<Item = &'a Example>,
    token_levels: &[HierarchyLevel],
) -> Result<BTreeMap<HierarchyLevel, f64>> {
    let mut groups: BTreeMap<HierarchyLevel, Vec<&Example>> = BTreeMap::new();
    for e in examples {
        groups.entry(token_levels[e.answer[0]]).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(l, es)| Ok((l, accuracy_of(m, es.into_iter())?)))
        .collect()
}

pub fn accuracy_by_subject(m: &ModelState, d: &Dataset) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<&Example>> = BTreeMap::new();
    for e in &d.examples {
        groups.entry(e.subject.clone()).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(s, es)| Ok((s, accuracy_of(m, es.into_iter())?)))
        .collect()
}

/// All metrics of one evaluated model. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fr: f64,
    pub kpr: f64,
    pub us: f64,
    pub hmta: f64,
    pub mia_auc: f64,
    pub mia_resist: f64,
    pub privacy_risk: f64,
    pub dp_strength: f64,
    pub acc_by_level: BTreeMap<HierarchyLevel, f64>,
    pub acc_by_subject: BTreeMap<String, f64>,
    pub chs: f64,
    pub msd: f64,
    pub per: f64,
    pub mcr: f64,
    pub tem_hours: f64,
    pub tem_ratio: f64,
}

impl EvalReport {
    /// Checks the algebraic relations between the stored metrics.
    pub fn check_consistency(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let ok = close(self.us, unlearning_score(self.fr, self.kpr))
            && close(self.hmta, hmta(self.fr, self.kpr))
            && close(self.mia_resist, mia_resistance(self.mia_auc))
            && close(self.privacy_risk + self.mia_resist, 1.0);
        if ok {
            Ok(())
        } else {
            Err(UnlearnError::InvalidConfig(format!("inconsistent report {self:?}")))
        }
    }
}

/// Inputs for [`evaluate`] that do not come from the model itself.
pub struct EvalInputs<'a> {
    pub forget_test: &'a Dataset,
    pub retain_test: &'a Dataset,
    pub members: &'a Dataset,
    pub nonmembers: &'a Dataset,
    pub token_levels: &'a [HierarchyLevel],
    pub epsilon: f64,
    /// Number of parameters the method updates (for memory estimation).
    pub updated_params: usize,
    pub runtime_hours: f64,
    pub baseline_runtime_hours: f64,
}

pub fn evaluate(m: &ModelState, inp: &EvalInputs<'_>) -> Result<EvalReport> {
    let fr = forgetting_rate(m, inp.forget_test)?;
    let kpr = knowledge_preservation(m, inp.retain_test)?;
    let attack = mia_attack(m, inp.members, inp.nonmembers)?;
    let acc_by_level = accuracy_by_level(
        m,
        inp.forget_test.examples.iter().chain(&inp.retain_test.examples),
        inp.token_levels,
    )?;
    let acc_by_subject = accuracy_by_subject(m, inp.retain_test)?;
    let eff = efficiency_metrics(
        m.trainable_count(),
        m.total_count(),
        inp.runtime_hours,
        inp.baseline_runtime_hours,
        estimated_peak_bytes(m.total_count(), inp.updated_params),
        estimated_peak_bytes(m.total_count(), m.total_count()),
    )?;
    let report = EvalReport {
        fr,
        kpr,
        us: unlearning_score(fr, kpr),
        hmta: hmta(fr, kpr),
        mia_auc: attack.auc,
        mia_resist: mia_resistance(attack.auc),
        privacy_risk: privacy_risk(attack.auc),
        dp_strength: crate::privacy::dp_strength(inp.epsilon),
        chs: concept_hierarchy_separation(&acc_by_level)?,
        msd: medical_subdomain_differentiation(&acc_by_subject).unwrap_or(0.0),
        acc_by_level,
        acc_by_subject,
        per: eff.per,
        mcr: eff.mcr,
        tem_hours: eff.tem_hours,
        tem_ratio: eff.tem_ratio,
    };
    report.check_consistency()?;
    Ok(report)
}
