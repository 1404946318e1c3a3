//! Four-level concept hierarchy shared by the parameter-side and token-side
//! unlearning strategies.
//!
//! Every vocabulary id and every trainable parameter group carries exactly one
//! [`HierarchyLevel`]. The level selects a preservation coefficient (how much
//! of the retain-aligned forget gradient is projected away) and an unlearning
//! intensity (how strongly token-level gradients are amplified).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};

/// Stabilizer added to the retain-side FIM in the level ratio test.
pub const EPSILON_STAB: f64 = 1e-5;

/// Default ascending cutoffs on the forget/retain FIM ratio.
pub const DEFAULT_FIM_CUTOFFS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HierarchyLevel {
    /// Fundamental knowledge shared by every subject.
    L1,
    /// General knowledge shared by every subject.
    L2,
    /// Specialty knowledge owned by one retained subject.
    L3,
    /// Target-subject knowledge.
    L4,
}

impl HierarchyLevel {
    pub const ALL: [HierarchyLevel; 4] = [Self::L1, Self::L2, Self::L3, Self::L4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for HierarchyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index() + 1)
    }
}

impl std::str::FromStr for HierarchyLevel {
    type Err = UnlearnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" => Ok(Self::L1),
            "L2" => Ok(Self::L2),
            "L3" => Ok(Self::L3),
            "L4" => Ok(Self::L4),
            other => Err(UnlearnError::Parse(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCoefficients {
    /// Fraction of the retain-aligned component removed from the forget gradient.
    pub alpha_preserve: f64,
    /// Multiplier on token importance scores.
    pub beta_unlearn: f64,
}

/// Per-level coefficient table. The default is the calibrated L1..L4 ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl Default for CoefficientTable {
    fn default() -> Self {
        Self {
            alpha: [1.0, 0.8, 0.6, 0.2],
            beta: [0.1, 0.3, 0.7, 1.0],
        }
    }
}

impl CoefficientTable {
    pub fn get(&self, level: HierarchyLevel) -> LevelCoefficients {
        LevelCoefficients {
            alpha_preserve: self.alpha[level.index()],
            beta_unlearn: self.beta[level.index()],
        }
    }

    /// Same coefficients for every level: the per-level means of `self`.
    pub fn flattened(&self) -> Self {
        let a = self.alpha.iter().sum::<f64>() / 4.0;
        let b = self.beta.iter().sum::<f64>() / 4.0;
        Self {
            alpha: [a; 4],
            beta: [b; 4],
        }
    }

    /// Checks ranges and the monotone ladder (alpha non-increasing, beta non-decreasing).
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: &f64| (0.0..=1.0).contains(x);
        if !self.alpha.iter().all(in_unit) || !self.beta.iter().all(in_unit) {
            return Err(UnlearnError::InvalidConfig(
                "hierarchy coefficients must lie in [0, 1]".into(),
            ));
        }
        let monotone = self.alpha.windows(2).all(|w| w[0] >= w[1])
            && self.beta.windows(2).all(|w| w[0] <= w[1]);
        if !monotone {
            return Err(UnlearnError::InvalidConfig(
                "alpha must be non-increasing and beta non-decreasing in level".into(),
            ));
        }
        Ok(())
    }
}

/// Coefficients of the default ladder.
pub fn coefficients_for(level: HierarchyLevel) -> LevelCoefficients {
    CoefficientTable::default().get(level)
}

/// Level assignment for tokens and trainable parameter groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptMap {
    pub token_level: Vec<HierarchyLevel>,
    pub param_level: BTreeMap<String, HierarchyLevel>,
}

impl ConceptMap {
    pub fn token(&self, id: usize) -> HierarchyLevel {
        self.token_level[id]
    }

    /// Parameter groups without an assignment are treated as L1 (fully protected).
    pub fn param(&self, group: &str) -> HierarchyLevel {
        self.param_level
            .get(group)
            .copied()
            .unwrap_or(HierarchyLevel::L1)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_level.len()
    }
}

/// Builds the token part of a [`ConceptMap`] from `(vocab id, level)` pairs.
/// Every id in `0..vocab_size` must appear exactly once.
pub fn assign_token_levels(
    vocab_size: usize,
    annotations: &[(usize, HierarchyLevel)],
) -> Result<Vec<HierarchyLevel>> {
    let mut slots: Vec<Option<HierarchyLevel>> = vec![None; vocab_size];
    for &(id, level) in annotations {
        let slot = slots.get_mut(id).ok_or(UnlearnError::TokenOutOfRange {
            id,
            vocab_size,
        })?;
        if slot.replace(level).is_some() {
            return Err(UnlearnError::DuplicateAnnotation(id));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(id, s)| s.ok_or(UnlearnError::MissingAnnotation(id)))
        .collect()
}

/// Level of one group from its forget/retain FIM ratio.
pub fn level_for_ratio(
    fim_forget: f64,
    fim_retain: f64,
    cutoffs: [f64; 3],
) -> HierarchyLevel {
    let ratio = fim_forget / (fim_retain + EPSILON_STAB);
    if ratio < cutoffs[0] {
        HierarchyLevel::L1
    } else if ratio < cutoffs[1] {
        HierarchyLevel::L2
    } else if ratio < cutoffs[2] {
        HierarchyLevel::L3
    } else {
        HierarchyLevel::L4
    }
}

/// Assigns levels to parameter groups from per-group FIM scalars.
///
/// `fim` maps a group id to `(forget, retain)` diagonal-FIM summaries.
pub fn assign_parameter_levels(
    fim: &BTreeMap<String, (f64, f64)>,
    cutoffs: [f64; 3],
) -> Result<BTreeMap<String, HierarchyLevel>> {
    if !(cutoffs[0] < cutoffs[1] && cutoffs[1] < cutoffs[2]) {
        return Err(UnlearnError::InvalidCutoffs(cutoffs));
    }
    fim.iter()
        .map(|(group, &(f, r))| {
            if !f.is_finite() || !r.is_finite() || f < 0.0 || r < 0.0 {
                return Err(UnlearnError::NonFiniteFim(group.clone()));
            }
            Ok((group.clone(), level_for_ratio(f, r, cutoffs)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use HierarchyLevel::*;

    #[test]
    fn ladder_values() {
        assert_eq!(
            coefficients_for(L1),
            LevelCoefficients { alpha_preserve: 1.0, beta_unlearn: 0.1 }
        );
        assert_eq!(
            coefficients_for(L2),
            LevelCoefficients { alpha_preserve: 0.8, beta_unlearn: 0.3 }
        );
        assert_eq!(
            coefficients_for(L3),
            LevelCoefficients { alpha_preserve: 0.6, beta_unlearn: 0.7 }
        );
        assert_eq!(
            coefficients_for(L4),
            LevelCoefficients { alpha_preserve: 0.2, beta_unlearn: 1.0 }
        );
    }

    #[test]
    fn ladder_is_monotone_and_deterministic() {
        for (i, a) in HierarchyLevel::ALL.iter().enumerate() {
            for b in &HierarchyLevel::ALL[i..] {
                assert!(coefficients_for(*a).alpha_preserve >= coefficients_for(*b).alpha_preserve);
                assert!(coefficients_for(*a).beta_unlearn <= coefficients_for(*b).beta_unlearn);
            }
            assert_eq!(coefficients_for(*a), coefficients_for(*a));
        }
        assert!(L1 < L2 && L2 < L3 && L3 < L4);
        CoefficientTable::default().validate().unwrap();
    }

    #[test]
    fn flattened_table_is_level_independent() {
        let flat = CoefficientTable::default().flattened();
        assert!(flat.alpha.iter().all(|&a| a == flat.alpha[0]));
        assert!((flat.alpha[0] - 0.65).abs() < 1e-12);
        assert!((flat.beta[0] - 0.525).abs() < 1e-12);
    }

    #[test]
    fn token_annotations() {
        assert_eq!(assign_token_levels(2, &[(0, L1), (1, L4)]).unwrap(), vec![L1, L4]);
        assert_eq!(
            assign_token_levels(2, &[(0, L1), (0, L2)]),
            Err(UnlearnError::DuplicateAnnotation(0))
        );
        assert_eq!(
            assign_token_levels(2, &[(0, L1)]),
            Err(UnlearnError::MissingAnnotation(1))
        );
        assert!(matches!(
            assign_token_levels(2, &[(5, L1)]),
            Err(UnlearnError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn ratio_rule() {
        let c = DEFAULT_FIM_CUTOFFS;
        assert_eq!(level_for_ratio(0.0, 1.0, c), L1);
        assert_eq!(level_for_ratio(10.0, 1e-9, c), L4);
        assert_eq!(level_for_ratio(0.7, 1.0, c), L2);
        assert_eq!(level_for_ratio(1.5, 1.0, c), L3);
    }

    #[test]
    fn parameter_levels_errors() {
        let mut fim = BTreeMap::new();
        fim.insert("g".to_string(), (f64::NAN, 1.0));
        assert_eq!(
            assign_parameter_levels(&fim, DEFAULT_FIM_CUTOFFS),
            Err(UnlearnError::NonFiniteFim("g".into()))
        );
        fim.insert("g".to_string(), (1.0, 1.0));
        assert!(matches!(
            assign_parameter_levels(&fim, [1.0, 1.0, 2.0]),
            Err(UnlearnError::InvalidCutoffs(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn level_monotone_in_forget_fim(r in 0.0f64..10.0, f1 in 0.0f64..50.0, df in 0.0f64..50.0) {
            let a = level_for_ratio(f1, r, DEFAULT_FIM_CUTOFFS);
            let b = level_for_ratio(f1 + df, r, DEFAULT_FIM_CUTOFFS);
            proptest::prop_assert!(a <= b);
        }
    }
}
