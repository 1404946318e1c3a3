use thiserror::Error;

use crate::hierarchy::HierarchyLevel;

/// Errors produced anywhere in the unlearning pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnlearnError {
    #[error("vocabulary id {0} annotated more than once")]
    DuplicateAnnotation(usize),
    #[error("vocabulary id {0} has no level annotation")]
    MissingAnnotation(usize),
    #[error("vocabulary id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("non-finite FIM value for group {0}")]
    NonFiniteFim(String),
    #[error("FIM cutoffs must be strictly ascending, got {0:?}")]
    InvalidCutoffs([f64; 3]),

    #[error("level proportions must be non-negative and sum to 1, got sum {0}")]
    InvalidProportions(f64),
    #[error("vocabulary of {vocab_size} tokens is too small for {n_subjects} subjects")]
    VocabTooSmall { vocab_size: usize, n_subjects: usize },
    #[error("subject {0:?} does not occur in the dataset")]
    UnknownSubject(String),
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("invalid corpus parameter: {0}")]
    InvalidCorpus(String),

    #[error("invalid model dimension: {0}")]
    InvalidDimension(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("mask length {mask} does not match sequence length {tokens}")]
    MaskLength { tokens: usize, mask: usize },
    #[error("forward cache was produced by model revision {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },
    #[error("shape mismatch for group {group}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        group: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown parameter group {0}")]
    UnknownGroup(String),
    #[error("update touches frozen backbone group {0}")]
    FrozenGroupTouched(String),
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch is empty")]
    EmptyBatch,
    #[error("token importance for token {0} is not finite")]
    NonFiniteScore(usize),
    #[error("forget loss {loss} exceeded divergence ceiling {ceiling} at step {step}")]
    DivergenceDetected { step: usize, loss: f64, ceiling: f64 },
    #[error("invalid unlearning configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid privacy parameters: {0}")]
    InvalidPrivacyParams(String),

    #[error("accuracy for level {0} is missing")]
    MissingLevel(HierarchyLevel),
    #[error("need at least two non-target subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, UnlearnError>;
