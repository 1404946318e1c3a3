#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unlearn_core::corpus::{Dataset, Example, SplitTag};
use unlearn_core::hierarchy::{ConceptMap, HierarchyLevel};
use unlearn_core::model::{init_model, ModelConfig, ModelState};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_blocks: 1,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

/// A model whose adapters are all non-zero, so every factor has a gradient.
pub fn active_model(cfg: ModelConfig, seed: u64) -> ModelState {
    let mut m = init_model(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for a in &mut m.adapters {
        a.b = Array2::from_shape_fn(a.b.dim(), |_| rng.random_range(-0.3..0.3));
    }
    m
}

pub fn example(id: u64, subject: &str, question: &[usize], answer: &[usize]) -> Example {
    Example {
        id,
        subject: subject.into(),
        question: question.to_vec(),
        answer: answer.to_vec(),
    }
}

/// Random examples over `vocab`, questions of length 3..6 and answers of length 1..3.
pub fn random_examples(n: usize, vocab: usize, subject: &str, first_id: u64, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q: Vec<usize> = (0..rng.random_range(3..6)).map(|_| rng.random_range(0..vocab)).collect();
            let a: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(0..vocab)).collect();
            example(first_id + i as u64, subject, &q, &a)
        })
        .collect()
}

pub fn dataset(examples: Vec<Example>, vocab: usize) -> Dataset {
    Dataset::new(examples, vocab, SplitTag::Train).unwrap()
}

/// Token levels cycling through L1..L4.
pub fn cycling_concepts(vocab: usize) -> ConceptMap {
    ConceptMap {
        token_level: (0..vocab).map(|t| HierarchyLevel::from_index(t % 4).unwrap()).collect(),
        param_level: Default::default(),
    }
}
