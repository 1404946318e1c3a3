//! Synthetic concept-tagged QA corpus, subject split, and block schedule.
//!
//! Vocabulary layout for `V` tokens and `S` subjects (subject 0 is the
//! target and is named [`TARGET_SUBJECT`]):
//!
//! ```text
//! [fillers | bridge | L1 pool | L2 pool | L3 pool per retained subject | L4 pool]
//! ```
//!
//! Each concept pool is split into key tokens and answer tokens, and every key
//! has one fixed answer. A question is a few filler tokens with one key
//! inserted at a random position; the answer is the key's answer token. The
//! key→answer association is what the model memorizes, so held-out examples
//! drawn from the same pools are answerable by a model that learned it.
//!
//! Bridge tokens are context shared between the target and nearby concepts: a
//! question of level `L` carries one with probability `bridge_rate[L]`.
//!
//! Example levels are drawn from `level_mix`. L4 examples belong to the target
//! subject; L1–L3 examples are spread uniformly over the retained subjects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};
use crate::hierarchy::{assign_token_levels, HierarchyLevel};

pub const TARGET_SUBJECT: &str = "surgery";

const RETAINED_SUBJECT_NAMES: [&str; 7] = [
    "medicine",
    "pediatrics",
    "gynaecology",
    "psychiatry",
    "pharmacology",
    "anatomy",
    "pathology",
];

/// Name of subject `index`; index 0 is the target subject.
pub fn subject_name(index: usize) -> String {
    match index {
        0 => TARGET_SUBJECT.to_string(),
        i if i <= RETAINED_SUBJECT_NAMES.len() => RETAINED_SUBJECT_NAMES[i - 1].to_string(),
        i => format!("subject{i}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub subject: String,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    /// Question followed by answer.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.question.len() + self.answer.len());
        t.extend_from_slice(&self.question);
        t.extend_from_slice(&self.answer);
        t
    }
}

/// True exactly on answer positions of `question ++ answer`.
pub fn loss_mask(e: &Example) -> Vec<bool> {
    let mut m = vec![false; e.question.len()];
    m.resize(e.question.len() + e.answer.len(), true);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab_size: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, vocab_size: usize, split: SplitTag) -> Result<Self> {
        let d = Self {
            examples,
            vocab_size,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.subject.clone()).collect()
    }

    pub fn by_id(&self) -> BTreeMap<u64, &Example> {
        self.examples.iter().map(|e| (e.id, e)).collect()
    }

    fn with_examples(&self, examples: Vec<Example>, split: SplitTag) -> Self {
        Self {
            examples,
            vocab_size: self.vocab_size,
            split,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.examples {
            if !ids.insert(e.id) {
                return Err(UnlearnError::InvalidCorpus(format!("duplicate id {}", e.id)));
            }
            if e.answer.is_empty() {
                return Err(UnlearnError::InvalidCorpus(format!("example {} has no answer", e.id)));
            }
            if e.subject.is_empty() || e.subject.contains([',', '\n']) {
                return Err(UnlearnError::InvalidCorpus(format!(
                    "example {} has an invalid subject label",
                    e.id
                )));
            }
            if let Some(&t) = e.question.iter().chain(&e.answer).find(|&&t| t >= self.vocab_size) {
                return Err(UnlearnError::TokenOutOfRange {
                    id: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Line-delimited text form.
    ///
    /// ```text
    /// # unlearn-dataset v1 vocab_size=<V> split=<train|validation|test>
    /// <id>,<subject>,<question ids, space separated>,<answer ids, space separated>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# unlearn-dataset v1 vocab_size={} split={}\n",
            self.vocab_size,
            self.split.as_str()
        );
        let join = |ts: &[usize]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        for e in &self.examples {
            let _ = writeln!(out, "{},{},{},{}", e.id, e.subject, join(&e.question), join(&e.answer));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| UnlearnError::Parse("empty dataset file".into()))?;
        let rest = header
            .strip_prefix("# unlearn-dataset v1 ")
            .ok_or_else(|| UnlearnError::Parse(format!("bad header {header:?}")))?;
        let mut vocab_size = None;
        let mut split = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("vocab_size", v)) => vocab_size = v.parse().ok(),
                Some(("split", "train")) => split = Some(SplitTag::Train),
                Some(("split", "validation")) => split = Some(SplitTag::Validation),
                Some(("split", "test")) => split = Some(SplitTag::Test),
                _ => return Err(UnlearnError::Parse(format!("bad header field {kv:?}"))),
            }
        }
        let (Some(vocab_size), Some(split)) = (vocab_size, split) else {
            return Err(UnlearnError::Parse("header lacks vocab_size or split".into()));
        };
        let tokens = |field: &str, line: usize| -> Result<Vec<usize>> {
            field
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| UnlearnError::Parse(format!("line {line}: bad token {t:?}")))
                })
                .collect()
        };
        let mut examples = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [id, subject, q, a] = fields[..] else {
                return Err(UnlearnError::Parse(format!("line {}: expected 4 fields", n + 2)));
            };
            examples.push(Example {
                id: id
                    .parse()
                    .map_err(|_| UnlearnError::Parse(format!("line {}: bad id", n + 2)))?,
                subject: subject.to_string(),
                question: tokens(q, n + 2)?,
                answer: tokens(a, n + 2)?,
            });
        }
        Self::new(examples, vocab_size, split)
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_subjects: usize,
    pub n_examples: usize,
    pub level_mix: [f64; 4],
    /// Per-level probability that a question carries a bridge token.
    pub bridge_rate: [f64; 4],
    pub seed: u64,
}

pub const DEFAULT_BRIDGE_RATE: [f64; 4] = [0.0, 0.3, 0.6, 1.0];

/// Where each kind of token lives in the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    pub fillers: Vec<usize>,
    /// Shared context tokens, annotated L3.
    pub bridge: Vec<usize>,
    /// Concept pools in layout order: L1, L2, one L3 pool per retained subject, L4.
    pub pools: Vec<ConceptPool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPool {
    pub level: HierarchyLevel,
    /// Owning subject index for L3/L4 pools.
    pub owner: Option<usize>,
    pub keys: Vec<usize>,
    pub answers: Vec<usize>,
}

impl VocabLayout {
    pub fn new(vocab_size: usize, n_subjects: usize) -> Result<Self> {
        if n_subjects < 2 {
            return Err(UnlearnError::InvalidCorpus(
                "need the target subject plus at least one retained subject".into(),
            ));
        }
        let n_pools = n_subjects + 2;
        let n_fillers = (vocab_size / 8).max(1);
        if vocab_size < 4 * n_subjects || vocab_size < n_fillers + 2 * n_pools {
            return Err(UnlearnError::VocabTooSmall {
                vocab_size,
                n_subjects,
            });
        }
        let per_pool = (vocab_size - n_fillers) / n_pools;
        let n_fillers = vocab_size - per_pool * n_pools;
        let n_bridge = (n_fillers / 4).max(1);
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r: Vec<usize> = (next..next + n).collect();
            next += n;
            r
        };
        let fillers = take(n_fillers - n_bridge);
        let bridge = take(n_bridge);
        let mut pools = Vec::with_capacity(n_pools);
        let mut push = |level, owner, take: &mut dyn FnMut(usize) -> Vec<usize>| {
            let keys = take(per_pool / 2);
            let answers = take(per_pool - per_pool / 2);
            pools.push(ConceptPool {
                level,
                owner,
                keys,
                answers,
            });
        };
        push(HierarchyLevel::L1, None, &mut take);
        push(HierarchyLevel::L2, None, &mut take);
        for s in 1..n_subjects {
            push(HierarchyLevel::L3, Some(s), &mut take);
        }
        push(HierarchyLevel::L4, Some(0), &mut take);
        Ok(Self { fillers, bridge, pools })
    }

    pub fn token_levels(&self, vocab_size: usize) -> Result<Vec<HierarchyLevel>> {
        let mut ann: Vec<(usize, HierarchyLevel)> =
            self.fillers.iter().map(|&t| (t, HierarchyLevel::L1)).collect();
        ann.extend(self.bridge.iter().map(|&t| (t, HierarchyLevel::L3)));
        for p in &self.pools {
            ann.extend(p.keys.iter().chain(&p.answers).map(|&t| (t, p.level)));
        }
        assign_token_levels(vocab_size, &ann)
    }

    fn pool_for(&self, level: HierarchyLevel, subject: usize) -> &ConceptPool {
        self.pools
            .iter()
            .find(|p| p.level == level && (p.owner.is_none() || p.owner == Some(subject)))
            .expect("layout has a pool for every level/subject pair")
    }
}

fn validate_mix(mix: &[f64; 4]) -> Result<()> {
    let sum: f64 = mix.iter().sum();
    if mix.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(UnlearnError::InvalidProportions(sum));
    }
    Ok(())
}

/// Generates the synthetic corpus and the per-token level annotation.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<(Dataset, Vec<HierarchyLevel>)> {
    validate_mix(&spec.level_mix)?;
    if spec.bridge_rate.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(UnlearnError::InvalidCorpus("bridge_rate entries must lie in [0, 1]".into()));
    }
    let layout = VocabLayout::new(spec.vocab_size, spec.n_subjects)?;
    let token_levels = layout.token_levels(spec.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let key_answer: BTreeMap<usize, usize> = layout
        .pools
        .iter()
        .flat_map(|p| {
            p.keys
                .iter()
                .map(|&k| (k, p.answers[rng.random_range(0..p.answers.len())]))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut examples = Vec::with_capacity(spec.n_examples);
    for id in 0..spec.n_examples as u64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut level = HierarchyLevel::L4;
        for l in HierarchyLevel::ALL {
            acc += spec.level_mix[l.index()];
            if u < acc {
                level = l;
                break;
            }
        }
        // Guard against rounding leaving a zero-weight level selected.
        if spec.level_mix[level.index()] == 0.0 {
            level = *HierarchyLevel::ALL
                .iter()
                .rev()
                .find(|l| spec.level_mix[l.index()] > 0.0)
                .expect("mix sums to one");
        }
        let subject = if level == HierarchyLevel::L4 {
            0
        } else {
            rng.random_range(1..spec.n_subjects)
        };
        let pool = layout.pool_for(level, subject);
        let key = pool.keys[rng.random_range(0..pool.keys.len())];
        let n_fill = rng.random_range(2..=4);
        let mut question: Vec<usize> = (0..n_fill)
            .map(|_| layout.fillers[rng.random_range(0..layout.fillers.len())])
            .collect();
        let at = rng.random_range(0..=question.len());
        question.insert(at, key);
        if rng.random::<f64>() < spec.bridge_rate[level.index()] {
            let b = layout.bridge[rng.random_range(0..layout.bridge.len())];
            let at = rng.random_range(0..=question.len());
            question.insert(at, b);
        }
        examples.push(Example {
            id,
            subject: subject_name(subject),
            question,
            answer: vec![key_answer[&key]],
        });
    }
    Ok((Dataset::new(examples, spec.vocab_size, SplitTag::Train)?, token_levels))
}

/// Stratified (per subject) train/validation/test partition.
pub fn partition(d: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(UnlearnError::InvalidProportions(sum));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_subject: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
    for e in &d.examples {
        by_subject.entry(e.subject.as_str()).or_default().push(e);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in by_subject {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        for (i, e) in group.into_iter().enumerate() {
            let dst = if i < n_train {
                &mut train
            } else if i < n_train + n_val {
                &mut val
            } else {
                &mut test
            };
            dst.push(e.clone());
        }
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by_key(|e| e.id);
    }
    Ok((
        d.with_examples(train, SplitTag::Train),
        d.with_examples(val, SplitTag::Validation),
        d.with_examples(test, SplitTag::Test),
    ))
}

/// Splits into (forget, retain) by subject label.
pub fn split_by_subject(d: &Dataset, target_subject: &str) -> Result<(Dataset, Dataset)> {
    if !d.examples.iter().any(|e| e.subject == target_subject) {
        return Err(UnlearnError::UnknownSubject(target_subject.to_string()));
    }
    let (forget, retain): (Vec<Example>, Vec<Example>) = d
        .examples
        .iter()
        .cloned()
        .partition(|e| e.subject == target_subject);
    Ok((d.with_examples(forget, d.split), d.with_examples(retain, d.split)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub forget_ids: Vec<u64>,
    pub retain_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    pub blocks: Vec<Block>,
    pub retain_ratio_m: usize,
}

/// Chunks the (shuffled) forget set into blocks of `block_size`, pairing each
/// block of `k` forget examples with `ceil(k / m)` retain examples.
///
/// Retain examples are drawn without replacement until the retain set is
/// exhausted, then with replacement.
pub fn schedule_blocks(
    forget: &Dataset,
    retain: &Dataset,
    block_size: usize,
    m: usize,
    seed: u64,
) -> Result<BlockSchedule> {
    if forget.is_empty() {
        return Err(UnlearnError::EmptyForgetSet);
    }
    if block_size == 0 || m == 0 {
        return Err(UnlearnError::InvalidCorpus("block_size and m must be at least 1".into()));
    }
    if retain.is_empty() {
        return Err(UnlearnError::InvalidCorpus("retain set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forget_ids: Vec<u64> = forget.examples.iter().map(|e| e.id).collect();
    forget_ids.shuffle(&mut rng);
    let mut retain_pool: Vec<u64> = retain.examples.iter().map(|e| e.id).collect();
    retain_pool.shuffle(&mut rng);
    let mut fresh = retain_pool.clone().into_iter();

    let blocks = forget_ids
        .chunks(block_size)
        .map(|chunk| {
            let n_retain = chunk.len().div_ceil(m);
            let retain_ids = (0..n_retain)
                .map(|_| {
                    fresh
                        .next()
                        .unwrap_or_else(|| retain_pool[rng.random_range(0..retain_pool.len())])
                })
                .collect();
            Block {
                forget_ids: chunk.to_vec(),
                retain_ids,
            }
        })
        .collect();
    Ok(BlockSchedule {
        blocks,
        retain_ratio_m: m,
    })
}
