//! Dataset construction: synthetic corpus, the fixed- and dynamic-length
//! variants, deterministic splits, and JSONL ingestion.

pub mod jsonl;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{gen_synthetic_corpus, CorpusConfig};

/// Instruction prepended to every dynamic-length source, with `{K}`
/// substituted by the per-sample character budget.
pub const DYNAMIC_PROMPT_TEMPLATE: &str =
    "Summarize with up to {K} characters the following text:";

pub fn dynamic_prompt(k: usize) -> String {
    DYNAMIC_PROMPT_TEMPLATE.replace("{K}", &k.to_string())
}

/// One (source, reference) pair. `char_limit` carries the per-sample K of
/// the dynamic variant. Unknown JSONL fields are preserved in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub source: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_limit: Option<usize>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sample {
    pub fn new(id: u64, source: String, reference: String) -> Self {
        Sample {
            id: Some(id),
            source,
            reference,
            char_limit: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn reference_chars(&self) -> usize {
        self.reference.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fixed,
    Dynamic,
}

/// Construction parameters for both dataset variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub variant: Variant,
    pub fixed_char_limit: usize,
    pub k_start: usize,
    pub k_stop: usize,
    pub k_step: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            variant: Variant::Fixed,
            fixed_char_limit: 250,
            k_start: 50,
            k_stop: 800,
            k_step: 50,
            n_train: 10_000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_char_limit == 0 {
            return Err(Error::Config("fixed_char_limit must be positive".into()));
        }
        if self.k_step == 0 {
            return Err(Error::Config("k_step must be positive".into()));
        }
        if self.k_start == 0 || self.k_start > self.k_stop {
            return Err(Error::Config(format!(
                "invalid K grid: start {} stop {}",
                self.k_start, self.k_stop
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }
}

/// Disjoint, seed-deterministic train/val/test splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn split(mut samples: Vec<Sample>, spec: &DatasetSpec) -> Result<Dataset> {
    let needed = spec.n_train + spec.n_val + spec.n_test;
    if samples.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            available: samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    samples.shuffle(&mut rng);
    let mut it = samples.into_iter();
    let train: Vec<Sample> = it.by_ref().take(spec.n_train).collect();
    let val: Vec<Sample> = it.by_ref().take(spec.n_val).collect();
    let test: Vec<Sample> = it.by_ref().take(spec.n_test).collect();
    Ok(Dataset { train, val, test })
}

/// Fixed-length variant: keep samples whose reference is at most
/// `fixed_char_limit` characters ("or less" — boundary inclusive), then split.
pub fn build_fixed_length(corpus: &[Sample], spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let limit = spec.fixed_char_limit;
    let kept: Vec<Sample> = corpus
        .iter()
        .filter(|s| s.reference_chars() <= limit)
        .cloned()
        .collect();
    split(kept, spec)
}

/// Count of corpus samples surviving the fixed-length filter.
pub fn fixed_length_survivors(corpus: &[Sample], limit: usize) -> usize {
    corpus
        .iter()
        .filter(|s| s.reference_chars() <= limit)
        .count()
}

/// Smallest grid value >= len, or None when len exceeds the grid top.
pub fn round_up_to_grid(len: usize, k_start: usize, k_stop: usize, k_step: usize) -> Option<usize> {
    let k = if len <= k_start {
        k_start
    } else {
        k_start + (len - k_start).div_ceil(k_step) * k_step
    };
    (k <= k_stop).then_some(k)
}

/// Dynamic-length variant: assign per-sample K (rounded up to the grid),
/// prepend the instruction prompt, drop references beyond the grid top.
/// Returns the dataset and the dropped-sample count.
pub fn build_dynamic_length(corpus: &[Sample], spec: &DatasetSpec) -> Result<(Dataset, usize)> {
    spec.validate()?;
    let mut kept = Vec::with_capacity(corpus.len());
    let mut dropped = 0usize;
    for s in corpus {
        match round_up_to_grid(s.reference_chars(), spec.k_start, spec.k_stop, spec.k_step) {
            Some(k) => {
                let mut s = s.clone();
                s.source = format!("{} {}", dynamic_prompt(k), s.source);
                s.char_limit = Some(k);
                kept.push(s);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "dynamic-length construction dropped {dropped} samples with references longer than {}",
            spec.k_stop
        );
    }
    Ok((split(kept, spec)?, dropped))
}
