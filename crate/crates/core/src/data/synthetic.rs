//! Synthetic summarization corpus.
//!
//! Each source is a list of short "facts"; a marked subset (prefixed `* `)
//! is the ideal summary. The reference is the marked facts as sentences,
//! plus a random tail of 0..=noise_items unmarked facts. The stochastic tail
//! makes the stopping position genuinely ambiguous, so the model's learned
//! end-of-sequence probability has real mass to shift.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Sample;

const WORDS: [&str; 64] = [
    "amber", "basil", "cedar", "delta", "ember", "fable", "gale", "harbor", "iris", "jasper",
    "kite", "lumen", "maple", "nectar", "onyx", "pearl", "quartz", "raven", "sable", "tulip",
    "umber", "velvet", "willow", "xenon", "yarrow", "zephyr", "anchor", "breeze", "cinder",
    "drift", "echo", "fjord", "grove", "heath", "inlet", "juniper", "knoll", "lagoon", "marsh",
    "nimbus", "orchid", "prairie", "quill", "ridge", "summit", "thicket", "upland", "vale",
    "wharf", "yonder", "arbor", "bluff", "cliff", "dune", "eddy", "fen", "glen", "hollow",
    "isle", "jetty", "ledge", "mesa", "notch", "oasis",
];

/// Shape of the generated corpus. The defaults span a wide reference-length
/// range; trend experiments use narrower settings that fit the toy model's
/// context window.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    /// Maximum number of unmarked facts appended to a reference.
    pub noise_items: usize,
    pub facts_min: usize,
    pub facts_max: usize,
    pub marked_min: usize,
    pub marked_max: usize,
    pub fact_words_min: usize,
    pub fact_words_max: usize,
    /// Minimum sentences per reference; 1 disables the filter.
    pub min_sentences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            size: 10_000,
            seed: 0,
            noise_items: 3,
            facts_min: 5,
            facts_max: 10,
            marked_min: 1,
            marked_max: 6,
            fact_words_min: 2,
            fact_words_max: 10,
            min_sentences: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("corpus size must be positive".into()));
        }
        if self.facts_min == 0 || self.facts_min > self.facts_max {
            return Err(Error::Config("invalid facts range".into()));
        }
        if self.marked_min == 0 || self.marked_min > self.marked_max {
            return Err(Error::Config("invalid marked range".into()));
        }
        if self.facts_min <= self.marked_min {
            return Err(Error::Config(
                "facts_min must exceed marked_min so an unmarked pool exists".into(),
            ));
        }
        if self.fact_words_min == 0 || self.fact_words_min > self.fact_words_max {
            return Err(Error::Config("invalid fact_words range".into()));
        }
        if self.min_sentences == 0 {
            return Err(Error::Config("min_sentences must be at least 1".into()));
        }
        if self.min_sentences > self.marked_min + self.noise_items {
            return Err(Error::Config(
                "min_sentences unreachable for this configuration".into(),
            ));
        }
        Ok(())
    }
}

fn gen_fact(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> String {
    let n_words = rng.gen_range(cfg.fact_words_min..=cfg.fact_words_max);
    let mut fact = String::new();
    for i in 0..n_words {
        if i > 0 {
            fact.push(' ');
        }
        fact.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    fact
}

/// Sorted random subset of 0..n of the given size.
fn choose_sorted(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.partial_shuffle(rng, count);
    let mut chosen: Vec<usize> = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

fn gen_sample(rng: &mut ChaCha8Rng, cfg: &CorpusConfig, id: u64) -> Sample {
    loop {
        let n_facts = rng.gen_range(cfg.facts_min..=cfg.facts_max);
        let marked_cap = cfg.marked_max.min(n_facts - 1);
        let marked_count = rng.gen_range(cfg.marked_min..=marked_cap);
        let marked = choose_sorted(rng, n_facts, marked_count);

        let facts: Vec<String> = (0..n_facts).map(|_| gen_fact(rng, cfg)).collect();

        let source = facts
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if marked.binary_search(&i).is_ok() {
                    format!("* {f}")
                } else {
                    f.clone()
                }
            })
            .collect::<Vec<_>>()
            .join(" | ");

        let unmarked: Vec<usize> = (0..n_facts)
            .filter(|i| marked.binary_search(i).is_err())
            .collect();
        let tail_cap = cfg.noise_items.min(unmarked.len());
        let tail_count = rng.gen_range(0..=tail_cap);
        let tail = choose_sorted(rng, unmarked.len(), tail_count)
            .into_iter()
            .map(|j| unmarked[j]);

        let mut sentences: Vec<&str> = marked.iter().map(|&i| facts[i].as_str()).collect();
        sentences.extend(tail.map(|i| facts[i].as_str()));

        if sentences.len() < cfg.min_sentences {
            continue;
        }

        let reference = sentences
            .iter()
            .map(|f| format!("{f}."))
            .collect::<Vec<_>>()
            .join(" ");
        return Sample::new(id, source, reference);
    }
}

/// Deterministic synthetic corpus with the default shape parameters.
pub fn gen_synthetic_corpus(seed: u64, size: usize, noise_items: usize) -> Result<Vec<Sample>> {
    gen_synthetic_corpus_with(&CorpusConfig {
        seed,
        size,
        noise_items,
        ..CorpusConfig::default()
    })
}

pub fn gen_synthetic_corpus_with(cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.size)
        .map(|i| gen_sample(&mut rng, cfg, i as u64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::round_up_to_grid;

    #[test]
    fn zero_noise_reference_is_exactly_the_marked_facts() {
        let corpus = gen_synthetic_corpus(3, 50, 0).unwrap();
        for s in &corpus {
            let marked: Vec<&str> = s
                .source
                .split(" | ")
                .filter_map(|f| f.strip_prefix("* "))
                .collect();
            let expect = marked
                .iter()
                .map(|f| format!("{f}."))
                .collect::<Vec<_>>()
                .join(" ");
            assert_eq!(s.reference, expect);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_corpus(42, 200, 3).unwrap();
        let b = gen_synthetic_corpus(42, 200, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_corpus(43, 200, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reference_tail_facts_come_from_the_source() {
        let corpus = gen_synthetic_corpus(7, 100, 3).unwrap();
        for s in &corpus {
            let facts: Vec<String> = s
                .source
                .split(" | ")
                .map(|f| f.strip_prefix("* ").unwrap_or(f).to_string())
                .collect();
            for sentence in s.reference.split(". ") {
                let sentence = sentence.trim_end_matches('.');
                assert!(
                    facts.iter().any(|f| f == sentence),
                    "sentence {sentence:?} not a source fact"
                );
            }
        }
    }

    #[test]
    fn length_distribution_covers_the_k_grid() {
        // histogram oracle: over 10k samples the reference lengths must fill
        // at least 10 distinct buckets of the 50..800-by-50 grid
        let corpus = gen_synthetic_corpus(0, 10_000, 3).unwrap();
        let mut buckets = std::collections::HashSet::new();
        for s in &corpus {
            if let Some(k) = round_up_to_grid(s.reference_chars(), 50, 800, 50) {
                buckets.insert(k);
            }
        }
        assert!(buckets.len() >= 10, "only {} buckets covered", buckets.len());
    }

    #[test]
    fn min_sentences_filter_is_respected() {
        let cfg = CorpusConfig {
            size: 200,
            seed: 1,
            min_sentences: 2,
            ..CorpusConfig::default()
        };
        let corpus = gen_synthetic_corpus_with(&cfg).unwrap();
        for s in &corpus {
            let sentences = s.reference.split(". ").count();
            assert!(sentences >= 2, "reference {:?}", s.reference);
        }
    }
}
