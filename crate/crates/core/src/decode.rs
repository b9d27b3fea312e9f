//! Generation: greedy decoding, beam search with length penalty, and the
//! character-truncation baseline.
//!
//! Decoding is written against a [`Scorer`] so the transformer and the tiny
//! hand-built models used by the oracle tests share one code path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::infer::DecodeState;
use crate::model::{Transformer, EOS_ID};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    /// Ignored for greedy decoding.
    pub num_beams: usize,
    /// Exponent in score = sum_logprob / len^lp. Positive values reward
    /// longer generations (a length reward, not a penalty).
    pub length_penalty: f64,
    pub max_new_tokens: usize,
    /// Post-hoc character truncation of the decoded text.
    pub truncate_at_chars: Option<usize>,
    /// Forbid EOS during decoding (decoding-based length control).
    pub suppress_eos: bool,
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationConfig {
            strategy: Strategy::Greedy,
            num_beams: 1,
            length_penalty: 0.0,
            max_new_tokens,
            truncate_at_chars: None,
            suppress_eos: false,
        }
    }

    pub fn beam(num_beams: usize, length_penalty: f64, max_new_tokens: usize) -> Self {
        GenerationConfig {
            strategy: Strategy::Beam,
            num_beams,
            length_penalty,
            max_new_tokens,
            truncate_at_chars: None,
            suppress_eos: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.strategy == Strategy::Beam && self.num_beams == 0 {
            return Err(Error::Config("num_beams must be at least 1".into()));
        }
        Ok(())
    }

    /// Human-readable cell label for reports.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Greedy => "greedy".to_string(),
            Strategy::Beam => format!("beam{:+}", self.length_penalty),
        }
    }
}

/// Autoregressive next-token model. `State` carries everything needed to
/// continue a partial hypothesis (for the transformer: the KV cache).
pub trait Scorer<T: Scalar> {
    type State: Clone;

    fn begin(&self, prompt: &[u32]) -> Result<Self::State>;
    fn logits<'s>(&'s self, state: &'s Self::State) -> &'s [T];
    fn advance(&self, state: Self::State, token: u32) -> Result<Self::State>;
    fn eos_id(&self) -> u32;
}

impl<T: Scalar> Scorer<T> for Transformer<T> {
    type State = DecodeState<T>;

    fn begin(&self, prompt: &[u32]) -> Result<Self::State> {
        self.prefill(prompt)
    }

    fn logits<'s>(&'s self, state: &'s Self::State) -> &'s [T] {
        state.logits()
    }

    fn advance(&self, mut state: Self::State, token: u32) -> Result<Self::State> {
        self.extend(&mut state, token)?;
        Ok(state)
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }
}

/// One partial or finished beam hypothesis over generated tokens.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub ids: Vec<u32>,
    pub sum_logprob: f64,
    pub finished: bool,
}

/// Length-penalized score: sum_logprob / len^lp, where len counts generated
/// tokens including EOS.
pub fn beam_score(h: &BeamHypothesis, lp: f64) -> Result<f64> {
    if h.ids.is_empty() {
        return Err(Error::EmptyHypothesis);
    }
    Ok(h.sum_logprob / (h.ids.len() as f64).powf(lp))
}

fn argmax_lowest_id<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding: emits the argmax token at each step (ties broken by
/// lowest id), stopping at EOS or `max_new_tokens`. The terminal EOS, when
/// emitted, is included in the returned ids.
pub fn greedy_decode<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    prompt: &[u32],
    cfg: &GenerationConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let eos = scorer.eos_id();
    let mut state = scorer.begin(prompt)?;
    let mut out = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let logits = scorer.logits(&state);
        let tok = if cfg.suppress_eos {
            let mut best: Option<u32> = None;
            for (i, &v) in logits.iter().enumerate() {
                if i as u32 == eos {
                    continue;
                }
                if best.is_none() || v > logits[best.unwrap() as usize] {
                    best = Some(i as u32);
                }
            }
            best.expect("vocab must contain a non-EOS token")
        } else {
            argmax_lowest_id(logits)
        };
        out.push(tok);
        if tok == eos {
            break;
        }
        state = scorer.advance(state, tok)?;
    }
    Ok(out)
}

struct Live<State> {
    ids: Vec<u32>,
    sum_logprob: f64,
    state: State,
}

/// Upper bound on the score any extension of a live hypothesis can reach.
/// Log-probabilities are non-positive, so the sum can only decrease; the
/// length exponent then makes the bound the longest (lp >= 0) or the
/// shortest (lp < 0) possible finished length.
fn live_bound(sum_logprob: f64, cur_len: usize, lp: f64, max_new_tokens: usize) -> f64 {
    let len = if lp >= 0.0 {
        max_new_tokens
    } else {
        (cur_len + 1).min(max_new_tokens)
    };
    sum_logprob / (len as f64).powf(lp)
}

/// Beam search under the length-penalized score.
///
/// Keeps up to `num_beams` live hypotheses. At each step the (hypothesis,
/// token) candidates are ranked by accumulated log-probability with ties
/// broken toward the lexicographically smallest token sequence; EOS
/// candidates inside the top `num_beams` finish and contend for the result,
/// the rest refill the live set. Terminates once the best finished score
/// cannot be beaten by any live hypothesis, or at `max_new_tokens`. With
/// `num_beams` = 1 and lp = 0 this reduces to greedy decoding.
pub fn beam_search<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    prompt: &[u32],
    cfg: &GenerationConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let eos = scorer.eos_id();
    let lp = cfg.length_penalty;
    let width = self::beam_width(cfg);

    let mut live = vec![Live {
        ids: Vec::new(),
        sum_logprob: 0.0,
        state: scorer.begin(prompt)?,
    }];
    // only the best finished hypothesis matters for the final argmax
    let mut best_done: Option<(f64, Vec<u32>)> = None;

    fn consider_done(best: &mut Option<(f64, Vec<u32>)>, score: f64, ids: Vec<u32>) {
        let better = match best {
            None => true,
            Some((s, best_ids)) => score > *s || (score == *s && ids < *best_ids),
        };
        if better {
            *best = Some((score, ids));
        }
    }

    for step in 0..cfg.max_new_tokens {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, h) in live.iter().enumerate() {
            let logp = crate::tensor::kernels::log_softmax_row(scorer.logits(&h.state));
            for (v, &lpv) in logp.iter().enumerate() {
                if cfg.suppress_eos && v as u32 == eos {
                    continue;
                }
                candidates.push((h.sum_logprob + lpv.to_f64(), bi, v as u32));
            }
        }
        // sum desc, then (parent ids, token) lex asc
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| (&live[a.1].ids, a.2).cmp(&(&live[b.1].ids, b.2)))
        });

        // EOS candidates finish without consuming an expansion slot, so one
        // beam with an argmax EOS still reduces to greedy.
        let mut next_live: Vec<Live<S::State>> = Vec::with_capacity(width.min(64));
        let mut slots = 0usize;
        let last_step = step + 1 == cfg.max_new_tokens;
        for (sum, bi, tok) in candidates {
            if slots >= width {
                break;
            }
            let parent = &live[bi];
            let mut ids = parent.ids.clone();
            ids.push(tok);
            if tok == eos {
                let h = BeamHypothesis {
                    ids: ids.clone(),
                    sum_logprob: sum,
                    finished: true,
                };
                consider_done(&mut best_done, beam_score(&h, lp)?, ids);
            } else if last_step {
                // finished by hitting the generation cap
                slots += 1;
                let h = BeamHypothesis {
                    ids: ids.clone(),
                    sum_logprob: sum,
                    finished: true,
                };
                consider_done(&mut best_done, beam_score(&h, lp)?, ids);
            } else {
                slots += 1;
                let state = scorer.advance(parent.state.clone(), tok)?;
                next_live.push(Live {
                    ids,
                    sum_logprob: sum,
                    state,
                });
            }
        }
        live = next_live;
        if last_step || live.is_empty() {
            break;
        }

        if let Some((best_score, _)) = &best_done {
            let beatable = live.iter().any(|h| {
                live_bound(h.sum_logprob, h.ids.len(), lp, cfg.max_new_tokens) > *best_score
            });
            if !beatable {
                break;
            }
        }
    }

    match best_done {
        Some((_, ids)) => Ok(ids),
        None => Err(Error::EmptyHypothesis),
    }
}

fn beam_width(cfg: &GenerationConfig) -> usize {
    cfg.num_beams.max(1)
}

/// Runs the configured strategy and returns generated token ids.
pub fn generate<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    prompt: &[u32],
    cfg: &GenerationConfig,
) -> Result<Vec<u32>> {
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(scorer, prompt, cfg),
        Strategy::Beam => beam_search(scorer, prompt, cfg),
    }
}

/// Truncation baseline: the first `limit` characters (not bytes).
pub fn truncate_baseline(text: &str, limit: usize) -> String {
    text.chars().take(limit).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Static per-step logits; steps beyond the table repeat the last row.
    pub(crate) struct TableScorer {
        pub rows: Vec<Vec<f64>>,
        pub eos: u32,
    }

    impl Scorer<f64> for TableScorer {
        type State = usize;

        fn begin(&self, _prompt: &[u32]) -> Result<usize> {
            Ok(0)
        }
        fn logits(&self, state: &usize) -> &[f64] {
            let i = (*state).min(self.rows.len() - 1);
            &self.rows[i]
        }
        fn advance(&self, state: usize, _token: u32) -> Result<usize> {
            Ok(state + 1)
        }
        fn eos_id(&self) -> u32 {
            self.eos
        }
    }

    #[test]
    fn greedy_immediate_eos_gives_empty_continuation() {
        let scorer = TableScorer {
            rows: vec![vec![0.0, 0.0, 5.0, 0.0]],
            eos: 2,
        };
        let out = greedy_decode(&scorer, &[0], &GenerationConfig::greedy(10)).unwrap();
        assert_eq!(out, vec![2]);
    }

    #[test]
    fn greedy_matches_manual_argmax_walk() {
        // 3-token vocab (ids 0,1 content; 2=EOS), hand-fixed static logits
        let scorer = TableScorer {
            rows: vec![
                vec![1.0, 3.0, 0.0],
                vec![2.0, 1.0, 0.5],
                vec![0.0, 0.1, 4.0],
            ],
            eos: 2,
        };
        let out = greedy_decode(&scorer, &[0], &GenerationConfig::greedy(10)).unwrap();
        assert_eq!(out, vec![1, 0, 2]); // argmax trace, then EOS stops
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let scorer = TableScorer {
            rows: vec![vec![1.0, 1.0, 1.0, 1.0]],
            eos: 3,
        };
        let out = greedy_decode(&scorer, &[0], &GenerationConfig::greedy(1)).unwrap();
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn greedy_respects_max_new_tokens() {
        let scorer = TableScorer {
            rows: vec![vec![5.0, 0.0, 0.0]],
            eos: 2,
        };
        let out = greedy_decode(&scorer, &[0], &GenerationConfig::greedy(4)).unwrap();
        assert_eq!(out, vec![0, 0, 0, 0]);
    }

    #[test]
    fn suppress_eos_never_emits_eos() {
        let scorer = TableScorer {
            rows: vec![vec![0.0, 0.0, 5.0]],
            eos: 2,
        };
        let mut cfg = GenerationConfig::greedy(5);
        cfg.suppress_eos = true;
        let out = greedy_decode(&scorer, &[0], &cfg).unwrap();
        assert_eq!(out, vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn beam_score_examples() {
        let h = |ids: Vec<u32>, sum: f64| BeamHypothesis {
            ids,
            sum_logprob: sum,
            finished: true,
        };
        // lp = 0: pure likelihood
        assert_eq!(beam_score(&h(vec![4, 2], -3.5), 0.0).unwrap(), -3.5);
        // sum = -4, len = 2: lp = 1 -> -2, lp = -1 -> -8
        assert_eq!(beam_score(&h(vec![4, 2], -4.0), 1.0).unwrap(), -2.0);
        assert_eq!(beam_score(&h(vec![4, 2], -4.0), -1.0).unwrap(), -8.0);
        // positive lp rewards length: -2 > -4 > -8
        assert!(matches!(
            beam_score(&h(vec![], -1.0), 0.0),
            Err(Error::EmptyHypothesis)
        ));
    }

    #[test]
    fn beam_ranking_matches_rescoring_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for lp in [-1.0, 0.0, 1.0] {
            let hyps: Vec<BeamHypothesis> = (0..40)
                .map(|_| BeamHypothesis {
                    ids: (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..5)).collect(),
                    sum_logprob: -rng.gen_range(0.01..20.0),
                    finished: true,
                })
                .collect();
            let mut ranked: Vec<usize> = (0..hyps.len()).collect();
            ranked.sort_by(|&a, &b| {
                beam_score(&hyps[b], lp)
                    .unwrap()
                    .partial_cmp(&beam_score(&hyps[a], lp).unwrap())
                    .unwrap()
            });
            // independent oracle: recompute scores and sort
            let mut oracle: Vec<(f64, usize)> = hyps
                .iter()
                .enumerate()
                .map(|(i, h)| (h.sum_logprob / (h.ids.len() as f64).powf(lp), i))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let oracle_order: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
            assert_eq!(ranked, oracle_order, "lp {lp}");
        }
    }

    #[test]
    fn truncate_baseline_examples() {
        assert_eq!(truncate_baseline("short", 250), "short");
        let long = "x".repeat(300);
        let cut = truncate_baseline(&long, 250);
        assert_eq!(cut.chars().count(), 250);
        // multi-byte characters are never split
        let uni = "héllo wörld ünïcode";
        let cut = truncate_baseline(uni, 7);
        assert_eq!(cut, "héllo w");
    }
}
