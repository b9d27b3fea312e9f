//! Length-controlled summarization lab.
//!
//! A desk-scale pipeline for studying EOS-token-weighted cross-entropy as a
//! summary length control: a small autodiff engine and char-level decoder
//! transformer, the weighted loss, synthetic dataset construction in fixed-
//! and dynamic-length variants, greedy/beam decoding with length penalty,
//! and a ROUGE/length metric suite.

pub mod data;
pub mod decode;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use data::{
    build_dynamic_length, build_fixed_length, gen_synthetic_corpus, CorpusConfig, Dataset,
    DatasetSpec, Sample, Variant,
};
pub use decode::{
    beam_score, beam_search, generate, greedy_decode, truncate_baseline, BeamHypothesis,
    GenerationConfig, Scorer, Strategy,
};
pub use error::{Error, Result};
pub use loss::{effective_weights, rescale_factor, weighted_ce, LossConfig};
pub use metrics::{length_metrics, pct_cutoff, rouge_l, rouge_lsum, rouge_n, MetricsReport};
pub use model::{
    pack_sample, prompt_ids, ModelConfig, Packed, TokenSequence, Transformer, Vocab, BOS_ID,
    EOS_ID, PAD_ID, SEP_ID,
};
pub use scalar::{Precision, Scalar};
pub use tensor::{Grads, Tape, Tensor};
pub use train::{adamw_step, lr_at, train, Schedule, TrainConfig, TrainOutput};
