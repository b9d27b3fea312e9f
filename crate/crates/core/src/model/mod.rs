//! Decoder-only autoregressive transformer over a character vocabulary.
//!
//! Training sequences are packed as `BOS source SEP target EOS`; the loss is
//! applied only at positions predicting target tokens and the final EOS.

pub mod checkpoint;
pub mod infer;
pub mod vocab;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub use vocab::{TokenSequence, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP_ID};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_mult: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy configuration: trains in minutes on CPU.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            ff_mult: 4,
            max_seq_len: 512,
            vocab_size,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= vocab::NUM_SPECIALS {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let f = self.ff_mult * d;
        let per_layer = 2 * d            // ln1 gain+bias
            + 4 * (d * d + d)            // q,k,v,o projections with bias
            + 2 * d                      // ln2 gain+bias
            + (d * f + f)                // ffn up
            + (f * d + d); // ffn down
        v * d                            // token embedding
            + self.max_seq_len * d       // positional embedding
            + self.n_layers * per_layer
            + 2 * d                      // final layer norm
            + (d * v + v) // lm head
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
}

impl<T: Scalar> ParamEntry<T> {
    fn tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.data.as_ref().clone(), self.shape.clone()).unwrap()
    }
}

// Parameter ordering: tok_emb, pos_emb, per-layer block, final ln, lm head.
const LAYER_STRIDE: usize = 16;
const LAYER_BASE: usize = 2;

#[derive(Clone, Copy)]
pub(crate) enum P {
    TokEmb,
    PosEmb,
    Ln1G(usize),
    Ln1B(usize),
    Wq(usize),
    Bq(usize),
    Wk(usize),
    Bk(usize),
    Wv(usize),
    Bv(usize),
    Wo(usize),
    Bo(usize),
    Ln2G(usize),
    Ln2B(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnFG,
    LnFB,
    LmW,
    LmB,
}

/// One forward pass on a tape: the logits plus the leased parameter leaves,
/// aligned with [`Transformer::params`], for gradient collection.
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub param_leaves: Vec<Tensor<T>>,
}

pub struct Transformer<T> {
    cfg: ModelConfig,
    params: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Transformer<T> {
    /// Fresh model with seeded gaussian init (std 0.02), zero biases and
    /// unit layer-norm gains. The seed stream is consumed in f64 so single
    /// and double precision models share initial values.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f64, INIT_STD).unwrap();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let f = cfg.ff_mult * d;

        let mut params = Vec::new();
        let weight = |name: String, shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = (0..numel)
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect();
            ParamEntry {
                name,
                shape,
                data: Arc::new(data),
            }
        };
        let fill = |name: String, shape: Vec<usize>, value: T| {
            let numel: usize = shape.iter().product();
            ParamEntry {
                name,
                shape,
                data: Arc::new(vec![value; numel]),
            }
        };

        params.push(weight("tok_emb".into(), vec![v, d], &mut rng));
        params.push(weight("pos_emb".into(), vec![cfg.max_seq_len, d], &mut rng));
        for l in 0..cfg.n_layers {
            params.push(fill(format!("layer{l}.ln1.gain"), vec![d], T::one()));
            params.push(fill(format!("layer{l}.ln1.bias"), vec![d], T::zero()));
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                params.push(weight(format!("layer{l}.attn.{w}"), vec![d, d], &mut rng));
                params.push(fill(format!("layer{l}.attn.{b}"), vec![d], T::zero()));
            }
            params.push(fill(format!("layer{l}.ln2.gain"), vec![d], T::one()));
            params.push(fill(format!("layer{l}.ln2.bias"), vec![d], T::zero()));
            params.push(weight(format!("layer{l}.ffn.w1"), vec![d, f], &mut rng));
            params.push(fill(format!("layer{l}.ffn.b1"), vec![f], T::zero()));
            params.push(weight(format!("layer{l}.ffn.w2"), vec![f, d], &mut rng));
            params.push(fill(format!("layer{l}.ffn.b2"), vec![d], T::zero()));
        }
        params.push(fill("final_ln.gain".into(), vec![d], T::one()));
        params.push(fill("final_ln.bias".into(), vec![d], T::zero()));
        params.push(weight("lm_head.w".into(), vec![d, v], &mut rng));
        params.push(fill("lm_head.b".into(), vec![v], T::zero()));

        Ok(Transformer { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Vec<ParamEntry<T>>) -> Result<Self> {
        cfg.validate()?;
        let expected: usize = params.iter().map(|p| p.data.len()).sum();
        if expected != cfg.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                expected,
                cfg.param_count()
            )));
        }
        Ok(Transformer { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[ParamEntry<T>] {
        &self.params
    }

    /// Mutable view of one parameter's values (optimizer update path).
    pub fn param_data_mut(&mut self, idx: usize) -> &mut Vec<T> {
        Arc::make_mut(&mut self.params[idx].data)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn idx(&self, p: P) -> usize {
        match p {
            P::TokEmb => 0,
            P::PosEmb => 1,
            P::Ln1G(l) => LAYER_BASE + l * LAYER_STRIDE,
            P::Ln1B(l) => LAYER_BASE + l * LAYER_STRIDE + 1,
            P::Wq(l) => LAYER_BASE + l * LAYER_STRIDE + 2,
            P::Bq(l) => LAYER_BASE + l * LAYER_STRIDE + 3,
            P::Wk(l) => LAYER_BASE + l * LAYER_STRIDE + 4,
            P::Bk(l) => LAYER_BASE + l * LAYER_STRIDE + 5,
            P::Wv(l) => LAYER_BASE + l * LAYER_STRIDE + 6,
            P::Bv(l) => LAYER_BASE + l * LAYER_STRIDE + 7,
            P::Wo(l) => LAYER_BASE + l * LAYER_STRIDE + 8,
            P::Bo(l) => LAYER_BASE + l * LAYER_STRIDE + 9,
            P::Ln2G(l) => LAYER_BASE + l * LAYER_STRIDE + 10,
            P::Ln2B(l) => LAYER_BASE + l * LAYER_STRIDE + 11,
            P::W1(l) => LAYER_BASE + l * LAYER_STRIDE + 12,
            P::B1(l) => LAYER_BASE + l * LAYER_STRIDE + 13,
            P::W2(l) => LAYER_BASE + l * LAYER_STRIDE + 14,
            P::B2(l) => LAYER_BASE + l * LAYER_STRIDE + 15,
            P::LnFG => LAYER_BASE + self.cfg.n_layers * LAYER_STRIDE,
            P::LnFB => LAYER_BASE + self.cfg.n_layers * LAYER_STRIDE + 1,
            P::LmW => LAYER_BASE + self.cfg.n_layers * LAYER_STRIDE + 2,
            P::LmB => LAYER_BASE + self.cfg.n_layers * LAYER_STRIDE + 3,
        }
    }

    pub(crate) fn entry(&self, p: P) -> &ParamEntry<T> {
        &self.params[self.idx(p)]
    }

    /// Full-sequence forward with causal masking. Row n of the returned
    /// logits depends only on ids[0..=n]. Pass a dropout RNG only during
    /// training; with `dropout_rate` 0 the RNG is never consumed.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[u32],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<T>> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if n > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.max_seq_len,
            });
        }
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::VocabIndex {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }

        let leaves: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.tensor(), true))
            .collect();
        let leaf = |p: P| -> &Tensor<T> { &leaves[self.idx(p)] };

        let rate = self.cfg.dropout_rate;
        let mut drop = |tape: &mut Tape<T>, x: Tensor<T>| -> Result<Tensor<T>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    use rand::Rng;
                    let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() >= rate).collect();
                    tape.dropout(&x, mask, rate)
                }
                _ => Ok(x),
            }
        };

        let eps = T::from_f64(LAYER_NORM_EPS);
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let positions: Vec<u32> = (0..n as u32).collect();

        let tok = tape.embedding(leaf(P::TokEmb), ids)?;
        let pos = tape.embedding(leaf(P::PosEmb), &positions)?;
        let mut x = tape.add(&tok, &pos)?;
        x = drop(tape, x)?;

        for l in 0..self.cfg.n_layers {
            // attention block, pre-norm
            let h = tape.layer_norm(&x, eps)?;
            let h = tape.mul_rows(&h, leaf(P::Ln1G(l)))?;
            let h = tape.add_rows(&h, leaf(P::Ln1B(l)))?;

            let q = tape.matmul(&h, leaf(P::Wq(l)))?;
            let q = tape.add_rows(&q, leaf(P::Bq(l)))?;
            let k = tape.matmul(&h, leaf(P::Wk(l)))?;
            let k = tape.add_rows(&k, leaf(P::Bk(l)))?;
            let v = tape.matmul(&h, leaf(P::Wv(l)))?;
            let v = tape.add_rows(&v, leaf(P::Bv(l)))?;

            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(&q, lo, hi)?;
                let kh = tape.slice_cols(&k, lo, hi)?;
                let vh = tape.slice_cols(&v, lo, hi)?;
                let kt = tape.transpose(&kh)?;
                let scores = tape.matmul(&qh, &kt)?;
                let scores = tape.scale(&scores, scale)?;
                let scores = tape.causal_mask(&scores)?;
                let att = tape.softmax_rows(&scores)?;
                let att = drop(tape, att)?;
                heads.push(tape.matmul(&att, &vh)?);
            }
            let head_refs: Vec<&Tensor<T>> = heads.iter().collect();
            let ctx = tape.concat_cols(&head_refs)?;
            let out = tape.matmul(&ctx, leaf(P::Wo(l)))?;
            let out = tape.add_rows(&out, leaf(P::Bo(l)))?;
            let out = drop(tape, out)?;
            x = tape.add(&x, &out)?;

            // feed-forward block, pre-norm
            let h2 = tape.layer_norm(&x, eps)?;
            let h2 = tape.mul_rows(&h2, leaf(P::Ln2G(l)))?;
            let h2 = tape.add_rows(&h2, leaf(P::Ln2B(l)))?;
            let f1 = tape.matmul(&h2, leaf(P::W1(l)))?;
            let f1 = tape.add_rows(&f1, leaf(P::B1(l)))?;
            let f1 = tape.gelu(&f1)?;
            let f2 = tape.matmul(&f1, leaf(P::W2(l)))?;
            let f2 = tape.add_rows(&f2, leaf(P::B2(l)))?;
            let f2 = drop(tape, f2)?;
            x = tape.add(&x, &f2)?;
        }

        let hf = tape.layer_norm(&x, eps)?;
        let hf = tape.mul_rows(&hf, leaf(P::LnFG))?;
        let hf = tape.add_rows(&hf, leaf(P::LnFB))?;
        let logits = tape.matmul(&hf, leaf(P::LmW))?;
        let logits = tape.add_rows(&logits, leaf(P::LmB))?;

        Ok(ForwardPass {
            logits,
            param_leaves: leaves,
        })
    }
}

/// One packed training sequence. Inputs are `BOS source SEP target EOS`
/// minus the last token; targets are the same shifted left by one. The loss
/// mask selects the positions predicting target tokens and the final EOS,
/// so N in the loss is the target length including EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

pub fn pack_sample(vocab: &Vocab, source: &str, reference: &str) -> Result<Packed> {
    let src = vocab.encode(source)?;
    let tgt = vocab.encode(reference)?;
    let mut seq = Vec::with_capacity(src.len() + tgt.len() + 3);
    seq.push(BOS_ID);
    seq.extend_from_slice(&src.ids);
    seq.push(SEP_ID);
    seq.extend_from_slice(&tgt.ids);
    seq.push(EOS_ID);

    let sep_pos = 1 + src.len();
    let input_ids = seq[..seq.len() - 1].to_vec();
    let target_ids = seq[1..].to_vec();
    let loss_mask = (0..input_ids.len()).map(|i| i >= sep_pos).collect();
    Ok(Packed {
        input_ids,
        target_ids,
        loss_mask,
    })
}

/// Generation prompt for a source text: `BOS source SEP`.
pub fn prompt_ids(vocab: &Vocab, source: &str) -> Result<Vec<u32>> {
    let src = vocab.encode(source)?;
    let mut ids = Vec::with_capacity(src.len() + 2);
    ids.push(BOS_ID);
    ids.extend_from_slice(&src.ids);
    ids.push(SEP_ID);
    Ok(ids)
}
