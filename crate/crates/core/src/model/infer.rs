//! Incremental (KV-cached) forward pass for generation.
//!
//! Pure data-path re-implementation of the tape forward, one token at a
//! time; used by greedy and beam decoding where whole-sequence re-forwarding
//! would be quadratic in generated length.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;

use super::{ModelConfig, Transformer, LAYER_NORM_EPS, P};

/// Per-layer key/value cache plus the logits produced by the last token.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    pos: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    last_logits: Vec<T>,
}

impl<T: Scalar> DecodeState<T> {
    fn empty(cfg: &ModelConfig) -> Self {
        DecodeState {
            pos: 0,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            last_logits: Vec::new(),
        }
    }

    /// Number of tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Logits predicting the next token, given everything consumed so far.
    pub fn logits(&self) -> &[T] {
        &self.last_logits
    }
}

fn ln_affine<T: Scalar>(x: &mut [T], gain: &[T], bias: &[T]) {
    kernels::layer_norm_row(x, T::from_f64(LAYER_NORM_EPS));
    for i in 0..x.len() {
        x[i] = x[i] * gain[i] + bias[i];
    }
}

/// out[j] = x · W[:, j] + b[j] for row-major W[d_in × d_out].
fn vec_mat<T: Scalar>(x: &[T], w: &[T], b: &[T], d_out: usize) -> Vec<T> {
    let mut out = b.to_vec();
    for (p, &xp) in x.iter().enumerate() {
        if xp == T::zero() {
            continue;
        }
        let row = &w[p * d_out..(p + 1) * d_out];
        for j in 0..d_out {
            out[j] += xp * row[j];
        }
    }
    out
}

impl<T: Scalar> Transformer<T> {
    /// Consumes a whole prompt and returns the decode state positioned to
    /// predict the next token.
    pub fn prefill(&self, prompt: &[u32]) -> Result<DecodeState<T>> {
        if prompt.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut state = DecodeState::empty(&self.cfg);
        for &id in prompt {
            self.extend(&mut state, id)?;
        }
        Ok(state)
    }

    /// Feeds one more token and refreshes the next-token logits.
    pub fn extend(&self, state: &mut DecodeState<T>, token: u32) -> Result<()> {
        let cfg = &self.cfg;
        if token as usize >= cfg.vocab_size {
            return Err(Error::VocabIndex {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if state.pos >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: state.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let tok_emb = &self.entry(P::TokEmb).data;
        let pos_emb = &self.entry(P::PosEmb).data;
        let t = token as usize;
        let mut x: Vec<T> = (0..d)
            .map(|j| tok_emb[t * d + j] + pos_emb[state.pos * d + j])
            .collect();

        for l in 0..cfg.n_layers {
            let mut h = x.clone();
            ln_affine(
                &mut h,
                &self.entry(P::Ln1G(l)).data,
                &self.entry(P::Ln1B(l)).data,
            );
            let q = vec_mat(&h, &self.entry(P::Wq(l)).data, &self.entry(P::Bq(l)).data, d);
            let k = vec_mat(&h, &self.entry(P::Wk(l)).data, &self.entry(P::Bk(l)).data, d);
            let v = vec_mat(&h, &self.entry(P::Wv(l)).data, &self.entry(P::Bv(l)).data, d);
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&v);

            let t_len = state.pos + 1;
            let keys = &state.keys[l];
            let values = &state.values[l];
            let mut ctx = vec![T::zero(); d];
            for head in 0..cfg.n_heads {
                let lo = head * dh;
                let mut scores = Vec::with_capacity(t_len);
                for s in 0..t_len {
                    let krow = &keys[s * d + lo..s * d + lo + dh];
                    let mut acc = T::zero();
                    for j in 0..dh {
                        acc += q[lo + j] * krow[j];
                    }
                    scores.push(acc * scale);
                }
                kernels::softmax_row(&mut scores);
                for (s, &a) in scores.iter().enumerate() {
                    let vrow = &values[s * d + lo..s * d + lo + dh];
                    for j in 0..dh {
                        ctx[lo + j] += a * vrow[j];
                    }
                }
            }
            let att = vec_mat(&ctx, &self.entry(P::Wo(l)).data, &self.entry(P::Bo(l)).data, d);
            for j in 0..d {
                x[j] += att[j];
            }

            let mut h2 = x.clone();
            ln_affine(
                &mut h2,
                &self.entry(P::Ln2G(l)).data,
                &self.entry(P::Ln2B(l)).data,
            );
            let f = cfg.ff_mult * d;
            let mut f1 = vec_mat(&h2, &self.entry(P::W1(l)).data, &self.entry(P::B1(l)).data, f);
            for v in f1.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let f2 = vec_mat(&f1, &self.entry(P::W2(l)).data, &self.entry(P::B2(l)).data, d);
            for j in 0..d {
                x[j] += f2[j];
            }
        }

        ln_affine(
            &mut x,
            &self.entry(P::LnFG).data,
            &self.entry(P::LnFB).data,
        );
        state.last_logits = vec_mat(
            &x,
            &self.entry(P::LmW).data,
            &self.entry(P::LmB).data,
            cfg.vocab_size,
        );
        state.pos += 1;
        Ok(())
    }
}
