//! EOS-weighted, rescaled cross-entropy.
//!
//! Per sequence of N target positions with per-position weight
//! w(y) = W when y is EOS and 1 otherwise, the loss is
//!
//!   L = -(R / N) * sum_n w(y_n) * log p(y_n),   R = N / (N + W - 1)
//!
//! so the per-position coefficients R*w(y_n)/N form a convex combination
//! whenever exactly one EOS is present, and W = 1 recovers the plain mean
//! cross-entropy exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub eos_weight: f64,
    pub eos_token_id: u32,
}

impl LossConfig {
    pub fn new(eos_weight: f64, eos_token_id: u32) -> Result<Self> {
        if !eos_weight.is_finite() || eos_weight < 1.0 {
            return Err(Error::Config(format!(
                "eos_weight must be a finite real >= 1, got {eos_weight}"
            )));
        }
        Ok(LossConfig {
            eos_weight,
            eos_token_id,
        })
    }
}

/// Rescaling factor R = N / (N + W - 1).
pub fn rescale_factor(n: usize, w: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let nf = n as f64;
    Ok(nf / (nf + w - 1.0))
}

/// Per-position loss coefficients R * w(y_n) / N.
///
/// Positions where `loss_mask` is false (source/prompt/padding) get
/// coefficient 0 and are excluded from N. When the (unmasked) targets
/// contain no EOS — a truncated training target — the weighting degenerates
/// to the plain mean (all weights 1, R = 1) and a warning is logged.
pub fn effective_weights(
    targets: &[u32],
    loss_mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(mask) = loss_mask {
        if mask.len() != targets.len() {
            return Err(Error::LengthMismatch {
                left: targets.len(),
                right: mask.len(),
            });
        }
    }
    let active = |i: usize| loss_mask.map_or(true, |m| m[i]);

    let n = (0..targets.len()).filter(|&i| active(i)).count();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let has_eos = (0..targets.len()).any(|i| active(i) && targets[i] == cfg.eos_token_id);
    let w = if has_eos {
        cfg.eos_weight
    } else {
        log::warn!("target sequence contains no EOS; falling back to unweighted mean");
        1.0
    };
    let r = rescale_factor(n, w)?;
    let nf = n as f64;

    Ok((0..targets.len())
        .map(|i| {
            if !active(i) {
                0.0
            } else if targets[i] == cfg.eos_token_id {
                r * w / nf
            } else {
                r / nf
            }
        })
        .collect())
}

/// Differentiable weighted cross-entropy over one sequence.
///
/// `logits` rows align one-to-one with `targets`; the gradient flows only
/// through the logits. With W = 1 this equals the plain mean CE.
pub fn weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    targets: &[u32],
    loss_mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    let coeffs = effective_weights(targets, loss_mask, cfg)?;
    let logp = tape.gather_log_softmax(logits, targets)?;
    let neg: Vec<T> = coeffs.iter().map(|&c| T::from_f64(-c)).collect();
    tape.weighted_sum(&logp, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EOS: u32 = 2;

    fn cfg(w: f64) -> LossConfig {
        LossConfig::new(w, EOS).unwrap()
    }

    #[test]
    fn rescale_examples() {
        assert!((rescale_factor(10, 10.0).unwrap() - 10.0 / 19.0).abs() < 1e-12);
        assert_eq!(rescale_factor(7, 1.0).unwrap(), 1.0);
        assert_eq!(rescale_factor(123, 1.0).unwrap(), 1.0);
        assert!((rescale_factor(1, 1000.0).unwrap() - 1e-3).abs() < 1e-15);
        assert!(matches!(rescale_factor(0, 10.0), Err(Error::EmptySequence)));
    }

    #[test]
    fn effective_weights_examples() {
        // targets [a, b, EOS], W = 10 -> [1/12, 1/12, 10/12]
        let w = effective_weights(&[4, 5, EOS], None, &cfg(10.0)).unwrap();
        let expect = [1.0 / 12.0, 1.0 / 12.0, 10.0 / 12.0];
        for (g, e) in w.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // W = 1 is uniform mean pooling
        let w = effective_weights(&[4, EOS], None, &cfg(1.0)).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn effective_weights_sum_to_one_with_single_eos() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..=64);
            let eos_pos = rng.gen_range(0..n);
            let targets: Vec<u32> = (0..n)
                .map(|i| if i == eos_pos { EOS } else { rng.gen_range(4..20) })
                .collect();
            let w = rng.gen_range(1.0..1000.0);
            let coeffs = effective_weights(&targets, None, &cfg(w)).unwrap();
            let sum: f64 = coeffs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "W={w} n={n}: sum={sum}");
        }
    }

    #[test]
    fn masked_positions_get_zero_and_are_excluded_from_n() {
        let targets = [9, 9, 4, 5, EOS];
        let mask = [false, false, true, true, true];
        let w = effective_weights(&targets, Some(&mask), &cfg(10.0)).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.0);
        // N = 3, so same as the unmasked 3-element example
        assert!((w[2] - 1.0 / 12.0).abs() < 1e-12);
        assert!((w[4] - 10.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn no_eos_falls_back_to_plain_mean() {
        let w = effective_weights(&[4, 5, 6], None, &cfg(100.0)).unwrap();
        for &c in &w {
            assert!((c - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_eos_positions_always_weigh_one() {
        // only false negatives are upweighted: the coefficient of a non-EOS
        // position is R/N regardless of W's size
        for w in [1.0, 10.0, 1000.0] {
            let coeffs = effective_weights(&[4, EOS], None, &cfg(w)).unwrap();
            let r = rescale_factor(2, w).unwrap();
            assert!((coeffs[0] - r / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eos_coefficient_strictly_increases_in_w() {
        // dL/d(EOS-position NLL) is exactly the EOS coefficient
        let mut last = 0.0;
        for w in [1.0, 2.0, 10.0, 100.0, 1000.0] {
            let coeffs = effective_weights(&[4, 5, EOS], None, &cfg(w)).unwrap();
            assert!(coeffs[2] > last, "W={w}");
            last = coeffs[2];
        }
    }

    /// Builds a 2-logit row whose softmax NLL at target 0 equals `nll`, by
    /// closed-form inversion: with logits [0, c], NLL = ln(1 + e^c), so
    /// c = ln(e^nll - 1).
    fn row_with_nll(nll: f64) -> [f64; 2] {
        [0.0, (nll.exp() - 1.0).ln()]
    }

    #[test]
    fn weighted_ce_matches_closed_form_example() {
        // per-token CE [1.0, 2.0], targets [a, EOS], W=10:
        // L2 = (1*1.0 + 10*2.0)/11 = 21/11; plain mean would be 1.5
        let r1 = row_with_nll(1.0); // target at index 0
        let r2 = row_with_nll(2.0); // target at index 1: mirror the row
        let logits =
            Tensor::from_vec(vec![r1[0], r1[1], r2[1], r2[0]], vec![2, 2]).unwrap();
        let targets = [0u32, 1u32];
        let lcfg = LossConfig::new(10.0, 1).unwrap();

        let mut tape = Tape::new();
        let loss = weighted_ce(&mut tape, &logits, &targets, None, &lcfg).unwrap();
        assert!((loss.item() - 21.0 / 11.0).abs() < 1e-9, "{}", loss.item());

        let mut tape = Tape::new();
        let base = weighted_ce(
            &mut tape,
            &logits,
            &targets,
            None,
            &LossConfig::new(1.0, 1).unwrap(),
        )
        .unwrap();
        assert!((base.item() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn uniform_logits_make_l2_equal_l1_for_every_w() {
        // uniform logits => identical per-token losses => weighted mean of
        // equal values is that value for any W
        let logits = Tensor::from_vec(vec![0.25; 12], vec![3, 4]).unwrap();
        let targets = [0u32, 0, EOS];

        let mut reference: Option<f64> = None;
        for w in [1.0, 10.0, 100.0, 1000.0] {
            let mut tape = Tape::new();
            let l = weighted_ce(&mut tape, &logits, &targets, None, &cfg(w))
                .unwrap()
                .item();
            match reference {
                None => reference = Some(l),
                Some(r) => assert!((l - r).abs() < 1e-12, "W={w}: {l} vs {r}"),
            }
        }
    }

    #[test]
    fn w1_equals_plain_mean_ce_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..=24);
            let v = rng.gen_range(3..=12);
            let data: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v) as u32).collect();
            let logits = Tensor::from_vec(data.clone(), vec![n, v]).unwrap();

            // independent plain mean CE oracle
            let mut expect = 0.0;
            for i in 0..n {
                let row = &data[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
                expect -= row[targets[i] as usize] - lse;
            }
            expect /= n as f64;

            let mut tape = Tape::new();
            let got = weighted_ce(&mut tape, &logits, &targets, None, &cfg(1.0))
                .unwrap()
                .item();
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(LossConfig::new(0.5, EOS).is_err());

        let logits = Tensor::from_vec(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            weighted_ce(&mut tape, &logits, &[5], None, &cfg(1.0)),
            Err(Error::VocabIndex { id: 5, vocab: 2 })
        ));

        let bad = Tensor::from_vec(vec![f64::NAN, 0.0], vec![1, 2]).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            weighted_ce(&mut tape, &bad, &[0], None, &cfg(1.0)),
            Err(Error::Numeric(_))
        ));

        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            weighted_ce(&mut tape, &logits, &[], None, &cfg(1.0)),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn gradient_flows_only_through_logits() {
        let logits = Tensor::from_vec(vec![0.4, -0.1, 0.2, 0.9], vec![2, 2]).unwrap();
        let mut tape = Tape::new();
        let leased = tape.leaf(&logits, true);
        let loss = weighted_ce(&mut tape, &leased, &[0, 1], None, &cfg(10.0)).unwrap();
        let grads: crate::tensor::Grads<f64> = tape.backward(&loss).unwrap();
        let g = grads.of(&leased).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.iter().any(|&x| x != 0.0));
    }
}
