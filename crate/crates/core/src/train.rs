//! Training loop: AdamW with decoupled weight decay, linear/cosine learning
//! rate schedules, and validation-loss checkpoint selection.
//!
//! Everything is seeded: data order, dropout, and init draw from separate
//! RNG streams, so two runs with the same seed produce bit-identical loss
//! curves, and runs that differ only in the EOS weight consume the data
//! stream identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{weighted_ce, LossConfig};
use crate::model::{checkpoint, pack_sample, Packed, Transformer, Vocab};
use crate::scalar::Scalar;
use crate::tensor::Tape;

const DATA_STREAM: u64 = 0x9e3779b97f4a7c15;
const DROPOUT_STREAM: u64 = 0xbf58476d1ce4e5b9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
}

/// Learning rate at `step` of `max_steps`; both schedules start at
/// `base_lr` and reach 0 at `max_steps`.
pub fn lr_at(schedule: Schedule, base_lr: f64, step: usize, max_steps: usize) -> Result<f64> {
    if step > max_steps {
        return Err(Error::StepRange { step, max_steps });
    }
    let frac = step as f64 / max_steps as f64;
    Ok(match schedule {
        Schedule::Linear => base_lr * (1.0 - frac),
        Schedule::Cosine => base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// From-scratch default; the fine-tuning value 5e-5 remains selectable.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            weight_decay: 0.01,
            schedule: Schedule::Linear,
            max_steps: 1000,
            batch_size: 16,
            eval_every: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 || self.max_steps % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "eval_every ({}) must divide max_steps ({}) evenly",
                self.eval_every, self.max_steps
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// One AdamW update on a flat parameter group. Decay is decoupled: applied
/// directly to the parameters, never folded into the gradient. Moments are
/// kept in f64 regardless of the parameter precision.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    name: &str,
    params: &mut [T],
    grads: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.to_string()));
        }
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let p = params[i].to_f64();
        let updated = p * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps);
        params[i] = T::from_f64(updated);
    }
    Ok(())
}

/// Optimizer state across all parameter groups of a model.
pub struct AdamW {
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(model: &Transformer<T>) -> Self {
        AdamW {
            t: 0,
            m: model.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: model.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step<T: Scalar>(
        &mut self,
        model: &mut Transformer<T>,
        grads: &[Vec<T>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        for idx in 0..grads.len() {
            let name = model.params()[idx].name.clone();
            adamw_step(
                &name,
                model.param_data_mut(idx),
                &grads[idx],
                &mut self.m[idx],
                &mut self.v[idx],
                self.t,
                lr,
                cfg.weight_decay,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: usize,
    pub val_loss: f64,
    pub path: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub best: BestCheckpoint,
    pub diverged: Option<usize>,
    pub curve: Vec<CurvePoint>,
}

/// Weighted-CE loss of one packed sequence under the current parameters.
pub fn sequence_loss<T: Scalar>(
    model: &Transformer<T>,
    packed: &Packed,
    lcfg: &LossConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &packed.input_ids, dropout_rng)?;
    let loss = weighted_ce(
        &mut tape,
        &fwd.logits,
        &packed.target_ids,
        Some(&packed.loss_mask),
        lcfg,
    )?;
    let grads = tape.backward(&loss)?;
    let per_param: Vec<Vec<T>> = fwd
        .param_leaves
        .iter()
        .map(|leaf| {
            grads
                .of(leaf)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); leaf.len()])
        })
        .collect();
    Ok((loss.item().to_f64(), per_param))
}

/// Forward-only loss (no gradient collection), for validation.
pub fn eval_loss<T: Scalar>(
    model: &Transformer<T>,
    packed: &[Packed],
    lcfg: &LossConfig,
) -> Result<f64> {
    if packed.is_empty() {
        return Err(Error::EmptySequence);
    }
    let losses: Vec<Result<f64>> = packed
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &p.input_ids, None)?;
            let loss = weighted_ce(&mut tape, &fwd.logits, &p.target_ids, Some(&p.loss_mask), lcfg)?;
            Ok(loss.item().to_f64())
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / packed.len() as f64)
}

pub fn pack_dataset<T: Scalar>(
    model: &Transformer<T>,
    vocab: &Vocab,
    samples: &[crate::data::Sample],
) -> Result<Vec<Packed>> {
    let max = model.config().max_seq_len;
    samples
        .iter()
        .map(|s| {
            let p = pack_sample(vocab, &s.source, &s.reference)?;
            if p.input_ids.len() > max {
                return Err(Error::SequenceTooLong {
                    len: p.input_ids.len(),
                    max,
                });
            }
            Ok(p)
        })
        .collect()
}

/// Runs the optimization recipe and returns the argmin-val-loss checkpoint.
///
/// Run directory layout: `config.json`, `loss_curve.csv`, `data_order.log`,
/// `checkpoints/step-N.ckpt`, and a `best.ckpt` pointer file.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    vocab: &Vocab,
    data: &Dataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    run_dir: &Path,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    let train_packed = pack_dataset(model, vocab, &data.train)?;
    let val_packed = pack_dataset(model, vocab, &data.val)?;

    fs::create_dir_all(run_dir.join("checkpoints"))?;
    let record = serde_json::json!({
        "model": model.config(),
        "train": tcfg,
        "loss": lcfg,
    });
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&record)?)?;

    let mut curve_file = std::io::BufWriter::new(fs::File::create(run_dir.join("loss_curve.csv"))?);
    writeln!(curve_file, "step,train_loss,val_loss,lr")?;
    let mut order_file = std::io::BufWriter::new(fs::File::create(run_dir.join("data_order.log"))?);

    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ DATA_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ DROPOUT_STREAM);
    let dropout_active = model.config().dropout_rate > 0.0;

    let mut order: Vec<usize> = Vec::new();
    let next_batch = |rng: &mut ChaCha8Rng, order: &mut Vec<usize>| -> Vec<usize> {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size {
            if order.is_empty() {
                let mut fresh: Vec<usize> = (0..train_packed.len()).collect();
                fresh.shuffle(rng);
                *order = fresh;
            }
            batch.push(order.pop().unwrap());
        }
        batch
    };

    let mut optimizer = AdamW::new(model);
    let mut curve = Vec::with_capacity(tcfg.max_steps);
    let mut best: Option<BestCheckpoint> = None;
    let mut diverged = None;

    'steps: for step in 1..=tcfg.max_steps {
        let batch = next_batch(&mut data_rng, &mut order);
        writeln!(
            order_file,
            "{step},{}",
            batch
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )?;

        // Per-sample dropout RNGs are split off the main stream up front so
        // the stream advances identically whatever the thread schedule.
        let sample_rngs: Vec<Option<ChaCha8Rng>> = batch
            .iter()
            .map(|_| {
                if dropout_active {
                    use rand::Rng;
                    Some(ChaCha8Rng::seed_from_u64(dropout_rng.gen()))
                } else {
                    None
                }
            })
            .collect();

        // Each batch item builds and walks its own single-threaded tape;
        // gradients reduce in batch order afterward, so the result does not
        // depend on the thread schedule.
        let results: Vec<Result<(f64, Vec<Vec<T>>)>> = batch
            .par_iter()
            .zip(sample_rngs.into_par_iter())
            .map(|(&idx, mut rng)| {
                sequence_loss(model, &train_packed[idx], lcfg, rng.as_mut())
            })
            .collect();

        let mut batch_loss = 0.0;
        let mut grad_sum: Option<Vec<Vec<T>>> = None;
        for r in results {
            let (loss, grads) = match r {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    diverged = Some(step);
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            batch_loss += loss;
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, &y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
        }
        batch_loss /= batch.len() as f64;
        if !batch_loss.is_finite() {
            diverged = Some(step);
            break 'steps;
        }
        let mut grads = grad_sum.expect("nonempty batch");
        let inv = T::from_f64(1.0 / batch.len() as f64);
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }

        let lr = lr_at(tcfg.schedule, tcfg.base_lr, step - 1, tcfg.max_steps)?;
        match optimizer.step(model, &grads, lr, tcfg) {
            Ok(()) => {}
            Err(Error::NonFiniteGrad(name)) => {
                log::error!("non-finite gradient in {name} at step {step}");
                diverged = Some(step);
                break 'steps;
            }
            Err(e) => return Err(e),
        }

        let val_loss = if step % tcfg.eval_every == 0 {
            let vl = eval_loss(model, &val_packed, lcfg)?;
            let path = run_dir.join(format!("checkpoints/step-{step}.ckpt"));
            checkpoint::save(
                &path,
                model,
                vocab,
                &checkpoint::CheckpointMeta {
                    step,
                    val_loss: vl,
                },
            )?;
            if best.as_ref().is_none_or(|b| vl < b.val_loss) {
                best = Some(BestCheckpoint {
                    step,
                    val_loss: vl,
                    path,
                });
            }
            Some(vl)
        } else {
            None
        };

        writeln!(
            curve_file,
            "{step},{batch_loss},{},{lr}",
            val_loss.map(|v| v.to_string()).unwrap_or_default()
        )?;
        curve.push(CurvePoint {
            step,
            train_loss: batch_loss,
            val_loss,
            lr,
        });
    }
    curve_file.flush()?;
    order_file.flush()?;

    if let Some(step) = diverged {
        log::error!("training diverged at step {step}; keeping last good checkpoint");
    }
    let best = match best {
        Some(b) => b,
        None => {
            return Err(diverged
                .map(|step| Error::Diverged { step })
                .unwrap_or(Error::Config("no evaluation was performed".into())))
        }
    };
    fs::write(
        run_dir.join("best.ckpt"),
        serde_json::to_string_pretty(&serde_json::json!({
            "step": best.step,
            "val_loss": best.val_loss,
            "path": format!("checkpoints/step-{}.ckpt", best.step),
        }))?,
    )?;
    Ok(TrainOutput {
        best,
        diverged,
        curve,
    })
}

/// Resolves the `best.ckpt` pointer file of a run directory.
pub fn resolve_best(run_dir: &Path) -> Result<PathBuf> {
    let raw = fs::read_to_string(run_dir.join("best.ckpt"))?;
    let v: serde_json::Value = serde_json::from_str(&raw)?;
    let rel = v
        .get("path")
        .and_then(|p| p.as_str())
        .ok_or_else(|| Error::Checkpoint("best.ckpt has no path field".into()))?;
    Ok(run_dir.join(rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints_and_midpoints() {
        for schedule in [Schedule::Linear, Schedule::Cosine] {
            assert_eq!(lr_at(schedule, 1e-3, 0, 100).unwrap(), 1e-3);
            assert!(lr_at(schedule, 1e-3, 100, 100).unwrap().abs() < 1e-18);
            let half = lr_at(schedule, 1e-3, 50, 100).unwrap();
            assert!((half - 5e-4).abs() < 1e-12, "{schedule:?}: {half}");
        }
        // cosine quarter point: 0.5*(1+cos(pi/4)) = 0.85355339...
        let q = lr_at(Schedule::Cosine, 1.0, 25, 100).unwrap();
        assert!((q - 0.8535533905932737).abs() < 1e-12, "{q}");
        assert!(matches!(
            lr_at(Schedule::Linear, 1.0, 101, 100),
            Err(Error::StepRange { .. })
        ));
    }

    #[test]
    fn adamw_zero_grads_zero_decay_keeps_params() {
        let mut p = [1.5f64, -0.25];
        let g = [0.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step("p", &mut p, &g, &mut m, &mut v, 1, 1e-2, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, [1.5, -0.25]);
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_params() {
        let mut p = [2.0f64];
        let g = [0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let (lr, wd) = (0.1, 0.5);
        for t in 1..=3 {
            adamw_step("p", &mut p, &g, &mut m, &mut v, t, lr, wd, 0.9, 0.999, 1e-8).unwrap();
        }
        let expect = 2.0 * (1.0 - lr * wd).powi(3);
        assert!((p[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_scalar_trace_oracle() {
        // hand-rolled reference on a single scalar parameter
        let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
        let (lr, wd) = (0.05, 0.01);
        let grads = [0.3, -0.2, 0.7];

        let mut theta_ref = 1.0f64;
        let (mut m_ref, mut v_ref) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m_ref = beta1 * m_ref + (1.0 - beta1) * g;
            v_ref = beta2 * v_ref + (1.0 - beta2) * g * g;
            let m_hat = m_ref / (1.0 - beta1.powi(t));
            let v_hat = v_ref / (1.0 - beta2.powi(t));
            theta_ref = theta_ref * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = [1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for (i, &g) in grads.iter().enumerate() {
            adamw_step("p", &mut p, &[g], &mut m, &mut v, i + 1, lr, wd, beta1, beta2, eps)
                .unwrap();
        }
        assert!((p[0] - theta_ref).abs() < 1e-10, "{} vs {theta_ref}", p[0]);
    }

    #[test]
    fn adamw_nan_grad_names_parameter() {
        let mut p = [1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let err = adamw_step(
            "layer0.attn.wq",
            &mut p,
            &[f64::NAN],
            &mut m,
            &mut v,
            1,
            0.1,
            0.0,
            0.9,
            0.999,
            1e-8,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer0.attn.wq"));
    }

    #[test]
    fn eval_every_must_divide_max_steps() {
        let cfg = TrainConfig {
            max_steps: 100,
            eval_every: 30,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
