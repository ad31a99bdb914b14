//! Alternating optimization of the exact-likelihood objective and the
//! Monte-Carlo constraint objective, with Adam and global-norm gradient
//! clipping. Training is fully determined by (seed, config, dataset).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::constraints::{mc_constraint_estimate, mc_constraint_objective, ConstraintWeights};
use crate::data::{CdrLoop, Dataset, Split};
use crate::error::{Error, Result};
use crate::flow::{apply_bn_updates, FlowModel, Leases, ParamId, ParamSet, Phase};

/// Training settings. `alternation = k` takes one constraint step after
/// every k-th likelihood step; `0` disables constraint learning entirely
/// (the no-constraint ablation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub alternation: usize,
    pub seed: u64,
    pub constraint_weights: ConstraintWeights,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            mc_samples: 64,
            alternation: 1,
            seed: 0,
            constraint_weights: ConstraintWeights::default(),
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.alternation > 0 && self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive when constraint learning is on".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    /// `None` when the Monte-Carlo estimate diverged (a saturated inverse
    /// path can underflow a coupling scale to zero off-distribution).
    pub constraint_estimate: Option<f64>,
    pub grad_clip_events: usize,
    pub wall_seconds: f64,
}

/// Per-epoch records, serializable as line-delimited JSON.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &serde_json::to_string(r).map_err(|e| Error::Data(format!("log encode: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("log decode: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

/// First/second-moment state of Adam, aligned with a fixed id list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, ids: &[ParamId]) -> Self {
        let m = ids.iter().map(|id| vec![0.0; params.tensor(*id).data.len()]).collect();
        let v = ids.iter().map(|id| vec![0.0; params.tensor(*id).data.len()]).collect();
        Self { t: 0, m, v }
    }
}

/// One Adam update with bias correction, consuming the `grad` fields of the
/// listed parameters (missing gradients count as zero). Gradients are
/// cleared afterwards.
pub fn adam_step(
    params: &mut ParamSet,
    ids: &[ParamId],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if ids.len() != state.m.len() {
        return Err(Error::Dim(format!(
            "adam state tracks {} tensors, got {}",
            state.m.len(),
            ids.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (slot, id) in ids.iter().enumerate() {
        let tensor = params.tensor_mut(*id);
        let n = tensor.data.len();
        if let Some(g) = &tensor.grad {
            if g.len() != n {
                return Err(Error::Dim(format!(
                    "gradient length {} does not match parameter length {n}",
                    g.len()
                )));
            }
        }
        for i in 0..n {
            let g = tensor.grad.as_ref().map_or(0.0, |g| g[i]);
            let m = &mut state.m[slot][i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            let v = &mut state.v[slot][i];
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.grad = None;
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns whether clipping fired.
fn clip_gradients(params: &mut ParamSet, ids: &[ParamId], max_norm: f64) -> bool {
    let mut sq = 0.0;
    for id in ids {
        if let Some(g) = &params.tensor(*id).grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return false;
    }
    let scale = max_norm / norm;
    for id in ids {
        if let Some(g) = &mut params.tensor_mut(*id).grad {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    true
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.rotate_left(17) ^ c.rotate_left(41);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mean negative log-likelihood over a split, inference mode, with the
/// dequantization noise fixed-seeded per example.
pub fn evaluate_nll(model: &FlowModel, loops: &[&CdrLoop], noise_seed: u64) -> Result<f64> {
    if loops.is_empty() {
        return Err(Error::Contract("evaluate_nll on an empty split".into()));
    }
    let mut acc = 0.0;
    for (i, l) in loops.iter().enumerate() {
        acc -= model.log_likelihood(l, mix_seed(noise_seed, 0x5eed, i as u64))?;
    }
    Ok(acc / loops.len() as f64)
}

/// Train a model in place; returns the per-epoch log. The model ends at the
/// best-validation-NLL parameters when a validation split exists, otherwise
/// at the final parameters. Normalization statistics and the length
/// histogram are fitted from the training split before the first step.
pub fn train(model: &mut FlowModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let train_loops = dataset.split(Split::Train);
    if train_loops.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_loops = dataset.split(Split::Validation);
    model.fit_normalization(&train_loops)?;

    let ids = model.params.trainable_ids();
    let mut adam = AdamState::new(&model.params, &ids);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let snapshot = |params: &ParamSet| -> Vec<Vec<f64>> {
        params.ids().map(|id| params.tensor(id).data.clone()).collect()
    };

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut iteration: u64 = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_loops.len()).collect();
        let mut shuffle_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xbabe, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_nll = 0.0;
        let mut clip_events = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            iteration += 1;
            model.params.zero_grads();
            let inv_batch = 1.0 / batch.len() as f64;
            for &idx in batch {
                let l = train_loops[idx];
                let d = l.distance_matrix()?;
                let d_raw = model.pad_distance(&d)?;
                let noise = mix_seed(cfg.seed, iteration, idx as u64);
                let s = model.dequantize(l, noise)?;
                let mut tape = Tape::new();
                let mut leases = Leases::new(&model.params);
                let mut bn_upd = Vec::new();
                let parts = model.ll_continuous_t(
                    &mut tape,
                    &mut leases,
                    &d_raw,
                    &s,
                    l.len(),
                    false,
                    Phase::Train,
                    &mut bn_upd,
                )?;
                let ll = tape.scalar_value(parts.ll);
                if !ll.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite likelihood at epoch {epoch}, iteration {iteration}, loop {}",
                        l.id
                    )));
                }
                epoch_nll -= ll;
                let nll = tape.mul_scalar(parts.ll, -inv_batch);
                tape.backward(nll)?;
                leases.write_grads(&tape, &mut model.params);
                apply_bn_updates(&mut model.params, bn_upd, model.hyper.bn_momentum);
            }
            if clip_gradients(&mut model.params, &ids, cfg.grad_clip) {
                clip_events += 1;
            }
            adam_step(&mut model.params, &ids, &mut adam, cfg.learning_rate, 0.9, 0.999, 1e-8)?;

            if cfg.alternation > 0 && iteration % cfg.alternation as u64 == 0 {
                model.params.zero_grads();
                let mut tape = Tape::new();
                let mut leases = Leases::new(&model.params);
                let mut bn_upd = Vec::new();
                let obj = mc_constraint_objective(
                    model,
                    &model.validity,
                    &cfg.constraint_weights,
                    cfg.mc_samples,
                    mix_seed(cfg.seed, 0xc0, iteration),
                    &mut tape,
                    &mut leases,
                    Phase::Train,
                    &mut bn_upd,
                )?;
                let v = tape.scalar_value(obj);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite constraint objective at epoch {epoch}, iteration {iteration}"
                    )));
                }
                tape.backward(obj)?;
                leases.write_grads(&tape, &mut model.params);
                apply_bn_updates(&mut model.params, bn_upd, model.hyper.bn_momentum);
                if clip_gradients(&mut model.params, &ids, cfg.grad_clip) {
                    clip_events += 1;
                }
                adam_step(&mut model.params, &ids, &mut adam, cfg.learning_rate, 0.9, 0.999, 1e-8)?;
            }
        }

        let train_nll = epoch_nll / train_loops.len() as f64;
        let val_nll = if val_loops.is_empty() {
            None
        } else {
            Some(evaluate_nll(model, &val_loops, cfg.seed)?)
        };
        let constraint_estimate = match mc_constraint_estimate(
            model,
            &model.validity,
            &cfg.constraint_weights,
            cfg.mc_samples.max(1),
            cfg.seed,
        ) {
            Ok(v) if v.is_finite() => Some(v),
            _ => None,
        };
        if let Some(v) = val_nll {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, snapshot(&model.params)));
            }
        }
        log.records.push(EpochRecord {
            epoch,
            train_nll,
            val_nll,
            constraint_estimate,
            grad_clip_events: clip_events,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, data)) = best {
        for (id, values) in model.params.ids().zip(data) {
            model.params.tensor_mut(id).data = values;
        }
    }
    Ok(log)
}
