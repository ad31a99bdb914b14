//! The invertible model over (distance matrix, sequence) pairs.
//!
//! A loop `x = (D, S)` is encoded in two phases: a stack of affine coupling
//! layers with conv conditioners maps the normalized padded distance matrix
//! to `z_D`, and a second stack with distance-weighted graph conditioners
//! maps the dequantized one-hot sequence, conditioned on the raw distance
//! matrix, to `z_S`. Each coupling layer keeps one row block fixed and
//! transforms the other elementwise as `O2 = I2 ⊙ sigmoid(R(I1)) + T(I1)`,
//! so its log-Jacobian is the sum of `log sigmoid(R(I1))` over transformed
//! entries and its inverse is `(O2 - T(I1)) / sigmoid(R(I1))`. Consecutive
//! layers swap which block is kept.
//!
//! Variable loop lengths are handled by padding to `n_max` with recorded
//! true lengths: the likelihood's prior and log-det sums are restricted to
//! the true-length region, and padded entries are deterministic (the
//! per-entry training mean for `D`, zero rows for `S`). Generated matrices
//! are post-processed outside the invertible path: symmetrized, diagonal
//! zeroed, negatives clamped.

pub mod checkpoint;
pub mod conditioner;
pub mod params;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::CdrLoop;
use crate::error::{Error, Result};
use crate::geometry::{DistanceMatrix, LoopClass, ValiditySpec};

pub use conditioner::{wgnn_mix, CnnConditioner, Phase, WgnnConditioner};
pub use params::{apply_bn_updates, BnUpdate, Leases, ParamId, ParamSet};

const LN_2PI: f64 = 1.8378770664093453;

/// Architecture and preprocessing constants of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Padded loop length; loops longer than this cannot be encoded.
    pub n_max: usize,
    pub vocab: usize,
    pub dist_layers: usize,
    pub amino_layers: usize,
    pub conv_channels: usize,
    pub wgnn_dim: usize,
    pub mlp_hidden: (usize, usize),
    pub wgnn_xi: f64,
    pub dequant_scale: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_max: 16,
            vocab: 20,
            dist_layers: 5,
            amino_layers: 10,
            conv_channels: 128,
            wgnn_dim: 64,
            mlp_hidden: (128, 64),
            wgnn_xi: 0.3,
            dequant_scale: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl HyperParams {
    /// A small configuration for fast CPU experiments and tests.
    pub fn toy(n_max: usize) -> Self {
        Self {
            n_max,
            vocab: 20,
            dist_layers: 3,
            amino_layers: 4,
            conv_channels: 8,
            wgnn_dim: 16,
            mlp_hidden: (24, 16),
            wgnn_xi: 0.3,
            dequant_scale: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_max < 2 {
            return Err(Error::Config("n_max must be at least 2".into()));
        }
        if self.vocab == 0 || self.dist_layers == 0 || self.amino_layers == 0 {
            return Err(Error::Config("layer and vocab counts must be positive".into()));
        }
        if !(self.wgnn_xi > 0.0) {
            return Err(Error::Config(format!("wgnn_xi must be positive, got {}", self.wgnn_xi)));
        }
        if !(self.dequant_scale > 0.0 && self.dequant_scale < 1.0) {
            return Err(Error::Config(format!(
                "dequant_scale must be in (0, 1), got {}",
                self.dequant_scale
            )));
        }
        Ok(())
    }
}

/// Per-entry standardization statistics of the padded distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    fn identity(n_max: usize) -> Self {
        Self { mean: vec![0.0; n_max * n_max], std: vec![1.0; n_max * n_max] }
    }
}

/// Latent encoding of one loop: `z_D` is `n_max x n_max`, `z_S` is
/// `n_max x vocab`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z_d: Vec<f64>,
    pub z_s: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DistCoupling {
    swap: bool,
    r: CnnConditioner,
    t: CnnConditioner,
}

#[derive(Debug, Clone)]
struct AminoCoupling {
    swap: bool,
    r: WgnnConditioner,
    t: WgnnConditioner,
}

/// The trained (or trainable) two-phase flow.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub hyper: HyperParams,
    pub class: LoopClass,
    pub validity: ValiditySpec,
    pub params: ParamSet,
    dist_layers: Vec<DistCoupling>,
    amino_layers: Vec<AminoCoupling>,
    pub norm: NormStats,
    /// Histogram of training loop lengths, used to draw generation lengths.
    pub length_counts: Vec<(usize, usize)>,
}

/// Everything the likelihood builder exposes on the tape.
pub struct LlParts {
    pub ll: Var,
    pub z_d: Var,
    pub z_s: Var,
    pub logdet_d: Var,
    pub logdet_s: Var,
    pub x_d: Var,
    pub x_s: Var,
}

/// Raw and post-processed results of decoding one latent pair.
pub struct Decoded {
    /// Denormalized distance matrix before post-processing, `n_max` square.
    pub d_raw: Vec<f64>,
    /// Symmetrized, zero-diagonal, clamped matrix over the padded size.
    pub d_post: DistanceMatrix,
    /// Continuous sequence matrix (`n_max x vocab`), argmax-decodable.
    pub s_cont: Vec<f64>,
}

impl FlowModel {
    pub fn new(hyper: HyperParams, class: LoopClass, validity: ValiditySpec, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = hyper.n_max;
        let m = n.div_ceil(2);
        let mut dist_layers = Vec::with_capacity(hyper.dist_layers);
        for k in 0..hyper.dist_layers {
            let swap = k % 2 == 1;
            let (p1, p2) = if swap { (n - m, m) } else { (m, n - m) };
            let r = CnnConditioner::init(&mut params, &mut rng, &format!("dist.{k}.r"), p1, p2, hyper.conv_channels);
            let t = CnnConditioner::init(&mut params, &mut rng, &format!("dist.{k}.t"), p1, p2, hyper.conv_channels);
            dist_layers.push(DistCoupling { swap, r, t });
        }
        let mut amino_layers = Vec::with_capacity(hyper.amino_layers);
        for l in 0..hyper.amino_layers {
            let swap = l % 2 == 1;
            let r = WgnnConditioner::init(&mut params, &mut rng, &format!("amino.{l}.r"), hyper.vocab, hyper.wgnn_dim, hyper.mlp_hidden);
            let t = WgnnConditioner::init(&mut params, &mut rng, &format!("amino.{l}.t"), hyper.vocab, hyper.wgnn_dim, hyper.mlp_hidden);
            amino_layers.push(AminoCoupling { swap, r, t });
        }
        let norm = NormStats::identity(n);
        Ok(Self {
            length_counts: vec![(n, 1)],
            hyper,
            class,
            validity,
            params,
            dist_layers,
            amino_layers,
            norm,
        })
    }

    pub fn n_max(&self) -> usize {
        self.hyper.n_max
    }

    /// Add Gaussian noise to every trainable parameter; gives the flow a
    /// nontrivial random parameterization for invertibility checks.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.params.trainable_ids() {
            let t = self.params.tensor_mut(id);
            for v in t.data.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += g * scale;
            }
        }
    }

    /// Estimate the per-entry normalization statistics and the length
    /// histogram from training loops.
    pub fn fit_normalization(&mut self, loops: &[&CdrLoop]) -> Result<()> {
        let n = self.hyper.n_max;
        if loops.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty set".into()));
        }
        let mut sums = vec![0.0; n * n];
        let mut sqsums = vec![0.0; n * n];
        let mut counts = vec![0usize; n * n];
        let mut lengths = std::collections::BTreeMap::new();
        for l in loops {
            if l.len() > n {
                return Err(Error::Capacity(format!(
                    "loop {} has {} residues, model capacity is {n}",
                    l.id,
                    l.len()
                )));
            }
            *lengths.entry(l.len()).or_insert(0usize) += 1;
            let d = l.distance_matrix()?;
            for i in 0..l.len() {
                for j in 0..l.len() {
                    let idx = i * n + j;
                    let v = d.get(i, j);
                    sums[idx] += v;
                    sqsums[idx] += v * v;
                    counts[idx] += 1;
                }
            }
        }
        // Overall off-diagonal statistics back-fill entries never observed.
        let mut all_sum = 0.0;
        let mut all_sq = 0.0;
        let mut all_n = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j && counts[i * n + j] > 0 {
                    all_sum += sums[i * n + j];
                    all_sq += sqsums[i * n + j];
                    all_n += counts[i * n + j];
                }
            }
        }
        let fallback_mean = if all_n > 0 { all_sum / all_n as f64 } else { 0.0 };
        let fallback_var = if all_n > 0 { (all_sq / all_n as f64 - fallback_mean * fallback_mean).max(0.0) } else { 1.0 };
        let mut mean = vec![0.0; n * n];
        let mut std = vec![1.0; n * n];
        for idx in 0..n * n {
            let (m, v) = if counts[idx] > 0 {
                let m = sums[idx] / counts[idx] as f64;
                (m, (sqsums[idx] / counts[idx] as f64 - m * m).max(0.0))
            } else {
                (fallback_mean, fallback_var)
            };
            mean[idx] = m;
            std[idx] = if v.sqrt() < 1e-8 { 1.0 } else { v.sqrt() };
        }
        self.norm = NormStats { mean, std };
        self.length_counts = lengths.into_iter().collect();
        Ok(())
    }

    // ── Preprocessing ────────────────────────────────────────────────

    /// Pad a true-length distance matrix into the `n_max` frame, filling
    /// the padding with the per-entry training mean (normalized zero).
    pub fn pad_distance(&self, d: &DistanceMatrix) -> Result<Vec<f64>> {
        let n = self.hyper.n_max;
        if d.n() > n {
            return Err(Error::Capacity(format!(
                "distance matrix is {}x{}, model capacity is {n}",
                d.n(),
                d.n()
            )));
        }
        let mut out = self.norm.mean.clone();
        for i in 0..d.n() {
            for j in 0..d.n() {
                out[i * n + j] = d.get(i, j);
            }
        }
        Ok(out)
    }

    /// Dequantize a one-hot sequence with additive uniform noise on the
    /// true rows; padded rows stay exactly zero.
    pub fn dequantize(&self, l: &CdrLoop, noise_seed: u64) -> Result<Vec<f64>> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        if l.len() > n {
            return Err(Error::Capacity(format!(
                "loop {} has {} residues, model capacity is {n}",
                l.id,
                l.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let one_hot = l.one_hot();
        let mut out = vec![0.0; n * v];
        for r in 0..l.len() {
            for c in 0..v {
                out[r * v + c] = one_hot[r * v + c] + rng.gen::<f64>() * self.hyper.dequant_scale;
            }
        }
        Ok(out)
    }

    /// Edge weights `exp(-xi * D)` over the padded raw matrix.
    pub fn edge_weights(&self, d_raw_padded: &[f64]) -> Vec<f64> {
        d_raw_padded.iter().map(|v| (-self.hyper.wgnn_xi * v).exp()).collect()
    }

    fn true_mask_d(&self, n_true: usize) -> Vec<f64> {
        let n = self.hyper.n_max;
        let mut m = vec![0.0; n * n];
        for i in 0..n_true {
            for j in 0..n_true {
                m[i * n + j] = 1.0;
            }
        }
        m
    }

    fn true_mask_s(&self, n_true: usize) -> Vec<f64> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        let mut m = vec![0.0; n * v];
        for i in 0..n_true {
            for c in 0..v {
                m[i * v + c] = 1.0;
            }
        }
        m
    }

    fn split_point(&self) -> usize {
        self.hyper.n_max.div_ceil(2)
    }

    /// Row mask (over an `n_max x vocab` matrix) selecting a coupling
    /// layer's kept partition.
    fn amino_row_mask(&self, swap: bool) -> Vec<f64> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        let m = self.split_point();
        let mut out = vec![0.0; n * v];
        for r in 0..n {
            let kept = if swap { r >= m } else { r < m };
            if kept {
                for c in 0..v {
                    out[r * v + c] = 1.0;
                }
            }
        }
        out
    }

    // ── Tape builders ────────────────────────────────────────────────

    /// One affine coupling step given conditioner outputs; returns the
    /// transformed block and the masked log-determinant contribution.
    #[allow(clippy::too_many_arguments)]
    fn couple_forward(
        tape: &mut Tape,
        i2: Var,
        r_out: Var,
        t_out: Var,
        mask_i2: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.sigmoid(r_out);
        let scaled = tape.mul(i2, s)?;
        let o2 = tape.add(scaled, t_out)?;
        let ls = tape.log(s)?;
        let masked = tape.mul(ls, mask_i2)?;
        let ld = tape.sum(masked);
        Ok((o2, ld))
    }

    fn couple_inverse(tape: &mut Tape, o2: Var, r_out: Var, t_out: Var) -> Result<Var> {
        let s = tape.sigmoid(r_out);
        let shifted = tape.sub(o2, t_out)?;
        tape.div(shifted, s)
    }

    /// Distance flow forward over a normalized padded matrix variable.
    #[allow(clippy::too_many_arguments)]
    pub fn dist_forward_t(
        &self,
        tape: &mut Tape,
        leases: &mut Leases,
        x: Var,
        mask_d: &[f64],
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Var)> {
        let n = self.hyper.n_max;
        let m = self.split_point();
        let mut cur = x;
        let mut logdet = tape.scalar(0.0);
        for layer in &self.dist_layers {
            let (r0, r1, c0, c1) = if layer.swap { (m, n, 0, m) } else { (0, m, m, n) };
            let i1 = tape.slice_rows(cur, r0, r1)?;
            let i2 = tape.slice_rows(cur, c0, c1)?;
            let r_out = layer.r.apply(tape, &self.params, leases, i1, self.hyper.bn_eps, phase, bn_updates)?;
            let t_out = layer.t.apply(tape, &self.params, leases, i1, self.hyper.bn_eps, phase, bn_updates)?;
            let mask_vals: Vec<f64> = mask_d[c0 * n..c1 * n].to_vec();
            let mask_i2 = tape.constant(vec![c1 - c0, n], mask_vals)?;
            let (o2, ld) = Self::couple_forward(tape, i2, r_out, t_out, mask_i2)?;
            cur = if layer.swap {
                tape.concat_rows(o2, i1)?
            } else {
                tape.concat_rows(i1, o2)?
            };
            logdet = tape.add(logdet, ld)?;
        }
        Ok((cur, logdet))
    }

    /// Distance flow inverse; returns the normalized padded matrix.
    pub fn dist_inverse_t(
        &self,
        tape: &mut Tape,
        leases: &mut Leases,
        z: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let n = self.hyper.n_max;
        let m = self.split_point();
        let mut cur = z;
        for layer in self.dist_layers.iter().rev() {
            let (r0, r1, c0, c1) = if layer.swap { (m, n, 0, m) } else { (0, m, m, n) };
            let i1 = tape.slice_rows(cur, r0, r1)?;
            let o2 = tape.slice_rows(cur, c0, c1)?;
            let r_out = layer.r.apply(tape, &self.params, leases, i1, self.hyper.bn_eps, phase, bn_updates)?;
            let t_out = layer.t.apply(tape, &self.params, leases, i1, self.hyper.bn_eps, phase, bn_updates)?;
            let i2 = Self::couple_inverse(tape, o2, r_out, t_out)?;
            cur = if layer.swap {
                tape.concat_rows(i2, i1)?
            } else {
                tape.concat_rows(i1, i2)?
            };
        }
        Ok(cur)
    }

    /// Conditional sequence flow forward.
    #[allow(clippy::too_many_arguments)]
    pub fn amino_forward_t(
        &self,
        tape: &mut Tape,
        leases: &mut Leases,
        s: Var,
        dtil: Var,
        mask_s: &[f64],
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Var)> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        let m = self.split_point();
        let mut cur = s;
        let mut logdet = tape.scalar(0.0);
        for layer in &self.amino_layers {
            let (c0, c1) = if layer.swap { (0, m) } else { (m, n) };
            let row_mask = tape.constant(vec![n, v], self.amino_row_mask(layer.swap))?;
            let r_out = layer.r.apply(tape, &self.params, leases, cur, dtil, row_mask, (c0, c1), self.hyper.bn_eps, phase, bn_updates)?;
            let t_out = layer.t.apply(tape, &self.params, leases, cur, dtil, row_mask, (c0, c1), self.hyper.bn_eps, phase, bn_updates)?;
            let i1 = tape.slice_rows(cur, if layer.swap { m } else { 0 }, if layer.swap { n } else { m })?;
            let i2 = tape.slice_rows(cur, c0, c1)?;
            let mask_vals: Vec<f64> = mask_s[c0 * v..c1 * v].to_vec();
            let mask_i2 = tape.constant(vec![c1 - c0, v], mask_vals)?;
            let (o2, ld) = Self::couple_forward(tape, i2, r_out, t_out, mask_i2)?;
            cur = if layer.swap {
                tape.concat_rows(o2, i1)?
            } else {
                tape.concat_rows(i1, o2)?
            };
            logdet = tape.add(logdet, ld)?;
        }
        Ok((cur, logdet))
    }

    /// Conditional sequence flow inverse.
    pub fn amino_inverse_t(
        &self,
        tape: &mut Tape,
        leases: &mut Leases,
        z: Var,
        dtil: Var,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        let m = self.split_point();
        let mut cur = z;
        for layer in self.amino_layers.iter().rev() {
            let (c0, c1) = if layer.swap { (0, m) } else { (m, n) };
            // The conditioners read only the kept rows (the mask zeroes the
            // transformed ones), so applying them to the output is exact.
            let row_mask = tape.constant(vec![n, v], self.amino_row_mask(layer.swap))?;
            let r_out = layer.r.apply(tape, &self.params, leases, cur, dtil, row_mask, (c0, c1), self.hyper.bn_eps, phase, bn_updates)?;
            let t_out = layer.t.apply(tape, &self.params, leases, cur, dtil, row_mask, (c0, c1), self.hyper.bn_eps, phase, bn_updates)?;
            let i1 = tape.slice_rows(cur, if layer.swap { m } else { 0 }, if layer.swap { n } else { m })?;
            let o2 = tape.slice_rows(cur, c0, c1)?;
            let i2 = Self::couple_inverse(tape, o2, r_out, t_out)?;
            cur = if layer.swap {
                tape.concat_rows(i2, i1)?
            } else {
                tape.concat_rows(i1, i2)?
            };
        }
        Ok(cur)
    }

    /// Normalize a raw padded matrix variable using the stored statistics.
    pub fn normalize_t(&self, tape: &mut Tape, d_raw: Var) -> Result<Var> {
        let n = self.hyper.n_max;
        let mean = tape.constant(vec![n, n], self.norm.mean.clone())?;
        let inv_std: Vec<f64> = self.norm.std.iter().map(|s| 1.0 / s).collect();
        let inv = tape.constant(vec![n, n], inv_std)?;
        let centered = tape.sub(d_raw, mean)?;
        tape.mul(centered, inv)
    }

    /// Denormalize back to raw Angstrom scale.
    pub fn denormalize_t(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = self.hyper.n_max;
        let mean = tape.constant(vec![n, n], self.norm.mean.clone())?;
        let std = tape.constant(vec![n, n], self.norm.std.clone())?;
        let scaled = tape.mul(x, std)?;
        tape.add(scaled, mean)
    }

    /// Symmetrize and zero the diagonal on the tape (no clamping, so
    /// constraint gradients survive below zero).
    pub fn symmetrize_t(&self, tape: &mut Tape, d: Var) -> Result<Var> {
        let n = tape.shape(d)[0];
        let dt = tape.transpose(d)?;
        let sum = tape.add(d, dt)?;
        let half = tape.mul_scalar(sum, 0.5);
        let mut off_diag = vec![1.0; n * n];
        for i in 0..n {
            off_diag[i * n + i] = 0.0;
        }
        let mask = tape.constant(vec![n, n], off_diag)?;
        tape.mul(half, mask)
    }

    /// Exact log-likelihood of a continuous observation
    /// `(d_raw_padded, s_dequant)` with true length `n_true`, built on the
    /// given tape. The change-of-variable correction includes the fixed
    /// normalization Jacobian, so the density is over raw Angstrom-scale
    /// matrices and dequantized one-hot rows.
    #[allow(clippy::too_many_arguments)]
    pub fn ll_continuous_t(
        &self,
        tape: &mut Tape,
        leases: &mut Leases,
        d_raw_padded: &[f64],
        s_dequant: &[f64],
        n_true: usize,
        input_grad: bool,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<LlParts> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        if n_true < 2 || n_true > n {
            return Err(Error::Capacity(format!("true length {n_true} outside [2, {n}]")));
        }
        let x_d = tape.leaf_values(vec![n, n], d_raw_padded.to_vec(), input_grad)?;
        let x_s = tape.leaf_values(vec![n, v], s_dequant.to_vec(), input_grad)?;

        let mask_d = self.true_mask_d(n_true);
        let mask_s = self.true_mask_s(n_true);

        let x_norm = self.normalize_t(tape, x_d)?;
        let (z_d, logdet_d) = self.dist_forward_t(tape, leases, x_norm, &mask_d, phase, bn_updates)?;

        let dtil = tape.constant(vec![n, n], self.edge_weights(d_raw_padded))?;
        let (z_s, logdet_s) = self.amino_forward_t(tape, leases, x_s, dtil, &mask_s, phase, bn_updates)?;

        // Masked standard-normal prior.
        let count_d: f64 = mask_d.iter().sum();
        let count_s: f64 = mask_s.iter().sum();
        let mask_d_c = tape.constant(vec![n, n], mask_d.clone())?;
        let mask_s_c = tape.constant(vec![n, v], mask_s.clone())?;
        let zd_sq = tape.square(z_d);
        let zd_masked = tape.mul(zd_sq, mask_d_c)?;
        let zd_sum = tape.sum(zd_masked);
        let zs_sq = tape.square(z_s);
        let zs_masked = tape.mul(zs_sq, mask_s_c)?;
        let zs_sum = tape.sum(zs_masked);
        let quad = tape.add(zd_sum, zs_sum)?;
        let prior = tape.mul_scalar(quad, -0.5);
        let prior = tape.add_scalar(prior, -0.5 * LN_2PI * (count_d + count_s));

        // Fixed Jacobian of the per-entry standardization over the true
        // region.
        let norm_logdet: f64 = (0..n_true)
            .flat_map(|i| (0..n_true).map(move |j| (i, j)))
            .map(|(i, j)| -self.norm.std[i * n + j].ln())
            .sum();

        let with_d = tape.add(prior, logdet_d)?;
        let with_s = tape.add(with_d, logdet_s)?;
        let ll = tape.add_scalar(with_s, norm_logdet);
        Ok(LlParts { ll, z_d, z_s, logdet_d, logdet_s, x_d, x_s })
    }

    // ── Data-space conveniences (inference mode) ─────────────────────

    /// Exact log-likelihood of a loop with seeded dequantization noise.
    pub fn log_likelihood(&self, l: &CdrLoop, noise_seed: u64) -> Result<f64> {
        let d = l.distance_matrix()?;
        let d_raw = self.pad_distance(&d)?;
        let s = self.dequantize(l, noise_seed)?;
        let mut tape = Tape::new();
        let mut leases = Leases::new(&self.params);
        let mut upd = Vec::new();
        let parts = self.ll_continuous_t(&mut tape, &mut leases, &d_raw, &s, l.len(), false, Phase::Eval, &mut upd)?;
        Ok(tape.scalar_value(parts.ll))
    }

    /// Encode a loop; returns the latent pair and the total masked
    /// log-determinant (distance plus sequence stacks).
    pub fn forward(&self, l: &CdrLoop, noise_seed: u64) -> Result<(LatentPair, f64)> {
        let d = l.distance_matrix()?;
        let d_raw = self.pad_distance(&d)?;
        let s = self.dequantize(l, noise_seed)?;
        let (z, parts) = self.encode_continuous(&d_raw, &s, l.len())?;
        Ok((z, parts))
    }

    /// Encode explicit continuous observations; used by interpolation and
    /// by the Jacobian oracle tests.
    pub fn encode_continuous(
        &self,
        d_raw_padded: &[f64],
        s_dequant: &[f64],
        n_true: usize,
    ) -> Result<(LatentPair, f64)> {
        let mut tape = Tape::new();
        let mut leases = Leases::new(&self.params);
        let mut upd = Vec::new();
        let parts = self.ll_continuous_t(
            &mut tape,
            &mut leases,
            d_raw_padded,
            s_dequant,
            n_true,
            false,
            Phase::Eval,
            &mut upd,
        )?;
        let z = LatentPair {
            z_d: tape.value(parts.z_d).to_vec(),
            z_s: tape.value(parts.z_s).to_vec(),
        };
        let logdet = tape.scalar_value(parts.logdet_d) + tape.scalar_value(parts.logdet_s);
        Ok((z, logdet))
    }

    /// Decode a latent pair into the raw matrix, its post-processed form,
    /// and the continuous sequence matrix. The sequence flow is conditioned
    /// on the symmetrized post-processed matrix.
    pub fn decode(&self, z: &LatentPair) -> Result<Decoded> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        if z.z_d.len() != n * n || z.z_s.len() != n * v {
            return Err(Error::Dim(format!(
                "latent sizes {} and {} do not match model ({}, {})",
                z.z_d.len(),
                z.z_s.len(),
                n * n,
                n * v
            )));
        }
        let mut tape = Tape::new();
        let mut leases = Leases::new(&self.params);
        let mut upd = Vec::new();
        let zd = tape.leaf_values(vec![n, n], z.z_d.clone(), false)?;
        let x_norm = self.dist_inverse_t(&mut tape, &mut leases, zd, Phase::Eval, &mut upd)?;
        let raw = self.denormalize_t(&mut tape, x_norm)?;
        let d_raw = tape.value(raw).to_vec();
        let d_post = DistanceMatrix::symmetrized_from_raw(n, &d_raw)?;

        let dtil = tape.constant(vec![n, n], self.edge_weights(d_post.values()))?;
        let zs = tape.leaf_values(vec![n, v], z.z_s.clone(), false)?;
        let s = self.amino_inverse_t(&mut tape, &mut leases, zs, dtil, Phase::Eval, &mut upd)?;
        let s_cont = tape.value(s).to_vec();
        Ok(Decoded { d_raw, d_post, s_cont })
    }

    /// Decode and crop to a loop of length `n_true` with argmax rows.
    pub fn decode_loop(&self, z: &LatentPair, n_true: usize, id: &str) -> Result<CdrLoop> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        if n_true < 2 || n_true > n {
            return Err(Error::Capacity(format!("decode length {n_true} outside [2, {n}]")));
        }
        let decoded = self.decode(z)?;
        let mut values = vec![0.0; n_true * n_true];
        for i in 0..n_true {
            for j in 0..n_true {
                values[i * n_true + j] = decoded.d_post.get(i, j);
            }
        }
        let d = DistanceMatrix::from_values(n_true, values)?;
        let sequence: Vec<usize> = (0..n_true)
            .map(|r| {
                let row = &decoded.s_cont[r * v..(r + 1) * v];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty row")
            })
            .collect();
        CdrLoop::new(id, self.class, sequence, None, Some(d))
    }

    /// Draw a loop length from the stored training histogram.
    pub fn sample_length(&self, rng: &mut impl Rng) -> usize {
        let total: usize = self.length_counts.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return self.hyper.n_max;
        }
        let mut pick = rng.gen_range(0..total);
        for (len, c) in &self.length_counts {
            if pick < *c {
                return *len;
            }
            pick -= c;
        }
        self.hyper.n_max
    }

    /// Sample `count` loops from the prior, deterministically in `seed`.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<CdrLoop>> {
        let n = self.hyper.n_max;
        let v = self.hyper.vocab;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
            let n_true = self.sample_length(&mut rng);
            let z = LatentPair {
                z_d: (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect(),
                z_s: (0..n * v).map(|_| StandardNormal.sample(&mut rng)).collect(),
            };
            out.push(self.decode_loop(&z, n_true, &format!("gen-{seed}-{i}"))?);
        }
        Ok(out)
    }
}
