//! The two conditioner architectures behind the coupling layers' scale and
//! translation networks.
//!
//! Distance flow: the kept partition (a row block of the matrix) is treated
//! as a one-channel image and passed through conv(3x3) -> BN -> ReLU ->
//! conv(3x3, zero-initialized), then a learned row projection maps it onto
//! the transformed partition's shape.
//!
//! Conditional sequence flow: a distance-weighted graph layer mixes the
//! masked one-hot rows with edge weights `exp(-xi * D[i][j])`, followed by
//! a linear lift to the hidden width, BN, ReLU, a two-layer perceptron and
//! a zero-initialized projection back to the alphabet width.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::flow::params::{BnUpdate, Leases, ParamId, ParamSet};

/// Whether batch norm uses the input's own statistics (training) or the
/// stored running averages (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Gamma/beta plus running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    pub fn init(params: &mut ParamSet, prefix: &str, channels: usize) -> Self {
        let gamma = params.add(
            format!("{prefix}.gamma"),
            Tensor::new(vec![channels], vec![1.0; channels], true).expect("bn gamma"),
        );
        let beta = params.add(
            format!("{prefix}.beta"),
            Tensor::new(vec![channels], vec![0.0; channels], true).expect("bn beta"),
        );
        let running_mean = params.add(
            format!("{prefix}.running_mean"),
            Tensor::new(vec![channels], vec![0.0; channels], false).expect("bn mean"),
        );
        let running_var = params.add(
            format!("{prefix}.running_var"),
            Tensor::new(vec![channels], vec![1.0; channels], false).expect("bn var"),
        );
        Self { gamma, beta, running_mean, running_var }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        leases: &mut Leases,
        x: Var,
        eps: f64,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = leases.get(tape, params, self.gamma);
        let beta = leases.get(tape, params, self.beta);
        match phase {
            Phase::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                bn_updates.push(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Phase::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                &params.tensor(self.running_mean).data,
                &params.tensor(self.running_var).data,
                eps,
            ),
        }
    }
}

/// Conv-based conditioner mapping a `p1 x q` kept block to a `p2 x q`
/// output for the distance flow.
#[derive(Debug, Clone)]
pub struct CnnConditioner {
    pub p1: usize,
    pub p2: usize,
    pub channels: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    bn: BnParams,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj: ParamId,
}

impl CnnConditioner {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        p1: usize,
        p2: usize,
        channels: usize,
    ) -> Self {
        let conv1_w = params.add(
            format!("{prefix}.conv1.w"),
            super::params::normal_init(rng, vec![channels, 1, 3, 3], 9),
        );
        let conv1_b = params.add(
            format!("{prefix}.conv1.b"),
            Tensor::new(vec![channels], vec![0.0; channels], true).expect("conv1 bias"),
        );
        let bn = BnParams::init(params, &format!("{prefix}.bn"), channels);
        // Final conv zero-initialized so the flow starts identity-like.
        let conv2_w = params.add(
            format!("{prefix}.conv2.w"),
            Tensor::new(vec![1, channels, 3, 3], vec![0.0; channels * 9], true).expect("conv2 w"),
        );
        let conv2_b = params.add(
            format!("{prefix}.conv2.b"),
            Tensor::new(vec![1], vec![0.0], true).expect("conv2 bias"),
        );
        let proj = params.add(
            format!("{prefix}.proj"),
            super::params::normal_init(rng, vec![p2, p1], p1),
        );
        Self { p1, p2, channels, conv1_w, conv1_b, bn, conv2_w, conv2_b, proj }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        leases: &mut Leases,
        x: Var,
        bn_eps: f64,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let q = shape[1];
        let img = tape.reshape(x, vec![1, self.p1, q])?;
        let w1 = leases.get(tape, params, self.conv1_w);
        let b1 = leases.get(tape, params, self.conv1_b);
        let h = tape.conv2d(img, w1, b1)?;
        let h = self.bn.apply(tape, params, leases, h, bn_eps, phase, bn_updates)?;
        let h = tape.relu(h);
        let w2 = leases.get(tape, params, self.conv2_w);
        let b2 = leases.get(tape, params, self.conv2_b);
        let out = tape.conv2d(h, w2, b2)?;
        let flat = tape.reshape(out, vec![self.p1, q])?;
        let proj = leases.get(tape, params, self.proj);
        tape.matmul(proj, flat)
    }
}

/// The distance-weighted mixing step: `dtil . (mask ⊙ x) . w`.
pub fn wgnn_mix(tape: &mut Tape, dtil: Var, x: Var, row_mask: Var, w: Var) -> Result<Var> {
    let masked = tape.mul(x, row_mask)?;
    let mixed = tape.matmul(dtil, masked)?;
    tape.matmul(mixed, w)
}

/// Graph conditioner for the conditional sequence flow. Consumes the full
/// `n x vocab` matrix with the kept partition selected by a row mask, and
/// returns the rows of the transformed partition.
#[derive(Debug, Clone)]
pub struct WgnnConditioner {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: (usize, usize),
    mix_w: ParamId,
    lift_w: ParamId,
    lift_b: ParamId,
    bn: BnParams,
    mlp1_w: ParamId,
    mlp1_b: ParamId,
    mlp2_w: ParamId,
    mlp2_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl WgnnConditioner {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        vocab: usize,
        dim: usize,
        hidden: (usize, usize),
    ) -> Self {
        let mix_w = params.add(
            format!("{prefix}.mix.w"),
            super::params::normal_init(rng, vec![vocab, vocab], vocab),
        );
        let lift_w = params.add(
            format!("{prefix}.lift.w"),
            super::params::normal_init(rng, vec![vocab, dim], vocab),
        );
        let lift_b = params.add(
            format!("{prefix}.lift.b"),
            Tensor::new(vec![dim], vec![0.0; dim], true).expect("lift bias"),
        );
        let bn = BnParams::init(params, &format!("{prefix}.bn"), dim);
        let mlp1_w = params.add(
            format!("{prefix}.mlp1.w"),
            super::params::normal_init(rng, vec![dim, hidden.0], dim),
        );
        let mlp1_b = params.add(
            format!("{prefix}.mlp1.b"),
            Tensor::new(vec![hidden.0], vec![0.0; hidden.0], true).expect("mlp1 bias"),
        );
        let mlp2_w = params.add(
            format!("{prefix}.mlp2.w"),
            super::params::normal_init(rng, vec![hidden.0, hidden.1], hidden.0),
        );
        let mlp2_b = params.add(
            format!("{prefix}.mlp2.b"),
            Tensor::new(vec![hidden.1], vec![0.0; hidden.1], true).expect("mlp2 bias"),
        );
        // Zero-initialized projection back to the alphabet width.
        let out_w = params.add(
            format!("{prefix}.out.w"),
            Tensor::new(vec![hidden.1, vocab], vec![0.0; hidden.1 * vocab], true).expect("out w"),
        );
        let out_b = params.add(
            format!("{prefix}.out.b"),
            Tensor::new(vec![vocab], vec![0.0; vocab], true).expect("out bias"),
        );
        Self { vocab, dim, hidden, mix_w, lift_w, lift_b, bn, mlp1_w, mlp1_b, mlp2_w, mlp2_b, out_w, out_b }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        leases: &mut Leases,
        x_full: Var,
        dtil: Var,
        row_mask: Var,
        take_rows: (usize, usize),
        bn_eps: f64,
        phase: Phase,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let w = leases.get(tape, params, self.mix_w);
        let g = wgnn_mix(tape, dtil, x_full, row_mask, w)?;
        let lw = leases.get(tape, params, self.lift_w);
        let lb = leases.get(tape, params, self.lift_b);
        let h = tape.matmul(g, lw)?;
        let h = tape.bias_add(h, lb)?;
        let h = self.bn.apply(tape, params, leases, h, bn_eps, phase, bn_updates)?;
        let h = tape.relu(h);
        let w1 = leases.get(tape, params, self.mlp1_w);
        let b1 = leases.get(tape, params, self.mlp1_b);
        let h = tape.matmul(h, w1)?;
        let h = tape.bias_add(h, b1)?;
        let h = tape.relu(h);
        let w2 = leases.get(tape, params, self.mlp2_w);
        let b2 = leases.get(tape, params, self.mlp2_b);
        let h = tape.matmul(h, w2)?;
        let h = tape.bias_add(h, b2)?;
        let h = tape.relu(h);
        let ow = leases.get(tape, params, self.out_w);
        let ob = leases.get(tape, params, self.out_b);
        let out = tape.matmul(h, ow)?;
        let out = tape.bias_add(out, ob)?;
        tape.slice_rows(out, take_rows.0, take_rows.1)
    }
}
