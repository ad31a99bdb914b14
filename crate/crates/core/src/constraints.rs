//! Soft-constraint surrogate and the weighted constraint loss.
//!
//! The surrogate `H(y; a, b, delta)` relaxes the interval constraint
//! `a <= y <= b` into a once-differentiable penalty: zero inside the
//! interval, quadratic in a `delta`-band outside it, and linear beyond,
//! with matching values and slopes at the four joints `a - delta`, `a`,
//! `b`, `b + delta`. With `a == b` it degenerates to the classical Huber
//! loss. Three penalty terms are built from it:
//!
//! * `h1`: per-bond surrogate on consecutive distances with the
//!   `(eta1, eta2, eta3)` window,
//! * `h2`: a single surrogate on the end-to-end distance with the
//!   `(eps1, eps2, eps3)` window,
//! * `h3`: a smoothness penalty on neighboring entries of the matrix,
//!
//! combined as `h(D) = xi1 h1 + xi2 h2 + xi3 h3`.
//!
//! Every term exists both as a plain f64 function and as a tape
//! composition (relu/square algebra), so the loss can be differentiated
//! through the inverse flow during constraint learning.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{BnUpdate, FlowModel, Leases, Phase};
use crate::geometry::{DistanceMatrix, ValiditySpec};

/// Parameters `(a, b, delta)` of the interval surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

impl SurrogateParams {
    /// Requires `a <= b` (equality reduces to Huber loss) and `delta > 0`.
    pub fn new(a: f64, b: f64, delta: f64) -> Result<Self> {
        if !(a <= b) {
            return Err(Error::Config(format!("surrogate needs a <= b, got a={a}, b={b}")));
        }
        if !(delta > 0.0) {
            return Err(Error::Config(format!("surrogate needs delta > 0, got {delta}")));
        }
        Ok(Self { a, b, delta })
    }

    /// The bond-length window of a validity spec.
    pub fn bond(spec: &ValiditySpec) -> Self {
        Self { a: spec.eta1, b: spec.eta2, delta: spec.eta3() }
    }

    /// The end-to-end window of a validity spec.
    pub fn open_loop(spec: &ValiditySpec) -> Self {
        Self { a: spec.eps1, b: spec.eps2, delta: spec.eps3() }
    }
}

/// Weights `(xi1, xi2, xi3)` of the three constraint terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintWeights {
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        Self { xi1: 10.0, xi2: 50.0, xi3: 1.0 }
    }
}

impl ConstraintWeights {
    pub fn new(xi1: f64, xi2: f64, xi3: f64) -> Result<Self> {
        if xi1 < 0.0 || xi2 < 0.0 || xi3 < 0.0 {
            return Err(Error::Config(format!(
                "constraint weights must be nonnegative, got ({xi1}, {xi2}, {xi3})"
            )));
        }
        Ok(Self { xi1, xi2, xi3 })
    }
}

/// The five-branch interval surrogate.
pub fn surrogate_h(y: f64, p: &SurrogateParams) -> f64 {
    let SurrogateParams { a, b, delta } = *p;
    if y <= a - delta {
        delta * (-y + a - 0.5 * delta)
    } else if y <= a {
        0.5 * (y - a) * (y - a)
    } else if y <= b {
        0.0
    } else if y <= b + delta {
        0.5 * (y - b) * (y - b)
    } else {
        delta * (y - b - 0.5 * delta)
    }
}

/// Derivative of [`surrogate_h`] in `y`; continuous everywhere.
pub fn surrogate_h_prime(y: f64, p: &SurrogateParams) -> f64 {
    let SurrogateParams { a, b, delta } = *p;
    if y <= a - delta {
        -delta
    } else if y <= a {
        y - a
    } else if y <= b {
        0.0
    } else if y <= b + delta {
        y - b
    } else {
        delta
    }
}

/// Bond-length penalty: sum of surrogates on consecutive distances.
pub fn h1_bond(d: &DistanceMatrix, spec: &ValiditySpec) -> f64 {
    let p = SurrogateParams::bond(spec);
    (0..d.n() - 1).map(|i| surrogate_h(d.get(i, i + 1), &p)).sum()
}

/// Open-loop penalty: a single surrogate on the end-to-end distance.
pub fn h2_loop(d: &DistanceMatrix, spec: &ValiditySpec) -> f64 {
    let p = SurrogateParams::open_loop(spec);
    surrogate_h(d.get(0, d.n() - 1), &p)
}

/// Smoothness penalty: squared differences of row- and column-neighbors,
/// with both indices of the double sum running over the first `N - 1`
/// positions.
pub fn h3_smooth(d: &DistanceMatrix) -> f64 {
    let n = d.n();
    let mut acc = 0.0;
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let down = d.get(i, j) - d.get(i + 1, j);
            let right = d.get(i, j) - d.get(i, j + 1);
            acc += down * down + right * right;
        }
    }
    acc
}

/// Weighted constraint loss `xi1 h1 + xi2 h2 + xi3 h3`.
pub fn constraint_loss(d: &DistanceMatrix, spec: &ValiditySpec, w: &ConstraintWeights) -> f64 {
    w.xi1 * h1_bond(d, spec) + w.xi2 * h2_loop(d, spec) + w.xi3 * h3_smooth(d)
}

// ── Tape compositions ────────────────────────────────────────────────
//
// The surrogate decomposes into the fixed op set:
//   H(y) = q(relu(a - y)) + q(relu(y - b))
//   q(t) = 0.5 (t - relu(t - delta))^2 + delta relu(t - delta)
// which reproduces all five branches exactly.

fn huber_tail(tape: &mut Tape, t: Var, delta: f64) -> Result<Var> {
    let shifted = tape.add_scalar(t, -delta);
    let excess = tape.relu(shifted);
    let clipped = tape.sub(t, excess)?;
    let quad = tape.square(clipped);
    let quad = tape.mul_scalar(quad, 0.5);
    let lin = tape.mul_scalar(excess, delta);
    tape.add(quad, lin)
}

/// Elementwise surrogate over a whole tensor.
pub fn surrogate_on_tape(tape: &mut Tape, y: Var, p: &SurrogateParams) -> Result<Var> {
    let neg = tape.mul_scalar(y, -1.0);
    let below_arg = tape.add_scalar(neg, p.a);
    let below = tape.relu(below_arg);
    let above_arg = tape.add_scalar(y, -p.b);
    let above = tape.relu(above_arg);
    let qb = huber_tail(tape, below, p.delta)?;
    let qa = huber_tail(tape, above, p.delta)?;
    tape.add(qb, qa)
}

fn masked_sum(tape: &mut Tape, x: Var, mask: Vec<f64>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let m = tape.constant(shape, mask)?;
    let prod = tape.mul(x, m)?;
    Ok(tape.sum(prod))
}

/// `h1` on an `n x n` matrix variable.
pub fn h1_on_tape(tape: &mut Tape, d: Var, spec: &ValiditySpec) -> Result<Var> {
    let shape = tape.shape(d).to_vec();
    let n = shape[0];
    if shape.len() != 2 || shape[1] != n || n < 2 {
        return Err(Error::Dim(format!("h1 needs a square matrix with n >= 2, got {shape:?}")));
    }
    let h = surrogate_on_tape(tape, d, &SurrogateParams::bond(spec))?;
    let mut mask = vec![0.0; n * n];
    for i in 0..n - 1 {
        mask[i * n + i + 1] = 1.0;
    }
    masked_sum(tape, h, mask)
}

/// `h2` on an `n x n` matrix variable.
pub fn h2_on_tape(tape: &mut Tape, d: Var, spec: &ValiditySpec) -> Result<Var> {
    let shape = tape.shape(d).to_vec();
    let n = shape[0];
    if shape.len() != 2 || shape[1] != n || n < 2 {
        return Err(Error::Dim(format!("h2 needs a square matrix with n >= 2, got {shape:?}")));
    }
    let h = surrogate_on_tape(tape, d, &SurrogateParams::open_loop(spec))?;
    let mut mask = vec![0.0; n * n];
    mask[n - 1] = 1.0;
    masked_sum(tape, h, mask)
}

/// `h3` on an `n x n` matrix variable.
pub fn h3_on_tape(tape: &mut Tape, d: Var) -> Result<Var> {
    let shape = tape.shape(d).to_vec();
    let n = shape[0];
    if shape.len() != 2 || shape[1] != n || n < 2 {
        return Err(Error::Dim(format!("h3 needs a square matrix with n >= 2, got {shape:?}")));
    }
    // Row-neighbor differences on D, column-neighbor differences via D^T.
    let term = |tape: &mut Tape, m: Var| -> Result<Var> {
        let top = tape.crop(m, n - 1, n - 1)?;
        let lower = tape.slice_rows(m, 1, n)?;
        let shifted = tape.crop(lower, n - 1, n - 1)?;
        let diff = tape.sub(top, shifted)?;
        let sq = tape.square(diff);
        Ok(tape.sum(sq))
    };
    let rows = term(tape, d)?;
    let dt = tape.transpose(d)?;
    let cols = term(tape, dt)?;
    tape.add(rows, cols)
}

/// Weighted constraint loss as a scalar tape variable.
pub fn constraint_loss_on_tape(
    tape: &mut Tape,
    d: Var,
    spec: &ValiditySpec,
    w: &ConstraintWeights,
) -> Result<Var> {
    let t1 = h1_on_tape(tape, d, spec)?;
    let t1 = tape.mul_scalar(t1, w.xi1);
    let t2 = h2_on_tape(tape, d, spec)?;
    let t2 = tape.mul_scalar(t2, w.xi2);
    let t3 = h3_on_tape(tape, d)?;
    let t3 = tape.mul_scalar(t3, w.xi3);
    let t12 = tape.add(t1, t2)?;
    tape.add(t12, t3)
}

/// Monte-Carlo estimate of the expected constraint loss of generated
/// distance matrices, built on the tape so its gradient flows through the
/// inverse flow into the model parameters. Each of the `m` draws samples a
/// loop length from the model's training histogram and a standard-normal
/// latent, decodes it through the distance flow, symmetrizes, zeroes the
/// diagonal (no clamping, so gradients survive below zero) and crops to the
/// drawn length before scoring.
#[allow(clippy::too_many_arguments)]
pub fn mc_constraint_objective(
    model: &FlowModel,
    spec: &ValiditySpec,
    w: &ConstraintWeights,
    m: usize,
    seed: u64,
    tape: &mut Tape,
    leases: &mut Leases,
    phase: Phase,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    if m == 0 {
        return Err(Error::Contract("monte-carlo sample count must be positive".into()));
    }
    let n = model.n_max();
    let mut acc = tape.scalar(0.0);
    for i in 0..m {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
        let n_true = model.sample_length(&mut rng);
        let z: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zv = tape.leaf_values(vec![n, n], z, false)?;
        let x_norm = model.dist_inverse_t(tape, leases, zv, phase, bn_updates)?;
        let raw = model.denormalize_t(tape, x_norm)?;
        let sym = model.symmetrize_t(tape, raw)?;
        let cropped = tape.crop(sym, n_true, n_true)?;
        let h = constraint_loss_on_tape(tape, cropped, spec, w)?;
        acc = tape.add(acc, h)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / m as f64))
}

/// Inference-mode convenience returning the scalar estimate.
pub fn mc_constraint_estimate(
    model: &FlowModel,
    spec: &ValiditySpec,
    w: &ConstraintWeights,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut leases = Leases::new(&model.params);
    let mut upd = Vec::new();
    let v = mc_constraint_objective(model, spec, w, m, seed, &mut tape, &mut leases, Phase::Eval, &mut upd)?;
    Ok(tape.scalar_value(v))
}
