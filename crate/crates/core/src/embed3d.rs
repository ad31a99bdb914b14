//! Constrained 3D coordinate generation: reconstruct alpha-carbon
//! coordinates from a distance matrix by minimizing a penalized stress
//! objective with random coordinate descent.
//!
//! The objective is the absolute-value stress over all ordered pairs plus
//! surrogate penalties keeping bonds and the end-to-end distance inside
//! their validity windows:
//!
//! ```text
//! F(g) = sum_{i != j} | ||g_i - g_j||^2 - D_ij^2 |
//!      + lambda1 * sum_i H(||g_i - g_{i+1}||; eta1, eta2, eta3)
//!      + lambda2 * H(||g_1 - g_N||; eps1, eps2, eps3)
//! ```
//!
//! Each sweep visits the points in seeded random order and updates one
//! point by subgradient steps with backtracking, so no update ever
//! increases the objective (the per-point subproblem is convex). The
//! starting point is a classical multidimensional-scaling embedding, which
//! already reconstructs exact Euclidean inputs to numerical precision.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{surrogate_h, surrogate_h_prime, SurrogateParams};
use crate::error::{Error, Result};
use crate::geometry::{Coordinates, DistanceMatrix, ValiditySpec};

/// Solver settings. `lambda1`/`lambda2` weight the bond and end-to-end
/// penalties and must dominate the stress term for constraints to bind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_sweeps: usize,
    /// Subgradient steps per point visit.
    pub inner_steps: usize,
    /// Initial backtracking step size in Angstrom.
    pub step_init: f64,
    /// A sweep improving the objective by less than this terminates the run.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            lambda1: 50.0,
            lambda2: 100.0,
            max_sweeps: 200,
            inner_steps: 4,
            step_init: 0.5,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 1.0 || self.lambda2 < 1.0 {
            return Err(Error::Config(format!(
                "penalty weights must be at least 1, got lambda1={}, lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_sweeps == 0 || self.inner_steps == 0 {
            return Err(Error::Config("sweep and step counts must be positive".into()));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::Config(format!("step_init must be positive, got {}", self.step_init)));
        }
        Ok(())
    }
}

/// Outcome of one embedding run.
#[derive(Debug, Clone)]
pub struct EmbedResult {
    pub coords: Coordinates,
    pub objective: f64,
    /// `(max bond deviation, end-to-end deviation)` outside the hard
    /// validity windows, in Angstrom; both zero for a valid embedding.
    pub constraint_residuals: (f64, f64),
    pub sweeps_used: usize,
    pub converged: bool,
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// The penalized stress objective, differentiable in `g` almost everywhere.
pub fn stress_objective(
    g: &Coordinates,
    d: &DistanceMatrix,
    spec: &ValiditySpec,
    cfg: &EmbedConfig,
) -> f64 {
    let n = g.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = sq_dist(g.point(i), g.point(j)) - d.get(i, j) * d.get(i, j);
            acc += r.abs();
        }
    }
    let bond = SurrogateParams::bond(spec);
    for i in 0..n - 1 {
        acc += cfg.lambda1 * surrogate_h(sq_dist(g.point(i), g.point(i + 1)).sqrt(), &bond);
    }
    let open = SurrogateParams::open_loop(spec);
    acc += cfg.lambda2 * surrogate_h(sq_dist(g.point(0), g.point(n - 1)).sqrt(), &open);
    acc
}

/// Terms of [`stress_objective`] that involve point `i`.
fn local_objective(
    pts: &[[f64; 3]],
    i: usize,
    d: &DistanceMatrix,
    spec: &ValiditySpec,
    cfg: &EmbedConfig,
) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        let r = sq_dist(pts[i], pts[j]) - d.get(i, j) * d.get(i, j);
        // Each unordered pair appears twice in the full double sum.
        acc += 2.0 * r.abs();
    }
    let bond = SurrogateParams::bond(spec);
    if i > 0 {
        acc += cfg.lambda1 * surrogate_h(sq_dist(pts[i - 1], pts[i]).sqrt(), &bond);
    }
    if i + 1 < n {
        acc += cfg.lambda1 * surrogate_h(sq_dist(pts[i], pts[i + 1]).sqrt(), &bond);
    }
    if i == 0 || i == n - 1 {
        let open = SurrogateParams::open_loop(spec);
        acc += cfg.lambda2 * surrogate_h(sq_dist(pts[0], pts[n - 1]).sqrt(), &open);
    }
    acc
}

/// Subgradient of the local objective in `g_i`, with `sign(0) = 0`.
fn local_gradient(
    pts: &[[f64; 3]],
    i: usize,
    d: &DistanceMatrix,
    spec: &ValiditySpec,
    cfg: &EmbedConfig,
) -> [f64; 3] {
    let n = pts.len();
    let mut grad = [0.0; 3];
    for j in 0..n {
        if j == i {
            continue;
        }
        let r = sq_dist(pts[i], pts[j]) - d.get(i, j) * d.get(i, j);
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        for k in 0..3 {
            grad[k] += 4.0 * s * (pts[i][k] - pts[j][k]);
        }
    }
    let penalty = |other: usize, p: &SurrogateParams, weight: f64, grad: &mut [f64; 3]| {
        let dist = sq_dist(pts[i], pts[other]).sqrt();
        if dist < 1e-12 {
            return;
        }
        let dh = weight * surrogate_h_prime(dist, p);
        for k in 0..3 {
            grad[k] += dh * (pts[i][k] - pts[other][k]) / dist;
        }
    };
    let bond = SurrogateParams::bond(spec);
    if i > 0 {
        penalty(i - 1, &bond, cfg.lambda1, &mut grad);
    }
    if i + 1 < n {
        penalty(i + 1, &bond, cfg.lambda1, &mut grad);
    }
    let open = SurrogateParams::open_loop(spec);
    if i == 0 {
        penalty(n - 1, &open, cfg.lambda2, &mut grad);
    } else if i == n - 1 {
        penalty(0, &open, cfg.lambda2, &mut grad);
    }
    grad
}

/// Update one point by backtracking subgradient steps. Never increases the
/// local (hence global) objective.
fn update_point(
    pts: &mut [[f64; 3]],
    i: usize,
    d: &DistanceMatrix,
    spec: &ValiditySpec,
    cfg: &EmbedConfig,
) {
    for _ in 0..cfg.inner_steps {
        let before = local_objective(pts, i, d, spec, cfg);
        let grad = local_gradient(pts, i, d, spec, cfg);
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
        if gnorm < 1e-14 {
            return;
        }
        let dir = [grad[0] / gnorm, grad[1] / gnorm, grad[2] / gnorm];
        let mut step = cfg.step_init;
        let orig = pts[i];
        let mut accepted = false;
        for _ in 0..24 {
            pts[i] = [orig[0] - step * dir[0], orig[1] - step * dir[1], orig[2] - step * dir[2]];
            if local_objective(pts, i, d, spec, cfg) < before {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            pts[i] = orig;
            return;
        }
    }
}

/// Classical multidimensional-scaling start: double-center the squared
/// distances, embed on the top three eigenpairs, and fall back to a random
/// chain with bond-window spacing when the Gram matrix is indefinite beyond
/// tolerance.
pub fn init_coordinates(
    d: &DistanceMatrix,
    spec: &ValiditySpec,
    rng: &mut impl Rng,
) -> Coordinates {
    let n = d.n();
    let mut b = DMatrix::<f64>::zeros(n, n);
    // B = -1/2 J D^2 J    with J = I - 11^T / n.
    let row_means: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| d.get(i, j).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let total_mean: f64 = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (d.get(i, j).powi(2) - row_means[i] - row_means[j] + total_mean);
        }
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).expect("finite"));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let most_negative = order.last().map(|&i| eig.eigenvalues[i]).unwrap_or(0.0);
    if most_negative < -0.05 * top.max(1.0) {
        // Strongly non-Euclidean input: random smooth chain start.
        let mut pts: Vec<[f64; 3]> = vec![[0.0; 3]];
        let mut dir = {
            let g: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-9);
            [g[0] / norm, g[1] / norm, g[2] / norm]
        };
        for _ in 1..n {
            let step = rng.gen_range(spec.eta1..=spec.eta2);
            let prev = *pts.last().expect("nonempty");
            pts.push([prev[0] + step * dir[0], prev[1] + step * dir[1], prev[2] + step * dir[2]]);
            let g: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let blended = [dir[0] + 0.6 * g[0], dir[1] + 0.6 * g[1], dir[2] + 0.6 * g[2]];
            let norm = (blended[0] * blended[0] + blended[1] * blended[1] + blended[2] * blended[2])
                .sqrt()
                .max(1e-9);
            dir = [blended[0] / norm, blended[1] / norm, blended[2] / norm];
        }
        return Coordinates::new(pts).expect("chain coordinates");
    }
    let mut pts = vec![[0.0; 3]; n];
    for (axis, &idx) in order.iter().take(3).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        for i in 0..n {
            pts[i][axis] = scale * eig.eigenvectors[(i, idx)];
        }
    }
    Coordinates::new(pts).expect("mds coordinates")
}

/// Rotate/translate the result into a canonical pose: centroid at the
/// origin, principal axes aligned with the coordinate axes. Cosmetic only.
fn gauge_fix(pts: &mut [[f64; 3]]) {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts.iter() {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    for p in pts.iter_mut() {
        for k in 0..3 {
            p[k] -= c[k];
        }
    }
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in pts.iter() {
        let v = nalgebra::Vector3::new(p[0], p[1], p[2]);
        cov += v * v.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite"));
    let mut basis = nalgebra::Matrix3::<f64>::zeros();
    for (axis, &idx) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        // Deterministic sign: largest-magnitude component positive.
        let mut max_i = 0;
        for i in 1..3 {
            if col[i].abs() > col[max_i].abs() {
                max_i = i;
            }
        }
        if col[max_i] < 0.0 {
            col = -col;
        }
        basis.set_column(axis, &col);
    }
    if basis.determinant() < 0.0 {
        let col = -basis.column(2).into_owned();
        basis.set_column(2, &col);
    }
    for p in pts.iter_mut() {
        let v = nalgebra::Vector3::new(p[0], p[1], p[2]);
        let r = basis.transpose() * v;
        *p = [r[0], r[1], r[2]];
    }
}

fn residuals(pts: &[[f64; 3]], spec: &ValiditySpec) -> (f64, f64) {
    let n = pts.len();
    let mut bond_dev = 0.0f64;
    for i in 0..n - 1 {
        let b = sq_dist(pts[i], pts[i + 1]).sqrt();
        bond_dev = bond_dev.max((spec.eta1 - b).max(0.0)).max((b - spec.eta2).max(0.0));
    }
    let e = sq_dist(pts[0], pts[n - 1]).sqrt();
    let loop_dev = (spec.eps1 - e).max(0.0).max((e - spec.eps2).max(0.0));
    (bond_dev, loop_dev)
}

/// Reconstruct coordinates for `d` by random coordinate descent on the
/// penalized stress. Non-convergence within the sweep budget returns the
/// best coordinates found with `converged = false`.
pub fn embed(d: &DistanceMatrix, spec: &ValiditySpec, cfg: &EmbedConfig) -> Result<EmbedResult> {
    cfg.validate()?;
    let n = d.n();
    if n < 2 {
        return Err(Error::Contract(format!("embedding needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_coordinates(d, spec, &mut rng);
    let mut pts: Vec<[f64; 3]> = init.points().to_vec();
    let mut objective = stress_objective(&init, d, spec, cfg);
    let mut converged = false;
    let mut sweeps_used = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for sweep in 0..cfg.max_sweeps {
        sweeps_used = sweep + 1;
        order.shuffle(&mut rng);
        for &i in &order {
            update_point(&mut pts, i, d, spec, cfg);
        }
        let now = stress_objective(&Coordinates::new(pts.clone())?, d, spec, cfg);
        debug_assert!(now <= objective + 1e-9, "sweep increased the objective");
        let gain = objective - now;
        objective = now;
        if gain < cfg.tolerance {
            converged = true;
            break;
        }
    }
    gauge_fix(&mut pts);
    let res = residuals(&pts, spec);
    Ok(EmbedResult {
        coords: Coordinates::new(pts)?,
        objective,
        constraint_residuals: res,
        sweeps_used,
        converged,
    })
}
