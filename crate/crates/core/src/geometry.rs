//! Coordinates, distance matrices, rigid alignment and validity checks.
//!
//! A loop of `N` residues is represented by its alpha-carbon coordinates
//! `G` (N x 3, Angstrom) or, invariantly under rigid motion, by the pairwise
//! distance matrix `D` with `D[i][j] = ||g_i - g_j||`. Validity of a loop is
//! the conjunction of the bond-length window on consecutive residues and the
//! open-loop window on the end-to-end distance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N x 3 alpha-carbon coordinates in Angstrom, N >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates {
    points: Vec<[f64; 3]>,
}

impl Coordinates {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Contract(format!(
                "coordinates need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        c
    }

    /// Apply `p -> R p + t`.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: &[f64; 3]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for (r, row) in rotation.iter().enumerate() {
                    q[r] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + translation[r];
                }
                q
            })
            .collect();
        Self { points }
    }
}

/// Symmetric nonnegative N x N matrix of pairwise distances, zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Build from explicit entries, enforcing the type invariants.
    /// The input must already be symmetric within 1e-9 with a zero diagonal;
    /// residual asymmetry is averaged away.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Dim(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                values.len()
            )));
        }
        let mut m = Self { n, values };
        for i in 0..n {
            for j in 0..n {
                let a = m.values[i * n + j];
                if !a.is_finite() {
                    return Err(Error::Domain(format!("non-finite entry at ({i},{j})")));
                }
                if a < 0.0 {
                    return Err(Error::Domain(format!("negative distance at ({i},{j}): {a}")));
                }
                let b = m.values[j * n + i];
                if (a - b).abs() > 1e-9 {
                    return Err(Error::Domain(format!(
                        "asymmetric entries at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
            if m.values[i * n + i] != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal at ({i},{i})")));
            }
        }
        // Exact symmetrization of residual rounding.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m.values[i * n + j] + m.values[j * n + i]);
                m.values[i * n + j] = v;
                m.values[j * n + i] = v;
            }
        }
        Ok(m)
    }

    /// Post-process a raw generated matrix into a valid `DistanceMatrix`:
    /// symmetrize as `(M + M^T) / 2`, zero the diagonal, clamp negatives to 0.
    pub fn symmetrized_from_raw(n: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != n * n {
            return Err(Error::Dim(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in raw matrix".into()));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                values[i * n + j] = v.max(0.0);
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Frobenius norm of the entrywise difference.
    pub fn frobenius_distance(&self, other: &DistanceMatrix) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::Dim(format!("{}x{} vs {}x{}", self.n, self.n, other.n, other.n)));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// The heavy-chain loop classes modeled separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopClass {
    H1,
    H2,
    H3,
}

impl LoopClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopClass::H1 => "H1",
            LoopClass::H2 => "H2",
            LoopClass::H3 => "H3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "H1" => Ok(LoopClass::H1),
            "H2" => Ok(LoopClass::H2),
            "H3" => Ok(LoopClass::H3),
            other => Err(Error::Config(format!("unknown loop class {other:?}"))),
        }
    }
}

/// Interval thresholds defining loop validity, in Angstrom:
/// bond lengths must fall in `[eta1, eta2]` and the end-to-end distance in
/// `[eps1, eps2]`. The derived widths `eta3 = eta2 - eta1` and
/// `eps3 = eps2 - eps1` parameterize the soft-constraint surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValiditySpec {
    pub eta1: f64,
    pub eta2: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl ValiditySpec {
    pub fn new(eta1: f64, eta2: f64, eps1: f64, eps2: f64) -> Result<Self> {
        if !(eta1 < eta2) || !(eps1 < eps2) {
            return Err(Error::Config(format!(
                "validity windows must be nonempty: eta [{eta1}, {eta2}], eps [{eps1}, {eps2}]"
            )));
        }
        if ![eta1, eta2, eps1, eps2].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("validity thresholds must be finite".into()));
        }
        Ok(Self { eta1, eta2, eps1, eps2 })
    }

    /// Preset thresholds per loop class.
    pub fn preset(class: LoopClass) -> Self {
        match class {
            LoopClass::H1 => Self { eta1: 3.76, eta2: 3.84, eps1: 11.4, eps2: 13.1 },
            LoopClass::H2 => Self { eta1: 3.76, eta2: 3.87, eps1: 5.0, eps2: 5.9 },
            LoopClass::H3 => Self { eta1: 3.71, eta2: 3.88, eps1: 6.5, eps2: 8.5 },
        }
    }

    pub fn eta3(&self) -> f64 {
        self.eta2 - self.eta1
    }

    pub fn eps3(&self) -> f64 {
        self.eps2 - self.eps1
    }
}

/// Outcome of a hard validity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    /// Indices `i` (0-based) where `D[i][i+1]` falls outside `[eta1, eta2]`.
    pub bond_violations: Vec<usize>,
    /// Whether `D[0][N-1]` falls outside `[eps1, eps2]`.
    pub loop_violation: bool,
}

/// Exact pairwise Euclidean distances of a coordinate set.
pub fn distance_matrix(g: &Coordinates) -> DistanceMatrix {
    let n = g.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = g.point(i);
            let b = g.point(j);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix { n, values }
}

/// Check the bond-length and open-loop windows on a distance matrix.
pub fn check_validity(d: &DistanceMatrix, spec: &ValiditySpec) -> ValidityReport {
    let n = d.n();
    let mut bond_violations = Vec::new();
    for i in 0..n.saturating_sub(1) {
        let v = d.get(i, i + 1);
        if v < spec.eta1 || v > spec.eta2 {
            bond_violations.push(i);
        }
    }
    let end = d.get(0, n - 1);
    let loop_violation = end < spec.eps1 || end > spec.eps2;
    ValidityReport { valid: bond_violations.is_empty() && !loop_violation, bond_violations, loop_violation }
}

/// Optimal proper rigid superposition of `moving` onto `reference`
/// (SVD route, reflections excluded by forcing det = +1).
///
/// Returns the transformed copy of `moving` together with the rotation and
/// translation such that `aligned = R * moving + t`.
pub fn kabsch_align(
    reference: &Coordinates,
    moving: &Coordinates,
) -> Result<(Coordinates, [[f64; 3]; 3], [f64; 3])> {
    if reference.len() != moving.len() {
        return Err(Error::Dim(format!(
            "point counts differ: {} vs {}",
            reference.len(),
            moving.len()
        )));
    }
    let cr = reference.centroid();
    let cm = moving.centroid();

    // Cross-covariance H = sum (m_i - cm) (r_i - cr)^T.
    let mut h = Matrix3::<f64>::zeros();
    for (r, m) in reference.points().iter().zip(moving.points()) {
        let rv = Vector3::new(r[0] - cr[0], r[1] - cr[1], r[2] - cr[2]);
        let mv = Vector3::new(m[0] - cm[0], m[1] - cm[1], m[2] - cm[2]);
        h += mv * rv.transpose();
    }

    let rotation = if h.norm() < 1e-12 {
        // All points coincident on one side: no information, use identity.
        Matrix3::identity()
    } else {
        let svd = h.svd(true, true);
        let u = svd.u.expect("svd with u");
        let vt = svd.v_t.expect("svd with v_t");
        let mut r = vt.transpose() * u.transpose();
        if r.determinant() < 0.0 {
            // Flip the smallest singular direction to stay in SO(3)
            // (singular values are not guaranteed to come out sorted).
            let mut min_idx = 0;
            for i in 1..3 {
                if svd.singular_values[i] < svd.singular_values[min_idx] {
                    min_idx = i;
                }
            }
            let mut d = Matrix3::identity();
            d[(min_idx, min_idx)] = -1.0;
            r = vt.transpose() * d * u.transpose();
        }
        r
    };

    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = rotation[(i, j)];
        }
    }
    let rc = rotation * Vector3::new(cm[0], cm[1], cm[2]);
    let translation = [cr[0] - rc[0], cr[1] - rc[1], cr[2] - rc[2]];
    let aligned = moving.transformed(&rot, &translation);
    Ok((aligned, rot, translation))
}

/// Root-mean-square deviation after optimal rigid superposition of `b` on `a`.
pub fn rmsd(a: &Coordinates, b: &Coordinates) -> Result<f64> {
    let (aligned, _, _) = kabsch_align(a, b)?;
    let n = a.len() as f64;
    let ss: f64 = a
        .points()
        .iter()
        .zip(aligned.points())
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        // Uniform over SO(3) via a random unit quaternion.
        let q: [f64; 4] = {
            loop {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n2: f64 = v.iter().map(|x| x * x).sum();
                if n2 > 1e-6 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    break [v[0] / n, v[1] / n, v[2] / n, v[3] / n];
                }
            }
        };
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn random_cloud(rng: &mut impl Rng, n: usize, scale: f64) -> Coordinates {
        Coordinates::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    /// Independent optimal-superposition RMSD via Horn's quaternion method:
    /// the largest eigenvalue of the 4x4 key matrix gives max_R sum r_i . R m_i
    /// over proper rotations, without any SVD.
    fn quaternion_rmsd_oracle(a: &Coordinates, b: &Coordinates) -> f64 {
        let ca = a.centroid();
        let cb = b.centroid();
        let n = a.len();
        let mut s = [[0.0f64; 3]; 3];
        let mut norm_a = 0.0;
        let mut norm_b = 0.0;
        for i in 0..n {
            let p = a.point(i);
            let q = b.point(i);
            let pa = [p[0] - ca[0], p[1] - ca[1], p[2] - ca[2]];
            let qb = [q[0] - cb[0], q[1] - cb[1], q[2] - cb[2]];
            norm_a += pa.iter().map(|v| v * v).sum::<f64>();
            norm_b += qb.iter().map(|v| v * v).sum::<f64>();
            for r in 0..3 {
                for c in 0..3 {
                    s[r][c] += qb[r] * pa[c];
                }
            }
        }
        // Horn's 4x4 symmetric key matrix.
        let k = [
            [
                s[0][0] + s[1][1] + s[2][2],
                s[1][2] - s[2][1],
                s[2][0] - s[0][2],
                s[0][1] - s[1][0],
            ],
            [
                s[1][2] - s[2][1],
                s[0][0] - s[1][1] - s[2][2],
                s[0][1] + s[1][0],
                s[2][0] + s[0][2],
            ],
            [
                s[2][0] - s[0][2],
                s[0][1] + s[1][0],
                -s[0][0] + s[1][1] - s[2][2],
                s[1][2] + s[2][1],
            ],
            [
                s[0][1] - s[1][0],
                s[2][0] + s[0][2],
                s[1][2] + s[2][1],
                -s[0][0] - s[1][1] + s[2][2],
            ],
        ];
        let lambda_max = jacobi_max_eigenvalue(k);
        let msd = ((norm_a + norm_b - 2.0 * lambda_max) / n as f64).max(0.0);
        msd.sqrt()
    }

    /// Classical Jacobi rotations on a 4x4 symmetric matrix; returns the
    /// largest eigenvalue. Test-only, independent of nalgebra.
    fn jacobi_max_eigenvalue(mut a: [[f64; 4]; 4]) -> f64 {
        for _ in 0..100 {
            // Find largest off-diagonal element.
            let (mut p, mut q, mut max) = (0, 1, 0.0f64);
            for i in 0..4 {
                for j in (i + 1)..4 {
                    if a[i][j].abs() > max {
                        max = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if max < 1e-14 {
                break;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..4 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..4 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
        (0..4).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn distance_matrix_collinear_unit_spacing() {
        let g = Coordinates::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let d = distance_matrix(&g);
        let expected = [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(d.get(i, j), expected[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn distance_matrix_matches_double_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = random_cloud(&mut rng, 8, 10.0);
        let d = distance_matrix(&g);
        for i in 0..8 {
            for j in 0..8 {
                let a = g.point(i);
                let b = g.point(j);
                let mut ss = 0.0;
                for k in 0..3 {
                    ss += (a[k] - b[k]) * (a[k] - b[k]);
                }
                assert_eq!(d.get(i, j), ss.sqrt().max(0.0) * if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn distance_matrix_rigid_motion_invariance() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let g = random_cloud(&mut rng, 6, 5.0);
            let rot = random_rotation(&mut rng);
            let t = [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)];
            let g2 = g.transformed(&rot, &t);
            let d1 = distance_matrix(&g);
            let d2 = distance_matrix(&g2);
            for i in 0..6 {
                for j in 0..6 {
                    assert_abs_diff_eq!(d1.get(i, j), d2.get(i, j), epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn kabsch_identity_on_equal_inputs() {
        let mut rng = StdRng::seed_from_u64(3);
        let g = random_cloud(&mut rng, 5, 4.0);
        let (aligned, rot, _) = kabsch_align(&g, &g).unwrap();
        assert!(rmsd(&g, &aligned).unwrap() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(rot[i][j], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn kabsch_recovers_exact_rigid_copy() {
        let mut rng = StdRng::seed_from_u64(5);
        let g = random_cloud(&mut rng, 7, 6.0);
        // 90 degrees about z plus a translation.
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let moved = g.transformed(&rot, &[5.0, 5.0, 5.0]);
        assert!(rmsd(&g, &moved).unwrap() < 1e-9);
    }

    #[test]
    fn kabsch_rmsd_matches_quaternion_oracle() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_cloud(&mut rng, 6, 5.0);
            let b = random_cloud(&mut rng, 6, 5.0);
            let ours = rmsd(&a, &b).unwrap();
            let oracle = quaternion_rmsd_oracle(&a, &b);
            assert_abs_diff_eq!(ours, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn kabsch_coincident_points_identity_rotation() {
        let a = Coordinates::new(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        let b = Coordinates::new(vec![[2.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let (_, rot, _) = kabsch_align(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(rot[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn kabsch_length_mismatch_is_dim_error() {
        let a = Coordinates::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let b = Coordinates::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(kabsch_align(&a, &b), Err(Error::Dim(_))));
    }

    #[test]
    fn rmsd_two_point_sets_oracle_value() {
        // Two points at distance 2 vs two points at distance 4, both on the
        // x axis. After centering, residuals are 1 per point, so the optimal
        // superposition RMSD is sqrt((1^2 + 1^2)/2) = 1. Frozen from the
        // quaternion oracle below.
        let a = Coordinates::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let b = Coordinates::new(vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let oracle = quaternion_rmsd_oracle(&a, &b);
        assert_abs_diff_eq!(oracle, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rmsd(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn validity_h3_examples() {
        let spec = ValiditySpec::preset(LoopClass::H3);
        let n = 4;
        // All consecutive distances 3.80, end-to-end 7.0.
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    v[i * n + j] = if (i as i64 - j as i64).abs() == 1 { 3.80 } else { 7.0 };
                }
            }
        }
        let d = DistanceMatrix::from_values(n, v.clone()).unwrap();
        let report = check_validity(&d, &spec);
        assert!(report.valid);

        // One consecutive distance out of window.
        let mut bad = v.clone();
        bad[1 * n + 2] = 5.0;
        bad[2 * n + 1] = 5.0;
        let d = DistanceMatrix::from_values(n, bad).unwrap();
        let report = check_validity(&d, &spec);
        assert!(!report.valid);
        assert_eq!(report.bond_violations, vec![1]);
        assert!(!report.loop_violation);

        // End-to-end distance out of window.
        let mut bad = v;
        bad[3] = 12.0;
        bad[3 * n] = 12.0;
        let d = DistanceMatrix::from_values(n, bad).unwrap();
        let report = check_validity(&d, &spec);
        assert!(!report.valid);
        assert!(report.loop_violation);
    }

    #[test]
    fn distance_matrix_rejects_bad_input() {
        assert!(matches!(
            DistanceMatrix::from_values(2, vec![0.0, 1.0, 2.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            DistanceMatrix::from_values(2, vec![0.0, -1.0, -1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(DistanceMatrix::from_values(2, vec![0.0; 3]), Err(Error::Dim(_))));
    }

    #[test]
    fn symmetrized_from_raw_postprocesses() {
        let raw = vec![0.7, 2.0, -4.0, 0.5];
        let d = DistanceMatrix::symmetrized_from_raw(2, &raw).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        // (2 + (-4))/2 = -1, clamped to 0.
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(1, 0), 0.0);
    }

    proptest! {
        #[test]
        fn prop_rigid_invariance(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2..10);
            let g = random_cloud(&mut rng, n, 8.0);
            let rot = random_rotation(&mut rng);
            let t = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let g2 = g.transformed(&rot, &t);
            let d1 = distance_matrix(&g);
            let d2 = distance_matrix(&g2);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((d1.get(i, j) - d2.get(i, j)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn prop_rmsd_symmetric_and_zero_on_self(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2..8);
            let a = random_cloud(&mut rng, n, 5.0);
            let b = random_cloud(&mut rng, n, 5.0);
            let ab = rmsd(&a, &b).unwrap();
            let ba = rmsd(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(rmsd(&a, &a).unwrap() < 1e-9);
        }

        #[test]
        fn prop_validity_monotone_under_widening(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2..9);
            let g = random_cloud(&mut rng, n, 6.0);
            let d = distance_matrix(&g);
            let spec = ValiditySpec::new(3.0, 4.0, 5.0, 9.0).unwrap();
            let wide = ValiditySpec::new(
                spec.eta1 - rng.gen_range(0.0..2.0),
                spec.eta2 + rng.gen_range(0.0..2.0),
                spec.eps1 - rng.gen_range(0.0..2.0),
                spec.eps2 + rng.gen_range(0.0..2.0),
            ).unwrap();
            let narrow_report = check_validity(&d, &spec);
            let wide_report = check_validity(&d, &wide);
            // Widening never flips valid -> invalid.
            prop_assert!(!narrow_report.valid || wide_report.valid);
        }
    }
}
