//! Zero-mean Gaussians with spiked low-rank covariance `s·FFᵀ + c·I`.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::SeedStream;

/// Tolerance on `‖FᵀF − I‖_max` when a factor must be orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-10;
const COMMUTE_TOL: f64 = 1e-8;

/// `N(0, spike·FFᵀ + floor·I_d)`, stored factored.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    factor: Mat,
    spike: f64,
    floor: f64,
}

impl LowRankGaussian {
    pub fn new(factor: Mat, spike: f64, floor: f64) -> Result<Self> {
        let (d, r) = (factor.rows(), factor.cols());
        if r == 0 || d < r {
            return Err(Error::Precondition(format!(
                "factor must be d x r with d >= r >= 1, got {d}x{r}"
            )));
        }
        if !(spike >= 0.0 && floor >= 0.0) || spike + floor <= 0.0 {
            return Err(Error::Precondition(format!(
                "need spike >= 0, floor >= 0 and spike + floor > 0 (spike {spike}, floor {floor})"
            )));
        }
        if !factor.is_finite() || !spike.is_finite() || !floor.is_finite() {
            return Err(Error::Precondition("non-finite covariance parameters".into()));
        }
        Ok(Self {
            factor,
            spike,
            floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn rank(&self) -> usize {
        self.factor.cols()
    }

    pub fn factor(&self) -> &Mat {
        &self.factor
    }

    pub fn spike(&self) -> f64 {
        self.spike
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn has_orthonormal_factor(&self) -> bool {
        self.factor.orthonormality_defect() <= ORTHONORMAL_TOL
    }

    fn require_orthonormal(&self, what: &str) -> Result<()> {
        let defect = self.factor.orthonormality_defect();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Precondition(format!(
                "{what} needs an orthonormal factor (defect {defect:e})"
            )));
        }
        Ok(())
    }

    /// Dense covariance. Only meant for tests and small diagnostics.
    pub fn covariance(&self) -> Mat {
        let mut cov = self.factor.matmul(&self.factor.transpose()).scale(self.spike);
        for i in 0..self.dim() {
            cov[(i, i)] += self.floor;
        }
        cov
    }

    /// Woodbury form of the precision matrix.
    pub fn structured_inverse(&self) -> Result<StructuredInverse> {
        if self.floor == 0.0 {
            return Err(Error::SingularCovariance(
                "isotropic floor is zero; covariance is rank-deficient".into(),
            ));
        }
        self.require_orthonormal("structured inverse")?;
        let c = self.floor;
        let s = self.spike;
        Ok(StructuredInverse {
            factor: self.factor.clone(),
            floor_inv: 1.0 / c,
            correction: s / (c * (c + s)),
        })
    }

    /// Draws `n` samples as rows: `x = √s·F·z_r + √c·z_d`.
    pub fn sample(&self, n: usize, rng: &mut SeedStream) -> Mat {
        let (d, r) = (self.dim(), self.rank());
        let (ss, sc) = (self.spike.sqrt(), self.floor.sqrt());
        let mut out = Mat::zeros(n, d);
        let mut z = vec![0.0; r];
        for i in 0..n {
            for zj in z.iter_mut() {
                *zj = rng.normal();
            }
            let row = out.row_mut(i);
            for (k, x) in row.iter_mut().enumerate() {
                let spiked: f64 = self.factor.row(k).iter().zip(&z).map(|(f, zj)| f * zj).sum();
                *x = ss * spiked;
            }
            if sc > 0.0 {
                for x in row.iter_mut() {
                    *x += sc * rng.normal();
                }
            }
        }
        out
    }
}

/// `Σ⁻¹ = floor_inv·I − correction·FFᵀ`.
#[derive(Clone, Debug)]
pub struct StructuredInverse {
    factor: Mat,
    pub floor_inv: f64,
    pub correction: f64,
}

impl StructuredInverse {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let proj = self.factor.t_mul_vec(x);
        let back = self.factor.mul_vec(&proj);
        x.iter()
            .zip(&back)
            .map(|(xi, bi)| self.floor_inv * xi - self.correction * bi)
            .collect()
    }

    pub fn dense(&self) -> Mat {
        let d = self.factor.rows();
        let mut m = self.factor.matmul(&self.factor.transpose()).scale(-self.correction);
        for i in 0..d {
            m[(i, i)] += self.floor_inv;
        }
        m
    }
}

/// Squared Wasserstein-2 distance between two spiked Gaussians whose
/// covariances commute.
///
/// Both factors must be orthonormal. With commuting spike projectors the
/// space splits into four joint eigenspaces (in both spikes, in one only, in
/// neither); eigenvalues are paired within each block, which is what the
/// commuting-covariance formula requires.
pub fn w2_commuting(a: &LowRankGaussian, b: &LowRankGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    a.require_orthonormal("w2_commuting")?;
    b.require_orthonormal("w2_commuting")?;
    let d = a.dim();
    let (ra, rb) = (a.rank(), b.rank());
    let k_mat = a.factor.t_matmul(&b.factor);

    // AB − BA = s_a s_b (F_a K F_bᵀ − F_b Kᵀ F_aᵀ)
    let left = a.factor.matmul(&k_mat).matmul(&b.factor.transpose());
    let commutator = (&left - &left.transpose()).scale(a.spike * b.spike);
    let defect = commutator.max_abs();
    if defect > COMMUTE_TOL {
        return Err(Error::Domain(format!(
            "covariances do not commute (‖AB − BA‖_max = {defect:e})"
        )));
    }

    let shared = if a.spike == 0.0 || b.spike == 0.0 {
        ra.min(rb)
    } else {
        let k = k_mat.frobenius_sq();
        let rounded = k.round();
        if (k - rounded).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "spike subspaces are not jointly diagonalizable (overlap {k})"
            )));
        }
        rounded as usize
    };
    if shared > ra.min(rb) || d + shared < ra + rb {
        return Err(Error::Domain("inconsistent subspace overlap".into()));
    }

    let pairs = [
        (shared, a.spike + a.floor, b.spike + b.floor),
        (ra - shared, a.spike + a.floor, b.floor),
        (rb - shared, a.floor, b.spike + b.floor),
        (d + shared - ra - rb, a.floor, b.floor),
    ];
    let total: f64 = pairs
        .iter()
        .map(|&(mult, la, lb)| mult as f64 * (la + lb - 2.0 * (la * lb).sqrt()))
        .sum();
    Ok(total.max(0.0))
}

/// Mean and unbiased covariance of the rows of `samples`.
pub fn fit_gaussian(samples: &Mat) -> Result<(Vec<f64>, Mat)> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(samples.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Mat::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, x), m) in centered.iter_mut().zip(samples.row(i)).zip(&mean) {
            *c = x - m;
        }
        for j in 0..d {
            for k in j..d {
                cov[(j, k)] += centered[j] * centered[k];
            }
        }
    }
    let denom = (n - 1) as f64;
    for j in 0..d {
        for k in j..d {
            let v = cov[(j, k)] / denom;
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(d: usize) -> Mat {
        Mat::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn isotropic_inverse_has_no_correction() {
        let g = LowRankGaussian::new(e1(3), 0.0, 2.0).unwrap();
        let inv = g.structured_inverse().unwrap();
        assert_eq!((inv.floor_inv, inv.correction), (0.5, 0.0));
    }

    #[test]
    fn spiked_inverse_correction_value() {
        let g = LowRankGaussian::new(e1(2), 1.0, 0.04).unwrap();
        let inv = g.structured_inverse().unwrap();
        assert!((inv.correction - 1.0 / (0.04 * 1.04)).abs() < 1e-12);
        let prod = inv.dense().matmul(&g.covariance());
        assert!(prod.max_abs_diff(&Mat::identity(2)) < 1e-10);
    }

    #[test]
    fn zero_floor_is_singular() {
        let g = LowRankGaussian::new(e1(2), 1.0, 0.0).unwrap();
        assert!(matches!(
            g.structured_inverse(),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn non_orthonormal_factor_rejected() {
        let f = Mat::from_fn(3, 1, |_, _| 1.0);
        let g = LowRankGaussian::new(f, 1.0, 1.0).unwrap();
        assert!(matches!(g.structured_inverse(), Err(Error::Precondition(_))));
    }

    #[test]
    fn invalid_scales_rejected() {
        assert!(LowRankGaussian::new(e1(2), 0.0, 0.0).is_err());
        assert!(LowRankGaussian::new(e1(2), -1.0, 1.0).is_err());
        assert!(LowRankGaussian::new(Mat::zeros(1, 2), 1.0, 1.0).is_err());
    }

    #[test]
    fn w2_identical_is_zero() {
        let g = LowRankGaussian::new(e1(4), 1.5, 0.3).unwrap();
        assert_eq!(w2_commuting(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn w2_clean_vs_noisy_rank_one() {
        let sigma: f64 = 0.2;
        let clean = LowRankGaussian::new(e1(3), 1.0, 0.0).unwrap();
        let noisy = LowRankGaussian::new(e1(3), 1.0, sigma * sigma).unwrap();
        let s2 = sigma * sigma;
        let expected = 2.0 + s2 - 2.0 * (1.0 + s2).sqrt() + 2.0 * s2;
        let got = w2_commuting(&clean, &noisy).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn w2_orthogonal_spikes() {
        // Spikes along e1 and e2 commute; pairing is (1+c, c), (c, 1+c), (c, c).
        let e2 = Mat::from_fn(3, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let a = LowRankGaussian::new(e1(3), 1.0, 0.5).unwrap();
        let b = LowRankGaussian::new(e2, 1.0, 0.5).unwrap();
        let pair = |x: f64, y: f64| x + y - 2.0 * (x * y).sqrt();
        let expected = 2.0 * pair(1.5, 0.5);
        assert!((w2_commuting(&a, &b).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn w2_rejects_non_commuting() {
        let s = 1.0 / 2f64.sqrt();
        let tilted = Mat::from_vec(2, 1, vec![s, s]);
        let a = LowRankGaussian::new(e1(2), 1.0, 0.1).unwrap();
        let b = LowRankGaussian::new(tilted, 1.0, 0.1).unwrap();
        assert!(matches!(w2_commuting(&a, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn fit_two_points() {
        let x = Mat::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let (mean, cov) = fit_gaussian(&x).unwrap();
        assert_eq!(mean, vec![1.0, 0.0]);
        assert_eq!(cov, Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn fit_constant_and_too_few() {
        let x = Mat::from_fn(5, 3, |_, j| j as f64);
        let (_, cov) = fit_gaussian(&x).unwrap();
        assert_eq!(cov.max_abs(), 0.0);
        assert!(matches!(
            fit_gaussian(&Mat::zeros(1, 3)),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_support_exact() {
        let f = Mat::from_vec(3, 1, vec![0.6, 0.0, 0.8]);
        let g = LowRankGaussian::new(f.clone(), 1.0, 0.0).unwrap();
        let a = g.sample(50, &mut SeedStream::new(5));
        let b = g.sample(50, &mut SeedStream::new(5));
        assert_eq!(a, b);
        for i in 0..50 {
            let x = a.row(i);
            // span(F) is the line through (0.6, 0, 0.8): x_1 = 0 and 0.8 x_0 = 0.6 x_2.
            assert_eq!(x[1], 0.0);
            assert!((0.8 * x[0] - 0.6 * x[2]).abs() < 1e-14);
        }
    }
}
