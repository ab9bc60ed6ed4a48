//! The linear low-rank Gaussian sandbox.
//!
//! Clean data is `N(0, EEᵀ)` with `E` a `d×r` orthonormal frame, observations
//! carry extra isotropic noise `σ²I`, and the generator is `z ↦ UVᵀz`, so its
//! law is `N(0, U·VᵀV·Uᵀ)`. Every quantity here is exact: scores come from
//! Woodbury forms and the Fisher loss is a one-dimensional quadrature in `t`
//! of closed-form traces.
//!
//! Notation used below: `S = VᵀV`, `G = UᵀU`, `M = EᵀU`,
//! `β² = σ² + σ_t²`, `γ = 1/(β²(β²+1))`.

use crate::error::{Error, Result};
use crate::gaussian::{w2_commuting, LowRankGaussian, ORTHONORMAL_TOL};
use crate::linalg::{inverse, pairwise_sum, principal_angles, random_orthonormal, sym_sqrt, Mat};
use crate::rng::SeedStream;
use crate::schedule::{NoiseSchedule, Quadrature};

/// `‖UᵀU − I‖_max` allowed for membership in the constraint set.
pub const STIEFEL_TOL: f64 = 1e-8;
/// Principal angles must sit this close to 0 or π/2 for the commuting
/// Wasserstein formula to apply.
pub const ANGLE_TOL: f64 = 1e-6;
pub const MIN_QUAD_POINTS: usize = 8;
pub const MIN_MC_SAMPLES: usize = 100;

/// Clean law `N(0, EEᵀ)` observed with additive noise of level `σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    e: Mat,
    sigma: f64,
}

impl LinearModel {
    pub fn new(e: Mat, sigma: f64) -> Result<Self> {
        let (d, r) = (e.rows(), e.cols());
        if r == 0 || r >= d {
            return Err(Error::Precondition(format!(
                "latent rank must satisfy 1 <= r < d, got d={d}, r={r}"
            )));
        }
        let defect = e.orthonormality_defect();
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(Error::Precondition(format!(
                "E must have orthonormal columns (defect {defect:e})"
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Precondition(format!(
                "noise level must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self { e, sigma })
    }

    /// A Haar-random frame `E`.
    pub fn random(d: usize, r: usize, sigma: f64, rng: &mut SeedStream) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::Precondition(format!(
                "latent rank must satisfy 1 <= r < d, got d={d}, r={r}"
            )));
        }
        Self::new(random_orthonormal(d, r, rng), sigma)
    }

    pub fn dim(&self) -> usize {
        self.e.rows()
    }

    pub fn rank(&self) -> usize {
        self.e.cols()
    }

    pub fn frame(&self) -> &Mat {
        &self.e
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn clean(&self) -> LowRankGaussian {
        LowRankGaussian::new(self.e.clone(), 1.0, 0.0).expect("validated frame")
    }

    pub fn noisy(&self) -> LowRankGaussian {
        self.perturbed(0.0)
    }

    /// Law of `y + σ_t ε` for a noisy observation `y`.
    pub fn perturbed(&self, sigma_t: f64) -> LowRankGaussian {
        let c = self.sigma * self.sigma + sigma_t * sigma_t;
        LowRankGaussian::new(self.e.clone(), 1.0, c).expect("validated frame")
    }
}

/// Linear generator `z ↦ UVᵀz`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub u: Mat,
    pub v: Mat,
}

impl GeneratorParams {
    pub fn new(u: Mat, v: Mat) -> Result<Self> {
        if (u.rows(), u.cols()) != (v.rows(), v.cols()) {
            return Err(Error::DimensionMismatch {
                expected: u.rows() * u.cols(),
                got: v.rows() * v.cols(),
            });
        }
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::Precondition("non-finite generator parameters".into()));
        }
        Ok(Self { u, v })
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `VᵀV`, symmetrized.
    pub fn vtv(&self) -> Mat {
        self.v.t_matmul(&self.v).symmetrized()
    }

    /// `UᵀU − I` in max norm.
    pub fn stiefel_defect(&self) -> f64 {
        self.u.orthonormality_defect()
    }

    pub fn min_vtv_eigenvalue(&self) -> f64 {
        crate::linalg::symmetric_eigen(&self.vtv())
            .map(|e| *e.values.last().expect("r >= 1"))
            .unwrap_or(f64::NAN)
    }

    /// Membership in `{UᵀU = I, VᵀV ≻ 0}`.
    pub fn check_feasible(&self) -> Result<()> {
        let defect = self.stiefel_defect();
        if !(defect <= STIEFEL_TOL) {
            return Err(Error::Constraint(format!("‖UᵀU − I‖_max = {defect:e}")));
        }
        let lmin = self.min_vtv_eigenvalue();
        if !(lmin > 0.0) {
            return Err(Error::Constraint(format!("λ_min(VᵀV) = {lmin:e}")));
        }
        Ok(())
    }

    /// Dense generator covariance `U·VᵀV·Uᵀ`.
    pub fn covariance(&self) -> Mat {
        self.u.matmul(&self.vtv()).matmul(&self.u.transpose())
    }

    /// `G(z) = UVᵀz`.
    pub fn generate(&self, z: &[f64]) -> Vec<f64> {
        self.u.mul_vec(&self.v.t_mul_vec(z))
    }

    /// Right-multiplies both factors by the same `r×r` matrix.
    pub fn gauge(&self, q: &Mat) -> Self {
        Self {
            u: self.u.matmul(q),
            v: self.v.matmul(q),
        }
    }
}

/// `−(EEᵀ + (σ² + σ_t²)I)⁻¹ x`.
pub fn noisy_score(m: &LinearModel, sigma_t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: x.len(),
        });
    }
    let inv = m.perturbed(sigma_t).structured_inverse()?;
    Ok(inv.apply(x).into_iter().map(|v| -v).collect())
}

/// `−(U·VᵀV·Uᵀ + σ_t²I)⁻¹ x` through the `r×r` core `(VᵀV)⁻¹ + σ_t⁻²·UᵀU`.
pub fn generator_score(p: &GeneratorParams, sigma_t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: x.len(),
        });
    }
    if !(sigma_t > 0.0) {
        return Err(Error::Domain(format!("σ_t must be positive, got {sigma_t}")));
    }
    let core = generator_core(p, sigma_t)?;
    Ok(apply_generator_score(&p.u, &core, sigma_t, x))
}

/// Inverse of `(VᵀV)⁻¹ + σ_t⁻²·UᵀU`.
fn generator_core(p: &GeneratorParams, sigma_t: f64) -> Result<Mat> {
    let s_inv = inverse(&p.vtv())
        .map_err(|_| Error::Precondition("VᵀV is singular".into()))?;
    let mut core = s_inv;
    core.axpy(1.0 / (sigma_t * sigma_t), &p.u.t_matmul(&p.u));
    inverse(&core).map_err(|_| Error::Precondition("Woodbury core is singular".into()))
}

fn apply_generator_score(u: &Mat, core_inv: &Mat, sigma_t: f64, x: &[f64]) -> Vec<f64> {
    let a = 1.0 / (sigma_t * sigma_t);
    let back = u.mul_vec(&core_inv.mul_vec(&u.t_mul_vec(x)));
    x.iter()
        .zip(&back)
        .map(|(xi, bi)| -(a * xi - a * a * bi))
        .collect()
}

/// Per-`σ_t` constants of the noisy precision `Σ_σ⁻¹ = aI − γEEᵀ`.
#[derive(Clone, Copy, Debug)]
struct NoisyConsts {
    a: f64,
    gamma: f64,
    /// `γ² − 2aγ`, the `EEᵀ` coefficient of `Σ_σ⁻²`.
    h: f64,
}

impl NoisyConsts {
    fn new(sigma: f64, sigma_t: f64) -> Self {
        let beta2 = sigma * sigma + sigma_t * sigma_t;
        let a = 1.0 / beta2;
        let gamma = 1.0 / (beta2 * (beta2 + 1.0));
        Self {
            a,
            gamma,
            h: gamma * gamma - 2.0 * a * gamma,
        }
    }
}

/// `r×r` summaries of a generator relative to the model frame.
struct Summaries {
    s: Mat,
    g: Mat,
    m: Mat,
    tr_sg: f64,
    tr_msm: f64,
}

impl Summaries {
    fn new(model: &LinearModel, p: &GeneratorParams) -> Self {
        let s = p.vtv();
        let g = p.u.t_matmul(&p.u).symmetrized();
        let m = model.e.t_matmul(&p.u);
        let tr_sg = s.dot(&g);
        let tr_msm = m.matmul(&s).dot(&m);
        Self {
            s,
            g,
            m,
            tr_sg,
            tr_msm,
        }
    }

    /// `N = (σ_t² I + SG)⁻¹`.
    fn resolvent(&self, sigma_t: f64) -> Mat {
        let mut k = self.s.matmul(&self.g);
        for i in 0..k.rows() {
            k[(i, i)] += sigma_t * sigma_t;
        }
        inverse(&k).expect("σ_t² I + SG is invertible for PSD S, G and σ_t > 0")
    }
}

/// Additive pieces of the Fisher integrand at one noise level, for a
/// feasible generator: `constant + alignment + spectrum`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// Depends on `(d, r, σ, σ_t)` only.
    pub constant: f64,
    /// `(γ² − 2aγ)·tr(EEᵀ·U·VᵀV·Uᵀ)`; the only term that sees `col(U)`.
    pub alignment: f64,
    /// `tr(VᵀV)/β⁴ − σ_t⁻⁴·tr((S⁻¹ + σ_t⁻²I)⁻¹)`.
    pub spectrum: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.constant + self.alignment + self.spectrum
    }
}

/// Closed-form Fisher loss `E_t E_x ‖s_σ(x) − s_θ(x)‖²`, `x ~ p_θ^{σ_t}`,
/// with the quadrature built once.
#[derive(Clone, Debug)]
pub struct FisherLoss {
    model: LinearModel,
    schedule: NoiseSchedule,
    quad: Quadrature,
}

impl FisherLoss {
    pub fn new(model: LinearModel, schedule: NoiseSchedule, quad_points: usize) -> Result<Self> {
        if quad_points < MIN_QUAD_POINTS {
            return Err(Error::Precondition(format!(
                "need at least {MIN_QUAD_POINTS} quadrature points, got {quad_points}"
            )));
        }
        schedule.validate()?;
        Ok(Self {
            model,
            schedule,
            quad: Quadrature::gauss_legendre(quad_points),
        })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check_shape(&self, p: &GeneratorParams) -> Result<()> {
        if p.dim() != self.model.dim() || p.rank() != self.model.rank() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim() * self.model.rank(),
                got: p.dim() * p.rank(),
            });
        }
        Ok(())
    }

    /// Loss for `p` in the constraint set.
    pub fn value(&self, p: &GeneratorParams) -> Result<f64> {
        self.check_shape(p)?;
        p.check_feasible()?;
        Ok(self.value_unconstrained(p))
    }

    /// The same trace formula for any `(U, V)`; off the constraint set it is
    /// still the Fisher divergence of the generator with covariance
    /// `U·VᵀV·Uᵀ`.
    pub fn value_unconstrained(&self, p: &GeneratorParams) -> f64 {
        let sm = Summaries::new(&self.model, p);
        self.expect(|sigma_t| self.integrand(&sm, sigma_t))
    }

    /// Integrand at a single noise level.
    pub fn integrand_at(&self, p: &GeneratorParams, sigma_t: f64) -> Result<f64> {
        self.check_shape(p)?;
        p.check_feasible()?;
        Ok(self.integrand(&Summaries::new(&self.model, p), sigma_t))
    }

    fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .quad
            .nodes
            .iter()
            .zip(&self.quad.weights)
            .map(|(t, w)| w * f(self.schedule.sigma_at(*t)))
            .collect();
        pairwise_sum(&terms)
    }

    /// Loss minus its parameter-independent part. Its magnitude stays O(1)
    /// when the full loss is dominated by `d/σ_min²`, which keeps line-search
    /// comparisons well above rounding.
    pub fn variable_part(&self, p: &GeneratorParams) -> f64 {
        let sm = Summaries::new(&self.model, p);
        self.expect(|sigma_t| self.integrand_variable(&sm, sigma_t))
    }

    fn integrand(&self, sm: &Summaries, sigma_t: f64) -> f64 {
        self.integrand_constant(sigma_t) + self.integrand_variable(sm, sigma_t)
    }

    fn integrand_constant(&self, sigma_t: f64) -> f64 {
        let (d, r) = (self.model.dim() as f64, self.model.rank() as f64);
        let k = NoisyConsts::new(self.model.sigma, sigma_t);
        let st2 = sigma_t * sigma_t;
        // tr(Σ_σ⁻²Σ_θ) and tr(Σ_θ⁻¹) = (d − r)/σ_t² + tr(N) contribute the
        // σ_t-only pieces; tr(Σ_σ⁻¹) is constant outright.
        k.a * k.a * d * st2 + k.h * r * st2 - 2.0 * (d * k.a - k.gamma * r) + (d - r) / st2
    }

    fn integrand_variable(&self, sm: &Summaries, sigma_t: f64) -> f64 {
        let k = NoisyConsts::new(self.model.sigma, sigma_t);
        k.a * k.a * sm.tr_sg + k.h * sm.tr_msm + sm.resolvent(sigma_t).trace()
    }

    /// Splits the integrand of a feasible generator into constant,
    /// alignment and spectral parts.
    pub fn terms_at(&self, p: &GeneratorParams, sigma_t: f64) -> Result<LossTerms> {
        self.check_shape(p)?;
        p.check_feasible()?;
        let (d, r) = (self.model.dim() as f64, self.model.rank() as f64);
        let sm = Summaries::new(&self.model, p);
        let k = NoisyConsts::new(self.model.sigma, sigma_t);
        let st2 = sigma_t * sigma_t;
        let eig = crate::linalg::symmetric_eigen(&sm.s)?;
        let shrunk: f64 = eig.values.iter().map(|l| l / (st2 * (l + st2))).sum();
        let spectrum = k.a * k.a * sm.s.trace() - shrunk;
        let alignment = k.h * sm.tr_msm;
        let constant = k.a * k.a * d * st2 + k.h * r * st2 - 2.0 * (d * k.a - k.gamma * r) + d / st2;
        Ok(LossTerms {
            constant,
            alignment,
            spectrum,
        })
    }

    /// Euclidean gradient `(∂L/∂U, ∂L/∂V)` of the trace formula, valid for
    /// any `(U, V)`.
    pub fn gradient(&self, p: &GeneratorParams) -> (Mat, Mat) {
        let sm = Summaries::new(&self.model, p);
        let e = &self.model.e;
        let (d, r) = (p.dim(), p.rank());
        let mut du = Mat::zeros(d, r);
        let mut dv = Mat::zeros(d, r);
        let us = p.u.matmul(&sm.s);
        let ems = e.matmul(&sm.m).matmul(&sm.s);
        let vg = p.v.matmul(&sm.g);
        let vmm = p.v.matmul(&sm.m.t_matmul(&sm.m));
        for (t, w) in self.quad.nodes.iter().zip(&self.quad.weights) {
            let sigma_t = self.schedule.sigma_at(*t);
            let k = NoisyConsts::new(self.model.sigma, sigma_t);
            let n = sm.resolvent(sigma_t);
            let n2 = n.matmul(&n);
            // N²S is symmetric, so both U-paths through G contribute equally.
            let n2s = n2.matmul(&sm.s);
            let gn2 = sm.g.matmul(&n2).symmetrized();
            du.axpy(2.0 * w * k.a * k.a, &us);
            du.axpy(2.0 * w * k.h, &ems);
            du.axpy(-2.0 * w, &p.u.matmul(&n2s));
            dv.axpy(2.0 * w * k.a * k.a, &vg);
            dv.axpy(2.0 * w * k.h, &vmm);
            dv.axpy(-2.0 * w, &p.v.matmul(&gn2));
        }
        (du, dv)
    }
}

pub fn loss_closed_form(
    m: &LinearModel,
    p: &GeneratorParams,
    s: &NoiseSchedule,
    quad_points: usize,
) -> Result<f64> {
    FisherLoss::new(m.clone(), *s, quad_points)?.value(p)
}

/// Monte Carlo estimate and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Samples `t ~ Unif(0,1)`, `x = G(z) + σ_t ε`, and averages
/// `‖s_σ(x) − s_θ(x)‖²`.
pub fn loss_monte_carlo(
    m: &LinearModel,
    p: &GeneratorParams,
    s: &NoiseSchedule,
    n: usize,
    rng: &mut SeedStream,
) -> Result<McEstimate> {
    if n < MIN_MC_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_MC_SAMPLES,
            got: n,
        });
    }
    if p.dim() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: p.dim(),
        });
    }
    let d = m.dim();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let sigma_t = s.sample_sigma(rng);
        let z = rng.normal_vec(d);
        let mut x = p.generate(&z);
        for xi in &mut x {
            *xi += sigma_t * rng.normal();
        }
        let a = noisy_score(m, sigma_t, &x)?;
        let b = generator_score(p, sigma_t, &x)?;
        values.push(a.iter().zip(&b).map(|(ai, bi)| (ai - bi) * (ai - bi)).sum::<f64>());
    }
    let nf = n as f64;
    let mean = pairwise_sum(&values) / nf;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (nf - 1.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / nf).sqrt(),
    })
}

/// The global minimizer `U = E·q`, `VᵀV = (1+σ²)I`. `V` is taken as
/// `√(1+σ²)·E·q`.
pub fn analytic_minimizer(m: &LinearModel, q: &Mat) -> Result<GeneratorParams> {
    let r = m.rank();
    if q.rows() != r || q.cols() != r {
        return Err(Error::DimensionMismatch {
            expected: r * r,
            got: q.rows() * q.cols(),
        });
    }
    let defect = q.orthonormality_defect();
    if !(defect <= 1e-10) {
        return Err(Error::Precondition(format!("q is not orthogonal (defect {defect:e})")));
    }
    let u = m.e.matmul(q);
    let v = u.scale((1.0 + m.sigma * m.sigma).sqrt());
    GeneratorParams::new(u, v)
}

/// Largest principal angle between `col(U)` and `col(E)`.
pub fn max_principal_angle(m: &LinearModel, p: &GeneratorParams) -> Result<f64> {
    let angles = principal_angles(&p.u, &m.e)?;
    Ok(angles.into_iter().fold(0.0, f64::max))
}

/// `‖VᵀV − (1+σ²)I‖_F`.
pub fn vtv_deviation(m: &LinearModel, p: &GeneratorParams) -> f64 {
    let mut dev = p.vtv();
    let target = 1.0 + m.sigma * m.sigma;
    for i in 0..dev.rows() {
        dev[(i, i)] -= target;
    }
    dev.frobenius_norm()
}

/// Squared Wasserstein-2 distances to the clean law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WassersteinReport {
    pub w2_noisy_clean: f64,
    pub w2_distilled_clean: f64,
    /// `w2_noisy_clean − w2_distilled_clean`.
    pub gap: f64,
}

pub fn wasserstein_report(m: &LinearModel, p: &GeneratorParams) -> Result<WassersteinReport> {
    if p.dim() != m.dim() || p.rank() != m.rank() {
        return Err(Error::DimensionMismatch {
            expected: m.dim() * m.rank(),
            got: p.dim() * p.rank(),
        });
    }
    p.check_feasible()?;
    let angles = principal_angles(&p.u, &m.e)?;
    let half_pi = std::f64::consts::FRAC_PI_2;
    if let Some(bad) = angles
        .iter()
        .find(|&&a| a.abs() > ANGLE_TOL && (a - half_pi).abs() > ANGLE_TOL)
    {
        return Err(Error::Domain(format!(
            "generator covariance does not commute with EEᵀ: principal angle {bad:e} rad \
             is neither 0 nor π/2"
        )));
    }
    let w2_noisy_clean = w2_commuting(&m.noisy(), &m.clean())?;

    // For the projector A = EEᵀ, (A^½ B A^½)^½ = E (M S Mᵀ)^½ Eᵀ.
    let sm = Summaries::new(m, p);
    let msm = sm.m.matmul(&sm.s).matmul(&sm.m.transpose()).symmetrized();
    let cross = sym_sqrt(&msm, 1e-12)?.trace();
    let w2_distilled_clean = (m.rank() as f64 + sm.tr_sg - 2.0 * cross).max(0.0);
    Ok(WassersteinReport {
        w2_noisy_clean,
        w2_distilled_clean,
        gap: w2_noisy_clean - w2_distilled_clean,
    })
}

/// `E_t[u/(σ²+σ_t²+1)² − u/(σ_t²(u+σ_t²))]`, the loss contribution of one
/// eigenvalue `u` of `VᵀV` at perfect alignment, up to constants.
pub fn f_sigma(u: f64, sigma: f64, s: &NoiseSchedule, quad_points: usize) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Domain(format!("u must be positive, got {u}")));
    }
    let quad = Quadrature::gauss_legendre(quad_points.max(1));
    Ok(s.expect(&quad, |st| {
        let st2 = st * st;
        let b = sigma * sigma + st2 + 1.0;
        u / (b * b) - u / (st2 * (u + st2))
    }))
}

/// `d f_σ / du = E_t[1/(σ²+σ_t²+1)² − 1/(u+σ_t²)²]`.
pub fn f_sigma_derivative(u: f64, sigma: f64, s: &NoiseSchedule, quad: &Quadrature) -> f64 {
    s.expect(quad, |st| {
        let st2 = st * st;
        let b = sigma * sigma + st2 + 1.0;
        1.0 / (b * b) - 1.0 / ((u + st2) * (u + st2))
    })
}

/// Minimizer of `f_σ` on `(0, upper]` by bisection on its increasing
/// derivative.
pub fn minimize_f_sigma(sigma: f64, s: &NoiseSchedule, quad_points: usize, upper: f64) -> Result<f64> {
    if !(upper > 0.0) {
        return Err(Error::Domain(format!("upper bound must be positive, got {upper}")));
    }
    let quad = Quadrature::gauss_legendre(quad_points.max(1));
    let deriv = |u: f64| f_sigma_derivative(u, sigma, s, &quad);
    if deriv(upper) <= 0.0 {
        return Ok(upper);
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `tr(EEᵀ·U·Σ·Uᵀ)`.
pub fn aligned_trace(e: &Mat, sigma: &Mat, u: &Mat) -> Result<f64> {
    if e.rows() != u.rows() || sigma.rows() != u.cols() || !sigma.is_square() {
        return Err(Error::DimensionMismatch {
            expected: e.rows(),
            got: u.rows(),
        });
    }
    let m = e.t_matmul(u);
    Ok(m.matmul(sigma).dot(&m))
}

/// Whether `U` attains the maximum `tr(Σ)` of `tr(EEᵀ·U·Σ·Uᵀ)` over
/// orthonormal `U`, which happens exactly when `U = EQ`.
pub fn trace_maximizer_check(e: &Mat, sigma: &Mat, u: &Mat) -> Result<bool> {
    let value = aligned_trace(e, sigma, u)?;
    let m = e.t_matmul(u);
    let mut mmt = m.matmul(&m.transpose());
    for i in 0..mmt.rows() {
        mmt[(i, i)] -= 1.0;
    }
    Ok(value >= sigma.trace() - 1e-8 && mmt.frobenius_norm() <= 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn to_na(m: &Mat) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
    }

    fn random_params(d: usize, r: usize, rng: &mut SeedStream) -> GeneratorParams {
        let u = random_orthonormal(d, r, rng);
        let v = rng.normal_mat(d, r);
        GeneratorParams::new(u, v).unwrap()
    }

    fn dense_solve(cov: &Mat, x: &[f64]) -> Vec<f64> {
        let lu = to_na(cov).lu();
        let sol = lu.solve(&DVector::from_column_slice(x)).unwrap();
        sol.iter().map(|v| -v).collect()
    }

    #[test]
    fn noisy_score_examples() {
        let mut rng = SeedStream::new(1);
        let m = LinearModel::random(5, 2, 0.3, &mut rng).unwrap();
        assert!(noisy_score(&m, 0.7, &[0.0; 5]).unwrap().iter().all(|v| *v == 0.0));

        // Orthogonal complement direction.
        let e = m.frame();
        let mut x = rng.normal_vec(5);
        let proj = e.mul_vec(&e.t_mul_vec(&x));
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi -= pi;
        }
        let got = noisy_score(&m, 0.7, &x).unwrap();
        let c = 0.09 + 0.49;
        for (g, xi) in got.iter().zip(&x) {
            assert!((g + xi / c).abs() < 1e-12);
        }

        let x = rng.normal_vec(5);
        let want = dense_solve(&m.perturbed(0.7).covariance(), &x);
        let got = noisy_score(&m, 0.7, &x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn generator_score_examples() {
        let mut rng = SeedStream::new(2);
        let u = random_orthonormal(6, 2, &mut rng);
        let p = GeneratorParams::new(u.clone(), u.scale(3f64.sqrt())).unwrap();
        let st = 0.4;
        let x = u.mul_vec(&[0.3, -1.2]);
        let got = generator_score(&p, st, &x).unwrap();
        for (g, xi) in got.iter().zip(&x) {
            assert!((g + xi / (3.0 + st * st)).abs() < 1e-12);
        }

        let mut y = rng.normal_vec(6);
        let proj = u.mul_vec(&u.t_mul_vec(&y));
        for (yi, pi) in y.iter_mut().zip(&proj) {
            *yi -= pi;
        }
        let got = generator_score(&p, st, &y).unwrap();
        for (g, yi) in got.iter().zip(&y) {
            assert!((g + yi / (st * st)).abs() < 1e-10);
        }

        for seed in 0..10 {
            let mut rng = SeedStream::new(100 + seed);
            let p = random_params(6, 2, &mut rng);
            let x = rng.normal_vec(6);
            let mut cov = p.covariance();
            for i in 0..6 {
                cov[(i, i)] += st * st;
            }
            let want = dense_solve(&cov, &x);
            let got = generator_score(&p, st, &x).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn generator_score_rejects_singular_vtv() {
        let mut rng = SeedStream::new(3);
        let u = random_orthonormal(4, 2, &mut rng);
        let p = GeneratorParams::new(u, Mat::zeros(4, 2)).unwrap();
        assert!(matches!(
            generator_score(&p, 0.5, &[1.0, 0.0, 0.0, 0.0]),
            Err(Error::Precondition(_))
        ));
    }

    fn dense_integrand(m: &LinearModel, p: &GeneratorParams, sigma_t: f64) -> f64 {
        let noisy = to_na(&m.perturbed(sigma_t).covariance());
        let mut gen = to_na(&p.covariance());
        for i in 0..m.dim() {
            gen[(i, i)] += sigma_t * sigma_t;
        }
        let diff = noisy.clone().try_inverse().unwrap() - gen.clone().try_inverse().unwrap();
        let root = gen.symmetric_eigen();
        let sqrt = &root.eigenvectors
            * DMatrix::from_diagonal(&root.eigenvalues.map(f64::sqrt))
            * root.eigenvectors.transpose();
        (diff * sqrt).norm_squared()
    }

    #[test]
    fn integrand_matches_dense_frobenius_form() {
        let mut rng = SeedStream::new(4);
        let m = LinearModel::random(6, 2, 0.5, &mut rng).unwrap();
        let p = analytic_minimizer(&m, &Mat::identity(2)).unwrap();
        let loss = FisherLoss::new(m.clone(), NoiseSchedule::constant(0.3).unwrap(), 8).unwrap();
        let got = loss.integrand_at(&p, 0.3).unwrap();
        let want = dense_integrand(&m, &p, 0.3);
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
        let constant = loss.value(&p).unwrap();
        assert!((constant - want).abs() < 1e-9 * want.max(1.0));

        for seed in 0..5 {
            let mut rng = SeedStream::new(40 + seed);
            let p = random_params(6, 2, &mut rng);
            for st in [0.05, 0.4, 2.0] {
                let got = loss.integrand_at(&p, st).unwrap();
                let want = dense_integrand(&m, &p, st);
                assert!((got - want).abs() < 1e-8 * want.max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn decomposition_sums_to_integrand() {
        let mut rng = SeedStream::new(5);
        let m = LinearModel::random(7, 3, 0.2, &mut rng).unwrap();
        let loss = FisherLoss::new(m, NoiseSchedule::default(), 16).unwrap();
        let p = random_params(7, 3, &mut rng);
        for st in [0.02, 0.3, 4.0] {
            let terms = loss.terms_at(&p, st).unwrap();
            let direct = loss.integrand_at(&p, st).unwrap();
            assert!((terms.total() - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn closed_form_rejects_infeasible_and_short_quadrature() {
        let mut rng = SeedStream::new(6);
        let m = LinearModel::random(5, 2, 0.2, &mut rng).unwrap();
        let p = GeneratorParams::new(rng.normal_mat(5, 2), rng.normal_mat(5, 2)).unwrap();
        let s = NoiseSchedule::default();
        assert!(matches!(loss_closed_form(&m, &p, &s, 16), Err(Error::Constraint(_))));
        let ok = analytic_minimizer(&m, &Mat::identity(2)).unwrap();
        assert!(loss_closed_form(&m, &ok, &s, 4).is_err());
    }

    #[test]
    fn minimizer_is_strictly_optimal() {
        let mut rng = SeedStream::new(7);
        let m = LinearModel::random(6, 2, 0.4, &mut rng).unwrap();
        let loss = FisherLoss::new(m.clone(), NoiseSchedule::default(), 64).unwrap();
        let star = analytic_minimizer(&m, &Mat::identity(2)).unwrap();
        let best = loss.value(&star).unwrap();
        for k in 0..50 {
            let scale = 1e-2 * (1.0 + k as f64 / 10.0);
            let du = rng.normal_mat(6, 2).scale(scale);
            let dv = rng.normal_mat(6, 2).scale(scale);
            let u = crate::linalg::thin_qr(&(&star.u + &du)).unwrap().0;
            let p = GeneratorParams::new(u, &star.v + &dv).unwrap();
            assert!(loss.value(&p).unwrap() > best);
        }
        // The whole orthogonal family attains the same value.
        let q = random_orthonormal(2, 2, &mut rng);
        let other = analytic_minimizer(&m, &q).unwrap();
        assert!((loss.value(&other).unwrap() - best).abs() < 1e-10 * best.abs().max(1.0));
    }

    #[test]
    fn minimizer_examples() {
        let mut rng = SeedStream::new(8);
        let m = LinearModel::random(5, 2, 0.5, &mut rng).unwrap();
        let p = analytic_minimizer(&m, &Mat::identity(2)).unwrap();
        assert!(p.vtv().max_abs_diff(&Mat::identity(2).scale(1.25)) < 1e-14);
        p.check_feasible().unwrap();
        let m0 = LinearModel::new(m.frame().clone(), 0.0).unwrap();
        let p0 = analytic_minimizer(&m0, &Mat::identity(2)).unwrap();
        assert!(p0.covariance().max_abs_diff(&m0.clean().covariance()) < 1e-14);
        assert!(analytic_minimizer(&m, &Mat::diag(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn wasserstein_gap_examples() {
        let mut rng = SeedStream::new(9);
        for (d, r, sigma) in [(8, 2, 0.5), (16, 4, 0.2), (4, 1, 0.1), (3, 1, 0.0)] {
            let m = LinearModel::random(d, r, sigma, &mut rng).unwrap();
            let q = random_orthonormal(r, r, &mut rng);
            let rep = wasserstein_report(&m, &analytic_minimizer(&m, &q).unwrap()).unwrap();
            let want = (d - r) as f64 * sigma * sigma;
            assert!((rep.gap - want).abs() < 1e-9, "{rep:?}");
            let s2 = sigma * sigma;
            let distilled = r as f64 * (2.0 + s2 - 2.0 * (1.0 + s2).sqrt());
            assert!((rep.w2_distilled_clean - distilled).abs() < 1e-12);
            if sigma == 0.0 {
                assert!(rep.w2_noisy_clean.abs() < 1e-15 && rep.w2_distilled_clean.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wasserstein_report_rejects_tilted_subspace() {
        let e = Mat::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let m = LinearModel::new(e, 0.3).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let u = Mat::from_rows(&[vec![c], vec![s], vec![0.0]]).unwrap();
        let p = GeneratorParams::new(u.clone(), u).unwrap();
        assert!(matches!(wasserstein_report(&m, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn distilled_w2_matches_bures_oracle() {
        let e = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        let m = LinearModel::new(e, 0.3).unwrap();
        // One direction inside col(E), one orthogonal to it.
        let u = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]])
            .unwrap();
        let v = Mat::from_rows(&[vec![1.3, 0.0], vec![0.0, 0.7], vec![0.0, 0.0], vec![0.0, 0.0]])
            .unwrap();
        let p = GeneratorParams::new(u, v).unwrap();
        let rep = wasserstein_report(&m, &p).unwrap();
        let a = to_na(&m.clean().covariance());
        let b = to_na(&p.covariance());
        let bures = bures_oracle(&a, &b);
        assert!((rep.w2_distilled_clean - bures).abs() < 1e-9);
    }

    fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
        let e = a.clone().symmetric_eigen();
        &e.eigenvectors
            * DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()))
            * e.eigenvectors.transpose()
    }

    fn bures_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let ra = psd_sqrt(a);
        let inner = &ra * b * &ra;
        let inner = (&inner + inner.transpose()) * 0.5;
        (a + b).trace() - 2.0 * psd_sqrt(&inner).trace()
    }

    #[test]
    fn f_sigma_minimizer_and_convexity() {
        let s = NoiseSchedule::default();
        for sigma in [0.1, 0.2, 0.5] {
            let u = minimize_f_sigma(sigma, &s, 64, 10.0).unwrap();
            assert!((u - (1.0 + sigma * sigma)).abs() < 1e-6, "σ={sigma}: {u}");
            // Golden-section search on f itself as a cross-check.
            let f = |u: f64| f_sigma(u, sigma, &s, 64).unwrap();
            let g = golden_section(f, 1e-3, 10.0);
            assert!((g - (1.0 + sigma * sigma)).abs() < 1e-4);
            let h = 1e-3;
            let mut u = 0.1;
            while u <= 5.0 {
                let second = (f(u + h) - 2.0 * f(u) + f(u - h)) / (h * h);
                assert!(second > 0.0, "f'' <= 0 at {u}");
                u += 0.1;
            }
        }
        assert!(f_sigma(0.0, 0.1, &s, 64).is_err());
    }

    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        while b - a > 1e-9 {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - phi * (b - a);
            d = a + phi * (b - a);
        }
        0.5 * (a + b)
    }

    #[test]
    fn f_sigma_constant_schedule_critical_point() {
        let s = NoiseSchedule::constant(0.7).unwrap();
        let u = minimize_f_sigma(0.3, &s, 8, 10.0).unwrap();
        assert!((u - 1.09).abs() < 1e-12);
    }

    #[test]
    fn trace_maximizer_examples() {
        let mut rng = SeedStream::new(10);
        let e = random_orthonormal(5, 2, &mut rng);
        let a = rng.normal_mat(2, 2);
        let mut sigma = a.t_matmul(&a);
        sigma[(0, 0)] += 0.5;
        sigma[(1, 1)] += 0.5;
        let q = random_orthonormal(2, 2, &mut rng);
        assert!(trace_maximizer_check(&e, &sigma, &e.matmul(&q)).unwrap());

        let basis = random_orthonormal(5, 5, &mut rng);
        let (mut e2, mut u2) = (Mat::zeros(5, 2), Mat::zeros(5, 2));
        for i in 0..5 {
            for j in 0..2 {
                e2[(i, j)] = basis[(i, j)];
                u2[(i, j)] = basis[(i, j + 2)];
            }
        }
        assert!(!trace_maximizer_check(&e2, &sigma, &u2).unwrap());
        assert!(aligned_trace(&e2, &sigma, &u2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn trace_bound_on_rotation_grid() {
        let e = Mat::from_rows(&[vec![0.6], vec![0.8], vec![0.0]]).unwrap();
        let sigma = Mat::from_rows(&[vec![2.5]]).unwrap();
        let mut best: f64 = 0.0;
        for i in 0..=200 {
            for j in 0..=100 {
                let th = std::f64::consts::PI * i as f64 / 100.0;
                let ph = std::f64::consts::PI * j as f64 / 100.0;
                let u = Mat::from_rows(&[
                    vec![ph.sin() * th.cos()],
                    vec![ph.sin() * th.sin()],
                    vec![ph.cos()],
                ])
                .unwrap();
                let v = aligned_trace(&e, &sigma, &u).unwrap();
                assert!(v <= 2.5 + 1e-12);
                best = best.max(v);
            }
        }
        assert!(best > 2.49);
    }

    #[test]
    fn von_neumann_trace_bound() {
        let mut rng = SeedStream::new(11);
        for n in 2..8 {
            for _ in 0..10 {
                let a = rng.normal_mat(n, n).symmetrized();
                let b = rng.normal_mat(n, n).symmetrized();
                let lhs = a.matmul(&b).trace().abs();
                let sa = crate::linalg::singular_values(&a);
                let sb = crate::linalg::singular_values(&b);
                let rhs: f64 = sa.iter().zip(&sb).map(|(x, y)| x * y).sum();
                assert!(lhs <= rhs + 1e-9);
            }
        }
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let mut rng = SeedStream::new(12);
        let m = LinearModel::random(6, 2, 0.3, &mut rng).unwrap();
        let s = NoiseSchedule::log_linear(0.1, 3.0).unwrap();
        let p = random_params(6, 2, &mut rng);
        let p = GeneratorParams::new(p.u, p.v.scale(0.5)).unwrap();
        let exact = loss_closed_form(&m, &p, &s, 64).unwrap();
        let mc = loss_monte_carlo(&m, &p, &s, 20_000, &mut rng).unwrap();
        assert!((mc.estimate - exact).abs() < 4.0 * mc.stderr, "{mc:?} vs {exact}");
        assert!(loss_monte_carlo(&m, &p, &s, 50, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_stderr_scales_with_sample_size() {
        let mut rng = SeedStream::new(13);
        let m = LinearModel::random(4, 1, 0.3, &mut rng).unwrap();
        let s = NoiseSchedule::log_linear(0.2, 2.0).unwrap();
        let p = random_params(4, 1, &mut rng);
        let a = loss_monte_carlo(&m, &p, &s, 20_000, &mut rng.split(1)).unwrap();
        let b = loss_monte_carlo(&m, &p, &s, 40_000, &mut rng.split(2)).unwrap();
        let ratio = b.stderr / a.stderr;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.1, "{ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_is_nonnegative_and_gauge_invariant(seed in any::<u64>(), sigma in 0.0f64..1.0) {
            let mut rng = SeedStream::new(seed);
            let m = LinearModel::random(6, 2, sigma, &mut rng).unwrap();
            let loss = FisherLoss::new(m, NoiseSchedule::default(), 32).unwrap();
            let p = random_params(6, 2, &mut rng);
            let value = loss.value(&p).unwrap();
            prop_assert!(value >= -1e-9);
            let q = random_orthonormal(2, 2, &mut rng);
            let rotated = loss.value(&p.gauge(&q)).unwrap();
            prop_assert!((value - rotated).abs() <= 1e-10 * value.abs().max(1.0));
        }

        #[test]
        fn noisy_score_is_linear(seed in any::<u64>(), k in -3.0f64..3.0) {
            let mut rng = SeedStream::new(seed);
            let m = LinearModel::random(5, 2, 0.2, &mut rng).unwrap();
            let x = rng.normal_vec(5);
            let y = rng.normal_vec(5);
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + k * b).collect();
            let sx = noisy_score(&m, 0.5, &x).unwrap();
            let sy = noisy_score(&m, 0.5, &y).unwrap();
            let ss = noisy_score(&m, 0.5, &sum).unwrap();
            for i in 0..5 {
                prop_assert!((ss[i] - sx[i] - k * sy[i]).abs() < 1e-12);
            }
        }
    }
}
