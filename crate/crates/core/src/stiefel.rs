//! Riemannian descent on `St(d, r) × ℝ^{d×r}` for the closed-form Fisher
//! loss.
//!
//! `U` moves along the tangent projection of its gradient followed by a
//! retraction; `V` takes plain gradient steps guarded by a barrier on
//! `λ_min(VᵀV)`. Step sizes come from Armijo backtracking.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{polar_factor, random_orthonormal, thin_qr, Mat};
use crate::rng::SeedStream;
use crate::schedule::{NoiseSchedule, DEFAULT_QUAD_POINTS};
use crate::theory::{max_principal_angle, vtv_deviation, FisherLoss, GeneratorParams, LinearModel};

pub const ARMIJO_C1: f64 = 1e-4;
pub const MIN_STEP: f64 = 1e-14;
/// Steps that push `λ_min(VᵀV)` below this are rejected.
pub const VTV_BARRIER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retraction {
    Qr,
    Polar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    /// Initial trial step for each block; later trials start from twice the
    /// block's last accepted step.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once the Riemannian gradient norm falls to this level.
    pub grad_tol: f64,
    pub retraction: Retraction,
    pub seed: u64,
    pub quad_points: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_iters: 5000,
            grad_tol: 1e-7,
            retraction: Retraction::Qr,
            seed: 0,
            quad_points: DEFAULT_QUAD_POINTS,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub angle_max: f64,
    pub vtv_dev: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<OptRecord>,
}

impl OptTrace {
    pub const CSV_HEADER: &'static str = "iter,loss,grad_norm,angle_max,vtv_dev";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&OptRecord> {
        self.records.last()
    }

    /// Header row, then one row per record.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.iter, r.loss, r.grad_norm, r.angle_max, r.vtv_dev)?;
        }
        Ok(())
    }
}

/// Euclidean gradient of the closed-form loss.
pub fn euclidean_gradient(
    m: &LinearModel,
    p: &GeneratorParams,
    s: &NoiseSchedule,
) -> Result<(Mat, Mat)> {
    p.check_feasible()?;
    Ok(FisherLoss::new(m.clone(), *s, DEFAULT_QUAD_POINTS)?.gradient(p))
}

/// Projects `dU` onto the tangent space at `U`: `dU − U·sym(UᵀdU)`.
pub fn tangent_projection(u: &Mat, du: &Mat) -> Mat {
    let sym = u.t_matmul(du).symmetrized();
    du - &u.matmul(&sym)
}

/// Riemannian gradient `(ξ_U, ∂L/∂V)`.
pub fn riemannian_gradient(p: &GeneratorParams, grads: &(Mat, Mat)) -> (Mat, Mat) {
    (tangent_projection(&p.u, &grads.0), grads.1.clone())
}

pub fn gradient_norm(g: &(Mat, Mat)) -> f64 {
    (g.0.frobenius_sq() + g.1.frobenius_sq()).sqrt()
}

/// Maps `U + ξ` back onto the manifold. A zero tangent returns `U` as is.
pub fn retract(u: &Mat, xi: &Mat, kind: Retraction) -> Result<Mat> {
    if xi.as_slice().iter().all(|x| *x == 0.0) {
        return Ok(u.clone());
    }
    let moved = u + xi;
    match kind {
        Retraction::Qr => Ok(thin_qr(&moved)?.0),
        Retraction::Polar => polar_factor(&moved),
    }
}

/// Result of one accepted descent step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub params: GeneratorParams,
    /// Objective value, up to the parameter-independent constant.
    pub objective: f64,
    /// Accepted step sizes for the `U` and `V` blocks; zero for a block
    /// that did not move.
    pub steps: (f64, f64),
}

/// Backtracks from `t` until the Armijo condition holds. `None` once the
/// step underflows.
fn armijo(
    f0: f64,
    slope: f64,
    mut t: f64,
    mut eval: impl FnMut(f64) -> Result<Option<(GeneratorParams, f64)>>,
) -> Result<Option<(GeneratorParams, f64, f64)>> {
    while t >= MIN_STEP {
        if let Some((cand, f1)) = eval(t)? {
            if f1 <= f0 - ARMIJO_C1 * t * slope {
                return Ok(Some((cand, f1, t)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

/// One descent step: a retracted, Armijo-backtracked move of `U` along the
/// negative Riemannian gradient, then a backtracked move of `V` along its
/// freshly evaluated gradient. The blocks keep separate step sizes because
/// their curvatures differ by orders of magnitude when `σ_min` is small.
pub fn riemannian_step(
    loss: &FisherLoss,
    p: &GeneratorParams,
    rgrad: &(Mat, Mat),
    steps: (f64, f64),
    retraction: Retraction,
) -> Result<StepOutcome> {
    let f0 = loss.variable_part(p);
    let gu2 = rgrad.0.frobenius_sq();
    let gv2 = rgrad.1.frobenius_sq();
    if gu2 == 0.0 && gv2 == 0.0 {
        return Ok(StepOutcome {
            params: p.clone(),
            objective: f0,
            steps: (0.0, 0.0),
        });
    }

    let (mut cur, mut f_cur, mut tu) = (p.clone(), f0, 0.0);
    if gu2 > 0.0 {
        let moved = armijo(f0, gu2, steps.0, |t| {
            let u = retract(&p.u, &rgrad.0.scale(-t), retraction)?;
            let cand = GeneratorParams { u, v: p.v.clone() };
            let f1 = loss.variable_part(&cand);
            Ok(Some((cand, f1)))
        })?;
        if let Some((cand, f1, t)) = moved {
            (cur, f_cur, tu) = (cand, f1, t);
        }
    }

    let dv = if tu > 0.0 { loss.gradient(&cur).1 } else { rgrad.1.clone() };
    let gv2 = dv.frobenius_sq();
    let mut tv = 0.0;
    if gv2 > 0.0 {
        let base = cur.clone();
        let moved = armijo(f_cur, gv2, steps.1, |t| {
            let mut v = base.v.clone();
            v.axpy(-t, &dv);
            let cand = GeneratorParams { u: base.u.clone(), v };
            if cand.min_vtv_eigenvalue() < VTV_BARRIER {
                return Ok(None);
            }
            let f1 = loss.variable_part(&cand);
            Ok(Some((cand, f1)))
        })?;
        if let Some((cand, f1, t)) = moved {
            (cur, f_cur, tv) = (cand, f1, t);
        }
    }

    if tu == 0.0 && tv == 0.0 {
        return Err(Error::StalledOptimization {
            iter: 0,
            min_step: MIN_STEP,
            trace: OptTrace::default(),
        });
    }
    Ok(StepOutcome {
        params: cur,
        objective: f_cur,
        steps: (tu, tv),
    })
}

/// Feasible starting point: `U` from the QR of a seeded Gaussian matrix and
/// `V = U`.
pub fn random_init(d: usize, r: usize, seed: u64) -> GeneratorParams {
    let mut rng = SeedStream::new(seed);
    let u = random_orthonormal(d, r, &mut rng);
    GeneratorParams {
        v: u.clone(),
        u,
    }
}

#[derive(Clone, Debug)]
pub struct OptResult {
    pub params: GeneratorParams,
    pub trace: OptTrace,
    /// Whether the gradient tolerance was met within `max_iters`.
    pub converged: bool,
}

impl OptResult {
    /// Whether the final iterate sits in the minimizer family within the
    /// given angle and `VᵀV` tolerances.
    pub fn reached_minimizer(&self, angle_tol: f64, vtv_tol: f64) -> bool {
        self.trace
            .last()
            .is_some_and(|r| r.angle_max <= angle_tol && r.vtv_dev <= vtv_tol)
    }
}

/// Runs descent until the gradient tolerance is met or `max_iters` is hit.
/// Every iterate, including the initial point, is recorded in the trace.
pub fn optimize(
    m: &LinearModel,
    p0: &GeneratorParams,
    s: &NoiseSchedule,
    cfg: &OptConfig,
) -> Result<OptResult> {
    cfg.validate()?;
    p0.check_feasible()?;
    let loss = FisherLoss::new(m.clone(), *s, cfg.quad_points)?;
    let mut p = p0.clone();
    let mut trace = OptTrace::default();
    let mut steps = (cfg.step_size, cfg.step_size);
    for iter in 0..=cfg.max_iters {
        let rgrad = riemannian_gradient(&p, &loss.gradient(&p));
        let gnorm = gradient_norm(&rgrad);
        trace.records.push(OptRecord {
            iter,
            loss: loss.value_unconstrained(&p),
            grad_norm: gnorm,
            angle_max: max_principal_angle(m, &p)?,
            vtv_dev: vtv_deviation(m, &p),
        });
        if gnorm <= cfg.grad_tol {
            return Ok(OptResult {
                params: p,
                trace,
                converged: true,
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        match riemannian_step(&loss, &p, &rgrad, steps, cfg.retraction) {
            Ok(out) => {
                p = out.params;
                let grow = |t: f64| if t > 0.0 { 2.0 * t } else { cfg.step_size };
                steps = (grow(out.steps.0), grow(out.steps.1));
            }
            Err(Error::StalledOptimization { min_step, .. }) => {
                return Err(Error::StalledOptimization {
                    iter,
                    min_step,
                    trace,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(OptResult {
        params: p,
        trace,
        converged: false,
    })
}
