//! The linear-theory battery behind `dsd verify`.
//!
//! Each check compares a library result against an independent oracle and
//! yields one report row. The run fails if any row fails.

use anyhow::{Context, Result};

use dsd_core::gaussian::{w2_commuting, LowRankGaussian};
use dsd_core::linalg::{inverse, random_orthonormal};
use dsd_core::metrics::frechet_gaussian;
use dsd_core::schedule::NoiseSchedule;
use dsd_core::stiefel::{optimize, random_init, riemannian_gradient, gradient_norm};
use dsd_core::theory::{
    aligned_trace, analytic_minimizer, f_sigma, loss_closed_form, loss_monte_carlo, minimize_f_sigma,
    trace_maximizer_check, wasserstein_report, FisherLoss, GeneratorParams, LinearModel,
};
use dsd_core::{Mat, SeedStream};

use crate::config::{Stream, TheorySection, ExperimentConfig};

/// Descent runs must end this close to the minimizer family.
pub const DESCENT_ANGLE_TOL: f64 = 1e-3;
pub const DESCENT_VTV_TOL: f64 = 1e-3;
/// Closed form and Monte Carlo must agree within this many standard errors.
pub const MC_Z_TOL: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub case: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub const CSV_HEADER: &'static str = "check,case,value,reference,tolerance,pass";

    /// Passes when `|value − reference| ≤ tolerance`.
    fn close(name: &'static str, case: String, value: f64, reference: f64, tolerance: f64) -> Self {
        let pass = (value - reference).abs() <= tolerance;
        Self { name, case, value, reference, tolerance, pass }
    }

    /// Passes when `value ≤ reference + tolerance`.
    fn at_most(name: &'static str, case: String, value: f64, reference: f64, tolerance: f64) -> Self {
        let pass = value <= reference + tolerance;
        Self { name, case, value, reference, tolerance, pass }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.name,
            self.case,
            self.value,
            self.reference,
            self.tolerance,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

/// One descent run of the multi-seed study.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentRun {
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub angle_max: f64,
    pub vtv_dev: f64,
    pub loss_excess: f64,
    pub reached: bool,
}

impl DescentRun {
    pub const CSV_HEADER: &'static str = "seed,iterations,converged,angle_max,vtv_dev,loss_excess,reached";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.seed, self.iterations, self.converged, self.angle_max, self.vtv_dev, self.loss_excess, self.reached
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Battery {
    pub checks: Vec<Check>,
    pub descent: Vec<DescentRun>,
}

impl Battery {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

fn case(d: usize, r: usize, sigma: f64) -> String {
    format!("d={d} r={r} sigma={sigma}")
}

/// The model under test. An explicit frame that is not orthonormal is a
/// configuration error, not a failed check.
pub fn primary_model(t: &TheorySection, rng: &mut SeedStream) -> Result<LinearModel> {
    match &t.frame {
        Some(rows) => {
            let e = Mat::from_rows(rows).context("theory.frame is not a rectangular matrix")?;
            anyhow::ensure!(
                e.rows() == t.d && e.cols() == t.r,
                "theory.frame is {}×{}, expected {}×{}",
                e.rows(),
                e.cols(),
                t.d,
                t.r
            );
            LinearModel::new(e, t.sigma).context("theory.frame is unusable")
        }
        None => Ok(LinearModel::random(t.d, t.r, t.sigma, rng)?),
    }
}

/// Independent groups of checks; [`run_battery`] runs all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    /// Closed-form minimizer, its Wasserstein gap and the scalar `f_σ`.
    Minimizers,
    /// Multi-seed Stiefel descent from random starts.
    Descent,
    /// Closed-form loss against Monte Carlo.
    MonteCarlo,
    /// Structured inverse, commuting `W₂` and the trace inequality.
    Lemmas,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Minimizers, Part::Descent, Part::MonteCarlo, Part::Lemmas];
}

pub fn run_battery(cfg: &ExperimentConfig) -> Result<Battery> {
    let mut out = Battery::default();
    for part in Part::ALL {
        run_part(cfg, part, &mut out)?;
    }
    Ok(out)
}

/// Appends the rows of one part. Each part draws from its own stream, so
/// running a part alone gives the same rows as the full battery.
pub fn run_part(cfg: &ExperimentConfig, part: Part, out: &mut Battery) -> Result<()> {
    let t = &cfg.theory;
    let root = SeedStream::new(cfg.sub_seed(Stream::Theory));
    let primary = primary_model(t, &mut root.split(1))?;
    match part {
        Part::Minimizers => {
            let mut models = vec![primary];
            for (k, &(d, r, sigma)) in t.extra_cases.iter().enumerate() {
                models.push(LinearModel::random(d, r, sigma, &mut root.split(100 + k as u64))?);
            }
            for (k, m) in models.iter().enumerate() {
                minimizer_checks(m, &t.schedule, t.quad_points, &mut root.split(200 + k as u64), &mut out.checks)?;
            }
            Ok(())
        }
        Part::Descent => descent_checks(&primary, t, &root.split(2), out),
        Part::MonteCarlo => monte_carlo_checks(t, &root.split(3), &mut out.checks),
        Part::Lemmas => lemma_checks(t, &root.split(4), &mut out.checks),
    }
}

fn minimizer_checks(
    m: &LinearModel,
    s: &NoiseSchedule,
    quad_points: usize,
    rng: &mut SeedStream,
    out: &mut Vec<Check>,
) -> Result<()> {
    let (d, r, sigma) = (m.dim(), m.rank(), m.sigma());
    let name = case(d, r, sigma);
    let q = random_orthonormal(r, r, rng);
    let p = analytic_minimizer(m, &q)?;
    let w2 = wasserstein_report(m, &p)?;
    let expected_gap = (d - r) as f64 * sigma * sigma;
    out.push(Check::close("w2_gap", name.clone(), w2.gap, expected_gap, 1e-9));

    let loss = FisherLoss::new(m.clone(), *s, quad_points)?;
    let grad = gradient_norm(&riemannian_gradient(&p, &loss.gradient(&p)));
    out.push(Check::at_most("minimizer_stationary", name.clone(), grad, 0.0, 1e-8));

    let target = 1.0 + sigma * sigma;
    let u_star = minimize_f_sigma(sigma, s, quad_points, 10.0 * target)?;
    out.push(Check::close("f_sigma_argmin", name.clone(), u_star, target, 1e-6));

    // Central second differences on a grid bracketing the minimizer.
    let h = 1e-3 * target;
    let mut min_curv = f64::INFINITY;
    for k in 1..=40 {
        let u = target * k as f64 / 10.0;
        let f = |x: f64| f_sigma(x, sigma, s, quad_points);
        let c = (f(u + h)? - 2.0 * f(u)? + f(u - h)?) / (h * h);
        min_curv = min_curv.min(c);
    }
    out.push(Check {
        name: "f_sigma_convex",
        case: name,
        value: min_curv,
        reference: 0.0,
        tolerance: 0.0,
        pass: min_curv > 0.0,
    });
    Ok(())
}

fn descent_checks(m: &LinearModel, t: &TheorySection, root: &SeedStream, out: &mut Battery) -> Result<()> {
    let name = case(m.dim(), m.rank(), m.sigma());
    let minimizer = analytic_minimizer(m, &Mat::identity(m.rank()))?;
    let best = loss_closed_form(m, &minimizer, &t.schedule, t.quad_points)?;
    let mut reached = 0;
    for k in 0..t.opt_seeds {
        let seed = root.split(k as u64).key();
        let cfg = t.opt_config(seed);
        let p0 = random_init(m.dim(), m.rank(), seed);
        // A stalled line search counts as a failed run, not an error.
        let run = match optimize(m, &p0, &t.schedule, &cfg) {
            Ok(r) => r,
            Err(dsd_core::Error::StalledOptimization { .. }) => {
                out.descent.push(DescentRun {
                    seed,
                    iterations: 0,
                    converged: false,
                    angle_max: f64::NAN,
                    vtv_dev: f64::NAN,
                    loss_excess: f64::NAN,
                    reached: false,
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let last = run.trace.last().expect("trace holds the initial point");
        let ok = run.reached_minimizer(DESCENT_ANGLE_TOL, DESCENT_VTV_TOL);
        reached += ok as usize;
        out.descent.push(DescentRun {
            seed,
            iterations: last.iter,
            converged: run.converged,
            angle_max: last.angle_max,
            vtv_dev: last.vtv_dev,
            loss_excess: loss_closed_form(m, &run.params, &t.schedule, t.quad_points)? - best,
            reached: ok,
        });
    }
    out.checks.push(Check {
        name: "descent_success",
        case: name.clone(),
        value: reached as f64,
        reference: t.opt_required as f64,
        tolerance: 0.0,
        pass: reached >= t.opt_required,
    });

    let warm = optimize(m, &minimizer, &t.schedule, &t.opt_config(0))?;
    let iters = warm.trace.last().map_or(0, |r| r.iter);
    out.checks.push(Check {
        name: "warm_start_iterations",
        case: name,
        value: iters as f64,
        reference: 2.0,
        tolerance: 0.0,
        pass: warm.converged && iters <= 2,
    });
    Ok(())
}

fn random_params(d: usize, r: usize, rng: &mut SeedStream) -> Result<GeneratorParams> {
    let u = random_orthonormal(d, r, rng);
    let v = rng.normal_mat(d, r).scale(0.7);
    Ok(GeneratorParams::new(u, v)?)
}

fn monte_carlo_checks(t: &TheorySection, root: &SeedStream, out: &mut Vec<Check>) -> Result<()> {
    for k in 0..t.mc_instances {
        let mut rng = root.split(k as u64);
        let d = 2 + rng.index(7);
        let r = 1 + rng.index((d - 1).min(3));
        let sigma = rng.uniform_open();
        let m = LinearModel::random(d, r, sigma, &mut rng)?;
        let p = random_params(d, r, &mut rng)?;
        let exact = loss_closed_form(&m, &p, &t.schedule, t.quad_points)?;
        let mc = loss_monte_carlo(&m, &p, &t.schedule, t.mc_samples, &mut rng)?;
        let z = (mc.estimate - exact).abs() / mc.stderr;
        out.push(Check::at_most("loss_monte_carlo_z", format!("#{k} {}", case(d, r, sigma)), z, 0.0, MC_Z_TOL));
    }
    Ok(())
}

fn lemma_checks(t: &TheorySection, root: &SeedStream, out: &mut Vec<Check>) -> Result<()> {
    let n = t.lemma_instances;
    let (mut woodbury, mut bures, mut bound) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut maximizers = 0;
    for k in 0..n {
        let mut rng = root.split(k as u64);
        let d = 1 + rng.index(20);
        let r = 1 + rng.index(d);
        let f = random_orthonormal(d, r, &mut rng);
        let spike = 5.0 * rng.uniform_open();
        let floor = 0.1 + 2.0 * rng.uniform_open();
        let g = LowRankGaussian::new(f.clone(), spike, floor)?;
        let structured = g.structured_inverse()?.dense();
        woodbury = woodbury.max(structured.max_abs_diff(&inverse(&g.covariance())?));

        // A second law with the same factor commutes with the first.
        let h = LowRankGaussian::new(f.clone(), 5.0 * rng.uniform_open(), 2.0 * rng.uniform_open())?;
        let zero = vec![0.0; d];
        let oracle = frechet_gaussian(&zero, &g.covariance(), &zero, &h.covariance())?;
        bures = bures.max((w2_commuting(&g, &h)? - oracle).abs());

        let sig = Mat::diag(&(0..r).map(|_| 0.1 + rng.uniform_open()).collect::<Vec<_>>());
        let u = random_orthonormal(d, r, &mut rng);
        bound = bound.max(aligned_trace(&f, &sig, &u)? - sig.trace());
        let q = random_orthonormal(r, r, &mut rng);
        maximizers += trace_maximizer_check(&f, &sig, &f.matmul(&q))? as usize;
    }
    let label = format!("{n} instances");
    out.push(Check::at_most("woodbury_vs_dense_inverse", label.clone(), woodbury, 0.0, 1e-10));
    out.push(Check::at_most("w2_commuting_vs_bures", label.clone(), bures, 0.0, 1e-9));
    out.push(Check::at_most("aligned_trace_bound", label.clone(), bound.max(0.0), 0.0, 1e-10));
    out.push(Check {
        name: "aligned_trace_maximizers",
        case: label,
        value: maximizers as f64,
        reference: n as f64,
        tolerance: 0.0,
        pass: maximizers == n,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentKind;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ExperimentKind::Verify, 5);
        cfg.theory.opt_seeds = 3;
        cfg.theory.opt_required = 3;
        cfg.theory.mc_instances = 2;
        cfg.theory.mc_samples = 5_000;
        cfg.theory.lemma_instances = 10;
        cfg
    }

    #[test]
    fn small_battery_passes() {
        let b = run_battery(&small()).unwrap();
        assert!(b.passed(), "{:?}", b.failures());
        assert_eq!(b.descent.len(), 3);
        assert_eq!(b.checks.iter().filter(|c| c.name == "w2_gap").count(), 3);
    }

    #[test]
    fn zero_noise_gives_zero_gaps() {
        let mut cfg = small();
        cfg.theory.sigma = 0.0;
        cfg.theory.extra_cases = vec![(5, 2, 0.0)];
        let b = run_battery(&cfg).unwrap();
        let gaps: Vec<f64> = b.checks.iter().filter(|c| c.name == "w2_gap").map(|c| c.value).collect();
        assert_eq!(gaps.len(), 2);
        assert!(gaps.iter().all(|g| g.abs() <= 1e-9), "{gaps:?}");
        assert!(b.passed(), "{:?}", b.failures());
    }

    #[test]
    fn corrupted_frame_is_a_config_error() {
        let mut cfg = small();
        cfg.theory.d = 3;
        cfg.theory.r = 1;
        cfg.theory.frame = Some(vec![vec![1.0], vec![1.0], vec![0.0]]);
        assert!(run_battery(&cfg).is_err());
    }

    #[test]
    fn rows_match_the_header() {
        let c = Check::close("x", "y".into(), 1.0, 1.0, 0.0);
        assert!(c.pass);
        assert_eq!(c.csv_row().split(',').count(), Check::CSV_HEADER.split(',').count());
        assert!(!Check::at_most("x", "y".into(), 2.0, 1.0, 0.5).pass);
    }
}
