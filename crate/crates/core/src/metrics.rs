//! Moment-based sample quality: Fréchet distance between fitted Gaussians,
//! its re-corrupted variant usable without clean data, and checkpoint
//! selection.
//!
//! Everything operates on raw coordinates. At toy scale there is no feature
//! network, so "FID" here means the Fréchet distance of the first two
//! moments of the point clouds themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::fit_gaussian;
use crate::linalg::{sym_sqrt, symmetric_eigen, Mat};
use crate::rng::SeedStream;

/// Covariances may be indefinite by at most this much.
pub const PSD_TOL: f64 = 1e-8;
/// Fewest rows accepted by the sample-based metrics.
pub const MIN_METRIC_SAMPLES: usize = 100;

fn check_psd(c: &Mat, which: &str) -> Result<()> {
    if c.asymmetry() > PSD_TOL {
        return Err(Error::Domain(format!("{which} covariance is not symmetric")));
    }
    let eig = symmetric_eigen(&c.symmetrized())?;
    match eig.values.last() {
        Some(&min) if min < -PSD_TOL => Err(Error::Domain(format!(
            "{which} covariance is indefinite (smallest eigenvalue {min:e})"
        ))),
        _ => Ok(()),
    }
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_gaussian(mu1: &[f64], cov1: &Mat, mu2: &[f64], cov2: &Mat) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu2.len(),
        });
    }
    for c in [cov1, cov2] {
        if c.rows() != d || c.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: c.rows(),
            });
        }
    }
    check_psd(cov1, "first")?;
    check_psd(cov2, "second")?;
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let r1 = sym_sqrt(&cov1.symmetrized(), PSD_TOL)?;
    let inner = r1.matmul(cov2).matmul(&r1).symmetrized();
    let cross = sym_sqrt(&inner, PSD_TOL)?;
    let total = mean_term + cov1.trace() + cov2.trace() - 2.0 * cross.trace();
    Ok(total.max(0.0))
}

fn check_samples(x: &Mat) -> Result<()> {
    if x.rows() < MIN_METRIC_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_METRIC_SAMPLES,
            got: x.rows(),
        });
    }
    Ok(())
}

/// Mean and covariance of a distribution, exact or fitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl Moments {
    /// Fitted moments of at least [`MIN_METRIC_SAMPLES`] points.
    pub fn fit(samples: &Mat) -> Result<Self> {
        check_samples(samples)?;
        let (mean, cov) = fit_gaussian(samples)?;
        Ok(Self { mean, cov })
    }

    pub fn frechet(&self, other: &Moments) -> Result<f64> {
        frechet_gaussian(&self.mean, &self.cov, &other.mean, &other.cov)
    }
}

/// Fréchet distance between the Gaussians fitted to two point clouds.
pub fn frechet_samples(a: &Mat, b: &Mat) -> Result<f64> {
    check_samples(a)?;
    check_samples(b)?;
    let (m1, c1) = fit_gaussian(a)?;
    let (m2, c2) = fit_gaussian(b)?;
    frechet_gaussian(&m1, &c1, &m2, &c2)
}

/// Re-corrupts generated points with `σ̂`-noise and compares them to the
/// noisy reference. Needs no clean data.
pub fn proximal_fid(gen_samples: &Mat, sigma_hat: f64, noisy_reference: &Mat, rng: &mut SeedStream) -> Result<f64> {
    if !(sigma_hat >= 0.0 && sigma_hat.is_finite()) {
        return Err(Error::Domain(format!("sigma_hat must be >= 0, got {sigma_hat}")));
    }
    check_samples(gen_samples)?;
    check_samples(noisy_reference)?;
    let mut corrupted = gen_samples.clone();
    if sigma_hat > 0.0 {
        for v in corrupted.as_mut_slice() {
            *v += sigma_hat * rng.normal();
        }
    }
    frechet_samples(&corrupted, noisy_reference)
}

/// One evaluated checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub step: usize,
    pub proximal_fid: f64,
    /// Fréchet distance to clean data, when the harness has it.
    pub frechet_clean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub step: usize,
    pub proximal_fid: f64,
    pub frechet_at_selected: Option<f64>,
    /// Smallest clean Fréchet distance anywhere in the history.
    pub frechet_min: Option<f64>,
}

impl Selection {
    /// `(selected − best)/best`; `None` without clean scores.
    pub fn relative_gap(&self) -> Option<f64> {
        match (self.frechet_at_selected, self.frechet_min) {
            (Some(s), Some(m)) if m > 0.0 => Some((s - m) / m),
            (Some(s), Some(m)) => Some(if s == m { 0.0 } else { f64::INFINITY }),
            _ => None,
        }
    }
}

/// Argmin of proximal FID; ties go to the earliest entry.
pub fn select_best_checkpoint(history: &[CheckpointScore]) -> Result<Selection> {
    let mut best: Option<usize> = None;
    for (i, h) in history.iter().enumerate() {
        if !h.proximal_fid.is_finite() {
            continue;
        }
        match best {
            Some(b) if history[b].proximal_fid <= h.proximal_fid => {}
            _ => best = Some(i),
        }
    }
    let index = best.ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let frechet_min = history
        .iter()
        .filter_map(|h| h.frechet_clean)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
    let sel = &history[index];
    Ok(Selection {
        index,
        step: sel.step,
        proximal_fid: sel.proximal_fid,
        frechet_at_selected: sel.frechet_clean,
        frechet_min,
    })
}

/// Ranks starting at 1 with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: a.len() });
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("rank correlation of a constant sequence".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Summary of one set of generated samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet_to_clean: f64,
    pub proximal_fid: f64,
    /// Square root of `frechet_to_clean`: the W2 distance of the fits.
    pub w2_gaussian_fit: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet_to_clean,proximal_fid,w2_gaussian_fit,n_samples,seed";

    /// Scores `samples` against clean moments and, via proximal FID, against
    /// the noisy reference.
    pub fn evaluate(samples: &Mat, clean: &Moments, noisy: &Mat, sigma_hat: f64, seed: u64) -> Result<Self> {
        let frechet_to_clean = Moments::fit(samples)?.frechet(clean)?;
        let proximal_fid = proximal_fid(samples, sigma_hat, noisy, &mut SeedStream::new(seed))?;
        Ok(Self {
            frechet_to_clean,
            proximal_fid,
            w2_gaussian_fit: frechet_to_clean.sqrt(),
            n_samples: samples.rows(),
            seed,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.frechet_to_clean, self.proximal_fid, self.w2_gaussian_fit, self.n_samples, self.seed
        )
    }
}
