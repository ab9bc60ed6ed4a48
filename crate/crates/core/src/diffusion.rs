//! Denoiser training on (possibly noisy) data and the reverse sampler.
//!
//! Two objectives share one noise draw per sample (`σ_t` first, then the
//! Gaussian vector `ε`):
//!
//! * standard: `‖f(x + σ_t ε, σ_t) − x‖²`;
//! * ambient: for observations `y` already carrying noise of level `σ̂`,
//!   `σ' = max(σ̂, σ_t)`, `x_t = y + √(σ'² − σ̂²)·ε` and
//!   `‖a·f(x_t, σ') + b·x_t − y‖²` with `a = (σ'² − σ̂²)/σ'²`, `b = σ̂²/σ'²`.
//!   Its minimizer is the clean posterior mean, and it coincides with the
//!   standard objective when `σ̂ = 0`.

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::Denoiser;
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Standard,
    Ambient,
}

/// Per-sample loss weight as a function of the (clipped) noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossWeighting {
    Uniform,
    /// `(σ² + σ_d²)/(σ·σ_d)²`.
    Edm { sigma_data: f64 },
}

impl LossWeighting {
    #[inline]
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::Edm { sigma_data: sd } => (sigma * sigma + sd * sd) / (sigma * sd).powi(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub schedule: NoiseSchedule,
    /// Assumed corruption level of the training data.
    pub sigma_hat: f64,
    pub weighting: LossWeighting,
    /// Linear decay of the learning rate to `lr·lr_final_fraction`.
    #[serde(default = "one")]
    pub lr_final_fraction: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-3,
            steps: 1000,
            schedule: NoiseSchedule::default(),
            sigma_hat: 0.0,
            weighting: LossWeighting::Uniform,
            lr_final_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.sigma_hat >= 0.0 && self.sigma_hat.is_finite()) {
            return Err(Error::Config(format!("sigma_hat must be >= 0, got {}", self.sigma_hat)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate at step `k` of `steps`.
    pub fn lr_at(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let frac = k as f64 / (self.steps - 1) as f64;
        self.lr * (1.0 - frac * (1.0 - self.lr_final_fraction))
    }
}

/// Noise levels and Gaussian vectors for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub sigmas: Vec<f64>,
    pub eps: Mat,
}

impl NoiseDraw {
    /// Per row: `σ_t` from the schedule, then one normal per coordinate.
    pub fn sample(n: usize, dim: usize, s: &NoiseSchedule, rng: &mut SeedStream) -> Self {
        let mut sigmas = Vec::with_capacity(n);
        let mut eps = Mat::zeros(n, dim);
        for i in 0..n {
            sigmas.push(s.sample_sigma(rng));
            for v in eps.row_mut(i) {
                *v = rng.normal();
            }
        }
        Self { sigmas, eps }
    }
}

/// Batch loss, its parameter gradient and the per-sample terms.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub per_sample: Vec<f64>,
}

fn finish(den: &Denoiser, tape: &crate::nn::DenoiseTape, upstream: &Mat, per_sample: Vec<f64>) -> LossEval {
    let (grads, _) = den.backward(tape, upstream);
    let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    LossEval {
        loss,
        grads,
        per_sample,
    }
}

/// `mean_i w(σ_i)·‖f(x_i + σ_i ε_i, σ_i) − x_i‖²` for a fixed noise draw.
pub fn standard_loss_with(den: &Denoiser, batch: &Mat, draw: &NoiseDraw, weighting: LossWeighting) -> Result<LossEval> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut xt = batch.clone();
    for i in 0..n {
        let s = draw.sigmas[i];
        for (x, e) in xt.row_mut(i).iter_mut().zip(draw.eps.row(i)) {
            *x += s * e;
        }
    }
    let (f, tape) = den.denoise_tape(&xt, &draw.sigmas)?;
    let mut upstream = Mat::zeros(n, batch.cols());
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let w = weighting.weight(draw.sigmas[i]);
        let mut sq = 0.0;
        for ((u, fv), x) in upstream.row_mut(i).iter_mut().zip(f.row(i)).zip(batch.row(i)) {
            let r = fv - x;
            sq += r * r;
            *u = 2.0 * w * r / n as f64;
        }
        per_sample.push(w * sq);
    }
    Ok(finish(den, &tape, &upstream, per_sample))
}

pub fn standard_diffusion_loss(
    den: &Denoiser,
    batch: &Mat,
    s: &NoiseSchedule,
    weighting: LossWeighting,
    rng: &mut SeedStream,
) -> Result<LossEval> {
    let draw = NoiseDraw::sample(batch.rows(), batch.cols(), s, rng);
    standard_loss_with(den, batch, &draw, weighting)
}

/// Ambient objective on noisy observations for a fixed noise draw.
pub fn ambient_loss_with(
    den: &Denoiser,
    batch: &Mat,
    sigma_hat: f64,
    draw: &NoiseDraw,
    weighting: LossWeighting,
) -> Result<LossEval> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !(sigma_hat >= 0.0) {
        return Err(Error::Domain(format!("sigma_hat must be >= 0, got {sigma_hat}")));
    }
    let sh2 = sigma_hat * sigma_hat;
    let clipped: Vec<f64> = draw.sigmas.iter().map(|s| s.max(sigma_hat)).collect();
    let mut xt = batch.clone();
    for i in 0..n {
        let scale = (clipped[i] * clipped[i] - sh2).sqrt();
        for (x, e) in xt.row_mut(i).iter_mut().zip(draw.eps.row(i)) {
            *x += scale * e;
        }
    }
    let (f, tape) = den.denoise_tape(&xt, &clipped)?;
    let mut upstream = Mat::zeros(n, batch.cols());
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let s2 = clipped[i] * clipped[i];
        let a = (s2 - sh2) / s2;
        let b = sh2 / s2;
        let w = weighting.weight(clipped[i]);
        let mut sq = 0.0;
        let rows = upstream.row_mut(i).iter_mut().zip(f.row(i)).zip(xt.row(i)).zip(batch.row(i));
        for (((u, fv), xv), y) in rows {
            let r = a * fv + b * xv - y;
            sq += r * r;
            *u = 2.0 * w * r * a / n as f64;
        }
        per_sample.push(w * sq);
    }
    Ok(finish(den, &tape, &upstream, per_sample))
}

pub fn ambient_tweedie_loss(
    den: &Denoiser,
    batch: &Mat,
    sigma_hat: f64,
    s: &NoiseSchedule,
    weighting: LossWeighting,
    rng: &mut SeedStream,
) -> Result<LossEval> {
    let draw = NoiseDraw::sample(batch.rows(), batch.cols(), s, rng);
    ambient_loss_with(den, batch, sigma_hat, &draw, weighting)
}

/// Rows of `data` chosen uniformly with replacement.
pub fn minibatch(data: &Mat, size: usize, rng: &mut SeedStream) -> Mat {
    let mut out = Mat::zeros(size, data.cols());
    for i in 0..size {
        let j = rng.index(data.rows());
        out.row_mut(i).copy_from_slice(data.row(j));
    }
    out
}

/// Adam training of `den` on `data`. Returns the trained network and the
/// per-step batch losses.
pub fn pretrain(den: &Denoiser, data: &Mat, cfg: &TrainConfig, mode: TrainMode) -> Result<(Denoiser, Vec<f64>)> {
    let run = pretrain_run(den, data, cfg, mode)?;
    match run.divergence {
        Some((step, loss)) => Err(Error::Divergence { step, loss }),
        None => Ok((run.net, run.curve)),
    }
}

/// Outcome of a pretraining run that may have stopped early.
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Final net, or the last net with a finite, bounded loss.
    pub net: Denoiser,
    pub curve: Vec<f64>,
    /// Step and loss that tripped the divergence check.
    pub divergence: Option<(usize, f64)>,
}

/// Like [`pretrain`], but keeps the last healthy net when the loss blows up.
pub fn pretrain_run(den: &Denoiser, data: &Mat, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainRun> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut net = den.clone();
    let mut healthy = net.clone();
    let mut opt = Adam::new(net.net.param_count(), cfg.lr);
    let mut rng = SeedStream::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = minibatch(data, cfg.batch_size, &mut rng);
        let eval = match mode {
            TrainMode::Standard => standard_diffusion_loss(&net, &batch, &cfg.schedule, cfg.weighting, &mut rng)?,
            TrainMode::Ambient => {
                ambient_tweedie_loss(&net, &batch, cfg.sigma_hat, &cfg.schedule, cfg.weighting, &mut rng)?
            }
        };
        if !eval.loss.is_finite() || eval.loss > DIVERGENCE_THRESHOLD {
            return Ok(TrainRun {
                net: healthy,
                curve,
                divergence: Some((step, eval.loss)),
            });
        }
        // `net` just produced a sane loss, so it is the fallback from here on.
        healthy.net.params_mut().copy_from_slice(net.net.params());
        curve.push(eval.loss);
        opt.lr = cfg.lr_at(step);
        opt.step(net.net.params_mut(), &eval.grads);
    }
    Ok(TrainRun {
        net,
        curve,
        divergence: None,
    })
}

/// Anything that maps a batch at a shared noise level to denoised means.
pub trait Denoise {
    fn denoise_at(&self, x: &Mat, sigma: f64) -> Result<Mat>;
}

impl Denoise for Denoiser {
    fn denoise_at(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        self.denoise(x, &vec![sigma; x.rows()])
    }
}

impl<F: Fn(&Mat, f64) -> Mat> Denoise for F {
    fn denoise_at(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        Ok(self(x, sigma))
    }
}

/// Exact posterior mean `EEᵀ(EEᵀ + σ²I)⁻¹x = EEᵀx/(1+σ²)` for clean data
/// `N(0, EEᵀ)` with orthonormal `E`.
#[derive(Clone, Debug)]
pub struct LinearPosteriorMean {
    pub frame: Mat,
}

impl Denoise for LinearPosteriorMean {
    fn denoise_at(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        let proj = x.matmul(&self.frame).matmul(&self.frame.transpose());
        Ok(proj.scale(1.0 / (1.0 + sigma * sigma)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Iterate down to `σ_min`.
    Full,
    /// Stop with the current denoised estimate once the next level drops
    /// below `σ̂`.
    Truncated,
}

/// Reverse sampler on the geometric grid `σ_min = σ_0 < … < σ_{T} = σ_max`:
/// `x_T ~ N(0, σ_max² I)`, `x_{k−1} = x_k − ((σ_k − σ_{k−1})/σ_k)(x_k − f(x_k, σ_k))`.
pub fn ambient_sample<D: Denoise + ?Sized>(
    den: &D,
    dim: usize,
    sigma_hat: f64,
    schedule: &NoiseSchedule,
    steps: usize,
    mode: SampleMode,
    n: usize,
    rng: &mut SeedStream,
) -> Result<Mat> {
    if steps < 2 {
        return Err(Error::Precondition(format!("sampling needs at least 2 levels, got {steps}")));
    }
    let grid = schedule.geometric_grid(steps);
    let top = grid[steps - 1];
    let mut x = rng.normal_mat(n, dim).scale(top);
    if n == 0 {
        return Ok(x);
    }
    for k in (1..steps).rev() {
        let (s, s_prev) = (grid[k], grid[k - 1]);
        let x0 = den.denoise_at(&x, s)?;
        if mode == SampleMode::Truncated && s_prev < sigma_hat {
            return Ok(x0);
        }
        let c = (s - s_prev) / s;
        for (xv, hv) in x.as_mut_slice().iter_mut().zip(x0.as_slice()) {
            *xv -= c * (*xv - hv);
        }
    }
    Ok(x)
}
