//! One-step generator distillation from a pretrained denoiser.
//!
//! Three networks take part. The teacher `f_φ` is frozen. The fake denoiser
//! `f_ψ` tracks the current generator distribution. The generator is
//! `G(z) = f_θ(σ_g·z, σ_g)`. Fake and generator both start as copies of the
//! teacher.
//!
//! Each loop iteration draws a fresh latent batch, corrupts the generated
//! points with `σ̂`-noise and takes one fake step. It then repeats the draw
//! and the corruption and takes one generator step. Fake steps use the same
//! objective as the teacher's pretraining (`mode`). Generator steps perturb
//! the corrupted point `ỹ` in standard mode and `x_g` in ambient mode.
//!
//! Stop-gradient boundaries: the teacher is always constant, the fake net is
//! constant inside generator steps and the generator inside fake steps.

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::diffusion::{
    ambient_tweedie_loss, standard_diffusion_loss, LossWeighting, NoiseDraw, TrainMode, DIVERGENCE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::metrics::{proximal_fid, CheckpointScore, Moments};
use crate::nn::{DenoiseTape, Denoiser};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;

/// Floor on the per-sample normalizer of the SiD-style weighting.
pub const WEIGHT_NORMALIZER_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMethod {
    /// `w·(ε_φ − ε)`; the fake net is never trained.
    Sds,
    /// `w·(s_ψ − s_φ)`.
    Dmd,
    /// Gradient of `(1−α)w‖f_ψ − f_φ‖² + w(f_φ − f_ψ)ᵀ(f_ψ − x)` through `x_t`.
    Sid,
}

/// The per-sample `w(t)` of the generator estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorWeighting {
    Constant,
    Sigma2,
    /// Converts the estimator to mean-prediction units (`σ_t` for SDS,
    /// `σ_t²` for DMD, `1` for SiD) and divides by the stop-gradient
    /// `mean_j |f_φ − x|_j`.
    SidNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: DistillMethod,
    /// Objective of the fake net; must match the teacher's pretraining.
    pub mode: TrainMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub fake_lr: f64,
    pub generator_lr: f64,
    /// Loop iterations `K`. Zero returns the freshly initialized state.
    pub steps: usize,
    pub batch_size: usize,
    pub sigma_hat: f64,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    /// Evaluate every this many iterations (and after the last one).
    pub eval_every: usize,
    #[serde(default = "default_weighting")]
    pub weighting: GeneratorWeighting,
    /// Loss weighting of the fake net; should match the teacher's.
    #[serde(default = "default_fake_weighting")]
    pub fake_weighting: LossWeighting,
    /// Noise level the generator pins; defaults to `schedule.sigma_max`.
    #[serde(default)]
    pub generator_sigma: Option<f64>,
    #[serde(default = "default_ratio")]
    pub fake_steps_per_generator_step: usize,
    /// Both learning rates decay linearly to this fraction over the run.
    #[serde(default = "default_lr_final_fraction")]
    pub lr_final_fraction: f64,
    /// Decay of the parameter average used for evaluation and export; zero
    /// disables averaging.
    #[serde(default)]
    pub ema_decay: f64,
}

fn default_alpha() -> f64 {
    1.2
}

fn default_weighting() -> GeneratorWeighting {
    GeneratorWeighting::SidNormalized
}

fn default_fake_weighting() -> LossWeighting {
    LossWeighting::Uniform
}

fn default_ratio() -> usize {
    1
}

fn default_lr_final_fraction() -> f64 {
    1.0
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: DistillMethod::Sid,
            mode: TrainMode::Ambient,
            alpha: default_alpha(),
            fake_lr: 1e-3,
            generator_lr: 1e-4,
            steps: 1000,
            batch_size: 256,
            sigma_hat: 0.0,
            schedule: NoiseSchedule::default(),
            seed: 0,
            eval_every: 100,
            weighting: default_weighting(),
            fake_weighting: default_fake_weighting(),
            generator_sigma: None,
            fake_steps_per_generator_step: default_ratio(),
            lr_final_fraction: default_lr_final_fraction(),
            ema_decay: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        for (name, lr) in [("fake_lr", self.fake_lr), ("generator_lr", self.generator_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.fake_steps_per_generator_step == 0 {
            return Err(Error::Config(
                "batch_size, eval_every and fake_steps_per_generator_step must be >= 1".into(),
            ));
        }
        if !(self.sigma_hat >= 0.0 && self.sigma_hat.is_finite()) {
            return Err(Error::Config(format!("sigma_hat must be >= 0, got {}", self.sigma_hat)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must lie in [0, 1]".into()));
        }
        if let Some(s) = self.generator_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("generator_sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn generator_sigma(&self) -> f64 {
        self.generator_sigma.unwrap_or(self.schedule.sigma_max)
    }

    /// Multiplier on both learning rates at iteration `k`.
    pub fn lr_factor(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            return 1.0;
        }
        let frac = k as f64 / (self.steps - 1) as f64;
        1.0 - frac * (1.0 - self.lr_final_fraction)
    }
}

/// `s = −(x_t − f)/σ²`.
pub fn score_from_mean(f: &[f64], x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if f.len() != x_t.len() {
        return Err(Error::DimensionMismatch {
            expected: x_t.len(),
            got: f.len(),
        });
    }
    let s2 = sigma * sigma;
    Ok(f.iter().zip(x_t).map(|(f, x)| -(x - f) / s2).collect())
}

/// `ε = −σ·s`.
pub fn eps_from_score(s: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    Ok(s.iter().map(|v| -sigma * v).collect())
}

/// `s = −ε/σ`, the inverse of [`eps_from_score`].
pub fn score_from_eps(eps: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    Ok(eps.iter().map(|e| -e / sigma).collect())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("noise level must be > 0, got {sigma}")))
    }
}

/// One-step generator `z ↦ f_θ(σ_g·z, σ_g)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub net: Denoiser,
    pub sigma: f64,
}

impl Generator {
    pub fn new(net: Denoiser, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self { net, sigma })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    fn input(&self, z: &Mat) -> (Mat, Vec<f64>) {
        (z.scale(self.sigma), vec![self.sigma; z.rows()])
    }

    pub fn generate(&self, z: &Mat) -> Result<Mat> {
        let (x, s) = self.input(z);
        self.net.denoise(&x, &s)
    }

    pub fn generate_tape(&self, z: &Mat) -> Result<(Mat, DenoiseTape)> {
        let (x, s) = self.input(z);
        self.net.denoise_tape(&x, &s)
    }

    /// Gradients of `Σ upstream ⊙ G(z)` with respect to the parameters and
    /// to `z`.
    pub fn backward(&self, tape: &DenoiseTape, upstream: &Mat) -> (Vec<f64>, Mat) {
        let (grads, gx) = self.net.backward(tape, upstream);
        (grads, gx.scale(self.sigma))
    }

    /// `n` samples from standard-normal latents.
    pub fn sample(&self, n: usize, rng: &mut SeedStream) -> Result<Mat> {
        let z = rng.normal_mat(n, self.dim());
        self.generate(&z)
    }
}

/// Coarse record of the loop body, kept only when requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopEvent {
    DrawLatent,
    Generate,
    Corrupt,
    UpdateFake,
    UpdateGenerator,
}

#[derive(Clone, Debug)]
pub struct DistillState {
    cfg: DistillConfig,
    teacher: Denoiser,
    teacher_hash: String,
    pub fake: Denoiser,
    pub generator: Generator,
    /// Parameter average of `generator`; equal to it when averaging is off.
    pub averaged: Generator,
    fake_opt: Adam,
    gen_opt: Adam,
    rng: SeedStream,
    step: usize,
    call_log: Option<Vec<LoopEvent>>,
}

/// Fake and generator start as copies of the teacher.
pub fn init_distillation(teacher: &Denoiser, cfg: &DistillConfig) -> Result<DistillState> {
    let generator = Generator::new(teacher.clone(), cfg.generator_sigma())?;
    DistillState::from_parts(teacher.clone(), teacher.clone(), generator, cfg.clone())
}

impl DistillState {
    /// Assembles a state from arbitrary networks with fresh optimizers.
    pub fn from_parts(teacher: Denoiser, fake: Denoiser, generator: Generator, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let d = teacher.dim();
        for (name, got) in [("fake", fake.dim()), ("generator", generator.dim())] {
            if got != d {
                return Err(Error::Config(format!("{name} dimension {got} differs from teacher dimension {d}")));
            }
        }
        if fake.net.sizes() != teacher.net.sizes() {
            return Err(Error::Config("fake net architecture differs from the teacher".into()));
        }
        Ok(Self {
            teacher_hash: teacher.net.param_hash(),
            fake_opt: Adam::new(fake.net.param_count(), cfg.fake_lr),
            gen_opt: Adam::new(generator.net.net.param_count(), cfg.generator_lr),
            rng: SeedStream::new(cfg.seed),
            averaged: generator.clone(),
            teacher,
            fake,
            generator,
            cfg,
            step: 0,
            call_log: None,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &Denoiser {
        &self.teacher
    }

    /// Hash of the teacher parameters taken at construction.
    pub fn teacher_hash(&self) -> &str {
        &self.teacher_hash
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn enable_call_log(&mut self) {
        self.call_log = Some(Vec::new());
    }

    pub fn call_log(&self) -> &[LoopEvent] {
        self.call_log.as_deref().unwrap_or(&[])
    }

    fn log(&mut self, e: LoopEvent) {
        if let Some(log) = &mut self.call_log {
            log.push(e);
        }
    }

    pub fn draw_latent(&mut self) -> Mat {
        self.log(LoopEvent::DrawLatent);
        self.rng.normal_mat(self.cfg.batch_size, self.generator.dim())
    }

    /// Mutable access to the internal stream, for estimator calls outside
    /// the loop.
    pub fn rng_mut(&mut self) -> &mut SeedStream {
        &mut self.rng
    }

    fn check_teacher(&self) -> Result<()> {
        if self.teacher.net.param_hash() != self.teacher_hash {
            return Err(Error::Precondition("teacher parameters changed during distillation".into()));
        }
        Ok(())
    }
}

/// Noise used by one generator step: the `σ̂`-corruption first, then the
/// per-row `(σ_t, ε)` draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNoise {
    pub corrupt: Mat,
    pub draw: NoiseDraw,
}

impl GeneratorNoise {
    pub fn sample(n: usize, dim: usize, s: &NoiseSchedule, rng: &mut SeedStream) -> Self {
        let corrupt = rng.normal_mat(n, dim);
        let draw = NoiseDraw::sample(n, dim, s, rng);
        Self { corrupt, draw }
    }
}

struct Perturbed {
    gen_tape: DenoiseTape,
    /// `ỹ` in standard mode, `x_g` in ambient mode.
    anchor: Mat,
    sigmas: Vec<f64>,
    x_t: Mat,
    output_mean_sq: f64,
}

fn perturb(state: &DistillState, z: &Mat, noise: &GeneratorNoise) -> Result<Perturbed> {
    let cfg = &state.cfg;
    let (x_g, gen_tape) = state.generator.generate_tape(z)?;
    let n = x_g.rows();
    let output_mean_sq = x_g.frobenius_sq() / n.max(1) as f64;
    let anchor = match cfg.mode {
        TrainMode::Standard => {
            let mut y = x_g;
            y.axpy(cfg.sigma_hat, &noise.corrupt);
            y
        }
        TrainMode::Ambient => x_g,
    };
    // Below σ̂ the ambient teacher has never been trained.
    let sigmas: Vec<f64> = match cfg.mode {
        TrainMode::Standard => noise.draw.sigmas.clone(),
        TrainMode::Ambient => noise.draw.sigmas.iter().map(|s| s.max(cfg.sigma_hat)).collect(),
    };
    let mut x_t = anchor.clone();
    for i in 0..n {
        let s = sigmas[i];
        for (x, e) in x_t.row_mut(i).iter_mut().zip(noise.draw.eps.row(i)) {
            *x += s * e;
        }
    }
    Ok(Perturbed {
        gen_tape,
        anchor,
        sigmas,
        x_t,
        output_mean_sq,
    })
}

fn weight(cfg: &DistillConfig, sigma: f64, f_phi: &[f64], anchor: &[f64]) -> f64 {
    match cfg.weighting {
        GeneratorWeighting::Constant => 1.0,
        GeneratorWeighting::Sigma2 => sigma * sigma,
        GeneratorWeighting::SidNormalized => {
            let nu = f_phi.iter().zip(anchor).map(|(f, x)| (f - x).abs()).sum::<f64>() / f_phi.len() as f64;
            let units = match cfg.method {
                DistillMethod::Sds => sigma,
                DistillMethod::Dmd => sigma * sigma,
                DistillMethod::Sid => 1.0,
            };
            units / nu.max(WEIGHT_NORMALIZER_FLOOR)
        }
    }
}

/// Result of one generator-gradient evaluation.
#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    /// Gradient with respect to the generator parameters.
    pub grads: Vec<f64>,
    /// Gradient with respect to the generated points `x_g` (batch-averaged).
    pub upstream: Mat,
    /// The stop-gradient weights `w(t)` used per row.
    pub weights: Vec<f64>,
    /// `mean ‖x_g‖²` of the batch.
    pub output_mean_sq: f64,
}

fn finish_estimator(state: &DistillState, p: &Perturbed, upstream: Mat, weights: Vec<f64>) -> EstimatorOutput {
    let (grads, _) = state.generator.backward(&p.gen_tape, &upstream);
    EstimatorOutput {
        grads,
        upstream,
        weights,
        output_mean_sq: p.output_mean_sq,
    }
}

fn pick_weight(
    weights: Option<&[f64]>,
    i: usize,
    cfg: &DistillConfig,
    sigma: f64,
    f_phi: &[f64],
    anchor: &[f64],
) -> f64 {
    match weights {
        Some(w) => w[i],
        None => weight(cfg, sigma, f_phi, anchor),
    }
}

/// SDS estimator for fixed latents and noise. `weights` overrides the
/// stop-gradient weights.
pub fn sds_gradient_with(
    state: &DistillState,
    z: &Mat,
    noise: &GeneratorNoise,
    weights: Option<&[f64]>,
) -> Result<EstimatorOutput> {
    let p = perturb(state, z, noise)?;
    let f_phi = state.teacher.denoise(&p.x_t, &p.sigmas)?;
    let (n, d) = (z.rows(), state.generator.dim());
    let mut upstream = Mat::zeros(n, d);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        let s = p.sigmas[i];
        let w = pick_weight(weights, i, &state.cfg, s, f_phi.row(i), p.anchor.row(i));
        let eps_phi = eps_from_score(&score_from_mean(f_phi.row(i), p.x_t.row(i), s)?, s)?;
        for ((u, ep), e) in upstream.row_mut(i).iter_mut().zip(&eps_phi).zip(noise.draw.eps.row(i)) {
            *u = w * (ep - e) / n as f64;
        }
        ws.push(w);
    }
    Ok(finish_estimator(state, &p, upstream, ws))
}

/// DMD estimator for fixed latents and noise. `weights` overrides the
/// stop-gradient weights.
pub fn dmd_gradient_with(
    state: &DistillState,
    z: &Mat,
    noise: &GeneratorNoise,
    weights: Option<&[f64]>,
) -> Result<EstimatorOutput> {
    let p = perturb(state, z, noise)?;
    let f_phi = state.teacher.denoise(&p.x_t, &p.sigmas)?;
    let f_psi = state.fake.denoise(&p.x_t, &p.sigmas)?;
    let (n, d) = (z.rows(), state.generator.dim());
    let mut upstream = Mat::zeros(n, d);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        let s = p.sigmas[i];
        let w = pick_weight(weights, i, &state.cfg, s, f_phi.row(i), p.anchor.row(i));
        let s_phi = score_from_mean(f_phi.row(i), p.x_t.row(i), s)?;
        let s_psi = score_from_mean(f_psi.row(i), p.x_t.row(i), s)?;
        for ((u, a), b) in upstream.row_mut(i).iter_mut().zip(&s_psi).zip(&s_phi) {
            *u = w * (a - b) / n as f64;
        }
        ws.push(w);
    }
    Ok(finish_estimator(state, &p, upstream, ws))
}

/// SiD estimator for fixed latents and noise. `weights` overrides the
/// stop-gradient weights.
pub fn sid_gradient_with(
    state: &DistillState,
    z: &Mat,
    noise: &GeneratorNoise,
    weights: Option<&[f64]>,
) -> Result<EstimatorOutput> {
    let alpha = state.cfg.alpha;
    let p = perturb(state, z, noise)?;
    let (f_phi, tape_phi) = state.teacher.denoise_tape(&p.x_t, &p.sigmas)?;
    let (f_psi, tape_psi) = state.fake.denoise_tape(&p.x_t, &p.sigmas)?;
    let (n, d) = (z.rows(), state.generator.dim());
    let inv_n = 1.0 / n as f64;
    let mut up_psi = Mat::zeros(n, d);
    let mut up_phi = Mat::zeros(n, d);
    let mut direct = Mat::zeros(n, d);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        let w = pick_weight(weights, i, &state.cfg, p.sigmas[i], f_phi.row(i), p.anchor.row(i));
        for j in 0..d {
            let diff = f_psi[(i, j)] - f_phi[(i, j)];
            let resid = f_psi[(i, j)] - p.anchor[(i, j)];
            up_psi[(i, j)] = w * (2.0 * (1.0 - alpha) * diff - resid - diff) * inv_n;
            up_phi[(i, j)] = w * (resid - 2.0 * (1.0 - alpha) * diff) * inv_n;
            direct[(i, j)] = w * diff * inv_n;
        }
        ws.push(w);
    }
    let (_, g_psi) = state.fake.backward(&tape_psi, &up_psi);
    let (_, g_phi) = state.teacher.backward(&tape_phi, &up_phi);
    // x_t and the anchor both move one-for-one with x_g.
    let mut upstream = g_psi;
    upstream.axpy(1.0, &g_phi);
    upstream.axpy(1.0, &direct);
    Ok(finish_estimator(state, &p, upstream, ws))
}

/// The batch-mean SiD objective whose gradient [`sid_gradient_with`]
/// returns, for fixed weights.
pub fn sid_objective_with(state: &DistillState, z: &Mat, noise: &GeneratorNoise, weights: &[f64]) -> Result<f64> {
    let alpha = state.cfg.alpha;
    let p = perturb(state, z, noise)?;
    let f_phi = state.teacher.denoise(&p.x_t, &p.sigmas)?;
    let f_psi = state.fake.denoise(&p.x_t, &p.sigmas)?;
    let n = z.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        let mut inner = 0.0;
        for ((a, b), x) in f_psi.row(i).iter().zip(f_phi.row(i)).zip(p.anchor.row(i)) {
            sq += (a - b) * (a - b);
            inner += (b - a) * (a - x);
        }
        total += weights[i] * ((1.0 - alpha) * sq + inner);
    }
    Ok(total / n as f64)
}

fn estimator_with(state: &DistillState, z: &Mat, noise: &GeneratorNoise) -> Result<EstimatorOutput> {
    match state.cfg.method {
        DistillMethod::Sds => sds_gradient_with(state, z, noise, None),
        DistillMethod::Dmd => dmd_gradient_with(state, z, noise, None),
        DistillMethod::Sid => sid_gradient_with(state, z, noise, None),
    }
}

fn draw_noise(state: &mut DistillState, n: usize) -> GeneratorNoise {
    let d = state.generator.dim();
    let schedule = state.cfg.schedule;
    GeneratorNoise::sample(n, d, &schedule, &mut state.rng)
}

pub fn generator_grad_sds(state: &mut DistillState, z: &Mat) -> Result<Vec<f64>> {
    let noise = draw_noise(state, z.rows());
    Ok(sds_gradient_with(state, z, &noise, None)?.grads)
}

pub fn generator_grad_dmd(state: &mut DistillState, z: &Mat) -> Result<Vec<f64>> {
    let noise = draw_noise(state, z.rows());
    Ok(dmd_gradient_with(state, z, &noise, None)?.grads)
}

/// SiD gradient with an explicit `alpha` (the configured one is ignored).
pub fn generator_grad_sid(state: &mut DistillState, z: &Mat, alpha: f64) -> Result<Vec<f64>> {
    let noise = draw_noise(state, z.rows());
    let saved = state.cfg.alpha;
    state.cfg.alpha = alpha;
    let out = sid_gradient_with(state, z, &noise, None);
    state.cfg.alpha = saved;
    Ok(out?.grads)
}

/// One Adam step on the fake net against the generator's corrupted output.
/// Returns the batch loss.
pub fn fake_update(state: &mut DistillState, z: &Mat) -> Result<f64> {
    state.log(LoopEvent::Generate);
    let x_g = state.generator.generate(z)?;
    state.log(LoopEvent::Corrupt);
    let corrupt = state.rng.normal_mat(x_g.rows(), x_g.cols());
    let mut y = x_g;
    y.axpy(state.cfg.sigma_hat, &corrupt);
    let cfg = &state.cfg;
    let eval = match cfg.mode {
        TrainMode::Standard => standard_diffusion_loss(&state.fake, &y, &cfg.schedule, cfg.fake_weighting, &mut state.rng)?,
        TrainMode::Ambient => ambient_tweedie_loss(
            &state.fake,
            &y,
            cfg.sigma_hat,
            &cfg.schedule,
            cfg.fake_weighting,
            &mut state.rng,
        )?,
    };
    state.log(LoopEvent::UpdateFake);
    state.fake_opt.step(state.fake.net.params_mut(), &eval.grads);
    Ok(eval.loss)
}

/// Summary of one generator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub grad_norm: f64,
    pub output_mean_sq: f64,
}

/// One Adam step on the generator with the configured estimator.
pub fn generator_update(state: &mut DistillState, z: &Mat) -> Result<GeneratorStep> {
    state.log(LoopEvent::Generate);
    state.log(LoopEvent::Corrupt);
    let noise = draw_noise(state, z.rows());
    let out = estimator_with(state, z, &noise)?;
    state.log(LoopEvent::UpdateGenerator);
    state.gen_opt.step(state.generator.net.net.params_mut(), &out.grads);
    let decay = state.cfg.ema_decay;
    let live = state.generator.net.net.params();
    for (a, &p) in state.averaged.net.net.params_mut().iter_mut().zip(live) {
        *a = if decay == 0.0 { p } else { decay * *a + (1.0 - decay) * p };
    }
    Ok(GeneratorStep {
        grad_norm: crate::linalg::norm(&out.grads),
        output_mean_sq: out.output_mean_sq,
    })
}

/// Quality of the current generator, as reported by an evaluation hook.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub frechet_clean: Option<f64>,
    pub proximal_fid: Option<f64>,
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub frechet_clean: Option<f64>,
    pub proximal_fid: Option<f64>,
    /// Last fake-net batch loss; absent before the first step and for SDS.
    pub fake_loss: Option<f64>,
    pub gen_grad_norm: Option<f64>,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "step,frechet_clean,proximal_fid,fake_loss,gen_grad_norm";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            f(self.frechet_clean),
            f(self.proximal_fid),
            f(self.fake_loss),
            f(self.gen_grad_norm)
        )
    }

    pub fn score(&self) -> Option<CheckpointScore> {
        Some(CheckpointScore {
            step: self.step,
            proximal_fid: self.proximal_fid?,
            frechet_clean: self.frechet_clean,
        })
    }
}

/// Where and why a run stopped early.
#[derive(Clone, Debug)]
pub struct DivergenceInfo {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct DistillRun {
    /// Final state, or the last evaluated healthy state after divergence.
    pub state: DistillState,
    pub history: Vec<HistoryRow>,
    pub divergence: Option<DivergenceInfo>,
}

fn health(fake_loss: Option<f64>, g: &GeneratorStep, state: &DistillState) -> Option<String> {
    if let Some(l) = fake_loss {
        if !l.is_finite() || l > DIVERGENCE_THRESHOLD {
            return Some(format!("fake loss {l}"));
        }
    }
    if !g.grad_norm.is_finite() {
        return Some("non-finite generator gradient".into());
    }
    if !g.output_mean_sq.is_finite() || g.output_mean_sq > DIVERGENCE_THRESHOLD {
        return Some(format!("generator output mean square {}", g.output_mean_sq));
    }
    let finite = |g: &Generator| g.net.net.params().iter().all(|v| v.is_finite());
    if !finite(&state.generator) || !finite(&state.averaged) {
        return Some("non-finite generator parameters".into());
    }
    None
}

/// The alternating loop for `cfg.steps` iterations, evaluating at step 0,
/// every `eval_every` iterations and after the last one.
pub fn run_distillation(
    teacher: &Denoiser,
    cfg: &DistillConfig,
    eval: &mut dyn FnMut(&DistillState) -> Result<Evaluation>,
) -> Result<DistillRun> {
    let state = init_distillation(teacher, cfg)?;
    continue_distillation(state, eval)
}

/// Runs a prepared state up to its configured step count.
pub fn continue_distillation(
    mut state: DistillState,
    eval: &mut dyn FnMut(&DistillState) -> Result<Evaluation>,
) -> Result<DistillRun> {
    let total = state.cfg.steps;
    let mut history = Vec::new();
    let record = |state: &DistillState, fake_loss, gen_grad_norm, e: Evaluation| HistoryRow {
        step: state.step,
        frechet_clean: e.frechet_clean,
        proximal_fid: e.proximal_fid,
        fake_loss,
        gen_grad_norm,
    };
    history.push(record(&state, None, None, eval(&state)?));
    let mut healthy = state.clone();
    while state.step < total {
        let factor = state.cfg.lr_factor(state.step);
        state.fake_opt.lr = state.cfg.fake_lr * factor;
        state.gen_opt.lr = state.cfg.generator_lr * factor;
        let mut fake_loss = None;
        if state.cfg.method != DistillMethod::Sds {
            for _ in 0..state.cfg.fake_steps_per_generator_step {
                let z = state.draw_latent();
                fake_loss = Some(fake_update(&mut state, &z)?);
            }
        }
        let z = state.draw_latent();
        let g = generator_update(&mut state, &z)?;
        state.step += 1;
        if let Some(reason) = health(fake_loss, &g, &state) {
            return Ok(DistillRun {
                state: healthy,
                history,
                divergence: Some(DivergenceInfo {
                    step: state.step,
                    reason,
                }),
            });
        }
        if state.step % state.cfg.eval_every == 0 || state.step == total {
            state.check_teacher()?;
            history.push(record(&state, fake_loss, Some(g.grad_norm), eval(&state)?));
            healthy = state.clone();
        }
    }
    state.check_teacher()?;
    Ok(DistillRun {
        state,
        history,
        divergence: None,
    })
}

/// Evaluation hook on a fixed latent batch, so successive checkpoints are
/// compared on identical inputs.
#[derive(Clone, Debug)]
pub struct SampleEvaluator {
    /// Clean-law moments; without them only proximal FID is reported.
    pub clean: Option<Moments>,
    pub noisy: Mat,
    pub sigma_hat: f64,
    latents: Mat,
    seed: u64,
}

impl SampleEvaluator {
    pub fn new(clean: Option<Moments>, noisy: Mat, sigma_hat: f64, n_samples: usize, seed: u64) -> Self {
        let latents = SeedStream::new(seed).split(1).normal_mat(n_samples, noisy.cols());
        Self {
            clean,
            noisy,
            sigma_hat,
            latents,
            seed,
        }
    }

    pub fn samples(&self, g: &Generator) -> Result<Mat> {
        g.generate(&self.latents)
    }

    pub fn evaluate(&self, g: &Generator) -> Result<Evaluation> {
        let x = self.samples(g)?;
        if !x.is_finite() {
            return Ok(Evaluation {
                frechet_clean: self.clean.as_ref().map(|_| f64::INFINITY),
                proximal_fid: Some(f64::INFINITY),
            });
        }
        let frechet_clean = match &self.clean {
            Some(c) => Some(Moments::fit(&x)?.frechet(c)?),
            None => None,
        };
        let mut rng = SeedStream::new(self.seed).split(2);
        Ok(Evaluation {
            frechet_clean,
            proximal_fid: Some(proximal_fid(&x, self.sigma_hat, &self.noisy, &mut rng)?),
        })
    }
}

/// Per-row result of [`inverse_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct InverseSolution {
    pub z: Mat,
    pub x: Mat,
    /// `‖A·x − y‖²` per row at the returned iterate.
    pub residual: Vec<f64>,
}

/// `min_z ‖A·G(z) − y‖²` per row of `y` by Adam from `z0`, keeping each
/// row's best iterate. `forward_op` is `m×d` and `y` is `n×m`.
///
/// All rows share one optimizer; Adam acts coordinate-wise so this equals
/// independent per-row runs.
pub fn inverse_solve(
    generator: &Generator,
    forward_op: &Mat,
    y: &Mat,
    z0: &Mat,
    steps: usize,
    lr: f64,
) -> Result<InverseSolution> {
    let d = generator.dim();
    if forward_op.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: forward_op.cols(),
        });
    }
    if y.cols() != forward_op.rows() {
        return Err(Error::DimensionMismatch {
            expected: forward_op.rows(),
            got: y.cols(),
        });
    }
    if z0.rows() != y.rows() || z0.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: y.rows(),
            got: z0.rows(),
        });
    }
    let n = y.rows();
    let a_t = forward_op.transpose();
    let mut z = z0.clone();
    let mut best_z = z0.clone();
    let mut best_x = Mat::zeros(n, d);
    let mut best_r = vec![f64::INFINITY; n];
    let mut opt = Adam::new(n * d, lr);
    for k in 0..=steps {
        let (x, tape) = generator.generate_tape(&z)?;
        let resid = &x.matmul(&a_t) - y;
        for i in 0..n {
            let r = crate::linalg::dot(resid.row(i), resid.row(i));
            if r < best_r[i] {
                best_r[i] = r;
                best_z.row_mut(i).copy_from_slice(z.row(i));
                best_x.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        if k == steps {
            break;
        }
        let upstream = resid.matmul(forward_op).scale(2.0);
        let (_, gz) = generator.backward(&tape, &upstream);
        opt.step(z.as_mut_slice(), gz.as_slice());
    }
    Ok(InverseSolution {
        z: best_z,
        x: best_x,
        residual: best_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Preconditioning};

    fn tiny_denoiser(seed: u64) -> Denoiser {
        // 3→8→8→2: 32 + 72 + 18 = 122 parameters.
        Denoiser::init(
            2,
            &[8, 8],
            Activation::Silu,
            Preconditioning::Edm { sigma_data: 0.5 },
            &mut SeedStream::new(seed),
        )
        .unwrap()
    }

    fn cfg(method: DistillMethod, mode: TrainMode) -> DistillConfig {
        DistillConfig {
            method,
            mode,
            batch_size: 4,
            sigma_hat: 0.1,
            schedule: NoiseSchedule::log_linear(0.05, 2.0).unwrap(),
            weighting: GeneratorWeighting::Sigma2,
            ..DistillConfig::default()
        }
    }

    /// State whose fake net differs from the teacher.
    fn split_state(method: DistillMethod, mode: TrainMode) -> DistillState {
        let teacher = tiny_denoiser(1);
        let fake = tiny_denoiser(2);
        let generator = Generator::new(tiny_denoiser(3), 2.0).unwrap();
        DistillState::from_parts(teacher, fake, generator, cfg(method, mode)).unwrap()
    }

    fn fd_check(analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, params: &[f64]) {
        let mut worst: f64 = 0.0;
        for k in 0..params.len() {
            let h = 1e-5 * (1.0 + params[k].abs());
            let mut p = params.to_vec();
            p[k] += h;
            let up = f(&p);
            p[k] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / (fd.abs().max(analytic[k].abs()).max(1e-6));
            worst = worst.max(err);
        }
        assert!(worst <= 1e-5, "worst relative error {worst:e}");
    }

    /// Checks `grads = ∂/∂θ Σ upstream ⊙ G_θ(z)` with `upstream` frozen.
    fn check_vjp(state: &DistillState, z: &Mat, out: &EstimatorOutput) {
        let base = state.generator.net.net.params().to_vec();
        let mut g = state.generator.clone();
        fd_check(
            &out.grads,
            |p| {
                g.net.net.params_mut().copy_from_slice(p);
                let x = g.generate(z).unwrap();
                x.as_slice().iter().zip(out.upstream.as_slice()).map(|(a, b)| a * b).sum()
            },
            &base,
        );
    }

    #[test]
    fn score_and_epsilon_relations() {
        assert_eq!(score_from_mean(&[1.0, 0.0], &[1.0, 0.0], 0.7).unwrap(), vec![0.0, 0.0]);
        let s = score_from_mean(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert_eq!(s, vec![-1.0, 0.0]);
        assert!(score_from_mean(&[0.0], &[1.0], 0.0).is_err());
        assert!(eps_from_score(&[1.0], -1.0).is_err());
        // Power-of-two noise levels make the round trip exact.
        let s = vec![0.3, -1.7, 2.9];
        assert_eq!(score_from_eps(&eps_from_score(&s, 0.5).unwrap(), 0.5).unwrap(), s);
        // Composition gives ε = (x_t − f)/σ.
        let (f, x, sig) = ([0.2, -0.4], [1.0, 0.5], 0.37);
        let eps = eps_from_score(&score_from_mean(&f, &x, sig).unwrap(), sig).unwrap();
        for j in 0..2 {
            assert!((eps[j] - (x[j] - f[j]) / sig).abs() < 1e-14);
        }
    }

    #[test]
    fn init_copies_teacher() {
        let teacher = tiny_denoiser(4);
        let c = cfg(DistillMethod::Sid, TrainMode::Ambient);
        let s = init_distillation(&teacher, &c).unwrap();
        let mut rng = SeedStream::new(1);
        let x = rng.normal_mat(16, 2);
        let sig: Vec<f64> = (0..16).map(|i| 0.05 + 0.1 * i as f64).collect();
        assert_eq!(s.fake.denoise(&x, &sig).unwrap(), teacher.denoise(&x, &sig).unwrap());
        let z = rng.normal_mat(1000, 2);
        assert!(s.generator.generate(&z).unwrap().is_finite());
        let s2 = init_distillation(&teacher, &c).unwrap();
        assert_eq!(s.generator, s2.generator);
        assert_eq!(s.teacher_hash(), teacher.net.param_hash());
        let mut other = c.clone();
        other.batch_size = 0;
        assert!(init_distillation(&teacher, &other).is_err());
    }

    #[test]
    fn estimators_vanish_when_fake_equals_teacher() {
        for mode in [TrainMode::Standard, TrainMode::Ambient] {
            for method in [DistillMethod::Dmd, DistillMethod::Sid] {
                for weighting in [GeneratorWeighting::Constant, GeneratorWeighting::SidNormalized] {
                    let mut c = cfg(method, mode);
                    c.weighting = weighting;
                    let teacher = tiny_denoiser(5);
                    let mut s = DistillState::from_parts(
                        teacher.clone(),
                        teacher,
                        Generator::new(tiny_denoiser(6), 2.0).unwrap(),
                        c,
                    )
                    .unwrap();
                    let z = s.draw_latent();
                    let grads = match method {
                        DistillMethod::Dmd => generator_grad_dmd(&mut s, &z).unwrap(),
                        _ => generator_grad_sid(&mut s, &z, 1.2).unwrap(),
                    };
                    assert!(grads.iter().all(|g| *g == 0.0), "{method:?} {mode:?} {weighting:?}");
                }
            }
        }
    }

    #[test]
    fn sds_vanishes_for_exact_noise_prediction() {
        // A zero raw net under `Plain` preconditioning predicts `f = 0`, so
        // `ε_φ = x_t/σ_t`. With zero generator output, no corruption and
        // σ_t = 1/2 (exact in binary) that is the injected noise bit for bit.
        let zero = Denoiser::new(
            crate::nn::DenseNet::zeros(&[3, 4, 2], Activation::Silu).unwrap(),
            Preconditioning::Plain,
        )
        .unwrap();
        let mut c = cfg(DistillMethod::Sds, TrainMode::Ambient);
        c.sigma_hat = 0.0;
        c.schedule = NoiseSchedule::constant(0.5).unwrap();
        c.weighting = GeneratorWeighting::Constant;
        let gen = Generator::new(zero.clone(), 2.0).unwrap();
        let mut s = DistillState::from_parts(zero.clone(), zero, gen, c).unwrap();
        let z = s.draw_latent();
        let grads = generator_grad_sds(&mut s, &z).unwrap();
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        for method in [DistillMethod::Sds, DistillMethod::Dmd, DistillMethod::Sid] {
            let mut s = split_state(method, TrainMode::Ambient);
            let z = s.draw_latent();
            let noise = GeneratorNoise::sample(4, 2, &s.cfg.schedule.clone(), s.rng_mut());
            let zeros = [0.0; 4];
            let out = match method {
                DistillMethod::Sds => sds_gradient_with(&s, &z, &noise, Some(&zeros)),
                DistillMethod::Dmd => dmd_gradient_with(&s, &z, &noise, Some(&zeros)),
                DistillMethod::Sid => sid_gradient_with(&s, &z, &noise, Some(&zeros)),
            }
            .unwrap();
            assert!(out.grads.iter().all(|g| *g == 0.0), "{method:?}");
            let live = estimator_with(&s, &z, &noise).unwrap();
            assert!(live.grads.iter().any(|g| *g != 0.0), "{method:?}");
        }
    }

    #[test]
    fn sds_and_dmd_match_finite_differences() {
        for mode in [TrainMode::Standard, TrainMode::Ambient] {
            for method in [DistillMethod::Sds, DistillMethod::Dmd] {
                let mut s = split_state(method, mode);
                let z = s.draw_latent();
                let noise = GeneratorNoise::sample(4, 2, &s.cfg.schedule.clone(), s.rng_mut());
                let out = match method {
                    DistillMethod::Sds => sds_gradient_with(&s, &z, &noise, None).unwrap(),
                    _ => dmd_gradient_with(&s, &z, &noise, None).unwrap(),
                };
                check_vjp(&s, &z, &out);
            }
        }
    }

    #[test]
    fn sid_matches_finite_differences() {
        for mode in [TrainMode::Standard, TrainMode::Ambient] {
            for alpha in [1.2, 1.0, 0.5] {
                let mut s = split_state(DistillMethod::Sid, mode);
                s.cfg.alpha = alpha;
                let z = s.draw_latent();
                let noise = GeneratorNoise::sample(4, 2, &s.cfg.schedule.clone(), s.rng_mut());
                let out = sid_gradient_with(&s, &z, &noise, None).unwrap();
                let base = s.generator.net.net.params().to_vec();
                let mut probe = s.clone();
                fd_check(
                    &out.grads,
                    |p| {
                        probe.generator.net.net.params_mut().copy_from_slice(p);
                        sid_objective_with(&probe, &z, &noise, &out.weights).unwrap()
                    },
                    &base,
                );
            }
        }
    }

    #[test]
    fn sid_with_alpha_one_is_the_product_rule() {
        // With α = 1 the objective is w·(f_φ − f_ψ)ᵀ(f_ψ − x), whose
        // gradient in x is Jψᵀw(f_φ − 2f_ψ + x) + Jφᵀw(f_ψ − x) + w(f_ψ − f_φ).
        let mut s = split_state(DistillMethod::Sid, TrainMode::Ambient);
        s.cfg.alpha = 1.0;
        let z = s.draw_latent();
        let noise = GeneratorNoise::sample(4, 2, &s.cfg.schedule.clone(), s.rng_mut());
        let out = sid_gradient_with(&s, &z, &noise, None).unwrap();
        let p = perturb(&s, &z, &noise).unwrap();
        let (fphi, tphi) = s.teacher.denoise_tape(&p.x_t, &p.sigmas).unwrap();
        let (fpsi, tpsi) = s.fake.denoise_tape(&p.x_t, &p.sigmas).unwrap();
        let n = 4.0;
        let mut a = Mat::zeros(4, 2);
        let mut b = Mat::zeros(4, 2);
        let mut c = Mat::zeros(4, 2);
        for i in 0..4 {
            let w = out.weights[i];
            for j in 0..2 {
                a[(i, j)] = w * (fphi[(i, j)] - 2.0 * fpsi[(i, j)] + p.anchor[(i, j)]) / n;
                b[(i, j)] = w * (fpsi[(i, j)] - p.anchor[(i, j)]) / n;
                c[(i, j)] = w * (fpsi[(i, j)] - fphi[(i, j)]) / n;
            }
        }
        let want = &(&s.fake.backward(&tpsi, &a).1 + &s.teacher.backward(&tphi, &b).1) + &c;
        assert!(want.max_abs_diff(&out.upstream) < 1e-15);
    }

    #[test]
    fn dmd_is_antisymmetric_in_teacher_and_fake() {
        let s = split_state(DistillMethod::Dmd, TrainMode::Ambient);
        let mut swapped = s.clone();
        std::mem::swap(&mut swapped.teacher, &mut swapped.fake);
        // Constant weights do not depend on which net is the teacher.
        let mut s = s;
        s.cfg.weighting = GeneratorWeighting::Constant;
        swapped.cfg.weighting = GeneratorWeighting::Constant;
        let z = s.draw_latent();
        let noise = GeneratorNoise::sample(4, 2, &s.cfg.schedule.clone(), s.rng_mut());
        let a = dmd_gradient_with(&s, &z, &noise, None).unwrap().grads;
        let b = dmd_gradient_with(&swapped, &z, &noise, None).unwrap().grads;
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn zero_learning_rates_freeze_the_nets() {
        let mut s = split_state(DistillMethod::Sid, TrainMode::Ambient);
        s.fake_opt.lr = 0.0;
        s.gen_opt.lr = 0.0;
        let (f0, g0) = (s.fake.clone(), s.generator.clone());
        let z = s.draw_latent();
        fake_update(&mut s, &z).unwrap();
        assert_eq!(s.fake, f0);
        assert_eq!(s.generator, g0);
        let z = s.draw_latent();
        generator_update(&mut s, &z).unwrap();
        assert_eq!(s.generator, g0);
        assert_eq!(s.fake, f0);
    }

    #[test]
    fn fake_update_leaves_generator_and_zero_gradient_keeps_generator() {
        let teacher = tiny_denoiser(7);
        let mut c = cfg(DistillMethod::Dmd, TrainMode::Ambient);
        c.batch_size = 8;
        let mut s = init_distillation(&teacher, &c).unwrap();
        let g0 = s.generator.clone();
        // ψ ≡ φ at init: the DMD step is a zero-gradient Adam step.
        let z = s.draw_latent();
        generator_update(&mut s, &z).unwrap();
        assert_eq!(s.generator, g0);
        let f0 = s.fake.clone();
        let z = s.draw_latent();
        fake_update(&mut s, &z).unwrap();
        assert_ne!(s.fake, f0);
        assert_eq!(s.generator, g0);
    }

    #[test]
    fn ambient_fake_update_without_noise_matches_standard() {
        let teacher = tiny_denoiser(8);
        let mut a = cfg(DistillMethod::Sid, TrainMode::Ambient);
        a.sigma_hat = 0.0;
        let mut b = a.clone();
        b.mode = TrainMode::Standard;
        let mut sa = init_distillation(&teacher, &a).unwrap();
        let mut sb = init_distillation(&teacher, &b).unwrap();
        for _ in 0..3 {
            let za = sa.draw_latent();
            let zb = sb.draw_latent();
            let la = fake_update(&mut sa, &za).unwrap();
            let lb = fake_update(&mut sb, &zb).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(sa.fake, sb.fake);
    }

    #[test]
    fn fake_loss_decreases_on_frozen_generator() {
        let teacher = Denoiser::init(
            2,
            &[32, 32],
            Activation::Silu,
            Preconditioning::Edm { sigma_data: 0.5 },
            &mut SeedStream::new(9),
        )
        .unwrap();
        let mut c = cfg(DistillMethod::Sid, TrainMode::Ambient);
        c.batch_size = 128;
        c.fake_lr = 1e-3;
        c.schedule = NoiseSchedule::log_linear(0.05, 2.0).unwrap();
        let mut s = init_distillation(&teacher, &c).unwrap();
        // A fresh fake net has to learn the (fixed) generator distribution.
        s.fake = Denoiser::init(2, &[32, 32], Activation::Silu, Preconditioning::Edm { sigma_data: 0.5 }, &mut SeedStream::new(10))
            .unwrap();
        let mut losses = Vec::new();
        for _ in 0..500 {
            let z = s.draw_latent();
            losses.push(fake_update(&mut s, &z).unwrap());
        }
        let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = losses[400..].iter().sum::<f64>() / 100.0;
        assert!(tail < 0.9 * head, "head {head} tail {tail}");
    }

    #[test]
    fn loop_body_follows_the_alternation() {
        let teacher = tiny_denoiser(11);
        let mut c = cfg(DistillMethod::Sid, TrainMode::Ambient);
        c.steps = 1;
        let mut s = init_distillation(&teacher, &c).unwrap();
        s.enable_call_log();
        let run = continue_distillation(s, &mut |_| Ok(Evaluation::default())).unwrap();
        use LoopEvent::*;
        assert_eq!(
            run.state.call_log(),
            &[DrawLatent, Generate, Corrupt, UpdateFake, DrawLatent, Generate, Corrupt, UpdateGenerator]
        );
        // SDS never touches the fake net.
        c.method = DistillMethod::Sds;
        let mut s = init_distillation(&teacher, &c).unwrap();
        s.enable_call_log();
        let run = continue_distillation(s, &mut |_| Ok(Evaluation::default())).unwrap();
        assert_eq!(run.state.call_log(), &[DrawLatent, Generate, Corrupt, UpdateGenerator]);
        assert_eq!(run.state.fake, teacher);
    }

    #[test]
    fn zero_steps_returns_teacher_copy() {
        let teacher = tiny_denoiser(12);
        let mut c = cfg(DistillMethod::Sid, TrainMode::Ambient);
        c.steps = 0;
        let mut calls = 0;
        let run = run_distillation(&teacher, &c, &mut |_| {
            calls += 1;
            Ok(Evaluation::default())
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(run.history.len(), 1);
        assert_eq!(run.state.generator.net, teacher);
        // The generator is then the one-step denoise of σ_max-scaled noise.
        let z = SeedStream::new(1).normal_mat(5, 2);
        let direct = teacher.denoise(&z.scale(2.0), &[2.0; 5]).unwrap();
        assert_eq!(run.state.generator.generate(&z).unwrap(), direct);
    }

    #[test]
    fn run_is_deterministic_and_keeps_teacher() {
        let teacher = tiny_denoiser(13);
        let mut c = cfg(DistillMethod::Sid, TrainMode::Ambient);
        c.steps = 25;
        c.eval_every = 10;
        let ev = |s: &DistillState| {
            let x = s.generator.generate(&SeedStream::new(3).normal_mat(8, 2)).unwrap();
            Ok(Evaluation {
                frechet_clean: Some(x.frobenius_norm()),
                proximal_fid: None,
            })
        };
        let a = run_distillation(&teacher, &c, &mut ev.clone()).unwrap();
        let b = run_distillation(&teacher, &c, &mut ev.clone()).unwrap();
        assert_eq!(a.history, b.history);
        let steps: Vec<_> = a.history.iter().map(|h| h.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert_eq!(a.state.teacher().net.param_hash(), teacher.net.param_hash());
        assert!(a.divergence.is_none());
    }

    #[test]
    fn divergence_returns_last_healthy_state() {
        let teacher = tiny_denoiser(14);
        let mut c = cfg(DistillMethod::Sds, TrainMode::Ambient);
        c.steps = 200;
        c.eval_every = 5;
        c.generator_lr = 1e6;
        c.weighting = GeneratorWeighting::Constant;
        let run = run_distillation(&teacher, &c, &mut |_| Ok(Evaluation::default())).unwrap();
        let info = run.divergence.expect("huge learning rate must diverge");
        assert!(run.state.step() < info.step);
        assert_eq!(run.state.step() % 5, 0);
        assert!(run.state.generator.net.net.params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inverse_solve_recovers_points_in_range() {
        let g = Generator::new(tiny_denoiser(15), 2.0).unwrap();
        let mut rng = SeedStream::new(4);
        let z0 = rng.normal_mat(6, 2);
        let y = g.generate(&z0).unwrap();
        let sol = inverse_solve(&g, &Mat::identity(2), &y, &z0, 50, 0.05).unwrap();
        assert!(sol.residual.iter().all(|r| *r <= 1e-4));
        let init = inverse_solve(&g, &Mat::identity(2), &y, &z0, 0, 0.05).unwrap();
        assert_eq!(init.z, z0);
        assert_eq!(init.x, y);
        // From elsewhere the residual still drops.
        let start = rng.normal_mat(6, 2);
        let far = inverse_solve(&g, &Mat::identity(2), &y, &start, 0, 0.05).unwrap();
        let near = inverse_solve(&g, &Mat::identity(2), &y, &start, 1000, 0.05).unwrap();
        for (a, b) in near.residual.iter().zip(&far.residual) {
            assert!(a <= b);
        }
        assert!(near.residual.iter().sum::<f64>() < 0.5 * far.residual.iter().sum::<f64>());
    }

    #[test]
    fn inverse_solve_checks_shapes() {
        let g = Generator::new(tiny_denoiser(16), 2.0).unwrap();
        let z = Mat::zeros(3, 2);
        assert!(inverse_solve(&g, &Mat::identity(3), &Mat::zeros(3, 3), &z, 1, 0.1).is_err());
        assert!(inverse_solve(&g, &Mat::identity(2), &Mat::zeros(2, 2), &z, 1, 0.1).is_err());
    }
}
