//! The experiment document: one JSON object describing a whole run.
//!
//! Every section has defaults, so a config only needs `schema_version`,
//! `kind` and `seed`. Unknown keys are rejected at every level. All random
//! streams of a run are derived from the single root `seed`.

use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsd_core::diffusion::{LossWeighting, SampleMode, TrainConfig, TrainMode};
use dsd_core::distill::{DistillConfig, DistillMethod, GeneratorWeighting};
use dsd_core::nn::Activation;
use dsd_core::schedule::NoiseSchedule;
use dsd_core::stiefel::{OptConfig, Retraction};
use dsd_core::toy::ToyShape;
use dsd_core::SeedStream;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Verify,
    Pretrain,
    Distill,
    Sample,
    Eval,
    SigmaSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Verify => "verify",
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::Distill => "distill",
            ExperimentKind::Sample => "sample",
            ExperimentKind::Eval => "eval",
            ExperimentKind::SigmaSweep => "sigma-sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Output directory; `--out` takes precedence, `DSD_OUT` is the fallback.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub plots: bool,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub inputs: InputsSection,
}

/// The linear sandbox checked by `verify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub d: usize,
    pub r: usize,
    pub sigma: f64,
    /// Explicit `d×r` frame `E` as rows; drawn at random when absent.
    pub frame: Option<Vec<Vec<f64>>>,
    pub schedule: NoiseSchedule,
    pub quad_points: usize,
    /// Additional `(d, r, σ)` instances for the minimizer and gap checks.
    pub extra_cases: Vec<(usize, usize, f64)>,
    pub opt_seeds: usize,
    /// Successful runs required out of `opt_seeds`.
    pub opt_required: usize,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub retraction: Retraction,
    pub mc_instances: usize,
    pub mc_samples: usize,
    pub lemma_instances: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        let opt = OptConfig::default();
        Self {
            d: 8,
            r: 2,
            sigma: 0.5,
            frame: None,
            schedule: NoiseSchedule::default(),
            quad_points: opt.quad_points,
            extra_cases: vec![(16, 4, 0.2), (4, 1, 0.1)],
            opt_seeds: 20,
            opt_required: 18,
            step_size: opt.step_size,
            max_iters: opt.max_iters,
            grad_tol: opt.grad_tol,
            retraction: opt.retraction,
            mc_instances: 20,
            mc_samples: 100_000,
            lemma_instances: 100,
        }
    }
}

impl TheorySection {
    pub fn opt_config(&self, seed: u64) -> OptConfig {
        OptConfig {
            step_size: self.step_size,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            retraction: self.retraction,
            seed,
            quad_points: self.quad_points,
        }
    }
}

/// The 2-D dataset: clean shape plus Gaussian corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub shape: ToyShape,
    pub n: usize,
    pub sigma_data: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            shape: ToyShape::Ring { radius: 0.25 },
            n: 100_000,
            sigma_data: 0.05,
        }
    }
}

/// Denoiser architecture and the noise schedule it is trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Data scale used by the EDM preconditioning and loss weighting;
    /// estimated from the dataset when absent.
    pub sigma_data: Option<f64>,
    pub schedule: NoiseSchedule,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            sigma_data: None,
            schedule: NoiseSchedule::log_linear(0.02, 5.0).expect("valid default schedule"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mode: TrainMode,
    /// Assumed corruption level; defaults to `toy.sigma_data`.
    pub sigma_hat: Option<f64>,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub lr_final_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ambient,
            sigma_hat: None,
            batch_size: 256,
            lr: 2e-3,
            steps: 20_000,
            lr_final_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub method: DistillMethod,
    pub alpha: f64,
    pub fake_lr: f64,
    pub generator_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub weighting: GeneratorWeighting,
    pub generator_sigma: Option<f64>,
    pub fake_steps_per_generator_step: usize,
    pub lr_final_fraction: f64,
    pub ema_decay: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            method: DistillMethod::Sid,
            alpha: 1.2,
            fake_lr: 1e-3,
            generator_lr: 1e-4,
            steps: 12_000,
            batch_size: 256,
            eval_every: 400,
            weighting: GeneratorWeighting::SidNormalized,
            generator_sigma: Some(1.0),
            fake_steps_per_generator_step: 1,
            lr_final_fraction: 0.02,
            ema_decay: 0.999,
        }
    }
}

/// What `sample` draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    Generator,
    TeacherFull,
    TeacherTruncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub n: usize,
    pub source: SampleSource,
    /// Reverse steps of teacher sampling.
    pub steps: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            n: 20_000,
            source: SampleSource::Generator,
            steps: 64,
        }
    }
}

impl SamplingSection {
    pub fn teacher_mode(&self) -> Option<SampleMode> {
        match self.source {
            SampleSource::Generator => None,
            SampleSource::TeacherFull => Some(SampleMode::Full),
            SampleSource::TeacherTruncated => Some(SampleMode::Truncated),
        }
    }
}

/// What "clean" means when scoring samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleanReference {
    /// Exact moments of the clean shape; free of sampling error.
    Population,
    /// Moments of the clean points stored with the dataset.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Samples per scored source. The Fréchet estimate is biased upward by
    /// roughly `2·tr(Σ)/n`, which must stay well below the gaps being
    /// ranked.
    pub n_samples: usize,
    pub reference: CleanReference,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            reference: CleanReference::Population,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Assumed corruption levels; defaults to `{0, σ_data, 2σ_data}`.
    pub sigma_hats: Option<Vec<f64>>,
}

/// Artifacts from earlier runs. Missing entries default to the files a
/// previous command wrote into the same output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsSection {
    pub dataset: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub generator: Option<PathBuf>,
}

/// Labels of the per-purpose streams split off the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset = 1,
    TeacherInit = 2,
    Pretrain = 3,
    Distill = 4,
    Eval = 5,
    Sampling = 6,
    Theory = 7,
}

impl ExperimentConfig {
    /// The smallest valid document of the given kind.
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            seed,
            out_dir: None,
            plots: false,
            theory: TheorySection::default(),
            toy: ToySection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            distill: DistillSection::default(),
            sampling: SamplingSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            inputs: InputsSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("malformed config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization, as lowercase hex. The output
    /// directory is left out so relocated reruns stamp identical hashes.
    pub fn sha256(&self) -> String {
        let located = Self {
            out_dir: None,
            ..self.clone()
        };
        let compact = serde_json::to_string(&located).expect("config serializes");
        hex(&Sha256::digest(compact.as_bytes()))
    }

    pub fn sub_seed(&self, stream: Stream) -> u64 {
        SeedStream::new(self.seed).split(stream as u64).key()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let t = &self.theory;
        ensure!(t.d > t.r && t.r >= 1, "theory needs d > r >= 1, got d={} r={}", t.d, t.r);
        ensure!(t.sigma >= 0.0 && t.sigma.is_finite(), "theory.sigma must be >= 0");
        ensure!(t.opt_required <= t.opt_seeds, "theory.opt_required exceeds theory.opt_seeds");
        for &(d, r, s) in &t.extra_cases {
            ensure!(d > r && r >= 1 && s >= 0.0 && s.is_finite(), "invalid extra case ({d}, {r}, {s})");
        }
        t.schedule.validate()?;
        self.theory.opt_config(0).validate()?;
        self.toy.shape.validate()?;
        ensure!(self.toy.sigma_data >= 0.0 && self.toy.sigma_data.is_finite(), "toy.sigma_data must be >= 0");
        ensure!(self.toy.n >= dsd_core::toy::MIN_POINTS, "toy.n must be >= {}", dsd_core::toy::MIN_POINTS);
        ensure!(!self.model.hidden.is_empty() && !self.model.hidden.contains(&0), "model.hidden needs positive widths");
        if let Some(s) = self.model.sigma_data {
            ensure!(s > 0.0 && s.is_finite(), "model.sigma_data must be positive");
        }
        self.model.schedule.validate()?;
        self.train_config(self.sigma_hat(), 1.0).validate()?;
        self.distill_config(self.sigma_hat(), 1.0).validate()?;
        ensure!(self.eval.n_samples >= 1, "eval.n_samples must be >= 1");
        if let Some(list) = &self.sweep.sigma_hats {
            ensure!(!list.is_empty(), "sweep.sigma_hats must not be empty");
            for &s in list {
                ensure!(s >= 0.0 && s.is_finite(), "sweep sigma_hat must be >= 0, got {s}");
            }
        }
        Ok(())
    }

    pub fn sigma_hat(&self) -> f64 {
        self.pretrain.sigma_hat.unwrap_or(self.toy.sigma_data)
    }

    pub fn sweep_sigma_hats(&self) -> Vec<f64> {
        let s = self.toy.sigma_data;
        self.sweep.sigma_hats.clone().unwrap_or_else(|| vec![0.0, s, 2.0 * s])
    }

    /// Pretraining settings; `data_scale` sets the EDM loss weighting.
    pub fn train_config(&self, sigma_hat: f64, data_scale: f64) -> TrainConfig {
        let p = &self.pretrain;
        TrainConfig {
            batch_size: p.batch_size,
            lr: p.lr,
            steps: p.steps,
            schedule: self.model.schedule,
            sigma_hat,
            weighting: LossWeighting::Edm { sigma_data: data_scale },
            lr_final_fraction: p.lr_final_fraction,
            seed: self.sub_seed(Stream::Pretrain),
        }
    }

    /// The distillation settings; `data_scale` feeds the fake net's loss
    /// weighting, which must match the teacher's.
    pub fn distill_config(&self, sigma_hat: f64, data_scale: f64) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            method: d.method,
            mode: self.pretrain.mode,
            alpha: d.alpha,
            fake_lr: d.fake_lr,
            generator_lr: d.generator_lr,
            steps: d.steps,
            batch_size: d.batch_size,
            sigma_hat,
            schedule: self.model.schedule,
            seed: self.sub_seed(Stream::Distill),
            eval_every: d.eval_every,
            weighting: d.weighting,
            fake_weighting: LossWeighting::Edm { sigma_data: data_scale },
            generator_sigma: d.generator_sigma,
            fake_steps_per_generator_step: d.fake_steps_per_generator_step,
            lr_final_fraction: d.lr_final_fraction,
            ema_decay: d.ema_decay,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
