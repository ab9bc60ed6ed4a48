//! Self-describing JSON checkpoints for trained networks.
//!
//! Parameters are written as shortest round-trip decimals, so save → load is
//! bit-exact. Loading re-validates the architecture against the parameter
//! count instead of trusting the document.

use serde::{Deserialize, Serialize};

use crate::diffusion::{TrainConfig, TrainMode};
use crate::distill::{DistillConfig, Generator};
use crate::error::{Error, Result};
use crate::nn::{DenseNet, Denoiser};

pub const CHECKPOINT_FORMAT: &str = "dsd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Fake,
    Generator,
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub denoiser: Denoiser,
    /// Pinned input noise level; present exactly for generators.
    #[serde(default)]
    pub generator_sigma: Option<f64>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    /// Objective the network was trained with; fake nets must reuse it.
    #[serde(default)]
    pub train_mode: Option<TrainMode>,
    #[serde(default)]
    pub distill_config: Option<DistillConfig>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    /// SHA-256 of the parameter bit patterns.
    pub param_hash: String,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    pub fn teacher(den: &Denoiser, cfg: Option<&TrainConfig>, mode: Option<TrainMode>, step: usize) -> Self {
        let mut ck = Self::build(Role::Teacher, den, None, cfg.cloned(), None, step);
        ck.train_mode = mode;
        ck
    }

    pub fn fake(den: &Denoiser, cfg: Option<&DistillConfig>, step: usize) -> Self {
        let mut ck = Self::build(Role::Fake, den, None, None, cfg.cloned(), step);
        ck.train_mode = cfg.map(|c| c.mode);
        ck
    }

    pub fn generator(g: &Generator, cfg: Option<&DistillConfig>, step: usize) -> Self {
        Self::build(Role::Generator, &g.net, Some(g.sigma), None, cfg.cloned(), step)
    }

    fn build(
        role: Role,
        den: &Denoiser,
        generator_sigma: Option<f64>,
        train_config: Option<TrainConfig>,
        distill_config: Option<DistillConfig>,
        step: usize,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            role,
            denoiser: den.clone(),
            generator_sigma,
            train_config,
            distill_config,
            train_mode: None,
            step,
            param_hash: den.net.param_hash(),
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.denoiser.net.params().iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint("refusing to write non-finite parameters".into()));
        }
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        // Rebuild through the checked constructors.
        let net = &ck.denoiser.net;
        let net = DenseNet::from_params(net.sizes(), net.activation(), net.params().to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.denoiser = Denoiser::new(net, ck.denoiser.precond).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.denoiser.net.param_hash() != ck.param_hash {
            return Err(Error::Checkpoint("parameter hash does not match the stored parameters".into()));
        }
        match (ck.role, ck.generator_sigma) {
            (Role::Generator, None) => return Err(Error::Checkpoint("generator checkpoint without sigma".into())),
            (Role::Teacher | Role::Fake, Some(_)) => {
                return Err(Error::Checkpoint("only generator checkpoints carry a sigma".into()))
            }
            _ => {}
        }
        Ok(ck)
    }

    /// The stored network as a generator; fails for other roles.
    pub fn into_generator(self) -> Result<Generator> {
        match (self.role, self.generator_sigma) {
            (Role::Generator, Some(s)) => Generator::new(self.denoiser, s),
            _ => Err(Error::Checkpoint(format!("expected a generator checkpoint, found {:?}", self.role))),
        }
    }

    /// The stored network as a denoiser; fails for generators.
    pub fn into_denoiser(self) -> Result<Denoiser> {
        match self.role {
            Role::Generator => Err(Error::Checkpoint("expected a denoiser checkpoint, found a generator".into())),
            _ => Ok(self.denoiser),
        }
    }
}
