use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{
    validate_resolution, GeneratorSpec, GeometryDiscriminatorSpec, LossNetworkConfig, LossNetworkSpec,
    PatchDiscriminatorSpec,
};

/// Which objective is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Perceptual cycle loss, patch and geometry discriminators.
    Full,
    /// Perceptual cycle loss and patch discriminators only.
    NoGeometry,
    /// Pixel cycle loss and patch discriminators only.
    CycleganBaseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoGeometry, Mode::CycleganBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoGeometry => "no_geometry",
            Mode::CycleganBaseline => "cyclegan_baseline",
        }
    }

    pub fn uses_geometry(self) -> bool {
        self == Mode::Full
    }

    pub fn perceptual_cycle(self) -> bool {
        self != Mode::CycleganBaseline
    }

    /// Discriminator updates per step.
    pub fn active_discriminators(self) -> usize {
        if self.uses_geometry() {
            4
        } else {
            2
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected full, no_geometry or cyclegan_baseline)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mode: Mode,
    pub weights: LossWeights,
    pub seed: u64,
    pub resolution: usize,
    pub pool_size: usize,
    pub batch_size: usize,
    /// Linear decay to zero over the second half of training.
    pub linear_decay: bool,
    /// Random horizontal flips of training images.
    pub flip: bool,
    /// Epochs between checkpoints; `max(1, epochs / 10)` when unset.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            mode: Mode::Full,
            weights: LossWeights::default(),
            seed: 0,
            resolution: 256,
            pool_size: 50,
            batch_size: 1,
            linear_decay: false,
            flip: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        validate_resolution(self.resolution)?;
        self.weights.validate_for_training()
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.epochs / 10).max(1))
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if !self.linear_decay {
            return self.learning_rate;
        }
        let half = self.epochs / 2;
        if epoch < half {
            self.learning_rate
        } else {
            let span = (self.epochs - half + 1) as f64;
            self.learning_rate * (1.0 - (epoch - half + 1) as f64 / span)
        }
    }
}

/// Network widths and the loss-network provider. The resolution comes from
/// the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator_width: usize,
    /// Residual blocks; 9 at 256² and above, 6 below when unset.
    pub residual_blocks: Option<usize>,
    pub patch: PatchDiscriminatorSpec,
    pub geometry_width: usize,
    pub geometry_instance_norm: bool,
    pub loss_network: LossNetworkConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator_width: 64,
            residual_blocks: None,
            patch: PatchDiscriminatorSpec::default(),
            geometry_width: 64,
            geometry_instance_norm: true,
            loss_network: LossNetworkConfig::default(),
        }
    }
}

/// Fully resolved shapes of every network in a bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub resolution: usize,
    pub generator: GeneratorSpec,
    pub patch: PatchDiscriminatorSpec,
    pub geometry: GeometryDiscriminatorSpec,
    pub loss_network: LossNetworkSpec,
}

impl Architecture {
    pub fn resolve(model: &ModelConfig, resolution: usize) -> Result<Self> {
        validate_resolution(resolution)?;
        model.loss_network.spec.validate()?;
        model.loss_network.spec.check_resolution(resolution)?;
        model.patch.validate()?;
        let generator = GeneratorSpec {
            resolution,
            base_width: model.generator_width,
            residual_blocks: model.residual_blocks.unwrap_or(GeneratorSpec::default_residual_blocks(resolution)),
        };
        generator.validate()?;
        let spec = &model.loss_network.spec;
        let mut geometry = GeometryDiscriminatorSpec::standard(
            spec.tap_sizes(resolution)[0],
            spec.tap_channels(),
            model.geometry_width,
        )?;
        geometry.instance_norm = model.geometry_instance_norm;
        geometry.validate()?;
        Ok(Self { resolution, generator, patch: model.patch.clone(), geometry, loss_network: spec.clone() })
    }

    /// Short hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
