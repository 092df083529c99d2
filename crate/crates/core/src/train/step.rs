use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, NETWORK_NAMES};
use super::config::{Architecture, Mode, TrainConfig};
use super::pool::HistoryPool;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_discriminator, adversarial_loss_generator, full_objective, perceptual_cycle_loss,
    pixel_cycle_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::networks::{GeometryDiscriminator, GradMode, ImageBatch, PatchDiscriminator};
use crate::optim::{Adam, AdamConfig};

pub const STATE_FILE: &str = "state.json";
const POOLS_FILE: &str = "pools.safetensors";
const OPTIMIZER_KIND: &str = "optimizer";
const POOLS_KIND: &str = "history_pools";

/// Result of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    /// Loss of each discriminator updated in this step, keyed by network.
    pub discriminator_losses: BTreeMap<String, f64>,
}

impl StepReport {
    pub fn discriminator_updates(&self) -> usize {
        self.discriminator_losses.len()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Detached translations produced by a generator step.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub breakdown: LossBreakdown,
    pub fake_a: ImageBatch,
    pub fake_b: ImageBatch,
}

struct GeneratorPass {
    total: Tensor,
    breakdown: LossBreakdown,
    fake_a: ImageBatch,
    fake_b: ImageBatch,
}

fn generator_pass(
    bundle: &ModelBundle,
    a: &ImageBatch,
    b: &ImageBatch,
    mode: Mode,
    w: &LossWeights,
) -> Result<GeneratorPass> {
    for (name, batch) in [("a", a), ("b", b)] {
        if batch.resolution() != bundle.arch.resolution {
            return Err(Error::Dimension(format!(
                "domain {name} batch is {}², model expects {}²",
                batch.resolution(),
                bundle.arch.resolution
            )));
        }
    }
    let phi = &bundle.phi;
    let fake_b = bundle.g_ab.forward(a, GradMode::Track)?;
    let rec_a = bundle.g_ba.forward(&fake_b, GradMode::Track)?;
    let fake_a = bundle.g_ba.forward(b, GradMode::Track)?;
    let rec_b = bundle.g_ab.forward(&fake_a, GradMode::Track)?;

    let adv_patch_x = adversarial_loss_generator(&bundle.d_a.forward(&fake_a, GradMode::Frozen)?)?;
    let adv_patch_y = adversarial_loss_generator(&bundle.d_b.forward(&fake_b, GradMode::Frozen)?)?;
    let zero = Tensor::zeros((), a.dtype(), a.tensor().device())?;
    let (adv_geo_x, adv_geo_y) = if mode.uses_geometry() {
        (
            adversarial_loss_generator(&bundle.dg_a.forward(&phi.extract_taps(&fake_a)?, GradMode::Frozen)?)?,
            adversarial_loss_generator(&bundle.dg_b.forward(&phi.extract_taps(&fake_b)?, GradMode::Frozen)?)?,
        )
    } else {
        (zero.clone(), zero.clone())
    };
    let (cyc_x, cyc_y) = if mode.perceptual_cycle() {
        (perceptual_cycle_loss(a, &rec_a, phi)?, perceptual_cycle_loss(b, &rec_b, phi)?)
    } else {
        (pixel_cycle_loss(a, &rec_a)?, pixel_cycle_loss(b, &rec_b)?)
    };
    let terms = LossTerms {
        adv_patch_x: scalar(&adv_patch_x)?,
        adv_patch_y: scalar(&adv_patch_y)?,
        adv_geo_x: scalar(&adv_geo_x)?,
        adv_geo_y: scalar(&adv_geo_y)?,
        cyc_x: scalar(&cyc_x)?,
        cyc_y: scalar(&cyc_y)?,
    };
    let breakdown = full_objective(terms, w)?;
    let total = (((adv_patch_x + adv_patch_y)? * w.lambda_patch)?
        + ((adv_geo_x + adv_geo_y)? * w.lambda_geo)?
        + ((cyc_x + cyc_y)? * w.lambda_cyc)?)?;
    Ok(GeneratorPass { total, breakdown, fake_a, fake_b })
}

/// The generator objective of `mode` on one pair of batches, without any
/// update.
pub fn evaluate_objective(
    bundle: &ModelBundle,
    a: &ImageBatch,
    b: &ImageBatch,
    mode: Mode,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(generator_pass(bundle, a, b, mode, weights)?.breakdown)
}

/// Contents of `state.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub fingerprint: String,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub phi_checksum: String,
    pub checksums: BTreeMap<String, String>,
}

impl CheckpointState {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: Self = serde_json::from_str(&text).map_err(|e| Error::load(&path, e))?;
        if state.architecture.fingerprint() != state.fingerprint {
            return Err(Error::Compatibility(format!("{}: fingerprint does not match its architecture", path.display())));
        }
        Ok(state)
    }
}

/// Trainer state: the bundle, six optimizers and two history pools.
pub struct Trainer {
    bundle: ModelBundle,
    cfg: TrainConfig,
    optimizers: Vec<Adam>,
    pool_a: HistoryPool,
    pool_b: HistoryPool,
    steps: u64,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if bundle.arch.resolution != cfg.resolution {
            return Err(Error::Config(format!(
                "bundle resolution {} differs from training resolution {}",
                bundle.arch.resolution, cfg.resolution
            )));
        }
        let adam = AdamConfig { learning_rate: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8 };
        let optimizers = bundle.networks().iter().map(|(_, p)| Adam::new(adam, p)).collect::<Result<_>>()?;
        let pool_a = HistoryPool::new(cfg.pool_size, cfg.seed ^ 0x9001_a);
        let pool_b = HistoryPool::new(cfg.pool_size, cfg.seed ^ 0x9001_b);
        Ok(Self { bundle, cfg, optimizers, pool_a, pool_b, steps: 0 })
    }

    /// Same state under a config that may differ in epoch count or
    /// checkpoint cadence.
    pub(crate) fn new_resumed(mut trainer: Trainer, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        trainer.cfg = cfg;
        Ok(trainer)
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn pool_sizes(&self) -> (usize, usize) {
        (self.pool_a.len(), self.pool_b.len())
    }

    fn discriminator_update(
        &mut self,
        index: usize,
        loss: Tensor,
        losses: &mut BTreeMap<String, f64>,
        breakdown: &LossBreakdown,
        lr: f64,
    ) -> Result<()> {
        let v = scalar(&loss)?;
        let name = NETWORK_NAMES[index];
        if !v.is_finite() {
            return Err(Error::Divergence {
                term: name.to_string(),
                breakdown: Some(Box::new(*breakdown)),
                last_good_checkpoint: None,
            });
        }
        let grads = loss.backward()?;
        let params = self.bundle.networks()[index].1.clone();
        self.optimizers[index].step(&params, &grads, lr)?;
        losses.insert(name.to_string(), v);
        Ok(())
    }

    /// Joint update of both generators. Discriminator and loss-network
    /// weights are read frozen.
    pub fn generator_step(&mut self, a: &ImageBatch, b: &ImageBatch, lr: f64) -> Result<GeneratorOutput> {
        let pass = generator_pass(&self.bundle, a, b, self.cfg.mode, &self.cfg.weights)?;
        let grads = pass.total.backward()?;
        for i in 0..2 {
            let params = self.bundle.networks()[i].1.clone();
            self.optimizers[i].step(&params, &grads, lr)?;
        }
        Ok(GeneratorOutput { breakdown: pass.breakdown, fake_a: pass.fake_a.detach(), fake_b: pass.fake_b.detach() })
    }

    /// One update of each active discriminator (patch A, patch B, then
    /// geometry A, geometry B) against fakes drawn through the history pools.
    pub fn discriminator_step(
        &mut self,
        a: &ImageBatch,
        b: &ImageBatch,
        generated: &GeneratorOutput,
        lr: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let fake_a = self.pool_a.query(&generated.fake_a)?;
        let fake_b = self.pool_b.query(&generated.fake_b)?;
        let bd = generated.breakdown;
        let mut losses = BTreeMap::new();
        let patch = |d: &PatchDiscriminator, real: &ImageBatch, fake: &ImageBatch| -> Result<Tensor> {
            adversarial_loss_discriminator(&d.forward(real, GradMode::Track)?, &d.forward(fake, GradMode::Track)?)
        };
        let l = patch(&self.bundle.d_a, a, &fake_a)?;
        self.discriminator_update(2, l, &mut losses, &bd, lr)?;
        let l = patch(&self.bundle.d_b, b, &fake_b)?;
        self.discriminator_update(3, l, &mut losses, &bd, lr)?;
        if self.cfg.mode.uses_geometry() {
            let geo = |bundle: &ModelBundle, d: &GeometryDiscriminator, real: &ImageBatch, fake: &ImageBatch| {
                adversarial_loss_discriminator(
                    &d.forward(&bundle.phi.extract_taps(real)?, GradMode::Track)?,
                    &d.forward(&bundle.phi.extract_taps(fake)?, GradMode::Track)?,
                )
            };
            let l = geo(&self.bundle, &self.bundle.dg_a, a, &fake_a)?;
            self.discriminator_update(4, l, &mut losses, &bd, lr)?;
            let l = geo(&self.bundle, &self.bundle.dg_b, b, &fake_b)?;
            self.discriminator_update(5, l, &mut losses, &bd, lr)?;
        }
        Ok(losses)
    }

    /// A generator step followed by a discriminator step.
    pub fn step(&mut self, a: &ImageBatch, b: &ImageBatch, lr: f64) -> Result<StepReport> {
        let generated = self.generator_step(a, b, lr)?;
        let discriminator_losses = self.discriminator_step(a, b, &generated, lr)?;
        self.steps += 1;
        Ok(StepReport { breakdown: generated.breakdown, discriminator_losses })
    }

    /// Writes a complete, self-contained checkpoint for `epoch` completed
    /// epochs. The directory appears atomically.
    pub fn save_checkpoint(&self, dir: &Path, epoch: usize) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.bundle.save_weights(&tmp)?;
        for (opt, name) in self.optimizers.iter().zip(NETWORK_NAMES) {
            opt.to_container(OPTIMIZER_KIND).save(&tmp.join(format!("optim_{name}.safetensors")))?;
        }
        let mut pools = Container::new(POOLS_KIND);
        self.pool_a.write_into(&mut pools, "a");
        self.pool_b.write_into(&mut pools, "b");
        pools.save(&tmp.join(POOLS_FILE))?;
        let state = CheckpointState {
            epoch,
            steps: self.steps,
            fingerprint: self.bundle.arch.fingerprint(),
            architecture: self.bundle.arch.clone(),
            train: self.cfg.clone(),
            phi_checksum: self.bundle.phi.checksum()?,
            checksums: self.bundle.checksums()?,
        };
        let path = tmp.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    /// Restores everything written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointState)> {
        let state = CheckpointState::read(dir)?;
        let bundle = ModelBundle::load_weights(&state.architecture, dir, &[])?;
        if bundle.phi.checksum()? != state.phi_checksum {
            return Err(Error::Compatibility(format!("{}: loss network checksum mismatch", dir.display())));
        }
        let mut trainer = Trainer::new(bundle, state.train.clone())?;
        for (opt, name) in trainer.optimizers.iter_mut().zip(NETWORK_NAMES) {
            let path = dir.join(format!("optim_{name}.safetensors"));
            opt.restore(&Container::load(&path, DType::F32)?.expect_kind(OPTIMIZER_KIND, &path)?)?;
        }
        let path = dir.join(POOLS_FILE);
        let pools = Container::load(&path, DType::F32)?.expect_kind(POOLS_KIND, &path)?;
        trainer.pool_a = HistoryPool::read_from(&pools, "a", DType::F32)?;
        trainer.pool_b = HistoryPool::read_from(&pools, "b", DType::F32)?;
        trainer.steps = state.steps;
        Ok((trainer, state))
    }
}

/// Accepts a checkpoint directory or a run directory with a `latest` pointer.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join(super::run::CHECKPOINT_DIR).join(super::run::LATEST_FILE);
    if latest.is_file() {
        let name = std::fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
        return Ok(path.join(super::run::CHECKPOINT_DIR).join(name.trim()));
    }
    Err(Error::io(
        &path.join(STATE_FILE),
        std::io::Error::new(std::io::ErrorKind::NotFound, "not a checkpoint or run directory"),
    ))
}

/// Loads a bundle for inference. With `expected`, the checkpoint must have
/// been written for that architecture.
pub fn load_bundle(path: &Path, expected: Option<&Architecture>) -> Result<(ModelBundle, CheckpointState)> {
    let dir = resolve_checkpoint(path)?;
    let state = CheckpointState::read(&dir)?;
    if let Some(arch) = expected {
        if arch.fingerprint() != state.fingerprint {
            return Err(Error::Compatibility(format!(
                "checkpoint {} has architecture {} ({}²), requested {} ({}²)",
                dir.display(),
                state.fingerprint,
                state.architecture.resolution,
                arch.fingerprint(),
                arch.resolution
            )));
        }
    }
    let bundle = ModelBundle::load_weights(&state.architecture, &dir, &[])?;
    Ok((bundle, state))
}
