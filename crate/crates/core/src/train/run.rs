use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::config::{Architecture, ModelConfig, TrainConfig};
use super::step::{resolve_checkpoint, Trainer};
use crate::data::{load_unpaired, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossTerms};
use crate::networks::{build_loss_network, LossNetwork};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_FILE: &str = "latest";

/// One line of the metrics log: epoch means of every term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub mean: LossBreakdown,
    /// `cyc_x + cyc_y`.
    pub cycle: f64,
    pub discriminators: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub architecture: Architecture,
    pub fingerprint: String,
}

#[derive(Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint under the output directory.
    pub resume: bool,
    /// Stop cleanly after this many completed epochs.
    pub halt_after_epoch: Option<usize>,
    /// Use this loss network instead of building one from the model config.
    pub loss_network: Option<LossNetwork>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub epochs_completed: usize,
    /// Every epoch of the run so far, including epochs before a resume.
    pub metrics: Vec<EpochMetrics>,
    pub phi_checksum: String,
    pub checksums: BTreeMap<String, String>,
}

pub fn read_metrics(out_dir: &Path) -> Result<Vec<EpochMetrics>> {
    let path = out_dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::load(&path, e)))
        .collect()
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(m).expect("metrics serialize")).map_err(|e| Error::io(path, e))
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig { epochs: 1, checkpoint_every: None, ..c.clone() };
    strip(a) == strip(b)
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    terms: [f64; 6],
    total: f64,
    disc: BTreeMap<String, f64>,
}

impl Accumulator {
    fn add(&mut self, r: &super::step::StepReport) {
        self.steps += 1;
        for (acc, v) in self.terms.iter_mut().zip(r.breakdown.terms.values()) {
            *acc += v;
        }
        self.total += r.breakdown.total;
        for (k, v) in &r.discriminator_losses {
            *self.disc.entry(k.clone()).or_default() += v;
        }
    }

    fn finish(self, epoch: usize, learning_rate: f64, seconds: f64) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        let t = self.terms.map(|v| v / n);
        let terms = LossTerms {
            adv_patch_x: t[0],
            adv_patch_y: t[1],
            adv_geo_x: t[2],
            adv_geo_y: t[3],
            cyc_x: t[4],
            cyc_y: t[5],
        };
        EpochMetrics {
            epoch,
            steps: self.steps,
            learning_rate,
            cycle: terms.cycle(),
            mean: LossBreakdown { terms, total: self.total / n },
            discriminators: self.disc.into_iter().map(|(k, v)| (k, v / n)).collect(),
            seconds,
        }
    }
}

/// Trains on the manifest's training split, writing under `out_dir`:
/// `resolved_config.json` at start, one `metrics.jsonl` line per epoch, and
/// `checkpoints/epoch_NNNN/` every `cfg.checkpoint_interval()` epochs and at
/// the end, with `checkpoints/latest` naming the newest one.
pub fn run_training(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let arch = Architecture::resolve(model, cfg.resolution)?;
    let ckpt_root = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
    let resolved = ResolvedRun {
        train: cfg.clone(),
        model: model.clone(),
        fingerprint: arch.fingerprint(),
        architecture: arch.clone(),
    };
    let path = out_dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&resolved).expect("config serializes"))
        .map_err(|e| Error::io(&path, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let latest_ckpt = ckpt_root.join(LATEST_FILE);
    let (mut trainer, start, mut metrics, mut last_good) = if opts.resume && latest_ckpt.is_file() {
        let dir = resolve_checkpoint(out_dir)?;
        let (mut trainer, state) = Trainer::load_checkpoint(&dir)?;
        if state.fingerprint != arch.fingerprint() || !same_run(&state.train, cfg) {
            return Err(Error::Compatibility(format!(
                "checkpoint {} was written by a different configuration",
                dir.display()
            )));
        }
        trainer = Trainer::new_resumed(trainer, cfg.clone())?;
        let mut metrics = if metrics_path.is_file() { read_metrics(out_dir)? } else { Vec::new() };
        metrics.retain(|m| m.epoch <= state.epoch);
        write_metrics(&metrics_path, &metrics)?;
        log::info!("resuming from {} after epoch {}", dir.display(), state.epoch);
        (trainer, state.epoch, metrics, Some(dir))
    } else {
        let phi = match opts.loss_network {
            Some(phi) => phi,
            None => build_loss_network(&model.loss_network, cfg.resolution, DType::F32)?,
        };
        let bundle = ModelBundle::new(&arch, phi, cfg.seed)?;
        write_metrics(&metrics_path, &[])?;
        (Trainer::new(bundle, cfg.clone())?, 0, Vec::new(), None)
    };
    let phi_checksum = trainer.bundle().phi.checksum()?;

    let data = load_unpaired(manifest, Split::Train, cfg.resolution, cfg.seed, cfg.flip)?;
    let every = cfg.checkpoint_interval();
    let mut completed = start;
    for epoch in start..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut acc = Accumulator::default();
        for (a, b) in data.epoch(epoch, cfg.batch_size)? {
            match trainer.step(&a, &b, lr) {
                Ok(r) => acc.add(&r),
                Err(Error::Divergence { term, breakdown, .. }) => {
                    return Err(Error::Divergence { term, breakdown, last_good_checkpoint: last_good });
                }
                Err(e) => return Err(e),
            }
        }
        let m = acc.finish(epoch + 1, lr, started.elapsed().as_secs_f64());
        log::info!("epoch {}/{}: total {:.4} cycle {:.4}", epoch + 1, cfg.epochs, m.mean.total, m.cycle);
        append_metrics(&metrics_path, &m)?;
        metrics.push(m);
        completed = epoch + 1;
        let halting = opts.halt_after_epoch == Some(completed);
        if completed % every == 0 || completed == cfg.epochs || halting {
            let name = format!("epoch_{completed:04}");
            let dir = ckpt_root.join(&name);
            trainer.save_checkpoint(&dir, completed)?;
            std::fs::write(&latest_ckpt, &name).map_err(|e| Error::io(&latest_ckpt, e))?;
            last_good = Some(dir);
        }
        if halting {
            break;
        }
    }
    if trainer.bundle().phi.checksum()? != phi_checksum {
        return Err(Error::Protocol("loss network weights changed during training".into()));
    }
    let final_checkpoint = match last_good {
        Some(d) => d,
        None => resolve_checkpoint(out_dir)?,
    };
    Ok(RunOutcome {
        final_checkpoint,
        epochs_completed: completed,
        metrics,
        phi_checksum,
        checksums: trainer.bundle().checksums()?,
    })
}
