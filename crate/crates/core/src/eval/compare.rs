use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::metrics::{
    bootstrap_identification, embed, rank1_hits, semantic_accuracy, Gallery, RepeatedAccuracy,
};
use super::realism::{realism_proxy, ReferenceDiscriminator, ReferenceTraining};
use crate::data::preprocess::save_png;
use crate::data::{decode_image, preprocess, resplit_dataset, to_rgb_image, DatasetManifest, Domain, Split};
use crate::error::{Error, Result};
use crate::networks::{build_loss_network, ImageBatch, LossNetwork, LossNetworkConfig, LossNetworkProvider};
use crate::train::{load_bundle, run_training, Direction, Mode, ModelBundle, ModelConfig, RunOptions, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatProtocol {
    /// Fresh identity split and a retrained model per repeat.
    Retrain,
    /// Fixed checkpoints; each repeat scores a bootstrap resample of the
    /// test probes.
    EvaluationOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub seed: u64,
    pub protocol: RepeatProtocol,
    /// Seed of the fixed-random loss network used for the independent
    /// semantic-accuracy column.
    pub fixed_random_seed: u64,
    pub reference: ReferenceTraining,
    pub grids: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            seed: 0,
            protocol: RepeatProtocol::Retrain,
            fixed_random_seed: 0,
            reference: ReferenceTraining::default(),
            grids: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Machine-readable evaluation of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub method_name: String,
    pub mode: Mode,
    pub checkpoint: PathBuf,
    /// Mean three-tap feature distance to ground truth under the training
    /// loss network; lower is better.
    pub semantic_accuracy: f64,
    /// The same distance under a fixed-random loss network.
    pub semantic_accuracy_fixed_random: f64,
    /// Rank-1 identification accuracy in percent.
    pub identification_accuracy: RepeatedAccuracy,
    /// Mean reference-discriminator "real" probability. Not a fooling rate.
    pub realism_proxy: f64,
    pub n_repeats: usize,
    pub seeds: Vec<u64>,
    pub protocol: RepeatProtocol,
    pub n_test: usize,
    pub gallery_size: usize,
}

impl EvalReport {
    pub const FIELDS: [&'static str; 12] = [
        "method_name",
        "mode",
        "checkpoint",
        "semantic_accuracy",
        "semantic_accuracy_fixed_random",
        "identification_accuracy",
        "realism_proxy",
        "n_repeats",
        "seeds",
        "protocol",
        "n_test",
        "gallery_size",
    ];

    pub fn validate(&self) -> Result<()> {
        let id = &self.identification_accuracy;
        let ok = self.semantic_accuracy >= 0.0
            && self.semantic_accuracy_fixed_random >= 0.0
            && (0.0..=100.0).contains(&id.mean)
            && id.std >= 0.0
            && id.per_repeat.iter().all(|v| (0.0..=100.0).contains(v))
            && id.per_repeat.len() == self.n_repeats
            && self.seeds.len() == self.n_repeats
            && (0.0..=1.0).contains(&self.realism_proxy);
        if !ok {
            return Err(Error::Protocol(format!("report for {} violates its invariants", self.method_name)));
        }
        Ok(())
    }

    /// Checks a serialized report against the fixed field list.
    pub fn validate_json(value: &serde_json::Value) -> Result<()> {
        let obj = value.as_object().ok_or_else(|| Error::Protocol("report is not a JSON object".into()))?;
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut expected = Self::FIELDS.to_vec();
        expected.sort_unstable();
        if keys != expected {
            return Err(Error::Protocol(format!("report fields {keys:?} differ from {expected:?}")));
        }
        let report: Self = serde_json::from_value(value.clone()).map_err(|e| Error::Protocol(e.to_string()))?;
        report.validate()
    }
}

/// Test pairs, gallery and training images of one dataset.
pub struct EvalData {
    pub test_ids: Vec<String>,
    pub sketches: ImageBatch,
    pub truths: ImageBatch,
    pub gallery_ids: Vec<String>,
    pub gallery_photos: ImageBatch,
    pub train_sketches: Vec<Tensor>,
    pub train_photos: Vec<Tensor>,
}

fn first_files(manifest: &DatasetManifest, domain: Domain) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        for (id, path) in manifest.files(domain, split)? {
            out.entry(id).or_insert(path);
        }
    }
    Ok(out)
}

fn load_batch(paths: &[PathBuf], resolution: usize) -> Result<ImageBatch> {
    let images = paths.iter().map(|p| preprocess(&decode_image(p)?, resolution)).collect::<Result<Vec<_>>>()?;
    ImageBatch::new(Tensor::stack(&images, 0)?)
}

/// Reads test pairs (through the manifest pairing when present, otherwise by
/// identity), one gallery photo per identity, and the training images.
pub fn load_eval_data(manifest: &DatasetManifest, resolution: usize) -> Result<EvalData> {
    let sketches = first_files(manifest, Domain::A)?;
    let photos = first_files(manifest, Domain::B)?;
    let pairing = manifest.pairing().cloned();
    let pair_of = |id: &str| -> Result<(PathBuf, PathBuf)> {
        if let Some(p) = pairing.as_ref().and_then(|p| p.get(id)) {
            return Ok((manifest.root().join(&p.a), manifest.root().join(&p.b)));
        }
        match (sketches.get(id), photos.get(id)) {
            (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
            _ => Err(Error::Protocol(format!("test identity `{id}` lacks a sketch or a photo"))),
        }
    };
    let test_ids = manifest.ids(Split::Test).to_vec();
    if test_ids.is_empty() {
        return Err(Error::Protocol("the dataset has no test identities".into()));
    }
    let pairs = test_ids.iter().map(|id| pair_of(id)).collect::<Result<Vec<_>>>()?;
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let mut gallery_ids: Vec<String> = manifest.ids(Split::Train).iter().chain(&test_ids).cloned().collect();
    gallery_ids.sort();
    let gallery_paths = gallery_ids
        .iter()
        .map(|id| photos.get(id).cloned().ok_or_else(|| Error::Protocol(format!("identity `{id}` has no photo"))))
        .collect::<Result<Vec<_>>>()?;
    let train = |domain| -> Result<Vec<Tensor>> {
        manifest.files(domain, Split::Train)?.iter().map(|(_, p)| preprocess(&decode_image(p)?, resolution)).collect()
    };
    Ok(EvalData {
        sketches: load_batch(&a, resolution)?,
        truths: load_batch(&b, resolution)?,
        gallery_photos: load_batch(&gallery_paths, resolution)?,
        test_ids,
        gallery_ids,
        train_sketches: train(Domain::A)?,
        train_photos: train(Domain::B)?,
    })
}

fn translate_all(bundle: &ModelBundle, images: &ImageBatch) -> Result<ImageBatch> {
    let n = images.batch();
    let parts = (0..n)
        .step_by(16)
        .map(|s| {
            let chunk = ImageBatch::from_generator(images.tensor().narrow(0, s, 16.min(n - s))?);
            bundle.translate(&chunk, Direction::AToB)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&parts)
}

/// A model config that resolves to exactly `bundle`'s architecture.
fn model_config_of(bundle: &ModelBundle) -> ModelConfig {
    let arch = &bundle.arch;
    ModelConfig {
        generator_width: arch.generator.base_width,
        residual_blocks: Some(arch.generator.residual_blocks),
        patch: arch.patch.clone(),
        geometry_width: arch.geometry.conv_widths.first().map_or(1, |w| w / 4),
        geometry_instance_norm: arch.geometry.instance_norm,
        loss_network: LossNetworkConfig {
            spec: arch.loss_network.clone(),
            provider: LossNetworkProvider::FixedRandom { seed: 0 },
        },
    }
}

/// Retrains every mode on `repeats` fresh identity splits and scores rank-1
/// identification of each split's test sketches against the full gallery.
fn retrain_identification(
    manifest: &DatasetManifest,
    runs: &BTreeMap<Mode, (ModelBundle, TrainConfig)>,
    gallery: &Gallery,
    phi_eval: &LossNetwork,
    cfg: &EvalConfig,
    work_dir: &Path,
) -> Result<BTreeMap<Mode, RepeatedAccuracy>> {
    let n_train = manifest.ids(Split::Train).len();
    let total = n_train + manifest.ids(Split::Test).len();
    let fraction = n_train as f64 / total as f64;
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let mut values: BTreeMap<Mode, Vec<f64>> = BTreeMap::new();
    for (r, &seed) in seeds.iter().enumerate() {
        let dir = work_dir.join(format!("repeat_{r:02}"));
        let data = resplit_dataset(manifest, fraction, seed, &dir.join("data"))?;
        for (mode, (bundle, train_cfg)) in runs {
            let model = model_config_of(bundle);
            let tcfg = TrainConfig { seed: train_cfg.seed.wrapping_add(seed), ..train_cfg.clone() };
            let opts = RunOptions { loss_network: Some(bundle.phi.clone()), ..Default::default() };
            log::info!("retraining {mode} for repeat {}/{}", r + 1, cfg.repeats);
            let out = run_training(&data, &model, &tcfg, &dir.join(mode.name()), opts)?;
            let (trained, _) = load_bundle(&out.final_checkpoint, Some(&bundle.arch))?;
            let eval = load_eval_data(&data, bundle.arch.resolution)?;
            let outputs = translate_all(&trained, &eval.sketches)?;
            let hits = rank1_hits(&embed(&outputs, phi_eval)?, &eval.test_ids, gallery)?;
            values.entry(*mode).or_default().push(100.0 * hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64);
        }
    }
    values.into_iter().map(|(m, v)| Ok((m, RepeatedAccuracy::from_values(v, seeds.clone())?))).collect()
}

fn grid(columns: &[&Tensor]) -> Result<RgbImage> {
    let images = columns.iter().map(|t| to_rgb_image(t)).collect::<Result<Vec<_>>>()?;
    let (w, h) = images[0].dimensions();
    let mut out = RgbImage::new(w * images.len() as u32, h);
    for (i, img) in images.iter().enumerate() {
        image::imageops::replace(&mut out, img, i as i64 * w as i64, 0);
    }
    Ok(out)
}

pub fn method_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Full => "full (geometry discriminator)",
        Mode::NoGeometry => "no_geometry",
        Mode::CycleganBaseline => "cyclegan_baseline",
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Method", "Semantic accuracy", "Identification accuracy (%)", "realism_proxy"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.method_name.clone(),
                format!("{:.4}", r.semantic_accuracy),
                format!("{:.2} ± {:.2}", r.identification_accuracy.mean, r.identification_accuracy.std),
                format!("{:.3}", r.realism_proxy),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> =
            cells.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&line(&header.map(String::from)));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    if let Some(r) = reports.first() {
        out.push_str(&format!(
            "\nsemantic accuracy: lower is better. identification: rank-1 over {} repeats ({:?}), gallery of {}.\n",
            r.n_repeats, r.protocol, r.gallery_size
        ));
    }
    out.push_str("realism_proxy: reference-discriminator score on outputs; not a human fooling rate.\n");
    for r in reports {
        let vals: Vec<String> = r.identification_accuracy.per_repeat.iter().map(|v| format!("{v:.2}")).collect();
        out.push_str(&format!("per-repeat identification, {}: {}\n", r.mode, vals.join(", ")));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    pub grids: Vec<PathBuf>,
    pub table: String,
    pub report_path: PathBuf,
    pub table_path: PathBuf,
}

/// Evaluates one checkpoint per mode on the manifest's test split.
///
/// Writes `report.json` (all reports), `table.txt`, and with `cfg.grids` one
/// `grids/<id>.png` per test identity with columns sketch, ground truth,
/// full, no_geometry, cyclegan_baseline.
pub fn compare_methods(
    checkpoints: &BTreeMap<Mode, PathBuf>,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Comparison> {
    cfg.validate()?;
    let missing: Vec<&str> = Mode::ALL.iter().filter(|m| !checkpoints.contains_key(m)).map(|m| m.name()).collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing checkpoint for mode(s): {}", missing.join(", "))));
    }
    let mut runs = BTreeMap::new();
    for mode in Mode::ALL {
        let (bundle, state) = load_bundle(&checkpoints[&mode], None)?;
        if state.train.mode != mode {
            log::warn!("checkpoint for {mode} was trained in mode {}", state.train.mode);
        }
        runs.insert(mode, (bundle, state.train));
    }
    let resolution = runs[&Mode::Full].0.arch.resolution;
    if runs.values().any(|(b, _)| b.arch.resolution != resolution) {
        return Err(Error::Compatibility("checkpoints disagree on resolution".into()));
    }
    let phi_eval = runs[&Mode::Full].0.phi.clone();
    let phi_random = build_loss_network(
        &LossNetworkConfig {
            spec: phi_eval.spec().clone(),
            provider: LossNetworkProvider::FixedRandom { seed: cfg.fixed_random_seed },
        },
        resolution,
        DType::F32,
    )?;
    let data = load_eval_data(manifest, resolution)?;
    let gallery = Gallery::from_images(data.gallery_ids.clone(), &data.gallery_photos, &phi_eval)?;

    // Negatives pool every method's translations of the training sketches
    // so that no method is scored against a detector fitted to it alone.
    let train_sketches = ImageBatch::new(Tensor::stack(&data.train_sketches, 0)?)?;
    let mut fakes: Vec<Tensor> = Vec::new();
    for (bundle, _) in runs.values() {
        let out = translate_all(bundle, &train_sketches)?;
        for i in 0..out.batch() {
            fakes.push(out.tensor().get(i)?);
        }
    }
    let patch_spec = &runs[&Mode::CycleganBaseline].0.arch.patch;
    let reference = ReferenceDiscriminator::train(patch_spec, &data.train_photos, &fakes, &cfg.reference)?;

    let retrained = match cfg.protocol {
        RepeatProtocol::Retrain => {
            Some(retrain_identification(manifest, &runs, &gallery, &phi_eval, cfg, &out_dir.join("retrain"))?)
        }
        RepeatProtocol::EvaluationOnly => None,
    };

    let mut reports = Vec::new();
    let mut outputs = BTreeMap::new();
    for mode in Mode::ALL {
        let (bundle, _) = &runs[&mode];
        let out = translate_all(bundle, &data.sketches)?;
        let identification = match &retrained {
            Some(r) => r[&mode].clone(),
            None => {
                let hits = rank1_hits(&embed(&out, &phi_eval)?, &data.test_ids, &gallery)?;
                bootstrap_identification(&hits, cfg.repeats, cfg.seed)?
            }
        };
        let report = EvalReport {
            method_name: method_label(mode).to_string(),
            mode,
            checkpoint: checkpoints[&mode].clone(),
            semantic_accuracy: semantic_accuracy(&out, &data.truths, &phi_eval)?,
            semantic_accuracy_fixed_random: semantic_accuracy(&out, &data.truths, &phi_random)?,
            n_repeats: identification.per_repeat.len(),
            seeds: identification.seeds.clone(),
            identification_accuracy: identification,
            realism_proxy: realism_proxy(&out, &reference)?,
            protocol: cfg.protocol,
            n_test: data.test_ids.len(),
            gallery_size: gallery.len(),
        };
        report.validate()?;
        reports.push(report);
        outputs.insert(mode, out);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut grids = Vec::new();
    if cfg.grids {
        for (i, id) in data.test_ids.iter().enumerate() {
            let sketch = data.sketches.tensor().get(i)?;
            let truth = data.truths.tensor().get(i)?;
            let cols: Vec<Tensor> = Mode::ALL.iter().map(|m| outputs[m].tensor().get(i)).collect::<candle_core::Result<_>>()?;
            let img = grid(&[&sketch, &truth, &cols[0], &cols[1], &cols[2]])?;
            let path = out_dir.join("grids").join(format!("{id}.png"));
            save_png(&img, &path)?;
            grids.push(path);
        }
    }
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&reports).expect("reports serialize"))
        .map_err(|e| Error::io(&report_path, e))?;
    let table = render_table(&reports);
    let table_path = out_dir.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    Ok(Comparison { reports, grids, table, report_path, table_path })
}
