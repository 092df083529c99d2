use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{split_identities, DatasetManifest, PairEntry, Splits};
use super::preprocess::save_png;
use super::synthetic::{geometry_landmarks, mean_landmark_offset, Landmarks, SyntheticFace, TextureStyle};
use crate::error::{Error, Result};
use crate::networks::validate_resolution;

pub const LANDMARKS_FILE: &str = "landmarks.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetConfig {
    pub n_identities: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub resolution: usize,
    pub geometry_jitter: f64,
    pub texture_style: TextureStyle,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 123,
            train_fraction: 100.0 / 123.0,
            seed: 0,
            resolution: 64,
            geometry_jitter: 0.05,
            texture_style: TextureStyle::Composite,
        }
    }
}

/// Seed of identity `index` in the population drawn from `population_seed`.
/// Different salts give disjoint populations.
pub fn identity_seed(population_seed: u64, salt: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(population_seed ^ salt.rotate_left(32));
    rng.set_stream(index);
    rng.next_u64()
}

pub(crate) const DATASET_SALT: u64 = 0xd47a;

pub fn identity_name(index: usize) -> String {
    format!("id{index:04}")
}

#[derive(Serialize)]
struct LandmarkRecord {
    photo: BTreeMap<&'static str, [f64; 2]>,
    sketch: BTreeMap<&'static str, [f64; 2]>,
    mean_offset_px: f64,
}

fn to_pixels(l: &Landmarks, r: usize) -> BTreeMap<&'static str, [f64; 2]> {
    l.iter().map(|(k, p)| (*k, [p[0] * r as f64, p[1] * r as f64])).collect()
}

/// Renders one identity: `(sketch, photo, sketch landmarks, photo landmarks)`.
pub fn render_identity(
    cfg: &SyntheticDatasetConfig,
    index: usize,
) -> (RgbImage, RgbImage, Landmarks, Landmarks) {
    let seed = identity_seed(cfg.seed, DATASET_SALT, index as u64);
    let face = SyntheticFace::sample(seed);
    let r = cfg.resolution;
    let sketch_geometry = face.jittered_geometry(cfg.geometry_jitter, seed ^ 0x7177e4);
    let gray = face.render_sketch(r, cfg.texture_style, &sketch_geometry, seed ^ 0x5ce7c4);
    let photo = face.render_photo(r);
    let to8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let sketch_img = RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let g = to8(gray[y as usize * r + x as usize]);
        Rgb([g, g, g])
    });
    let photo_img = RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let p = photo[y as usize * r + x as usize];
        Rgb([to8(p[0]), to8(p[1]), to8(p[2])])
    });
    (sketch_img, photo_img, geometry_landmarks(&sketch_geometry), face.landmarks())
}

/// Writes `<out>/{domain_a,domain_b}/{train,test}/<id>__0.png`, the landmark
/// records and the manifest.
pub fn generate_synthetic_dataset(cfg: &SyntheticDatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.n_identities < 2 {
        return Err(Error::Domain("need ≥ 2 identities".into()));
    }
    if !(cfg.geometry_jitter >= 0.0 && cfg.geometry_jitter.is_finite()) {
        return Err(Error::Domain(format!("geometry jitter {} must be nonnegative", cfg.geometry_jitter)));
    }
    validate_resolution(cfg.resolution)?;
    let ids: Vec<String> = (0..cfg.n_identities).map(identity_name).collect();
    let (train, test) = split_identities(&ids, cfg.train_fraction, cfg.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records: Vec<(String, PairEntry, LandmarkRecord)> = (0..cfg.n_identities)
        .into_par_iter()
        .map(|i| {
            let id = &ids[i];
            let split = if test.binary_search(id).is_ok() { "test" } else { "train" };
            let (sketch, photo, sk_l, ph_l) = render_identity(cfg, i);
            let a = format!("domain_a/{split}/{id}__0.png");
            let b = format!("domain_b/{split}/{id}__0.png");
            save_png(&sketch, &out_dir.join(&a))?;
            save_png(&photo, &out_dir.join(&b))?;
            let record = LandmarkRecord {
                mean_offset_px: mean_landmark_offset(&sk_l, &ph_l) * cfg.resolution as f64,
                photo: to_pixels(&ph_l, cfg.resolution),
                sketch: to_pixels(&sk_l, cfg.resolution),
            };
            Ok((id.clone(), PairEntry { a, b }, record))
        })
        .collect::<Result<_>>()?;

    let mut pairing = BTreeMap::new();
    let mut landmarks = BTreeMap::new();
    for (id, pair, record) in records {
        pairing.insert(id.clone(), pair);
        landmarks.insert(id, record);
    }
    let lm_path = out_dir.join(LANDMARKS_FILE);
    let text = serde_json::to_string_pretty(&landmarks).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(&lm_path, text).map_err(|e| Error::io(&lm_path, e))?;

    let mut manifest = DatasetManifest::new(out_dir, cfg.resolution, Splits { train, test }, Some(pairing))?;
    manifest.source =
        Some(serde_json::json!({ "generator": "synthetic_faces", "config": serde_json::to_value(cfg).unwrap_or_default() }));
    manifest.save()?;
    Ok(manifest)
}

/// Mean sketch-to-photo landmark offset in pixels across a generated dataset.
pub fn mean_dataset_landmark_offset(root: &Path) -> Result<f64> {
    let path = root.join(LANDMARKS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Dataset(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| Error::Dataset("landmark file is not an object".into()))?;
    let offsets: Vec<f64> = obj.values().filter_map(|r| r["mean_offset_px"].as_f64()).collect();
    if offsets.is_empty() {
        return Err(Error::Dataset("landmark file is empty".into()));
    }
    Ok(offsets.iter().sum::<f64>() / offsets.len() as f64)
}
