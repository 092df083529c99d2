use std::collections::BTreeSet;

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::tap_distances;
use crate::networks::{ImageBatch, LossNetwork};

const CHUNK: usize = 16;

fn chunks(images: &ImageBatch) -> Result<Vec<ImageBatch>> {
    let n = images.batch();
    (0..n)
        .step_by(CHUNK)
        .map(|start| Ok(ImageBatch::from_generator(images.tensor().narrow(0, start, CHUNK.min(n - start))?)))
        .collect()
}

/// Per-pair three-tap perceptual distance between outputs and ground truth.
pub fn semantic_distances(outputs: &ImageBatch, ground_truth: &ImageBatch, phi: &LossNetwork) -> Result<Vec<f64>> {
    if outputs.tensor().dims() != ground_truth.tensor().dims() {
        return Err(Error::Dimension(format!(
            "semantic accuracy needs identity-aligned sets of equal shape, got {:?} and {:?}",
            outputs.tensor().dims(),
            ground_truth.tensor().dims()
        )));
    }
    let mut out = Vec::with_capacity(outputs.batch());
    for (o, g) in chunks(outputs)?.iter().zip(chunks(ground_truth)?) {
        let d = tap_distances(&phi.extract_taps(o)?, &phi.extract_taps(&g)?)?;
        out.extend(d.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Mean feature-space distance between translated outputs and their
/// ground-truth photos. Lower is better.
pub fn semantic_accuracy(outputs: &ImageBatch, ground_truth: &ImageBatch, phi: &LossNetwork) -> Result<f64> {
    let d = semantic_distances(outputs, ground_truth, phi)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Unit-norm identity embeddings `(n, d)` of a batch under `phi`.
pub fn embed(images: &ImageBatch, phi: &LossNetwork) -> Result<Tensor> {
    let parts = chunks(images)?.iter().map(|c| phi.embedding(c)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(t.broadcast_div(&norm)?)
}

/// One unit embedding per identity.
#[derive(Clone, Debug)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: Tensor,
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (n, _) = embeddings.dims2().map_err(|_| Error::Dimension("gallery embeddings must be 2-D".into()))?;
        if n != ids.len() || n == 0 {
            return Err(Error::Dimension(format!("{} gallery ids for {n} embeddings", ids.len())));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Domain("gallery ids must be unique".into()));
        }
        let norms: Vec<f64> =
            embeddings.to_dtype(DType::F64)?.sqr()?.sum(1)?.sqrt()?.to_vec1::<f64>()?;
        if let Some(v) = norms.iter().find(|v| (**v - 1.0).abs() > 1e-4) {
            return Err(Error::Domain(format!("gallery embeddings must be unit-norm, found norm {v}")));
        }
        Ok(Self { ids, embeddings: embeddings.to_dtype(DType::F64)? })
    }

    pub fn from_images(ids: Vec<String>, photos: &ImageBatch, phi: &LossNetwork) -> Result<Self> {
        Self::new(ids, embed(photos, phi)?)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Index of the most cosine-similar gallery entry for each probe row.
    pub fn nearest(&self, probes: &Tensor) -> Result<Vec<usize>> {
        let p = normalize_rows(&probes.to_dtype(DType::F64)?)?;
        let sims = p.matmul(&self.embeddings.t()?)?;
        let idx: Vec<u32> = sims.argmax(D::Minus1)?.to_vec1()?;
        Ok(idx.into_iter().map(|i| i as usize).collect())
    }
}

/// Whether each probe's nearest gallery entry carries its own identity.
pub fn rank1_hits(probes: &Tensor, probe_ids: &[String], gallery: &Gallery) -> Result<Vec<bool>> {
    if probes.dims().first() != Some(&probe_ids.len()) {
        return Err(Error::Dimension(format!("{} probe ids for probes of shape {:?}", probe_ids.len(), probes.dims())));
    }
    if let Some(id) = probe_ids.iter().find(|id| !gallery.ids.contains(id)) {
        return Err(Error::Protocol(format!("probe identity `{id}` is not in the gallery")));
    }
    let nearest = gallery.nearest(probes)?;
    Ok(nearest.iter().zip(probe_ids).map(|(&g, id)| gallery.ids[g] == *id).collect())
}

/// Rank-1 identification accuracy in percent.
pub fn rank1_accuracy(probes: &Tensor, probe_ids: &[String], gallery: &Gallery) -> Result<f64> {
    let hits = rank1_hits(probes, probe_ids, gallery)?;
    Ok(percent(&hits))
}

fn percent(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    100.0 * hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

/// Mean and sample standard deviation of per-repeat accuracies (percent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatedAccuracy {
    pub mean: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl RepeatedAccuracy {
    pub fn from_values(per_repeat: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if per_repeat.is_empty() || per_repeat.len() != seeds.len() {
            return Err(Error::Config("need at least one repeat and one seed per repeat".into()));
        }
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let std = if per_repeat.len() > 1 {
            (per_repeat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std, per_repeat, seeds })
    }
}

/// Evaluation-only repeats: each repeat scores a bootstrap resample of the
/// probes, drawn with seed `seed + r`.
pub fn bootstrap_identification(hits: &[bool], n_repeats: usize, seed: u64) -> Result<RepeatedAccuracy> {
    if n_repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if hits.is_empty() {
        return Err(Error::Protocol("no probes to identify".into()));
    }
    let seeds: Vec<u64> = (0..n_repeats as u64).map(|r| seed.wrapping_add(r)).collect();
    let values = seeds
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let sample: Vec<bool> = (0..hits.len()).map(|_| hits[rng.random_range(0..hits.len())]).collect();
            percent(&sample)
        })
        .collect();
    RepeatedAccuracy::from_values(values, seeds)
}
