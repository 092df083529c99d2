use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{DatasetManifest, Domain, Split};
use super::preprocess::{decode_image, preprocess};
use crate::error::{Error, Result};
use crate::networks::ImageBatch;

/// Largest fraction of undecodable files tolerated in one domain.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

/// Decodes and preprocesses every image of one domain and split, in file
/// order. Decoding runs on the rayon pool; output order does not depend on
/// the number of workers.
pub fn load_domain(
    manifest: &DatasetManifest,
    domain: Domain,
    split: Split,
    resolution: usize,
) -> Result<Vec<(String, Tensor)>> {
    let files = manifest.files(domain, split)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "domain {:?} has no {} images under {}",
            domain,
            split.dir_name(),
            manifest.domain_dir(domain).display()
        )));
    }
    let decoded: Vec<Result<(String, Tensor)>> = files
        .par_iter()
        .map(|(id, path)| Ok((id.clone(), preprocess(&decode_image(path)?, resolution)?)))
        .collect();
    let total = decoded.len();
    let mut out = Vec::with_capacity(total);
    let mut skipped = 0usize;
    for item in decoded {
        match item {
            Ok(v) => out.push(v),
            Err(e @ Error::Decode { .. }) => {
                log::warn!("skipping undecodable image: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(Error::Dataset(format!(
            "{skipped} of {total} images in domain {domain:?} could not be decoded (limit {:.0}%)",
            MAX_SKIP_FRACTION * 100.0
        )));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("domain {domain:?} has no decodable images")));
    }
    Ok(out)
}

/// Two independently shuffled image streams. Only the split directories are
/// read; the manifest's pairing is never consulted.
#[derive(Clone, Debug)]
pub struct UnpairedData {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub seed: u64,
    pub flip: bool,
}

pub fn load_unpaired(
    manifest: &DatasetManifest,
    split: Split,
    resolution: usize,
    seed: u64,
    flip: bool,
) -> Result<UnpairedData> {
    let a = load_domain(manifest, Domain::A, split, resolution)?.into_iter().map(|(_, t)| t).collect();
    let b = load_domain(manifest, Domain::B, split, resolution)?.into_iter().map(|(_, t)| t).collect();
    Ok(UnpairedData { a, b, seed, flip })
}

impl UnpairedData {
    fn domain(&self, domain: Domain) -> &[Tensor] {
        match domain {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    /// Steps per epoch: the larger domain is seen once, the smaller wraps.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.a.len().max(self.b.len()).div_ceil(batch_size.max(1))
    }

    fn rng(&self, epoch: usize, domain: Domain) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * epoch as u64 + matches!(domain, Domain::B) as u64);
        rng
    }

    /// Visiting order and flip flags of one domain in one epoch.
    pub fn epoch_order(&self, epoch: usize, domain: Domain) -> Vec<(usize, bool)> {
        let n = self.domain(domain).len();
        let mut rng = self.rng(epoch, domain);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.into_iter().map(|i| (i, self.flip && rng.random_bool(0.5))).collect()
    }

    /// `(a, b)` batches of one epoch.
    pub fn epoch(&self, epoch: usize, batch_size: usize) -> Result<Vec<(ImageBatch, ImageBatch)>> {
        let bs = batch_size.max(1);
        let steps = self.batches_per_epoch(bs);
        let oa = self.epoch_order(epoch, Domain::A);
        let ob = self.epoch_order(epoch, Domain::B);
        let take = |images: &[Tensor], order: &[(usize, bool)], step: usize| -> Result<ImageBatch> {
            let items = (0..bs)
                .map(|k| {
                    let (i, flip) = order[(step * bs + k) % order.len()];
                    let t = &images[i];
                    if flip {
                        Ok(t.flip(&[2])?)
                    } else {
                        Ok(t.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            ImageBatch::new(Tensor::stack(&items, 0)?)
        };
        (0..steps).map(|s| Ok((take(&self.a, &oa, s)?, take(&self.b, &ob, s)?))).collect()
    }
}
