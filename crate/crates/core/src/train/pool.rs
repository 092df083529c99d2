use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::networks::ImageBatch;

/// Buffer of past generated images. Once full, each query returns the new
/// image or, with probability 1/2, a uniformly drawn stored image that the new
/// one then replaces.
#[derive(Clone, Debug)]
pub struct HistoryPool {
    capacity: usize,
    images: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl HistoryPool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, images: Vec::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn query_one(&mut self, image: Tensor) -> Tensor {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }

    /// Passes each image of a (detached) batch through the pool.
    pub fn query(&mut self, batch: &ImageBatch) -> Result<ImageBatch> {
        let t = batch.tensor().detach();
        let items = (0..batch.batch()).map(|i| Ok(self.query_one(t.get(i)?))).collect::<Result<Vec<_>>>()?;
        Ok(ImageBatch::from_generator(Tensor::stack(&items, 0)?))
    }

    pub(crate) fn write_into(&self, c: &mut Container, prefix: &str) {
        for (i, t) in self.images.iter().enumerate() {
            c.tensors.insert(format!("{prefix}.{i:04}"), t.clone());
        }
        let seed = hex::encode(self.rng.get_seed());
        let state = format!("{}:{}:{}:{}", self.capacity, seed, self.rng.get_stream(), self.rng.get_word_pos());
        c.metadata.insert(format!("{prefix}.state"), state);
    }

    pub(crate) fn read_from(c: &Container, prefix: &str, dtype: DType) -> Result<Self> {
        let bad = || Error::Compatibility(format!("history pool `{prefix}` state is missing or malformed"));
        let state = c.meta(&format!("{prefix}.state")).ok_or_else(bad)?;
        let parts: Vec<&str> = state.split(':').collect();
        let [cap, seed, stream, pos] = parts[..] else { return Err(bad()) };
        let capacity: usize = cap.parse().map_err(|_| bad())?;
        let seed: [u8; 32] = hex::decode(seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(bad)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream.parse().map_err(|_| bad())?);
        rng.set_word_pos(pos.parse().map_err(|_| bad())?);
        let dot = format!("{prefix}.");
        let images = c
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&dot))
            .map(|(_, t)| Ok(t.to_dtype(dtype)?))
            .collect::<Result<Vec<_>>>()?;
        if images.len() > capacity {
            return Err(bad());
        }
        Ok(Self { capacity, images, rng })
    }
}
