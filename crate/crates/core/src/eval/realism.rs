use candle_core::{DType, Tensor};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::adversarial_loss_discriminator;
use crate::networks::{GradMode, ImageBatch, PatchDiscriminator, PatchDiscriminatorSpec};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ReferenceTraining {
    fn default() -> Self {
        Self { steps: 400, batch_size: 4, learning_rate: 2e-4, seed: 0 }
    }
}

/// Patch discriminator trained apart from every compared method, on real
/// photos against translated sketches. Its mean "real" probability on a set
/// of images is the realism proxy.
#[derive(Clone, Debug)]
pub struct ReferenceDiscriminator {
    net: PatchDiscriminator,
    steps: usize,
}

impl ReferenceDiscriminator {
    pub fn untrained(spec: &PatchDiscriminatorSpec, seed: u64) -> Result<Self> {
        let net = PatchDiscriminator::new(spec, DType::F32, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, steps: 0 })
    }

    /// `real` and `fake` are `(3, r, r)` images in `[-1, 1]`.
    pub fn train(spec: &PatchDiscriminatorSpec, real: &[Tensor], fake: &[Tensor], cfg: &ReferenceTraining) -> Result<Self> {
        if real.is_empty() || fake.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
            return Err(Error::Protocol("reference discriminator needs real and fake images and a positive budget".into()));
        }
        let mut me = Self::untrained(spec, cfg.seed)?;
        let adam = AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() };
        let mut opt = Adam::new(adam, me.net.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut draw = |pool: &[Tensor]| -> Result<ImageBatch> {
            let picks: Vec<&Tensor> = (0..cfg.batch_size).map(|_| pool.choose(&mut rng).expect("nonempty")).collect();
            Ok(ImageBatch::from_generator(Tensor::stack(&picks, 0)?.to_dtype(DType::F32)?))
        };
        for _ in 0..cfg.steps {
            let (r, f) = (draw(real)?, draw(fake)?);
            let loss = adversarial_loss_discriminator(
                &me.net.forward(&r, GradMode::Track)?,
                &me.net.forward(&f, GradMode::Track)?,
            )?;
            let grads = loss.backward()?;
            opt.step(me.net.params(), &grads, cfg.learning_rate)?;
        }
        me.steps = cfg.steps;
        Ok(me)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Per-image mean "real" probability.
    pub fn scores(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::Protocol("reference discriminator has not been trained".into()));
        }
        let images = images.to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(images.batch());
        for start in (0..images.batch()).step_by(16) {
            let len = 16.min(images.batch() - start);
            let chunk = ImageBatch::from_generator(images.tensor().narrow(0, start, len)?);
            out.extend(self.net.forward(&chunk, GradMode::Frozen)?.item_means()?);
        }
        Ok(out)
    }
}

/// Mean probability the reference discriminator assigns "real" to `outputs`.
/// Not comparable to a human fooling rate.
pub fn realism_proxy(outputs: &ImageBatch, reference: &ReferenceDiscriminator) -> Result<f64> {
    let s = reference.scores(outputs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
