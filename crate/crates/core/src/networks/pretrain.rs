//! Identity-classification pretraining for the synthetic loss-network
//! provider.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{GradMode, Linear};
use super::loss_network::{LossNetwork, SyntheticPretraining};
use super::params::ParamStore;
use crate::data::generate::identity_seed;
use crate::data::synthetic::SyntheticFace;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

const VERIFIER_SALT: u64 = 0xface_1d;

struct Sample {
    image: Tensor,
    label: usize,
}

/// Renders `count` random photo variations of every identity. `round`
/// selects an independent variation stream, so each training epoch sees fresh
/// nuisance draws while the held-out round stays fixed.
fn render_round(p: &SyntheticPretraining, resolution: usize, dtype: DType, round: u64, count: usize) -> Result<Vec<Sample>> {
    let groups: Vec<Result<Vec<Sample>>> = (0..p.identities)
        .into_par_iter()
        .map(|id| {
            let seed = identity_seed(p.seed, VERIFIER_SALT, id as u64);
            let face = SyntheticFace::sample(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a7);
            rng.set_stream(round);
            (0..count)
                .map(|_| {
                    let var = face.variation(&mut rng);
                    let pixels = face.render_photo_with(resolution, &var);
                    let mut planes = vec![0f32; 3 * resolution * resolution];
                    for (i, px) in pixels.iter().enumerate() {
                        for c in 0..3 {
                            planes[c * resolution * resolution + i] = (px[c] * 2.0 - 1.0) as f32;
                        }
                    }
                    let image = Tensor::from_vec(planes, (3, resolution, resolution), &Device::Cpu)?.to_dtype(dtype)?;
                    Ok(Sample { image, label: id })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for g in groups {
        out.extend(g?);
    }
    Ok(out)
}

fn logits(net: &LossNetwork, head: &Linear, x: &Tensor, mode: GradMode) -> Result<Tensor> {
    let last = net.spec().tap_stages[2];
    let outs = net.stage_outputs(x, last, mode)?;
    let pooled = outs[last - 1].mean((2, 3))?;
    head.forward(&pooled, mode)
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut onehot = vec![0f32; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &m)?;
    let picked = (logits * onehot)?.sum_keepdim(D::Minus1)?;
    Ok((lse - picked)?.mean_all()?)
}

fn accuracy(net: &LossNetwork, head: &Linear, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in samples.chunks(16) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), 0)?;
        let pred: Vec<u32> = logits(net, head, &x, GradMode::Frozen)?.argmax(D::Minus1)?.to_vec1()?;
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p as usize == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains `net` in place as an identity classifier and returns its held-out
/// top-1 accuracy. Fails when the accuracy gate is not met by `max_epochs`.
pub(super) fn pretrain(net: &LossNetwork, p: &SyntheticPretraining, resolution: usize) -> Result<f64> {
    if p.identities < 2 || p.train_variants == 0 || p.held_out_variants == 0 || p.batch_size == 0 {
        return Err(Error::Config("synthetic pretraining needs ≥ 2 identities and nonempty variant sets".into()));
    }
    let dtype = net.params().dtype();
    let held_out = render_round(p, resolution, dtype, 0, p.held_out_variants)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x9e3779b9);
    let mut head_params = ParamStore::new(dtype);
    let width = net.spec().tap_channels()[2];
    let head = Linear::new(&mut head_params, "head", width, p.identities, &mut rng)?;
    let adam_cfg = AdamConfig { learning_rate: p.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut opt_net = Adam::new(adam_cfg, net.params())?;
    let mut opt_head = Adam::new(adam_cfg, &head_params)?;
    let mut acc = 0.0;
    let total = p.max_epochs.max(p.epochs);
    for epoch in 0..total {
        let lr = p.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos());
        let train = render_round(p, resolution, dtype, epoch as u64 + 1, p.train_variants)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(p.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| &train[i].image).collect::<Vec<_>>(), 0)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = cross_entropy(&logits(net, &head, &x, GradMode::Track)?, &labels)?;
            let grads = loss.backward()?;
            opt_net.step(net.params(), &grads, lr)?;
            opt_head.step(&head_params, &grads, lr)?;
        }
        if epoch + 1 >= p.epochs {
            acc = accuracy(net, &head, &held_out)?;
            log::info!("loss-network pretraining epoch {}: held-out accuracy {:.3}", epoch + 1, acc);
            if acc > p.min_accuracy {
                return Ok(acc);
            }
        }
    }
    Err(Error::Protocol(format!(
        "synthetic loss-network pretraining reached only {:.1}% held-out accuracy (gate {:.1}%)",
        acc * 100.0,
        p.min_accuracy * 100.0
    )))
}
