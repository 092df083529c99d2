//! Loss terms of the translation objective and their weighted combination.
//!
//! Every function here is a pure, differentiable map from tensors to a scalar
//! (or per-item) tensor, so the same code serves training (f32) and the
//! finite-difference checks (f64).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ImageBatch, LossNetwork};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(values.iter().all(|v| v.is_finite()))
}

/// Feature maps of one loss-network layer, `(batch, channels, height, width)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    /// Accepts a single `(c, h, w)` map or a batched `(n, c, h, w)` one.
    pub fn new(values: Tensor) -> Result<Self> {
        let values = match values.rank() {
            3 => values.unsqueeze(0)?,
            4 => values,
            r => return Err(Error::Dimension(format!("feature map must have rank 3 or 4, got rank {r}"))),
        };
        if values.dims().iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("feature map has an empty axis: {:?}", values.dims())));
        }
        if !all_finite(&values)? {
            return Err(Error::Domain("feature map contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Wraps network activations, which are finite by construction.
    pub(crate) fn from_activations(values: Tensor) -> Self {
        Self { values }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[3]
    }

    /// `N = channels × height × width`, the normalizer of the perceptual distance.
    pub fn elements_per_item(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn detach(&self) -> Self {
        Self { values: self.values.detach() }
    }
}

/// The three loss-network taps, each half the spatial size of the previous.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub tap1: FeatureMap,
    pub tap2: FeatureMap,
    pub tap3: FeatureMap,
}

impl FeatureTaps {
    pub fn new(tap1: FeatureMap, tap2: FeatureMap, tap3: FeatureMap) -> Result<Self> {
        let halves = |big: &FeatureMap, small: &FeatureMap| {
            big.height() == 2 * small.height() && big.width() == 2 * small.width()
        };
        if !halves(&tap1, &tap2) || !halves(&tap2, &tap3) {
            return Err(Error::Dimension(format!(
                "taps must halve in size: got {}x{}, {}x{}, {}x{}",
                tap1.height(),
                tap1.width(),
                tap2.height(),
                tap2.width(),
                tap3.height(),
                tap3.width()
            )));
        }
        if tap1.batch() != tap2.batch() || tap2.batch() != tap3.batch() {
            return Err(Error::Dimension("taps disagree on batch size".into()));
        }
        Ok(Self { tap1, tap2, tap3 })
    }

    pub fn batch(&self) -> usize {
        self.tap1.batch()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureMap> {
        [&self.tap1, &self.tap2, &self.tap3].into_iter()
    }

    pub fn detach(&self) -> Self {
        Self { tap1: self.tap1.detach(), tap2: self.tap2.detach(), tap3: self.tap3.detach() }
    }
}

/// Per-item `(1/N)·‖a − b‖²`, shape `(batch,)`.
pub fn perceptual_distances(a: &FeatureMap, b: &FeatureMap) -> Result<Tensor> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Dimension(format!(
            "perceptual distance needs equal shapes, got {:?} and {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let n = a.elements_per_item() as f64;
    let diff = (a.tensor() - b.tensor())?;
    Ok((diff.sqr()?.flatten_from(1)?.sum(1)? / n)?)
}

/// Batch mean of [`perceptual_distances`]; a scalar tensor.
pub fn perceptual_distance(a: &FeatureMap, b: &FeatureMap) -> Result<Tensor> {
    Ok(perceptual_distances(a, b)?.mean(0)?)
}

/// Per-item average of the perceptual distance over the three taps, `(batch,)`.
pub fn tap_distances(a: &FeatureTaps, b: &FeatureTaps) -> Result<Tensor> {
    let d1 = perceptual_distances(&a.tap1, &b.tap1)?;
    let d2 = perceptual_distances(&a.tap2, &b.tap2)?;
    let d3 = perceptual_distances(&a.tap3, &b.tap3)?;
    Ok((((d1 + d2)? + d3)? / 3.0)?)
}

/// Batch mean of [`tap_distances`].
pub fn tap_loss(a: &FeatureTaps, b: &FeatureTaps) -> Result<Tensor> {
    Ok(tap_distances(a, b)?.mean(0)?)
}

/// Feature-space cycle loss between an image batch and its reconstruction.
pub fn perceptual_cycle_loss(x: &ImageBatch, x_hat: &ImageBatch, phi: &LossNetwork) -> Result<Tensor> {
    if x.tensor().dims() != x_hat.tensor().dims() {
        return Err(Error::Dimension(format!(
            "cycle loss needs equal batch shapes, got {:?} and {:?}",
            x.tensor().dims(),
            x_hat.tensor().dims()
        )));
    }
    tap_loss(&phi.extract_taps(x)?, &phi.extract_taps(x_hat)?)
}

/// Per-element mean absolute difference, averaged over the batch.
pub fn pixel_cycle_loss(x: &ImageBatch, x_hat: &ImageBatch) -> Result<Tensor> {
    let (a, b) = (x.tensor(), x_hat.tensor());
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "cycle loss needs equal batch shapes, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Discriminator output: probabilities in `[0, 1]`, batch-major, any spatial layout.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    values: Tensor,
}

impl ScoreMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.elem_count() == 0 {
            return Err(Error::Dimension("empty score map".into()));
        }
        let flat = values.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(bad) = flat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("score {bad} lies outside [0, 1]")));
        }
        Ok(Self { values })
    }

    /// Wraps sigmoid output without the range scan.
    pub(crate) fn from_probabilities(values: Tensor) -> Self {
        Self { values }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Mean probability per batch item.
    pub fn item_means(&self) -> Result<Vec<f64>> {
        let n = self.values.dims()[0];
        Ok(self.values.reshape((n, ()))?.mean(1)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    fn clamped(&self) -> Result<Tensor> {
        Ok(self.values.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
    }
}

/// `−(E[log D(real)] + E[log(1 − D(fake))])`, means taken over every score.
pub fn adversarial_loss_discriminator(real: &ScoreMap, fake: &ScoreMap) -> Result<Tensor> {
    let real_term = real.clamped()?.log()?.mean_all()?;
    let fake_term = fake.clamped()?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real_term + fake_term)?.neg()?)
}

/// Non-saturating generator loss `−E[log D(fake)]`.
pub fn adversarial_loss_generator(fake: &ScoreMap) -> Result<Tensor> {
    Ok(fake.clamped()?.log()?.mean_all()?.neg()?)
}

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the two cycle terms.
    pub lambda_cyc: f64,
    /// Weight on the two geometry-adversarial terms.
    pub lambda_geo: f64,
    /// Weight on the two patch-adversarial terms.
    pub lambda_patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_geo: 1.0, lambda_patch: 1.0 }
    }
}

impl LossWeights {
    pub fn validate_for_training(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_geo", self.lambda_geo),
            ("lambda_patch", self.lambda_patch),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.lambda_cyc <= 0.0 {
            return Err(Error::Config("lambda_cyc must be positive for training".into()));
        }
        Ok(())
    }
}

/// The six unweighted terms of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv_patch_x: f64,
    pub adv_patch_y: f64,
    pub adv_geo_x: f64,
    pub adv_geo_y: f64,
    pub cyc_x: f64,
    pub cyc_y: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = ["adv_patch_x", "adv_patch_y", "adv_geo_x", "adv_geo_y", "cyc_x", "cyc_y"];

    pub fn values(&self) -> [f64; 6] {
        [self.adv_patch_x, self.adv_patch_y, self.adv_geo_x, self.adv_geo_y, self.cyc_x, self.cyc_y]
    }

    pub fn cycle(&self) -> f64 {
        self.cyc_x + self.cyc_y
    }
}

/// Named decomposition of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "total" {
            return Some(self.total);
        }
        LossTerms::NAMES.iter().position(|n| *n == name).map(|i| self.terms.values()[i])
    }

    /// `(name, value)` pairs in a stable order, `total` last.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        LossTerms::NAMES
            .iter()
            .copied()
            .zip(self.terms.values())
            .chain(std::iter::once(("total", self.total)))
            .collect()
    }
}

fn weighted_total(t: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_patch * (t.adv_patch_x + t.adv_patch_y)
        + w.lambda_geo * (t.adv_geo_x + t.adv_geo_y)
        + w.lambda_cyc * (t.cyc_x + t.cyc_y)
}

/// Combines the six terms into the weighted objective.
///
/// With `lambda_geo = 0` and pixel cycle terms this is the plain
/// two-adversary + cycle objective of the baseline.
pub fn full_objective(terms: LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    let breakdown = LossBreakdown { terms, total: weighted_total(&terms, w) };
    if let Some((name, _)) = breakdown.entries().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            term: name.to_string(),
            breakdown: Some(Box::new(breakdown)),
            last_good_checkpoint: None,
        });
    }
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    fn map(values: &[f64], shape: (usize, usize, usize)) -> FeatureMap {
        FeatureMap::new(Tensor::from_slice(values, shape, &Device::Cpu).unwrap()).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn scores(v: f64, shape: &[usize]) -> ScoreMap {
        ScoreMap::new(Tensor::full(v, shape, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn perceptual_distance_examples() {
        let a = map(&[1.0; 4], (1, 2, 2));
        let b = map(&[0.0; 4], (1, 2, 2));
        assert_eq!(scalar(perceptual_distance(&a, &b).unwrap()), 1.0);
        assert_eq!(scalar(perceptual_distance(&a, &a).unwrap()), 0.0);

        let a = map(&[3.0, 4.0], (1, 1, 2));
        let b = map(&[0.0, 0.0], (1, 1, 2));
        assert_eq!(scalar(perceptual_distance(&a, &b).unwrap()), 12.5);
    }

    #[test]
    fn perceptual_distance_rejects_shape_mismatch() {
        let a = map(&[0.0; 4], (1, 2, 2));
        let b = map(&[0.0; 4], (4, 1, 1));
        let err = perceptual_distance(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("[1, 1, 2, 2]") && m.contains("[1, 4, 1, 1]")));
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let t = Tensor::from_slice(&[f64::NAN, 1.0], (1, 1, 2), &Device::Cpu).unwrap();
        assert!(matches!(FeatureMap::new(t), Err(Error::Domain(_))));
    }

    #[test]
    fn taps_must_halve() {
        let t = |s: usize| FeatureMap::new(Tensor::zeros((1, 2, s, s), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(FeatureTaps::new(t(8), t(4), t(2)).is_ok());
        assert!(matches!(FeatureTaps::new(t(32), t(15), t(8)), Err(Error::Dimension(_))));
    }

    #[test]
    fn tap_average_and_batch_mean() {
        // Per-layer distances 3, 6, 9 on one item: each tap holds a single
        // element whose squared difference is the target distance.
        let one = |v: f64, s: usize| {
            FeatureMap::new(Tensor::full(v, (1, 1, s, s), &Device::Cpu).unwrap()).unwrap()
        };
        let a = FeatureTaps::new(one(3f64.sqrt(), 4), one(6f64.sqrt(), 2), one(3.0, 1)).unwrap();
        let b = FeatureTaps::new(one(0.0, 4), one(0.0, 2), one(0.0, 1)).unwrap();
        assert!((scalar(tap_loss(&a, &b).unwrap()) - 6.0).abs() < 1e-12);

        // Two items with per-item losses 2 and 4.
        let two = |v: [f64; 2]| FeatureMap::new(Tensor::from_slice(&v, (2, 1, 1, 1), &Device::Cpu).unwrap()).unwrap();
        let d = perceptual_distances(&two([2f64.sqrt(), 2.0]), &two([0.0, 0.0])).unwrap();
        assert!((scalar(d.mean(0).unwrap()) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_cycle_examples() {
        let dev = Device::Cpu;
        let x = ImageBatch::new(Tensor::full(1.0f64, (1, 3, 32, 32), &dev).unwrap()).unwrap();
        let h = ImageBatch::new(Tensor::full(0.5f64, (1, 3, 32, 32), &dev).unwrap()).unwrap();
        assert_eq!(scalar(pixel_cycle_loss(&x, &h).unwrap()), 0.5);
        assert_eq!(scalar(pixel_cycle_loss(&x, &x).unwrap()), 0.0);
    }

    #[test]
    fn adversarial_closed_forms() {
        let half = scores(0.5, &[1, 1, 1, 1]);
        let d = scalar(adversarial_loss_discriminator(&half, &half).unwrap());
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
        let spatial = scores(0.5, &[1, 1, 2, 2]);
        let d = scalar(adversarial_loss_discriminator(&spatial, &spatial).unwrap());
        assert!((d - 1.3863).abs() < 1e-4);

        assert!((scalar(adversarial_loss_generator(&half).unwrap()) - std::f64::consts::LN_2).abs() < 1e-6);
        let quarter = scores(0.25, &[3]);
        assert!((scalar(adversarial_loss_generator(&quarter).unwrap()) - 4f64.ln()).abs() < 1e-6);

        let real = scores(1.0 - PROB_EPS, &[2, 1, 3, 3]);
        let fake = scores(PROB_EPS, &[2, 1, 3, 3]);
        assert!(scalar(adversarial_loss_discriminator(&real, &fake).unwrap()) < 1e-6);
        assert!(scalar(adversarial_loss_generator(&real).unwrap()) < 1e-6);
    }

    #[test]
    fn saturated_scores_stay_finite() {
        let ones = scores(1.0, &[4]);
        let zeros = scores(0.0, &[4]);
        assert!(scalar(adversarial_loss_discriminator(&zeros, &ones).unwrap()).is_finite());
        assert!(scalar(adversarial_loss_generator(&zeros).unwrap()).is_finite());
    }

    #[test]
    fn scores_outside_unit_interval_are_rejected() {
        let t = Tensor::from_slice(&[0.5f64, 1.5], 2, &Device::Cpu).unwrap();
        assert!(matches!(ScoreMap::new(t), Err(Error::Domain(_))));
    }

    #[test]
    fn full_objective_examples() {
        let w = LossWeights::default();
        assert_eq!(full_objective(LossTerms::default(), &w).unwrap().total, 0.0);
        let terms = LossTerms { adv_patch_x: 1.0, adv_patch_y: 1.0, adv_geo_x: 1.0, adv_geo_y: 1.0, cyc_x: 2.0, cyc_y: 2.0 };
        assert_eq!(full_objective(terms, &w).unwrap().total, 44.0);
    }

    #[test]
    fn non_finite_term_is_divergence() {
        let terms = LossTerms { cyc_y: f64::INFINITY, ..Default::default() };
        match full_objective(terms, &LossWeights::default()) {
            Err(Error::Divergence { term, breakdown, .. }) => {
                assert_eq!(term, "cyc_y");
                assert!(breakdown.is_some());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate_for_training().is_ok());
        let w = LossWeights { lambda_cyc: 0.0, ..Default::default() };
        assert!(w.validate_for_training().is_err());
        let w = LossWeights { lambda_geo: -1.0, ..Default::default() };
        assert!(w.validate_for_training().is_err());
    }

    #[test]
    fn breakdown_lookup() {
        let terms = LossTerms { cyc_x: 1.5, ..Default::default() };
        let b = full_objective(terms, &LossWeights::default()).unwrap();
        assert_eq!(b.get("cyc_x"), Some(1.5));
        assert_eq!(b.get("total"), Some(15.0));
        assert_eq!(b.get("nope"), None);
        assert_eq!(b.entries().len(), 7);
        let json = serde_json::to_value(b).unwrap();
        assert_eq!(json["cyc_x"], 1.5);
        assert_eq!(json["total"], 15.0);
    }
}
