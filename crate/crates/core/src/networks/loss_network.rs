use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, GradMode, Init};
use super::params::ParamStore;
use super::{pretrain, ImageBatch};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::losses::{FeatureMap, FeatureTaps};
use crate::ops::{ConvGeometry, PadMode};

pub const LOSS_NETWORK_KIND: &str = "loss_network";
const STAGES: usize = 5;

/// VGG-style feature extractor: five stages of 3×3 convs with ReLU, each
/// followed by 2×2 max pooling. Taps are the outputs of three consecutive
/// pooling stages (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossNetworkSpec {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub tap_stages: [usize; 3],
}

impl LossNetworkSpec {
    /// The 13-conv VGG-16 layout.
    pub fn vgg16() -> Self {
        Self { stage_widths: vec![64, 128, 256, 512, 512], convs_per_stage: vec![2, 2, 3, 3, 3], tap_stages: [3, 4, 5] }
    }

    /// A narrow variant for small images and single-core runs.
    pub fn compact() -> Self {
        Self { stage_widths: vec![16, 32, 64, 64, 64], convs_per_stage: vec![1, 1, 2, 2, 2], tap_stages: [3, 4, 5] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != STAGES || self.convs_per_stage.len() != STAGES {
            return Err(Error::Config(format!("loss network needs exactly {STAGES} stages")));
        }
        if self.stage_widths.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(Error::Config("loss network stages need positive widths and conv counts".into()));
        }
        let [a, b, c] = self.tap_stages;
        if a == 0 || b != a + 1 || c != b + 1 || c > STAGES {
            return Err(Error::Config(format!(
                "tap stages {:?} must be three consecutive pooling stages in 1..={STAGES} so their sizes halve",
                self.tap_stages
            )));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.tap_stages.map(|s| self.stage_widths[s - 1])
    }

    /// Spatial sizes of the three taps for a square input.
    pub fn tap_sizes(&self, resolution: usize) -> [usize; 3] {
        self.tap_stages.map(|s| resolution >> s)
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let total = 1usize << STAGES;
        if resolution == 0 || resolution % total != 0 {
            return Err(Error::Config(format!("resolution {resolution} is not divisible by {total}")));
        }
        Ok(())
    }
}

/// Per-channel affine map `x · scale + shift` applied to `[-1, 1]` images
/// before the first conv.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNormalization {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl InputNormalization {
    pub fn identity() -> Self {
        Self { scale: [1.0; 3], shift: [0.0; 3] }
    }

    /// `[-1, 1]` → `[0, 1]` → ImageNet channel statistics.
    pub fn imagenet() -> Self {
        let mean = [0.485, 0.456, 0.406];
        let std = [0.229, 0.224, 0.225];
        Self {
            scale: [0.5 / std[0], 0.5 / std[1], 0.5 / std[2]],
            shift: [(0.5 - mean[0]) / std[0], (0.5 - mean[1]) / std[1], (0.5 - mean[2]) / std[2]],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Classifier pretraining on a synthetic identity population that is disjoint
/// from every generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPretraining {
    pub seed: u64,
    pub identities: usize,
    pub train_variants: usize,
    pub held_out_variants: usize,
    pub epochs: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Held-out top-1 accuracy required before the weights are frozen.
    pub min_accuracy: f64,
}

impl Default for SyntheticPretraining {
    fn default() -> Self {
        Self {
            seed: 0,
            identities: 32,
            train_variants: 10,
            held_out_variants: 4,
            epochs: 8,
            max_epochs: 20,
            learning_rate: 1e-3,
            batch_size: 8,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossNetworkProvider {
    ImportedWeights { path: PathBuf },
    SyntheticTrained(SyntheticPretraining),
    FixedRandom { seed: u64 },
}

impl LossNetworkProvider {
    pub fn name(&self) -> &'static str {
        match self {
            LossNetworkProvider::ImportedWeights { .. } => "imported-weights",
            LossNetworkProvider::SyntheticTrained(_) => "synthetic-trained",
            LossNetworkProvider::FixedRandom { .. } => "fixed-random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNetworkConfig {
    #[serde(default = "LossNetworkSpec::compact")]
    pub spec: LossNetworkSpec,
    #[serde(flatten)]
    pub provider: LossNetworkProvider,
}

impl Default for LossNetworkConfig {
    fn default() -> Self {
        Self { spec: LossNetworkSpec::compact(), provider: LossNetworkProvider::SyntheticTrained(Default::default()) }
    }
}

/// The frozen loss network Φ. Its parameters are only ever read detached.
#[derive(Clone, Debug)]
pub struct LossNetwork {
    spec: LossNetworkSpec,
    normalization: InputNormalization,
    provider: String,
    params: ParamStore,
    stages: Vec<Vec<Conv>>,
    held_out_accuracy: Option<f64>,
}

impl LossNetwork {
    fn with_random_weights(spec: &LossNetworkSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        let geom = ConvGeometry::new(1, 1, PadMode::Zero);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (s, (&width, &convs)) in spec.stage_widths.iter().zip(&spec.convs_per_stage).enumerate() {
            let mut stage = Vec::new();
            for i in 0..convs {
                let name = format!("stage{}.conv{}", s + 1, i + 1);
                stage.push(Conv::new(&mut params, &name, c_in, width, 3, geom, true, Init::He, &mut rng)?);
                c_in = width;
            }
            stages.push(stage);
        }
        Ok(Self {
            spec: spec.clone(),
            normalization: InputNormalization::identity(),
            provider: "fixed-random".into(),
            params,
            stages,
            held_out_accuracy: None,
        })
    }

    pub fn spec(&self) -> &LossNetworkSpec {
        &self.spec
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn normalization(&self) -> InputNormalization {
        self.normalization
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Held-out accuracy reached by synthetic pretraining, if any.
    pub fn held_out_accuracy(&self) -> Option<f64> {
        self.held_out_accuracy
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        if self.normalization.is_identity() {
            return Ok(x.clone());
        }
        let dev = x.device();
        let scale = Tensor::new(&self.normalization.scale, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let shift = Tensor::new(&self.normalization.shift, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }

    /// Outputs of every pooling stage up to `last` (1-based).
    pub(super) fn stage_outputs(&self, x: &Tensor, last: usize, mode: GradMode) -> Result<Vec<Tensor>> {
        let mut h = self.normalize(x)?;
        let mut outs = Vec::with_capacity(last);
        for stage in &self.stages[..last] {
            for conv in stage {
                h = conv.forward(&h, mode)?.relu()?;
            }
            h = crate::ops::max_pool2x2(&h)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        self.spec.check_resolution(x.resolution())?;
        if x.dtype() != self.params.dtype() {
            return Err(Error::Config(format!(
                "loss network holds {:?} weights but received a {:?} image batch",
                self.params.dtype(),
                x.dtype()
            )));
        }
        Ok(())
    }

    /// The three taps. Gradients flow to `x`; never to the weights.
    pub fn extract_taps(&self, x: &ImageBatch) -> Result<FeatureTaps> {
        self.check_input(x)?;
        let [a, b, c] = self.spec.tap_stages;
        let outs = self.stage_outputs(x.tensor(), c, GradMode::Frozen)?;
        FeatureTaps::new(
            FeatureMap::from_activations(outs[a - 1].clone()),
            FeatureMap::from_activations(outs[b - 1].clone()),
            FeatureMap::from_activations(outs[c - 1].clone()),
        )
    }

    /// Global mean of tap 3, L2-normalized per image: `(n, C3)`.
    pub fn embedding(&self, x: &ImageBatch) -> Result<Tensor> {
        let taps = self.extract_taps(x)?;
        let pooled = taps.tap3.tensor().mean((2, 3))?;
        let norm = pooled.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(pooled.broadcast_div(&norm)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self
            .params
            .to_container(LOSS_NETWORK_KIND)?
            .with_meta("spec", serde_json::to_string(&self.spec).expect("spec serializes"))
            .with_meta("normalization", serde_json::to_string(&self.normalization).expect("normalization serializes"))
            .with_meta("provider", self.provider.clone());
        if let Some(acc) = self.held_out_accuracy {
            c = c.with_meta("held_out_accuracy", acc.to_string());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Reads weights written by [`LossNetwork::save`] or prepared elsewhere in
    /// the same layout. The file's own spec and normalization, when present,
    /// take precedence over `fallback_spec` (whose tap stages are kept).
    pub fn load(path: &Path, fallback_spec: &LossNetworkSpec, dtype: DType) -> Result<Self> {
        let c = Container::load(path, dtype)?.expect_kind(LOSS_NETWORK_KIND, path)?;
        let mut spec = match c.meta("spec") {
            Some(s) => serde_json::from_str::<LossNetworkSpec>(s).map_err(|e| Error::load(path, e))?,
            None => fallback_spec.clone(),
        };
        spec.tap_stages = fallback_spec.tap_stages;
        let normalization = match c.meta("normalization") {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::load(path, e))?,
            None => InputNormalization::imagenet(),
        };
        let mut net = Self::with_random_weights(&spec, dtype, 0)?;
        net.params.assign(&c.tensors).map_err(|e| Error::load(path, e))?;
        net.normalization = normalization;
        net.provider = c.meta("provider").unwrap_or("imported-weights").to_string();
        net.held_out_accuracy = c.meta("held_out_accuracy").and_then(|s| s.parse().ok());
        Ok(net)
    }
}

/// Builds Φ from its provider. Synthetic pretraining renders its own
/// identity population at `resolution`.
pub fn build_loss_network(cfg: &LossNetworkConfig, resolution: usize, dtype: DType) -> Result<LossNetwork> {
    cfg.spec.validate()?;
    cfg.spec.check_resolution(resolution)?;
    match &cfg.provider {
        LossNetworkProvider::FixedRandom { seed } => LossNetwork::with_random_weights(&cfg.spec, dtype, *seed),
        LossNetworkProvider::ImportedWeights { path } => {
            let mut net = LossNetwork::load(path, &cfg.spec, dtype)?;
            net.provider = "imported-weights".into();
            Ok(net)
        }
        LossNetworkProvider::SyntheticTrained(p) => {
            let mut net = LossNetwork::with_random_weights(&cfg.spec, dtype, p.seed)?;
            let acc = pretrain::pretrain(&net, p, resolution)?;
            net.provider = "synthetic-trained".into();
            net.held_out_accuracy = Some(acc);
            Ok(net)
        }
    }
}
