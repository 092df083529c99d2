use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, GradMode, Init, UpConv};
use super::params::ParamStore;
use super::{validate_resolution, ImageBatch};
use crate::error::{Error, Result};
use crate::ops::{instance_norm, ConvGeometry, PadMode};

/// Residual encoder-decoder: 7×7 stem, two stride-2 downsampling convs,
/// `residual_blocks` residual blocks, two stride-2 transposed convs, 7×7 head
/// with tanh. Instance normalization throughout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
}

impl GeneratorSpec {
    pub const DOWNSAMPLING_STAGES: usize = 2;

    pub fn for_resolution(resolution: usize) -> Self {
        Self { resolution, base_width: 64, residual_blocks: Self::default_residual_blocks(resolution) }
    }

    /// 9 blocks at 256² and above, 6 below.
    pub fn default_residual_blocks(resolution: usize) -> usize {
        if resolution >= 256 {
            9
        } else {
            6
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_resolution(self.resolution)?;
        if self.base_width == 0 || self.residual_blocks == 0 {
            return Err(Error::Config("generator width and residual block count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    params: ParamStore,
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    up: Vec<UpConv>,
    head: Conv,
}

impl Generator {
    pub fn new<R: Rng>(spec: &GeneratorSpec, dtype: DType, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new(dtype);
        let init = Init::Normal(0.02);
        let w = spec.base_width;
        let reflect = |pad| ConvGeometry::new(1, pad, PadMode::Reflect);
        let stem = Conv::new(&mut p, "stem", 3, w, 7, reflect(3), true, init, rng)?;
        let mut down = Vec::new();
        let mut width = w;
        for i in 0..GeneratorSpec::DOWNSAMPLING_STAGES {
            let geom = ConvGeometry::new(2, 1, PadMode::Zero);
            down.push(Conv::new(&mut p, &format!("down{}", i + 1), width, width * 2, 3, geom, true, init, rng)?);
            width *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..spec.residual_blocks {
            let a = Conv::new(&mut p, &format!("res{i}.conv1"), width, width, 3, reflect(1), true, init, rng)?;
            let b = Conv::new(&mut p, &format!("res{i}.conv2"), width, width, 3, reflect(1), true, init, rng)?;
            blocks.push((a, b));
        }
        let mut up = Vec::new();
        for i in 0..GeneratorSpec::DOWNSAMPLING_STAGES {
            up.push(UpConv::new(&mut p, &format!("up{}", i + 1), width, width / 2, true, init, rng)?);
            width /= 2;
        }
        let head = Conv::new(&mut p, "head", width, 3, 7, reflect(3), true, init, rng)?;
        Ok(Self { spec: spec.clone(), params: p, stem, down, blocks, up, head })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn residual_block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &ImageBatch, mode: GradMode) -> Result<ImageBatch> {
        if x.resolution() != self.spec.resolution {
            return Err(Error::Dimension(format!(
                "generator built for {r}x{r} images received {s}x{s}",
                r = self.spec.resolution,
                s = x.resolution()
            )));
        }
        let mut h = instance_norm(&self.stem.forward(x.tensor(), mode)?)?.relu()?;
        for conv in &self.down {
            h = instance_norm(&conv.forward(&h, mode)?)?.relu()?;
        }
        for (a, b) in &self.blocks {
            let r = instance_norm(&a.forward(&h, mode)?)?.relu()?;
            let r = instance_norm(&b.forward(&r, mode)?)?;
            h = (h + r)?;
        }
        for conv in &self.up {
            h = instance_norm(&conv.forward(&h, mode)?)?.relu()?;
        }
        Ok(ImageBatch::from_generator(self.head.forward(&h, mode)?.tanh()?))
    }
}
