use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, GradMode, Init};
use super::params::ParamStore;
use super::ImageBatch;
use crate::error::{Error, Result};
use crate::losses::ScoreMap;
use crate::ops::{instance_norm, leaky_relu, sigmoid, ConvGeometry, PadMode};

/// Patch discriminator with 4×4 kernels: `stride2_layers` stride-2 convs
/// (widths w, 2w, 4w, ...), one stride-1 conv, and a stride-1 output conv to
/// a single channel. The default three stride-2 layers give the 70×70
/// receptive field (30×30 map at 256², 6×6 at 64²).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchDiscriminatorSpec {
    pub base_width: usize,
    pub stride2_layers: usize,
}

impl Default for PatchDiscriminatorSpec {
    fn default() -> Self {
        Self { base_width: 64, stride2_layers: 3 }
    }
}

impl PatchDiscriminatorSpec {
    const KERNEL: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.stride2_layers == 0 {
            return Err(Error::Config("patch discriminator width and depth must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = (0..=self.stride2_layers).map(|i| self.base_width << i.min(3)).collect();
        widths.push(1);
        widths
    }

    /// Side length of the probability map for a square input.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in 0..self.stride2_layers {
            s = ConvGeometry::new(2, 1, PadMode::Zero).out_len(s, Self::KERNEL)?;
        }
        for _ in 0..2 {
            s = ConvGeometry::new(1, 1, PadMode::Zero).out_len(s, Self::KERNEL)?;
        }
        Some(s)
    }
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    spec: PatchDiscriminatorSpec,
    params: ParamStore,
    convs: Vec<Conv>,
}

impl PatchDiscriminator {
    pub fn new<R: Rng>(spec: &PatchDiscriminatorSpec, dtype: DType, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new(dtype);
        let widths = spec.widths();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in widths.iter().enumerate() {
            let stride = if i < spec.stride2_layers { 2 } else { 1 };
            let geom = ConvGeometry::new(stride, 1, PadMode::Zero);
            let name = format!("conv{}", i + 1);
            convs.push(Conv::new(&mut p, &name, c_in, c_out, PatchDiscriminatorSpec::KERNEL, geom, true, Init::Normal(0.02), rng)?);
            c_in = c_out;
        }
        Ok(Self { spec: spec.clone(), params: p, convs })
    }

    pub fn spec(&self) -> &PatchDiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, x: &ImageBatch, mode: GradMode) -> Result<ScoreMap> {
        let r = x.resolution();
        if self.spec.output_size(r).is_none_or(|s| s == 0) {
            return Err(Error::Dimension(format!("{r}x{r} input is too small for the patch discriminator")));
        }
        let last = self.convs.len() - 1;
        let mut h = x.tensor().clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, mode)?;
            if i == last {
                break;
            }
            if i > 0 {
                h = instance_norm(&h)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        Ok(ScoreMap::from_probabilities(sigmoid(&h)?))
    }
}
