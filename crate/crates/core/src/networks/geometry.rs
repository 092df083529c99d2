use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, GradMode, Init};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::losses::{FeatureTaps, ScoreMap};
use crate::ops::{instance_norm, leaky_relu, sigmoid, ConvGeometry, PadMode};

/// Discriminator over the loss network's three taps. Every conv is 4×4,
/// stride 2, padding 1. Tap 1 feeds conv1; tap 2 is concatenated onto conv1's
/// output and tap 3 onto conv2's output; the remaining convs shrink the map to
/// a single prediction per image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDiscriminatorSpec {
    /// Output widths of every conv except the final one-channel conv.
    pub conv_widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub tap_channel_counts: [usize; 3],
    pub tap1_size: usize,
    pub instance_norm: bool,
}

/// Structural description of one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvLayerInfo {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub output_size: usize,
}

impl GeometryDiscriminatorSpec {
    /// Widths `4b, 8b, 8b, 8b, ...` truncated to the depth implied by
    /// `tap1_size`; `b = 64` gives 256, 512, 512, 512 at 256² input.
    pub fn standard(tap1_size: usize, tap_channel_counts: [usize; 3], base_width: usize) -> Result<Self> {
        let layers = Self::layer_count_for(tap1_size)?;
        let conv_widths = (0..layers - 1).map(|i| if i == 0 { 4 * base_width } else { 8 * base_width }).collect();
        let spec = Self { conv_widths, kernel: 4, stride: 2, tap_channel_counts, tap1_size, instance_norm: true };
        spec.validate()?;
        Ok(spec)
    }

    /// `log2(tap1_size)`; at least three so that both extra taps have a home.
    pub fn layer_count_for(tap1_size: usize) -> Result<usize> {
        if !tap1_size.is_power_of_two() || tap1_size < 8 {
            return Err(Error::Config(format!(
                "tap 1 size {tap1_size} must be a power of two of at least 8 (input resolution of at least 64)"
            )));
        }
        Ok(tap1_size.trailing_zeros() as usize)
    }

    pub fn layer_count(&self) -> usize {
        self.conv_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::layer_count_for(self.tap1_size)?;
        if self.layer_count() != expected {
            return Err(Error::Config(format!(
                "geometry discriminator needs {expected} convs for {s}x{s} taps, spec has {}",
                self.layer_count(),
                s = self.tap1_size
            )));
        }
        if self.kernel != 4 || self.stride != 2 {
            return Err(Error::Config("geometry discriminator convs are 4x4 with stride 2".into()));
        }
        if self.conv_widths.contains(&0) || self.tap_channel_counts.contains(&0) {
            return Err(Error::Config("geometry discriminator widths must be positive".into()));
        }
        Ok(())
    }

    /// Per-layer channel and size bookkeeping, including the concatenations.
    pub fn layers(&self) -> Vec<ConvLayerInfo> {
        let [c1, c2, c3] = self.tap_channel_counts;
        let mut outs = self.conv_widths.clone();
        outs.push(1);
        let mut size = self.tap1_size;
        let mut prev = c1;
        outs.iter()
            .enumerate()
            .map(|(i, &out)| {
                let in_channels = match i {
                    0 => c1,
                    1 => prev + c2,
                    2 => prev + c3,
                    _ => prev,
                };
                size /= self.stride;
                prev = out;
                ConvLayerInfo { in_channels, out_channels: out, kernel: self.kernel, stride: self.stride, output_size: size }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GeometryDiscriminator {
    spec: GeometryDiscriminatorSpec,
    params: ParamStore,
    convs: Vec<Conv>,
}

impl GeometryDiscriminator {
    pub fn new<R: Rng>(spec: &GeometryDiscriminatorSpec, dtype: DType, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new(dtype);
        let geom = ConvGeometry::new(spec.stride, 1, PadMode::Zero);
        let convs = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let name = format!("conv{}", i + 1);
                Conv::new(&mut p, &name, l.in_channels, l.out_channels, l.kernel, geom, true, Init::Normal(0.02), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), params: p, convs })
    }

    pub fn spec(&self) -> &GeometryDiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Layer info read back from the instantiated weights.
    pub fn built_layers(&self) -> Vec<ConvLayerInfo> {
        let mut size = self.spec.tap1_size;
        self.convs
            .iter()
            .map(|c| {
                let g = c.geometry();
                size = g.out_len(size, c.kernel()).unwrap_or(0);
                ConvLayerInfo {
                    in_channels: c.in_channels(),
                    out_channels: c.out_channels(),
                    kernel: c.kernel(),
                    stride: g.stride,
                    output_size: size,
                }
            })
            .collect()
    }

    pub fn forward(&self, taps: &FeatureTaps, mode: GradMode) -> Result<ScoreMap> {
        let (t1, t2, t3) = (&taps.tap1, &taps.tap2, &taps.tap3);
        if t1.height() != self.spec.tap1_size {
            return Err(Error::Dimension(format!(
                "geometry discriminator expects {s}x{s} tap 1, got {}x{}",
                t1.height(),
                t1.width(),
                s = self.spec.tap1_size
            )));
        }
        let channels = [t1.channels(), t2.channels(), t3.channels()];
        if channels != self.spec.tap_channel_counts {
            return Err(Error::Config(format!(
                "tap channels {channels:?} do not match the geometry discriminator's {:?}",
                self.spec.tap_channel_counts
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = t1.tensor().clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = match i {
                1 => Tensor::cat(&[&h, t2.tensor()], 1)?,
                2 => Tensor::cat(&[&h, t3.tensor()], 1)?,
                _ => h,
            };
            h = conv.forward(&h, mode)?;
            if i == last {
                break;
            }
            if i > 0 && self.spec.instance_norm {
                h = instance_norm(&h)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        Ok(ScoreMap::from_probabilities(sigmoid(&h)?))
    }
}
