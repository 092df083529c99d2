//! The seven networks: two generators, two patch discriminators, two geometry
//! discriminators and the frozen loss network.

mod generator;
mod geometry;
mod layers;
mod loss_network;
mod params;
mod patch;
mod pretrain;

use candle_core::{DType, Tensor};

pub use generator::{Generator, GeneratorSpec};
pub use geometry::{ConvLayerInfo, GeometryDiscriminator, GeometryDiscriminatorSpec};
pub use layers::GradMode;
pub use loss_network::{
    build_loss_network, InputNormalization, LossNetwork, LossNetworkConfig, LossNetworkProvider,
    LossNetworkSpec, SyntheticPretraining,
};
pub use params::ParamStore;
pub use patch::{PatchDiscriminator, PatchDiscriminatorSpec};

use crate::error::{Error, Result};

/// Checks that `resolution` is a power of two no smaller than 32.
pub fn validate_resolution(resolution: usize) -> Result<()> {
    if resolution < 32 || !resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "resolution {resolution} is unsupported: it must be a power of two and at least 32 (divisible by 32)"
        )));
    }
    Ok(())
}

/// A batch of square RGB images with values in `[-1, 1]`, `(n, 3, r, r)`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    values: Tensor,
}

impl ImageBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, c, h, w) = values
            .dims4()
            .map_err(|_| Error::Dimension(format!("image batch must be 4-D, got {:?}", values.dims())))?;
        if n == 0 || c != 3 || h != w {
            return Err(Error::Dimension(format!("image batch must be (n>0, 3, r, r), got {:?}", values.dims())));
        }
        validate_resolution(h).map_err(|e| Error::Dimension(e.to_string()))?;
        let flat = values.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(v) = flat.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("image value {v} lies outside [-1, 1]")));
        }
        Ok(Self { values })
    }

    /// Wraps generator output, which the final tanh keeps in range.
    pub(crate) fn from_generator(values: Tensor) -> Self {
        Self { values }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn resolution(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn dtype(&self) -> DType {
        self.values.dtype()
    }

    pub fn detach(&self) -> Self {
        Self { values: self.values.detach() }
    }

    pub fn item(&self, i: usize) -> Result<Self> {
        Ok(Self { values: self.values.narrow(0, i, 1)? })
    }

    pub fn concat(batches: &[ImageBatch]) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Dimension("cannot concatenate zero image batches".into()));
        }
        let ts: Vec<&Tensor> = batches.iter().map(|b| &b.values).collect();
        Ok(Self { values: Tensor::cat(&ts, 0)? })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { values: self.values.to_dtype(dtype)? })
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn image_batch_validation() {
        let ok = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ImageBatch::new(ok).unwrap().resolution(), 32);
        let bad_channels = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ImageBatch::new(bad_channels), Err(Error::Dimension(_))));
        let not_square = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(ImageBatch::new(not_square).is_err());
        let odd = Tensor::zeros((1, 3, 48, 48), DType::F32, &Device::Cpu).unwrap();
        assert!(ImageBatch::new(odd).is_err());
        let hot = Tensor::full(1.5f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        assert!(matches!(ImageBatch::new(hot), Err(Error::Domain(_))));
    }

    #[test]
    fn resolution_rule() {
        for r in [32, 64, 128, 256] {
            assert!(validate_resolution(r).is_ok());
        }
        for r in [0, 16, 48, 100] {
            assert!(matches!(validate_resolution(r), Err(Error::Config(_))));
        }
    }
}
