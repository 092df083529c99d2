//! Tensor primitives shared by the networks.

pub mod conv;

use candle_core::{Result, Tensor};

pub use conv::{conv2d, conv_transpose2d, ConvGeometry, PadMode};

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization over the spatial axes, without affine
/// parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    centered
        .broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?
        .reshape((n, c, h, w))
}

/// 2×2, stride-2 max pooling; odd trailing rows and columns are dropped.
///
/// Built from a reshape and two max reductions because candle's own
/// `max_pool2d` scales its input gradient by the window mean of the max mask.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = if h % 2 == 0 && w % 2 == 0 { x.clone() } else { x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)? };
    x.reshape((n, c, oh, 2, ow, 2))?.max(5)?.max(3)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.maximum(&(x * slope)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + e^-x), evaluated through the composite ops so it stays differentiable.
    (x.neg()?.exp()? + 1.0)?.recip()
}
