use candle_core::{Tensor, Var};
use rand::Rng;

use super::params::ParamStore;
use crate::error::Result;
use crate::ops::{self, ConvGeometry};

/// Whether a forward pass should record gradients for the network's own
/// parameters. Inputs keep their gradient path either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Track,
    Frozen,
}

fn read(var: &Var, mode: GradMode) -> Tensor {
    match mode {
        GradMode::Track => var.as_tensor().clone(),
        GradMode::Frozen => var.as_tensor().detach(),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// N(0, std²), the usual GAN initialization.
    Normal(f64),
    /// N(0, 2 / fan_in).
    He,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let std = init.std(c_in * kernel * kernel);
        let weight = store.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std, rng)?;
        let bias = if bias { Some(store.zeros(&format!("{name}.bias"), &[c_out])?) } else { None };
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, x: &Tensor, mode: GradMode) -> Result<Tensor> {
        let y = ops::conv2d(x, &read(&self.weight, mode), self.geom)?;
        add_bias(y, self.bias.as_ref(), mode)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub(crate) struct UpConv {
    weight: Var,
    bias: Option<Var>,
}

impl UpConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let std = init.std(c_in * 9);
        let weight = store.normal(&format!("{name}.weight"), &[c_in, c_out, 3, 3], std, rng)?;
        let bias = if bias { Some(store.zeros(&format!("{name}.bias"), &[c_out])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor, mode: GradMode) -> Result<Tensor> {
        let y = ops::conv_transpose2d(x, &read(&self.weight, mode), 2, 1, 1)?;
        add_bias(y, self.bias.as_ref(), mode)
    }
}

fn add_bias(y: Tensor, bias: Option<&Var>, mode: GradMode) -> Result<Tensor> {
    match bias {
        None => Ok(y),
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&read(b, mode).reshape((1, c, 1, 1))?)?)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[d_out, d_in], (1.0 / d_in as f64).sqrt(), rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor, mode: GradMode) -> Result<Tensor> {
        let w = read(&self.weight, mode);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&read(&self.bias, mode))?)
    }
}
