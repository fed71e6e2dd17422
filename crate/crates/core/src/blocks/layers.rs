use rand::Rng;

use crate::error::Result;
use crate::tensor::{cast, Graph, ParamId, ParamStore, Parameter, Real, Shape, Tensor, Var};

/// How a freshly registered weight is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in for weights and biases.
    KaimingUniform,
    Zeros,
    Constant(f64),
}

fn fill<T: Real>(shape: Shape, init: Init, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(v) => Tensor::full(shape, cast(v)),
        Init::KaimingUniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..shape.numel()).map(|_| cast(rng.gen_range(-bound..=bound))).collect();
            Tensor::from_vec(shape, data).expect("numel matches")
        }
    }
}

pub(crate) fn register<T: Real>(
    store: &mut ParamStore<T>,
    name: String,
    dims: Vec<usize>,
    shape: Shape,
    init: Init,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add(Parameter::new(name, dims, fill(shape, init, fan_in, rng))?)
}

/// A dense or depthwise convolution with its parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    /// Dense convolution; `pad` defaults to same-size for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn dense<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = register(
            store,
            format!("{name}.weight"),
            vec![c_out, c_in, kernel, kernel],
            Shape::new(c_out, c_in, kernel, kernel),
            init,
            fan_in,
            rng,
        )?;
        let bias = bias
            .then(|| register(store, format!("{name}.bias"), vec![c_out], Shape::new(1, c_out, 1, 1), init, fan_in, rng))
            .transpose()?;
        let pad = if stride == 1 { kernel / 2 } else { 0 };
        Ok(Conv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            depthwise: false,
        })
    }

    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::dense(store, name, c_in, c_out, 1, 1, true, Init::KaimingUniform, rng)
    }

    pub fn depthwise<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = kernel * kernel;
        let weight = register(
            store,
            format!("{name}.weight"),
            vec![channels, 1, kernel, kernel],
            Shape::new(channels, 1, kernel, kernel),
            Init::KaimingUniform,
            fan_in,
            rng,
        )?;
        let bias = Some(register(
            store,
            format!("{name}.bias"),
            vec![channels],
            Shape::new(1, channels, 1, 1),
            Init::KaimingUniform,
            fan_in,
            rng,
        )?);
        Ok(Conv {
            weight,
            bias,
            c_in: channels,
            c_out: channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
            depthwise: true,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        if self.depthwise {
            g.dwconv2d(x, w, b)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Channel layer norm with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

/// Default layer-norm stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        let gamma = register(store, format!("{name}.weight"), vec![channels], shape, Init::Constant(1.0), 1, rng)?;
        let beta = register(store, format!("{name}.bias"), vec![channels], shape, Init::Zeros, 1, rng)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layernorm_channel(x, gamma, beta, self.eps)
    }
}
