use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Real, Var};

/// A linear transform applied to one half of the gate input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearMap {
    Identity,
    /// 1×1 convolution.
    Pointwise { weight: ParamId, bias: Option<ParamId> },
}

impl LinearMap {
    fn apply<T: Real>(self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            LinearMap::Identity => Ok(x),
            LinearMap::Pointwise { weight, bias } => {
                let w = g.param(store, weight)?;
                let b = bias.map(|b| g.param(store, b)).transpose()?;
                g.conv2d(x, w, b, 1, 0)
            }
        }
    }
}

/// `f(X₁) ⊙ σ(g(X₂))` where X₁, X₂ are the channel halves of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateSpec {
    pub sigma: Activation,
    pub f: LinearMap,
    pub g: LinearMap,
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec {
            sigma: Activation::Identity,
            f: LinearMap::Identity,
            g: LinearMap::Identity,
        }
    }
}

impl GateSpec {
    pub fn with_sigma(sigma: Activation) -> Self {
        GateSpec {
            sigma,
            ..Self::default()
        }
    }
}

/// Splits channels in half and multiplies the halves elementwise.
pub fn simple_gate<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let c = g.shape(x).c;
    if c % 2 != 0 {
        return Err(Error::config(format!("simple gate needs an even channel count, got {c}")));
    }
    let (a, b) = g.split_channels(x)?;
    g.mul(a, b)
}

/// Gated linear unit over the split-channel convention of [`simple_gate`].
/// With `sigma = identity` and identity maps it records exactly the same
/// operations as `simple_gate`.
pub fn gate_general<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, spec: &GateSpec) -> Result<Var> {
    let c = g.shape(x).c;
    if c % 2 != 0 {
        return Err(Error::config(format!("gate needs an even channel count, got {c}")));
    }
    let (a, b) = g.split_channels(x)?;
    let fa = spec.f.apply(g, store, a)?;
    let gb = spec.g.apply(g, store, b)?;
    let gated = if spec.sigma == Activation::Identity {
        gb
    } else {
        g.activation(gb, spec.sigma)?
    };
    g.mul(fa, gated)
}
