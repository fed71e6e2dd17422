use rand::Rng;

use super::layers::Conv;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamStore, Real, Var};

/// Squeeze-and-excitation channel attention:
/// `X * sigmoid(W2 · relu(W1 · pool(X)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = bottleneck_width(channels, reduction)?;
        Ok(ChannelAttention {
            fc1: Conv::pointwise(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Conv::pointwise(store, &format!("{name}.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        channel_attention(g, store, x, self)
    }
}

/// Hidden width of the attention bottleneck.
pub fn bottleneck_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 {
        return Err(Error::config("channel attention reduction must be at least 1"));
    }
    let hidden = channels / reduction;
    if hidden == 0 {
        return Err(Error::config(format!(
            "channel attention reduction {reduction} leaves no channels out of {channels}"
        )));
    }
    Ok(hidden)
}

pub fn channel_attention<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ca: &ChannelAttention) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let hidden = ca.fc1.forward(g, store, pooled)?;
    let hidden = g.activation(hidden, Activation::Relu)?;
    let weights = ca.fc2.forward(g, store, hidden)?;
    let weights = g.activation(weights, Activation::Sigmoid)?;
    g.scale_by_channel(x, weights)
}

/// `X * (W · pool(X))` with a single linear map and no activation.
#[derive(Clone, Debug)]
pub struct SimplifiedChannelAttention {
    pub fc: Conv,
}

impl SimplifiedChannelAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("simplified channel attention over zero channels"));
        }
        Ok(SimplifiedChannelAttention {
            fc: Conv::pointwise(store, &format!("{name}.fc"), channels, channels, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        simplified_channel_attention(g, store, x, self)
    }
}

pub fn simplified_channel_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    sca: &SimplifiedChannelAttention,
) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let weights = sca.fc.forward(g, store, pooled)?;
    g.scale_by_channel(x, weights)
}
