//! The recording tape and its backward pass.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, LayerNormSaved};
use super::{cast, ParamId, ParamStore, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub use super::kernels::Activation;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DwConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    AvgPool {
        x: Var,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleByChannel {
        x: Var,
        s: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Log10 {
        x: Var,
        scale: f64,
        eps: f64,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::DwConv2d { .. } => "dwconv2d",
            Op::LayerNorm { .. } => "layernorm",
            Op::Act { .. } => "activation",
            Op::AvgPool { .. } => "global_avg_pool",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::PixelUnshuffle { .. } => "pixel_unshuffle",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScaleByChannel { .. } => "scale_by_channel",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Log10 { .. } => "log10",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Instrumentation collected while recording.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Invocations per activation kind, by name.
    pub activations: BTreeMap<&'static str, usize>,
    /// Multiply-accumulates executed by convolutions.
    pub macs: u64,
}

impl OpCounters {
    /// Invocations of any nonlinear activation function.
    pub fn nonlinear_activations(&self) -> usize {
        self.activations
            .iter()
            .filter(|(name, _)| **name != Activation::Identity.name())
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Records primitive applications in topological order; one backward pass
/// per recording.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    state: TapeState,
    counters: OpCounters,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            state: TapeState::Recording,
            counters: OpCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Moves a value out of the graph, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(Shape::new(0, 0, 0, 0)))
    }

    fn check_recording(&self) -> Result<()> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(Error::State(
                "tape already consumed by backward; record a new forward pass".into(),
            )),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        self.check_recording()?;
        if let Some((i, v)) = value.first_non_finite() {
            return Err(Error::numerics(
                op.name(),
                format!("non-finite value {v} at flat index {i} of output {}", value.shape()),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Brings a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Dense convolution with zero padding. `w` has shape (c_out, c_in, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w || ws.c != xs.c {
            return Err(Error::config(format!("conv2d weight {ws} does not fit input {xs}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws.n {
                return Err(Error::config(format!("conv2d bias {} does not fit {} outputs", self.shape(b), ws.n)));
            }
        }
        let geom = ConvGeom {
            input: xs,
            c_out: ws.n,
            kernel: ws.h,
            stride,
            pad,
        };
        let out = geom.output()?;
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        )?;
        self.counters.macs += (out.numel() * xs.c * ws.h * ws.w) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(out, y)?, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Depthwise convolution, stride 1, same-size zero padding. `w` has shape (c, 1, k, k).
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.c != 1 || ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::config(format!("depthwise weight {ws} does not fit input {xs}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != xs.c {
                return Err(Error::config(format!("depthwise bias {} does not fit {} channels", self.shape(b), xs.c)));
            }
        }
        let k = ws.h;
        let y = kernels::dwconv2d_forward(xs, k, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        self.counters.macs += (xs.numel() * k * k) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(xs, y)?, Op::DwConv2d { x, w, b, k }, rg)
    }

    /// Layer normalization across channels at every spatial position.
    pub fn layernorm_channel(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.c == 0 {
            return Err(Error::config("layer norm over zero channels"));
        }
        if self.value(gamma).len() != xs.c || self.value(beta).len() != xs.c {
            return Err(Error::config(format!("layer norm affine parameters do not match {} channels", xs.c)));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config(format!("layer norm eps must be positive, got {eps}")));
        }
        let (y, saved) = kernels::layernorm_forward(
            xs,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            cast::<T>(eps),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::from_vec(xs, y)?, Op::LayerNorm { x, gamma, beta, saved }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        *self.counters.activations.entry(kind.name()).or_default() += 1;
        let y = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(x);
        self.push(y, Op::Act { x, kind }, rg)
    }

    /// Mean over each (h, w) plane: (n, c, h, w) → (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.plane() == 0 {
            return Err(Error::config("global pooling over an empty plane"));
        }
        let inv = T::one() / cast::<T>(xs.plane() as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(xs.plane())
            .map(|p| kernels::sum(p) * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), data)?, Op::AvgPool { x }, rg)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x);
        if r == 0 || xs.c % (r * r) != 0 {
            return Err(Error::config(format!("pixel_shuffle({r}) needs channels divisible by {}, got {}", r * r, xs.c)));
        }
        let (s, y) = kernels::pixel_shuffle(xs, r, self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::from_vec(s, y)?, Op::PixelShuffle { x, r }, rg)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x);
        if r == 0 || xs.h % r != 0 || xs.w % r != 0 {
            return Err(Error::config(format!("pixel_unshuffle({r}) needs spatial dims divisible by {r}, got {xs}")));
        }
        let (s, y) = kernels::pixel_unshuffle(xs, r, self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::from_vec(s, y)?, Op::PixelUnshuffle { x, r }, rg)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if start + len > xs.c {
            return Err(Error::config(format!("channel slice {start}..{} out of range for {xs}", start + len)));
        }
        let plane = xs.plane();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(xs.n * len * plane);
        for n in 0..xs.n {
            let from = (n * xs.c + start) * plane;
            data.extend_from_slice(&src[from..from + len * plane]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(Shape::new(xs.n, len, xs.h, xs.w), data)?, Op::SliceChannels { x, start }, rg)
    }

    /// Halves the channel axis into `[0, c/2)` and `[c/2, c)`.
    pub fn split_channels(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        if c % 2 != 0 {
            return Err(Error::config(format!("cannot split {c} channels in half")));
        }
        Ok((self.slice_channels(x, 0, c / 2)?, self.slice_channels(x, c / 2, c / 2)?))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::config(format!("cannot concatenate {sa} and {sb}")));
        }
        let plane = sa.plane();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa.n {
            data.extend_from_slice(&da[n * sa.c * plane..(n + 1) * sa.c * plane]);
            data.extend_from_slice(&db[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        let s = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        self.push(Tensor::from_vec(s, data)?, Op::Concat { a, b }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::config(format!("{what} needs equal shapes, got {sa} and {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul { a, b }, rg)
    }

    /// Multiplies every (n, c) plane of `x` by `s[n, c]` (or `s[0, c]` when `s`
    /// has batch size one).
    pub fn scale_by_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if ss.c != xs.c || ss.h != 1 || ss.w != 1 || !(ss.n == xs.n || ss.n == 1) {
            return Err(Error::config(format!("scale {ss} does not broadcast over {xs}")));
        }
        let plane = xs.plane();
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(plane.max(1)).enumerate() {
            let (n, c) = (i / xs.c, i % xs.c);
            let f = sv[if ss.n == 1 { c } else { n * xs.c + c }];
            for v in chunk {
                *v *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::from_vec(xs, data)?, Op::ScaleByChannel { x, s }, rg)
    }

    /// Sum of all elements as a (1, 1, 1, 1) tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::config("mean of an empty tensor"));
        }
        let s = kernels::sum(self.value(x).data()) / cast::<T>(len as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// `scale · log10(x + eps)` elementwise.
    pub fn log10(&mut self, x: Var, scale: f64, eps: f64) -> Result<Var> {
        let (sc, ep) = (cast::<T>(scale), cast::<T>(eps));
        let y = self.value(x).map(|v| sc * (v + ep).log10());
        let rg = self.rg(x);
        self.push(y, Op::Log10 { x, scale, eps }, rg)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_recording()?;
        if self.value(loss).len() != 1 {
            return Err(Error::config(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        self.state = TapeState::Consumed;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut param_grads = Vec::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let g = g.map(|g| Tensor::from_vec(node.value.shape(), g)).transpose()?;
            if let (Op::Param(id), Some(g)) = (&node.op, &g) {
                param_grads.push((*id, g.clone()));
            }
            out.push(g);
        }
        Ok(Gradients {
            by_node: out,
            params: param_grads,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    rg(*x),
                    rg(*w),
                    b.is_some_and(|b| rg(b)),
                )?;
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, db);
                }
            }
            Op::DwConv2d { x, w, b, k } => {
                let xs = self.shape(*x);
                let (dx, dw, db) =
                    kernels::dwconv2d_backward(xs, *k, val(*x), val(*w), g, rg(*x), rg(*w), b.is_some_and(|b| rg(b)));
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::layernorm_backward(self.shape(*x), saved, val(*gamma), g);
                accumulate(grads, *x, rg(*x).then_some(dx));
                accumulate(grads, *gamma, rg(*gamma).then_some(dg));
                accumulate(grads, *beta, rg(*beta).then_some(db));
            }
            Op::Act { x, kind } => {
                let dx = val(*x).iter().zip(g).map(|(&v, &d)| d * kind.derivative(v)).collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::AvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let inv = T::one() / cast::<T>(plane as f64);
                let mut dx = vec![T::zero(); xs.numel()];
                for (chunk, &d) in dx.chunks_exact_mut(plane).zip(g) {
                    chunk.fill(d * inv);
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::PixelShuffle { x, r } => {
                let (_, dx) = kernels::pixel_unshuffle(node.value.shape(), *r, g);
                accumulate(grads, *x, Some(dx));
            }
            Op::PixelUnshuffle { x, r } => {
                let (_, dx) = kernels::pixel_shuffle(node.value.shape(), *r, g);
                accumulate(grads, *x, Some(dx));
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let plane = xs.plane();
                let mut dx = vec![T::zero(); xs.numel()];
                for n in 0..xs.n {
                    let to = (n * xs.c + start) * plane;
                    let from = n * ys.c * plane;
                    dx[to..to + ys.c * plane].copy_from_slice(&g[from..from + ys.c * plane]);
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.plane();
                let (mut da, mut db) = (Vec::with_capacity(sa.numel()), Vec::with_capacity(sb.numel()));
                let per = (sa.c + sb.c) * plane;
                for chunk in g.chunks_exact(per.max(1)) {
                    da.extend_from_slice(&chunk[..sa.c * plane]);
                    db.extend_from_slice(&chunk[sa.c * plane..]);
                }
                accumulate(grads, *a, rg(*a).then_some(da));
                accumulate(grads, *b, rg(*b).then_some(db));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, rg(*a).then(|| g.to_vec()));
                accumulate(grads, *b, rg(*b).then(|| g.to_vec()));
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, rg(*a).then(|| g.to_vec()));
                accumulate(grads, *b, rg(*b).then(|| g.iter().map(|&d| -d).collect()));
            }
            Op::Mul { a, b } => {
                let da = rg(*a).then(|| g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect());
                let db = rg(*b).then(|| g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::ScaleByChannel { x, s } => {
                let xs = self.shape(*x);
                let ss = self.shape(*s);
                let plane = xs.plane();
                let sv = val(*s);
                let xv = val(*x);
                let idx = |i: usize| if ss.n == 1 { i % xs.c } else { i };
                if rg(*x) {
                    let mut dx = g.to_vec();
                    for (i, chunk) in dx.chunks_exact_mut(plane.max(1)).enumerate() {
                        let f = sv[idx(i)];
                        for v in chunk {
                            *v *= f;
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if rg(*s) {
                    let mut ds = vec![T::zero(); ss.numel()];
                    for i in 0..xs.n * xs.c {
                        ds[idx(i)] += kernels::dot(&g[i * plane..(i + 1) * plane], &xv[i * plane..(i + 1) * plane]);
                    }
                    accumulate(grads, *s, Some(ds));
                }
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Some(vec![g[0]; self.nodes[x.0].value.len()]));
            }
            Op::Mean { x } => {
                let len = self.nodes[x.0].value.len();
                let d = g[0] / cast::<T>(len as f64);
                accumulate(grads, *x, Some(vec![d; len]));
            }
            Op::Log10 { x, scale, eps } => {
                let k = cast::<T>(*scale / std::f64::consts::LN_10);
                let ep = cast::<T>(*eps);
                let dx = val(*x).iter().zip(g).map(|(&v, &d)| d * k / (v + ep)).collect();
                accumulate(grads, *x, Some(dx));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(g) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, if it required one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in tape order; a parameter used twice appears twice.
    pub fn param_grads(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    /// Adds every parameter gradient into its accumulator.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            for (acc, &d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| (n + c + h + w) as f64), true).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| c as f64 - h as f64 * 0.5 + w as f64 * 0.25);
        let x = g.leaf(xt.clone(), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.input(Tensor::scalar(0.5)).unwrap();
        let l = g.mul(s, half).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xt);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::ones(Shape::scalar()), true).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
        assert!(matches!(g.sum(x), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::ones(Shape::new(1, 2, 1, 1)), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_is_a_numerics_error() {
        let mut g = Graph::new();
        let r = g.input(t(Shape::new(1, 1, 1, 2), &[1.0, f64::NAN]));
        assert!(matches!(r, Err(Error::Numerics { .. })));
        let x = g.input(t(Shape::new(1, 1, 1, 1), &[-1.0])).unwrap();
        let r = g.log10(x, 10.0, 0.0);
        assert!(matches!(r, Err(Error::Numerics { .. })));
    }

    #[test]
    fn conv_counts_overlap() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(Shape::new(1, 1, 3, 3))).unwrap();
        let w = g.input(Tensor::ones(Shape::new(1, 1, 3, 3))).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 0, 1, 1), 9.0);
        assert_eq!(v.at(0, 0, 0, 0), 4.0);
        assert_eq!(v.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn pointwise_identity_conv_is_identity() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, h, w| (n * 7 + c * 5 + h * 3 + w) as f64 * 0.1);
        let x = g.input(xt.clone()).unwrap();
        let w = g.input(Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 })).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::ones(Shape::new(1, 2, 8, 6))).unwrap();
        let w = g.input(Tensor::ones(Shape::new(4, 2, 2, 2))).unwrap();
        let y = g.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 4, 4, 3));
        assert!(g.value(y).data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn conv_shape_mismatch_is_config_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::ones(Shape::new(1, 2, 4, 4))).unwrap();
        let w = g.input(Tensor::ones(Shape::new(4, 3, 1, 1))).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_delta_kernel_is_identity_and_channels_are_independent() {
        let xt = Tensor::from_fn(Shape::new(1, 2, 5, 4), |_, c, h, w| (c * 20 + h * 4 + w) as f64);
        let delta = |c_zero: Option<usize>| {
            Tensor::from_fn(Shape::new(2, 1, 3, 3), move |c, _, h, w| {
                if Some(c) == c_zero {
                    0.0
                } else if h == 1 && w == 1 {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let mut g = Graph::new();
        let x = g.input(xt.clone()).unwrap();
        let w = g.input(delta(None)).unwrap();
        let y = g.dwconv2d(x, w, None).unwrap();
        assert_eq!(g.value(y), &xt);

        let w1 = g.input(delta(Some(1))).unwrap();
        let y1 = g.dwconv2d(x, w1, None).unwrap();
        let out = g.value(y1);
        for h in 0..5 {
            for w in 0..4 {
                assert_eq!(out.at(0, 0, h, w), xt.at(0, 0, h, w));
                assert_eq!(out.at(0, 1, h, w), 0.0);
            }
        }
    }

    #[test]
    fn layernorm_of_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(Shape::new(1, 4, 2, 2), 3.5f64)).unwrap();
        let gamma = g.input(Tensor::ones(Shape::new(1, 4, 1, 1))).unwrap();
        let beta = g.input(Tensor::zeros(Shape::new(1, 4, 1, 1))).unwrap();
        let y = g.layernorm_channel(x, gamma, beta, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_rejects_zero_channels() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(Shape::new(1, 0, 2, 2))).unwrap();
        let p = g.input(Tensor::zeros(Shape::new(1, 0, 1, 1))).unwrap();
        assert!(matches!(g.layernorm_channel(x, p, p, 1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));

        let mut g = Graph::new();
        let x = g.input(Tensor::full(Shape::new(2, 3, 3, 5), -1.25f64)).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut g = Graph::new();
        let x = g.input(t(Shape::new(1, 4, 1, 1), &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = g.input(Tensor::zeros(Shape::new(1, 3, 2, 2))).unwrap();
        assert!(matches!(g.pixel_shuffle(bad, 2), Err(Error::Config(_))));
        let bad = g.input(Tensor::zeros(Shape::new(1, 4, 3, 2))).unwrap();
        assert!(matches!(g.pixel_unshuffle(bad, 2), Err(Error::Config(_))));
    }

    #[test]
    fn split_then_concat_restores_input() {
        let xt = Tensor::from_fn(Shape::new(2, 4, 2, 3), |n, c, h, w| (n * 100 + c * 10 + h * 3 + w) as f64);
        let mut g = Graph::new();
        let x = g.input(xt.clone()).unwrap();
        let (a, b) = g.split_channels(x).unwrap();
        assert_eq!(g.shape(a).c, 2);
        assert_eq!(g.value(a).at(1, 1, 1, 2), xt.at(1, 1, 1, 2));
        assert_eq!(g.value(b).at(1, 0, 1, 2), xt.at(1, 2, 1, 2));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y), &xt);
        let odd = g.input(Tensor::zeros(Shape::new(1, 3, 1, 1))).unwrap();
        assert!(matches!(g.split_channels(odd), Err(Error::Config(_))));
    }

    #[test]
    fn multiplicative_identities() {
        let xt = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| (n + 2 * c) as f64 - (h * w) as f64 * 0.3);
        let mut g = Graph::new();
        let x = g.input(xt.clone()).unwrap();
        let ones = g.input(Tensor::ones(xt.shape())).unwrap();
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), &xt);
        let s = g.input(Tensor::ones(Shape::new(2, 3, 1, 1))).unwrap();
        let y = g.scale_by_channel(x, s).unwrap();
        assert_eq!(g.value(y), &xt);
        let s1 = g.input(Tensor::ones(Shape::new(1, 3, 1, 1))).unwrap();
        let y = g.scale_by_channel(x, s1).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn activation_counter_tracks_kinds() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(Shape::scalar())).unwrap();
        g.activation(x, Activation::Identity).unwrap();
        assert_eq!(g.counters().nonlinear_activations(), 0);
        g.activation(x, Activation::Relu).unwrap();
        g.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(g.counters().nonlinear_activations(), 2);
        assert_eq!(g.counters().activations["relu"], 1);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store
            .add(super::super::Parameter::new("w", vec![1], Tensor::scalar(3.0f64)).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id).unwrap();
        let b = g.param(&store, id).unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(id).grad.data(), &[6.0]);
    }
}
