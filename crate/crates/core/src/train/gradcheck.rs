//! Central finite-difference checks of every primitive, gate, attention
//! unit, block family and a full model, all in `f64`.
//!
//! Each check projects the output onto a fixed random tensor `R` and
//! compares the analytic gradient of `sum(out ⊙ R)` with
//! `(L(θ + h) − L(θ − h)) / 2h` entry by entry.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, ArchConfig};
use crate::blocks::{
    gate_general, simple_gate, Block, BlockConfig, BlockKind, ChannelAttention, GateSpec, SimplifiedChannelAttention,
};
use crate::error::Result;
use crate::tensor::{Activation, Graph, ParamStore, Shape, Tensor, Var};
use crate::train::psnr_loss;

/// Finite-difference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Where the worst entry lives, e.g. `input 0[17]` or `conv1.weight[3]`.
    pub worst: String,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {:>6} entries  max rel err {:.3e}  ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.worst
        )
    }
}

/// Which entries of each tensor to perturb.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    All,
    /// A random subset of about this fraction (at least one entry) per tensor.
    Fraction(f64),
}

type Forward<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

/// A function of some input tensors and a parameter store.
pub struct Check<'a> {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    pub forward: Box<Forward<'a>>,
    pub sampling: Sampling,
}

impl<'a> Check<'a> {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a,
    ) -> Self {
        Check {
            name: name.into(),
            inputs,
            params: ParamStore::new(),
            forward: Box::new(forward),
            sampling: Sampling::All,
        }
    }

    pub fn with_params(mut self, params: ParamStore<f64>) -> Self {
        self.params = params;
        self
    }

    pub fn sampled(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    fn loss(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>, proj: &Tensor<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = (self.forward)(&mut g, params, &vars)?;
        let r = g.input(proj.clone())?;
        let p = g.mul(out, r)?;
        let l = g.sum(p)?;
        Ok(g.value(l).data()[0])
    }

    /// Runs the check with projection and sampling drawn from `seed`.
    pub fn run(mut self, cfg: &GradCheckConfig, seed: u64) -> Result<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut g = Graph::new();
        let vars = self
            .inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.forward)(&mut g, &self.params, &vars)?;
        let proj = Tensor::from_fn(g.shape(out), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let r = g.input(proj.clone())?;
        let p = g.mul(out, r)?;
        let l = g.sum(p)?;
        let grads = g.backward(l)?;
        let input_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        self.params.zero_grad();
        grads.accumulate_into(&mut self.params);

        let sampling = self.sampling;
        let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            match sampling {
                Sampling::All => (0..len).collect(),
                Sampling::Fraction(f) => {
                    let k = ((len as f64 * f).ceil() as usize).clamp(1, len);
                    let mut idx = sample(rng, len, k).into_vec();
                    idx.sort_unstable();
                    idx
                }
            }
        };

        let mut result = CheckResult {
            name: self.name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst: String::from("-"),
            passed: true,
        };
        let h = cfg.step;
        let record = |result: &mut CheckResult, analytic: f64, plus: f64, minus: f64, at: String| {
            let numeric = (plus - minus) / (2.0 * h);
            let e = cfg.rel_err(analytic, numeric);
            result.checked += 1;
            if e > result.max_rel_err || e.is_nan() {
                result.max_rel_err = e;
                result.worst = at;
            }
        };

        let mut inputs = self.inputs.clone();
        for k in 0..inputs.len() {
            for i in pick(inputs[k].len(), &mut rng) {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + h;
                let plus = self.loss(&inputs, &self.params, &proj)?;
                inputs[k].data_mut()[i] = orig - h;
                let minus = self.loss(&inputs, &self.params, &proj)?;
                inputs[k].data_mut()[i] = orig;
                record(&mut result, input_grads[k].data()[i], plus, minus, format!("input {k}[{i}]"));
            }
        }

        let ids: Vec<_> = self.params.ids().collect();
        let mut params = self.params.clone();
        for id in ids {
            let len = params.get(id).numel();
            for i in pick(len, &mut rng) {
                let analytic = self.params.get(id).grad.data()[i];
                let orig = params.get(id).value.data()[i];
                params.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = self.loss(&inputs, &params, &proj)?;
                params.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = self.loss(&inputs, &params, &proj)?;
                params.get_mut(id).value.data_mut()[i] = orig;
                record(&mut result, analytic, plus, minus, format!("{}[{i}]", params.get(id).name));
            }
        }
        result.passed = result.max_rel_err <= cfg.tolerance;
        Ok(result)
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Uniform in ±[0.1, 1]: keeps every entry clear of the kink at zero.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Overwrites every parameter with uniform values in ±`scale`.
fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<Check<'static>> {
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let mut checks = vec![
        Check::new(
            "conv2d 3x3 same",
            vec![
                uniform(s(2, 3, 6, 6), -1.0, 1.0, rng),
                uniform(s(4, 3, 3, 3), -0.5, 0.5, rng),
                uniform(s(1, 4, 1, 1), -0.5, 0.5, rng),
            ],
            |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        Check::new(
            "conv2d 2x2 stride 2",
            vec![uniform(s(2, 3, 6, 6), -1.0, 1.0, rng), uniform(s(6, 3, 2, 2), -0.5, 0.5, rng)],
            |g, _, v| g.conv2d(v[0], v[1], None, 2, 0),
        ),
        Check::new(
            "conv2d 1x1",
            vec![
                uniform(s(2, 5, 4, 3), -1.0, 1.0, rng),
                uniform(s(3, 5, 1, 1), -0.5, 0.5, rng),
                uniform(s(1, 3, 1, 1), -0.5, 0.5, rng),
            ],
            |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        Check::new(
            "dwconv2d 3x3",
            vec![
                uniform(s(2, 4, 5, 6), -1.0, 1.0, rng),
                uniform(s(4, 1, 3, 3), -0.5, 0.5, rng),
                uniform(s(1, 4, 1, 1), -0.5, 0.5, rng),
            ],
            |g, _, v| g.dwconv2d(v[0], v[1], Some(v[2])),
        ),
        Check::new(
            "layernorm_channel",
            vec![
                uniform(s(2, 5, 4, 4), -1.0, 1.0, rng),
                uniform(s(1, 5, 1, 1), 0.5, 1.5, rng),
                uniform(s(1, 5, 1, 1), -0.5, 0.5, rng),
            ],
            |g, _, v| g.layernorm_channel(v[0], v[1], v[2], 1e-6),
        ),
        Check::new("global_avg_pool", vec![uniform(s(2, 3, 4, 5), -1.0, 1.0, rng)], |g, _, v| {
            g.global_avg_pool(v[0])
        }),
        Check::new("pixel_shuffle", vec![uniform(s(2, 8, 3, 2), -1.0, 1.0, rng)], |g, _, v| {
            g.pixel_shuffle(v[0], 2)
        }),
        Check::new("pixel_unshuffle", vec![uniform(s(2, 2, 4, 6), -1.0, 1.0, rng)], |g, _, v| {
            g.pixel_unshuffle(v[0], 2)
        }),
        Check::new("split/concat", vec![uniform(s(2, 6, 3, 3), -1.0, 1.0, rng)], |g, _, v| {
            let (a, b) = g.split_channels(v[0])?;
            g.concat_channels(b, a)
        }),
        Check::new(
            "add",
            vec![uniform(s(2, 3, 4, 4), -1.0, 1.0, rng), uniform(s(2, 3, 4, 4), -1.0, 1.0, rng)],
            |g, _, v| g.add(v[0], v[1]),
        ),
        Check::new(
            "sub",
            vec![uniform(s(2, 3, 4, 4), -1.0, 1.0, rng), uniform(s(2, 3, 4, 4), -1.0, 1.0, rng)],
            |g, _, v| g.sub(v[0], v[1]),
        ),
        Check::new(
            "mul",
            vec![uniform(s(2, 3, 4, 4), -1.0, 1.0, rng), uniform(s(2, 3, 4, 4), -1.0, 1.0, rng)],
            |g, _, v| g.mul(v[0], v[1]),
        ),
        Check::new(
            "scale_by_channel",
            vec![uniform(s(2, 3, 4, 4), -1.0, 1.0, rng), uniform(s(2, 3, 1, 1), -1.0, 1.0, rng)],
            |g, _, v| g.scale_by_channel(v[0], v[1]),
        ),
        Check::new(
            "scale_by_channel broadcast",
            vec![uniform(s(2, 3, 4, 4), -1.0, 1.0, rng), uniform(s(1, 3, 1, 1), -1.0, 1.0, rng)],
            |g, _, v| g.scale_by_channel(v[0], v[1]),
        ),
        Check::new("sum", vec![uniform(s(2, 3, 2, 2), -1.0, 1.0, rng)], |g, _, v| g.sum(v[0])),
        Check::new("mean", vec![uniform(s(2, 3, 2, 2), -1.0, 1.0, rng)], |g, _, v| g.mean(v[0])),
        Check::new("log10", vec![uniform(s(1, 2, 3, 3), 0.1, 2.0, rng)], |g, _, v| g.log10(v[0], 10.0, 1e-8)),
        Check::new(
            "psnr_loss",
            vec![uniform(s(2, 3, 4, 4), 0.0, 1.0, rng), uniform(s(2, 3, 4, 4), 0.0, 1.0, rng)],
            |g, _, v| psnr_loss(g, v[0], v[1]),
        ),
    ];
    for act in Activation::ALL {
        checks.push(Check::new(
            format!("activation {act}"),
            vec![away_from_zero(s(2, 3, 4, 4), rng)],
            move |g, _, v| g.activation(v[0], act),
        ));
    }
    checks
}

fn composite_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check<'static>>> {
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let mut checks = vec![
        Check::new("simple_gate", vec![uniform(s(2, 8, 4, 4), -1.0, 1.0, rng)], |g, _, v| {
            simple_gate(g, v[0])
        }),
        Check::new("gate sigmoid", vec![uniform(s(2, 8, 4, 4), -1.0, 1.0, rng)], |g, store, v| {
            gate_general(g, store, v[0], &GateSpec::with_sigma(Activation::Sigmoid))
        }),
    ];

    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 8, 2, rng)?;
    checks.push(
        Check::new("channel_attention", vec![uniform(s(2, 8, 4, 4), -1.0, 1.0, rng)], move |g, store, v| {
            ca.forward(g, store, v[0])
        })
        .with_params(store),
    );

    let mut store = ParamStore::new();
    let sca = SimplifiedChannelAttention::new(&mut store, "sca", 8, rng)?;
    checks.push(
        Check::new(
            "simplified_channel_attention",
            vec![uniform(s(2, 8, 4, 4), -1.0, 1.0, rng)],
            move |g, store, v| sca.forward(g, store, v[0]),
        )
        .with_params(store),
    );

    for kind in [BlockKind::Plain, BlockKind::Baseline, BlockKind::NafNet] {
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "block", 8, BlockConfig::preset(kind), rng)?;
        randomize(&mut store, 0.5, rng);
        checks.push(
            Check::new(format!("{kind} block"), vec![uniform(s(2, 8, 8, 8), -1.0, 1.0, rng)], move |g, store, v| {
                block.forward(g, store, v[0])
            })
            .with_params(store),
        );
    }
    Ok(checks)
}

/// The whole toy network under the PSNR loss, on a sampled 1% of every
/// parameter tensor (at least one entry each).
fn model_check(rng: &mut ChaCha8Rng) -> Result<Check<'static>> {
    let mut model = build_model::<f64>(&ArchConfig::toy(), rng.gen())?;
    for p in model.params.iter_mut() {
        if p.name.ends_with("beta") || p.name.ends_with("gamma") || p.name.starts_with("ending") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let params = std::mem::take(&mut model.params);
    let shape = Shape::new(1, 3, 32, 32);
    let x = uniform(shape, 0.0, 1.0, rng);
    let target = uniform(shape, 0.0, 1.0, rng);
    Ok(Check::new("nafnet model psnr loss", vec![x, target], move |g, store, v| {
        let out = model.forward_with(g, store, v[0])?;
        psnr_loss(g, out, v[1])
    })
    .with_params(params)
    .sampled(Sampling::Fraction(0.01)))
}

/// Every check of the suite, in a fixed order.
pub fn suite(seed: u64) -> Result<Vec<Check<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = primitive_checks(&mut rng);
    checks.extend(composite_checks(&mut rng)?);
    checks.push(model_check(&mut rng)?);
    Ok(checks)
}

/// Runs the whole suite, calling `on_result` after each check.
pub fn run_suite(seed: u64, cfg: &GradCheckConfig, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    suite(seed)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let r = c.run(cfg, seed.wrapping_add(1000 + i as u64))?;
            on_result(&r);
            Ok(r)
        })
        .collect()
}
