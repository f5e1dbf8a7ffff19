//! Small dense networks with hand-written backpropagation.
//!
//! Everything is `f64` so that finite-difference gradient checks are
//! meaningful. Batches are row-major `(batch, features)` matrices.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// x·sigmoid(x), a.k.a. swish.
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|x| x.max(0.0)),
            Activation::Silu => z.mapv(|x| x / (1.0 + (-x).exp())),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the derivative at pre-activation `z`.
    fn backprop(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(z).for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Silu => Zip::from(grad).and(z).for_each(|g, &x| {
                let s = 1.0 / (1.0 + (-x).exp());
                *g *= s * (1.0 + x * (1.0 - s));
            }),
            Activation::Tanh => Zip::from(grad).and(z).for_each(|g, &x| {
                let t = x.tanh();
                *g *= 1.0 - t * t;
            }),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation `{tag}`"))),
        }
    }
}

/// Dense layer `y = x·W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Multi-layer perceptron; hidden layers share one activation, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Parameter gradients, same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Linear>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Flattened copy, weights then bias per layer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl Mlp {
    /// Fan-in scaled uniform init: every parameter of a layer with fan-in `n`
    /// is drawn from `U(-1/√n, 1/√n)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self { layers, activation }
    }

    /// Network whose every parameter is zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.ncols()).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.ncols()));
        s
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = affine(x, &self.layers[0]);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = self.activation.apply(&h);
            h = affine(&h, layer);
            debug_assert!(i <= last);
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer);
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&z);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (
            h,
            ForwardCache {
                inputs,
                pre_activations: pre,
            },
        )
    }

    /// Backpropagates `grad_out = ∂L/∂output`. Returns parameter gradients
    /// and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            grads.push(Linear {
                weight: input.t().dot(&g),
                bias: g.sum_axis(Axis(0)),
            });
            g = g.dot(&layer.weight.t());
            if i > 0 {
                self.activation.backprop(&cache.pre_activations[i - 1], &mut g);
            }
        }
        grads.reverse();
        (Gradients { layers: grads }, g)
    }

    /// `∂L/∂input` only, skipping parameter gradients.
    pub fn input_gradient(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            g = g.dot(&self.layers[i].weight.t());
            if i > 0 {
                self.activation.backprop(&cache.pre_activations[i - 1], &mut g);
            }
        }
        g
    }

    /// `self ← (1 − τ)·self + τ·source`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weight).and(&s.weight).for_each(|a, &b| *a = (1.0 - tau) * *a + tau * b);
            Zip::from(&mut t.bias).and(&s.bias).for_each(|a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
    }

    /// Largest absolute parameter difference.
    pub fn sup_distance(&self, other: &Mlp) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                a.weight
                    .iter()
                    .zip(b.weight.iter())
                    .chain(a.bias.iter().zip(b.bias.iter()))
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// Flattened parameters, weights then bias per layer.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    /// Appends a text block: `mlp <activation> <sizes...>` then one line of
    /// parameters (shortest round-trip float formatting).
    pub fn write_text(&self, out: &mut String) {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "mlp {} {}", self.activation.tag(), sizes.join(" "));
        out.push_str(&join_floats(&self.params()));
        out.push('\n');
    }

    pub fn read_text<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        let header = lines.next().ok_or_else(|| Error::Format("missing mlp header".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("mlp") {
            return Err(Error::Format(format!("expected mlp header, got `{header}`")));
        }
        let act = Activation::from_tag(parts.next().unwrap_or(""))?;
        let sizes: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| Error::Format(format!("bad layer size `{p}`"))))
            .collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(Error::Format("mlp needs at least two sizes".into()));
        }
        let mut net = Mlp::zeros(&sizes, act);
        let params = parse_floats(lines.next().ok_or_else(|| Error::Format("missing mlp params".into()))?)?;
        net.set_params(&params)?;
        Ok(net)
    }
}

fn affine(x: &Array2<f64>, layer: &Linear) -> Array2<f64> {
    let mut z = x.dot(&layer.weight);
    z += &layer.bias;
    z
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 20);
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

pub(crate) fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad float `{t}`"))))
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn for_net(lr: f64, net: &Mlp) -> Self {
        Self::new(lr, net.num_params())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    #[inline]
    fn update(&mut self, i: usize, p: &mut f64, g: f64, bc1: f64, bc2: f64) {
        let m = &mut self.first[i];
        let v = &mut self.second[i];
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
    }

    /// One descent step on `net` along `grads`.
    pub fn step_net(&mut self, net: &mut Mlp, grads: &Gradients) {
        let (bc1, bc2) = self.advance();
        let mut i = 0;
        for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
            for (p, gv) in layer.weight.iter_mut().zip(g.weight.iter()) {
                self.update(i, p, *gv, bc1, bc2);
                i += 1;
            }
            for (p, gv) in layer.bias.iter_mut().zip(g.bias.iter()) {
                self.update(i, p, *gv, bc1, bc2);
                i += 1;
            }
        }
    }

    /// One descent step on a plain parameter slice.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) {
        let (bc1, bc2) = self.advance();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, *g, bc1, bc2);
        }
    }

    pub fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "adam {:?} {:?} {:?} {:?} {}", self.lr, self.beta1, self.beta2, self.eps, self.step);
        out.push_str(&join_floats(&self.first));
        out.push('\n');
        out.push_str(&join_floats(&self.second));
        out.push('\n');
    }

    pub fn read_text<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        let header = lines.next().ok_or_else(|| Error::Format("missing adam header".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "adam" {
            return Err(Error::Format(format!("bad adam header `{header}`")));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad float `{s}`")));
        let step = parts[5].parse().map_err(|_| Error::Format("bad adam step".into()))?;
        let first = parse_floats(lines.next().unwrap_or(""))?;
        let second = parse_floats(lines.next().unwrap_or(""))?;
        if first.len() != second.len() {
            return Err(Error::Format("adam moment length mismatch".into()));
        }
        Ok(Self {
            lr: f(parts[1])?,
            beta1: f(parts[2])?,
            beta2: f(parts[3])?,
            eps: f(parts[4])?,
            step,
            first,
            second,
        })
    }
}

/// Builds a `(rows, cols)` matrix from row slices.
pub fn stack_rows<T: AsRef<[f64]>>(rows: &[T], cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.as_ref().iter().enumerate().take(cols) {
            m[[i, j]] = *v;
        }
    }
    m
}
