//! Fixed-architecture multilayer perceptron.
//!
//! Hidden layers are affine maps followed by `tanh`; the last layer is affine.
//! Parameter gradients come from reverse accumulation, input directional
//! derivatives from forward accumulation. Hot paths work on slices and a reusable
//! [`Workspace`]; the `Vector`-based methods are thin checked wrappers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{dot, Matrix, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn id(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`, row-major.
    weight: Matrix,
    bias: Vector,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.rows() != bias.dim() {
            return Err(Error::dims("Layer::new", weight.rows(), bias.dim()));
        }
        Ok(Layer { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Partial derivatives shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Scratch buffers reused across evaluations of one network.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    tangents: Vec<f64>,
    tangents_next: Vec<f64>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "at least one layer is required"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dims(
                    "MlpParams::new",
                    format!("layer {} input {}", i + 1, pair[0].output_dim()),
                    pair[1].input_dim(),
                ));
            }
        }
        Ok(MlpParams { layers, activation })
    }

    /// Uniform `±1/√fan_in` initialization; the last layer is additionally
    /// multiplied by `final_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], final_scale: f64, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("sizes", "need input and output sizes"));
        }
        let n_layers = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
            let scale = if l + 1 == n_layers { final_scale } else { 1.0 };
            let weight = (0..fan_in * fan_out)
                .map(|_| scale * rng.random_range(-bound..=bound))
                .collect();
            let bias = (0..fan_out).map(|_| scale * rng.random_range(-bound..=bound)).collect();
            layers.push(Layer::new(Matrix::new(fan_out, fan_in, weight)?, Vector::new(bias)?)?);
        }
        MlpParams::new(layers, Activation::Tanh)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .map(|w| Layer::new(Matrix::zeros(w[1], w[0]), Vector::zeros(w[1])))
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, Activation::Tanh)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.output_dim()));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.dim())
            .sum()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.sizes() == other.sizes()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    fn check_input(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::dims(op, self.input_dim(), len));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Vector) -> Result<Vector> {
        self.check_input("mlp_forward", input.dim())?;
        let mut ws = Workspace::default();
        let out = self.forward_ws(input.as_slice(), &mut ws).to_vec();
        finite_vector("network output", out)
    }

    /// Gradient of `⟨cotangent, f(input)⟩` with respect to every parameter.
    pub fn backward(&self, input: &Vector, cotangent: &Vector) -> Result<GradientBundle> {
        self.check_input("mlp_backward", input.dim())?;
        if cotangent.dim() != self.output_dim() {
            return Err(Error::dims("mlp_backward", self.output_dim(), cotangent.dim()));
        }
        let mut ws = Workspace::default();
        let mut grads = GradientBundle::zeros_like(self);
        self.forward_ws(input.as_slice(), &mut ws);
        self.backward_ws(&mut ws, cotangent.as_slice(), 1.0, &mut grads, None);
        Ok(grads)
    }

    /// `(∂f/∂input) · direction`.
    pub fn input_jvp(&self, input: &Vector, direction: &Vector) -> Result<Vector> {
        self.check_input("mlp_input_jvp", input.dim())?;
        self.check_input("mlp_input_jvp", direction.dim())?;
        let mut ws = Workspace::default();
        let mut primal = vec![0.0; self.output_dim()];
        let mut tangent = vec![0.0; self.output_dim()];
        self.jvp_ws(
            input.as_slice(),
            direction.as_slice(),
            &mut ws,
            &mut primal,
            &mut tangent,
        );
        finite_vector("network tangent", tangent)
    }

    /// `cotangentᵀ · (∂f/∂input)`.
    pub fn input_vjp(&self, input: &Vector, cotangent: &Vector) -> Result<Vector> {
        self.check_input("mlp_input_vjp", input.dim())?;
        if cotangent.dim() != self.output_dim() {
            return Err(Error::dims("mlp_input_vjp", self.output_dim(), cotangent.dim()));
        }
        let mut ws = Workspace::default();
        let mut grads = GradientBundle::zeros_like(self);
        let mut g = vec![0.0; self.input_dim()];
        self.forward_ws(input.as_slice(), &mut ws);
        self.backward_ws(&mut ws, cotangent.as_slice(), 1.0, &mut grads, Some(&mut g));
        finite_vector("input gradient", g)
    }

    /// Forward pass caching every layer output in `ws`. Returns the output.
    pub fn forward_ws<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(input.len(), self.input_dim());
        let n = self.layers.len();
        ws.acts.resize_with(n + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let a = &before[l];
            let out = &mut after[0];
            out.clear();
            let w = layer.weight.as_slice();
            let cols = layer.input_dim();
            let hidden = l + 1 < n;
            for (i, b) in layer.bias.as_slice().iter().enumerate() {
                let z = b + dot(&w[i * cols..(i + 1) * cols], a);
                out.push(if hidden { libm::tanh(z) } else { z });
            }
        }
        &ws.acts[n]
    }

    /// Reverse pass after [`forward_ws`](Self::forward_ws) on the same input.
    /// Adds `scale · ∂⟨cot, f⟩/∂params` into `grads`; optionally writes the
    /// input gradient.
    pub fn backward_ws(
        &self,
        ws: &mut Workspace,
        cot: &[f64],
        scale: f64,
        grads: &mut GradientBundle,
        input_grad: Option<&mut [f64]>,
    ) {
        let n = self.layers.len();
        ws.delta.clear();
        ws.delta.extend(cot.iter().map(|c| c * scale));
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let a = &ws.acts[l];
            let cols = layer.input_dim();
            let g = &mut grads.layers[l];
            for (i, d) in ws.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[i] += d;
                for (gw, ai) in g.weight[i * cols..(i + 1) * cols].iter_mut().zip(a) {
                    *gw += d * ai;
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            ws.delta_prev.clear();
            ws.delta_prev.resize(cols, 0.0);
            let w = layer.weight.as_slice();
            for (i, d) in ws.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (dp, wij) in ws.delta_prev.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                    *dp += d * wij;
                }
            }
            if l > 0 {
                for (dp, ai) in ws.delta_prev.iter_mut().zip(a) {
                    *dp *= 1.0 - ai * ai;
                }
            }
            core::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        if let Some(out) = input_grad {
            out.copy_from_slice(&ws.delta);
        }
    }

    /// Primal output and one input tangent, by forward accumulation.
    pub fn jvp_ws(
        &self,
        input: &[f64],
        direction: &[f64],
        ws: &mut Workspace,
        primal: &mut [f64],
        tangent: &mut [f64],
    ) {
        let n = self.layers.len();
        self.forward_ws(input, ws);
        ws.tangents.clear();
        ws.tangents.extend_from_slice(direction);
        for (l, layer) in self.layers.iter().enumerate() {
            let cols = layer.input_dim();
            let w = layer.weight.as_slice();
            ws.tangents_next.clear();
            for i in 0..layer.output_dim() {
                let mut t = dot(&w[i * cols..(i + 1) * cols], &ws.tangents);
                if l + 1 < n {
                    let a = ws.acts[l + 1][i];
                    t *= 1.0 - a * a;
                }
                ws.tangents_next.push(t);
            }
            core::mem::swap(&mut ws.tangents, &mut ws.tangents_next);
        }
        primal.copy_from_slice(&ws.acts[n]);
        tangent.copy_from_slice(&ws.tangents);
    }

    /// Output plus `Σ_j ∂out_j/∂input_{offset+j}`, the divergence with respect to
    /// the `output_dim` inputs starting at `offset`. All unit tangents are carried
    /// through a single forward pass.
    pub fn forward_divergence(&self, input: &[f64], offset: usize, ws: &mut Workspace, primal: &mut [f64]) -> f64 {
        let n = self.layers.len();
        let k = self.output_dim();
        debug_assert!(offset + k <= self.input_dim());
        self.forward_ws(input, ws);
        // tangents: row-major (width × k); column j is ∂(layer output)/∂input_{offset+j}
        let first = &self.layers[0];
        let cols = first.input_dim();
        let w = first.weight.as_slice();
        ws.tangents.clear();
        for i in 0..first.output_dim() {
            let deriv = if n > 1 {
                let a = ws.acts[1][i];
                1.0 - a * a
            } else {
                1.0
            };
            ws.tangents
                .extend(w[i * cols + offset..i * cols + offset + k].iter().map(|v| v * deriv));
        }
        for l in 1..n {
            let layer = &self.layers[l];
            let cols = layer.input_dim();
            let w = layer.weight.as_slice();
            ws.tangents_next.clear();
            ws.tangents_next.resize(layer.output_dim() * k, 0.0);
            for i in 0..layer.output_dim() {
                let row = &mut ws.tangents_next[i * k..(i + 1) * k];
                for (c, wic) in w[i * cols..(i + 1) * cols].iter().enumerate() {
                    for (r, t) in row.iter_mut().zip(&ws.tangents[c * k..(c + 1) * k]) {
                        *r += wic * t;
                    }
                }
                if l + 1 < n {
                    let a = ws.acts[l + 1][i];
                    let deriv = 1.0 - a * a;
                    for r in row.iter_mut() {
                        *r *= deriv;
                    }
                }
            }
            core::mem::swap(&mut ws.tangents, &mut ws.tangents_next);
        }
        primal.copy_from_slice(&ws.acts[n]);
        (0..k).map(|j| ws.tangents[j * k + j]).sum()
    }

    /// Unchecked forward for hot loops; `out` receives the network output.
    pub fn eval_into(&self, input: &[f64], ws: &mut Workspace, out: &mut [f64]) {
        out.copy_from_slice(self.forward_ws(input, ws));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn finite_vector(what: &str, data: Vec<f64>) -> Result<Vector> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(String::from(what)));
    }
    Ok(Vector::from_vec_unchecked(data))
}

impl GradientBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientBundle {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.as_slice().len()],
                    bias: vec![0.0; l.bias.dim()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, s: f64) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.tensors().map(|t| dot(t, t)).sum())
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weight.len() == l.weight.as_slice().len() && g.bias.len() == l.bias.dim())
    }

    /// Name of the first tensor holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {i} weight gradient"));
            }
            if l.bias.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {i} bias gradient"));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step size at `step` of `steps` on a half-cosine from `start` down to `end`.
pub fn cosine_learning_rate(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps > 1 {
        step as f64 / (steps - 1) as f64
    } else {
        1.0
    };
    end + (start - end) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: GradientBundle,
    second: GradientBundle,
    step_count: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: GradientBundle::zeros_like(params),
            second: GradientBundle::zeros_like(params),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &GradientBundle {
        &self.first
    }

    pub fn second_moment(&self) -> &GradientBundle {
        &self.second
    }

    /// One Adam update of `params` in place. Rejects non-finite gradients
    /// before touching anything.
    pub fn step(&mut self, params: &mut MlpParams, grads: &GradientBundle) -> Result<()> {
        if !grads.matches(params) || !self.first.matches(params) {
            return Err(Error::dims(
                "adam_step",
                format!("{:?}", params.sizes()),
                "gradient or moment shapes",
            ));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite { what: name });
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        let tensors = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
