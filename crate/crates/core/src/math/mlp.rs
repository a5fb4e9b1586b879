//! Leaky-ReLU multilayer perceptrons with a scalar logit output.
//!
//! Besides the usual forward pass and parameter backprop, [`SampleTape`]
//! computes the input gradient `∇ₓf` and the parameter gradient of any loss
//! that depends on that input gradient. Leaky-ReLU networks are piecewise
//! linear, so with the activation pattern frozen the input gradient reads
//!
//! ```text
//! ∇ₓf = W₁ᵀ D₁ W₂ᵀ D₂ … W_{L-1}ᵀ D_{L-1} w_Lᵀ
//! ```
//!
//! which is multilinear in the weight matrices and independent of the biases.
//! For a cotangent `u = ∂ℓ/∂(∇ₓf)` the parameter gradient of `uᵀ∇ₓf` is
//! `δ_l r_{l-1}ᵀ`, where `δ_l = ∂f/∂z_l` is the ordinary backprop adjoint and
//! `r` is `u` pushed forward through the gated linear network without biases.
//! The second derivative of the activation is zero almost everywhere, so this
//! is the exact double-backprop gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, matvec, matvec_t};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Architecture of a predictor: widths from input to the single logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, leaky_slope: f64) -> Result<Self> {
        let spec = Self {
            layer_widths,
            leaky_slope,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `d_in → hidden… → 1` with the default slope.
    pub fn with_hidden(d_in: usize, hidden: &[usize]) -> Result<Self> {
        let mut w = vec![d_in];
        w.extend_from_slice(hidden);
        w.push(1);
        Self::new(w, DEFAULT_LEAKY_SLOPE)
    }

    /// A pure linear model.
    pub fn linear(d_in: usize) -> Result<Self> {
        Self::with_hidden(d_in, &[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config(
                "layer_widths",
                "needs at least an input and an output width",
            ));
        }
        if self.layer_widths.last() != Some(&1) {
            return Err(Error::config("layer_widths", "last width must be 1"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("layer_widths", "widths must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layer_widths[0]
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine map, weights stored row-major `n_out × n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Uniform `±1/√n_in` init for weights and bias.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut layer = Self::zeros(n_in, n_out);
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.gen_range(-bound..bound);
        }
        layer
    }

    /// `out = W x + b`
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.weights, self.n_in, x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    /// `out = W v` (no bias).
    #[inline]
    pub fn apply_linear(&self, v: &[f64], out: &mut [f64]) {
        matvec(&self.weights, self.n_in, v, out);
    }

    /// `out = Wᵀ v`
    #[inline]
    pub fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        matvec_t(&self.weights, self.n_in, v, out);
    }

    /// `W += a · u vᵀ`, `b += a · u` when `with_bias`.
    #[inline]
    pub fn add_outer(&mut self, a: f64, u: &[f64], v: &[f64], bias_u: Option<f64>) {
        for (row, &ui) in self.weights.chunks_exact_mut(self.n_in).zip(u) {
            if ui != 0.0 {
                axpy(a * ui, v, row);
            }
        }
        if let Some(s) = bias_u {
            for (b, &ui) in self.bias.iter_mut().zip(u) {
                *b += a * s * ui;
            }
        }
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// Weights of one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_widths
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        Self {
            layers: spec
                .layer_widths
                .windows(2)
                .map(|w| DenseLayer::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    /// Checks that every layer matches `spec` and every value is finite.
    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.depth() {
            return Err(Error::shape(
                "mlp depth",
                spec.depth(),
                self.layers.len(),
            ));
        }
        for (l, (layer, w)) in self
            .layers
            .iter()
            .zip(spec.layer_widths.windows(2))
            .enumerate()
        {
            if layer.n_in != w[0]
                || layer.n_out != w[1]
                || layer.weights.len() != w[0] * w[1]
                || layer.bias.len() != w[1]
            {
                return Err(Error::shape(
                    format!("layer {l}"),
                    format!("{}x{}", w[1], w[0]),
                    format!("{}x{}", layer.n_out, layer.n_in),
                ));
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFiniteInput("mlp parameters".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.layers.iter().flat_map(|l| l.slices())
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    /// Overwrites parameters from a flat vector in [`flatten`](Self::flatten) order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.slices().map(<[f64]>::len).sum();
        if n != flat.len() {
            return Err(Error::shape("flat parameters", n, flat.len()));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    /// `self += a · other`
    pub fn add_scaled(&mut self, a: f64, other: &MlpParams) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            axpy(a, src, dst);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Negates the final layer, which negates the logit.
    pub fn negated_output(&self) -> Self {
        let mut out = self.clone();
        if let Some(last) = out.layers.last_mut() {
            last.weights.iter_mut().for_each(|w| *w = -*w);
            last.bias.iter_mut().for_each(|b| *b = -*b);
        }
        out
    }
}

/// Pre-activations recorded by [`mlp_forward`]; the last entry is the logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Activation gate (slope) of hidden unit `j` in hidden layer `l`.
    pub fn gate(&self, l: usize, j: usize, leaky_slope: f64) -> f64 {
        leaky_gate(self.pre_activations[l][j], leaky_slope)
    }
}

#[inline]
pub fn leaky_gate(z: f64, slope: f64) -> f64 {
    // kink at exactly 0 takes the positive branch
    if z >= 0.0 {
        1.0
    } else {
        slope
    }
}

fn check_input(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<()> {
    params.check(spec)?;
    if x.len() != spec.d_in() {
        return Err(Error::shape("mlp input", spec.d_in(), x.len()));
    }
    Ok(())
}

/// Evaluates the logit and records every pre-activation.
pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<(f64, ForwardTrace)> {
    check_input(spec, params, x)?;
    let mut tape = SampleTape::new(spec);
    tape.forward(spec, params, x);
    let trace = ForwardTrace {
        pre_activations: tape.pre.clone(),
    };
    Ok((tape.logit, trace))
}

/// Gradient of the logit with respect to the input.
pub fn input_gradient(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, params, x)?;
    let mut tape = SampleTape::new(spec);
    tape.run(spec, params, x);
    Ok(tape.input_grad)
}

/// Logit only, without shape validation; used in hot evaluation loops.
pub fn logit_unchecked(spec: &MlpSpec, params: &MlpParams, x: &[f64], tape: &mut SampleTape) -> f64 {
    tape.forward(spec, params, x);
    tape.logit
}

/// Reusable per-sample buffers for forward, input-gradient and
/// double-backprop passes.
#[derive(Debug, Clone)]
pub struct SampleTape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    tangent: Vec<Vec<f64>>,
    pub logit: f64,
    pub input_grad: Vec<f64>,
}

impl SampleTape {
    pub fn new(spec: &MlpSpec) -> Self {
        let widths = &spec.layer_widths;
        let per_layer = |w: &[usize]| -> Vec<Vec<f64>> { w.iter().map(|&n| vec![0.0; n]).collect() };
        Self {
            pre: per_layer(&widths[1..]),
            post: per_layer(&widths[1..widths.len() - 1]),
            delta: per_layer(&widths[1..]),
            tangent: per_layer(&widths[..widths.len() - 1]),
            logit: 0.0,
            input_grad: vec![0.0; widths[0]],
        }
    }

    pub fn forward(&mut self, spec: &MlpSpec, params: &MlpParams, x: &[f64]) {
        let depth = params.layers.len();
        for l in 0..depth {
            let (pre, input) = if l == 0 {
                (&mut self.pre[0], x)
            } else {
                (&mut self.pre[l], self.post[l - 1].as_slice())
            };
            params.layers[l].apply(input, pre);
            if l + 1 < depth {
                let post = &mut self.post[l];
                for (p, &z) in post.iter_mut().zip(pre.iter()) {
                    *p = z * leaky_gate(z, spec.leaky_slope);
                }
            }
        }
        self.logit = self.pre[depth - 1][0];
    }

    /// Forward pass plus backprop adjoints `δ_l = ∂f/∂z_l` and `∇ₓf`.
    pub fn run(&mut self, spec: &MlpSpec, params: &MlpParams, x: &[f64]) {
        self.run_adjoints(spec, params, x);
        params.layers[0].apply_transpose(&self.delta[0], &mut self.input_grad);
    }

    /// Forward pass plus backprop adjoints, without the input gradient.
    pub fn run_adjoints(&mut self, spec: &MlpSpec, params: &MlpParams, x: &[f64]) {
        self.forward(spec, params, x);
        let depth = params.layers.len();
        self.delta[depth - 1][0] = 1.0;
        for l in (0..depth - 1).rev() {
            let (lower, upper) = self.delta.split_at_mut(l + 1);
            let d = &mut lower[l];
            params.layers[l + 1].apply_transpose(&upper[0], d);
            for (di, &z) in d.iter_mut().zip(&self.pre[l]) {
                *di *= leaky_gate(z, spec.leaky_slope);
            }
        }
    }

    /// Accumulates `scale · ∂/∂θ [dlogit · f(x) + uᵀ∇ₓf(x)]` into `out`,
    /// with `dlogit` and `u` treated as constants. Requires a prior
    /// [`run_adjoints`](Self::run_adjoints) on the same `x`.
    pub fn accumulate_param_grad(
        &mut self,
        spec: &MlpSpec,
        params: &MlpParams,
        x: &[f64],
        dlogit: f64,
        input_grad_cotangent: Option<&[f64]>,
        scale: f64,
        out: &mut MlpParams,
    ) {
        let depth = params.layers.len();
        if let Some(u) = input_grad_cotangent {
            self.tangent[0].copy_from_slice(u);
            for l in 1..depth {
                let (lower, upper) = self.tangent.split_at_mut(l);
                let t = &mut upper[0];
                params.layers[l - 1].apply_linear(&lower[l - 1], t);
                for (ti, &z) in t.iter_mut().zip(&self.pre[l - 1]) {
                    *ti *= leaky_gate(z, spec.leaky_slope);
                }
            }
            // combined outer product: δ_l (dlogit·h_{l-1} + r_{l-1})ᵀ
            for l in 0..depth {
                let h_prev: &[f64] = if l == 0 { x } else { &self.post[l - 1] };
                let t = &mut self.tangent[l];
                if dlogit != 0.0 {
                    axpy(dlogit, h_prev, t);
                }
                out.layers[l].add_outer(scale, &self.delta[l], t, Some(dlogit));
            }
        } else if dlogit != 0.0 {
            for l in 0..depth {
                let h_prev: &[f64] = if l == 0 { x } else { &self.post[l - 1] };
                out.layers[l].add_outer(scale * dlogit, &self.delta[l], h_prev, Some(1.0));
            }
        }
    }
}

/// Logits of every row of `inputs` (row-major `n × d_in`).
pub fn logits(spec: &MlpSpec, params: &MlpParams, inputs: &[f64]) -> Result<Vec<f64>> {
    params.check(spec)?;
    let d = spec.d_in();
    if d == 0 || inputs.len() % d != 0 {
        return Err(Error::shape("mlp batch input", format!("multiple of {d}"), inputs.len()));
    }
    let mut tape = SampleTape::new(spec);
    Ok(inputs
        .chunks_exact(d)
        .map(|x| logit_unchecked(spec, params, x, &mut tape))
        .collect())
}

/// Plain backprop of binary cross-entropy, kept separate from the tape path
/// as a reference implementation.
pub fn bce_param_gradient_reference(
    spec: &MlpSpec,
    params: &MlpParams,
    x: &[f64],
    y: f64,
) -> Result<MlpParams> {
    let (logit, trace) = mlp_forward(spec, params, x)?;
    let depth = params.layers.len();
    let mut grad = params.zeros_like();
    let mut err = vec![super::sigmoid(logit) - y];
    for l in (0..depth).rev() {
        let input: Vec<f64> = if l == 0 {
            x.to_vec()
        } else {
            trace.pre_activations[l - 1]
                .iter()
                .map(|&z| z * leaky_gate(z, spec.leaky_slope))
                .collect()
        };
        let layer = &params.layers[l];
        for o in 0..layer.n_out {
            for i in 0..layer.n_in {
                grad.layers[l].weights[o * layer.n_in + i] += err[o] * input[i];
            }
            grad.layers[l].bias[o] += err[o];
        }
        if l > 0 {
            let mut next = vec![0.0; layer.n_in];
            for (i, n) in next.iter_mut().enumerate() {
                let s: f64 = (0..layer.n_out)
                    .map(|o| layer.weights[o * layer.n_in + i] * err[o])
                    .sum();
                *n = s * trace.gate(l - 1, i, spec.leaky_slope);
            }
            err = next;
        }
    }
    Ok(grad)
}

/// Convenience: `dot(∇ₓf(x), v)`.
pub fn directional_derivative(spec: &MlpSpec, params: &MlpParams, x: &[f64], v: &[f64]) -> Result<f64> {
    Ok(dot(&input_gradient(spec, params, x)?, v))
}
