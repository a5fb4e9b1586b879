//! Dense arrays, the MLP predictor family, and Adam.

pub mod adam;
pub mod mlp;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{
    input_gradient, logits, mlp_forward, DenseLayer, ForwardTrace, MlpParams, MlpSpec, SampleTape,
};
pub use tensor::Tensor;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of `σ(logit)` against `y ∈ {0, 1}`.
#[inline]
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    softplus(logit) - y * logit
}
