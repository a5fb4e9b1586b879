//! Auto-encoder model of the data manifold.
//!
//! Points project as `decoder(encoder_mean(x))`. Vectors project through the
//! Jacobian of that map at `x`, obtained by pushing `v` forward alongside `x`:
//! linear layers apply `W v` (no bias), ReLU multiplies by `1(z > 0)`, and the
//! sigmoid multiplies by `σ(z)(1 − σ(z))`, with every gate taken from the
//! point's own pre-activations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LossTerm, Result};
use crate::math::mlp::DenseLayer;
use crate::math::{sigmoid, AdamConfig, AdamState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Local slope at pre-activation `z`.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

/// A feed-forward stack with one activation per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
}

/// Pre-activations and outputs of every layer of a [`Stack`] for one input.
#[derive(Debug, Clone, Default)]
pub struct StackCache {
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl Stack {
    fn new(widths: &[usize], hidden: Activation, last: Activation, rng: &mut ChaCha8Rng) -> Self {
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], rng))
            .collect();
        let activations = (0..n).map(|i| if i + 1 == n { last } else { hidden }).collect();
        Self { layers, activations }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() != self.activations.len() {
            return Err(Error::Malformed(format!("{what}: layer/activation count")));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].n_out != w[1].n_in {
                return Err(Error::shape(
                    format!("{what} layer {}", i + 1),
                    w[0].n_out,
                    w[1].n_in,
                ));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Malformed(format!("{what}: layer buffer sizes")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], cache: &mut StackCache) {
        cache.pre.resize(self.layers.len(), Vec::new());
        cache.out.resize(self.layers.len(), Vec::new());
        for (l, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let mut z = std::mem::take(&mut cache.pre[l]);
            z.resize(layer.n_out, 0.0);
            let input: &[f64] = if l == 0 { x } else { &cache.out[l - 1] };
            layer.apply(input, &mut z);
            let out = &mut cache.out[l];
            out.clear();
            out.extend(z.iter().map(|&v| act.apply(v)));
            cache.pre[l] = z;
        }
    }

    fn output<'c>(&self, cache: &'c StackCache) -> &'c [f64] {
        &cache.out[self.layers.len() - 1]
    }

    /// Jacobian-vector product with gates frozen by `cache`.
    pub fn jvp(&self, cache: &StackCache, v: &[f64]) -> Vec<f64> {
        let mut cur = v.to_vec();
        for (l, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            let mut next = vec![0.0; layer.n_out];
            layer.apply_linear(&cur, &mut next);
            for (n, &z) in next.iter_mut().zip(&cache.pre[l]) {
                *n *= act.slope(z);
            }
            cur = next;
        }
        cur
    }

    /// Vector-Jacobian product with gates frozen by `cache`.
    pub fn vjp(&self, cache: &StackCache, w: &[f64]) -> Vec<f64> {
        let mut cur = w.to_vec();
        for (l, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate().rev() {
            for (c, &z) in cur.iter_mut().zip(&cache.pre[l]) {
                *c *= act.slope(z);
            }
            let mut prev = vec![0.0; layer.n_in];
            layer.apply_transpose(&cur, &mut prev);
            cur = prev;
        }
        cur
    }

    /// Backprop `dout` (taken at the output of layer `hi - 1`) through
    /// layers `lo..hi` into `grads`; returns the gradient at the input of
    /// layer `lo`.
    fn backward_range(
        &self,
        x: &[f64],
        cache: &StackCache,
        lo: usize,
        hi: usize,
        dout: &[f64],
        grads: &mut [DenseLayer],
    ) -> Vec<f64> {
        let mut cur = dout.to_vec();
        for l in (lo..hi).rev() {
            let (layer, act) = (&self.layers[l], self.activations[l]);
            for (c, &z) in cur.iter_mut().zip(&cache.pre[l]) {
                *c *= act.slope(z);
            }
            let input: &[f64] = if l == 0 { x } else { &cache.out[l - 1] };
            grads[l].add_outer(1.0, &cur, input, Some(1.0));
            let mut prev = vec![0.0; layer.n_in];
            layer.apply_transpose(&cur, &mut prev);
            cur = prev;
        }
        cur
    }

    fn zeros_like(&self) -> Vec<DenseLayer> {
        self.layers.iter().map(|l| DenseLayer::zeros(l.n_in, l.n_out)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSpec {
    pub d_in: usize,
    pub d_latent: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub variational: bool,
    pub kl_weight: f64,
}

impl AeSpec {
    pub fn new(d_in: usize, d_latent: usize) -> Self {
        Self {
            d_in,
            d_latent,
            hidden: vec![64],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            variational: true,
            kl_weight: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_latent == 0 {
            return Err(Error::config("d_latent", "dimensions must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "widths must be positive"));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::config("kl_weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 256,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeLosses {
    /// Mean squared reconstruction error per coordinate.
    pub mse: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    pub spec: AeSpec,
    /// `d_in →` hidden `→ d_latent` (the mean head is the last layer).
    pub encoder: Stack,
    /// Log-variance head on the encoder's last hidden output (variational only).
    pub logvar_head: Option<DenseLayer>,
    pub decoder: Stack,
    pub final_losses: Option<AeLosses>,
}

impl AeModel {
    pub fn init(spec: &AeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_w = vec![spec.d_in];
        enc_w.extend(&spec.hidden);
        enc_w.push(spec.d_latent);
        let mut dec_w = enc_w.clone();
        dec_w.reverse();
        let encoder = Stack::new(&enc_w, spec.hidden_activation, Activation::Identity, &mut rng);
        let logvar_head = spec.variational.then(|| {
            let n_in = enc_w[enc_w.len() - 2];
            let mut head = DenseLayer::init(n_in, spec.d_latent, &mut rng);
            // small initial variance keeps early samples near the mean
            head.weights.iter_mut().for_each(|w| *w *= 0.1);
            head.bias.iter_mut().for_each(|b| *b = -4.0);
            head
        });
        let decoder = Stack::new(&dec_w, spec.hidden_activation, spec.output_activation, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            encoder,
            logvar_head,
            decoder,
            final_losses: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.spec.d_in
    }

    pub fn d_latent(&self) -> usize {
        self.spec.d_latent
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")?;
        if self.encoder.d_in() != self.spec.d_in || self.decoder.d_out() != self.spec.d_in {
            return Err(Error::shape(
                "auto-encoder input/output width",
                self.spec.d_in,
                format!("{}/{}", self.encoder.d_in(), self.decoder.d_out()),
            ));
        }
        if self.encoder.d_out() != self.spec.d_latent || self.decoder.d_in() != self.spec.d_latent {
            return Err(Error::shape("auto-encoder latent width", self.spec.d_latent, self.encoder.d_out()));
        }
        if self.spec.variational != self.logvar_head.is_some() {
            return Err(Error::Malformed("variational flag disagrees with log-variance head".into()));
        }
        Ok(())
    }

    /// Runs the deterministic projection path and keeps the gates.
    pub fn prepare(&self, x: &[f64]) -> Result<AeCache> {
        if x.len() != self.d_in() {
            return Err(Error::shape("auto-encoder point", self.d_in(), x.len()));
        }
        let mut cache = AeCache::default();
        self.encoder.forward(x, &mut cache.enc);
        let latent = self.encoder.output(&cache.enc).to_vec();
        self.decoder.forward(&latent, &mut cache.dec);
        Ok(cache)
    }

    pub fn project_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.prepare(x)?;
        Ok(self.decoder.output(&cache.dec).to_vec())
    }

    pub fn project_vector(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d_in() {
            return Err(Error::shape("auto-encoder vector", self.d_in(), v.len()));
        }
        let cache = self.prepare(x)?;
        Ok(self.jvp(&cache, v))
    }

    /// `J(x) v`
    pub fn jvp(&self, cache: &AeCache, v: &[f64]) -> Vec<f64> {
        let mid = self.encoder.jvp(&cache.enc, v);
        self.decoder.jvp(&cache.dec, &mid)
    }

    /// `J(x)ᵀ w`
    pub fn vjp(&self, cache: &AeCache, w: &[f64]) -> Vec<f64> {
        let mid = self.decoder.vjp(&cache.dec, w);
        self.encoder.vjp(&cache.enc, &mid)
    }

    /// Mean per-coordinate squared reconstruction error over `pool`.
    pub fn reconstruction_mse(&self, pool: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for row in pool.iter_rows() {
            let xh = self.project_point(row)?;
            total += row.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (pool.rows().max(1) * self.d_in()) as f64)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.encoder.layers.iter_mut() {
            out.extend(l.slices_mut());
        }
        if let Some(h) = self.logvar_head.as_mut() {
            out.extend(h.slices_mut());
        }
        for l in self.decoder.layers.iter_mut() {
            out.extend(l.slices_mut());
        }
        out
    }
}

/// Gates of one point's projection.
#[derive(Debug, Clone, Default)]
pub struct AeCache {
    enc: StackCache,
    dec: StackCache,
}

struct AeGrads {
    encoder: Vec<DenseLayer>,
    logvar: Option<DenseLayer>,
    decoder: Vec<DenseLayer>,
}

impl AeGrads {
    fn zeros(model: &AeModel) -> Self {
        Self {
            encoder: model.encoder.zeros_like(),
            logvar: model.logvar_head.as_ref().map(|h| DenseLayer::zeros(h.n_in, h.n_out)),
            decoder: model.decoder.zeros_like(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.encoder {
            out.extend(l.slices());
        }
        if let Some(h) = &self.logvar {
            out.extend(h.slices());
        }
        for l in &self.decoder {
            out.extend(l.slices());
        }
        out
    }
}

/// Trains an auto-encoder on `pool` with Adam. The per-sample objective is
/// the summed squared reconstruction error plus `kl_weight · KL` for
/// variational models; minibatches average it.
pub fn train_autoencoder(pool: &Tensor, spec: &AeSpec, cfg: &AeTrainConfig) -> Result<AeModel> {
    if pool.rows() == 0 {
        return Err(Error::Empty("auto-encoder pool".into()));
    }
    if pool.cols() != spec.d_in {
        return Err(Error::shape("auto-encoder pool", spec.d_in, pool.cols()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut model = AeModel::init(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ae00);
    let n_params: usize = model.param_slices_mut().iter().map(|s| s.len()).sum();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), n_params);
    let mut order: Vec<usize> = (0..pool.rows()).collect();
    let mut last = AeLosses { mse: f64::NAN, kl: 0.0 };
    let mut enc_cache = StackCache::default();
    let mut dec_cache = StackCache::default();
    let d = spec.d_in as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_sq, mut epoch_kl) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = AeGrads::zeros(&model);
            let inv_b = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = pool.row(i);
                model.encoder.forward(x, &mut enc_cache);
                let mu = model.encoder.output(&enc_cache).to_vec();
                let n_enc = model.encoder.layers.len();
                let trunk_out: Vec<f64> = if n_enc >= 2 {
                    enc_cache.out[n_enc - 2].clone()
                } else {
                    x.to_vec()
                };
                let (z, logvar, eps) = match &model.logvar_head {
                    Some(head) => {
                        let mut lv = vec![0.0; spec.d_latent];
                        head.apply(&trunk_out, &mut lv);
                        let eps: Vec<f64> = (0..spec.d_latent).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let z = mu
                            .iter()
                            .zip(&lv)
                            .zip(&eps)
                            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                            .collect();
                        (z, Some(lv), eps)
                    }
                    None => (mu.clone(), None, Vec::new()),
                };
                model.decoder.forward(&z, &mut dec_cache);
                let xh = model.decoder.output(&dec_cache);
                let sq: f64 = xh.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                epoch_sq += sq;
                let dxh: Vec<f64> = xh.iter().zip(x).map(|(a, b)| 2.0 * (a - b) * inv_b).collect();
                let n_dec = model.decoder.layers.len();
                let dz = model.decoder.backward_range(&z, &dec_cache, 0, n_dec, &dxh, &mut grads.decoder);

                let mut dmu = dz.clone();
                let mut dlv = None;
                if let Some(lv) = logvar.as_ref() {
                    let w = spec.kl_weight;
                    let kl: f64 = -0.5
                        * mu.iter()
                            .zip(lv)
                            .map(|(m, l)| 1.0 + l - m * m - l.exp())
                            .sum::<f64>();
                    epoch_kl += kl;
                    let mut g = vec![0.0; spec.d_latent];
                    for j in 0..spec.d_latent {
                        let sd = (0.5 * lv[j]).exp();
                        dmu[j] += w * mu[j] * inv_b;
                        g[j] = dz[j] * 0.5 * sd * eps[j] + w * 0.5 * (lv[j].exp() - 1.0) * inv_b;
                    }
                    dlv = Some(g);
                }
                let mut dtrunk =
                    model.encoder.backward_range(x, &enc_cache, n_enc - 1, n_enc, &dmu, &mut grads.encoder);
                if let (Some(g), Some(head), Some(g_head)) =
                    (dlv.as_ref(), model.logvar_head.as_ref(), grads.logvar.as_mut())
                {
                    g_head.add_outer(1.0, g, &trunk_out, Some(1.0));
                    let mut extra = vec![0.0; head.n_in];
                    head.apply_transpose(g, &mut extra);
                    for (t, e) in dtrunk.iter_mut().zip(&extra) {
                        *t += e;
                    }
                }
                if n_enc >= 2 {
                    model.encoder.backward_range(x, &enc_cache, 0, n_enc - 1, &dtrunk, &mut grads.encoder);
                }
            }
            let gs = grads.slices();
            if gs.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    term: LossTerm::Reconstruction,
                    detail: Some(format!("epoch {epoch}")),
                });
            }
            let params = model.param_slices_mut();
            adam.step_slices(params.into_iter(), gs.into_iter())?;
        }
        let n = pool.rows() as f64;
        last = AeLosses {
            mse: epoch_sq / (n * d),
            kl: epoch_kl / n,
        };
        if !last.mse.is_finite() || !last.kl.is_finite() {
            let term = if last.mse.is_finite() { LossTerm::Kl } else { LossTerm::Reconstruction };
            return Err(Error::NonFinite {
                term,
                detail: Some(format!("epoch {epoch}")),
            });
        }
        log::debug!("ae epoch {epoch}: mse {:.3e} kl {:.3e}", last.mse, last.kl);
    }
    log::info!("auto-encoder trained: mse {:.3e}, kl {:.3e}", last.mse, last.kl);
    model.final_losses = Some(last);
    Ok(model)
}
