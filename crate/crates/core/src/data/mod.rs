//! Procedural collage-analog datasets.
//!
//! An instance is `n_tiles` square tiles of `k × k` pixels laid out as
//! contiguous blocks of the input vector. Tile `t` of instance `i` is
//!
//! ```text
//! 0.5·1 + s_it·a_it·u_t + V_t z_it + ε,   a_it = γ_t/2 + j·ζ_it
//! ```
//!
//! with `s_it ∈ {−1, +1}` the tile's class bit, `u_t` a fixed unit template,
//! `V_t` an orthonormal nuisance basis (orthogonal to `u_t`) scaled by 0.05,
//! `z, ζ ~ N(0, I)`, `ε ~ N(0, σ_t² I)`, clamped to `[0, 1]`. The amplitude
//! jitter `j` makes the class direction a continuous latent dimension, so the
//! pool's intrinsic dimension is `Σ_t (r_t + 1)`.
//!
//! Training and in-domain validation tie every bit to the label. In test set
//! `t` only tile `t` follows the label; the others are drawn uniformly. The
//! unlabeled pool draws every bit uniformly.

pub mod io;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;

pub const NUISANCE_SCALE: f64 = 0.05;

/// Labeled inputs, one row per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<u8>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::shape("batch inputs rank", 2, inputs.shape().len()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape("batch labels", inputs.rows(), labels.len()));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::config("labels", format!("label {i} is not 0 or 1")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Training data with optional per-instance element masks (1 = keep).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskableDataset {
    pub inputs: Tensor,
    pub labels: Vec<u8>,
    pub masks: Option<Vec<u8>>,
}

impl MaskableDataset {
    pub fn new(inputs: Tensor, labels: Vec<u8>, masks: Option<Vec<u8>>) -> Result<Self> {
        let batch = Batch::new(inputs, labels)?;
        if let Some(m) = &masks {
            if m.len() != batch.inputs.len() {
                return Err(Error::shape("mask", batch.inputs.len(), m.len()));
            }
            if m.iter().any(|&b| b > 1) {
                return Err(Error::config("mask", "bits must be 0 or 1"));
            }
        }
        Ok(Self {
            inputs: batch.inputs,
            labels: batch.labels,
            masks,
        })
    }

    pub fn unmasked(batch: &Batch) -> Self {
        Self {
            inputs: batch.inputs.clone(),
            labels: batch.labels.clone(),
            masks: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unset fields take the four-tile defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_tiles: usize,
    pub tile_side: usize,
    /// Class separation per tile, `γ_t > 0`.
    pub margins: Vec<f64>,
    /// Pixel noise standard deviation per tile.
    pub noise: Vec<f64>,
    /// Number of nuisance directions per tile.
    pub nuisance_ranks: Vec<usize>,
    pub amplitude_jitter: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_tiles: 4,
            tile_side: 8,
            margins: vec![0.9, 0.5, 0.45, 0.4],
            noise: vec![0.002, 0.003, 0.004, 0.005],
            nuisance_ranks: vec![2; 4],
            amplitude_jitter: NUISANCE_SCALE,
            n_train: 4096,
            n_val: 1024,
            n_pool: 5000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tiles == 0 {
            return Err(Error::config("n_tiles", "must be at least 1"));
        }
        if self.tile_side < 2 {
            return Err(Error::config("tile_side", "must be at least 2"));
        }
        for (name, len) in [
            ("margins", self.margins.len()),
            ("noise", self.noise.len()),
            ("nuisance_ranks", self.nuisance_ranks.len()),
        ] {
            if len != self.n_tiles {
                return Err(Error::config(
                    name,
                    format!("needs {} entries, got {len}", self.n_tiles),
                ));
            }
        }
        if let Some(g) = self.margins.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::config("margins", format!("{g} is not > 0")));
        }
        if let Some(s) = self.noise.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::config("noise", format!("{s} is not >= 0")));
        }
        if !(self.amplitude_jitter.is_finite() && self.amplitude_jitter >= 0.0) {
            return Err(Error::config("amplitude_jitter", "must be >= 0"));
        }
        let px = self.tile_side * self.tile_side;
        if let Some(r) = self.nuisance_ranks.iter().find(|&&r| r + 1 > px) {
            return Err(Error::config(
                "nuisance_ranks",
                format!("rank {r} leaves no room for the template in {px} pixels"),
            ));
        }
        Ok(())
    }

    pub fn pixels_per_tile(&self) -> usize {
        self.tile_side * self.tile_side
    }

    pub fn d_in(&self) -> usize {
        self.n_tiles * self.pixels_per_tile()
    }

    /// `Σ_t (r_t + 1)`, or `Σ_t r_t` when the amplitude is not jittered.
    pub fn true_intrinsic_dim(&self) -> usize {
        let extra = usize::from(self.amplitude_jitter > 0.0);
        self.nuisance_ranks.iter().map(|r| r + extra).sum()
    }

    /// Input range of tile `t`.
    pub fn tile_range(&self, t: usize) -> std::ops::Range<usize> {
        let p = self.pixels_per_tile();
        t * p..(t + 1) * p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: GenConfig,
    pub true_intrinsic_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Batch,
    pub val_id: Batch,
    /// Unlabeled sample with every tile bit independent.
    pub ood_pool: Tensor,
    /// Test set `t`: only tile `t` follows the label.
    pub test_sets: Vec<Batch>,
    /// Held-out copies of the per-tile test distribution, for model selection.
    pub ood_val: Vec<Batch>,
    pub meta: DatasetMeta,
}

/// Fixed per-tile generative structure.
#[derive(Debug, Clone)]
pub struct TileBasis {
    /// Unit template per tile (`k²` entries).
    pub templates: Vec<Vec<f64>>,
    /// Orthonormal nuisance directions per tile.
    pub nuisance: Vec<Vec<Vec<f64>>>,
}

impl TileBasis {
    /// Orthonormal `[u_t, V_t]` via Gram–Schmidt on Gaussian draws.
    pub fn generate(cfg: &GenConfig) -> Self {
        let mut rng = stream(cfg.seed, 0);
        let px = cfg.pixels_per_tile();
        let mut templates = Vec::with_capacity(cfg.n_tiles);
        let mut nuisance = Vec::with_capacity(cfg.n_tiles);
        for t in 0..cfg.n_tiles {
            let mut basis: Vec<Vec<f64>> = Vec::new();
            while basis.len() < cfg.nuisance_ranks[t] + 1 {
                let mut v: Vec<f64> = (0..px).map(|_| rng.sample(StandardNormal)).collect();
                for b in &basis {
                    let c: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(b).for_each(|(a, b)| *a -= c * b);
                }
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|a| *a /= n);
                    basis.push(v);
                }
            }
            let u = basis.remove(0);
            templates.push(u);
            nuisance.push(basis);
        }
        Self {
            templates,
            nuisance,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How tile bits relate to the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitPattern {
    /// Every tile follows the label.
    AllAligned,
    /// Only the given tile follows the label.
    OnlyTile(usize),
    /// All bits uniform; the returned label is meaningless.
    Independent,
}

fn sample_rows(
    cfg: &GenConfig,
    basis: &TileBasis,
    n: usize,
    pattern: BitPattern,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<u8>) {
    let d = cfg.d_in();
    let mut data = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for row in data.chunks_exact_mut(d) {
        let y: u8 = u8::from(rng.gen_bool(0.5));
        let label_bit = 2.0 * f64::from(y) - 1.0;
        for t in 0..cfg.n_tiles {
            let aligned = match pattern {
                BitPattern::AllAligned => true,
                BitPattern::OnlyTile(k) => k == t,
                BitPattern::Independent => false,
            };
            let s = if aligned {
                label_bit
            } else if rng.gen_bool(0.5) {
                1.0
            } else {
                -1.0
            };
            let zeta: f64 = rng.sample(StandardNormal);
            let amp = cfg.margins[t] / 2.0 + cfg.amplitude_jitter * zeta;
            let tile = &mut row[cfg.tile_range(t)];
            let u = &basis.templates[t];
            for (p, &ui) in tile.iter_mut().zip(u) {
                *p = 0.5 + s * amp * ui;
            }
            for v in &basis.nuisance[t] {
                let z: f64 = rng.sample(StandardNormal);
                let c = NUISANCE_SCALE * z;
                for (p, &vi) in tile.iter_mut().zip(v) {
                    *p += c * vi;
                }
            }
            let sigma = cfg.noise[t];
            for p in tile.iter_mut() {
                if sigma > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    *p += sigma * e;
                }
                *p = p.clamp(0.0, 1.0);
            }
        }
        labels.push(y);
    }
    let inputs = Tensor::matrix(n, d, data).expect("generator shape");
    (inputs, labels)
}

/// Generates a full bundle. Deterministic in `cfg.seed`.
pub fn gen_collages(cfg: &GenConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let basis = TileBasis::generate(cfg);
    let labeled = |n, pattern, id| -> Batch {
        let (x, y) = sample_rows(cfg, &basis, n, pattern, &mut stream(cfg.seed, id));
        Batch {
            inputs: x,
            labels: y,
        }
    };
    let train = labeled(cfg.n_train, BitPattern::AllAligned, 1);
    let val_id = labeled(cfg.n_val, BitPattern::AllAligned, 2);
    let (ood_pool, _) = sample_rows(
        cfg,
        &basis,
        cfg.n_pool,
        BitPattern::Independent,
        &mut stream(cfg.seed, 3),
    );
    let test_sets = (0..cfg.n_tiles)
        .map(|t| labeled(cfg.n_test, BitPattern::OnlyTile(t), 100 + t as u64))
        .collect();
    let ood_val = (0..cfg.n_tiles)
        .map(|t| labeled(cfg.n_val, BitPattern::OnlyTile(t), 200 + t as u64))
        .collect();
    Ok(DatasetBundle {
        train,
        val_id,
        ood_pool,
        test_sets,
        ood_val,
        meta: DatasetMeta {
            config: cfg.clone(),
            true_intrinsic_dim: cfg.true_intrinsic_dim(),
        },
    })
}

/// Draws a standalone sample from the generator's distribution, using a
/// stream id outside the ones reserved by [`gen_collages`].
pub fn sample_collages(cfg: &GenConfig, n: usize, pattern: BitPattern, stream_id: u64) -> Result<Batch> {
    cfg.validate()?;
    if let BitPattern::OnlyTile(t) = pattern {
        if t >= cfg.n_tiles {
            return Err(Error::config("tile", format!("{t} out of range")));
        }
    }
    let basis = TileBasis::generate(cfg);
    let (inputs, labels) = sample_rows(cfg, &basis, n, pattern, &mut stream(cfg.seed, 1000 + stream_id));
    Ok(Batch { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_train: 400,
            n_val: 50,
            n_pool: 100,
            n_test: 300,
            ..GenConfig::default()
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = gen_collages(&small()).unwrap();
        let b = gen_collages(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_collages(&GenConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = GenConfig {
            margins: vec![1.0, 0.0, 1.0, 1.0],
            ..small()
        };
        assert!(matches!(gen_collages(&bad), Err(Error::InvalidConfig { field, .. }) if field == "margins"));
        let bad = GenConfig {
            tile_side: 1,
            ..small()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "tile_side"));
        let bad = GenConfig {
            noise: vec![0.1],
            ..small()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "noise"));
    }

    #[test]
    fn noiseless_tile_takes_two_values_per_pixel() {
        let cfg = GenConfig {
            noise: vec![0.0; 4],
            nuisance_ranks: vec![0; 4],
            amplitude_jitter: 0.0,
            ..small()
        };
        let b = gen_collages(&cfg).unwrap();
        let range = cfg.tile_range(2);
        for j in range.clone() {
            let mut vals: Vec<f64> = b.train.inputs.iter_rows().map(|r| r[j]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert!(vals.len() <= 2, "pixel {j} has {} values", vals.len());
        }
        // the template itself separates the classes perfectly
        let basis = TileBasis::generate(&cfg);
        let u = &basis.templates[2];
        for (row, &y) in b.train.inputs.iter_rows().zip(&b.train.labels) {
            let proj: f64 = row[range.clone()].iter().zip(u).map(|(x, u)| (x - 0.5) * u).sum();
            assert_eq!(proj > 0.0, y == 1);
        }
    }

    #[test]
    fn intrinsic_dim_and_shapes() {
        let cfg = small();
        let b = gen_collages(&cfg).unwrap();
        assert_eq!(b.meta.true_intrinsic_dim, 12);
        assert_eq!(b.train.inputs.shape(), &[400, 256]);
        assert_eq!(b.ood_pool.shape(), &[100, 256]);
        assert_eq!(b.test_sets.len(), 4);
        assert_eq!(b.ood_val.len(), 4);
        assert!(b.train.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn tile_label_correlation(batch: &Batch, cfg: &GenConfig, basis: &TileBasis, t: usize) -> f64 {
        let (bits, labels): (Vec<f64>, Vec<f64>) = batch
            .inputs
            .iter_rows()
            .zip(&batch.labels)
            .map(|(row, &y)| {
                let proj: f64 = row[cfg.tile_range(t)].iter().zip(&basis.templates[t]).map(|(p, u)| (p - 0.5) * u).sum();
                (proj.signum(), if y == 1 { 1.0 } else { -1.0 })
            })
            .unzip();
        let n = bits.len() as f64;
        let (mb, ml) = (bits.iter().sum::<f64>() / n, labels.iter().sum::<f64>() / n);
        let cov: f64 = bits.iter().zip(&labels).map(|(b, l)| (b - mb) * (l - ml)).sum();
        let vb: f64 = bits.iter().map(|b| (b - mb).powi(2)).sum();
        let vl: f64 = labels.iter().map(|l| (l - ml).powi(2)).sum();
        cov / (vb * vl).sqrt()
    }

    #[test]
    fn label_correlations_follow_the_split() {
        let cfg = GenConfig {
            n_test: 6000,
            ..small()
        };
        let b = gen_collages(&cfg).unwrap();
        let basis = TileBasis::generate(&cfg);
        for t in 0..4 {
            let r = tile_label_correlation(&b.train, &cfg, &basis, t);
            assert!(r > 0.9, "train tile {t}: {r}");
            for (s, test) in b.test_sets.iter().enumerate() {
                let r = tile_label_correlation(test, &cfg, &basis, t);
                if s == t {
                    assert!(r > 0.9, "test {s} tile {t}: {r}");
                } else {
                    assert!(r.abs() <= 0.05, "test {s} tile {t}: {r}");
                }
            }
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let basis = TileBasis::generate(&small());
        for t in 0..4 {
            let mut all = vec![basis.templates[t].clone()];
            all.extend(basis.nuisance[t].iter().cloned());
            for i in 0..all.len() {
                for j in 0..all.len() {
                    let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12);
                }
            }
        }
    }
}
