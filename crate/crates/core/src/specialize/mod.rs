//! Gradient-magnitude masks, masked fine-tuning and greedy pairwise
//! distillation of a trained model set.

pub mod io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, MaskableDataset};
use crate::error::{Error, Result};
use crate::math::{AdamConfig, AdamState, MlpParams, MlpSpec, SampleTape, Tensor};
use crate::training::{evaluate_objective, init_model, LossWeights, ModelInputs, ModelSet};

/// Per-instance, per-model binary masks over input elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    n: usize,
    n_models: usize,
    d_in: usize,
    /// `bits[(i * n_models + m) * d_in + e]`
    bits: Vec<u8>,
}

impl MaskSet {
    pub fn from_bits(n: usize, n_models: usize, d_in: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n * n_models * d_in {
            return Err(Error::shape("mask bits", n * n_models * d_in, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Malformed("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            n,
            n_models,
            d_in,
            bits,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, m: usize, e: usize) -> u8 {
        self.bits[(i * self.n_models + m) * self.d_in + e]
    }

    /// Row-major `n × d_in` mask of model `m`.
    pub fn model_mask(&self, m: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n * self.d_in);
        for i in 0..self.n {
            let start = (i * self.n_models + m) * self.d_in;
            out.extend_from_slice(&self.bits[start..start + self.d_in]);
        }
        out
    }

    /// Whether every element of every instance belongs to exactly one model.
    pub fn is_partition(&self) -> bool {
        (0..self.n).all(|i| {
            (0..self.d_in).all(|e| (0..self.n_models).map(|m| u32::from(self.get(i, m, e))).sum::<u32>() == 1)
        })
    }

    /// Fraction of set bits of model `m` inside each of `ranges`.
    pub fn coverage(&self, m: usize, ranges: &[std::ops::Range<usize>]) -> Vec<f64> {
        ranges
            .iter()
            .map(|r| {
                let total = (self.n * r.len()) as f64;
                let set: usize = (0..self.n)
                    .map(|i| r.clone().filter(|&e| self.get(i, m, e) == 1).count())
                    .sum();
                set as f64 / total
            })
            .collect()
    }
}

/// Whether masks are computed per instance or shared by all instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    PerInstance,
    /// One mask per model from the mean gradient magnitude over the data.
    Global,
}

fn argmax_abs(grads: &[Vec<f64>], e: usize) -> usize {
    let mut best = 0;
    for m in 1..grads.len() {
        if grads[m][e].abs() > grads[best][e].abs() {
            best = m;
        }
    }
    best
}

/// Assigns every input element of every instance to the model with the
/// largest gradient magnitude there (lowest index on ties).
pub fn compute_masks(set: &ModelSet, inputs: &Tensor, mode: MaskMode) -> Result<MaskSet> {
    let m_count = set.len();
    if m_count == 0 {
        return Err(Error::Empty("model set".into()));
    }
    let d = set.d_in();
    if inputs.cols() != d {
        return Err(Error::shape("mask inputs", d, inputs.cols()));
    }
    let n = inputs.rows();
    let grads_at = |x: &[f64]| -> Vec<Vec<f64>> {
        let mut tape = SampleTape::new(&set.spec);
        set.params
            .iter()
            .map(|p| {
                tape.run(&set.spec, p, x);
                tape.input_grad.clone()
            })
            .collect()
    };
    let bits = match mode {
        MaskMode::PerInstance => {
            let rows: Vec<Vec<u8>> = inputs
                .iter_rows()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|x| {
                    let g = grads_at(x);
                    let mut row = vec![0u8; m_count * d];
                    for e in 0..d {
                        row[argmax_abs(&g, e) * d + e] = 1;
                    }
                    row
                })
                .collect();
            rows.concat()
        }
        MaskMode::Global => {
            let per_row: Vec<Vec<Vec<f64>>> = inputs
                .iter_rows()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|x| grads_at(x))
                .collect();
            let mut mean = vec![vec![0.0; d]; m_count];
            for g in &per_row {
                for (acc, gm) in mean.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(gm) {
                        *a += v.abs();
                    }
                }
            }
            let mut row = vec![0u8; m_count * d];
            for e in 0..d {
                row[argmax_abs(&mean, e) * d + e] = 1;
            }
            row.repeat(n)
        }
    };
    MaskSet::from_bits(n, m_count, d, bits)
}

/// Replaces masked-out elements (mask bit 0) with the same element of
/// another row of the minibatch, drawn by an independent random permutation
/// of each column. A single-row minibatch is returned unchanged.
pub fn mask_minibatch(inputs: &Tensor, mask: &[u8], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (n, d) = (inputs.rows(), inputs.cols());
    if mask.len() != n * d {
        return Err(Error::shape("minibatch mask", n * d, mask.len()));
    }
    let mut out = inputs.clone();
    if n < 2 {
        if mask.contains(&0) {
            log::debug!("single-row minibatch left unmasked");
        }
        return Ok(out);
    }
    let src = inputs.data();
    let dst = out.data_mut();
    let mut perm: Vec<usize> = (0..n).collect();
    for e in 0..d {
        if (0..n).all(|i| mask[i * d + e] == 1) {
            continue;
        }
        perm.shuffle(rng);
        for i in 0..n {
            if mask[i * d + e] == 0 {
                dst[i * d + e] = src[perm[i] * d + e];
            }
        }
    }
    Ok(out)
}

/// Applies one model's mask to a whole dataset, split into consecutive
/// minibatches of `batch_size` rows.
pub fn apply_mask(data: &Batch, mask: &[u8], batch_size: usize, seed: u64) -> Result<MaskableDataset> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let (n, d) = (data.len(), data.d_in());
    if mask.len() != n * d {
        return Err(Error::shape("mask", n * d, mask.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * d);
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = data.inputs.select_rows(&idx);
        let masked = mask_minibatch(&x, &mask[start * d..end * d], &mut rng)?;
        out.extend_from_slice(masked.data());
    }
    MaskableDataset::new(Tensor::matrix(n, d, out)?, data.labels.clone(), Some(mask.to_vec()))
}

fn default_ft_lr() -> f64 {
    0.002
}
fn default_ft_batch() -> usize {
    256
}
fn default_ft_updates() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ft_updates")]
    pub n_updates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Retrain from a fresh initialization instead of the given parameters.
    #[serde(default)]
    pub from_scratch: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: default_ft_lr(),
            batch_size: default_ft_batch(),
            n_updates: default_ft_updates(),
            seed: 0,
            from_scratch: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} is not a positive number", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Cross-entropy training of one model on masked data: every minibatch is
/// re-masked with fresh permutations. `stream` separates the random draws
/// of different fine-tuning jobs sharing a seed.
pub fn finetune(
    spec: &MlpSpec,
    params: &MlpParams,
    data: &Batch,
    mask: Option<&[u8]>,
    cfg: &FinetuneConfig,
    stream: u64,
) -> Result<MlpParams> {
    cfg.validate()?;
    params.check(spec)?;
    let (n, d) = (data.len(), data.d_in());
    if d != spec.d_in() {
        return Err(Error::shape("fine-tuning inputs", spec.d_in(), d));
    }
    if let Some(m) = mask {
        if m.len() != n * d {
            return Err(Error::shape("fine-tuning mask", n * d, m.len()));
        }
    }
    let mut p = if cfg.from_scratch {
        init_model(spec, cfg.seed ^ 0x5eed, stream as usize)
    } else {
        params.clone()
    };
    if cfg.n_updates == 0 {
        return Ok(p);
    }
    if n == 0 {
        return Err(Error::Empty("fine-tuning data".into()));
    }
    let mut opt = AdamState::for_mlp(AdamConfig::with_lr(cfg.lr), &p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let weights = LossWeights::erm();
    for _ in 0..cfg.n_updates {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let mb = data.select(idx);
        let x = match mask {
            Some(m) => {
                let sub: Vec<u8> = idx.iter().flat_map(|&i| m[i * d..(i + 1) * d].iter().copied()).collect();
                mask_minibatch(&mb.inputs, &sub, &mut rng)?
            }
            None => mb.inputs,
        };
        let (_, grads) = evaluate_objective(
            spec,
            std::slice::from_ref(&p),
            ModelInputs::Shared(&x),
            &mb.labels,
            None,
            &weights,
            true,
        )?;
        let g = grads.expect("requested gradients");
        opt.step_mlp(&mut p, &g[0])?;
    }
    Ok(p)
}

/// Fine-tunes every model of a set on its own mask.
pub fn finetune_all(set: &ModelSet, data: &Batch, masks: &MaskSet, cfg: &FinetuneConfig) -> Result<ModelSet> {
    if masks.n_models() != set.len() || masks.n() != data.len() {
        return Err(Error::shape(
            "masks",
            format!("{} models x {} rows", set.len(), data.len()),
            format!("{} models x {} rows", masks.n_models(), masks.n()),
        ));
    }
    let params = (0..set.len())
        .into_par_iter()
        .map(|m| finetune(&set.spec, &set.params[m], data, Some(&masks.model_mask(m)), cfg, m as u64))
        .collect::<Result<Vec<_>>>()?;
    ModelSet::new(set.spec.clone(), params)
}

type ScoreFn<'a> = dyn Fn(&MlpSpec, &MlpParams) -> Result<f64> + Sync + 'a;

/// Scores models for distillation; higher is better.
pub struct SelectorStrategy<'a> {
    pub label: String,
    score: Box<ScoreFn<'a>>,
}

impl<'a> SelectorStrategy<'a> {
    pub fn new(label: impl Into<String>, score: impl Fn(&MlpSpec, &MlpParams) -> Result<f64> + Sync + 'a) -> Self {
        Self {
            label: label.into(),
            score: Box::new(score),
        }
    }

    /// Accuracy on a held-out labeled batch.
    pub fn accuracy_on(label: impl Into<String>, batch: &'a Batch) -> Self {
        Self::new(label, move |spec, p| crate::evaluate::accuracy(spec, p, batch))
    }

    pub fn score(&self, spec: &MlpSpec, params: &MlpParams) -> Result<f64> {
        let s = (self.score)(spec, params)?;
        if !s.is_finite() {
            return Err(Error::NonFiniteInput(format!("selector {} returned {s}", self.label)));
        }
        Ok(s)
    }
}

fn default_max_combinations() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_max_combinations")]
    pub max_combinations: usize,
    /// Training of each combined model; `from_scratch` starts it from a fresh
    /// draw, otherwise from the better parent.
    #[serde(default = "distill_finetune_default")]
    pub finetune: FinetuneConfig,
}

fn distill_finetune_default() -> FinetuneConfig {
    FinetuneConfig {
        from_scratch: true,
        ..FinetuneConfig::default()
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            max_combinations: default_max_combinations(),
            finetune: distill_finetune_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: usize,
    /// Candidate indices merged; originals come first, combinations follow.
    pub parents: [usize; 2],
    pub child: usize,
    /// Selector scores of both parents and the child, in that order.
    pub selector_scores: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTrail {
    pub selector: String,
    pub entries: Vec<AuditEntry>,
    /// Score of every candidate, originals first.
    pub scores: Vec<f64>,
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub model: MlpParams,
    /// Originals followed by every combination trained.
    pub candidates: Vec<MlpParams>,
    pub masks: Vec<Vec<u8>>,
    pub audit: AuditTrail,
}

fn top_two(scores: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    (idx[0], idx[1])
}

fn argmax(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
}

/// Greedy pairwise distillation: repeatedly trains a model on the union of
/// the two best candidates' masks, while each new combination becomes the
/// selector's strict favourite.
pub fn greedy_distill(
    set: &ModelSet,
    masks: &MaskSet,
    data: &Batch,
    selector: &SelectorStrategy<'_>,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    if set.len() < 2 {
        return Err(Error::config("models", "distillation needs at least two models"));
    }
    if masks.n_models() != set.len() || masks.n() != data.len() || masks.d_in() != set.d_in() {
        return Err(Error::shape(
            "masks",
            format!("{} models x {} rows x {}", set.len(), data.len(), set.d_in()),
            format!("{} models x {} rows x {}", masks.n_models(), masks.n(), masks.d_in()),
        ));
    }
    let mut candidates = set.params.clone();
    let mut cand_masks: Vec<Vec<u8>> = (0..set.len()).map(|m| masks.model_mask(m)).collect();
    let mut scores = candidates
        .iter()
        .map(|p| selector.score(&set.spec, p))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for iteration in 0..cfg.max_combinations {
        let (a, b) = top_two(&scores);
        let union: Vec<u8> = cand_masks[a].iter().zip(&cand_masks[b]).map(|(x, y)| x | y).collect();
        let child = finetune(
            &set.spec,
            &candidates[a],
            data,
            Some(&union),
            &cfg.finetune,
            1000 + iteration as u64,
        )?;
        let s = selector.score(&set.spec, &child)?;
        let strictly_best = scores.iter().all(|&o| s > o);
        entries.push(AuditEntry {
            iteration,
            parents: [a, b],
            child: candidates.len(),
            selector_scores: [scores[a], scores[b], s],
        });
        candidates.push(child);
        cand_masks.push(union);
        scores.push(s);
        if !strictly_best {
            break;
        }
    }
    let best = argmax(&scores);
    Ok(DistillOutcome {
        model: candidates[best].clone(),
        candidates,
        masks: cand_masks,
        audit: AuditTrail {
            selector: selector.label.clone(),
            entries,
            scores,
            best,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::accuracy;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn linear_set(rows: &[&[f64]]) -> ModelSet {
        let spec = MlpSpec::linear(rows[0].len()).unwrap();
        let params = rows
            .iter()
            .map(|w| {
                let mut p = MlpParams::zeros(&spec);
                p.layers[0].weights.copy_from_slice(w);
                p
            })
            .collect();
        ModelSet::new(spec, params).unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            y.push(u8::from(i % 2 == 0));
        }
        Batch::new(Tensor::matrix(n, d, x).unwrap(), y).unwrap()
    }

    /// Label follows the sign of the first input.
    fn first_axis_batch(n: usize, d: usize, seed: u64) -> Batch {
        let b = random_batch(n, d, seed);
        let y = b.inputs.iter_rows().map(|x| u8::from(x[0] >= 0.0)).collect();
        Batch::new(b.inputs, y).unwrap()
    }

    #[test]
    fn masks_follow_largest_magnitude() {
        let set = linear_set(&[&[0.5, -0.1], &[0.2, 0.3]]);
        let x = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let m = compute_masks(&set, &x, MaskMode::PerInstance).unwrap();
        assert_eq!(m.model_mask(0), vec![1, 0]);
        assert_eq!(m.model_mask(1), vec![0, 1]);
    }

    #[test]
    fn single_model_owns_everything_and_ties_go_low() {
        let one = linear_set(&[&[0.5, -0.1, 0.0]]);
        let x = random_batch(4, 3, 1).inputs;
        assert!(compute_masks(&one, &x, MaskMode::PerInstance).unwrap().bits().iter().all(|&b| b == 1));
        let tied = linear_set(&[&[0.5, 1.0], &[-0.5, 1.0]]);
        assert!(compute_masks(&tied, &x, MaskMode::PerInstance).is_err());
        let x2 = random_batch(4, 2, 1).inputs;
        let m = compute_masks(&tied, &x2, MaskMode::PerInstance).unwrap();
        assert!(m.model_mask(0).iter().all(|&b| b == 1));
        assert_eq!(m, compute_masks(&tied, &x2, MaskMode::Global).unwrap());
    }

    proptest! {
        #[test]
        fn masks_partition_elements(seed in 0u64..1000, m in 1usize..5) {
            let spec = MlpSpec::with_hidden(6, &[4]).unwrap();
            let params = (0..m).map(|i| init_model(&spec, seed, i)).collect();
            let set = ModelSet::new(spec, params).unwrap();
            let x = random_batch(7, 6, seed).inputs;
            for mode in [MaskMode::PerInstance, MaskMode::Global] {
                prop_assert!(compute_masks(&set, &x, mode).unwrap().is_partition());
            }
        }

        #[test]
        fn all_zero_mask_preserves_column_multisets(seed in 0u64..1000, bs in 1usize..9) {
            let data = random_batch(17, 3, seed);
            let out = apply_mask(&data, &vec![0; 17 * 3], bs, seed).unwrap();
            for start in (0..17).step_by(bs) {
                let end = (start + bs).min(17);
                for e in 0..3 {
                    let mut a: Vec<f64> = (start..end).map(|i| data.inputs.row(i)[e]).collect();
                    let mut b: Vec<f64> = (start..end).map(|i| out.inputs.row(i)[e]).collect();
                    a.sort_by(f64::total_cmp);
                    b.sort_by(f64::total_cmp);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn apply_mask_cases() {
        let data = random_batch(20, 4, 3);
        let same = apply_mask(&data, &vec![1; 80], 8, 0).unwrap();
        assert_eq!(same.inputs, data.inputs);
        assert_eq!(same.labels, data.labels);
        let mask: Vec<u8> = (0..80).map(|k| u8::from(k % 4 == 0)).collect();
        let a = apply_mask(&data, &mask, 8, 5).unwrap();
        assert_eq!(a, apply_mask(&data, &mask, 8, 5).unwrap());
        for i in 0..20 {
            assert_eq!(a.inputs.row(i)[0], data.inputs.row(i)[0]);
        }
        assert_ne!(a.inputs, data.inputs);
        let single = apply_mask(&data, &vec![0; 80], 1, 0).unwrap();
        assert_eq!(single.inputs, data.inputs);
        assert!(apply_mask(&data, &[1; 3], 8, 0).is_err());
    }

    #[test]
    fn zero_step_finetune_is_identity() {
        let data = first_axis_batch(30, 3, 4);
        let spec = MlpSpec::with_hidden(3, &[4]).unwrap();
        let p = init_model(&spec, 1, 0);
        let cfg = FinetuneConfig {
            n_updates: 0,
            ..FinetuneConfig::default()
        };
        assert_eq!(finetune(&spec, &p, &data, None, &cfg, 0).unwrap(), p);
    }

    #[test]
    fn unmasked_finetune_keeps_descending() {
        let data = first_axis_batch(128, 3, 4);
        let spec = MlpSpec::with_hidden(3, &[4]).unwrap();
        let p = init_model(&spec, 1, 0);
        let set = |p: MlpParams| ModelSet::new(spec.clone(), vec![p]).unwrap();
        let mut prev = set(p.clone()).predictive_loss(0, &data).unwrap();
        let mut cur = p;
        let cfg = FinetuneConfig {
            n_updates: 100,
            batch_size: 128,
            lr: 0.01,
            ..FinetuneConfig::default()
        };
        for round in 0..5 {
            cur = finetune(&spec, &cur, &data, None, &cfg, round).unwrap();
            let loss = set(cur.clone()).predictive_loss(0, &data).unwrap();
            assert!(loss < prev, "round {round}: {loss} >= {prev}");
            prev = loss;
        }
    }

    #[test]
    fn masking_the_signal_removes_it() {
        // a model fine-tuned without access to the informative column cannot use it
        let data = first_axis_batch(400, 3, 6);
        let spec = MlpSpec::linear(3).unwrap();
        let p = MlpParams::zeros(&spec);
        let blind: Vec<u8> = (0..400 * 3).map(|k| u8::from(k % 3 != 0)).collect();
        let cfg = FinetuneConfig {
            n_updates: 300,
            batch_size: 64,
            lr: 0.01,
            ..FinetuneConfig::default()
        };
        let seeing = finetune(&spec, &p, &data, None, &cfg, 0).unwrap();
        let masked = finetune(&spec, &p, &data, Some(&blind), &cfg, 0).unwrap();
        assert!(accuracy(&spec, &seeing, &data).unwrap() > 0.95);
        assert!(accuracy(&spec, &masked, &data).unwrap() < 0.7);
    }

    fn distill_fixture() -> (ModelSet, MaskSet, Batch) {
        let set = linear_set(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]]);
        let data = first_axis_batch(64, 4, 7);
        let masks = compute_masks(&set, &data.inputs, MaskMode::PerInstance).unwrap();
        (set, masks, data)
    }

    fn quick() -> DistillConfig {
        DistillConfig {
            max_combinations: 5,
            finetune: FinetuneConfig {
                n_updates: 5,
                batch_size: 16,
                from_scratch: true,
                ..FinetuneConfig::default()
            },
        }
    }

    #[test]
    fn worse_first_combination_stops_after_one() {
        let (set, masks, data) = distill_fixture();
        let originals = set.params.clone();
        let sel = SelectorStrategy::new("fixed", move |_, p| {
            Ok(match originals.iter().position(|o| o == p) {
                Some(0) => 0.9,
                Some(1) => 0.8,
                Some(_) => 0.5,
                None => 0.1,
            })
        });
        let out = greedy_distill(&set, &masks, &data, &sel, &quick()).unwrap();
        assert_eq!(out.audit.entries.len(), 1);
        assert_eq!(out.audit.entries[0].parents, [0, 1]);
        assert_eq!(out.audit.best, 0);
        assert_eq!(out.model, set.params[0]);
        assert_eq!(out.candidates.len(), 4);
    }

    #[test]
    fn complementary_parents_give_full_mask() {
        let (set, masks, data) = distill_fixture();
        let originals = set.params.clone();
        let sel = SelectorStrategy::new("fixed", move |_, p| {
            Ok(match originals.iter().position(|o| o == p) {
                Some(i) => [0.9, 0.1, 0.8][i],
                None => 0.0,
            })
        });
        let out = greedy_distill(&set, &masks, &data, &sel, &quick()).unwrap();
        assert_eq!(out.audit.entries[0].parents, [0, 2]);
        // union exposes exactly the parents' elements
        let want: Vec<u8> = masks
            .model_mask(0)
            .iter()
            .zip(masks.model_mask(2))
            .map(|(a, b)| a | b)
            .collect();
        assert_eq!(out.masks[3], want);
        let two = ModelSet::new(set.spec.clone(), set.params[..2].to_vec()).unwrap();
        let m2 = compute_masks(&two, &data.inputs, MaskMode::PerInstance).unwrap();
        let full: Vec<u8> = m2.model_mask(0).iter().zip(m2.model_mask(1)).map(|(a, b)| a | b).collect();
        assert!(full.iter().all(|&b| b == 1));
    }

    #[test]
    fn loop_is_bounded() {
        let (set, masks, data) = distill_fixture();
        let calls = AtomicUsize::new(0);
        let sel = SelectorStrategy::new("rising", move |_, _| Ok(calls.fetch_add(1, Ordering::SeqCst) as f64));
        let cfg = DistillConfig {
            max_combinations: 3,
            ..quick()
        };
        let out = greedy_distill(&set, &masks, &data, &sel, &cfg).unwrap();
        assert_eq!(out.audit.entries.len(), 3);
        assert_eq!(out.audit.best, 5);
        assert_eq!(out.audit.entries[1].parents, [3, 2]);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let (set, masks, data) = distill_fixture();
        let sel = SelectorStrategy::new("nan", |_, _| Ok(f64::NAN));
        assert!(greedy_distill(&set, &masks, &data, &sel, &quick()).is_err());
        let one = ModelSet::new(set.spec.clone(), vec![set.params[0].clone()]).unwrap();
        let ok = SelectorStrategy::new("zero", |_, _| Ok(0.0));
        assert!(greedy_distill(&one, &masks, &data, &ok, &quick()).is_err());
    }
}
