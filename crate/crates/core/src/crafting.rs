//! Ensemble expectation-over-transformation patch optimization.
//!
//! Each epoch zeroes the accumulator, draws one transform per corpus
//! sample (shared by every ensemble member), accumulates
//! `1/(M*J) * grad_patch CE(x_j (+) A_j patch, target; model_m)` over all
//! `(j, m)`, then takes a plain gradient step. A single-model ensemble is
//! the single-model objective.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{top_k_hit, TrainedModel};
use crate::patchops::{composite, sample_transform, AffineTransform, Patch, Provenance, TransformDistribution, WarpPlan};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    /// One update per epoch over the whole corpus.
    Full,
    /// One update per consecutive corpus chunk of this size.
    Samples(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub corpus_size: usize,
    pub patch_side: usize,
    pub dist: TransformDistribution,
    pub batch_size: BatchSize,
    pub clamp_each_update: bool,
    pub seed: u64,
}

impl CraftConfig {
    /// 50x50 patches on 224x224 inputs, 20 samples, 5000 epochs, lr 1,
    /// rotations up to pi/8 and shifts up to 68 pixels.
    pub fn imagenet_scale() -> Self {
        CraftConfig {
            learning_rate: 1.0,
            epochs: 5000,
            corpus_size: 20,
            patch_side: 50,
            dist: TransformDistribution {
                rot_bound: std::f64::consts::PI / 8.0,
                trans_bound: 68.0,
            },
            batch_size: BatchSize::Full,
            clamp_each_update: true,
            seed: 0,
        }
    }

    /// Scaled-down defaults for a `height x width` canvas: 8-pixel patches,
    /// 300 epochs, geometric translation bound.
    pub fn desk(height: usize, width: usize) -> Self {
        CraftConfig {
            learning_rate: 1.0,
            epochs: 300,
            corpus_size: 9,
            patch_side: 8,
            dist: TransformDistribution::for_canvas(height, width, 8),
            batch_size: BatchSize::Full,
            clamp_each_update: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.corpus_size == 0 || self.patch_side == 0 {
            return Err(Error::invalid("epochs, corpus_size and patch_side must be positive"));
        }
        if let BatchSize::Samples(b) = self.batch_size {
            if b == 0 || b > self.corpus_size {
                return Err(Error::invalid(format!(
                    "batch_size {b} must be in 1..={}",
                    self.corpus_size
                )));
            }
        }
        TransformDistribution::new(self.dist.rot_bound, self.dist.trans_bound)?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }
}

#[derive(Clone, Debug)]
pub struct CraftResult {
    pub patch: Patch,
    /// Mean ensemble loss of every epoch, measured before its update(s).
    pub loss_history: Vec<f64>,
    /// Top-1 target hit rate over corpus x ensemble under fresh transforms.
    pub final_ensemble_success: f64,
}

impl CraftResult {
    pub fn loss_log_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }

    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        codec::write_file(path, self.loss_log_csv().as_bytes())
    }
}

/// One image with its true label.
pub type CorpusItem = (Tensor, usize);

/// Samples `j` images outside `target_class`, one per distinct class as
/// long as classes last, then topping up from the remaining eligible
/// images.
pub fn build_corpus(dataset: &LabeledDataset, target_class: usize, j: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    if j == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in dataset.labels.iter().enumerate() {
        if y != target_class {
            by_class.entry(y).or_default().push(i);
        }
    }
    let eligible: usize = by_class.values().map(Vec::len).sum();
    if eligible < j {
        return Err(Error::invalid(format!(
            "only {eligible} images outside class {target_class}, need {j}"
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag("corpus"), target_class as u64]);
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(&mut r);
    let mut chosen = Vec::with_capacity(j);
    for &c in classes.iter().take(j) {
        let pool = &by_class[&c];
        chosen.push(pool[r.random_range(0..pool.len())]);
    }
    if chosen.len() < j {
        let mut rest: Vec<usize> = by_class.values().flatten().copied().filter(|i| !chosen.contains(i)).collect();
        rest.sort_unstable();
        rest.shuffle(&mut r);
        chosen.extend(rest.into_iter().take(j - chosen.len()));
    }
    Ok(chosen.into_iter().map(|i| (dataset.image(i), dataset.labels[i])).collect())
}

fn check_ensemble(ensemble: &[TrainedModel]) -> Result<(Vec<usize>, usize)> {
    let first = ensemble.first().ok_or_else(|| Error::invalid("ensemble is empty"))?;
    for m in &ensemble[1..] {
        if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
            return Err(Error::invalid(format!(
                "model {} ({:?} -> {}) disagrees with {} ({:?} -> {})",
                m.model_id,
                m.input_shape(),
                m.num_classes(),
                first.model_id,
                first.input_shape(),
                first.num_classes()
            )));
        }
    }
    if first.input_shape().len() != 3 {
        return Err(Error::invalid("ensemble models must take [C, H, W] images"));
    }
    Ok((first.input_shape().to_vec(), first.num_classes()))
}

/// The transform drawn for corpus sample `j` in `epoch`.
pub fn epoch_transform(dist: &TransformDistribution, seed: u64, epoch: usize, j: usize) -> AffineTransform {
    let mut r = rng::stream(seed, &[rng::tag("affine"), epoch as u64, j as u64]);
    sample_transform(dist, &mut r)
}

/// Accumulated loss and patch gradient over `samples x ensemble`, each term
/// scaled by `1 / (M * |samples|)`.
///
/// Terms are computed independently and reduced in `(j, m)` order, so the
/// result does not depend on the thread schedule.
pub fn ensemble_gradient(
    ensemble: &[TrainedModel],
    samples: &[&Tensor],
    transforms: &[AffineTransform],
    target_class: usize,
    patch_pixels: &Tensor,
) -> Result<(f64, Tensor)> {
    let (image_shape, classes) = check_ensemble(ensemble)?;
    if target_class >= classes {
        return Err(Error::invalid(format!("target {target_class} out of range for {classes} classes")));
    }
    if samples.len() != transforms.len() || samples.is_empty() {
        return Err(Error::invalid("need one transform per sample and at least one sample"));
    }
    let [c, h, w] = image_shape[..] else { unreachable!() };
    let [pc, side, _] = *patch_pixels.shape() else {
        return Err(Error::Shape(format!("patch must be [C, P, P], got {:?}", patch_pixels.shape())));
    };
    if pc != c {
        return Err(Error::Shape(format!("patch has {pc} channels, models take {c}")));
    }
    for s in samples {
        if s.shape() != image_shape.as_slice() {
            return Err(Error::Shape(format!("sample {:?} vs model input {image_shape:?}", s.shape())));
        }
    }
    let plans: Vec<WarpPlan> = transforms
        .iter()
        .map(|t| WarpPlan::new(c, side, t, (h, w)))
        .collect::<Result<_>>()?;
    let m = ensemble.len();
    let scale = 1.0 / (m * samples.len()) as f64;
    let terms: Vec<(f64, Vec<f32>)> = (0..samples.len() * m)
        .into_par_iter()
        .map(|idx| {
            let (j, mi) = (idx / m, idx % m);
            let warped = plans[j].render(patch_pixels.data());
            let x = composite(samples[j].data(), warped.canvas_pixels.data(), warped.mask.data());
            let (loss, gx) = ensemble[mi].sample_loss_grad_input(&x, target_class, 1.0);
            (loss, plans[j].backward(&gx))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0f64; patch_pixels.len()];
    for (l, g) in &terms {
        loss += l;
        for (acc, &v) in grad.iter_mut().zip(g) {
            *acc += scale * v as f64;
        }
    }
    Ok((
        loss * scale,
        Tensor::from_raw(patch_pixels.shape().to_vec(), grad.into_iter().map(|v| v as f32).collect()),
    ))
}

/// Optimizes one targeted patch against the ensemble.
pub fn craft_patch(
    ensemble: &[TrainedModel],
    corpus: &[CorpusItem],
    target_class: usize,
    cfg: &CraftConfig,
) -> Result<CraftResult> {
    cfg.validate()?;
    let (image_shape, classes) = check_ensemble(ensemble)?;
    if target_class >= classes {
        return Err(Error::invalid(format!("target {target_class} out of range for {classes} classes")));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    if let Some((_, y)) = corpus.iter().find(|(_, y)| *y == target_class) {
        return Err(Error::invalid(format!("corpus contains an image of the target class {y}")));
    }
    let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
    if cfg.patch_side > h.min(w) {
        return Err(Error::invalid(format!("patch side {} exceeds the {h}x{w} canvas", cfg.patch_side)));
    }
    let batch = match cfg.batch_size {
        BatchSize::Full => corpus.len(),
        BatchSize::Samples(b) => b.min(corpus.len()),
    };

    let mut init = rng::stream(cfg.seed, &[rng::tag("patch-init")]);
    let n = c * cfg.patch_side * cfg.patch_side;
    let mut pixels = Tensor::from_raw(
        vec![c, cfg.patch_side, cfg.patch_side],
        (0..n).map(|_| init.random::<f32>()).collect(),
    );
    let lr = cfg.learning_rate as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (start, chunk) in corpus.chunks(batch).enumerate().map(|(b, ch)| (b * batch, ch)) {
            let samples: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
            let transforms: Vec<AffineTransform> = (start..start + chunk.len())
                .map(|j| epoch_transform(&cfg.dist, cfg.seed, epoch, j))
                .collect();
            let (loss, grad) = ensemble_gradient(ensemble, &samples, &transforms, target_class, &pixels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            for (p, &g) in pixels.data_mut().iter_mut().zip(grad.data()) {
                let mut v = *p as f64 - lr * g as f64;
                if cfg.clamp_each_update {
                    v = v.clamp(0.0, 1.0);
                }
                *p = v as f32;
            }
            if pixels.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
        }
        history.push(epoch_loss / corpus.len() as f64);
    }

    let final_ensemble_success = corpus_success(ensemble, corpus, target_class, &pixels, cfg)?;
    if !cfg.clamp_each_update {
        // a shipped patch is an image
        for p in pixels.data_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
    let mut patch = Patch::new(pixels, target_class, format!("patch-t{target_class}"))?;
    patch.provenance = Provenance {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        epochs: cfg.epochs,
        loss_first: history.first().copied(),
        loss_last: history.last().copied(),
        loss_min: history.iter().copied().reduce(f64::min),
    };
    Ok(CraftResult {
        patch,
        loss_history: history,
        final_ensemble_success,
    })
}

fn corpus_success(
    ensemble: &[TrainedModel],
    corpus: &[CorpusItem],
    target_class: usize,
    pixels: &Tensor,
    cfg: &CraftConfig,
) -> Result<f64> {
    let (c, h, w) = {
        let s = ensemble[0].input_shape();
        (s[0], s[1], s[2])
    };
    let mut hits = 0usize;
    for (j, (x, _)) in corpus.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[rng::tag("final-check"), j as u64]);
        let plan = WarpPlan::new(c, cfg.patch_side, &sample_transform(&cfg.dist, &mut r), (h, w))?;
        let warped = plan.render(pixels.data());
        let img = composite(x.data(), warped.canvas_pixels.data(), warped.mask.data());
        for m in ensemble {
            hits += top_k_hit(&m.logits_one(&img), target_class, 1)? as usize;
        }
    }
    Ok(hits as f64 / (corpus.len() * ensemble.len()) as f64)
}

/// Sub-seed for one target of a bundle; independent of target order.
pub fn target_seed(seed: u64, target_class: usize) -> u64 {
    seed ^ rng::mix64(rng::tag("target") ^ target_class as u64)
}

/// One patch per target, each with its own corpus and sub-seed.
pub fn craft_bundle(
    ensemble: &[TrainedModel],
    dataset: &LabeledDataset,
    targets: &[usize],
    cfg: &CraftConfig,
) -> Result<Vec<CraftResult>> {
    let mut seen = targets.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate targets in {targets:?}")));
    }
    targets
        .iter()
        .map(|&t| {
            let seed = target_seed(cfg.seed, t);
            let corpus = build_corpus(dataset, t, cfg.corpus_size, seed)?;
            let sub = CraftConfig { seed, ..cfg.clone() };
            craft_patch(ensemble, &corpus, t, &sub)
        })
        .collect()
}
