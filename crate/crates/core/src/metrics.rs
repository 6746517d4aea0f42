//! Clean accuracy, robust accuracy and success rate at top-k, the
//! random-patch baseline, and the group-wise benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{top_k_hit, ModelGroup, TrainedModel};
use crate::patchops::{apply, sample_transform, warp, AffineTransform, Patch, TransformDistribution};
use crate::rng;
use crate::stats::{pearson, CorrelationResult};
use crate::tensor::Tensor;

pub const CLEAN_ID: &str = "clean";
pub const RANDOM_ID: &str = "random";
pub const BUNDLE_MEAN_ID: &str = "bundle-mean";
pub const REPORT_HEADER: &str = "model_id,group,patch_id,metric,k,value,n,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    /// Top-k accuracy on clean images.
    C,
    /// Top-k accuracy on patched images against the true label.
    R,
    /// Top-k accuracy on patched images against the patch's target.
    S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_id: String,
    pub group: ModelGroup,
    pub patch_id: String,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub class_count: usize,
    pub k_list: Vec<usize>,
    pub dataset_digest: String,
}

fn check_k(k: usize, classes: usize) -> Result<()> {
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k={k} outside 1..={classes}")));
    }
    Ok(())
}

pub fn clean_accuracy(model: &TrainedModel, testset: &LabeledDataset, k: usize) -> Result<f64> {
    Ok(clean_accuracies(model, testset, &[k])?[0])
}

fn clean_accuracies(model: &TrainedModel, testset: &LabeledDataset, k_list: &[usize]) -> Result<Vec<f64>> {
    if testset.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    for &k in k_list {
        check_k(k, model.num_classes())?;
    }
    let logits = model.forward(&testset.images)?;
    let mut hits = vec![0usize; k_list.len()];
    for (i, &y) in testset.labels.iter().enumerate() {
        for (h, &k) in hits.iter_mut().zip(k_list) {
            *h += top_k_hit(logits.outer_slice(i), y, k)? as usize;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / testset.len() as f64).collect())
}

/// The transform applied to test image `i` under `seed`.
pub fn eval_transform(dist: &TransformDistribution, seed: u64, i: usize) -> AffineTransform {
    sample_transform(dist, &mut rng::stream(seed, &[rng::tag("eval"), i as u64]))
}

/// Robust accuracy and success rate of one patch, both measured on the
/// same perturbed images.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    pub robust: Vec<f64>,
    pub success: Vec<f64>,
    pub n: usize,
}

/// Scores `model` on `testset` patched with `transforms[i]` for image `i`.
/// With `exclude_target_class`, images labeled with the patch target are
/// skipped.
pub fn score_patched(
    model: &TrainedModel,
    testset: &LabeledDataset,
    patch: &Patch,
    target_class: usize,
    transforms: &[AffineTransform],
    k_list: &[usize],
    exclude_target_class: bool,
) -> Result<PatchScores> {
    if transforms.len() != testset.len() {
        return Err(Error::invalid("one transform per test image required"));
    }
    for &k in k_list {
        check_k(k, model.num_classes())?;
    }
    if target_class >= model.num_classes() {
        return Err(Error::invalid(format!("target {target_class} out of range")));
    }
    let canvas = testset.canvas()?;
    let per_image: Vec<Option<(Vec<bool>, Vec<bool>)>> = (0..testset.len())
        .into_par_iter()
        .map(|i| -> Result<_> {
            let y = testset.labels[i];
            if exclude_target_class && y == target_class {
                return Ok(None);
            }
            let x = apply(&testset.image(i), &warp(patch, &transforms[i], canvas)?)?;
            let logits = model.forward(&x.reshape(&prepend(1, &testset.image_shape()))?)?;
            let row = logits.data();
            let r = k_list.iter().map(|&k| top_k_hit(row, y, k)).collect::<Result<_>>()?;
            let s = k_list.iter().map(|&k| top_k_hit(row, target_class, k)).collect::<Result<_>>()?;
            Ok(Some((r, s)))
        })
        .collect::<Result<_>>()?;
    let mut robust = vec![0usize; k_list.len()];
    let mut success = vec![0usize; k_list.len()];
    let mut n = 0;
    for (r, s) in per_image.into_iter().flatten() {
        n += 1;
        for (i, (&rh, &sh)) in r.iter().zip(&s).enumerate() {
            robust[i] += rh as usize;
            success[i] += sh as usize;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no test images left to score"));
    }
    let frac = |v: Vec<usize>| v.into_iter().map(|h| h as f64 / n as f64).collect();
    Ok(PatchScores {
        robust: frac(robust),
        success: frac(success),
        n,
    })
}

fn prepend(n: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(shape);
    s
}

fn seeded_scores(
    model: &TrainedModel,
    testset: &LabeledDataset,
    patch: &Patch,
    dist: &TransformDistribution,
    k: usize,
    seed: u64,
) -> Result<PatchScores> {
    let transforms: Vec<_> = (0..testset.len()).map(|i| eval_transform(dist, seed, i)).collect();
    score_patched(model, testset, patch, patch.target_class, &transforms, &[k], false)
}

pub fn robust_accuracy(
    model: &TrainedModel,
    testset: &LabeledDataset,
    patch: &Patch,
    dist: &TransformDistribution,
    k: usize,
    seed: u64,
) -> Result<f64> {
    Ok(seeded_scores(model, testset, patch, dist, k, seed)?.robust[0])
}

pub fn success_rate(
    model: &TrainedModel,
    testset: &LabeledDataset,
    patch: &Patch,
    dist: &TransformDistribution,
    k: usize,
    seed: u64,
) -> Result<f64> {
    Ok(seeded_scores(model, testset, patch, dist, k, seed)?.success[0])
}

/// Uniform-noise patch; its target tag carries no meaning.
pub fn random_patch(side: usize, channels: usize, seed: u64) -> Patch {
    let mut r = rng::stream(seed, &[rng::tag("random-patch")]);
    let n = channels * side * side;
    let pixels = Tensor::from_raw(vec![channels, side, side], (0..n).map(|_| r.random::<f32>()).collect());
    let mut p = Patch::new(pixels, 0, RANDOM_ID).expect("uniform pixels lie in [0, 1]");
    p.provenance.seed = seed;
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOptions {
    pub k_list: Vec<usize>,
    pub seed: u64,
    pub exclude_target_class: bool,
}

/// Seed of the transform stream used for `patch_id` in a benchmark.
pub fn patch_eval_seed(seed: u64, patch_id: &str) -> u64 {
    rng::derive(seed, &[rng::tag(patch_id)])
}

/// Clean, per-patch, random-baseline and bundle-mean rows for every model.
///
/// The random baseline is one uniform patch scored once per bundle target
/// (same pixels, same transforms) and averaged, so its S rows compare like
/// for like with the bundle mean.
pub fn run_benchmark(
    models: &[TrainedModel],
    bundle: &[Patch],
    testset: &LabeledDataset,
    dist: &TransformDistribution,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    if opts.k_list.is_empty() {
        return Err(Error::invalid("k_list is empty"));
    }
    let mut ids: Vec<&str> = bundle.iter().map(|p| p.patch_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) || ids.iter().any(|id| [CLEAN_ID, RANDOM_ID, BUNDLE_MEAN_ID].contains(id)) {
        return Err(Error::invalid("patch ids must be unique and not reserved"));
    }
    let ks = &opts.k_list;
    let random = bundle
        .first()
        .map(|p| random_patch(p.side(), p.channels(), rng::derive(opts.seed, &[rng::tag(RANDOM_ID)])));
    let mut rows = Vec::new();
    let mut class_count = testset.class_count;
    for model in models {
        class_count = class_count.max(model.num_classes());
        let mut push = |patch_id: &str, metric: Metric, values: &[f64], n: usize, seed: u64| {
            for (&k, &value) in ks.iter().zip(values) {
                rows.push(EvalRow {
                    model_id: model.model_id.clone(),
                    group: model.group(),
                    patch_id: patch_id.to_string(),
                    metric,
                    k,
                    value,
                    n_samples: n,
                    seed,
                });
            }
        };
        let clean = clean_accuracies(model, testset, ks)?;
        push(CLEAN_ID, Metric::C, &clean, testset.len(), opts.seed);

        let mut sums = (vec![0.0; ks.len()], vec![0.0; ks.len()], 0usize);
        for patch in bundle {
            let seed = patch_eval_seed(opts.seed, &patch.patch_id);
            let transforms: Vec<_> = (0..testset.len()).map(|i| eval_transform(dist, seed, i)).collect();
            let s = score_patched(model, testset, patch, patch.target_class, &transforms, ks, opts.exclude_target_class)?;
            push(&patch.patch_id, Metric::R, &s.robust, s.n, seed);
            push(&patch.patch_id, Metric::S, &s.success, s.n, seed);
            for i in 0..ks.len() {
                sums.0[i] += s.robust[i];
                sums.1[i] += s.success[i];
            }
            sums.2 += s.n;
        }
        if let Some(random) = &random {
            let seed = patch_eval_seed(opts.seed, RANDOM_ID);
            let transforms: Vec<_> = (0..testset.len()).map(|i| eval_transform(dist, seed, i)).collect();
            let (mut r, mut s, mut n) = (vec![0.0; ks.len()], vec![0.0; ks.len()], 0);
            for patch in bundle {
                let sc = score_patched(model, testset, random, patch.target_class, &transforms, ks, opts.exclude_target_class)?;
                for i in 0..ks.len() {
                    r[i] += sc.robust[i] / bundle.len() as f64;
                    s[i] += sc.success[i] / bundle.len() as f64;
                }
                n += sc.n;
            }
            push(RANDOM_ID, Metric::R, &r, n, seed);
            push(RANDOM_ID, Metric::S, &s, n, seed);
            let m = bundle.len() as f64;
            let mean = |v: &[f64]| v.iter().map(|x| x / m).collect::<Vec<_>>();
            push(BUNDLE_MEAN_ID, Metric::R, &mean(&sums.0), sums.2, opts.seed);
            push(BUNDLE_MEAN_ID, Metric::S, &mean(&sums.1), sums.2, opts.seed);
        }
    }
    Ok(EvalReport {
        rows,
        class_count,
        k_list: ks.clone(),
        dataset_digest: testset.digest.clone(),
    })
}

/// Per-model summary used for correlation plots.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub model_id: String,
    pub group: ModelGroup,
    /// Indexed like `k_list`.
    pub clean: Vec<f64>,
    pub robust: Vec<f64>,
    pub success: Vec<f64>,
    pub random_robust: Vec<f64>,
}

impl EvalReport {
    pub fn value(&self, model_id: &str, patch_id: &str, metric: Metric, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.patch_id == patch_id && r.metric == metric && r.k == k)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(REPORT_HEADER.split(',')).expect("report header writes");
        for row in &self.rows {
            w.serialize(CsvRow::from(row)).expect("report row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    /// Parses the report CSV. Report-level metadata is not stored in the
    /// CSV: the class count is inferred from the largest `k`.
    pub fn from_csv(text: &[u8]) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
        let header = rd
            .headers()
            .map_err(|e| Error::format(0, format!("bad report header: {e}")))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != REPORT_HEADER {
            return Err(Error::format(0, format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.deserialize::<CsvRow>() {
            let rec = rec.map_err(|e| {
                let offset = e.position().map_or(0, |p| p.byte() as usize);
                Error::format(offset, format!("bad report row: {e}"))
            })?;
            rows.push(rec.into_row()?);
        }
        let mut k_list: Vec<usize> = rows.iter().map(|r| r.k).collect();
        k_list.sort_unstable();
        k_list.dedup();
        Ok(EvalReport {
            class_count: k_list.last().copied().unwrap_or(0),
            k_list,
            rows,
            dataset_digest: String::new(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        codec::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&codec::read_file(path)?)
    }

    /// Model summaries in first-appearance order. Robust and success values
    /// are the bundle means.
    pub fn summaries(&self) -> Vec<ModelSummary> {
        let mut order: Vec<(String, ModelGroup)> = Vec::new();
        for r in &self.rows {
            if !order.iter().any(|(id, _)| id == &r.model_id) {
                order.push((r.model_id.clone(), r.group));
            }
        }
        order
            .into_iter()
            .map(|(id, group)| {
                let get = |patch: &str, metric| {
                    self.k_list
                        .iter()
                        .map(|&k| self.value(&id, patch, metric, k).unwrap_or(f64::NAN))
                        .collect()
                };
                ModelSummary {
                    clean: get(CLEAN_ID, Metric::C),
                    robust: get(BUNDLE_MEAN_ID, Metric::R),
                    success: get(BUNDLE_MEAN_ID, Metric::S),
                    random_robust: get(RANDOM_ID, Metric::R),
                    model_id: id,
                    group,
                }
            })
            .collect()
    }

    /// Wide per-model table of clean, robust, success and random-patch
    /// robust accuracy for every k.
    pub fn clean_vs_robust_csv(&self) -> String {
        let mut out = String::from("model_id,group");
        for k in &self.k_list {
            write!(out, ",C_{k},R_{k},S_{k},R_random_{k}").unwrap();
        }
        out.push('\n');
        for s in self.summaries() {
            write!(out, "{},{}", s.model_id, s.group.as_str()).unwrap();
            for i in 0..self.k_list.len() {
                write!(out, ",{},{},{},{}", s.clean[i], s.robust[i], s.success[i], s.random_robust[i]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Group means of C/R/S for every k, one line per group, followed by
    /// the per-model lines.
    pub fn table(&self) -> String {
        let summaries = self.summaries();
        let mut out = String::new();
        write!(out, "{:<22}", "model / group").unwrap();
        for k in &self.k_list {
            write!(out, " | {:>6} {:>6} {:>6}", format!("C_{k}"), format!("R_{k}"), format!("S_{k}")).unwrap();
        }
        out.push('\n');
        let mut groups: BTreeMap<ModelGroup, Vec<&ModelSummary>> = BTreeMap::new();
        for s in &summaries {
            groups.entry(s.group).or_default().push(s);
        }
        let line = |out: &mut String, name: &str, c: &[f64], r: &[f64], s: &[f64]| {
            write!(out, "{name:<22}").unwrap();
            for i in 0..c.len() {
                write!(out, " | {:>6.3} {:>6.3} {:>6.3}", c[i], r[i], s[i]).unwrap();
            }
            out.push('\n');
        };
        for (g, members) in &groups {
            let mean = |f: &dyn Fn(&ModelSummary) -> &Vec<f64>| -> Vec<f64> {
                (0..self.k_list.len())
                    .map(|i| members.iter().map(|m| f(m)[i]).sum::<f64>() / members.len() as f64)
                    .collect()
            };
            line(&mut out, g.as_str(), &mean(&|m| &m.clean), &mean(&|m| &m.robust), &mean(&|m| &m.success));
        }
        for s in &summaries {
            line(&mut out, &format!("  {}", s.model_id), &s.clean, &s.robust, &s.success);
        }
        out
    }

    /// Pearson correlations across models for every k: clean vs robust,
    /// robust vs success, and clean vs random-patch robust.
    pub fn correlations(&self) -> Vec<(usize, &'static str, Result<CorrelationResult>)> {
        let s = self.summaries();
        let col = |f: &dyn Fn(&ModelSummary) -> f64| s.iter().map(f).collect::<Vec<_>>();
        let mut out = Vec::new();
        for (i, &k) in self.k_list.iter().enumerate() {
            out.push((k, "clean vs robust", pearson(&col(&|m| m.clean[i]), &col(&|m| m.robust[i]))));
            out.push((k, "robust vs success", pearson(&col(&|m| m.robust[i]), &col(&|m| m.success[i]))));
            out.push((k, "clean vs random-robust", pearson(&col(&|m| m.clean[i]), &col(&|m| m.random_robust[i]))));
        }
        out
    }

    pub fn correlation_block(&self) -> String {
        let mut out = String::new();
        for (k, what, r) in self.correlations() {
            match r {
                Ok(c) => writeln!(
                    out,
                    "k={k:<3} {what:<24} rho={:+.4} p={:.4e} n={} slope={:+.4} intercept={:+.4}",
                    c.rho, c.p_value, c.n, c.slope, c.intercept
                ),
                Err(e) => writeln!(out, "k={k:<3} {what:<24} n/a ({e})"),
            }
            .unwrap();
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    model_id: String,
    group: String,
    patch_id: String,
    metric: Metric,
    k: usize,
    value: f64,
    n: usize,
    seed: u64,
}

impl From<&EvalRow> for CsvRow {
    fn from(r: &EvalRow) -> Self {
        CsvRow {
            model_id: r.model_id.clone(),
            group: r.group.as_str().to_string(),
            patch_id: r.patch_id.clone(),
            metric: r.metric,
            k: r.k,
            value: r.value,
            n: r.n_samples,
            seed: r.seed,
        }
    }
}

impl CsvRow {
    fn into_row(self) -> Result<EvalRow> {
        if !(0.0..=1.0).contains(&self.value) || self.n == 0 || self.k == 0 {
            return Err(Error::invalid(format!(
                "row for {}/{} has value {} n {} k {}",
                self.model_id, self.patch_id, self.value, self.n, self.k
            )));
        }
        Ok(EvalRow {
            group: ModelGroup::parse(&self.group)?,
            model_id: self.model_id,
            patch_id: self.patch_id,
            metric: self.metric,
            k: self.k,
            value: self.value,
            n_samples: self.n,
            seed: self.seed,
        })
    }
}
