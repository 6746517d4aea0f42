#![allow(dead_code)]

use patchbench::crafting::{craft_patch, BatchSize, CorpusItem, CraftConfig};
use patchbench::datasets::LabeledDataset;
use patchbench::nn::{cross_entropy_to_target, LayerParams, LayerSpec, ModelGroup, TrainedModel};
use patchbench::patchops::{apply, warp, warp_backward, AffineTransform, Patch, TransformDistribution};
use patchbench::rng;
use patchbench::Tensor;
use rand::Rng;

/// `flatten -> dense` with the given weight rows (one per class) and bias.
pub fn linear(input_shape: &[usize], rows: &[Vec<f32>], bias: &[f32]) -> TrainedModel {
    let n: usize = input_shape.iter().product();
    assert!(rows.iter().all(|r| r.len() == n));
    let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { input: n, output: rows.len() }];
    let params = vec![LayerParams {
        weight: Tensor::new(vec![rows.len(), n], rows.concat()).unwrap(),
        bias: Tensor::new(vec![bias.len()], bias.to_vec()).unwrap(),
    }];
    TrainedModel::new("linear", ModelGroup::Ensemble, input_shape, layers, params, 0).unwrap()
}

/// Linear model with weights uniform in `[-scale, scale]`.
pub fn random_linear(input_shape: &[usize], classes: usize, scale: f32, seed: u64) -> TrainedModel {
    let n: usize = input_shape.iter().product();
    let mut r = rng::stream(seed, &[rng::tag("test-linear")]);
    let rows: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..n).map(|_| r.random_range(-scale..=scale)).collect())
        .collect();
    let bias: Vec<f32> = (0..classes).map(|_| r.random_range(-0.1..=0.1)).collect();
    let mut m = linear(input_shape, &rows, &bias);
    m.model_id = format!("linear-{seed}");
    m
}

/// Uniform images in `[lo, hi]` with labels cycling through `classes`.
pub fn random_dataset(n: usize, shape: &[usize], classes: usize, (lo, hi): (f32, f32), seed: u64) -> LabeledDataset {
    let mut r = rng::stream(seed, &[rng::tag("test-data")]);
    let per: usize = shape.iter().product();
    let data = (0..n * per).map(|_| r.random_range(lo..=hi)).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    LabeledDataset::new(Tensor::new(full, data).unwrap(), (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

/// The image with a leading batch axis of one.
pub fn batch1(x: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape).unwrap()
}

pub fn cfg(side: usize, dist: TransformDistribution, lr: f32, epochs: usize, j: usize, seed: u64) -> CraftConfig {
    CraftConfig {
        learning_rate: lr,
        epochs,
        corpus_size: j,
        patch_side: side,
        dist,
        batch_size: BatchSize::Full,
        clamp_each_update: true,
        seed,
    }
}

/// The single-model update written out by hand: composite, input gradient,
/// transpose of the warp, mean over samples, step and clamp.
pub fn single_model_step(
    model: &TrainedModel,
    corpus: &[CorpusItem],
    target: usize,
    patch: &Patch,
    transforms: &[AffineTransform],
    lr: f32,
) -> Vec<f32> {
    let canvas = (model.input_shape()[1], model.input_shape()[2]);
    let scale = 1.0 / corpus.len() as f64;
    let mut g = vec![0f64; patch.pixels().len()];
    for ((x, _), t) in corpus.iter().zip(transforms) {
        let xp = apply(x, &warp(patch, t, canvas).unwrap()).unwrap();
        let gx = model.grad_input(&batch1(&xp), &[target]).unwrap();
        let gx = gx.reshape(x.shape()).unwrap();
        let gp = warp_backward(&gx, patch, t, canvas).unwrap();
        for (a, &v) in g.iter_mut().zip(gp.data()) {
            *a += scale * v as f64;
        }
    }
    patch
        .pixels()
        .data()
        .iter()
        .zip(&g)
        .map(|(&p, &gi)| (p as f64 - lr as f64 * (gi as f32) as f64).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Mean target cross-entropy over `(model, sample)` pairs, logits in f64.
pub fn summed_loss(models: &[TrainedModel], samples: &[Tensor], ts: &[AffineTransform], target: usize, patch: &Patch) -> f64 {
    let canvas = (samples[0].shape()[1], samples[0].shape()[2]);
    let mut total = 0.0;
    for (x, t) in samples.iter().zip(ts) {
        let xp = apply(x, &warp(patch, t, canvas).unwrap()).unwrap();
        for m in models {
            let p = &m.params()[0];
            let (k, n) = (p.weight.shape()[0], p.weight.shape()[1]);
            let z: Vec<f64> = (0..k)
                .map(|c| {
                    let row = &p.weight.data()[c * n..(c + 1) * n];
                    p.bias.data()[c] as f64 + row.iter().zip(xp.data()).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>()
                })
                .collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            total += lse - z[target];
        }
    }
    total / (models.len() * samples.len()) as f64
}

pub fn grid_argmin(model: &TrainedModel, target: usize) -> f64 {
    (0..=100)
        .map(|i| i as f64 / 100.0)
        .map(|d| {
            let logits = model.forward(&Tensor::new(vec![1, 1, 1, 1], vec![d as f32]).unwrap()).unwrap();
            (cross_entropy_to_target(&logits, &[target]).unwrap().0, d)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1
}

pub fn craft_one_pixel(model: &TrainedModel, target: usize, lr: f32, epochs: usize) -> f64 {
    let corpus = vec![(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap(), (target + 1) % model.num_classes())];
    let c = cfg(1, TransformDistribution::identity(), lr, epochs, 1, 3);
    craft_patch(std::slice::from_ref(model), &corpus, target, &c).unwrap().patch.pixels().data()[0] as f64
}

/// Correlation from the sample covariance and standard deviations, each
/// with the `n - 1` normalizer.
pub fn textbook_pearson(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
    let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
    let slope = cov / vx;
    (cov / (vx.sqrt() * vy.sqrt()), slope, my - slope * mx)
}

/// Two-sided tail of Student's t with 2 degrees of freedom, by Simpson's
/// rule on the density `(1 + t^2/2)^(-3/2) / (2 sqrt 2)`.
pub fn t2_two_sided(t: f64) -> f64 {
    let f = |u: f64| (1.0 + u * u / 2.0).powf(-1.5) / (2.0 * 2f64.sqrt());
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}
