//! Finite-difference verification of every analytic gradient in the crate.
//!
//! The reference side re-implements each layer, the warp and the composite
//! in f64 with straightforward loops, independent of the f32 kernels it
//! checks. Central differences use step `h` on that reference. A coordinate
//! whose probes flip a relu sign or a max-pool winner straddles a kink, where
//! a difference quotient is no derivative; such coordinates are skipped and
//! counted.

use rand::Rng;

use crate::crafting::ensemble_gradient;
use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, ModelGroup, TrainedModel};
use crate::patchops::{warp_backward, AffineTransform, Patch};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    /// Maximum allowed per-element relative error.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            step: 1e-3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    /// Coordinates whose probes crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error floor: gradients smaller than this are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A check fails if more than this fraction of coordinates is skipped.
const MAX_SKIPPED_FRACTION: f64 = 0.1;

type Params64 = Vec<(Vec<f64>, Vec<f64>)>;

fn params64(model: &TrainedModel) -> Params64 {
    model
        .params()
        .iter()
        .map(|p| {
            (
                p.weight.data().iter().map(|&v| v as f64).collect(),
                p.bias.data().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// Reference forward pass; returns logits and the activation pattern (relu
/// signs and pooling winners) that fixes the local linear piece.
fn ref_forward(layers: &[LayerSpec], params: &Params64, input_shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let mut shape = input_shape.to_vec();
    let mut act = x.to_vec();
    let mut pattern = Vec::new();
    let mut p = 0;
    for l in layers {
        match *l {
            LayerSpec::Dense { input, output } => {
                let (w, b) = &params[p];
                p += 1;
                act = (0..output)
                    .map(|o| b[o] + (0..input).map(|i| w[o * input + i] * act[i]).sum::<f64>())
                    .collect();
                shape = vec![output];
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let (w, b) = &params[p];
                p += 1;
                let (h, wd) = (shape[1], shape[2]);
                let (oh, ow) = ((h - kernel) / stride + 1, (wd - kernel) / stride + 1);
                let mut out = vec![0.0; out_channels * oh * ow];
                for co in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = b[co];
                            for ci in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let wi = ((co * in_channels + ci) * kernel + ky) * kernel + kx;
                                        let xi = (ci * h + oy * stride + ky) * wd + ox * stride + kx;
                                        s += w[wi] * act[xi];
                                    }
                                }
                            }
                            out[(co * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                act = out;
                shape = vec![out_channels, oh, ow];
            }
            LayerSpec::Relu => {
                for v in act.iter_mut() {
                    pattern.push((*v > 0.0) as u32);
                    *v = v.max(0.0);
                }
            }
            LayerSpec::Flatten => shape = vec![act.len()],
            LayerSpec::MaxPool2d { window } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / window, w / window);
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0u32);
                            for ky in 0..window {
                                for kx in 0..window {
                                    let v = act[(ch * h + oy * window + ky) * w + ox * window + kx];
                                    if v > best.0 {
                                        best = (v, (ky * window + kx) as u32);
                                    }
                                }
                            }
                            pattern.push(best.1);
                            out.push(best.0);
                        }
                    }
                }
                act = out;
                shape = vec![c, oh, ow];
            }
        }
    }
    (act, pattern)
}

fn ref_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - logits[target]
}

/// Reference `(1 - mask) * x + mask * warped`, using zero-padded bilinear
/// sampling of the patch and of an all-ones field.
fn ref_composite(x: &[f64], patch: &[f64], channels: usize, side: usize, t: &AffineTransform, canvas: (usize, usize)) -> Vec<f64> {
    let (h, w) = canvas;
    let centre = (side as f64 - 1.0) / 2.0;
    let anchor_x = ((w - side) / 2) as f64 + centre + t.translate_x;
    let anchor_y = ((h - side) / 2) as f64 + centre + t.translate_y;
    let texel = |ch: usize, row: i64, col: i64| -> (f64, f64) {
        if row < 0 || col < 0 || row >= side as i64 || col >= side as i64 {
            (0.0, 0.0)
        } else {
            (patch[(ch * side + row as usize) * side + col as usize], 1.0)
        }
    };
    let mut out = x.to_vec();
    for r in 0..h {
        for c in 0..w {
            let (px, py) = (c as f64 - anchor_x, r as f64 - anchor_y);
            let sx = t.rotation.cos() * px + t.rotation.sin() * py + centre;
            let sy = -t.rotation.sin() * px + t.rotation.cos() * py + centre;
            let (col0, row0) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - col0, sy - row0);
            let (col0, row0) = (col0 as i64, row0 as i64);
            for ch in 0..channels {
                let corners = [
                    (texel(ch, row0, col0), (1.0 - ax) * (1.0 - ay)),
                    (texel(ch, row0, col0 + 1), ax * (1.0 - ay)),
                    (texel(ch, row0 + 1, col0), (1.0 - ax) * ay),
                    (texel(ch, row0 + 1, col0 + 1), ax * ay),
                ];
                let colour: f64 = corners.iter().map(|((v, _), wt)| v * wt).sum();
                let mask: f64 = corners.iter().map(|((_, inside), wt)| inside * wt).sum();
                let i = (ch * h + r) * w + c;
                out[i] = (1.0 - mask) * x[i] + colour;
            }
        }
    }
    out
}

type Objective<'a> = dyn FnMut(&[f64]) -> (f64, Vec<u32>) + 'a;

/// Central difference in coordinate `i`, or `None` if either probe lands on
/// a different linear piece than the base point.
fn central_difference(base: &[f64], i: usize, h: f64, f: &mut Objective<'_>) -> Option<f64> {
    let (_, here) = f(base);
    let mut v = base.to_vec();
    v[i] = base[i] + h;
    let (up, up_pattern) = f(&v);
    v[i] = base[i] - h;
    let (down, down_pattern) = f(&v);
    (up_pattern == here && down_pattern == here).then(|| (up - down) / (2.0 * h))
}

struct Tally {
    name: String,
    instances: usize,
    elements: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally {
            name: name.to_string(),
            instances: 0,
            elements: 0,
            skipped: 0,
            worst: 0.0,
        }
    }

    fn compare(&mut self, analytic: &[f32], numeric: &[Option<f64>]) {
        for (&a, n) in analytic.iter().zip(numeric) {
            match n {
                Some(n) => self.worst = self.worst.max(rel_error(a as f64, *n)),
                None => self.skipped += 1,
            }
        }
        self.elements += numeric.len();
    }

    fn finish(self, tolerance: f64) -> CheckOutcome {
        let coverage_ok = self.elements > 0 && self.skipped as f64 <= MAX_SKIPPED_FRACTION * self.elements as f64;
        CheckOutcome {
            passed: self.worst <= tolerance && coverage_ok,
            name: self.name,
            instances: self.instances,
            elements: self.elements,
            skipped: self.skipped,
            max_rel_error: self.worst,
        }
    }
}

fn uniform_vec(r: &mut Stream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn random_model(r: &mut Stream, input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<TrainedModel> {
    let params = layers
        .iter()
        .filter_map(|l| l.param_shapes())
        .map(|(ws, bs)| {
            let s = 1.5 / (ws[1..].iter().product::<usize>() as f32).sqrt();
            Ok(LayerParams {
                weight: Tensor::new(ws.clone(), uniform_vec(r, ws.iter().product(), -s, s))?,
                bias: Tensor::new(bs.clone(), uniform_vec(r, bs[0], -0.3, 0.3))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainedModel::new("gradcheck", ModelGroup::Ensemble, input_shape, layers, params, 0)
}

/// Small networks exercising each layer kind.
fn layer_cases() -> Vec<(&'static str, Vec<usize>, Vec<LayerSpec>)> {
    use LayerSpec::*;
    vec![
        ("dense", vec![6], vec![Dense { input: 6, output: 4 }]),
        (
            "conv2d",
            vec![2, 5, 5],
            vec![
                Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1 },
                Flatten,
                Dense { input: 27, output: 4 },
            ],
        ),
        (
            "conv2d_strided",
            vec![1, 7, 7],
            vec![
                Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2 },
                Flatten,
                Dense { input: 18, output: 3 },
            ],
        ),
        (
            "relu",
            vec![6],
            vec![Dense { input: 6, output: 5 }, Relu, Dense { input: 5, output: 3 }],
        ),
        ("flatten", vec![2, 3, 3], vec![Flatten, Dense { input: 18, output: 3 }]),
        (
            "maxpool2d",
            vec![2, 6, 6],
            vec![MaxPool2d { window: 2 }, Flatten, Dense { input: 18, output: 3 }],
        ),
    ]
}

/// Hook applied to every analytic gradient before comparison; the
/// identity in normal runs, a corruption in mutation tests.
pub type AnalyticHook<'a> = &'a dyn Fn(&str, &mut [f32]);

pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckOutcome>> {
    run_all_with(cfg, &|_, _| {})
}

pub fn run_all_with(cfg: &GradcheckConfig, hook: AnalyticHook<'_>) -> Result<Vec<CheckOutcome>> {
    if cfg.instances == 0 || !(cfg.step > 0.0) || !(cfg.tolerance >= 0.0) {
        return Err(Error::invalid("gradcheck needs instances > 0, step > 0, tolerance >= 0"));
    }
    let mut out = Vec::new();
    for (name, input_shape, layers) in layer_cases() {
        out.extend(check_layer_case(cfg, hook, name, &input_shape, &layers)?);
    }
    out.push(check_warp_backward(cfg, hook)?);
    out.push(check_patch_gradient(cfg, hook, 1, 1, "patch_gradient/end_to_end")?);
    out.push(check_patch_gradient(cfg, hook, 2, 3, "patch_gradient/ensemble_accumulation")?);
    Ok(out)
}

fn check_layer_case(
    cfg: &GradcheckConfig,
    hook: AnalyticHook<'_>,
    name: &str,
    input_shape: &[usize],
    layers: &[LayerSpec],
) -> Result<Vec<CheckOutcome>> {
    let mut input_tally = Tally::new(&format!("{name}/input"));
    let mut param_tally = Tally::new(&format!("{name}/params"));
    let n_in: usize = input_shape.iter().product();
    let mut r = rng::stream(cfg.seed, &[rng::tag("gradcheck-layer"), rng::tag(name)]);
    for _ in 0..cfg.instances {
        let model = random_model(&mut r, input_shape, layers.to_vec())?;
        let x = uniform_vec(&mut r, n_in, -1.0, 1.0);
        let target = r.random_range(0..model.num_classes());
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(input_shape);
        let batch = Tensor::new(batch_shape, x.clone())?;

        let mut gx = model.grad_input(&batch, &[target])?.into_data();
        hook(&input_tally.name, &mut gx);
        let p64 = params64(&model);
        let x64 = to64(&x);
        let base = x64.clone();
        let numeric: Vec<Option<f64>> = (0..n_in)
            .map(|i| {
                central_difference(&base, i, cfg.step, &mut |v| {
                    let (logits, pattern) = ref_forward(layers, &p64, input_shape, v);
                    (ref_cross_entropy(&logits, target), pattern)
                })
            })
            .collect();
        input_tally.compare(&gx, &numeric);
        input_tally.instances += 1;

        let (_, grads) = model.loss_and_param_grads(&batch, &[target])?;
        for (pi, g) in grads.iter().enumerate() {
            for which in 0..2 {
                let (analytic64, base) = if which == 0 {
                    (&g.weight, &p64[pi].0)
                } else {
                    (&g.bias, &p64[pi].1)
                };
                let mut analytic: Vec<f32> = analytic64.iter().map(|&v| v as f32).collect();
                hook(&param_tally.name, &mut analytic);
                let numeric: Vec<Option<f64>> = (0..base.len())
                    .map(|i| {
                        central_difference(base, i, cfg.step, &mut |v| {
                            let mut p = p64.clone();
                            if which == 0 {
                                p[pi].0 = v.to_vec();
                            } else {
                                p[pi].1 = v.to_vec();
                            }
                            let (logits, pattern) = ref_forward(layers, &p, input_shape, &x64);
                            (ref_cross_entropy(&logits, target), pattern)
                        })
                    })
                    .collect();
                param_tally.compare(&analytic, &numeric);
            }
        }
        param_tally.instances += 1;
    }
    let mut out = vec![input_tally.finish(cfg.tolerance)];
    if layers.iter().any(|l| l.is_parameterized()) {
        out.push(param_tally.finish(cfg.tolerance));
    }
    Ok(out)
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn random_transform(r: &mut Stream, rot: f64, trans: f64) -> AffineTransform {
    AffineTransform {
        rotation: r.random_range(-rot..rot),
        translate_x: r.random_range(-trans..trans),
        translate_y: r.random_range(-trans..trans),
    }
}

fn check_warp_backward(cfg: &GradcheckConfig, hook: AnalyticHook<'_>) -> Result<CheckOutcome> {
    let mut tally = Tally::new("warp_backward");
    let mut r = rng::stream(cfg.seed, &[rng::tag("gradcheck-warp")]);
    let (c, p, h, w) = (1, 4, 8, 8);
    for inst in 0..cfg.instances {
        let t = if inst == 0 {
            AffineTransform { rotation: 0.3, translate_x: 1.5, translate_y: -2.25 }
        } else {
            random_transform(&mut r, 0.8, 2.0)
        };
        let patch = Patch::new(Tensor::new(vec![c, p, p], uniform_vec(&mut r, c * p * p, 0.0, 1.0))?, 0, "g")?;
        let x = to64(&uniform_vec(&mut r, c * h * w, 0.0, 1.0));
        let g = uniform_vec(&mut r, c * h * w, -1.0, 1.0);
        let mut analytic = warp_backward(&Tensor::new(vec![c, h, w], g.clone())?, &patch, &t, (h, w))?.into_data();
        hook(&tally.name, &mut analytic);
        let base = to64(patch.pixels().data());
        let numeric: Vec<Option<f64>> = (0..base.len())
            .map(|i| {
                central_difference(&base, i, cfg.step, &mut |v| {
                    let value = ref_composite(&x, v, c, p, &t, (h, w))
                        .iter()
                        .zip(&g)
                        .map(|(a, &b)| a * b as f64)
                        .sum();
                    (value, Vec::new())
                })
            })
            .collect();
        tally.compare(&analytic, &numeric);
        tally.instances += 1;
    }
    Ok(tally.finish(cfg.tolerance))
}

/// Gradient of the mean loss over `models x samples` w.r.t. patch pixels,
/// end to end through composite, warp and network.
fn check_patch_gradient(
    cfg: &GradcheckConfig,
    hook: AnalyticHook<'_>,
    models: usize,
    samples: usize,
    name: &str,
) -> Result<CheckOutcome> {
    use LayerSpec::*;
    let mut tally = Tally::new(name);
    let (c, hw, side) = (1usize, 9usize, 4usize);
    let layers = vec![
        Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1 },
        Relu,
        MaxPool2d { window: 2 },
        Flatten,
        Dense { input: 18, output: 4 },
    ];
    let input_shape = [c, hw, hw];
    let mut r = rng::stream(cfg.seed, &[rng::tag("gradcheck-patch"), models as u64, samples as u64]);
    for _ in 0..cfg.instances {
        let ensemble: Vec<TrainedModel> = (0..models)
            .map(|_| random_model(&mut r, &input_shape, layers.clone()))
            .collect::<Result<_>>()?;
        let xs: Vec<Tensor> = (0..samples)
            .map(|_| Tensor::new(input_shape.to_vec(), uniform_vec(&mut r, c * hw * hw, 0.0, 1.0)))
            .collect::<Result<_>>()?;
        let ts: Vec<AffineTransform> = (0..samples).map(|_| random_transform(&mut r, 0.4, 1.5)).collect();
        let patch = Tensor::new(vec![c, side, side], uniform_vec(&mut r, c * side * side, 0.05, 0.95))?;
        let target = r.random_range(0..4);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (_, grad) = ensemble_gradient(&ensemble, &refs, &ts, target, &patch)?;
        let mut analytic = grad.into_data();
        hook(&tally.name, &mut analytic);
        let p64: Vec<Params64> = ensemble.iter().map(params64).collect();
        let x64: Vec<Vec<f64>> = xs.iter().map(|x| to64(x.data())).collect();
        let base = to64(patch.data());
        // the summed objective, normalized once
        let norm = 1.0 / (models * samples) as f64;
        let numeric: Vec<Option<f64>> = (0..base.len())
            .map(|i| {
                central_difference(&base, i, cfg.step, &mut |v| {
                    let mut total = 0.0;
                    let mut pattern = Vec::new();
                    for (x, t) in x64.iter().zip(&ts) {
                        let img = ref_composite(x, v, c, side, t, (hw, hw));
                        for p in &p64 {
                            let (logits, pat) = ref_forward(&layers, p, &input_shape, &img);
                            total += ref_cross_entropy(&logits, target);
                            pattern.extend(pat);
                        }
                    }
                    (total * norm, pattern)
                })
            })
            .collect();
        tally.compare(&analytic, &numeric);
        tally.instances += 1;
    }
    Ok(tally.finish(cfg.tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_composite_agrees_with_the_warp() {
        let mut r = rng::stream(5, &[]);
        let patch = Patch::new(Tensor::new(vec![2, 3, 3], uniform_vec(&mut r, 18, 0.0, 1.0)).unwrap(), 0, "p").unwrap();
        let x = Tensor::new(vec![2, 7, 7], uniform_vec(&mut r, 98, 0.0, 1.0)).unwrap();
        let t = random_transform(&mut r, 0.7, 1.5);
        let fast = crate::patchops::apply(&x, &crate::patchops::warp(&patch, &t, (7, 7)).unwrap()).unwrap();
        let slow = ref_composite(&to64(x.data()), &to64(patch.pixels().data()), 2, 3, &t, (7, 7));
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
