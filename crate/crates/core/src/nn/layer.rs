use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// One layer of a feed-forward classifier.
///
/// Convolutions are unpadded; max-pooling uses non-overlapping windows
/// (stride equals the window) and drops incomplete trailing rows/columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    MaxPool2d {
        window: usize,
    },
}

/// Weight and bias of a parameterized layer.
///
/// Dense weights are `[output, input]`; conv weights are
/// `[out_channels, in_channels, kernel, kernel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-sample parameter gradient, accumulated in f64.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    pub(crate) fn zeros_like(p: &LayerParams) -> Self {
        ParamGrad {
            weight: vec![0.0; p.weight.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub(crate) fn add(&mut self, other: &ParamGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::LayerShape {
            layer,
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { input: n_in, output } => {
                if n_in == 0 || output == 0 {
                    return Err(Error::invalid(format!("layer {layer}: dense dims must be positive")));
                }
                if input != [n_in] {
                    return Err(mismatch(vec![n_in]));
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::invalid(format!(
                        "layer {layer}: conv2d hyperparameters must be positive"
                    )));
                }
                match *input {
                    [c, h, w] if c == in_channels && h >= kernel && w >= kernel => Ok(vec![
                        out_channels,
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                    ]),
                    [_, h, w] => Err(mismatch(vec![in_channels, h.max(kernel), w.max(kernel)])),
                    _ => Err(mismatch(vec![in_channels, kernel, kernel])),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![numel(input)]),
            LayerSpec::MaxPool2d { window } => {
                if window == 0 {
                    return Err(Error::invalid(format!("layer {layer}: pool window must be positive")));
                }
                match *input {
                    [c, h, w] if h >= window && w >= window => Ok(vec![c, h / window, w / window]),
                    [c, h, w] => Err(mismatch(vec![c, h.max(window), w.max(window)])),
                    _ => Err(mismatch(vec![1, window, window])),
                }
            }
        }
    }
}

/// Forward pass of one layer on one sample. `argmax` receives the winning
/// input index of every pooling output.
pub(crate) fn forward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    in_shape: &[usize],
    out_shape: &[usize],
    x: &[f32],
    argmax: &mut Vec<u32>,
) -> Vec<f32> {
    match *spec {
        LayerSpec::Dense { input, output } => {
            let p = params.expect("dense layer without params");
            let w = p.weight.data();
            let b = p.bias.data();
            (0..output)
                .map(|o| {
                    let row = &w[o * input..(o + 1) * input];
                    let acc: f64 = row.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum();
                    (acc + b[o] as f64) as f32
                })
                .collect()
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let p = params.expect("conv layer without params");
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let wt = p.weight.data();
            let b = p.bias.data();
            let mut out = Vec::with_capacity(out_channels * oh * ow);
            let mut acc = vec![0f64; oh * ow];
            for co in 0..out_channels {
                let wk = &wt[co * in_channels * kernel * kernel..(co + 1) * in_channels * kernel * kernel];
                acc.fill(b[co] as f64);
                for ci in 0..in_channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wv = wk[(ci * kernel + ky) * kernel + kx] as f64;
                            for oy in 0..oh {
                                let src = &x[ci * h * w + (oy * stride + ky) * w + kx..];
                                let dst = &mut acc[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    for (a, &v) in dst.iter_mut().zip(&src[..ow]) {
                                        *a += wv * v as f64;
                                    }
                                } else {
                                    for (ox, a) in dst.iter_mut().enumerate() {
                                        *a += wv * src[ox * stride] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| v as f32));
            }
            out
        }
        LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerSpec::Flatten => x.to_vec(),
        LayerSpec::MaxPool2d { window } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            argmax.clear();
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = ch * h * w + (oy * window + ky) * w + ox * window + kx;
                                // first maximum wins ties
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
            out
        }
    }
}

/// Backward pass of one layer on one sample.
///
/// Returns the gradient w.r.t. the layer input when `want_input` is set and
/// adds parameter gradients into `param_grad` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    in_shape: &[usize],
    out_shape: &[usize],
    x: &[f32],
    argmax: &[u32],
    grad_out: &[f32],
    want_input: bool,
    param_grad: Option<&mut ParamGrad>,
) -> Option<Vec<f32>> {
    match *spec {
        LayerSpec::Dense { input, output } => {
            let p = params.expect("dense layer without params");
            let w = p.weight.data();
            if let Some(pg) = param_grad {
                for o in 0..output {
                    let g = grad_out[o] as f64;
                    pg.bias[o] += g;
                    let row = &mut pg.weight[o * input..(o + 1) * input];
                    for (acc, &v) in row.iter_mut().zip(x) {
                        *acc += g * v as f64;
                    }
                }
            }
            want_input.then(|| {
                let mut gx = vec![0f64; input];
                for o in 0..output {
                    let g = grad_out[o] as f64;
                    for (acc, &a) in gx.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                        *acc += a as f64 * g;
                    }
                }
                gx.into_iter().map(|v| v as f32).collect()
            })
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let p = params.expect("conv layer without params");
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let wt = p.weight.data();
            let ksz = in_channels * kernel * kernel;
            let mut gx = want_input.then(|| vec![0f64; in_channels * h * w]);
            let mut pg = param_grad;
            let mut g = vec![0f64; oh * ow];
            for co in 0..out_channels {
                for (d, &v) in g.iter_mut().zip(&grad_out[co * oh * ow..(co + 1) * oh * ow]) {
                    *d = v as f64;
                }
                let rows: Vec<bool> = (0..oh).map(|oy| g[oy * ow..(oy + 1) * ow].iter().any(|&v| v != 0.0)).collect();
                if let Some(pg) = pg.as_deref_mut() {
                    pg.bias[co] += g.iter().sum::<f64>();
                }
                for ci in 0..in_channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wi = co * ksz + (ci * kernel + ky) * kernel + kx;
                            let wv = wt[wi] as f64;
                            let mut dw = 0.0;
                            for oy in (0..oh).filter(|&oy| rows[oy]) {
                                let base = ci * h * w + (oy * stride + ky) * w + kx;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    dw += grow.iter().zip(&x[base..base + ow]).map(|(&a, &v)| a * v as f64).sum::<f64>();
                                    if let Some(gx) = gx.as_mut() {
                                        for (d, &a) in gx[base..base + ow].iter_mut().zip(grow) {
                                            *d += wv * a;
                                        }
                                    }
                                } else {
                                    for (ox, &a) in grow.iter().enumerate() {
                                        dw += a * x[base + ox * stride] as f64;
                                        if let Some(gx) = gx.as_mut() {
                                            gx[base + ox * stride] += wv * a;
                                        }
                                    }
                                }
                            }
                            if let Some(pg) = pg.as_deref_mut() {
                                pg.weight[wi] += dw;
                            }
                        }
                    }
                }
            }
            gx.map(|v| v.into_iter().map(|v| v as f32).collect())
        }
        LayerSpec::Relu => want_input.then(|| {
            x.iter()
                .zip(grad_out)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect()
        }),
        LayerSpec::Flatten => want_input.then(|| grad_out.to_vec()),
        LayerSpec::MaxPool2d { .. } => want_input.then(|| {
            let mut gx = vec![0f32; x.len()];
            for (&i, &g) in argmax.iter().zip(grad_out) {
                gx[i as usize] += g;
            }
            gx
        }),
    }
}
