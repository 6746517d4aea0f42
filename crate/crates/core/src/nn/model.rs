use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::{self, LayerParams, LayerSpec, ParamGrad};
use super::loss::{check_targets, row_loss_grad};
use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{numel, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"PFM1";

/// Role of a model in the benchmark protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelGroup {
    /// Used to craft patches.
    Ensemble,
    /// Held out; same architecture family as the ensemble.
    HeldOutStandard,
    /// Held out; different architecture family.
    HeldOutOther,
}

impl ModelGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelGroup::Ensemble => "ENSEMBLE",
            ModelGroup::HeldOutStandard => "HELD_OUT_STANDARD",
            ModelGroup::HeldOutOther => "HELD_OUT_OTHER",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ENSEMBLE" => Ok(ModelGroup::Ensemble),
            "HELD_OUT_STANDARD" => Ok(ModelGroup::HeldOutStandard),
            "HELD_OUT_OTHER" => Ok(ModelGroup::HeldOutOther),
            other => Err(Error::invalid(format!("unknown model group {other:?}"))),
        }
    }

    pub fn is_held_out(&self) -> bool {
        !matches!(self, ModelGroup::Ensemble)
    }
}

/// Activations recorded by a single-sample forward pass.
pub(crate) struct Trace {
    acts: Vec<Vec<f32>>,
    argmax: Vec<Vec<u32>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f32] {
        self.acts.last().unwrap()
    }
}

/// A classifier: architecture, parameters and benchmark metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model_id: String,
    group: ModelGroup,
    pub train_seed: u64,
    pub clean_acc_cache: Option<f64>,
    pub train_accuracy: Option<f64>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the
    /// logit shape.
    shapes: Vec<Vec<usize>>,
}

fn propagate_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::invalid(format!("input shape {input_shape:?} must be non-empty and positive")));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (i, l) in layers.iter().enumerate() {
        let next = l.output_shape(i, shapes.last().unwrap())?;
        shapes.push(next);
    }
    let out = shapes.last().unwrap();
    if out.len() != 1 || out[0] < 2 {
        return Err(Error::invalid(format!(
            "network must end in a logit vector of at least 2 classes, got {out:?}"
        )));
    }
    Ok(shapes)
}

impl TrainedModel {
    pub fn new(
        model_id: impl Into<String>,
        group: ModelGroup,
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams>,
        train_seed: u64,
    ) -> Result<Self> {
        let shapes = propagate_shapes(input_shape, &layers)?;
        let expected: Vec<_> = layers.iter().filter_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} parameterized layers but {} parameter sets",
                expected.len(),
                params.len()
            )));
        }
        for (i, ((w, b), p)) in expected.iter().zip(&params).enumerate() {
            if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter set {i}: expected weight {w:?} / bias {b:?}, got {:?} / {:?}",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(TrainedModel {
            model_id: model_id.into(),
            group,
            train_seed,
            clean_acc_cache: None,
            train_accuracy: None,
            layers,
            params,
            shapes,
        })
    }

    /// Fresh model with weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// and zero biases.
    pub fn init(
        model_id: impl Into<String>,
        group: ModelGroup,
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        propagate_shapes(input_shape, &layers)?;
        let mut params = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            if let Some((ws, bs)) = l.param_shapes() {
                let mut r = rng::stream(seed, &[rng::tag("init"), i as u64]);
                let s = 1.0 / (l.fan_in() as f32).sqrt();
                let weight = (0..numel(&ws)).map(|_| r.random_range(-s..=s)).collect();
                params.push(LayerParams {
                    weight: Tensor::from_raw(ws, weight),
                    bias: Tensor::zeros(&bs),
                });
            }
        }
        Self::new(model_id, group, input_shape, layers, params, seed)
    }

    pub fn group(&self) -> ModelGroup {
        self.group
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn bit_eq(&self, other: &TrainedModel) -> bool {
        self.layers == other.layers
            && self.shapes == other.shapes
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias))
    }

    fn batch_len(&self, batch: &Tensor) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.shapes[0].len() + 1 || shape[1..] != self.shapes[0][..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.shapes[0]);
            return Err(Error::LayerShape {
                layer: 0,
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    pub(crate) fn trace(&self, x: &[f32]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let mut p = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let params = if l.is_parameterized() {
                p += 1;
                Some(&self.params[p - 1])
            } else {
                None
            };
            let mut am = Vec::new();
            let out = layer::forward(l, params, &self.shapes[i], &self.shapes[i + 1], &acts[i], &mut am);
            acts.push(out);
            argmax.push(am);
        }
        Trace { acts, argmax }
    }

    /// Backpropagates `grad_logits` through a recorded trace.
    pub(crate) fn backprop(
        &self,
        trace: &Trace,
        grad_logits: Vec<f32>,
        want_input: bool,
        mut param_grads: Option<&mut Vec<ParamGrad>>,
    ) -> Option<Vec<f32>> {
        let mut grad = grad_logits;
        let mut p = self.params.len();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let params = if l.is_parameterized() {
                p -= 1;
                Some(&self.params[p])
            } else {
                None
            };
            let pg = match (l.is_parameterized(), param_grads.as_deref_mut()) {
                (true, Some(all)) => Some(&mut all[p]),
                _ => None,
            };
            let need = i > 0 || want_input;
            let next = layer::backward(
                l,
                params,
                &self.shapes[i],
                &self.shapes[i + 1],
                &trace.acts[i],
                &trace.argmax[i],
                &grad,
                need,
                pg,
            );
            {
                let g = next?;
                grad = g
            }
        }
        Some(grad)
    }

    /// Raw logits `[N, classes]` for a batch `[N, ...input_shape]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.batch_len(batch)?;
        let k = self.num_classes();
        let rows: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|i| self.trace(batch.outer_slice(i)).logits().to_vec())
            .collect();
        Ok(Tensor::from_raw(vec![n, k], rows.concat()))
    }

    pub(crate) fn logits_one(&self, x: &[f32]) -> Vec<f32> {
        self.trace(x).logits().to_vec()
    }

    /// Cross-entropy and its gradient w.r.t. one input sample; the logit
    /// gradient is scaled by `scale`.
    pub(crate) fn sample_loss_grad_input(&self, x: &[f32], target: usize, scale: f64) -> (f64, Vec<f32>) {
        let trace = self.trace(x);
        let (loss, g) = row_loss_grad(trace.logits(), target, scale);
        let gx = self.backprop(&trace, g, true, None).unwrap();
        (loss, gx)
    }

    /// Mean cross-entropy over the batch and its gradient w.r.t. the input
    /// pixels, parameters held fixed.
    pub fn loss_and_grad_input(&self, batch: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
        let n = self.check_batch_targets(batch, targets)?;
        let scale = 1.0 / n as f64;
        let parts: Vec<(f64, Vec<f32>)> = (0..n)
            .into_par_iter()
            .map(|i| self.sample_loss_grad_input(batch.outer_slice(i), targets[i], scale))
            .collect();
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(batch.len());
        for (l, g) in parts {
            loss += l;
            grad.extend(g);
        }
        Ok((loss * scale, Tensor::from_raw(batch.shape().to_vec(), grad)))
    }

    pub fn grad_input(&self, batch: &Tensor, targets: &[usize]) -> Result<Tensor> {
        Ok(self.loss_and_grad_input(batch, targets)?.1)
    }

    /// Mean cross-entropy and its gradient w.r.t. every parameter set.
    pub fn loss_and_param_grads(&self, batch: &Tensor, targets: &[usize]) -> Result<(f64, Vec<ParamGrad>)> {
        let n = self.check_batch_targets(batch, targets)?;
        let scale = 1.0 / n as f64;
        let parts: Vec<(f64, Vec<ParamGrad>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let trace = self.trace(batch.outer_slice(i));
                let (loss, g) = row_loss_grad(trace.logits(), targets[i], scale);
                let mut pg: Vec<ParamGrad> = self.params.iter().map(ParamGrad::zeros_like).collect();
                self.backprop(&trace, g, false, Some(&mut pg));
                (loss, pg)
            })
            .collect();
        let mut total: Vec<ParamGrad> = self.params.iter().map(ParamGrad::zeros_like).collect();
        let mut loss = 0.0;
        for (l, pg) in &parts {
            loss += l;
            for (t, g) in total.iter_mut().zip(pg) {
                t.add(g);
            }
        }
        Ok((loss * scale, total))
    }

    fn check_batch_targets(&self, batch: &Tensor, targets: &[usize]) -> Result<usize> {
        let n = self.batch_len(batch)?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for a batch of {n}", targets.len())));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        check_targets(targets, self.num_classes())?;
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            model_id: self.model_id.clone(),
            group: self.group,
            train_seed: self.train_seed,
            clean_acc_cache: self.clean_acc_cache,
            train_accuracy: self.train_accuracy,
            input_shape: self.shapes[0].clone(),
            layers: self.layers.clone(),
        };
        let json = serde_json::to_vec(&header).expect("model header serializes");
        let tensors: Vec<&Tensor> = self.params.iter().flat_map(|p| [&p.weight, &p.bias]).collect();
        codec::encode_container(MODEL_MAGIC, &json, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header: ModelHeader = codec::decode_header(&mut r, MODEL_MAGIC)?;
        let header_end = r.position();
        // validate the architecture before reading any payload
        propagate_shapes(&header.input_shape, &header.layers)
            .map_err(|e| Error::format(header_end, format!("invalid architecture: {e}")))?;
        let mut params = Vec::new();
        for l in &header.layers {
            if let Some((ws, bs)) = l.param_shapes() {
                let mut next = |want: &[usize]| -> Result<Tensor> {
                    let at = r.position();
                    let t = codec::decode_tensor(&mut r)?;
                    if t.shape() != want {
                        return Err(Error::format(
                            at,
                            format!("parameter tensor has shape {:?}, expected {want:?}", t.shape()),
                        ));
                    }
                    Ok(t)
                };
                let weight = next(&ws)?;
                let bias = next(&bs)?;
                params.push(LayerParams { weight, bias });
            }
        }
        r.finish()?;
        let mut m = TrainedModel::new(
            header.model_id,
            header.group,
            &header.input_shape,
            header.layers,
            params,
            header.train_seed,
        )?;
        m.clean_acc_cache = header.clean_acc_cache;
        m.train_accuracy = header.train_accuracy;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    model_id: String,
    group: ModelGroup,
    train_seed: u64,
    clean_acc_cache: Option<f64>,
    train_accuracy: Option<f64>,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path)
}

/// How the last conv block feeds the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Flatten the feature map into the dense layer.
    #[default]
    Flatten,
    /// Max-pool over the whole remaining feature map first, so the
    /// classifier sees what is present but not where.
    GlobalMax,
}

/// Conv/relu/pool blocks followed by a dense classifier head.
pub fn convnet(input_shape: &[usize], channels: &[usize], kernel: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    convnet_with_head(input_shape, channels, kernel, classes, Head::Flatten)
}

pub fn convnet_with_head(
    input_shape: &[usize],
    channels: &[usize],
    kernel: usize,
    classes: usize,
    head: Head,
) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let push = |l: LayerSpec, layers: &mut Vec<LayerSpec>, shape: &mut Vec<usize>| -> Result<()> {
        *shape = l.output_shape(layers.len(), shape)?;
        layers.push(l);
        Ok(())
    };
    for &c in channels {
        let conv = LayerSpec::Conv2d {
            in_channels: shape[0],
            out_channels: c,
            kernel,
            stride: 1,
        };
        push(conv, &mut layers, &mut shape)?;
        push(LayerSpec::Relu, &mut layers, &mut shape)?;
        push(LayerSpec::MaxPool2d { window: 2 }, &mut layers, &mut shape)?;
    }
    if head == Head::GlobalMax {
        let window = shape[1].min(shape[2]);
        push(LayerSpec::MaxPool2d { window }, &mut layers, &mut shape)?;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        input: numel(&shape),
        output: classes,
    });
    Ok(layers)
}
