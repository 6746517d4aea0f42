use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::model::{ModelGroup, TrainedModel};
use super::topk::top_k_hit;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub group: ModelGroup,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Plain minibatch SGD on softmax cross-entropy.
///
/// Initialization and the per-epoch shuffles draw from independent streams
/// of `cfg.seed`, so two runs with the same seed produce identical bits.
pub fn train_model(spec: &ModelSpec, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut model = TrainedModel::init(
        spec.model_id.clone(),
        spec.group,
        &dataset.image_shape(),
        spec.layers.clone(),
        cfg.seed,
    )?;
    if model.num_classes() < dataset.class_count {
        return Err(Error::invalid(format!(
            "model has {} outputs but the dataset has {} classes",
            model.num_classes(),
            dataset.class_count
        )));
    }
    let lr = cfg.learning_rate as f64;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag("shuffle"), epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = dataset.gather(chunk);
            let (loss, grads) = model.loss_and_param_grads(&batch, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                for (w, d) in p.weight.data_mut().iter_mut().zip(&g.weight) {
                    *w = (*w as f64 - lr * d) as f32;
                }
                for (b, d) in p.bias.data_mut().iter_mut().zip(&g.bias) {
                    *b = (*b as f64 - lr * d) as f32;
                }
            }
            let finite = model
                .params()
                .iter()
                .all(|p| p.weight.data().iter().chain(p.bias.data()).all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Diverged { epoch });
            }
        }
    }
    model.train_accuracy = Some(top1_accuracy(&model, dataset)?);
    Ok(model)
}

pub(crate) fn top1_accuracy(model: &TrainedModel, dataset: &LabeledDataset) -> Result<f64> {
    let logits = model.forward(&dataset.images)?;
    let mut hits = 0usize;
    for (i, &y) in dataset.labels.iter().enumerate() {
        hits += top_k_hit(logits.outer_slice(i), y, 1)? as usize;
    }
    Ok(hits as f64 / dataset.len().max(1) as f64)
}
