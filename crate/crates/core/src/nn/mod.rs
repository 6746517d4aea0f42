//! Small differentiable classifiers with hand-written backward passes.

mod layer;
mod loss;
mod model;
mod topk;
mod train;

pub use layer::{LayerParams, LayerSpec, ParamGrad};
pub use loss::{cross_entropy_to_target, softmax};
pub use model::{convnet, convnet_with_head, load_model, save_model, Head, ModelGroup, TrainedModel, MODEL_MAGIC};
pub use topk::top_k_hit;
pub use train::{train_model, ModelSpec, TrainConfig};


use crate::error::Result;
use crate::tensor::Tensor;

pub fn forward(model: &TrainedModel, batch: &Tensor) -> Result<Tensor> {
    model.forward(batch)
}

pub fn grad_input(model: &TrainedModel, batch: &Tensor, targets: &[usize]) -> Result<Tensor> {
    model.grad_input(batch, targets)
}
