//! A small trainable CNN graph built from (perforated) convolutions, ReLU,
//! max/average pooling, global average pooling and fully-connected layers,
//! trained with softmax negative log-likelihood.

mod data;
mod impact;
mod model;
mod spec;
mod train;

pub use data::{synthetic, Dataset, IMAGES_FILE, LABELS_FILE};
pub use impact::{
    apply_spec_perforation, average_impacts, average_impacts_all, impact_field, impact_field_from_logits,
    iterative_impact_perforation, IterativeImpact,
};
pub use model::{Activation, ForwardState, Gradients, LayerParams, Metrics, Network, Params};
pub use spec::{
    alexnet, nin, vgg16, ConvSpec, LayerSpec, NetworkSpec, PerfAttachment, Shape, ALEXNET_CAFFE, NIN_CIFAR, VGG16,
};
pub use train::{sgd_finetune, EpochLog, TrainState};
