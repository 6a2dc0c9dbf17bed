//! Hybrid attention/convolution direction classifier.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod net;
pub mod tensor;
pub mod train;

pub use graph::{cross_entropy, Graph, Var};
pub use net::{
    build_model, Conv, ConvT, FeatureBlock, InvRes, Linear, Mha, Model, ModelConfig, Param,
    Norm, ParamStore, Stage,
};
pub use tensor::Tensor;
pub use train::{
    evaluate, train, Adam, ConfusionMatrix, EpochRecord, LrSchedule, Samples, TrainConfig, TrainReport,
};
