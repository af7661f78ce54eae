//! Layers, model assembly, optimisation and persistence.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{affine_forward, affine_traced, dropout, uniform_init, Activation, AffineParams, Mode};
pub use model::{
    argmax_rows, build_mlp, build_sca_model, BoundModel, ForwardOutput, Layer, LayerSpec, LayerVars, Model, ModelSpec,
    EVAL_BATCH,
};
pub use train::{
    accuracy, evaluate, loss_and_accuracy, train, train_with, BatchTransform, EpochRecord, History, TrainConfig,
};
