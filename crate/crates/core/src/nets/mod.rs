//! Network engine: the per-point classifier, the relation network with its
//! prototype memory bank, and the prediction combiner.

pub mod checkpoint;
pub mod mlp;
pub mod relation;
pub mod unary;

pub use crate::config::TrainConfig;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlp::{Forward, Grads, InputScaling, Mlp, Sgd};
pub use relation::{
    balanced_sample, combine_probs, info_nce, relation_embeddings, relation_loss, relation_probs, train_relation,
    train_relation_multi, EmbeddingSample, MemoryBank, RelationFit, RelationScene,
};
pub use unary::{cross_entropy, point_targets, predict_unary, train_classifier, train_unary, UnaryFit};
