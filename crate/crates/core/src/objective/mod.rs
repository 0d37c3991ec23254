//! Losses, analytic gradients and the linear embedder they train.

mod augment;
mod embedder;
mod losses;

pub use augment::augment;
pub use embedder::{Embedder, Embedding};
pub use losses::{
    build_sac_classifier, global_loss, global_loss_single, sac_loss, src_loss, total_loss, LossGrad,
    LossParts, LossWeights, SacBatch, SrcLossGrad,
};
