//! Contrastive baselines: momentum contrast, swapped cluster assignment and
//! bootstrapped online/target regression.

mod byol;
mod heads;
mod losses;
mod moco;
mod queue;
mod swav;

pub use byol::{byol_momentum, byol_step, Byol, ByolConfig};
pub use heads::Mlp;
pub use losses::{
    byol_loss, byol_loss_batch, cluster_scores, info_nce, info_nce_batch, sinkhorn_codes,
    sinkhorn_codes_observed, swav_swapped_loss,
};
pub use moco::{moco_step, Moco, MocoConfig};
pub use queue::KeyQueue;
pub use swav::{normalize_prototypes, swav_step, Swav, SwavConfig, PROTOTYPES};
