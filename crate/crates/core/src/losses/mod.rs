//! Segmentation, alignment and grounding losses, bipartite matching, and the
//! weighted composite objective.

mod alignment;
mod composite;
mod grounding;
mod mask;
mod matching;

pub use alignment::{alignment_ce, alignment_ce_with_grad, DEFAULT_LOGIT_SCALE};
pub use composite::{total_loss, LossBreakdown, LossTerms, LossWeights};
pub(crate) use grounding::grounding_raw;
pub use grounding::{grounding_loss, grounding_loss_with_grad, symmetric_infonce};
pub use mask::{
    bce_mask_loss, bce_mask_loss_with_grad, dice_loss, dice_loss_with_grad, PROB_CLAMP,
};
pub use matching::{brute_force_match, hungarian_match, MatchResult};
