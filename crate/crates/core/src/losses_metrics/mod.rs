//! Cross-entropy and focal losses over the four heads, plus per-class
//! precision/recall and macro-F1.

pub(crate) mod kernel;
mod loss;
mod metrics;

pub use loss::{
    cross_entropy, focal_loss, head_loss, multi_head_loss, multi_head_loss_value, LossConfig,
    LossKind, CLAMP_EPS,
};
pub use metrics::{
    f1_macro, precision_recall_per_class, ClassReport, ClassStats, EvalReport, HeadReport,
};
