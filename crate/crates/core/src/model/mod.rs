//! Network assembly, objective, and optimizer.

mod check;
mod config;
pub mod loss;
mod network;
pub mod optim;

pub use check::{param_gradient_error, RESOLVABLE_GRADIENT};
pub use config::{Ablation, ModelConfig};
pub use loss::{dice_loss, joint_loss, wbce_loss, LossTerms};
pub use network::{binarize, NetTrace, Network, Prediction, MASK_THRESHOLD};
pub use optim::{PolySchedule, Sgd};
