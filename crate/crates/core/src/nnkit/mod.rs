//! Minimal differentiable-network toolkit.
//!
//! Networks are plain dense MLPs stored as one flat [`ParamVector`]. A forward
//! pass records an [`MlpTape`] that [`mlp_backward`] consumes to produce exact
//! reverse-mode gradients. There is no persistent graph: every forward call
//! builds a fresh tape.

mod check;
mod embed;
mod mlp;
mod optim;

pub use check::{random_film_spec, GradCheckCase, GradCheckReport};
pub use embed::{film_apply, fourier_time_embed, FOURIER_MAX_CYCLES};
pub use mlp::{
    mlp_backward, mlp_forward, Activation, LayerSlots, MlpInput, MlpGrads, MlpLayout, MlpSpec,
    MlpTape, ParamVector, Slot,
};
pub use optim::{adam_step, global_norm, AdamStats, EmaState, OptimState};
