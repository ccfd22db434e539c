//! Loss composition, the logit-field optimiser, completeness gating,
//! box-projection supervision, patch assembly and synthetic volumes.

mod boxloss;
mod gate;
mod loss;
mod nms;
mod optimize;
mod pipeline;
mod synth;

pub use boxloss::{box_projection_loss, positive_cell_fraction, BoxProjectionResult};
pub use gate::{completeness_gate, Completeness};
pub use loss::{mask_loss, LossComponents, LossConfig, LossWeights, MaskLossInputs, MaskLossOutput, Registration};
pub use nms::patch_nms;
pub use optimize::{derive_seed, optimize_mask, stream_rng, LossTrace, OptimizeOutcome};
pub(crate) use pipeline::streams;
pub use pipeline::{binarize, train_volume, PatchConfig, PatchResult, TrainOutcome};
pub use synth::{synth_volume, SynthCase, SynthKind, SynthParams, INNER_RADIUS_FRACTION, OUTER_RADIUS_FRACTION};
