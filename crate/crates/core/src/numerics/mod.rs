//! Dense tensors, reverse-mode differentiation and the optimizer.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{glorot_uniform, GradBuffer, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{Real, Segments, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: non-finite value in {detail}")]
    NonFinite { op: &'static str, detail: String },
}
