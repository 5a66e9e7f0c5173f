//! Deformable sampling, the GDU, refinement blocks and the feature cascade.

pub mod arb;
pub mod gdu;
pub mod pafc;
mod sampling;

pub use arb::{arb_forward, ArbParams};
pub use gdu::{
    gdu_forward, gdu_sample, modulation_psi, predict_offsets, psi_field, Branch, GduConfig, GduOutput,
    GduParams, OffsetField,
};
pub use pafc::{pafc_forward, plain_stage_forward, PafcConfig, PafcParams, PlainStageParams};
pub use sampling::{bilinear, Corners};
