//! Geometry-guided selective scanning.
//!
//! Multiply-add accounting (all counts are per call and exact):
//!
//! | op | madds |
//! |---|---|
//! | selective scan | `2 + 7·S` per element per channel |
//! | depthwise 3×3 | 9 per element |
//! | geometric prompt | 3 per pixel per direction |
//! | prompt reweighting | 1 per element per direction |
//! | four-way mean + residual | 5 per element |
//! | refiner head | `C² + 9·C` per pixel |
//!
//! Every term is proportional to the pixel count, so a cascade's count at
//! fixed channels and state size is exactly linear in `H·W`.

mod block;
mod direction;
mod leakage;
pub mod math;
mod params;
mod prompt;
mod scan;

pub use block::{
    block_madds, cascade_forward, cascade_madds, gmamba_block, refine_head, refiner_madds, CascadeConfig, CascadeKind,
    CascadeOutput, LayerConfig, LayerKind, RefinerHead,
};
pub use direction::{directional_scan, directional_scan_madds, ScanDirection};
pub use leakage::{leakage_ratio, LeakageScene};
pub use params::ScanParams;
pub use prompt::{geometric_prompt, modulate, PROMPT_MADDS_PER_PIXEL};
pub use scan::{scan_madds_per_step, selective_scan_1d, selective_scan_1d_backward, ScanOutput};

pub(crate) use direction::{directional_scan_backward_raw, directional_scan_raw};
pub(crate) use prompt::prompt_raw;
