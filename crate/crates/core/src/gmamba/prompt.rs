//! Geometric prompting: `T = 1 + D_coarse · ReLU(Φ_dir)` with
//! `Φ_dir = ⟨Φ, u_d⟩`, and the spatial reweighting `F' = F ⊙ T`.

use super::direction::ScanDirection;
use super::math::relu;
use crate::error::Result;
use crate::fields::{FeatureMap, ScalarField, VectorField2};

/// Multiply-adds of one prompt evaluation per pixel (projection and gate).
pub const PROMPT_MADDS_PER_PIXEL: u64 = 3;

pub(crate) fn prompt_raw(d_coarse: &[f64], flow: &[f64], dir: ScanDirection) -> Vec<f64> {
    let n = d_coarse.len();
    let (uy, ux) = dir.unit_vector();
    let (fy, fx) = flow.split_at(n);
    d_coarse.iter().zip(fy.iter().zip(fx)).map(|(&d, (&a, &b))| 1.0 + d * relu(a * uy + b * ux)).collect()
}

/// The prompt for one scan direction.
pub fn geometric_prompt(d_coarse: &ScalarField, flow: &VectorField2, direction: ScanDirection) -> Result<ScalarField> {
    flow.ensure_dims(d_coarse.height(), d_coarse.width())?;
    let t = prompt_raw(d_coarse.data(), flow.data(), direction);
    Ok(ScalarField::from_raw(d_coarse.height(), d_coarse.width(), t))
}

pub(crate) fn modulate_raw(c: usize, data: &[f64], prompt: &[f64]) -> Vec<f64> {
    let n = prompt.len();
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        out.extend(data[ch * n..(ch + 1) * n].iter().zip(prompt).map(|(a, b)| a * b));
    }
    out
}

/// Scales every channel by the prompt at each pixel.
pub fn modulate(features: &FeatureMap, prompt: &ScalarField) -> Result<FeatureMap> {
    prompt.ensure_dims(features.height(), features.width())?;
    let (c, h, w) = (features.channels(), features.height(), features.width());
    Ok(FeatureMap::from_raw(c, h, w, modulate_raw(c, features.data(), prompt.data())))
}
