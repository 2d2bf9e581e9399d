//! The geometric prior generator: centripetal potential (V-map), flow field,
//! curvature anchors and the morphological boundary map, plus the feedback
//! refinement `D_final = σ(D_coarse + ΔD)`.

use crate::error::Result;
use crate::fields::{
    box_blur3x3, connected_components, laplacian, morphological_gradient, sobel_gradient, squared_distance_transform,
    LabelMask, ScalarField, VectorField2,
};
use crate::gmamba::math::logistic;

/// Floor on normalising denominators.
pub const NORM_EPS: f64 = 1e-8;

/// The four prior fields, all on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricPriors {
    pub vmap: ScalarField,
    pub flow: VectorField2,
    pub curv: ScalarField,
    pub d_coarse: ScalarField,
}

impl GeometricPriors {
    pub fn dims(&self) -> (usize, usize) {
        self.vmap.dims()
    }

    /// All-zero priors; guidance built from these is the identity prompt.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            vmap: ScalarField::zeros(height, width),
            flow: VectorField2::zeros(height, width),
            curv: ScalarField::zeros(height, width),
            d_coarse: ScalarField::zeros(height, width),
        }
    }

    /// Same priors with the boundary map zeroed out.
    pub fn without_boundary(&self) -> Self {
        let (h, w) = self.dims();
        Self { d_coarse: ScalarField::zeros(h, w), ..self.clone() }
    }
}

/// Per-instance normalised distance transform. Each positive id is an
/// instance; its pixels get `dist / max dist` over the instance, so every
/// instance peaks at exactly 1. Background is 0.
pub fn compute_vmap(instances: &LabelMask) -> Result<ScalarField> {
    let (h, w) = instances.dims();
    let mut out = vec![0.0; h * w];
    if h == 0 || w == 0 {
        return Ok(ScalarField::from_raw(h, w, out));
    }
    let max_id = instances.max_label();
    let labels = instances.labels();
    for id in 1..=max_id {
        if !labels.contains(&id) {
            continue;
        }
        let sq = squared_distance_transform(instances, id)?;
        let peak = labels.iter().zip(&sq).filter(|(&l, _)| l == id).map(|(_, &d)| d).max().unwrap_or(0);
        let peak = (peak as f64).sqrt();
        for ((o, &l), &d) in out.iter_mut().zip(labels).zip(&sq) {
            if l == id {
                *o = if peak > 0.0 { (d as f64).sqrt() / peak } else { 1.0 };
            }
        }
    }
    Ok(ScalarField::from_raw(h, w, out))
}

/// Sobel gradient of the V-map, scaled by its largest per-pixel magnitude so
/// every vector has length at most 1. Points up the potential, toward
/// instance centres.
pub fn compute_flow(vmap: &ScalarField) -> Result<VectorField2> {
    let g = sobel_gradient(vmap)?;
    let scale = g.max_magnitude().max(NORM_EPS);
    let (h, w) = g.dims();
    let data = g.into_data().into_iter().map(|v| v / scale).collect();
    Ok(VectorField2::from_raw(h, w, data))
}

/// Signed Laplacian of the V-map normalised by its largest magnitude.
pub fn compute_curv(vmap: &ScalarField) -> Result<ScalarField> {
    let l = laplacian(vmap)?;
    let scale = l.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(NORM_EPS);
    Ok(l.map(|v| v / scale))
}

/// Binary morphological boundary map, optionally softened by one 3×3 box
/// average.
pub fn compute_dcoarse(mask: &LabelMask, soften: bool) -> ScalarField {
    let g = morphological_gradient(mask);
    if soften {
        box_blur3x3(&g)
    } else {
        g
    }
}

/// `σ(d_coarse + delta_d)` pixelwise.
pub fn refine_dmap(d_coarse: &ScalarField, delta_d: &ScalarField) -> Result<ScalarField> {
    delta_d.ensure_dims(d_coarse.height(), d_coarse.width())?;
    let data = d_coarse.data().iter().zip(delta_d.data()).map(|(a, b)| logistic(a + b)).collect();
    Ok(ScalarField::from_raw(d_coarse.height(), d_coarse.width(), data))
}

/// All four priors for a label mask. Instances are the 4-connected
/// components of the mask; the boundary map is taken on the mask itself.
pub fn make_priors(mask: &LabelMask) -> Result<GeometricPriors> {
    let instances = connected_components(mask);
    let vmap = compute_vmap(&instances)?;
    let flow = compute_flow(&vmap)?;
    let curv = compute_curv(&vmap)?;
    let d_coarse = compute_dcoarse(mask, false);
    Ok(GeometricPriors { vmap, flow, curv, d_coarse })
}
