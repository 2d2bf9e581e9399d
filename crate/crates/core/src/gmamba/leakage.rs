//! Semantic-leakage measurement on a two-region scene.
//!
//! Leakage of a run is the mean absolute change of the cascade output over
//! region B (all channels) when region A's inputs are zeroed. Guided and
//! isotropic runs share every parameter.

use super::block::{cascade_forward, CascadeConfig, CascadeKind};
use crate::error::{DgmError, Result};
use crate::fields::{FeatureMap, LabelMask};
use crate::priors::GeometricPriors;

/// A scene with a source region A and a receiving region B.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageScene {
    pub features: FeatureMap,
    pub labels: LabelMask,
    pub priors: GeometricPriors,
    pub region_a: u16,
    pub region_b: u16,
}

fn leakage_of(config: &CascadeConfig, scene: &LeakageScene, silenced: &FeatureMap) -> Result<f64> {
    let y = cascade_forward(&scene.features, config, &scene.priors)?.features;
    let y0 = cascade_forward(silenced, config, &scene.priors)?.features;
    let n = y.plane_len();
    let labels = scene.labels.labels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..y.channels() {
        let (a, b) = (y.channel(c), y0.channel(c));
        for i in 0..n {
            if labels[i] == scene.region_b {
                sum += (a[i] - b[i]).abs();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Returns `(guided, isotropic)` leakage into region B.
pub fn leakage_ratio(config: &CascadeConfig, scene: &LeakageScene) -> Result<(f64, f64)> {
    let labels = scene.labels.labels();
    for (name, r) in [("A", scene.region_a), ("B", scene.region_b)] {
        if !labels.contains(&r) {
            return Err(DgmError::DegenerateScene(format!("region {name} (label {r}) is empty")));
        }
    }
    if scene.region_a == scene.region_b {
        return Err(DgmError::DegenerateScene("regions A and B coincide".into()));
    }
    let (h, w) = scene.labels.dims();
    scene.features.ensure_dims(h, w)?;

    let n = h * w;
    let mut silenced = scene.features.data().to_vec();
    for c in 0..scene.features.channels() {
        for i in 0..n {
            if labels[i] == scene.region_a {
                silenced[c * n + i] = 0.0;
            }
        }
    }
    let silenced = FeatureMap::new(scene.features.channels(), h, w, silenced)?;

    let guided = leakage_of(&config.with_kind(CascadeKind::Cascade), scene, &silenced)?;
    let isotropic = leakage_of(&config.with_kind(CascadeKind::Iso3), scene, &silenced)?;
    Ok((guided, isotropic))
}
