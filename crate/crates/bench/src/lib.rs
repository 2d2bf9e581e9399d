//! Seeded inputs shared by the benchmarks.

use dgm_core::gmamba::{CascadeConfig, CascadeKind};
use dgm_core::priors::make_priors;
use dgm_core::rng::{seeded, uniform_vec};
use dgm_core::{FeatureMap, GeometricPriors, LabelMask};

pub const CHANNELS: usize = 8;
pub const STATE_SIZE: usize = 4;

/// Four-quadrant mask, so every prior field is non-trivial.
pub fn quadrant_mask(h: usize, w: usize) -> LabelMask {
    LabelMask::from_fn(h, w, |y, x| u16::from(2 * x >= w) + 2 * u16::from(2 * y >= h))
}

pub fn features(h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = seeded(seed);
    FeatureMap::new(CHANNELS, h, w, uniform_vec(&mut rng, CHANNELS * h * w, -1.0, 1.0)).expect("finite features")
}

pub fn priors(h: usize, w: usize) -> GeometricPriors {
    make_priors(&quadrant_mask(h, w)).expect("priors of a valid mask")
}

pub fn cascade(kind: CascadeKind, seed: u64) -> CascadeConfig {
    CascadeConfig::init(CHANNELS, STATE_SIZE, kind, &mut seeded(seed))
}
