//! Synthetic scenes shared by the leakage study and the overfit run.

use rand::Rng;

use crate::error::Result;
use crate::fields::{FeatureMap, LabelMask};
use crate::gmamba::LeakageScene;
use crate::priors::{make_priors, GeometricPriors};
use crate::rng::seeded;

/// Side length of both canonical scenes.
pub const SCENE_SIZE: usize = 32;
/// Labels of the two leakage regions.
pub const REGION_A: u16 = 1;
pub const REGION_B: u16 = 2;

/// Left half region A with every channel at `a`, right half region B with
/// every channel at `b`. The priors come from the label mask, so the
/// boundary map is the two-pixel band at the split.
pub fn leakage_scene_with(channels: usize, size: usize, a: f64, b: f64) -> Result<LeakageScene> {
    let labels = LabelMask::from_fn(size, size, |_, x| if x < size / 2 { REGION_A } else { REGION_B });
    let plane: Vec<f64> = labels.labels().iter().map(|&l| if l == REGION_A { a } else { b }).collect();
    let features = FeatureMap::new(channels, size, size, plane.repeat(channels))?;
    let priors = make_priors(&labels)?;
    Ok(LeakageScene { features, labels, priors, region_a: REGION_A, region_b: REGION_B })
}

/// The canonical 32×32 scene: region A at +1, region B at −1.
pub fn leakage_scene(channels: usize) -> Result<LeakageScene> {
    leakage_scene_with(channels, SCENE_SIZE, 1.0, -1.0)
}

pub const BACKGROUND: u16 = 0;
pub const BLOCK: u16 = 1;
pub const STRIP: u16 = 2;
pub const OVERFIT_CLASSES: usize = 3;

/// Three-class scene: background, a solid block and a two-pixel-wide
/// vertical strip, with noisy class-dependent input features.
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitScene {
    pub labels: LabelMask,
    pub features: FeatureMap,
    pub priors: GeometricPriors,
}

pub fn overfit_labels(size: usize) -> LabelMask {
    let s = size as f64 / SCENE_SIZE as f64;
    let at = |v: f64| (v * s).round() as usize;
    LabelMask::from_fn(size, size, |y, x| {
        if (at(8.0)..at(22.0)).contains(&y) && (at(5.0)..at(17.0)).contains(&x) {
            BLOCK
        } else if (at(4.0)..at(28.0)).contains(&y) && (at(23.0)..at(23.0) + 2).contains(&x) {
            STRIP
        } else {
            BACKGROUND
        }
    })
}

/// Each channel carries a class-dependent mean (±0.5) plus uniform noise
/// in `[-0.25, 0.25]`.
pub fn overfit_scene(channels: usize, size: usize, seed: u64) -> Result<OverfitScene> {
    let labels = overfit_labels(size);
    let mut rng = seeded(seed);
    let n = size * size;
    let mut data = Vec::with_capacity(channels * n);
    for c in 0..channels {
        for &l in labels.labels() {
            let sign = if (c + l as usize).is_multiple_of(OVERFIT_CLASSES) { 0.5 } else { -0.5 };
            data.push(sign + rng.gen_range(-0.25..0.25));
        }
    }
    let features = FeatureMap::new(channels, size, size, data)?;
    let priors = make_priors(&labels)?;
    Ok(OverfitScene { labels, features, priors })
}
