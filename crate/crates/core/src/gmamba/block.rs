//! Directional blocks and the three-layer cascade with its feedback head.
//!
//! A block applies a depthwise 3×3 prior, scans the result in all four
//! directions (guided blocks reweight the input by that direction's prompt
//! first), averages the four outputs in fixed order and adds the block
//! input back. The cascade runs two isotropic blocks then one guided block,
//! and projects the last output to a one-channel boundary residual `ΔD`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::direction::{check_scan_inputs, directional_scan_madds, directional_scan_raw, ScanDirection};
use super::params::ScanParams;
use super::prompt::{modulate_raw, prompt_raw, PROMPT_MADDS_PER_PIXEL};
use crate::error::{mismatch, DgmError, Result};
use crate::fields::{conv1x1_raw, conv3x3_raw, depthwise_conv3x3_raw, DepthwiseKernels, FeatureMap, ScalarField};
use crate::priors::GeometricPriors;
use crate::rng::{uniform_vec, DgmRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Isotropic,
    GeometryGuided,
}

/// Stack layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CascadeKind {
    /// Two isotropic layers then one guided layer.
    Cascade,
    /// Three isotropic layers.
    Iso3,
}

impl CascadeKind {
    pub fn layer_kinds(self) -> [LayerKind; 3] {
        match self {
            CascadeKind::Cascade => [LayerKind::Isotropic, LayerKind::Isotropic, LayerKind::GeometryGuided],
            CascadeKind::Iso3 => [LayerKind::Isotropic; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub params: ScanParams,
    pub kernels: DepthwiseKernels,
}

/// Boundary-residual head: a `C×C` pointwise mix followed by a 3×3
/// convolution to one channel with a scalar bias. Linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerHead {
    pub mix: Vec<f64>,
    pub conv: Vec<f64>,
    pub bias: f64,
}

impl RefinerHead {
    pub fn zeros(channels: usize) -> Self {
        Self { mix: vec![0.0; channels * channels], conv: vec![0.0; 9 * channels], bias: 0.0 }
    }

    pub fn init(channels: usize, rng: &mut DgmRng) -> Self {
        let a = 1.0 / (channels as f64).sqrt();
        let b = 1.0 / (9.0 * channels as f64).sqrt();
        Self {
            mix: uniform_vec(rng, channels * channels, -a, a),
            conv: uniform_vec(rng, 9 * channels, -b, b),
            bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub channels: usize,
    pub state_size: usize,
    pub layers: Vec<LayerConfig>,
    pub refiner: RefinerHead,
}

impl CascadeConfig {
    /// Seeded initialisation. Depthwise taps are `U[-1/3, 1/3]` (fan-in 9).
    pub fn init(channels: usize, state_size: usize, kind: CascadeKind, rng: &mut DgmRng) -> Self {
        let layers = kind
            .layer_kinds()
            .into_iter()
            .map(|k| {
                let params = ScanParams::init(channels, state_size, rng);
                let taps = (0..9 * channels).map(|_| rng.gen_range(-1.0 / 3.0..1.0 / 3.0)).collect();
                LayerConfig { kind: k, params, kernels: DepthwiseKernels::new(taps).expect("finite taps") }
            })
            .collect();
        let refiner = RefinerHead::init(channels, rng);
        Self { channels, state_size, layers, refiner }
    }

    /// Same parameters with the layer kinds of `kind`.
    pub fn with_kind(&self, kind: CascadeKind) -> Self {
        let mut out = self.clone();
        for (layer, k) in out.layers.iter_mut().zip(kind.layer_kinds()) {
            layer.kind = k;
        }
        out
    }

    pub fn kind(&self) -> Result<CascadeKind> {
        let kinds: Vec<LayerKind> = self.layers.iter().map(|l| l.kind).collect();
        [CascadeKind::Cascade, CascadeKind::Iso3]
            .into_iter()
            .find(|k| kinds == k.layer_kinds())
            .ok_or_else(|| DgmError::Config(format!("unsupported layer layout {kinds:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        for layer in &self.layers {
            layer.params.validate()?;
            if layer.params.channels != self.channels || layer.params.state_size != self.state_size {
                return Err(mismatch(
                    format!("{}x{} scan parameters", self.channels, self.state_size),
                    format!("{}x{}", layer.params.channels, layer.params.state_size),
                ));
            }
            if layer.kernels.channels() != self.channels {
                return Err(mismatch(format!("{} kernels", self.channels), layer.kernels.channels()));
            }
        }
        let c = self.channels;
        if self.refiner.mix.len() != c * c || self.refiner.conv.len() != 9 * c {
            return Err(mismatch("refiner with C×C mix and C×9 conv", "other shapes"));
        }
        Ok(())
    }
}

/// Result of a cascade run.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub features: FeatureMap,
    pub delta_d: ScalarField,
    pub madds: u64,
}

/// Multiply-adds of one block: depthwise prior (9 per element), prompt and
/// reweighting for each direction when guided, four scans, the four-way
/// mean (4 per element) and the residual (1 per element).
pub fn block_madds(channels: usize, height: usize, width: usize, state_size: usize, guided: bool) -> u64 {
    let n = (height * width) as u64;
    let cn = channels as u64 * n;
    let mut m = 9 * cn + 4 * directional_scan_madds(channels, height, width, state_size) + 5 * cn;
    if guided {
        m += 4 * (PROMPT_MADDS_PER_PIXEL * n + cn);
    }
    m
}

/// Multiply-adds of the refiner head.
pub fn refiner_madds(channels: usize, height: usize, width: usize) -> u64 {
    let c = channels as u64;
    (c * c + 9 * c) * (height * width) as u64
}

/// Multiply-adds of a full cascade pass at the given size.
pub fn cascade_madds(config: &CascadeConfig, height: usize, width: usize) -> u64 {
    let (c, s) = (config.channels, config.state_size);
    config.layers.iter().map(|l| block_madds(c, height, width, s, l.kind == LayerKind::GeometryGuided)).sum::<u64>()
        + refiner_madds(c, height, width)
}

/// Guidance planes: boundary map and flow (`2·H·W`, y then x).
pub(crate) type Guide<'a> = (&'a [f64], &'a [f64]);

pub(crate) fn block_raw(
    c: usize,
    h: usize,
    w: usize,
    x: &[f64],
    params: &ScanParams,
    kernels: &[f64],
    guide: Option<Guide<'_>>,
) -> Vec<f64> {
    let conv = depthwise_conv3x3_raw(c, h, w, x, kernels);
    let mut acc = vec![0.0; c * h * w];
    for dir in ScanDirection::ALL {
        let y = match guide {
            Some((d_coarse, flow)) => {
                let t = prompt_raw(d_coarse, flow, dir);
                directional_scan_raw(c, h, w, &modulate_raw(c, &conv, &t), params, dir)
            }
            None => directional_scan_raw(c, h, w, &conv, params, dir),
        };
        for (a, b) in acc.iter_mut().zip(&y) {
            *a += b;
        }
    }
    x.iter().zip(&acc).map(|(a, b)| a + 0.25 * b).collect()
}

pub(crate) fn refiner_raw(c: usize, h: usize, w: usize, x: &[f64], head: &RefinerHead) -> Vec<f64> {
    let mixed = conv1x1_raw(c, c, h * w, x, &head.mix, &vec![0.0; c]);
    conv3x3_raw(c, 1, h, w, &mixed, &head.conv, &[head.bias])
}

fn check_guide(priors: &GeometricPriors, h: usize, w: usize) -> Result<()> {
    priors.d_coarse.ensure_dims(h, w)?;
    priors.flow.ensure_dims(h, w)
}

/// One directional block. With priors the input of each direction's scan
/// is reweighted by that direction's geometric prompt; without, the four
/// scans see the same input.
pub fn gmamba_block(
    features: &FeatureMap,
    params: &ScanParams,
    kernels: &DepthwiseKernels,
    priors: Option<&GeometricPriors>,
) -> Result<FeatureMap> {
    check_scan_inputs(features, params)?;
    if kernels.channels() != features.channels() {
        return Err(mismatch(format!("{} kernels", features.channels()), kernels.channels()));
    }
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if let Some(p) = priors {
        check_guide(p, h, w)?;
    }
    let guide = priors.map(|p| (p.d_coarse.data(), p.flow.data()));
    let out = block_raw(c, h, w, features.data(), params, kernels.weights(), guide);
    Ok(FeatureMap::from_raw(c, h, w, out))
}

/// Applies the refiner head to a feature map.
pub fn refine_head(features: &FeatureMap, head: &RefinerHead) -> Result<ScalarField> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if head.mix.len() != c * c || head.conv.len() != 9 * c {
        return Err(mismatch(format!("refiner for {c} channels"), "other shapes"));
    }
    Ok(ScalarField::from_raw(h, w, refiner_raw(c, h, w, features.data(), head)))
}

/// Runs the stack and the refiner head. Guided layers read the boundary map
/// and flow from `priors`; isotropic layers ignore them.
pub fn cascade_forward(
    features: &FeatureMap,
    config: &CascadeConfig,
    priors: &GeometricPriors,
) -> Result<CascadeOutput> {
    config.validate()?;
    if features.channels() != config.channels {
        return Err(mismatch(format!("{} channels", config.channels), features.channels()));
    }
    if !features.is_finite() {
        return Err(DgmError::NonFinite("cascade features".into()));
    }
    let (c, h, w) = (features.channels(), features.height(), features.width());
    check_guide(priors, h, w)?;
    let mut x = features.data().to_vec();
    for layer in &config.layers {
        let guide = (layer.kind == LayerKind::GeometryGuided).then(|| (priors.d_coarse.data(), priors.flow.data()));
        x = block_raw(c, h, w, &x, &layer.params, layer.kernels.weights(), guide);
    }
    let delta = refiner_raw(c, h, w, &x, &config.refiner);
    let features = FeatureMap::new(c, h, w, x)?;
    let delta_d = ScalarField::new(h, w, delta)?;
    Ok(CascadeOutput { features, delta_d, madds: cascade_madds(config, h, w) })
}
