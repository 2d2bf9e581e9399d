//! Offset-aligned decoding: a bounded, geometry-derived offset field shifts a
//! corner-aligned sampling grid, low-level features are bilinearly warped
//! along it, and the upsampled stream is gated by the refined boundary map.

use crate::error::{mismatch, DgmError, Result};
use crate::fields::{conv3x3_raw, FeatureMap, ScalarField, VectorField2};
use crate::gmamba::math::logistic;
use crate::rng::{uniform_vec, DgmRng};

/// Upper bound of the offset scale.
pub const ALPHA_MAX: f64 = 0.2;

/// Sampling positions within this many pixels of a lattice point are
/// snapped onto it, so the base grid reproduces the source exactly.
const LATTICE_SNAP: f64 = 1e-9;

/// Normalised `(y, x)` sampling coordinates in `[-1, 1]`, stored as a
/// y plane followed by an x plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SamplingGrid {
    /// Corner-aligned identity grid: pixel `(i, j)` maps to
    /// `(-1 + 2i/(H-1), -1 + 2j/(W-1))`.
    pub fn base(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(DgmError::TooSmall { height, width, min: 2 });
        }
        let n = height * width;
        let mut data = vec![0.0; 2 * n];
        for i in 0..height {
            for j in 0..width {
                data[i * width + j] = -1.0 + 2.0 * i as f64 / (height - 1) as f64;
                data[n + i * width + j] = -1.0 + 2.0 * j as f64 / (width - 1) as f64;
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(mismatch(2 * height * width, data.len()));
        }
        if !data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            return Err(DgmError::OutOfRange("grid coordinates must lie in [-1, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }
}

/// Weights of the shallow flow-to-scale convolution: 2 input channels,
/// 3×3 taps each, one bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PsiWeights {
    pub fn zeros() -> Self {
        Self { weights: vec![0.0; 18], bias: 0.0 }
    }

    pub fn init(rng: &mut DgmRng) -> Self {
        let a = 1.0 / 18f64.sqrt();
        Self { weights: uniform_vec(rng, 18, -a, a), bias: 0.0 }
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != 18 {
            return Err(mismatch("18 psi weights", self.weights.len()));
        }
        Ok(())
    }
}

pub(crate) fn psi_raw(h: usize, w: usize, flow: &[f64], psi: &[f64], bias: f64) -> Vec<f64> {
    conv3x3_raw(2, 1, h, w, flow, psi, &[bias])
}

/// `α = 0.2 · σ(ψ(Φ))`.
pub fn compute_alpha(flow: &VectorField2, psi: &PsiWeights) -> Result<ScalarField> {
    psi.check()?;
    let (h, w) = flow.dims();
    let z = psi_raw(h, w, flow.data(), &psi.weights, psi.bias);
    Ok(ScalarField::from_raw(h, w, z.into_iter().map(|v| ALPHA_MAX * logistic(v)).collect()))
}

/// `Δ = Φ ⊙ D_final ⊙ α`, channelwise.
pub fn offset_field(flow: &VectorField2, d_final: &ScalarField, alpha: &ScalarField) -> Result<VectorField2> {
    let (h, w) = flow.dims();
    d_final.ensure_dims(h, w)?;
    alpha.ensure_dims(h, w)?;
    let n = h * w;
    let data = flow.data().iter().enumerate().map(|(i, &f)| f * d_final.data()[i % n] * alpha.data()[i % n]).collect();
    Ok(VectorField2::from_raw(h, w, data))
}

/// `clip(base + Δ, -1, 1)`.
pub fn align_grid(base: &SamplingGrid, delta: &VectorField2) -> Result<SamplingGrid> {
    delta.ensure_dims(base.height, base.width)?;
    let data = base.data.iter().zip(delta.data()).map(|(g, d)| (g + d).clamp(-1.0, 1.0)).collect();
    Ok(SamplingGrid { height: base.height, width: base.width, data })
}

/// Source-pixel position along one axis: lower index, upper index and the
/// fractional weight of the upper one.
#[inline]
fn axis(g: f64, len: usize) -> (usize, usize, f64) {
    let mut s = (g + 1.0) * 0.5 * (len - 1) as f64;
    let r = s.round();
    if (s - r).abs() <= LATTICE_SNAP {
        s = r;
    }
    let s = s.clamp(0.0, (len - 1) as f64);
    let lo = (s.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, s - lo as f64)
}

/// The four `(source index, weight)` pairs used for a grid point.
pub fn bilinear_weights(gy: f64, gx: f64, height: usize, width: usize) -> [(usize, f64); 4] {
    let (y0, y1, wy) = axis(gy, height);
    let (x0, x1, wx) = axis(gx, width);
    [
        (y0 * width + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * width + x1, (1.0 - wy) * wx),
        (y1 * width + x0, wy * (1.0 - wx)),
        (y1 * width + x1, wy * wx),
    ]
}

pub(crate) fn grid_sample_raw(
    c: usize,
    hs: usize,
    ws: usize,
    source: &[f64],
    hg: usize,
    wg: usize,
    grid: &[f64],
) -> Vec<f64> {
    let ns = hs * ws;
    let ng = hg * wg;
    let mut out = vec![0.0; c * ng];
    for p in 0..ng {
        let (y0, y1, wy) = axis(grid[p], hs);
        let (x0, x1, wx) = axis(grid[ng + p], ws);
        for ch in 0..c {
            let f = &source[ch * ns..(ch + 1) * ns];
            out[ch * ng + p] = if wy == 0.0 && wx == 0.0 {
                f[y0 * ws + x0]
            } else {
                (1.0 - wy) * (1.0 - wx) * f[y0 * ws + x0]
                    + (1.0 - wy) * wx * f[y0 * ws + x1]
                    + wy * (1.0 - wx) * f[y1 * ws + x0]
                    + wy * wx * f[y1 * ws + x1]
            };
        }
    }
    out
}

/// Gradients of [`grid_sample_raw`] with respect to the source values and
/// the normalised grid coordinates.
pub(crate) fn grid_sample_backward(
    c: usize,
    hs: usize,
    ws: usize,
    source: &[f64],
    hg: usize,
    wg: usize,
    grid: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ns = hs * ws;
    let ng = hg * wg;
    let mut g_src = vec![0.0; c * ns];
    let mut g_grid = vec![0.0; 2 * ng];
    let sy_scale = 0.5 * (hs - 1) as f64;
    let sx_scale = 0.5 * (ws - 1) as f64;
    for p in 0..ng {
        let (y0, y1, wy) = axis(grid[p], hs);
        let (x0, x1, wx) = axis(grid[ng + p], ws);
        let (mut gy, mut gx) = (0.0, 0.0);
        for ch in 0..c {
            let g = grad_out[ch * ng + p];
            let f = &source[ch * ns..(ch + 1) * ns];
            let gs = &mut g_src[ch * ns..(ch + 1) * ns];
            let (f00, f01, f10, f11) = (f[y0 * ws + x0], f[y0 * ws + x1], f[y1 * ws + x0], f[y1 * ws + x1]);
            gs[y0 * ws + x0] += g * (1.0 - wy) * (1.0 - wx);
            gs[y0 * ws + x1] += g * (1.0 - wy) * wx;
            gs[y1 * ws + x0] += g * wy * (1.0 - wx);
            gs[y1 * ws + x1] += g * wy * wx;
            gy += g * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
            gx += g * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
        }
        g_grid[p] = gy * sy_scale;
        g_grid[ng + p] = gx * sx_scale;
    }
    (g_src, g_grid)
}

/// Bilinear sampling of `source` at every grid point (corner-aligned).
pub fn grid_sample(source: &FeatureMap, grid: &SamplingGrid) -> Result<FeatureMap> {
    let (hs, ws) = source.dims();
    if hs < 2 || ws < 2 {
        return Err(DgmError::TooSmall { height: hs, width: ws, min: 2 });
    }
    let out = grid_sample_raw(source.channels(), hs, ws, source.data(), grid.height, grid.width, &grid.data);
    Ok(FeatureMap::from_raw(source.channels(), grid.height, grid.width, out))
}

pub(crate) fn gate_raw(c: usize, f_up: &[f64], d_final: &[f64]) -> Vec<f64> {
    let n = d_final.len();
    (0..c * n).map(|i| f_up[i] * (1.0 + d_final[i % n])).collect()
}

/// `F_up + F_up ⊙ D_final`.
pub fn spatial_gate(f_up: &FeatureMap, d_final: &ScalarField) -> Result<FeatureMap> {
    d_final.ensure_dims(f_up.height(), f_up.width())?;
    let (c, h, w) = (f_up.channels(), f_up.height(), f_up.width());
    Ok(FeatureMap::from_raw(c, h, w, gate_raw(c, f_up.data(), d_final.data())))
}

/// Nearest-neighbour upsampling to `height × width`.
pub fn upsample_nearest(f: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let mut data = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let sy = y * h / height;
            for x in 0..width {
                data.push(f.get(ch, sy, x * w / width));
            }
        }
    }
    FeatureMap::from_raw(c, height, width, data)
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    b.ensure_dims(a.height(), a.width())?;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(FeatureMap::from_raw(a.channels() + b.channels(), a.height(), a.width(), data))
}

/// Full decoder step: scale, offsets, aligned grid, warp of `f_low`, gate of
/// `f_up`, and concatenation `[gated f_up; warped f_low]`. Both streams must
/// already share a resolution.
pub fn goad_forward(
    f_low: &FeatureMap,
    f_up: &FeatureMap,
    flow: &VectorField2,
    d_final: &ScalarField,
    psi: &PsiWeights,
) -> Result<FeatureMap> {
    let (h, w) = f_low.dims();
    f_up.ensure_dims(h, w)?;
    flow.ensure_dims(h, w)?;
    let alpha = compute_alpha(flow, psi)?;
    let delta = offset_field(flow, d_final, &alpha)?;
    let grid = align_grid(&SamplingGrid::base(h, w)?, &delta)?;
    let warped = grid_sample(f_low, &grid)?;
    let gated = spatial_gate(f_up, d_final)?;
    concat_channels(&gated, &warped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn alpha_examples() {
        let flow = VectorField2::constant(3, 3, 0.3, -0.7);
        let a = compute_alpha(&flow, &PsiWeights::zeros()).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.1));
        let big = PsiWeights { weights: vec![100.0; 18], bias: 0.0 };
        let up = compute_alpha(&VectorField2::constant(3, 3, 1.0, 1.0), &big).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let down = compute_alpha(&VectorField2::constant(3, 3, -1.0, -1.0), &big).unwrap();
        assert!(down.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn offset_examples() {
        let flow = VectorField2::constant(2, 2, 0.0, 1.0);
        let d = ScalarField::filled(2, 2, 1.0);
        let a = ScalarField::filled(2, 2, 0.1);
        let o = offset_field(&flow, &d, &a).unwrap();
        assert_eq!(o.get(1, 1), (0.0, 0.1));
        let zero = offset_field(&flow, &ScalarField::zeros(2, 2), &a).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let zero = offset_field(&flow, &d, &ScalarField::zeros(2, 2)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_examples() {
        let base = SamplingGrid::base(3, 3).unwrap();
        assert_eq!(align_grid(&base, &VectorField2::zeros(3, 3)).unwrap(), base);
        let mut d = vec![0.0; 18];
        d[0] = -0.5;
        d[9] = -0.5;
        d[4] = 0.1;
        d[13] = -0.1;
        let g = align_grid(&base, &VectorField2::new(3, 3, d).unwrap()).unwrap();
        assert_eq!(g.get(0, 0), (-1.0, -1.0));
        assert_eq!(g.get(1, 1), (0.1, -0.1));
    }

    #[test]
    fn base_grid_maps_corners() {
        let g = SamplingGrid::base(4, 5).unwrap();
        assert_eq!(g.get(0, 0), (-1.0, -1.0));
        assert_eq!(g.get(3, 4), (1.0, 1.0));
        assert!(SamplingGrid::base(1, 5).is_err());
    }

    #[test]
    fn sample_examples() {
        let src = FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let centre = SamplingGrid::new(1, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(grid_sample(&src, &centre).unwrap().data(), &[1.5]);

        let mut rng = seeded(3);
        let f = FeatureMap::new(3, 7, 6, uniform_vec(&mut rng, 126, -2.0, 2.0)).unwrap();
        assert_eq!(grid_sample(&f, &SamplingGrid::base(7, 6).unwrap()).unwrap(), f);

        let c = FeatureMap::new(1, 3, 3, vec![0.7; 9]).unwrap();
        let g = SamplingGrid::new(1, 2, vec![0.3, -0.9, 0.11, 0.77]).unwrap();
        assert!(grid_sample(&c, &g).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn gate_examples() {
        let f = FeatureMap::new(2, 1, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(spatial_gate(&f, &ScalarField::zeros(1, 2)).unwrap(), f);
        let g = spatial_gate(&f, &ScalarField::filled(1, 2, 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, -2.0, 4.0, 0.0]);
        let z = FeatureMap::zeros(2, 1, 2);
        assert_eq!(spatial_gate(&z, &ScalarField::filled(1, 2, 0.4)).unwrap(), z);
    }

    #[test]
    fn goad_identity_and_zero() {
        let mut rng = seeded(5);
        let low = FeatureMap::new(2, 4, 5, uniform_vec(&mut rng, 40, -1.0, 1.0)).unwrap();
        let up = FeatureMap::new(3, 4, 5, uniform_vec(&mut rng, 60, -1.0, 1.0)).unwrap();
        let flow = VectorField2::zeros(4, 5);
        let out = goad_forward(&low, &up, &flow, &ScalarField::zeros(4, 5), &PsiWeights::init(&mut rng)).unwrap();
        assert_eq!(out, concat_channels(&up, &low).unwrap());

        let flow = VectorField2::constant(4, 5, 0.6, 0.8);
        let z = goad_forward(
            &FeatureMap::zeros(2, 4, 5),
            &FeatureMap::zeros(3, 4, 5),
            &flow,
            &ScalarField::filled(4, 5, 0.7),
            &PsiWeights::init(&mut rng),
        )
        .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_nearest_doubles() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample_nearest(&f, 4, 4);
        assert_eq!(u.channel(0)[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(u.get(0, 3, 3), 4.0);
    }

    proptest! {
        #[test]
        fn weights_partition_unity_and_output_is_convex(
            gy in -1.0f64..=1.0, gx in -1.0f64..=1.0, h in 2usize..9, w in 2usize..9,
            vals in proptest::collection::vec(-5.0f64..5.0, 64),
        ) {
            let wsum: f64 = bilinear_weights(gy, gx, h, w).iter().map(|p| p.1).sum();
            prop_assert!((wsum - 1.0).abs() <= 1e-15);
            let src = FeatureMap::new(1, h, w, vals[..h * w].to_vec()).unwrap();
            let g = SamplingGrid::new(1, 1, vec![gy, gx]).unwrap();
            let v = grid_sample(&src, &g).unwrap().data()[0];
            let (lo, hi) = vals[..h * w].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn offsets_are_bounded(
            fy in -1.0f64..1.0, fx in -1.0f64..1.0, d in 0.0f64..1.0, z in -50.0f64..50.0,
        ) {
            let scale = fy.hypot(fx).max(1.0);
            let flow = VectorField2::constant(3, 3, fy / scale, fx / scale);
            let psi = PsiWeights { weights: vec![0.0; 18], bias: z };
            let a = compute_alpha(&flow, &psi).unwrap();
            prop_assert!(a.data().iter().all(|&v| (0.0..=ALPHA_MAX).contains(&v)));
            let o = offset_field(&flow, &ScalarField::filled(3, 3, d), &a).unwrap();
            prop_assert!(o.data().iter().all(|v| v.abs() <= ALPHA_MAX));
        }

        #[test]
        fn gate_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, d in 0.0f64..1.0) {
            let dm = ScalarField::filled(1, 1, d);
            let one = |v: f64| spatial_gate(&FeatureMap::new(1, 1, 1, vec![v]).unwrap(), &dm).unwrap().data()[0];
            prop_assert!((one(a + b) - (one(a) + one(b))).abs() <= 1e-14);
        }
    }
}
