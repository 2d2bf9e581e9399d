//! 3×3 stencils with replicate padding.

use super::{clamp_index, FeatureMap, ScalarField, VectorField2};
use crate::error::{mismatch, DgmError, Result};

fn require_kernel_fit(height: usize, width: usize) -> Result<()> {
    if height < 3 || width < 3 {
        Err(DgmError::TooSmall { height, width, min: 3 })
    } else {
        Ok(())
    }
}

/// Cross-correlates one plane with a 3×3 kernel (row-major taps).
fn correlate(plane: &[f64], h: usize, w: usize, kernel: &[f64], out: &mut [f64]) {
    for y in 0..h {
        let rows = [clamp_index(y as isize - 1, h), y, clamp_index(y as isize + 1, h)];
        for x in 0..w {
            let cols = [clamp_index(x as isize - 1, w), x, clamp_index(x as isize + 1, w)];
            let mut acc = 0.0;
            for (ky, &sy) in rows.iter().enumerate() {
                for (kx, &sx) in cols.iter().enumerate() {
                    acc += kernel[ky * 3 + kx] * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
}

/// Sobel derivatives scaled by 1/8, so a ramp of slope `a` reports `a`.
/// Returns `(d/dy, d/dx)` planes.
pub fn sobel_gradient(field: &ScalarField) -> Result<VectorField2> {
    let (h, w) = field.dims();
    require_kernel_fit(h, w)?;
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    let p = field.data();
    // Difference form: equal neighbours cancel exactly, so constant fields
    // give exact zeros.
    for y in 0..h {
        let (ym, yp) = (clamp_index(y as isize - 1, h), clamp_index(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp_index(x as isize - 1, w), clamp_index(x as isize + 1, w));
            let at = |r: usize, c: usize| p[r * w + c];
            let dy = (at(yp, xm) - at(ym, xm)) + 2.0 * (at(yp, x) - at(ym, x)) + (at(yp, xp) - at(ym, xp));
            let dx = (at(ym, xp) - at(ym, xm)) + 2.0 * (at(y, xp) - at(y, xm)) + (at(yp, xp) - at(yp, xm));
            data[y * w + x] = 0.125 * dy;
            data[n + y * w + x] = 0.125 * dx;
        }
    }
    Ok(VectorField2::from_raw(h, w, data))
}

/// Four-neighbour Laplacian `[0,1,0; 1,-4,1; 0,1,0]`.
pub fn laplacian(field: &ScalarField) -> Result<ScalarField> {
    let (h, w) = field.dims();
    require_kernel_fit(h, w)?;
    let p = field.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (ym, yp) = (clamp_index(y as isize - 1, h), clamp_index(y as isize + 1, h));
        for x in 0..w {
            let (xm, xp) = (clamp_index(x as isize - 1, w), clamp_index(x as isize + 1, w));
            let c = p[y * w + x];
            out[y * w + x] = (p[ym * w + x] - c) + (p[yp * w + x] - c) + (p[y * w + xm] - c) + (p[y * w + xp] - c);
        }
    }
    Ok(ScalarField::from_raw(h, w, out))
}

/// One pass of 3×3 box averaging.
pub fn box_blur3x3(field: &ScalarField) -> ScalarField {
    let (h, w) = field.dims();
    if h == 0 || w == 0 {
        return field.clone();
    }
    let mut sum = vec![0.0; h * w];
    correlate(field.data(), h, w, &[1.0; 9], &mut sum);
    ScalarField::from_raw(h, w, sum.into_iter().map(|s| s / 9.0).collect())
}

/// Per-channel 3×3 kernels, row-major taps, `9 * channels` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernels {
    weights: Vec<f64>,
}

impl DepthwiseKernels {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if !weights.len().is_multiple_of(9) {
            return Err(mismatch("a multiple of 9 weights", weights.len()));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(DgmError::NonFinite("depthwise kernels".into()));
        }
        Ok(Self { weights })
    }

    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![0.0; 9 * channels];
        for c in 0..channels {
            weights[9 * c + 4] = 1.0;
        }
        Self { weights }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { weights: vec![0.0; 9 * channels] }
    }

    pub fn channels(&self) -> usize {
        self.weights.len() / 9
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Raw depthwise convolution over a channel-major buffer.
pub fn depthwise_conv3x3_raw(c: usize, h: usize, w: usize, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        correlate(&input[ch * n..(ch + 1) * n], h, w, &kernels[9 * ch..9 * ch + 9], &mut out[ch * n..(ch + 1) * n]);
    }
    out
}

/// Per-channel 3×3 convolution, no cross-channel mixing.
pub fn depthwise_conv3x3(features: &FeatureMap, kernels: &DepthwiseKernels) -> Result<FeatureMap> {
    if kernels.channels() != features.channels() {
        return Err(mismatch(format!("{} kernels", features.channels()), kernels.channels()));
    }
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if h == 0 || w == 0 {
        return Ok(features.clone());
    }
    let out = depthwise_conv3x3_raw(c, h, w, features.data(), kernels.weights());
    Ok(FeatureMap::from_raw(c, h, w, out))
}

/// Vector-Jacobian product of [`depthwise_conv3x3_raw`]: returns the
/// gradients with respect to the input and the kernels.
pub fn depthwise_conv3x3_backward(
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut g_in = vec![0.0; c * n];
    let mut g_k = vec![0.0; 9 * c];
    for ch in 0..c {
        let plane = &input[ch * n..(ch + 1) * n];
        let go = &grad_out[ch * n..(ch + 1) * n];
        let k = &kernels[9 * ch..9 * ch + 9];
        let gi = &mut g_in[ch * n..(ch + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let g = go[y * w + x];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..3 {
                    let sy = clamp_index(y as isize + ky as isize - 1, h);
                    for kx in 0..3 {
                        let sx = clamp_index(x as isize + kx as isize - 1, w);
                        g_k[9 * ch + ky * 3 + kx] += g * plane[sy * w + sx];
                        gi[sy * w + sx] += g * k[ky * 3 + kx];
                    }
                }
            }
        }
    }
    (g_in, g_k)
}

/// Dense 3×3 convolution from `cin` to `cout` channels with replicate
/// padding. `weights` is `cout × cin × 9`, `bias` has `cout` entries.
pub fn conv3x3_raw(
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; cout * n];
    let mut tmp = vec![0.0; n];
    for o in 0..cout {
        let plane_out = &mut out[o * n..(o + 1) * n];
        plane_out.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let k = &weights[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            correlate(&input[i * n..(i + 1) * n], h, w, k, &mut tmp);
            for (a, b) in plane_out.iter_mut().zip(&tmp) {
                *a += b;
            }
        }
    }
    out
}

/// Gradients of [`conv3x3_raw`] with respect to input, weights and bias.
pub fn conv3x3_backward(
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut g_in = vec![0.0; cin * n];
    let mut g_w = vec![0.0; cout * cin * 9];
    let mut g_b = vec![0.0; cout];
    for o in 0..cout {
        let go = &grad_out[o * n..(o + 1) * n];
        g_b[o] = go.iter().sum();
        for i in 0..cin {
            let (gi, gk) = depthwise_conv3x3_backward(
                1,
                h,
                w,
                &input[i * n..(i + 1) * n],
                &weights[(o * cin + i) * 9..(o * cin + i) * 9 + 9],
                go,
            );
            for (a, b) in g_in[i * n..(i + 1) * n].iter_mut().zip(gi) {
                *a += b;
            }
            for (a, b) in g_w[(o * cin + i) * 9..(o * cin + i) * 9 + 9].iter_mut().zip(gk) {
                *a += b;
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Pointwise channel mixing: `out[o] = bias[o] + Σ_i weights[o·cin + i]·in[i]`.
pub fn conv1x1_raw(cin: usize, cout: usize, n: usize, input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let plane_out = &mut out[o * n..(o + 1) * n];
        plane_out.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let wgt = weights[o * cin + i];
            for (a, b) in plane_out.iter_mut().zip(&input[i * n..(i + 1) * n]) {
                *a += wgt * b;
            }
        }
    }
    out
}

/// Gradients of [`conv1x1_raw`] with respect to input, weights and bias.
pub fn conv1x1_backward(
    cin: usize,
    cout: usize,
    n: usize,
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g_in = vec![0.0; cin * n];
    let mut g_w = vec![0.0; cout * cin];
    let mut g_b = vec![0.0; cout];
    for o in 0..cout {
        let go = &grad_out[o * n..(o + 1) * n];
        g_b[o] = go.iter().sum();
        for i in 0..cin {
            let plane = &input[i * n..(i + 1) * n];
            g_w[o * cin + i] = go.iter().zip(plane).map(|(a, b)| a * b).sum();
            let wgt = weights[o * cin + i];
            for (a, b) in g_in[i * n..(i + 1) * n].iter_mut().zip(go) {
                *a += wgt * b;
            }
        }
    }
    (g_in, g_w, g_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_on_ramp_reports_slope() {
        let f = ScalarField::from_fn(5, 6, |_, x| 0.25 * x as f64).unwrap();
        let g = sobel_gradient(&f).unwrap();
        for y in 1..4 {
            for x in 1..5 {
                assert_eq!(g.get(y, x), (0.0, 0.25));
            }
        }
    }

    #[test]
    fn sobel_constant_and_impulse() {
        let c = ScalarField::filled(4, 4, 3.0);
        assert!(sobel_gradient(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let imp = ScalarField::from_fn(3, 3, |y, x| f64::from(y == 1 && x == 1)).unwrap();
        assert_eq!(sobel_gradient(&imp).unwrap().get(1, 1), (0.0, 0.0));
    }

    #[test]
    fn small_fields_are_rejected() {
        let f = ScalarField::zeros(2, 5);
        assert!(matches!(sobel_gradient(&f), Err(DgmError::TooSmall { .. })));
        assert!(matches!(laplacian(&f), Err(DgmError::TooSmall { .. })));
    }

    #[test]
    fn laplacian_examples() {
        let q = ScalarField::from_fn(5, 7, |_, x| (x * x) as f64 / 8.0).unwrap();
        let l = laplacian(&q).unwrap();
        for y in 0..5 {
            for x in 1..6 {
                assert_eq!(l.get(y, x), 0.25);
            }
        }
        let imp = ScalarField::from_fn(5, 5, |y, x| f64::from(y == 2 && x == 2)).unwrap();
        let l = laplacian(&imp).unwrap();
        assert_eq!(l.get(2, 2), -4.0);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(l.get(y, x), 1.0);
        }
        assert_eq!(l.get(0, 0), 0.0);
        assert!(laplacian(&ScalarField::filled(4, 4, 2.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_field_gives_exact_gradient_everywhere_inside() {
        // a·x + b·y + c with dyadic coefficients.
        let (a, b, c) = (0.75, -1.5, 3.0);
        let f = ScalarField::from_fn(6, 7, |y, x| a * x as f64 + b * y as f64 + c).unwrap();
        let g = sobel_gradient(&f).unwrap();
        for y in 1..5 {
            for x in 1..6 {
                assert_eq!(g.get(y, x), (b, a));
            }
        }
    }

    #[test]
    fn depthwise_examples() {
        let f = FeatureMap::new(2, 3, 3, (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(depthwise_conv3x3(&f, &DepthwiseKernels::identity(2)).unwrap(), f);
        let z = depthwise_conv3x3(&f, &DepthwiseKernels::zeros(2)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let two = FeatureMap::new(1, 3, 3, vec![2.0; 9]).unwrap();
        let ones = DepthwiseKernels::new(vec![1.0; 9]).unwrap();
        assert_eq!(depthwise_conv3x3(&two, &ones).unwrap().get(0, 1, 1), 18.0);

        assert!(depthwise_conv3x3(&f, &DepthwiseKernels::identity(3)).is_err());
    }

    #[test]
    fn box_blur_of_thin_band() {
        let f = ScalarField::new(1, 7, vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = box_blur3x3(&f);
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (v, e) in b.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn linearity_on_integer_fields() {
        let f = ScalarField::from_fn(5, 5, |y, x| ((y * 7 + x * 3) % 5) as f64).unwrap();
        let g = ScalarField::from_fn(5, 5, |y, x| ((y * y + 2 * x) % 7) as f64 - 3.0).unwrap();
        let (alpha, beta) = (3.0, -2.0);
        let comb = ScalarField::from_fn(5, 5, |y, x| alpha * f.get(y, x) + beta * g.get(y, x)).unwrap();
        let (lf, lg, lc) = (laplacian(&f).unwrap(), laplacian(&g).unwrap(), laplacian(&comb).unwrap());
        for i in 0..25 {
            assert_eq!(lc.data()[i], alpha * lf.data()[i] + beta * lg.data()[i]);
        }
        let (sf, sg, sc) = (sobel_gradient(&f).unwrap(), sobel_gradient(&g).unwrap(), sobel_gradient(&comb).unwrap());
        for i in 0..50 {
            assert_eq!(sc.data()[i], alpha * sf.data()[i] + beta * sg.data()[i]);
        }
    }
}
