//! Grid containers and the stencil, morphology and distance primitives the
//! geometric priors are assembled from.
//!
//! All grids are row-major. Multi-channel grids are channel-major: plane `c`
//! occupies `data[c * h * w..(c + 1) * h * w]`.

mod distance;
mod morphology;
mod stencil;

pub use distance::{distance_transform, squared_distance_transform};
pub use morphology::{connected_components, morphological_gradient};
pub use stencil::{
    box_blur3x3, conv1x1_backward, conv1x1_raw, conv3x3_backward, conv3x3_raw, depthwise_conv3x3,
    depthwise_conv3x3_backward, depthwise_conv3x3_raw, laplacian, sobel_gradient, DepthwiseKernels,
};

use crate::error::{mismatch, DgmError, Result};

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DgmError::NonFinite(what.to_string()))
    }
}

/// Clamps a signed index into `0..n` (replicate padding).
#[inline]
pub(crate) fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// An H×W grid of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(mismatch(format!("{} values for {height}x{width}", height * width), data.len()));
        }
        check_finite("scalar field", &data)?;
        Ok(Self { height, width, data })
    }

    /// Caller guarantees length and finiteness.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self::from_raw(height, width, vec![value; height * width])
    }

    /// Builds a field by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() == (height, width) {
            Ok(())
        } else {
            Err(mismatch(format!("{height}x{width}"), format!("{}x{}", self.height, self.width)))
        }
    }
}

/// A 2×H×W vector field stored as a y-component plane followed by an
/// x-component plane.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl VectorField2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(mismatch(format!("{} values for 2x{height}x{width}", 2 * height * width), data.len()));
        }
        check_finite("vector field", &data)?;
        Ok(Self { height, width, data })
    }

    pub fn from_planes(y: &ScalarField, x: &ScalarField) -> Result<Self> {
        y.ensure_dims(x.height, x.width)?;
        let mut data = y.data.clone();
        data.extend_from_slice(&x.data);
        Ok(Self::from_raw(y.height, y.width, data))
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 2 * height * width);
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0.0; 2 * height * width])
    }

    /// A field holding the same vector `(vy, vx)` at every pixel.
    pub fn constant(height: usize, width: usize, vy: f64, vx: f64) -> Self {
        let n = height * width;
        let mut data = vec![vy; n];
        data.extend(std::iter::repeat_n(vx, n));
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn y_plane(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn x_plane(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }

    /// The `(y, x)` components at a pixel.
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    /// Largest per-pixel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let (vy, vx) = (self.y_plane(), self.x_plane());
        vy.iter().zip(vx).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() == (height, width) {
            Ok(())
        } else {
            Err(mismatch(format!("{height}x{width}"), format!("{}x{}", self.height, self.width)))
        }
    }
}

/// A C×H×W feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = channels * height * width;
        if data.len() != n {
            return Err(mismatch(format!("{n} values for {channels}x{height}x{width}"), data.len()));
        }
        check_finite("feature map", &data)?;
        Ok(Self { channels, height, width, data })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(channels, height, width, vec![0.0; channels * height * width])
    }

    /// Stacks scalar planes into a feature map.
    pub fn from_planes(planes: &[ScalarField]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| DgmError::EmptyInput("no planes".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            p.ensure_dims(h, w)?;
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_raw(planes.len(), h, w, data))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() == (height, width) {
            Ok(())
        } else {
            Err(mismatch(format!("{height}x{width}"), format!("{}x{}", self.height, self.width)))
        }
    }
}

/// An H×W grid of non-negative integer labels. Label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(mismatch(format!("{} labels for {height}x{width}", height * width), labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self { height, width, labels }
    }

    /// Parses rows of equal length, e.g. `&[&[0, 1], &[1, 1]]`.
    pub fn from_rows(rows: &[&[u16]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(mismatch("rows of equal length", "ragged rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Checks every label is below `count` (or equal to `ignore`).
    pub fn ensure_bounded(&self, count: usize, ignore: Option<u16>) -> Result<()> {
        match self.labels.iter().find(|&&l| Some(l) != ignore && l as usize >= count) {
            Some(l) => Err(DgmError::OutOfRange(format!("label {l} with {count} classes"))),
            None => Ok(()),
        }
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() == (height, width) {
            Ok(())
        } else {
            Err(mismatch(format!("{height}x{width}"), format!("{}x{}", self.height, self.width)))
        }
    }
}
