//! The composite training objective.
//!
//! ```text
//! total = seg + γ_geo(t)·(vg + d) + 0.4·aux
//! seg   = ce_ohem + 0.8·lovasz + 0.1·boundary
//! vg    = mse(V) + mse(Φ) + mse(C) + 0.5·tv(Φ̂)
//! γ_geo = 2.0·(1 - t) + 0.2
//! ```
//!
//! Every loss has a `*_with_grad` form returning the value and its gradient
//! with respect to the real-valued inputs; the plain forms return the value.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, DgmError, Result};
use crate::fields::{LabelMask, ScalarField, VectorField2};
use crate::priors::GeometricPriors;

/// Pixels with this label are excluded from every loss and metric.
pub const IGNORE_LABEL: u16 = 255;
/// Probabilities below this are clamped inside `-ln p`.
pub const PROB_FLOOR: f64 = 1e-12;
/// Clamp applied to boundary predictions in the weighted BCE.
pub const BCE_EPS: f64 = 1e-7;

pub const LOVASZ_WEIGHT: f64 = 0.8;
pub const BOUNDARY_WEIGHT: f64 = 0.1;
pub const AUX_WEIGHT: f64 = 0.4;
pub const TV_WEIGHT: f64 = 0.5;

/// Per-pixel class probabilities, `K×H×W` channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Probabilities {
    /// Validates that each pixel's probabilities lie in `[0, 1]` and sum to
    /// 1 within `1e-9`.
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if data.len() != classes * n {
            return Err(mismatch(classes * n, data.len()));
        }
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                let p = data[c * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(DgmError::OutOfRange(format!("probability {p} at pixel {i}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DgmError::OutOfRange(format!("probabilities at pixel {i} sum to {sum}")));
            }
        }
        Ok(Self { classes, height, width, data })
    }

    /// No simplex check; gradient checks perturb single entries.
    pub(crate) fn unchecked(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), classes * height * width);
        Self { classes, height, width, data }
    }

    /// Softmax over the class axis of `K×H×W` logits.
    pub fn from_logits(classes: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != classes * height * width {
            return Err(mismatch(classes * height * width, logits.len()));
        }
        Ok(Self { classes, height, width, data: softmax_raw(classes, height * width, logits) })
    }

    /// One-hot probabilities for a label mask.
    pub fn one_hot(labels: &LabelMask, classes: usize) -> Result<Self> {
        labels.ensure_bounded(classes, None)?;
        let n = labels.labels().len();
        let mut data = vec![0.0; classes * n];
        for (i, &l) in labels.labels().iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Ok(Self { classes, height: labels.height(), width: labels.width(), data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.height * self.width + pixel]
    }

    /// Per-pixel argmax, ties to the lower class.
    pub fn argmax(&self) -> LabelMask {
        let n = self.height * self.width;
        let labels = (0..n)
            .map(|i| {
                (0..self.classes)
                    .fold((0usize, f64::NEG_INFINITY), |best, c| {
                        let p = self.data[c * n + i];
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    })
                    .0 as u16
            })
            .collect();
        LabelMask::new(self.height, self.width, labels).expect("matching dims")
    }
}

pub(crate) fn softmax_raw(k: usize, n: usize, logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..n {
        let m = (0..k).map(|c| logits[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (logits[c * n + i] - m).exp();
            out[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + i] /= z;
        }
    }
    out
}

pub(crate) fn softmax_backward(k: usize, n: usize, probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; k * n];
    for i in 0..n {
        let dot: f64 = (0..k).map(|c| probs[c * n + i] * grad_out[c * n + i]).sum();
        for c in 0..k {
            g[c * n + i] = probs[c * n + i] * (grad_out[c * n + i] - dot);
        }
    }
    g
}

/// Valid (non-ignored) pixels with their labels.
fn valid_pixels(probs: &Probabilities, labels: &LabelMask) -> Result<Vec<(usize, usize)>> {
    let (h, w) = probs.dims();
    labels.ensure_dims(h, w)?;
    labels.ensure_bounded(probs.classes, Some(IGNORE_LABEL))?;
    let valid: Vec<(usize, usize)> =
        labels.labels().iter().enumerate().filter(|(_, &l)| l != IGNORE_LABEL).map(|(i, &l)| (i, l as usize)).collect();
    if valid.is_empty() {
        return Err(DgmError::UndefinedLoss("every pixel is ignored".into()));
    }
    Ok(valid)
}

/// `-ln p` with its derivative, clamped at [`PROB_FLOOR`].
#[inline]
fn nll(p: f64) -> (f64, f64) {
    if p > PROB_FLOOR {
        (-p.ln(), -1.0 / p)
    } else {
        (-PROB_FLOOR.ln(), 0.0)
    }
}

/// Mean cross-entropy over the hardest pixels: those whose true-class
/// probability is below `threshold`, or the `⌈min_kept_fraction·N⌉`
/// lowest-confidence pixels if fewer qualify (ties by row-major order).
pub fn ce_ohem_with_grad(
    probs: &Probabilities,
    labels: &LabelMask,
    threshold: f64,
    min_kept_fraction: f64,
) -> Result<(f64, Vec<f64>)> {
    let valid = valid_pixels(probs, labels)?;
    let n = probs.height * probs.width;
    let p_true: Vec<f64> = valid.iter().map(|&(i, l)| probs.get(l, i)).collect();
    let min_kept = ((min_kept_fraction * valid.len() as f64).ceil() as usize).clamp(1, valid.len());
    let mut kept: Vec<usize> = (0..valid.len()).filter(|&j| p_true[j] < threshold).collect();
    if kept.len() < min_kept {
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| p_true[a].total_cmp(&p_true[b]).then(a.cmp(&b)));
        order.truncate(min_kept);
        order.sort_unstable();
        kept = order;
    }
    let scale = 1.0 / kept.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.classes * n];
    for &j in &kept {
        let (i, l) = valid[j];
        let (v, d) = nll(p_true[j]);
        loss += v;
        grad[l * n + i] += d * scale;
    }
    Ok((loss * scale, grad))
}

pub fn ce_ohem(probs: &Probabilities, labels: &LabelMask, threshold: f64, min_kept_fraction: f64) -> Result<f64> {
    Ok(ce_ohem_with_grad(probs, labels, threshold, min_kept_fraction)?.0)
}

/// Gradient of the Lovász extension of the Jaccard loss at sorted ground
/// truth `gt_sorted` (1 = foreground).
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = 1.0 - intersection / union;
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Lovász-softmax averaged over the classes present in the ground truth.
pub fn lovasz_softmax_with_grad(probs: &Probabilities, labels: &LabelMask) -> Result<(f64, Vec<f64>)> {
    let valid = valid_pixels(probs, labels)?;
    let n = probs.height * probs.width;
    let present: Vec<usize> = (0..probs.classes).filter(|&c| valid.iter().any(|&(_, l)| l == c)).collect();
    let scale = 1.0 / present.len() as f64;
    let mut grad = vec![0.0; probs.classes * n];
    let mut total = 0.0;
    for &c in &present {
        let fg: Vec<bool> = valid.iter().map(|&(_, l)| l == c).collect();
        let errors: Vec<f64> = valid
            .iter()
            .zip(&fg)
            .map(|(&(i, _), &f)| {
                let p = probs.get(c, i);
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&j| fg[j]).collect();
        let g = lovasz_grad(&gt_sorted);
        for (rank, &j) in order.iter().enumerate() {
            total += errors[j] * g[rank] * scale;
            let sign = if fg[j] { -1.0 } else { 1.0 };
            grad[c * n + valid[j].0] += sign * g[rank] * scale;
        }
    }
    Ok((total, grad))
}

pub fn lovasz_softmax(probs: &Probabilities, labels: &LabelMask) -> Result<f64> {
    Ok(lovasz_softmax_with_grad(probs, labels)?.0)
}

/// Cross-entropy weighted by `1 + d_gt`, normalised by the weight sum.
pub fn boundary_ce_with_grad(probs: &Probabilities, labels: &LabelMask, d_gt: &ScalarField) -> Result<(f64, Vec<f64>)> {
    let valid = valid_pixels(probs, labels)?;
    d_gt.ensure_dims(probs.height, probs.width)?;
    let n = probs.height * probs.width;
    let weight = |i: usize| 1.0 + d_gt.data()[i];
    let wsum: f64 = valid.iter().map(|&(i, _)| weight(i)).sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.classes * n];
    for &(i, l) in &valid {
        let (v, d) = nll(probs.get(l, i));
        loss += weight(i) * v;
        grad[l * n + i] += weight(i) * d / wsum;
    }
    Ok((loss / wsum, grad))
}

pub fn boundary_ce(probs: &Probabilities, labels: &LabelMask, d_gt: &ScalarField) -> Result<f64> {
    Ok(boundary_ce_with_grad(probs, labels, d_gt)?.0)
}

/// Plain mean cross-entropy.
pub fn aux_loss_with_grad(probs_aux: &Probabilities, labels: &LabelMask) -> Result<(f64, Vec<f64>)> {
    let valid = valid_pixels(probs_aux, labels)?;
    let n = probs_aux.height * probs_aux.width;
    let scale = 1.0 / valid.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs_aux.classes * n];
    for &(i, l) in &valid {
        let (v, d) = nll(probs_aux.get(l, i));
        loss += v;
        grad[l * n + i] += d * scale;
    }
    Ok((loss * scale, grad))
}

pub fn aux_loss(probs_aux: &Probabilities, labels: &LabelMask) -> Result<f64> {
    Ok(aux_loss_with_grad(probs_aux, labels)?.0)
}

/// Anisotropic total variation: the mean over both channels and every
/// in-image forward difference (vertical and horizontal) of its absolute
/// value. Subgradient 0 at equal neighbours.
pub fn tv_loss_with_grad(flow: &VectorField2) -> (f64, Vec<f64>) {
    let (h, w) = flow.dims();
    let n = h * w;
    let count = 2 * (h.saturating_sub(1) * w + h * w.saturating_sub(1));
    let mut grad = vec![0.0; 2 * n];
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let d = flow.data();
    let mut sum = 0.0;
    for c in 0..2 {
        let base = c * n;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                let mut diff = |j: usize| {
                    let v = d[j] - d[i];
                    sum += v.abs();
                    let s = if v > 0.0 {
                        scale
                    } else if v < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                    grad[j] += s;
                    grad[i] -= s;
                };
                if y + 1 < h {
                    diff(i + w);
                }
                if x + 1 < w {
                    diff(i + 1);
                }
            }
        }
    }
    (sum * scale, grad)
}

pub fn tv_loss(flow: &VectorField2) -> f64 {
    tv_loss_with_grad(flow).0
}

/// Predicted prior fields supervised against analytic targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPrediction {
    pub vmap: ScalarField,
    pub flow: VectorField2,
    pub curv: ScalarField,
}

/// Value and components of the geometric term.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricLoss {
    pub vg: f64,
    pub tv: f64,
    pub grad_vmap: Vec<f64>,
    pub grad_flow: Vec<f64>,
    pub grad_curv: Vec<f64>,
}

fn mse_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let m = pred.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            sum += r * r;
            2.0 * r / m
        })
        .collect();
    (sum / m, grad)
}

/// `mse(V) + mse(Φ) + mse(C) + 0.5·tv(Φ̂)`, where the flow error is
/// averaged over both channels.
pub fn geometric_mse_with_grad(pred: &PriorPrediction, target: &GeometricPriors) -> Result<GeometricLoss> {
    let (h, w) = target.dims();
    pred.vmap.ensure_dims(h, w)?;
    pred.flow.ensure_dims(h, w)?;
    pred.curv.ensure_dims(h, w)?;
    let (mv, grad_vmap) = mse_with_grad(pred.vmap.data(), target.vmap.data());
    let (mf, mut grad_flow) = mse_with_grad(pred.flow.data(), target.flow.data());
    let (mc, grad_curv) = mse_with_grad(pred.curv.data(), target.curv.data());
    let (tv, tv_grad) = tv_loss_with_grad(&pred.flow);
    for (g, t) in grad_flow.iter_mut().zip(tv_grad) {
        *g += TV_WEIGHT * t;
    }
    Ok(GeometricLoss { vg: mv + mf + mc + TV_WEIGHT * tv, tv, grad_vmap, grad_flow, grad_curv })
}

pub fn geometric_mse(pred: &PriorPrediction, target: &GeometricPriors) -> Result<f64> {
    Ok(geometric_mse_with_grad(pred, target)?.vg)
}

/// Positive-weighted binary cross-entropy, mean over pixels. Predictions
/// are clamped to `[ε, 1-ε]`; the gradient is 0 where the clamp is active.
pub fn d_loss_with_grad(d_pred: &ScalarField, d_gt: &ScalarField, pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    d_gt.ensure_dims(d_pred.height(), d_pred.width())?;
    if d_gt.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DgmError::OutOfRange("boundary targets must lie in [0, 1]".into()));
    }
    let m = d_pred.data().len();
    if m == 0 {
        return Err(DgmError::UndefinedLoss("empty boundary map".into()));
    }
    let scale = 1.0 / m as f64;
    let mut loss = 0.0;
    let grad = d_pred
        .data()
        .iter()
        .zip(d_gt.data())
        .map(|(&p, &y)| {
            let inside = p > BCE_EPS && p < 1.0 - BCE_EPS;
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= pos_weight * y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            if inside {
                scale * (-pos_weight * y / q + (1.0 - y) / (1.0 - q))
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss * scale, grad))
}

pub fn d_loss(d_pred: &ScalarField, d_gt: &ScalarField, pos_weight: f64) -> Result<f64> {
    Ok(d_loss_with_grad(d_pred, d_gt, pos_weight)?.0)
}

/// Linear decay of the geometric weight over training progress `t`.
pub fn gamma_geo(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DgmError::OutOfRange(format!("schedule position {t} outside [0, 1]")));
    }
    Ok(2.0 * (1.0 - t) + 0.2)
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ohem_threshold: f64,
    pub min_kept_fraction: f64,
    pub pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ohem_threshold: 0.7, min_kept_fraction: 1.0 / 16.0, pos_weight: 20.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return Err(DgmError::Config(format!("OHEM threshold {} outside (0, 1]", self.ohem_threshold)));
        }
        if !(self.min_kept_fraction > 0.0 && self.min_kept_fraction <= 1.0) {
            return Err(DgmError::Config(format!("min kept fraction {} outside (0, 1]", self.min_kept_fraction)));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(DgmError::Config(format!("positive weight {} must be positive", self.pos_weight)));
        }
        Ok(())
    }
}

/// Every component of the objective at one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub ce_ohem: f64,
    pub lovasz: f64,
    pub boundary: f64,
    pub vg: f64,
    pub tv: f64,
    pub d: f64,
    pub aux: f64,
    pub gamma_geo: f64,
}

impl LossReport {
    /// Assembles a report from its leaf components.
    pub fn compose(
        ce_ohem: f64,
        lovasz: f64,
        boundary: f64,
        vg: f64,
        tv: f64,
        d: f64,
        aux: f64,
        gamma_geo: f64,
    ) -> Self {
        let seg = ce_ohem + LOVASZ_WEIGHT * lovasz + BOUNDARY_WEIGHT * boundary;
        let total = seg + gamma_geo * (vg + d) + AUX_WEIGHT * aux;
        Self { total, seg, ce_ohem, lovasz, boundary, vg, tv, d, aux, gamma_geo }
    }

    pub const CSV_HEADER: &'static str = "total,seg,ce_ohem,lovasz,boundary,vg,tv,d,aux,gamma_geo";

    pub fn csv_fields(&self) -> [f64; 10] {
        [
            self.total,
            self.seg,
            self.ce_ohem,
            self.lovasz,
            self.boundary,
            self.vg,
            self.tv,
            self.d,
            self.aux,
            self.gamma_geo,
        ]
    }
}

/// Everything the objective reads.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub probs: &'a Probabilities,
    pub probs_aux: &'a Probabilities,
    pub labels: &'a LabelMask,
    /// Ground-truth boundary map (binary).
    pub d_gt: &'a ScalarField,
    /// Refined boundary prediction in (0, 1).
    pub d_pred: &'a ScalarField,
    pub pred: &'a PriorPrediction,
    pub target: &'a GeometricPriors,
}

/// Gradients of the total with respect to each real-valued input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub probs: Vec<f64>,
    pub probs_aux: Vec<f64>,
    pub d_pred: Vec<f64>,
    pub vmap: Vec<f64>,
    pub flow: Vec<f64>,
    pub curv: Vec<f64>,
}

pub fn total_loss_with_grad(inputs: &LossInputs<'_>, config: &LossConfig, t: f64) -> Result<(LossReport, LossGrads)> {
    config.validate()?;
    let gamma = gamma_geo(t)?;
    let (ce, g_ce) = ce_ohem_with_grad(inputs.probs, inputs.labels, config.ohem_threshold, config.min_kept_fraction)?;
    let (lov, g_lov) = lovasz_softmax_with_grad(inputs.probs, inputs.labels)?;
    let (bnd, g_bnd) = boundary_ce_with_grad(inputs.probs, inputs.labels, inputs.d_gt)?;
    let geo = geometric_mse_with_grad(inputs.pred, inputs.target)?;
    let (d, g_d) = d_loss_with_grad(inputs.d_pred, inputs.d_gt, config.pos_weight)?;
    let (aux, g_aux) = aux_loss_with_grad(inputs.probs_aux, inputs.labels)?;
    let report = LossReport::compose(ce, lov, bnd, geo.vg, geo.tv, d, aux, gamma);

    let probs =
        g_ce.iter().zip(&g_lov).zip(&g_bnd).map(|((a, b), c)| a + LOVASZ_WEIGHT * b + BOUNDARY_WEIGHT * c).collect();
    let scale = |v: Vec<f64>, s: f64| v.into_iter().map(|x| x * s).collect::<Vec<_>>();
    let grads = LossGrads {
        probs,
        probs_aux: scale(g_aux, AUX_WEIGHT),
        d_pred: scale(g_d, gamma),
        vmap: scale(geo.grad_vmap, gamma),
        flow: scale(geo.grad_flow, gamma),
        curv: scale(geo.grad_curv, gamma),
    };
    Ok((report, grads))
}

pub fn total_loss(inputs: &LossInputs<'_>, config: &LossConfig, t: f64) -> Result<LossReport> {
    Ok(total_loss_with_grad(inputs, config, t)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    /// Binary probabilities for a single row: foreground probability per
    /// pixel, classes (bg, fg).
    fn binary(p_fg: &[f64]) -> Probabilities {
        let mut data: Vec<f64> = p_fg.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(p_fg);
        Probabilities::new(2, 1, p_fg.len(), data).unwrap()
    }

    fn row(labels: &[u16]) -> LabelMask {
        LabelMask::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    #[test]
    fn probabilities_validate_simplex() {
        assert!(Probabilities::new(2, 1, 1, vec![0.3, 0.6]).is_err());
        assert!(Probabilities::new(2, 1, 1, vec![1.2, -0.2]).is_err());
        let p = Probabilities::from_logits(3, 1, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.argmax().labels(), &[0, 0]);
    }

    #[test]
    fn ohem_examples() {
        let labels = LabelMask::from_rows(&[&[0, 1], &[1, 0]]).unwrap();
        let perfect = Probabilities::one_hot(&labels, 2).unwrap();
        assert_eq!(ce_ohem(&perfect, &labels, 0.7, 1.0 / 16.0).unwrap(), 0.0);

        assert!((ce_ohem(&binary(&[0.5]), &row(&[1]), 0.7, 1.0 / 16.0).unwrap() - LN_2).abs() < 1e-15);

        let p = binary(&[0.9, 0.6, 0.5, 0.2]);
        let l = ce_ohem(&p, &row(&[1, 1, 1, 1]), 0.7, 1.0 / 16.0).unwrap();
        let expect = -(0.6f64.ln() + 0.5f64.ln() + 0.2f64.ln()) / 3.0;
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.937_803_3).abs() < 1e-6);
    }

    #[test]
    fn ohem_falls_back_to_hardest_with_row_major_ties() {
        // No pixel under the threshold; min kept = ceil(0.5·4) = 2 hardest,
        // with the tie at 0.8 resolved toward the earlier pixel.
        let p = binary(&[0.9, 0.8, 0.95, 0.8]);
        let (l, g) = ce_ohem_with_grad(&p, &row(&[1, 1, 1, 1]), 0.7, 0.5).unwrap();
        assert!((l + 0.8f64.ln()).abs() < 1e-15);
        assert!(g[4 + 1] != 0.0 && g[4 + 3] != 0.0 && g[4] == 0.0);
    }

    #[test]
    fn all_ignored_is_undefined() {
        let p = binary(&[0.5, 0.5]);
        let l = row(&[IGNORE_LABEL, IGNORE_LABEL]);
        assert!(matches!(ce_ohem(&p, &l, 0.7, 0.1), Err(DgmError::UndefinedLoss(_))));
        assert!(matches!(lovasz_softmax(&p, &l), Err(DgmError::UndefinedLoss(_))));
        assert!(matches!(aux_loss(&p, &l), Err(DgmError::UndefinedLoss(_))));
        assert!(ce_ohem(&p, &row(&[0, 7]), 0.7, 0.1).is_err());
    }

    #[test]
    fn lovasz_examples() {
        let labels = LabelMask::from_rows(&[&[0, 1, 1]]).unwrap();
        assert_eq!(lovasz_softmax(&Probabilities::one_hot(&labels, 2).unwrap(), &labels).unwrap(), 0.0);
        // Single foreground pixel predicted as background: only class 1 is
        // present, Jaccard error 1.
        assert_eq!(lovasz_softmax(&binary(&[0.0]), &row(&[1])).unwrap(), 1.0);
        let l = lovasz_softmax(&binary(&[1.0, 1.0, 0.0]), &row(&[1, 1, 1])).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_examples() {
        let p = binary(&[0.3, 0.8, 0.55]);
        let labels = row(&[0, 1, 1]);
        let plain = aux_loss(&p, &labels).unwrap();
        let zero = boundary_ce(&p, &labels, &ScalarField::zeros(1, 3)).unwrap();
        let one = boundary_ce(&p, &labels, &ScalarField::filled(1, 3, 1.0)).unwrap();
        assert!((zero - plain).abs() < 1e-15);
        assert!((one - plain).abs() < 1e-15);

        let p = binary(&[1.0, 0.5]);
        let l = boundary_ce(&p, &row(&[1, 1]), &ScalarField::new(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert!((l - 2.0 * LN_2 / 3.0).abs() < 1e-15);
        assert!((l - 0.462_098).abs() < 1e-6);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&VectorField2::constant(3, 4, 0.2, -0.4)), 0.0);
        // 2×3, x channel columns 0, 0.5, 1.0: four horizontal steps of 0.5
        // out of 2·(1·3 + 2·2) = 14 differences.
        let mut d = vec![0.0; 6];
        d.extend([0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        let f = VectorField2::new(2, 3, d.clone()).unwrap();
        assert!((tv_loss(&f) - 2.0 / 14.0).abs() < 1e-15);
        let neg = VectorField2::new(2, 3, d.iter().map(|v| -v).collect()).unwrap();
        assert_eq!(tv_loss(&neg), tv_loss(&f));
        assert_eq!(tv_loss(&VectorField2::constant(1, 1, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn geometric_examples() {
        let target = GeometricPriors {
            vmap: ScalarField::filled(3, 3, 0.4),
            flow: VectorField2::constant(3, 3, 0.1, 0.2),
            curv: ScalarField::filled(3, 3, -0.3),
            d_coarse: ScalarField::zeros(3, 3),
        };
        let exact = PriorPrediction { vmap: target.vmap.clone(), flow: target.flow.clone(), curv: target.curv.clone() };
        assert_eq!(geometric_mse(&exact, &target).unwrap(), 0.0);
        let off = PriorPrediction { vmap: ScalarField::filled(3, 3, 0.5), ..exact.clone() };
        assert!((geometric_mse(&off, &target).unwrap() - 0.01).abs() < 1e-15);
        let bad = PriorPrediction { vmap: ScalarField::zeros(2, 3), ..exact };
        assert!(geometric_mse(&bad, &target).is_err());
    }

    #[test]
    fn d_loss_examples() {
        let half = ScalarField::filled(1, 1, 0.5);
        let l = d_loss(&half, &ScalarField::filled(1, 1, 1.0), 20.0).unwrap();
        assert!((l - 20.0 * LN_2).abs() < 1e-14);
        assert!((l - 13.862_944).abs() < 1e-6);
        assert!((d_loss(&half, &ScalarField::zeros(1, 1), 20.0).unwrap() - LN_2).abs() < 1e-15);
        let gt = ScalarField::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(d_loss(&gt, &gt, 20.0).unwrap() < 1e-5);
        let (_, g) = d_loss_with_grad(&gt, &gt, 20.0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn aux_examples() {
        let labels = LabelMask::from_rows(&[&[0, 2, 1]]).unwrap();
        assert_eq!(aux_loss(&Probabilities::one_hot(&labels, 3).unwrap(), &labels).unwrap(), 0.0);
        let uniform = Probabilities::new(3, 1, 3, vec![1.0 / 3.0; 9]).unwrap();
        assert!((aux_loss(&uniform, &labels).unwrap() - 3f64.ln()).abs() < 1e-15);
        let p = Probabilities::new(3, 1, 3, vec![0.2, 0.1, 0.3, 0.5, 0.3, 0.6, 0.3, 0.6, 0.1]).unwrap();
        assert!((aux_loss(&p, &labels).unwrap() - ce_ohem(&p, &labels, 1.0, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn schedule() {
        assert_eq!(gamma_geo(0.0).unwrap(), 2.2);
        assert_eq!(gamma_geo(1.0).unwrap(), 0.2);
        assert!((gamma_geo(0.5).unwrap() - 1.2).abs() < 1e-15);
        assert!(gamma_geo(-0.1).is_err());
        assert!(gamma_geo(1.5).is_err());
    }

    #[test]
    fn composition() {
        let r = LossReport::compose(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.2);
        assert_eq!(r.total, 0.0);
        // seg = 1 (all in CE), vg + d = 1, aux = 1, t = 1.
        let r = LossReport::compose(1.0, 0.0, 0.0, 0.5, 0.0, 0.5, 1.0, gamma_geo(1.0).unwrap());
        assert!((r.total - 1.6).abs() < 1e-15);
    }

    /// Jaccard loss of predicting `errors` wrong, for ground-truth set `gt`.
    fn jaccard_loss(gt: &[bool], errors: &[bool]) -> f64 {
        let union = gt.iter().zip(errors).filter(|(&g, &e)| g || e).count();
        if union == 0 {
            return 0.0;
        }
        let kept = gt.iter().zip(errors).filter(|(&g, &e)| g && !e).count();
        1.0 - kept as f64 / union as f64
    }

    /// Lovász extension as the threshold integral of the set function.
    fn extension_by_thresholds(gt: &[bool], m: &[f64]) -> f64 {
        let mut levels: Vec<f64> = m.to_vec();
        levels.push(0.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut total = 0.0;
        for w in levels.windows(2) {
            let above: Vec<bool> = m.iter().map(|&v| v >= w[1]).collect();
            total += (w[1] - w[0]) * jaccard_loss(gt, &above);
        }
        total
    }

    fn lovasz_oracle(p_fg: &[f64], labels: &[u16]) -> f64 {
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..2u16 {
            let gt: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if !gt.contains(&true) {
                continue;
            }
            present += 1;
            let m: Vec<f64> = p_fg
                .iter()
                .zip(&gt)
                .map(|(&p, &g)| {
                    let pc = if c == 1 { p } else { 1.0 - p };
                    if g {
                        1.0 - pc
                    } else {
                        pc
                    }
                })
                .collect();
            sum += extension_by_thresholds(&gt, &m);
        }
        sum / present as f64
    }

    #[test]
    fn lovasz_matches_threshold_integral_exhaustively() {
        let grid = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for len in 1..=4usize {
            for lab in 0..1u32 << len {
                let labels: Vec<u16> = (0..len).map(|i| ((lab >> i) & 1) as u16).collect();
                for code in 0..4usize.pow(len as u32) {
                    let p: Vec<f64> = (0..len).map(|i| grid[code / 4usize.pow(i as u32) % 4]).collect();
                    let got = lovasz_softmax(&binary(&p), &row(&labels)).unwrap();
                    let want = lovasz_oracle(&p, &labels);
                    assert!((got - want).abs() < 1e-10, "{labels:?} {p:?}: {got} vs {want}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scene() -> impl Strategy<Value = (Vec<f64>, Vec<u16>, Vec<usize>)> {
            (2usize..12).prop_flat_map(|n| {
                (
                    // Coarse levels produce plenty of ties.
                    proptest::collection::vec((0u8..6).prop_map(|q| 0.05 + 0.18 * f64::from(q)), n),
                    proptest::collection::vec(0u16..2, n),
                    Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                )
            })
        }

        proptest! {
            #[test]
            fn ohem_is_permutation_invariant((p, labels, perm) in scene(), frac in 0.05f64..1.0, thr in 0.1f64..1.0) {
                let base = ce_ohem(&binary(&p), &row(&labels), thr, frac).unwrap();
                let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
                let pl: Vec<u16> = perm.iter().map(|&i| labels[i]).collect();
                let permuted = ce_ohem(&binary(&pp), &row(&pl), thr, frac).unwrap();
                prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
            }

            #[test]
            fn segmentation_losses_are_nonnegative((p, labels, _) in scene()) {
                let probs = binary(&p);
                let m = row(&labels);
                let d = ScalarField::new(1, p.len(), p.clone()).unwrap();
                prop_assert!(ce_ohem(&probs, &m, 0.7, 1.0 / 16.0).unwrap() >= 0.0);
                prop_assert!(lovasz_softmax(&probs, &m).unwrap() >= 0.0);
                prop_assert!(boundary_ce(&probs, &m, &d).unwrap() >= 0.0);
                prop_assert!(aux_loss(&probs, &m).unwrap() >= 0.0);
                prop_assert!(d_loss(&d, &d.clone(), 20.0).unwrap() >= 0.0);
            }

            #[test]
            fn report_identities(c in proptest::collection::vec(0.0f64..10.0, 7), t in 0.0f64..=1.0) {
                let g = gamma_geo(t).unwrap();
                let r = LossReport::compose(c[0], c[1], c[2], c[3], c[4], c[5], c[6], g);
                let seg = c[0] + 0.8 * c[1] + 0.1 * c[2];
                prop_assert!((r.seg - seg).abs() <= 1e-12 * seg.max(1.0));
                let total = seg + (2.0 * (1.0 - t) + 0.2) * (c[3] + c[5]) + 0.4 * c[6];
                prop_assert!((r.total - total).abs() <= 1e-12 * total.max(1.0));
                prop_assert_eq!(r.csv_fields()[9], g);
            }

            #[test]
            fn total_is_monotone_in_each_component(c in proptest::collection::vec(0.0f64..10.0, 7), i in 0usize..7, bump in 0.0f64..5.0, t in 0.0f64..=1.0) {
                let g = gamma_geo(t).unwrap();
                let mut d = c.clone();
                d[i] += bump;
                let a = LossReport::compose(c[0], c[1], c[2], c[3], c[4], c[5], c[6], g);
                let b = LossReport::compose(d[0], d[1], d[2], d[3], d[4], d[5], d[6], g);
                prop_assert!(b.total >= a.total);
            }
        }
    }
}
