//! Tape operations for the model: convolutions, directional scans,
//! prompts, bilinear sampling, softmax and the losses, each backed by the
//! hand-written reverse kernels of its module.

use super::{Tape, Var};
use crate::error::Result;
use crate::fields::LabelMask;
use crate::fields::{
    conv1x1_backward, conv1x1_raw, conv3x3_backward, conv3x3_raw, depthwise_conv3x3_backward, depthwise_conv3x3_raw,
};
use crate::gmamba::{
    directional_scan_backward_raw, directional_scan_raw, prompt_raw, LayerKind, ScanDirection, ScanParams,
};
use crate::goad::{grid_sample_backward, grid_sample_raw, SamplingGrid, ALPHA_MAX};
use crate::losses::{self, softmax_backward, softmax_raw, LossConfig, LossReport, Probabilities};
use crate::priors::GeometricPriors;
use crate::{CascadeConfig, ScalarField};

/// Channel, height and width of a flat feature node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Scan parameter groups as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    pub state_size: usize,
    pub a_log: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d_skip: Var,
}

impl ScanVars {
    pub fn leaves(tape: &mut Tape, p: &ScanParams) -> Self {
        Self {
            state_size: p.state_size,
            a_log: tape.leaf(p.a_log.clone()),
            w_delta: tape.leaf(p.w_delta.clone()),
            b_delta: tape.leaf(p.b_delta.clone()),
            w_b: tape.leaf(p.w_b.clone()),
            w_c: tape.leaf(p.w_c.clone()),
            d_skip: tape.leaf(p.d_skip.clone()),
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.a_log, self.w_delta, self.b_delta, self.w_b, self.w_c, self.d_skip]
    }
}

fn params_from(values: &[&[f64]], channels: usize, state_size: usize) -> ScanParams {
    ScanParams {
        channels,
        state_size,
        a_log: values[0].to_vec(),
        w_delta: values[1].to_vec(),
        b_delta: values[2].to_vec(),
        w_b: values[3].to_vec(),
        w_c: values[4].to_vec(),
        d_skip: values[5].to_vec(),
    }
}

/// One directional selective scan over every channel.
pub fn directional_scan(tape: &mut Tape, x: Var, p: &ScanVars, shape: Shape, dir: ScanDirection) -> Var {
    let Shape { channels: c, height: h, width: w } = shape;
    let s = p.state_size;
    let mut parents = vec![x];
    parents.extend(p.vars());
    let values: Vec<&[f64]> = parents[1..].iter().map(|&v| tape.value(v)).collect();
    let params = params_from(&values, c, s);
    let y = directional_scan_raw(c, h, w, tape.value(x), &params, dir);
    tape.custom(&parents, y, move |g, inputs, _| {
        let params = params_from(&inputs[1..], c, s);
        let (gx, gp) = directional_scan_backward_raw(c, h, w, inputs[0], &params, dir, g);
        vec![gx, gp.a_log, gp.w_delta, gp.b_delta, gp.w_b, gp.w_c, gp.d_skip]
    })
}

pub fn depthwise_conv3x3(tape: &mut Tape, x: Var, kernels: Var, shape: Shape) -> Var {
    let Shape { channels: c, height: h, width: w } = shape;
    let y = depthwise_conv3x3_raw(c, h, w, tape.value(x), tape.value(kernels));
    tape.custom(&[x, kernels], y, move |g, inputs, _| {
        let (gx, gk) = depthwise_conv3x3_backward(c, h, w, inputs[0], inputs[1], g);
        vec![gx, gk]
    })
}

/// Dense 3×3 convolution `cin → cout` with bias.
pub fn conv3x3(tape: &mut Tape, x: Var, weights: Var, bias: Var, cin: usize, cout: usize, h: usize, w: usize) -> Var {
    let y = conv3x3_raw(cin, cout, h, w, tape.value(x), tape.value(weights), tape.value(bias));
    tape.custom(&[x, weights, bias], y, move |g, inputs, _| {
        let (gx, gw, gb) = conv3x3_backward(cin, cout, h, w, inputs[0], inputs[1], g);
        vec![gx, gw, gb]
    })
}

/// Pointwise channel mix `cin → cout` with bias over `n` pixels.
pub fn conv1x1(tape: &mut Tape, x: Var, weights: Var, bias: Var, cin: usize, cout: usize, n: usize) -> Var {
    let y = conv1x1_raw(cin, cout, n, tape.value(x), tape.value(weights), tape.value(bias));
    tape.custom(&[x, weights, bias], y, move |g, inputs, _| {
        let (gx, gw, gb) = conv1x1_backward(cin, cout, n, inputs[0], inputs[1], g);
        vec![gx, gw, gb]
    })
}

/// Geometric prompt `1 + d · relu(⟨Φ, u_dir⟩)` for one direction.
pub fn prompt(tape: &mut Tape, d_coarse: Var, flow: Var, dir: ScanDirection) -> Var {
    let t = prompt_raw(tape.value(d_coarse), tape.value(flow), dir);
    let (uy, ux) = dir.unit_vector();
    tape.custom(&[d_coarse, flow], t, move |g, inputs, _| {
        let (d, f) = (inputs[0], inputs[1]);
        let n = d.len();
        let mut gd = vec![0.0; n];
        let mut gf = vec![0.0; 2 * n];
        for i in 0..n {
            let proj = uy * f[i] + ux * f[n + i];
            if proj > 0.0 {
                gd[i] = g[i] * proj;
                gf[i] = g[i] * d[i] * uy;
                gf[n + i] = g[i] * d[i] * ux;
            }
        }
        vec![gd, gf]
    })
}

/// Multiplies each channel of `x` by the plane `t`.
pub fn modulate(tape: &mut Tape, x: Var, t: Var, channels: usize) -> Var {
    let tiled = tape.tile(t, channels);
    tape.mul(x, tiled)
}

/// One directional block: depthwise conv, per-direction prompt (guided
/// only), four scans summed in fixed order, residual `x + acc / 4`.
pub fn gmamba_block(
    tape: &mut Tape,
    x: Var,
    scan: &ScanVars,
    kernels: Var,
    guide: Option<(Var, Var)>,
    shape: Shape,
) -> Var {
    let conv = depthwise_conv3x3(tape, x, kernels, shape);
    let mut acc: Option<Var> = None;
    for dir in ScanDirection::ALL {
        let input = match guide {
            Some((d, f)) => {
                let t = prompt(tape, d, f, dir);
                modulate(tape, conv, t, shape.channels)
            }
            None => conv,
        };
        let y = directional_scan(tape, input, scan, shape, dir);
        acc = Some(match acc {
            Some(a) => tape.add(a, y),
            None => y,
        });
    }
    let acc = acc.expect("four directions");
    let quarter = tape.scale(acc, 0.25);
    tape.add(x, quarter)
}

/// Learnable nodes of a cascade.
#[derive(Clone, Debug)]
pub struct CascadeVars {
    pub layers: Vec<(LayerKind, ScanVars, Var)>,
    pub mix: Var,
    pub conv: Var,
    pub bias: Var,
}

impl CascadeVars {
    pub fn leaves(tape: &mut Tape, config: &CascadeConfig) -> Self {
        let layers = config
            .layers
            .iter()
            .map(|l| (l.kind, ScanVars::leaves(tape, &l.params), tape.leaf(l.kernels.weights().to_vec())))
            .collect();
        Self {
            layers,
            mix: tape.leaf(config.refiner.mix.clone()),
            conv: tape.leaf(config.refiner.conv.clone()),
            bias: tape.scalar(config.refiner.bias),
        }
    }

    /// Every learnable node in a fixed order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (_, s, k) in &self.layers {
            out.extend(s.vars());
            out.push(*k);
        }
        out.extend([self.mix, self.conv, self.bias]);
        out
    }
}

/// The cascade and its refiner head: returns (context features, ΔD).
pub fn cascade_forward(
    tape: &mut Tape,
    x: Var,
    vars: &CascadeVars,
    d_coarse: Var,
    flow: Var,
    shape: Shape,
) -> (Var, Var) {
    let mut h = x;
    for (kind, scan, kernels) in &vars.layers {
        let guide = (*kind == LayerKind::GeometryGuided).then_some((d_coarse, flow));
        h = gmamba_block(tape, h, scan, *kernels, guide, shape);
    }
    let c = shape.channels;
    let zero_bias = tape.leaf(vec![0.0; c]);
    let mixed = conv1x1(tape, h, vars.mix, zero_bias, c, c, shape.plane());
    let delta = conv3x3(tape, mixed, vars.conv, vars.bias, c, 1, shape.height, shape.width);
    (h, delta)
}

/// Bilinear sampling of a `c×hs×ws` source at a `2×hg×wg` grid; gradients
/// flow to both the source and the grid coordinates.
pub fn grid_sample(tape: &mut Tape, source: Var, grid: Var, c: usize, src: (usize, usize), out: (usize, usize)) -> Var {
    let ((hs, ws), (hg, wg)) = (src, out);
    let y = grid_sample_raw(c, hs, ws, tape.value(source), hg, wg, tape.value(grid));
    tape.custom(&[source, grid], y, move |g, inputs, _| {
        let (gs, gg) = grid_sample_backward(c, hs, ws, inputs[0], hg, wg, inputs[1], g);
        vec![gs, gg]
    })
}

/// Nodes of the offset-scale convolution ψ (2 → 1 channels).
#[derive(Clone, Copy, Debug)]
pub struct PsiVars {
    pub weights: Var,
    pub bias: Var,
}

/// Aligned-grid decoder: `[f_up ⊙ (1 + D); warp(f_low, clip(base + Φ·D·α))]`.
pub fn goad_forward(
    tape: &mut Tape,
    f_low: Var,
    f_up: Var,
    flow: Var,
    d_final: Var,
    psi: PsiVars,
    channels: (usize, usize),
    h: usize,
    w: usize,
) -> Result<Var> {
    let (c_low, c_up) = channels;
    let z = conv3x3(tape, flow, psi.weights, psi.bias, 2, 1, h, w);
    let sig = tape.logistic(z);
    let alpha = tape.scale(sig, ALPHA_MAX);
    let d2 = tape.tile(d_final, 2);
    let fd = tape.mul(flow, d2);
    let a2 = tape.tile(alpha, 2);
    let delta = tape.mul(fd, a2);
    let base = tape.leaf(SamplingGrid::base(h, w)?.data().to_vec());
    let moved = tape.add(base, delta);
    let grid = tape.clip(moved, -1.0, 1.0);
    let warped = grid_sample(tape, f_low, grid, c_low, (h, w), (h, w));
    let one_plus = tape.offset(d_final, 1.0);
    let gate = modulate(tape, f_up, one_plus, c_up);
    Ok(tape.concat(&[gate, warped]))
}

/// Softmax over the class axis of `k×n` logits.
pub fn softmax(tape: &mut Tape, logits: Var, k: usize, n: usize) -> Var {
    let p = softmax_raw(k, n, tape.value(logits));
    tape.custom(&[logits], p, move |g, _, out| vec![softmax_backward(k, n, out, g)])
}

/// A scalar loss node whose gradient was computed with the value.
fn loss_node(tape: &mut Tape, parents: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Var {
    tape.custom(parents, vec![value], move |g, _, _| {
        grads.iter().map(|v| v.iter().map(|x| g[0] * x).collect()).collect()
    })
}

/// Class probabilities plus the label mask they are scored against.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub classes: usize,
    pub labels: &'a LabelMask,
}

impl Target<'_> {
    fn probs(&self, tape: &Tape, p: Var) -> Probabilities {
        let (h, w) = self.labels.dims();
        Probabilities::unchecked(self.classes, h, w, tape.value(p).to_vec())
    }
}

pub fn ce_ohem(tape: &mut Tape, probs: Var, target: Target<'_>, threshold: f64, min_kept_fraction: f64) -> Result<Var> {
    let (v, g) = losses::ce_ohem_with_grad(&target.probs(tape, probs), target.labels, threshold, min_kept_fraction)?;
    Ok(loss_node(tape, &[probs], v, vec![g]))
}

pub fn lovasz_softmax(tape: &mut Tape, probs: Var, target: Target<'_>) -> Result<Var> {
    let (v, g) = losses::lovasz_softmax_with_grad(&target.probs(tape, probs), target.labels)?;
    Ok(loss_node(tape, &[probs], v, vec![g]))
}

pub fn boundary_ce(tape: &mut Tape, probs: Var, target: Target<'_>, d_gt: &ScalarField) -> Result<Var> {
    let (v, g) = losses::boundary_ce_with_grad(&target.probs(tape, probs), target.labels, d_gt)?;
    Ok(loss_node(tape, &[probs], v, vec![g]))
}

pub fn aux_loss(tape: &mut Tape, probs: Var, target: Target<'_>) -> Result<Var> {
    let (v, g) = losses::aux_loss_with_grad(&target.probs(tape, probs), target.labels)?;
    Ok(loss_node(tape, &[probs], v, vec![g]))
}

pub fn tv_loss(tape: &mut Tape, flow: Var, h: usize, w: usize) -> Result<Var> {
    let f = crate::VectorField2::new(h, w, tape.value(flow).to_vec())?;
    let (v, g) = losses::tv_loss_with_grad(&f);
    Ok(loss_node(tape, &[flow], v, vec![g]))
}

/// Nodes of the predicted prior fields.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub vmap: Var,
    pub flow: Var,
    pub curv: Var,
}

fn prediction(tape: &Tape, pred: PriorVars, h: usize, w: usize) -> Result<losses::PriorPrediction> {
    Ok(losses::PriorPrediction {
        vmap: ScalarField::new(h, w, tape.value(pred.vmap).to_vec())?,
        flow: crate::VectorField2::new(h, w, tape.value(pred.flow).to_vec())?,
        curv: ScalarField::new(h, w, tape.value(pred.curv).to_vec())?,
    })
}

pub fn geometric_mse(tape: &mut Tape, pred: PriorVars, target: &GeometricPriors) -> Result<Var> {
    let (h, w) = target.dims();
    let geo = losses::geometric_mse_with_grad(&prediction(tape, pred, h, w)?, target)?;
    let grads = vec![geo.grad_vmap, geo.grad_flow, geo.grad_curv];
    Ok(loss_node(tape, &[pred.vmap, pred.flow, pred.curv], geo.vg, grads))
}

pub fn d_loss(tape: &mut Tape, d_pred: Var, d_gt: &ScalarField, pos_weight: f64) -> Result<Var> {
    let p = ScalarField::new(d_gt.height(), d_gt.width(), tape.value(d_pred).to_vec())?;
    let (v, g) = losses::d_loss_with_grad(&p, d_gt, pos_weight)?;
    Ok(loss_node(tape, &[d_pred], v, vec![g]))
}

/// Everything fixed during a total-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a> {
    pub target: Target<'a>,
    pub d_gt: &'a ScalarField,
    pub priors: &'a GeometricPriors,
    pub config: &'a LossConfig,
    pub t: f64,
}

/// The full objective as one node; also returns its component report.
pub fn total_loss(
    tape: &mut Tape,
    probs: Var,
    probs_aux: Var,
    d_pred: Var,
    pred: PriorVars,
    targets: LossTargets<'_>,
) -> Result<(Var, LossReport)> {
    let (h, w) = targets.priors.dims();
    let p = targets.target.probs(tape, probs);
    let pa = targets.target.probs(tape, probs_aux);
    let dp = ScalarField::new(h, w, tape.value(d_pred).to_vec())?;
    let pr = prediction(tape, pred, h, w)?;
    let inputs = losses::LossInputs {
        probs: &p,
        probs_aux: &pa,
        labels: targets.target.labels,
        d_gt: targets.d_gt,
        d_pred: &dp,
        pred: &pr,
        target: targets.priors,
    };
    let (report, g) = losses::total_loss_with_grad(&inputs, targets.config, targets.t)?;
    let parents = [probs, probs_aux, d_pred, pred.vmap, pred.flow, pred.curv];
    let grads = vec![g.probs, g.probs_aux, g.d_pred, g.vmap, g.flow, g.curv];
    Ok((loss_node(tape, &parents, report.total, grads), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DepthwiseKernels;
    use crate::gmamba::{self, CascadeKind};
    use crate::goad::{self, PsiWeights};
    use crate::priors::make_priors;
    use crate::rng::{seeded, uniform_vec};
    use crate::{FeatureMap, VectorField2};

    fn scene(h: usize, w: usize) -> GeometricPriors {
        make_priors(&LabelMask::from_fn(h, w, |y, x| u16::from(y > 1 && x > 1 && x < w - 1))).unwrap()
    }

    #[test]
    fn block_matches_the_direct_forward_bitwise() {
        let mut rng = seeded(4);
        let (c, h, w) = (3, 5, 6);
        let p = ScanParams::init(c, 2, &mut rng);
        let k = DepthwiseKernels::new(uniform_vec(&mut rng, 9 * c, -0.3, 0.3)).unwrap();
        let x0 = uniform_vec(&mut rng, c * h * w, -1.0, 1.0);
        let pri = scene(h, w);
        let direct = gmamba::gmamba_block(&FeatureMap::new(c, h, w, x0.clone()).unwrap(), &p, &k, Some(&pri)).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(x0);
        let sv = ScanVars::leaves(&mut t, &p);
        let kv = t.leaf(k.weights().to_vec());
        let d = t.leaf(pri.d_coarse.data().to_vec());
        let f = t.leaf(pri.flow.data().to_vec());
        let y = gmamba_block(&mut t, x, &sv, kv, Some((d, f)), Shape::new(c, h, w));
        assert_eq!(t.value(y), direct.data());
    }

    #[test]
    fn cascade_matches_the_direct_forward_bitwise() {
        let mut rng = seeded(5);
        let (c, h, w) = (2, 4, 5);
        let cfg = CascadeConfig::init(c, 3, CascadeKind::Cascade, &mut rng);
        let x0 = uniform_vec(&mut rng, c * h * w, -1.0, 1.0);
        let pri = scene(h, w);
        let direct = gmamba::cascade_forward(&FeatureMap::new(c, h, w, x0.clone()).unwrap(), &cfg, &pri).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(x0);
        let vars = CascadeVars::leaves(&mut t, &cfg);
        let d = t.leaf(pri.d_coarse.data().to_vec());
        let f = t.leaf(pri.flow.data().to_vec());
        let (feat, delta) = cascade_forward(&mut t, x, &vars, d, f, Shape::new(c, h, w));
        assert_eq!(t.value(feat), direct.features.data());
        assert_eq!(t.value(delta), direct.delta_d.data());
    }

    #[test]
    fn goad_matches_the_direct_forward() {
        let mut rng = seeded(6);
        let (h, w) = (5, 6);
        let f_low = FeatureMap::new(2, h, w, uniform_vec(&mut rng, 2 * h * w, -1.0, 1.0)).unwrap();
        let f_up = FeatureMap::new(3, h, w, uniform_vec(&mut rng, 3 * h * w, -1.0, 1.0)).unwrap();
        let flow = VectorField2::new(h, w, uniform_vec(&mut rng, 2 * h * w, -1.0, 1.0)).unwrap();
        let d = ScalarField::new(h, w, uniform_vec(&mut rng, h * w, 0.0, 1.0)).unwrap();
        let psi = PsiWeights::init(&mut rng);
        let direct = goad::goad_forward(&f_low, &f_up, &flow, &d, &psi).unwrap();

        let mut t = Tape::new();
        let vl = t.leaf(f_low.data().to_vec());
        let vu = t.leaf(f_up.data().to_vec());
        let vf = t.leaf(flow.data().to_vec());
        let vd = t.leaf(d.data().to_vec());
        let psi_v = PsiVars { weights: t.leaf(psi.weights.clone()), bias: t.scalar(psi.bias) };
        let out = goad_forward(&mut t, vl, vu, vf, vd, psi_v, (2, 3), h, w).unwrap();
        for (a, b) in t.value(out).iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_gradient_matches_finite_differences() {
        // Output-sum of a length-5 scan with respect to its input.
        let mut rng = seeded(11);
        let p = ScanParams::init(1, 3, &mut rng);
        let x0 = uniform_vec(&mut rng, 5, -1.0, 1.0);
        let r = super::super::check_gradient("scan", &x0, super::super::FD_STEP, |t, x| {
            let sv = ScanVars::leaves(t, &p);
            let y = directional_scan(t, x, &sv, Shape::new(1, 1, 5), ScanDirection::LeftRight);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn d_loss_gradient_at_half() {
        let gt = ScalarField::filled(1, 1, 1.0);
        let mut t = Tape::new();
        let p = t.leaf(vec![0.5]);
        let l = d_loss(&mut t, p, &gt, 20.0).unwrap();
        let g = t.backward(l).unwrap().wrt(p)[0];
        assert!((g + 40.0).abs() < 1e-6);
        let fd = super::super::finite_difference(
            |x| losses::d_loss(&ScalarField::filled(1, 1, x[0]), &gt, 20.0).unwrap(),
            &[0.5],
            super::super::FD_STEP,
        )
        .unwrap();
        assert!((fd[0] + 40.0).abs() < 1e-6);
    }
}
