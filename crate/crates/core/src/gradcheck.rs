//! Gradient certification: every differentiable operation is compared
//! against central finite differences on seeded random instances.
//!
//! Instances are drawn away from kinks: ReLU projections stay at least
//! 0.1 from zero, sampling positions stay off lattice lines, OHEM
//! confidences stay clear of the threshold, sorted Lovász errors and TV
//! differences keep a minimum gap. Non-scalar operations are reduced with
//! a random projection `⟨r, op(x)⟩`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{self, PriorVars, PsiVars, ScanVars, Shape, Target};
use crate::autodiff::{check_gradient_scaled, GradCheckReport, Tape, Var, FD_STEP};
use crate::error::{DgmError, Result};
use crate::fields::{LabelMask, ScalarField};
use crate::gmamba::{CascadeConfig, CascadeKind, ScanDirection, ScanParams};
use crate::goad::PsiWeights;
use crate::losses::{softmax_raw, LossConfig, IGNORE_LABEL, TV_WEIGHT};
use crate::priors::GeometricPriors;
use crate::rng::{seeded, uniform_vec, DgmRng};
use crate::VectorField2;

/// Acceptance bound on the relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Instances per operation.
pub const INSTANCES: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScope {
    Scan,
    Goad,
    Losses,
    All,
}

impl FromStr for GradScope {
    type Err = DgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Self::Scan),
            "goad" => Ok(Self::Goad),
            "losses" => Ok(Self::Losses),
            "all" => Ok(Self::All),
            other => Err(DgmError::Config(format!("unknown gradient-check scope {other:?}"))),
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scan => "scan",
            Self::Goad => "goad",
            Self::Losses => "losses",
            Self::All => "all",
        })
    }
}

/// Run options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub instances: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: scales every tape gradient before comparison. Anything
    /// other than 1 must make the check fail.
    pub corrupt_factor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, instances: INSTANCES, step: FD_STEP, tolerance: GRADCHECK_TOLERANCE, corrupt_factor: 1.0 }
    }
}

/// One worst-case report per operation and input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub scope: GradScope,
    pub tolerance: f64,
    pub instances: u64,
    pub reports: Vec<GradCheckReport>,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.reports.iter().all(|r| r.passes(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct Case {
    op: String,
    point: Vec<f64>,
    build: Build,
}

fn case(op: impl Into<String>, point: Vec<f64>, build: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Case {
    Case { op: op.into(), point, build: Box::new(build) }
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn signed_away_from_zero(rng: &mut DgmRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn project(tape: &mut Tape, y: Var, r: &[f64]) -> Var {
    let rv = tape.leaf(r.to_vec());
    tape.dot(y, rv)
}

/// Scan variables with group `replace` taken from `x`.
fn scan_vars_with(tape: &mut Tape, p: &ScanParams, replace: usize, x: Var) -> ScanVars {
    let mut v = ScanVars::leaves(tape, p);
    let slot = match replace {
        0 => &mut v.a_log,
        1 => &mut v.w_delta,
        2 => &mut v.b_delta,
        3 => &mut v.w_b,
        4 => &mut v.w_c,
        _ => &mut v.d_skip,
    };
    *slot = x;
    v
}

const SCAN_GROUPS: [&str; 6] = ["a_log", "w_delta", "b_delta", "w_b", "w_c", "d_skip"];

fn scan_cases(rng: &mut DgmRng, instance: u64) -> Vec<Case> {
    let shape = Shape::new(2, 3, 4);
    let n = shape.plane();
    let cn = shape.channels * n;
    let dir = ScanDirection::ALL[(instance % 4) as usize];
    let params = ScanParams::init(shape.channels, 3, rng);
    let x0 = uniform_vec(rng, cn, -1.0, 1.0);
    let r = uniform_vec(rng, cn, -1.0, 1.0);
    let mut cases = Vec::new();

    let (p, rr) = (params.clone(), r.clone());
    cases.push(case("scan/x", x0.clone(), move |t, x| {
        let sv = ScanVars::leaves(t, &p);
        let y = ops::directional_scan(t, x, &sv, shape, dir);
        Ok(project(t, y, &rr))
    }));
    for (g, name) in SCAN_GROUPS.iter().enumerate() {
        let (p, rr, xx) = (params.clone(), r.clone(), x0.clone());
        cases.push(case(format!("scan/{name}"), params.groups()[g].clone(), move |t, v| {
            let x = t.leaf(xx.clone());
            let sv = scan_vars_with(t, &p, g, v);
            let y = ops::directional_scan(t, x, &sv, shape, dir);
            Ok(project(t, y, &rr))
        }));
    }

    // Depthwise convolution, both inputs.
    let k0 = uniform_vec(rng, 9 * shape.channels, -0.5, 0.5);
    let (kk, rr) = (k0.clone(), r.clone());
    cases.push(case("depthwise/x", x0.clone(), move |t, x| {
        let k = t.leaf(kk.clone());
        let y = ops::depthwise_conv3x3(t, x, k, shape);
        Ok(project(t, y, &rr))
    }));
    let (xx, rr) = (x0.clone(), r.clone());
    cases.push(case("depthwise/kernels", k0.clone(), move |t, k| {
        let x = t.leaf(xx.clone());
        let y = ops::depthwise_conv3x3(t, x, k, shape);
        Ok(project(t, y, &rr))
    }));

    // Prompt, with projections kept clear of the ReLU kink.
    let d0 = uniform_vec(rng, n, 0.0, 1.0);
    let f0 = signed_away_from_zero(rng, 2 * n, 0.1, 1.0);
    let rn = uniform_vec(rng, n, -1.0, 1.0);
    let (ff, rr) = (f0.clone(), rn.clone());
    cases.push(case("prompt/d_coarse", d0.clone(), move |t, d| {
        let f = t.leaf(ff.clone());
        let y = ops::prompt(t, d, f, dir);
        Ok(project(t, y, &rr))
    }));
    let (dd, rr) = (d0.clone(), rn.clone());
    cases.push(case("prompt/flow", f0.clone(), move |t, f| {
        let d = t.leaf(dd.clone());
        let y = ops::prompt(t, d, f, dir);
        Ok(project(t, y, &rr))
    }));

    // Modulation.
    let m0 = uniform_vec(rng, n, 1.0, 2.0);
    let (mm, rr) = (m0.clone(), r.clone());
    cases.push(case("modulate/x", x0.clone(), move |t, x| {
        let m = t.leaf(mm.clone());
        let y = ops::modulate(t, x, m, shape.channels);
        Ok(project(t, y, &rr))
    }));
    let (xx, rr) = (x0.clone(), r.clone());
    cases.push(case("modulate/prompt", m0, move |t, m| {
        let x = t.leaf(xx.clone());
        let y = ops::modulate(t, x, m, shape.channels);
        Ok(project(t, y, &rr))
    }));

    // Guided block end to end.
    let (p, kk, dd, ff, rr) = (params.clone(), k0.clone(), d0.clone(), f0.clone(), r.clone());
    cases.push(case("block/x", x0.clone(), move |t, x| {
        let sv = ScanVars::leaves(t, &p);
        let k = t.leaf(kk.clone());
        let d = t.leaf(dd.clone());
        let f = t.leaf(ff.clone());
        let y = ops::gmamba_block(t, x, &sv, k, Some((d, f)), shape);
        Ok(project(t, y, &rr))
    }));
    let (p, kk, xx, dd, rr) = (params, k0, x0.clone(), d0, r.clone());
    cases.push(case("block/flow", f0, move |t, f| {
        let sv = ScanVars::leaves(t, &p);
        let k = t.leaf(kk.clone());
        let x = t.leaf(xx.clone());
        let d = t.leaf(dd.clone());
        let y = ops::gmamba_block(t, x, &sv, k, Some((d, f)), shape);
        Ok(project(t, y, &rr))
    }));

    // Cascade and refiner on a smaller map.
    let cshape = Shape::new(2, 3, 3);
    let cfg = CascadeConfig::init(2, 2, CascadeKind::Cascade, rng);
    let cx = uniform_vec(rng, 18, -1.0, 1.0);
    let cd = uniform_vec(rng, 9, 0.0, 1.0);
    let cf = signed_away_from_zero(rng, 18, 0.1, 1.0);
    let cr = uniform_vec(rng, 18, -1.0, 1.0);
    let cr1 = uniform_vec(rng, 9, -1.0, 1.0);
    cases.push(case("cascade/x", cx.clone(), move |t, x| {
        let vars = ops::CascadeVars::leaves(t, &cfg);
        let d = t.leaf(cd.clone());
        let f = t.leaf(cf.clone());
        let (feat, delta) = ops::cascade_forward(t, x, &vars, d, f, cshape);
        let a = project(t, feat, &cr);
        let b = project(t, delta, &cr1);
        Ok(t.add(a, b))
    }));

    // Dense convolutions used by the refiner and the offset scale.
    let (cin, cout, h, w) = (3, 2, 3, 4);
    let i0 = uniform_vec(rng, cin * h * w, -1.0, 1.0);
    let w0 = uniform_vec(rng, cout * cin * 9, -0.5, 0.5);
    let b0 = uniform_vec(rng, cout, -0.5, 0.5);
    let ro = uniform_vec(rng, cout * h * w, -1.0, 1.0);
    for (which, point) in [("x", i0.clone()), ("weights", w0.clone()), ("bias", b0.clone())] {
        let (ii, ww, bb, rr) = (i0.clone(), w0.clone(), b0.clone(), ro.clone());
        cases.push(case(format!("conv3x3/{which}"), point, move |t, v| {
            let x = if which == "x" { v } else { t.leaf(ii.clone()) };
            let wt = if which == "weights" { v } else { t.leaf(ww.clone()) };
            let b = if which == "bias" { v } else { t.leaf(bb.clone()) };
            let y = ops::conv3x3(t, x, wt, b, cin, cout, h, w);
            Ok(project(t, y, &rr))
        }));
    }
    let w1 = uniform_vec(rng, cout * cin, -0.5, 0.5);
    for (which, point) in [("x", i0.clone()), ("weights", w1.clone()), ("bias", b0.clone())] {
        let (ii, ww, bb, rr) = (i0.clone(), w1.clone(), b0.clone(), ro.clone());
        cases.push(case(format!("conv1x1/{which}"), point, move |t, v| {
            let x = if which == "x" { v } else { t.leaf(ii.clone()) };
            let wt = if which == "weights" { v } else { t.leaf(ww.clone()) };
            let b = if which == "bias" { v } else { t.leaf(bb.clone()) };
            let y = ops::conv1x1(t, x, wt, b, cin, cout, h * w);
            Ok(project(t, y, &rr))
        }));
    }
    cases
}

/// A normalised coordinate whose source position has fractional part in
/// `[0.1, 0.9]`.
fn off_lattice(rng: &mut DgmRng, len: usize) -> f64 {
    let cell = rng.gen_range(0..len - 1) as f64;
    let s = cell + rng.gen_range(0.1..0.9);
    2.0 * s / (len - 1) as f64 - 1.0
}

/// Source position of a grid coordinate stays at least `margin` from
/// lattice lines, or the coordinate is clipped by at least `margin`.
fn clear_of_kinks(g: f64, len: usize, margin: f64) -> bool {
    if g.abs() >= 1.0 {
        return g.abs() > 1.0 + margin;
    }
    let s = (g + 1.0) * 0.5 * (len - 1) as f64;
    (s - s.round()).abs() > margin
}

fn goad_cases(rng: &mut DgmRng) -> Vec<Case> {
    let mut cases = Vec::new();
    let c = 2;
    let (hs, ws, hg, wg) = (4, 5, 3, 3);
    let src = uniform_vec(rng, c * hs * ws, -1.0, 1.0);
    let ng = hg * wg;
    let mut grid: Vec<f64> = (0..ng).map(|_| off_lattice(rng, hs)).collect();
    grid.extend((0..ng).map(|_| off_lattice(rng, ws)));
    let r = uniform_vec(rng, c * ng, -1.0, 1.0);
    let (gg, rr) = (grid.clone(), r.clone());
    cases.push(case("grid_sample/source", src.clone(), move |t, s| {
        let g = t.leaf(gg.clone());
        let y = ops::grid_sample(t, s, g, c, (hs, ws), (hg, wg));
        Ok(project(t, y, &rr))
    }));
    cases.push(case("grid_sample/grid", grid, move |t, g| {
        let s = t.leaf(src.clone());
        let y = ops::grid_sample(t, s, g, c, (hs, ws), (hg, wg));
        Ok(project(t, y, &r))
    }));

    // Full decoder; resample until every warped position is clear of the
    // lattice and the clip boundary.
    let (h, w) = (4, 5);
    let n = h * w;
    let (c_low, c_up) = (2, 2);
    let (flow, d, psi) = loop {
        let flow = signed_away_from_zero(rng, 2 * n, 0.2, 1.0);
        let d = uniform_vec(rng, n, 0.3, 1.0);
        let psi = PsiWeights::init(rng);
        let mut t = Tape::new();
        let vf = t.leaf(flow.clone());
        let pv = PsiVars { weights: t.leaf(psi.weights.clone()), bias: t.scalar(psi.bias) };
        let z = ops::conv3x3(&mut t, vf, pv.weights, pv.bias, 2, 1, h, w);
        let alpha: Vec<f64> =
            t.value(z).iter().map(|&v| crate::goad::ALPHA_MAX * crate::gmamba::math::logistic(v)).collect();
        let base = crate::goad::SamplingGrid::base(h, w).expect("valid size");
        let ok = (0..2 * n).all(|i| {
            let g = base.data()[i] + flow[i] * d[i % n] * alpha[i % n];
            clear_of_kinks(g, if i < n { h } else { w }, 1e-4)
        });
        if ok {
            break (flow, d, psi);
        }
    };
    let f_low = uniform_vec(rng, c_low * n, -1.0, 1.0);
    let f_up = uniform_vec(rng, c_up * n, -1.0, 1.0);
    let ro = uniform_vec(rng, (c_low + c_up) * n, -1.0, 1.0);
    let inputs = [
        ("flow", flow.clone()),
        ("d_final", d.clone()),
        ("f_low", f_low.clone()),
        ("f_up", f_up.clone()),
        ("psi", psi.weights.clone()),
    ];
    for (which, point) in inputs {
        let (fl, dd, lo, up, pw, rr) = (flow.clone(), d.clone(), f_low.clone(), f_up.clone(), psi.clone(), ro.clone());
        cases.push(case(format!("goad/{which}"), point, move |t, v| {
            let pick = |t: &mut Tape, name: &str, val: &Vec<f64>| if which == name { v } else { t.leaf(val.clone()) };
            let vf = pick(t, "flow", &fl);
            let vd = pick(t, "d_final", &dd);
            let vl = pick(t, "f_low", &lo);
            let vu = pick(t, "f_up", &up);
            let psi_w = pick(t, "psi", &pw.weights);
            let psi_b = t.scalar(pw.bias);
            let y = ops::goad_forward(t, vl, vu, vf, vd, PsiVars { weights: psi_w, bias: psi_b }, (c_low, c_up), h, w)?;
            Ok(project(t, y, &rr))
        }));
    }
    cases
}

/// A labelled scene whose softmax probabilities keep OHEM confidences
/// clear of the threshold and sorted Lovász errors apart.
struct LossScene {
    k: usize,
    h: usize,
    w: usize,
    labels: LabelMask,
    logits: Vec<f64>,
    logits_aux: Vec<f64>,
}

fn min_sorted_gap(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
}

fn well_separated(k: usize, n: usize, labels: &[u16], logits: &[f64], cfg: &LossConfig) -> bool {
    let p = softmax_raw(k, n, logits);
    let valid: Vec<(usize, usize)> =
        labels.iter().enumerate().filter(|(_, &l)| l != IGNORE_LABEL).map(|(i, &l)| (i, l as usize)).collect();
    let p_true: Vec<f64> = valid.iter().map(|&(i, l)| p[l * n + i]).collect();
    if p_true.iter().any(|v| (v - cfg.ohem_threshold).abs() < 0.02) || min_sorted_gap(p_true) < 1e-3 {
        return false;
    }
    (0..k).all(|c| {
        let errors = valid.iter().map(|&(i, l)| if l == c { 1.0 - p[c * n + i] } else { p[c * n + i] }).collect();
        min_sorted_gap(errors) > 1e-3
    })
}

fn loss_scene(rng: &mut DgmRng, cfg: &LossConfig) -> LossScene {
    let (k, h, w) = (3, 4, 4);
    let n = h * w;
    loop {
        let mut labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..k as u16)).collect();
        labels[rng.gen_range(0..n)] = IGNORE_LABEL;
        let logits = uniform_vec(rng, k * n, -2.0, 2.0);
        let logits_aux = uniform_vec(rng, k * n, -2.0, 2.0);
        if well_separated(k, n, &labels, &logits, cfg) && well_separated(k, n, &labels, &logits_aux, cfg) {
            let labels = LabelMask::new(h, w, labels).expect("matching size");
            return LossScene { k, h, w, labels, logits, logits_aux };
        }
    }
}

/// Flow values in `[-amp, amp]` whose forward differences are all at least
/// `gap` apart.
fn tv_safe_flow(rng: &mut DgmRng, h: usize, w: usize, amp: f64, gap: f64) -> Vec<f64> {
    loop {
        let f = uniform_vec(rng, 2 * h * w, -amp, amp);
        let ok = (0..2).all(|c| {
            (0..h).all(|y| {
                (0..w).all(|x| {
                    let i = c * h * w + y * w + x;
                    (y + 1 == h || (f[i + w] - f[i]).abs() > gap) && (x + 1 == w || (f[i + 1] - f[i]).abs() > gap)
                })
            })
        });
        if ok {
            return f;
        }
    }
}

fn loss_cases(rng: &mut DgmRng) -> Vec<Case> {
    let cfg = LossConfig::default();
    let sc = loss_scene(rng, &cfg);
    let (k, h, w) = (sc.k, sc.h, sc.w);
    let n = h * w;
    let mut cases = Vec::new();

    let r = uniform_vec(rng, k * n, -1.0, 1.0);
    cases.push(case("softmax", sc.logits.clone(), move |t, z| {
        let p = ops::softmax(t, z, k, n);
        Ok(project(t, p, &r))
    }));

    // The four segmentation terms through the softmax.
    let d_gt = ScalarField::new(h, w, (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect()).expect("finite");
    for which in ["ce_ohem", "lovasz", "boundary", "aux"] {
        let (labels, dg) = (sc.labels.clone(), d_gt.clone());
        let point = if which == "aux" { sc.logits_aux.clone() } else { sc.logits.clone() };
        cases.push(case(format!("loss/{which}"), point, move |t, z| {
            let p = ops::softmax(t, z, k, n);
            let target = Target { classes: k, labels: &labels };
            match which {
                "ce_ohem" => ops::ce_ohem(t, p, target, cfg.ohem_threshold, cfg.min_kept_fraction),
                "lovasz" => ops::lovasz_softmax(t, p, target),
                "boundary" => ops::boundary_ce(t, p, target, &dg),
                _ => ops::aux_loss(t, p, target),
            }
        }));
    }
    // OHEM in its minimum-kept regime: a threshold below every confidence.
    let labels = sc.labels.clone();
    cases.push(case("loss/ce_ohem_min_kept", sc.logits.clone(), move |t, z| {
        let p = ops::softmax(t, z, k, n);
        ops::ce_ohem(t, p, Target { classes: k, labels: &labels }, 1e-9, 0.25)
    }));

    // Geometric terms.
    let target = GeometricPriors {
        vmap: ScalarField::new(h, w, uniform_vec(rng, n, 0.0, 1.0)).expect("finite"),
        flow: VectorField2::new(h, w, uniform_vec(rng, 2 * n, -1.0, 1.0)).expect("finite"),
        curv: ScalarField::new(h, w, uniform_vec(rng, n, -1.0, 1.0)).expect("finite"),
        d_coarse: d_gt.clone(),
    };
    let vmap = uniform_vec(rng, n, 0.0, 1.0);
    let flow = tv_safe_flow(rng, h, w, 1.0, 1e-3);
    let curv = uniform_vec(rng, n, -1.0, 1.0);
    // TV has exactly-zero partials wherever a pixel's neighbour signs
    // cancel; there the difference quotient is pure rounding noise of
    // order eps·|f|/h. TV is 1-homogeneous, so a small-amplitude field has
    // the same gradient and 100x less noise.
    cases.push(case("loss/tv", tv_safe_flow(rng, h, w, 0.01, 1e-4), move |t, f| {
        let tv = ops::tv_loss(t, f, h, w)?;
        Ok(t.scale(tv, TV_WEIGHT))
    }));
    for which in ["vmap", "flow", "curv"] {
        let (tg, vm, fl, cu) = (target.clone(), vmap.clone(), flow.clone(), curv.clone());
        let point = match which {
            "vmap" => vmap.clone(),
            "flow" => flow.clone(),
            _ => curv.clone(),
        };
        cases.push(case(format!("loss/geometric.{which}"), point, move |t, v| {
            let pred = PriorVars {
                vmap: if which == "vmap" { v } else { t.leaf(vm.clone()) },
                flow: if which == "flow" { v } else { t.leaf(fl.clone()) },
                curv: if which == "curv" { v } else { t.leaf(cu.clone()) },
            };
            ops::geometric_mse(t, pred, &tg)
        }));
    }
    let d_pred = uniform_vec(rng, n, 0.05, 0.95);
    let dg = d_gt.clone();
    cases.push(case("loss/d", d_pred.clone(), move |t, p| ops::d_loss(t, p, &dg, cfg.pos_weight)));

    // The full objective with respect to each of its inputs.
    let progress = rng.gen_range(0.0..1.0);
    let inputs = [
        ("logits", sc.logits.clone()),
        ("logits_aux", sc.logits_aux.clone()),
        ("d_pred", d_pred.clone()),
        ("vmap", vmap.clone()),
        ("flow", flow.clone()),
        ("curv", curv.clone()),
    ];
    for (which, point) in inputs {
        let (labels, dg, tg) = (sc.labels.clone(), d_gt.clone(), target.clone());
        let (lg, la, dp, vm, fl, cu) =
            (sc.logits.clone(), sc.logits_aux.clone(), d_pred.clone(), vmap.clone(), flow.clone(), curv.clone());
        cases.push(case(format!("loss/total.{which}"), point, move |t, v| {
            let pick = |t: &mut Tape, name: &str, val: &Vec<f64>| if which == name { v } else { t.leaf(val.clone()) };
            let z = pick(t, "logits", &lg);
            let za = pick(t, "logits_aux", &la);
            let d = pick(t, "d_pred", &dp);
            let pred = PriorVars { vmap: pick(t, "vmap", &vm), flow: pick(t, "flow", &fl), curv: pick(t, "curv", &cu) };
            let p = ops::softmax(t, z, k, n);
            let pa = ops::softmax(t, za, k, n);
            let targets = ops::LossTargets {
                target: Target { classes: k, labels: &labels },
                d_gt: &dg,
                priors: &tg,
                config: &cfg,
                t: progress,
            };
            Ok(ops::total_loss(t, p, pa, d, pred, targets)?.0)
        }));
    }
    cases
}

const SCOPE_SALT: [(GradScope, u64); 3] =
    [(GradScope::Scan, 0x5ca9), (GradScope::Goad, 0x60ad), (GradScope::Losses, 0x1055)];

/// Runs every operation in `scope` on `options.instances` seeded instances
/// and keeps the worst report per operation.
pub fn run_gradcheck(scope: GradScope, options: &GradCheckOptions) -> Result<GradCheckSummary> {
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for (family, salt) in SCOPE_SALT {
        if scope != GradScope::All && scope != family {
            continue;
        }
        for i in 0..options.instances {
            let mut rng = seeded(options.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (salt << 32) ^ i);
            let cases = match family {
                GradScope::Scan => scan_cases(&mut rng, i),
                GradScope::Goad => goad_cases(&mut rng),
                _ => loss_cases(&mut rng),
            };
            for c in cases {
                let r = check_gradient_scaled(&c.op, &c.point, options.step, options.corrupt_factor, &c.build)?;
                match reports.iter_mut().find(|x| x.op == c.op) {
                    Some(slot) => *slot = slot.clone().merge(r),
                    None => reports.push(r),
                }
            }
        }
    }
    Ok(GradCheckSummary { scope, tolerance: options.tolerance, instances: options.instances, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckOptions {
        GradCheckOptions { instances: 3, ..GradCheckOptions::default() }
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("losses".parse::<GradScope>().unwrap(), GradScope::Losses);
        assert!("everything".parse::<GradScope>().is_err());
        assert_eq!(GradScope::All.to_string(), "all");
    }

    #[test]
    fn each_scope_passes_on_a_few_instances() {
        for scope in [GradScope::Scan, GradScope::Goad, GradScope::Losses] {
            let s = run_gradcheck(scope, &quick()).unwrap();
            assert!(s.passes(), "{:#?}", s.reports);
        }
    }

    #[test]
    fn losses_scope_covers_every_objective_term() {
        let s = run_gradcheck(GradScope::Losses, &GradCheckOptions { instances: 1, ..quick() }).unwrap();
        for op in ["loss/ce_ohem", "loss/lovasz", "loss/boundary", "loss/aux", "loss/tv", "loss/d", "loss/total.logits"]
        {
            assert!(s.reports.iter().any(|r| r.op == op), "missing {op}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions { instances: 1, corrupt_factor: 1.01, ..quick() };
        assert!(!run_gradcheck(GradScope::Goad, &opts).unwrap().passes());
    }

    #[test]
    fn kink_guard() {
        assert!(clear_of_kinks(0.1, 5, 1e-4));
        assert!(!clear_of_kinks(0.0, 5, 1e-4));
        assert!(!clear_of_kinks(1.00001, 5, 1e-4));
        assert!(clear_of_kinks(1.5, 5, 1e-4));
    }
}
