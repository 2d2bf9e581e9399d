//! Toy end-to-end head trained by plain gradient descent on the composite
//! objective.
//!
//! ```text
//! (F, ΔD)   = cascade(X; D_coarse, Φ)
//! D_final   = σ(D_coarse + ΔD)
//! fused     = goad(X, F, Φ, D_final)          2C channels
//! probs     = softmax(W_cls · fused)
//! probs_aux = softmax(W_aux · F)
//! (V̂,Φ̂,Ĉ)   = W_geo · fused
//! ```
//!
//! The geometric prior targets, the boundary target and the guidance fields
//! are all derived from the ground-truth mask.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{self, CascadeVars, LossTargets, PriorVars, PsiVars, ScanVars, Shape, Target};
use crate::autodiff::{Tape, Var};
use crate::error::{DgmError, Result};
use crate::gmamba::{CascadeConfig, CascadeKind, LayerKind};
use crate::goad::PsiWeights;
use crate::losses::{LossConfig, LossReport};
use crate::rng::{seeded, uniform_vec};
use crate::scene::OverfitScene;

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, learning_rate: 0.01, loss: LossConfig::default() }
    }
}

/// Parameters of the toy head, stored flat in a fixed order: per cascade
/// layer six scan groups then the depthwise kernels, the refiner (mix,
/// conv, bias), ψ (weights, bias), then classifier, auxiliary and geometry
/// heads (weights, bias each).
#[derive(Clone, Debug, PartialEq)]
pub struct TinyHead {
    pub channels: usize,
    pub state_size: usize,
    pub classes: usize,
    pub kinds: [LayerKind; 3],
    pub params: Vec<Vec<f64>>,
}

const PER_LAYER: usize = 7;
const GEO_OUT: usize = 4;

impl TinyHead {
    pub fn init(channels: usize, state_size: usize, classes: usize, kind: CascadeKind, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let cascade = CascadeConfig::init(channels, state_size, kind, &mut rng);
        let mut params = Vec::new();
        for layer in &cascade.layers {
            params.extend(layer.params.groups().into_iter().cloned());
            params.push(layer.kernels.weights().to_vec());
        }
        params.extend([cascade.refiner.mix, cascade.refiner.conv, vec![cascade.refiner.bias]]);
        let psi = PsiWeights::init(&mut rng);
        params.extend([psi.weights, vec![psi.bias]]);
        let fused = 2 * channels;
        let a = 1.0 / (fused as f64).sqrt();
        let b = 1.0 / (channels as f64).sqrt();
        params.push(uniform_vec(&mut rng, classes * fused, -a, a));
        params.push(vec![0.0; classes]);
        params.push(uniform_vec(&mut rng, classes * channels, -b, b));
        params.push(vec![0.0; classes]);
        params.push(uniform_vec(&mut rng, GEO_OUT * fused, -a, a));
        params.push(vec![0.0; GEO_OUT]);
        Self { channels, state_size, classes, kinds: kind.layer_kinds(), params }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }
}

/// Nodes produced by one forward pass.
struct Forward {
    leaves: Vec<Var>,
    loss: Var,
    report: LossReport,
}

fn forward(tape: &mut Tape, head: &TinyHead, scene: &OverfitScene, config: &LossConfig, t: f64) -> Result<Forward> {
    let (c, k) = (head.channels, head.classes);
    let (h, w) = scene.labels.dims();
    let n = h * w;
    let shape = Shape::new(c, h, w);
    let leaves: Vec<Var> = head.params.iter().map(|p| tape.leaf(p.clone())).collect();

    let layers = (0..3)
        .map(|l| {
            let g = &leaves[l * PER_LAYER..(l + 1) * PER_LAYER];
            let scan = ScanVars {
                state_size: head.state_size,
                a_log: g[0],
                w_delta: g[1],
                b_delta: g[2],
                w_b: g[3],
                w_c: g[4],
                d_skip: g[5],
            };
            (head.kinds[l], scan, g[6])
        })
        .collect();
    let r = 3 * PER_LAYER;
    let cascade = CascadeVars { layers, mix: leaves[r], conv: leaves[r + 1], bias: leaves[r + 2] };
    let psi = PsiVars { weights: leaves[r + 3], bias: leaves[r + 4] };
    let (cls_w, cls_b, aux_w, aux_b, geo_w, geo_b) =
        (leaves[r + 5], leaves[r + 6], leaves[r + 7], leaves[r + 8], leaves[r + 9], leaves[r + 10]);

    let x = tape.leaf(scene.features.data().to_vec());
    let d_coarse = tape.leaf(scene.priors.d_coarse.data().to_vec());
    let flow = tape.leaf(scene.priors.flow.data().to_vec());

    let (context, delta_d) = ops::cascade_forward(tape, x, &cascade, d_coarse, flow, shape);
    let pre = tape.add(d_coarse, delta_d);
    let d_final = tape.logistic(pre);
    let fused = ops::goad_forward(tape, x, context, flow, d_final, psi, (c, c), h, w)?;

    let logits = ops::conv1x1(tape, fused, cls_w, cls_b, 2 * c, k, n);
    let probs = ops::softmax(tape, logits, k, n);
    let logits_aux = ops::conv1x1(tape, context, aux_w, aux_b, c, k, n);
    let probs_aux = ops::softmax(tape, logits_aux, k, n);
    let geo = ops::conv1x1(tape, fused, geo_w, geo_b, 2 * c, GEO_OUT, n);
    let pred =
        PriorVars { vmap: tape.slice(geo, 0, n), flow: tape.slice(geo, n, 2 * n), curv: tape.slice(geo, 3 * n, n) };

    let targets = LossTargets {
        target: Target { classes: k, labels: &scene.labels },
        d_gt: &scene.priors.d_coarse,
        priors: &scene.priors,
        config,
        t,
    };
    let (loss, report) = ops::total_loss(tape, probs, probs_aux, d_final, pred, targets)?;
    Ok(Forward { leaves, loss, report })
}

/// Evaluates the objective without updating.
pub fn evaluate(head: &TinyHead, scene: &OverfitScene, config: &LossConfig, t: f64) -> Result<LossReport> {
    Ok(forward(&mut Tape::new(), head, scene, config, t)?.report)
}

/// Runs `steps` gradient-descent updates and returns the loss report at
/// every step `0..=steps`, evaluated at schedule position `step / steps`.
/// Fails at the first non-finite loss or gradient.
pub fn train(head: &mut TinyHead, scene: &OverfitScene, config: &TrainConfig) -> Result<Vec<(usize, LossReport)>> {
    if config.steps == 0 {
        return Err(DgmError::Config("training needs at least one step".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(DgmError::Config(format!("learning rate {} must be positive", config.learning_rate)));
    }
    config.loss.validate()?;
    if scene.features.channels() != head.channels {
        return Err(crate::error::mismatch(format!("{} channels", head.channels), scene.features.channels()));
    }
    let mut log = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let t = step as f64 / config.steps as f64;
        let mut tape = Tape::new();
        let f = forward(&mut tape, head, scene, &config.loss, t).map_err(|e| match e {
            DgmError::NonFinite(what) => DgmError::NonFinite(format!("{what} at step {step}")),
            other => other,
        })?;
        if !f.report.total.is_finite() {
            return Err(DgmError::NonFinite(format!("loss at step {step}")));
        }
        log.push((step, f.report));
        if step == config.steps {
            break;
        }
        let grads = tape.backward(f.loss)?;
        for (p, &v) in head.params.iter_mut().zip(&f.leaves) {
            let g = grads.wrt(v);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DgmError::NonFinite(format!("gradient at step {step}")));
            }
            for (a, b) in p.iter_mut().zip(g) {
                *a -= config.learning_rate * b;
            }
        }
    }
    Ok(log)
}
