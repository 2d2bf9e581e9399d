//! The diagonal selective scan along one serialized sequence.
//!
//! For each step `t` of channel `c`:
//!
//! ```text
//! Δ_t = softplus(w_delta·x_t + b_delta)
//! Ā_t = exp(Δ_t · A)                    A = -exp(a_log), elementwise over the state
//! h_t = Ā_t ⊙ h_{t-1} + Δ_t·(w_b·x_t)·x_t
//! y_t = ⟨w_c·x_t, h_t⟩ + d_skip·x_t
//! ```
//!
//! with `h_0 = 0`. Cost is `2 + 7·S` multiply-adds per step for state size
//! `S`: one for the timescale pre-activation, seven per state lane (decay
//! product, exponent argument, input projection, discretisation, state
//! update, readout projection, readout accumulate) and one for the skip.

use super::math::{logistic, softplus};
use super::params::{ChannelGrads, ChannelParams, ScanParams};
use crate::error::{DgmError, Result};

/// Multiply-adds charged per sequence element per channel.
pub const fn scan_madds_per_step(state_size: usize) -> u64 {
    2 + 7 * state_size as u64
}

/// Output of a 1-D scan together with its exact multiply-add count.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub madds: u64,
}

pub(crate) fn scan_line(x: &[f64], p: ChannelParams<'_>, y: &mut [f64], h: &mut [f64]) {
    h.iter_mut().for_each(|v| *v = 0.0);
    for (t, &xt) in x.iter().enumerate() {
        let delta = softplus(p.w_delta * xt + p.b_delta);
        let mut acc = p.d_skip * xt;
        for s in 0..h.len() {
            let a = -p.a_log[s].exp();
            let decay = (delta * a).exp();
            h[s] = decay * h[s] + delta * p.w_b[s] * xt * xt;
            acc += p.w_c[s] * xt * h[s];
        }
        y[t] = acc;
    }
}

/// Reverse pass of [`scan_line`]: adds `∂L/∂x` into `gx` and the parameter
/// gradients into `g`, given `gy = ∂L/∂y`.
pub(crate) fn scan_line_backward(x: &[f64], p: ChannelParams<'_>, gy: &[f64], gx: &mut [f64], g: &mut ChannelGrads) {
    let n = x.len();
    let s_len = p.a_log.len();
    let a: Vec<f64> = p.a_log.iter().map(|v| -v.exp()).collect();

    // Forward replay keeping the state history: hist[t] = h_t, hist[0] = h_0.
    let mut hist = vec![0.0; (n + 1) * s_len];
    let mut deltas = vec![0.0; n];
    let mut pre = vec![0.0; n];
    for t in 0..n {
        let z = p.w_delta * x[t] + p.b_delta;
        let delta = softplus(z);
        pre[t] = z;
        deltas[t] = delta;
        for s in 0..s_len {
            let prev = hist[t * s_len + s];
            hist[(t + 1) * s_len + s] = (delta * a[s]).exp() * prev + delta * p.w_b[s] * x[t] * x[t];
        }
    }

    let mut gh = vec![0.0; s_len];
    let mut ga = vec![0.0; s_len];
    for t in (0..n).rev() {
        let xt = x[t];
        let delta = deltas[t];
        let gyt = gy[t];
        let mut gxt = gyt * p.d_skip;
        g.d_skip += gyt * xt;
        let mut g_delta = 0.0;
        for s in 0..s_len {
            let h_t = hist[(t + 1) * s_len + s];
            let h_prev = hist[t * s_len + s];
            // readout
            g.w_c[s] += gyt * xt * h_t;
            gxt += gyt * p.w_c[s] * h_t;
            let ght = gh[s] + gyt * p.w_c[s] * xt;
            // h_t = decay·h_prev + Δ·w_b·x²
            let decay = (delta * a[s]).exp();
            let g_decay = ght * h_prev;
            g_delta += g_decay * decay * a[s];
            ga[s] += g_decay * decay * delta;
            g_delta += ght * p.w_b[s] * xt * xt;
            g.w_b[s] += ght * delta * xt * xt;
            gxt += ght * delta * p.w_b[s] * 2.0 * xt;
            gh[s] = ght * decay;
        }
        let gz = g_delta * logistic(pre[t]);
        g.w_delta += gz * xt;
        g.b_delta += gz;
        gxt += gz * p.w_delta;
        gx[t] += gxt;
    }
    for s in 0..s_len {
        // A = -exp(a_log) so dA/da_log = A.
        g.a_log[s] += ga[s] * a[s];
    }
}

fn check_channel(params: &ScanParams, channel: usize) -> Result<()> {
    params.validate()?;
    if channel >= params.channels {
        return Err(DgmError::OutOfRange(format!("channel {channel} of {}", params.channels)));
    }
    Ok(())
}

/// Runs the scan over one channel's sequence.
pub fn selective_scan_1d(x: &[f64], params: &ScanParams, channel: usize) -> Result<ScanOutput> {
    check_channel(params, channel)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(DgmError::NonFinite("scan input".into()));
    }
    let mut y = vec![0.0; x.len()];
    let mut h = vec![0.0; params.state_size];
    scan_line(x, params.channel(channel), &mut y, &mut h);
    Ok(ScanOutput { y, madds: x.len() as u64 * scan_madds_per_step(params.state_size) })
}

/// Vector-Jacobian product of [`selective_scan_1d`]. Returns `∂L/∂x` and a
/// parameter-shaped gradient that is zero outside `channel`.
pub fn selective_scan_1d_backward(
    x: &[f64],
    params: &ScanParams,
    channel: usize,
    grad_y: &[f64],
) -> Result<(Vec<f64>, ScanParams)> {
    check_channel(params, channel)?;
    if grad_y.len() != x.len() {
        return Err(crate::error::mismatch(x.len(), grad_y.len()));
    }
    let s = params.state_size;
    let mut gx = vec![0.0; x.len()];
    let mut g = ChannelGrads::zeros(s);
    scan_line_backward(x, params.channel(channel), grad_y, &mut gx, &mut g);
    let mut out = ScanParams {
        channels: params.channels,
        state_size: s,
        a_log: vec![0.0; params.a_log.len()],
        w_delta: vec![0.0; params.channels],
        b_delta: vec![0.0; params.channels],
        w_b: vec![0.0; params.w_b.len()],
        w_c: vec![0.0; params.w_c.len()],
        d_skip: vec![0.0; params.channels],
    };
    out.a_log[channel * s..(channel + 1) * s].copy_from_slice(&g.a_log);
    out.w_b[channel * s..(channel + 1) * s].copy_from_slice(&g.w_b);
    out.w_c[channel * s..(channel + 1) * s].copy_from_slice(&g.w_c);
    out.w_delta[channel] = g.w_delta;
    out.b_delta[channel] = g.b_delta;
    out.d_skip[channel] = g.d_skip;
    Ok((gx, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmamba::math::softplus_inv;
    use crate::rng::{seeded, uniform_vec};
    use std::f64::consts::LN_2;

    fn unit_params() -> ScanParams {
        ScanParams {
            channels: 1,
            state_size: 1,
            a_log: vec![0.0],
            w_delta: vec![0.0],
            b_delta: vec![softplus_inv(LN_2)],
            w_b: vec![1.0],
            w_c: vec![1.0],
            d_skip: vec![0.0],
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = ScanParams::init(2, 4, &mut seeded(1));
        let out = selective_scan_1d(&[0.0; 9], &p, 1).unwrap();
        assert!(out.y.iter().all(|&v| v == 0.0));
        assert_eq!(out.madds, 9 * 30);
    }

    #[test]
    fn single_step_hand_unrolled() {
        let out = selective_scan_1d(&[1.0], &unit_params(), 0).unwrap();
        assert!((out.y[0] - LN_2).abs() < 1e-12);
    }

    #[test]
    fn state_persists_but_readout_is_gated() {
        let p = unit_params();
        let out = selective_scan_1d(&[1.0, 0.0], &p, 0).unwrap();
        assert!((out.y[0] - LN_2).abs() < 1e-12);
        assert_eq!(out.y[1], 0.0);
        // With a nonzero second input the persisted state becomes visible:
        // h_2 = exp(-Δ)·ln2 + Δ·x², y_2 = x·h_2.
        let x2 = 0.5;
        let out = selective_scan_1d(&[1.0, x2], &p, 0).unwrap();
        let h2 = (-LN_2).exp() * LN_2 + LN_2 * x2 * x2;
        assert!((out.y[1] - x2 * h2).abs() < 1e-12);
    }

    #[test]
    fn three_steps_hand_unrolled_with_two_lanes() {
        let p = ScanParams {
            channels: 1,
            state_size: 2,
            a_log: vec![0.0, (0.5f64).ln()],
            w_delta: vec![0.5],
            b_delta: vec![-0.25],
            w_b: vec![1.0, -2.0],
            w_c: vec![0.75, 1.5],
            d_skip: vec![0.3],
        };
        let x = [0.4, -1.2, 0.9];
        let sp = |z: f64| (1.0 + z.exp()).ln();
        let mut h = [0.0, 0.0];
        let a = [-1.0, -0.5];
        let mut expect = vec![];
        for &xt in &x {
            let d = sp(0.5 * xt - 0.25);
            for s in 0..2 {
                h[s] = (d * a[s]).exp() * h[s] + d * p.w_b[s] * xt * xt;
            }
            expect.push(0.75 * xt * h[0] + 1.5 * xt * h[1] + 0.3 * xt);
        }
        let out = selective_scan_1d(&x, &p, 0).unwrap();
        for (a, b) in out.y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let p = unit_params();
        assert!(matches!(selective_scan_1d(&[f64::NAN], &p, 0), Err(DgmError::NonFinite(_))));
        assert!(selective_scan_1d(&[1.0], &p, 1).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = seeded(11);
        let p = ScanParams::init(2, 3, &mut rng);
        let x = uniform_vec(&mut rng, 6, -1.0, 1.0);
        let r = uniform_vec(&mut rng, 6, -1.0, 1.0);
        let f = |x: &[f64], p: &ScanParams| -> f64 {
            selective_scan_1d(x, p, 1).unwrap().y.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (gx, gp) = selective_scan_1d_backward(&x, &p, 1, &r).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp, &p) - f(&xm, &p)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7, "x[{i}]: {fd} vs {}", gx[i]);
        }
        for g in 0..6 {
            for i in 0..p.groups()[g].len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.groups_mut()[g][i] += h;
                pm.groups_mut()[g][i] -= h;
                let fd = (f(&x, &pp) - f(&x, &pm)) / (2.0 * h);
                let ad = gp.groups()[g][i];
                assert!((fd - ad).abs() < 1e-7, "group {g}[{i}]: {fd} vs {ad}");
            }
        }
    }

    #[test]
    fn long_sequences_stay_bounded() {
        let mut rng = seeded(5);
        let p = ScanParams::init(1, 4, &mut rng);
        let n = 1_000_000;
        let x = uniform_vec(&mut rng, n, -1.0, 1.0);
        // |Δ w_b x²| ≤ softplus(|w_delta| + |b_delta|)·max|w_b| and
        // Ā ≤ exp(softplus(-|w_delta| + b_delta)·max A).
        let cp = p.channel(0);
        let d_max = softplus(cp.w_delta.abs() + cp.b_delta);
        let d_min = softplus(-cp.w_delta.abs() + cp.b_delta);
        let wb_max = cp.w_b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let a_max = cp.a_log.iter().map(|v| -v.exp()).fold(f64::NEG_INFINITY, f64::max);
        let h_bound = d_max * wb_max / (1.0 - (d_min * a_max).exp());
        let wc_sum: f64 = cp.w_c.iter().map(|v| v.abs()).sum();
        let y_bound = wc_sum * h_bound + cp.d_skip.abs();
        let out = selective_scan_1d(&x, &p, 0).unwrap();
        assert!(out.y.iter().all(|v| v.is_finite() && v.abs() <= y_bound * (1.0 + 1e-9)));
    }
}
