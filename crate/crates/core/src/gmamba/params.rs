use rand::Rng;

use super::math::softplus_inv;
use crate::error::{mismatch, DgmError, Result};
use crate::rng::{uniform_vec, DgmRng};

/// Per-channel parameters of the diagonal selective scan.
///
/// Channel `c` owns `state_size` consecutive entries of `a_log`, `w_b` and
/// `w_c`, and one entry of `w_delta`, `b_delta` and `d_skip`. The state
/// matrix is `A = -exp(a_log)`, strictly negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    pub channels: usize,
    pub state_size: usize,
    pub a_log: Vec<f64>,
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

impl ScanParams {
    /// Timescale bias giving `Δ = 0.5` at zero input.
    pub fn default_b_delta() -> f64 {
        softplus_inv(0.5)
    }

    /// Initialisation: `a_log = ln U[0.5, 1.5]`, projections `U[-1, 1]`
    /// (per-channel fan-in is 1), `Δ` bias at `softplus⁻¹(0.5)`, skip 1.
    pub fn init(channels: usize, state_size: usize, rng: &mut DgmRng) -> Self {
        let cs = channels * state_size;
        let a_log = (0..cs).map(|_| rng.gen_range(0.5f64..1.5).ln()).collect();
        let w_delta = uniform_vec(rng, channels, -1.0, 1.0);
        let w_b = uniform_vec(rng, cs, -1.0, 1.0);
        let w_c = uniform_vec(rng, cs, -1.0, 1.0);
        Self {
            channels,
            state_size,
            a_log,
            w_delta,
            b_delta: vec![Self::default_b_delta(); channels],
            w_b,
            w_c,
            d_skip: vec![1.0; channels],
        }
    }

    /// All weights zero except a unit decay rate and the default timescale
    /// bias.
    pub fn zeros(channels: usize, state_size: usize) -> Self {
        let cs = channels * state_size;
        Self {
            channels,
            state_size,
            a_log: vec![0.0; cs],
            w_delta: vec![0.0; channels],
            b_delta: vec![Self::default_b_delta(); channels],
            w_b: vec![0.0; cs],
            w_c: vec![0.0; cs],
            d_skip: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_size == 0 {
            return Err(DgmError::Config("state_size must be at least 1".into()));
        }
        let cs = self.channels * self.state_size;
        for (name, v, n) in [
            ("a_log", &self.a_log, cs),
            ("w_delta", &self.w_delta, self.channels),
            ("b_delta", &self.b_delta, self.channels),
            ("w_b", &self.w_b, cs),
            ("w_c", &self.w_c, cs),
            ("d_skip", &self.d_skip, self.channels),
        ] {
            if v.len() != n {
                return Err(mismatch(format!("{n} entries in {name}"), v.len()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(DgmError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    /// The parameter groups in a fixed order: `a_log, w_delta, b_delta, w_b,
    /// w_c, d_skip`.
    pub fn groups(&self) -> [&Vec<f64>; 6] {
        [&self.a_log, &self.w_delta, &self.b_delta, &self.w_b, &self.w_c, &self.d_skip]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.a_log, &mut self.w_delta, &mut self.b_delta, &mut self.w_b, &mut self.w_c, &mut self.d_skip]
    }

    pub(crate) fn channel(&self, c: usize) -> ChannelParams<'_> {
        let s = self.state_size;
        ChannelParams {
            a_log: &self.a_log[c * s..(c + 1) * s],
            w_delta: self.w_delta[c],
            b_delta: self.b_delta[c],
            w_b: &self.w_b[c * s..(c + 1) * s],
            w_c: &self.w_c[c * s..(c + 1) * s],
            d_skip: self.d_skip[c],
        }
    }
}

/// Borrowed view of one channel's parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelParams<'a> {
    pub a_log: &'a [f64],
    pub w_delta: f64,
    pub b_delta: f64,
    pub w_b: &'a [f64],
    pub w_c: &'a [f64],
    pub d_skip: f64,
}

/// Gradients for one channel's parameters.
#[derive(Clone, Debug, Default)]
pub(crate) struct ChannelGrads {
    pub a_log: Vec<f64>,
    pub w_delta: f64,
    pub b_delta: f64,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub d_skip: f64,
}

impl ChannelGrads {
    pub fn zeros(state_size: usize) -> Self {
        Self {
            a_log: vec![0.0; state_size],
            w_b: vec![0.0; state_size],
            w_c: vec![0.0; state_size],
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmamba::math::softplus;
    use crate::rng::seeded;

    #[test]
    fn init_is_valid_and_stable() {
        let p = ScanParams::init(8, 4, &mut seeded(7));
        p.validate().unwrap();
        assert!(p.a_log.iter().all(|&a| (0.5f64.ln()..1.5f64.ln()).contains(&a)));
        assert!((softplus(p.b_delta[0]) - 0.5).abs() < 1e-15);
        assert_eq!(p, ScanParams::init(8, 4, &mut seeded(7)));
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut p = ScanParams::zeros(2, 3);
        p.w_b.pop();
        assert!(p.validate().is_err());
        assert!(ScanParams::zeros(2, 0).validate().is_err());
    }
}
