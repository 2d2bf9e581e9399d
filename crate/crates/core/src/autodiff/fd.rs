//! Central finite differences and the gradient-check report.

use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{DgmError, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of [`rel_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`. The
/// divisor is the realised step `(x + h) - (x - h)`, which differs from
/// `2h` by rounding when `x` is not a multiple of `h`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let (up, down) = (orig + h, orig - h);
        x[i] = up;
        let hi = f(&x);
        x[i] = down;
        let lo = f(&x);
        x[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(DgmError::NonFinite(format!("function value near coordinate {i}")));
        }
        grad.push((hi - lo) / (up - down));
    }
    Ok(grad)
}

/// Worst coordinate of one or more gradient comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub step: f64,
}

impl GradCheckReport {
    pub fn compare(op: impl Into<String>, ad: &[f64], fd: &[f64], step: f64) -> Self {
        let (worst_index, max_rel_error) = ad
            .iter()
            .zip(fd)
            .map(|(&a, &b)| rel_error(a, b))
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        Self { op: op.into(), max_rel_error, worst_index, step }
    }

    /// Keeps whichever of the two reports is worse.
    pub fn merge(self, other: Self) -> Self {
        if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of `build` at `point` against central
/// differences of the same function. `build` receives a fresh tape and the
/// leaf holding the point and must return a scalar node.
pub fn check_gradient(
    op: &str,
    point: &[f64],
    h: f64,
    build: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    check_gradient_scaled(op, point, h, 1.0, build)
}

/// [`check_gradient`] with the tape gradient multiplied by `ad_scale`
/// before comparison; a scale other than 1 simulates a broken reverse rule.
pub(crate) fn check_gradient_scaled(
    op: &str,
    point: &[f64],
    h: f64,
    ad_scale: f64,
    build: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec());
    let out = build(&mut tape, x)?;
    let ad: Vec<f64> = tape.backward(out)?.wrt(x).iter().map(|g| g * ad_scale).collect();
    let mut failure = None;
    let fd = finite_difference(
        |p| {
            let mut t = Tape::new();
            let x = t.leaf(p.to_vec());
            match build(&mut t, x) {
                Ok(v) => t.value(v)[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        point,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport::compare(op, &ad, &fd?, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_slope() {
        let g = finite_difference(|x| x[0], &[0.7], FD_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_difference(|x| x[0].exp(), &[0.0], FD_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_is_an_error() {
        assert!(finite_difference(|x| x[0].ln(), &[0.0], FD_STEP).is_err());
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn check_gradient_on_a_composite() {
        let r = check_gradient("softplus-dot", &[0.3, -0.4, 1.1], FD_STEP, |t, x| {
            let s = t.softplus(x);
            let e = t.exp(s);
            Ok(t.dot(e, x))
        })
        .unwrap();
        assert!(r.passes(1e-8), "{r:?}");
    }
}
