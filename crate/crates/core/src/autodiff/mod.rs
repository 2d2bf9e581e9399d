//! Minimal reverse-mode differentiation over flat `f64` vectors.
//!
//! A [`Tape`] records nodes in creation order; every node's inputs precede
//! it, so [`Tape::backward`] visits each node exactly once by walking the
//! record in reverse. Values are plain vectors; shapes are the caller's
//! business.
//!
//! Kink conventions: `relu'(0) = 0`; `clip` passes gradient only strictly
//! inside its interval; sort-based losses differentiate through the
//! realised order.
//!
//! Length mismatches between operands are programming errors and panic.

mod fd;
pub mod ops;

pub(crate) use fd::check_gradient_scaled;
pub use fd::{check_gradient, finite_difference, rel_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};

use crate::error::{DgmError, Result};
use crate::gmamba::math::{logistic, softplus};

/// Reverse rule: `(grad_out, input values, output value)` to one gradient
/// per input, each the length of that input.
pub type Backward = Box<dyn Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Vec<f64>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An input node.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Records an operation with a hand-written reverse rule.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Vec<f64>,
        backward: impl Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: Some(Box::new(backward)),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let len = self.nodes[output.0].value.len();
        if len != 1 {
            return Err(DgmError::NonScalarOutput(len));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[output.0][0] = 1.0;
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = &node.backward else { continue };
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let inputs: Vec<&[f64]> = node.parents.iter().map(|&p| self.nodes[p].value.as_slice()).collect();
            let upstream = rule(&grads[id], &inputs, &node.value);
            debug_assert_eq!(upstream.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(upstream) {
                debug_assert_eq!(g.len(), grads[p].len());
                for (acc, v) in grads[p].iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn same_len(&self, a: Var, b: Var) {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        assert_eq!(la, lb, "operand lengths differ: {la} vs {lb}");
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.custom(&[a], value, move |g, x, y| {
            vec![g.iter().zip(x[0]).zip(y).map(|((g, &x), &y)| g * df(x, y)).collect()]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.custom(&[a, b], value, |g, _, _| vec![g.to_vec(), g.to_vec()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.custom(&[a, b], value, |g, _, _| vec![g.to_vec(), g.iter().map(|v| -v).collect()])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.custom(&[a, b], value, |g, x, _| {
            vec![g.iter().zip(x[1]).map(|(g, y)| g * y).collect(), g.iter().zip(x[0]).map(|(g, x)| g * x).collect()]
        })
    }

    /// `s · a` for a constant `s`.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| s * x).collect();
        self.custom(&[a], value, move |g, _, _| vec![g.iter().map(|v| s * v).collect()])
    }

    /// `a + s` for a constant `s`.
    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + s).collect();
        self.custom(&[a], value, |g, _, _| vec![g.to_vec()])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, logistic, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| logistic(x))
    }

    /// Subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp to `[lo, hi]`; gradient 1 strictly inside, 0 elsewhere.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.custom(&[a], value, |g, x, _| vec![vec![g[0]; x[0].len()]])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Inner product, a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b);
        let value = vec![self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum()];
        self.custom(&[a, b], value, |g, x, _| {
            vec![x[1].iter().map(|v| g[0] * v).collect(), x[0].iter().map(|v| g[0] * v).collect()]
        })
    }

    /// Contiguous sub-range `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a)[start..start + len].to_vec();
        self.custom(&[a], value, move |g, x, _| {
            let mut out = vec![0.0; x[0].len()];
            out[start..start + len].copy_from_slice(g);
            vec![out]
        })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).len()).collect();
        let value = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.custom(parts, value, move |g, _, _| {
            let mut at = 0;
            lens.iter()
                .map(|&l| {
                    at += l;
                    g[at - l..at].to_vec()
                })
                .collect()
        })
    }

    /// `times` back-to-back copies of `a`; broadcasts a plane over channels.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let value = self.value(a).repeat(times);
        self.custom(&[a], value, move |g, x, _| {
            let n = x[0].len();
            let mut out = vec![0.0; n];
            for chunk in g.chunks(n.max(1)).take(times) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            vec![out]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x), &[6.0]);
    }

    #[test]
    fn logistic_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.logistic(x);
        assert_eq!(t.backward(y).unwrap().wrt(x), &[0.25]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().wrt(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn clip_passes_gradient_only_inside() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-2.0, -1.0, 0.3, 1.0, 1.5]);
        let c = t.clip(x, -1.0, 1.0);
        let s = t.sum(c);
        assert_eq!(t.value(c), &[-1.0, -1.0, 0.3, 1.0, 1.0]);
        assert_eq!(t.backward(s).unwrap().wrt(x), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(DgmError::NonScalarOutput(2))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f = (x·y) + exp(x), df/dx = y + exp(x).
        let mut t = Tape::new();
        let x = t.scalar(0.5);
        let y = t.scalar(-2.0);
        let p = t.mul(x, y);
        let e = t.exp(x);
        let f = t.add(p, e);
        let g = t.backward(f).unwrap();
        assert!((g.wrt(x)[0] - (-2.0 + 0.5f64.exp())).abs() < 1e-15);
        assert_eq!(g.wrt(y), &[0.5]);
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let build = |t: &mut Tape, x: Var| {
            let a = t.softplus(x);
            let b = t.ln(a);
            let c = t.logistic(x);
            (t.sum(b), t.sum(c))
        };
        let x0 = vec![0.3, -1.2, 2.0];
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let (f, g) = build(&mut t, x);
        let gf = t.backward(f).unwrap().wrt(x).to_vec();
        let gg = t.backward(g).unwrap().wrt(x).to_vec();
        let h = t.add(f, g);
        let gh = t.backward(h).unwrap().wrt(x).to_vec();
        for i in 0..3 {
            assert!((gh[i] - (gf[i] + gg[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let b = t.leaf(vec![3.0]);
        let c = t.concat(&[a, b]);
        let tiled = t.tile(c, 2);
        let s = t.slice(tiled, 1, 4);
        let w = t.leaf(vec![1.0, 10.0, 100.0, 1000.0]);
        let f = t.dot(s, w);
        assert_eq!(t.value(s), &[2.0, 3.0, 1.0, 2.0]);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(a), &[100.0, 1001.0]);
        assert_eq!(g.wrt(b), &[10.0]);
    }
}
