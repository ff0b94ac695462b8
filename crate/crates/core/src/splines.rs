//! Univariate B-spline bases on the closed unit interval.
//!
//! A grid of G uniform segments with a clamped (open-uniform) knot vector
//! carries `G + p` basis functions of degree p. Evaluation uses the
//! triangular de Boor table over the active span, so only the `p + 1`
//! locally supported functions are ever touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamped uniform knot grid on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    segments: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    /// Build a grid with `segments` uniform spans and degree `degree`.
    /// The first and last knots repeat `degree + 1` times so the endpoints
    /// are interpolatory.
    pub fn new(segments: usize, degree: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::Config("spline grid needs at least one segment".into()));
        }
        if degree + 1 > MAX_LOCAL {
            return Err(Error::Config(format!(
                "spline degree {degree} exceeds the supported maximum {}",
                MAX_LOCAL - 1
            )));
        }
        let mut knots = Vec::with_capacity(segments + 2 * degree + 1);
        for _ in 0..=degree {
            knots.push(0.0);
        }
        for s in 1..segments {
            knots.push(s as f64 / segments as f64);
        }
        for _ in 0..=degree {
            knots.push(1.0);
        }
        Ok(SplineGrid { segments, degree, knots })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, `G + p`.
    pub fn n_basis(&self) -> usize {
        self.segments + self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index of the knot span containing x; x = 1 maps to the last span so the
    /// closed interval is covered.
    fn span(&self, x: f64) -> usize {
        let last = self.n_basis() - 1;
        if x >= 1.0 {
            return last;
        }
        (self.degree + (x * self.segments as f64) as usize).min(last)
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("spline argument {x} outside [0, 1]")));
        }
        Ok(())
    }

    /// Evaluate all basis functions at x. At most `degree + 1` entries are
    /// nonzero; they sum to one.
    pub fn basis_eval(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_basis()];
        self.basis_eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant; `out` must hold `n_basis()` values and is
    /// fully overwritten.
    pub fn basis_eval_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        self.check_domain(x)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        let span = self.span(x);
        let mut local = [0.0; MAX_LOCAL];
        self.local_basis(x, span, self.degree, &mut local);
        out[span - self.degree..=span].copy_from_slice(&local[..self.degree + 1]);
        Ok(())
    }

    /// Analytic first derivatives of all basis functions at x, via the
    /// degree-lowering formula.
    pub fn basis_grad(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_basis()];
        self.basis_grad_into(x, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`Self::basis_grad`].
    pub fn basis_grad_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        self.check_domain(x)?;
        let p = self.degree;
        out.iter_mut().for_each(|v| *v = 0.0);
        if p == 0 {
            return Ok(());
        }
        // Degree p-1 functions over the same knot vector; only the window
        // around the active span is nonzero.
        let span = self.span(x);
        let mut local = [0.0; MAX_LOCAL];
        self.local_basis(x, span, p - 1, &mut local);
        let lower_at = |i: usize| -> f64 {
            let lo = span - (p - 1);
            if i >= lo && i <= span {
                local[i - lo]
            } else {
                0.0
            }
        };
        let t = &self.knots;
        let pf = p as f64;
        // derivative support: indices whose window overlaps the span
        let first = span.saturating_sub(p);
        let last = span.min(self.n_basis() - 1);
        for i in first..=last {
            let mut d = 0.0;
            if t[i + p] > t[i] {
                d += pf * lower_at(i) / (t[i + p] - t[i]);
            }
            if t[i + p + 1] > t[i + 1] {
                d -= pf * lower_at(i + 1) / (t[i + p + 1] - t[i + 1]);
            }
            out[i] = d;
        }
        Ok(())
    }

    /// Triangular de Boor table: the `q + 1` nonzero degree-q values
    /// `N[span-q ..= span]` at x, written into the head of `buf`.
    fn local_basis(&self, x: f64, span: usize, q: usize, buf: &mut [f64; MAX_LOCAL]) {
        let t = &self.knots;
        let mut left = [0.0; MAX_LOCAL];
        let mut right = [0.0; MAX_LOCAL];
        buf[0] = 1.0;
        for j in 1..=q {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { buf[r] / denom };
                buf[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            buf[j] = saved;
        }
    }
}

/// Stack budget for the active basis window; degrees above this are outside
/// the supported configuration space.
const MAX_LOCAL: usize = 16;
