//! Power-law fitting and effective-size analysis.
//!
//! Losses follow `L(x) = A * x^(-alpha) + b` with the irreducible floor `b`
//! held fixed, so the fit is an exact log-linear least squares in
//! `ln(L - b)` versus `ln x`. Inverting a fitted dense law turns a loss into
//! the dense parameter count that would reach it (the "effective size").

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default irreducible loss floor.
pub const B_FIXED_DEFAULT: f64 = 1.69;

/// Which quantity the law is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Total parameter count N.
    Params,
    /// Tokens seen T.
    Tokens,
}

/// A fitted (or reference) power law `A * x^(-alpha) + b_fixed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub alpha: f64,
    pub b_fixed: f64,
    pub axis: Axis,
    /// RMS residual in loss space over the fitted points.
    pub residual: f64,
}

/// Closed-form least squares of `ln(loss - b)` on `ln x`.
pub fn fit_power_law(points: &[(f64, f64)], b_fixed: f64, axis: Axis) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Analysis(format!(
            "need at least 2 points to fit, got {}",
            points.len()
        )));
    }
    for &(x, loss) in points {
        if x <= 0.0 {
            return Err(Error::Analysis(format!("non-positive x {x}")));
        }
        if loss <= b_fixed {
            return Err(Error::FitDomain(format!(
                "observed loss {loss} at or below the floor {b_fixed}"
            )));
        }
    }
    let n = points.len() as f64;
    let mut su = 0.0;
    let mut sy = 0.0;
    let mut suu = 0.0;
    let mut suy = 0.0;
    for &(x, loss) in points {
        let u = x.ln();
        let y = (loss - b_fixed).ln();
        su += u;
        sy += y;
        suu += u * u;
        suy += u * y;
    }
    let denom = n * suu - su * su;
    if denom.abs() < 1e-300 {
        return Err(Error::Analysis("all x values coincide; slope undefined".into()));
    }
    let slope = (n * suy - su * sy) / denom;
    let intercept = (sy - slope * su) / n;
    let alpha = -slope;
    let a = intercept.exp();
    if alpha <= 0.0 {
        return Err(Error::FitDomain(format!(
            "fitted exponent {alpha} is not positive; loss does not decay with x"
        )));
    }
    let mut fit = PowerLawFit { a, alpha, b_fixed, axis, residual: 0.0 };
    let mse: f64 = points
        .iter()
        .map(|&(x, loss)| {
            let e = eval_law(&fit, x) - loss;
            e * e
        })
        .sum::<f64>()
        / n;
    fit.residual = mse.sqrt();
    Ok(fit)
}

/// Optional free-floor fit: golden-section search over b with the
/// closed-form fit inside, minimizing the log-space sum of squares.
pub fn fit_power_law_free_b(points: &[(f64, f64)], axis: Axis) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Analysis("free-floor fit needs at least 3 points".into()));
    }
    let min_loss = points.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
    let log_sse = |b: f64| -> f64 {
        match fit_power_law(points, b, axis) {
            Ok(fit) => points
                .iter()
                .map(|&(x, loss)| {
                    let y = (loss - b).ln();
                    let p = fit.a.ln() - fit.alpha * x.ln();
                    (y - p) * (y - p)
                })
                .sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let (mut lo, mut hi) = (0.0f64, min_loss * (1.0 - 1e-9));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if log_sse(m1) <= log_sse(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let b = 0.5 * (lo + hi);
    fit_power_law(points, b, axis)
}

/// Predicted loss at x.
pub fn eval_law(fit: &PowerLawFit, x: f64) -> f64 {
    fit.a * x.powf(-fit.alpha) + fit.b_fixed
}

/// Invert a dense law: the x whose predicted loss equals `loss`.
pub fn effective_size(loss: f64, dense_fit: &PowerLawFit) -> Result<f64> {
    if loss <= dense_fit.b_fixed {
        return Err(Error::FitDomain(format!(
            "loss {loss} at or below the irreducible floor {}",
            dense_fit.b_fixed
        )));
    }
    Ok((dense_fit.a / (loss - dense_fit.b_fixed)).powf(1.0 / dense_fit.alpha))
}

/// Percent reduction in perplexity going from `dense_loss` to `lev_loss`:
/// `100 * (1 - exp(lev - dense))`. Negative when the second loss is worse.
pub fn perplexity_reduction(dense_loss: f64, lev_loss: f64) -> f64 {
    100.0 * (1.0 - (lev_loss - dense_loss).exp())
}

/// Reference law constants for the two model families in both experimental
/// regimes, on both axes. Shipped as re-derivable fixtures for `eval_law`.
pub mod reference {
    use super::{Axis, PowerLawFit, B_FIXED_DEFAULT};

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Family {
        Dense,
        Leviathan,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Regime {
        IsoBody,
        Isoparam,
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct ReferenceLaw {
        pub family: Family,
        pub regime: Regime,
        pub axis: Axis,
        pub a: f64,
        pub alpha: f64,
    }

    pub const REFERENCE_LAWS: [ReferenceLaw; 8] = [
        ReferenceLaw { family: Family::Dense, regime: Regime::IsoBody, axis: Axis::Params, a: 2000.0, alpha: 0.38 },
        ReferenceLaw { family: Family::Leviathan, regime: Regime::IsoBody, axis: Axis::Params, a: 9800.0, alpha: 0.47 },
        ReferenceLaw { family: Family::Dense, regime: Regime::IsoBody, axis: Axis::Tokens, a: 180.0, alpha: 0.39 },
        ReferenceLaw { family: Family::Leviathan, regime: Regime::IsoBody, axis: Axis::Tokens, a: 450.0, alpha: 0.47 },
        ReferenceLaw { family: Family::Dense, regime: Regime::Isoparam, axis: Axis::Params, a: 360.0, alpha: 0.29 },
        ReferenceLaw { family: Family::Leviathan, regime: Regime::Isoparam, axis: Axis::Params, a: 166.0, alpha: 0.26 },
        ReferenceLaw { family: Family::Dense, regime: Regime::Isoparam, axis: Axis::Tokens, a: 52.0, alpha: 0.29 },
        ReferenceLaw { family: Family::Leviathan, regime: Regime::Isoparam, axis: Axis::Tokens, a: 31.0, alpha: 0.26 },
    ];

    pub fn law(family: Family, regime: Regime, axis: Axis) -> PowerLawFit {
        let r = REFERENCE_LAWS
            .iter()
            .find(|l| l.family == family && l.regime == regime && l.axis == axis)
            .expect("all eight combinations are present");
        PowerLawFit { a: r.a, alpha: r.alpha, b_fixed: B_FIXED_DEFAULT, axis, residual: 0.0 }
    }
}

/// One row of the frontier report.
#[derive(Debug, Clone, Serialize)]
pub struct FrontierRow {
    pub name: String,
    pub params: u64,
    pub tokens_seen: u64,
    pub loss: f64,
    pub ppl: f64,
    /// Dense-equivalent size from the supplied dense fit, when available.
    pub n_eq: Option<f64>,
    /// Perplexity reduction against the paired dense run, when paired.
    pub reduction_pct: Option<f64>,
}

/// Completed-run summary fed into the frontier report.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub params: u64,
    pub tokens_seen: u64,
    pub loss: f64,
    /// Loss of the paired dense baseline, if this run is the second half of
    /// a pair.
    pub paired_dense_loss: Option<f64>,
}

/// Build report rows; `dense_fit` enables the effective-size column.
pub fn frontier_report(runs: &[RunSummary], dense_fit: Option<&PowerLawFit>) -> Vec<FrontierRow> {
    runs.iter()
        .map(|r| FrontierRow {
            name: r.name.clone(),
            params: r.params,
            tokens_seen: r.tokens_seen,
            loss: r.loss,
            ppl: r.loss.exp(),
            n_eq: dense_fit.and_then(|f| effective_size(r.loss, f).ok()),
            reduction_pct: r.paired_dense_loss.map(|d| perplexity_reduction(d, r.loss)),
        })
        .collect()
}

/// CSV rendering of the frontier report (header always present).
pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("name,params,tokens_seen,loss,ppl,n_eq,reduction_pct\n");
    for r in rows {
        let n_eq = r.n_eq.map(|v| format!("{v}")).unwrap_or_default();
        let red = r.reduction_pct.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, r.params, r.tokens_seen, r.loss, r.ppl, n_eq, red
        ));
    }
    out
}
