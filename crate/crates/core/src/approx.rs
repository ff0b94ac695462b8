//! Separable-surface fitting on the unit cube: the generator's mode
//! machinery (spline expansion, per-mode products) without codebooks,
//! trained against closed-form targets. Capacity should buy accuracy on
//! low-rank targets, and that is what the fixtures measure.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::splines::SplineGrid;
use crate::tape::{Precision, Tape};
use crate::tensor::Tensor;
use crate::training::{adamw_update_slice, lr_at, TrainConfig};

/// A closed-form target surface on `[0,1]^d`.
pub struct SurfaceTarget {
    pub name: &'static str,
    pub dim: usize,
    pub f: fn(&[f64]) -> f64,
}

fn const_target(_: &[f64]) -> f64 {
    0.7
}

fn rank1_target(x: &[f64]) -> f64 {
    (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).cos()
}

fn rank2_target(x: &[f64]) -> f64 {
    rank1_target(x) + x[0] * x[1]
}

pub const FIXTURES: [SurfaceTarget; 3] = [
    SurfaceTarget { name: "const", dim: 2, f: const_target },
    SurfaceTarget { name: "rank1", dim: 2, f: rank1_target },
    SurfaceTarget { name: "rank2", dim: 2, f: rank2_target },
];

pub fn fixture(name: &str) -> Result<&'static SurfaceTarget> {
    FIXTURES
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("unknown fixture '{name}' (const|rank1|rank2)")))
}

/// Fit configuration; the documented fixture budget is 5,000 AdamW steps at
/// peak rate 1e-2 with a short warmup and cosine decay.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ApproxConfig {
    pub modes: usize,
    pub segments: usize,
    pub degree: usize,
    pub steps: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    /// Training sample: an inclusive uniform grid with this many points per
    /// axis.
    pub train_grid: usize,
    /// Evaluation grid for the sup-norm error, points per axis.
    pub eval_grid: usize,
    pub seed: u64,
}

impl ApproxConfig {
    pub fn new(modes: usize, segments: usize) -> Self {
        ApproxConfig {
            modes,
            segments,
            degree: 2,
            steps: 5_000,
            peak_lr: 1e-2,
            min_lr: 1e-4,
            warmup_steps: 100,
            train_grid: 50,
            eval_grid: 100,
            seed: 0,
        }
    }
}

/// The trained separable model: spline coefficients `[d, M, n_basis, 1]`,
/// evaluated as a sum over M modes of products over d axes.
pub struct SurfaceModel {
    pub dim: usize,
    pub modes: usize,
    pub grid: Arc<SplineGrid>,
    pub theta: Tensor,
}

impl SurfaceModel {
    /// Pure evaluation at one point.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let nb = self.grid.n_basis();
        let m = self.modes;
        let theta = self.theta.data();
        let mut acc = vec![1.0; m];
        for (r, &xi) in x.iter().enumerate() {
            let basis = self.grid.basis_eval(xi)?;
            for (j, a) in acc.iter_mut().enumerate() {
                let mut phi = 0.0;
                for (q, &bq) in basis.iter().enumerate() {
                    phi += bq * theta[(r * m + j) * nb + q];
                }
                *a *= phi;
            }
        }
        Ok(acc.iter().sum())
    }

    /// The univariate factor of one mode along one axis, exposing the
    /// sum-of-products structure directly.
    pub fn factor(&self, axis: usize, mode: usize, x: f64) -> Result<f64> {
        let nb = self.grid.n_basis();
        let basis = self.grid.basis_eval(x)?;
        let theta = self.theta.data();
        Ok((0..nb).map(|q| basis[q] * theta[(axis * self.modes + mode) * nb + q]).sum())
    }
}

/// Fit result record, JSON-serializable for the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct ApproxResult {
    pub fixture: String,
    pub modes: usize,
    pub segments: usize,
    pub steps_run: u64,
    pub final_loss: f64,
    pub sup_error: f64,
    pub diverged: bool,
}

fn cube_grid(dim: usize, per_axis: usize) -> Vec<f64> {
    // inclusive uniform grid over [0,1]^dim, row-major
    let mut points = Vec::with_capacity(per_axis.pow(dim as u32) * dim);
    let denom = (per_axis - 1).max(1) as f64;
    let mut idx = vec![0usize; dim];
    loop {
        for &i in &idx {
            points.push(i as f64 / denom);
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                return points;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < per_axis {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Gradient-train a rank-M separable spline model against `target` and
/// report the sup-norm error on a dense evaluation grid.
pub fn fit_surface(target: &SurfaceTarget, cfg: &ApproxConfig) -> Result<(SurfaceModel, ApproxResult)> {
    if target.dim > 4 {
        return Err(Error::Config(format!("fixture dimension {} exceeds 4", target.dim)));
    }
    let dim = target.dim;
    let grid = Arc::new(SplineGrid::new(cfg.segments, cfg.degree)?);
    let nb = grid.n_basis();
    let m = cfg.modes;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // each mode starts near 1/M so the initial sum is O(1) for every M
    let init_center = (1.0 / m as f64).powf(1.0 / dim as f64);
    let mut theta =
        Tensor::randn(vec![dim, m, nb, 1], init_center, 0.05 * init_center, &mut rng);
    let mut m_state = Tensor::zeros(theta.shape().to_vec());
    let mut v_state = Tensor::zeros(theta.shape().to_vec());

    let points = cube_grid(dim, cfg.train_grid);
    let n = points.len() / dim;
    let targets: Vec<f64> =
        points.chunks_exact(dim).map(|p| (target.f)(p)).collect();
    let x_tensor = Tensor::from_vec(vec![n, dim], points)?;
    let t_tensor = Tensor::from_vec(vec![n, 1], targets)?;
    let ones = Tensor::full(vec![m, 1], 1.0);

    let sched = TrainConfig {
        peak_lr: cfg.peak_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps,
        ..TrainConfig::desk(cfg.steps.max(cfg.warmup_steps + 1))
    };

    let mut initial_loss = f64::INFINITY;
    let mut final_loss = f64::INFINITY;
    let mut above_initial = 0u32;
    let mut diverged = false;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let mut tape = Tape::new(Precision::Double);
        let theta_var = tape.param(theta.clone());
        let x = tape.input(x_tensor.clone());
        let basis = tape.spline_expand(x, &grid)?;
        let phi = tape.spline_phi(basis, theta_var)?;
        let prods = tape.prod_modes(phi)?;
        let flat = tape.reshape(prods, vec![n, m])?;
        let ones_var = tape.input(ones.clone());
        let pred = tape.matmul(flat, ones_var)?;
        let t_var = tape.input(t_tensor.clone());
        let diff = tape.sub(pred, t_var)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq)?;
        let loss = tape.scale(sum, 1.0 / n as f64)?;
        tape.backward(loss)?;

        let loss_val = tape.val(loss).scalar_value()?;
        if step == 0 {
            initial_loss = loss_val;
        }
        final_loss = loss_val;
        steps_run = step + 1;
        if !loss_val.is_finite() {
            diverged = true;
            break;
        }
        if loss_val > initial_loss {
            above_initial += 1;
            if above_initial >= 500 {
                diverged = true;
                break;
            }
        } else {
            above_initial = 0;
        }

        let g = tape.grad(theta_var).expect("theta receives gradient").clone();
        adamw_update_slice(
            theta.data_mut(),
            g.data(),
            m_state.data_mut(),
            v_state.data_mut(),
            step + 1,
            lr_at(step, &sched),
            sched.beta1,
            sched.beta2,
            sched.eps,
            0.0,
        );
    }

    let model = SurfaceModel { dim, modes: m, grid, theta };
    let mut sup = 0.0f64;
    let eval_points = cube_grid(dim, cfg.eval_grid);
    for p in eval_points.chunks_exact(dim) {
        let err = (model.eval(p)? - (target.f)(p)).abs();
        sup = sup.max(err);
    }
    let result = ApproxResult {
        fixture: target.name.to_string(),
        modes: m,
        segments: cfg.segments,
        steps_run,
        final_loss,
        sup_error: sup,
        diverged,
    };
    Ok((model, result))
}
