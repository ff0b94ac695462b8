//! The separable embedding generator: token id -> coordinate digits ->
//! codebook seed -> latent point in (0,1)^d_seed -> spline mode products ->
//! output/residual projection.
//!
//! Parameters are token-agnostic apart from the k small codebooks, so the
//! vocabulary footprint of the indexing stage is k*b rows instead of one row
//! per token.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coords::{decompose, CoordinateMap};
use crate::error::{Error, Result};
use crate::splines::SplineGrid;
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

fn default_d_seed() -> usize {
    128
}
fn default_segments() -> usize {
    32
}
fn default_degree() -> usize {
    2
}
fn default_modes() -> usize {
    8
}
fn default_channels() -> usize {
    1
}

/// Hyperparameters of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent coordinate axes.
    pub k: u32,
    /// Codebook rows per axis.
    pub b: u64,
    #[serde(default = "default_d_seed")]
    pub d_seed: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Output channels per mode; 1 keeps each mode a scalar surface.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Embedding dimension produced.
    pub d: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.b == 0
            || self.d_seed == 0
            || self.segments == 0
            || self.modes == 0
            || self.channels == 0
            || self.d == 0
        {
            return Err(Error::Config(format!("generator config has a zero field: {self:?}")));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.segments + self.degree
    }

    pub fn coordinate_map(&self) -> CoordinateMap {
        CoordinateMap { k: self.k, b: self.b }
    }
}

/// Per-component parameter counts from the closed-form accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GeneratorParamCount {
    pub codebooks: u64,
    pub seed_projection: u64,
    pub layer_norm: u64,
    pub spline_coefficients: u64,
    pub output_projection: u64,
    pub residual_projection: u64,
    pub total: u64,
}

/// Closed-form parameter count:
/// `k*b*d_seed + (d_seed^2 + d_seed) + 2*d_seed + d_seed*M*n_basis*c + D*M*c + D*d_seed`.
pub fn generator_param_count(cfg: &GeneratorConfig) -> GeneratorParamCount {
    let d_seed = cfg.d_seed as u64;
    let d = cfg.d as u64;
    let m = cfg.modes as u64;
    let c = cfg.channels as u64;
    let nb = cfg.n_basis() as u64;
    let codebooks = cfg.k as u64 * cfg.b * d_seed;
    let seed_projection = d_seed * d_seed + d_seed;
    let layer_norm = 2 * d_seed;
    let spline_coefficients = d_seed * m * nb * c;
    let output_projection = d * m * c;
    let residual_projection = d * d_seed;
    GeneratorParamCount {
        codebooks,
        seed_projection,
        layer_norm,
        spline_coefficients,
        output_projection,
        residual_projection,
        total: codebooks
            + seed_projection
            + layer_norm
            + spline_coefficients
            + output_projection
            + residual_projection,
    }
}

/// All learnable state of the generator.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    cfg: GeneratorConfig,
    grid: Arc<SplineGrid>,
    /// k codebooks, each `[b, d_seed]`.
    pub codebooks: Vec<Tensor>,
    /// `[d_seed, d_seed]`, input-major.
    pub w_seed: Tensor,
    pub b_seed: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// Spline coefficients `[d_seed, modes, n_basis, channels]`.
    pub theta: Tensor,
    /// `[modes*channels, d]`, input-major.
    pub w_out: Tensor,
    /// `[d_seed, d]`, input-major.
    pub w_res: Tensor,
    version: u64,
}

pub const LATENT_LN_EPS: f64 = 1e-5;

impl GeneratorParams {
    /// Initialize: projections and codebooks N(0, 0.02^2), layer norm affine
    /// at identity, spline coefficients 1 + N(0, 0.05^2) so every mode
    /// product starts near one.
    pub fn init<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grid = Arc::new(SplineGrid::new(cfg.segments, cfg.degree)?);
        let d_seed = cfg.d_seed;
        let codebooks = (0..cfg.k)
            .map(|_| Tensor::randn(vec![cfg.b as usize, d_seed], 0.0, 0.02, rng))
            .collect();
        Ok(GeneratorParams {
            codebooks,
            w_seed: Tensor::randn(vec![d_seed, d_seed], 0.0, 0.02, rng),
            b_seed: Tensor::zeros(vec![d_seed]),
            ln_gain: Tensor::full(vec![d_seed], 1.0),
            ln_bias: Tensor::zeros(vec![d_seed]),
            theta: Tensor::randn(
                vec![d_seed, cfg.modes, cfg.n_basis(), cfg.channels],
                1.0,
                0.05,
                rng,
            ),
            w_out: Tensor::randn(vec![cfg.modes * cfg.channels, cfg.d], 0.0, 0.02, rng),
            w_res: Tensor::randn(vec![d_seed, cfg.d], 0.0, 0.02, rng),
            grid,
            cfg,
            version: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Arc<SplineGrid> {
        &self.grid
    }

    /// Monotone counter bumped on every mutable parameter access; embed-table
    /// caches use it to detect staleness.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Visit tensors in canonical order (codebooks first).
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        for (r, cb) in self.codebooks.iter().enumerate() {
            f(format!("gen.codebook.{r}"), cb);
        }
        f("gen.w_seed".into(), &self.w_seed);
        f("gen.b_seed".into(), &self.b_seed);
        f("gen.ln_gain".into(), &self.ln_gain);
        f("gen.ln_bias".into(), &self.ln_bias);
        f("gen.theta".into(), &self.theta);
        f("gen.w_out".into(), &self.w_out);
        f("gen.w_res".into(), &self.w_res);
    }

    /// Mutable visit in the same canonical order; bumps the version.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.version += 1;
        for (r, cb) in self.codebooks.iter_mut().enumerate() {
            f(format!("gen.codebook.{r}"), cb);
        }
        f("gen.w_seed".into(), &mut self.w_seed);
        f("gen.b_seed".into(), &mut self.b_seed);
        f("gen.ln_gain".into(), &mut self.ln_gain);
        f("gen.ln_bias".into(), &mut self.ln_bias);
        f("gen.theta".into(), &mut self.theta);
        f("gen.w_out".into(), &mut self.w_out);
        f("gen.w_res".into(), &mut self.w_res);
    }

    /// Register every tensor on a tape as a trainable parameter.
    pub fn register(&self, tape: &mut Tape) -> GeneratorVars {
        GeneratorVars {
            codebooks: self.codebooks.iter().map(|cb| tape.param(cb.clone())).collect(),
            w_seed: tape.param(self.w_seed.clone()),
            b_seed: tape.param(self.b_seed.clone()),
            ln_gain: tape.param(self.ln_gain.clone()),
            ln_bias: tape.param(self.ln_bias.clone()),
            theta: tape.param(self.theta.clone()),
            w_out: tape.param(self.w_out.clone()),
            w_res: tape.param(self.w_res.clone()),
        }
    }

    /// Digit tuples for a slice of token ids, one index vector per axis.
    fn digit_columns(&self, ids: &[u32]) -> Result<Vec<Vec<u32>>> {
        let map = self.cfg.coordinate_map();
        let mut cols = vec![Vec::with_capacity(ids.len()); self.cfg.k as usize];
        for &id in ids {
            let digits = decompose(id as u64, map)?;
            for (r, &d) in digits.iter().enumerate() {
                cols[r].push(d as u32);
            }
        }
        Ok(cols)
    }

    // ---- pure per-token reference path used by tests and small queries ----

    /// Codebook seed: sum of one row per axis.
    pub fn seed(&self, id: u32) -> Result<Vec<f64>> {
        let map = self.cfg.coordinate_map();
        let digits = decompose(id as u64, map)?;
        let d_seed = self.cfg.d_seed;
        let mut z = vec![0.0; d_seed];
        for (r, &dig) in digits.iter().enumerate() {
            let row = &self.codebooks[r].data()[dig as usize * d_seed..(dig as usize + 1) * d_seed];
            for (zi, &ci) in z.iter_mut().zip(row) {
                *zi += ci;
            }
        }
        Ok(z)
    }

    /// Latent coordinate: sigmoid(LN(W_seed z + b)). Every component lands
    /// strictly inside (0,1).
    pub fn latent_coord(&self, z: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_seed;
        let mut u = vec![0.0; d];
        let w = self.w_seed.data();
        for (i, zi) in z.iter().enumerate() {
            if *zi == 0.0 {
                continue;
            }
            for j in 0..d {
                u[j] += zi * w[i * d + j];
            }
        }
        for (uj, bj) in u.iter_mut().zip(self.b_seed.data()) {
            *uj += bj;
        }
        let mean = u.iter().sum::<f64>() / d as f64;
        let var = u.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LATENT_LN_EPS).sqrt();
        let gain = self.ln_gain.data();
        let bias = self.ln_bias.data();
        u.iter()
            .enumerate()
            .map(|(j, &x)| {
                let ln = (x - mean) * inv_std * gain[j] + bias[j];
                1.0 / (1.0 + (-ln).exp())
            })
            .collect()
    }

    /// Value of one rank-1 mode at a latent point: per channel, the product
    /// over latent axes of the spline function for that axis and mode.
    pub fn mode_eval(&self, latent: &[f64], mode: usize) -> Result<Vec<f64>> {
        let (m, nb, c) = (self.cfg.modes, self.cfg.n_basis(), self.cfg.channels);
        if mode >= m {
            return Err(Error::Index(format!("mode {mode} out of range ({m} modes)")));
        }
        let theta = self.theta.data();
        let mut out = vec![1.0; c];
        for (r, &x) in latent.iter().enumerate() {
            let basis = self.grid.basis_eval(x)?;
            for (ch, o) in out.iter_mut().enumerate() {
                let mut phi = 0.0;
                for (q, &bq) in basis.iter().enumerate() {
                    phi += bq * theta[((r * m + mode) * nb + q) * c + ch];
                }
                *o *= phi;
            }
        }
        Ok(out)
    }

    /// Embedding of a latent point: W_out over stacked mode values plus the
    /// residual projection of the latent coordinate.
    pub fn embed_from_latent(&self, latent: &[f64]) -> Result<Vec<f64>> {
        let (m, d_out) = (self.cfg.modes, self.cfg.d);
        let mut stacked = Vec::with_capacity(m * self.cfg.channels);
        for j in 0..m {
            stacked.extend(self.mode_eval(latent, j)?);
        }
        let wo = self.w_out.data();
        let wr = self.w_res.data();
        let mut e = vec![0.0; d_out];
        for (jc, &s) in stacked.iter().enumerate() {
            for (o, ei) in e.iter_mut().enumerate() {
                *ei += s * wo[jc * d_out + o];
            }
        }
        for (i, &x) in latent.iter().enumerate() {
            for (o, ei) in e.iter_mut().enumerate() {
                *ei += x * wr[i * d_out + o];
            }
        }
        Ok(e)
    }

    /// Embedding of one token through the tape path, bit-identical to the
    /// corresponding row of a batched forward.
    pub fn embed(&self, id: u32) -> Result<Vec<f64>> {
        let mut tape = Tape::new(Precision::Double);
        let vars = self.register(&mut tape);
        let e = forward(&mut tape, &vars, self, &[id])?;
        Ok(tape.val(e).data().to_vec())
    }

    /// Materialize embeddings for ids `[0, v_raw)`; the cache remembers the
    /// parameter version it was built from.
    pub fn embed_table(&self, v_raw: u32) -> Result<EmbedTable> {
        if v_raw == 0 {
            return Err(Error::Config("embed_table needs at least one token".into()));
        }
        let ids: Vec<u32> = (0..v_raw).collect();
        let mut tape = Tape::new(Precision::Double);
        let vars = self.register(&mut tape);
        let e = forward(&mut tape, &vars, self, &ids)?;
        Ok(EmbedTable { rows: tape.val(e).clone(), version: self.version })
    }
}

/// Tape handles for the generator parameters.
pub struct GeneratorVars {
    pub codebooks: Vec<Var>,
    pub w_seed: Var,
    pub b_seed: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub theta: Var,
    pub w_out: Var,
    pub w_res: Var,
}

impl GeneratorVars {
    /// Handles in the same canonical order as `GeneratorParams::visit`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = self.codebooks.clone();
        out.extend([
            self.w_seed,
            self.b_seed,
            self.ln_gain,
            self.ln_bias,
            self.theta,
            self.w_out,
            self.w_res,
        ]);
        out
    }
}

/// Latent coordinates for a batch of token ids, on tape: `[n, d_seed]`.
pub fn forward_latent(
    tape: &mut Tape,
    vars: &GeneratorVars,
    params: &GeneratorParams,
    ids: &[u32],
) -> Result<Var> {
    let cols = params.digit_columns(ids)?;
    let mut z: Option<Var> = None;
    for (r, col) in cols.iter().enumerate() {
        let rows = tape.gather_rows(vars.codebooks[r], col)?;
        z = Some(match z {
            None => rows,
            Some(acc) => tape.add(acc, rows)?,
        });
    }
    let z = z.expect("k >= 1 validated at construction");
    let proj = tape.matmul(z, vars.w_seed)?;
    let proj = tape.add_bias(proj, vars.b_seed)?;
    let ln = tape.layer_norm(proj, vars.ln_gain, vars.ln_bias, LATENT_LN_EPS)?;
    tape.sigmoid(ln)
}

/// Full generator forward for a batch of token ids: `[n, D]` embeddings.
pub fn forward(
    tape: &mut Tape,
    vars: &GeneratorVars,
    params: &GeneratorParams,
    ids: &[u32],
) -> Result<Var> {
    let cfg = params.config();
    let latent = forward_latent(tape, vars, params, ids)?;
    let basis = tape.spline_expand(latent, params.grid())?;
    let phi = tape.spline_phi(basis, vars.theta)?;
    let modes = tape.prod_modes(phi)?;
    let flat = tape.reshape(modes, vec![ids.len(), cfg.modes * cfg.channels])?;
    let main = tape.matmul(flat, vars.w_out)?;
    let res = tape.matmul(latent, vars.w_res)?;
    tape.add(main, res)
}

/// Cached embedding table tied to the parameter version that produced it.
pub struct EmbedTable {
    rows: Tensor,
    version: u64,
}

impl EmbedTable {
    /// Borrow the rows, failing if the parameters have changed since the
    /// cache was built.
    pub fn rows(&self, params: &GeneratorParams) -> Result<&Tensor> {
        if params.version() != self.version {
            return Err(Error::Internal(format!(
                "stale embedding table: built at parameter version {}, now {}",
                self.version,
                params.version()
            )));
        }
        Ok(&self.rows)
    }

    /// Rows without the staleness check, for callers that manage freshness
    /// themselves.
    pub fn rows_unchecked(&self) -> &Tensor {
        &self.rows
    }
}
