//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation records its inputs and enough context to compute a
//! vector-Jacobian product. `backward` walks the tape once in reverse and
//! accumulates gradients additively at fan-out. All reductions run in a fixed
//! loop order, so identical inputs give bit-identical outputs and gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rope;
use crate::splines::SplineGrid;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Compute dtype policy. `Double` is the verification mode; `Single` rounds
/// each primitive's output through f32 storage, emulating a single-precision
/// run while keeping one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

struct AttnCache {
    rot_q: Vec<f64>,
    rot_k: Vec<f64>,
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose2d { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { a: usize, bias: usize },
    Sigmoid { a: usize },
    Silu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Power { a: usize, p: f64 },
    SumAll { a: usize },
    Reshape { a: usize },
    GatherRows { table: usize, indices: Vec<u32> },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxCrossEntropy { logits: usize, targets: Vec<u32>, probs: Vec<f64> },
    SplineExpand { x: usize, grid: Arc<SplineGrid> },
    SplinePhi { basis: usize, theta: usize, n: usize, d: usize, nb: usize, m: usize, c: usize },
    ProdModes { phi: usize, n: usize, d: usize, m: usize, c: usize },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        rope_base: f64,
        cache: AttnCache,
    },
}

/// The tape: an arena of values plus the operations that produced them.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Register a value that does not receive gradients (data, constants).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Register a trainable parameter.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient accumulated for `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, mut t: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::Single {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let id = self.vals.len();
        self.vals.push(t);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(id)
    }

    fn push_result(&mut self, t: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires = parents.iter().any(|&p| self.requires_grad[p]);
        self.push(t, op, requires)
    }

    // ---- primitive operations -------------------------------------------

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.vals[a.0].dims2()?;
        let (kb, n) = self.vals[b.0].dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&mut out, self.vals[a.0].data(), self.vals[b.0].data(), m, ka, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push_result(t, Op::Matmul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].dims2()?;
        let src = self.vals[a.0].data();
        let mut out = vec![0.0; m * n];
        transpose_into(&mut out, src, m, n);
        let t = Tensor::from_vec(vec![n, m], out)?;
        Ok(self.push_result(t, Op::Transpose2d { a: a.0 }, &[a.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let ta = &self.vals[a.0];
        let tb = &self.vals[b.0];
        let (shape, data) = if ta.shape() == tb.shape() {
            (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(s, y)).collect())
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, s)).collect())
        } else {
            return Err(Error::Dimension(format!(
                "elementwise op on incompatible shapes {:?} and {:?} \
                 (only equal-shape or scalar broadcasting supported)",
                ta.shape(),
                tb.shape()
            )));
        };
        let t = Tensor::from_vec(shape, data)?;
        let parents = match &op {
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => [*a, *b],
            _ => unreachable!(),
        };
        Ok(self.push_result(t, op, &parents))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map_unary(a, |x| c * x);
        Ok(self.push_result(t, Op::Scale { a: a.0, c }, &[a.0]))
    }

    /// Add a `[d]` bias vector to every row of a `[n x d]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.vals[a.0].dims2()?;
        if self.vals[bias.0].shape() != [d] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match row width {d}",
                self.vals[bias.0].shape()
            )));
        }
        let mut data = self.vals[a.0].data().to_vec();
        let bd = self.vals[bias.0].data();
        for row in data.chunks_exact_mut(d) {
            for (x, &b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let t = Tensor::from_vec(vec![n, d], data)?;
        Ok(self.push_result(t, Op::AddBias { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, sigmoid);
        Ok(self.push_result(t, Op::Sigmoid { a: a.0 }, &[a.0]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, |x| x * sigmoid(x));
        Ok(self.push_result(t, Op::Silu { a: a.0 }, &[a.0]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map_unary(a, f64::exp);
        Ok(self.push_result(t, Op::Exp { a: a.0 }, &[a.0]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of a non-positive element".into()));
        }
        let t = self.map_unary(a, f64::ln);
        Ok(self.push_result(t, Op::Log { a: a.0 }, &[a.0]))
    }

    /// Elementwise `x^p` for a fixed exponent.
    pub fn power(&mut self, a: Var, p: f64) -> Result<Var> {
        let fractional = p.fract() != 0.0;
        for &x in self.vals[a.0].data() {
            if fractional && x < 0.0 {
                return Err(Error::Domain(format!(
                    "negative base {x} with non-integer exponent {p}"
                )));
            }
            if x == 0.0 && p < 0.0 {
                return Err(Error::Domain("zero base with negative exponent".into()));
            }
        }
        let t = self.map_unary(a, |x| x.powf(p));
        Ok(self.push_result(t, Op::Power { a: a.0, p }, &[a.0]))
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = &self.vals[a.0];
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::from_vec(src.shape().to_vec(), data).expect("shape preserved")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.vals[a.0].data().iter().sum();
        Ok(self.push_result(Tensor::scalar(s), Op::SumAll { a: a.0 }, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::from_vec(shape, self.vals[a.0].data().to_vec())?;
        Ok(self.push_result(t, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[u32]) -> Result<Var> {
        let (rows, d) = self.vals[table.0].dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.vals[table.0].data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i as usize * d..(i as usize + 1) * d]);
        }
        let t = Tensor::from_vec(vec![indices.len(), d], data)?;
        Ok(self.push_result(
            t,
            Op::GatherRows { table: table.0, indices: indices.to_vec() },
            &[table.0],
        ))
    }

    /// Per-row layer normalization over the last axis with learnable affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.vals[x.0].shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on rank-0".into()))?;
        if self.vals[gain.0].shape() != [d] || self.vals[bias.0].shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} do not match width {d}",
                self.vals[gain.0].shape(),
                self.vals[bias.0].shape()
            )));
        }
        let rows = self.vals[x.0].numel() / d;
        let xd = self.vals[x.0].data();
        let gd = self.vals[gain.0].data();
        let bd = self.vals[bias.0].data();
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push_result(
            t,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, inv_std: inv_stds },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, v) = self.vals[logits.0].dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index(format!("target id {bad} outside [0, {v})")));
        }
        let xd = self.vals[logits.0].data();
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &xd[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            let lse = max + denom.ln();
            loss += lse - row[targets[r] as usize];
            let prow = &mut probs[r * v..(r + 1) * v];
            for j in 0..v {
                prow[j] = (row[j] - lse).exp();
            }
        }
        loss /= rows as f64;
        Ok(self.push_result(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            &[logits.0],
        ))
    }

    /// Expand every element of `x` (values in `[0,1]`) into its B-spline basis
    /// vector; output shape is `x.shape + [n_basis]`.
    pub fn spline_expand(&mut self, x: Var, grid: &Arc<SplineGrid>) -> Result<Var> {
        let src = &self.vals[x.0];
        let nb = grid.n_basis();
        let mut data = vec![0.0; src.numel() * nb];
        for (row, &v) in data.chunks_exact_mut(nb).zip(src.data()) {
            grid.basis_eval_into(v, row)?;
        }
        let mut shape = src.shape().to_vec();
        shape.push(nb);
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push_result(t, Op::SplineExpand { x: x.0, grid: Arc::clone(grid) }, &[x.0]))
    }

    /// Contract basis values `[n, d, nb]` with coefficients `[d, m, nb, c]`
    /// over the basis axis, producing per-dimension mode values `[n, d, m, c]`.
    pub fn spline_phi(&mut self, basis: Var, theta: Var) -> Result<Var> {
        let bshape = self.vals[basis.0].shape().to_vec();
        let tshape = self.vals[theta.0].shape().to_vec();
        let (n, d, nb) = match bshape.as_slice() {
            [n, d, nb] => (*n, *d, *nb),
            s => return Err(Error::Dimension(format!("spline_phi basis must be rank 3, got {s:?}"))),
        };
        let (td, m, tnb, c) = match tshape.as_slice() {
            [td, m, tnb, c] => (*td, *m, *tnb, *c),
            s => return Err(Error::Dimension(format!("spline_phi theta must be rank 4, got {s:?}"))),
        };
        if td != d || tnb != nb {
            return Err(Error::Dimension(format!(
                "spline_phi mismatch: basis [{n},{d},{nb}] vs theta {tshape:?}"
            )));
        }
        let bd = self.vals[basis.0].data();
        let td_ = self.vals[theta.0].data();
        let mut out = vec![0.0; n * d * m * c];
        for i in 0..n {
            for r in 0..d {
                let b_off = (i * d + r) * nb;
                let o_off = (i * d + r) * m * c;
                for j in 0..m {
                    for q in 0..nb {
                        let bq = bd[b_off + q];
                        if bq == 0.0 {
                            continue;
                        }
                        let t_off = ((r * m + j) * nb + q) * c;
                        let o_jc = o_off + j * c;
                        for ch in 0..c {
                            out[o_jc + ch] += bq * td_[t_off + ch];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![n, d, m, c], out)?;
        Ok(self.push_result(
            t,
            Op::SplinePhi { basis: basis.0, theta: theta.0, n, d, nb, m, c },
            &[basis.0, theta.0],
        ))
    }

    /// Multiply per-dimension mode values over the dimension axis:
    /// `[n, d, m, c] -> [n, m, c]`. Backward uses leave-one-out prefix/suffix
    /// products, so legitimate zero crossings are handled exactly.
    pub fn prod_modes(&mut self, phi: Var) -> Result<Var> {
        let shape = self.vals[phi.0].shape().to_vec();
        let (n, d, m, c) = match shape.as_slice() {
            [n, d, m, c] => (*n, *d, *m, *c),
            s => return Err(Error::Dimension(format!("prod_modes expects rank 4, got {s:?}"))),
        };
        let pd = self.vals[phi.0].data();
        let mut out = vec![1.0; n * m * c];
        for i in 0..n {
            for r in 0..d {
                let p_off = (i * d + r) * m * c;
                let o_off = i * m * c;
                for jc in 0..m * c {
                    out[o_off + jc] *= pd[p_off + jc];
                }
            }
        }
        let t = Tensor::from_vec(vec![n, m, c], out)?;
        Ok(self.push_result(t, Op::ProdModes { phi: phi.0, n, d, m, c }, &[phi.0]))
    }

    /// Fused causal self-attention over `[batch*seq, dim]` projections:
    /// RoPE on q/k, scaled dot-product scores, causal softmax, value mix.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        rope_base: f64,
    ) -> Result<Var> {
        let (n, dim) = self.vals[q.0].dims2()?;
        for other in [k, v] {
            if self.vals[other.0].shape() != [n, dim] {
                return Err(Error::Dimension(format!(
                    "attention q/k/v shapes differ: {:?} vs {:?}",
                    self.vals[q.0].shape(),
                    self.vals[other.0].shape()
                )));
            }
        }
        if n != batch * seq {
            return Err(Error::Dimension(format!(
                "attention rows {n} != batch {batch} * seq {seq}"
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
        }
        let hd = dim / heads;
        if hd % 2 != 0 {
            return Err(Error::Config(format!("head dim {hd} must be even for RoPE")));
        }

        let qd = self.vals[q.0].data();
        let kd = self.vals[k.0].data();
        let vd = self.vals[v.0].data();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut out = vec![0.0; n * dim];
        let mut rot_q = vec![0.0; n * dim];
        let mut rot_k = vec![0.0; n * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];

        let mut qs = vec![0.0; seq * hd];
        let mut ks = vec![0.0; seq * hd];
        let mut kst = vec![0.0; hd * seq];
        let mut vs = vec![0.0; seq * hd];
        let mut scores = vec![0.0; seq * seq];
        let mut outs = vec![0.0; seq * hd];

        for bi in 0..batch {
            for hi in 0..heads {
                gather_head(&mut qs, qd, bi, hi, seq, dim, hd);
                gather_head(&mut ks, kd, bi, hi, seq, dim, hd);
                gather_head(&mut vs, vd, bi, hi, seq, dim, hd);
                for t in 0..seq {
                    rope::rotate(&mut qs[t * hd..(t + 1) * hd], t, rope_base);
                    rope::rotate(&mut ks[t * hd..(t + 1) * hd], t, rope_base);
                }
                scatter_head(&mut rot_q, &qs, bi, hi, seq, dim, hd);
                scatter_head(&mut rot_k, &ks, bi, hi, seq, dim, hd);

                transpose_into(&mut kst, &ks, seq, hd);
                scores.iter_mut().for_each(|s| *s = 0.0);
                mm_nn(&mut scores, &qs, &kst, seq, hd, seq);

                // causal softmax over keys <= query position
                let pblock = &mut probs[(bi * heads + hi) * seq * seq..][..seq * seq];
                for ti in 0..seq {
                    let row = &mut scores[ti * seq..(ti + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for tj in 0..=ti {
                        row[tj] *= scale;
                        max = max.max(row[tj]);
                    }
                    let mut denom = 0.0;
                    for tj in 0..=ti {
                        row[tj] = (row[tj] - max).exp();
                        denom += row[tj];
                    }
                    let prow = &mut pblock[ti * seq..(ti + 1) * seq];
                    for tj in 0..seq {
                        prow[tj] = if tj <= ti { row[tj] / denom } else { 0.0 };
                    }
                }

                outs.iter_mut().for_each(|o| *o = 0.0);
                mm_nn(&mut outs, pblock, &vs, seq, seq, hd);
                scatter_head(&mut out, &outs, bi, hi, seq, dim, hd);
            }
        }

        let t = Tensor::from_vec(vec![n, dim], out)?;
        Ok(self.push_result(
            t,
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                rope_base,
                cache: AttnCache { rot_q, rot_k, probs },
            },
            &[q.0, k.0, v.0],
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate additively at
    /// fan-out; each node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() || !self.requires_grad[i] {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.backward_node(i, g.data());
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad[idx] {
            return;
        }
        if self.grads[idx].is_none() {
            self.grads[idx] = Some(Tensor::zeros(self.vals[idx].shape().to_vec()));
        }
        f(self.grads[idx].as_mut().expect("just set").data_mut());
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Ops are detached from the arena one at a time so the borrow checker
        // lets us mutate gradient buffers while reading values.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.vals[*a].dims2().expect("checked at forward");
                let n = self.vals[*b].shape()[1];
                let bd = self.vals[*b].data().to_vec();
                self.acc(*a, |da| mm_nt_acc(da, g, &bd, m, n, k));
                let ad = self.vals[*a].data().to_vec();
                self.acc(*b, |db| mm_tn_acc(db, &ad, g, m, k, n));
            }
            Op::Transpose2d { a } => {
                let (m, n) = self.vals[*a].dims2().expect("checked");
                self.acc(*a, |da| {
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc_broadcast(*a, g, |_, gv| gv);
                self.acc_broadcast(*b, g, |_, gv| gv);
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(*a, g, |_, gv| gv);
                self.acc_broadcast(*b, g, |_, gv| -gv);
            }
            Op::Mul { a, b } => {
                let bd = self.broadcast_data(*b, g.len());
                self.acc_broadcast_with(*a, g, &bd);
                let ad = self.broadcast_data(*a, g.len());
                self.acc_broadcast_with(*b, g, &ad);
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::AddBias { a, bias } => {
                self.acc(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let d = self.vals[*bias].numel();
                self.acc(*bias, |db| {
                    for row in g.chunks_exact(d) {
                        for (dbj, &gv) in db.iter_mut().zip(row) {
                            *dbj += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let s = self.vals[i].data().to_vec();
                self.acc(*a, |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] * s[j] * (1.0 - s[j]);
                    }
                });
            }
            Op::Silu { a } => {
                let x = self.vals[*a].data().to_vec();
                self.acc(*a, |da| {
                    for j in 0..da.len() {
                        let s = sigmoid(x[j]);
                        da[j] += g[j] * s * (1.0 + x[j] * (1.0 - s));
                    }
                });
            }
            Op::Exp { a } => {
                let out = self.vals[i].data().to_vec();
                self.acc(*a, |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] * out[j];
                    }
                });
            }
            Op::Log { a } => {
                let x = self.vals[*a].data().to_vec();
                self.acc(*a, |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] / x[j];
                    }
                });
            }
            Op::Power { a, p } => {
                let p = *p;
                let x = self.vals[*a].data().to_vec();
                self.acc(*a, |da| {
                    for j in 0..da.len() {
                        da[j] += g[j] * p * x[j].powf(p - 1.0);
                    }
                });
            }
            Op::SumAll { a } => {
                let g0 = g[0];
                self.acc(*a, |da| {
                    for d in da.iter_mut() {
                        *d += g0;
                    }
                });
            }
            Op::Reshape { a } => {
                self.acc(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let d = self.vals[*table].shape()[1];
                self.acc(*table, |dt| {
                    for (row, &idx) in indices.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut dt[idx as usize * d..(idx as usize + 1) * d];
                        for (dd, &gv) in dst.iter_mut().zip(src) {
                            *dd += gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let d = self.vals[*gain].numel();
                let rows = self.vals[*x].numel() / d;
                let xd = self.vals[*x].data().to_vec();
                let gd = self.vals[*gain].data().to_vec();
                self.acc(*bias, |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                self.acc(*gain, |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            dg[j] += g[r * d + j] * xhat;
                        }
                    }
                });
                self.acc(*x, |dx| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            m1 += gy;
                            m2 += gy * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            dx[r * d + j] += inv_std[r] * (gy - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let v = self.vals[*logits].shape()[1];
                let rows = targets.len();
                let g0 = g[0] / rows as f64;
                self.acc(*logits, |dl| {
                    for r in 0..rows {
                        let t = targets[r] as usize;
                        for j in 0..v {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] += g0 * (probs[r * v + j] - indicator);
                        }
                    }
                });
            }
            Op::SplineExpand { x, grid } => {
                let nb = grid.n_basis();
                let xd = self.vals[*x].data().to_vec();
                let grid = Arc::clone(grid);
                self.acc(*x, |dx| {
                    let mut db = vec![0.0; nb];
                    for (q, d) in dx.iter_mut().enumerate() {
                        grid.basis_grad_into(xd[q], &mut db)
                            .expect("domain validated at forward");
                        let grow = &g[q * nb..(q + 1) * nb];
                        let mut s = 0.0;
                        for (gv, dbv) in grow.iter().zip(&db) {
                            s += gv * dbv;
                        }
                        *d += s;
                    }
                });
            }
            Op::SplinePhi { basis, theta, n, d, nb, m, c } => {
                let (n, d, nb, m, c) = (*n, *d, *nb, *m, *c);
                let td = self.vals[*theta].data().to_vec();
                self.acc(*basis, |dbas| {
                    for i2 in 0..n {
                        for r in 0..d {
                            let b_off = (i2 * d + r) * nb;
                            let g_off = (i2 * d + r) * m * c;
                            for j in 0..m {
                                for q in 0..nb {
                                    let t_off = ((r * m + j) * nb + q) * c;
                                    let mut s = 0.0;
                                    for ch in 0..c {
                                        s += g[g_off + j * c + ch] * td[t_off + ch];
                                    }
                                    dbas[b_off + q] += s;
                                }
                            }
                        }
                    }
                });
                let bd = self.vals[*basis].data().to_vec();
                self.acc(*theta, |dth| {
                    for i2 in 0..n {
                        for r in 0..d {
                            let b_off = (i2 * d + r) * nb;
                            let g_off = (i2 * d + r) * m * c;
                            for j in 0..m {
                                for q in 0..nb {
                                    let bq = bd[b_off + q];
                                    if bq == 0.0 {
                                        continue;
                                    }
                                    let t_off = ((r * m + j) * nb + q) * c;
                                    for ch in 0..c {
                                        dth[t_off + ch] += bq * g[g_off + j * c + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ProdModes { phi, n, d, m, c } => {
                let (n, d, m, c) = (*n, *d, *m, *c);
                let pd = self.vals[*phi].data().to_vec();
                self.acc(*phi, |dphi| {
                    let mut prefix = vec![0.0; d + 1];
                    let mut suffix = vec![0.0; d + 1];
                    for i2 in 0..n {
                        for jc in 0..m * c {
                            prefix[0] = 1.0;
                            for r in 0..d {
                                prefix[r + 1] = prefix[r] * pd[(i2 * d + r) * m * c + jc];
                            }
                            suffix[d] = 1.0;
                            for r in (0..d).rev() {
                                suffix[r] = suffix[r + 1] * pd[(i2 * d + r) * m * c + jc];
                            }
                            let gv = g[i2 * m * c + jc];
                            for r in 0..d {
                                dphi[(i2 * d + r) * m * c + jc] += gv * prefix[r] * suffix[r + 1];
                            }
                        }
                    }
                });
            }
            Op::CausalAttention { q, k, v, batch, seq, heads, rope_base, cache } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let dim = self.vals[*q].shape()[1];
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();

                let vd = self.vals[*v].data().to_vec();
                let mut dq_full = vec![0.0; batch * seq * dim];
                let mut dk_full = vec![0.0; batch * seq * dim];
                let mut dv_full = vec![0.0; batch * seq * dim];

                let mut gs = vec![0.0; seq * hd];
                let mut vs = vec![0.0; seq * hd];
                let mut qs = vec![0.0; seq * hd];
                let mut ks = vec![0.0; seq * hd];
                let mut dp = vec![0.0; seq * seq];
                let mut ds = vec![0.0; seq * seq];
                let mut dqs = vec![0.0; seq * hd];
                let mut dks = vec![0.0; seq * hd];
                let mut dvs = vec![0.0; seq * hd];

                for bi in 0..batch {
                    for hi in 0..heads {
                        gather_head(&mut gs, g, bi, hi, seq, dim, hd);
                        gather_head(&mut vs, &vd, bi, hi, seq, dim, hd);
                        gather_head(&mut qs, &cache.rot_q, bi, hi, seq, dim, hd);
                        gather_head(&mut ks, &cache.rot_k, bi, hi, seq, dim, hd);
                        let pblock = &cache.probs[(bi * heads + hi) * seq * seq..][..seq * seq];

                        // d_probs = g @ v^T, then softmax backward within each row
                        dp.iter_mut().for_each(|x| *x = 0.0);
                        mm_nt_acc(&mut dp, &gs, &vs, seq, hd, seq);
                        for ti in 0..seq {
                            let prow = &pblock[ti * seq..(ti + 1) * seq];
                            let dprow = &dp[ti * seq..(ti + 1) * seq];
                            let mut dot = 0.0;
                            for tj in 0..=ti {
                                dot += dprow[tj] * prow[tj];
                            }
                            let dsrow = &mut ds[ti * seq..(ti + 1) * seq];
                            for tj in 0..seq {
                                dsrow[tj] = if tj <= ti {
                                    prow[tj] * (dprow[tj] - dot) * scale
                                } else {
                                    0.0
                                };
                            }
                        }

                        // dq_rot = ds @ k_rot ; dk_rot = ds^T @ q_rot ; dv = p^T @ g
                        dqs.iter_mut().for_each(|x| *x = 0.0);
                        mm_nn(&mut dqs, &ds, &ks, seq, seq, hd);
                        dks.iter_mut().for_each(|x| *x = 0.0);
                        mm_tn_acc(&mut dks, &ds, &qs, seq, seq, hd);
                        dvs.iter_mut().for_each(|x| *x = 0.0);
                        mm_tn_acc(&mut dvs, pblock, &gs, seq, seq, hd);

                        for t in 0..seq {
                            rope::rotate_inverse(&mut dqs[t * hd..(t + 1) * hd], t, *rope_base);
                            rope::rotate_inverse(&mut dks[t * hd..(t + 1) * hd], t, *rope_base);
                        }
                        scatter_head_acc(&mut dq_full, &dqs, bi, hi, seq, dim, hd);
                        scatter_head_acc(&mut dk_full, &dks, bi, hi, seq, dim, hd);
                        scatter_head_acc(&mut dv_full, &dvs, bi, hi, seq, dim, hd);
                    }
                }
                self.acc(*q, |dq| {
                    for (d, &x) in dq.iter_mut().zip(&dq_full) {
                        *d += x;
                    }
                });
                self.acc(*k, |dk| {
                    for (d, &x) in dk.iter_mut().zip(&dk_full) {
                        *d += x;
                    }
                });
                self.acc(*v, |dv| {
                    for (d, &x) in dv.iter_mut().zip(&dv_full) {
                        *d += x;
                    }
                });
            }
        }
        self.ops[i] = op;
    }

    /// Accumulate `f(index, g)` into a gradient that may have been broadcast
    /// from a scalar.
    fn acc_broadcast(&mut self, idx: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        let numel = self.vals[idx].numel();
        self.acc(idx, |da| {
            if numel == g.len() {
                for (j, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                    *d += f(j, gv);
                }
            } else {
                // scalar operand: reduce over the broadcast axis
                let mut s = 0.0;
                for (j, &gv) in g.iter().enumerate() {
                    s += f(j, gv);
                }
                da[0] += s;
            }
        });
    }

    /// Gradient side of `mul` where the other operand (already broadcast to
    /// the output length) scales the incoming gradient.
    fn acc_broadcast_with(&mut self, idx: usize, g: &[f64], other: &[f64]) {
        let numel = self.vals[idx].numel();
        self.acc(idx, |da| {
            if numel == g.len() {
                for j in 0..g.len() {
                    da[j] += g[j] * other[j];
                }
            } else {
                let mut s = 0.0;
                for j in 0..g.len() {
                    s += g[j] * other[j];
                }
                da[0] += s;
            }
        });
    }

    fn broadcast_data(&self, idx: usize, len: usize) -> Vec<f64> {
        let t = &self.vals[idx];
        if t.numel() == len {
            t.data().to_vec()
        } else {
            vec![t.data()[0]; len]
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- dense kernels (fixed loop order, accumulate into out) ----------------

/// out[m x n] += a[m x k] @ b[k x n]
fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] @ b[n x k]^T
fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out_row[j] += s;
        }
    }
}

/// out[k x n] += a[m x k]^T @ b[m x n]
fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

fn transpose_into(out: &mut [f64], src: &[f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
}

fn gather_head(dst: &mut [f64], src: &[f64], bi: usize, hi: usize, seq: usize, dim: usize, hd: usize) {
    for t in 0..seq {
        let row = (bi * seq + t) * dim + hi * hd;
        dst[t * hd..(t + 1) * hd].copy_from_slice(&src[row..row + hd]);
    }
}

fn scatter_head(dst: &mut [f64], src: &[f64], bi: usize, hi: usize, seq: usize, dim: usize, hd: usize) {
    for t in 0..seq {
        let row = (bi * seq + t) * dim + hi * hd;
        dst[row..row + hd].copy_from_slice(&src[t * hd..(t + 1) * hd]);
    }
}

fn scatter_head_acc(dst: &mut [f64], src: &[f64], bi: usize, hi: usize, seq: usize, dim: usize, hd: usize) {
    for t in 0..seq {
        let row = (bi * seq + t) * dim + hi * hd;
        for (d, &s) in dst[row..row + hd].iter_mut().zip(&src[t * hd..(t + 1) * hd]) {
            *d += s;
        }
    }
}
