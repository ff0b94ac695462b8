//! Decoder-only transformer backbone: pre-LN blocks with RoPE causal
//! attention and SwiGLU feed-forward, a final norm, and a dense
//! classification head. The input embedding is a lookup table (tied or
//! untied) or the separable generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    self, generator_param_count, GeneratorConfig, GeneratorParamCount, GeneratorParams,
    GeneratorVars,
};
use crate::rope;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// How token embeddings enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Lookup table shared with the classification head.
    DenseTied,
    /// Separate lookup table and head.
    DenseUntied,
    /// Generator input with an untied head.
    Generator,
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Padded vocabulary: width of the classification head.
    pub v: u32,
    /// Hidden dimension.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum context length.
    pub seq_len: usize,
    pub input_mode: InputMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.d == 0 || self.heads == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("model config has a zero field: {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for RoPE",
                self.head_dim()
            )));
        }
        match (self.input_mode, &self.generator) {
            (InputMode::Generator, None) => {
                Err(Error::Config("generator input mode needs a generator config".into()))
            }
            (InputMode::Generator, Some(g)) => {
                g.validate()?;
                if g.d != self.d {
                    return Err(Error::Config(format!(
                        "generator embedding dim {} != model dim {}",
                        g.d, self.d
                    )));
                }
                if g.coordinate_map().capacity() < self.v as u64 {
                    return Err(Error::Config(format!(
                        "generator covers {} ids but the vocabulary has {}",
                        g.coordinate_map().capacity(),
                        self.v
                    )));
                }
                Ok(())
            }
            (_, Some(_)) => {
                Err(Error::Config("generator config given but input mode is dense".into()))
            }
            (_, None) => Ok(()),
        }
    }
}

/// Parameter accounting under the documented convention: attention
/// projections carry biases, the feed-forward does not, norms carry gain and
/// bias, the head carries no bias, tied mode stores the matrix once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelParamCount {
    pub embedding: u64,
    pub generator: Option<GeneratorParamCount>,
    pub blocks: u64,
    pub final_norm: u64,
    pub head: u64,
    pub total: u64,
}

pub fn per_layer_param_count(d: u64) -> u64 {
    let d_ff = 4 * d;
    4 * (d * d + d) + 3 * d * d_ff + 4 * d
}

pub fn model_param_count(cfg: &ModelConfig) -> Result<ModelParamCount> {
    cfg.validate()?;
    let v = cfg.v as u64;
    let d = cfg.d as u64;
    let blocks = cfg.layers as u64 * per_layer_param_count(d);
    let final_norm = 2 * d;
    let (embedding, generator, head) = match cfg.input_mode {
        InputMode::DenseTied => (v * d, None, 0),
        InputMode::DenseUntied => (v * d, None, d * v),
        InputMode::Generator => {
            let g = generator_param_count(cfg.generator.as_ref().expect("validated"));
            (0, Some(g), d * v)
        }
    };
    let gen_total = generator.map(|g| g.total).unwrap_or(0);
    Ok(ModelParamCount {
        embedding,
        generator,
        blocks,
        final_norm,
        head,
        total: embedding + gen_total + blocks + final_norm + head,
    })
}

/// Weights of one decoder block. Matrices are stored input-major, so the
/// forward pass is plain `x @ w`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl BlockParams {
    fn init<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        BlockParams {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: Tensor::randn(vec![d, d], 0.0, 0.02, rng),
            bq: Tensor::zeros(vec![d]),
            wk: Tensor::randn(vec![d, d], 0.0, 0.02, rng),
            bk: Tensor::zeros(vec![d]),
            wv: Tensor::randn(vec![d, d], 0.0, 0.02, rng),
            bv: Tensor::zeros(vec![d]),
            wo: Tensor::randn(vec![d, d], 0.0, 0.02, rng),
            bo: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            w_gate: Tensor::randn(vec![d, d_ff], 0.0, 0.02, rng),
            w_up: Tensor::randn(vec![d, d_ff], 0.0, 0.02, rng),
            w_down: Tensor::randn(vec![d_ff, d], 0.0, 0.02, rng),
        }
    }

    fn visit(&self, i: usize, f: &mut impl FnMut(String, &Tensor)) {
        let fields: [(&'static str, &Tensor); 15] = [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ];
        for (suffix, t) in fields {
            f(format!("block.{i}.{suffix}"), t);
        }
    }

    fn visit_mut(&mut self, i: usize, f: &mut impl FnMut(String, &mut Tensor)) {
        let fields: [(&'static str, &mut Tensor); 15] = [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ];
        for (suffix, t) in fields {
            f(format!("block.{i}.{suffix}"), t);
        }
    }
}

/// Input embedding state.
#[derive(Debug, Clone)]
pub enum InputParams {
    /// `[V, D]` lookup table; in tied mode it doubles as the head.
    Dense { table: Tensor },
    Generator(GeneratorParams),
}

/// All weights of one model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub input: InputParams,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `[D, V]` untied head; `None` when tied to the embedding table.
    pub head: Option<Tensor>,
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let v = cfg.v as usize;
        let input = match cfg.input_mode {
            InputMode::Generator => {
                InputParams::Generator(GeneratorParams::init(cfg.generator.unwrap(), rng)?)
            }
            _ => InputParams::Dense { table: Tensor::randn(vec![v, d], 0.0, 0.02, rng) },
        };
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(d, cfg.d_ff(), rng)).collect();
        let head = match cfg.input_mode {
            InputMode::DenseTied => None,
            _ => Some(Tensor::randn(vec![d, v], 0.0, 0.02, rng)),
        };
        Ok(ModelParams {
            cfg,
            input,
            blocks,
            final_gain: Tensor::full(vec![d], 1.0),
            final_bias: Tensor::zeros(vec![d]),
            head,
        })
    }

    /// Visit every tensor in canonical order: input, blocks, final norm, head.
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        match &self.input {
            InputParams::Dense { table } => f("embed.table".into(), table),
            InputParams::Generator(g) => g.visit(f),
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(i, f);
        }
        f("final.gain".into(), &self.final_gain);
        f("final.bias".into(), &self.final_bias);
        if let Some(h) = &self.head {
            f("head.w_class".into(), h);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match &mut self.input {
            InputParams::Dense { table } => f("embed.table".into(), table),
            InputParams::Generator(g) => g.visit_mut(f),
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(i, f);
        }
        f("final.gain".into(), &mut self.final_gain);
        f("final.bias".into(), &mut self.final_bias);
        if let Some(h) = &mut self.head {
            f("head.w_class".into(), h);
        }
    }

    pub fn n_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    /// Register all tensors on a tape, mirroring the visit order.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let input = match &self.input {
            InputParams::Dense { table } => InputVars::Dense { table: tape.param(table.clone()) },
            InputParams::Generator(g) => InputVars::Generator(g.register(tape)),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_gain: tape.param(b.ln1_gain.clone()),
                ln1_bias: tape.param(b.ln1_bias.clone()),
                wq: tape.param(b.wq.clone()),
                bq: tape.param(b.bq.clone()),
                wk: tape.param(b.wk.clone()),
                bk: tape.param(b.bk.clone()),
                wv: tape.param(b.wv.clone()),
                bv: tape.param(b.bv.clone()),
                wo: tape.param(b.wo.clone()),
                bo: tape.param(b.bo.clone()),
                ln2_gain: tape.param(b.ln2_gain.clone()),
                ln2_bias: tape.param(b.ln2_bias.clone()),
                w_gate: tape.param(b.w_gate.clone()),
                w_up: tape.param(b.w_up.clone()),
                w_down: tape.param(b.w_down.clone()),
            })
            .collect();
        ModelVars {
            input,
            blocks,
            final_gain: tape.param(self.final_gain.clone()),
            final_bias: tape.param(self.final_bias.clone()),
            head: self.head.as_ref().map(|h| tape.param(h.clone())),
        }
    }
}

pub enum InputVars {
    Dense { table: Var },
    Generator(GeneratorVars),
}

pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub struct ModelVars {
    pub input: InputVars,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Option<Var>,
}

impl ModelVars {
    /// Handles in the canonical visit order, for gradient extraction.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        match &self.input {
            InputVars::Dense { table } => out.push(*table),
            InputVars::Generator(g) => out.extend(g.ordered()),
        }
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias, b.w_gate, b.w_up, b.w_down,
            ]);
        }
        out.extend([self.final_gain, self.final_bias]);
        if let Some(h) = self.head {
            out.push(h);
        }
        out
    }
}

/// Pre-LN attention sublayer with residual:
/// `h + W_o Attn(RoPE(W_q LN(h)), RoPE(W_k LN(h)), W_v LN(h))`.
pub fn attention_block(
    tape: &mut Tape,
    h: Var,
    block: &BlockVars,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let ln = tape.layer_norm(h, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let q = tape.matmul(ln, block.wq)?;
    let q = tape.add_bias(q, block.bq)?;
    let k = tape.matmul(ln, block.wk)?;
    let k = tape.add_bias(k, block.bk)?;
    let v = tape.matmul(ln, block.wv)?;
    let v = tape.add_bias(v, block.bv)?;
    let attn = tape.causal_attention(q, k, v, batch, seq, heads, rope::DEFAULT_BASE)?;
    let out = tape.matmul(attn, block.wo)?;
    let out = tape.add_bias(out, block.bo)?;
    tape.add(h, out)
}

/// Pre-LN SwiGLU sublayer with residual:
/// `h + W_down (silu(W_gate LN(h)) * (W_up LN(h)))`.
pub fn swiglu_ffn(tape: &mut Tape, h: Var, block: &BlockVars) -> Result<Var> {
    let ln = tape.layer_norm(h, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    let gate = tape.matmul(ln, block.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(ln, block.w_up)?;
    let mixed = tape.mul(gate, up)?;
    let down = tape.matmul(mixed, block.w_down)?;
    tape.add(h, down)
}

/// Full forward: tokens `[batch * seq]` to logits `[batch * seq, V]`.
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    params: &ModelParams,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let cfg = &params.cfg;
    if tokens.len() != batch * seq {
        return Err(Error::Dimension(format!(
            "{} tokens for batch {batch} x seq {seq}",
            tokens.len()
        )));
    }
    if seq > cfg.seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {seq} exceeds model context {}",
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.v) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary {}", cfg.v)));
    }

    let mut h = match (&vars.input, &params.input) {
        (InputVars::Dense { table }, _) => tape.gather_rows(*table, tokens)?,
        (InputVars::Generator(gv), InputParams::Generator(gp)) => {
            generator::forward(tape, gv, gp, tokens)?
        }
        _ => return Err(Error::Internal("input vars do not match input params".into())),
    };
    for block in &vars.blocks {
        h = attention_block(tape, h, block, batch, seq, cfg.heads)?;
        h = swiglu_ffn(tape, h, block)?;
    }
    let hf = tape.layer_norm(h, vars.final_gain, vars.final_bias, LN_EPS)?;
    match (vars.head, &vars.input) {
        (Some(head), _) => tape.matmul(hf, head),
        (None, InputVars::Dense { table }) => {
            // tied head: the embedding matrix, transposed at use
            let wt = tape.transpose2d(*table)?;
            tape.matmul(hf, wt)
        }
        (None, _) => Err(Error::Internal("tied head requires a dense table".into())),
    }
}
