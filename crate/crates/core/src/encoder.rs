//! Miniature dual-branch (text / image) transformer with cross-attention
//! blocks that accept a per-layer prompt of any length.
//!
//! Blocks are post-norm: `h = LN1(x + Attn(x, [E; x]))`,
//! `out = LN2(h + FFN(h))`. Queries come from `x` only and keys / values
//! from the prompt-prefixed sequence, so the output always has the length of
//! `x` and prompts never propagate to the next layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DplError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 0.07;

/// Standard deviation of the special tokens (SOS / EOS / CLS).
const TOKEN_STD: f64 = 1.0;
const POSITION_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub seq_len: usize,
}

impl BranchConfig {
    /// 4 blocks, width 32, 4 heads, `[SOS, 6 tokens, EOS]`.
    pub fn text_default() -> Self {
        BranchConfig {
            depth: 4,
            hidden_dim: 32,
            num_heads: 4,
            seq_len: 8,
        }
    }

    /// 4 blocks, width 32, 4 heads, CLS + a 4x4 patch grid.
    pub fn image_default() -> Self {
        BranchConfig {
            depth: 4,
            hidden_dim: 32,
            num_heads: 4,
            seq_len: 17,
        }
    }

    pub fn validate(&self, kind: BranchKind) -> Result<()> {
        if self.depth == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(DplError::contract(format!("{kind:?} branch: depth, width and heads must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(DplError::contract(format!(
                "{kind:?} branch: hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        let min_len = match kind {
            BranchKind::Text => 3,
            BranchKind::Image => 2,
        };
        if self.seq_len < min_len {
            return Err(DplError::contract(format!(
                "{kind:?} branch: seq_len must be at least {min_len}"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Number of free token rows supplied by a task: the content tokens
    /// between SOS and EOS for text, the patches after CLS for images.
    pub fn content_len(&self, kind: BranchKind) -> usize {
        match kind {
            BranchKind::Text => self.seq_len - 2,
            BranchKind::Image => self.seq_len - 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Text,
    Image,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Text => "text",
            BranchKind::Image => "image",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: BranchConfig,
    pub image: BranchConfig,
    /// Width of the shared embedding space both branches project into.
    pub embed_dim: usize,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: BranchConfig::text_default(),
            image: BranchConfig::image_default(),
            embed_dim: 32,
            tau: DEFAULT_TAU,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate(BranchKind::Text)?;
        self.image.validate(BranchKind::Image)?;
        if self.embed_dim == 0 {
            return Err(DplError::contract("embed_dim must be positive"));
        }
        check_tau(self.tau)
    }

    pub fn branch(&self, kind: BranchKind) -> &BranchConfig {
        match kind {
            BranchKind::Text => &self.text,
            BranchKind::Image => &self.image,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(DplError::contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Frozen weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub num_heads: usize,
}

impl BlockParams {
    /// Projection matrices are drawn with std `1/sqrt(fan_in)`; layer norms
    /// start at the identity affine map.
    pub fn init(d: usize, num_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let s_ff2 = 1.0 / ((4 * d) as f64).sqrt();
        BlockParams {
            w_q: Tensor::randn(vec![d, d], s, rng),
            w_k: Tensor::randn(vec![d, d], s, rng),
            w_v: Tensor::randn(vec![d, d], s, rng),
            w_o: Tensor::randn(vec![d, d], s, rng),
            w_ff1: Tensor::randn(vec![d, 4 * d], s, rng),
            w_ff2: Tensor::randn(vec![4 * d, d], s_ff2, rng),
            ln1_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln2_bias: Tensor::zeros(vec![d]),
            num_heads,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_ff1,
            &self.w_ff2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_ff1,
            &mut self.w_ff2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// One encoder branch: blocks plus the frozen embedding and projection
/// tensors around them.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kind: BranchKind,
    pub cfg: BranchConfig,
    pub blocks: Vec<BlockParams>,
    pub positions: Tensor,
    /// SOS for text, CLS for images.
    pub start_token: Tensor,
    /// EOS for text; unused for images.
    pub end_token: Tensor,
    pub projection: Tensor,
}

impl Branch {
    fn init(kind: BranchKind, cfg: BranchConfig, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_dim;
        let blocks = (0..cfg.depth).map(|_| BlockParams::init(d, cfg.num_heads, rng)).collect();
        Branch {
            kind,
            cfg,
            blocks,
            positions: Tensor::randn(vec![cfg.seq_len, d], POSITION_STD, rng),
            start_token: Tensor::randn(vec![d], TOKEN_STD, rng),
            end_token: Tensor::randn(vec![d], TOKEN_STD, rng),
            projection: Tensor::randn(vec![d, embed_dim], 1.0 / (d as f64).sqrt(), rng),
        }
    }

    /// Index of the pooled token: EOS (last) for text, CLS (first) for images.
    pub fn pool_index(&self) -> usize {
        match self.kind {
            BranchKind::Text => self.cfg.seq_len - 1,
            BranchKind::Image => 0,
        }
    }

    /// Wraps task-supplied token rows into the full input sequence:
    /// `[SOS, tokens.., EOS]` for text, `[CLS, patches..]` for images.
    pub fn input_sequence(&self, content: &Tensor) -> Result<Tensor> {
        let d = self.cfg.hidden_dim;
        let want = self.cfg.content_len(self.kind);
        if content.dims2() != (want, d) {
            return Err(DplError::dims("input_sequence", &[want, d], content.shape()));
        }
        let mut values = Vec::with_capacity(self.cfg.seq_len * d);
        values.extend_from_slice(self.start_token.values());
        values.extend_from_slice(content.values());
        if self.kind == BranchKind::Text {
            values.extend_from_slice(self.end_token.values());
        }
        Tensor::new(vec![self.cfg.seq_len, d], values)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.extend([&self.positions, &self.start_token, &self.end_token, &self.projection]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.extend([
            &mut self.positions,
            &mut self.start_token,
            &mut self.end_token,
            &mut self.projection,
        ]);
        out
    }

    /// Registers every frozen tensor on `tape` as a borrowed constant.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> BranchVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars::register(tape, b))
            .collect();
        BranchVars {
            blocks,
            positions: tape.constant(&self.positions),
            projection: tape.constant(&self.projection),
            pool_index: self.pool_index(),
        }
    }
}

/// Tape handles of one block's frozen weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_ff1: Var,
    pub w_ff2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub num_heads: usize,
    pub hidden_dim: usize,
}

impl BlockVars {
    pub fn register<'a>(tape: &mut Tape<'a>, b: &'a BlockParams) -> Self {
        BlockVars {
            w_q: tape.constant(&b.w_q),
            w_k: tape.constant(&b.w_k),
            w_v: tape.constant(&b.w_v),
            w_o: tape.constant(&b.w_o),
            w_ff1: tape.constant(&b.w_ff1),
            w_ff2: tape.constant(&b.w_ff2),
            ln1_gain: tape.constant(&b.ln1_gain),
            ln1_bias: tape.constant(&b.ln1_bias),
            ln2_gain: tape.constant(&b.ln2_gain),
            ln2_bias: tape.constant(&b.ln2_bias),
            num_heads: b.num_heads,
            hidden_dim: b.hidden_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchVars {
    pub blocks: Vec<BlockVars>,
    pub positions: Var,
    pub projection: Var,
    pub pool_index: usize,
}

/// What a layer receives as prompt during a forward pass.
#[derive(Clone, Debug)]
pub enum LayerPrompt {
    Absent,
    Single(Var),
    /// Per-option prompts (`None` is the no-prompt option) mixed by a
    /// `1 x t` weight row after the block.
    Mixed {
        options: Vec<Option<Var>>,
        weights: Var,
    },
}

/// Projections of `x` shared by every prompt option at one layer.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(tape: &mut Tape<'_>, block: &BlockVars, x: Var) -> Result<Projections> {
    Ok(Projections {
        q: tape.matmul(x, block.w_q)?,
        k: tape.matmul(x, block.w_k)?,
        v: tape.matmul(x, block.w_v)?,
    })
}

/// One cross-attention block. `prompt`, when given, must have width `d`; an
/// empty (zero-row) prompt behaves exactly like an absent one.
pub fn block_forward(tape: &mut Tape<'_>, block: &BlockVars, x: Var, prompt: Option<Var>) -> Result<Var> {
    let proj = project(tape, block, x)?;
    block_forward_projected(tape, block, x, &proj, prompt)
}

/// [`block_forward`] with the projections of `x` precomputed. Keys and values
/// of `[E; x]` are the row-wise stack of `E W` over `x W`.
pub fn block_forward_projected(
    tape: &mut Tape<'_>,
    block: &BlockVars,
    x: Var,
    proj: &Projections,
    prompt: Option<Var>,
) -> Result<Var> {
    let (_, d) = tape.dims(x);
    if d != block.hidden_dim {
        return Err(DplError::dims("block input", &[block.hidden_dim], &[d]));
    }
    let (k, v) = match prompt {
        None => (proj.k, proj.v),
        Some(e) => {
            let (rows, width) = tape.dims(e);
            if width != d {
                return Err(DplError::dims("prompt width", &[rows, d], &[rows, width]));
            }
            let ek = tape.matmul(e, block.w_k)?;
            let ev = tape.matmul(e, block.w_v)?;
            (tape.concat_rows(ek, proj.k)?, tape.concat_rows(ev, proj.v)?)
        }
    };

    let dh = d / block.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(block.num_heads);
    for h in 0..block.num_heads {
        let qh = tape.slice_cols(proj.q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn_out = tape.matmul(merged, block.w_o)?;

    let resid = tape.add(x, attn_out)?;
    let h1 = tape.layer_norm(resid, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let ff = tape.matmul(h1, block.w_ff1)?;
    let ff = tape.quick_gelu(ff);
    let ff = tape.matmul(ff, block.w_ff2)?;
    let resid = tape.add(h1, ff)?;
    tape.layer_norm(resid, block.ln2_gain, block.ln2_bias, LN_EPS)
}

/// Runs one layer under any of the [`LayerPrompt`] modes.
pub fn layer_forward(tape: &mut Tape<'_>, block: &BlockVars, x: Var, prompt: &LayerPrompt) -> Result<Var> {
    match prompt {
        LayerPrompt::Absent => block_forward(tape, block, x, None),
        LayerPrompt::Single(e) => block_forward(tape, block, x, Some(*e)),
        LayerPrompt::Mixed { options, weights } => {
            let proj = project(tape, block, x)?;
            let outs = options
                .iter()
                .map(|opt| block_forward_projected(tape, block, x, &proj, *opt))
                .collect::<Result<Vec<_>>>()?;
            tape.weighted_sum(&outs, *weights)
        }
    }
}

/// Adds positions, chains every layer, pools EOS / CLS, projects into the
/// shared space and L2-normalizes. Returns a `1 x embed_dim` node.
pub fn encode_branch(tape: &mut Tape<'_>, branch: &BranchVars, x0: Var, prompts: &[LayerPrompt]) -> Result<Var> {
    if prompts.len() != branch.blocks.len() {
        return Err(DplError::contract(format!(
            "expected {} layer prompts, got {}",
            branch.blocks.len(),
            prompts.len()
        )));
    }
    let mut x = tape.add(x0, branch.positions)?;
    for (block, prompt) in branch.blocks.iter().zip(prompts) {
        x = layer_forward(tape, block, x, prompt)?;
    }
    let pooled = tape.select_row(x, branch.pool_index)?;
    let emb = tape.matmul(pooled, branch.projection)?;
    tape.l2_normalize_rows(emb)
}

/// Class probabilities `softmax(cos(f, g_c) / tau)` for each image row
/// against `C` text rows. Inputs must already be unit-norm.
pub fn logits(tape: &mut Tape<'_>, image_embs: Var, text_embs: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    for v in [image_embs, text_embs] {
        let (_, c) = tape.dims(v);
        for row in tape.value(v).chunks(c.max(1)) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(DplError::contract(format!("embedding is not unit-norm (norm {n})")));
            }
        }
    }
    let sims = tape.matmul_nt(image_embs, text_embs)?;
    let scaled = tape.scale(sims, 1.0 / tau);
    Ok(tape.softmax_rows(scaled))
}

/// The frozen surrogate of a pre-trained dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub seed: u64,
    pub cfg: ModelConfig,
    pub text: Branch,
    pub image: Branch,
}

impl Model {
    /// Deterministic Gaussian initialization from `seed`; nothing in the
    /// returned model requires gradient.
    pub fn init_pretrained(seed: u64, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = Branch::init(BranchKind::Text, cfg.text, cfg.embed_dim, &mut rng);
        let image = Branch::init(BranchKind::Image, cfg.image, cfg.embed_dim, &mut rng);
        Ok(Model { seed, cfg, text, image })
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Text => &self.text,
            BranchKind::Image => &self.image,
        }
    }

    /// Every weight tensor in declaration order: text branch then image
    /// branch; within a branch, blocks in depth order then positions, start
    /// token, end token and projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.text.tensors();
        out.extend(self.image.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.text.tensors_mut();
        out.extend(self.image.tensors_mut());
        out
    }

    pub fn num_weights(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over the little-endian bytes of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
