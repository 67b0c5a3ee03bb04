//! Search-space objects: candidate prompt banks, α matrices, the softmax
//! relaxation that mixes block outputs, and discretization back to a
//! per-layer prompt configuration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_into, Tape, Tensor, Var};
use crate::encoder::{
    block_forward, block_forward_projected, encode_branch, logits, project, BlockVars, BranchKind, LayerPrompt,
    Model,
};
use crate::error::{DplError, Result};

pub const ALPHA_INIT_STD: f64 = 0.01;
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Ordered candidate context lengths; the first is always 0 (no prompt).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SearchSpace {
    lengths: Vec<usize>,
}

impl SearchSpace {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.first() != Some(&0) {
            return Err(DplError::contract("search space must start with length 0"));
        }
        if lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DplError::contract(format!(
                "search space lengths must be strictly increasing, got {lengths:?}"
            )));
        }
        Ok(SearchSpace { lengths })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn index_of(&self, length: usize) -> Option<usize> {
        self.lengths.iter().position(|&l| l == length)
    }

    /// Parses a comma-separated list such as `"0,2,4,6"`.
    pub fn parse(s: &str) -> Result<Self> {
        let lengths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| DplError::contract(format!("invalid context length {p:?} in search space")))
            })
            .collect::<Result<Vec<_>>>()?;
        SearchSpace::new(lengths)
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lengths: vec![0, 2, 4, 6],
        }
    }
}

impl TryFrom<Vec<usize>> for SearchSpace {
    type Error = DplError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        SearchSpace::new(v)
    }
}

impl From<SearchSpace> for Vec<usize> {
    fn from(s: SearchSpace) -> Self {
        s.lengths
    }
}

/// `depth x t` search logits for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatrix {
    pub logits: Tensor,
}

impl AlphaMatrix {
    pub fn init<R: Rng + ?Sized>(depth: usize, t: usize, rng: &mut R) -> Self {
        AlphaMatrix {
            logits: Tensor::randn(vec![depth, t], ALPHA_INIT_STD, rng).with_grad(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let logits = Tensor::from_rows(rows)?;
        if !logits.is_finite() {
            return Err(DplError::contract("alpha entries must be finite"));
        }
        Ok(AlphaMatrix {
            logits: logits.with_grad(),
        })
    }

    pub fn depth(&self) -> usize {
        self.logits.rows()
    }

    pub fn options(&self) -> usize {
        self.logits.cols()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.logits.row(l)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.depth()).map(|l| self.row(l).to_vec()).collect()
    }
}

/// Row-wise softmax of α.
pub fn beta_from_alpha(alpha: &AlphaMatrix) -> Tensor {
    let (rows, cols) = alpha.logits.dims2();
    let mut out = vec![0.0; rows * cols];
    for (src, dst) in alpha.logits.values().chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(src, dst);
    }
    Tensor::new(vec![rows, cols], out).expect("shape preserved")
}

/// Candidate prompts of one branch: `prompts[l][i]` is the option-`i` prompt
/// at layer `l`, `None` for the zero-length option.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub hidden_dim: usize,
    pub prompts: Vec<Vec<Option<Tensor>>>,
}

impl PromptBank {
    pub fn init<R: Rng + ?Sized>(depth: usize, hidden_dim: usize, space: &SearchSpace, rng: &mut R) -> Self {
        let prompts = (0..depth)
            .map(|_| {
                space
                    .lengths()
                    .iter()
                    .map(|&c| (c > 0).then(|| init_prompt(c, hidden_dim, rng)))
                    .collect()
            })
            .collect();
        PromptBank { hidden_dim, prompts }
    }

    pub fn depth(&self) -> usize {
        self.prompts.len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.prompts.iter().flatten().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.prompts.iter_mut().flatten().flatten()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }
}

pub fn init_prompt<R: Rng + ?Sized>(length: usize, hidden_dim: usize, rng: &mut R) -> Tensor {
    Tensor::randn(vec![length, hidden_dim], PROMPT_INIT_STD, rng).with_grad()
}

/// Per-layer context lengths for both branches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfiguration {
    pub text: Vec<usize>,
    pub image: Vec<usize>,
    pub space: Vec<usize>,
}

impl PromptConfiguration {
    pub fn uniform(space: &SearchSpace, depth_txt: usize, depth_img: usize, length: usize) -> Self {
        PromptConfiguration {
            text: vec![length; depth_txt],
            image: vec![length; depth_img],
            space: space.lengths().to_vec(),
        }
    }

    pub fn branch(&self, kind: BranchKind) -> &[usize] {
        match kind {
            BranchKind::Text => &self.text,
            BranchKind::Image => &self.image,
        }
    }

    /// Checks depths against the model and every length against the space.
    /// Lengths outside the space are allowed when `space` is empty, which is
    /// how hand-written configurations (such as the shallow baseline) are
    /// expressed.
    pub fn validate(&self, model: &Model) -> Result<()> {
        for kind in [BranchKind::Text, BranchKind::Image] {
            let depth = model.cfg.branch(kind).depth;
            let lengths = self.branch(kind);
            if lengths.len() != depth {
                return Err(DplError::contract(format!(
                    "{} configuration has {} layers but the model has {depth}",
                    kind.name(),
                    lengths.len()
                )));
            }
            if !self.space.is_empty() {
                if let Some(bad) = lengths.iter().find(|l| !self.space.contains(l)) {
                    return Err(DplError::contract(format!(
                        "{} length {bad} is not in the search space {:?}",
                        kind.name(),
                        self.space
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of layers (over both branches) whose lengths agree.
    pub fn matching_layers(&self, other: &PromptConfiguration) -> usize {
        let t = self.text.iter().zip(&other.text).filter(|(a, b)| a == b).count();
        let i = self.image.iter().zip(&other.image).filter(|(a, b)| a == b).count();
        t + i
    }

    pub fn num_layers(&self) -> usize {
        self.text.len() + self.image.len()
    }
}

/// Per-row argmax of each α; ties go to the lowest option index.
pub fn extract_subprompt(
    alpha_txt: &AlphaMatrix,
    alpha_img: &AlphaMatrix,
    space: &SearchSpace,
) -> Result<PromptConfiguration> {
    let pick = |alpha: &AlphaMatrix| -> Result<Vec<usize>> {
        if alpha.options() != space.len() {
            return Err(DplError::dims("extract_subprompt", &[space.len()], &[alpha.options()]));
        }
        Ok((0..alpha.depth())
            .map(|l| space.lengths()[argmax_first(alpha.row(l))])
            .collect())
    };
    Ok(PromptConfiguration {
        text: pick(alpha_txt)?,
        image: pick(alpha_img)?,
        space: space.lengths().to_vec(),
    })
}

/// Index of the largest entry, the first one on ties.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `t^depth_txt * t^depth_img`, or `None` on overflow of 128 bits.
pub fn search_space_size(space: &SearchSpace, depth_txt: usize, depth_img: usize) -> Option<u128> {
    let t = space.len() as u128;
    let exp = u32::try_from(depth_txt + depth_img).ok()?;
    t.checked_pow(exp)
}

/// Prompt parameters of a full supprompt: every option at every layer.
pub fn count_supprompt_params(space: &SearchSpace, depth_txt: usize, d_txt: usize, depth_img: usize, d_img: usize) -> usize {
    let per_layer: usize = space.lengths().iter().sum();
    per_layer * (depth_txt * d_txt + depth_img * d_img)
}

/// Prompt parameters of a discrete configuration.
pub fn count_subprompt_params(cfg: &PromptConfiguration, d_txt: usize, d_img: usize) -> usize {
    cfg.text.iter().sum::<usize>() * d_txt + cfg.image.iter().sum::<usize>() * d_img
}

/// The α parameters of both branches, counted apart from prompt parameters.
pub fn count_alpha_params(space: &SearchSpace, depth_txt: usize, depth_img: usize) -> usize {
    space.len() * (depth_txt + depth_img)
}

/// Evaluates `h_i = block(x, E_i)` for every option and returns
/// `sum_i beta_i h_i`, accumulated in option order. `beta_row` is a `1 x t`
/// node. The projections of `x` are shared across options.
pub fn mixed_block_forward(
    tape: &mut Tape<'_>,
    block: &BlockVars,
    x: Var,
    options: &[Option<Var>],
    beta_row: Var,
) -> Result<Var> {
    let (_, t) = tape.dims(beta_row);
    if t != options.len() {
        return Err(DplError::dims("mixed_block_forward", &[options.len()], &[t]));
    }
    let sum: f64 = tape.value(beta_row).iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DplError::contract(format!("mixing weights sum to {sum}, expected 1")));
    }
    if options.len() == 1 {
        let h = block_forward(tape, block, x, options[0])?;
        return tape.weighted_sum(&[h], beta_row);
    }
    let proj = project(tape, block, x)?;
    let outs = options
        .iter()
        .map(|opt| block_forward_projected(tape, block, x, &proj, *opt))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&outs, beta_row)
}

/// How prompts enter one branch during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum BranchPrompts<'a> {
    Absent,
    /// One prompt per layer; `None` or zero rows means no prompt.
    Fixed(&'a [Option<Tensor>]),
    Mixed {
        alpha: &'a AlphaMatrix,
        bank: &'a PromptBank,
    },
}

/// Which prompt-side tensors a pass differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradTarget {
    pub alpha: bool,
    pub prompts: bool,
}

impl GradTarget {
    pub const NONE: GradTarget = GradTarget {
        alpha: false,
        prompts: false,
    };
    pub const ALPHA: GradTarget = GradTarget {
        alpha: true,
        prompts: false,
    };
    pub const PROMPTS: GradTarget = GradTarget {
        alpha: false,
        prompts: true,
    };
    pub const ALL: GradTarget = GradTarget {
        alpha: true,
        prompts: true,
    };
}

/// Tape handles of the prompt-side tensors registered for one branch.
/// `prompts` lists `(slot, var)` pairs where `slot` indexes the branch's
/// prompt tensors in layer-major, option-minor order.
#[derive(Clone, Debug, Default)]
pub struct AttachedPrompts {
    pub layers: Vec<LayerPrompt>,
    pub alpha: Option<Var>,
    pub prompts: Vec<(usize, Var)>,
}

/// Registers a branch's prompts on `tape`. Tensors that are not
/// differentiated are borrowed as constants.
pub fn attach_prompts<'a>(
    tape: &mut Tape<'a>,
    prompts: BranchPrompts<'a>,
    depth: usize,
    grads: GradTarget,
) -> Result<AttachedPrompts> {
    let mut out = AttachedPrompts::default();
    fn register<'a>(tape: &mut Tape<'a>, t: &'a Tensor, differentiate: bool) -> Var {
        if differentiate {
            tape.leaf(t, true)
        } else {
            tape.constant(t)
        }
    }
    match prompts {
        BranchPrompts::Absent => out.layers = vec![LayerPrompt::Absent; depth],
        BranchPrompts::Fixed(per_layer) => {
            if per_layer.len() != depth {
                return Err(DplError::contract(format!(
                    "expected {depth} layer prompts, got {}",
                    per_layer.len()
                )));
            }
            let mut slot = 0;
            for p in per_layer {
                match p {
                    Some(t) if t.rows() > 0 => {
                        let v = register(tape, t, grads.prompts);
                        if grads.prompts {
                            out.prompts.push((slot, v));
                        }
                        slot += 1;
                        out.layers.push(LayerPrompt::Single(v));
                    }
                    _ => out.layers.push(LayerPrompt::Absent),
                }
            }
        }
        BranchPrompts::Mixed { alpha, bank } => {
            if alpha.depth() != depth || bank.depth() != depth {
                return Err(DplError::contract(format!(
                    "supprompt depth mismatch: alpha {}, bank {}, branch {depth}",
                    alpha.depth(),
                    bank.depth()
                )));
            }
            let a = register(tape, &alpha.logits, grads.alpha);
            if grads.alpha {
                out.alpha = Some(a);
            }
            let beta = tape.softmax_rows(a);
            let mut slot = 0;
            for (l, layer) in bank.prompts.iter().enumerate() {
                if layer.len() != alpha.options() {
                    return Err(DplError::dims("prompt bank options", &[alpha.options()], &[layer.len()]));
                }
                let options = layer
                    .iter()
                    .map(|p| {
                        p.as_ref().map(|t| {
                            let v = register(tape, t, grads.prompts);
                            if grads.prompts {
                                out.prompts.push((slot, v));
                            }
                            slot += 1;
                            v
                        })
                    })
                    .collect();
                let weights = tape.select_row(beta, l)?;
                out.layers.push(LayerPrompt::Mixed { options, weights });
            }
        }
    }
    Ok(out)
}

/// One branch's embedding of a single input sequence under `prompts`.
pub fn branch_embedding<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    kind: BranchKind,
    sequence: &'a Tensor,
    attached: &AttachedPrompts,
) -> Result<Var> {
    let branch = model.branch(kind);
    let vars = branch.register(tape);
    let x0 = tape.constant(sequence);
    encode_branch(tape, &vars, x0, &attached.layers)
}

/// Class probabilities of every image against every label text, built on a
/// single tape. `texts` and `images` are full input sequences.
pub fn supprompt_forward<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    texts: &'a [Tensor],
    images: &'a [Tensor],
    text_prompts: BranchPrompts<'a>,
    image_prompts: BranchPrompts<'a>,
    grads: GradTarget,
) -> Result<(Var, AttachedPrompts, AttachedPrompts)> {
    if texts.is_empty() || images.is_empty() {
        return Err(DplError::contract("supprompt_forward needs at least one text and one image"));
    }
    let txt = attach_prompts(tape, text_prompts, model.cfg.text.depth, grads)?;
    let img = attach_prompts(tape, image_prompts, model.cfg.image.depth, grads)?;
    let text_vars = model.text.register(tape);
    let image_vars = model.image.register(tape);
    let mut t_rows = Vec::with_capacity(texts.len());
    for seq in texts {
        let x0 = tape.constant(seq);
        t_rows.push(encode_branch(tape, &text_vars, x0, &txt.layers)?);
    }
    let mut i_rows = Vec::with_capacity(images.len());
    for seq in images {
        let x0 = tape.constant(seq);
        i_rows.push(encode_branch(tape, &image_vars, x0, &img.layers)?);
    }
    let t_emb = tape.stack_rows(&t_rows)?;
    let i_emb = tape.stack_rows(&i_rows)?;
    let probs = logits(tape, i_emb, t_emb, model.cfg.tau)?;
    Ok((probs, txt, img))
}
