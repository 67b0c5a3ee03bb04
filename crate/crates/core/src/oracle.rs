//! Exhaustive evaluation of every prompt configuration under a fixed prompt
//! bank. Branches are independent until the logits, so each branch's
//! embeddings are computed once per configuration of that branch (sharing
//! prefixes across configurations) and then combined.

use crate::autodiff::{dot, Tape, Tensor, Var, PROB_FLOOR};
use crate::encoder::{layer_forward, BranchKind, BranchVars, LayerPrompt, Model};
use crate::engine::Sample;
use crate::error::{DplError, Result};
use crate::par::{self, Exec};
use crate::supprompt::{argmax_first, search_space_size, PromptBank, PromptConfiguration, SearchSpace};

/// Loss and accuracy of every `(text, image)` configuration pair.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub space: SearchSpace,
    pub depth_text: usize,
    pub depth_image: usize,
    /// Row-major `[text_index][image_index]` mean cross-entropy.
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl Enumeration {
    pub fn num_image_configs(&self) -> usize {
        self.space.len().pow(self.depth_image as u32)
    }

    /// Base-`t` digits of `index`, layer 0 most significant.
    pub fn lengths(&self, index: usize, depth: usize) -> Vec<usize> {
        let t = self.space.len();
        let mut digits = vec![0; depth];
        let mut rest = index;
        for l in (0..depth).rev() {
            digits[l] = self.space.lengths()[rest % t];
            rest /= t;
        }
        digits
    }

    pub fn index_of(&self, lengths: &[usize]) -> Result<usize> {
        let t = self.space.len();
        lengths.iter().try_fold(0usize, |acc, &c| {
            let i = self
                .space
                .index_of(c)
                .ok_or_else(|| DplError::contract(format!("length {c} is not in the search space")))?;
            Ok(acc * t + i)
        })
    }

    pub fn configuration(&self, flat: usize) -> PromptConfiguration {
        let n_img = self.num_image_configs();
        PromptConfiguration {
            text: self.lengths(flat / n_img, self.depth_text),
            image: self.lengths(flat % n_img, self.depth_image),
            space: self.space.lengths().to_vec(),
        }
    }

    pub fn flat_index(&self, config: &PromptConfiguration) -> Result<usize> {
        Ok(self.index_of(&config.text)? * self.num_image_configs() + self.index_of(&config.image)?)
    }

    /// Index of the lowest loss; the first one on ties.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.loss.iter().enumerate() {
            if l < self.loss[best] {
                best = i;
            }
        }
        best
    }

    /// Number of configurations with a loss no greater than `config`'s,
    /// excluding itself. Zero means `config` is the unique optimum.
    pub fn rivals(&self, config: &PromptConfiguration) -> Result<usize> {
        let k = self.flat_index(config)?;
        let l = self.loss[k];
        Ok(self.loss.iter().enumerate().filter(|&(i, &v)| i != k && v <= l).count())
    }
}

/// Evaluates all `t^(depth_text + depth_image)` configurations on `samples`
/// with prompts taken from `banks`.
pub fn enumerate_configurations(
    model: &Model,
    texts: &[Tensor],
    samples: &[Sample<'_>],
    banks: (&PromptBank, &PromptBank),
    space: &SearchSpace,
    exec: Exec,
) -> Result<Enumeration> {
    if samples.is_empty() || texts.is_empty() {
        return Err(DplError::contract("enumeration needs samples and label texts"));
    }
    let (dt, di) = (model.cfg.text.depth, model.cfg.image.depth);
    search_space_size(space, dt, di)
        .filter(|&n| n <= 1 << 24)
        .ok_or_else(|| DplError::contract("search space too large to enumerate"))?;

    let text_embs: Vec<Vec<Vec<f64>>> = par::map(exec, texts.iter().collect(), |seq| {
        branch_embeddings(model, BranchKind::Text, seq, banks.0, space)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let image_embs: Vec<Vec<Vec<f64>>> = par::map(exec, samples.iter().map(|s| s.sequence).collect(), |seq| {
        branch_embeddings(model, BranchKind::Image, seq, banks.1, space)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let n_text = text_embs[0].len();
    let n_img = image_embs[0].len();
    let inv_tau = 1.0 / model.cfg.tau;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map(exec, (0..n_text).collect(), |a| {
        let mut loss = vec![0.0; n_img];
        let mut acc = vec![0.0; n_img];
        let mut logits = vec![0.0; texts.len()];
        for b in 0..n_img {
            let (mut l_sum, mut hits) = (0.0, 0usize);
            for (s, &label) in labels.iter().enumerate() {
                let img = &image_embs[s][b];
                for (c, out) in logits.iter_mut().enumerate() {
                    *out = dot(img, &text_embs[c][a]) * inv_tau;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                let p = ((logits[label] - max).exp() / z).max(PROB_FLOOR);
                l_sum -= p.ln();
                if argmax_first(&logits) == label {
                    hits += 1;
                }
            }
            loss[b] = l_sum / labels.len() as f64;
            acc[b] = hits as f64 / labels.len() as f64;
        }
        (loss, acc)
    });
    let mut loss = Vec::with_capacity(n_text * n_img);
    let mut accuracy = Vec::with_capacity(n_text * n_img);
    for (l, a) in rows {
        loss.extend(l);
        accuracy.extend(a);
    }
    Ok(Enumeration {
        space: space.clone(),
        depth_text: dt,
        depth_image: di,
        loss,
        accuracy,
    })
}

/// Embeddings of one sequence under every configuration of its branch, in
/// base-`t` order with layer 0 most significant.
fn branch_embeddings(
    model: &Model,
    kind: BranchKind,
    sequence: &Tensor,
    bank: &PromptBank,
    space: &SearchSpace,
) -> Result<Vec<Vec<f64>>> {
    let branch = model.branch(kind);
    if bank.depth() != branch.cfg.depth {
        return Err(DplError::contract("bank depth does not match the branch"));
    }
    let mut tape = Tape::new();
    let vars = branch.register(&mut tape);
    let x0 = tape.constant(sequence);
    let x = tape.add(x0, vars.positions)?;
    let prompts: Vec<Vec<Option<Var>>> = bank
        .prompts
        .iter()
        .map(|layer| layer.iter().map(|p| p.as_ref().map(|t| tape.constant(t))).collect())
        .collect();
    if prompts.iter().any(|l| l.len() != space.len()) {
        return Err(DplError::contract("bank options do not match the search space"));
    }
    let mut out = Vec::new();
    descend(&mut tape, &vars, &prompts, x, 0, &mut out)?;
    Ok(out)
}

fn descend(
    tape: &mut Tape<'_>,
    vars: &BranchVars,
    prompts: &[Vec<Option<Var>>],
    x: Var,
    layer: usize,
    out: &mut Vec<Vec<f64>>,
) -> Result<()> {
    if layer == vars.blocks.len() {
        let pooled = tape.select_row(x, vars.pool_index)?;
        let emb = tape.matmul(pooled, vars.projection)?;
        let emb = tape.l2_normalize_rows(emb)?;
        out.push(tape.value(emb).to_vec());
        return Ok(());
    }
    for option in &prompts[layer] {
        let prompt = match option {
            Some(v) => LayerPrompt::Single(*v),
            None => LayerPrompt::Absent,
        };
        let next = layer_forward(tape, &vars.blocks[layer], x, &prompt)?;
        descend(tape, vars, prompts, next, layer + 1, out)?;
    }
    Ok(())
}
