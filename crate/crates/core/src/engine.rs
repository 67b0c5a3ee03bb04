//! Batched forward / backward passes over the dual encoder.
//!
//! Every label text and every image sample gets its own tape. Image tapes
//! take the stacked text embeddings as an input and hand back their gradient,
//! which is summed in sample order and used to seed the text tapes. This
//! keeps per-item work independent (so it can run in parallel) while the
//! reduction order, and with it every bit of the result, stays fixed.

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::encoder::{logits, BranchKind, Model};
use crate::error::{DplError, Result};
use crate::par::{self, Exec};
use crate::supprompt::{attach_prompts, branch_embedding, AttachedPrompts, BranchPrompts, GradTarget};

/// Gradients of one branch's prompt-side tensors. `prompts[slot]` follows the
/// slot numbering of [`AttachedPrompts`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchGrads {
    pub alpha: Option<Vec<f64>>,
    pub prompts: Vec<Option<Vec<f64>>>,
}

impl BranchGrads {
    fn add(&mut self, attached: &AttachedPrompts, grads: &Gradients) {
        if let Some(a) = attached.alpha {
            if let Some(g) = grads.get(a) {
                add_into(&mut self.alpha, g);
            }
        }
        for &(slot, v) in &attached.prompts {
            if let Some(g) = grads.get(v) {
                if self.prompts.len() <= slot {
                    self.prompts.resize(slot + 1, None);
                }
                add_into(&mut self.prompts[slot], g);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_none() && self.prompts.iter().all(Option::is_none)
    }

    /// Adds the gradients into the matching tensors' grad slots; tensors the
    /// loss did not reach receive zeros.
    pub fn store_prompts<'t>(&self, tensors: impl Iterator<Item = &'t mut Tensor>) {
        for (slot, t) in tensors.enumerate() {
            match self.prompts.get(slot) {
                Some(Some(g)) => t.accumulate_grad(g),
                _ => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
    }

    pub fn store_alpha(&self, alpha: &mut Tensor) {
        match &self.alpha {
            Some(g) => alpha.accumulate_grad(g),
            None => alpha.accumulate_grad(&vec![0.0; alpha.numel()]),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// One labelled image given as its full input sequence.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub sequence: &'a Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PassSpec<'a> {
    pub text_prompts: BranchPrompts<'a>,
    pub image_prompts: BranchPrompts<'a>,
    pub grads: GradTarget,
    /// Weight of the distillation term; only used when `teacher` is set.
    pub lambda: f64,
    /// Per-sample teacher distributions.
    pub teacher: Option<&'a [Vec<f64>]>,
    pub exec: Exec,
}

impl<'a> PassSpec<'a> {
    pub fn new(text_prompts: BranchPrompts<'a>, image_prompts: BranchPrompts<'a>) -> Self {
        PassSpec {
            text_prompts,
            image_prompts,
            grads: GradTarget::NONE,
            lambda: 0.0,
            teacher: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PassOutput {
    /// Mean of `ce + lambda * kl` over the batch.
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub probs: Vec<Vec<f64>>,
    pub text: BranchGrads,
    pub image: BranchGrads,
}

struct TextItem<'a> {
    tape: Tape<'a>,
    emb: Var,
    attached: AttachedPrompts,
}

fn text_forward<'a>(
    model: &'a Model,
    texts: &'a [Tensor],
    prompts: BranchPrompts<'a>,
    grads: GradTarget,
    exec: Exec,
) -> Result<Vec<TextItem<'a>>> {
    par::map(exec, texts.iter().collect(), |seq| {
        let mut tape = Tape::new();
        let attached = attach_prompts(&mut tape, prompts, model.cfg.text.depth, grads)?;
        let emb = branch_embedding(&mut tape, model, BranchKind::Text, seq, &attached)?;
        Ok(TextItem { tape, emb, attached })
    })
    .into_iter()
    .collect()
}

/// L2-normalized text embeddings, one row per label.
pub fn text_embeddings(model: &Model, texts: &[Tensor], prompts: BranchPrompts<'_>, exec: Exec) -> Result<Tensor> {
    let items = text_forward(model, texts, prompts, GradTarget::NONE, exec)?;
    stack(&items)
}

fn stack(items: &[TextItem<'_>]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = items.iter().map(|it| it.tape.value(it.emb).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Class probabilities for each image sequence.
pub fn predict(
    model: &Model,
    texts: &[Tensor],
    images: &[&Tensor],
    text_prompts: BranchPrompts<'_>,
    image_prompts: BranchPrompts<'_>,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    if texts.is_empty() {
        return Err(DplError::contract("no label texts"));
    }
    let text = text_embeddings(model, texts, text_prompts, exec)?;
    let text = &text;
    par::map(exec, images.to_vec(), |seq| {
        let mut tape = Tape::new();
        let attached = attach_prompts(&mut tape, image_prompts, model.cfg.image.depth, GradTarget::NONE)?;
        let emb = branch_embedding(&mut tape, model, BranchKind::Image, seq, &attached)?;
        let t = tape.constant(text);
        let p = logits(&mut tape, emb, t, model.cfg.tau)?;
        Ok(tape.value(p).to_vec())
    })
    .into_iter()
    .collect()
}

struct ImageResult {
    loss: f64,
    ce: f64,
    kl: f64,
    probs: Vec<f64>,
    image: BranchGrads,
    text_emb_grad: Option<Vec<f64>>,
}

/// Batch loss `mean_i (ce_i + lambda * kl_i)` and, as requested by
/// `spec.grads`, its gradients for both branches.
pub fn loss_and_grads(model: &Model, texts: &[Tensor], samples: &[Sample<'_>], spec: &PassSpec<'_>) -> Result<PassOutput> {
    if samples.is_empty() {
        return Err(DplError::contract("empty batch"));
    }
    if texts.is_empty() {
        return Err(DplError::contract("no label texts"));
    }
    if let Some(t) = spec.teacher {
        if t.len() != samples.len() {
            return Err(DplError::dims("teacher", &[samples.len()], &[t.len()]));
        }
    }
    if !(spec.lambda >= 0.0 && spec.lambda.is_finite()) {
        return Err(DplError::contract(format!("lambda must be non-negative, got {}", spec.lambda)));
    }
    let differentiate = spec.grads != GradTarget::NONE;
    let text_items = text_forward(model, texts, spec.text_prompts, spec.grads, spec.exec)?;
    let text_needs_grad = differentiate && text_items.iter().any(|it| it.tape.requires_grad(it.emb));
    let text = stack(&text_items)?;
    let (c, e) = text.dims2();
    let inv_b = 1.0 / samples.len() as f64;

    let indexed: Vec<(usize, Sample<'_>)> = samples.iter().copied().enumerate().collect();
    let text_ref = &text;
    let results: Vec<ImageResult> = par::map(spec.exec, indexed, |(i, s)| -> Result<ImageResult> {
        let mut tape = Tape::new();
        let attached = attach_prompts(&mut tape, spec.image_prompts, model.cfg.image.depth, spec.grads)?;
        let emb = branch_embedding(&mut tape, model, BranchKind::Image, s.sequence, &attached)?;
        let t = tape.leaf(text_ref, text_needs_grad);
        let p = logits(&mut tape, emb, t, model.cfg.tau)?;
        let ce = tape.cross_entropy(p, &[s.label])?;
        let mut kl_value = 0.0;
        let per_sample = match spec.teacher {
            Some(teacher) => {
                let q = tape.input(1, c, teacher[i].clone())?;
                let kl = tape.kl_divergence(q, p)?;
                kl_value = tape.value(kl)[0];
                let weighted = tape.scale(kl, spec.lambda);
                tape.add(ce, weighted)?
            }
            None => ce,
        };
        let loss = tape.scale(per_sample, inv_b);
        let mut out = ImageResult {
            loss: tape.value(loss)[0],
            ce: tape.value(ce)[0],
            kl: kl_value,
            probs: tape.value(p).to_vec(),
            image: BranchGrads::default(),
            text_emb_grad: None,
        };
        if differentiate && tape.requires_grad(loss) {
            let grads = tape.backward(loss)?;
            out.image.add(&attached, &grads);
            out.text_emb_grad = grads.get(t).map(<[f64]>::to_vec);
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut out = PassOutput::default();
    let mut text_grad: Option<Vec<f64>> = None;
    for r in results {
        out.loss += r.loss;
        out.ce += r.ce * inv_b;
        out.kl += r.kl * inv_b;
        out.probs.push(r.probs);
        if let Some(g) = &r.image.alpha {
            add_into(&mut out.image.alpha, g);
        }
        for (slot, g) in r.image.prompts.iter().enumerate() {
            if let Some(g) = g {
                if out.image.prompts.len() <= slot {
                    out.image.prompts.resize(slot + 1, None);
                }
                add_into(&mut out.image.prompts[slot], g);
            }
        }
        if let Some(g) = &r.text_emb_grad {
            add_into(&mut text_grad, g);
        }
    }

    if let Some(g) = text_grad {
        debug_assert_eq!(g.len(), c * e);
        let rows: Vec<(TextItem<'_>, Vec<f64>)> = text_items
            .into_iter()
            .zip(g.chunks(e).map(<[f64]>::to_vec))
            .collect();
        let per_label: Vec<BranchGrads> = par::map(spec.exec, rows, |(item, seed)| -> Result<BranchGrads> {
            let grads = item.tape.backward_with(&[(item.emb, &seed)])?;
            let mut bg = BranchGrads::default();
            bg.add(&item.attached, &grads);
            Ok(bg)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        for bg in per_label {
            if let Some(g) = &bg.alpha {
                add_into(&mut out.text.alpha, g);
            }
            for (slot, g) in bg.prompts.iter().enumerate() {
                if let Some(g) = g {
                    if out.text.prompts.len() <= slot {
                        out.text.prompts.resize(slot + 1, None);
                    }
                    add_into(&mut out.text.prompts[slot], g);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BranchConfig, ModelConfig, DEFAULT_TAU};
    use crate::supprompt::{supprompt_forward, AlphaMatrix, PromptBank, SearchSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> Model {
        let branch = BranchConfig {
            depth: 2,
            hidden_dim: 8,
            num_heads: 2,
            seq_len: 5,
        };
        Model::init_pretrained(
            11,
            ModelConfig {
                text: branch,
                image: branch,
                embed_dim: 6,
                tau: DEFAULT_TAU,
            },
        )
        .unwrap()
    }

    struct Fixture {
        model: Model,
        texts: Vec<Tensor>,
        images: Vec<Tensor>,
        labels: Vec<usize>,
        alpha_t: AlphaMatrix,
        alpha_i: AlphaMatrix,
        bank_t: PromptBank,
        bank_i: PromptBank,
    }

    fn fixture() -> Fixture {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let texts = (0..3)
            .map(|_| model.text.input_sequence(&Tensor::randn(vec![3, 8], 1.0, &mut rng)).unwrap())
            .collect();
        let images = (0..4)
            .map(|_| model.image.input_sequence(&Tensor::randn(vec![4, 8], 1.0, &mut rng)).unwrap())
            .collect();
        let space = SearchSpace::new(vec![0, 1, 3]).unwrap();
        let mut alpha_t = AlphaMatrix::init(2, 3, &mut rng);
        let mut alpha_i = AlphaMatrix::init(2, 3, &mut rng);
        alpha_t.logits.values_mut().iter_mut().for_each(|v| *v *= 50.0);
        alpha_i.logits.values_mut().iter_mut().for_each(|v| *v *= 50.0);
        let mut bank_t = PromptBank::init(2, 8, &space, &mut rng);
        let mut bank_i = PromptBank::init(2, 8, &space, &mut rng);
        for t in bank_t.tensors_mut().chain(bank_i.tensors_mut()) {
            t.values_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
        Fixture {
            model,
            texts,
            images,
            labels: vec![0, 2, 1, 2],
            alpha_t,
            alpha_i,
            bank_t,
            bank_i,
        }
    }

    #[test]
    fn batched_pass_matches_single_tape_reference() {
        let f = fixture();
        let samples: Vec<Sample<'_>> = f
            .images
            .iter()
            .zip(&f.labels)
            .map(|(s, &l)| Sample { sequence: s, label: l })
            .collect();
        let tp = BranchPrompts::Mixed {
            alpha: &f.alpha_t,
            bank: &f.bank_t,
        };
        let ip = BranchPrompts::Mixed {
            alpha: &f.alpha_i,
            bank: &f.bank_i,
        };
        let mut spec = PassSpec::new(tp, ip);
        spec.grads = GradTarget::ALL;
        let out = loss_and_grads(&f.model, &f.texts, &samples, &spec).unwrap();

        let mut tape = Tape::new();
        let (probs, at, ai) = supprompt_forward(&mut tape, &f.model, &f.texts, &f.images, tp, ip, GradTarget::ALL).unwrap();
        let loss = tape.cross_entropy(probs, &f.labels).unwrap();
        assert!((tape.value(loss)[0] - out.loss).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let mut reference_t = BranchGrads::default();
        reference_t.add(&at, &grads);
        let mut reference_i = BranchGrads::default();
        reference_i.add(&ai, &grads);

        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10 * (1.0 + x.abs()));
        assert!(close(out.text.alpha.as_ref().unwrap(), reference_t.alpha.as_ref().unwrap()));
        assert!(close(out.image.alpha.as_ref().unwrap(), reference_i.alpha.as_ref().unwrap()));
        assert_eq!(out.text.prompts.len(), 4);
        for (a, b) in out.text.prompts.iter().zip(&reference_t.prompts) {
            assert!(close(a.as_ref().unwrap(), b.as_ref().unwrap()));
        }
        for (a, b) in out.image.prompts.iter().zip(&reference_i.prompts) {
            assert!(close(a.as_ref().unwrap(), b.as_ref().unwrap()));
        }
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let f = fixture();
        let samples: Vec<Sample<'_>> = f
            .images
            .iter()
            .zip(&f.labels)
            .map(|(s, &l)| Sample { sequence: s, label: l })
            .collect();
        let run = |exec| {
            let mut spec = PassSpec::new(
                BranchPrompts::Mixed {
                    alpha: &f.alpha_t,
                    bank: &f.bank_t,
                },
                BranchPrompts::Mixed {
                    alpha: &f.alpha_i,
                    bank: &f.bank_i,
                },
            );
            spec.grads = GradTarget::ALL;
            spec.exec = exec;
            loss_and_grads(&f.model, &f.texts, &samples, &spec).unwrap()
        };
        let a = run(Exec::Sequential);
        let b = run(Exec::Parallel);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.text, b.text);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn only_requested_gradients_are_produced() {
        let f = fixture();
        let samples = [Sample {
            sequence: &f.images[0],
            label: 1,
        }];
        let mut spec = PassSpec::new(
            BranchPrompts::Mixed {
                alpha: &f.alpha_t,
                bank: &f.bank_t,
            },
            BranchPrompts::Mixed {
                alpha: &f.alpha_i,
                bank: &f.bank_i,
            },
        );
        spec.grads = GradTarget::ALPHA;
        let out = loss_and_grads(&f.model, &f.texts, &samples, &spec).unwrap();
        assert!(out.text.alpha.is_some() && out.image.alpha.is_some());
        assert!(out.text.prompts.is_empty() && out.image.prompts.is_empty());
        spec.grads = GradTarget::PROMPTS;
        let out = loss_and_grads(&f.model, &f.texts, &samples, &spec).unwrap();
        assert!(out.text.alpha.is_none() && out.image.alpha.is_none());
        assert!(!out.text.prompts.is_empty() && !out.image.prompts.is_empty());
        spec.grads = GradTarget::NONE;
        let out = loss_and_grads(&f.model, &f.texts, &samples, &spec).unwrap();
        assert!(out.text.is_empty() && out.image.is_empty());
        assert!(loss_and_grads(&f.model, &f.texts, &[], &spec).is_err());
    }

    #[test]
    fn predict_rows_are_distributions() {
        let f = fixture();
        let imgs: Vec<&Tensor> = f.images.iter().collect();
        let p = predict(&f.model, &f.texts, &imgs, BranchPrompts::Absent, BranchPrompts::Absent, Exec::Sequential).unwrap();
        assert_eq!(p.len(), 4);
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
