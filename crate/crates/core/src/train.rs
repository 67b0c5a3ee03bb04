//! Training stage: fit the prompts of a fixed configuration under
//! cross-entropy plus optional distillation towards the frozen unprompted
//! model, and evaluate accuracy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, SgdConfig, Tape, Tensor, Var};
use crate::data::{accuracy, batches, derive_seed, epoch_seed, FewShotTask};
use crate::encoder::{BranchKind, Model};
use crate::engine::{loss_and_grads, predict, PassSpec, Sample};
use crate::error::{DplError, Result};
use crate::par::Exec;
use crate::supprompt::{init_prompt, BranchPrompts, GradTarget, PromptConfiguration};

/// Length and depth of the shallow-prompting baseline.
pub const SHALLOW_LENGTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Distillation weight. `None` runs plain cross-entropy; `Some(l)` adds
    /// `l` times the KL divergence from the unprompted model.
    pub lambda: Option<f64>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 4,
            lr: 3.5e-3,
            lambda: None,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DplError::contract("batch_size must be at least 1"));
        }
        SgdConfig::new(self.lr)?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(DplError::contract(format!("lambda must be non-negative, got {l}")));
            }
        }
        Ok(())
    }
}

/// Prompts of a discrete configuration; zero-length layers hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPrompts {
    pub config: PromptConfiguration,
    pub text: Vec<Option<Tensor>>,
    pub image: Vec<Option<Tensor>>,
}

impl TrainedPrompts {
    /// Fresh Gaussian prompts for every non-zero layer, text layers first.
    pub fn init(model: &Model, config: &PromptConfiguration, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |kind: BranchKind| -> Vec<Option<Tensor>> {
            let d = model.cfg.branch(kind).hidden_dim;
            config
                .branch(kind)
                .iter()
                .map(|&c| (c > 0).then(|| init_prompt(c, d, &mut rng)))
                .collect()
        };
        let text = make(BranchKind::Text);
        let image = make(BranchKind::Image);
        Ok(TrainedPrompts {
            config: config.clone(),
            text,
            image,
        })
    }

    pub fn branch(&self, kind: BranchKind) -> BranchPrompts<'_> {
        match kind {
            BranchKind::Text => BranchPrompts::Fixed(&self.text),
            BranchKind::Image => BranchPrompts::Fixed(&self.image),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.text.iter().chain(&self.image).flatten()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }
}

/// Per-epoch and per-step losses of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub steps: Vec<TrainStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub epoch: usize,
    pub sample_ids: Vec<usize>,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Teacher distributions used for this batch, when distilling.
    pub teacher: Option<Vec<Vec<f64>>>,
}

/// Predictions of the unprompted model.
pub fn zero_shot_predict(model: &Model, texts: &[Tensor], images: &[&Tensor], exec: Exec) -> Result<Vec<Vec<f64>>> {
    predict(model, texts, images, BranchPrompts::Absent, BranchPrompts::Absent, exec)
}

/// `ce(pred, labels) + lambda * kl(teacher || pred)` on a tape. Without a
/// teacher or with `lambda == 0` this is the cross-entropy node itself.
pub fn total_loss(tape: &mut Tape<'_>, pred: Var, labels: &[usize], teacher: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DplError::contract(format!("lambda must be non-negative, got {lambda}")));
    }
    let ce = tape.cross_entropy(pred, labels)?;
    match teacher {
        Some(t) if lambda > 0.0 => {
            let kl = tape.kl_divergence(t, pred)?;
            let weighted = tape.scale(kl, lambda);
            tape.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

/// Fits fresh prompts for `config` on the full training set.
pub fn train_subprompt(
    model: &Model,
    task: &FewShotTask,
    config: &PromptConfiguration,
    cfg: &TrainConfig,
) -> Result<(TrainedPrompts, TrainHistory)> {
    train_subprompt_observed(model, task, config, cfg, &mut |_| {})
}

/// [`train_subprompt`] with a callback after every optimizer step.
pub fn train_subprompt_observed(
    model: &Model,
    task: &FewShotTask,
    config: &PromptConfiguration,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainStep),
) -> Result<(TrainedPrompts, TrainHistory)> {
    cfg.validate()?;
    let prepared = task.prepare(model)?;
    let mut prompts = TrainedPrompts::init(model, config, derive_seed(cfg.seed, 0x7A1_0001))?;
    let mut history = TrainHistory::default();
    let sgd = SgdConfig::new(cfg.lr)?;
    let ids: Vec<usize> = (0..prepared.train.len()).collect();
    let shuffle_seed = derive_seed(cfg.seed, task.seed);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&ids, cfg.batch_size, epoch_seed(shuffle_seed, epoch))? {
            let samples = prepared.train_subset(&batch);
            let teacher = match cfg.lambda {
                Some(_) => Some(zero_shot_predict(
                    model,
                    &prepared.texts,
                    &samples.iter().map(|s| s.sequence).collect::<Vec<_>>(),
                    cfg.exec,
                )?),
                None => None,
            };
            let out = step(model, &prepared.texts, &samples, &mut prompts, teacher.as_deref(), cfg, &sgd)?;
            total += out.0;
            count += 1;
            let record = TrainStep {
                epoch,
                sample_ids: batch,
                loss: out.0,
                ce: out.1,
                kl: out.2,
                teacher,
            };
            observer(&record);
            history.steps.push(record);
        }
        history.epoch_loss.push(total / count.max(1) as f64);
    }
    Ok((prompts, history))
}

fn step(
    model: &Model,
    texts: &[Tensor],
    samples: &[Sample<'_>],
    prompts: &mut TrainedPrompts,
    teacher: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    sgd: &SgdConfig,
) -> Result<(f64, f64, f64)> {
    let out = {
        let mut spec = PassSpec::new(prompts.branch(BranchKind::Text), prompts.branch(BranchKind::Image));
        spec.grads = GradTarget::PROMPTS;
        spec.teacher = teacher;
        spec.lambda = cfg.lambda.unwrap_or(0.0);
        spec.exec = cfg.exec;
        loss_and_grads(model, texts, samples, &spec)?
    };
    out.text.store_prompts(prompts.text.iter_mut().flatten().filter(|t| t.rows() > 0));
    out.image.store_prompts(prompts.image.iter_mut().flatten().filter(|t| t.rows() > 0));
    let mut params: Vec<&mut Tensor> = prompts
        .text
        .iter_mut()
        .chain(prompts.image.iter_mut())
        .flatten()
        .filter(|t| t.rows() > 0)
        .collect();
    if !params.is_empty() {
        sgd_step(&mut params, sgd)?;
    }
    Ok((out.loss, out.ce, out.kl))
}

/// Test accuracy with `prompts`, or of the unprompted model for `None`.
pub fn evaluate(
    model: &Model,
    prompts: Option<&TrainedPrompts>,
    texts: &[Tensor],
    test: &[Sample<'_>],
    exec: Exec,
) -> Result<f64> {
    if test.is_empty() {
        return Err(DplError::contract("cannot evaluate on an empty split"));
    }
    let images: Vec<&Tensor> = test.iter().map(|s| s.sequence).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let (tp, ip) = match prompts {
        Some(p) => (p.branch(BranchKind::Text), p.branch(BranchKind::Image)),
        None => (BranchPrompts::Absent, BranchPrompts::Absent),
    };
    let probs = predict(model, texts, &images, tp, ip, exec)?;
    Ok(accuracy(&probs, &labels))
}

/// Length-16 prompt at the first layer of both branches, nothing elsewhere.
pub fn shallow_configuration(model: &Model) -> PromptConfiguration {
    let mut text = vec![0; model.cfg.text.depth];
    let mut image = vec![0; model.cfg.image.depth];
    text[0] = SHALLOW_LENGTH;
    image[0] = SHALLOW_LENGTH;
    PromptConfiguration {
        text,
        image,
        space: Vec::new(),
    }
}

/// Trains the shallow configuration and returns its test accuracy.
pub fn shallow_baseline(model: &Model, task: &FewShotTask, cfg: &TrainConfig) -> Result<f64> {
    let (prompts, _) = train_subprompt(model, task, &shallow_configuration(model), cfg)?;
    let prepared = task.prepare(model)?;
    evaluate(model, Some(&prompts), &prepared.texts, &prepared.test_samples(), cfg.exec)
}
