//! Searching stage: alternate an α step on a validation batch with a prompt
//! step on a training batch, then read the configuration off the final α.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, SgdConfig, Tensor};
use crate::data::{batches, derive_seed, epoch_seed, split_for_search, FewShotTask};
use crate::encoder::Model;
use crate::engine::{loss_and_grads, PassSpec, Sample};
use crate::error::{DplError, Result};
use crate::metrics::{alpha_difference, num_dominants, DominanceConfig};
use crate::par::Exec;
use crate::supprompt::{extract_subprompt, AlphaMatrix, BranchPrompts, GradTarget, PromptBank, PromptConfiguration, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_alpha: f64,
    pub lr_prompts: f64,
    pub seed: u64,
    /// Use the whole training set as both halves (single-shot searches).
    pub reuse_train_as_val: bool,
    pub dominance: DominanceConfig,
    pub exec: Exec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 60,
            batch_size: 4,
            lr_alpha: 3.5e-3,
            lr_prompts: 3.5e-3,
            seed: 0,
            reuse_train_as_val: false,
            dominance: DominanceConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DplError::contract("batch_size must be at least 1"));
        }
        SgdConfig::new(self.lr_alpha)?;
        SgdConfig::new(self.lr_prompts)?;
        Ok(())
    }
}

/// The supprompt of both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub space: SearchSpace,
    pub alpha_text: AlphaMatrix,
    pub alpha_image: AlphaMatrix,
    pub bank_text: PromptBank,
    pub bank_image: PromptBank,
}

impl SearchState {
    pub fn init(model: &Model, space: &SearchSpace, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5EA_0001));
        let t = space.len();
        let alpha_text = AlphaMatrix::init(model.cfg.text.depth, t, &mut rng);
        let alpha_image = AlphaMatrix::init(model.cfg.image.depth, t, &mut rng);
        let bank_text = PromptBank::init(model.cfg.text.depth, model.cfg.text.hidden_dim, space, &mut rng);
        let bank_image = PromptBank::init(model.cfg.image.depth, model.cfg.image.hidden_dim, space, &mut rng);
        SearchState {
            space: space.clone(),
            alpha_text,
            alpha_image,
            bank_text,
            bank_image,
        }
    }

    fn prompts(&self) -> (BranchPrompts<'_>, BranchPrompts<'_>) {
        (
            BranchPrompts::Mixed {
                alpha: &self.alpha_text,
                bank: &self.bank_text,
            },
            BranchPrompts::Mixed {
                alpha: &self.alpha_image,
                bank: &self.bank_image,
            },
        )
    }

    pub fn configuration(&self) -> Result<PromptConfiguration> {
        extract_subprompt(&self.alpha_text, &self.alpha_image, &self.space)
    }
}

/// Which half of the search split a batch was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Which parameter group an update touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Alpha,
    Prompts,
}

/// One update as seen by the instrumentation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub epoch: usize,
    pub split: Split,
    pub sample_ids: Vec<usize>,
    /// Groups that received a gradient in this pass.
    pub differentiated: Vec<Group>,
    /// Group the optimizer stepped.
    pub updated: Group,
    pub loss: f64,
}

/// Per-epoch summary of a search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha_text: Vec<Vec<f64>>,
    pub alpha_image: Vec<Vec<f64>>,
    pub alpha_diff_text: f64,
    pub alpha_diff_image: f64,
    pub dominants_text: usize,
    pub dominants_image: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<EpochRecord>,
}

/// Algorithm-1 step: α descends the validation loss, then the prompts
/// descend the training loss under the updated α. Returns
/// `(train_loss, val_loss)`.
pub fn search_step(
    model: &Model,
    texts: &[Tensor],
    state: &mut SearchState,
    train_batch: &[Sample<'_>],
    val_batch: &[Sample<'_>],
    cfg: &SearchConfig,
) -> Result<(f64, f64)> {
    let (t, v) = search_step_logged(model, texts, state, train_batch, val_batch, cfg)?;
    Ok((t.loss, v.loss))
}

struct StepLog {
    loss: f64,
    differentiated: Vec<Group>,
}

fn search_step_logged(
    model: &Model,
    texts: &[Tensor],
    state: &mut SearchState,
    train_batch: &[Sample<'_>],
    val_batch: &[Sample<'_>],
    cfg: &SearchConfig,
) -> Result<(StepLog, StepLog)> {
    if train_batch.is_empty() || val_batch.is_empty() {
        return Err(DplError::contract("search step needs non-empty train and val batches"));
    }
    let alpha_sgd = SgdConfig::new(cfg.lr_alpha)?;
    let prompt_sgd = SgdConfig::new(cfg.lr_prompts)?;

    let val = {
        let (tp, ip) = state.prompts();
        let mut spec = PassSpec::new(tp, ip);
        spec.grads = GradTarget::ALPHA;
        spec.exec = cfg.exec;
        loss_and_grads(model, texts, val_batch, &spec)?
    };
    let val_log = StepLog {
        loss: val.loss,
        differentiated: groups(&val),
    };
    val.text.store_alpha(&mut state.alpha_text.logits);
    val.image.store_alpha(&mut state.alpha_image.logits);
    sgd_step(
        &mut [&mut state.alpha_text.logits, &mut state.alpha_image.logits],
        &alpha_sgd,
    )?;

    let train = {
        let (tp, ip) = state.prompts();
        let mut spec = PassSpec::new(tp, ip);
        spec.grads = GradTarget::PROMPTS;
        spec.exec = cfg.exec;
        loss_and_grads(model, texts, train_batch, &spec)?
    };
    let train_log = StepLog {
        loss: train.loss,
        differentiated: groups(&train),
    };
    train.text.store_prompts(state.bank_text.tensors_mut());
    train.image.store_prompts(state.bank_image.tensors_mut());
    let mut params: Vec<&mut Tensor> = state
        .bank_text
        .tensors_mut()
        .chain(state.bank_image.tensors_mut())
        .collect();
    if !params.is_empty() {
        sgd_step(&mut params, &prompt_sgd)?;
    }
    Ok((train_log, val_log))
}

fn groups(out: &crate::engine::PassOutput) -> Vec<Group> {
    let mut g = Vec::new();
    if out.text.alpha.is_some() || out.image.alpha.is_some() {
        g.push(Group::Alpha);
    }
    if out.text.prompts.iter().chain(&out.image.prompts).any(Option::is_some) {
        g.push(Group::Prompts);
    }
    g
}

/// Full search; returns the extracted configuration and the per-epoch trace.
pub fn run_search(
    model: &Model,
    task: &FewShotTask,
    space: &SearchSpace,
    cfg: &SearchConfig,
) -> Result<(PromptConfiguration, SearchTrace)> {
    let (config, trace, _) = run_search_instrumented(model, task, space, cfg, None)?;
    Ok((config, trace))
}

/// [`run_search`] that also returns the final supprompt and, when `log` is
/// given, appends one event per optimizer update.
pub fn run_search_instrumented(
    model: &Model,
    task: &FewShotTask,
    space: &SearchSpace,
    cfg: &SearchConfig,
    mut log: Option<&mut Vec<UpdateEvent>>,
) -> Result<(PromptConfiguration, SearchTrace, SearchState)> {
    cfg.validate()?;
    let prepared = task.prepare(model)?;
    let (train_ids, val_ids) = split_for_search(task, cfg.reuse_train_as_val)?;
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(DplError::contract("search needs non-empty train and val splits"));
    }
    let mut state = SearchState::init(model, space, cfg.seed);
    let mut trace = SearchTrace::default();
    let shuffle_seed = derive_seed(cfg.seed, task.seed);
    for epoch in 0..cfg.epochs {
        let train_batches = batches(&train_ids, cfg.batch_size, epoch_seed(shuffle_seed, 2 * epoch))?;
        let val_batches = batches(&val_ids, cfg.batch_size, epoch_seed(shuffle_seed, 2 * epoch + 1))?;
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for (k, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[k % val_batches.len()];
            let train_samples = prepared.train_subset(tb);
            let val_samples = prepared.train_subset(vb);
            let (t, v) = search_step_logged(model, &prepared.texts, &mut state, &train_samples, &val_samples, cfg)?;
            train_sum += t.loss;
            val_sum += v.loss;
            if let Some(log) = log.as_deref_mut() {
                log.push(UpdateEvent {
                    epoch,
                    split: Split::Val,
                    sample_ids: vb.clone(),
                    differentiated: v.differentiated,
                    updated: Group::Alpha,
                    loss: v.loss,
                });
                log.push(UpdateEvent {
                    epoch,
                    split: Split::Train,
                    sample_ids: tb.clone(),
                    differentiated: t.differentiated,
                    updated: Group::Prompts,
                    loss: t.loss,
                });
            }
        }
        let n = train_batches.len() as f64;
        trace.records.push(EpochRecord {
            epoch,
            alpha_text: state.alpha_text.rows(),
            alpha_image: state.alpha_image.rows(),
            alpha_diff_text: alpha_difference(&state.alpha_text),
            alpha_diff_image: alpha_difference(&state.alpha_image),
            dominants_text: num_dominants(&state.alpha_text, &cfg.dominance),
            dominants_image: num_dominants(&state.alpha_image, &cfg.dominance),
            train_loss: train_sum / n,
            val_loss: val_sum / n,
        });
    }
    let config = state.configuration()?;
    Ok((config, trace, state))
}
