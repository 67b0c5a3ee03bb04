//! Synthetic few-shot classification tasks, optionally with a planted prompt
//! configuration, and the splits / batching used by search and training.
//!
//! Each label owns a prototype patch grid and a row of text tokens. Images are
//! the prototype plus Gaussian noise. A planted task is built against a
//! frozen model and a teacher prompt bank: prototypes and text tokens are
//! optimized so the model prompted with the planted configuration (prompts
//! taken from the teacher bank) separates the labels while the unprompted
//! model confuses them.

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{encode_branch, hex, logits, BranchKind, Model};
use crate::engine::Sample;
use crate::oracle::enumerate_configurations;
use crate::error::{DplError, Result};
use crate::supprompt::{AttachedPrompts, PromptBank, PromptConfiguration, SearchSpace};
use crate::train::{evaluate, train_subprompt, zero_shot_predict, TrainConfig};

pub const TEST_PER_LABEL: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub patches: Tensor,
    pub label: usize,
}

/// One optional prompt per layer.
pub type LayerPrompts = Vec<Option<Tensor>>;

/// Ground truth for a planted task: the configuration and the scale and seed
/// of the teacher prompt bank it selects from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub config: PromptConfiguration,
    pub prompt_std: f64,
    pub bank_seed: u64,
}

impl PlantedSpec {
    pub fn new(config: PromptConfiguration, bank_seed: u64) -> Self {
        PlantedSpec {
            config,
            prompt_std: 0.02,
            bank_seed,
        }
    }

    /// Teacher banks for both branches: every option at every layer. The
    /// planted prompts are the entries the planted configuration selects.
    pub fn teacher_banks(&self, model: &Model) -> Result<(PromptBank, PromptBank)> {
        let space = SearchSpace::new(self.config.space.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.bank_seed);
        let mut make = |kind: BranchKind| {
            let cfg = model.cfg.branch(kind);
            let prompts = (0..cfg.depth)
                .map(|_| {
                    space
                        .lengths()
                        .iter()
                        .map(|&c| (c > 0).then(|| Tensor::randn(vec![c, cfg.hidden_dim], self.prompt_std, &mut rng)))
                        .collect()
                })
                .collect();
            PromptBank {
                hidden_dim: cfg.hidden_dim,
                prompts,
            }
        };
        let text = make(BranchKind::Text);
        let image = make(BranchKind::Image);
        Ok((text, image))
    }

    /// Per-layer prompts of `config` drawn from the teacher banks.
    pub fn select(config: &PromptConfiguration, banks: &(PromptBank, PromptBank)) -> Result<(LayerPrompts, LayerPrompts)> {
        let pick = |lengths: &[usize], bank: &PromptBank| -> Result<Vec<Option<Tensor>>> {
            lengths
                .iter()
                .zip(&bank.prompts)
                .map(|(&c, layer)| {
                    if c == 0 {
                        return Ok(None);
                    }
                    let i = config
                        .space
                        .iter()
                        .position(|&l| l == c)
                        .ok_or_else(|| DplError::contract(format!("length {c} is not in the planted space")))?;
                    Ok(layer[i].clone())
                })
                .collect()
        };
        Ok((pick(&config.text, &banks.0)?, pick(&config.image, &banks.1)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_labels: usize,
    pub shots: usize,
    pub test_per_label: usize,
    /// Standard deviation of the per-sample patch noise.
    pub noise_std: f64,
    pub planted: Option<PlantedSpec>,
}

impl TaskSpec {
    pub fn new(num_labels: usize, shots: usize) -> Self {
        TaskSpec {
            num_labels,
            shots,
            test_per_label: TEST_PER_LABEL,
            noise_std: 0.3,
            planted: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(DplError::contract(format!("need at least 2 labels, got {}", self.num_labels)));
        }
        if self.shots < 2 || !self.shots.is_multiple_of(2) {
            return Err(DplError::contract(format!(
                "shots must be even and at least 2 (the search split halves them), got {}",
                self.shots
            )));
        }
        if self.test_per_label == 0 {
            return Err(DplError::contract("test split must not be empty"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DplError::contract("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Knobs of planted-task construction and verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantingConfig {
    /// Optimizer steps spent shaping prototypes and text tokens.
    pub steps: usize,
    pub lr: f64,
    /// Noisy copies per label included in the shaping objective.
    pub noisy_copies: usize,
    /// Single-layer neighbours of the planted configuration per shaping
    /// step, pushed towards the same confusion as the unprompted model.
    pub rivals_per_step: usize,
    pub rival_weight: f64,
    pub max_attempts: usize,
    pub max_zero_shot_acc: f64,
    pub min_planted_acc: f64,
    pub min_gain: f64,
    /// Reject noise draws where brute-force enumeration over the teacher
    /// bank finds a configuration at least as good as the planted one on the
    /// search-val split.
    pub require_unique_optimum: bool,
    /// Training used to verify that the planted configuration is learnable.
    pub verify: TrainConfig,
}

impl Default for PlantingConfig {
    fn default() -> Self {
        PlantingConfig {
            steps: 400,
            lr: 0.05,
            noisy_copies: 2,
            rivals_per_step: 4,
            rival_weight: 1.0,
            max_attempts: 10,
            max_zero_shot_acc: 0.8,
            min_planted_acc: 0.9,
            min_gain: 0.1,
            require_unique_optimum: true,
            verify: TrainConfig::default(),
        }
    }
}

/// Accuracies measured while verifying a planted task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCheck {
    pub attempt: usize,
    pub zero_shot_acc: f64,
    pub planted_acc: f64,
    /// Configurations scoring at least as well as the planted one under
    /// enumeration, when that check ran.
    pub rivals: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub seed: u64,
    pub num_labels: usize,
    pub shots: usize,
    pub model_seed: u64,
    pub model_checksum: String,
    /// Per label: the content tokens placed between SOS and EOS.
    pub text_tokens: Vec<Tensor>,
    pub prototypes: Vec<Tensor>,
    /// Ordered label-major: `shots` samples of label 0, then label 1, ...
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub noise_std: f64,
    pub planted: Option<PlantedSpec>,
    pub check: Option<PlantedCheck>,
}

/// Full input sequences of a task for one model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub texts: Vec<Tensor>,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl Prepared {
    pub fn train_samples(&self) -> Vec<Sample<'_>> {
        samples(&self.train, &self.train_labels)
    }

    pub fn test_samples(&self) -> Vec<Sample<'_>> {
        samples(&self.test, &self.test_labels)
    }

    pub fn train_subset(&self, ids: &[usize]) -> Vec<Sample<'_>> {
        ids.iter()
            .map(|&i| Sample {
                sequence: &self.train[i],
                label: self.train_labels[i],
            })
            .collect()
    }
}

fn samples<'a>(seqs: &'a [Tensor], labels: &[usize]) -> Vec<Sample<'a>> {
    seqs.iter()
        .zip(labels)
        .map(|(s, &label)| Sample { sequence: s, label })
        .collect()
}

impl FewShotTask {
    pub fn prepare(&self, model: &Model) -> Result<Prepared> {
        if model.checksum() != self.model_checksum {
            return Err(DplError::contract(format!(
                "task was generated for model seed {} with a different checksum",
                self.model_seed
            )));
        }
        let texts = self
            .text_tokens
            .iter()
            .map(|t| model.text.input_sequence(t))
            .collect::<Result<_>>()?;
        let seqs = |split: &[ImageSample]| -> Result<Vec<Tensor>> {
            split.iter().map(|s| model.image.input_sequence(&s.patches)).collect()
        };
        Ok(Prepared {
            texts,
            train: seqs(&self.train)?,
            test: seqs(&self.test)?,
            train_labels: self.train.iter().map(|s| s.label).collect(),
            test_labels: self.test.iter().map(|s| s.label).collect(),
        })
    }

    /// The same task with only the first `shots` training samples of every
    /// label. Prototypes, texts and the test split are unchanged.
    pub fn with_shots(&self, shots: usize) -> Result<FewShotTask> {
        if shots == 0 || shots > self.shots {
            return Err(DplError::contract(format!("cannot take {shots} of {} shots", self.shots)));
        }
        let train = self
            .train
            .chunks(self.shots)
            .flat_map(|label| label[..shots].iter().cloned())
            .collect();
        Ok(FewShotTask {
            shots,
            train,
            ..self.clone()
        })
    }

    /// SHA-256 over the task's scalar header fields and every array.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.seed, self.num_labels as u64, self.shots as u64, self.model_seed] {
            h.update(v.to_le_bytes());
        }
        h.update(self.model_checksum.as_bytes());
        h.update(self.noise_std.to_le_bytes());
        if let Some(p) = &self.planted {
            h.update(serde_json::to_vec(p).expect("planted spec serializes"));
        }
        let arrays = self
            .text_tokens
            .iter()
            .chain(&self.prototypes)
            .chain(self.train.iter().map(|s| &s.patches))
            .chain(self.test.iter().map(|s| &s.patches));
        for t in arrays {
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        for s in self.train.iter().chain(&self.test) {
            h.update((s.label as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    sub_seed(seed, stream)
}

fn draw_samples(prototypes: &[Tensor], per_label: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<ImageSample> {
    let mut out = Vec::with_capacity(prototypes.len() * per_label);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_label {
            let noise = Tensor::randn(proto.shape().to_vec(), noise_std, rng);
            let values = proto.values().iter().zip(noise.values()).map(|(p, n)| p + n).collect();
            out.push(ImageSample {
                patches: Tensor::new(proto.shape().to_vec(), values).expect("same shape"),
                label,
            });
        }
    }
    out
}

/// Builds a task for `model`. Without a planted spec the prototypes and
/// text tokens are plain Gaussian draws.
pub fn generate_task(model: &Model, seed: u64, spec: &TaskSpec, planting: &PlantingConfig) -> Result<FewShotTask> {
    spec.validate()?;
    let c = spec.num_labels;
    let text_cfg = model.cfg.text;
    let img_cfg = model.cfg.image;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let mut text_tokens: Vec<Tensor> = (0..c)
        .map(|_| Tensor::randn(vec![text_cfg.content_len(BranchKind::Text), text_cfg.hidden_dim], 1.0, &mut rng))
        .collect();
    let mut prototypes: Vec<Tensor> = (0..c)
        .map(|_| Tensor::randn(vec![img_cfg.content_len(BranchKind::Image), img_cfg.hidden_dim], 1.0, &mut rng))
        .collect();

    let planted = spec.planted.clone().filter(|p| p.config.text.iter().chain(&p.config.image).any(|&l| l > 0));
    if let Some(p) = &spec.planted {
        p.config.validate(model)?;
    }
    let banks = planted.as_ref().map(|p| p.teacher_banks(model)).transpose()?;
    let mut shaper = match (&planted, &banks) {
        (Some(p), Some(banks)) => Some(Shaper::new(
            Shaping {
                config: &p.config,
                banks,
                noise_std: spec.noise_std,
                planting,
            },
            &text_tokens,
            &prototypes,
        )),
        _ => None,
    };

    let attempts = if planted.is_some() { planting.max_attempts.max(1) } else { 1 };
    let mut last = None;
    for attempt in 0..attempts {
        // Every failed verification buys another round of shaping.
        if let Some(s) = shaper.as_mut() {
            s.run(model, &mut text_tokens, &mut prototypes, &mut rng)?;
        }
        let mut noise_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1 + attempt as u64));
        let train = draw_samples(&prototypes, spec.shots, spec.noise_std, &mut noise_rng);
        let test = draw_samples(&prototypes, spec.test_per_label, spec.noise_std, &mut noise_rng);
        let mut task = FewShotTask {
            seed,
            num_labels: c,
            shots: spec.shots,
            model_seed: model.seed,
            model_checksum: model.checksum(),
            text_tokens: text_tokens.clone(),
            prototypes: prototypes.clone(),
            train,
            test,
            noise_std: spec.noise_std,
            planted: spec.planted.clone(),
            check: None,
        };
        let Some(p) = &planted else {
            return Ok(task);
        };
        let check = verify_planted(model, &task, p, planting, attempt)?;
        task.check = Some(check);
        if check.zero_shot_acc >= 1.0 / c as f64
            && check.zero_shot_acc <= planting.max_zero_shot_acc
            && check.planted_acc >= planting.min_planted_acc
            && check.planted_acc - check.zero_shot_acc >= planting.min_gain
            && check.rivals.unwrap_or(0) == 0
        {
            return Ok(task);
        }
        last = Some(check);
    }
    let last = last.expect("at least one attempt");
    Err(DplError::Generation(format!(
        "planted task not verifiable after {attempts} attempts (last: zero-shot {:.3}, planted {:.3}, rivals {:?})",
        last.zero_shot_acc, last.planted_acc, last.rivals
    )))
}

fn verify_planted(
    model: &Model,
    task: &FewShotTask,
    planted: &PlantedSpec,
    planting: &PlantingConfig,
    attempt: usize,
) -> Result<PlantedCheck> {
    let exec = planting.verify.exec;
    let prepared = task.prepare(model)?;
    let test = prepared.test_samples();
    let zs = zero_shot_predict(model, &prepared.texts, &prepared.test.iter().collect::<Vec<_>>(), exec)?;
    let zero_shot_acc = accuracy(&zs, &prepared.test_labels);
    let rivals = if planting.require_unique_optimum {
        let (_, val) = split_for_search(task, false)?;
        let banks = planted.teacher_banks(model)?;
        let space = SearchSpace::new(planted.config.space.clone())?;
        let e = enumerate_configurations(model, &prepared.texts, &prepared.train_subset(&val), (&banks.0, &banks.1), &space, exec)?;
        Some(e.rivals(&planted.config)?)
    } else {
        None
    };
    let (prompts, _) = train_subprompt(model, task, &planted.config, &planting.verify)?;
    let planted_acc = evaluate(model, Some(&prompts), &prepared.texts, &test, exec)?;
    Ok(PlantedCheck {
        attempt,
        zero_shot_acc,
        planted_acc,
        rivals,
    })
}

/// [`draw_planted_config`] driven by a generator seeded from `seed`.
pub fn planted_config_for_seed(space: &SearchSpace, depth_text: usize, depth_image: usize, seed: u64) -> PromptConfiguration {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x9A7E));
    draw_planted_config(space, depth_text, depth_image, &mut rng)
}

/// Random planted configuration whose layers are either unprompted or carry
/// the longest length of `space`, with at least one prompted layer.
/// Intermediate lengths are left out: with small prompts the options differ
/// mostly in how much they dilute attention, so a mixture of a short and a
/// long option imitates a middle one and the planted length is not
/// identifiable.
pub fn draw_planted_config(space: &SearchSpace, depth_text: usize, depth_image: usize, rng: &mut impl Rng) -> PromptConfiguration {
    let top = space.lengths().iter().copied().max().unwrap_or(0);
    let mut draw = |n: usize| -> Vec<usize> { (0..n).map(|_| if rng.random_bool(0.5) { top } else { 0 }).collect() };
    let mut text = draw(depth_text);
    let image = draw(depth_image);
    if top > 0 && text.iter().chain(&image).all(|&c| c == 0) && !text.is_empty() {
        text[0] = top;
    }
    PromptConfiguration {
        text,
        image,
        space: space.lengths().to_vec(),
    }
}

/// Fraction of rows whose first maximal entry is the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| crate::supprompt::argmax_first(p) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Label the unprompted model is pushed towards: odd labels collapse onto
/// label 0, so its accuracy settles near `ceil(C/2) / C`, between `1/C` and
/// 0.8 for every `C >= 2`.
fn confusion_target(label: usize) -> usize {
    if label % 2 == 1 {
        0
    } else {
        label
    }
}

struct Shaping<'a> {
    config: &'a PromptConfiguration,
    banks: &'a (PromptBank, PromptBank),
    noise_std: f64,
    planting: &'a PlantingConfig,
}

/// `config` with one uniformly chosen layer moved to a different length.
fn neighbour(config: &PromptConfiguration, rng: &mut ChaCha8Rng) -> PromptConfiguration {
    let mut out = config.clone();
    let (dt, di) = (config.text.len(), config.image.len());
    let layer = rng.random_range(0..dt + di);
    let slot = if layer < dt {
        &mut out.text[layer]
    } else {
        &mut out.image[layer - dt]
    };
    let others: Vec<usize> = config.space.iter().copied().filter(|&c| c != *slot).collect();
    if let Some(&c) = others.choose(rng) {
        *slot = c;
    }
    out
}

/// Gradient-based shaping of prototypes and text tokens: cross-entropy of
/// the teacher-prompted model against the true labels, plus cross-entropy
/// against [`confusion_target`] for the unprompted model and for a few
/// random neighbours of the planted configuration. Optimizer state persists
/// across rounds.
struct Shaper<'a> {
    shaping: Shaping<'a>,
    adam_t: Vec<Adam>,
    adam_p: Vec<Adam>,
}

impl<'a> Shaper<'a> {
    fn new(shaping: Shaping<'a>, text_tokens: &[Tensor], prototypes: &[Tensor]) -> Self {
        Shaper {
            shaping,
            adam_t: text_tokens.iter().map(|t| Adam::new(t.numel())).collect(),
            adam_p: prototypes.iter().map(|t| Adam::new(t.numel())).collect(),
        }
    }

    fn run(&mut self, model: &Model, text_tokens: &mut [Tensor], prototypes: &mut [Tensor], rng: &mut ChaCha8Rng) -> Result<()> {
        let shaping = &self.shaping;
        let planting = shaping.planting;
        let teacher = PlantedSpec::select(shaping.config, shaping.banks)?;
        let c = text_tokens.len();
        let copies = planting.noisy_copies;
        for _ in 0..planting.steps {
            let noise: Vec<Vec<Tensor>> = (0..c)
                .map(|l| {
                    (0..copies)
                        .map(|_| Tensor::randn(prototypes[l].shape().to_vec(), shaping.noise_std, rng))
                        .collect()
                })
                .collect();
            let rivals = (0..planting.rivals_per_step)
                .map(|_| PlantedSpec::select(&neighbour(shaping.config, rng), shaping.banks))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let tok: Vec<Var> = text_tokens.iter().map(|t| tape.leaf(t, true)).collect();
            let pro: Vec<Var> = prototypes.iter().map(|t| tape.leaf(t, true)).collect();
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for l in 0..c {
                images.push(pro[l]);
                labels.push(l);
                for n in &noise[l] {
                    let nv = tape.constant(n);
                    images.push(tape.add(pro[l], nv)?);
                    labels.push(l);
                }
            }
            let confused: Vec<usize> = labels.iter().map(|&l| confusion_target(l)).collect();

            let teacher_t = fixed_prompts(&mut tape, &teacher.0);
            let teacher_i = fixed_prompts(&mut tape, &teacher.1);
            let absent_t = fixed_prompts(&mut tape, &vec![None; model.cfg.text.depth]);
            let absent_i = fixed_prompts(&mut tape, &vec![None; model.cfg.image.depth]);
            let p_teacher = class_probs(&mut tape, model, &tok, &images, &teacher_t, &teacher_i)?;
            let p_zero = class_probs(&mut tape, model, &tok, &images, &absent_t, &absent_i)?;
            let l1 = tape.cross_entropy(p_teacher, &labels)?;
            let l2 = tape.cross_entropy(p_zero, &confused)?;
            let mut loss = tape.add(l1, l2)?;
            for (rt, ri) in &rivals {
                let at = fixed_prompts(&mut tape, rt);
                let ai = fixed_prompts(&mut tape, ri);
                let p = class_probs(&mut tape, model, &tok, &images, &at, &ai)?;
                let l = tape.cross_entropy(p, &confused)?;
                let l = tape.scale(l, planting.rival_weight / planting.rivals_per_step as f64);
                loss = tape.add(loss, l)?;
            }
            let grads = tape.backward(loss)?;
            for (l, v) in tok.iter().enumerate() {
                if let Some(g) = grads.get(*v) {
                    self.adam_t[l].step(text_tokens[l].values_mut(), g, planting.lr);
                }
            }
            for (l, v) in pro.iter().enumerate() {
                if let Some(g) = grads.get(*v) {
                    self.adam_p[l].step(prototypes[l].values_mut(), g, planting.lr);
                }
            }
        }
        Ok(())
    }
}

fn fixed_prompts(tape: &mut Tape<'_>, per_layer: &[Option<Tensor>]) -> AttachedPrompts {
    let layers = per_layer
        .iter()
        .map(|p| match p {
            Some(t) => crate::encoder::LayerPrompt::Single(tape.leaf(t, false)),
            None => crate::encoder::LayerPrompt::Absent,
        })
        .collect();
    AttachedPrompts {
        layers,
        ..Default::default()
    }
}

fn class_probs<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    tokens: &[Var],
    images: &[Var],
    text_prompts: &AttachedPrompts,
    image_prompts: &AttachedPrompts,
) -> Result<Var> {
    let tv = model.text.register(tape);
    let iv = model.image.register(tape);
    let sos = tape.constant(&model.text.start_token);
    let eos = tape.constant(&model.text.end_token);
    let cls = tape.constant(&model.image.start_token);
    let mut t_rows = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let head = tape.concat_rows(sos, tok)?;
        let x0 = tape.concat_rows(head, eos)?;
        t_rows.push(encode_branch(tape, &tv, x0, &text_prompts.layers)?);
    }
    let mut i_rows = Vec::with_capacity(images.len());
    for &img in images {
        let x0 = tape.concat_rows(cls, img)?;
        i_rows.push(encode_branch(tape, &iv, x0, &image_prompts.layers)?);
    }
    let t = tape.stack_rows(&t_rows)?;
    let i = tape.stack_rows(&i_rows)?;
    logits(tape, i, t, model.cfg.tau)
}

/// Minimal Adam used only for shaping synthetic data.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Sample indices of the search-train and search-val halves: within each
/// label, even positions go to train and odd positions to val. With
/// `reuse_train_as_val` both halves are the whole training set, which is the
/// only way to search with a single shot.
pub fn split_for_search(task: &FewShotTask, reuse_train_as_val: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if reuse_train_as_val {
        let all: Vec<usize> = (0..task.train.len()).collect();
        return Ok((all.clone(), all));
    }
    if !task.shots.is_multiple_of(2) || task.shots == 0 {
        return Err(DplError::contract(format!(
            "search split needs an even number of shots, got {}",
            task.shots
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut seen = vec![0usize; task.num_labels];
    for (i, s) in task.train.iter().enumerate() {
        let k = seen[s.label];
        seen[s.label] += 1;
        if k.is_multiple_of(2) {
            train.push(i);
        } else {
            val.push(i);
        }
    }
    Ok((train, val))
}

/// Shuffled mini-batches over `ids`; the last batch may be partial.
pub fn batches(ids: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DplError::contract("batch_size must be at least 1"));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seed of the shuffle for `epoch` of a run with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    sub_seed(seed, 0x5EED_0000 + epoch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn model() -> Model {
        Model::init_pretrained(0, ModelConfig::default()).unwrap()
    }

    #[test]
    fn unplanted_task_shapes_and_determinism() {
        let m = model();
        let spec = TaskSpec::new(4, 16);
        let a = generate_task(&m, 7, &spec, &PlantingConfig::default()).unwrap();
        let b = generate_task(&m, 7, &spec, &PlantingConfig::default()).unwrap();
        let c = generate_task(&m, 8, &spec, &PlantingConfig::default()).unwrap();
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.test.len(), 4 * TEST_PER_LABEL);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.text_tokens[0].shape(), &[6, 32]);
        assert_eq!(a.train[0].patches.shape(), &[16, 32]);
        for l in 0..4 {
            assert_eq!(a.train.iter().filter(|s| s.label == l).count(), 16);
        }
    }

    #[test]
    fn with_shots_keeps_the_leading_samples_of_each_label() {
        let m = model();
        let a = generate_task(&m, 7, &TaskSpec::new(3, 6), &PlantingConfig::default()).unwrap();
        let b = a.with_shots(2).unwrap();
        assert_eq!(b.shots, 2);
        assert_eq!(b.train.len(), 6);
        for l in 0..3 {
            assert_eq!(b.train[2 * l], a.train[6 * l]);
            assert_eq!(b.train[2 * l + 1], a.train[6 * l + 1]);
        }
        assert_eq!(b.test, a.test);
        assert!(a.with_shots(7).is_err() && a.with_shots(0).is_err());
    }

    #[test]
    fn drawn_planted_configs_use_only_the_extremes() {
        let space = SearchSpace::default();
        for seed in 0..50 {
            let c = planted_config_for_seed(&space, 4, 3, seed);
            assert_eq!((c.text.len(), c.image.len()), (4, 3));
            assert!(c.text.iter().chain(&c.image).all(|&l| l == 0 || l == 6));
            assert!(c.text.iter().chain(&c.image).any(|&l| l == 6));
            assert_eq!(c, planted_config_for_seed(&space, 4, 3, seed));
        }
    }

    #[test]
    fn odd_or_tiny_shots_are_rejected() {
        let m = model();
        for shots in [0, 1, 3, 15] {
            let err = generate_task(&m, 0, &TaskSpec::new(4, shots), &PlantingConfig::default()).unwrap_err();
            assert!(err.to_string().contains("even"), "{err}");
        }
        assert!(generate_task(&m, 0, &TaskSpec::new(1, 4), &PlantingConfig::default()).is_err());
    }

    #[test]
    fn search_split_is_a_label_balanced_partition() {
        let m = model();
        for shots in [2, 16] {
            let task = generate_task(&m, 1, &TaskSpec::new(3, shots), &PlantingConfig::default()).unwrap();
            let (tr, va) = split_for_search(&task, false).unwrap();
            assert_eq!(tr.len(), va.len());
            for l in 0..3 {
                assert_eq!(tr.iter().filter(|&&i| task.train[i].label == l).count(), shots / 2);
                assert_eq!(va.iter().filter(|&&i| task.train[i].label == l).count(), shots / 2);
            }
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..task.train.len()).collect::<Vec<_>>());
            let (a, b) = split_for_search(&task, true).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), task.train.len());
        }
    }

    #[test]
    fn batching_examples() {
        let ids: Vec<usize> = (0..10).collect();
        let b = batches(&ids, 4, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(&ids, 4, 3).unwrap());
        let orders: Vec<Vec<Vec<usize>>> = (0..5).map(|e| batches(&ids, 4, epoch_seed(9, e)).unwrap()).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(orders[i], orders[j]);
            }
        }
        assert!(batches(&ids, 0, 0).is_err());
    }
}
