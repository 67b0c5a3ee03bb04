//! Binary artifacts: an 8-byte magic, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every array as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{FewShotTask, ImageSample, PlantedCheck, PlantedSpec};
use crate::error::{DplError, Result};
use crate::supprompt::PromptConfiguration;
use crate::train::TrainedPrompts;

const MAGIC: &[u8; 8] = b"DPLBIN01";

/// Reads the container header without touching the payload.
pub fn read_header<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(DplError::Format("not a dpl binary artifact".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| DplError::Format("header length exceeds file size".into()))?;
    let header = serde_json::from_slice(&bytes[16..end])?;
    Ok((header, &bytes[end..]))
}

fn encode<H: Serialize>(header: &H, arrays: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let n: usize = arrays.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in arrays {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Cursor over the `f64` payload.
struct Payload<'a> {
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if self.bytes.len() < 8 * n {
            return Err(DplError::Format("payload is truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(8 * n);
        self.bytes = rest;
        let values = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), values)
    }

    fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(DplError::Format(format!("{} trailing payload bytes", self.bytes.len())))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    kind: String,
    seed: u64,
    num_labels: usize,
    shots: usize,
    model_seed: u64,
    model_checksum: String,
    noise_std: f64,
    planted: Option<PlantedSpec>,
    check: Option<PlantedCheck>,
    text_shape: Vec<usize>,
    image_shape: Vec<usize>,
    train_labels: Vec<usize>,
    test_labels: Vec<usize>,
    checksum: String,
}

pub fn encode_task(task: &FewShotTask) -> Result<Vec<u8>> {
    let shape = |ts: &[Tensor]| ts.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let header = TaskHeader {
        kind: "task".into(),
        seed: task.seed,
        num_labels: task.num_labels,
        shots: task.shots,
        model_seed: task.model_seed,
        model_checksum: task.model_checksum.clone(),
        noise_std: task.noise_std,
        planted: task.planted.clone(),
        check: task.check,
        text_shape: shape(&task.text_tokens),
        image_shape: shape(&task.prototypes),
        train_labels: task.train.iter().map(|s| s.label).collect(),
        test_labels: task.test.iter().map(|s| s.label).collect(),
        checksum: task.checksum(),
    };
    let arrays: Vec<&Tensor> = task
        .text_tokens
        .iter()
        .chain(&task.prototypes)
        .chain(task.train.iter().map(|s| &s.patches))
        .chain(task.test.iter().map(|s| &s.patches))
        .collect();
    if arrays[..task.text_tokens.len()].iter().any(|t| t.shape() != header.text_shape.as_slice())
        || arrays[task.text_tokens.len()..].iter().any(|t| t.shape() != header.image_shape.as_slice())
    {
        return Err(DplError::Format("task arrays have inconsistent shapes".into()));
    }
    encode(&header, &arrays)
}

/// Decodes a task and checks it against the checksum stored in its header.
pub fn decode_task(bytes: &[u8]) -> Result<FewShotTask> {
    let (h, payload): (TaskHeader, _) = read_header(bytes)?;
    if h.kind != "task" {
        return Err(DplError::Format(format!("expected a task artifact, found {:?}", h.kind)));
    }
    let mut p = Payload { bytes: payload };
    let text_tokens = (0..h.num_labels).map(|_| p.take(&h.text_shape)).collect::<Result<_>>()?;
    let prototypes = (0..h.num_labels).map(|_| p.take(&h.image_shape)).collect::<Result<_>>()?;
    let mut samples = |labels: &[usize]| -> Result<Vec<ImageSample>> {
        labels
            .iter()
            .map(|&label| {
                Ok(ImageSample {
                    patches: p.take(&h.image_shape)?,
                    label,
                })
            })
            .collect()
    };
    let train = samples(&h.train_labels)?;
    let test = samples(&h.test_labels)?;
    p.finish()?;
    let task = FewShotTask {
        seed: h.seed,
        num_labels: h.num_labels,
        shots: h.shots,
        model_seed: h.model_seed,
        model_checksum: h.model_checksum,
        text_tokens,
        prototypes,
        train,
        test,
        noise_std: h.noise_std,
        planted: h.planted,
        check: h.check,
    };
    if task.checksum() != h.checksum {
        return Err(DplError::Format("task checksum mismatch".into()));
    }
    Ok(task)
}

/// Header of a trained-prompts checkpoint. Arrays follow in branch order
/// (text, then image) and layer order, skipping zero-length layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptsHeader {
    pub kind: String,
    pub configuration: PromptConfiguration,
    pub seed: u64,
    pub lambda: f64,
    pub hidden_text: usize,
    pub hidden_image: usize,
}

pub fn encode_prompts(prompts: &TrainedPrompts, seed: u64, lambda: f64) -> Result<Vec<u8>> {
    let hidden = |layers: &[Option<Tensor>]| layers.iter().flatten().map(|t| t.cols()).next().unwrap_or(0);
    let header = PromptsHeader {
        kind: "prompts".into(),
        configuration: prompts.config.clone(),
        seed,
        lambda,
        hidden_text: hidden(&prompts.text),
        hidden_image: hidden(&prompts.image),
    };
    let arrays: Vec<&Tensor> = prompts.text.iter().chain(&prompts.image).flatten().collect();
    encode(&header, &arrays)
}

pub fn decode_prompts(bytes: &[u8]) -> Result<(TrainedPrompts, PromptsHeader)> {
    let (h, payload): (PromptsHeader, _) = read_header(bytes)?;
    if h.kind != "prompts" {
        return Err(DplError::Format(format!("expected a prompts artifact, found {:?}", h.kind)));
    }
    let mut p = Payload { bytes: payload };
    let mut layers = |lengths: &[usize], d: usize| -> Result<Vec<Option<Tensor>>> {
        lengths
            .iter()
            .map(|&c| if c == 0 { Ok(None) } else { p.take(&[c, d]).map(|t| Some(t.with_grad())) })
            .collect()
    };
    let text = layers(&h.configuration.text, h.hidden_text)?;
    let image = layers(&h.configuration.image, h.hidden_image)?;
    p.finish()?;
    Ok((
        TrainedPrompts {
            config: h.configuration.clone(),
            text,
            image,
        },
        h,
    ))
}

/// Kind tag of a binary artifact, if `bytes` is one.
pub fn artifact_kind(bytes: &[u8]) -> Option<String> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    read_header::<Kind>(bytes).ok().map(|(k, _)| k.kind)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, PlantingConfig, TaskSpec};
    use crate::encoder::{BranchConfig, Model, ModelConfig, DEFAULT_TAU};

    fn model() -> Model {
        let b = BranchConfig {
            depth: 2,
            hidden_dim: 8,
            num_heads: 2,
            seq_len: 4,
        };
        Model::init_pretrained(
            3,
            ModelConfig {
                text: b,
                image: b,
                embed_dim: 8,
                tau: DEFAULT_TAU,
            },
        )
        .unwrap()
    }

    #[test]
    fn task_round_trip_is_exact() {
        let m = model();
        let task = generate_task(&m, 5, &TaskSpec::new(3, 4), &PlantingConfig::default()).unwrap();
        let bytes = encode_task(&task).unwrap();
        assert_eq!(artifact_kind(&bytes).as_deref(), Some("task"));
        assert_eq!(decode_task(&bytes).unwrap(), task);
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let m = model();
        let task = generate_task(&m, 5, &TaskSpec::new(2, 2), &PlantingConfig::default()).unwrap();
        let mut bytes = encode_task(&task).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_task(&bytes), Err(DplError::Format(_))));
        bytes.truncate(last);
        assert!(decode_task(&bytes).is_err());
        assert!(decode_task(b"garbage").is_err());
    }

    #[test]
    fn prompts_round_trip_is_exact() {
        let m = model();
        let cfg = PromptConfiguration {
            text: vec![2, 0],
            image: vec![0, 3],
            space: vec![0, 2, 3],
        };
        let prompts = TrainedPrompts::init(&m, &cfg, 11).unwrap();
        let bytes = encode_prompts(&prompts, 11, 0.5).unwrap();
        let (back, header) = decode_prompts(&bytes).unwrap();
        assert_eq!(back, prompts);
        assert_eq!(header.seed, 11);
        assert_eq!(header.lambda, 0.5);
        assert!(decode_task(&bytes).is_err());
    }
}
