use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use serde_json::Value;

use dpl_core::io::{artifact_kind, decode_prompts, decode_task, read_file};
use dpl_core::metrics::{alpha_difference, fragile_rows, is_single_dominant, num_dominants, DominanceConfig};
use dpl_core::supprompt::{
    count_alpha_params, count_subprompt_params, count_supprompt_params, AlphaMatrix, PromptConfiguration, SearchSpace,
};

use crate::config::{Overrides, RunConfig};

#[derive(Debug)]
pub struct UnknownFormat(pub String);

impl fmt::Display for UnknownFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unrecognized artifact: {}", self.0)
    }
}

impl std::error::Error for UnknownFormat {}

#[derive(Deserialize)]
struct AlphaFile {
    space: Vec<usize>,
    text: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
}

pub fn inspect(path: &Path, config: Option<&Path>) -> Result<()> {
    let bytes = read_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(kind) = artifact_kind(&bytes) {
        return match kind.as_str() {
            "task" => inspect_task(&bytes),
            "prompts" => inspect_prompts(&bytes),
            other => Err(UnknownFormat(format!("binary artifact of kind {other:?}")).into()),
        };
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| UnknownFormat(path.display().to_string()))?;
    if path.extension().is_some_and(|e| e == "csv") {
        return inspect_csv(text, path);
    }
    let value: Value = serde_json::from_str(text).map_err(|_| UnknownFormat(path.display().to_string()))?;
    if let Ok(a) = serde_json::from_value::<AlphaFile>(value.clone()) {
        return inspect_alpha(&a, dims(path, config)?);
    }
    if let Ok(c) = serde_json::from_value::<PromptConfiguration>(value.clone()) {
        return inspect_configuration(&c, dims(path, config)?);
    }
    if value.get("dpl_acc").is_some() || serde_json::from_value::<RunConfig>(value.clone()).is_ok() {
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    Err(UnknownFormat(path.display().to_string()).into())
}

/// Widths for parameter counts: the given config, else the run config next
/// to the artifact, else the defaults.
fn dims(path: &Path, config: Option<&Path>) -> Result<(usize, usize, DominanceConfig)> {
    let sibling = path.parent().map(|p| p.join("run_config.json")).filter(|p| p.exists());
    let cfg = RunConfig::resolve(config.or(sibling.as_deref()), &Overrides::default())?;
    Ok((cfg.model.text.hidden_dim, cfg.model.image.hidden_dim, cfg.search.dominance))
}

fn inspect_task(bytes: &[u8]) -> Result<()> {
    let task = decode_task(bytes)?;
    println!("task: {} labels, {} shots, {} test samples", task.num_labels, task.shots, task.test.len());
    println!("seed {}, model seed {}, noise std {}", task.seed, task.model_seed, task.noise_std);
    if let Some(p) = &task.planted {
        println!("planted text {:?} image {:?} (bank seed {})", p.config.text, p.config.image, p.bank_seed);
    }
    if let Some(c) = &task.check {
        println!(
            "verified on attempt {}: zero-shot {:.3}, planted {:.3}",
            c.attempt, c.zero_shot_acc, c.planted_acc
        );
    }
    println!("checksum {}", task.checksum());
    Ok(())
}

fn inspect_prompts(bytes: &[u8]) -> Result<()> {
    let (p, h) = decode_prompts(bytes)?;
    println!("prompts: seed {}, lambda {}", h.seed, h.lambda);
    println!("text lengths  {:?}", p.config.text);
    println!("image lengths {:?}", p.config.image);
    println!("prompt parameters {}", p.num_params());
    Ok(())
}

fn inspect_configuration(c: &PromptConfiguration, (dt, di, _): (usize, usize, DominanceConfig)) -> Result<()> {
    println!("text lengths  {:?}", c.text);
    println!("image lengths {:?}", c.image);
    println!("total prompt parameters {}", count_subprompt_params(c, dt, di));
    Ok(())
}

/// Rows are options, columns are layers.
fn print_alpha_table(name: &str, alpha: &AlphaMatrix, space: &[usize]) {
    print!("{name:>6} |");
    for l in 0..alpha.depth() {
        print!(" {:>8}", format!("L{l}"));
    }
    println!();
    for (j, c) in space.iter().enumerate() {
        print!("{:>6} |", format!("c={c}"));
        for l in 0..alpha.depth() {
            print!(" {:>8.4}", alpha.row(l)[j]);
        }
        println!();
    }
}

fn inspect_alpha(a: &AlphaFile, (dt, di, dom): (usize, usize, DominanceConfig)) -> Result<()> {
    let space = SearchSpace::new(a.space.clone())?;
    let text = AlphaMatrix::from_rows(&a.text)?;
    let image = AlphaMatrix::from_rows(&a.image)?;
    let mut single = true;
    for (name, alpha) in [("text", &text), ("image", &image)] {
        print_alpha_table(name, alpha, space.lengths());
        let sd = is_single_dominant(alpha, &dom);
        single &= sd;
        println!(
            "{name}: alpha difference {:.4}, dominants {}/{}, single-dominant: {sd}, fragile rows {:?}",
            alpha_difference(alpha),
            num_dominants(alpha, &dom),
            alpha.depth() * alpha.options().saturating_sub(1),
            fragile_rows(alpha, dom.epsilon)
        );
    }
    println!("single-dominant: {single}");
    println!(
        "search parameters: prompts {}, alpha {}",
        count_supprompt_params(&space, text.depth(), dt, image.depth(), di),
        count_alpha_params(&space, text.depth(), image.depth())
    );
    Ok(())
}

fn inspect_csv(text: &str, path: &Path) -> Result<()> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| v.parse::<f64>()).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()
        .map_err(|_| UnknownFormat(path.display().to_string()))?;
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(UnknownFormat(format!("{}: ragged rows", path.display())).into());
    }
    match header.as_slice() {
        ["epoch", "alpha_diff_txt", "alpha_diff_img", _, _, _, "val_loss"] => {
            println!("metrics: {} epochs", rows.len());
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                println!("alpha difference text  first {:.4} last {:.4}", first[1], last[1]);
                println!("alpha difference image first {:.4} last {:.4}", first[2], last[2]);
                println!("val loss first {:.4} last {:.4}", first[6], last[6]);
            }
        }
        ["epoch", "layer", _, ..] => {
            // Regroup the per-layer rows into one α matrix per epoch.
            let mut epochs: Vec<Vec<Vec<f64>>> = Vec::new();
            for r in &rows {
                let e = r[0] as usize;
                if epochs.len() <= e {
                    epochs.resize(e + 1, Vec::new());
                }
                epochs[e].push(r[2..].to_vec());
            }
            let diffs = epochs
                .iter()
                .map(|m| AlphaMatrix::from_rows(m).map(|a| alpha_difference(&a)))
                .collect::<dpl_core::Result<Vec<_>>>()?;
            println!("alpha trace: {} epochs", diffs.len());
            if let (Some(first), Some(last)) = (diffs.first(), diffs.last()) {
                println!("alpha difference first {first:.4} last {last:.4}");
            }
        }
        ["epoch", "loss"] => {
            println!("training loss: {} epochs", rows.len());
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                println!("loss first {:.4} last {:.4}", first[1], last[1]);
            }
        }
        _ => return Err(UnknownFormat(path.display().to_string()).into()),
    }
    Ok(())
}
