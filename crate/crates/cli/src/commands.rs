use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use dpl_core::data::{generate_task, FewShotTask};
use dpl_core::encoder::Model;
use dpl_core::io::{decode_prompts, decode_task, encode_prompts, encode_task, read_file, to_json, write_file};
use dpl_core::metrics::{alpha_difference, num_dominants};
use dpl_core::search::{run_search_instrumented, SearchTrace};
use dpl_core::supprompt::{count_subprompt_params, PromptConfiguration};
use dpl_core::train::{evaluate, shallow_baseline, train_subprompt, zero_shot_predict, TrainHistory};
use dpl_core::DplError;

use crate::config::{Overrides, RunConfig};

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    write_text(&out.join("run_config.json"), &to_json(cfg)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_task(path: &Path) -> Result<FewShotTask> {
    let bytes = read_file(path).with_context(|| format!("reading task {}", path.display()))?;
    decode_task(&bytes).with_context(|| format!("decoding task {}", path.display()))
}

fn load_configuration(path: &Path) -> Result<PromptConfiguration> {
    let text = fs::read_to_string(path).with_context(|| format!("reading configuration {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing configuration {}", path.display()))
}

pub fn generate(config: &Option<PathBuf>, out: &Path, o: &Overrides) -> Result<()> {
    let cfg = RunConfig::resolve(config.as_deref(), o)?;
    let spec = cfg.task_spec()?;
    let model = cfg.model()?;
    prepare_out(out, &cfg)?;
    let task = generate_task(&model, cfg.seed, &spec, &cfg.task.planting)?;
    let path = out.join("task.bin");
    write_file(&path, &encode_task(&task)?).with_context(|| format!("writing {}", path.display()))?;
    if let Some(p) = &task.planted {
        println!("planted text {:?} image {:?}", p.config.text, p.config.image);
    }
    if let Some(c) = &task.check {
        println!(
            "verified: zero-shot {:.3}, planted {:.3}, rivals {}",
            c.zero_shot_acc,
            c.planted_acc,
            c.rivals.map_or("-".to_string(), |r| r.to_string())
        );
    }
    println!("task {} checksum {}", path.display(), task.checksum());
    Ok(())
}

#[derive(Serialize)]
struct AlphaArtifact<'a> {
    space: &'a [usize],
    text: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
}

pub fn search(config: &Option<PathBuf>, out: &Path, o: &Overrides, task_path: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config.as_deref(), o)?;
    let task = load_task(task_path)?;
    let model = cfg.model()?;
    prepare_out(out, &cfg)?;
    let (found, trace, state) = run_search_instrumented(&model, &task, &cfg.space, &cfg.search, None)?;
    write_text(&out.join("config.json"), &to_json(&found)?)?;
    let alpha = AlphaArtifact {
        space: cfg.space.lengths(),
        text: state.alpha_text.rows(),
        image: state.alpha_image.rows(),
    };
    write_text(&out.join("alpha.json"), &to_json(&alpha)?)?;
    write_text(&out.join("alpha_trace_text.csv"), &alpha_trace_csv(&trace, true, cfg.space.len()))?;
    write_text(&out.join("alpha_trace_image.csv"), &alpha_trace_csv(&trace, false, cfg.space.len()))?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&trace))?;
    let d = &cfg.search.dominance;
    println!("configuration text {:?} image {:?}", found.text, found.image);
    println!(
        "alpha difference text {:.4} image {:.4}",
        alpha_difference(&state.alpha_text),
        alpha_difference(&state.alpha_image)
    );
    println!(
        "dominants text {} image {}",
        num_dominants(&state.alpha_text, d),
        num_dominants(&state.alpha_image, d)
    );
    Ok(())
}

/// One row per (epoch, layer), one column per option.
fn alpha_trace_csv(trace: &SearchTrace, text: bool, t: usize) -> String {
    let mut s = String::from("epoch,layer");
    for j in 0..t {
        write!(s, ",option_{j}").unwrap();
    }
    s.push('\n');
    for r in &trace.records {
        let rows = if text { &r.alpha_text } else { &r.alpha_image };
        for (l, row) in rows.iter().enumerate() {
            write!(s, "{},{l}", r.epoch).unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
    }
    s
}

fn metrics_csv(trace: &SearchTrace) -> String {
    let mut s = String::from("epoch,alpha_diff_txt,alpha_diff_img,dominants_txt,dominants_img,train_loss,val_loss\n");
    for r in &trace.records {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.alpha_diff_text, r.alpha_diff_image, r.dominants_text, r.dominants_image, r.train_loss, r.val_loss
        )
        .unwrap();
    }
    s
}

fn train_metrics_csv(history: &TrainHistory) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in history.epoch_loss.iter().enumerate() {
        writeln!(s, "{e},{l}").unwrap();
    }
    s
}

#[derive(Serialize)]
struct RunReport {
    seed: u64,
    zero_shot_acc: f64,
    dpl_acc: f64,
    shallow_acc: Option<f64>,
    final_loss: f64,
}

#[derive(Serialize)]
struct Report {
    configuration: PromptConfiguration,
    prompt_params: usize,
    lambda: f64,
    repeat: usize,
    zero_shot_acc: f64,
    dpl_acc: f64,
    dpl_acc_std: f64,
    shallow_acc: Option<f64>,
    shallow_acc_std: Option<f64>,
    runs: Vec<RunReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn train(config: &Option<PathBuf>, out: &Path, o: &Overrides, task_path: &Path, config_path: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config.as_deref(), o)?;
    let task = load_task(task_path)?;
    let configuration = load_configuration(config_path)?;
    let model = cfg.model()?;
    configuration.validate(&model)?;
    prepare_out(out, &cfg)?;
    let prepared = task.prepare(&model)?;
    let test = prepared.test_samples();
    let images: Vec<_> = prepared.test.iter().collect();
    let zs = zero_shot_predict(&model, &prepared.texts, &images, cfg.train.exec)?;
    let zero_shot_acc = dpl_core::data::accuracy(&zs, &prepared.test_labels);

    let mut runs = Vec::new();
    for k in 0..cfg.repeat {
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seed + k as u64;
        let dir = if cfg.repeat == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("run_{k}"))
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let (prompts, history) = train_subprompt(&model, &task, &configuration, &tc)?;
        let dpl_acc = evaluate(&model, Some(&prompts), &prepared.texts, &test, tc.exec)?;
        let shallow_acc = if cfg.shallow_baseline {
            Some(shallow_baseline(&model, &task, &tc)?)
        } else {
            None
        };
        let path = dir.join("prompts.bin");
        write_file(&path, &encode_prompts(&prompts, tc.seed, tc.lambda.unwrap_or(0.0))?)
            .with_context(|| format!("writing {}", path.display()))?;
        write_text(&dir.join("train_metrics.csv"), &train_metrics_csv(&history))?;
        println!("seed {}: dpl {dpl_acc:.4}{}", tc.seed, shallow_acc.map_or(String::new(), |s| format!(", shallow {s:.4}")));
        runs.push(RunReport {
            seed: tc.seed,
            zero_shot_acc,
            dpl_acc,
            shallow_acc,
            final_loss: history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        });
    }
    let (dpl_acc, dpl_acc_std) = mean_std(&runs.iter().map(|r| r.dpl_acc).collect::<Vec<_>>());
    let shallow: Option<Vec<f64>> = runs.iter().map(|r| r.shallow_acc).collect();
    let shallow_stats = shallow.map(|s| mean_std(&s));
    let report = Report {
        prompt_params: count_subprompt_params(&configuration, model.cfg.text.hidden_dim, model.cfg.image.hidden_dim),
        configuration,
        lambda: cfg.train.lambda.unwrap_or(0.0),
        repeat: cfg.repeat,
        zero_shot_acc,
        dpl_acc,
        dpl_acc_std,
        shallow_acc: shallow_stats.map(|s| s.0),
        shallow_acc_std: shallow_stats.map(|s| s.1),
        runs,
    };
    write_text(&out.join("report.json"), &to_json(&report)?)?;
    println!("zero-shot {zero_shot_acc:.4}, dpl {dpl_acc:.4} +- {dpl_acc_std:.4}");
    Ok(())
}

pub fn eval(config: &Option<PathBuf>, o: &Overrides, task_path: &Path, prompts: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config.as_deref(), o)?;
    let task = load_task(task_path)?;
    let model: Model = cfg.model()?;
    let prepared = task.prepare(&model)?;
    let test = prepared.test_samples();
    match prompts {
        None => {
            let acc = evaluate(&model, None, &prepared.texts, &test, cfg.train.exec)?;
            println!("zero_shot_acc {acc:.4}");
        }
        Some(path) => {
            let bytes = read_file(path).with_context(|| format!("reading {}", path.display()))?;
            let (p, _) = decode_prompts(&bytes)?;
            p.config.validate(&model)?;
            let width_ok = |layers: &[Option<dpl_core::autodiff::Tensor>], d: usize| layers.iter().flatten().all(|t| t.cols() == d);
            if !width_ok(&p.text, model.cfg.text.hidden_dim) || !width_ok(&p.image, model.cfg.image.hidden_dim) {
                return Err(DplError::Format("prompt width does not match the model".into()).into());
            }
            let acc = evaluate(&model, Some(&p), &prepared.texts, &test, cfg.train.exec)?;
            println!("dpl_acc {acc:.4}");
        }
    }
    Ok(())
}
