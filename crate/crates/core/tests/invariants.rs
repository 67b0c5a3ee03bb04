use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpl_core::autodiff::Tensor;
use dpl_core::data::{generate_task, PlantingConfig, TaskSpec};
use dpl_core::encoder::{BranchConfig, Model, ModelConfig, DEFAULT_TAU};
use dpl_core::engine::predict;
use dpl_core::par::Exec;
use dpl_core::search::{run_search, SearchConfig};
use dpl_core::supprompt::{
    beta_from_alpha, count_subprompt_params, count_supprompt_params, extract_subprompt, AlphaMatrix, BranchPrompts,
    PromptBank, PromptConfiguration, SearchSpace,
};
use dpl_core::train::{train_subprompt, TrainConfig};

fn tiny_model(seed: u64) -> Model {
    let b = |seq_len| BranchConfig {
        depth: 2,
        hidden_dim: 8,
        num_heads: 2,
        seq_len,
    };
    Model::init_pretrained(
        seed,
        ModelConfig {
            text: b(4),
            image: b(5),
            embed_dim: 8,
            tau: DEFAULT_TAU,
        },
    )
    .unwrap()
}

fn one_hot_alpha(lengths: &[usize], space: &SearchSpace) -> AlphaMatrix {
    let rows: Vec<Vec<f64>> = lengths
        .iter()
        .map(|&c| {
            let hot = space.index_of(c).unwrap();
            (0..space.len()).map(|j| if j == hot { 5.0 } else { 0.0 }).collect()
        })
        .collect();
    AlphaMatrix::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_ignores_row_shifts(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..6),
                               shift in -50.0..50.0f64) {
        let a = AlphaMatrix::from_rows(&rows).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let b = AlphaMatrix::from_rows(&shifted).unwrap();
        let (ba, bb) = (beta_from_alpha(&a), beta_from_alpha(&b));
        for (x, y) in ba.values().iter().zip(bb.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for row in ba.values().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_recovers_a_one_hot_configuration(text in prop::collection::vec(prop::sample::select(vec![0usize, 2, 4, 6]), 1..8),
                                                   image in prop::collection::vec(prop::sample::select(vec![0usize, 2, 4, 6]), 1..8)) {
        let space = SearchSpace::default();
        let cfg = extract_subprompt(&one_hot_alpha(&text, &space), &one_hot_alpha(&image, &space), &space).unwrap();
        prop_assert_eq!(&cfg.text, &text);
        prop_assert_eq!(&cfg.image, &image);
        let again = extract_subprompt(&one_hot_alpha(&cfg.text, &space), &one_hot_alpha(&cfg.image, &space), &space).unwrap();
        prop_assert_eq!(again, cfg);
    }

    #[test]
    fn a_configuration_never_outgrows_its_supprompt(text in prop::collection::vec(prop::sample::select(vec![0usize, 2, 4, 6]), 1..8),
                                                    image in prop::collection::vec(prop::sample::select(vec![0usize, 2, 4, 6]), 1..8),
                                                    dt in 1usize..64, di in 1usize..64) {
        let space = SearchSpace::default();
        let cfg = PromptConfiguration { text: text.clone(), image: image.clone(), space: space.lengths().to_vec() };
        let sub = count_subprompt_params(&cfg, dt, di);
        prop_assert!(sub <= count_supprompt_params(&space, text.len(), dt, image.len(), di));
        prop_assert_eq!(sub, text.iter().sum::<usize>() * dt + image.iter().sum::<usize>() * di);
    }
}

#[test]
fn predictions_ignore_alpha_row_shifts() {
    let model = tiny_model(4);
    let space = SearchSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let texts: Vec<Tensor> = (0..3)
        .map(|_| model.text.input_sequence(&Tensor::randn(vec![2, 8], 1.0, &mut rng)).unwrap())
        .collect();
    let images: Vec<Tensor> = (0..4)
        .map(|_| model.image.input_sequence(&Tensor::randn(vec![4, 8], 1.0, &mut rng)).unwrap())
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let bt = PromptBank::init(2, 8, &space, &mut rng);
    let bi = PromptBank::init(2, 8, &space, &mut rng);
    let at = AlphaMatrix::init(2, 4, &mut rng);
    let ai = AlphaMatrix::init(2, 4, &mut rng);
    let shift = |a: &AlphaMatrix, c: f64| {
        AlphaMatrix::from_rows(&a.rows().iter().map(|r| r.iter().map(|v| v + c).collect()).collect::<Vec<_>>()).unwrap()
    };
    let (at2, ai2) = (shift(&at, 3.0), shift(&ai, -7.5));
    let run = |at: &AlphaMatrix, ai: &AlphaMatrix| {
        predict(
            &model,
            &texts,
            &refs,
            BranchPrompts::Mixed { alpha: at, bank: &bt },
            BranchPrompts::Mixed { alpha: ai, bank: &bi },
            Exec::Sequential,
        )
        .unwrap()
    };
    let (p, q) = (run(&at, &ai), run(&at2, &ai2));
    for (a, b) in p.iter().flatten().zip(q.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn the_whole_pipeline_is_reproducible_and_leaves_the_model_alone() {
    let model = tiny_model(0);
    let before = model.checksum();
    let planting = PlantingConfig::default();
    let task = generate_task(&model, 5, &TaskSpec::new(3, 4), &planting).unwrap();
    let again = generate_task(&model, 5, &TaskSpec::new(3, 4), &planting).unwrap();
    assert_eq!(task.checksum(), again.checksum());

    let space = SearchSpace::default();
    let search = SearchConfig {
        epochs: 3,
        ..SearchConfig::default()
    };
    let (cfg_a, trace_a) = run_search(&model, &task, &space, &search).unwrap();
    let (cfg_b, trace_b) = run_search(&model, &task, &space, &search).unwrap();
    assert_eq!(cfg_a, cfg_b);
    assert_eq!(trace_a, trace_b);

    let train = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (pa, ha) = train_subprompt(&model, &task, &cfg_a, &train).unwrap();
    let (pb, hb) = train_subprompt(&model, &task, &cfg_a, &train).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ha.epoch_loss, hb.epoch_loss);
    assert_eq!(model.checksum(), before);
}
