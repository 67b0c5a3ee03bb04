use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpl_core::autodiff::Tensor;
use dpl_core::encoder::{BranchKind, Model, ModelConfig};
use dpl_core::engine::{loss_and_grads, predict, PassSpec, Sample};
use dpl_core::par::Exec;
use dpl_core::supprompt::{AlphaMatrix, BranchPrompts, GradTarget, PromptBank, SearchSpace};

fn bench(c: &mut Criterion) {
    let model = Model::init_pretrained(0, ModelConfig::default()).unwrap();
    let space = SearchSpace::default();
    let (dt, di) = (model.cfg.text.depth, model.cfg.image.depth);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let texts: Vec<Tensor> = (0..4)
        .map(|_| {
            let raw = Tensor::randn(vec![model.cfg.text.content_len(BranchKind::Text), model.cfg.text.hidden_dim], 1.0, &mut rng);
            model.text.input_sequence(&raw).unwrap()
        })
        .collect();
    let images: Vec<Tensor> = (0..16)
        .map(|_| {
            let raw = Tensor::randn(vec![model.cfg.image.content_len(BranchKind::Image), model.cfg.image.hidden_dim], 1.0, &mut rng);
            model.image.input_sequence(&raw).unwrap()
        })
        .collect();
    let samples: Vec<Sample<'_>> = images
        .iter()
        .enumerate()
        .map(|(i, s)| Sample { sequence: s, label: i % 4 })
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let alpha_t = AlphaMatrix::init(dt, space.len(), &mut rng);
    let alpha_i = AlphaMatrix::init(di, space.len(), &mut rng);
    let bank_t = PromptBank::init(dt, model.cfg.text.hidden_dim, &space, &mut rng);
    let bank_i = PromptBank::init(di, model.cfg.image.hidden_dim, &space, &mut rng);

    let mut group = c.benchmark_group("supernet");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("loss_and_grads", &name), &exec, |b, &exec| {
            b.iter(|| {
                let mut spec = PassSpec::new(
                    BranchPrompts::Mixed { alpha: &alpha_t, bank: &bank_t },
                    BranchPrompts::Mixed { alpha: &alpha_i, bank: &bank_i },
                );
                spec.grads = GradTarget::ALL;
                spec.exec = exec;
                loss_and_grads(&model, &texts, &samples, &spec).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("predict", &name), &exec, |b, &exec| {
            b.iter(|| {
                predict(
                    &model,
                    &texts,
                    &refs,
                    BranchPrompts::Mixed { alpha: &alpha_t, bank: &bank_t },
                    BranchPrompts::Mixed { alpha: &alpha_i, bank: &bank_i },
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
