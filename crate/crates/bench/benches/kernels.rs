use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use priorseg::autograd::Graph;
use priorseg::dataset::{generate_corpus, DatasetConfig};
use priorseg::model::{Model, Prepared};
use priorseg::params::ParamStore;
use priorseg::tensor::{conv2d, matmul, Tensor};
use priorseg::trainer::{TrainConfig, Trainer};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [64, 256] {
        let (a, b) = (random(&[n, n], &mut rng), random(&[n, n], &mut rng));
        c.bench_function(&format!("matmul_{n}"), |bch| bch.iter(|| matmul(black_box(&a), black_box(&b))));
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[16, 64, 64], &mut rng);
    let w = random(&[24, 16, 3, 3], &mut rng);
    let b = random(&[24], &mut rng);
    c.bench_function("conv2d_16x64x64_to_24_s2", |bch| bch.iter(|| conv2d(black_box(&x), &w, &b, 2, 1)));
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, k, v) = (random(&[32, 64], &mut rng), random(&[32, 64], &mut rng), random(&[32, 64], &mut rng));
    c.bench_function("attention_fwd_bwd_32x64_h4", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let a = g.attention(qv, kv, vv, 4, true);
            let s = g.sum(a);
            black_box(g.backward(s))
        })
    });
}

fn toy_prepared(model: &Model, n: usize) -> Vec<Prepared> {
    let cfg = DatasetConfig { scenes: n, ..Default::default() };
    generate_corpus(&cfg).unwrap().samples().iter().map(|s| model.prepare(s).unwrap()).collect()
}

fn prior_path(c: &mut Criterion) {
    let cfg = TrainConfig::toy();
    let mut store = ParamStore::new();
    let model = Model::new(cfg.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let p = toy_prepared(&model, 1).remove(0);
    let d = model.policy.d_model();
    let e = random(&[1, d], &mut ChaCha8Rng::seed_from_u64(4));
    c.bench_function("segment_fwd_bwd_toy", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let keys = model.prior.encode_keys(&mut g, &store, &p.canvas_image).unwrap();
            let ev = g.constant(e.clone());
            let out = model.segment(&mut g, &store, keys, ev);
            let s = g.sum(out.mask_logits);
            black_box(g.backward(s))
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut cfg = TrainConfig::toy();
    cfg.steps = usize::MAX;
    let mut trainer = Trainer::new(cfg).unwrap();
    let data = toy_prepared(&trainer.model, 8);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_toy", |bch| {
        bch.iter(|| {
            let idx = trainer.batch_indices(trainer.step, data.len());
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
            black_box(trainer.train_step(&batch).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, gemm, conv, attention, prior_path, train_step);
criterion_main!(benches);
