use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tit_core::autodiff::Tape;
use tit_core::backbone::{ActionSpec, ForwardOptions, TitConfig, TitModel, Variant, WindowBatch};
use tit_core::envs::EnvKind;

fn model(env: EnvKind, variant: Variant, context_len: usize) -> TitModel<f32> {
    let cfg = TitConfig {
        obs: env.obs_shape(),
        action: ActionSpec::Discrete(env.action_count()),
        patch_size: if env.obs_shape().is_image() { 4 } else { 1 },
        context_len,
        variant,
        ..TitConfig::default()
    };
    TitModel::new(cfg, 0).unwrap()
}

fn batch(env: EnvKind, batch: usize, context: usize) -> WindowBatch {
    let len = env.obs_shape().len();
    let obs = (0..batch * context * len)
        .map(|i| ((i * 37) % 101) as f32 / 101.0 - 0.5)
        .collect();
    WindowBatch::new(obs, vec![true; batch * context], batch, context, len).unwrap()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for env in [EnvKind::CartPole, EnvKind::DotCatcher] {
        for variant in [Variant::Vanilla, Variant::Enhanced] {
            let m = model(env, variant, 4);
            let b = batch(env, 64, 4);
            group.bench_with_input(
                BenchmarkId::new(format!("{env}"), variant),
                &b,
                |bench, b| {
                    bench.iter(|| {
                        let mut tape = Tape::new();
                        let out = m.forward(&mut tape, b, ForwardOptions::default()).unwrap();
                        black_box(tape.value(out.action).data()[0])
                    })
                },
            );
        }
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    for env in [EnvKind::CartPole, EnvKind::DotCatcher] {
        let mut m = model(env, Variant::Enhanced, 4);
        let b = batch(env, 64, 4);
        group.bench_function(format!("{env}"), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let out = m.forward(&mut tape, &b, ForwardOptions::default()).unwrap();
                let s = tape.sum(out.action).unwrap();
                let v = tape.sum(out.value).unwrap();
                let loss = tape.add(s, v).unwrap();
                let grads = tape.backward(loss).unwrap();
                grads.accumulate_into(m.params_mut());
            })
        });
        m.params_mut().zero_grad();
    }
    group.finish();
}

criterion_group!(benches, forward, forward_backward);
criterion_main!(benches);
