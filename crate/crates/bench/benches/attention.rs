use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mi2v_bench::{AttentionInput, CLIP_TOKENS};
use mi2v_core::attention::{attend, AttentionKind, ExecStrategy};
use mi2v_core::denoiser::{ConditioningInputs, Denoiser, DenoiserConfig};
use mi2v_core::flow::{token_timesteps, LatentSpec};
use mi2v_core::{random_normal, Rng};

fn strategies(c: &mut Criterion) {
    let input = AttentionInput::new(CLIP_TOKENS, 1);
    for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
        let mut g = c.benchmark_group(format!("strategy/{}", kind.as_str()));
        g.sample_size(10).measurement_time(Duration::from_secs(5));
        for st in ExecStrategy::combinations() {
            g.bench_function(st.label(), |b| {
                b.iter(|| attend(kind, black_box(&input.x), None, &input.params, st).unwrap())
            });
        }
        g.finish();
    }
}

fn scaling(c: &mut Criterion) {
    for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
        let mut g = c.benchmark_group(format!("scaling/{}", kind.as_str()));
        g.sample_size(10);
        for len in [256, 512, 1024, 2048, 4096] {
            let input = AttentionInput::new(len, 2);
            g.throughput(Throughput::Elements(len as u64));
            g.bench_with_input(BenchmarkId::from_parameter(len), &input, |b, inp| {
                b.iter(|| attend(kind, &inp.x, None, &inp.params, ExecStrategy::ALL).unwrap())
            });
        }
        g.finish();
    }
}

fn denoiser(c: &mut Criterion) {
    let spec = LatentSpec::new(1280, 720, 17).unwrap();
    let model = Denoiser::init(DenoiserConfig::micro(), 3).unwrap();
    let n = spec.latent_width() * spec.latent_height() * spec.latent_frames();
    let z = random_normal(&mut Rng::new(4), &[1, n, 128]).unwrap();
    let cond = ConditioningInputs {
        token_timesteps: token_timesteps(&spec, 0.7).unwrap(),
        motion_score: 1.0,
        positions: spec.positions(),
    };
    let mut g = c.benchmark_group("denoiser");
    g.sample_size(10);
    g.bench_function("micro_forward_2760", |b| b.iter(|| model.forward(black_box(&z), &cond).unwrap()));
    g.finish();
}

criterion_group!(benches, strategies, scaling, denoiser);
criterion_main!(benches);
