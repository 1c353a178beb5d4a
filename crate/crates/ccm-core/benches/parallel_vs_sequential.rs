//! Compares the data-parallel batch loops against the sequential fallback:
//! training-batch loss gradients, batched sampling, and metric evaluation.
//! Both paths produce bitwise-identical results; this suite measures the
//! throughput difference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ccm_core::consistency::{cct_loss, default_huber_c, ConsistencyModel};
use ccm_core::data::synth_lowlight;
use ccm_core::metrics::{psnr, ssim, SsimOptions};
use ccm_core::network::UNetConfig;
use ccm_core::parallel::{self, Parallelism};
use ccm_core::sampling::sample_batch;
use ccm_core::schedule::NoiseSchedule;
use ccm_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Rayon),
];

fn model() -> ConsistencyModel<f32> {
    ConsistencyModel::new(UNetConfig::default(), NoiseSchedule::default(), 7).unwrap()
}

fn bench_batch_loss_grads(c: &mut Criterion) {
    let model = model();
    let data = synth_lowlight(1, 32, 16).unwrap();
    let levels = model.sched.discretize(11).unwrap();
    let huber = default_huber_c(3 * 16 * 16);
    let batch = 8usize;

    let mut group = c.benchmark_group("batch_loss_grads");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| {
                let results = parallel::map_range(batch, par, |i| {
                    let pair = &data[i % data.len()];
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    let n = 1 + i % (levels.len() - 1);
                    let z = Tensor::<f32>::randn(&[3, 16, 16], &mut rng);
                    cct_loss(&model, &pair.r, &pair.v, n, &levels, &z, huber, true)
                        .unwrap()
                        .loss
                });
                results.iter().sum::<f64>()
            })
        });
    }
    group.finish();
}

fn bench_sample_batch(c: &mut Criterion) {
    let model = model();
    let data = synth_lowlight(2, 8, 16).unwrap();
    let conditions: Vec<Tensor<f32>> = data.iter().map(|p| p.v.clone()).collect();

    let mut group = c.benchmark_group("sample_batch");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| sample_batch(&model, &conditions, 3, true, par).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let data = synth_lowlight(3, 16, 32).unwrap();

    let mut group = c.benchmark_group("psnr_ssim_over_dataset");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| {
                let scores = parallel::map_indexed(&data, par, |_, pair| {
                    let p = psnr(&pair.v, &pair.r, 2.0).unwrap();
                    let s = ssim(
                        &pair.v,
                        &pair.r,
                        &SsimOptions {
                            data_range: 2.0,
                            ..Default::default()
                        },
                    )
                    .unwrap();
                    (p, s)
                });
                scores.len()
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_loss_grads,
    bench_sample_batch,
    bench_metrics
);
criterion_main!(benches);
