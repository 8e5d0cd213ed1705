use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fgmoe_core::data::generate_dataset;
use fgmoe_core::harness::{encode_samples, grad_check_config, train_model, ExperimentConfig, Mode, Model};
use fgmoe_core::tensor::kernels::{gemm_seq, MatRef};

const PATH: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn operands(m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
    let b = (0..k * n).map(|i| (i as f64 * 0.029).cos()).collect();
    (a, b)
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &(m, k, n) in &[(256, 64, 64), (1024, 128, 256), (4096, 16, 256)] {
        let (a, b) = operands(m, k, n);
        let mut out = vec![0.0; m * n];
        let label = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("sequential", &label), &(), |bench, _| {
            bench.iter(|| gemm_seq(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), 0.0, black_box(&mut out)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &label), &(), |bench, _| {
            bench.iter(|| {
                fgmoe_core::tensor::kernels::gemm_par(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), 0.0, black_box(&mut out))
            })
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        steps: 1,
        mode: Mode::DecoderOnly,
        log_routing_every: 0,
        ..grad_check_config()
    };
    let data = generate_dataset(&cfg.scene(), 0, 8).unwrap();
    let mut group = c.benchmark_group(format!("pipeline/{PATH}"));
    group.sample_size(10);
    group.bench_function("generate_8", |b| b.iter(|| generate_dataset(&cfg.scene(), 0, 8).unwrap()));
    let model = Model::build(&cfg).unwrap();
    group.bench_function("encode_8", |b| b.iter(|| encode_samples(&model, &data).unwrap()));
    group.bench_function("train_step", |b| {
        b.iter_batched(
            || Model::build(&cfg).unwrap(),
            |mut m| train_model(&mut m, &data, |_| Ok(())).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, gemm, pipeline);
criterion_main!(benches);
