//! Sequential vs parallel comparison for the data-parallel hot paths:
//! raw kernels and sample-level evaluation fan-out.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use equiseg_core::cmtb::ModalityBundle;
use equiseg_core::config::ExperimentConfig;
use equiseg_core::kernels;
use equiseg_core::model::SegModel;
use equiseg_core::synth::{generate_samples, SceneParams};
use equiseg_core::util::{rng_from, trunc_normal_f64};

fn rand_vec(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| trunc_normal_f64(&mut rng, 1.0) as f32).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_256x256x64");
    let a = rand_vec(1, 256 * 64);
    let b = rand_vec(2, 64 * 256);
    group.bench_function("seq", |bench| {
        bench.iter_batched(
            || vec![0.0f32; 256 * 256],
            |mut out| {
                kernels::matmul_seq(&a, &b, 256, 64, 256, &mut out);
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("par", |bench| {
        bench.iter_batched(
            || vec![0.0f32; 256 * 256],
            |mut out| {
                kernels::matmul(&a, &b, 256, 64, 256, &mut out);
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_16x64x64_k3");
    let x = rand_vec(3, 16 * 64 * 64);
    let k = rand_vec(4, 16 * 16 * 9);
    group.bench_function("seq", |bench| {
        bench.iter_batched(
            || vec![0.0f32; 16 * 64 * 64],
            |mut out| {
                kernels::conv2d_seq(&x, &k, 16, 64, 64, 16, 3, 1, 1, &mut out);
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("par", |bench| {
        bench.iter_batched(
            || vec![0.0f32; 16 * 64 * 64],
            |mut out| {
                kernels::conv2d(&x, &k, 16, 64, 64, 16, 3, 1, 1, &mut out);
                black_box(out)
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn tiny_setup() -> (SegModel<f32>, Vec<ModalityBundle<f32>>) {
    let mut cfg = ExperimentConfig::default();
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.model.embed_dims = vec![8, 8, 8, 8];
    cfg.model.heads = vec![1, 2, 4, 8];
    cfg.model.sr_ratios = vec![4, 2, 1, 1];
    cfg.model.decode_dim = 8;
    let model = SegModel::<f32>::new(&cfg).unwrap();
    let params = SceneParams {
        height: 32,
        width: 32,
        classes: 6,
        min_objects: 2,
        max_objects: 4,
        ignore_border: 0,
        ignore_id: 255,
    };
    let samples = generate_samples(5, 0, 8, &params).unwrap();
    let bundles: Vec<ModalityBundle<f32>> = samples
        .iter()
        .map(|s| {
            let maps = s.maps.iter().map(|t| Some(t.cast::<f32>())).collect();
            ModalityBundle::new(maps, cfg.model.modalities.clone()).unwrap()
        })
        .collect();
    (model, bundles)
}

/// Sample-level fan-out: predicting a batch serially vs via the parallel
/// map the evaluators use.
fn bench_batch_predict(c: &mut Criterion) {
    let (model, bundles) = tiny_setup();
    let mut group = c.benchmark_group("predict_8_samples");
    group.sample_size(10);
    group.bench_function("serial", |bench| {
        bench.iter(|| {
            let preds: Vec<_> = bundles.iter().map(|b| model.predict(b).unwrap()).collect();
            black_box(preds)
        })
    });
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            let preds =
                equiseg_core::util::par_map_indexed(&bundles, |_i, b| model.predict(b)).unwrap();
            black_box(preds)
        })
    });
    group.finish();
}

fn bench_dataset_generation(c: &mut Criterion) {
    let params = SceneParams {
        height: 64,
        width: 64,
        classes: 6,
        min_objects: 3,
        max_objects: 6,
        ignore_border: 0,
        ignore_id: 255,
    };
    let mut group = c.benchmark_group("generate_16_scenes");
    group.sample_size(10);
    group.bench_function("parallel_map", |bench| {
        bench.iter(|| black_box(generate_samples(9, 0, 16, &params).unwrap()))
    });
    group.bench_function("serial_loop", |bench| {
        bench.iter(|| {
            let out: Vec<_> = (0..16)
                .map(|i| {
                    let spec = equiseg_core::synth::generate_scene(
                        equiseg_core::synth::sample_seed(9, i),
                        &params,
                    )
                    .unwrap();
                    equiseg_core::synth::render_modalities(&spec, &params)
                })
                .collect();
            black_box(out)
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_batch_predict,
    bench_dataset_generation
);
criterion_main!(benches);
