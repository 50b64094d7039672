//! Sequential vs rayon execution of the batch-level hot paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use retina_vq::data::{generate_synthetic_dataset, PhantomConfig};
use retina_vq::roi::{extract_rois, RoiConfig};
use retina_vq::train::{TrainConfig, Trainer};
use retina_vq::Exec;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn roi_extraction(c: &mut Criterion) {
    let index = generate_synthetic_dataset(&PhantomConfig::for_resolution(64), 32, 1).unwrap();
    let images: Vec<_> = index.entries.iter().map(|e| &e.pixels).collect();
    let cfg = RoiConfig::for_resolution(64);
    let mut g = c.benchmark_group("extract_rois_32");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(extract_rois(&images, &cfg, exec)))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let index = generate_synthetic_dataset(&PhantomConfig::for_resolution(64), 32, 2).unwrap();
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(10);
    for (name, exec) in EXECS {
        let trainer = Trainer::new(&index, TrainConfig::desk(), exec).unwrap();
        let mut state = trainer.init_state();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.step(&mut state).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, roi_extraction, train_step);
criterion_main!(benches);
