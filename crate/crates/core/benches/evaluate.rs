use std::hint::black_box;

use cactuskit::detector::{run_detector, OracleBackend, OracleConfig};
use cactuskit::metrics::{build_images, evaluate_images};
use cactuskit::par::Execution;
use cactuskit::{Annotation, BoundingBox, ClassTaxonomy, DatasetManifest, EvalConfig, ImageRecord};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn synthetic_manifest(images: u32) -> DatasetManifest {
    let records = (0..images)
        .map(|i| {
            let anns = (0..6u32)
                .map(|k| {
                    let x = f64::from((i * 37 + k * 90) % 500);
                    let y = f64::from((i * 53 + k * 70) % 380);
                    Annotation::new(
                        (i + k) % 6,
                        BoundingBox::new(x, y, x + 80.0, y + 60.0).unwrap(),
                    )
                })
                .collect();
            ImageRecord::new(
                format!("img{i:05}"),
                format!("images/img{i:05}.jpg"),
                640,
                480,
                anns,
            )
        })
        .collect();
    DatasetManifest::from_records(records).unwrap()
}

fn noisy_oracle() -> OracleBackend {
    let config = OracleConfig {
        jitter_px: 6.0,
        drop_rate: 0.1,
        ghost_rate: 0.3,
        misclass_rate: 0.05,
        confidence_floor: 0.2,
        seed: 17,
    };
    OracleBackend::new(config, 6).unwrap()
}

fn execution_modes(c: &mut Criterion) {
    let tax = ClassTaxonomy::cactus();
    let manifest = synthetic_manifest(2000);
    let backend = noisy_oracle();
    let (predictions, _) = run_detector(&backend, &manifest, None, Execution::Sequential).unwrap();
    let images = build_images(&manifest, &predictions).unwrap();

    let mut group = c.benchmark_group("evaluate_2000_images");
    group.sample_size(20);
    for (label, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        let config = EvalConfig {
            exec,
            ..EvalConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(label), &config, |b, cfg| {
            b.iter(|| evaluate_images(black_box(&images), &tax, cfg).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("oracle_2000_images");
    group.sample_size(20);
    for (label, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, exec| {
            b.iter(|| run_detector(&backend, black_box(&manifest), None, *exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, execution_modes);
criterion_main!(benches);
