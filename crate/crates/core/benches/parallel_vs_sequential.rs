//! Run twice to compare backends:
//!
//!     cargo bench -p pivot-refine
//!     cargo bench -p pivot-refine --no-default-features
//!
//! With the rayon backend each benchmark also runs inside a one-thread pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pivot_refine::data::novice_prompts;
use pivot_refine::eval::{evaluate, EvalConfig, Identity};
use pivot_refine::models::{ModelConfig, RefinerBundle};
use pivot_refine::train::decoder_batch_loss;
use pivot_refine::world::{sample_log, World, WorldConfig};
use pivot_refine::{exec, oracles};

fn backend() -> &'static str {
    if exec::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn run(c: &mut Criterion, name: &str, f: &(dyn Fn() + Sync)) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(backend()), |b| b.iter(f));
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function(BenchmarkId::from_parameter("rayon-1-thread"), |b| b.iter(|| pool.install(f)));
    }
    group.finish();
}

fn benches(c: &mut Criterion) {
    let world = World::new(WorldConfig::default()).unwrap();
    run(c, "oracle_sweep_1000", &|| {
        oracles::sweep(7, 1000).unwrap();
    });
    run(c, "sample_log_2000", &|| {
        sample_log(&world, 2000, 4, 0.5, 7).unwrap();
    });
    let prompts = novice_prompts(&world, 200, 7);
    let cfg = EvalConfig::default();
    run(c, "evaluate_oracle_gap_200", &|| {
        evaluate(&Identity, &prompts, &world, &cfg).unwrap();
    });
    let bundle = RefinerBundle::init(&ModelConfig::default(), world.config(), 7).unwrap();
    let log = sample_log(&world, 64, 1, 1.0, 3).unwrap();
    let batch: Vec<_> = log
        .iter()
        .map(|r| (world.encode_image(&r.images[0]).unwrap(), r.prompt.clone()))
        .collect();
    run(c, "decoder_grad_batch_64", &|| {
        decoder_batch_loss(&bundle.decoder, &batch).unwrap();
    });
}

criterion_group!(all, benches);
criterion_main!(all);
