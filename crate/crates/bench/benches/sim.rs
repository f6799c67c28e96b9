use std::hint::black_box;

use adaptqsd_core::qsd::{fleming_viot, BurnIn, FvConfig, InitDist};
use adaptqsd_core::{simulate_path, Binning, Lag, ModelParams, SimConfig, State, StreamKey};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn path(c: &mut Criterion) {
    let p = ModelParams::default_d1();
    let cfg = SimConfig {
        horizon: 5.0,
        record_every: Some(0.5),
        ..SimConfig::default()
    };
    let start = State::alive(Lag::scalar(0.0), p.carrying_capacity_y(&[0.0]));
    let mut i = 0u64;
    c.bench_function("path_t5_untruncated", |b| {
        b.iter(|| {
            i += 1;
            let mut s = StreamKey::new(1, &[i]).stream();
            black_box(simulate_path(&start, &cfg, &mut s, &p).unwrap())
        })
    });
}

fn fv(c: &mut Criterion) {
    let p = ModelParams::default_d1();
    let cfg = SimConfig::default().with_truncation(4.0);
    let binning = Binning::truncation_box(1, 4.0, 40, 30).unwrap();
    let fv = FvConfig {
        particles: 500,
        burn_in: BurnIn::Fixed(0.0),
        window: 1.0,
        batches: 1,
        ..FvConfig::default()
    };
    let mut g = c.benchmark_group("fleming_viot");
    g.sample_size(10);
    g.bench_function("p500_window1", |b| {
        b.iter_batched(
            || InitDist::Reference,
            |init| black_box(fleming_viot(&init, &fv, &binning, &cfg, &p, 3).unwrap()),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, path, fv);
criterion_main!(benches);
