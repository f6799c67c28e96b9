use std::hint::black_box;

use adaptqsd_core::oracle::{build_generator, leading_triple, Propagator, Side};
use adaptqsd_core::ModelParams;
use criterion::{criterion_group, criterion_main, Criterion};

fn oracle(c: &mut Criterion) {
    let p = ModelParams::default_d1();
    let mut g = c.benchmark_group("oracle");
    g.sample_size(10);
    g.bench_function("build_40x30", |b| {
        b.iter(|| black_box(build_generator(&p, 4.0, 40, 30).unwrap()))
    });
    let gen = build_generator(&p, 4.0, 40, 30).unwrap();
    g.bench_function("leading_triple_40x30", |b| {
        b.iter(|| black_box(leading_triple(&gen).unwrap()))
    });
    let prop = Propagator::new(&gen, 1.0, Side::Right).unwrap();
    let ones = vec![1.0; gen.len()];
    g.bench_function("propagate_t1_40x30", |b| b.iter(|| black_box(prop.apply(&ones))));
    g.finish();
}

criterion_group!(benches, oracle);
criterion_main!(benches);
