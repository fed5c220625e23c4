use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cftp_core::dynamics::{Dynamics, Exclusion};
use cftp_core::par;
use cftp_core::randomness::RandomField;
use cftp_core::schedules::single_site_schedule;
use cftp_core::{Spec, Torus};

fn draw(spec: &Spec, schedule: &cftp_core::dynamics::Schedule, torus: &Torus, i: usize) -> u32 {
    let field = RandomField::new(7).substream(i as u64);
    let dy = Dynamics::on_torus(spec, schedule, &field, torus).unwrap();
    dy.cftp_torus(1 << 16).unwrap().horizon
}

fn replicas(c: &mut Criterion) {
    let spec = Spec::ising(0.15, 2).unwrap();
    let schedule = single_site_schedule(&spec, Exclusion::L1Ball).unwrap();
    let torus = Torus::new(&[3, 3]).unwrap();
    let mut g = c.benchmark_group("torus_replicas");
    g.sample_size(10);
    for n in [64usize, 256] {
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| (0..n).map(|i| draw(&spec, &schedule, &torus, i)).collect::<Vec<_>>())
        });
        g.bench_with_input(BenchmarkId::new(if par::PARALLEL { "parallel" } else { "fallback" }, n), &n, |b, &n| {
            b.iter(|| par::map_range(n, |i| draw(&spec, &schedule, &torus, i)))
        });
    }
    g.finish();
}

criterion_group!(benches, replicas);
criterion_main!(benches);
