use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hybridmoe_core::cost::random_profile_in_c;
use hybridmoe_core::moe::{random_inputs, run_schedule};
use hybridmoe_core::sweep::sweep;
use hybridmoe_core::{ExpertWeights, MoeConfig, ParallelLayout, ScheduleKind, SweepGrid};
use rand::SeedableRng;

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("schedules");
    let cfg = MoeConfig::new(2, 16, 16, 32, 8, 2, 1.2).unwrap();
    for (mp, ep, esp) in [(1, 4, 2), (2, 4, 2), (4, 4, 2)] {
        let l = ParallelLayout::new(mp, ep, esp).unwrap();
        let w = ExpertWeights::random(&cfg, 1);
        let x = random_inputs(&cfg, &l, 2);
        for kind in ScheduleKind::ALL {
            g.bench_function(BenchmarkId::new(kind.as_str(), l.to_string()), |b| {
                b.iter(|| run_schedule(kind, &cfg, &l, &w, &x).unwrap())
            });
        }
    }
    g.finish();
}

fn default_sweep(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let profile = random_profile_in_c(&mut rng);
    let grid = SweepGrid::default();
    c.bench_function("sweep/default_grid", |b| b.iter(|| sweep(&grid, &profile).unwrap()));
}

criterion_group!(benches, forward, default_sweep);
criterion_main!(benches);
