use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hybridmoe_bench::ramp_world;
use hybridmoe_core::collectives::{allgather, alltoall, fused_combine, fused_dispatch, saa};
use hybridmoe_core::timing::Timer;
use hybridmoe_core::{ClusterSpec, CollectiveKey, CommTrace, GroupKind, ParallelLayout};

fn data_plane(c: &mut Criterion) {
    let mut g = c.benchmark_group("collectives");
    for (mp, ep, esp) in [(2, 2, 2), (4, 4, 2), (4, 4, 4)] {
        let l = ParallelLayout::new(mp, ep, esp).unwrap();
        let w = ramp_world(l.world(), l.world() * 256);
        let id = l.to_string();
        g.bench_with_input(BenchmarkId::new("alltoall_ep_esp", &id), &w, |b, w| {
            b.iter(|| alltoall(w, &l, GroupKind::EpEsp, &mut CommTrace::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("allgather_esp", &id), &w, |b, w| {
            b.iter(|| allgather(w, &l, GroupKind::Esp, &mut CommTrace::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fused_dispatch", &id), &w, |b, w| {
            b.iter(|| fused_dispatch(w, &l, &mut CommTrace::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fused_combine", &id), &w, |b, w| {
            b.iter(|| fused_combine(w, &l, &mut CommTrace::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("saa", &id), &w, |b, w| {
            b.iter(|| saa(w, &l, &mut CommTrace::new()).unwrap())
        });
    }
    g.finish();
}

fn timing(c: &mut Criterion) {
    let mut g = c.benchmark_group("timing");
    for (nodes, dev, mp, ep, esp) in [(1, 8, 2, 4, 2), (4, 4, 4, 4, 4), (8, 4, 4, 8, 4)] {
        let cluster = ClusterSpec::new(nodes, dev, 2.5e-10, 8e-10, 1e-5).unwrap();
        let l = ParallelLayout::new(mp, ep, esp).unwrap();
        let timer = Timer::new(&l, &cluster).unwrap();
        let id = format!("{nodes}x{dev} {l}");
        g.bench_function(BenchmarkId::new("all_keys", &id), |b| {
            b.iter(|| {
                CollectiveKey::ALL
                    .iter()
                    .map(|&k| timer.measure(k, 1 << 20).unwrap())
                    .sum::<f64>()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, data_plane, timing);
criterion_main!(benches);
