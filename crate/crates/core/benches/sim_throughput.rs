//! Replicate throughput: data-parallel batch execution versus the
//! single-threaded path, for a monitoring-only workload and a full
//! inference workload.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use seqcov::boundaries::SpendingFunction;
use seqcov::covariance::StagePlan;
use seqcov::inference::Ordering;
use seqcov::simulation::{
    run_replicates, run_replicates_rejection_only, run_replicates_seq, GeneratorConfig, Scenario,
    ScenarioSpec,
};

fn spec(n: u64, stages: usize) -> ScenarioSpec {
    let step = n / stages as u64;
    ScenarioSpec {
        scenario: Scenario::HybridInflateFinal,
        plan: StagePlan::new((1..=stages as u64).map(|k| k * step).collect()).unwrap(),
        alpha: 0.05,
        spending: SpendingFunction::PocockApprox,
        ordering: Ordering::StageWise,
        level: 0.95,
    }
}

fn bench_replicates(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        delta: 0.1,
        rho: 0.5,
        num_covariates: 1,
    };
    let sp = spec(400, 2);

    let mut group = c.benchmark_group("replicates_full");
    group.sample_size(10);
    for reps in [50usize] {
        group.bench_with_input(BenchmarkId::new("parallel", reps), &reps, |b, &reps| {
            b.iter(|| run_replicates(&cfg, &sp, reps, 42).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", reps), &reps, |b, &reps| {
            b.iter(|| run_replicates_seq(&cfg, &sp, reps, 42).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("replicates_rejection_only");
    group.sample_size(10);
    for reps in [500usize] {
        group.bench_with_input(BenchmarkId::new("parallel", reps), &reps, |b, &reps| {
            b.iter(|| run_replicates_rejection_only(&cfg, &sp, reps, 42).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_replicates);
criterion_main!(benches);
