use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use diana_core::bulk_scheduler::schedule_group;
use diana_core::queue_manager::FeedbackQueueSet;
use diana_core::scenario::Scenario;
use diana_core::sim_engine::{run_workload, Policy, SimOptions};

fn scenario(text: &str) -> Scenario {
    Scenario::parse(text).expect("bundled scenario").scenario
}

/// A grid of `n` sites with uneven capacity and links.
fn wide_grid(n: usize) -> Scenario {
    let mut text = String::from(
        "[network.default]\nbandwidth = 100.0\nloss = 0.001\n\n[[users]]\nid = \"u\"\nquota = 2\n",
    );
    for i in 0..n {
        text += &format!("\n[[sites]]\nid = \"S{i}\"\ncpus = {}\nload = {}\n", 4 + i % 13, (i % 7) as f64 * 0.1);
    }
    for i in 1..n {
        text += &format!(
            "\n[[network.links]]\nfrom = \"S0\"\nto = \"S{i}\"\nbandwidth = {}\nloss = 0.00{}\n",
            10 + 37 * (i % 11),
            1 + i % 5
        );
    }
    text += "\n[[workload.poisson]]\nusers = [\"u\"]\nsite = \"S0\"\nrate = 10.0\ncount = 1\n";
    text += "[workload.poisson.job]\nservice = 1.0\ninput = 500.0\nexecutable = 10.0\n";
    scenario(&text)
}

fn select_site(c: &mut Criterion) {
    let grid = wide_grid(64);
    let sites = grid.site_states();
    let network = grid.network_matrix().unwrap();
    let selector = grid.config.selector();
    let job = grid.generate(1).arrivals[0].jobs[0].clone();
    c.bench_function("select_site/64_sites", |b| {
        b.iter(|| selector.select_site(black_box(&job), &sites, &network).unwrap())
    });
}

fn reprioritize(c: &mut Criterion) {
    let sweep = scenario(include_str!("../../../scenarios/sweep.scenario")).with_job_count(1000);
    let quotas = sweep.quotas();
    let jobs: Vec<_> = sweep.generate(1).arrivals.into_iter().flat_map(|a| a.jobs).collect();
    let mut queues = FeedbackQueueSet::default();
    for job in jobs {
        queues.submit(job, &quotas, 0.0).unwrap();
    }
    c.bench_function("reprioritize/1000_jobs", |b| {
        b.iter_batched_ref(
            || queues.clone(),
            |q| q.reprioritize(&quotas, 1.0).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bulk_placement(c: &mut Criterion) {
    let bulk = scenario(include_str!("../../../scenarios/bulk.scenario"));
    let sites = bulk.site_states();
    let network = bulk.network_matrix().unwrap();
    let selector = bulk.config.selector();
    let (_, origin, group) = bulk.generate(1).groups.remove(0);
    let subgroup = bulk.config.subgroup_size_for(group.len());
    c.bench_function("schedule_group/10000_jobs", |b| {
        b.iter(|| schedule_group(black_box(&group), &sites, &network, &selector, subgroup, &origin).unwrap())
    });
}

fn simulate(c: &mut Criterion) {
    let sweep = scenario(include_str!("../../../scenarios/sweep.scenario")).with_job_count(200);
    let workload = sweep.generate(1);
    let options = SimOptions {
        check_invariants: false,
        ..SimOptions::default()
    };
    let mut group = c.benchmark_group("simulate/200_jobs");
    group.sample_size(20);
    for policy in Policy::ALL {
        group.bench_function(policy.name(), |b| {
            b.iter(|| run_workload(&sweep, &workload, policy, 1, options).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, select_site, reprioritize, bulk_placement, simulate);
criterion_main!(benches);
