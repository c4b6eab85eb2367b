use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use diana_core::report;
use diana_core::scenario::Scenario;
use diana_core::sim_engine::{self, Policy};
use rayon::prelude::*;

/// Simulate a grid of cooperating meta-schedulers.
#[derive(Debug, Parser)]
#[command(name = "diana", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario under one policy and write CSV metrics.
    Run(RunArgs),
    /// Replay one workload per seed under several policies.
    Compare(CompareArgs),
    /// Check a scenario file and report problems.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, env = "DIANA_OUT_DIR", default_value = "diana-out")]
    out: PathBuf,
    /// Override the job count of every Poisson and burst generator.
    #[arg(long)]
    job_count: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "diana")]
    policy: Policy,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated policies; at least two.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    policies: Vec<Policy>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    jobs: Option<usize>,
}

fn load(path: &Path, job_count: Option<usize>) -> Result<Scenario> {
    let parsed = Scenario::load(path).with_context(|| format!("invalid scenario {}", path.display()))?;
    for w in &parsed.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(match job_count {
        Some(n) => parsed.scenario.with_job_count(n),
        None => parsed.scenario,
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let scenario = load(&args.common.scenario, args.common.job_count)?;
    let metrics = sim_engine::run(&scenario, args.policy, args.seed)?;
    let files = report::write_run(&args.common.out, &metrics)?;
    let s = metrics.summary();
    println!(
        "{} jobs, makespan {} h, mean queue time {} h, {} migrations",
        s.jobs,
        report::sig6(s.makespan),
        report::sig6(s.mean_queue_time),
        s.migrations
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let scenario = load(&args.common.scenario, args.common.job_count)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .context("cannot start worker threads")?;
    let per_seed = pool.install(|| {
        args.seeds
            .par_iter()
            .map(|&seed| sim_engine::compare(&scenario, &args.policies, seed))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut summaries: Vec<_> = per_seed.iter().flatten().map(|m| m.summary()).collect();
    summaries.sort_by_key(|s| {
        let rank = args.policies.iter().position(|p| *p == s.policy).unwrap_or(usize::MAX);
        (rank, args.seeds.iter().position(|x| *x == s.seed).unwrap_or(usize::MAX))
    });
    let path = report::write_compare(&args.common.out, &summaries)?;
    for p in &args.policies {
        let rows: Vec<_> = summaries.iter().filter(|s| s.policy == *p).collect();
        let mean = rows.iter().map(|s| s.mean_queue_time).sum::<f64>() / rows.len() as f64;
        println!("{p}: mean queue time {} h over {} seeds", report::sig6(mean), rows.len());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    let scenario = load(path, None)?;
    let jobs = scenario.generate(0).job_count();
    println!(
        "{}: valid, {} sites, {} users, {jobs} jobs",
        path.display(),
        scenario.sites.len(),
        scenario.users.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Compare(args) = &cli.command {
        if args.policies.len() < 2 {
            Cli::command()
                .error(ErrorKind::TooFewValues, "--policies needs at least two policies")
                .exit();
        }
    }
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
