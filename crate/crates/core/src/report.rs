//! CSV output for runs and comparisons.
//!
//! Column order is fixed and every float is printed with six significant
//! digits so repeated runs diff cleanly.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sim_engine::{Metrics, Summary};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv encoding failed: {0}")]
    Csv(#[from] csv::Error),
}

pub const JOB_COLUMNS: [&str; 18] = [
    "job_id",
    "owner",
    "group",
    "origin",
    "site",
    "processors",
    "submit",
    "start",
    "end",
    "priority_at_submit",
    "queue_at_submit",
    "priority_at_start",
    "queue_at_start",
    "queue_time",
    "execution_time",
    "turnaround",
    "response_time",
    "migrated",
];

pub const SAMPLE_COLUMNS: [&str; 7] = ["time", "site", "queued", "running", "imports", "exports", "completed"];

pub const SITE_COLUMNS: [&str; 7] = ["site", "cpus", "completed", "imports", "exports", "utilization", "throughput"];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "policy",
    "seed",
    "jobs",
    "makespan",
    "mean_queue_time",
    "max_queue_time",
    "mean_execution_time",
    "mean_turnaround",
    "mean_response_time",
    "migrations",
    "throughput",
];

pub const MIGRATION_COLUMNS: [&str; 8] = [
    "time",
    "job_id",
    "from",
    "to",
    "local_jobs_ahead",
    "target_jobs_ahead",
    "local_cost",
    "target_cost",
];

/// Formats `x` with six significant digits in fixed or scientific notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let precision = (5 - magnitude).max(0) as usize;
    let text = format!("{x:.precision$}");
    // Rounding can carry into a new leading digit, e.g. 9.999999 -> 10.00000.
    let rounded: f64 = text.parse().expect("formatted float");
    if rounded.abs() >= 10f64.powi(magnitude + 1) && precision > 0 {
        let precision = precision - 1;
        return format!("{x:.precision$}");
    }
    text
}

fn to_string(wtr: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = wtr.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn jobs_csv(m: &Metrics) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(JOB_COLUMNS)?;
    for j in &m.jobs {
        w.write_record([
            j.id.0.to_string(),
            j.owner.to_string(),
            j.group.map(|g| g.0.to_string()).unwrap_or_default(),
            j.origin.to_string(),
            j.site.to_string(),
            j.processors.to_string(),
            sig6(j.submit),
            sig6(j.start),
            sig6(j.end),
            sig6(j.priority_at_submit),
            j.queue_at_submit.to_string(),
            sig6(j.priority_at_start),
            j.queue_at_start.to_string(),
            sig6(j.queue_time),
            sig6(j.execution_time),
            sig6(j.turnaround),
            sig6(j.response_time),
            j.migrated.to_string(),
        ])?;
    }
    to_string(w)
}

pub fn samples_csv(m: &Metrics) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SAMPLE_COLUMNS)?;
    for s in &m.samples {
        w.write_record([
            sig6(s.time),
            m.sites[s.site].site.to_string(),
            s.queued.to_string(),
            s.running.to_string(),
            s.imports.to_string(),
            s.exports.to_string(),
            s.completed.to_string(),
        ])?;
    }
    to_string(w)
}

pub fn site_stats_csv(m: &Metrics) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SITE_COLUMNS)?;
    for s in &m.sites {
        w.write_record([
            s.site.to_string(),
            s.cpus.to_string(),
            s.completed.to_string(),
            s.imports.to_string(),
            s.exports.to_string(),
            sig6(s.utilization),
            sig6(s.throughput),
        ])?;
    }
    to_string(w)
}

fn summary_record(s: &Summary, seed: &str) -> Vec<String> {
    vec![
        s.policy.to_string(),
        seed.to_owned(),
        s.jobs.to_string(),
        sig6(s.makespan),
        sig6(s.mean_queue_time),
        sig6(s.max_queue_time),
        sig6(s.mean_execution_time),
        sig6(s.mean_turnaround),
        sig6(s.mean_response_time),
        s.migrations.to_string(),
        sig6(s.throughput),
    ]
}

/// One row per run, then one `mean` row per policy in order of first appearance.
pub fn summary_csv(runs: &[Summary]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for s in runs {
        w.write_record(summary_record(s, &s.seed.to_string()))?;
    }
    if runs.len() > 1 {
        let mut policies = Vec::new();
        for s in runs {
            if !policies.contains(&s.policy) {
                policies.push(s.policy);
            }
        }
        for p in policies {
            let rows: Vec<&Summary> = runs.iter().filter(|s| s.policy == p).collect();
            let n = rows.len() as f64;
            let avg = |f: fn(&Summary) -> f64| rows.iter().map(|s| f(s)).sum::<f64>() / n;
            let mean = Summary {
                policy: p,
                seed: 0,
                jobs: (rows.iter().map(|s| s.jobs).sum::<usize>() as f64 / n).round() as usize,
                makespan: avg(|s| s.makespan),
                mean_queue_time: avg(|s| s.mean_queue_time),
                max_queue_time: avg(|s| s.max_queue_time),
                mean_execution_time: avg(|s| s.mean_execution_time),
                mean_turnaround: avg(|s| s.mean_turnaround),
                mean_response_time: avg(|s| s.mean_response_time),
                migrations: (rows.iter().map(|s| s.migrations).sum::<usize>() as f64 / n).round() as usize,
                throughput: avg(|s| s.throughput),
            };
            w.write_record(summary_record(&mean, "mean"))?;
        }
    }
    to_string(w)
}

pub fn migrations_csv(m: &Metrics) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MIGRATION_COLUMNS)?;
    for r in &m.migrations {
        w.write_record([
            sig6(r.time),
            r.job.0.to_string(),
            r.from.to_string(),
            r.to.to_string(),
            r.local_jobs_ahead.to_string(),
            r.target_jobs_ahead.to_string(),
            sig6(r.local_cost),
            sig6(r.target_cost),
        ])?;
    }
    to_string(w)
}

fn write(dir: &Path, name: &str, text: String) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| ReportError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_owned(),
        source,
    })
}

/// Writes `jobs.csv`, `sites.csv`, `site_stats.csv`, `migrations.csv` and `summary.csv`.
pub fn write_run(dir: &Path, m: &Metrics) -> Result<Vec<PathBuf>, ReportError> {
    ensure_dir(dir)?;
    Ok(vec![
        write(dir, "jobs.csv", jobs_csv(m)?)?,
        write(dir, "sites.csv", samples_csv(m)?)?,
        write(dir, "site_stats.csv", site_stats_csv(m)?)?,
        write(dir, "migrations.csv", migrations_csv(m)?)?,
        write(dir, "summary.csv", summary_csv(&[m.summary()])?)?,
    ])
}

/// Writes `compare.csv` with one row per run plus per-policy means.
pub fn write_compare(dir: &Path, runs: &[Summary]) -> Result<PathBuf, ReportError> {
    ensure_dir(dir)?;
    write(dir, "compare.csv", summary_csv(runs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(0.458_612_3), "0.458612");
        assert_eq!(sig6(-0.630_466), "-0.630466");
        assert_eq!(sig6(10.0), "10.0000");
        assert_eq!(sig6(16.666_666_7), "16.6667");
        assert_eq!(sig6(123_456.7), "123457");
        assert_eq!(sig6(9.999_999_9), "10.0000");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(2.0e20), "2.00000e20");
    }

    #[test]
    fn summary_means_per_policy() {
        use crate::sim_engine::Policy;
        let base = Summary {
            policy: Policy::Diana,
            seed: 1,
            jobs: 10,
            makespan: 2.0,
            mean_queue_time: 1.0,
            max_queue_time: 3.0,
            mean_execution_time: 1.0,
            mean_turnaround: 2.0,
            mean_response_time: 1.0,
            migrations: 2,
            throughput: 5.0,
        };
        let other = Summary {
            seed: 2,
            mean_queue_time: 3.0,
            ..base.clone()
        };
        let text = summary_csv(&[base, other]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "diana,mean,10,2.00000,2.00000,3.00000,1.00000,2.00000,1.00000,2,5.00000");
    }
}
