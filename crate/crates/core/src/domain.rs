//! Core data types shared by every scheduler component.
//!
//! Units are fixed across the crate: data volumes in megabytes, bandwidth in
//! megabytes per second, simulated time in hours and packet loss as a
//! fraction in `[0, 1)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("job {0}: processors_required must be at least 1")]
    ZeroProcessors(JobId),
    #[error("job {job}: {field} must be finite and non-negative, got {value}")]
    InvalidJobField {
        job: JobId,
        field: &'static str,
        value: f64,
    },
    #[error("site {site}: {reason}")]
    InvalidSite { site: SiteId, reason: String },
    #[error("link {source_site} -> {destination}: {reason}")]
    InvalidEdge {
        source_site: SiteId,
        destination: SiteId,
        reason: String,
    },
    #[error("cost weights must be finite and non-negative")]
    InvalidWeights,
    #[error("congestion threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid priority context: {0}")]
    InvalidPriorityContext(String),
    #[error("job {job}: illegal state transition {from:?} -> {to:?}")]
    IllegalTransition {
        job: JobId,
        from: JobState,
        to: JobState,
    },
    #[error("job {0} has already been migrated once")]
    AlreadyMigrated(JobId),
    #[error("group {group}: {reason}")]
    InvalidGroup { group: GroupId, reason: String },
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifier of a grid site.
    SiteId
);
string_id!(
    /// Identifier of a submitting user.
    UserId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u64);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Submitted,
    Queued,
    Running,
    Completed,
    /// In transit to another site after a migration decision.
    Migrated,
}

/// Whether a job is dominated by computation, by data movement, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobClass {
    #[serde(alias = "compute")]
    ComputeIntensive,
    #[serde(alias = "data")]
    DataIntensive,
    Both,
}

/// A unit of work submitted by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub owner: UserId,
    pub group: Option<GroupId>,
    pub processors_required: u32,
    pub input_size: f64,
    pub output_size: f64,
    pub executable_size: f64,
    /// Dataset read as input; `None` means the input lives at the origin site.
    pub dataset: Option<String>,
    pub class_override: Option<JobClass>,
    pub service_time: f64,
    pub priority: f64,
    pub enqueue_timestamp: f64,
    /// FCFS tie-breaker among equal timestamps, assigned by the queue set.
    pub enqueue_seq: u64,
    pub migrated: bool,
    pub origin_site: SiteId,
    pub current_site: SiteId,
    pub state: JobState,
}

impl Job {
    pub fn new(
        id: JobId,
        owner: UserId,
        origin: SiteId,
        processors_required: u32,
        service_time: f64,
    ) -> Result<Self, DomainError> {
        if processors_required == 0 {
            return Err(DomainError::ZeroProcessors(id));
        }
        check_non_negative(id, "service_time", service_time)?;
        Ok(Self {
            id,
            owner,
            group: None,
            processors_required,
            input_size: 0.0,
            output_size: 0.0,
            executable_size: 0.0,
            dataset: None,
            class_override: None,
            service_time,
            priority: 0.0,
            enqueue_timestamp: 0.0,
            enqueue_seq: 0,
            migrated: false,
            current_site: origin.clone(),
            origin_site: origin,
            state: JobState::Submitted,
        })
    }

    /// Sets input, output and executable sizes (MB).
    pub fn with_data(mut self, input: f64, output: f64, executable: f64) -> Result<Self, DomainError> {
        check_non_negative(self.id, "input_size", input)?;
        check_non_negative(self.id, "output_size", output)?;
        check_non_negative(self.id, "executable_size", executable)?;
        self.input_size = input;
        self.output_size = output;
        self.executable_size = executable;
        Ok(self)
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = Some(dataset.into());
        self
    }

    pub fn with_group(mut self, group: GroupId) -> Self {
        self.group = Some(group);
        self
    }

    pub fn with_class(mut self, class: JobClass) -> Self {
        self.class_override = Some(class);
        self
    }

    pub fn total_data(&self) -> f64 {
        self.input_size + self.output_size + self.executable_size
    }

    fn transition(&mut self, to: JobState) -> Result<(), DomainError> {
        use JobState::*;
        let ok = matches!(
            (self.state, to),
            (Submitted, Queued)
                | (Queued, Queued)
                | (Queued, Running)
                | (Queued, Migrated)
                | (Migrated, Queued)
                | (Running, Completed)
        );
        if !ok {
            return Err(DomainError::IllegalTransition {
                job: self.id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn mark_queued(&mut self) -> Result<(), DomainError> {
        self.transition(JobState::Queued)
    }

    pub fn mark_running(&mut self) -> Result<(), DomainError> {
        self.transition(JobState::Running)
    }

    pub fn mark_completed(&mut self) -> Result<(), DomainError> {
        self.transition(JobState::Completed)
    }

    /// Flags the job as migrated. The flag is set once and never cleared.
    pub fn mark_migrated(&mut self) -> Result<(), DomainError> {
        if self.migrated {
            return Err(DomainError::AlreadyMigrated(self.id));
        }
        self.transition(JobState::Migrated)?;
        self.migrated = true;
        Ok(())
    }
}

fn check_non_negative(job: JobId, field: &'static str, value: f64) -> Result<(), DomainError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(DomainError::InvalidJobField { job, field, value })
    }
}

/// A bulk submission scheduled as one unit and optionally split into subgroups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobGroup {
    pub id: GroupId,
    pub owner: UserId,
    pub jobs: Vec<Job>,
    pub declared_size: usize,
    pub division_factor: u32,
    /// Index of this piece within its parent group; `None` for an undivided group.
    pub subgroup: Option<usize>,
}

impl JobGroup {
    pub fn new(id: GroupId, owner: UserId, jobs: Vec<Job>, division_factor: u32) -> Result<Self, DomainError> {
        if division_factor == 0 {
            return Err(DomainError::InvalidGroup {
                group: id,
                reason: "division_factor must be positive".into(),
            });
        }
        if let Some(j) = jobs.iter().find(|j| j.owner != owner) {
            return Err(DomainError::InvalidGroup {
                group: id,
                reason: format!("job {} belongs to {} not {}", j.id, j.owner, owner),
            });
        }
        let jobs = jobs.into_iter().map(|j| j.with_group(id)).collect::<Vec<_>>();
        Ok(Self {
            id,
            owner,
            declared_size: jobs.len(),
            jobs,
            division_factor,
            subgroup: None,
        })
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }
}

/// Snapshot of a site as seen by the meta-scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteState {
    pub id: SiteId,
    pub cpu_count: u32,
    /// Jobs per hour one execution slot completes.
    pub compute_capability: f64,
    pub waiting_queue_length: usize,
    pub site_load: f64,
    pub alive: bool,
    pub hosted_datasets: BTreeSet<String>,
    /// Per-user job execution limit; `None` is unlimited.
    pub max_jobs_per_user: Option<u32>,
}

impl SiteState {
    pub fn new(id: SiteId, cpu_count: u32, compute_capability: f64) -> Result<Self, DomainError> {
        if cpu_count == 0 {
            return Err(DomainError::InvalidSite {
                site: id,
                reason: "cpu_count must be positive".into(),
            });
        }
        if !(compute_capability.is_finite() && compute_capability >= 0.0) {
            return Err(DomainError::InvalidSite {
                site: id,
                reason: format!("compute_capability must be finite and non-negative, got {compute_capability}"),
            });
        }
        Ok(Self {
            id,
            cpu_count,
            compute_capability,
            waiting_queue_length: 0,
            site_load: 0.0,
            alive: true,
            hosted_datasets: BTreeSet::new(),
            max_jobs_per_user: None,
        })
    }

    pub fn with_load(mut self, load: f64) -> Result<Self, DomainError> {
        self.set_load(load)?;
        Ok(self)
    }

    pub fn set_load(&mut self, load: f64) -> Result<(), DomainError> {
        if !(0.0..=1.0).contains(&load) {
            return Err(DomainError::InvalidSite {
                site: self.id.clone(),
                reason: format!("site_load must lie in [0, 1], got {load}"),
            });
        }
        self.site_load = load;
        Ok(())
    }

    /// Aggregate computing capability of the whole site in jobs per hour.
    pub fn capability(&self) -> f64 {
        self.compute_capability * f64::from(self.cpu_count)
    }

    pub fn hosts(&self, dataset: &str) -> bool {
        self.hosted_datasets.contains(dataset)
    }
}

/// A directed network link between two sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEdge {
    pub source: SiteId,
    pub destination: SiteId,
    pub bandwidth: f64,
    pub loss_rate: f64,
}

impl NetworkEdge {
    pub fn new(source: SiteId, destination: SiteId, bandwidth: f64, loss_rate: f64) -> Result<Self, DomainError> {
        let err = |reason: String| DomainError::InvalidEdge {
            source_site: source.clone(),
            destination: destination.clone(),
            reason,
        };
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(err(format!("bandwidth must be positive and finite, got {bandwidth}")));
        }
        if !(0.0..1.0).contains(&loss_rate) {
            return Err(err(format!("loss_rate must lie in [0, 1), got {loss_rate}")));
        }
        Ok(Self {
            source,
            destination,
            bandwidth,
            loss_rate,
        })
    }

    /// The zero-cost link from a site to itself.
    pub fn local(site: &SiteId) -> Self {
        Self {
            source: site.clone(),
            destination: site.clone(),
            bandwidth: f64::INFINITY,
            loss_rate: 0.0,
        }
    }
}

/// Complete directed link matrix between sites.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkMatrix {
    links: BTreeMap<(SiteId, SiteId), NetworkEdge>,
}

impl NetworkMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, edge: NetworkEdge) {
        self.links
            .insert((edge.source.clone(), edge.destination.clone()), edge);
    }

    /// Link from `from` to `to`; a site's link to itself is always local.
    pub fn link(&self, from: &SiteId, to: &SiteId) -> Option<NetworkEdge> {
        if from == to {
            return Some(NetworkEdge::local(from));
        }
        self.links.get(&(from.clone(), to.clone())).cloned()
    }

    pub fn edges(&self) -> impl Iterator<Item = &NetworkEdge> {
        self.links.values()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Ordered pairs among `sites` with no link.
    pub fn missing_pairs<'a>(&self, sites: impl IntoIterator<Item = &'a SiteId> + Clone) -> Vec<(SiteId, SiteId)> {
        let mut missing = Vec::new();
        for a in sites.clone() {
            for b in sites.clone() {
                if a != b && !self.links.contains_key(&(a.clone(), b.clone())) {
                    missing.push((a.clone(), b.clone()));
                }
            }
        }
        missing
    }

    /// Mean bandwidth and loss over all links, used to classify jobs.
    pub fn reference_edge(&self) -> NetworkEdge {
        let anon = SiteId::new("*");
        if self.links.is_empty() {
            return NetworkEdge {
                source: anon.clone(),
                destination: anon,
                bandwidth: 1000.0,
                loss_rate: 0.0,
            };
        }
        let n = self.links.len() as f64;
        let bw = self.links.values().map(|e| e.bandwidth).sum::<f64>() / n;
        let loss = self.links.values().map(|e| e.loss_rate).sum::<f64>() / n;
        NetworkEdge {
            source: anon.clone(),
            destination: anon,
            bandwidth: bw,
            loss_rate: loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub w5: f64,
    pub w6: f64,
    pub w7: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w5: 1.0,
            w6: 1.0,
            w7: 1.0,
        }
    }
}

impl CostWeights {
    pub fn new(w5: f64, w6: f64, w7: f64) -> Result<Self, DomainError> {
        let w = Self { w5, w6, w7 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if [self.w5, self.w6, self.w7]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(DomainError::InvalidWeights)
        }
    }
}

/// Network, computation and data-transfer cost of placing a job on a site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub network_cost: f64,
    pub computation_cost: f64,
    pub data_transfer_cost: f64,
    pub total_cost: f64,
}

impl CostBreakdown {
    pub fn new(network_cost: f64, computation_cost: f64, data_transfer_cost: f64) -> Self {
        Self {
            network_cost,
            computation_cost,
            data_transfer_cost,
            total_cost: network_cost + computation_cost + data_transfer_cost,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// Inputs to the per-job priority threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityContext {
    /// The owner's jobs in all queues, including the new one.
    pub n: u32,
    /// Processors required by the job being prioritized.
    pub t: u32,
    /// Processors required by all queued jobs.
    pub total_processors: u64,
    pub quota: f64,
    /// Quotas of every distinct user with queued jobs, each counted once.
    pub quota_sum: f64,
    /// Jobs in all queues, including the new one.
    pub total_jobs: u32,
}

impl PriorityContext {
    pub fn new(
        n: u32,
        t: u32,
        total_processors: u64,
        quota: f64,
        quota_sum: f64,
        total_jobs: u32,
    ) -> Result<Self, DomainError> {
        let ctx = Self {
            n,
            t,
            total_processors,
            quota,
            quota_sum,
            total_jobs,
        };
        let bad = |m: &str| Err(DomainError::InvalidPriorityContext(m.into()));
        if n < 1 {
            return bad("n must be at least 1");
        }
        if t < 1 {
            return bad("t must be at least 1");
        }
        if total_jobs < n {
            return bad("L must be at least n");
        }
        if total_processors < u64::from(t) {
            return bad("T must be at least t");
        }
        if !(quota.is_finite() && quota > 0.0) {
            return bad("quota must be positive");
        }
        if !(quota_sum.is_finite() && quota_sum >= quota) {
            return bad("quota sum must be at least the user's quota");
        }
        Ok(ctx)
    }

    /// The dynamic threshold `(q * T) / (Q * t)`.
    pub fn threshold(&self) -> f64 {
        (self.quota * self.total_processors as f64) / (self.quota_sum * f64::from(self.t))
    }
}

/// Observed quantities for checking `N = R * W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LittleCheck {
    pub avg_queue_length: f64,
    pub arrival_rate: f64,
    pub avg_wait: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionConfig {
    pub thrs: f64,
}

impl CongestionConfig {
    pub fn new(thrs: f64) -> Result<Self, DomainError> {
        if (0.0..=1.0).contains(&thrs) {
            Ok(Self { thrs })
        } else {
            Err(DomainError::InvalidThreshold(thrs))
        }
    }
}

impl Default for CongestionConfig {
    fn default() -> Self {
        Self { thrs: 0.5 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job() -> Job {
        Job::new(JobId(1), "u".into(), "s".into(), 1, 1.0).unwrap()
    }

    #[test]
    fn job_rejects_zero_processors() {
        assert!(matches!(
            Job::new(JobId(1), "u".into(), "s".into(), 0, 1.0),
            Err(DomainError::ZeroProcessors(_))
        ));
    }

    #[test]
    fn running_job_never_requeues() {
        let mut j = job();
        j.mark_queued().unwrap();
        j.mark_running().unwrap();
        assert!(j.mark_queued().is_err());
        assert!(j.mark_migrated().is_err());
        j.mark_completed().unwrap();
    }

    #[test]
    fn migrated_flag_is_set_once() {
        let mut j = job();
        j.mark_queued().unwrap();
        j.mark_migrated().unwrap();
        assert!(j.migrated);
        j.mark_queued().unwrap();
        assert!(matches!(j.mark_migrated(), Err(DomainError::AlreadyMigrated(_))));
        assert!(j.migrated);
    }

    #[test]
    fn edge_invariants() {
        assert!(NetworkEdge::new("a".into(), "b".into(), 0.0, 0.0).is_err());
        assert!(NetworkEdge::new("a".into(), "b".into(), 10.0, 1.0).is_err());
        assert!(NetworkEdge::new("a".into(), "b".into(), 10.0, 0.99).is_ok());
    }

    #[test]
    fn group_requires_single_owner() {
        let a = job();
        let mut b = job();
        b.owner = "other".into();
        assert!(JobGroup::new(GroupId(1), "u".into(), vec![a.clone(), b], 1).is_err());
        let g = JobGroup::new(GroupId(1), "u".into(), vec![a], 1).unwrap();
        assert_eq!(g.declared_size, g.jobs.len());
        assert_eq!(g.jobs[0].group, Some(GroupId(1)));
    }

    #[test]
    fn priority_context_threshold() {
        let ctx = PriorityContext::new(2, 1, 7, 1900.0, 3600.0, 3).unwrap();
        assert!((ctx.threshold() - 1900.0 * 7.0 / 3600.0).abs() < 1e-12);
        assert!(PriorityContext::new(2, 1, 7, 1900.0, 1000.0, 3).is_err());
        assert!(PriorityContext::new(4, 1, 7, 1900.0, 3600.0, 3).is_err());
    }

    #[test]
    fn breakdown_total_is_sum() {
        let c = CostBreakdown::new(1e-4, 4.5, 10.0 / 3600.0);
        assert_eq!(c.total_cost, 1e-4 + 4.5 + 10.0 / 3600.0);
    }

    #[test]
    fn missing_pairs_reports_each_direction() {
        let mut m = NetworkMatrix::new();
        m.insert(NetworkEdge::new("a".into(), "b".into(), 1.0, 0.0).unwrap());
        let sites = [SiteId::new("a"), SiteId::new("b")];
        assert_eq!(m.missing_pairs(sites.iter()), vec![("b".into(), "a".into())]);
    }
}
