//! Moving waiting jobs to peer sites that would serve them sooner.
//!
//! A job is offered to peers when its site is congested (low-priority
//! victims) or when too many jobs are ahead of it locally. The best peer must
//! beat the local site on both queue pressure and placement cost. A job
//! migrates at most once; running jobs never move.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, Job, JobId, JobState, SiteId};
use crate::queue_manager::{FeedbackQueueSet, QueueError, Quotas};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MigrateError {
    #[error("job {0} has already migrated once")]
    AlreadyMigrated(JobId),
    #[error("job {0} is running and cannot be preempted")]
    JobRunning(JobId),
    #[error("job {0} is not queued here")]
    NotQueued(JobId),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// A site's answer to "how crowded are you for this job".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerQueueReport {
    pub site: SiteId,
    pub queue_length: usize,
    pub jobs_ahead: usize,
    pub total_cost: f64,
    pub alive: bool,
}

impl PeerQueueReport {
    /// Builds a report from a site's queues. Jobs still in transit towards
    /// the site count as queued and ahead.
    pub fn from_queues(
        site: SiteId,
        queues: &FeedbackQueueSet,
        in_transit: usize,
        candidate_priority: f64,
        total_cost: f64,
        alive: bool,
    ) -> Self {
        Self {
            site,
            queue_length: queues.len() + in_transit,
            jobs_ahead: jobs_ahead(queues, candidate_priority) + in_transit,
            total_cost,
            alive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    pub enabled: bool,
    /// Upper bound on jobs moved by one decision.
    pub max_per_decision: usize,
    /// Offer a job when at least this many jobs are ahead of it locally,
    /// `None` leaves congestion as the only trigger.
    pub wait_trigger: Option<usize>,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_per_decision: 10,
            wait_trigger: None,
        }
    }
}

/// Queued jobs with priority strictly above `candidate_priority`.
pub fn jobs_ahead(queues: &FeedbackQueueSet, candidate_priority: f64) -> usize {
    queues.count_ahead(candidate_priority)
}

/// The best alive peer if it strictly beats `local` on both jobs ahead and cost.
pub fn select_target(local: &PeerQueueReport, peers: &[PeerQueueReport]) -> Option<SiteId> {
    let best = peers
        .iter()
        .filter(|p| p.alive && p.site != local.site)
        .min_by(|a, b| {
            a.jobs_ahead
                .cmp(&b.jobs_ahead)
                .then(a.total_cost.total_cmp(&b.total_cost))
                .then_with(|| a.site.cmp(&b.site))
        })?;
    (best.jobs_ahead < local.jobs_ahead && best.total_cost < local.total_cost).then(|| best.site.clone())
}

/// Checks that `job` may leave its site.
pub fn check_migratable(job: &Job) -> Result<(), MigrateError> {
    if job.migrated {
        return Err(MigrateError::AlreadyMigrated(job.id));
    }
    match job.state {
        JobState::Queued => Ok(()),
        JobState::Running => Err(MigrateError::JobRunning(job.id)),
        _ => Err(MigrateError::NotQueued(job.id)),
    }
}

/// Takes a job out of the local queues and flags it as migrated.
pub fn migrate_out(queues: &mut FeedbackQueueSet, id: JobId, target: &SiteId) -> Result<Job, MigrateError> {
    let (_, job) = queues.get(id).ok_or(MigrateError::NotQueued(id))?;
    check_migratable(job)?;
    let mut job = queues.remove(id).expect("job found above");
    job.mark_migrated()?;
    job.current_site = target.clone();
    Ok(job)
}

/// Queues a migrated job at its destination. Its priority is recomputed from
/// the destination's population and raised by the configured boost.
pub fn deliver(job: Job, destination: &mut FeedbackQueueSet, quotas: &Quotas, now: f64) -> Result<(), MigrateError> {
    debug_assert!(job.migrated);
    destination.submit(job, quotas, now)?;
    Ok(())
}

/// Full local-to-remote move, for callers without transit delay.
pub fn migrate(
    id: JobId,
    source: &mut FeedbackQueueSet,
    destination: &mut FeedbackQueueSet,
    target: &SiteId,
    quotas: &Quotas,
    now: f64,
) -> Result<(), MigrateError> {
    let job = migrate_out(source, id, target)?;
    deliver(job, destination, quotas, now)
}
