//! Multilevel feedback queues with reprioritization on every arrival.
//!
//! Each job's priority lies in `(-1, 1)` and decides which of four ranged
//! queues holds it:
//!
//! | queue | priority range  |
//! |-------|-----------------|
//! | Q1    | `[0.5, 1)`      |
//! | Q2    | `[0, 0.5)`      |
//! | Q3    | `[-0.5, 0)`     |
//! | Q4    | `[-1, -0.5)`    |
//!
//! Whenever a job arrives, every queued job is re-scored from the current
//! queue population and re-bucketed. Removing a job for service or migration
//! leaves the other priorities untouched.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CongestionConfig, DomainError, Job, JobId, JobState, PriorityContext, UserId};

/// Largest representable priority strictly below 1.
pub const MAX_PRIORITY: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error("priority {0} lies outside [-1, 1)")]
    OutOfRange(f64),
    #[error("user {0} has no quota")]
    UnknownUser(UserId),
    #[error("job {0} is not in a submittable state ({1:?})")]
    NotSubmittable(JobId, JobState),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueueId {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl QueueId {
    pub const ALL: [QueueId; 4] = [QueueId::Q1, QueueId::Q2, QueueId::Q3, QueueId::Q4];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Half-open `[low, high)` priority range.
    pub fn range(self) -> (f64, f64) {
        match self {
            QueueId::Q1 => (0.5, 1.0),
            QueueId::Q2 => (0.0, 0.5),
            QueueId::Q3 => (-0.5, 0.0),
            QueueId::Q4 => (-1.0, -0.5),
        }
    }

    pub fn contains(self, priority: f64) -> bool {
        let (lo, hi) = self.range();
        lo <= priority && priority < hi
    }
}

impl fmt::Display for QueueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.index() + 1)
    }
}

pub fn threshold_n(ctx: &PriorityContext) -> f64 {
    ctx.threshold()
}

/// `(N - n) / N` when `n <= N`, otherwise `(N - n) / n`.
pub fn priority(n: u32, threshold: f64) -> f64 {
    let n = f64::from(n);
    if n <= threshold {
        (threshold - n) / threshold
    } else {
        (threshold - n) / n
    }
}

pub fn queue_for(priority: f64) -> Result<QueueId, QueueError> {
    QueueId::ALL
        .into_iter()
        .find(|q| q.contains(priority))
        .ok_or(QueueError::OutOfRange(priority))
}

/// Adds `boost`, staying strictly below 1.
pub fn boosted_priority(priority: f64, boost: f64) -> f64 {
    (priority + boost).min(MAX_PRIORITY)
}

/// Static per-user quotas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Quotas(BTreeMap<UserId, f64>);

impl Quotas {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, user: UserId, quota: f64) {
        self.0.insert(user, quota);
    }

    pub fn get(&self, user: &UserId) -> Option<f64> {
        self.0.get(user).copied()
    }
}

impl FromIterator<(UserId, f64)> for Quotas {
    fn from_iter<I: IntoIterator<Item = (UserId, f64)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discipline {
    /// Four ranged queues, reprioritized on every arrival.
    Feedback,
    /// One first-come-first-served queue; every job has priority 0.
    Fcfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub discipline: Discipline,
    /// Priority gained per hour waited; 0 disables aging.
    pub aging: f64,
    /// Added to a migrated job's priority at its destination.
    pub migration_boost: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            discipline: Discipline::Feedback,
            aging: 0.0,
            migration_boost: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackQueueSet {
    queues: [VecDeque<Job>; 4],
    config: QueueConfig,
    next_seq: u64,
}

impl Default for FeedbackQueueSet {
    fn default() -> Self {
        Self::new(QueueConfig::default())
    }
}

impl FeedbackQueueSet {
    pub fn new(config: QueueConfig) -> Self {
        Self {
            queues: Default::default(),
            config,
            next_seq: 0,
        }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn queue(&self, id: QueueId) -> &VecDeque<Job> {
        &self.queues[id.index()]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// All queued jobs in service order.
    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.queues.iter().flatten()
    }

    pub fn get(&self, id: JobId) -> Option<(QueueId, &Job)> {
        QueueId::ALL
            .into_iter()
            .find_map(|q| self.queues[q.index()].iter().find(|j| j.id == id).map(|j| (q, j)))
    }

    pub fn total_processors(&self) -> u64 {
        self.jobs().map(|j| u64::from(j.processors_required)).sum()
    }

    fn admit(&mut self, mut job: Job, quotas: &Quotas, now: f64) -> Result<Job, QueueError> {
        if !matches!(job.state, JobState::Submitted | JobState::Migrated) {
            return Err(QueueError::NotSubmittable(job.id, job.state));
        }
        if quotas.get(&job.owner).is_none() {
            return Err(QueueError::UnknownUser(job.owner.clone()));
        }
        job.mark_queued()?;
        job.enqueue_timestamp = now;
        job.enqueue_seq = self.next_seq;
        self.next_seq += 1;
        Ok(job)
    }

    /// Queues `job` and reprioritizes every queued job.
    pub fn submit(&mut self, job: Job, quotas: &Quotas, now: f64) -> Result<(), QueueError> {
        let job = self.admit(job, quotas, now)?;
        self.queues[QueueId::Q2.index()].push_back(job);
        self.reprioritize(quotas, now)
    }

    /// Queues a burst shortest-job-first (fewest processors first, stable).
    ///
    /// Produces the same state as submitting the sorted burst one job at a
    /// time; the reprioritization sweep runs once at the end because its
    /// result depends only on the final queue population.
    pub fn submit_batch(&mut self, mut jobs: Vec<Job>, quotas: &Quotas, now: f64) -> Result<(), QueueError> {
        jobs.sort_by_key(|j| j.processors_required);
        for job in jobs {
            let job = self.admit(job, quotas, now)?;
            self.queues[QueueId::Q2.index()].push_back(job);
        }
        self.reprioritize(quotas, now)
    }

    /// Recomputes every priority from the current population and re-buckets.
    pub fn reprioritize(&mut self, quotas: &Quotas, now: f64) -> Result<(), QueueError> {
        let mut all: Vec<Job> = self.queues.iter_mut().flat_map(|q| q.drain(..)).collect();
        match self.config.discipline {
            Discipline::Fcfs => {
                for job in &mut all {
                    job.priority = 0.0;
                }
                all.sort_by_key(|j| j.enqueue_seq);
                self.queues[QueueId::Q2.index()].extend(all);
                Ok(())
            }
            Discipline::Feedback => {
                self.score(&mut all, quotas, now)?;
                let mut buckets: [Vec<Job>; 4] = Default::default();
                for job in all {
                    buckets[queue_for(job.priority)?.index()].push(job);
                }
                for (queue, mut bucket) in self.queues.iter_mut().zip(buckets) {
                    bucket.sort_by(|a, b| {
                        b.priority
                            .total_cmp(&a.priority)
                            .then(a.enqueue_timestamp.total_cmp(&b.enqueue_timestamp))
                            .then(a.enqueue_seq.cmp(&b.enqueue_seq))
                    });
                    queue.extend(bucket);
                }
                Ok(())
            }
        }
    }

    fn score(&self, jobs: &mut [Job], quotas: &Quotas, now: f64) -> Result<(), QueueError> {
        let mut per_user: HashMap<&UserId, u32> = HashMap::new();
        let mut total_processors = 0u64;
        for job in jobs.iter() {
            *per_user.entry(&job.owner).or_default() += 1;
            total_processors += u64::from(job.processors_required);
        }
        let mut quota_sum = 0.0;
        let mut user_quota = HashMap::with_capacity(per_user.len());
        // BTreeMap order keeps the floating-point sum deterministic.
        let sorted: BTreeMap<&UserId, u32> = per_user.iter().map(|(u, n)| (*u, *n)).collect();
        for user in sorted.keys() {
            let q = quotas.get(user).ok_or_else(|| QueueError::UnknownUser((*user).clone()))?;
            quota_sum += q;
            user_quota.insert((*user).clone(), q);
        }
        let counts: HashMap<UserId, u32> = sorted.into_iter().map(|(u, n)| (u.clone(), n)).collect();
        let total_jobs = jobs.len() as u32;
        for job in jobs.iter_mut() {
            let ctx = PriorityContext::new(
                counts[&job.owner],
                job.processors_required,
                total_processors,
                user_quota[&job.owner],
                quota_sum,
                total_jobs,
            )?;
            let mut p = priority(ctx.n, threshold_n(&ctx));
            if job.migrated {
                p = boosted_priority(p, self.config.migration_boost);
            }
            if self.config.aging > 0.0 {
                p = boosted_priority(p, self.config.aging * (now - job.enqueue_timestamp).max(0.0));
            }
            job.priority = p;
        }
        Ok(())
    }

    pub fn peek_next(&self) -> Option<&Job> {
        self.queues.iter().find_map(VecDeque::front)
    }

    /// Removes the head of the highest non-empty queue. No reprioritization.
    pub fn dequeue_next(&mut self) -> Option<Job> {
        self.queues.iter_mut().find_map(VecDeque::pop_front)
    }

    /// Removes a specific job, e.g. for migration. No reprioritization.
    pub fn remove(&mut self, id: JobId) -> Option<Job> {
        for queue in &mut self.queues {
            if let Some(pos) = queue.iter().position(|j| j.id == id) {
                return queue.remove(pos);
            }
        }
        None
    }

    /// Migration candidates under congestion: Q4 from its tail, then Q3 from its tail.
    pub fn congestion_victims(&self) -> Vec<&Job> {
        self.queues[QueueId::Q4.index()]
            .iter()
            .rev()
            .chain(self.queues[QueueId::Q3.index()].iter().rev())
            .collect()
    }

    /// Queued jobs whose priority is strictly greater than `priority`.
    pub fn count_ahead(&self, priority: f64) -> usize {
        self.jobs().filter(|j| j.priority > priority).count()
    }

    /// True when every job sits in the queue whose range holds its priority
    /// and each queue is ordered by descending priority, then FCFS.
    pub fn is_consistent(&self) -> bool {
        QueueId::ALL.into_iter().all(|q| {
            let jobs = &self.queues[q.index()];
            let in_range = match self.config.discipline {
                Discipline::Feedback => jobs.iter().all(|j| q.contains(j.priority)),
                Discipline::Fcfs => q == QueueId::Q2 || jobs.is_empty(),
            };
            in_range
                && jobs.iter().zip(jobs.iter().skip(1)).all(|(a, b)| {
                    a.priority > b.priority
                        || (a.priority == b.priority
                            && (a.enqueue_timestamp, a.enqueue_seq) <= (b.enqueue_timestamp, b.enqueue_seq))
                })
        })
    }
}

/// Sliding record of recent queue arrivals and service starts.
#[derive(Debug, Clone, PartialEq)]
pub struct RateWindow {
    window_length: usize,
    arrivals: VecDeque<f64>,
    services: VecDeque<f64>,
}

impl Default for RateWindow {
    fn default() -> Self {
        Self::new(100)
    }
}

impl RateWindow {
    pub fn new(window_length: usize) -> Self {
        Self {
            window_length: window_length.max(1),
            arrivals: VecDeque::new(),
            services: VecDeque::new(),
        }
    }

    fn push(buf: &mut VecDeque<f64>, cap: usize, t: f64) {
        if buf.len() == cap {
            buf.pop_front();
        }
        buf.push_back(t);
    }

    pub fn record_arrival(&mut self, t: f64) {
        Self::push(&mut self.arrivals, self.window_length, t);
    }

    pub fn record_service(&mut self, t: f64) {
        Self::push(&mut self.services, self.window_length, t);
    }

    pub fn len(&self) -> (usize, usize) {
        (self.arrivals.len(), self.services.len())
    }

    /// Events per hour over the span from the oldest retained event to `now`.
    /// Events all at `now` give an infinite rate; no events give zero.
    fn rate(buf: &VecDeque<f64>, now: f64) -> f64 {
        match buf.front() {
            None => 0.0,
            Some(&oldest) if now > oldest => buf.len() as f64 / (now - oldest),
            Some(_) => f64::INFINITY,
        }
    }

    pub fn arrival_rate(&self, now: f64) -> f64 {
        Self::rate(&self.arrivals, now)
    }

    pub fn service_rate(&self, now: f64) -> f64 {
        Self::rate(&self.services, now)
    }
}

/// `(arrival - service) / arrival > thrs`, false when nothing arrives.
pub fn is_congested(arrival_rate: f64, service_rate: f64, thrs: f64) -> bool {
    if arrival_rate.is_nan() || arrival_rate <= 0.0 {
        return false;
    }
    let ratio = if arrival_rate.is_infinite() {
        if service_rate.is_infinite() {
            0.0
        } else {
            1.0
        }
    } else {
        (arrival_rate - service_rate) / arrival_rate
    };
    ratio > thrs
}

pub fn detect_congestion(window: &RateWindow, cfg: &CongestionConfig, now: f64) -> bool {
    is_congested(window.arrival_rate(now), window.service_rate(now), cfg.thrs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::JobId;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn job(id: u64, owner: &str, t: u32) -> Job {
        Job::new(JobId(id), owner.into(), "s".into(), t, 1.0).unwrap()
    }

    fn quotas() -> Quotas {
        [("A".into(), 1900.0), ("B".into(), 1700.0)].into_iter().collect()
    }

    fn where_is(qs: &FeedbackQueueSet, id: u64) -> (QueueId, f64) {
        let (q, j) = qs.get(JobId(id)).unwrap();
        (q, j.priority)
    }

    #[test]
    fn threshold_examples() {
        let row1 = PriorityContext::new(2, 1, 7, 1900.0, 3600.0, 3).unwrap();
        assert!(close(threshold_n(&row1), 3.694_444_444, 1e-9));
        let sym = PriorityContext::new(1, 3, 3, 500.0, 500.0, 1).unwrap();
        assert_eq!(threshold_n(&sym), 1.0);
        let row2 = PriorityContext::new(2, 5, 7, 1900.0, 3600.0, 3).unwrap();
        assert!(close(threshold_n(&row2), 0.738_888_889, 1e-9));
    }

    #[test]
    fn priority_examples() {
        assert!(close(priority(2, 1900.0 * 7.0 / 3600.0), 0.4586, 1e-3));
        assert!(close(priority(2, 1900.0 * 7.0 / (3600.0 * 5.0)), -0.6305, 1e-3));
        assert!(close(priority(1, 1700.0 * 7.0 / 3600.0), 0.6974, 1e-3));
        assert!(close(priority(2, 1.2), -0.4, 1e-12));
        assert!(close(priority(2, 6.0), 0.666_666, 1e-6));
        assert_eq!(priority(3, 3.0), 0.0);
    }

    #[test]
    fn queue_for_examples() {
        assert_eq!(queue_for(0.6974).unwrap(), QueueId::Q1);
        assert_eq!(queue_for(0.0).unwrap(), QueueId::Q2);
        assert_eq!(queue_for(-0.6305).unwrap(), QueueId::Q4);
        assert_eq!(queue_for(-1.0).unwrap(), QueueId::Q4);
        assert_eq!(queue_for(-0.5).unwrap(), QueueId::Q3);
        assert_eq!(queue_for(0.5).unwrap(), QueueId::Q1);
        assert!(matches!(queue_for(1.0), Err(QueueError::OutOfRange(_))));
        assert!(matches!(queue_for(-1.01), Err(QueueError::OutOfRange(_))));
        assert!(queue_for(f64::NAN).is_err());
    }

    #[test]
    fn worked_example_sequence() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        qs.submit(job(1, "A", 1), &q, 0.0).unwrap();
        assert_eq!(where_is(&qs, 1), (QueueId::Q2, 0.0));

        qs.submit(job(2, "A", 5), &q, 1.0).unwrap();
        let (q1, p1) = where_is(&qs, 1);
        let (q2, p2) = where_is(&qs, 2);
        assert_eq!((q1, q2), (QueueId::Q1, QueueId::Q3));
        assert!(close(p1, 0.666_666, 1e-3));
        assert!(close(p2, -0.4, 1e-3));

        qs.submit(job(3, "B", 1), &q, 2.0).unwrap();
        let (q1, p1) = where_is(&qs, 1);
        let (q2, p2) = where_is(&qs, 2);
        let (q3, p3) = where_is(&qs, 3);
        assert_eq!((q1, q2, q3), (QueueId::Q2, QueueId::Q4, QueueId::Q1));
        assert!(close(p1, 0.4586, 1e-3));
        assert!(close(p2, -0.6305, 1e-3));
        assert!(close(p3, 0.6974, 1e-3));
        assert!(qs.is_consistent());
    }

    #[test]
    fn unknown_user_is_rejected() {
        let mut qs = FeedbackQueueSet::default();
        assert!(matches!(
            qs.submit(job(1, "Z", 1), &quotas(), 0.0),
            Err(QueueError::UnknownUser(_))
        ));
        assert!(qs.is_empty());
    }

    #[test]
    fn running_job_cannot_be_submitted() {
        let mut j = job(1, "A", 1);
        j.mark_queued().unwrap();
        j.mark_running().unwrap();
        assert!(matches!(
            FeedbackQueueSet::default().submit(j, &quotas(), 0.0),
            Err(QueueError::NotSubmittable(..))
        ));
    }

    #[test]
    fn batch_is_shortest_job_first() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::new(QueueConfig {
            discipline: Discipline::Fcfs,
            ..QueueConfig::default()
        });
        qs.submit_batch(vec![job(1, "A", 5), job(2, "A", 1), job(3, "A", 3)], &q, 0.0)
            .unwrap();
        let order: Vec<u32> = qs.jobs().map(|j| j.processors_required).collect();
        assert_eq!(order, [1, 3, 5]);
    }

    #[test]
    fn batch_keeps_order_on_equal_demand() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        qs.submit_batch(vec![job(7, "A", 2), job(3, "A", 2), job(5, "A", 2)], &q, 0.0)
            .unwrap();
        let ids: Vec<u64> = qs.jobs().map(|j| j.id.0).collect();
        assert_eq!(ids, [7, 3, 5]);
    }

    #[test]
    fn single_job_batch_matches_submit() {
        let q = quotas();
        let mut a = FeedbackQueueSet::default();
        let mut b = FeedbackQueueSet::default();
        a.submit(job(1, "A", 2), &q, 0.5).unwrap();
        b.submit_batch(vec![job(1, "A", 2)], &q, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dequeue_order() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        assert!(qs.dequeue_next().is_none());
        qs.submit(job(1, "A", 1), &q, 0.0).unwrap();
        qs.submit(job(2, "A", 5), &q, 1.0).unwrap();
        // job 1 in Q1, job 2 in Q3
        assert_eq!(qs.dequeue_next().unwrap().id, JobId(1));
        assert_eq!(qs.dequeue_next().unwrap().id, JobId(2));
        assert!(qs.dequeue_next().is_none());
    }

    #[test]
    fn equal_priority_is_fcfs() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        // One user with equal demands: every job gets priority 0.
        qs.submit(job(9, "A", 1), &q, 5.0).unwrap();
        qs.submit(job(4, "A", 1), &q, 9.0).unwrap();
        let (q9, p9) = where_is(&qs, 9);
        let (q4, p4) = where_is(&qs, 4);
        assert_eq!((q9, q4), (QueueId::Q2, QueueId::Q2));
        assert_eq!(p9, p4);
        assert_eq!(qs.dequeue_next().unwrap().id, JobId(9));
    }

    #[test]
    fn dequeue_does_not_reprioritize() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        qs.submit(job(1, "A", 1), &q, 0.0).unwrap();
        qs.submit(job(2, "A", 5), &q, 0.0).unwrap();
        qs.submit(job(3, "B", 1), &q, 0.0).unwrap();
        let before = where_is(&qs, 2);
        qs.dequeue_next().unwrap();
        assert_eq!(where_is(&qs, 2), before);
    }

    #[test]
    fn victims_are_low_priority_tail_first() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        assert!(qs.congestion_victims().is_empty());
        qs.submit(job(1, "A", 1), &q, 0.0).unwrap();
        assert!(qs.congestion_victims().is_empty());
        qs.submit(job(2, "A", 5), &q, 0.0).unwrap();
        qs.submit(job(3, "B", 1), &q, 0.0).unwrap();
        let v: Vec<u64> = qs.congestion_victims().iter().map(|j| j.id.0).collect();
        assert_eq!(v, [2]);
    }

    #[test]
    fn migrated_job_gets_boost() {
        assert!(close(boosted_priority(0.4, 0.25), 0.65, 1e-12));
        assert_eq!(queue_for(boosted_priority(0.4, 0.25)).unwrap(), QueueId::Q1);
        assert!(boosted_priority(0.9, 0.25) < 1.0);
        let q = quotas();
        let mut qs = FeedbackQueueSet::default();
        let mut j = job(1, "A", 1);
        j.mark_queued().unwrap();
        j.mark_migrated().unwrap();
        qs.submit(j, &q, 0.0).unwrap();
        assert_eq!(where_is(&qs, 1), (QueueId::Q2, 0.25));
    }

    #[test]
    fn aging_raises_waiting_jobs() {
        let q = quotas();
        let mut qs = FeedbackQueueSet::new(QueueConfig {
            aging: 0.1,
            ..QueueConfig::default()
        });
        qs.submit(job(1, "A", 1), &q, 0.0).unwrap();
        qs.submit(job(2, "A", 1), &q, 2.0).unwrap();
        let (_, p1) = where_is(&qs, 1);
        let (_, p2) = where_is(&qs, 2);
        assert!(close(p1 - p2, 0.2, 1e-12));
        assert!(qs.is_consistent());
    }

    #[test]
    fn congestion_examples() {
        assert!(is_congested(10.0, 4.0, 0.5));
        assert!(!is_congested(10.0, 10.0, 0.1));
        assert!(!is_congested(10.0, 12.0, 0.0));
        assert!(!is_congested(10.0, 0.0, 1.0));
        assert!(!is_congested(0.0, 5.0, 0.0));
        assert!(is_congested(f64::INFINITY, 3.0, 0.5));
        assert!(!is_congested(f64::INFINITY, f64::INFINITY, 0.0));
    }

    #[test]
    fn rate_window_bounds_and_rates() {
        let mut w = RateWindow::new(3);
        for t in [0.0, 1.0, 2.0, 3.0, 4.0] {
            w.record_arrival(t);
        }
        assert_eq!(w.len(), (3, 0));
        assert!(close(w.arrival_rate(5.0), 1.0, 1e-12));
        assert_eq!(w.service_rate(5.0), 0.0);
        assert!(detect_congestion(&w, &CongestionConfig::new(0.5).unwrap(), 5.0));
    }

    proptest! {
        #[test]
        fn priority_open_interval_and_sign(n in 1u32..10_000, big_n in 1e-6f64..1e5) {
            let p = priority(n, big_n);
            prop_assert!(p > -1.0 && p < 1.0);
            prop_assert_eq!(p >= 0.0, f64::from(n) <= big_n);
        }

        #[test]
        fn frequency_penalty(others in proptest::collection::vec((0usize..3, 1u32..6), 0..12), t in 1u32..6, k in 2usize..8) {
            let q: Quotas = [("u0".into(), 100.0), ("u1".into(), 250.0), ("u2".into(), 75.0), ("me".into(), 120.0)]
                .into_iter().collect();
            let mut qs = FeedbackQueueSet::default();
            let mut id = 0;
            for (u, tt) in others {
                qs.submit(job(id, &format!("u{u}"), tt), &q, 0.0).unwrap();
                id += 1;
            }
            let mut last = f64::INFINITY;
            for _ in 0..k {
                qs.submit(job(id, "me", t), &q, 0.0).unwrap();
                let p = qs.get(JobId(id)).unwrap().1.priority;
                prop_assert!(p <= last + 1e-12);
                last = p;
                id += 1;
            }
        }

        #[test]
        fn drain_reaches_every_job(demands in proptest::collection::vec((0usize..2, 1u32..8), 1..40)) {
            let q = quotas();
            let mut qs = FeedbackQueueSet::default();
            for (i, (u, t)) in demands.iter().enumerate() {
                let owner = if *u == 0 { "A" } else { "B" };
                qs.submit(job(i as u64, owner, *t), &q, i as f64).unwrap();
                prop_assert!(qs.is_consistent());
            }
            let mut seen = 0;
            let mut prev_queue = QueueId::Q1;
            while let Some(j) = qs.dequeue_next() {
                let q = queue_for(j.priority).unwrap();
                prop_assert!(q >= prev_queue);
                prev_queue = q;
                seen += 1;
            }
            prop_assert_eq!(seen, demands.len());
        }

        #[test]
        fn batch_matches_sequential(demands in proptest::collection::vec((0usize..2, 1u32..8), 1..30)) {
            let q = quotas();
            let jobs: Vec<Job> = demands.iter().enumerate()
                .map(|(i, (u, t))| job(i as u64, if *u == 0 { "A" } else { "B" }, *t))
                .collect();
            let mut batched = FeedbackQueueSet::default();
            batched.submit_batch(jobs.clone(), &q, 3.0).unwrap();
            let mut sorted = jobs;
            sorted.sort_by_key(|j| j.processors_required);
            let mut seq = FeedbackQueueSet::default();
            for j in sorted {
                seq.submit(j, &q, 3.0).unwrap();
            }
            prop_assert_eq!(batched, seq);
        }
    }
}
