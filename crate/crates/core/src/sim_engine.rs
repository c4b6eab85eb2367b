//! Deterministic discrete-event simulation of the whole grid.
//!
//! Time is continuous and measured in hours. Events are processed in
//! `(time, sequence)` order, so equal-time events run in the order they were
//! scheduled and every run of a `(scenario, policy, seed)` triple is
//! bit-identical.
//!
//! Site outages crash the site's meta-scheduler: queued jobs stay put and wait
//! for recovery, running jobs finish on the local batch system, and jobs whose
//! origin is down are held until it recovers. Peers keep routing work to a
//! crashed site until the failure detector notices, one heartbeat timeout
//! after the crash.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bulk_scheduler::{self, BulkError, GroupPlacement, SubgroupOutput};
use crate::cost_model::{computation_cost, transfer_hours};
use crate::domain::{
    DomainError, GroupId, Job, JobGroup, JobId, LittleCheck, NetworkEdge, NetworkMatrix, SiteId, SiteState, UserId,
};
use crate::migrator::{self, MigrateError, PeerQueueReport};
use crate::overlay::{JoinRequest, NodeId, Overlay, OverlayConfig, OverlayError, Role};
use crate::queue_manager::{detect_congestion, Discipline, FeedbackQueueSet, QueueConfig, QueueError, QueueId, Quotas, RateWindow};
use crate::scenario::{Scenario, ScenarioError, Workload};
use crate::site_selector::{candidate_costs, SelectError, SiteSelector};

/// Fraction by which arrivals and completions may differ in a steady window.
pub const STEADY_STATE_TOLERANCE: f64 = 0.05;

const OVERLAY_STEP_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("job {job} needs {processors} processors but no site has that many CPUs")]
    Unplaceable { job: JobId, processors: u32 },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Bulk(#[from] BulkError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Migrate(#[from] MigrateError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("invariant violated at t={time}: {message}")]
    Invariant { time: f64, message: String },
    #[error("window is not in steady state: {arrivals} arrivals vs {completions} completions")]
    NotSteadyState { arrivals: usize, completions: usize },
    #[error("window [{0}, {1}] is empty or contains no arrivals")]
    EmptyWindow(f64, f64),
    #[error("compare needs at least two policies, got {0}")]
    TooFewPolicies(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Cost-based selection, feedback queues, bulk placement and migration.
    Diana,
    /// Minimum computation cost on a snapshot frozen per arrival, FCFS, no migration.
    #[serde(rename = "greedy")]
    GreedyBestSite,
    /// DIANA placement with a single FCFS queue per site and no migration.
    #[serde(rename = "fcfs")]
    FcfsSingleQueue,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Diana, Policy::GreedyBestSite, Policy::FcfsSingleQueue];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Diana => "diana",
            Policy::GreedyBestSite => "greedy",
            Policy::FcfsSingleQueue => "fcfs",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "diana" => Ok(Policy::Diana),
            "greedy" | "greedybestsite" => Ok(Policy::GreedyBestSite),
            "fcfs" | "fcfssinglequeue" => Ok(Policy::FcfsSingleQueue),
            other => Err(format!("unknown policy `{other}` (expected diana, greedy or fcfs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Record every queued job's priority after each arrival.
    pub record_snapshots: bool,
    /// Check conservation, capacity and non-preemption after every event.
    pub check_invariants: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record_snapshots: false,
            check_invariants: true,
        }
    }
}

/// What happened to one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub owner: UserId,
    pub group: Option<GroupId>,
    pub origin: SiteId,
    pub site: SiteId,
    pub processors: u32,
    pub submit: f64,
    pub start: f64,
    pub end: f64,
    pub priority_at_submit: f64,
    pub queue_at_submit: QueueId,
    /// Last priority assigned before the job started.
    pub priority_at_start: f64,
    pub queue_at_start: QueueId,
    /// Time from submission to start, including meta-scheduler, transit and local queueing.
    pub queue_time: f64,
    /// Data staging plus service time.
    pub execution_time: f64,
    pub turnaround: f64,
    pub response_time: f64,
    pub migrated: bool,
}

/// A site's counters after an event that changed them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteSample {
    pub time: f64,
    pub site: usize,
    pub queued: usize,
    pub running: usize,
    pub imports: usize,
    pub exports: usize,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site: SiteId,
    pub cpus: u32,
    pub completed: usize,
    pub imports: usize,
    pub exports: usize,
    /// Busy CPU-hours over available CPU-hours up to the makespan.
    pub utilization: f64,
    /// Completed jobs per hour up to the makespan.
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub time: f64,
    pub job: JobId,
    pub from: SiteId,
    pub to: SiteId,
    pub local_jobs_ahead: usize,
    pub target_jobs_ahead: usize,
    pub local_cost: f64,
    pub target_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub group: GroupId,
    pub arrival: f64,
    pub size: usize,
    /// Absent when the policy places group jobs one by one.
    pub placement: Option<GroupPlacement>,
    pub completed_at: Option<f64>,
    /// Jobs listed in the aggregated output manifest.
    pub aggregated_jobs: usize,
}

impl GroupRecord {
    pub fn makespan(&self) -> Option<f64> {
        self.completed_at.map(|t| t - self.arrival)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub time: f64,
    pub site: SiteId,
    /// `(job, priority, queue)` in queue order.
    pub jobs: Vec<(JobId, f64, QueueId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub policy: Policy,
    pub seed: u64,
    /// Ordered by job id.
    pub jobs: Vec<JobRecord>,
    pub sites: Vec<SiteStats>,
    pub samples: Vec<SiteSample>,
    pub migrations: Vec<MigrationRecord>,
    pub groups: Vec<GroupRecord>,
    pub snapshots: Vec<QueueSnapshot>,
    /// `(time, jobs waiting in all queues)` whenever the count changes.
    pub waiting: Vec<(f64, usize)>,
    pub makespan: f64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: Policy,
    pub seed: u64,
    pub jobs: usize,
    pub makespan: f64,
    pub mean_queue_time: f64,
    pub max_queue_time: f64,
    pub mean_execution_time: f64,
    pub mean_turnaround: f64,
    pub mean_response_time: f64,
    pub migrations: usize,
    pub throughput: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Metrics {
    pub fn summary(&self) -> Summary {
        Summary {
            policy: self.policy,
            seed: self.seed,
            jobs: self.jobs.len(),
            makespan: self.makespan,
            mean_queue_time: mean(self.jobs.iter().map(|j| j.queue_time)),
            max_queue_time: self.jobs.iter().map(|j| j.queue_time).fold(0.0, f64::max),
            mean_execution_time: mean(self.jobs.iter().map(|j| j.execution_time)),
            mean_turnaround: mean(self.jobs.iter().map(|j| j.turnaround)),
            mean_response_time: mean(self.jobs.iter().map(|j| j.response_time)),
            migrations: self.migrations.len(),
            throughput: if self.makespan > 0.0 { self.jobs.len() as f64 / self.makespan } else { 0.0 },
        }
    }

    pub fn site_index(&self, id: &SiteId) -> Option<usize> {
        self.sites.iter().position(|s| &s.site == id)
    }

    /// Jobs completed at `site` with an end time in `[from, to)`.
    pub fn completions_between(&self, site: &SiteId, from: f64, to: f64) -> usize {
        self.jobs
            .iter()
            .filter(|j| &j.site == site && j.end >= from && j.end < to)
            .count()
    }
}

/// Observed queue length, arrival rate and wait over `[from, to)`.
///
/// The window is steady when arrivals and completions inside it differ by at
/// most [`STEADY_STATE_TOLERANCE`] of the arrivals.
pub fn little_inputs(metrics: &Metrics, from: f64, to: f64) -> Result<LittleCheck, SimError> {
    if from.is_nan() || to.is_nan() || to <= from {
        return Err(SimError::EmptyWindow(from, to));
    }
    let arrived: Vec<&JobRecord> = metrics.jobs.iter().filter(|j| j.submit >= from && j.submit < to).collect();
    if arrived.is_empty() {
        return Err(SimError::EmptyWindow(from, to));
    }
    let completions = metrics.jobs.iter().filter(|j| j.end >= from && j.end < to).count();
    let arrivals = arrived.len();
    if (arrivals as f64 - completions as f64).abs() > STEADY_STATE_TOLERANCE * arrivals as f64 {
        return Err(SimError::NotSteadyState { arrivals, completions });
    }
    // Time-average of the waiting step function over the window.
    let mut area = 0.0;
    let mut level = 0usize;
    let mut last = from;
    for &(t, n) in &metrics.waiting {
        if t >= to {
            break;
        }
        if t > from {
            area += level as f64 * (t - last);
            last = t;
        }
        level = n;
    }
    area += level as f64 * (to - last);
    Ok(LittleCheck {
        avg_queue_length: area / (to - from),
        arrival_rate: arrivals as f64 / (to - from),
        avg_wait: mean(arrived.iter().map(|j| j.queue_time)),
    })
}

/// `|N - R W| / max(N, eps)`.
pub fn little_residual(check: &LittleCheck) -> f64 {
    let n = check.avg_queue_length;
    (n - check.arrival_rate * check.avg_wait).abs() / n.max(f64::EPSILON)
}

/// Residual of Little's formula over `[from, to)`.
pub fn littles_check(metrics: &Metrics, from: f64, to: f64) -> Result<f64, SimError> {
    little_inputs(metrics, from, to).map(|c| little_residual(&c))
}

pub fn run(scenario: &Scenario, policy: Policy, seed: u64) -> Result<Metrics, SimError> {
    scenario.validate()?;
    let workload = scenario.generate(seed);
    run_workload(scenario, &workload, policy, seed, SimOptions::default())
}

/// Runs one policy over `workload` with explicit options.
pub fn run_workload(
    scenario: &Scenario,
    workload: &Workload,
    policy: Policy,
    seed: u64,
    options: SimOptions,
) -> Result<Metrics, SimError> {
    Sim::new(scenario, policy, seed, options)?.run(workload)
}

/// Replays one generated workload under each policy.
pub fn compare(scenario: &Scenario, policies: &[Policy], seed: u64) -> Result<Vec<Metrics>, SimError> {
    if policies.len() < 2 {
        return Err(SimError::TooFewPolicies(policies.len()));
    }
    scenario.validate()?;
    let workload = scenario.generate(seed);
    policies
        .iter()
        .map(|&p| run_workload(scenario, &workload, p, seed, SimOptions::default()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    JobArrival(usize),
    GroupArrival(usize),
    JobComplete { site: usize, job: JobId },
    MigrationDecision(usize),
    /// A migrated job reaches its new site.
    MessageDelivery { site: usize, job: JobId },
    NodeCrash(usize),
    NodeRecover(usize),
    FailureDetected { site: usize, crash: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Running {
    job: Job,
    start: f64,
    priority: f64,
    queue: QueueId,
}

#[derive(Default)]
struct SiteRuntime {
    busy: u32,
    running: BTreeMap<JobId, Running>,
    in_transit: usize,
    imports: usize,
    exports: usize,
    completed: usize,
    busy_cpu_hours: f64,
    /// Actually up.
    up: bool,
    /// Up as far as the rest of the grid knows.
    known_up: bool,
    crashes: u32,
    node: Option<NodeId>,
    last_sample: Option<(usize, usize, usize, usize, usize)>,
}

struct SubmitInfo {
    submit: f64,
    priority: f64,
    queue: QueueId,
}

struct GroupState {
    record_index: usize,
    remaining: usize,
    outputs: Vec<SubgroupOutput>,
    job_subgroup: BTreeMap<JobId, usize>,
    subgroup_remaining: BTreeMap<usize, usize>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    policy: Policy,
    options: SimOptions,
    selector: SiteSelector,
    network: NetworkMatrix,
    quotas: Quotas,
    base: Vec<SiteState>,
    queues: Vec<FeedbackQueueSet>,
    windows: Vec<RateWindow>,
    rt: Vec<SiteRuntime>,
    overlay: Overlay,
    node_site: BTreeMap<NodeId, usize>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: f64,
    submitted: usize,
    held: Vec<(f64, Job)>,
    transit: BTreeMap<JobId, Job>,
    submits: BTreeMap<JobId, SubmitInfo>,
    started: BTreeSet<JobId>,
    groups: BTreeMap<GroupId, GroupState>,
    metrics: Metrics,
    dirty: Vec<bool>,
    last_waiting: usize,
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, policy: Policy, seed: u64, options: SimOptions) -> Result<Self, SimError> {
        let config = &scenario.config;
        let network = scenario.network_matrix()?;
        let base = scenario.site_states();
        let discipline = match policy {
            Policy::Diana => Discipline::Feedback,
            Policy::GreedyBestSite | Policy::FcfsSingleQueue => Discipline::Fcfs,
        };
        let queue_config = QueueConfig {
            discipline,
            aging: config.aging,
            migration_boost: config.migration_boost,
        };
        let n = base.len();
        let rt = (0..n)
            .map(|_| SiteRuntime {
                up: true,
                known_up: true,
                ..SiteRuntime::default()
            })
            .collect();
        let sites = base
            .iter()
            .map(|s| SiteStats {
                site: s.id.clone(),
                cpus: s.cpu_count,
                completed: 0,
                imports: 0,
                exports: 0,
                utilization: 0.0,
                throughput: 0.0,
            })
            .collect();
        let mut sim = Self {
            scenario,
            policy,
            options,
            selector: config.selector(),
            network,
            quotas: scenario.quotas(),
            queues: (0..n).map(|_| FeedbackQueueSet::new(queue_config)).collect(),
            windows: (0..n).map(|_| RateWindow::new(config.rate_window)).collect(),
            base,
            rt,
            overlay: Overlay::new(OverlayConfig {
                subgrid_min: config.subgrid_min_cpus,
            }),
            node_site: BTreeMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            submitted: 0,
            held: Vec::new(),
            transit: BTreeMap::new(),
            submits: BTreeMap::new(),
            started: BTreeSet::new(),
            groups: BTreeMap::new(),
            metrics: Metrics {
                policy,
                seed,
                jobs: Vec::new(),
                sites,
                samples: Vec::new(),
                migrations: Vec::new(),
                groups: Vec::new(),
                snapshots: Vec::new(),
                waiting: vec![(0.0, 0)],
                makespan: 0.0,
                events: 0,
            },
            dirty: vec![false; n],
            last_waiting: 0,
        };
        for i in 0..n {
            sim.join_overlay(i)?;
        }
        Ok(sim)
    }

    fn join_overlay(&mut self, site: usize) -> Result<(), SimError> {
        let spec = &self.scenario.sites[site];
        let rt = &self.rt[site];
        let name = if rt.crashes == 0 {
            spec.id.to_string()
        } else {
            format!("{}#{}", spec.id, rt.crashes)
        };
        let mut request = JoinRequest::new(name, spec.availability, spec.cpus);
        for (j, other) in self.base.iter().enumerate() {
            if j == site {
                continue;
            }
            if let (Some(e), Some(node)) = (self.network.link(&spec.id, &other.id), self.rt[j].node) {
                let live_name = self.overlay.node(node).map(|n| n.name.to_string());
                if let Some(live_name) = live_name {
                    request = request.with_cost(live_name, crate::cost_model::network_cost(&e));
                }
            }
        }
        let id = self.overlay.join(request)?;
        self.overlay.run_to_quiescence(OVERLAY_STEP_LIMIT)?;
        self.node_site.insert(id, site);
        self.rt[site].node = Some(id);
        Ok(())
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Reverse(Event { time, seq: self.seq, kind }));
        self.seq += 1;
    }

    fn site_index(&self, id: &SiteId) -> usize {
        self.base.iter().position(|s| &s.id == id).expect("validated site reference")
    }

    fn run(mut self, workload: &Workload) -> Result<Metrics, SimError> {
        for (i, a) in workload.arrivals.iter().enumerate() {
            self.schedule(a.time, EventKind::JobArrival(i));
        }
        for (i, (t, _, _)) in workload.groups.iter().enumerate() {
            self.schedule(*t, EventKind::GroupArrival(i));
        }
        for o in &self.scenario.outages {
            let site = self.site_index(&o.site);
            self.schedule(o.start, EventKind::NodeCrash(site));
            self.schedule(o.end, EventKind::NodeRecover(site));
        }
        let max_cpus = self.base.iter().map(|s| s.cpu_count).max().unwrap_or(0);
        let all_jobs = workload
            .arrivals
            .iter()
            .flat_map(|a| a.jobs.iter())
            .chain(workload.groups.iter().flat_map(|g| g.2.jobs.iter()));
        for job in all_jobs {
            if job.processors_required > max_cpus {
                return Err(SimError::Unplaceable {
                    job: job.id,
                    processors: job.processors_required,
                });
            }
        }

        while let Some(Reverse(event)) = self.heap.pop() {
            self.now = event.time;
            self.metrics.events += 1;
            match event.kind {
                EventKind::JobArrival(i) => {
                    let a = &workload.arrivals[i];
                    self.submitted += a.jobs.len();
                    let jobs: Vec<(f64, Job)> = a.jobs.iter().map(|j| (a.time, j.clone())).collect();
                    let origin = self.site_index(&a.origin);
                    self.arrive(origin, jobs)?;
                }
                EventKind::GroupArrival(i) => {
                    let (t, origin, group) = &workload.groups[i];
                    self.submitted += group.len();
                    let origin = self.site_index(origin);
                    self.arrive_group(*t, origin, group.clone())?;
                }
                EventKind::JobComplete { site, job } => self.complete(site, job)?,
                EventKind::MigrationDecision(site) => self.migration_decision(site)?,
                EventKind::MessageDelivery { site, job } => self.deliver(site, job)?,
                EventKind::NodeCrash(site) => self.crash(site)?,
                EventKind::NodeRecover(site) => self.recover(site)?,
                EventKind::FailureDetected { site, crash } => self.detect(site, crash)?,
            }
            self.record_samples();
            if self.options.check_invariants {
                self.check_invariants()?;
            }
        }
        self.finish()
    }

    /// Site states as the scheduler sees them, for a job needing `processors`.
    fn snapshot(&self, processors: u32) -> Vec<SiteState> {
        self.base
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let rt = &self.rt[i];
                let mut s = b.clone();
                s.waiting_queue_length = self.queues[i].len() + rt.in_transit;
                s.site_load = (b.site_load + f64::from(rt.busy) / f64::from(b.cpu_count)).min(1.0);
                s.alive = rt.known_up && b.cpu_count >= processors;
                s
            })
            .collect()
    }

    fn arrive(&mut self, origin: usize, mut jobs: Vec<(f64, Job)>) -> Result<(), SimError> {
        if !self.rt[origin].up {
            self.held.extend(jobs);
            return Ok(());
        }
        if self.policy == Policy::Diana {
            // Shortest job first within a burst; baselines keep arrival order.
            jobs.sort_by_key(|(_, j)| j.processors_required);
        }
        let mut touched = BTreeSet::new();
        let frozen = (self.policy == Policy::GreedyBestSite).then(|| self.snapshot(0));
        for (submit, job) in jobs {
            let target = match &frozen {
                Some(snapshot) => self.greedy_site(snapshot, job.processors_required)?,
                None => {
                    let snapshot = self.snapshot(job.processors_required);
                    match self.selector.select_site(&job, &snapshot, &self.network) {
                        Ok(id) => Some(self.site_index(&id)),
                        Err(SelectError::NoAliveSite) => None,
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            match target {
                Some(site) => {
                    self.enqueue(site, submit, job)?;
                    touched.insert(site);
                }
                None => self.held.push((submit, job)),
            }
        }
        self.after_arrivals(touched);
        Ok(())
    }

    fn greedy_site(&self, snapshot: &[SiteState], processors: u32) -> Result<Option<usize>, SimError> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in snapshot.iter().enumerate() {
            if !s.alive || s.cpu_count < processors {
                continue;
            }
            let cost = computation_cost(s, &self.selector.weights).map_err(SelectError::from)?;
            if best.is_none_or(|(b, _)| cost < b) {
                best = Some((cost, i));
            }
        }
        Ok(best.map(|(_, i)| i))
    }

    fn arrive_group(&mut self, submit: f64, origin: usize, group: JobGroup) -> Result<(), SimError> {
        let size = group.len();
        let record_index = self.metrics.groups.len();
        self.metrics.groups.push(GroupRecord {
            group: group.id,
            arrival: submit,
            size,
            placement: None,
            completed_at: None,
            aggregated_jobs: 0,
        });
        if self.policy == Policy::GreedyBestSite || !self.rt[origin].up {
            let jobs = group.jobs.into_iter().map(|j| (submit, j)).collect();
            return self.arrive(origin, jobs);
        }
        let processors = group.jobs.first().map_or(1, |j| j.processors_required);
        let snapshot = self.snapshot(processors);
        let subgroup_size = self.scenario.config.subgroup_size_for(size);
        let placement = match bulk_scheduler::schedule_group(
            &group,
            &snapshot,
            &self.network,
            &self.selector,
            subgroup_size,
            &self.base[origin].id,
        ) {
            Ok(p) => p,
            Err(BulkError::NoAliveSite) => {
                self.held.extend(group.jobs.into_iter().map(|j| (submit, j)));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let mut state = GroupState {
            record_index,
            remaining: size,
            outputs: Vec::new(),
            job_subgroup: BTreeMap::new(),
            subgroup_remaining: BTreeMap::new(),
        };
        let mut touched = BTreeSet::new();
        for (assignment, jobs) in placement.split_jobs(group.clone()) {
            let site = self.site_index(&assignment.site);
            state.outputs.push(SubgroupOutput {
                group: group.id,
                subgroup: assignment.subgroup,
                site: assignment.site.clone(),
                jobs: jobs.iter().map(|j| j.id).collect(),
                completed: false,
            });
            for j in &jobs {
                state.job_subgroup.insert(j.id, assignment.subgroup);
            }
            state.subgroup_remaining.insert(assignment.subgroup, jobs.len());
            let ids: Vec<JobId> = jobs.iter().map(|j| j.id).collect();
            self.queues[site].submit_batch(jobs, &self.quotas, self.now)?;
            for id in ids {
                self.windows[site].record_arrival(self.now);
                self.note_submit(site, id, submit);
            }
            self.dispatch(site)?;
            touched.insert(site);
        }
        self.metrics.groups[record_index].placement = Some(placement);
        self.groups.insert(group.id, state);
        self.after_arrivals(touched);
        Ok(())
    }

    fn after_arrivals(&mut self, touched: BTreeSet<usize>) {
        for site in touched {
            if self.options.record_snapshots {
                self.metrics.snapshots.push(QueueSnapshot {
                    time: self.now,
                    site: self.base[site].id.clone(),
                    jobs: QueueId::ALL
                        .into_iter()
                        .flat_map(|q| self.queues[site].queue(q).iter().map(move |j| (j.id, j.priority, q)))
                        .collect(),
                });
            }
            if self.policy == Policy::Diana && self.scenario.config.migration.enabled {
                self.schedule(self.now, EventKind::MigrationDecision(site));
            }
        }
    }

    fn note_submit(&mut self, site: usize, id: JobId, submit: f64) {
        let (queue, job) = self.queues[site].get(id).expect("just submitted");
        self.submits.entry(id).or_insert(SubmitInfo {
            submit,
            priority: job.priority,
            queue,
        });
        self.dirty[site] = true;
    }

    fn enqueue(&mut self, site: usize, submit: f64, job: Job) -> Result<(), SimError> {
        let id = job.id;
        self.queues[site].submit(job, &self.quotas, self.now)?;
        self.windows[site].record_arrival(self.now);
        self.note_submit(site, id, submit);
        self.dispatch(site)
    }

    /// Starts queued jobs in strict head-of-line order while they fit.
    fn dispatch(&mut self, site: usize) -> Result<(), SimError> {
        if !self.rt[site].up {
            return Ok(());
        }
        let cpus = self.base[site].cpu_count;
        loop {
            let free = cpus - self.rt[site].busy;
            match self.queues[site].peek_next() {
                Some(head) if head.processors_required <= free => {}
                _ => return Ok(()),
            }
            let (queue, _) = {
                let head = self.queues[site].peek_next().expect("peeked");
                self.queues[site].get(head.id).expect("queued")
            };
            let mut job = self.queues[site].dequeue_next().expect("peeked");
            if !self.started.insert(job.id) {
                return Err(self.violation(format!("job {} started twice", job.id)));
            }
            job.mark_running()?;
            let duration = self.staging_hours(&job, site) + job.service_time;
            self.windows[site].record_service(self.now);
            let rt = &mut self.rt[site];
            rt.busy += job.processors_required;
            rt.busy_cpu_hours += f64::from(job.processors_required) * duration;
            let id = job.id;
            rt.running.insert(
                id,
                Running {
                    priority: job.priority,
                    queue,
                    job,
                    start: self.now,
                },
            );
            self.dirty[site] = true;
            self.schedule(self.now + duration, EventKind::JobComplete { site, job: id });
        }
    }

    fn link(&self, from: &SiteId, to: &SiteId) -> NetworkEdge {
        self.network.link(from, to).expect("validated complete matrix")
    }

    /// Hours spent moving input, executable and output for `job` at `site`.
    fn staging_hours(&self, job: &Job, site: usize) -> f64 {
        let here = &self.base[site].id;
        let origin = &job.origin_site;
        let input = job
            .dataset
            .as_ref()
            .and_then(|d| {
                self.base
                    .iter()
                    .filter(|s| s.hosts(d))
                    .map(|s| transfer_hours(job.input_size, &self.link(&s.id, here)))
                    .min_by(f64::total_cmp)
            })
            .unwrap_or_else(|| transfer_hours(job.input_size, &self.link(origin, here)));
        input
            + transfer_hours(job.executable_size, &self.link(origin, here))
            + transfer_hours(job.output_size, &self.link(here, origin))
    }

    fn complete(&mut self, site: usize, id: JobId) -> Result<(), SimError> {
        let running = self.rt[site]
            .running
            .remove(&id)
            .ok_or_else(|| self.violation(format!("completion of job {id} which is not running at site {site}")))?;
        let mut job = running.job;
        job.mark_completed()?;
        let rt = &mut self.rt[site];
        rt.busy -= job.processors_required;
        rt.completed += 1;
        self.dirty[site] = true;
        let info = self.submits.get(&id).expect("submitted before start");
        let queue_time = running.start - info.submit;
        let execution_time = self.now - running.start;
        self.metrics.jobs.push(JobRecord {
            id,
            owner: job.owner.clone(),
            group: job.group,
            origin: job.origin_site.clone(),
            site: self.base[site].id.clone(),
            processors: job.processors_required,
            submit: info.submit,
            start: running.start,
            end: self.now,
            priority_at_submit: info.priority,
            queue_at_submit: info.queue,
            priority_at_start: running.priority,
            queue_at_start: running.queue,
            queue_time,
            execution_time,
            turnaround: self.now - info.submit,
            response_time: queue_time,
            migrated: job.migrated,
        });
        if let Some(gid) = job.group {
            self.group_job_done(gid, id)?;
        }
        self.dispatch(site)
    }

    fn group_job_done(&mut self, gid: GroupId, id: JobId) -> Result<(), SimError> {
        let Some(state) = self.groups.get_mut(&gid) else {
            return Ok(());
        };
        state.remaining -= 1;
        let sub = state.job_subgroup[&id];
        let left = state.subgroup_remaining.get_mut(&sub).expect("subgroup recorded");
        *left -= 1;
        if *left == 0 {
            if let Some(out) = state.outputs.iter_mut().find(|o| o.subgroup == sub) {
                out.completed = true;
            }
        }
        if state.remaining == 0 {
            let state = self.groups.remove(&gid).expect("present");
            let record = &mut self.metrics.groups[state.record_index];
            record.completed_at = Some(self.now);
            if let Some(placement) = &record.placement {
                let result = bulk_scheduler::aggregate(placement, state.outputs)?;
                record.aggregated_jobs = result.job_count();
            }
        }
        Ok(())
    }

    fn peers(&self, site: usize) -> Vec<usize> {
        let Some(node) = self.rt[site].node.and_then(|n| self.overlay.node(n)) else {
            return Vec::new();
        };
        let root = match node.role {
            Some(Role::RootGrid) => Some(node.id),
            _ => node.root,
        };
        let Some(root) = root.filter(|r| self.overlay.node(*r).is_some_and(|n| n.alive)) else {
            return Vec::new();
        };
        let mut roots = vec![root];
        roots.extend(self.overlay.peer_list(root).unwrap_or_default());
        let mut out = BTreeSet::new();
        for r in roots {
            out.insert(r);
            if let Some(table) = self.overlay.node(r).and_then(|n| n.registry.as_ref()) {
                out.extend(table.records().map(|rec| rec.node));
            }
        }
        out.into_iter()
            .filter_map(|n| self.node_site.get(&n).copied())
            .filter(|&s| s != site && self.rt[s].known_up && self.rt[s].node.is_some())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn report(&self, site: usize, job: &Job, priority: f64, snapshot: &[SiteState]) -> Result<PeerQueueReport, SimError> {
        let costs = candidate_costs(job, &snapshot[site], snapshot, &self.network, &self.selector.weights)?;
        Ok(PeerQueueReport::from_queues(
            self.base[site].id.clone(),
            &self.queues[site],
            self.rt[site].in_transit,
            priority,
            costs.total_cost,
            self.rt[site].known_up,
        ))
    }

    fn migration_decision(&mut self, site: usize) -> Result<(), SimError> {
        let config = self.scenario.config.migration;
        if !self.rt[site].up || !config.enabled || self.policy != Policy::Diana {
            return Ok(());
        }
        let mut candidates: Vec<JobId> = Vec::new();
        if detect_congestion(&self.windows[site], &self.scenario.config.congestion(), self.now) {
            candidates.extend(self.queues[site].congestion_victims().iter().map(|j| j.id));
        }
        if let Some(k) = config.wait_trigger {
            let mut waiting: Vec<&Job> = self.queues[site].jobs().collect();
            waiting.reverse();
            for j in waiting {
                if self.queues[site].count_ahead(j.priority) >= k && !candidates.contains(&j.id) {
                    candidates.push(j.id);
                }
            }
        }
        if candidates.is_empty() {
            return Ok(());
        }
        let peers = self.peers(site);
        if peers.is_empty() {
            return Ok(());
        }
        let mut moved = 0;
        for id in candidates {
            if moved >= config.max_per_decision {
                break;
            }
            let Some((_, job)) = self.queues[site].get(id) else { continue };
            if migrator::check_migratable(job).is_err() {
                continue;
            }
            let job = job.clone();
            if let Some(k) = config.wait_trigger {
                // Earlier moves may have shortened the queue ahead of this job.
                let congested_victim = self.queues[site].congestion_victims().iter().any(|j| j.id == id);
                if self.queues[site].count_ahead(job.priority) < k && !congested_victim {
                    continue;
                }
            }
            let mut snapshot = self.snapshot(job.processors_required);
            let local = self.report(site, &job, job.priority, &snapshot)?;
            let mut reports = Vec::with_capacity(peers.len());
            for &p in &peers {
                // Peers are costed as if the job had already joined their queue.
                snapshot[p].waiting_queue_length += 1;
                let alive = snapshot[p].alive;
                snapshot[p].alive = true;
                let mut r = self.report(p, &job, job.priority, &snapshot)?;
                r.alive = alive && self.rt[p].known_up;
                snapshot[p].waiting_queue_length -= 1;
                snapshot[p].alive = alive;
                reports.push(r);
            }
            let Some(target_id) = migrator::select_target(&local, &reports) else { continue };
            let target = self.site_index(&target_id);
            let chosen = reports.iter().find(|r| r.site == target_id).expect("selected from reports");
            let record = MigrationRecord {
                time: self.now,
                job: id,
                from: self.base[site].id.clone(),
                to: target_id.clone(),
                local_jobs_ahead: local.jobs_ahead,
                target_jobs_ahead: chosen.jobs_ahead,
                local_cost: local.total_cost,
                target_cost: chosen.total_cost,
            };
            let job = migrator::migrate_out(&mut self.queues[site], id, &target_id)?;
            let delay = transfer_hours(job.executable_size, &self.link(&self.base[site].id, &target_id));
            self.transit.insert(id, job);
            self.rt[site].exports += 1;
            self.rt[target].in_transit += 1;
            self.dirty[site] = true;
            self.metrics.migrations.push(record);
            self.schedule(self.now + delay, EventKind::MessageDelivery { site: target, job: id });
            moved += 1;
        }
        self.dispatch(site)
    }

    fn deliver(&mut self, site: usize, id: JobId) -> Result<(), SimError> {
        let job = self
            .transit
            .remove(&id)
            .ok_or_else(|| self.violation(format!("delivery of job {id} which is not in transit")))?;
        self.rt[site].in_transit -= 1;
        self.rt[site].imports += 1;
        migrator::deliver(job, &mut self.queues[site], &self.quotas, self.now)?;
        self.windows[site].record_arrival(self.now);
        self.dirty[site] = true;
        self.dispatch(site)
    }

    fn crash(&mut self, site: usize) -> Result<(), SimError> {
        if !self.rt[site].up {
            return Ok(());
        }
        let rt = &mut self.rt[site];
        rt.up = false;
        rt.crashes += 1;
        let crash = rt.crashes;
        self.dirty[site] = true;
        let delay = self.scenario.config.detection_delay();
        self.schedule(self.now + delay, EventKind::FailureDetected { site, crash });
        Ok(())
    }

    fn detect(&mut self, site: usize, crash: u32) -> Result<(), SimError> {
        let rt = &mut self.rt[site];
        if rt.up || rt.crashes != crash {
            return Ok(());
        }
        rt.known_up = false;
        if let Some(node) = rt.node.take() {
            self.overlay.crash(node)?;
            self.overlay.run_to_quiescence(OVERLAY_STEP_LIMIT)?;
        }
        Ok(())
    }

    fn recover(&mut self, site: usize) -> Result<(), SimError> {
        if self.rt[site].up {
            return Ok(());
        }
        let rt = &mut self.rt[site];
        rt.up = true;
        if !rt.known_up {
            rt.known_up = true;
            self.join_overlay(site)?;
        }
        self.dirty[site] = true;
        self.dispatch(site)?;
        // Retry held work now that capacity may be back.
        let held = std::mem::take(&mut self.held);
        let mut by_origin: BTreeMap<usize, Vec<(f64, Job)>> = BTreeMap::new();
        for (t, job) in held {
            let origin = self.site_index(&job.origin_site);
            by_origin.entry(origin).or_default().push((t, job));
        }
        for (origin, jobs) in by_origin {
            self.arrive(origin, jobs)?;
        }
        Ok(())
    }

    fn record_samples(&mut self) {
        for site in 0..self.base.len() {
            if !std::mem::take(&mut self.dirty[site]) {
                continue;
            }
            let rt = &self.rt[site];
            let counters = (self.queues[site].len(), rt.running.len(), rt.imports, rt.exports, rt.completed);
            if rt.last_sample == Some(counters) {
                continue;
            }
            self.rt[site].last_sample = Some(counters);
            self.metrics.samples.push(SiteSample {
                time: self.now,
                site,
                queued: counters.0,
                running: counters.1,
                imports: counters.2,
                exports: counters.3,
                completed: counters.4,
            });
        }
        let waiting: usize = self.queues.iter().map(FeedbackQueueSet::len).sum();
        if waiting != self.last_waiting {
            self.last_waiting = waiting;
            self.metrics.waiting.push((self.now, waiting));
        }
    }

    fn violation(&self, message: String) -> SimError {
        SimError::Invariant { time: self.now, message }
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        let queued: usize = self.queues.iter().map(FeedbackQueueSet::len).sum();
        let running: usize = self.rt.iter().map(|r| r.running.len()).sum();
        let accounted = self.metrics.jobs.len() + queued + running + self.transit.len() + self.held.len();
        if accounted != self.submitted {
            return Err(self.violation(format!(
                "{} submitted but {} completed + {queued} queued + {running} running + {} in transit + {} held",
                self.submitted,
                self.metrics.jobs.len(),
                self.transit.len(),
                self.held.len()
            )));
        }
        for (i, rt) in self.rt.iter().enumerate() {
            let used: u32 = rt.running.values().map(|r| r.job.processors_required).sum();
            if used != rt.busy || rt.busy > self.base[i].cpu_count {
                return Err(self.violation(format!(
                    "site {} uses {used} processors (busy {}) of {}",
                    self.base[i].id, rt.busy, self.base[i].cpu_count
                )));
            }
            if !self.queues[i].is_consistent() {
                return Err(self.violation(format!("queues at site {} are inconsistent", self.base[i].id)));
            }
        }
        let transit_count: usize = self.rt.iter().map(|r| r.in_transit).sum();
        if transit_count != self.transit.len() {
            return Err(self.violation("in-transit counters disagree".into()));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Metrics, SimError> {
        if !self.held.is_empty() {
            return Err(self.violation(format!("{} jobs never found an alive site", self.held.len())));
        }
        self.metrics.jobs.sort_by_key(|j| j.id);
        let makespan = self.metrics.jobs.iter().map(|j| j.end).fold(0.0, f64::max);
        self.metrics.makespan = makespan;
        for (stats, rt) in self.metrics.sites.iter_mut().zip(&self.rt) {
            stats.completed = rt.completed;
            stats.imports = rt.imports;
            stats.exports = rt.exports;
            if makespan > 0.0 {
                stats.utilization = rt.busy_cpu_hours / (f64::from(stats.cpus) * makespan);
                stats.throughput = rt.completed as f64 / makespan;
            }
        }
        Ok(self.metrics)
    }
}
