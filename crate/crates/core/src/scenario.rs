//! Scenario files: sites, network, users, workload and scheduler settings.
//!
//! Scenarios are TOML documents. Unknown keys produce warnings rather than
//! errors so older binaries can read newer files. Validation reports the
//! offending field by its dotted path.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bulk_scheduler::subgroup_size_for;
use crate::domain::{
    CongestionConfig, CostWeights, GroupId, Job, JobClass, JobGroup, JobId, NetworkEdge, NetworkMatrix, SiteId,
    SiteState, UserId,
};
use crate::migrator::MigrationConfig;
use crate::queue_manager::Quotas;
use crate::site_selector::{ClassifierConfig, SiteSelector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("parse error: {0}")]
    ParseNoLocation(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot render scenario: {0}")]
    Render(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub weights: CostWeights,
    /// Min-max normalize cost components for jobs that are neither data- nor compute-bound.
    pub normalize_costs: bool,
    pub classifier: ClassifierConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub division_factor: Option<u32>,
    pub congestion_threshold: f64,
    pub migration_boost: f64,
    /// Priority gained per hour of waiting; 0 turns aging off.
    pub aging: f64,
    /// Arrivals and service starts remembered for congestion detection.
    pub rate_window: usize,
    pub migration: MigrationConfig,
    /// Sites with at least this many CPUs form their own SubGrid.
    pub subgrid_min_cpus: u32,
    /// Heartbeat interval in hours.
    pub heartbeat: f64,
    /// Missed heartbeats before a node is declared failed.
    pub timeout_beats: u32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            normalize_costs: false,
            classifier: ClassifierConfig::default(),
            subgroup_size: None,
            division_factor: None,
            congestion_threshold: 0.5,
            migration_boost: 0.25,
            aging: 0.0,
            rate_window: 100,
            migration: MigrationConfig::default(),
            subgrid_min_cpus: 1,
            heartbeat: 1.0 / 60.0,
            timeout_beats: 3,
        }
    }
}

impl Config {
    pub fn selector(&self) -> SiteSelector {
        SiteSelector {
            weights: self.weights,
            classifier: self.classifier,
            normalize: self.normalize_costs,
        }
    }

    pub fn congestion(&self) -> CongestionConfig {
        CongestionConfig {
            thrs: self.congestion_threshold,
        }
    }

    /// Hours between a crash and its detection.
    pub fn detection_delay(&self) -> f64 {
        self.heartbeat * f64::from(self.timeout_beats)
    }

    /// Subgroup size for a group of `group_size` jobs.
    pub fn subgroup_size_for(&self, group_size: usize) -> usize {
        match (self.subgroup_size, self.division_factor) {
            (Some(s), _) => s.max(1),
            (None, Some(d)) => subgroup_size_for(group_size, d),
            (None, None) => group_size.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub id: SiteId,
    pub cpus: u32,
    /// Jobs per hour per CPU.
    #[serde(default = "one")]
    pub capability: f64,
    /// Background load in `[0, 1]`.
    #[serde(default)]
    pub load: f64,
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default = "one")]
    pub availability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_jobs_per_user: Option<u32>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDefault {
    pub bandwidth: f64,
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: SiteId,
    pub to: SiteId,
    pub bandwidth: f64,
    #[serde(default)]
    pub loss: f64,
    /// Also defines the reverse link.
    #[serde(default)]
    pub symmetric: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    /// Applied to every ordered pair without an explicit link.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default: Option<LinkDefault>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub id: UserId,
    pub quota: f64,
}

/// Shape shared by generated jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobShape {
    pub processors: u32,
    /// When set, processors are drawn uniformly from `processors..=max_processors`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_processors: Option<u32>,
    /// Service time in hours.
    pub service: f64,
    /// Multiply the service time by the processor count.
    pub service_per_processor: bool,
    /// Draw service times from an exponential distribution with mean `service`.
    pub exponential_service: bool,
    pub input: f64,
    pub output: f64,
    pub executable: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<JobClass>,
}

impl Default for JobShape {
    fn default() -> Self {
        Self {
            processors: 1,
            max_processors: None,
            service: 1.0,
            service_per_processor: false,
            exponential_service: false,
            input: 0.0,
            output: 0.0,
            executable: 0.0,
            dataset: None,
            class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub user: UserId,
    pub site: SiteId,
    pub arrival: f64,
    #[serde(default = "one_u32")]
    pub processors: u32,
    pub service: f64,
    #[serde(default)]
    pub input: f64,
    #[serde(default)]
    pub output: f64,
    #[serde(default)]
    pub executable: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<JobClass>,
}

fn one_u32() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub user: UserId,
    pub site: SiteId,
    pub arrival: f64,
    pub count: usize,
    #[serde(default)]
    pub job: JobShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSpec {
    pub users: Vec<UserId>,
    /// Relative share of each user; uniform when empty.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub site: SiteId,
    /// Arrivals per hour.
    pub rate: f64,
    #[serde(default)]
    pub start: f64,
    pub count: usize,
    #[serde(default)]
    pub job: JobShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub users: Vec<UserId>,
    #[serde(default)]
    pub weights: Vec<f64>,
    pub site: SiteId,
    #[serde(default)]
    pub start: f64,
    /// Hours between bursts.
    pub interval: f64,
    pub burst_size: usize,
    /// Total jobs over all bursts.
    pub count: usize,
    #[serde(default)]
    pub job: JobShape,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub jobs: Vec<JobSpec>,
    pub groups: Vec<GroupSpec>,
    pub poisson: Vec<PoissonSpec>,
    pub bursts: Vec<BurstSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageSpec {
    pub site: SiteId,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub config: Config,
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub network: NetworkSpec,
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub outages: Vec<OutageSpec>,
}

/// A parsed scenario and the unknown keys it contained.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub scenario: Scenario,
    pub warnings: Vec<String>,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

impl Scenario {
    /// Parses and validates scenario text.
    pub fn parse(text: &str) -> Result<Parsed, ScenarioError> {
        let to_error = |e: toml::de::Error| match e.span() {
            Some(span) => {
                let (line, column) = line_column(text, span.start);
                ScenarioError::Parse {
                    line,
                    column,
                    message: e.message().to_owned(),
                }
            }
            None => ScenarioError::ParseNoLocation(e.message().to_owned()),
        };
        let de = toml::Deserializer::parse(text).map_err(to_error)?;
        let mut warnings = Vec::new();
        let scenario: Scenario =
            serde_ignored::deserialize(de, |path| warnings.push(format!("unknown key `{path}` ignored"))).map_err(to_error)?;
        scenario.validate()?;
        Ok(Parsed { scenario, warnings })
    }

    pub fn load(path: &Path) -> Result<Parsed, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn render(&self) -> Result<String, ScenarioError> {
        toml::to_string_pretty(self).map_err(|e| ScenarioError::Render(e.to_string()))
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.sites.iter().map(|s| s.id.clone()).collect()
    }

    /// Replaces the job count of every Poisson and burst generator.
    pub fn with_job_count(mut self, count: usize) -> Self {
        for p in &mut self.workload.poisson {
            p.count = count;
        }
        for b in &mut self.workload.bursts {
            b.count = count;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let c = &self.config;
        c.weights
            .validate()
            .map_err(|e| invalid("config.weights", e.to_string()))?;
        for (field, ratio) in [
            ("config.classifier.data_dominance_ratio", c.classifier.data_dominance_ratio),
            ("config.classifier.compute_dominance_ratio", c.classifier.compute_dominance_ratio),
        ] {
            if !(ratio.is_finite() && ratio >= 1.0) {
                return Err(invalid(field, format!("must be at least 1, got {ratio}")));
            }
        }
        if c.subgroup_size == Some(0) {
            return Err(invalid("config.subgroup_size", "must be positive"));
        }
        if c.division_factor == Some(0) {
            return Err(invalid("config.division_factor", "must be positive"));
        }
        if !(0.0..=1.0).contains(&c.congestion_threshold) {
            return Err(invalid("config.congestion_threshold", format!("must lie in [0, 1], got {}", c.congestion_threshold)));
        }
        if !(c.migration_boost.is_finite() && c.migration_boost >= 0.0) {
            return Err(invalid("config.migration_boost", "must be finite and non-negative"));
        }
        if !(c.aging.is_finite() && c.aging >= 0.0) {
            return Err(invalid("config.aging", "must be finite and non-negative"));
        }
        if c.rate_window == 0 {
            return Err(invalid("config.rate_window", "must be positive"));
        }
        if !(c.heartbeat.is_finite() && c.heartbeat > 0.0) {
            return Err(invalid("config.heartbeat", "must be positive"));
        }
        if c.timeout_beats == 0 {
            return Err(invalid("config.timeout_beats", "must be positive"));
        }

        if self.sites.is_empty() {
            return Err(invalid("sites", "at least one site is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, s) in self.sites.iter().enumerate() {
            let at = |f: &str| format!("sites[{i}].{f}");
            if !ids.insert(&s.id) {
                return Err(invalid(at("id"), format!("duplicate site id {}", s.id)));
            }
            if s.cpus == 0 {
                return Err(invalid(at("cpus"), "must be positive"));
            }
            if !(s.capability.is_finite() && s.capability > 0.0) {
                return Err(invalid(at("capability"), "must be positive"));
            }
            if !(0.0..=1.0).contains(&s.load) {
                return Err(invalid(at("load"), "must lie in [0, 1]"));
            }
            if !s.availability.is_finite() {
                return Err(invalid(at("availability"), "must be finite"));
            }
        }
        self.network_matrix()?;

        let mut users = BTreeSet::new();
        for (i, u) in self.users.iter().enumerate() {
            if !users.insert(&u.id) {
                return Err(invalid(format!("users[{i}].id"), format!("duplicate user {}", u.id)));
            }
            if !(u.quota.is_finite() && u.quota > 0.0) {
                return Err(invalid(format!("users[{i}].quota"), "must be positive"));
            }
        }
        let site_ok = |field: String, s: &SiteId| {
            if ids.contains(s) {
                Ok(())
            } else {
                Err(invalid(field, format!("unknown site {s}")))
            }
        };
        let user_ok = |field: String, u: &UserId| {
            if users.contains(u) {
                Ok(())
            } else {
                Err(invalid(field, format!("unknown user {u}")))
            }
        };
        let time_ok = |field: String, t: f64| {
            if t.is_finite() && t >= 0.0 {
                Ok(())
            } else {
                Err(invalid(field, "must be finite and non-negative"))
            }
        };
        let w = &self.workload;
        for (i, j) in w.jobs.iter().enumerate() {
            let at = |f: &str| format!("workload.jobs[{i}].{f}");
            user_ok(at("user"), &j.user)?;
            site_ok(at("site"), &j.site)?;
            time_ok(at("arrival"), j.arrival)?;
            if j.processors == 0 {
                return Err(invalid(at("processors"), "must be positive"));
            }
            for (f, v) in [("service", j.service), ("input", j.input), ("output", j.output), ("executable", j.executable)] {
                time_ok(at(f), v)?;
            }
        }
        for (i, g) in w.groups.iter().enumerate() {
            let at = |f: &str| format!("workload.groups[{i}].{f}");
            user_ok(at("user"), &g.user)?;
            site_ok(at("site"), &g.site)?;
            time_ok(at("arrival"), g.arrival)?;
            if g.count == 0 {
                return Err(invalid(at("count"), "must be positive"));
            }
            validate_shape(&at("job"), &g.job)?;
        }
        for (i, p) in w.poisson.iter().enumerate() {
            let at = |f: &str| format!("workload.poisson[{i}].{f}");
            validate_mix(&at("users"), &at("weights"), &p.users, &p.weights, &user_ok)?;
            site_ok(at("site"), &p.site)?;
            time_ok(at("start"), p.start)?;
            if !(p.rate.is_finite() && p.rate > 0.0) {
                return Err(invalid(at("rate"), "must be positive"));
            }
            validate_shape(&at("job"), &p.job)?;
        }
        for (i, b) in w.bursts.iter().enumerate() {
            let at = |f: &str| format!("workload.bursts[{i}].{f}");
            validate_mix(&at("users"), &at("weights"), &b.users, &b.weights, &user_ok)?;
            site_ok(at("site"), &b.site)?;
            time_ok(at("start"), b.start)?;
            time_ok(at("interval"), b.interval)?;
            if b.burst_size == 0 {
                return Err(invalid(at("burst_size"), "must be positive"));
            }
            validate_shape(&at("job"), &b.job)?;
        }
        for (i, o) in self.outages.iter().enumerate() {
            let at = |f: &str| format!("outages[{i}].{f}");
            site_ok(at("site"), &o.site)?;
            time_ok(at("start"), o.start)?;
            if !(o.end.is_finite() && o.end > o.start) {
                return Err(invalid(at("end"), "must be after start"));
            }
        }
        Ok(())
    }

    /// Complete directed link matrix; explicit links override the default.
    pub fn network_matrix(&self) -> Result<NetworkMatrix, ScenarioError> {
        let mut m = NetworkMatrix::new();
        let ids = self.site_ids();
        if let Some(d) = &self.network.default {
            for a in &ids {
                for b in &ids {
                    if a != b {
                        let e = NetworkEdge::new(a.clone(), b.clone(), d.bandwidth, d.loss)
                            .map_err(|e| invalid("network.default", e.to_string()))?;
                        m.insert(e);
                    }
                }
            }
        }
        for (i, l) in self.network.links.iter().enumerate() {
            let at = |f: &str| format!("network.links[{i}].{f}");
            for (f, s) in [("from", &l.from), ("to", &l.to)] {
                if !ids.contains(s) {
                    return Err(invalid(at(f), format!("unknown site {s}")));
                }
            }
            if l.from == l.to {
                return Err(invalid(at("to"), "a link needs two distinct sites"));
            }
            let field = if l.loss.is_finite() && (0.0..1.0).contains(&l.loss) { at("bandwidth") } else { at("loss") };
            let e = NetworkEdge::new(l.from.clone(), l.to.clone(), l.bandwidth, l.loss)
                .map_err(|e| invalid(field.clone(), e.to_string()))?;
            m.insert(e);
            if l.symmetric {
                let back = NetworkEdge::new(l.to.clone(), l.from.clone(), l.bandwidth, l.loss)
                    .map_err(|e| invalid(field, e.to_string()))?;
                m.insert(back);
            }
        }
        if let Some((a, b)) = m.missing_pairs(&ids).into_iter().next() {
            return Err(invalid("network.links", format!("no link from {a} to {b}")));
        }
        Ok(m)
    }

    pub fn quotas(&self) -> Quotas {
        self.users.iter().map(|u| (u.id.clone(), u.quota)).collect()
    }

    /// Initial site snapshots.
    pub fn site_states(&self) -> Vec<SiteState> {
        self.sites
            .iter()
            .map(|s| SiteState {
                id: s.id.clone(),
                cpu_count: s.cpus,
                compute_capability: s.capability,
                waiting_queue_length: 0,
                site_load: s.load,
                alive: true,
                hosted_datasets: s.datasets.iter().cloned().collect(),
                max_jobs_per_user: s.max_jobs_per_user,
            })
            .collect()
    }

    /// Expands the workload into concrete arrivals.
    ///
    /// Each generator draws from its own stream of the seeded generator, so
    /// the first `n` jobs of a generator do not depend on its total count.
    pub fn generate(&self, seed: u64) -> Workload {
        let mut next_id = 0u64;
        let mut fresh = || {
            let id = JobId(next_id);
            next_id += 1;
            id
        };
        let mut singles = Vec::new();
        for j in &self.workload.jobs {
            let mut job = Job::new(fresh(), j.user.clone(), j.site.clone(), j.processors, j.service)
                .and_then(|job| job.with_data(j.input, j.output, j.executable))
                .expect("validated");
            job.dataset = j.dataset.clone();
            job.class_override = j.class;
            singles.push((j.arrival, job));
        }
        let mut groups = Vec::new();
        for (gi, g) in self.workload.groups.iter().enumerate() {
            let mut rng = stream(seed, gi as u64);
            let gid = GroupId(gi as u64);
            let jobs: Vec<Job> = (0..g.count)
                .map(|_| shape_job(fresh(), &g.user, &g.site, &g.job, &mut rng).with_group(gid))
                .collect();
            let division = self.config.division_factor.unwrap_or(1);
            let group = JobGroup::new(gid, g.user.clone(), jobs, division).expect("single owner");
            groups.push((g.arrival, g.site.clone(), group));
        }
        let base = self.workload.groups.len() as u64;
        for (pi, p) in self.workload.poisson.iter().enumerate() {
            let mut rng = stream(seed, base + pi as u64);
            let gap = Exp::new(p.rate).expect("validated rate");
            let pick = user_picker(&p.users, &p.weights);
            let mut t = p.start;
            for _ in 0..p.count {
                t += gap.sample(&mut rng);
                let user = &p.users[pick.sample(&mut rng)];
                singles.push((t, shape_job(fresh(), user, &p.site, &p.job, &mut rng)));
            }
        }
        let base = base + self.workload.poisson.len() as u64;
        for (bi, b) in self.workload.bursts.iter().enumerate() {
            let mut rng = stream(seed, base + bi as u64);
            let pick = user_picker(&b.users, &b.weights);
            for k in 0..b.count {
                let t = b.start + (k / b.burst_size) as f64 * b.interval;
                let user = &b.users[pick.sample(&mut rng)];
                singles.push((t, shape_job(fresh(), user, &b.site, &b.job, &mut rng)));
            }
        }
        singles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        let mut arrivals: Vec<Arrival> = Vec::new();
        for (t, job) in singles {
            match arrivals.last_mut() {
                Some(last) if last.time == t && last.origin == job.origin_site => last.jobs.push(job),
                _ => arrivals.push(Arrival {
                    time: t,
                    origin: job.origin_site.clone(),
                    jobs: vec![job],
                }),
            }
        }
        Workload { arrivals, groups }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn user_picker(users: &[UserId], weights: &[f64]) -> WeightedIndex<f64> {
    let w: Vec<f64> = if weights.is_empty() { vec![1.0; users.len()] } else { weights.to_vec() };
    WeightedIndex::new(w).expect("validated weights")
}

fn shape_job(id: JobId, user: &UserId, site: &SiteId, shape: &JobShape, rng: &mut ChaCha8Rng) -> Job {
    let processors = match shape.max_processors {
        Some(max) if max > shape.processors => rng.random_range(shape.processors..=max),
        _ => shape.processors,
    };
    let mut service = if shape.exponential_service {
        Exp::new(1.0 / shape.service).expect("validated service").sample(rng)
    } else {
        shape.service
    };
    if shape.service_per_processor {
        service *= f64::from(processors);
    }
    let mut job = Job::new(id, user.clone(), site.clone(), processors, service)
        .and_then(|j| j.with_data(shape.input, shape.output, shape.executable))
        .expect("validated shape");
    job.dataset = shape.dataset.clone();
    job.class_override = shape.class;
    job
}

fn validate_shape(at: &str, s: &JobShape) -> Result<(), ScenarioError> {
    if s.processors == 0 {
        return Err(invalid(format!("{at}.processors"), "must be positive"));
    }
    if let Some(max) = s.max_processors {
        if max < s.processors {
            return Err(invalid(format!("{at}.max_processors"), "must be at least processors"));
        }
    }
    if !(s.service.is_finite() && s.service > 0.0) {
        return Err(invalid(format!("{at}.service"), "must be positive"));
    }
    for (f, v) in [("input", s.input), ("output", s.output), ("executable", s.executable)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid(format!("{at}.{f}"), "must be finite and non-negative"));
        }
    }
    Ok(())
}

fn validate_mix(
    users_field: &str,
    weights_field: &str,
    users: &[UserId],
    weights: &[f64],
    user_ok: &dyn Fn(String, &UserId) -> Result<(), ScenarioError>,
) -> Result<(), ScenarioError> {
    if users.is_empty() {
        return Err(invalid(users_field, "at least one user is required"));
    }
    for (i, u) in users.iter().enumerate() {
        user_ok(format!("{users_field}[{i}]"), u)?;
    }
    if !weights.is_empty() {
        if weights.len() != users.len() {
            return Err(invalid(weights_field, "needs one weight per user"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(invalid(weights_field, "must be non-negative with a positive sum"));
        }
    }
    Ok(())
}

/// Jobs arriving together at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub origin: SiteId,
    pub jobs: Vec<Job>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    /// Ordered by time, then by first job id.
    pub arrivals: Vec<Arrival>,
    pub groups: Vec<(f64, SiteId, JobGroup)>,
}

impl Workload {
    pub fn job_count(&self) -> usize {
        self.arrivals.iter().map(|a| a.jobs.len()).sum::<usize>() + self.groups.iter().map(|g| g.2.len()).sum::<usize>()
    }

    /// Arrival time of every job.
    pub fn arrival_times(&self) -> BTreeMap<JobId, f64> {
        let mut out = BTreeMap::new();
        for a in &self.arrivals {
            for j in &a.jobs {
                out.insert(j.id, a.time);
            }
        }
        for (t, _, g) in &self.groups {
            for j in &g.jobs {
                out.insert(j.id, *t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[sites]]
id = "A"
cpus = 2

[[sites]]
id = "B"
cpus = 4
datasets = ["d1"]

[network.default]
bandwidth = 100.0
loss = 0.01

[[users]]
id = "u"
quota = 1.0

[[workload.jobs]]
user = "u"
site = "A"
arrival = 0.0
service = 1.0
"#;

    #[test]
    fn parses_minimal() {
        let p = Scenario::parse(MINIMAL).unwrap();
        assert!(p.warnings.is_empty());
        assert_eq!(p.scenario.sites.len(), 2);
        assert_eq!(p.scenario.network_matrix().unwrap().len(), 2);
        assert_eq!(p.scenario.config, Config::default());
    }

    #[test]
    fn unknown_keys_warn() {
        let text = format!("{MINIMAL}\n[config]\nfuture_knob = 3\n");
        let p = Scenario::parse(&text).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("future_knob"), "{:?}", p.warnings);
    }

    #[test]
    fn missing_link_names_pair() {
        let text = MINIMAL.replace("[network.default]\nbandwidth = 100.0\nloss = 0.01\n", "[[network.links]]\nfrom = \"A\"\nto = \"B\"\nbandwidth = 10.0\n");
        let err = Scenario::parse(&text).unwrap_err();
        assert_eq!(
            err,
            ScenarioError::Invalid {
                field: "network.links".into(),
                message: "no link from B to A".into()
            }
        );
    }

    #[test]
    fn full_loss_rejected() {
        let text = MINIMAL.replace("[network.default]", "[[network.links]]\nfrom = \"A\"\nto = \"B\"\nbandwidth = 10.0\nloss = 1.0\nsymmetric = true\n\n[network.default]");
        match Scenario::parse(&text).unwrap_err() {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "network.links[0].loss"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn malformed_reports_location() {
        let err = Scenario::parse("[[sites]\nid = 1").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn unknown_references_rejected() {
        let text = MINIMAL.replace("user = \"u\"", "user = \"ghost\"");
        match Scenario::parse(&text).unwrap_err() {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "workload.jobs[0].user"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let mut s = Scenario::parse(MINIMAL).unwrap().scenario;
        s.workload.bursts.push(BurstSpec {
            users: vec!["u".into()],
            weights: vec![],
            site: "A".into(),
            start: 0.5,
            interval: 0.1,
            burst_size: 3,
            count: 7,
            job: JobShape {
                max_processors: Some(3),
                class: Some(JobClass::DataIntensive),
                ..JobShape::default()
            },
        });
        s.config.subgroup_size = Some(5);
        let text = s.render().unwrap();
        assert_eq!(Scenario::parse(&text).unwrap().scenario, s);
    }

    #[test]
    fn generators_share_prefix_across_counts() {
        let mut s = Scenario::parse(MINIMAL).unwrap().scenario;
        s.workload.poisson.push(PoissonSpec {
            users: vec!["u".into()],
            weights: vec![],
            site: "A".into(),
            rate: 4.0,
            start: 0.0,
            count: 10,
            job: JobShape {
                max_processors: Some(4),
                exponential_service: true,
                ..JobShape::default()
            },
        });
        let small = s.clone().with_job_count(10).generate(3);
        let large = s.with_job_count(50).generate(3);
        assert_eq!(small.job_count(), 11);
        assert_eq!(large.job_count(), 51);
        let flat = |w: &Workload| -> Vec<(f64, u32, f64)> {
            w.arrivals
                .iter()
                .flat_map(|a| a.jobs.iter().map(move |j| (a.time, j.processors_required, j.service_time)))
                .collect()
        };
        assert_eq!(flat(&small)[..], flat(&large)[..11]);
    }

    #[test]
    fn bursts_group_by_instant() {
        let mut s = Scenario::parse(MINIMAL).unwrap().scenario;
        s.workload.jobs.clear();
        s.workload.bursts.push(BurstSpec {
            users: vec!["u".into()],
            weights: vec![],
            site: "A".into(),
            start: 0.0,
            interval: 2.0,
            burst_size: 25,
            count: 60,
            job: JobShape::default(),
        });
        let w = s.generate(1);
        let sizes: Vec<usize> = w.arrivals.iter().map(|a| a.jobs.len()).collect();
        assert_eq!(sizes, [25, 25, 10]);
        assert_eq!(w.arrivals[2].time, 4.0);
    }
}
