//! Cost-based site selection.
//!
//! A job is classified as compute-intensive, data-intensive or both, the
//! candidate sites are sorted by the cost keys that matter for that class,
//! and the first site that is alive wins.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{self, placement_cost, transfer_hours, CostError, DataRoutes};
pub use crate::domain::JobClass;
use crate::domain::{CostBreakdown, CostWeights, Job, JobId, NetworkEdge, NetworkMatrix, SiteId, SiteState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("job {0} has no service time and no data, it cannot be classified")]
    Unclassifiable(JobId),
    #[error("no candidate sites")]
    NoSites,
    #[error("no alive site")]
    NoAliveSite,
    #[error("no network link {0} -> {1}")]
    MissingLink(SiteId, SiteId),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Transfer/service ratio at or above which a job is data-intensive.
    pub data_dominance_ratio: f64,
    /// Service/transfer ratio at or above which a job is compute-intensive.
    pub compute_dominance_ratio: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            data_dominance_ratio: 2.0,
            compute_dominance_ratio: 2.0,
        }
    }
}

/// Classifies `job` by the ratio of its estimated transfer time to its service time.
pub fn classify(job: &Job, reference_edge: &NetworkEdge, config: &ClassifierConfig) -> Result<JobClass, SelectError> {
    if let Some(class) = job.class_override {
        return Ok(class);
    }
    let transfer = cost_model::data_transfer_cost(job, reference_edge);
    if job.service_time == 0.0 && job.total_data() == 0.0 {
        return Err(SelectError::Unclassifiable(job.id));
    }
    let ratio = if job.service_time == 0.0 {
        f64::INFINITY
    } else {
        transfer / job.service_time
    };
    Ok(if ratio >= config.data_dominance_ratio {
        JobClass::DataIntensive
    } else if ratio <= 1.0 / config.compute_dominance_ratio {
        JobClass::ComputeIntensive
    } else {
        JobClass::Both
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedSite {
    pub site: SiteId,
    pub costs: CostBreakdown,
    pub alive: bool,
}

/// Sort key for one class: primary key, secondary key.
pub fn class_key(class: JobClass, costs: &CostBreakdown) -> (f64, f64) {
    match class {
        JobClass::ComputeIntensive => (costs.computation_cost, costs.network_cost),
        JobClass::DataIntensive => (costs.data_transfer_cost, costs.network_cost),
        JobClass::Both => (costs.total_cost, 0.0),
    }
}

fn link(network: &NetworkMatrix, from: &SiteId, to: &SiteId) -> Result<NetworkEdge, SelectError> {
    network
        .link(from, to)
        .ok_or_else(|| SelectError::MissingLink(from.clone(), to.clone()))
}

/// Costs of running `job` on `candidate`.
///
/// The executable travels from the job's origin and output returns there.
/// Input comes from the cheapest site hosting the job's dataset, or from the
/// origin when no listed site hosts it.
pub fn candidate_costs(
    job: &Job,
    candidate: &SiteState,
    sites: &[SiteState],
    network: &NetworkMatrix,
    weights: &CostWeights,
) -> Result<CostBreakdown, SelectError> {
    let origin = &job.origin_site;
    let to_candidate = link(network, origin, &candidate.id)?;
    let back = link(network, &candidate.id, origin)?;
    let mut input = to_candidate.clone();
    if let Some(dataset) = &job.dataset {
        let mut best: Option<(f64, NetworkEdge)> = None;
        for host in sites.iter().filter(|s| s.hosts(dataset)) {
            let e = link(network, &host.id, &candidate.id)?;
            let hours = transfer_hours(job.input_size, &e);
            if best.as_ref().is_none_or(|(b, _)| hours < *b) {
                best = Some((hours, e));
            }
        }
        if let Some((_, e)) = best {
            input = e;
        }
    }
    let routes = DataRoutes {
        input: &input,
        output: &back,
        executable: &to_candidate,
    };
    Ok(placement_cost(job, candidate, &to_candidate, &routes, weights)?)
}

/// Ranks every site for `job` under `class`. Dead sites stay in the list.
pub fn rank_sites(
    job: &Job,
    class: JobClass,
    sites: &[SiteState],
    network: &NetworkMatrix,
    weights: &CostWeights,
    normalize: bool,
) -> Result<Vec<RankedSite>, SelectError> {
    let mut ranked = sites
        .iter()
        .map(|s| {
            Ok(RankedSite {
                site: s.id.clone(),
                costs: candidate_costs(job, s, sites, network, weights)?,
                alive: s.alive,
            })
        })
        .collect::<Result<Vec<_>, SelectError>>()?;
    let keys: Vec<(f64, f64)> = if normalize && class == JobClass::Both {
        let costs: Vec<_> = ranked.iter().map(|r| r.costs).collect();
        cost_model::normalized_totals(&costs)
            .into_iter()
            .map(|t| (t, 0.0))
            .collect()
    } else {
        ranked.iter().map(|r| class_key(class, &r.costs)).collect()
    };
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| compare_keys(keys[a], keys[b]).then_with(|| ranked[a].site.cmp(&ranked[b].site)));
    let mut slots: Vec<Option<RankedSite>> = ranked.drain(..).map(Some).collect();
    Ok(order.into_iter().filter_map(|i| slots[i].take()).collect())
}

fn compare_keys(a: (f64, f64), b: (f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.total_cmp(&b.1))
}

/// Site selection with fixed weights and classification thresholds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteSelector {
    pub weights: CostWeights,
    pub classifier: ClassifierConfig,
    /// Min-max normalize cost components before summing them.
    pub normalize: bool,
}

impl SiteSelector {
    pub fn new(weights: CostWeights, classifier: ClassifierConfig) -> Self {
        Self {
            weights,
            classifier,
            normalize: false,
        }
    }

    pub fn classify(&self, job: &Job, network: &NetworkMatrix) -> Result<JobClass, SelectError> {
        classify(job, &network.reference_edge(), &self.classifier)
    }

    pub fn rank_sites(&self, job: &Job, sites: &[SiteState], network: &NetworkMatrix) -> Result<Vec<RankedSite>, SelectError> {
        let class = self.classify(job, network)?;
        rank_sites(job, class, sites, network, &self.weights, self.normalize)
    }

    /// The first alive site in rank order.
    pub fn select_site(&self, job: &Job, sites: &[SiteState], network: &NetworkMatrix) -> Result<SiteId, SelectError> {
        self.select_ranked(job, sites, network).map(|r| r.site)
    }

    pub fn select_ranked(&self, job: &Job, sites: &[SiteState], network: &NetworkMatrix) -> Result<RankedSite, SelectError> {
        if sites.is_empty() {
            return Err(SelectError::NoSites);
        }
        self.rank_sites(job, sites, network)?
            .into_iter()
            .find(|r| r.alive)
            .ok_or(SelectError::NoAliveSite)
    }
}
