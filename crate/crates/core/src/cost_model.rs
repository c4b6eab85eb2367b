//! Network, computation and data-transfer costs for a (job, site) pair.

use thiserror::Error;

use crate::domain::{CostBreakdown, CostWeights, Job, NetworkEdge, SiteId, SiteState};

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("site {0} has zero compute capability")]
    ZeroCapability(SiteId),
}

/// `loss / bandwidth`.
pub fn network_cost(edge: &NetworkEdge) -> f64 {
    edge.loss_rate / edge.bandwidth
}

/// `Q/P * w5 + Q/P * w6 + load * w7`, where `P` is the site's aggregate capability.
pub fn computation_cost(site: &SiteState, weights: &CostWeights) -> Result<f64, CostError> {
    let capability = site.capability();
    if capability <= 0.0 {
        return Err(CostError::ZeroCapability(site.id.clone()));
    }
    let queue = site.waiting_queue_length as f64;
    Ok(queue / capability * weights.w5 + queue / capability * weights.w6 + site.site_load * weights.w7)
}

/// Hours to move `size_mb` over `edge`, with lost packets retransmitted.
pub fn transfer_hours(size_mb: f64, edge: &NetworkEdge) -> f64 {
    if size_mb == 0.0 {
        return 0.0;
    }
    size_mb / (edge.bandwidth * (1.0 - edge.loss_rate)) / SECONDS_PER_HOUR
}

/// Links used to move each of a job's three data components.
#[derive(Debug, Clone, Copy)]
pub struct DataRoutes<'a> {
    pub input: &'a NetworkEdge,
    pub output: &'a NetworkEdge,
    pub executable: &'a NetworkEdge,
}

impl<'a> DataRoutes<'a> {
    pub fn uniform(edge: &'a NetworkEdge) -> Self {
        Self {
            input: edge,
            output: edge,
            executable: edge,
        }
    }
}

/// Input + output + executable transfer time in hours, all over one link.
pub fn data_transfer_cost(job: &Job, edge: &NetworkEdge) -> f64 {
    routed_data_transfer_cost(job, &DataRoutes::uniform(edge))
}

pub fn routed_data_transfer_cost(job: &Job, routes: &DataRoutes<'_>) -> f64 {
    transfer_hours(job.input_size, routes.input)
        + transfer_hours(job.output_size, routes.output)
        + transfer_hours(job.executable_size, routes.executable)
}

pub fn total_cost(
    job: &Job,
    site: &SiteState,
    edge: &NetworkEdge,
    weights: &CostWeights,
) -> Result<CostBreakdown, CostError> {
    placement_cost(job, site, edge, &DataRoutes::uniform(edge), weights)
}

/// Like [`total_cost`] but with each data component on its own link.
pub fn placement_cost(
    job: &Job,
    site: &SiteState,
    network_edge: &NetworkEdge,
    routes: &DataRoutes<'_>,
    weights: &CostWeights,
) -> Result<CostBreakdown, CostError> {
    Ok(CostBreakdown::new(
        network_cost(network_edge),
        computation_cost(site, weights)?,
        routed_data_transfer_cost(job, routes),
    ))
}

/// Min-max normalizes each component across the candidate set and sums them.
///
/// A component that is constant across all candidates contributes zero.
pub fn normalized_totals(costs: &[CostBreakdown]) -> Vec<f64> {
    fn scale(values: Vec<f64>) -> Vec<f64> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        values
            .into_iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect()
    }
    let net = scale(costs.iter().map(|c| c.network_cost).collect());
    let comp = scale(costs.iter().map(|c| c.computation_cost).collect());
    let dtc = scale(costs.iter().map(|c| c.data_transfer_cost).collect());
    net.iter()
        .zip(&comp)
        .zip(&dtc)
        .map(|((a, b), c)| a + b + c)
        .collect()
}
