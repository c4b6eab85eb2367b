//! Deterministic simulation of a multi-site grid scheduled by cooperating
//! meta-schedulers.

pub mod bulk_scheduler;
pub mod cost_model;
pub mod domain;
pub mod migrator;
pub mod overlay;
pub mod queue_manager;
pub mod report;
pub mod scenario;
pub mod sim_engine;
pub mod site_selector;

pub use domain::{
    CongestionConfig, CostBreakdown, CostWeights, DomainError, GroupId, Job, JobClass, JobGroup, JobId, JobState,
    LittleCheck, NetworkEdge, NetworkMatrix, PriorityContext, SiteId, SiteState, UserId,
};
pub use scenario::{Scenario, ScenarioError};
pub use sim_engine::{compare, littles_check, run, Metrics, Policy, SimError, Summary};
