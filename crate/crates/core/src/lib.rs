//! Post-deployment fairness monitoring: event model, subgroup metrics, drift
//! detection, rebalancing, staged rollouts, human review and simulation.

pub mod drift;
pub mod error;
pub mod hitl;
pub mod metrics;
pub mod model;
pub mod rebalance;
pub mod rollout;
pub mod simulator;
