//! The stealthy injection engine.

mod assign;
mod fabricate;
mod planner;
mod shadow;
mod weights;

pub use assign::{assign_targets, integerize_targets};
pub use fabricate::{map_to_measurements, operator_label, FabricationContext};
pub use planner::{allowed_transitions, plan_manipulation, plan_objective, ManipulationPlan, Phi, PlannerConfig};
pub use shadow::{AttackConfig, AttackContext, AttackOutcome, FlexTarget, Replica, ShadowFleet};
pub use weights::{beta, beta_prime, transition_weights, TransitionWeights};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("assignment infeasible: {0}")]
    Assignment(String),
    #[error("no stealthy report reaches state {target}")]
    Stealth { target: usize },
    #[error("planning failed: {0}")]
    Plan(#[from] crate::optkit::OptError),
}
