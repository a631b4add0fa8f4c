//! Closed-loop traffic simulation for scoring motion planners against
//! reactive surrounding agents.
//!
//! Numeric kernels (geometry, vehicle dynamics, IDM, the interaction score)
//! are generic over [`scalar::Scalar`]; the aliases below fix them to `f64`,
//! which is what the simulator itself uses.

pub mod agents;
pub mod diffusion;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod scalar;
pub mod scene;
pub mod selection;

pub use error::{Error, Result};

pub type Point = geometry::Point2<f64>;
pub type Obb = geometry::OrientedBox<f64>;
pub type Path = geometry::Polyline<f64>;
pub type Bicycle = dynamics::BicycleState<f64>;
pub type Control = dynamics::ControlInput<f64>;
pub type Lqr = dynamics::LqrConfig<f64>;
pub type Idm = agents::idm::IdmParams<f64>;

pub use engine::{
    run_batch, run_scenario, AgentMode, EgoController, PlannerKind, RunStatus, SimulationConfig,
    SimulationLog,
};
pub use scene::{AgentId, AgentState, MapModel, Scenario, Trajectory};
