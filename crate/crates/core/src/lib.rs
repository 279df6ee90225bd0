//! Multi-agent Hawkes models of level-I order flow and the decomposition of
//! diffusive price volatility into per-agent, per-order-type contributions.

pub mod attribution;
pub mod cli;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod simulation;
pub mod stream;
pub mod types;

pub use linalg::{Matrix, Vector};
pub use model::{BasisDictionary, BranchingSummary, HawkesModel, KernelMatrix, ModelError, PiecewiseBaseline};
pub use stream::{Event, EventStream, Session};
pub use types::{AgentId, Component, EventType, TypeFamily, N_TYPES};
