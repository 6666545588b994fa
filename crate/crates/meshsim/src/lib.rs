//! Deterministic discrete-event simulator for multi-radio, multi-channel
//! wireless mesh networks.
//!
//! Two forwarding strategies run over the same abstract medium model:
//!
//! * **GSR** — link-state routing with periodic full-table exchange between
//!   neighbors and hop-count shortest paths; plain per-packet forwarding.
//! * **AAL2R** — layer-2.5 forwarding that packs packets bound for the same
//!   next hop into MTU-sized transmission units and splits traffic across
//!   the candidate next hops in proportion to link bandwidth, while
//!   guaranteeing delivery within the hop distance measured at injection.
//!
//! Runs are fully reproducible: the same scenario and seed give
//! byte-identical reports and CSV output.

pub mod aal2r;
pub mod engine;
pub mod gsr;
pub mod metrics;
pub mod net;
pub mod packet;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod traffic;

pub use engine::{gsr_tables_after_run, run_scenario, run_scenario_with, EngineError, RunOptions};
pub use report::{compare, seed_range, CompareReport, Report};
pub use scenario::{preset, Protocol, Scenario, ScenarioError};
