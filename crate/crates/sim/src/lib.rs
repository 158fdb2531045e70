//! Deterministic multi-region simulator for federated exposure-notification
//! backends.
//!
//! A scenario describes regions, users with travel itineraries, contacts and
//! positive tests. [`simulate`] runs real backend nodes over the in-process
//! transport in 15-minute steps, lets simulated devices download the public
//! feeds they listen to, and checks every relevant contact against what the
//! architecture promises.

pub mod analysis;
pub mod engine;
pub mod generate;
pub mod report;
pub mod scenario;

pub use analysis::{
    check_alt2_equivalence, compare_replication_modes, estimate_bandwidth, measure_replication_traffic,
    Alt2Verdict, BandwidthEstimate,
};
pub use engine::{run_scenario, simulate, SimulationRun};
pub use report::{Outcome, Requirement, SimulationReport};
pub use scenario::{Listening, Scenario, SimError};
