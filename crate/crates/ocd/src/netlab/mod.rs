//! Deterministic network lab: a packet-level simulator that runs the real
//! relay engine over simulated links, plus scenario descriptions and
//! canned experiment runners.

pub mod scenario;
pub mod sim;

pub use scenario::{run_fairness, run_transfer, FairnessSpec, ScenarioFile, TransferSpec};
pub use sim::{expected_digest, sim_of, sock_of, Flow, FlowState, Sim, SimAddr};
