//! Deterministic simulator: overhead profiles, a virtual-time packet
//! network, and scenario runs of the full protocol on top of it.

pub mod calibration;
pub mod network;
pub mod overhead;
pub mod scenario;

use thiserror::Error;

pub use calibration::{calibration_min_rtts, CalibrationSet};
pub use network::{
    global_soundness, simulate_link_delay, AdversaryPolicy, NetStats, PacketKey, SimNetwork, SimNode,
    SimTransport, TopologyConfig,
};
pub use overhead::{calibrate_overhead, OverheadKind, OverheadModel};
pub use scenario::{bundled_scenario, run_scenario, SimConnector, ScenarioConfig, ScenarioResult, BUNDLED_SCENARIOS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown overhead profile {0:?}")]
    UnknownKind(String),
    #[error("unknown node {0}")]
    UnknownNode(crate::model::NodeId),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Protocol(#[from] crate::parties::ProtocolError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
