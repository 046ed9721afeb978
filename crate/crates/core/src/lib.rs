//! Deterministic simulator of federated multimodal knowledge transfer between
//! a server-side text-to-image generator and heterogeneous image and text
//! clients.

pub mod client;
pub mod config;
pub mod error;
pub mod math;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod server;
pub mod world;

pub use config::{list_presets, parse_config, parse_config_str, preset, ProtocolConfig, Variant};
pub use error::{Error, Result};
pub use protocol::{comm_cost, format_mb, run_experiment, write_outputs, CommCost, Experiment, ExperimentResult};
