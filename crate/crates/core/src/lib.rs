//! Discrete-event simulator of the LTE-V2X sidelink stack with network
//! scheduled (mode 3) and autonomous (mode 4) semi-persistent scheduling,
//! coverage-driven mode switching and a platooning workload.

pub mod channel;
pub mod config;
pub mod engine;
pub mod error;
pub mod facilities;
pub mod grid;
pub mod metrics;
pub mod oracle;
pub mod rrc;
pub mod sbsps;
pub mod scenario;
pub mod sim;
pub mod stack;
pub mod sweep;
pub mod validation;

pub use config::{ModePolicy, ScenarioConfig};
pub use engine::{NodeId, Numerology, SimTime};
pub use error::{Result, SimError};
