//! Probabilistic module networks.
//!
//! Latent-variable models are encapsulated behind a `simulate`/`regenerate`
//! contract ([`module::ProbModule`]), composed into DAGs
//! ([`network::ModuleNetwork`]) and explored with single-site
//! Metropolis-Hastings that stores one log-weight per module ([`mh`]).

pub mod document;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod hmm;
pub mod inverse;
pub mod math;
pub mod mh;
pub mod module;
pub mod network;
pub mod oracle;
pub mod regression;
pub mod smc;
pub mod validate;
pub mod value;

pub use error::{Error, Result};
pub use module::{AuxState, ProbModule, Regeneration, SharedModule, Simulation};
pub use network::{ModuleNetwork, NetworkBuilder, NodeId};
pub use value::{LogWeight, PortSpec, Schema, Value, ValueKind};
