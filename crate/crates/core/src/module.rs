//! The probabilistic module contract.
//!
//! A module maps inputs `x` to outputs `z` through internal auxiliary
//! variables `u`. Instead of a log-density it exposes two stochastic
//! procedures:
//!
//! * `simulate(x)` draws `(u, z) ~ p(u, z; x)` and reports
//!   `log p(u,z;x) - log q(u;x,z)`;
//! * `regenerate(x, z)` draws `u ~ q(u; x, z)` and reports the same ratio.
//!
//! `exp` of a regenerate weight is an unbiased estimate of `p(z; x)`. With
//! no auxiliary variables both procedures collapse to an exact log-density.

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::error::Result;
use crate::value::{LogWeight, Schema, Value};

/// Opaque auxiliary state produced by one `simulate`/`regenerate` call.
///
/// Only the module that produced it can interpret it; the network layer
/// just stores and swaps it. The payload is immutable once created, so
/// cloning a network shares it cheaply.
#[derive(Clone)]
pub struct AuxState(Option<Arc<dyn Any + Send + Sync>>);

impl AuxState {
    pub fn empty() -> Self {
        AuxState(None)
    }

    pub fn new<T: Any + Send + Sync>(payload: T) -> Self {
        AuxState(Some(Arc::new(payload)))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn downcast_ref<T: Any>(&self) -> Option<&T> {
        self.0.as_deref().and_then(|a| a.downcast_ref::<T>())
    }

    /// True when both handles refer to the same stored payload (or are both empty).
    pub fn same_as(&self, other: &AuxState) -> bool {
        match (&self.0, &other.0) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl fmt::Debug for AuxState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            None => f.write_str("AuxState(empty)"),
            Some(_) => f.write_str("AuxState(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub outputs: Vec<Value>,
    pub log_weight: LogWeight,
    pub aux: AuxState,
}

#[derive(Clone, Debug)]
pub struct Regeneration {
    pub log_weight: LogWeight,
    pub aux: AuxState,
}

/// A probabilistic module.
///
/// Implementations hold no hidden RNG and no mutable caches: every bit of
/// randomness comes from the `rng` argument and the only effects of a call
/// are its return values. Inputs and outputs are slices ordered by the
/// module's schemas.
pub trait ProbModule: Send + Sync {
    fn input_schema(&self) -> &Schema;

    fn output_schema(&self) -> &Schema;

    fn simulate(&self, inputs: &[Value], rng: &mut dyn RngCore) -> Result<Simulation>;

    /// Outputs outside the support of `p(.; x)` must yield a `-inf` weight,
    /// not an error. Errors are reserved for schema violations.
    fn regenerate(
        &self,
        inputs: &[Value],
        outputs: &[Value],
        rng: &mut dyn RngCore,
    ) -> Result<Regeneration>;

    /// Short human-readable name used in logs and reports.
    fn describe(&self) -> String {
        "module".to_owned()
    }
}

pub type SharedModule = Arc<dyn ProbModule>;
