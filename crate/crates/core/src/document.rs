//! JSON network documents and the module-type registry.
//!
//! ```json
//! {
//!   "nodes": [{"id": "A", "type": "bernoulli", "params": {"p": 0.3}}],
//!   "edges": [{"from": "A.z", "to": "B.p"}],
//!   "observations": {"B": {"z": {"kind": "int", "value": 1}}}
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;
use crate::hmm::{BinaryHmm, HmmParams};
use crate::inverse::InverseStructure;
use crate::module::SharedModule;
use crate::network::ModuleNetwork;
use crate::regression::{build_module_a, build_module_b_with, IndicatorProposal, OutlierRegressionParams, SwitchParams};
use crate::smc::make_smc_module;
use crate::value::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    #[serde(rename = "type")]
    pub module_type: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    /// `<node>.<output port>`.
    pub from: String,
    /// `<node>.<input port>`.
    pub to: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub edges: Vec<EdgeDoc>,
    #[serde(default)]
    pub observations: BTreeMap<String, BTreeMap<String, Value>>,
}

/// Settings that module constructors take from the experiment rather than
/// from the document.
pub struct BuildContext<'a> {
    pub particles: usize,
    pub train_samples: usize,
    pub smoothing: f64,
    pub inverse_structure: InverseStructure,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BernoulliParams {
    p: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoricalParams {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalParams {
    mean: f64,
    sd: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CptParams {
    parents: Vec<(String, usize)>,
    table: Vec<Vec<f64>>,
}

/// Regression constants plus covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionDoc {
    #[serde(flatten)]
    pub params: OutlierRegressionParams,
    pub covariates: Vec<f64>,
    #[serde(default)]
    pub proposal: IndicatorProposal,
}

/// Module types understood by [`build_module`].
pub const MODULE_TYPES: [&str; 7] =
    ["bernoulli", "categorical", "normal", "discrete_cpt", "switch_prior", "outlier_regression", "hmm"];

fn params<T: DeserializeOwned>(node: &NodeDoc) -> Result<T> {
    serde_json::from_value(node.params.clone())
        .map_err(|e| Error::Config(format!("node `{}` ({}): params: {e}", node.id, node.module_type)))
}

fn check_probability(node: &NodeDoc, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("node `{}`: probability {p} outside [0, 1]", node.id)))
    }
}

pub fn build_module(node: &NodeDoc, ctx: &mut BuildContext<'_>) -> Result<SharedModule> {
    let module: SharedModule = match node.module_type.as_str() {
        "bernoulli" => {
            let p: BernoulliParams = params(node)?;
            check_probability(node, p.p)?;
            Arc::new(exact::bernoulli(p.p))
        }
        "categorical" => {
            let p: CategoricalParams = params(node)?;
            let sum: f64 = p.probs.iter().sum();
            if p.probs.is_empty() || p.probs.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("node `{}`: probs must be a distribution", node.id)));
            }
            Arc::new(exact::categorical(p.probs))
        }
        "normal" => {
            let p: NormalParams = params(node)?;
            if !(p.sd > 0.0) {
                return Err(Error::Config(format!("node `{}`: sd must be positive", node.id)));
            }
            Arc::new(exact::normal(p.mean, p.sd))
        }
        "discrete_cpt" => {
            let p: CptParams = params(node)?;
            let parents: Vec<(&str, usize)> = p.parents.iter().map(|(n, k)| (n.as_str(), *k)).collect();
            Arc::new(exact::discrete_cpt(&parents, p.table).map_err(|e| Error::Config(format!("node `{}`: {e}", node.id)))?)
        }
        "switch_prior" => {
            let p: SwitchParams = params(node)?;
            for q in [p.u1, p.u2[0], p.u2[1], p.u3[0], p.u3[1], p.a[0], p.a[1]] {
                check_probability(node, q)?;
            }
            Arc::new(build_module_a(&p, ctx.train_samples, ctx.smoothing, ctx.inverse_structure, &mut *ctx.rng)?)
        }
        "outlier_regression" => {
            let p: RegressionDoc = params(node)?;
            Arc::new(build_module_b_with(p.params, p.covariates, ctx.particles, p.proposal)?)
        }
        "hmm" => {
            let p: HmmParams = params(node)?;
            Arc::new(make_smc_module(BinaryHmm::new(p), ctx.particles)?)
        }
        other => {
            return Err(Error::Config(format!(
                "node `{}`: unknown module type `{other}` (known: {})",
                node.id,
                MODULE_TYPES.join(", ")
            )))
        }
    };
    Ok(module)
}

fn split_port<'a>(endpoint: &'a str, field: &str) -> Result<(&'a str, &'a str)> {
    endpoint
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("edge {field} `{endpoint}` must look like `node.port`")))
}

impl NetworkDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("network document: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn node(&self, id: &str) -> Option<&NodeDoc> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Typed parameters of node `id`.
    pub fn node_params<T: DeserializeOwned>(&self, id: &str) -> Result<T> {
        let node = self.node(id).ok_or_else(|| Error::Config(format!("no node `{id}`")))?;
        params(node)
    }

    pub fn build(&self, ctx: &mut BuildContext<'_>) -> Result<ModuleNetwork> {
        let mut builder = ModuleNetwork::builder();
        for node in &self.nodes {
            builder = builder.node(&node.id, build_module(node, ctx)?);
        }
        for edge in &self.edges {
            let (src, src_port) = split_port(&edge.from, "from")?;
            let (dst, dst_port) = split_port(&edge.to, "to")?;
            builder = builder.edge(src, src_port, dst, dst_port);
        }
        for (node, values) in &self.observations {
            builder = builder.observe_named(node, values.clone());
        }
        builder.build()
    }
}
