//! Single-site Metropolis-Hastings over module networks.
//!
//! Each node keeps the log-weight of its last accepted `simulate` or
//! `regenerate` call. An update of node `i` proposes a new output, calls
//! `regenerate` on `i` and on each of its children with the proposed value
//! substituted, and accepts with
//!
//! ```text
//! log r(z_i; z_i') - log r(z_i'; z_i) + sum_{j in {i} + children(i)} (l'_j - l_j)
//! ```
//!
//! On acceptance the new outputs, weights and auxiliary states are stored
//! together; on rejection nothing in the network changes. Random-scan
//! mixtures and cycles of these updates leave the posterior over
//! unobserved outputs invariant (as a marginal of the joint over outputs
//! and auxiliary variables).

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::{ModuleNetwork, NodeId};
use crate::value::{LogWeight, Value};

/// Proposal kernel `r(z'; z)` acting on a single port value.
pub trait Proposal: Send + Sync {
    fn propose(&self, current: &Value, rng: &mut dyn RngCore) -> Result<Value>;

    /// `log r(to; from)`.
    fn log_density(&self, to: &Value, from: &Value) -> f64;

    fn name(&self) -> String;
}

/// Deterministic flip of a binary integer: `z' = 1 - z`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Flip;

impl Proposal for Flip {
    fn propose(&self, current: &Value, _rng: &mut dyn RngCore) -> Result<Value> {
        match current {
            Value::Int(0) => Ok(Value::Int(1)),
            Value::Int(1) => Ok(Value::Int(0)),
            other => Err(Error::contract(format!("flip proposal needs a binary integer, got {other}"))),
        }
    }

    fn log_density(&self, to: &Value, from: &Value) -> f64 {
        match (to, from) {
            (Value::Int(a), Value::Int(b)) if (*a == 0 || *a == 1) && a + b == 1 => 0.0,
            _ => f64::NEG_INFINITY,
        }
    }

    fn name(&self) -> String {
        "flip".into()
    }
}

/// Keeps the value and only regenerates the modules' internal choices;
/// for a module with a stochastic estimator this refreshes its weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct Refresh;

impl Proposal for Refresh {
    fn propose(&self, current: &Value, _rng: &mut dyn RngCore) -> Result<Value> {
        Ok(current.clone())
    }

    fn log_density(&self, to: &Value, from: &Value) -> f64 {
        if to == from {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn name(&self) -> String {
        "refresh".into()
    }
}

/// Independent uniform proposal over `0..size`; may propose the current value.
#[derive(Clone, Copy, Debug)]
pub struct DiscreteUniform {
    pub size: i64,
}

impl Proposal for DiscreteUniform {
    fn propose(&self, current: &Value, rng: &mut dyn RngCore) -> Result<Value> {
        if !matches!(current, Value::Int(_)) || self.size < 1 {
            return Err(Error::contract(format!("uniform proposal over 0..{} cannot move {current}", self.size)));
        }
        Ok(Value::Int(rng.random_range(0..self.size)))
    }

    fn log_density(&self, to: &Value, _from: &Value) -> f64 {
        match to {
            Value::Int(k) if (0..self.size).contains(k) => -(self.size as f64).ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    fn name(&self) -> String {
        format!("uniform(0..{})", self.size)
    }
}

/// Gaussian random walk on a real port.
#[derive(Clone, Copy, Debug)]
pub struct GaussianWalk {
    pub sd: f64,
}

impl Proposal for GaussianWalk {
    fn propose(&self, current: &Value, rng: &mut dyn RngCore) -> Result<Value> {
        let x = current
            .as_real()
            .ok_or_else(|| Error::contract(format!("gaussian walk needs a real value, got {current}")))?;
        let e: f64 = StandardNormal.sample(rng);
        Value::real(x + self.sd * e)
    }

    fn log_density(&self, to: &Value, from: &Value) -> f64 {
        match (to.as_real(), from.as_real()) {
            (Some(a), Some(b)) => math::normal_logpdf(a, b, self.sd),
            _ => f64::NEG_INFINITY,
        }
    }

    fn name(&self) -> String {
        format!("gaussian_walk({})", self.sd)
    }
}

/// A proposal targeting one output port of one unobserved node.
#[derive(Clone)]
pub struct SiteProposal {
    pub target: NodeId,
    pub port: usize,
    pub kernel: Arc<dyn Proposal>,
}

impl SiteProposal {
    pub fn new(net: &ModuleNetwork, node: &str, port: &str, kernel: Arc<dyn Proposal>) -> Result<Self> {
        let target = net.id_of(node).ok_or_else(|| Error::UnknownNode(node.to_owned()))?;
        if net.node(target).is_observed() {
            return Err(Error::contract(format!("cannot propose on observed node `{node}`")));
        }
        let port = net
            .node(target)
            .module()
            .output_schema()
            .index_of(port)
            .ok_or_else(|| Error::DanglingPort(format!("`{node}` has no output port `{port}`")))?;
        Ok(SiteProposal { target, port, kernel })
    }
}

/// Everything that enters one accept/reject comparison.
#[derive(Clone, Debug)]
pub struct AcceptanceDecision {
    /// `log r(z_i; z_i')`.
    pub log_reverse: f64,
    /// `log r(z_i'; z_i)`.
    pub log_forward: f64,
    /// `{i}` followed by `children(i)`.
    pub touched: Vec<NodeId>,
    pub previous: Vec<LogWeight>,
    pub proposed: Vec<LogWeight>,
}

impl AcceptanceDecision {
    /// Log acceptance ratio. Any impossible proposed weight gives `-inf`;
    /// an impossible current state with a possible proposal gives `+inf`.
    pub fn log_alpha(&self) -> f64 {
        if self.proposed.iter().any(|l| l.is_neg_infinite()) || self.log_reverse == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        if self.previous.iter().any(|l| l.is_neg_infinite()) {
            return f64::INFINITY;
        }
        let weights: f64 = self
            .proposed
            .iter()
            .zip(&self.previous)
            .fold(0.0, |acc, (new, old)| acc + (new.get() - old.get()));
        self.log_reverse - self.log_forward + weights
    }

    pub fn proposes_impossible(&self) -> bool {
        self.proposed.iter().any(|l| l.is_neg_infinite())
    }
}

#[derive(Clone, Debug)]
pub struct MhStep {
    pub accepted: bool,
    pub decision: AcceptanceDecision,
}

/// One single-site MH update of `prop.target`.
///
/// Randomness is consumed in a fixed order: the proposal, then each
/// regeneration in `touched` order, then one uniform for the accept test.
pub fn mh_update(net: &mut ModuleNetwork, prop: &SiteProposal, rng: &mut dyn RngCore) -> Result<MhStep> {
    let i = prop.target;
    if i >= net.len() {
        return Err(Error::UnknownNode(format!("#{i}")));
    }
    if net.node(i).is_observed() {
        return Err(Error::contract(format!("node `{}` is observed", net.node(i).name())));
    }
    let current = net.outputs(i)?.to_vec();
    let old_value = current
        .get(prop.port)
        .ok_or_else(|| Error::contract(format!("port {} out of range", prop.port)))?;
    let new_value = prop.kernel.propose(old_value, rng)?;
    let log_forward = prop.kernel.log_density(&new_value, old_value);
    let log_reverse = prop.kernel.log_density(old_value, &new_value);
    let mut proposed_outputs = current.clone();
    proposed_outputs[prop.port] = new_value;
    net.node(i).module().output_schema().check(&proposed_outputs, net.node(i).name())?;

    let mut touched = Vec::with_capacity(1 + net.children(i).len());
    touched.push(i);
    touched.extend_from_slice(net.children(i));

    let mut previous = Vec::with_capacity(touched.len());
    let mut proposed = Vec::with_capacity(touched.len());
    let mut fresh = Vec::with_capacity(touched.len());
    for &j in &touched {
        previous.push(net.lookup_log_weight(j)?);
        let inputs = net.gather_inputs(j, Some((i, &proposed_outputs)))?;
        let outputs = if j == i { proposed_outputs.as_slice() } else { net.outputs(j)? };
        let regen = net.node(j).module().regenerate(&inputs, outputs, rng)?;
        let stamp = net.next_stamp();
        proposed.push(regen.log_weight);
        fresh.push((regen.aux, stamp));
    }

    let decision = AcceptanceDecision { log_reverse, log_forward, touched, previous, proposed };
    let log_alpha = decision.log_alpha();
    let u: f64 = rng.random();
    let accepted = !decision.proposes_impossible() && u.ln() <= log_alpha;
    if accepted {
        let mut new_outputs = Some(proposed_outputs);
        for ((&j, &lw), (aux, stamp)) in decision.touched.iter().zip(&decision.proposed).zip(fresh) {
            let outputs = if j == i { new_outputs.take() } else { None };
            net.commit(j, outputs, lw, aux, stamp);
        }
    }
    Ok(MhStep { accepted, decision })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scan {
    /// Pick a site uniformly at random each iteration.
    #[default]
    Random,
    /// Visit sites in schedule order.
    Cyclic,
}

/// Network state after one MH iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub iteration: usize,
    /// Index into the schedule.
    pub site: usize,
    pub target: NodeId,
    pub accepted: bool,
    pub proposed_neg_inf: bool,
    /// Stored weight of every node, in node order.
    pub log_weights: Vec<f64>,
    pub total_log_weight: f64,
    /// Outputs of every unobserved node, in node order.
    pub values: Vec<Vec<Value>>,
}

pub trait RecordSink {
    fn record(&mut self, record: &ChainRecord) -> Result<()>;
}

impl RecordSink for Vec<ChainRecord> {
    fn record(&mut self, record: &ChainRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _record: &ChainRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SiteSummary {
    pub node: String,
    pub proposal: String,
    pub proposals: usize,
    pub accepted: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainSummary {
    pub iterations: usize,
    pub sites: Vec<SiteSummary>,
}

/// Run `n_iters` MH updates, streaming one record per iteration to `sink`.
pub fn run_chain(
    net: &mut ModuleNetwork,
    schedule: &[SiteProposal],
    n_iters: usize,
    scan: Scan,
    rng: &mut dyn RngCore,
    sink: &mut dyn RecordSink,
) -> Result<ChainSummary> {
    if schedule.is_empty() {
        return Err(Error::contract("empty proposal schedule"));
    }
    if let Some(p) = schedule.iter().find(|p| p.target >= net.len() || net.node(p.target).is_observed()) {
        return Err(Error::contract(format!("schedule targets observed or unknown node #{}", p.target)));
    }
    let mut sites: Vec<SiteSummary> = schedule
        .iter()
        .map(|p| SiteSummary {
            node: net.node(p.target).name().to_owned(),
            proposal: p.kernel.name(),
            proposals: 0,
            accepted: 0,
        })
        .collect();
    let unobserved = net.unobserved();
    for iteration in 0..n_iters {
        let site = match scan {
            Scan::Random => rng.random_range(0..schedule.len()),
            Scan::Cyclic => iteration % schedule.len(),
        };
        let step = mh_update(net, &schedule[site], rng)?;
        sites[site].proposals += 1;
        sites[site].accepted += usize::from(step.accepted);
        let log_weights: Vec<f64> = (0..net.len())
            .map(|j| net.lookup_log_weight(j).map(LogWeight::get))
            .collect::<Result<_>>()?;
        let total_log_weight = log_weights.iter().fold(0.0, |acc, l| acc + l);
        let values = unobserved
            .iter()
            .map(|&j| net.outputs(j).map(<[Value]>::to_vec))
            .collect::<Result<_>>()?;
        sink.record(&ChainRecord {
            iteration,
            site,
            target: schedule[site].target,
            accepted: step.accepted,
            proposed_neg_inf: step.decision.proposes_impossible(),
            log_weights,
            total_log_weight,
            values,
        })?;
    }
    Ok(ChainSummary { iterations: n_iters, sites })
}

#[derive(Clone, Debug, Serialize)]
pub struct AcceptanceStats {
    /// Acceptance rate per schedule site; `None` if the site was never proposed.
    pub site_rates: Vec<Option<f64>>,
    pub log_weight_mean: Vec<f64>,
    pub log_weight_variance: Vec<f64>,
    pub neg_inf_proposals: usize,
}

/// Per-site acceptance rates and per-node log-weight trace moments.
pub fn acceptance_stats(records: &[ChainRecord], n_sites: usize) -> Result<AcceptanceStats> {
    let first = records.first().ok_or_else(|| Error::contract("no chain records"))?;
    let mut proposals = vec![0usize; n_sites];
    let mut accepts = vec![0usize; n_sites];
    for r in records {
        if r.site >= n_sites {
            return Err(Error::contract(format!("record site {} out of range", r.site)));
        }
        proposals[r.site] += 1;
        accepts[r.site] += usize::from(r.accepted);
    }
    let n_nodes = first.log_weights.len();
    let mut mean = vec![0.0; n_nodes];
    let mut variance = vec![0.0; n_nodes];
    for j in 0..n_nodes {
        let (m, v) = mean_variance(records.iter().map(|r| r.log_weights[j]));
        mean[j] = m;
        variance[j] = v;
    }
    Ok(AcceptanceStats {
        site_rates: proposals
            .iter()
            .zip(&accepts)
            .map(|(&p, &a)| (p > 0).then(|| a as f64 / p as f64))
            .collect(),
        log_weight_mean: mean,
        log_weight_variance: variance,
        neg_inf_proposals: records.iter().filter(|r| r.proposed_neg_inf).count(),
    })
}

/// Welford mean and unbiased variance. Non-finite inputs propagate.
pub fn mean_variance(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, var)
}

/// Version tag of the trace CSV layout.
pub const TRACE_CSV_VERSION: &str = "modnet-trace-csv/1";

/// Streams records as CSV: `iteration, <value>..., lw_<node>..., total_lw,
/// accepted`. There is one value column per output port of every unobserved
/// node, named by the port alone when that is unambiguous and
/// `<node>.<port>` otherwise. Vector values are space-separated.
pub struct CsvTraceSink<W: Write> {
    writer: csv::Writer<W>,
}

/// Value column names for the unobserved nodes of `net`.
pub fn value_columns(net: &ModuleNetwork) -> Vec<String> {
    let ports: Vec<(String, String)> = net
        .unobserved()
        .into_iter()
        .flat_map(|j| {
            let node = net.node(j);
            node.module().output_schema().ports().iter().map(|p| (node.name().to_owned(), p.name.clone())).collect::<Vec<_>>()
        })
        .collect();
    ports
        .iter()
        .map(|(node, port)| {
            if ports.iter().filter(|(_, p)| p == port).count() == 1 {
                port.clone()
            } else {
                format!("{node}.{port}")
            }
        })
        .collect()
}

impl<W: Write> CsvTraceSink<W> {
    pub fn new(net: &ModuleNetwork, out: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_owned()];
        header.extend(value_columns(net));
        header.extend(net.nodes().iter().map(|n| format!("lw_{}", n.name())));
        header.push("total_lw".to_owned());
        header.push("accepted".to_owned());
        writer.write_record(&header)?;
        Ok(CsvTraceSink { writer })
    }

    pub fn finish(mut self) -> Result<W> {
        self.writer.flush()?;
        self.writer.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

impl<W: Write> RecordSink for CsvTraceSink<W> {
    fn record(&mut self, r: &ChainRecord) -> Result<()> {
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.values.iter().flatten().map(Value::to_string));
        row.extend(r.log_weights.iter().map(f64::to_string));
        row.push(r.total_log_weight.to_string());
        row.push(u8::from(r.accepted).to_string());
        self.writer.write_record(&row)?;
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for chain `index` under `master`:
/// `splitmix64(master ^ splitmix64(index))`.
pub fn chain_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}
