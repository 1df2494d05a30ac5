//! Module networks: DAGs of modules with Bayesian-network semantics over
//! module outputs, plus the per-node log-weight store used by MH.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::module::{AuxState, SharedModule};
use crate::value::{LogWeight, Value};

pub type NodeId = usize;

/// Default number of full re-initializations tried when an observed node
/// regenerates to a `-inf` weight.
pub const DEFAULT_INIT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Binding {
    src: NodeId,
    src_port: usize,
}

/// The stored `(z, l, u)` triple of a node. `stamp` is the sequence number
/// of the module call that produced `log_weight` and `aux`.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub outputs: Vec<Value>,
    pub log_weight: LogWeight,
    pub aux: AuxState,
    pub stamp: u64,
}

#[derive(Clone)]
pub struct ModuleNode {
    name: String,
    module: SharedModule,
    bindings: Vec<Binding>,
    observed: Option<Vec<Value>>,
    state: Option<NodeState>,
}

impl ModuleNode {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn module(&self) -> &SharedModule {
        &self.module
    }

    pub fn is_observed(&self) -> bool {
        self.observed.is_some()
    }

    pub fn state(&self) -> Option<&NodeState> {
        self.state.as_ref()
    }

    /// Parent node ids in input-port order (repeats allowed).
    pub fn parents(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.bindings.iter().map(|b| b.src)
    }
}

#[derive(Clone)]
pub struct ModuleNetwork {
    nodes: Vec<ModuleNode>,
    order: Vec<NodeId>,
    children: Vec<Vec<NodeId>>,
    calls: u64,
    init_retries: usize,
}

impl std::fmt::Debug for ModuleNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.order.iter().map(|&id| self.nodes[id].name()).collect();
        f.debug_struct("ModuleNetwork").field("order", &names).field("initialized", &self.is_initialized()).finish()
    }
}

/// Incrementally describes a network; `build` validates it.
#[derive(Default)]
pub struct NetworkBuilder {
    nodes: Vec<(String, SharedModule)>,
    edges: Vec<(String, String, String, String)>,
    observations: Vec<(String, ObservedValues)>,
}

enum ObservedValues {
    Ordered(Vec<Value>),
    Named(BTreeMap<String, Value>),
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(mut self, name: &str, module: SharedModule) -> Self {
        self.nodes.push((name.to_owned(), module));
        self
    }

    /// Bind output port `src_port` of `src` to input port `dst_port` of `dst`.
    pub fn edge(mut self, src: &str, src_port: &str, dst: &str, dst_port: &str) -> Self {
        self.edges
            .push((src.to_owned(), src_port.to_owned(), dst.to_owned(), dst_port.to_owned()));
        self
    }

    /// Constrain all outputs of `node`, in output-schema order.
    pub fn observe(mut self, node: &str, outputs: Vec<Value>) -> Self {
        self.observations.push((node.to_owned(), ObservedValues::Ordered(outputs)));
        self
    }

    /// Constrain outputs of `node` by port name; every port must be given.
    pub fn observe_named(mut self, node: &str, outputs: BTreeMap<String, Value>) -> Self {
        self.observations.push((node.to_owned(), ObservedValues::Named(outputs)));
        self
    }

    pub fn build(self) -> Result<ModuleNetwork> {
        let mut ids = BTreeMap::new();
        for (i, (name, _)) in self.nodes.iter().enumerate() {
            if ids.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate node name `{name}`")));
            }
        }
        let lookup = |name: &str| ids.get(name).copied().ok_or_else(|| Error::UnknownNode(name.to_owned()));

        let mut bindings: Vec<Vec<Option<Binding>>> = self
            .nodes
            .iter()
            .map(|(_, m)| vec![None; m.input_schema().len()])
            .collect();
        for (src, src_port, dst, dst_port) in &self.edges {
            let (s, d) = (lookup(src)?, lookup(dst)?);
            let src_schema = self.nodes[s].1.output_schema();
            let dst_schema = self.nodes[d].1.input_schema();
            let sp = src_schema
                .index_of(src_port)
                .ok_or_else(|| Error::DanglingPort(format!("`{src}` has no output port `{src_port}`")))?;
            let dp = dst_schema
                .index_of(dst_port)
                .ok_or_else(|| Error::DanglingPort(format!("`{dst}` has no input port `{dst_port}`")))?;
            let (sk, dk) = (&src_schema.ports()[sp], &dst_schema.ports()[dp]);
            if sk.kind != dk.kind || (sk.len.is_some() && dk.len.is_some() && sk.len != dk.len) {
                return Err(Error::Config(format!(
                    "edge {src}.{src_port} -> {dst}.{dst_port} joins incompatible ports"
                )));
            }
            let slot = &mut bindings[d][dp];
            if slot.is_some() {
                return Err(Error::DanglingPort(format!("input `{dst}.{dst_port}` is bound twice")));
            }
            *slot = Some(Binding { src: s, src_port: sp });
        }

        let mut observed: Vec<Option<Vec<Value>>> = vec![None; self.nodes.len()];
        for (name, values) in self.observations {
            let i = lookup(&name)?;
            let schema = self.nodes[i].1.output_schema();
            let values = match values {
                ObservedValues::Ordered(v) => v,
                ObservedValues::Named(mut map) => {
                    let mut v = Vec::with_capacity(schema.len());
                    for port in schema.ports() {
                        v.push(map.remove(&port.name).ok_or_else(|| {
                            Error::Config(format!("observation of `{name}` is missing port `{}`", port.name))
                        })?);
                    }
                    if let Some(extra) = map.keys().next() {
                        return Err(Error::DanglingPort(format!("`{name}` has no output port `{extra}`")));
                    }
                    v
                }
            };
            schema.check(&values, &format!("observation of `{name}`"))?;
            observed[i] = Some(values);
        }

        let mut nodes = Vec::with_capacity(self.nodes.len());
        for ((name, module), (b, obs)) in self.nodes.into_iter().zip(bindings.into_iter().zip(observed)) {
            let mut resolved = Vec::with_capacity(b.len());
            for (port, binding) in module.input_schema().ports().iter().zip(b) {
                resolved.push(binding.ok_or_else(|| {
                    Error::DanglingPort(format!("input `{name}.{}` is not bound", port.name))
                })?);
            }
            nodes.push(ModuleNode { name, module, bindings: resolved, observed: obs, state: None });
        }

        if nodes.is_empty() {
            return Err(Error::Config("network has no nodes".into()));
        }
        if nodes.iter().all(|n| n.observed.is_some()) {
            return Err(Error::Config("every node is observed; nothing to infer".into()));
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for (j, node) in nodes.iter().enumerate() {
            for b in &node.bindings {
                if !children[b.src].contains(&j) {
                    children[b.src].push(j);
                }
            }
        }
        let order = topological_order(&nodes, &children)?;
        Ok(ModuleNetwork { nodes, order, children, calls: 0, init_retries: DEFAULT_INIT_RETRIES })
    }
}

/// Kahn's algorithm, always releasing the lowest-numbered ready node so the
/// order is deterministic.
fn topological_order(nodes: &[ModuleNode], children: &[Vec<NodeId>]) -> Result<Vec<NodeId>> {
    let mut indegree: Vec<usize> = nodes
        .iter()
        .map(|n| {
            let mut parents: Vec<NodeId> = n.parents().collect();
            parents.sort_unstable();
            parents.dedup();
            parents.len()
        })
        .collect();
    let mut ready: std::collections::BTreeSet<NodeId> =
        (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| !order.contains(i)).unwrap_or(0);
        return Err(Error::Cycle(nodes[stuck].name.clone()));
    }
    Ok(order)
}

impl ModuleNetwork {
    pub fn builder() -> NetworkBuilder {
        NetworkBuilder::new()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ModuleNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ModuleNode] {
        &self.nodes
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn topological_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn observed_set(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_observed()).collect()
    }

    pub fn unobserved(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].is_observed()).collect()
    }

    pub fn set_init_retries(&mut self, retries: usize) {
        self.init_retries = retries.max(1);
    }

    /// Number of module calls whose results have been stored or discarded so far.
    pub fn call_count(&self) -> u64 {
        self.calls
    }

    pub(crate) fn next_stamp(&mut self) -> u64 {
        self.calls += 1;
        self.calls
    }

    pub fn is_initialized(&self) -> bool {
        self.nodes.iter().all(|n| n.state.is_some())
    }

    fn state_of(&self, id: NodeId) -> Result<&NodeState> {
        let node = self.nodes.get(id).ok_or_else(|| Error::UnknownNode(format!("#{id}")))?;
        node.state.as_ref().ok_or_else(|| Error::Uninitialized(node.name.clone()))
    }

    pub fn outputs(&self, id: NodeId) -> Result<&[Value]> {
        Ok(&self.state_of(id)?.outputs)
    }

    /// Assemble the inputs of `id` from its parents' current outputs,
    /// optionally pretending node `replaced.0` outputs `replaced.1`.
    pub fn gather_inputs(&self, id: NodeId, replaced: Option<(NodeId, &[Value])>) -> Result<Vec<Value>> {
        self.nodes[id]
            .bindings
            .iter()
            .map(|b| {
                let outputs = match replaced {
                    Some((r, values)) if r == b.src => values,
                    _ => self.outputs(b.src)?,
                };
                Ok(outputs[b.src_port].clone())
            })
            .collect()
    }

    /// Populate every node in topological order: `simulate` for unobserved
    /// nodes, `regenerate` at the constraint for observed ones. If an
    /// observed node comes back with a `-inf` weight the whole pass is
    /// repeated, up to the configured retry budget.
    pub fn initialize(&mut self, rng: &mut dyn RngCore) -> Result<()> {
        for attempt in 0..self.init_retries {
            for node in &mut self.nodes {
                node.state = None;
            }
            let mut impossible = None;
            for idx in 0..self.order.len() {
                let id = self.order[idx];
                let inputs = self.gather_inputs(id, None)?;
                let node = &self.nodes[id];
                let state = match &node.observed {
                    Some(z) => {
                        let r = node.module.regenerate(&inputs, z, rng)?;
                        if r.log_weight.is_neg_infinite() {
                            impossible = Some(node.name.clone());
                        }
                        NodeState { outputs: z.clone(), log_weight: r.log_weight, aux: r.aux, stamp: 0 }
                    }
                    None => {
                        let s = node.module.simulate(&inputs, rng)?;
                        node.module.output_schema().check(&s.outputs, &node.name)?;
                        NodeState { outputs: s.outputs, log_weight: s.log_weight, aux: s.aux, stamp: 0 }
                    }
                };
                let stamp = self.next_stamp();
                self.nodes[id].state = Some(NodeState { stamp, ..state });
                if impossible.is_some() {
                    break;
                }
            }
            match impossible {
                None => return Ok(()),
                Some(name) => log::debug!("initialization attempt {attempt}: `{name}` has zero weight"),
            }
        }
        for node in &mut self.nodes {
            node.state = None;
        }
        Err(Error::DegenerateTrace(format!(
            "an observed node had zero weight in all {} initialization attempts",
            self.init_retries
        )))
    }

    pub fn lookup_log_weight(&self, id: NodeId) -> Result<LogWeight> {
        Ok(self.state_of(id)?.log_weight)
    }

    /// Overwrite the stored weight of `id` together with the auxiliary
    /// state produced by the same call.
    pub fn update_log_weight(&mut self, id: NodeId, log_weight: LogWeight, aux: AuxState) -> Result<()> {
        self.state_of(id)?;
        let stamp = self.next_stamp();
        let state = self.nodes[id].state.as_mut().expect("checked above");
        state.log_weight = log_weight;
        state.aux = aux;
        state.stamp = stamp;
        Ok(())
    }

    /// Commit a full `(z, l, u)` triple; used by MH on acceptance.
    pub(crate) fn commit(&mut self, id: NodeId, outputs: Option<Vec<Value>>, log_weight: LogWeight, aux: AuxState, stamp: u64) {
        let node = &mut self.nodes[id];
        debug_assert!(outputs.is_none() || node.observed.is_none(), "observed outputs never change");
        let state = node.state.as_mut().expect("committing to an initialized node");
        if let Some(z) = outputs {
            state.outputs = z;
        }
        state.log_weight = log_weight;
        state.aux = aux;
        state.stamp = stamp;
    }

    pub fn total_log_weight(&self) -> Result<LogWeight> {
        (0..self.nodes.len()).map(|i| self.lookup_log_weight(i)).sum()
    }

    /// True when every node's outputs, weight bits, stamp and auxiliary
    /// payload match `other`.
    pub fn same_state(&self, other: &ModuleNetwork) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| match (&a.state, &b.state) {
                (None, None) => true,
                (Some(x), Some(y)) => {
                    x.outputs == y.outputs
                        && x.log_weight.get().to_bits() == y.log_weight.get().to_bits()
                        && x.stamp == y.stamp
                        && x.aux.same_as(&y.aux)
                }
                _ => false,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact;
    use crate::module::ProbModule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cpt() -> SharedModule {
        Arc::new(exact::discrete_cpt(&[("p", 2)], vec![vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap())
    }

    #[test]
    fn two_node_topology() {
        let net = ModuleNetwork::builder()
            .node("B", cpt())
            .node("A", Arc::new(exact::bernoulli(0.4)))
            .edge("A", "z", "B", "p")
            .observe("B", vec![Value::Int(1)])
            .build()
            .unwrap();
        let (a, b) = (net.id_of("A").unwrap(), net.id_of("B").unwrap());
        assert_eq!(net.topological_order(), &[a, b]);
        assert_eq!(net.children(a), &[b]);
        assert_eq!(net.observed_set(), vec![b]);
    }

    #[test]
    fn singleton() {
        let net = ModuleNetwork::builder().node("x", Arc::new(exact::bernoulli(0.4))).build().unwrap();
        assert_eq!(net.topological_order(), &[0]);
        assert!(net.children(0).is_empty());
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = ModuleNetwork::builder()
            .node("A", cpt())
            .node("B", cpt())
            .edge("A", "z", "B", "p")
            .edge("B", "z", "A", "p")
            .build()
            .err()
            .unwrap();
        assert!(matches!(err, Error::Cycle(_)));
    }

    #[test]
    fn build_errors() {
        let dangling = ModuleNetwork::builder().node("B", cpt()).build();
        assert!(matches!(dangling, Err(Error::DanglingPort(_))));
        let bad_port = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.5)))
            .node("B", cpt())
            .edge("A", "nope", "B", "p")
            .build();
        assert!(matches!(bad_port, Err(Error::DanglingPort(_))));
        let missing = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.5)))
            .observe("C", vec![Value::Int(1)])
            .build();
        assert!(matches!(missing, Err(Error::UnknownNode(_))));
        let all_observed = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.5)))
            .observe("A", vec![Value::Int(1)])
            .build();
        assert!(matches!(all_observed, Err(Error::Config(_))));
    }

    #[test]
    fn fan_out_to_two_ports_of_one_child() {
        let child: SharedModule =
            Arc::new(exact::discrete_cpt(&[("p", 2), ("q", 2)], vec![vec![0.5, 0.5]; 4]).unwrap());
        let net = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.5)))
            .node("C", child)
            .edge("A", "z", "C", "p")
            .edge("A", "z", "C", "q")
            .build()
            .unwrap();
        assert_eq!(net.children(0), &[1]);
    }

    #[test]
    fn initialize_populates_and_stores_weights() {
        let mut net = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.4)))
            .node("B", cpt())
            .edge("A", "z", "B", "p")
            .observe("B", vec![Value::Int(1)])
            .build()
            .unwrap();
        assert!(matches!(net.lookup_log_weight(0), Err(Error::Uninitialized(_))));
        net.initialize(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = net.outputs(0).unwrap()[0].as_int().unwrap();
        let la = net.lookup_log_weight(0).unwrap().get();
        let lb = net.lookup_log_weight(1).unwrap().get();
        assert_eq!(la, if a == 1 { 0.4f64.ln() } else { (1.0 - 0.4f64).ln() });
        assert_eq!(lb, if a == 1 { 0.7f64.ln() } else { 0.1f64.ln() });
        assert_eq!(net.total_log_weight().unwrap().get(), la + lb);
        assert_eq!(net.gather_inputs(1, None).unwrap(), vec![Value::Int(a)]);
        assert!(net.node(0).state().unwrap().stamp < net.node(1).state().unwrap().stamp);

        net.update_log_weight(1, LogWeight::new(-2.5).unwrap(), AuxState::empty()).unwrap();
        assert_eq!(net.lookup_log_weight(1).unwrap().get(), -2.5);
    }

    #[test]
    fn observation_outside_support_exhausts_retries() {
        let mut net = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.4)))
            .node("B", cpt())
            .edge("A", "z", "B", "p")
            .observe("B", vec![Value::Int(5)])
            .build()
            .unwrap();
        net.set_init_retries(3);
        let err = net.initialize(&mut ChaCha8Rng::seed_from_u64(1)).err().unwrap();
        assert!(matches!(err, Error::DegenerateTrace(_)));
        assert!(!net.is_initialized());
    }

    #[test]
    fn retries_recover_from_discrete_impossibility() {
        // B is only possible when A = 1, which has probability 0.2.
        let child: SharedModule =
            Arc::new(exact::discrete_cpt(&[("p", 2)], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let mut net = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.2)))
            .node("B", child)
            .edge("A", "z", "B", "p")
            .observe("B", vec![Value::Int(1)])
            .build()
            .unwrap();
        net.initialize(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(net.outputs(0).unwrap(), &[Value::Int(1)]);
        assert_eq!(net.lookup_log_weight(1).unwrap().get(), 0.0);
    }

    #[test]
    fn any_neg_infinite_weight_makes_total_neg_infinite() {
        let mut net = ModuleNetwork::builder()
            .node("A", Arc::new(exact::bernoulli(0.4)))
            .node("B", Arc::new(exact::normal(0.0, 1.0)))
            .build()
            .unwrap();
        net.initialize(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(net.total_log_weight().unwrap().get().is_finite());
        net.update_log_weight(1, LogWeight::NEG_INFINITY, AuxState::empty()).unwrap();
        assert!(net.total_log_weight().unwrap().is_neg_infinite());
    }

    #[test]
    fn modules_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync + ?Sized>() {}
        assert_send_sync::<dyn ProbModule>();
        assert_send_sync::<ModuleNetwork>();
    }
}
