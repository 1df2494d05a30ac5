//! Learned stochastic inverses for small discrete models.
//!
//! A forward model is a list of discrete variables with conditional
//! probability tables. Its inverse regenerates the latents in reverse
//! topological order, each from a table `q(u_k | context)` estimated by
//! smoothed frequency counts over forward samples. Because the inverse
//! introduces no randomness beyond the latents themselves, the module
//! weight `log p(u, z; x) - log q(u; x, z)` is exactly computable.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::module::{AuxState, ProbModule, Regeneration, Simulation};
use crate::value::{LogWeight, PortSpec, Schema, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInput {
    pub name: String,
    pub arity: usize,
}

/// A variable with a conditional probability table.
///
/// `parents` index the combined node list: inputs first, then variables in
/// declaration order. A variable may only depend on earlier nodes. Rows of
/// `cpt` are indexed by the parent configuration in mixed radix, first
/// parent most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteVariable {
    pub name: String,
    pub arity: usize,
    pub parents: Vec<usize>,
    pub cpt: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModelSpec {
    #[serde(default)]
    pub inputs: Vec<DiscreteInput>,
    pub variables: Vec<DiscreteVariable>,
    /// Indices into `variables` exposed as module outputs; the rest are latent.
    pub outputs: Vec<usize>,
}

impl DiscreteModelSpec {
    pub fn validate(&self) -> Result<()> {
        let n_in = self.inputs.len();
        if self.inputs.iter().any(|i| i.arity == 0) {
            return Err(Error::Config("input with empty domain".into()));
        }
        for (v, var) in self.variables.iter().enumerate() {
            if var.arity == 0 {
                return Err(Error::Config(format!("variable `{}` has an empty domain", var.name)));
            }
            if let Some(p) = var.parents.iter().find(|&&p| p >= n_in + v) {
                return Err(Error::Config(format!("variable `{}` depends on later node {p}", var.name)));
            }
            let rows: usize = var.parents.iter().map(|&p| self.arity(p)).product();
            if var.cpt.len() != rows {
                return Err(Error::Config(format!("`{}` has {} CPT rows, expected {rows}", var.name, var.cpt.len())));
            }
            for row in &var.cpt {
                let sum: f64 = row.iter().sum();
                if row.len() != var.arity || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("`{}` has a CPT row that is not a distribution", var.name)));
                }
            }
        }
        let unique: BTreeSet<_> = self.outputs.iter().collect();
        if unique.len() != self.outputs.len() || self.outputs.iter().any(|&o| o >= self.variables.len()) {
            return Err(Error::Config("outputs must be distinct variable indices".into()));
        }
        if self.outputs.is_empty() {
            return Err(Error::Config("model has no outputs".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.inputs.len() + self.variables.len()
    }

    /// Domain size of combined node `node`.
    pub fn arity(&self, node: usize) -> usize {
        match node.checked_sub(self.inputs.len()) {
            None => self.inputs[node].arity,
            Some(v) => self.variables[v].arity,
        }
    }

    pub fn latents(&self) -> Vec<usize> {
        (0..self.variables.len()).filter(|v| !self.outputs.contains(v)).collect()
    }

    fn parents_of(&self, node: usize) -> &[usize] {
        match node.checked_sub(self.inputs.len()) {
            None => &[],
            Some(v) => &self.variables[v].parents,
        }
    }

    fn row_index(&self, nodes: &[usize], values: &[usize]) -> usize {
        nodes.iter().fold(0, |idx, &n| idx * self.arity(n) + values[n])
    }

    /// `log prod_v p(v | parents(v))` for a full assignment of combined nodes.
    pub fn log_joint(&self, values: &[usize]) -> f64 {
        let n_in = self.inputs.len();
        self.variables
            .iter()
            .enumerate()
            .map(|(v, var)| var.cpt[self.row_index(&var.parents, values)][values[n_in + v]].ln())
            .sum()
    }

    /// Forward-sample all variables given input values.
    pub fn sample(&self, inputs: &[usize], rng: &mut dyn RngCore) -> Vec<usize> {
        let mut values = inputs.to_vec();
        values.reserve(self.variables.len());
        for var in &self.variables {
            let row = self.row_index(&var.parents, &values);
            values.push(math::sample_categorical(&var.cpt[row], rng));
        }
        values
    }
}

/// How much of the already-regenerated set each inverse factor conditions on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseStructure {
    /// The smallest subset that makes the latent independent of the rest
    /// of the already-regenerated set under the forward model.
    #[default]
    Minimal,
    /// Everything already regenerated: inputs, outputs, later latents.
    Full,
}

/// One learned conditional `q(target | context)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseFactor {
    /// Variable index of the regenerated latent.
    pub target: usize,
    /// Combined node indices conditioned on, ascending.
    pub context: Vec<usize>,
    /// Rows indexed by the context configuration (mixed radix).
    pub table: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseNetwork {
    pub structure: InverseStructure,
    /// Factors in regeneration order (reverse topological order of latents).
    pub factors: Vec<InverseFactor>,
    pub training_samples: usize,
    pub smoothing: f64,
}

/// Conditioning sets of the inverse factors, in regeneration order.
pub fn inverse_contexts(spec: &DiscreteModelSpec, structure: InverseStructure) -> Vec<(usize, Vec<usize>)> {
    let n_in = spec.inputs.len();
    let mut available: BTreeSet<usize> = (0..n_in).collect();
    available.extend(spec.outputs.iter().map(|&o| n_in + o));
    let mut out = Vec::new();
    for latent in spec.latents().into_iter().rev() {
        let context = match structure {
            InverseStructure::Full => available.iter().copied().collect(),
            InverseStructure::Minimal => separating_subset(spec, n_in + latent, &available),
        };
        out.push((latent, context));
        available.insert(n_in + latent);
    }
    out
}

/// Nodes of `given` adjacent to the component of `target` in the moral
/// graph of the ancestral closure of `{target} + given`, after removing
/// `given`. Conditioning on them d-separates `target` from the rest of `given`.
fn separating_subset(spec: &DiscreteModelSpec, target: usize, given: &BTreeSet<usize>) -> Vec<usize> {
    let n = spec.node_count();
    let mut ancestral = vec![false; n];
    let mut stack: Vec<usize> = given.iter().copied().chain(std::iter::once(target)).collect();
    while let Some(v) = stack.pop() {
        if !ancestral[v] {
            ancestral[v] = true;
            stack.extend_from_slice(spec.parents_of(v));
        }
    }
    let mut adjacent = vec![BTreeSet::new(); n];
    for v in (0..n).filter(|&v| ancestral[v]) {
        let parents = spec.parents_of(v);
        for (i, &p) in parents.iter().enumerate() {
            adjacent[v].insert(p);
            adjacent[p].insert(v);
            for &q in &parents[i + 1..] {
                adjacent[p].insert(q);
                adjacent[q].insert(p);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut boundary = BTreeSet::new();
    let mut queue = VecDeque::from([target]);
    seen[target] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adjacent[v] {
            if seen[w] {
                continue;
            }
            seen[w] = true;
            if given.contains(&w) {
                boundary.insert(w);
            } else {
                queue.push_back(w);
            }
        }
    }
    boundary.into_iter().collect()
}

/// Estimate inverse tables from `n_samples` forward samples with additive
/// smoothing `smoothing`. Inputs, if any, are drawn uniformly.
pub fn train_inverse(
    spec: &DiscreteModelSpec,
    n_samples: usize,
    smoothing: f64,
    structure: InverseStructure,
    rng: &mut dyn RngCore,
) -> Result<InverseNetwork> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("inverse training needs at least one sample".into()));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!("smoothing must be positive, got {smoothing}")));
    }
    let n_in = spec.inputs.len();
    let contexts = inverse_contexts(spec, structure);
    let mut counts: Vec<Vec<Vec<u64>>> = contexts
        .iter()
        .map(|(target, ctx)| {
            let rows: usize = ctx.iter().map(|&c| spec.arity(c)).product();
            vec![vec![0; spec.variables[*target].arity]; rows]
        })
        .collect();
    let mut inputs = vec![0usize; n_in];
    for _ in 0..n_samples {
        for (slot, input) in inputs.iter_mut().zip(&spec.inputs) {
            *slot = rng.random_range(0..input.arity);
        }
        let values = spec.sample(&inputs, rng);
        for ((target, ctx), table) in contexts.iter().zip(counts.iter_mut()) {
            table[spec.row_index(ctx, &values)][values[n_in + target]] += 1;
        }
    }
    let factors = contexts
        .into_iter()
        .zip(counts)
        .map(|((target, context), rows)| InverseFactor {
            target,
            context,
            table: rows
                .into_iter()
                .map(|row| {
                    let total = row.iter().sum::<u64>() as f64 + smoothing * row.len() as f64;
                    row.into_iter().map(|c| (c as f64 + smoothing) / total).collect()
                })
                .collect(),
        })
        .collect();
    Ok(InverseNetwork { structure, factors, training_samples: n_samples, smoothing })
}

impl InverseNetwork {
    /// Build an inverse from explicit tables (for example exact conditionals),
    /// one per factor in regeneration order.
    pub fn from_tables(spec: &DiscreteModelSpec, structure: InverseStructure, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        spec.validate()?;
        let contexts = inverse_contexts(spec, structure);
        if tables.len() != contexts.len() {
            return Err(Error::Config(format!("expected {} inverse tables, got {}", contexts.len(), tables.len())));
        }
        let factors = contexts
            .into_iter()
            .zip(tables)
            .map(|((target, context), table)| InverseFactor { target, context, table })
            .collect();
        let inverse = InverseNetwork { structure, factors, training_samples: 0, smoothing: 0.0 };
        inverse.validate(spec)?;
        Ok(inverse)
    }

    /// Shapes match `spec` and every row is a distribution.
    pub fn validate(&self, spec: &DiscreteModelSpec) -> Result<()> {
        let expected = inverse_contexts(spec, self.structure);
        if expected.len() != self.factors.len() {
            return Err(Error::Config("inverse does not match model latents".into()));
        }
        for ((target, context), f) in expected.iter().zip(&self.factors) {
            let rows: usize = context.iter().map(|&c| spec.arity(c)).product();
            if f.target != *target || &f.context != context || f.table.len() != rows {
                return Err(Error::Config(format!("inverse factor for variable {} has the wrong shape", f.target)));
            }
            for row in &f.table {
                let sum: f64 = row.iter().sum();
                if row.len() != spec.variables[*target].arity || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("inverse row for variable {} is not a distribution", f.target)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Latent assignment produced by an inverse module call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InverseTrace {
    /// Values of every variable (latents and outputs), in declaration order.
    pub values: Vec<usize>,
}

/// A discrete model regenerated by a learned stochastic inverse.
pub struct InverseModule {
    spec: DiscreteModelSpec,
    inverse: InverseNetwork,
    inputs: Schema,
    outputs: Schema,
}

pub fn make_inverse_module(spec: DiscreteModelSpec, inverse: InverseNetwork) -> Result<InverseModule> {
    spec.validate()?;
    inverse.validate(&spec)?;
    let inputs = Schema::new(spec.inputs.iter().map(|i| PortSpec::int(&i.name)).collect());
    let outputs = Schema::new(spec.outputs.iter().map(|&o| PortSpec::int(&spec.variables[o].name)).collect());
    Ok(InverseModule { spec, inverse, inputs, outputs })
}

impl InverseModule {
    pub fn spec(&self) -> &DiscreteModelSpec {
        &self.spec
    }

    pub fn inverse(&self) -> &InverseNetwork {
        &self.inverse
    }

    /// Place inputs and outputs into a combined value vector; `None` if any
    /// value lies outside its domain.
    fn observed_values(&self, inputs: &[Value], outputs: &[Value]) -> Option<Vec<usize>> {
        let n_in = self.spec.inputs.len();
        let mut values = vec![0usize; self.spec.node_count()];
        for (i, v) in inputs.iter().enumerate() {
            values[i] = domain_value(v, self.spec.arity(i))?;
        }
        for (&o, v) in self.spec.outputs.iter().zip(outputs) {
            values[n_in + o] = domain_value(v, self.spec.variables[o].arity)?;
        }
        Some(values)
    }

    /// `log q(u; x, z)` of the latents in `values`, optionally sampling them first.
    fn run_inverse(&self, values: &mut [usize], mut rng: Option<&mut dyn RngCore>) -> f64 {
        let n_in = self.spec.inputs.len();
        let mut log_q = 0.0;
        for f in &self.inverse.factors {
            let row = &f.table[self.spec.row_index(&f.context, values)];
            if let Some(rng) = rng.as_deref_mut() {
                values[n_in + f.target] = math::sample_categorical(row, rng);
            }
            log_q += row[values[n_in + f.target]].ln();
        }
        log_q
    }

    fn trace(&self, values: &[usize]) -> AuxState {
        AuxState::new(InverseTrace { values: values[self.spec.inputs.len()..].to_vec() })
    }
}

fn domain_value(v: &Value, arity: usize) -> Option<usize> {
    let k = v.as_int()?;
    (k >= 0 && (k as usize) < arity).then_some(k as usize)
}

impl ProbModule for InverseModule {
    fn input_schema(&self) -> &Schema {
        &self.inputs
    }

    fn output_schema(&self) -> &Schema {
        &self.outputs
    }

    fn simulate(&self, inputs: &[Value], rng: &mut dyn RngCore) -> Result<Simulation> {
        self.inputs.check(inputs, "inverse module inputs")?;
        let given = self
            .observed_values(inputs, &[])
            .ok_or_else(|| Error::contract("inverse module input outside its domain"))?;
        let mut values = self.spec.sample(&given[..self.spec.inputs.len()], rng);
        let log_p = self.spec.log_joint(&values);
        let log_q = self.run_inverse(&mut values, None);
        let n_in = self.spec.inputs.len();
        let outputs = self.spec.outputs.iter().map(|&o| Value::Int(values[n_in + o] as i64)).collect();
        Ok(Simulation { outputs, log_weight: LogWeight::saturating(log_p - log_q), aux: self.trace(&values) })
    }

    fn regenerate(&self, inputs: &[Value], outputs: &[Value], rng: &mut dyn RngCore) -> Result<Regeneration> {
        self.inputs.check(inputs, "inverse module inputs")?;
        self.outputs.check(outputs, "inverse module outputs")?;
        let Some(mut values) = self.observed_values(inputs, outputs) else {
            return Ok(Regeneration { log_weight: LogWeight::NEG_INFINITY, aux: AuxState::empty() });
        };
        let log_q = self.run_inverse(&mut values, Some(rng));
        let log_p = self.spec.log_joint(&values);
        let log_weight = if log_p == f64::NEG_INFINITY { LogWeight::NEG_INFINITY } else { LogWeight::saturating(log_p - log_q) };
        Ok(Regeneration { log_weight, aux: self.trace(&values) })
    }

    fn describe(&self) -> String {
        format!("stochastic_inverse(n={})", self.inverse.training_samples)
    }
}
