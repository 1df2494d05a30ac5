//! Adapter from a sampler plus exact log-density to the module contract,
//! and a handful of elementary distributions built on it.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::module::{AuxState, ProbModule, Regeneration, Simulation};
use crate::value::{LogWeight, PortSpec, Schema, Value};

type Sampler = Box<dyn Fn(&[Value], &mut dyn RngCore) -> Vec<Value> + Send + Sync>;
type Density = Box<dyn Fn(&[Value], &[Value]) -> f64 + Send + Sync>;

/// A module with no auxiliary variables. `regenerate` is deterministic and
/// returns `log p(z; x)`; `simulate` reports the same density at its sample.
pub struct ExactModule {
    name: String,
    inputs: Schema,
    outputs: Schema,
    sampler: Sampler,
    density: Density,
}

/// Wrap a sampler and an exact log-density evaluator as a module.
pub fn wrap_exact<S, D>(name: &str, inputs: Schema, outputs: Schema, sampler: S, density: D) -> ExactModule
where
    S: Fn(&[Value], &mut dyn RngCore) -> Vec<Value> + Send + Sync + 'static,
    D: Fn(&[Value], &[Value]) -> f64 + Send + Sync + 'static,
{
    ExactModule {
        name: name.to_owned(),
        inputs,
        outputs,
        sampler: Box::new(sampler),
        density: Box::new(density),
    }
}

impl ExactModule {
    pub fn log_density(&self, inputs: &[Value], outputs: &[Value]) -> Result<LogWeight> {
        self.inputs.check(inputs, &self.name)?;
        self.outputs.check(outputs, &self.name)?;
        Ok(LogWeight::saturating((self.density)(inputs, outputs)))
    }
}

impl ProbModule for ExactModule {
    fn input_schema(&self) -> &Schema {
        &self.inputs
    }

    fn output_schema(&self) -> &Schema {
        &self.outputs
    }

    fn simulate(&self, inputs: &[Value], rng: &mut dyn RngCore) -> Result<Simulation> {
        self.inputs.check(inputs, &self.name)?;
        let outputs = (self.sampler)(inputs, rng);
        self.outputs.check(&outputs, &self.name)?;
        let log_weight = LogWeight::saturating((self.density)(inputs, &outputs));
        Ok(Simulation { outputs, log_weight, aux: AuxState::empty() })
    }

    fn regenerate(&self, inputs: &[Value], outputs: &[Value], _rng: &mut dyn RngCore) -> Result<Regeneration> {
        Ok(Regeneration { log_weight: self.log_density(inputs, outputs)?, aux: AuxState::empty() })
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// `z ~ Bernoulli(p)` on output port `z`.
pub fn bernoulli(p: f64) -> ExactModule {
    categorical(vec![1.0 - p, p])
}

/// `z ~ Categorical(probs)` on output port `z`, values `0..probs.len()`.
pub fn categorical(probs: Vec<f64>) -> ExactModule {
    let name = format!("categorical{probs:?}");
    let sample_probs = probs.clone();
    wrap_exact(
        &name,
        Schema::empty(),
        Schema::new(vec![PortSpec::int("z")]),
        move |_, rng| vec![Value::Int(math::sample_categorical(&sample_probs, rng) as i64)],
        move |_, z| match z[0] {
            Value::Int(k) if k >= 0 && (k as usize) < probs.len() => probs[k as usize].ln(),
            _ => f64::NEG_INFINITY,
        },
    )
}

/// `z ~ Normal(mean, sd)` on output port `z`.
pub fn normal(mean: f64, sd: f64) -> ExactModule {
    wrap_exact(
        &format!("normal({mean}, {sd})"),
        Schema::empty(),
        Schema::new(vec![PortSpec::real("z")]),
        move |_, rng| {
            let e: f64 = StandardNormal.sample(rng);
            vec![Value::Real(mean + sd * e)]
        },
        move |_, z| math::normal_logpdf(z[0].as_real().unwrap_or(f64::NAN), mean, sd),
    )
}

/// Discrete conditional probability table over integer parents.
///
/// Parents are input ports named by `parents`, each with the given arity.
/// Rows of `table` are indexed by the parent configuration in mixed radix
/// with the first parent most significant; each row is a distribution over
/// the `z` output.
pub fn discrete_cpt(parents: &[(&str, usize)], table: Vec<Vec<f64>>) -> Result<ExactModule> {
    let rows: usize = parents.iter().map(|(_, a)| *a).product();
    if table.len() != rows {
        return Err(Error::Config(format!("CPT has {} rows, expected {rows}", table.len())));
    }
    let arity = table.first().map_or(0, Vec::len);
    for row in &table {
        let sum: f64 = row.iter().sum();
        if row.len() != arity || (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("CPT row {row:?} is not a distribution")));
        }
    }
    let arities: Vec<usize> = parents.iter().map(|(_, a)| *a).collect();
    let inputs = Schema::new(parents.iter().map(|(n, _)| PortSpec::int(n)).collect());
    let row_of = move |x: &[Value]| -> Option<usize> {
        let mut idx = 0usize;
        for (v, &a) in x.iter().zip(&arities) {
            let k = v.as_int()?;
            if k < 0 || k as usize >= a {
                return None;
            }
            idx = idx * a + k as usize;
        }
        Some(idx)
    };
    let row_of_density = row_of.clone();
    let sample_table = table.clone();
    Ok(wrap_exact(
        "discrete_cpt",
        inputs,
        Schema::new(vec![PortSpec::int("z")]),
        move |x, rng| {
            // Out-of-range parents give an impossible trace; sample row 0 so
            // the density side reports -inf.
            let row = row_of(x).unwrap_or(0);
            vec![Value::Int(math::sample_categorical(&sample_table[row], rng) as i64)]
        },
        move |x, z| {
            let (Some(row), Some(k)) = (row_of_density(x), z[0].as_int()) else {
                return f64::NEG_INFINITY;
            };
            match table[row].get(k as usize) {
                Some(p) if k >= 0 => p.ln(),
                _ => f64::NEG_INFINITY,
            }
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn bernoulli_weights() {
        let m = bernoulli(0.3);
        let mut rng = rng();
        let lw1 = m.regenerate(&[], &[Value::Int(1)], &mut rng).unwrap();
        assert_eq!(lw1.log_weight.get(), 0.3f64.ln());
        assert!(lw1.aux.is_empty());
        let lw0 = m.regenerate(&[], &[Value::Int(0)], &mut rng).unwrap();
        assert_eq!(lw0.log_weight.get(), (1.0 - 0.3f64).ln());
        for _ in 0..50 {
            let s = m.simulate(&[], &mut rng).unwrap();
            let expected = if s.outputs[0] == Value::Int(1) { 0.3f64.ln() } else { (1.0 - 0.3f64).ln() };
            assert_eq!(s.log_weight.get(), expected);
        }
    }

    #[test]
    fn regenerate_is_deterministic_and_consumes_no_randomness() {
        let m = bernoulli(0.42);
        let mut a = rng();
        let w1 = m.regenerate(&[], &[Value::Int(1)], &mut a).unwrap().log_weight;
        let w2 = m.regenerate(&[], &[Value::Int(1)], &mut a).unwrap().log_weight;
        assert_eq!(w1.get().to_bits(), w2.get().to_bits());
        assert_eq!(a.get_word_pos(), 0);
    }

    #[test]
    fn categorical_and_normal_densities() {
        let mut rng = rng();
        let c = categorical(vec![0.2, 0.3, 0.5]);
        assert_eq!(c.regenerate(&[], &[Value::Int(2)], &mut rng).unwrap().log_weight.get(), 0.5f64.ln());
        let n = normal(1.0, 2.0);
        let lw = n.regenerate(&[], &[Value::Real(1.0)], &mut rng).unwrap().log_weight.get();
        let expected = -(2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lw - expected).abs() <= 4.0 * f64::EPSILON * expected.abs());
        let std = normal(0.0, 1.0);
        let lw = std.regenerate(&[], &[Value::Real(0.0)], &mut rng).unwrap().log_weight.get();
        assert!((lw + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_support_is_neg_infinity_not_error() {
        let mut rng = rng();
        let c = categorical(vec![0.5, 0.5, 0.0]);
        assert!(c.regenerate(&[], &[Value::Int(2)], &mut rng).unwrap().log_weight.is_neg_infinite());
        assert!(c.regenerate(&[], &[Value::Int(7)], &mut rng).unwrap().log_weight.is_neg_infinite());
        assert!(c.regenerate(&[], &[Value::Int(-1)], &mut rng).unwrap().log_weight.is_neg_infinite());
    }

    #[test]
    fn schema_mismatch_is_contract_error() {
        let mut rng = rng();
        let c = bernoulli(0.5);
        assert!(matches!(c.regenerate(&[], &[Value::Real(1.0)], &mut rng), Err(Error::Contract(_))));
        assert!(matches!(c.regenerate(&[Value::Int(0)], &[Value::Int(1)], &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn cpt_indexing() {
        let m = discrete_cpt(&[("p", 2), ("q", 3)], vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.7, 0.3],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let lw = m.log_density(&[Value::Int(1), Value::Int(1)], &[Value::Int(1)]).unwrap();
        assert_eq!(lw.get(), 0.4f64.ln());
        let lw = m.log_density(&[Value::Int(0), Value::Int(0)], &[Value::Int(1)]).unwrap();
        assert!(lw.is_neg_infinite());
        assert!(discrete_cpt(&[("p", 2)], vec![vec![0.5, 0.6], vec![1.0, 0.0]]).is_err());
    }
}
