//! A small binary hidden Markov model: an enumerable test bed for SMC
//! regeneration.
//!
//! `h_1 ~ Bern(initial[a])`, `h_t | h_{t-1} ~ Bern(transition[h_{t-1}])`,
//! `y_t | h_t ~ Bern(emission[h_t])`, for `t = 1..steps`. Input port `a`
//! (binary) selects the initial-state probability; output port `y` holds
//! the observation vector.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::smc::{ForwardSample, SequentialModel};
use crate::value::{PortSpec, Schema, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    /// `P(h_1 = 1 | a)` for `a = 0, 1`.
    pub initial: [f64; 2],
    /// `P(h_t = 1 | h_{t-1})`.
    pub transition: [f64; 2],
    /// `P(y_t = 1 | h_t)`.
    pub emission: [f64; 2],
    pub steps: usize,
}

impl Default for HmmParams {
    fn default() -> Self {
        HmmParams { initial: [0.2, 0.7], transition: [0.25, 0.8], emission: [0.15, 0.85], steps: 4 }
    }
}

pub struct BinaryHmm {
    params: HmmParams,
    inputs: Schema,
    outputs: Schema,
}

impl BinaryHmm {
    pub fn new(params: HmmParams) -> Self {
        let outputs = Schema::new(vec![PortSpec::int_vector("y", params.steps)]);
        BinaryHmm { params, inputs: Schema::new(vec![PortSpec::int("a")]), outputs }
    }

    pub fn params(&self) -> &HmmParams {
        &self.params
    }

    fn prob_one(&self, step: usize, previous: Option<i64>, a: i64) -> f64 {
        match (step, previous) {
            (0, _) | (_, None) => self.params.initial[a as usize],
            (_, Some(h)) => self.params.transition[h as usize],
        }
    }
}

fn switch(inputs: &[Value]) -> i64 {
    inputs[0].as_int().unwrap_or(0)
}

impl SequentialModel for BinaryHmm {
    type Latent = i64;
    /// Previous hidden state.
    type State = Option<i64>;
    type Extra = ();

    fn input_schema(&self) -> &Schema {
        &self.inputs
    }

    fn output_schema(&self) -> &Schema {
        &self.outputs
    }

    fn num_steps(&self, outputs: &[Value]) -> usize {
        outputs[0].len().unwrap_or(0)
    }

    fn in_support(&self, inputs: &[Value], outputs: &[Value]) -> bool {
        matches!(switch(inputs), 0 | 1)
            && outputs[0].as_int_vector().is_some_and(|y| y.iter().all(|v| matches!(v, 0 | 1)))
    }

    fn initial_state(&self, _inputs: &[Value]) -> Option<i64> {
        None
    }

    fn sample_latent(&self, step: usize, state: &Option<i64>, inputs: &[Value], _outputs: &[Value], rng: &mut dyn RngCore) -> i64 {
        math::sample_bernoulli(self.prob_one(step, *state, switch(inputs)), rng)
    }

    /// Prior proposal: the increment is the emission log-likelihood.
    fn log_weight_increment(&self, step: usize, _state: &Option<i64>, h: &i64, _inputs: &[Value], outputs: &[Value]) -> f64 {
        let y = outputs[0].as_int_vector().expect("schema checked")[step];
        math::bernoulli_logpmf(y, self.params.emission[*h as usize])
    }

    fn advance(&self, _step: usize, _state: &Option<i64>, h: &i64, _inputs: &[Value], _outputs: &[Value]) -> Option<i64> {
        Some(*h)
    }

    fn sample_extra(&self, _state: &Option<i64>, _inputs: &[Value], _outputs: &[Value], _rng: &mut dyn RngCore) {}

    fn forward(&self, inputs: &[Value], rng: &mut dyn RngCore) -> ForwardSample<i64, ()> {
        let a = switch(inputs);
        let mut hidden = Vec::with_capacity(self.params.steps);
        let mut observed = Vec::with_capacity(self.params.steps);
        let mut previous = None;
        for t in 0..self.params.steps {
            let h = math::sample_bernoulli(self.prob_one(t, previous, a), rng);
            observed.push(math::sample_bernoulli(self.params.emission[h as usize], rng));
            hidden.push(h);
            previous = Some(h);
        }
        ForwardSample { latents: hidden, extra: (), outputs: vec![Value::IntVector(observed)] }
    }
}
