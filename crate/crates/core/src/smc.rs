//! Sequential Monte Carlo as a regeneration procedure.
//!
//! A [`SequentialModel`] with latents `v = (v_1..v_T, extra)` and outputs
//! `z` becomes a module whose auxiliary variables are `v` together with the
//! full particle history `w` of an SMC run:
//!
//! * `regenerate(x, z)` runs SMC with `K` particles, the model's proposals
//!   and multinomial resampling at every step, selects a final particle with
//!   probability proportional to its weight, and returns `log Z_hat`;
//! * `simulate(x)` draws `(v, z)` from the model, then runs conditional SMC
//!   with the lineage pinned to `v` (the meta-inference program) and
//!   returns `log Z_hat` of that particle system.
//!
//! `docs/smc-weight-identity.md` (at the repository root) derives why both
//! weights equal `log p(v,z;x) m(w;x,v,z) / q(w,v;x,z)`.

use std::fmt::Debug;

use rand::{Rng, RngCore};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::math;
use crate::module::{AuxState, ProbModule, Regeneration, Simulation};
use crate::value::{LogWeight, Schema, Value};

/// A latent-variable model whose latents arrive one step at a time.
///
/// Step `t` may depend on the inputs and on latents `1..=t` only, which it
/// sees through the running `State`. Each step draws its latent from a
/// proposal of the model's choosing and reports the matching incremental
/// weight. Non-sequential latents (`Extra`) are drawn exactly from their
/// conditional at the end of a run and never enter the weights.
pub trait SequentialModel: Send + Sync + 'static {
    type Latent: Clone + Debug + Serialize + Send + Sync + 'static;
    type State: Clone;
    type Extra: Clone + Debug + Serialize + Send + Sync + 'static;

    fn input_schema(&self) -> &Schema;
    fn output_schema(&self) -> &Schema;

    fn num_steps(&self, outputs: &[Value]) -> usize;

    /// `false` when `z` cannot occur under `x`, for any latents.
    fn in_support(&self, _inputs: &[Value], _outputs: &[Value]) -> bool {
        true
    }

    fn initial_state(&self, inputs: &[Value]) -> Self::State;

    /// Draw `v_t ~ q_t(v_t | v_<t; x, z)`.
    fn sample_latent(
        &self,
        step: usize,
        state: &Self::State,
        inputs: &[Value],
        outputs: &[Value],
        rng: &mut dyn RngCore,
    ) -> Self::Latent;

    /// `log p(v_t, z_t | v_<t, z_<t; x) - log q_t(v_t | v_<t; x, z)`, defined
    /// for every `v_t` in the support of `p`, not only those `q_t` proposes.
    fn log_weight_increment(
        &self,
        step: usize,
        state: &Self::State,
        latent: &Self::Latent,
        inputs: &[Value],
        outputs: &[Value],
    ) -> f64;

    fn advance(
        &self,
        step: usize,
        state: &Self::State,
        latent: &Self::Latent,
        inputs: &[Value],
        outputs: &[Value],
    ) -> Self::State;

    /// Draw the non-sequential latents from their exact conditional.
    fn sample_extra(&self, state: &Self::State, inputs: &[Value], outputs: &[Value], rng: &mut dyn RngCore) -> Self::Extra;

    /// Forward-simulate `(v, z) ~ p(v, z; x)`.
    fn forward(&self, inputs: &[Value], rng: &mut dyn RngCore) -> ForwardSample<Self::Latent, Self::Extra>;
}

#[derive(Clone, Debug)]
pub struct ForwardSample<L, E> {
    pub latents: Vec<L>,
    pub extra: E,
    pub outputs: Vec<Value>,
}

/// Slot of the pinned lineage at every step of a conditional run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetaInferenceRecord {
    pub slots: Vec<usize>,
}

/// Complete execution history of one SMC or conditional SMC run.
#[derive(Clone, Debug, Serialize)]
pub struct ParticleSystem<L> {
    pub particles: usize,
    /// `latents[t][k]`: latent proposed for particle `k` at step `t`.
    pub latents: Vec<Vec<L>>,
    /// `log_weights[t][k]`: incremental log-weight; `-inf` serializes as `null`.
    #[serde(serialize_with = "serialize_nested_log_weights")]
    pub log_weights: Vec<Vec<f64>>,
    /// `ancestors[t][k]`: index at step `t - 1` that particle `k` extends.
    /// Step 0 has no ancestors and stores an empty vector.
    pub ancestors: Vec<Vec<usize>>,
    pub selected: usize,
    #[serde(serialize_with = "serialize_log_weight")]
    pub log_evidence: f64,
    pub meta: Option<MetaInferenceRecord>,
}

impl<L: Clone> ParticleSystem<L> {
    /// Recompute `log Z_hat = sum_t [logsumexp(w_t) - log K]` from the
    /// stored weights, in the same order the run accumulated it.
    pub fn recompute_log_evidence(&self) -> f64 {
        self.log_weights.iter().fold(0.0, |acc, w| acc + math::log_mean_exp(w))
    }

    /// Latents along the ancestry of final particle `k`.
    pub fn lineage(&self, k: usize) -> Vec<L> {
        let steps = self.latents.len();
        let mut out = Vec::with_capacity(steps);
        let mut idx = k;
        for t in (0..steps).rev() {
            out.push(self.latents[t][idx].clone());
            if t > 0 {
                idx = self.ancestors[t][idx];
            }
        }
        out.reverse();
        out
    }

    /// Lineage retained by the meta-inference record, read slot by slot.
    pub fn retained_lineage(&self) -> Option<Vec<L>> {
        let meta = self.meta.as_ref()?;
        Some(meta.slots.iter().enumerate().map(|(t, &k)| self.latents[t][k].clone()).collect())
    }

    pub fn steps(&self) -> usize {
        self.latents.len()
    }
}

fn serialize_log_weight<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_some(x)
    } else {
        s.serialize_none()
    }
}

fn serialize_nested_log_weights<S: Serializer>(xs: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let nullable: Vec<Vec<Option<f64>>> =
        xs.iter().map(|row| row.iter().map(|x| x.is_finite().then_some(*x)).collect()).collect();
    nullable.serialize(s)
}

/// Output of [`smc_run`]: the selected latents and the history that produced them.
#[derive(Clone, Debug, Serialize)]
pub struct SmcTrace<L, E> {
    pub latents: Vec<L>,
    pub extra: E,
    pub particles: ParticleSystem<L>,
}

/// Multinomial resampling: `n` independent draws proportional to `exp(log_weights)`.
fn resample(log_weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return (0..n).map(|_| rng.random_range(0..log_weights.len())).collect();
    }
    let mut cumulative = Vec::with_capacity(log_weights.len());
    let mut acc = 0.0;
    for w in log_weights {
        acc += (w - max).exp();
        cumulative.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cumulative.partition_point(|&c| c <= u).min(log_weights.len() - 1)
        })
        .collect()
}

fn check_particles(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("particle count must be at least 1"));
    }
    Ok(())
}

/// Run SMC on `(x, z)` and select one particle.
///
/// When every particle at some step has zero weight the run continues with
/// uniform resampling so that a complete latent assignment is still
/// returned; the evidence estimate is then `-inf`.
pub fn smc_run<M: SequentialModel>(
    model: &M,
    inputs: &[Value],
    outputs: &[Value],
    particles: usize,
    rng: &mut dyn RngCore,
) -> Result<SmcTrace<M::Latent, M::Extra>> {
    check_particles(particles)?;
    let steps = model.num_steps(outputs);
    let mut states = vec![model.initial_state(inputs); particles];
    let mut latents = Vec::with_capacity(steps);
    let mut log_weights: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut ancestors = Vec::with_capacity(steps);
    let mut log_evidence = 0.0;

    for t in 0..steps {
        let parents = if t == 0 { Vec::new() } else { resample(&log_weights[t - 1], particles, rng) };
        if t > 0 {
            states = parents.iter().map(|&a| states[a].clone()).collect();
        }
        let mut step_latents = Vec::with_capacity(particles);
        let mut step_weights = Vec::with_capacity(particles);
        for state in &mut states {
            let v = model.sample_latent(t, state, inputs, outputs, rng);
            step_weights.push(model.log_weight_increment(t, state, &v, inputs, outputs));
            *state = model.advance(t, state, &v, inputs, outputs);
            step_latents.push(v);
        }
        log_evidence += math::log_mean_exp(&step_weights);
        latents.push(step_latents);
        log_weights.push(step_weights);
        ancestors.push(parents);
    }

    let selected = match log_weights.last() {
        Some(w) => math::sample_log_categorical(w, rng),
        None => 0,
    };
    let extra = model.sample_extra(&states[selected], inputs, outputs, rng);
    let system = ParticleSystem {
        particles,
        latents,
        log_weights,
        ancestors,
        selected,
        log_evidence: sanitize(log_evidence),
        meta: None,
    };
    Ok(SmcTrace { latents: system.lineage(selected), extra, particles: system })
}

/// Conditional SMC: as [`smc_run`], but at each step one uniformly chosen
/// slot carries the given trajectory `v` and extends the previous pinned
/// slot. The pinned lineage is the selected particle.
pub fn csmc_run<M: SequentialModel>(
    model: &M,
    inputs: &[Value],
    outputs: &[Value],
    pinned: &[M::Latent],
    particles: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleSystem<M::Latent>> {
    check_particles(particles)?;
    let steps = model.num_steps(outputs);
    if pinned.len() != steps {
        return Err(Error::contract(format!("pinned trajectory has {} steps, model has {steps}", pinned.len())));
    }
    let mut states = vec![model.initial_state(inputs); particles];
    let mut latents = Vec::with_capacity(steps);
    let mut log_weights: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut ancestors = Vec::with_capacity(steps);
    let mut slots = Vec::with_capacity(steps);
    let mut log_evidence = 0.0;

    for t in 0..steps {
        let slot = rng.random_range(0..particles);
        let parents = if t == 0 {
            Vec::new()
        } else {
            let previous_slot = slots[t - 1];
            let mut drawn = resample(&log_weights[t - 1], particles - 1, rng).into_iter();
            (0..particles)
                .map(|k| if k == slot { previous_slot } else { drawn.next().expect("K - 1 draws") })
                .collect()
        };
        if t > 0 {
            states = parents.iter().map(|&a: &usize| states[a].clone()).collect();
        }
        let mut step_latents = Vec::with_capacity(particles);
        let mut step_weights = Vec::with_capacity(particles);
        for (k, state) in states.iter_mut().enumerate() {
            let v = if k == slot { pinned[t].clone() } else { model.sample_latent(t, state, inputs, outputs, rng) };
            step_weights.push(model.log_weight_increment(t, state, &v, inputs, outputs));
            *state = model.advance(t, state, &v, inputs, outputs);
            step_latents.push(v);
        }
        log_evidence += math::log_mean_exp(&step_weights);
        latents.push(step_latents);
        log_weights.push(step_weights);
        ancestors.push(parents);
        slots.push(slot);
    }

    Ok(ParticleSystem {
        particles,
        latents,
        log_weights,
        ancestors,
        selected: slots.last().copied().unwrap_or(0),
        log_evidence: sanitize(log_evidence),
        meta: Some(MetaInferenceRecord { slots }),
    })
}

fn sanitize(log_evidence: f64) -> f64 {
    if log_evidence.is_nan() {
        f64::NEG_INFINITY
    } else {
        log_evidence
    }
}

/// A sequential model exposed through the module contract with `K`
/// particles. Its auxiliary state is an [`SmcTrace`].
pub struct SmcModule<M> {
    model: M,
    particles: usize,
}

/// Wrap `model` as a module regenerated by `particles`-particle SMC.
pub fn make_smc_module<M: SequentialModel>(model: M, particles: usize) -> Result<SmcModule<M>> {
    check_particles(particles)?;
    Ok(SmcModule { model, particles })
}

impl<M: SequentialModel> SmcModule<M> {
    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn particles(&self) -> usize {
        self.particles
    }
}

impl<M: SequentialModel> ProbModule for SmcModule<M> {
    fn input_schema(&self) -> &Schema {
        self.model.input_schema()
    }

    fn output_schema(&self) -> &Schema {
        self.model.output_schema()
    }

    fn simulate(&self, inputs: &[Value], rng: &mut dyn RngCore) -> Result<Simulation> {
        self.model.input_schema().check(inputs, "smc module inputs")?;
        let forward = self.model.forward(inputs, rng);
        self.model.output_schema().check(&forward.outputs, "smc module outputs")?;
        let system = csmc_run(&self.model, inputs, &forward.outputs, &forward.latents, self.particles, rng)?;
        let log_weight = LogWeight::saturating(system.log_evidence);
        let aux = SmcTrace { latents: forward.latents, extra: forward.extra, particles: system };
        Ok(Simulation { outputs: forward.outputs, log_weight, aux: AuxState::new(aux) })
    }

    fn regenerate(&self, inputs: &[Value], outputs: &[Value], rng: &mut dyn RngCore) -> Result<Regeneration> {
        self.model.input_schema().check(inputs, "smc module inputs")?;
        self.model.output_schema().check(outputs, "smc module outputs")?;
        if !self.model.in_support(inputs, outputs) {
            return Ok(Regeneration { log_weight: LogWeight::NEG_INFINITY, aux: AuxState::empty() });
        }
        let trace = smc_run(&self.model, inputs, outputs, self.particles, rng)?;
        Ok(Regeneration { log_weight: LogWeight::saturating(trace.particles.log_evidence), aux: AuxState::new(trace) })
    }

    fn describe(&self) -> String {
        format!("smc(K={})", self.particles)
    }
}
