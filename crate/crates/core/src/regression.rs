//! The two-module outlier-regression application.
//!
//! Module A is a binary switch `a` produced by a three-latent chain and
//! regenerated by a learned stochastic inverse. Module B is a Bayesian
//! linear regression whose points are each an outlier with probability
//! depending on `a`; it is regenerated by SMC over the outlier indicators
//! with the line integrated out inside every particle.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::{
    make_inverse_module, train_inverse, DiscreteModelSpec, DiscreteVariable, InverseModule, InverseStructure,
};
use crate::math;
use crate::mh::{Flip, Refresh, SiteProposal};
use crate::network::{ModuleNetwork, NodeId};
use crate::smc::{make_smc_module, ForwardSample, SequentialModel, SmcModule};
use crate::value::{PortSpec, Schema, Value};

/// Constants of the regression module. Variances for the line prior,
/// standard deviations for the noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierRegressionParams {
    pub prior_mean: [f64; 2],
    pub prior_variance: [f64; 2],
    /// `P(outlier | a)` for `a = 0, 1`.
    pub outlier_prob: [f64; 2],
    pub inlier_sd: f64,
    pub outlier_sd: f64,
}

impl Default for OutlierRegressionParams {
    fn default() -> Self {
        OutlierRegressionParams {
            prior_mean: [0.0, 0.0],
            prior_variance: [1.0, 0.25],
            outlier_prob: [0.01, 0.1],
            inlier_sd: 0.22,
            outlier_sd: 3.16,
        }
    }
}

impl OutlierRegressionParams {
    pub fn validate(&self) -> Result<()> {
        let probs_ok = self.outlier_prob.iter().all(|p| (0.0..=1.0).contains(p));
        let positive = self.prior_variance.iter().chain([&self.inlier_sd, &self.outlier_sd]).all(|v| *v > 0.0 && v.is_finite());
        if !probs_ok || !positive || !self.prior_mean.iter().all(|m| m.is_finite()) {
            return Err(Error::Config("invalid outlier regression parameters".into()));
        }
        Ok(())
    }

    pub fn noise_sd(&self, outlier: bool) -> f64 {
        if outlier {
            self.outlier_sd
        } else {
            self.inlier_sd
        }
    }
}

/// Gaussian posterior over `(intercept, slope)` after a prefix of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugateLineState {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

/// A sampled regression line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

impl ConjugateLineState {
    pub fn prior(params: &OutlierRegressionParams) -> Self {
        let [v0, v1] = params.prior_variance;
        ConjugateLineState { mean: params.prior_mean, covariance: [[v0, 0.0], [0.0, v1]] }
    }

    /// `(Sigma h, h^T Sigma h)` for the design row `h = (1, x)`.
    fn gain_terms(&self, x: f64) -> ([f64; 2], f64) {
        let c = &self.covariance;
        let sh = [c[0][0] + c[0][1] * x, c[1][0] + c[1][1] * x];
        (sh, sh[0] + sh[1] * x)
    }

    /// Mean and variance of `b` at `x` with noise sd `sd`, the line integrated out.
    pub fn predictive(&self, x: f64, sd: f64) -> (f64, f64) {
        let (_, hsh) = self.gain_terms(x);
        (self.mean[0] + self.mean[1] * x, hsh + sd * sd)
    }

    pub fn log_predictive(&self, x: f64, b: f64, sd: f64) -> f64 {
        let (m, v) = self.predictive(x, sd);
        math::normal_logpdf(b, m, v.sqrt())
    }

    /// Condition on one observation `b = h line + N(0, sd^2)`.
    pub fn update(&self, x: f64, b: f64, sd: f64) -> Self {
        let (sh, hsh) = self.gain_terms(x);
        let s = hsh + sd * sd;
        let residual = b - (self.mean[0] + self.mean[1] * x);
        let c = &self.covariance;
        let off = c[0][1] - sh[0] * sh[1] / s;
        ConjugateLineState {
            mean: [self.mean[0] + sh[0] * residual / s, self.mean[1] + sh[1] * residual / s],
            covariance: [[c[0][0] - sh[0] * sh[0] / s, off], [off, c[1][1] - sh[1] * sh[1] / s]],
        }
    }

    /// Exact draw via the 2x2 Cholesky factor.
    pub fn sample_line(&self, rng: &mut dyn RngCore) -> Line {
        let c = &self.covariance;
        let l00 = c[0][0].sqrt();
        let l10 = c[1][0] / l00;
        let l11 = (c[1][1] - l10 * l10).max(0.0).sqrt();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        Line { intercept: self.mean[0] + l00 * e0, slope: self.mean[1] + l10 * e0 + l11 * e1 }
    }
}

/// How SMC proposes each outlier indicator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorProposal {
    /// From `P(outlier | a)`; the increment is the predictive density of `b_t`.
    Prior,
    /// From `P(outlier | a, b_t, line posterior so far)`; the increment is
    /// the predictive density with the indicator summed out, so it does not
    /// depend on the proposed value.
    #[default]
    Adapted,
}

/// Regression with per-point outlier indicators as a sequential model.
///
/// Step `t` proposes indicator `t` and weighs it by the posterior
/// predictive of `b_t` under the line posterior of its particle; the line
/// is drawn exactly from its conditional at the end.
pub struct OutlierRegression {
    params: OutlierRegressionParams,
    covariates: Vec<f64>,
    proposal: IndicatorProposal,
    inputs: Schema,
    outputs: Schema,
}

impl OutlierRegression {
    pub fn new(params: OutlierRegressionParams, covariates: Vec<f64>) -> Result<Self> {
        params.validate()?;
        if covariates.is_empty() || !covariates.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("covariates must be a non-empty list of finite reals".into()));
        }
        let outputs = Schema::new(vec![PortSpec::real_vector("b", covariates.len())]);
        Ok(OutlierRegression {
            params,
            covariates,
            proposal: IndicatorProposal::default(),
            inputs: Schema::new(vec![PortSpec::int("a")]),
            outputs,
        })
    }

    pub fn with_proposal(mut self, proposal: IndicatorProposal) -> Self {
        self.proposal = proposal;
        self
    }

    pub fn proposal(&self) -> IndicatorProposal {
        self.proposal
    }

    /// `log P(outlier = k | a) + log p(b_t | outlier = k, ...)` for `k = 0, 1`.
    fn joint_terms(&self, step: usize, state: &ConjugateLineState, inputs: &[Value], outputs: &[Value]) -> [f64; 2] {
        let b = outputs[0].as_real_vector().expect("schema checked")[step];
        let p = self.outlier_prob(inputs);
        let x = self.covariates[step];
        [
            (1.0 - p).ln() + state.log_predictive(x, b, self.params.inlier_sd),
            p.ln() + state.log_predictive(x, b, self.params.outlier_sd),
        ]
    }

    pub fn params(&self) -> &OutlierRegressionParams {
        &self.params
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    fn outlier_prob(&self, inputs: &[Value]) -> f64 {
        self.params.outlier_prob[inputs[0].as_int().unwrap_or(0).clamp(0, 1) as usize]
    }
}

impl SequentialModel for OutlierRegression {
    /// Outlier indicator of one point.
    type Latent = i64;
    type State = ConjugateLineState;
    type Extra = Line;

    fn input_schema(&self) -> &Schema {
        &self.inputs
    }

    fn output_schema(&self) -> &Schema {
        &self.outputs
    }

    fn num_steps(&self, _outputs: &[Value]) -> usize {
        self.covariates.len()
    }

    fn in_support(&self, inputs: &[Value], _outputs: &[Value]) -> bool {
        matches!(inputs[0].as_int(), Some(0 | 1))
    }

    fn initial_state(&self, _inputs: &[Value]) -> ConjugateLineState {
        ConjugateLineState::prior(&self.params)
    }

    fn sample_latent(&self, step: usize, state: &ConjugateLineState, inputs: &[Value], outputs: &[Value], rng: &mut dyn RngCore) -> i64 {
        match self.proposal {
            IndicatorProposal::Prior => math::sample_bernoulli(self.outlier_prob(inputs), rng),
            IndicatorProposal::Adapted => {
                math::sample_log_categorical(&self.joint_terms(step, state, inputs, outputs), rng) as i64
            }
        }
    }

    fn log_weight_increment(&self, step: usize, state: &ConjugateLineState, outlier: &i64, inputs: &[Value], outputs: &[Value]) -> f64 {
        match self.proposal {
            IndicatorProposal::Prior => {
                let b = outputs[0].as_real_vector().expect("schema checked")[step];
                state.log_predictive(self.covariates[step], b, self.params.noise_sd(*outlier == 1))
            }
            IndicatorProposal::Adapted => {
                let terms = self.joint_terms(step, state, inputs, outputs);
                if terms[*outlier as usize] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    math::logsumexp(&terms)
                }
            }
        }
    }

    fn advance(&self, step: usize, state: &ConjugateLineState, outlier: &i64, _: &[Value], outputs: &[Value]) -> ConjugateLineState {
        let b = outputs[0].as_real_vector().expect("schema checked")[step];
        state.update(self.covariates[step], b, self.params.noise_sd(*outlier == 1))
    }

    fn sample_extra(&self, state: &ConjugateLineState, _: &[Value], _: &[Value], rng: &mut dyn RngCore) -> Line {
        state.sample_line(rng)
    }

    fn forward(&self, inputs: &[Value], rng: &mut dyn RngCore) -> ForwardSample<i64, Line> {
        let line = ConjugateLineState::prior(&self.params).sample_line(rng);
        let p = self.outlier_prob(inputs);
        let mut indicators = Vec::with_capacity(self.covariates.len());
        let mut responses = Vec::with_capacity(self.covariates.len());
        for &x in &self.covariates {
            let outlier = math::sample_bernoulli(p, rng);
            let e: f64 = rng.sample(StandardNormal);
            responses.push(line.at(x) + self.params.noise_sd(outlier == 1) * e);
            indicators.push(outlier);
        }
        ForwardSample { latents: indicators, extra: line, outputs: vec![Value::RealVector(responses)] }
    }
}

pub fn build_module_b(params: OutlierRegressionParams, covariates: Vec<f64>, particles: usize) -> Result<SmcModule<OutlierRegression>> {
    build_module_b_with(params, covariates, particles, IndicatorProposal::default())
}

pub fn build_module_b_with(
    params: OutlierRegressionParams,
    covariates: Vec<f64>,
    particles: usize,
    proposal: IndicatorProposal,
) -> Result<SmcModule<OutlierRegression>> {
    make_smc_module(OutlierRegression::new(params, covariates)?.with_proposal(proposal), particles)
}

/// CPTs of the switch chain `u1 -> u2 -> u3 -> a`, each as `P(child = 1 | parent)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchParams {
    pub u1: f64,
    pub u2: [f64; 2],
    pub u3: [f64; 2],
    pub a: [f64; 2],
}

impl Default for SwitchParams {
    fn default() -> Self {
        SwitchParams { u1: 0.5, u2: [0.2, 0.7], u3: [0.1, 0.9], a: [0.15, 0.8] }
    }
}

impl SwitchParams {
    pub fn to_spec(&self) -> DiscreteModelSpec {
        let bern = |p: f64| vec![1.0 - p, p];
        let var = |name: &str, parents: Vec<usize>, cpt: Vec<Vec<f64>>| DiscreteVariable { name: name.into(), arity: 2, parents, cpt };
        DiscreteModelSpec {
            inputs: vec![],
            variables: vec![
                var("u1", vec![], vec![bern(self.u1)]),
                var("u2", vec![0], vec![bern(self.u2[0]), bern(self.u2[1])]),
                var("u3", vec![1], vec![bern(self.u3[0]), bern(self.u3[1])]),
                var("a", vec![2], vec![bern(self.a[0]), bern(self.a[1])]),
            ],
            outputs: vec![3],
        }
    }
}

pub fn build_module_a(
    params: &SwitchParams,
    n_train: usize,
    smoothing: f64,
    structure: InverseStructure,
    rng: &mut dyn RngCore,
) -> Result<InverseModule> {
    let spec = params.to_spec();
    let inverse = train_inverse(&spec, n_train, smoothing, structure, rng)?;
    make_inverse_module(spec, inverse)
}

/// A regression dataset together with the recipe that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub covariates: Vec<f64>,
    pub responses: Vec<f64>,
    pub seed: u64,
    pub line: Line,
    pub outliers: Vec<usize>,
}

pub const DATASET_SEED: u64 = 20_170_601;
pub const DATASET_OUTLIERS: [usize; 2] = [2, 6];
/// Minimum |standard normal| of a forced outlier's noise draw.
pub const GROSS_OUTLIER_Z: f64 = 0.5;

/// `n` evenly spaced points on `[-1, 1]`.
pub fn evenly_spaced(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Draw a dataset: a line from the prior, inlier noise everywhere except at
/// `outliers`, whose noise is outlier-scale and at least
/// `GROSS_OUTLIER_Z * outlier_sd` in magnitude.
pub fn generate_dataset(params: &OutlierRegressionParams, n: usize, outliers: &[usize], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let covariates = evenly_spaced(n);
    let line = ConjugateLineState::prior(params).sample_line(&mut rng);
    let responses = covariates
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let gross = outliers.contains(&i);
            let mut e: f64 = rng.sample(StandardNormal);
            while gross && e.abs() < GROSS_OUTLIER_Z {
                e = rng.sample(StandardNormal);
            }
            line.at(x) + params.noise_sd(gross) * e
        })
        .collect();
    Dataset { covariates, responses, seed, line, outliers: outliers.to_vec() }
}

/// The frozen nine-point dataset.
pub fn default_dataset() -> Dataset {
    Dataset {
        covariates: evenly_spaced(9),
        responses: FROZEN_RESPONSES.to_vec(),
        seed: DATASET_SEED,
        line: FROZEN_LINE,
        outliers: DATASET_OUTLIERS.to_vec(),
    }
}

/// Output of `generate_dataset(&Default::default(), 9, &DATASET_OUTLIERS, DATASET_SEED)`.
const FROZEN_LINE: Line = Line { intercept: 0.6422404308455202, slope: 0.433585910524614 };
const FROZEN_RESPONSES: [f64; 9] = [
    -0.01831629330044393,
    0.5082587297625932,
    -6.597977540093319,
    0.4923218049000958,
    0.6601664841309448,
    0.8464760480513694,
    2.5019396247202392,
    0.6949516269264584,
    0.871531494274242,
];

/// Everything needed to assemble the two-module network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchRegressionModel {
    pub switch: SwitchParams,
    pub regression: OutlierRegressionParams,
    pub dataset: Dataset,
}

impl Default for SwitchRegressionModel {
    fn default() -> Self {
        SwitchRegressionModel {
            switch: SwitchParams::default(),
            regression: OutlierRegressionParams::default(),
            dataset: default_dataset(),
        }
    }
}

/// The assembled network and its MH schedule over `a`.
#[derive(Clone)]
pub struct SwitchRegressionNetwork {
    pub network: ModuleNetwork,
    pub schedule: Vec<SiteProposal>,
    pub switch_node: NodeId,
    pub regression_node: NodeId,
}

pub const SWITCH_NODE: &str = "A";
pub const REGRESSION_NODE: &str = "B";

/// `A -> B` with `B` observed at the dataset responses. The schedule, meant
/// for a cyclic scan, alternates a deterministic flip of `a` with a refresh
/// that keeps `a` and regenerates both modules' weights.
pub fn build_switch_regression_network(
    model: &SwitchRegressionModel,
    particles: usize,
    n_train: usize,
    smoothing: f64,
    structure: InverseStructure,
    rng: &mut dyn RngCore,
) -> Result<SwitchRegressionNetwork> {
    let module_a = build_module_a(&model.switch, n_train, smoothing, structure, rng)?;
    let module_b = build_module_b(model.regression.clone(), model.dataset.covariates.clone(), particles)?;
    let network = ModuleNetwork::builder()
        .node(SWITCH_NODE, Arc::new(module_a))
        .node(REGRESSION_NODE, Arc::new(module_b))
        .edge(SWITCH_NODE, "a", REGRESSION_NODE, "a")
        .observe(REGRESSION_NODE, vec![Value::real_vector(model.dataset.responses.clone())?])
        .build()?;
    let schedule = vec![
        SiteProposal::new(&network, SWITCH_NODE, "a", Arc::new(Flip))?,
        SiteProposal::new(&network, SWITCH_NODE, "a", Arc::new(Refresh))?,
    ];
    let switch_node = network.id_of(SWITCH_NODE).expect("just added");
    let regression_node = network.id_of(REGRESSION_NODE).expect("just added");
    Ok(SwitchRegressionNetwork { network, schedule, switch_node, regression_node })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::ProbModule;
    use crate::oracle;
    use crate::smc::SmcTrace;

    #[test]
    fn sequential_update_matches_batch_posterior() {
        let params = OutlierRegressionParams::default();
        let data = default_dataset();
        for mask in [0u32, 0b000_100_100, 0b111_111_111, 0b010_101_010] {
            let sds: Vec<f64> = (0..9).map(|i| params.noise_sd(mask >> i & 1 == 1)).collect();
            let mut state = ConjugateLineState::prior(&params);
            for i in 0..9 {
                state = state.update(data.covariates[i], data.responses[i], sds[i]);
                let c = state.covariance;
                let trace = c[0][0] + c[1][1];
                let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
                assert!(trace / 2.0 - disc > 1e-10, "covariance must stay positive definite");
                assert_eq!(c[0][1], c[1][0]);
            }
            let leaf = oracle::RegressionLeaf {
                prior_mean: params.prior_mean,
                prior_variance: params.prior_variance,
                inlier_sd: params.inlier_sd,
                outlier_sd: params.outlier_sd,
                covariates: data.covariates.clone(),
                responses: data.responses.clone(),
            };
            let outlier: Vec<bool> = (0..9).map(|i| mask >> i & 1 == 1).collect();
            let (mean, cov) = leaf.line_posterior(&outlier);
            for r in 0..2 {
                assert!((state.mean[r] - mean[r]).abs() < 1e-10);
                for c in 0..2 {
                    assert!((state.covariance[r][c] - cov[r][c]).abs() < 1e-10);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn predictive_chain_rule_gives_batch_evidence(
            points in proptest::collection::vec((-2.0f64..2.0, -5.0f64..5.0, proptest::bool::ANY), 1..9)
        ) {
            let params = OutlierRegressionParams::default();
            let mut state = ConjugateLineState::prior(&params);
            let mut total = 0.0;
            for &(x, b, outlier) in &points {
                total += state.log_predictive(x, b, params.noise_sd(outlier));
                state = state.update(x, b, params.noise_sd(outlier));
            }
            let leaf = oracle::RegressionLeaf {
                prior_mean: params.prior_mean,
                prior_variance: params.prior_variance,
                inlier_sd: params.inlier_sd,
                outlier_sd: params.outlier_sd,
                covariates: points.iter().map(|p| p.0).collect(),
                responses: points.iter().map(|p| p.1).collect(),
            };
            let outliers: Vec<bool> = points.iter().map(|p| p.2).collect();
            let exact = leaf.log_marginal(&outliers);
            proptest::prop_assert!((total - exact).abs() < 1e-9 * exact.abs().max(1.0), "{} vs {}", total, exact);
        }
    }

    #[test]
    fn adapted_proposal_is_exact_for_one_point() {
        // With a single point the adapted increment sums the indicator out,
        // so every run returns log p(b | a) exactly.
        let params = OutlierRegressionParams::default();
        let module = build_module_b(params.clone(), vec![0.4], 1).unwrap();
        let leaf = oracle::RegressionLeaf {
            prior_mean: params.prior_mean,
            prior_variance: params.prior_variance,
            inlier_sd: params.inlier_sd,
            outlier_sd: params.outlier_sd,
            covariates: vec![0.4],
            responses: vec![2.5],
        };
        let outputs = [Value::RealVector(vec![2.5])];
        for a in [0, 1] {
            let p = params.outlier_prob[a as usize];
            let expected = oracle::log_sum_exp([
                (1.0 - p).ln() + leaf.log_marginal(&[false]),
                p.ln() + leaf.log_marginal(&[true]),
            ]);
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = module.regenerate(&[Value::Int(a)], &outputs, &mut rng).unwrap();
                assert!((r.log_weight.get() - expected).abs() < 1e-12, "{} vs {expected}", r.log_weight.get());
            }
        }
    }

    #[test]
    fn point_likelihood_matches_independent_formula() {
        let params = OutlierRegressionParams::default();
        let model = OutlierRegression::new(params.clone(), vec![0.5]).unwrap().with_proposal(IndicatorProposal::Prior);
        // With a degenerate-free prior the one-step predictive is N(m, h S h' + sd^2).
        let state = model.initial_state(&[Value::Int(0)]);
        let outputs = [Value::RealVector(vec![0.3])];
        for outlier in [0, 1] {
            let sd = if outlier == 1 { 3.16 } else { 0.22 };
            let var = 1.0 + 0.25 * 0.25 + sd * sd;
            let expected = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.3f64.powi(2) / (2.0 * var);
            let got = model.log_weight_increment(0, &state, &outlier, &[Value::Int(0)], &outputs);
            assert!((got - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn line_sampler_matches_posterior_moments() {
        let state = ConjugateLineState { mean: [0.3, -1.0], covariance: [[0.5, 0.2], [0.2, 0.3]] };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let lines: Vec<Line> = (0..n).map(|_| state.sample_line(&mut rng)).collect();
        let mi = lines.iter().map(|l| l.intercept).sum::<f64>() / n as f64;
        let ms = lines.iter().map(|l| l.slope).sum::<f64>() / n as f64;
        let cov = lines.iter().map(|l| (l.intercept - mi) * (l.slope - ms)).sum::<f64>() / n as f64;
        assert!((mi - 0.3).abs() < 0.01 && (ms + 1.0).abs() < 0.01);
        assert!((cov - 0.2).abs() < 0.01);
    }

    #[test]
    fn switch_only_changes_indicator_prior() {
        let data = default_dataset();
        let module =
            build_module_b_with(OutlierRegressionParams::default(), data.covariates.clone(), 1, IndicatorProposal::Prior)
                .unwrap();
        let outputs = [Value::RealVector(data.responses.clone())];
        let run = |a: i64| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let r = module.regenerate(&[Value::Int(a)], &outputs, &mut rng).unwrap();
            r.aux.downcast_ref::<SmcTrace<i64, Line>>().unwrap().latents.clone()
        };
        // Same uniforms, thresholds 0.01 vs 0.1: a = 1 marks a superset of outliers.
        let (l0, l1) = (run(0), run(1));
        assert!(l0.iter().zip(&l1).all(|(x, y)| x <= y));
        let params = OutlierRegressionParams::default();
        assert_eq!(params.outlier_prob, [0.01, 0.1]);
    }

    #[test]
    fn switch_out_of_range_is_neg_infinity() {
        let data = default_dataset();
        let module = build_module_b(OutlierRegressionParams::default(), data.covariates, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = module.regenerate(&[Value::Int(2)], &[Value::RealVector(data.responses)], &mut rng).unwrap();
        assert!(r.log_weight.is_neg_infinite());
    }

    #[test]
    fn frozen_dataset_regenerates_bit_identically() {
        let params = OutlierRegressionParams::default();
        let regenerated = generate_dataset(&params, 9, &DATASET_OUTLIERS, DATASET_SEED);
        let frozen = default_dataset();
        assert_eq!(frozen.covariates.len(), 9);
        assert_eq!(regenerated.covariates, frozen.covariates);
        assert_eq!(regenerated.line, frozen.line);
        for (a, b) in regenerated.responses.iter().zip(&frozen.responses) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn switch_regression_network_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut built = build_switch_regression_network(
            &SwitchRegressionModel::default(),
            5,
            1000,
            1.0,
            InverseStructure::Minimal,
            &mut rng,
        )
        .unwrap();
        let net = &built.network;
        assert_eq!(net.topological_order(), &[built.switch_node, built.regression_node]);
        assert_eq!(net.observed_set(), vec![built.regression_node]);
        built.network.initialize(&mut rng).unwrap();
        assert!(built.network.total_log_weight().unwrap().get().is_finite());
    }

    fn exact_switch_marginal(p: &SwitchParams) -> f64 {
        let model = oracle::switch_model(p.u1, p.u2, p.u3, p.a);
        let a = model.index_of("a").unwrap();
        oracle::evidence(&model, &[(a, 1)]).unwrap()
    }

    #[test]
    fn switch_module_simulates_its_marginal() {
        let params = SwitchParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let module = build_module_a(&params, 100, 1.0, InverseStructure::Minimal, &mut rng).unwrap();
        let draws = 1_000_000;
        let ones = (0..draws).filter(|_| module.simulate(&[], &mut rng).unwrap().outputs[0] == Value::Int(1)).count();
        let exact = exact_switch_marginal(&params);
        let estimate = ones as f64 / draws as f64;
        let se = (exact * (1.0 - exact) / draws as f64).sqrt();
        assert!((estimate - exact).abs() < 4.0 * se, "{estimate} vs {exact}");
    }

    #[test]
    fn gross_outliers_raise_the_switch_posterior() {
        let model = SwitchRegressionModel::default();
        let leaf = oracle::RegressionLeaf {
            prior_mean: model.regression.prior_mean,
            prior_variance: model.regression.prior_variance,
            inlier_sd: model.regression.inlier_sd,
            outlier_sd: model.regression.outlier_sd,
            covariates: model.dataset.covariates.clone(),
            responses: model.dataset.responses.clone(),
        };
        let p = &model.switch;
        let switch = oracle::switch_model(p.u1, p.u2, p.u3, p.a);
        let a = switch.index_of("a").unwrap();
        let joint = oracle::joint_switch_regression(&switch, model.regression.outlier_prob, leaf);
        let posterior = oracle::posterior(&joint, &[], &[a]).unwrap()[&vec![1]];
        assert!(posterior > exact_switch_marginal(p));
    }
}
