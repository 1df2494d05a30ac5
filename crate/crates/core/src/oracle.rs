//! Brute-force exact inference for the small models used in verification.
//!
//! Deliberately independent of the inference engine: every density here is
//! written out from the model definitions, with its own log-sum-exp and
//! Gaussian helpers. Only [`Value`] is shared, for observations.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::Value;

/// Largest number of joint configurations the oracle will enumerate.
pub const MAX_CONFIGURATIONS: u128 = 1 << 20;

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleVariable {
    pub name: String,
    pub arity: usize,
    /// Indices of earlier variables.
    pub parents: Vec<usize>,
    /// Row per parent configuration, first parent most significant.
    pub cpt: Vec<Vec<f64>>,
}

/// Log-likelihood of a continuous observation given a discrete configuration.
pub type LeafLikelihood = Arc<dyn Fn(&[usize]) -> f64 + Send + Sync>;

/// Discrete variables in topological order with an optional continuous leaf.
#[derive(Clone)]
pub struct FactoredDiscreteModel {
    pub variables: Vec<OracleVariable>,
    pub leaf: Option<LeafLikelihood>,
}

/// One row of the joint: configuration and its log probability (or log
/// density, when a continuous leaf is present).
#[derive(Clone, Debug, PartialEq)]
pub struct JointRow {
    pub values: Vec<usize>,
    pub log_p: f64,
}

impl FactoredDiscreteModel {
    pub fn discrete(variables: Vec<OracleVariable>) -> Self {
        FactoredDiscreteModel { variables, leaf: None }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    fn configuration_count(&self) -> u128 {
        self.variables.iter().fold(1u128, |n, v| n.saturating_mul(v.arity as u128))
    }

    fn log_prob(&self, values: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (i, v) in self.variables.iter().enumerate() {
            let row = v.parents.iter().fold(0, |r, &p| r * self.variables[p].arity + values[p]);
            lp += v.cpt[row][values[i]].ln();
        }
        match &self.leaf {
            Some(leaf) if lp > f64::NEG_INFINITY => lp + leaf(values),
            _ => lp,
        }
    }
}

/// Every configuration with its joint log probability, in lexicographic
/// order (last variable fastest).
pub fn enumerate_joint(model: &FactoredDiscreteModel) -> Result<Vec<JointRow>> {
    let count = model.configuration_count();
    if count > MAX_CONFIGURATIONS {
        return Err(Error::StateSpaceTooLarge(count, MAX_CONFIGURATIONS));
    }
    let n = model.variables.len();
    let mut rows = Vec::with_capacity(count as usize);
    let mut values = vec![0usize; n];
    loop {
        rows.push(JointRow { values: values.clone(), log_p: model.log_prob(&values) });
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(rows);
            }
            i -= 1;
            values[i] += 1;
            if values[i] < model.variables[i].arity {
                break;
            }
            values[i] = 0;
        }
    }
}

fn consistent(values: &[usize], observation: &[(usize, usize)]) -> bool {
    observation.iter().all(|&(var, val)| values[var] == val)
}

/// `log p(observation)`, marginalizing everything else (including the
/// continuous leaf's observation, which is fixed inside the model).
pub fn log_evidence(model: &FactoredDiscreteModel, observation: &[(usize, usize)]) -> Result<f64> {
    let rows = enumerate_joint(model)?;
    Ok(log_sum_exp(rows.iter().filter(|r| consistent(&r.values, observation)).map(|r| r.log_p)))
}

pub fn evidence(model: &FactoredDiscreteModel, observation: &[(usize, usize)]) -> Result<f64> {
    log_evidence(model, observation).map(f64::exp)
}

/// `P(query | observation)` as a map from query configurations to probabilities.
pub fn posterior(
    model: &FactoredDiscreteModel,
    observation: &[(usize, usize)],
    query: &[usize],
) -> Result<BTreeMap<Vec<usize>, f64>> {
    let rows = enumerate_joint(model)?;
    let mut grouped: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| consistent(&r.values, observation)) {
        grouped.entry(query.iter().map(|&q| r.values[q]).collect()).or_default().push(r.log_p);
    }
    let logs: BTreeMap<Vec<usize>, f64> = grouped.into_iter().map(|(k, v)| (k, log_sum_exp(v))).collect();
    let total = log_sum_exp(logs.values().copied());
    if total == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability);
    }
    Ok(logs.into_iter().map(|(k, l)| (k, (l - total).exp())).collect())
}

fn bern(p: f64) -> Vec<f64> {
    vec![1.0 - p, p]
}

fn binary(name: &str, parents: Vec<usize>, cpt: Vec<Vec<f64>>) -> OracleVariable {
    OracleVariable { name: name.into(), arity: 2, parents, cpt }
}

/// The switch chain `u1 -> u2 -> u3 -> a`, from `P(child = 1 | parent)` pairs.
pub fn switch_model(u1: f64, u2: [f64; 2], u3: [f64; 2], a: [f64; 2]) -> FactoredDiscreteModel {
    FactoredDiscreteModel::discrete(vec![
        binary("u1", vec![], vec![bern(u1)]),
        binary("u2", vec![0], vec![bern(u2[0]), bern(u2[1])]),
        binary("u3", vec![1], vec![bern(u3[0]), bern(u3[1])]),
        binary("a", vec![2], vec![bern(a[0]), bern(a[1])]),
    ])
}

/// Constants of the conjugate regression leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionLeaf {
    pub prior_mean: [f64; 2],
    pub prior_variance: [f64; 2],
    pub inlier_sd: f64,
    pub outlier_sd: f64,
    pub covariates: Vec<f64>,
    pub responses: Vec<f64>,
}

impl RegressionLeaf {
    /// `log N(b; H m0, H S0 H' + D)` with `D = diag(sd_i^2)`, evaluated in
    /// the 2x2 parameter space:
    /// `|C| = |D| |S0| |L|` and `C^-1 = D^-1 - D^-1 H L^-1 H' D^-1` with
    /// `L = S0^-1 + H' D^-1 H`.
    pub fn log_marginal(&self, outlier: &[bool]) -> f64 {
        let n = self.covariates.len();
        let mut lam = [[1.0 / self.prior_variance[0], 0.0], [0.0, 1.0 / self.prior_variance[1]]];
        let mut g = [0.0; 2];
        let mut rdr = 0.0;
        let mut log_det_d = 0.0;
        for i in 0..n {
            let sd = if outlier[i] { self.outlier_sd } else { self.inlier_sd };
            let w = 1.0 / (sd * sd);
            let x = self.covariates[i];
            let r = self.responses[i] - self.prior_mean[0] - self.prior_mean[1] * x;
            lam[0][0] += w;
            lam[0][1] += w * x;
            lam[1][0] += w * x;
            lam[1][1] += w * x * x;
            g[0] += w * r;
            g[1] += w * x * r;
            rdr += w * r * r;
            log_det_d += 2.0 * sd.ln();
        }
        let det_lam = lam[0][0] * lam[1][1] - lam[0][1] * lam[1][0];
        let quad_correction = (lam[1][1] * g[0] * g[0] - 2.0 * lam[0][1] * g[0] * g[1] + lam[0][0] * g[1] * g[1]) / det_lam;
        let log_det_c = log_det_d + (self.prior_variance[0] * self.prior_variance[1]).ln() + det_lam.ln();
        -0.5 * (n as f64 * (2.0 * PI).ln() + log_det_c + rdr - quad_correction)
    }
}

/// `log N(b; m, C)` by an n x n Cholesky factorization.
pub fn dense_gaussian_logpdf(b: &[f64], m: &[f64], c: &[Vec<f64>]) -> f64 {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = c[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - m[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let log_det: f64 = (0..n).map(|i| 2.0 * l[i][i].ln()).sum();
    -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + y.iter().map(|v| v * v).sum::<f64>())
}

impl RegressionLeaf {
    fn noise_sd(&self, outlier: bool) -> f64 {
        if outlier {
            self.outlier_sd
        } else {
            self.inlier_sd
        }
    }

    /// Marginal of `b` as a dense Gaussian, `(mean, covariance)`.
    pub fn dense_marginal(&self, outlier: &[bool]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let xs = &self.covariates;
        let mean = xs.iter().map(|x| self.prior_mean[0] + self.prior_mean[1] * x).collect();
        let cov = (0..xs.len())
            .map(|i| {
                (0..xs.len())
                    .map(|j| {
                        let noise = if i == j { self.noise_sd(outlier[i]).powi(2) } else { 0.0 };
                        self.prior_variance[0] + self.prior_variance[1] * xs[i] * xs[j] + noise
                    })
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    /// Posterior `(mean, covariance)` of `(intercept, slope)` given all points,
    /// by inverting the 2x2 posterior precision.
    pub fn line_posterior(&self, outlier: &[bool]) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut prec = [[1.0 / self.prior_variance[0], 0.0], [0.0, 1.0 / self.prior_variance[1]]];
        let mut rhs = [self.prior_mean[0] * prec[0][0], self.prior_mean[1] * prec[1][1]];
        for (i, (&x, &b)) in self.covariates.iter().zip(&self.responses).enumerate() {
            let w = self.noise_sd(outlier[i]).powi(-2);
            prec[0][0] += w;
            prec[0][1] += w * x;
            prec[1][0] += w * x;
            prec[1][1] += w * x * x;
            rhs[0] += w * b;
            rhs[1] += w * x * b;
        }
        let det = prec[0][0] * prec[1][1] - prec[0][1] * prec[1][0];
        let cov = [[prec[1][1] / det, -prec[0][1] / det], [-prec[1][0] / det, prec[0][0] / det]];
        let mean = [cov[0][0] * rhs[0] + cov[0][1] * rhs[1], cov[1][0] * rhs[0] + cov[1][1] * rhs[1]];
        (mean, cov)
    }
}

/// Outlier indicators given a fixed switch value, with the regression leaf.
pub fn regression_given_switch(outlier_prob: f64, leaf: RegressionLeaf) -> FactoredDiscreteModel {
    let n = leaf.covariates.len();
    let variables = (0..n).map(|i| binary(&format!("outlier{i}"), vec![], vec![bern(outlier_prob)])).collect();
    FactoredDiscreteModel { variables, leaf: Some(indicator_leaf(leaf, 0)) }
}

fn indicator_leaf(leaf: RegressionLeaf, offset: usize) -> LeafLikelihood {
    Arc::new(move |values: &[usize]| {
        let outlier: Vec<bool> = values[offset..].iter().map(|&v| v == 1).collect();
        leaf.log_marginal(&outlier)
    })
}

/// The full two-module model: switch chain, then indicators depending on `a`,
/// then the regression leaf. Variable `a` has index 3.
pub fn joint_switch_regression(
    switch: &FactoredDiscreteModel,
    outlier_prob: [f64; 2],
    leaf: RegressionLeaf,
) -> FactoredDiscreteModel {
    let a = switch.index_of("a").expect("switch model has `a`");
    let offset = switch.variables.len();
    let mut variables = switch.variables.clone();
    for i in 0..leaf.covariates.len() {
        variables.push(binary(&format!("outlier{i}"), vec![a], vec![bern(outlier_prob[0]), bern(outlier_prob[1])]));
    }
    FactoredDiscreteModel { variables, leaf: Some(indicator_leaf(leaf, offset)) }
}

/// Binary HMM with `steps` hidden states and observations, interleaved
/// `h_1, y_1, h_2, y_2, ...`, for a fixed switch value selecting `P(h_1 = 1)`.
pub fn hmm_model(initial: f64, transition: [f64; 2], emission: [f64; 2], steps: usize) -> FactoredDiscreteModel {
    let mut variables = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        if t == 0 {
            variables.push(binary("h0", vec![], vec![bern(initial)]));
        } else {
            variables.push(binary(&format!("h{t}"), vec![2 * t - 2], vec![bern(transition[0]), bern(transition[1])]));
        }
        variables.push(binary(&format!("y{t}"), vec![2 * t], vec![bern(emission[0]), bern(emission[1])]));
    }
    FactoredDiscreteModel::discrete(variables)
}

/// Observation pairs binding the HMM's `y` variables to `ys`.
pub fn hmm_observation(ys: &[i64]) -> Vec<(usize, usize)> {
    ys.iter().enumerate().map(|(t, &y)| (2 * t + 1, y as usize)).collect()
}

/// Read binary observations out of a [`Value`].
pub fn binary_observations(value: &Value) -> Result<Vec<i64>> {
    match value {
        Value::IntVector(v) if v.iter().all(|x| matches!(x, 0 | 1)) => Ok(v.clone()),
        Value::Int(x @ (0 | 1)) => Ok(vec![*x]),
        other => Err(Error::Config(format!("expected binary observations, got {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(covariates: Vec<f64>, responses: Vec<f64>, outlier_sd: f64) -> RegressionLeaf {
        RegressionLeaf { prior_mean: [0.0, 0.0], prior_variance: [1.0, 0.25], inlier_sd: 0.22, outlier_sd, covariates, responses }
    }

    fn nine_points() -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (0..9).map(|i| -1.0 + i as f64 / 4.0).collect();
        let bs = vec![-0.3, 0.1, -4.0, 0.2, 0.5, 0.4, 2.2, 0.9, 0.8];
        (xs, bs)
    }

    #[test]
    fn single_bernoulli_table() {
        let m = FactoredDiscreteModel::discrete(vec![binary("x", vec![], vec![bern(0.3)])]);
        let rows = enumerate_joint(&m).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].log_p.exp() - 0.7).abs() < 1e-15);
        assert!((evidence(&m, &[(0, 1)]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_node_chain_by_hand() {
        let m = FactoredDiscreteModel::discrete(vec![
            binary("x", vec![], vec![bern(0.4)]),
            binary("y", vec![0], vec![bern(0.2), bern(0.9)]),
        ]);
        let rows = enumerate_joint(&m).unwrap();
        let expected = [0.6 * 0.8, 0.6 * 0.2, 0.4 * 0.1, 0.4 * 0.9];
        for (r, e) in rows.iter().zip(expected) {
            assert!((r.log_p.exp() - e).abs() < 1e-15);
        }
        let post = posterior(&m, &[(1, 1)], &[0]).unwrap();
        let p1 = 0.4 * 0.9 / (0.4 * 0.9 + 0.6 * 0.2);
        assert!((post[&vec![1]] - p1).abs() < 1e-14);
    }

    #[test]
    fn deterministic_consistent_observation_has_evidence_one() {
        let m = FactoredDiscreteModel::discrete(vec![binary("x", vec![], vec![vec![0.0, 1.0]])]);
        assert_eq!(evidence(&m, &[(0, 1)]).unwrap(), 1.0);
        assert!(matches!(posterior(&m, &[(0, 0)], &[0]), Err(Error::ZeroProbability)));
    }

    #[test]
    fn switch_model_joint_is_normalized() {
        let m = switch_model(0.5, [0.2, 0.7], [0.1, 0.9], [0.15, 0.8]);
        let rows = enumerate_joint(&m).unwrap();
        assert_eq!(rows.len(), 16);
        let total: f64 = rows.iter().map(|r| r.log_p.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        // P(u2=1) = .45, P(u3=1) = .46, P(a=1) = .46 * .8 + .54 * .15.
        assert!((evidence(&m, &[(3, 1)]).unwrap() - 0.449).abs() < 1e-12);
    }

    #[test]
    fn state_space_limit() {
        let vars = (0..21).map(|i| binary(&format!("v{i}"), vec![], vec![bern(0.5)])).collect();
        let m = FactoredDiscreteModel::discrete(vars);
        assert!(matches!(enumerate_joint(&m), Err(Error::StateSpaceTooLarge(..))));
    }

    #[test]
    fn closed_form_marginal_matches_dense_gaussian() {
        let (xs, bs) = nine_points();
        let l = leaf(xs.clone(), bs.clone(), 3.16);
        let outlier: Vec<bool> = (0..9).map(|i| i == 2 || i == 6).collect();
        let (mean, cov) = l.dense_marginal(&outlier);
        let dense = dense_gaussian_logpdf(&bs, &mean, &cov);
        assert!((l.log_marginal(&outlier) - dense).abs() < 1e-10);
    }

    #[test]
    fn equal_noise_collapses_to_single_gaussian() {
        let (xs, bs) = nine_points();
        let l = leaf(xs, bs, 0.22);
        let single = l.log_marginal(&[false; 9]);
        for p in [0.01, 0.1, 0.7] {
            let m = regression_given_switch(p, l.clone());
            assert!((log_evidence(&m, &[]).unwrap() - single).abs() < 1e-10);
        }
    }

    #[test]
    fn two_point_evidence_matches_quadrature() {
        let l = leaf(vec![-0.5, 0.5], vec![0.1, 1.4], 3.16);
        let p = 0.3;
        let m = regression_given_switch(p, l.clone());
        let exact = evidence(&m, &[]).unwrap();
        // Midpoint rule over (intercept, slope) on +/- 8 prior sds.
        let (n, half) = (1200, 8.0);
        let (h0, h1) = (2.0 * half * 1.0 / n as f64, 2.0 * half * 0.5 / n as f64);
        let normal = |x: f64, m: f64, sd: f64| (-(x - m) * (x - m) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt());
        let mut total = 0.0;
        for i in 0..n {
            let c = -half + (i as f64 + 0.5) * h0;
            for j in 0..n {
                let s = -half * 0.5 + (j as f64 + 0.5) * h1;
                let mut lik = 1.0;
                for k in 0..2 {
                    let mean = c + s * l.covariates[k];
                    lik *= (1.0 - p) * normal(l.responses[k], mean, 0.22) + p * normal(l.responses[k], mean, 3.16);
                }
                total += normal(c, 0.0, 1.0) * normal(s, 0.0, 0.5) * lik * h0 * h1;
            }
        }
        assert!(((total - exact) / exact).abs() < 1e-6, "quadrature {total} vs oracle {exact}");
    }

    #[test]
    fn joint_model_posterior_matches_evidence_weighted_prior() {
        let (xs, bs) = nine_points();
        let l = leaf(xs, bs, 3.16);
        let switch = switch_model(0.5, [0.2, 0.7], [0.1, 0.9], [0.15, 0.8]);
        let joint = joint_switch_regression(&switch, [0.01, 0.1], l.clone());
        let post = posterior(&joint, &[], &[3]).unwrap();
        let e0 = log_evidence(&regression_given_switch(0.01, l.clone()), &[]).unwrap();
        let e1 = log_evidence(&regression_given_switch(0.1, l), &[]).unwrap();
        let (p0, p1) = (0.551 * e0.exp(), 0.449 * e1.exp());
        assert!((post[&vec![1]] - p1 / (p0 + p1)).abs() < 1e-9);
        assert!((post.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hmm_evidence_by_forward_recursion() {
        let (init, tr, em) = (0.7, [0.25, 0.8], [0.15, 0.85]);
        let ys = [1, 0, 1, 1];
        let m = hmm_model(init, tr, em, 4);
        let oracle = evidence(&m, &hmm_observation(&ys)).unwrap();
        let lik = |h: usize, y: i64| if y == 1 { em[h] } else { 1.0 - em[h] };
        let mut alpha = [(1.0 - init) * lik(0, ys[0]), init * lik(1, ys[0])];
        for &y in &ys[1..] {
            let next1 = alpha[0] * tr[0] + alpha[1] * tr[1];
            let next0 = alpha[0] * (1.0 - tr[0]) + alpha[1] * (1.0 - tr[1]);
            alpha = [next0 * lik(0, y), next1 * lik(1, y)];
        }
        assert!((oracle - (alpha[0] + alpha[1])).abs() < 1e-15);
    }
}
