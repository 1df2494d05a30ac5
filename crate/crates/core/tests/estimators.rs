//! Moment identities of the module weight estimators.

use modnet::hmm::{BinaryHmm, HmmParams};
use modnet::inverse::InverseStructure;
use modnet::oracle::{self, RegressionLeaf};
use modnet::regression::{
    build_module_a, build_module_b_with, default_dataset, IndicatorProposal, OutlierRegressionParams, SwitchParams,
};
use modnet::smc::make_smc_module;
use modnet::{ProbModule, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean and standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// For discrete outputs, `E[exp(-lw)]` under `simulate` is the number of
/// output values: each `z` contributes `p(z) * 1 / p(z)` through the
/// module's joint over `(u, z)`.
fn harmonic_check(module: &dyn ProbModule, inputs: &[Value], support: f64, draws: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..draws).map(|_| (-module.simulate(inputs, &mut rng).unwrap().log_weight.get()).exp()).collect();
    let (mean, se) = mean_se(&xs);
    assert!((mean - support).abs() < 4.0 * se, "E[exp(-lw)] = {mean:.4} +- {se:.4}, want {support}");
}

#[test]
fn conditional_smc_simulate_satisfies_harmonic_identity() {
    for particles in [1, 2, 10] {
        let module = make_smc_module(BinaryHmm::new(HmmParams::default()), particles).unwrap();
        for a in [0, 1] {
            harmonic_check(&module, &[Value::Int(a)], 16.0, 40_000, 100 + particles as u64);
        }
    }
}

#[test]
fn inverse_module_simulate_satisfies_harmonic_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let module = build_module_a(&SwitchParams::default(), 50, 1.0, InverseStructure::Minimal, &mut rng).unwrap();
    harmonic_check(&module, &[], 2.0, 40_000, 8);
}

fn leaf(n: usize) -> RegressionLeaf {
    let data = default_dataset();
    let params = OutlierRegressionParams::default();
    RegressionLeaf {
        prior_mean: params.prior_mean,
        prior_variance: params.prior_variance,
        inlier_sd: params.inlier_sd,
        outlier_sd: params.outlier_sd,
        covariates: data.covariates[..n].to_vec(),
        responses: data.responses[..n].to_vec(),
    }
}

fn unbiased_check(proposal: IndicatorProposal, points: usize, particles: usize, a: i64, seed: u64) {
    let leaf = leaf(points);
    let params = OutlierRegressionParams::default();
    let exact = oracle::log_evidence(&oracle::regression_given_switch(params.outlier_prob[a as usize], leaf.clone()), &[])
        .unwrap();
    let module = build_module_b_with(params, leaf.covariates.clone(), particles, proposal).unwrap();
    let outputs = [Value::real_vector(leaf.responses.clone()).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratios: Vec<f64> = (0..20_000)
        .map(|_| (module.regenerate(&[Value::Int(a)], &outputs, &mut rng).unwrap().log_weight.get() - exact).exp())
        .collect();
    let (mean, se) = mean_se(&ratios);
    assert!(
        (mean - 1.0).abs() < 4.0 * se,
        "{proposal:?} n={points} K={particles} a={a}: ratio {mean:.4} +- {se:.4}"
    );
}

#[test]
fn adapted_regression_weights_are_unbiased() {
    for (i, particles) in [1, 5, 30].into_iter().enumerate() {
        for a in [0, 1] {
            unbiased_check(IndicatorProposal::Adapted, 9, particles, a, 40 + 2 * i as u64 + a as u64);
        }
    }
}

#[test]
fn prior_proposal_weights_are_unbiased_without_gross_outliers() {
    // The prior proposal is valid but its variance explodes once a point
    // sits many inlier deviations off the line, so use the clean prefix.
    for (i, particles) in [1, 5, 30].into_iter().enumerate() {
        unbiased_check(IndicatorProposal::Prior, 2, particles, 1, 60 + i as u64);
    }
}
