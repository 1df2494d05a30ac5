//! Browser demo for the switch/regression network.
//!
//! Each export takes plain numbers and returns a JSON string; the page in
//! `www/` draws it on canvases. The same functions are callable natively.

use modnet::experiment::{switch_regression_fixture, Fixture};
use modnet::inverse::InverseStructure;
use modnet::mh::{self, Scan};
use modnet::regression::{
    build_module_b, build_switch_regression_network, Line, SwitchRegressionModel, REGRESSION_NODE,
};
use modnet::smc::SmcTrace;
use modnet::{Error, ProbModule, Result, Value};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Training samples for the switch module's inverse; small enough to build
/// in a browser tab in well under a second.
pub const DEMO_TRAIN_SAMPLES: usize = 20_000;

/// Histogram window relative to the exact log-evidence.
const WINDOW: (f64, f64) = (-2.0, 0.5);

fn check_range(name: &str, value: usize, max: usize) -> Result<()> {
    if (1..=max).contains(&value) {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be in 1..={max}, got {value}")))
    }
}

fn check_switch(a: i64) -> Result<()> {
    if a == 0 || a == 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("`a` must be 0 or 1, got {a}")))
    }
}

fn exact(model: &SwitchRegressionModel) -> Result<([f64; 2], f64)> {
    match switch_regression_fixture(model)? {
        Fixture::SwitchRegression { log_evidence, posterior_a1, .. } => Ok((log_evidence, posterior_a1)),
        _ => unreachable!("switch_regression_fixture returns the regression variant"),
    }
}

fn observed(model: &SwitchRegressionModel) -> Result<[Value; 1]> {
    Ok([Value::real_vector(model.dataset.responses.clone())?])
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightHistogram {
    pub a: i64,
    pub particles: usize,
    pub exact_log_evidence: f64,
    pub mean: f64,
    pub variance: f64,
    /// `bins + 1` edges spanning the window around the exact value.
    pub edges: Vec<f64>,
    pub counts: Vec<u32>,
    pub below: u32,
    pub above: u32,
}

/// Histogram of `runs` regeneration log-weights of the regression module.
pub fn weight_histogram(a: i64, particles: usize, runs: usize, bins: usize, seed: u64) -> Result<WeightHistogram> {
    check_switch(a)?;
    check_range("particles", particles, 1_000)?;
    check_range("runs", runs, 100_000)?;
    check_range("bins", bins, 200)?;
    let model = SwitchRegressionModel::default();
    let (log_evidence, _) = exact(&model)?;
    let target = log_evidence[a as usize];
    let module = build_module_b(model.regression.clone(), model.dataset.covariates.clone(), particles)?;
    let outputs = observed(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lws = (0..runs)
        .map(|_| Ok(module.regenerate(&[Value::Int(a)], &outputs, &mut rng)?.log_weight.get()))
        .collect::<Result<Vec<f64>>>()?;
    let (mean, variance) = mh::mean_variance(lws.iter().copied());
    let (lo, hi) = (target + WINDOW.0, target + WINDOW.1);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    let (mut below, mut above) = (0, 0);
    for lw in lws {
        if lw < lo {
            below += 1;
        } else if lw >= hi {
            above += 1;
        } else {
            counts[(((lw - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(WeightHistogram { a, particles, exact_log_evidence: target, mean, variance, edges, counts, below, above })
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainTrace {
    pub particles: usize,
    pub a: Vec<i64>,
    pub total_log_weight: Vec<f64>,
    pub accepted: Vec<bool>,
    pub estimate_a1: f64,
    pub exact_a1: f64,
}

/// An MH chain on the switch, alternating flips with weight refreshes.
pub fn chain_trace(iterations: usize, particles: usize, seed: u64) -> Result<ChainTrace> {
    check_range("iterations", iterations, 200_000)?;
    check_range("particles", particles, 1_000)?;
    let model = SwitchRegressionModel::default();
    let (_, exact_a1) = exact(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_switch_regression_network(
        &model,
        particles,
        DEMO_TRAIN_SAMPLES,
        1.0,
        InverseStructure::Minimal,
        &mut rng,
    )?;
    net.network.initialize(&mut rng)?;
    let mut records = Vec::with_capacity(iterations);
    mh::run_chain(&mut net.network, &net.schedule, iterations, Scan::Cyclic, &mut rng, &mut records)?;
    let slot = net.network.unobserved().iter().position(|&id| id == net.switch_node).expect("switch is latent");
    let a: Vec<i64> = records.iter().map(|r| r.values[slot][0].as_int().unwrap_or(-1)).collect();
    let estimate_a1 = a.iter().filter(|&&v| v == 1).count() as f64 / a.len() as f64;
    Ok(ChainTrace {
        particles,
        total_log_weight: records.iter().map(|r| r.total_log_weight).collect(),
        accepted: records.iter().map(|r| r.accepted).collect(),
        a,
        estimate_a1,
        exact_a1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PosteriorLines {
    pub covariates: Vec<f64>,
    pub responses: Vec<f64>,
    pub generating_line: Line,
    pub lines: Vec<Line>,
    /// Fraction of draws flagging each point as an outlier.
    pub outlier_frequency: Vec<f64>,
}

/// Lines and outlier flags carried by `count` regenerations of the
/// regression module at `a = 1`.
pub fn posterior_lines(count: usize, particles: usize, seed: u64) -> Result<PosteriorLines> {
    check_range("count", count, 2_000)?;
    check_range("particles", particles, 1_000)?;
    let model = SwitchRegressionModel::default();
    let module = build_module_b(model.regression.clone(), model.dataset.covariates.clone(), particles)?;
    let outputs = observed(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(count);
    let mut flagged = vec![0.0; model.dataset.covariates.len()];
    for _ in 0..count {
        let r = module.regenerate(&[Value::Int(1)], &outputs, &mut rng)?;
        let trace = r
            .aux
            .downcast_ref::<SmcTrace<i64, Line>>()
            .ok_or_else(|| Error::Contract(format!("{REGRESSION_NODE} returned an unexpected trace")))?;
        lines.push(trace.extra);
        for (f, &o) in flagged.iter_mut().zip(&trace.latents) {
            *f += o as f64 / count as f64;
        }
    }
    Ok(PosteriorLines {
        covariates: model.dataset.covariates.clone(),
        responses: model.dataset.responses.clone(),
        generating_line: model.dataset.line,
        lines,
        outlier_frequency: flagged,
    })
}

fn to_js<T: Serialize>(result: Result<T>) -> std::result::Result<String, JsError> {
    result
        .and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = weightHistogram)]
pub fn weight_histogram_js(a: i32, particles: u32, runs: u32, bins: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(weight_histogram(i64::from(a), particles as usize, runs as usize, bins as usize, u64::from(seed)))
}

#[wasm_bindgen(js_name = chainTrace)]
pub fn chain_trace_js(iterations: u32, particles: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(chain_trace(iterations as usize, particles as usize, u64::from(seed)))
}

#[wasm_bindgen(js_name = posteriorLines)]
pub fn posterior_lines_js(count: u32, particles: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(posterior_lines(count as usize, particles as usize, u64::from(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_accounts_for_every_run() {
        let h = weight_histogram(1, 10, 500, 25, 1).unwrap();
        assert_eq!(h.edges.len(), 26);
        assert_eq!(h.counts.iter().sum::<u32>() + h.below + h.above, 500);
        assert!((h.mean - h.exact_log_evidence).abs() < 0.1);
    }

    #[test]
    fn chain_trace_is_reproducible() {
        let first = chain_trace(600, 5, 3).unwrap();
        assert_eq!(first.a.len(), 600);
        assert!(first.a.iter().all(|a| *a == 0 || *a == 1));
        let again = chain_trace(600, 5, 3).unwrap();
        assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn gross_outlier_is_flagged() {
        let p = posterior_lines(200, 10, 4).unwrap();
        assert_eq!(p.lines.len(), 200);
        let gross = p
            .responses
            .iter()
            .zip(&p.covariates)
            .map(|(b, x)| (b - p.generating_line.at(*x)).abs())
            .enumerate()
            .max_by(|l, r| l.1.total_cmp(&r.1))
            .unwrap()
            .0;
        assert!(p.outlier_frequency[gross] > 0.99);
    }

    #[test]
    fn out_of_range_arguments_are_rejected() {
        assert!(weight_histogram(2, 10, 10, 10, 0).unwrap_err().to_string().contains("`a`"));
        assert!(chain_trace(0, 5, 0).unwrap_err().to_string().contains("iterations"));
        assert!(posterior_lines(10, 0, 0).unwrap_err().to_string().contains("particles"));
    }
}
