//! Network-level properties checked against exact enumeration.

use std::collections::BTreeMap;
use std::sync::Arc;

use modnet::document::{BuildContext, NetworkDocument};
use modnet::inverse::InverseStructure;
use modnet::mh::{self, Flip, Refresh, Scan, SiteProposal};
use modnet::oracle;
use modnet::validate::{exact_test_network, ExactTestNetwork};
use modnet::{ModuleNetwork, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const OBSERVED_Y: [i64; 4] = [1, 0, 1, 1];

/// Switch prior feeding a four-step binary HMM, optionally observing `y`.
fn switch_hmm(observe: bool, rng: &mut ChaCha8Rng) -> ModuleNetwork {
    let observations = if observe {
        r#", "observations": {"H": {"y": {"kind": "int_vector", "value": [1, 0, 1, 1]}}}"#
    } else {
        ""
    };
    let doc = NetworkDocument::from_json(&format!(
        r#"{{
          "nodes": [
            {{"id": "A", "type": "switch_prior", "params": {{"u1": 0.5, "u2": [0.2, 0.7], "u3": [0.1, 0.9], "a": [0.15, 0.8]}}}},
            {{"id": "H", "type": "hmm", "params": {{"initial": [0.2, 0.7], "transition": [0.25, 0.8], "emission": [0.15, 0.85], "steps": 4}}}}
          ],
          "edges": [{{"from": "A.a", "to": "H.a"}}]{observations}
        }}"#
    ))
    .unwrap();
    let mut ctx =
        BuildContext { particles: 3, train_samples: 2_000, smoothing: 1.0, inverse_structure: InverseStructure::Minimal, rng };
    doc.build(&mut ctx).unwrap()
}

/// Exact `P(a)` and `p(y | a)` for the network above.
fn exact_switch_hmm() -> ([f64; 2], impl Fn(usize, &[i64]) -> f64) {
    let switch = oracle::switch_model(0.5, [0.2, 0.7], [0.1, 0.9], [0.15, 0.8]);
    let a = switch.index_of("a").unwrap();
    let marginal = oracle::posterior(&switch, &[], &[a]).unwrap();
    let p_a = [marginal[&vec![0]], marginal[&vec![1]]];
    let initial = [0.2, 0.7];
    let likelihood = move |a: usize, y: &[i64]| {
        let model = oracle::hmm_model(initial[a], [0.25, 0.8], [0.15, 0.85], 4);
        oracle::evidence(&model, &oracle::hmm_observation(y)).unwrap()
    };
    (p_a, likelihood)
}

#[test]
fn forward_simulation_matches_declarative_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = switch_hmm(false, &mut rng);
    let (a_id, h_id) = (net.id_of("A").unwrap(), net.id_of("H").unwrap());
    let draws = 40_000;
    let mut counts: BTreeMap<(i64, Vec<i64>), f64> = BTreeMap::new();
    for _ in 0..draws {
        net.initialize(&mut rng).unwrap();
        let a = net.outputs(a_id).unwrap()[0].as_int().unwrap();
        let y = oracle::binary_observations(&net.outputs(h_id).unwrap()[0]).unwrap();
        *counts.entry((a, y)).or_default() += 1.0;
    }
    let (p_a, likelihood) = exact_switch_hmm();
    let mut statistic = 0.0;
    let mut cells = 0;
    for a in 0..2 {
        for mask in 0..16u32 {
            let y: Vec<i64> = (0..4).map(|t| i64::from(mask >> t & 1)).collect();
            let expected = draws as f64 * p_a[a] * likelihood(a, &y);
            let observed = counts.get(&(a as i64, y)).copied().unwrap_or(0.0);
            statistic += (observed - expected).powi(2) / expected;
            cells += 1;
        }
    }
    let p_value = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(statistic);
    assert!(p_value > 1e-3, "chi-square {statistic:.1} on {} dof, p = {p_value:.2e}", cells - 1);
}

#[test]
fn switch_into_hmm_chain_targets_exact_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = switch_hmm(true, &mut rng);
    let schedule = vec![
        SiteProposal::new(&net, "A", "a", Arc::new(Flip)).unwrap(),
        SiteProposal::new(&net, "A", "a", Arc::new(Refresh)).unwrap(),
    ];
    net.initialize(&mut rng).unwrap();
    let mut records = Vec::new();
    mh::run_chain(&mut net, &schedule, 60_000, Scan::Cyclic, &mut rng, &mut records).unwrap();
    let a_id = net.id_of("A").unwrap();
    let slot = net.unobserved().iter().position(|&id| id == a_id).unwrap();
    let estimate =
        records.iter().filter(|r| r.values[slot][0] == Value::Int(1)).count() as f64 / records.len() as f64;

    let (p_a, likelihood) = exact_switch_hmm();
    let joint = [p_a[0] * likelihood(0, &OBSERVED_Y), p_a[1] * likelihood(1, &OBSERVED_Y)];
    let exact = joint[1] / (joint[0] + joint[1]);
    assert!((estimate - exact).abs() < 0.02, "estimate {estimate:.4} vs exact {exact:.4}");
}

#[test]
fn exact_modules_give_textbook_metropolis_hastings() {
    // With exact modules the total weight is the log joint of the current
    // configuration, so the acceptance ratio is the textbook one.
    let ExactTestNetwork { mut network, schedule, oracle } = exact_test_network().unwrap();
    let joint: BTreeMap<Vec<usize>, f64> =
        oracle::enumerate_joint(&oracle).unwrap().into_iter().map(|row| (row.values, row.log_p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    network.initialize(&mut rng).unwrap();
    let mut records = Vec::new();
    mh::run_chain(&mut network, &schedule, 5_000, Scan::Random, &mut rng, &mut records).unwrap();
    let mut previous: Option<f64> = None;
    for r in &records {
        let mut key: Vec<usize> = r.values.iter().map(|v| v[0].as_int().unwrap() as usize).collect();
        key.push(1);
        let log_joint = joint[&key];
        assert!((r.total_log_weight - log_joint).abs() < 1e-12);
        if !r.accepted {
            assert_eq!(Some(r.total_log_weight), previous);
        }
        previous = Some(r.total_log_weight);
    }
}
