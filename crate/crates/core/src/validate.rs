//! The acceptance suite: each criterion measures one property of the engine
//! against an oracle and reports the measurement, its bound and a verdict.
//!
//! Under [`Budget::Reduced`] the statistical criteria are reported as
//! skipped, never as passed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact;
use crate::experiment::{self, Experiment, Fixture, Fixtures};
use crate::hmm::{BinaryHmm, HmmParams};
use crate::inverse::InverseStructure;
use crate::mh::{self, mh_update, DiscreteUniform, Flip, Scan, SiteProposal};
use crate::module::{AuxState, ProbModule, Regeneration, SharedModule, Simulation};
use crate::network::ModuleNetwork;
use crate::oracle;
use crate::regression::{build_module_a, build_module_b, build_switch_regression_network, ConjugateLineState, SwitchRegressionModel};
use crate::smc::make_smc_module;
use crate::value::{LogWeight, PortSpec, Schema, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skipped => "SKIPPED",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport {
    pub id: &'static str,
    pub name: &'static str,
    pub measured: String,
    pub bound: &'static str,
    pub verdict: Verdict,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} {}: {} (bound: {})", self.verdict, self.id, self.name, self.measured, self.bound)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Full,
    /// Deterministic criteria only; statistical ones are reported as skipped.
    Reduced,
}

/// Fixture names the suite reads.
pub const SWITCH_FIXTURE: &str = "switch";
pub const REGRESSION_FIXTURE: &str = "switch_regression";
pub const HMM_FIXTURE: &str = "hmm";

const SWITCH: &str = "A";
const REGRESSION: &str = "B";

/// Traces of the configured chains, shared by the criteria that read them.
struct ChainTraces {
    p_a1: f64,
    csv: Vec<String>,
}

pub struct Validation {
    pub experiment: Experiment,
    pub fixtures: Fixtures,
    pub budget: Budget,
    chains: OnceLock<std::result::Result<ChainTraces, String>>,
}

/// Outcome of one check: pass flag and a human-readable measurement.
type Measured = (bool, String);

struct Criterion {
    id: &'static str,
    name: &'static str,
    bound: &'static str,
    statistical: bool,
    check: fn(&Validation) -> Result<Measured>,
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: "0",
        name: "oracle fixtures match recomputation",
        bound: "relative difference <= 1e-12",
        statistical: false,
        check: fixtures_current,
    },
    Criterion {
        id: "1",
        name: "exact modules reduce to their log-density",
        bound: "deterministic, no randomness consumed, error <= 4 ulp",
        statistical: false,
        check: exact_reduction,
    },
    Criterion {
        id: "2",
        name: "regeneration weights are unbiased",
        bound: "|mean exp(lw) / p(z;x) - 1| < 4 SE in every case",
        statistical: true,
        check: unbiasedness,
    },
    Criterion {
        id: "3a",
        name: "MH on an all-exact network targets the posterior",
        bound: "TV < 0.01 after 2e5 iterations",
        statistical: true,
        check: exact_network_posterior,
    },
    Criterion {
        id: "3b",
        name: "MH on the switch/regression network targets the posterior",
        bound: "|P(a=1) estimate - exact| < 0.02",
        statistical: true,
        check: switch_regression_posterior,
    },
    Criterion {
        id: "4",
        name: "SMC log-weights converge as particles grow",
        bound: "var(next) <= 1.1 var(prev); mean drops by at most max(10% of gap, 3 SE); |mean lw - log p| < 0.05 at K=100; 1e4 runs per K",
        statistical: true,
        check: smc_convergence,
    },
    Criterion {
        id: "5",
        name: "learned inverse approaches the exact conditionals",
        bound: "sd(lw | 1e6) < sd(lw | 1e2); table error < 0.005",
        statistical: true,
        check: inverse_limit,
    },
    Criterion {
        id: "6",
        name: "total log-weight varies while a is fixed",
        bound: ">= 2 distinct total_lw in every constant-a run of length >= 10; a visits 0 and 1",
        statistical: true,
        check: weight_varies_at_fixed_switch,
    },
    Criterion {
        id: "7",
        name: "rejections are pure and -inf proposals are rejected",
        bound: "0 violations",
        statistical: false,
        check: reject_purity,
    },
    Criterion {
        id: "8",
        name: "conjugate line updates and evidence collapse are exact",
        bound: "max error < 1e-10",
        statistical: false,
        check: conjugate_exactness,
    },
];

/// Identifiers of every criterion, in report order.
pub fn criterion_ids() -> Vec<&'static str> {
    CRITERIA.iter().map(|c| c.id).collect()
}

impl Validation {
    pub fn new(experiment: Experiment, fixtures: Fixtures, budget: Budget) -> Self {
        Validation { experiment, fixtures, budget, chains: OnceLock::new() }
    }

    /// Load the fixtures named by the experiment config.
    pub fn load(experiment: Experiment, budget: Budget) -> Result<Self> {
        let path = experiment
            .fixtures_path()
            .ok_or_else(|| Error::Config("config has no `fixtures` path".into()))?;
        let fixtures = experiment::load_fixtures(&path)?;
        Ok(Self::new(experiment, fixtures, budget))
    }

    pub fn run_all(&self) -> Vec<CriterionReport> {
        CRITERIA.iter().map(|c| self.run_criterion(c)).collect()
    }

    pub fn run(&self, id: &str) -> Option<CriterionReport> {
        CRITERIA.iter().find(|c| c.id == id).map(|c| self.run_criterion(c))
    }

    fn run_criterion(&self, c: &Criterion) -> CriterionReport {
        let (verdict, measured) = if c.statistical && self.budget == Budget::Reduced {
            (Verdict::Skipped, "not run under the reduced budget".to_owned())
        } else {
            match (c.check)(self) {
                Ok((true, m)) => (Verdict::Pass, m),
                Ok((false, m)) => (Verdict::Fail, m),
                Err(e) => (Verdict::Fail, format!("error: {e}")),
            }
        };
        log::info!("criterion {} {verdict}", c.id);
        CriterionReport { id: c.id, name: c.name, measured, bound: c.bound, verdict }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mh::chain_seed(self.experiment.config.seed, 1_000 + stream))
    }

    fn model(&self) -> Result<SwitchRegressionModel> {
        self.experiment.switch_regression_model(SWITCH, REGRESSION)
    }

    fn fixture(&self, name: &str) -> Result<&Fixture> {
        self.fixtures.get(name).ok_or_else(|| Error::Config(format!("fixture `{name}` missing")))
    }

    fn switch_prior(&self) -> Result<[f64; 2]> {
        match self.fixture(SWITCH_FIXTURE)? {
            Fixture::SwitchMarginal { p_a } => Ok(*p_a),
            _ => Err(Error::Config(format!("fixture `{SWITCH_FIXTURE}` has the wrong kind"))),
        }
    }

    fn regression_fixture(&self) -> Result<([f64; 2], f64)> {
        match self.fixture(REGRESSION_FIXTURE)? {
            Fixture::SwitchRegression { log_evidence, posterior_a1, .. } => Ok((*log_evidence, *posterior_a1)),
            _ => Err(Error::Config(format!("fixture `{REGRESSION_FIXTURE}` has the wrong kind"))),
        }
    }

    fn chain_traces(&self) -> Result<&ChainTraces> {
        self.chains
            .get_or_init(|| self.run_configured_chains().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::Config(format!("configured chains failed: {e}")))
    }

    fn run_configured_chains(&self) -> Result<ChainTraces> {
        let (network, schedule) = self.experiment.build()?;
        let runs = experiment::run_chains(&network, &schedule, &self.experiment.config)?;
        let summary = experiment::summarize(&network, &self.experiment.config, &runs);
        let p_a1 = summary.marginals.get("a").and_then(|m| m.get("1")).copied().unwrap_or(0.0);
        let csv = runs.iter().map(|r| experiment::trace_csv(&network, &r.records)).collect::<Result<_>>()?;
        Ok(ChainTraces { p_a1, csv })
    }
}

fn relative_difference(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }
}

fn fixture_numbers(f: &Fixture) -> Vec<f64> {
    match f {
        Fixture::SwitchMarginal { p_a } => p_a.to_vec(),
        Fixture::SwitchRegression { log_evidence, prior_a1, posterior_a1 } => {
            vec![log_evidence[0], log_evidence[1], *prior_a1, *posterior_a1]
        }
        Fixture::HmmEvidence { log_evidence, .. } => vec![*log_evidence],
    }
}

fn fixtures_current(v: &Validation) -> Result<Measured> {
    let fresh = experiment::compute_fixtures(&v.experiment)?;
    let mut worst = 0.0f64;
    for (name, expected) in &fresh {
        let Some(stored) = v.fixtures.get(name) else {
            return Ok((false, format!("fixture `{name}` missing")));
        };
        let (a, b) = (fixture_numbers(stored), fixture_numbers(expected));
        if std::mem::discriminant(stored) != std::mem::discriminant(expected) || a.len() != b.len() {
            return Ok((false, format!("fixture `{name}` has the wrong shape")));
        }
        if let (Fixture::HmmEvidence { a: a0, y: y0, .. }, Fixture::HmmEvidence { a: a1, y: y1, .. }) = (stored, expected) {
            if a0 != a1 || y0 != y1 {
                return Ok((false, format!("fixture `{name}` observation differs")));
            }
        }
        worst = a.iter().zip(&b).map(|(x, y)| relative_difference(*x, *y)).fold(worst, f64::max);
    }
    Ok((worst <= 1e-12, format!("{} fixtures, max relative difference {worst:.2e}", fresh.len())))
}

fn exact_reduction(_v: &Validation) -> Result<Measured> {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let cpt_table = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25], vec![0.7, 0.2, 0.1], vec![0.05, 0.05, 0.9]];
    let cases: Vec<(exact::ExactModule, Vec<Value>, Vec<Value>, f64)> = {
        let mut c = Vec::new();
        for (z, expected) in [(0, (1.0f64 - 0.3).ln()), (1, 0.3f64.ln())] {
            c.push((exact::bernoulli(0.3), vec![], vec![Value::Int(z)], expected));
        }
        let probs = [0.2, 0.5, 0.3];
        for z in 0..3 {
            c.push((exact::categorical(probs.to_vec()), vec![], vec![Value::Int(z)], probs[z as usize].ln()));
        }
        for z in [-3.1, 0.0, 0.4, 2.75, 10.0] {
            let (m, sd) = (0.4, 1.7);
            c.push((exact::normal(m, sd), vec![], vec![Value::Real(z)], -half_ln_2pi - sd.ln() - (z - m) * (z - m) / (2.0 * sd * sd)));
        }
        for p in 0..2 {
            for q in 0..2 {
                for z in 0..3 {
                    let module = exact::discrete_cpt(&[("p", 2), ("q", 2)], cpt_table.clone())?;
                    let expected = cpt_table[(p * 2 + q) as usize][z as usize].ln();
                    c.push((module, vec![Value::Int(p), Value::Int(q)], vec![Value::Int(z)], expected));
                }
            }
        }
        c
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst_ulps = 0.0f64;
    for (module, x, z, expected) in &cases {
        let before = rng.clone();
        let first = module.regenerate(x, z, &mut rng)?.log_weight.get();
        let second = module.regenerate(x, z, &mut rng)?.log_weight.get();
        if rng != before {
            return Ok((false, format!("{} consumed randomness", module.describe())));
        }
        if first.to_bits() != second.to_bits() || first.to_bits() != module.log_density(x, z)?.get().to_bits() {
            return Ok((false, format!("{} is not deterministic", module.describe())));
        }
        worst_ulps = worst_ulps.max((first - expected).abs() / (expected.abs().max(1.0) * f64::EPSILON));
    }
    Ok((worst_ulps <= 4.0, format!("{} cases, max error {worst_ulps:.1} ulp", cases.len())))
}

/// `(mean, standard error)` of `exp(lw - log_target)` over `runs` draws.
fn weight_ratio_z(runs: usize, log_target: f64, mut draw: impl FnMut() -> Result<f64>) -> Result<(f64, f64)> {
    let mut ratios = Vec::with_capacity(runs);
    for _ in 0..runs {
        ratios.push((draw()? - log_target).exp());
    }
    let (mean, var) = mh::mean_variance(ratios.into_iter());
    let se = (var / runs as f64).sqrt();
    Ok((mean, (mean - 1.0).abs() / se))
}

fn unbiasedness(v: &Validation) -> Result<Measured> {
    let model = v.model()?;
    let p_a = v.switch_prior()?;
    let (log_evidence, _) = v.regression_fixture()?;
    let mut rng = v.rng(2);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut record = |label: String, (mean, z): (f64, f64)| {
        worst = worst.max(z);
        parts.push(format!("{label} ratio {mean:.4} z {z:.2}"));
    };

    let module_a = build_module_a(&model.switch, 100, 1.0, InverseStructure::Minimal, &mut rng)?;
    for a in [0, 1] {
        let out = [Value::Int(a)];
        let r = weight_ratio_z(100_000, p_a[a as usize].ln(), || Ok(module_a.regenerate(&[], &out, &mut rng)?.log_weight.get()))?;
        record(format!("A(n=100,a={a})"), r);
    }

    let b = [Value::real_vector(model.dataset.responses.clone())?];
    for (k, runs) in [(1, 100_000), (30, 20_000)] {
        let module_b = build_module_b(model.regression.clone(), model.dataset.covariates.clone(), k)?;
        let r = weight_ratio_z(runs, log_evidence[1], || Ok(module_b.regenerate(&[Value::Int(1)], &b, &mut rng)?.log_weight.get()))?;
        record(format!("B(K={k},a=1)"), r);
    }

    if let Fixture::HmmEvidence { a, y, log_evidence } = v.fixture(HMM_FIXTURE)? {
        let params = v.hmm_params()?;
        let hmm = make_smc_module(BinaryHmm::new(params), 2)?;
        let (x, z) = ([Value::Int(*a)], [Value::IntVector(y.clone())]);
        let r = weight_ratio_z(100_000, *log_evidence, || Ok(hmm.regenerate(&x, &z, &mut rng)?.log_weight.get()))?;
        record("HMM(K=2)".to_owned(), r);
    } else {
        return Err(Error::Config(format!("fixture `{HMM_FIXTURE}` has the wrong kind")));
    }
    Ok((worst < 4.0, parts.join("; ")))
}

impl Validation {
    fn hmm_params(&self) -> Result<HmmParams> {
        self.experiment
            .config
            .oracle
            .iter()
            .find_map(|m| match m {
                experiment::OracleModelDoc::HmmEvidence { name, params, .. } if name == HMM_FIXTURE => Some(params.clone()),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("config has no `{HMM_FIXTURE}` oracle model")))
    }
}

/// Three-node all-exact test network: `x -> y`, `(x, y) -> z`, `z` observed.
pub struct ExactTestNetwork {
    pub network: ModuleNetwork,
    pub schedule: Vec<SiteProposal>,
    pub oracle: oracle::FactoredDiscreteModel,
}

pub fn exact_test_network() -> Result<ExactTestNetwork> {
    let px = vec![0.5, 0.3, 0.2];
    let py = vec![vec![0.8, 0.2], vec![0.4, 0.6], vec![0.1, 0.9]];
    let pz = vec![
        vec![0.9, 0.1],
        vec![0.3, 0.7],
        vec![0.6, 0.4],
        vec![0.7, 0.3],
        vec![0.2, 0.8],
        vec![0.95, 0.05],
    ];
    let network = ModuleNetwork::builder()
        .node("X", Arc::new(exact::categorical(px.clone())))
        .node("Y", Arc::new(exact::discrete_cpt(&[("x", 3)], py.clone())?))
        .node("Z", Arc::new(exact::discrete_cpt(&[("x", 3), ("y", 2)], pz.clone())?))
        .edge("X", "z", "Y", "x")
        .edge("X", "z", "Z", "x")
        .edge("Y", "z", "Z", "y")
        .observe("Z", vec![Value::Int(1)])
        .build()?;
    let schedule = vec![
        SiteProposal::new(&network, "X", "z", Arc::new(DiscreteUniform { size: 3 }))?,
        SiteProposal::new(&network, "Y", "z", Arc::new(Flip))?,
    ];
    let var = |name: &str, arity, parents, cpt| oracle::OracleVariable { name: name.into(), arity, parents, cpt };
    let oracle = oracle::FactoredDiscreteModel::discrete(vec![
        var("x", 3, vec![], vec![px]),
        var("y", 2, vec![0], py),
        var("z", 2, vec![0, 1], pz),
    ]);
    Ok(ExactTestNetwork { network, schedule, oracle })
}

fn exact_network_posterior(v: &Validation) -> Result<Measured> {
    let ExactTestNetwork { mut network, schedule, oracle } = exact_test_network()?;
    let exact = oracle::posterior(&oracle, &[(2, 1)], &[0, 1])?;
    let mut rng = v.rng(3);
    network.initialize(&mut rng)?;
    let iterations = 200_000;
    let mut records = Vec::with_capacity(iterations);
    mh::run_chain(&mut network, &schedule, iterations, Scan::Random, &mut rng, &mut records)?;
    let mut counts: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for r in &records {
        let key = r.values.iter().map(|vals| vals[0].as_int().unwrap_or(-1) as usize).collect();
        *counts.entry(key).or_default() += 1.0 / iterations as f64;
    }
    let tv = 0.5 * exact.iter().map(|(k, p)| (p - counts.get(k).copied().unwrap_or(0.0)).abs()).sum::<f64>()
        + 0.5 * counts.iter().filter(|(k, _)| !exact.contains_key(*k)).map(|(_, p)| p).sum::<f64>();
    Ok((tv < 0.01, format!("TV {tv:.4}")))
}

fn switch_regression_posterior(v: &Validation) -> Result<Measured> {
    let (_, exact) = v.regression_fixture()?;
    let traces = v.chain_traces()?;
    let err = (traces.p_a1 - exact).abs();
    let c = &v.experiment.config;
    Ok((
        err < 0.02,
        format!(
            "estimate {:.4} vs exact {exact:.4} (|diff| {err:.4}; {} chains x {} iterations, K={}, n_train={})",
            traces.p_a1, c.chains, c.iterations, c.particles, c.train_samples
        ),
    ))
}

/// Runs per particle count; more than the 10^3 minimum so the 10% variance
/// slack exceeds the sampling error of the variance estimates.
pub const CONVERGENCE_RUNS: usize = 10_000;

pub const CONVERGENCE_PARTICLES: [usize; 6] = [1, 2, 5, 10, 30, 100];

fn smc_convergence(v: &Validation) -> Result<Measured> {
    let model = v.model()?;
    let (log_evidence, _) = v.regression_fixture()?;
    let target = log_evidence[1];
    let b = [Value::real_vector(model.dataset.responses.clone())?];
    let mut rng = v.rng(4);
    let mut stats = Vec::new();
    for &k in &CONVERGENCE_PARTICLES {
        let module = build_module_b(model.regression.clone(), model.dataset.covariates.clone(), k)?;
        let lws = (0..CONVERGENCE_RUNS)
            .map(|_| Ok(module.regenerate(&[Value::Int(1)], &b, &mut rng)?.log_weight.get()))
            .collect::<Result<Vec<f64>>>()?;
        stats.push(mh::mean_variance(lws.into_iter()));
    }
    let n = CONVERGENCE_RUNS as f64;
    let mut ok = true;
    for w in stats.windows(2) {
        let ((m0, v0), (m1, v1)) = (w[0], w[1]);
        ok &= v1 <= 1.1 * v0;
        // The mean may drop by 10% of the previous gap, or by 3 standard
        // errors of the difference once the gap is below Monte Carlo resolution.
        let slack = (0.1 * (target - m0).max(0.0)).max(3.0 * ((v0 + v1) / n).sqrt());
        ok &= m1 >= m0 - slack;
    }
    let final_gap = (stats.last().expect("non-empty").0 - target).abs();
    ok &= final_gap < 0.05;
    let table = CONVERGENCE_PARTICLES
        .iter()
        .zip(&stats)
        .map(|(k, (m, var))| format!("K={k}: mean {:+.3} var {var:.3}", m - target))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("mean lw - log p and var: {table}; |gap| at K=100 {final_gap:.4}")))
}

fn inverse_limit(v: &Validation) -> Result<Measured> {
    let model = v.model()?;
    let spec = model.switch.to_spec();
    let oracle_model = experiment::switch_oracle(&model.switch);
    let mut rng = v.rng(5);
    let lw_sd = |n_train: usize, rng: &mut ChaCha8Rng| -> Result<(f64, crate::inverse::InverseModule)> {
        let module = build_module_a(&model.switch, n_train, 1.0, InverseStructure::Minimal, rng)?;
        let out = [Value::Int(1)];
        let lws = (0..10_000).map(|_| Ok(module.regenerate(&[], &out, rng)?.log_weight.get())).collect::<Result<Vec<_>>>()?;
        Ok((mh::mean_variance(lws.into_iter()).1.sqrt(), module))
    };
    let (sd_small, _) = lw_sd(100, &mut rng)?;
    let (sd_large, trained) = lw_sd(1_000_000, &mut rng)?;
    let mut worst = 0.0f64;
    for factor in &trained.inverse().factors {
        for (row, probs) in factor.table.iter().enumerate() {
            let mut observation = Vec::new();
            let mut rest = row;
            for &c in factor.context.iter().rev() {
                observation.push((c, rest % spec.arity(c)));
                rest /= spec.arity(c);
            }
            let exact = oracle::posterior(&oracle_model, &observation, &[factor.target])?;
            for (value, q) in probs.iter().enumerate() {
                worst = worst.max((q - exact.get(&vec![value]).copied().unwrap_or(0.0)).abs());
            }
        }
    }
    Ok((
        sd_large < sd_small && worst < 0.005,
        format!("sd(lw) {sd_small:.4} at n=1e2, {sd_large:.4} at n=1e6; max table error {worst:.5}"),
    ))
}

fn weight_varies_at_fixed_switch(v: &Validation) -> Result<Measured> {
    let traces = v.chain_traces()?;
    let mut long_runs = 0;
    let mut constant_runs = 0;
    let mut seen = [false; 2];
    for text in &traces.csv {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("trace has no `{name}` column")));
        let (a_col, lw_col) = (col("a")?, col("total_lw")?);
        let mut run: Vec<String> = Vec::new();
        let mut current: Option<String> = None;
        let mut close = |run: &mut Vec<String>| {
            if run.len() >= 10 {
                long_runs += 1;
                if run.iter().all(|w| w == &run[0]) {
                    constant_runs += 1;
                }
            }
            run.clear();
        };
        for row in reader.records() {
            let row = row?;
            let a = row[a_col].to_owned();
            match a.as_str() {
                "0" => seen[0] = true,
                "1" => seen[1] = true,
                _ => {}
            }
            if current.as_deref() != Some(a.as_str()) {
                close(&mut run);
                current = Some(a);
            }
            run.push(row[lw_col].to_owned());
        }
        close(&mut run);
    }
    Ok((
        constant_runs == 0 && seen[0] && seen[1] && long_runs > 0,
        format!("{long_runs} constant-a runs of length >= 10, {constant_runs} with constant total_lw; a=0 seen {}, a=1 seen {}", seen[0], seen[1]),
    ))
}

/// A module whose weights are noisy and sometimes `-inf`: `-inf` whenever
/// its input is `poison`, and with probability `fault_rate` otherwise.
struct FaultyModule {
    poison: i64,
    fault_rate: f64,
    inputs: Schema,
    outputs: Schema,
}

impl FaultyModule {
    fn new(poison: i64, fault_rate: f64) -> Self {
        FaultyModule {
            poison,
            fault_rate,
            inputs: Schema::new(vec![PortSpec::int("x")]),
            outputs: Schema::new(vec![PortSpec::int("y")]),
        }
    }

    fn weight(&self, inputs: &[Value], rng: &mut dyn RngCore) -> LogWeight {
        if inputs[0].as_int() == Some(self.poison) || rng.random::<f64>() < self.fault_rate {
            LogWeight::NEG_INFINITY
        } else {
            LogWeight::saturating(rng.random::<f64>() - 0.5)
        }
    }
}

impl ProbModule for FaultyModule {
    fn input_schema(&self) -> &Schema {
        &self.inputs
    }

    fn output_schema(&self) -> &Schema {
        &self.outputs
    }

    fn simulate(&self, inputs: &[Value], rng: &mut dyn RngCore) -> Result<Simulation> {
        let log_weight = self.weight(inputs, rng);
        Ok(Simulation { outputs: vec![Value::Int(0)], log_weight, aux: AuxState::new(rng.next_u64()) })
    }

    fn regenerate(&self, inputs: &[Value], _outputs: &[Value], rng: &mut dyn RngCore) -> Result<Regeneration> {
        let log_weight = self.weight(inputs, rng);
        Ok(Regeneration { log_weight, aux: AuxState::new(rng.next_u64()) })
    }
}

/// Count purity violations over `updates` MH steps of `schedule`.
fn purity_violations(
    net: &mut ModuleNetwork,
    schedule: &[SiteProposal],
    updates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize)> {
    let (mut violations, mut impossible, mut rejected) = (0, 0, 0);
    for i in 0..updates {
        let before = net.clone();
        let step = mh_update(net, &schedule[i % schedule.len()], rng)?;
        if step.decision.proposes_impossible() {
            impossible += 1;
            violations += usize::from(step.accepted);
        }
        if !step.accepted {
            rejected += 1;
            violations += usize::from(!net.same_state(&before));
        }
    }
    Ok((violations, impossible, rejected))
}

fn reject_purity(v: &Validation) -> Result<Measured> {
    let mut rng = v.rng(7);
    let faulty: SharedModule = Arc::new(FaultyModule::new(3, 0.2));
    let mut net = ModuleNetwork::builder()
        .node("S", Arc::new(exact::categorical(vec![0.25; 4])))
        .node("F", faulty)
        .edge("S", "z", "F", "x")
        .observe("F", vec![Value::Int(0)])
        .build()?;
    net.initialize(&mut rng)?;
    let schedule = [SiteProposal::new(&net, "S", "z", Arc::new(DiscreteUniform { size: 4 }))?];
    let (v1, i1, r1) = purity_violations(&mut net, &schedule, 20_000, &mut rng)?;

    let model = v.model()?;
    let mut app = build_switch_regression_network(&model, 5, 1_000, 1.0, InverseStructure::Minimal, &mut rng)?;
    app.network.initialize(&mut rng)?;
    let (v2, i2, r2) = purity_violations(&mut app.network, &app.schedule, 2_000, &mut rng)?;

    let violations = v1 + v2;
    Ok((
        violations == 0 && i1 > 0 && r1 + r2 > 0,
        format!("{violations} violations over {} rejections and {} -inf proposals", r1 + r2, i1 + i2),
    ))
}

fn conjugate_exactness(v: &Validation) -> Result<Measured> {
    let model = v.model()?;
    let params = &model.regression;
    let data = &model.dataset;
    let n = data.covariates.len();
    let leaf = experiment::regression_leaf(&model);
    let mut worst_update = 0.0f64;
    let mut min_eigen = f64::INFINITY;
    for mask in [0u64, 0b1_0000_0100, 0b1_1111_1111, 0b0_1010_1010, 0b1_0100_0001] {
        let outlier: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let mut state = ConjugateLineState::prior(params);
        for i in 0..n {
            state = state.update(data.covariates[i], data.responses[i], params.noise_sd(outlier[i]));
            let c = state.covariance;
            let half_trace = 0.5 * (c[0][0] + c[1][1]);
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            min_eigen = min_eigen.min(half_trace - (half_trace * half_trace - det).max(0.0).sqrt());
        }
        let (mean, cov) = leaf.line_posterior(&outlier);
        for r in 0..2 {
            worst_update = worst_update.max((state.mean[r] - mean[r]).abs());
            for c in 0..2 {
                worst_update = worst_update.max((state.covariance[r][c] - cov[r][c]).abs());
            }
        }
    }

    let equal_noise = oracle::RegressionLeaf { outlier_sd: leaf.inlier_sd, ..leaf.clone() };
    let (mean, cov) = equal_noise.dense_marginal(&vec![false; n]);
    let single = oracle::dense_gaussian_logpdf(&data.responses, &mean, &cov);
    let mut worst_collapse = 0.0f64;
    for p in [0.01, 0.1, 0.5] {
        let evidence = oracle::log_evidence(&oracle::regression_given_switch(p, equal_noise.clone()), &[])?;
        worst_collapse = worst_collapse.max((evidence - single).abs());
    }
    let collapsed_params = crate::regression::OutlierRegressionParams { outlier_sd: params.inlier_sd, ..params.clone() };
    let module = build_module_b(collapsed_params, data.covariates.clone(), 3)?;
    let mut rng = v.rng(8);
    let b = [Value::real_vector(data.responses.clone())?];
    for a in [0, 1] {
        let lw = module.regenerate(&[Value::Int(a)], &b, &mut rng)?.log_weight.get();
        worst_collapse = worst_collapse.max((lw - single).abs());
    }
    Ok((
        worst_update < 1e-10 && worst_collapse < 1e-10 && min_eigen > 1e-10,
        format!("update error {worst_update:.2e}, collapse error {worst_collapse:.2e}, min eigenvalue {min_eigen:.3e}"),
    ))
}
