//! Experiment configuration, chain execution and oracle fixtures.
//!
//! A configuration names a network document, the MH schedule and run
//! sizes. The network is built once from the build seed and cloned into
//! every chain; chain `c` runs on `chain_seed(seed, c + 1)` and the build
//! uses `chain_seed(seed, 0)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::document::{BuildContext, NetworkDocument, RegressionDoc};
use crate::error::{Error, Result};
use crate::hmm::HmmParams;
use crate::inverse::InverseStructure;
use crate::mh::{self, ChainRecord, CsvTraceSink, DiscreteUniform, Flip, GaussianWalk, Proposal, RecordSink, Refresh, Scan, SiteProposal};
use crate::network::ModuleNetwork;
use crate::oracle;
use crate::regression::{Dataset, SwitchRegressionModel, SwitchParams};
use crate::value::Value;

pub const SUMMARY_SCHEMA: &str = "modnet-trace/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelDoc {
    Flip,
    Refresh,
    Uniform { size: i64 },
    GaussianWalk { sd: f64 },
}

impl KernelDoc {
    fn build(&self) -> Result<Arc<dyn Proposal>> {
        Ok(match *self {
            KernelDoc::Flip => Arc::new(Flip),
            KernelDoc::Refresh => Arc::new(Refresh),
            KernelDoc::Uniform { size } if size >= 1 => Arc::new(DiscreteUniform { size }),
            KernelDoc::GaussianWalk { sd } if sd > 0.0 => Arc::new(GaussianWalk { sd }),
            ref other => return Err(Error::Config(format!("invalid proposal kernel {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalDoc {
    pub node: String,
    pub port: String,
    pub kernel: KernelDoc,
}

/// A model whose exact answers go into the fixtures file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleModelDoc {
    /// `p(a)` of a `switch_prior` node of the network.
    SwitchMarginal { name: String, node: String },
    /// Evidence and posterior of a switch feeding an observed regression.
    SwitchRegression { name: String, switch: String, regression: String },
    /// Evidence of a fixed observation sequence under a binary HMM.
    HmmEvidence { name: String, params: HmmParams, a: i64, y: Vec<i64> },
}

fn default_smoothing() -> f64 {
    1.0
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network document, relative to the config file.
    pub network: PathBuf,
    pub seed: u64,
    pub chains: usize,
    pub iterations: usize,
    pub particles: usize,
    pub train_samples: usize,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub inverse_structure: InverseStructure,
    #[serde(default)]
    pub scan: Scan,
    pub proposals: Vec<ProposalDoc>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Oracle fixtures file, relative to the config file.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub oracle: Vec<OracleModelDoc>,
}

/// A parsed configuration with paths resolved against its directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub document: NetworkDocument,
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("chains", self.chains),
            ("iterations", self.iterations),
            ("particles", self.particles),
            ("train_samples", self.train_samples),
            ("workers", self.workers),
            ("proposals", self.proposals.len()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("`smoothing` must be positive".into()));
        }
        Ok(())
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = ExperimentConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_parts(config, base_dir)
    }

    pub fn from_parts(config: ExperimentConfig, base_dir: PathBuf) -> Result<Self> {
        let document = NetworkDocument::load(&base_dir.join(&config.network))?;
        Ok(Experiment { config, document, base_dir })
    }

    pub fn fixtures_path(&self) -> Option<PathBuf> {
        self.config.fixtures.as_ref().map(|p| self.base_dir.join(p))
    }

    /// Build the network and its schedule from the build seed.
    pub fn build(&self) -> Result<(ModuleNetwork, Vec<SiteProposal>)> {
        self.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mh::chain_seed(self.config.seed, 0));
        let mut ctx = BuildContext {
            particles: self.config.particles,
            train_samples: self.config.train_samples,
            smoothing: self.config.smoothing,
            inverse_structure: self.config.inverse_structure,
            rng: &mut rng,
        };
        let network = self.document.build(&mut ctx)?;
        let schedule = self
            .config
            .proposals
            .iter()
            .map(|p| {
                SiteProposal::new(&network, &p.node, &p.port, p.kernel.build()?)
                    .map_err(|e| Error::Config(format!("proposal on `{}.{}`: {e}", p.node, p.port)))
            })
            .collect::<Result<_>>()?;
        Ok((network, schedule))
    }

    /// The switch/regression model described by two nodes of the document.
    pub fn switch_regression_model(&self, switch: &str, regression: &str) -> Result<SwitchRegressionModel> {
        let switch_params: SwitchParams = self.document.node_params(switch)?;
        let reg: RegressionDoc = self.document.node_params(regression)?;
        let responses = self
            .document
            .observations
            .get(regression)
            .and_then(|o| o.get("b"))
            .and_then(Value::as_real_vector)
            .ok_or_else(|| Error::Config(format!("node `{regression}` needs an observed real vector `b`")))?
            .to_vec();
        let defaults = crate::regression::default_dataset();
        Ok(SwitchRegressionModel {
            switch: switch_params,
            regression: reg.params,
            dataset: Dataset { covariates: reg.covariates, responses, ..defaults },
        })
    }
}

/// All records and the summary of one chain.
pub struct ChainRun {
    pub index: usize,
    pub seed: u64,
    pub records: Vec<ChainRecord>,
    pub summary: mh::ChainSummary,
}

/// Run every chain on a pool of `workers` threads. Results are returned in
/// chain order regardless of scheduling.
pub fn run_chains(
    network: &ModuleNetwork,
    schedule: &[SiteProposal],
    config: &ExperimentConfig,
) -> Result<Vec<ChainRun>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ChainRun>>>> = Mutex::new((0..config.chains).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(config.chains) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= config.chains {
                    break;
                }
                let outcome = run_one_chain(network, schedule, config, index);
                results.lock().expect("no worker panics while holding the lock")[index] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every chain ran"))
        .collect()
}

fn run_one_chain(network: &ModuleNetwork, schedule: &[SiteProposal], config: &ExperimentConfig, index: usize) -> Result<ChainRun> {
    let seed = mh::chain_seed(config.seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = network.clone();
    net.initialize(&mut rng)?;
    let mut records = Vec::with_capacity(config.iterations);
    let summary = mh::run_chain(&mut net, schedule, config.iterations, config.scan, &mut rng, &mut records)?;
    log::info!("chain {index} finished {} iterations", config.iterations);
    Ok(ChainRun { index, seed, records, summary })
}

pub fn trace_csv(network: &ModuleNetwork, records: &[ChainRecord]) -> Result<String> {
    let mut sink = CsvTraceSink::new(network, Vec::new())?;
    for r in records {
        sink.record(r)?;
    }
    Ok(String::from_utf8(sink.finish()?).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteRate {
    pub node: String,
    pub proposal: String,
    pub proposals: usize,
    pub accepted: usize,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogWeightMoments {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainReport {
    pub chain: usize,
    pub seed: u64,
    pub acceptance: Vec<SiteRate>,
    /// Value column -> value -> frequency, for integer-valued columns.
    pub marginals: BTreeMap<String, BTreeMap<String, f64>>,
    /// Latent assignment (e.g. `a=1`) -> node -> log-weight moments over the
    /// iterations spent at that assignment.
    pub log_weight_at_fixed: BTreeMap<String, BTreeMap<String, LogWeightMoments>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub schema: &'static str,
    /// Layout version of the per-chain trace CSVs.
    pub trace_csv: &'static str,
    pub seed: u64,
    pub chains: usize,
    pub iterations: usize,
    pub particles: usize,
    pub train_samples: usize,
    /// Pooled over chains.
    pub marginals: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_chain: Vec<ChainReport>,
}

fn frequencies(columns: &[String], records: &[ChainRecord]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in records {
        for (name, v) in columns.iter().zip(r.values.iter().flatten()) {
            if let Value::Int(k) = v {
                *out.entry(name.clone()).or_default().entry(k.to_string()).or_default() += 1.0;
            }
        }
    }
    for table in out.values_mut() {
        table.values_mut().for_each(|c| *c /= records.len() as f64);
    }
    out
}

pub fn summarize(network: &ModuleNetwork, config: &ExperimentConfig, runs: &[ChainRun]) -> RunSummary {
    let columns = mh::value_columns(network);
    let names: Vec<String> = network.nodes().iter().map(|n| n.name().to_owned()).collect();
    let per_chain = runs
        .iter()
        .map(|run| {
            let mut groups: BTreeMap<String, Vec<&ChainRecord>> = BTreeMap::new();
            for r in &run.records {
                let key = columns
                    .iter()
                    .zip(r.values.iter().flatten())
                    .map(|(c, v)| format!("{c}={v}"))
                    .collect::<Vec<_>>()
                    .join(",");
                groups.entry(key).or_default().push(r);
            }
            let log_weight_at_fixed = groups
                .into_iter()
                .map(|(key, rs)| {
                    let per_node = names
                        .iter()
                        .enumerate()
                        .map(|(j, name)| {
                            let (mean, variance) = mh::mean_variance(rs.iter().map(|r| r.log_weights[j]));
                            (name.clone(), LogWeightMoments { count: rs.len(), mean, variance })
                        })
                        .collect();
                    (key, per_node)
                })
                .collect();
            ChainReport {
                chain: run.index,
                seed: run.seed,
                acceptance: run
                    .summary
                    .sites
                    .iter()
                    .map(|s| SiteRate {
                        node: s.node.clone(),
                        proposal: s.proposal.clone(),
                        proposals: s.proposals,
                        accepted: s.accepted,
                        rate: (s.proposals > 0).then(|| s.accepted as f64 / s.proposals as f64),
                    })
                    .collect(),
                marginals: frequencies(&columns, &run.records),
                log_weight_at_fixed,
            }
        })
        .collect();
    let pooled: Vec<ChainRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    RunSummary {
        schema: SUMMARY_SCHEMA,
        trace_csv: mh::TRACE_CSV_VERSION,
        seed: config.seed,
        chains: config.chains,
        iterations: config.iterations,
        particles: config.particles,
        train_samples: config.train_samples,
        marginals: frequencies(&columns, &pooled),
        per_chain,
    }
}

/// What `infer` wrote.
pub struct InferOutput {
    pub summary: RunSummary,
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

/// Run the configured chains and write `chain_<c>.csv` and `summary.json` to `out`.
pub fn cmd_infer(experiment: &Experiment, out: &Path) -> Result<InferOutput> {
    let (network, schedule) = experiment.build()?;
    let runs = run_chains(&network, &schedule, &experiment.config)?;
    let summary = summarize(&network, &experiment.config, &runs);
    std::fs::create_dir_all(out)?;
    let mut csv_paths = Vec::with_capacity(runs.len());
    for run in &runs {
        let path = out.join(format!("chain_{}.csv", run.index));
        std::fs::write(&path, trace_csv(&network, &run.records)?)?;
        csv_paths.push(path);
    }
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(InferOutput { summary, csv_paths, summary_path })
}

/// One oracle result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fixture {
    SwitchMarginal {
        /// `P(a = 0), P(a = 1)`.
        p_a: [f64; 2],
    },
    SwitchRegression {
        /// `log p(b | a)` for `a = 0, 1`.
        log_evidence: [f64; 2],
        prior_a1: f64,
        posterior_a1: f64,
    },
    HmmEvidence {
        a: i64,
        y: Vec<i64>,
        log_evidence: f64,
    },
}

pub type Fixtures = BTreeMap<String, Fixture>;

pub fn switch_oracle(p: &SwitchParams) -> oracle::FactoredDiscreteModel {
    oracle::switch_model(p.u1, p.u2, p.u3, p.a)
}

pub fn regression_leaf(model: &SwitchRegressionModel) -> oracle::RegressionLeaf {
    let r = &model.regression;
    oracle::RegressionLeaf {
        prior_mean: r.prior_mean,
        prior_variance: r.prior_variance,
        inlier_sd: r.inlier_sd,
        outlier_sd: r.outlier_sd,
        covariates: model.dataset.covariates.clone(),
        responses: model.dataset.responses.clone(),
    }
}

pub fn switch_regression_fixture(model: &SwitchRegressionModel) -> Result<Fixture> {
    let switch = switch_oracle(&model.switch);
    let a = switch.index_of("a").expect("switch has a");
    let prior_a1 = oracle::evidence(&switch, &[(a, 1)])?;
    let leaf = regression_leaf(model);
    let given = |k: usize| oracle::log_evidence(&oracle::regression_given_switch(model.regression.outlier_prob[k], leaf.clone()), &[]);
    let log_evidence = [given(0)?, given(1)?];
    let joint = oracle::joint_switch_regression(&switch, model.regression.outlier_prob, leaf);
    let posterior = oracle::posterior(&joint, &[], &[a])?;
    Ok(Fixture::SwitchRegression { log_evidence, prior_a1, posterior_a1: posterior[&vec![1]] })
}

pub fn hmm_fixture(params: &HmmParams, a: i64, y: &[i64]) -> Result<Fixture> {
    if !matches!(a, 0 | 1) || y.len() != params.steps || y.iter().any(|v| !matches!(v, 0 | 1)) {
        return Err(Error::Config("hmm oracle needs binary a and y of length `steps`".into()));
    }
    let m = oracle::hmm_model(params.initial[a as usize], params.transition, params.emission, params.steps);
    let log_evidence = oracle::log_evidence(&m, &oracle::hmm_observation(y))?;
    Ok(Fixture::HmmEvidence { a, y: y.to_vec(), log_evidence })
}

/// Compute every configured oracle fixture.
pub fn compute_fixtures(experiment: &Experiment) -> Result<Fixtures> {
    let mut out = Fixtures::new();
    for doc in &experiment.config.oracle {
        let (name, fixture) = match doc {
            OracleModelDoc::SwitchMarginal { name, node } => {
                let m = switch_oracle(&experiment.document.node_params(node)?);
                let a = m.index_of("a").expect("switch has a");
                let p1 = oracle::evidence(&m, &[(a, 1)])?;
                let p0 = oracle::evidence(&m, &[(a, 0)])?;
                (name, Fixture::SwitchMarginal { p_a: [p0, p1] })
            }
            OracleModelDoc::SwitchRegression { name, switch, regression } => {
                (name, switch_regression_fixture(&experiment.switch_regression_model(switch, regression)?)?)
            }
            OracleModelDoc::HmmEvidence { name, params, a, y } => (name, hmm_fixture(params, *a, y)?),
        };
        if out.insert(name.clone(), fixture).is_some() {
            return Err(Error::Config(format!("duplicate oracle model name `{name}`")));
        }
    }
    Ok(out)
}

pub fn fixtures_json(fixtures: &Fixtures) -> Result<String> {
    Ok(serde_json::to_string_pretty(fixtures)? + "\n")
}

pub fn load_fixtures(path: &Path) -> Result<Fixtures> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read fixtures {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write `oracle.json` to `out`.
pub fn cmd_oracle(experiment: &Experiment, out: &Path) -> Result<PathBuf> {
    let fixtures = compute_fixtures(experiment)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("oracle.json");
    std::fs::write(&path, fixtures_json(&fixtures)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"network": "n.json", "seed": 1, "chains": 1, "iterations": 10, "particles": 2,
                "train_samples": 10, "proposals": [{"node": "A", "port": "z", "kernel": {"kind": "flip"}}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = minimal_config();
        assert_eq!(c.workers, 1);
        assert_eq!(c.smoothing, 1.0);
        assert_eq!(c.scan, Scan::Random);
        assert!(c.oracle.is_empty());
        c.validate().unwrap();
        let zero = ExperimentConfig { chains: 0, ..c };
        assert!(zero.validate().unwrap_err().to_string().contains("chains"));
    }

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::from_json(
            r#"{"network": "n.json", "chains": 1, "iterations": 10, "particles": 2, "train_samples": 10, "proposals": []}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn empty_oracle_list_gives_empty_object() {
        assert_eq!(fixtures_json(&Fixtures::new()).unwrap(), "{}\n");
    }

    #[test]
    fn hmm_fixture_rejects_bad_observations() {
        assert!(hmm_fixture(&HmmParams::default(), 1, &[0, 1]).is_err());
        assert!(hmm_fixture(&HmmParams::default(), 2, &[0, 1, 0, 1]).is_err());
        assert!(matches!(hmm_fixture(&HmmParams::default(), 1, &[0, 1, 0, 1]), Ok(Fixture::HmmEvidence { .. })));
    }
}
