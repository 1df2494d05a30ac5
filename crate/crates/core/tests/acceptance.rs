//! Full acceptance suite against the shipped configuration.
//!
//! Runs without the test harness: prints one line per criterion and exits
//! non-zero if any criterion does not pass.

use std::path::PathBuf;
use std::process::ExitCode;

use modnet::experiment::Experiment;
use modnet::validate::{criterion_ids, Budget, Validation, Verdict};

fn main() -> ExitCode {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/outlier.json");
    let experiment = Experiment::load(&config).expect("shipped config loads");
    let validation = Validation::load(experiment, Budget::Full).expect("shipped fixtures load");
    let reports = validation.run_all();
    assert_eq!(reports.iter().map(|r| r.id).collect::<Vec<_>>(), criterion_ids());
    println!("\nacceptance");
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<_> = reports.iter().filter(|r| r.verdict != Verdict::Pass).map(|r| r.id).collect();
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria pass\n", reports.len(), reports.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: criteria not passing: {failed:?}\n");
        ExitCode::FAILURE
    }
}
