//! Acceptance suite: runs every verification criterion at its stated
//! tolerance and prints one pass/fail line per criterion.
//!
//! The same checks are reachable from the CLI via `crepe verify --suite
//! <name>`.

use crepe_core::verify::run_suite;

fn check(name: &str) {
    let report = run_suite(name).expect("suite must run to completion");
    report.print();
    assert!(report.passed, "acceptance criterion '{name}' failed");
}

#[test]
fn criterion_01_rne_marginal_identity() {
    check("rne-identity");
}

#[test]
fn criterion_02_unit_temperature_acceptance() {
    check("beta1-acceptance");
}

#[test]
fn criterion_03_tempering_correctness() {
    check("tempering-bimodal");
}

#[test]
fn criterion_04_ctmc_swap_detailed_balance() {
    check("ctmc-detailed-balance");
}

#[test]
fn criterion_05_ctmc_target_correctness() {
    check("ctmc-cfg-target");
}

#[test]
fn criterion_06_nfe_parity() {
    check("nfe-parity");
}

#[test]
fn criterion_07_smc_degenerate_weights() {
    check("smc-degenerate-weights");
}

#[test]
fn criterion_08_stitching_with_online_refinement() {
    check("stitching-online");
}

#[test]
fn criterion_09_determinism() {
    check("determinism");
}

#[test]
fn criterion_10_score_finite_differences() {
    check("score-finite-diff");
}
