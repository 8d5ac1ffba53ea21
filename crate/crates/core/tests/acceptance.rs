//! Acceptance criteria A1 to A10 at full size, one test per criterion. Each
//! test prints its PASS/FAIL summary line (visible with `--nocapture`) and
//! fails when the criterion fails.

use lookahead::verify::{self, CriterionResult, SuiteConfig};

fn check(run: fn(&SuiteConfig) -> CriterionResult) {
    let result = run(&SuiteConfig::default());
    println!("{}", result.line());
    assert!(result.passed, "{}", result.line());
}

#[test]
fn a01_resolvent_identity() {
    check(verify::a1_resolvent);
}

#[test]
fn a02_duality_identity() {
    check(verify::a2_duality);
}

#[test]
fn a03_monte_carlo_value_match() {
    check(verify::a3_mc_value);
}

#[test]
fn a04_policy_form_equivalence() {
    check(verify::a4_policy_forms);
}

#[test]
fn a05_reduction_consistency() {
    check(verify::a5_reduction);
}

#[test]
fn a06_dominance_ordering() {
    check(verify::a6_dominance);
}

#[test]
fn a07_perturbation_optimality() {
    check(verify::a7_perturbation);
}

#[test]
fn a08_dual_oracle_convergence() {
    check(verify::a8_dual_oracle);
}

#[test]
fn a09_discrete_strong_duality() {
    check(verify::a9_tree_duality);
}

#[test]
fn a10_certainty_equivalent_properties() {
    check(verify::a10_certainty_equivalent);
}
