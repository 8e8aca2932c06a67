//! The full acceptance suite at the stated tolerances, one line per criterion.

use std::io::Write;

use hamlab::acceptance::{run_suite, suite_json, SuiteConfig, IDS};

#[test]
fn all_criteria() {
    // direct handle writes are not captured, so the lines show in plain `cargo test` logs
    let report = |line: String| {
        let _ = writeln!(std::io::stderr(), "{line}");
    };
    let outcomes = run_suite(&SuiteConfig::default(), &IDS, |o| report(o.line())).expect("suite runs");
    assert_eq!(outcomes.len(), 14);
    let json = suite_json(&outcomes);
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.pass()).map(|o| o.id).collect();
    report(format!("acceptance: {}/14 criteria pass", 14 - failed.len()));
    assert_eq!(json["all_pass"], failed.is_empty());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
