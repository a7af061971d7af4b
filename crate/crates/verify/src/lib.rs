//! Reporting helpers for the acceptance suite in `tests/acceptance.rs`.
//!
//! Each criterion prints one `PASS` or `FAIL` line to stderr, bypassing the
//! test harness's output capture, so the verdicts show up in a plain
//! `cargo test` log.

use std::io::Write;

/// `PASS [n] name: detail` or `FAIL [n] name: detail`.
pub fn verdict_line(criterion: u32, name: &str, pass: bool, detail: &str) -> String {
    let tag = if pass { "PASS" } else { "FAIL" };
    format!("{tag} [{criterion}] {name}: {detail}\n")
}

pub fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = verdict_line(criterion, name, pass, detail);
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Median of an odd-length or even-length sample; the mean of the two
/// middle values in the even case.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
