//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits nonzero if any fails. Numeric arguments
//! select criteria, e.g. `cargo test --test acceptance -- 5 7`.

use std::process::ExitCode;

use ldu::harness::acceptance::{run_criterion, Options, CRITERIA};

fn main() -> ExitCode {
    let picked: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ids: Vec<u8> = CRITERIA.iter().map(|c| c.0).filter(|id| picked.is_empty() || picked.contains(id)).collect();
    println!("\nrunning {} acceptance criteria", ids.len());
    let mut failed = 0;
    for id in ids {
        let r = run_criterion(id, &Options::default());
        println!("{}", r.line());
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        println!("acceptance: {failed} failed\n");
        return ExitCode::FAILURE;
    }
    println!("acceptance: all passed\n");
    ExitCode::SUCCESS
}
