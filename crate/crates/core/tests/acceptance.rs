//! Acceptance suite. Runs every criterion once, sequentially so the scale
//! check does not compete with the study for memory; prints one PASS/FAIL
//! line per criterion and exits non-zero if any criterion fails.

use std::process::ExitCode;

use spinlets::bench::run_acceptance;

fn main() -> ExitCode {
    let report = run_acceptance();
    let ids: Vec<u32> = report.criteria.iter().map(|c| c.id).collect();
    assert_eq!(ids, (1..=13).collect::<Vec<_>>(), "every criterion appears exactly once");
    for c in &report.criteria {
        println!(
            "criterion {:>2} {}: {} | measured: {} | tolerance: {} | {:.2} s",
            c.id,
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance,
            c.seconds
        );
        if let Some(d) = &c.detail {
            println!("              {d}");
        }
    }
    println!("{}/{} criteria passed in {:.1} s", report.passed, report.total, report.seconds);
    let failed: Vec<u32> = report.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
