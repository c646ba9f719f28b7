//! Gradient checks at every scope and the randomized invariant suites.
//!
//! `cargo run --release --example verification`

use nfuse::suites::{gradcheck, invariants, Scope};
use nfuse::Result;

fn main() -> Result<()> {
    for scope in Scope::ALL {
        let reports = gradcheck::<f64>(scope, 0, None)?;
        let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("non-empty");
        let passed = reports.iter().all(|r| r.passed());
        println!(
            "{:<10} {} groups, worst `{}` {:.2e}, passed {passed}",
            scope.name(),
            reports.len(),
            worst.group,
            worst.max_rel_error
        );
    }
    for r in invariants(0, 100)? {
        println!("{r}");
    }
    Ok(())
}
