//! Finite-difference check of every tape primitive and attack loss.

use aat::diagnostics::gradcheck_suite;

fn main() {
    let entries = gradcheck_suite(20, 0).unwrap();
    for e in &entries {
        println!("{:<28} max rel error {:.2e} ({} redrawn)", e.name, e.max_rel_error, e.redrawn);
    }
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    println!("worst over {} checks: {worst:.2e}", entries.len());
}
