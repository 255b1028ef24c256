//! Trains (or resumes) every cached test fixture so later `cargo test`
//! invocations load checkpoints instead of retraining.
//!
//! Pass fixture names to restrict the set, e.g.
//! `cargo run --release --example warm_cache -- vegetation-case-i ou-benchmark`.

#[path = "../tests_support/fixtures.rs"]
mod fixtures;

use fixtures::Fixture;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    for f in Fixture::ALL {
        if !args.is_empty() && !args.iter().any(|a| a == f.name()) {
            continue;
        }
        let cp = fixtures::load_or_train(f);
        println!("{}: ready at epoch {}", f.name(), cp.epoch);
    }
}
