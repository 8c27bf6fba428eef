//! Runs the seeded property checks at full size and prints one line each.
//!
//! cargo run --release --example property_suite -- [seed]

use hcnet::theorems;

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let mut all = theorems::exact_suite(seed);
    all.push(theorems::wl_partition_check(seed, 100, 64, 3, 95));
    for outcome in &all {
        println!("{outcome}");
    }
    if all.iter().any(|o| !o.passed) {
        std::process::exit(1);
    }
}
