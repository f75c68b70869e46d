//! Simulated marginals against the exact finite-state chain.
use cpdre::oracle;

fn main() {
    let times = [0.5, 2.0, 8.0];
    for (i, case) in oracle::standard_cases().iter().enumerate() {
        let (worst, rows) = oracle::run_case(case, &case.model, &times, 20_000, 7 + i as u64).expect("oracle case");
        println!("{:<24} states={:<3} max|z| = {worst:.2}", case.name, rows.len() / times.len());
    }
}
