//! Essential hitting records for x = 3 and their consistency checks.
use cpdre::engine::BackgroundInit;
use cpdre::essential::{essential_trials, EssentialOpts};
use cpdre::harness::presets;
use cpdre::lattice::Site;

fn main() {
    let opts = EssentialOpts { t_surv: 30.0, horizon: 80.0 };
    let rows = essential_trials(&presets::supercritical(), 1, 60, BackgroundInit::Zero, Site::new(&[3]), &opts, 200, 8).unwrap();
    for r in rows.iter().take(8) {
        let rec = &r.record;
        println!("trial {:>3}: K = {:?}, sigma = {}, t(x) = {}, survived {}", r.trial, rec.k, rec.sigma.label(), rec.t_first.label(), rec.survived);
    }
    let bad: usize = rows.iter().map(|r| r.violations.len()).sum();
    println!("{} records, {bad} violations", rows.len());
}
