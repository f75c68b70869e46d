//! Restart procedure: number of restarts L, sigma and the seed cube Y.
use cpdre::engine::BackgroundInit;
use cpdre::essential::{restart_trials, RestartParams};
use cpdre::harness::presets;
use std::collections::BTreeMap;

fn main() {
    let (model, mp) = presets::block_model();
    let params = RestartParams { macro_params: mp, macro_levels: 10, p: 0.95, max_restarts: 1000 };
    let rows = restart_trials(&model, 1, 120, BackgroundInit::Zero, 300.0, &params, 60, 10).unwrap();
    for r in rows.iter().take(6) {
        let rec = &r.record;
        println!("trial {}: L = {:?}, sigma = {}, Y = {:?}, steps {}", r.trial, rec.l, rec.sigma.label(), rec.y, rec.steps.len());
    }
    let mut hist = BTreeMap::new();
    for l in rows.iter().filter_map(|r| r.record.l) {
        *hist.entry(l).or_insert(0) += 1;
    }
    println!("L histogram: {hist:?}");
}
