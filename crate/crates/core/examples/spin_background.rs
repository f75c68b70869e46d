//! Contact process on an attractive finite-range spin background.
use cpdre::engine::{eta_from_sites, evolve, xi_const, CopyState, RecordOpts};
use cpdre::graphical::{EventStream, System};
use cpdre::lattice::{Site, Window};
use cpdre::model::{spin_bounds, spin_neighborhood, validate_model, BackgroundSpec, ModelSpec, RateTable, SpinRates};

fn main() {
    let count = |edge| spin_neighborhood(1, 1, edge).len() + 1;
    let up = |n: usize| (0..n).map(|k| 0.5 + 0.5 * k as f64).collect::<Vec<_>>();
    let down = |n: usize| (0..n).map(|k| 2.0 * 0.7f64.powi(k as i32)).collect::<Vec<_>>();
    let rates = SpinRates::NeighborCount { site_up: up(count(false)), site_down: down(count(false)), edge_up: up(count(true)), edge_down: down(count(true)) };
    println!("{:?}", spin_bounds(&rates));
    let model = ModelSpec::new(RateTable::edge_gated(3.0, 1.0), BackgroundSpec::SpinSystem { range: 1, rates });
    println!("{:?}", validate_model(&model, 1).unwrap());
    let sys = System::new(Window::new(1, 20), model).unwrap();
    let mut alive = 0;
    for seed in 0..200 {
        let st = EventStream::sample(&sys.catalog, 10.0, seed);
        let c = CopyState::new("x", 0.0, eta_from_sites(&sys, &[Site::ORIGIN]).unwrap(), xi_const(&sys, 1));
        let tr = evolve(&sys, &st, vec![c], RecordOpts::quiet(), 10.0).unwrap();
        alive += tr.copies[0].extinct_at.is_none() as u32;
    }
    println!("alive at t = 10 in {alive} of 200 runs");
}
