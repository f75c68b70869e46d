//! Forward run from {0} vs the mirrored dual from {3, 4, 5}, stationary background.
use cpdre::duality;
use cpdre::engine::eta_from_sites;
use cpdre::graphical::System;
use cpdre::lattice::{Site, Window};
use cpdre::model::ModelSpec;

fn main() {
    let w = Window::new(1, 15);
    let model = ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0);
    let sys = System::new(w.clone(), model.clone()).unwrap();
    let eta = eta_from_sites(&sys, &[Site::ORIGIN]).unwrap();
    let eta2 = eta_from_sites(&sys, &[Site::new(&[3]), Site::new(&[4]), Site::new(&[5])]).unwrap();
    let r = duality::stationary_duality_check(&model, &w, &eta, &eta2, 3.0, 10_000, 11, false).unwrap();
    println!("t = {}: forward {:.4}, dual {:.4}, z = {:.2}", r.t, r.p_fwd, r.p_dual, r.z);
}
