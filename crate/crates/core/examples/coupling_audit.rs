//! Pathwise audits on shared event streams: additivity, sandwich, worst case.
use cpdre::engine::{self, eta_from_sites, xi_const};
use cpdre::graphical::{EventStream, System};
use cpdre::lattice::{Site, Window};
use cpdre::model::ModelSpec;

fn main() {
    let sys = System::new(Window::new(1, 8), ModelSpec::dynamical_graph(1.5, 1.0, 1.0, 1.0)).unwrap();
    let a = eta_from_sites(&sys, &[Site::new(&[-2])]).unwrap();
    let b = eta_from_sites(&sys, &[Site::new(&[3])]).unwrap();
    let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x | y).collect();
    let (lo, hi) = (xi_const(&sys, 0), xi_const(&sys, 1));
    let mut v = [0usize; 3];
    for seed in 0..200 {
        let st = EventStream::sample(&sys.catalog, 4.0, seed);
        v[0] += engine::additivity_violations(&sys, &st, &a, &b, &lo, 4.0, 0.1).unwrap();
        v[1] += engine::sandwich_violations(&sys, &st, (&a, &lo), (&ab, &hi), 4.0, 0.1).unwrap();
        v[2] += engine::worst_case_violations(&sys, &st, &ab, &hi, 4.0, 0.1).unwrap();
    }
    println!("200 streams: additivity {} sandwich {} worst-case {}", v[0], v[1], v[2]);
}
