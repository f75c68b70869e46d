//! Map catalog of a small system and Poisson tests of sampled streams.
use cpdre::graphical::{self, EventStream, System};
use cpdre::lattice::Window;
use cpdre::model::ModelSpec;
use cpdre::rng::derive_trial_seed;

fn main() {
    let sys = System::new(Window::new(1, 3), ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0)).unwrap();
    println!("{} maps, total rate {:.2}, reconstruction error {:.1e}", sys.catalog.len(), sys.catalog.rates.iter().sum::<f64>(), sys.reconstruction_error());
    let streams: Vec<EventStream> = (0..100).map(|k| EventStream::sample(&sys.catalog, 20.0, derive_trial_seed(3, k))).collect();
    let (chi, df, p) = graphical::count_chi_square(&sys.catalog, &streams);
    let (d, ddf, pd) = graphical::count_dispersion(&sys.catalog, &streams);
    println!("counts: chi2 {chi:.1} on {df} df, p = {p:.3}; dispersion {d:.1} on {ddf} df, p = {pd:.3}");
}
