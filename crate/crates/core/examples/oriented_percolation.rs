//! Independent oriented percolation: extinction levels and slab counts.
use cpdre::lattice::Site;
use cpdre::percolation::{density_slab, extinction_level, sample_independent_field, SlabStart};

fn main() {
    for p in [0.6, 0.7, 0.8, 0.95] {
        let (mut dead, mut slab) = (0, 0);
        for seed in 0..2_000 {
            let f = sample_independent_field(1, p, 30, 32, seed);
            dead += extinction_level(&f, Site::ORIGIN).is_some() as u32;
            slab += density_slab(&f, SlabStart::EvenLattice, 20, 10.0);
        }
        println!("p = {p}: extinct by level 30 in {dead} of 2000, mean slab count at level 20 = {:.2}", slab as f64 / 2000.0);
    }
}
