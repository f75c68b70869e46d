//! Graphical-construction simulator for contact processes in dynamical random
//! environments on finite windows of Z^d, with the coupling, hitting-time,
//! duality and oriented-percolation machinery needed to study their growth.

pub mod duality;
pub mod engine;
pub mod essential;
pub mod graphical;
pub mod harness;
pub mod lattice;
pub mod model;
pub mod observables;
pub mod oracle;
pub mod percolation;
pub mod rng;
