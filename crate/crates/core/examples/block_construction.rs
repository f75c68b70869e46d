//! Block events and the macroscopic field built on one event stream.
use cpdre::engine::{eta_cube, evolve, xi_const, CopyState, RecordOpts};
use cpdre::graphical::{EventStream, System};
use cpdre::harness::presets;
use cpdre::lattice::{Site, Window};
use cpdre::percolation::{build_block_coupling, coupling_radius, probe_block_event, MacroGeom};

fn main() {
    let (model, mp) = presets::block_model();
    let q = probe_block_event(&model, 1, mp, 0, Site::ORIGIN, 0.0, 300, 9).unwrap();
    println!("P(E) towards +e1: {:.3} [{:.3}, {:.3}]", q.p, q.lo, q.hi);
    let levels = 8;
    let sys = System::new(Window::new(1, coupling_radius(&mp, levels, Site::ORIGIN, 1)), model).unwrap();
    let horizon = (5 * levels + 1) as f64 * mp.b;
    let st = EventStream::sample(&sys.catalog, horizon, 9);
    let start = CopyState::new("ref", 0.0, eta_cube(&sys, Site::ORIGIN, mp.n as i32), xi_const(&sys, 0));
    let reference = evolve(&sys, &st, vec![start], RecordOpts::default(), horizon).unwrap().copies.remove(0);
    let geom = MacroGeom { x0: Site::ORIGIN, t0: 0.0, params: mp };
    let bc = build_block_coupling(&sys, &st, geom, levels, 0.9, 99, Some(&reference)).unwrap();
    println!("levels tracked {}, open fraction {:.3}, violations {}, extinction level {:?}", bc.audit.levels_tracked, bc.audit.open_fraction(), bc.audit.violations, bc.extinction_level());
}
