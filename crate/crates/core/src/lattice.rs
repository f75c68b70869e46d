//! Geometry of Z^d for d in 1..=3: sites, edges, l1 balls and box windows.
//!
//! Sites carry three coordinates; unused trailing coordinates stay 0.

use std::collections::BTreeSet;
use std::fmt;

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, serde::Serialize, serde::Deserialize)]
pub struct Site(pub [i32; MAX_DIM]);

impl Site {
    pub const ORIGIN: Site = Site([0; MAX_DIM]);

    pub fn new(coords: &[i32]) -> Site {
        assert!(coords.len() <= MAX_DIM, "at most {MAX_DIM} coordinates");
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site(c)
    }

    /// Site `v * e_axis`.
    pub fn axis(axis: usize, v: i32) -> Site {
        let mut c = [0; MAX_DIM];
        c[axis] = v;
        Site(c)
    }

    pub fn add(self, o: Site) -> Site {
        Site([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(self, o: Site) -> Site {
        Site([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    pub fn scale(self, k: i32) -> Site {
        Site([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }

    pub fn neg(self) -> Site {
        self.scale(-1)
    }

    pub fn max_abs(self) -> i32 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

pub fn l1_norm(x: Site) -> u32 {
    x.0.iter().map(|c| c.unsigned_abs()).sum()
}

pub fn l1_dist(x: Site, y: Site) -> u32 {
    l1_norm(x.sub(y))
}

/// Undirected nearest-neighbour edge `{lo, lo + e_axis}`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Edge {
    pub lo: Site,
    pub axis: u8,
}

impl Edge {
    /// Edge between two neighbouring sites, `None` if they are not at l1 distance 1.
    pub fn between(x: Site, y: Site) -> Option<Edge> {
        let d = y.sub(x);
        if l1_norm(d) != 1 {
            return None;
        }
        let axis = d.0.iter().position(|&c| c != 0)?;
        let lo = if d.0[axis] > 0 { x } else { y };
        Some(Edge { lo, axis: axis as u8 })
    }

    pub fn hi(&self) -> Site {
        self.lo.add(Site::axis(self.axis as usize, 1))
    }

    pub fn endpoints(&self) -> (Site, Site) {
        (self.lo, self.hi())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Cell {
    Site(Site),
    Edge(Edge),
}

impl Cell {
    pub fn is_site(&self) -> bool {
        matches!(self, Cell::Site(_))
    }

    /// Sites making up the cell (one for a site, two for an edge).
    pub fn points(&self) -> Vec<Site> {
        match self {
            Cell::Site(s) => vec![*s],
            Cell::Edge(e) => vec![e.lo, e.hi()],
        }
    }
}

/// All sites within l1 distance `r` of `center`.
pub fn ball(dim: usize, r: f64, center: Site) -> Vec<Site> {
    assert!(r >= 0.0);
    let ri = r.floor() as i32;
    let mut out = Vec::new();
    for_each_in_box(dim, &[-ri; MAX_DIM], &[ri; MAX_DIM], |off| {
        if l1_norm(off) as f64 <= r {
            out.push(center.add(off));
        }
    });
    out
}

/// Every edge with at least one endpoint in `ball(dim, r, center)`.
pub fn edge_ball(dim: usize, r: f64, center: Site) -> Vec<Edge> {
    let mut set = BTreeSet::new();
    for x in ball(dim, r, center) {
        for axis in 0..dim {
            let e = Site::axis(axis, 1);
            set.insert(Edge { lo: x, axis: axis as u8 });
            set.insert(Edge { lo: x.sub(e), axis: axis as u8 });
        }
    }
    set.into_iter().collect()
}

/// Visit every point of the box `[lo, hi]` in row-major order (last axis fastest).
pub fn for_each_in_box(dim: usize, lo: &[i32; MAX_DIM], hi: &[i32; MAX_DIM], mut f: impl FnMut(Site)) {
    if (0..dim).any(|i| lo[i] > hi[i]) {
        return;
    }
    let mut cur = [0i32; MAX_DIM];
    cur[..dim].copy_from_slice(&lo[..dim]);
    loop {
        f(Site(cur));
        let mut i = dim;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
        }
    }
}

/// Whether `f` holds at every point of the box `[lo, hi]`; stops at the first failure.
pub fn all_in_box(dim: usize, lo: Site, hi: Site, mut f: impl FnMut(Site) -> bool) -> bool {
    if (0..dim).any(|i| lo.0[i] > hi.0[i]) {
        return true;
    }
    let mut cur = [0i32; MAX_DIM];
    cur[..dim].copy_from_slice(&lo.0[..dim]);
    loop {
        if !f(Site(cur)) {
            return false;
        }
        let mut i = dim;
        loop {
            if i == 0 {
                return true;
            }
            i -= 1;
            if cur[i] < hi.0[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo.0[i];
        }
    }
}

/// Which edges belong to a window.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EdgePolicy {
    /// Edges with at least one endpoint in the box.
    Meeting,
    /// Edges with both endpoints in the box (closed micro-systems).
    Internal,
}

/// A box of sites together with its edge set. Cells are indexed sites first
/// (row-major), then edges grouped by axis (row-major over lower endpoints).
#[derive(Clone, Debug)]
pub struct Window {
    dim: usize,
    lo: [i32; MAX_DIM],
    hi: [i32; MAX_DIM],
    policy: EdgePolicy,
    site_ext: [usize; MAX_DIM],
    n_sites: usize,
    // per axis: lower-endpoint box and offset into the edge block
    edge_lo: [[i32; MAX_DIM]; MAX_DIM],
    edge_ext: [[usize; MAX_DIM]; MAX_DIM],
    edge_off: [usize; MAX_DIM + 1],
}

impl Window {
    /// The centred window `[-radius, radius]^dim` with all edges meeting it.
    pub fn new(dim: usize, radius: u32) -> Window {
        let r = radius as i32;
        Window::from_box(dim, &[-r; MAX_DIM], &[r; MAX_DIM], EdgePolicy::Meeting)
    }

    pub fn from_box(dim: usize, lo: &[i32], hi: &[i32], policy: EdgePolicy) -> Window {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1, 2 or 3");
        let mut l = [0; MAX_DIM];
        let mut h = [0; MAX_DIM];
        l[..dim].copy_from_slice(&lo[..dim]);
        h[..dim].copy_from_slice(&hi[..dim]);
        assert!((0..dim).all(|i| l[i] <= h[i]), "empty window");
        let mut site_ext = [1usize; MAX_DIM];
        for i in 0..dim {
            site_ext[i] = (h[i] - l[i] + 1) as usize;
        }
        let n_sites = site_ext.iter().product();
        let mut edge_lo = [[0; MAX_DIM]; MAX_DIM];
        let mut edge_ext = [[1usize; MAX_DIM]; MAX_DIM];
        let mut edge_off = [0usize; MAX_DIM + 1];
        for a in 0..dim {
            edge_lo[a] = l;
            edge_ext[a] = site_ext;
            match policy {
                EdgePolicy::Meeting => {
                    edge_lo[a][a] = l[a] - 1;
                    edge_ext[a][a] = site_ext[a] + 1;
                }
                EdgePolicy::Internal => {
                    edge_ext[a][a] = site_ext[a] - 1;
                }
            }
            edge_off[a + 1] = edge_off[a] + edge_ext[a].iter().product::<usize>();
        }
        for a in dim..MAX_DIM {
            edge_off[a + 1] = edge_off[a];
        }
        Window { dim, lo: l, hi: h, policy, site_ext, n_sites, edge_lo, edge_ext, edge_off }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> Site {
        Site(self.lo)
    }

    pub fn hi(&self) -> Site {
        Site(self.hi)
    }

    pub fn policy(&self) -> EdgePolicy {
        self.policy
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_edges(&self) -> usize {
        self.edge_off[self.dim]
    }

    pub fn n_cells(&self) -> usize {
        self.n_sites + self.n_edges()
    }

    pub fn contains(&self, x: Site) -> bool {
        (0..self.dim).all(|i| x.0[i] >= self.lo[i] && x.0[i] <= self.hi[i])
            && (self.dim..MAX_DIM).all(|i| x.0[i] == 0)
    }

    fn linear(ext: &[usize; MAX_DIM], lo: &[i32; MAX_DIM], dim: usize, x: Site) -> usize {
        let mut idx = 0usize;
        for i in 0..dim {
            idx = idx * ext[i] + (x.0[i] - lo[i]) as usize;
        }
        idx
    }

    fn delinear(ext: &[usize; MAX_DIM], lo: &[i32; MAX_DIM], dim: usize, mut idx: usize) -> Site {
        let mut c = [0; MAX_DIM];
        for i in (0..dim).rev() {
            c[i] = lo[i] + (idx % ext[i]) as i32;
            idx /= ext[i];
        }
        Site(c)
    }

    pub fn site_index(&self, x: Site) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(Self::linear(&self.site_ext, &self.lo, self.dim, x))
    }

    pub fn site(&self, idx: usize) -> Site {
        debug_assert!(idx < self.n_sites);
        Self::delinear(&self.site_ext, &self.lo, self.dim, idx)
    }

    /// Index among edges (0-based, not offset by the site count).
    pub fn edge_index(&self, e: Edge) -> Option<usize> {
        let a = e.axis as usize;
        if a >= self.dim {
            return None;
        }
        let lo = &self.edge_lo[a];
        let ext = &self.edge_ext[a];
        for i in 0..self.dim {
            let c = e.lo.0[i] - lo[i];
            if c < 0 || c as usize >= ext[i] {
                return None;
            }
        }
        if (self.dim..MAX_DIM).any(|i| e.lo.0[i] != 0) {
            return None;
        }
        Some(self.edge_off[a] + Self::linear(ext, lo, self.dim, e.lo))
    }

    pub fn edge(&self, idx: usize) -> Edge {
        let a = (0..self.dim).find(|&a| idx < self.edge_off[a + 1]).expect("edge index out of range");
        let lo = Self::delinear(&self.edge_ext[a], &self.edge_lo[a], self.dim, idx - self.edge_off[a]);
        Edge { lo, axis: a as u8 }
    }

    pub fn cell_index(&self, c: Cell) -> Option<usize> {
        match c {
            Cell::Site(s) => self.site_index(s),
            Cell::Edge(e) => self.edge_index(e).map(|i| i + self.n_sites),
        }
    }

    pub fn cell(&self, idx: usize) -> Cell {
        if idx < self.n_sites {
            Cell::Site(self.site(idx))
        } else {
            Cell::Edge(self.edge(idx - self.n_sites))
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.n_sites).map(move |i| self.site(i))
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.n_edges()).map(move |i| self.edge(i))
    }

    /// Number of site layers between `x` and the boundary (0 on the boundary).
    pub fn depth(&self, x: Site) -> i32 {
        (0..self.dim).map(|i| (x.0[i] - self.lo[i]).min(self.hi[i] - x.0[i])).min().unwrap_or(0)
    }
}

/// Directed nearest-neighbour steps in the fixed order `(e_1..e_d, -e_1..-e_d)`.
pub fn directions(dim: usize) -> Vec<Site> {
    let mut v: Vec<Site> = (0..dim).map(|i| Site::axis(i, 1)).collect();
    v.extend((0..dim).map(|i| Site::axis(i, -1)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn norms() {
        assert_eq!(l1_norm(Site::new(&[0, 0])), 0);
        assert_eq!(l1_norm(Site::new(&[2, -3])), 5);
        assert_eq!(l1_norm(Site::new(&[1, 1, 1])), 3);
    }

    #[test]
    fn ball_sizes() {
        let b = ball(1, 1.0, Site::ORIGIN);
        assert_eq!(b, vec![Site::new(&[-1]), Site::ORIGIN, Site::new(&[1])]);
        assert_eq!(ball(2, 1.0, Site::ORIGIN).len(), 5);
        // brute force over the bounding box
        let mut n = 0;
        for x in -3..=3i32 {
            for y in -3..=3i32 {
                if x.abs() + y.abs() <= 3 {
                    n += 1;
                }
            }
        }
        assert_eq!(ball(2, 3.0, Site::ORIGIN).len(), n);
        assert_eq!(n, 25);
        assert_eq!(ball(2, 1.5, Site::ORIGIN).len(), 5);
    }

    #[test]
    fn edge_ball_sizes() {
        assert_eq!(edge_ball(1, 0.0, Site::ORIGIN).len(), 2);
        assert_eq!(edge_ball(2, 0.0, Site::ORIGIN).len(), 4);
        // enumeration: all edges of a 5x5 box with an endpoint in the cross
        let cross = ball(2, 1.0, Site::ORIGIN);
        let mut n = 0;
        let w = Window::from_box(2, &[-3, -3], &[3, 3], EdgePolicy::Internal);
        for e in w.edges() {
            if cross.contains(&e.lo) || cross.contains(&e.hi()) {
                n += 1;
            }
        }
        assert_eq!(n, 16);
        assert_eq!(edge_ball(2, 1.0, Site::ORIGIN).len(), 16);
    }

    #[test]
    fn window_sizes() {
        let w = Window::new(1, 2);
        assert_eq!((w.n_sites(), w.n_edges()), (5, 6));
        let w = Window::new(2, 0);
        assert_eq!((w.n_sites(), w.n_edges()), (1, 4));
        assert_eq!(Window::new(2, 1).n_sites(), 9);
        let w = Window::from_box(1, &[0], &[1], EdgePolicy::Internal);
        assert_eq!((w.n_sites(), w.n_edges()), (2, 1));
    }

    #[test]
    fn window_contains_all_sup_norm_sites() {
        for d in 1..=3 {
            for l in 0..=3u32 {
                let w = Window::new(d, l);
                let r = l as i32;
                let mut count = 0;
                for_each_in_box(d, &[-r; 3], &[r; 3], |x| {
                    assert!(w.contains(x));
                    assert_eq!(w.site(w.site_index(x).unwrap()), x);
                    count += 1;
                });
                assert_eq!(count, w.n_sites());
                assert_eq!(w.n_sites(), (2 * l as usize + 1).pow(d as u32));
                let per_axis = (2 * l as usize + 2) * (2 * l as usize + 1).pow(d as u32 - 1);
                assert_eq!(w.n_edges(), d * per_axis);
            }
        }
    }

    #[test]
    fn edge_indexing_roundtrips_and_meets() {
        let w = Window::new(2, 2);
        for i in 0..w.n_edges() {
            let e = w.edge(i);
            assert_eq!(w.edge_index(e), Some(i));
            assert!(w.contains(e.lo) || w.contains(e.hi()));
        }
        for i in 0..w.n_cells() {
            assert_eq!(w.cell_index(w.cell(i)), Some(i));
        }
        assert_eq!(w.edge_index(Edge { lo: Site::new(&[3, 0]), axis: 0 }), None);
    }

    #[test]
    fn edge_between() {
        let e = Edge::between(Site::new(&[1, 0]), Site::new(&[0, 0])).unwrap();
        assert_eq!(e.lo, Site::ORIGIN);
        assert_eq!(e.axis, 0);
        assert!(Edge::between(Site::ORIGIN, Site::new(&[1, 1])).is_none());
    }

    proptest! {
        #[test]
        fn ball_translation_and_reflection(r in 0u32..5, x in -4i32..4, y in -4i32..4, axis in 0usize..2) {
            let c = Site::new(&[x, y]);
            let shifted: BTreeSet<Site> = ball(2, r as f64, Site::ORIGIN).into_iter().map(|s| s.add(c)).collect();
            let direct: BTreeSet<Site> = ball(2, r as f64, c).into_iter().collect();
            prop_assert_eq!(&shifted, &direct);
            let refl: BTreeSet<Site> = ball(2, r as f64, Site::ORIGIN).into_iter().map(|mut s| { s.0[axis] = -s.0[axis]; s }).collect();
            let base: BTreeSet<Site> = ball(2, r as f64, Site::ORIGIN).into_iter().collect();
            prop_assert_eq!(refl, base);
        }

        #[test]
        fn edge_ball_contains_induced_edges(r in 0u32..4, d in 1usize..=3) {
            let b: BTreeSet<Site> = ball(d, r as f64, Site::ORIGIN).into_iter().collect();
            let eb: BTreeSet<Edge> = edge_ball(d, r as f64, Site::ORIGIN).into_iter().collect();
            for e in &eb {
                prop_assert!(b.contains(&e.lo) || b.contains(&e.hi()));
            }
            for x in &b {
                for axis in 0..d {
                    let y = x.add(Site::axis(axis, 1));
                    if b.contains(&y) {
                        let e = Edge { lo: *x, axis: axis as u8 };
                        prop_assert!(eb.contains(&e));
                    }
                }
            }
        }
    }
}
