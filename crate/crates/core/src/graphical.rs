//! Random mapping representation: the map catalog of a window, the shared
//! Poisson event stream and the action of single maps on a configuration.

use crate::lattice::{Cell, Edge, Site, Window};
use crate::model::{self, BackgroundSpec, LevelOrdering, ModelError, ModelSpec, SpinRates};
use crate::rng::{self, Role};
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Exp1;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::io::Write;

/// A directed nearest-neighbour arrow with both endpoints in the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrow {
    pub from: u32,
    pub to: u32,
    /// Cell index of the undirected edge.
    pub edge: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapKind {
    /// Infection along `arrow`, usable when F of the background triple is at least `level`.
    Inf { level: u32, arrow: u32 },
    /// Recovery at `site`, effective when G of the site level is at most `level`.
    Rec { level: u32, site: u32 },
    /// Single-cell background map `funcs[func]` (a level-to-level table).
    Bg { cell: u32, func: u32 },
    /// Spin flip to 1 when the up rate of the neighbourhood is at least `threshold`.
    SpinUp { cell: u32, threshold: f64 },
    /// Spin flip to 0 when the down rate of the neighbourhood is at least `threshold`.
    SpinDown { cell: u32, threshold: f64 },
}

/// What a map did to a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Change {
    None,
    Eta { site: u32, val: u8 },
    Xi { cell: u32, val: u8 },
}

pub struct Catalog {
    pub maps: Vec<MapKind>,
    pub rates: Vec<f64>,
    pub funcs: Vec<Vec<u8>>,
    total: f64,
    sampler: Option<WeightedAliasIndex<f64>>,
}

impl Catalog {
    pub fn total_rate(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Window, model and catalog bundled for simulation. Immutable and shareable.
pub struct System {
    pub window: Window,
    pub model: ModelSpec,
    pub ordering: LevelOrdering,
    pub arrows: Vec<Arrow>,
    pub catalog: Catalog,
    /// For spin backgrounds: per cell, its neighbourhood cells in canonical
    /// order (`u32::MAX` outside the window, read as level 0).
    spin_nbhd: Vec<Vec<u32>>,
    /// Arrow ids indexed by `(from site, direction)` (`u32::MAX` if absent).
    arrow_of: Vec<u32>,
}

/// Background level functions for independent updates: quantile maps of the
/// uniformized kernel, with rate `c` times the length of each interval of
/// uniforms. Identity maps are dropped.
pub fn quantile_maps(q: &[Vec<f64>]) -> Vec<(Vec<u8>, f64)> {
    let m = q.len();
    let c = model::uniformization_constant(q);
    if c == 0.0 {
        return Vec::new();
    }
    let p = model::uniformized_kernel(q);
    let cdf: Vec<Vec<f64>> = p
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter().map(|v| {
                acc += v;
                acc
            }).collect()
        })
        .collect();
    let mut cuts: Vec<f64> = cdf.iter().flatten().cloned().filter(|v| *v > 0.0 && *v < 1.0).collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut out: Vec<(Vec<u8>, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let u = 0.5 * (w[0] + w[1]);
        let f: Vec<u8> = (0..m).map(|i| cdf[i].iter().position(|&v| v > u).unwrap_or(m - 1) as u8).collect();
        if f.iter().enumerate().all(|(i, &v)| v as usize == i) {
            continue;
        }
        if let Some(prev) = out.iter_mut().find(|(g, _)| *g == f) {
            prev.1 += c * len;
        } else {
            out.push((f, c * len));
        }
    }
    out
}

/// Telescoped thresholds `(v_k, v_k - v_{k-1})` over the distinct positive values of a table.
fn telescope(table: &[f64]) -> Vec<(f64, f64)> {
    let mut vals: Vec<f64> = table.iter().cloned().filter(|v| *v > 0.0).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut prev = 0.0;
    vals.into_iter()
        .map(|v| {
            let h = v - prev;
            prev = v;
            (v, h)
        })
        .collect()
}

impl System {
    pub fn new(window: Window, model: ModelSpec) -> Result<System, ModelError> {
        model::validate_model(&model, window.dim())?;
        let ordering = model::level_ordering(&model.rates);
        let dim = window.dim();
        let dirs = crate::lattice::directions(dim);
        let mut arrows = Vec::new();
        let mut arrow_of = vec![u32::MAX; window.n_sites() * dirs.len()];
        for s in 0..window.n_sites() {
            let x = window.site(s);
            for (di, u) in dirs.iter().enumerate() {
                let y = x.add(*u);
                if let Some(t) = window.site_index(y) {
                    let e = Edge::between(x, y).unwrap();
                    let edge = window.cell_index(Cell::Edge(e)).expect("edge between window sites") as u32;
                    arrow_of[s * dirs.len() + di] = arrows.len() as u32;
                    arrows.push(Arrow { from: s as u32, to: t as u32, edge });
                }
            }
        }
        let spin_nbhd = match &model.background {
            BackgroundSpec::SpinSystem { range, .. } => {
                let site_nb = model::spin_neighborhood(dim, *range, false);
                let edge_nb = model::spin_neighborhood(dim, *range, true);
                (0..window.n_cells())
                    .map(|c| match window.cell(c) {
                        Cell::Site(x) => site_nb
                            .iter()
                            .map(|off| translate(*off, x).and_then(|cc| window.cell_index(cc)).map_or(u32::MAX, |i| i as u32))
                            .collect(),
                        Cell::Edge(e) => edge_nb
                            .iter()
                            .map(|off| {
                                translate(model::rotate_cell(*off, e.axis as usize), e.lo)
                                    .and_then(|cc| window.cell_index(cc))
                                    .map_or(u32::MAX, |i| i as u32)
                            })
                            .collect(),
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        let catalog = build_catalog(&window, &model, &ordering, &arrows);
        Ok(System { window, model, ordering, arrows, catalog, spin_nbhd, arrow_of })
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn n_sites(&self) -> usize {
        self.window.n_sites()
    }

    pub fn n_cells(&self) -> usize {
        self.window.n_cells()
    }

    /// Arrow from site index `s` in direction `dir` (order of [`crate::lattice::directions`]).
    pub fn arrow(&self, s: usize, dir: usize) -> Option<u32> {
        let a = self.arrow_of[s * 2 * self.dim() + dir];
        (a != u32::MAX).then_some(a)
    }

    #[inline]
    pub fn f_of(&self, xi: &[u8], a: &Arrow) -> u32 {
        let rt = &self.model.rates;
        let idx = rt.triple_index(xi[a.from as usize] as usize, xi[a.edge as usize] as usize, xi[a.to as usize] as usize);
        self.ordering.f_rank[idx]
    }

    /// Whether an infection or recovery map is effective under background `xi`.
    /// Background maps are always reported usable.
    #[inline]
    pub fn usable(&self, m: &MapKind, xi: &[u8]) -> bool {
        match *m {
            MapKind::Inf { level, arrow } => self.f_of(xi, &self.arrows[arrow as usize]) >= level,
            MapKind::Rec { level, site } => self.ordering.g_rank[xi[site as usize] as usize] <= level,
            _ => true,
        }
    }

    #[inline]
    fn spin_mask(&self, cell: usize, xi: &[u8]) -> u32 {
        let mut mask = 0u32;
        for (b, &c) in self.spin_nbhd[cell].iter().enumerate() {
            if c != u32::MAX && xi[c as usize] != 0 {
                mask |= 1 << b;
            }
        }
        mask
    }

    fn spin_rates(&self) -> &SpinRates {
        match &self.model.background {
            BackgroundSpec::SpinSystem { rates, .. } => rates,
            _ => unreachable!("spin map without a spin background"),
        }
    }

    /// Current up (`up = true`) or down flip rate of a spin cell.
    pub fn spin_rate(&self, cell: usize, xi: &[u8], up: bool) -> f64 {
        let sr = self.spin_rates();
        let key = sr.key(self.spin_mask(cell, xi));
        let edge = cell >= self.n_sites();
        if up {
            sr.up_table(edge)[key]
        } else {
            sr.down_table(edge)[key]
        }
    }

    /// Apply map `m` in place and report the change.
    #[inline]
    pub fn apply(&self, m: &MapKind, eta: &mut [u8], xi: &mut [u8]) -> Change {
        match *m {
            MapKind::Inf { level, arrow } => {
                let a = &self.arrows[arrow as usize];
                if eta[a.from as usize] == 1 && eta[a.to as usize] == 0 && self.f_of(xi, a) >= level {
                    eta[a.to as usize] = 1;
                    return Change::Eta { site: a.to, val: 1 };
                }
                Change::None
            }
            MapKind::Rec { level, site } => {
                if eta[site as usize] == 1 && self.ordering.g_rank[xi[site as usize] as usize] <= level {
                    eta[site as usize] = 0;
                    return Change::Eta { site, val: 0 };
                }
                Change::None
            }
            MapKind::Bg { cell, func } => {
                let old = xi[cell as usize];
                let new = self.catalog.funcs[func as usize][old as usize];
                if new != old {
                    xi[cell as usize] = new;
                    return Change::Xi { cell, val: new };
                }
                Change::None
            }
            MapKind::SpinUp { cell, threshold } => {
                if xi[cell as usize] == 0 && self.spin_rate(cell as usize, xi, true) >= threshold {
                    xi[cell as usize] = 1;
                    return Change::Xi { cell, val: 1 };
                }
                Change::None
            }
            MapKind::SpinDown { cell, threshold } => {
                if xi[cell as usize] == 1 && self.spin_rate(cell as usize, xi, false) >= threshold {
                    xi[cell as usize] = 0;
                    return Change::Xi { cell, val: 0 };
                }
                Change::None
            }
        }
    }

    /// Background-only part of [`System::apply`].
    #[inline]
    pub fn apply_bg(&self, m: &MapKind, xi: &mut [u8]) -> Change {
        match m {
            MapKind::Inf { .. } | MapKind::Rec { .. } => Change::None,
            _ => self.apply(m, &mut [], xi),
        }
    }

    /// Sum of rates of Inf maps on `arrow` whose level is at most `F(triple)`.
    pub fn reconstructed_lambda(&self, arrow: u32, triple: usize) -> f64 {
        let f = self.ordering.f_rank[triple];
        self.catalog
            .maps
            .iter()
            .zip(&self.catalog.rates)
            .filter(|(m, _)| matches!(m, MapKind::Inf { level, arrow: a } if *a == arrow && *level <= f))
            .map(|(_, r)| r)
            .sum()
    }

    /// Sum of rates of Rec maps on `site` that are effective at background level `lvl`.
    pub fn reconstructed_r(&self, site: u32, lvl: usize) -> f64 {
        let g = self.ordering.g_rank[lvl];
        self.catalog
            .maps
            .iter()
            .zip(&self.catalog.rates)
            .filter(|(m, _)| matches!(m, MapKind::Rec { level, site: s } if *s == site && *level >= g))
            .map(|(_, r)| r)
            .sum()
    }

    /// Largest absolute gap between reconstructed and specified rates over
    /// every arrow, triple, site and level.
    pub fn reconstruction_error(&self) -> f64 {
        let rt = &self.model.rates;
        let mut worst = 0.0f64;
        for arrow in 0..self.arrows.len() as u32 {
            for t in 0..rt.triples() {
                worst = worst.max((self.reconstructed_lambda(arrow, t) - rt.lambda[t]).abs());
            }
        }
        for site in 0..self.n_sites() as u32 {
            for l in 0..rt.levels() {
                worst = worst.max((self.reconstructed_r(site, l) - rt.r[l]).abs());
            }
        }
        worst
    }

    /// Human-readable description of a map: (kind, level, coordinates).
    pub fn describe(&self, m: &MapKind) -> (&'static str, String, String) {
        let fmt_site = |s: Site| s.coords(self.dim()).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        let fmt_cell = |c: u32| match self.window.cell(c as usize) {
            Cell::Site(s) => fmt_site(s),
            Cell::Edge(e) => format!("{}|{}", fmt_site(e.lo), fmt_site(e.hi())),
        };
        match *m {
            MapKind::Inf { level, arrow } => {
                let a = self.arrows[arrow as usize];
                ("inf", level.to_string(), format!("{}>{}", fmt_site(self.window.site(a.from as usize)), fmt_site(self.window.site(a.to as usize))))
            }
            MapKind::Rec { level, site } => ("rec", level.to_string(), fmt_site(self.window.site(site as usize))),
            MapKind::Bg { cell, func } => ("bg", format!("{:?}", self.catalog.funcs[func as usize]), fmt_cell(cell)),
            MapKind::SpinUp { cell, threshold } => ("spin_up", threshold.to_string(), fmt_cell(cell)),
            MapKind::SpinDown { cell, threshold } => ("spin_down", threshold.to_string(), fmt_cell(cell)),
        }
    }
}

fn translate(c: Cell, by: Site) -> Option<Cell> {
    Some(match c {
        Cell::Site(s) => Cell::Site(s.add(by)),
        Cell::Edge(e) => Cell::Edge(Edge { lo: e.lo.add(by), axis: e.axis }),
    })
}

/// The map catalog of a window. Maps with rate 0 are omitted.
pub fn build_catalog(window: &Window, model: &ModelSpec, ord: &LevelOrdering, arrows: &[Arrow]) -> Catalog {
    let rt = &model.rates;
    let mut maps = Vec::new();
    let mut rates = Vec::new();
    let mut funcs: Vec<Vec<u8>> = Vec::new();
    // infection: h(a_k) = lambda(a_k) - lambda(a_{k-1})
    let mut inf_levels = Vec::new();
    let mut prev = 0.0;
    for (k, &t) in ord.a.iter().enumerate() {
        let h = rt.lambda[t] - prev;
        prev = rt.lambda[t];
        if h > 0.0 {
            inf_levels.push((k as u32 + 1, h));
        }
    }
    for (ai, _) in arrows.iter().enumerate() {
        for &(level, h) in &inf_levels {
            maps.push(MapKind::Inf { level, arrow: ai as u32 });
            rates.push(h);
        }
    }
    // recovery: h(b_k) = r(b_k) - r(b_{k+1})
    let mut rec_levels = Vec::new();
    for k in 0..ord.b.len() {
        let next = if k + 1 < ord.b.len() { rt.r[ord.b[k + 1]] } else { 0.0 };
        let h = rt.r[ord.b[k]] - next;
        if h > 0.0 {
            rec_levels.push((k as u32 + 1, h));
        }
    }
    for s in 0..window.n_sites() {
        for &(level, h) in &rec_levels {
            maps.push(MapKind::Rec { level, site: s as u32 });
            rates.push(h);
        }
    }
    let n_sites = window.n_sites();
    match &model.background {
        BackgroundSpec::IndependentUpdates { .. } | BackgroundSpec::DynamicalPercolation { .. } => {
            let per_kind: Vec<Vec<(u32, f64)>> = [false, true]
                .iter()
                .map(|&edge| {
                    let q = model.background.cell_generator(edge).unwrap();
                    let qm: Vec<(Vec<u8>, f64)> = match &model.background {
                        // constant maps up_a / down_a
                        BackgroundSpec::DynamicalPercolation { .. } => vec![(vec![1, 1], q[0][1]), (vec![0, 0], q[1][0])],
                        _ => quantile_maps(&q),
                    };
                    qm.into_iter()
                        .map(|(f, h)| {
                            let id = funcs.iter().position(|g| *g == f).unwrap_or_else(|| {
                                funcs.push(f);
                                funcs.len() - 1
                            });
                            (id as u32, h)
                        })
                        .collect()
                })
                .collect();
            for c in 0..window.n_cells() {
                for &(func, h) in &per_kind[(c >= n_sites) as usize] {
                    if h > 0.0 {
                        maps.push(MapKind::Bg { cell: c as u32, func });
                        rates.push(h);
                    }
                }
            }
        }
        BackgroundSpec::SpinSystem { rates: sr, .. } => {
            for c in 0..window.n_cells() {
                let edge = c >= n_sites;
                for (v, h) in telescope(sr.up_table(edge)) {
                    maps.push(MapKind::SpinUp { cell: c as u32, threshold: v });
                    rates.push(h);
                }
                for (v, h) in telescope(sr.down_table(edge)) {
                    maps.push(MapKind::SpinDown { cell: c as u32, threshold: v });
                    rates.push(h);
                }
            }
        }
    }
    let total: f64 = rates.iter().sum();
    let sampler = if maps.is_empty() { None } else { Some(WeightedAliasIndex::new(rates.clone()).expect("positive finite rates")) };
    Catalog { maps, rates, funcs, total, sampler }
}

/// Time-ordered events of the merged Poisson stream, generated lazily and
/// prefix-consistently: extending the horizon never changes earlier events.
#[derive(Clone)]
pub struct EventStream {
    pub seed: u64,
    pub times: Vec<f64>,
    pub maps: Vec<u32>,
    horizon: f64,
    pending: Option<(f64, u32)>,
    rng: ChaCha8Rng,
}

impl EventStream {
    pub fn new(seed: u64) -> EventStream {
        EventStream { seed, times: Vec::new(), maps: Vec::new(), horizon: 0.0, pending: None, rng: rng::stream(seed, Role::Events) }
    }

    /// Stream sampled on `[0, horizon]`.
    pub fn sample(cat: &Catalog, horizon: f64, seed: u64) -> EventStream {
        let mut s = EventStream::new(seed);
        s.extend_to(cat, horizon);
        s
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn draw(&mut self, cat: &Catalog, after: f64) -> Option<(f64, u32)> {
        let sampler = cat.sampler.as_ref()?;
        let e: f64 = Exp1.sample(&mut self.rng);
        let t = after + e / cat.total;
        let m = sampler.sample(&mut self.rng) as u32;
        Some((t, m))
    }

    pub fn extend_to(&mut self, cat: &Catalog, horizon: f64) {
        if horizon <= self.horizon {
            return;
        }
        if self.pending.is_none() {
            let last = self.times.last().copied().unwrap_or(0.0);
            self.pending = self.draw(cat, last);
        }
        while let Some((t, m)) = self.pending {
            if t > horizon {
                break;
            }
            self.times.push(t);
            self.maps.push(m);
            self.pending = self.draw(cat, t);
        }
        self.horizon = horizon;
    }

    /// Index of the first event strictly after `t`.
    pub fn first_after(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Dump as CSV with columns `time,kind,level,coords`.
    pub fn write_csv<W: Write>(&self, sys: &System, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "kind", "level", "coords"])?;
        for (t, &m) in self.times.iter().zip(&self.maps) {
            let (kind, level, coords) = sys.describe(&sys.catalog.maps[m as usize]);
            w.write_record([format!("{t:.9}"), kind.to_string(), level, coords])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Chi-square goodness of fit of pooled per-map event counts against their
/// Poisson means `rate * horizon`. Returns `(statistic, degrees of freedom, p)`.
pub fn count_chi_square(cat: &Catalog, streams: &[EventStream]) -> (f64, usize, f64) {
    let mut counts = vec![0u64; cat.len()];
    let mut exposure = 0.0;
    for st in streams {
        for &m in &st.maps {
            counts[m as usize] += 1;
        }
        exposure += st.horizon();
    }
    let stat: f64 = counts
        .iter()
        .zip(&cat.rates)
        .map(|(&n, &r)| {
            let mu = r * exposure;
            (n as f64 - mu).powi(2) / mu
        })
        .sum();
    let df = cat.len();
    let p = 1.0 - ChiSquared::new(df as f64).expect("df > 0").cdf(stat);
    (stat, df, p)
}

/// Poisson index-of-dispersion test of per-map counts across streams of
/// equal horizon: `sum_m sum_k (n_mk - mean_m)^2 / mean_m` against
/// chi-square with `maps * (streams - 1)` degrees of freedom.
pub fn count_dispersion(cat: &Catalog, streams: &[EventStream]) -> (f64, usize, f64) {
    let k = streams.len();
    let mut counts = vec![vec![0u64; k]; cat.len()];
    for (j, st) in streams.iter().enumerate() {
        for &m in &st.maps {
            counts[m as usize][j] += 1;
        }
    }
    let mut stat = 0.0;
    let mut df = 0;
    for row in &counts {
        let mean = row.iter().sum::<u64>() as f64 / k as f64;
        if mean > 0.0 {
            stat += row.iter().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / mean;
            df += k - 1;
        }
    }
    let p = 1.0 - ChiSquared::new(df as f64).expect("df > 0").cdf(stat);
    (stat, df, p)
}

/// Pure form of [`System::apply`].
pub fn apply_map(sys: &System, m: &MapKind, eta: &[u8], xi: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let (mut e, mut x) = (eta.to_vec(), xi.to_vec());
    sys.apply(m, &mut e, &mut x);
    (e, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RateTable;
    use proptest::prelude::*;

    fn sys1(radius: u32, model: ModelSpec) -> System {
        System::new(Window::new(1, radius), model).unwrap()
    }

    #[test]
    fn basic_catalog_has_one_map_per_arrow_and_site() {
        let s = sys1(2, ModelSpec::basic(1.5, 0.5));
        let inf = s.catalog.maps.iter().filter(|m| matches!(m, MapKind::Inf { .. })).count();
        let rec = s.catalog.maps.iter().filter(|m| matches!(m, MapKind::Rec { .. })).count();
        assert_eq!((inf, rec), (8, 5));
        assert_eq!(s.catalog.len(), 13);
        assert!((s.catalog.total_rate() - (8.0 * 1.5 + 5.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn cpdp_has_up_and_down_per_cell() {
        let s = sys1(1, ModelSpec::new(RateTable::edge_gated(1.0, 1.0), BackgroundSpec::cpdp(0.3, 0.4, 0.5, 0.6)));
        let bg: Vec<(u32, f64)> = s
            .catalog
            .maps
            .iter()
            .zip(&s.catalog.rates)
            .filter_map(|(m, r)| if let MapKind::Bg { cell, .. } = m { Some((*cell, *r)) } else { None })
            .collect();
        assert_eq!(bg.len(), 2 * s.n_cells());
        let site0: Vec<f64> = bg.iter().filter(|(c, _)| *c == 0).map(|(_, r)| *r).collect();
        assert_eq!(site0, vec![0.3, 0.4]);
        let edge0: Vec<f64> = bg.iter().filter(|(c, _)| *c as usize == s.n_sites()).map(|(_, r)| *r).collect();
        assert_eq!(edge0, vec![0.5, 0.6]);
    }

    #[test]
    fn telescoped_levels() {
        // lambda values {0, 1, 1, 2} over the four (i, k) pairs
        let rt = RateTable::switching([[0.0, 1.0], [1.0, 2.0]], [1.0, 1.0]);
        let s = sys1(1, ModelSpec::new(rt, BackgroundSpec::cpdp(1.0, 1.0, 1.0, 1.0)));
        let a0: Vec<f64> = s
            .catalog
            .maps
            .iter()
            .zip(&s.catalog.rates)
            .filter(|(m, _)| matches!(m, MapKind::Inf { arrow: 0, .. }))
            .map(|(_, r)| *r)
            .collect();
        assert_eq!(a0, vec![1.0, 1.0]);
    }

    #[test]
    fn rate_reconstruction_exhaustive() {
        for n in 0..=2usize {
            let rt = RateTable::from_fn(n, |i, j, k| ((i * 7 + j * 3 + k * 5) % 4) as f64 * 0.5, |i| [1.0, 0.25, 0.5][i]);
            let m = n + 1;
            let q: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { -((m - 1) as f64) } else { 1.0 }).collect()).collect();
            let model = ModelSpec::new(rt.clone(), BackgroundSpec::IndependentUpdates { q_site: q.clone(), q_edge: q });
            let s = sys1(1, model);
            assert!(s.reconstruction_error() < 1e-12);
        }
    }

    #[test]
    fn quantile_maps_reproduce_generator() {
        let q = vec![vec![-1.0, 0.7, 0.3], vec![0.5, -1.5, 1.0], vec![0.2, 2.0, -2.2]];
        let maps = quantile_maps(&q);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let rate: f64 = maps.iter().filter(|(f, _)| f[i] as usize == j).map(|(_, h)| h).sum();
                    assert!((rate - q[i][j]).abs() < 1e-12, "{i}->{j}: {rate}");
                }
            }
        }
    }

    #[test]
    fn quantile_maps_are_monotone_for_monotone_chains() {
        let bd = vec![vec![-1.0, 1.0, 0.0], vec![2.0, -3.0, 1.0], vec![0.0, 0.5, -0.5]];
        for (f, _) in quantile_maps(&bd) {
            assert!(f.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
        }
    }

    #[test]
    fn empty_catalog_gives_empty_stream() {
        let s = sys1(2, ModelSpec::basic(0.0, 0.0));
        assert!(s.catalog.is_empty());
        let st = EventStream::sample(&s.catalog, 100.0, 1);
        assert!(st.is_empty());
    }

    #[test]
    fn stream_is_deterministic_and_prefix_consistent() {
        let s = sys1(3, ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0));
        let a = EventStream::sample(&s.catalog, 20.0, 5);
        let b = EventStream::sample(&s.catalog, 20.0, 5);
        assert_eq!(a.times, b.times);
        assert_eq!(a.maps, b.maps);
        let mut c = EventStream::sample(&s.catalog, 7.0, 5);
        c.extend_to(&s.catalog, 13.0);
        c.extend_to(&s.catalog, 20.0);
        assert_eq!(a.times, c.times);
        assert_eq!(a.maps, c.maps);
        assert!(a.times.windows(2).all(|w| w[0] < w[1]));
        let mut buf = Vec::new();
        a.write_csv(&s, &mut buf).unwrap();
        let mut buf2 = Vec::new();
        b.write_csv(&s, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn single_map_counts() {
        // one site, recovery only, rate 2
        let s = System::new(Window::new(1, 0), ModelSpec::basic(0.0, 2.0)).unwrap();
        let mut sum = 0.0;
        for seed in 0..200 {
            sum += EventStream::sample(&s.catalog, 1000.0, seed).len() as f64;
        }
        let mean = sum / 200.0;
        assert!((mean - 2000.0).abs() < 3.0 * 2000f64.sqrt(), "{mean}");
    }

    #[test]
    fn counts_fit_poisson() {
        let s = System::new(Window::new(1, 2), ModelSpec::new(RateTable::switching([[0.5, 1.0], [1.0, 2.0]], [1.2, 0.6]), BackgroundSpec::cpdp(0.8, 1.1, 1.0, 1.0))).unwrap();
        let streams: Vec<EventStream> = (0..100).map(|k| EventStream::sample(&s.catalog, 50.0, k)).collect();
        let (_, df, p) = count_chi_square(&s.catalog, &streams);
        assert_eq!(df, s.catalog.len());
        assert!(p > 0.001, "{p}");
        let (_, _, pd) = count_dispersion(&s.catalog, &streams);
        assert!(pd > 0.001, "{pd}");
    }

    #[test]
    fn apply_examples() {
        let s = sys1(1, ModelSpec::dynamical_graph(1.0, 1.0, 1.0, 1.0));
        let n = s.n_cells();
        let inf = *s.catalog.maps.iter().find(|m| matches!(m, MapKind::Inf { .. })).unwrap();
        let MapKind::Inf { arrow, .. } = inf else { unreachable!() };
        let a = s.arrows[arrow as usize];
        let mut eta = vec![0u8; 3];
        eta[a.from as usize] = 1;
        // closed edge: blocked
        let (e2, _) = apply_map(&s, &inf, &eta, &vec![0; n]);
        assert_eq!(e2, eta);
        assert!(!s.usable(&inf, &vec![0; n]));
        let mut xi = vec![0; n];
        xi[a.edge as usize] = 1;
        let (e3, _) = apply_map(&s, &inf, &eta, &xi);
        assert_eq!(e3[a.to as usize], 1);
        // recovery at an uninfected site is the identity
        let rec = MapKind::Rec { level: 1, site: a.to };
        assert_eq!(apply_map(&s, &rec, &eta, &xi).0, eta);
        // up then down leaves 0
        let up = *s.catalog.maps.iter().find(|m| matches!(m, MapKind::Bg { cell: 0, func } if s.catalog.funcs[*func as usize] == vec![1, 1])).unwrap();
        let down = *s.catalog.maps.iter().find(|m| matches!(m, MapKind::Bg { cell: 0, func } if s.catalog.funcs[*func as usize] == vec![0, 0])).unwrap();
        for start in 0..2u8 {
            let mut x = vec![start; n];
            let mut e = vec![0; 3];
            s.apply(&up, &mut e, &mut x);
            s.apply(&down, &mut e, &mut x);
            assert_eq!(x[0], 0);
        }
    }

    #[test]
    fn basic_arrows_always_usable() {
        let s = sys1(2, ModelSpec::basic(1.0, 1.0));
        for m in &s.catalog.maps {
            assert!(s.usable(m, &vec![0; s.n_cells()]));
        }
        let g = sys1(1, ModelSpec::dynamical_graph(1.0, 1.0, 1.0, 1.0));
        // a level-1 arrow is usable under every background
        let lvl1 = MapKind::Inf { level: 1, arrow: 0 };
        for bits in 0..8u8 {
            let mut xi = vec![0u8; g.n_cells()];
            let a = g.arrows[0];
            xi[a.from as usize] = bits & 1;
            xi[a.edge as usize] = (bits >> 1) & 1;
            xi[a.to as usize] = (bits >> 2) & 1;
            assert!(g.usable(&lvl1, &xi));
        }
    }

    #[test]
    fn spin_thresholds_reproduce_rates() {
        let sr = SpinRates::NeighborCount {
            site_up: vec![0.5, 1.0, 2.0, 2.0, 3.0],
            site_down: vec![2.0, 1.0, 1.0, 0.5, 0.5],
            edge_up: vec![1.0; 7],
            edge_down: vec![1.0; 7],
        };
        let s = sys1(3, ModelSpec::new(RateTable::edge_gated(1.0, 1.0), BackgroundSpec::SpinSystem { range: 1, rates: sr }));
        let mut xi = vec![0u8; s.n_cells()];
        let c = s.window.site_index(Site::ORIGIN).unwrap();
        for (i, v) in xi.iter_mut().enumerate() {
            *v = (i % 3 == 0) as u8;
        }
        let up = s.spin_rate(c, &xi, true);
        let total: f64 = s
            .catalog
            .maps
            .iter()
            .zip(&s.catalog.rates)
            .filter(|(m, _)| matches!(m, MapKind::SpinUp { cell, threshold } if *cell as usize == c && *threshold <= up))
            .map(|(_, h)| h)
            .sum();
        assert!((total - up).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn apply_commutes_with_translation(bits in proptest::collection::vec(0u8..2, 7), shift in -2i32..=2, which in 0usize..40) {
            // window [-5,5]; maps on [-2,2] shifted by `shift`
            let s = System::new(Window::new(1, 5), ModelSpec::dynamical_graph(1.0, 1.0, 1.0, 1.0)).unwrap();
            let w = &s.window;
            let m = s.catalog.maps[which % s.catalog.len()];
            let involved: Vec<Site> = match m {
                MapKind::Inf { arrow, .. } => { let a = s.arrows[arrow as usize]; vec![w.site(a.from as usize), w.site(a.to as usize)] }
                MapKind::Rec { site, .. } => vec![w.site(site as usize)],
                MapKind::Bg { cell, .. } => w.cell(cell as usize).points(),
                _ => vec![],
            };
            prop_assume!(involved.iter().all(|x| x.0[0].abs() <= 2));
            let mut eta = vec![0u8; s.n_sites()];
            let mut xi = vec![0u8; s.n_cells()];
            for (k, b) in bits.iter().enumerate() {
                let x = Site::new(&[k as i32 - 3]);
                eta[w.site_index(x).unwrap()] = *b;
                xi[w.site_index(x).unwrap()] = 1 - *b;
                xi[w.cell_index(Cell::Edge(Edge { lo: x, axis: 0 })).unwrap()] = *b;
            }
            let shift_cell = |c: usize, by: i32| w.cell_index(translate(w.cell(c), Site::new(&[by])).unwrap()).unwrap();
            let valid = |c: usize| w.cell(c).points().iter().all(|p| p.0[0].abs() <= 3);
            let shift_state = |v: &[u8], n: usize, by: i32| {
                let mut out = vec![0u8; v.len()];
                for c in (0..n).filter(|&c| valid(c)) { let t = shift_cell(c, by); out[t] = v[c]; }
                out
            };
            let shifted_map = match m {
                MapKind::Inf { level, arrow } => {
                    let a = s.arrows[arrow as usize];
                    let f = shift_cell(a.from as usize, shift) as u32;
                    let t = shift_cell(a.to as usize, shift) as u32;
                    let idx = s.arrows.iter().position(|b| b.from == f && b.to == t).unwrap() as u32;
                    MapKind::Inf { level, arrow: idx }
                }
                MapKind::Rec { level, site } => MapKind::Rec { level, site: shift_cell(site as usize, shift) as u32 },
                MapKind::Bg { cell, func } => MapKind::Bg { cell: shift_cell(cell as usize, shift) as u32, func },
                other => other,
            };
            // only cells in [-3,3] are populated, so shifting within [-5,5] is lossless
            let eta_m: Vec<u8> = eta.iter().enumerate().map(|(i, v)| if valid(i) { *v } else { 0 }).collect();
            let xi_m: Vec<u8> = xi.iter().enumerate().map(|(i, v)| if valid(i) { *v } else { 0 }).collect();
            let (e1, x1) = apply_map(&s, &m, &eta_m, &xi_m);
            let (e2, x2) = apply_map(&s, &shifted_map, &shift_state(&eta_m, s.n_sites(), shift), &shift_state(&xi_m, s.n_cells(), shift));
            prop_assert_eq!(shift_state(&e1, s.n_sites(), shift), e2);
            prop_assert_eq!(shift_state(&x1, s.n_cells(), shift), x2);
        }
    }
}
