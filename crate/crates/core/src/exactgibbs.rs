//! Exact conditional laws by enumeration, and the checks built on them.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::lattice::{dist, sphere_count, Region, Torus, Vertex};
use crate::model::{BoundaryCondition, Spec, Symbol};

/// Caps on exhaustive enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    /// Boundary assignments visited when enumerating feasible boundaries.
    pub boundary: u64,
    /// Weighted configurations produced by one interior enumeration.
    pub interior: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            boundary: 1 << 22,
            interior: 1 << 24,
        }
    }
}

/// Running sum, compensated when `kahan` is set.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Summer {
    sum: f64,
    c: f64,
    kahan: bool,
}

impl Summer {
    pub(crate) fn new(kahan: bool) -> Self {
        Summer {
            sum: 0.0,
            c: 0.0,
            kahan,
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        if self.kahan {
            let y = x - self.c;
            let t = self.sum + y;
            self.c = (t - self.sum) - y;
            self.sum = t;
        } else {
            self.sum += x;
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

/// Regions above this size use compensated summation.
pub(crate) const KAHAN_ABOVE: usize = 12;

/// Depth-first enumeration of configurations with positive weight, in
/// lexicographic order of the domain's site order. The callback returns
/// `false` to stop early. Returns the number of leaves visited.
pub(crate) fn dfs<F>(spec: &Spec, dom: &Domain, tau: &[Symbol], limit: u64, mut f: F) -> Result<u64>
where
    F: FnMut(&[Symbol], f64) -> bool,
{
    let n = dom.len();
    if n == 0 {
        f(&[], 1.0);
        return Ok(1);
    }
    let q = spec.q() as Symbol;
    let mut cfg = vec![0 as Symbol; n];
    let mut w = vec![1.0f64; n + 1];
    let mut next = vec![0 as Symbol; n];
    let mut depth = 0usize;
    let mut leaves = 0u64;
    loop {
        if next[depth] == q {
            if depth == 0 {
                break;
            }
            next[depth] = 0;
            depth -= 1;
            continue;
        }
        let s = next[depth];
        next[depth] += 1;
        let x = w[depth] * dom.site_factor(spec, depth, s, &cfg, tau);
        if x == 0.0 {
            continue;
        }
        cfg[depth] = s;
        w[depth + 1] = x;
        if depth + 1 == n {
            leaves += 1;
            if leaves > limit {
                return Err(Error::Capacity {
                    what: format!("interior enumeration of {n} sites"),
                    needed: leaves as u128,
                    limit: limit as u128,
                });
            }
            if !f(&cfg, x) {
                return Ok(leaves);
            }
        } else {
            depth += 1;
            next[depth] = 0;
        }
    }
    Ok(leaves)
}

/// True when some configuration on the domain has positive weight.
pub(crate) fn extends(spec: &Spec, dom: &Domain, tau: &[Symbol]) -> bool {
    let mut found = false;
    let _ = dfs(spec, dom, tau, u64::MAX, |_, _| {
        found = true;
        false
    });
    found
}

/// Exact law of a configuration on a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    region: Region,
    support: Vec<Vec<Symbol>>,
    probs: Vec<f64>,
}

impl Pmf {
    /// Build from rows on `region` (listed in the region's order). Rows are
    /// sorted; duplicates and negative masses are rejected.
    pub fn new(region: Region, rows: Vec<Vec<Symbol>>, probs: Vec<f64>) -> Result<Pmf> {
        if rows.len() != probs.len() {
            return Err(invalid("probs", "length differs from support"));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != region.len()) {
            return Err(Error::RegionMismatch(format!(
                "row of length {} on a region of {} vertices",
                r.len(),
                region.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("probs", "masses must be non-negative"));
        }
        let mut pairs: Vec<(Vec<Symbol>, f64)> = rows.into_iter().zip(probs).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("support", "duplicate configuration"));
        }
        let (support, probs) = pairs.into_iter().unzip();
        Ok(Pmf {
            region,
            support,
            probs,
        })
    }

    /// A law on a single site at the origin of Z^1, given as symbol masses.
    pub fn single_site(masses: &[f64]) -> Result<Pmf> {
        let region = Region::singleton(Vertex::origin(1));
        let (rows, probs): (Vec<_>, Vec<_>) = masses
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(s, p)| (vec![s as Symbol], *p))
            .unzip();
        Pmf::new(region, rows, probs)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[Vec<Symbol>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[Symbol], f64)> {
        self.support.iter().map(|r| r.as_slice()).zip(self.probs.iter().copied())
    }

    pub fn prob_of(&self, cfg: &[Symbol]) -> f64 {
        match self.support.binary_search_by(|r| r.as_slice().cmp(cfg)) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn check_boundary(v: &Region, tau: &BoundaryCondition) -> Result<()> {
    if tau.region() != &v.boundary() {
        return Err(Error::RegionMismatch(
            "boundary condition is not defined on the boundary of the region".into(),
        ));
    }
    Ok(())
}

/// Configurations on `v` with positive weight under `tau`, lexicographic.
pub fn enumerate_feasible(spec: &Spec, v: &Region, tau: &BoundaryCondition) -> Result<Vec<Vec<Symbol>>> {
    check_boundary(v, tau)?;
    let dom = Domain::lattice(v);
    let mut out = Vec::new();
    dfs(spec, &dom, tau.values(), Limits::default().interior, |c, _| {
        out.push(c.to_vec());
        true
    })?;
    Ok(out)
}

fn normalize(region: Region, rows: Vec<Vec<Symbol>>, weights: Vec<f64>) -> Result<Pmf> {
    if rows.is_empty() {
        return Err(Error::InfeasibleBoundary);
    }
    let mut z = Summer::new(region.len() > KAHAN_ABOVE);
    for w in &weights {
        z.add(*w);
    }
    let z = z.value();
    if !(z.is_finite() && z > 0.0) {
        return Err(invalid("weights", format!("normalizing constant {z} is not usable")));
    }
    let probs = weights.into_iter().map(|w| w / z).collect();
    Ok(Pmf {
        region,
        support: rows,
        probs,
    })
}

/// The conditional law `P^tau_V`.
pub fn conditional_dist(spec: &Spec, v: &Region, tau: &BoundaryCondition) -> Result<Pmf> {
    conditional_dist_with(spec, v, tau, &Limits::default())
}

pub fn conditional_dist_with(
    spec: &Spec,
    v: &Region,
    tau: &BoundaryCondition,
    limits: &Limits,
) -> Result<Pmf> {
    check_boundary(v, tau)?;
    let dom = Domain::lattice(v);
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    dfs(spec, &dom, tau.values(), limits.interior, |c, w| {
        rows.push(c.to_vec());
        weights.push(w);
        true
    })?;
    normalize(v.clone(), rows, weights)
}

/// Exact Gibbs law of the whole torus.
pub fn torus_gibbs(spec: &Spec, torus: &Torus) -> Result<Pmf> {
    let dom = Domain::torus(torus);
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    dfs(spec, &dom, &[], Limits::default().interior, |c, w| {
        rows.push(c.to_vec());
        weights.push(w);
        true
    })?;
    normalize(torus.vertices(), rows, weights)
}

/// Projection of `p` onto `u`.
pub fn marginal(p: &Pmf, u: &Region) -> Result<Pmf> {
    let pos: Vec<usize> = u
        .iter()
        .map(|x| {
            p.region
                .index_of(x)
                .ok_or_else(|| Error::RegionMismatch(format!("{x} is not in the region")))
        })
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<Vec<Symbol>, f64> = BTreeMap::new();
    for (row, pr) in p.iter() {
        let key: Vec<Symbol> = pos.iter().map(|&i| row[i]).collect();
        *acc.entry(key).or_insert(0.0) += pr;
    }
    let (support, probs) = acc.into_iter().unzip();
    Ok(Pmf {
        region: u.clone(),
        support,
        probs,
    })
}

/// Half the l1 distance between two laws on the same region.
pub fn tv_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.region != q.region {
        return Err(Error::RegionMismatch("laws live on different regions".into()));
    }
    let (mut i, mut j) = (0, 0);
    let mut s = 0.0;
    while i < p.len() || j < q.len() {
        let ord = match (p.support.get(i), q.support.get(j)) {
            (Some(a), Some(b)) => a.cmp(b),
            (Some(_), None) => std::cmp::Ordering::Less,
            _ => std::cmp::Ordering::Greater,
        };
        match ord {
            std::cmp::Ordering::Less => {
                s += p.probs[i];
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                s += q.probs[j];
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                s += (p.probs[i] - q.probs[j]).abs();
                i += 1;
                j += 1;
            }
        }
    }
    Ok((s / 2.0).min(1.0))
}

/// Boundary assignments on `∂V` that are edge-consistent and extend into `V`,
/// in lexicographic order.
pub fn feasible_boundaries(spec: &Spec, v: &Region, limits: &Limits) -> Result<Vec<Vec<Symbol>>> {
    let bnd = v.boundary();
    let bdom = Domain::ordered(bnd.vertices().to_vec(), &Region::empty(v.dim()));
    let inner = Domain::lattice(v);
    let check = spec.has_hard_constraints();
    if dfs(spec, &bdom, &[], limits.boundary, |_, _| true).is_err() {
        return Err(Error::Capacity {
            what: format!("boundary enumeration of {} vertices", bnd.len()),
            needed: (spec.q() as u128).saturating_pow(bnd.len() as u32),
            limit: limits.boundary as u128,
        });
    }
    let mut out = Vec::new();
    let mut visited = 0u64;
    let mut over = false;
    dfs(spec, &bdom, &[], u64::MAX, |t, _| {
        visited += 1;
        if visited > limits.boundary {
            over = true;
            return false;
        }
        if !check || extends(spec, &inner, t) {
            out.push(t.to_vec());
        }
        true
    })?;
    if over {
        return Err(Error::Capacity {
            what: format!("boundary enumeration of {} vertices", bnd.len()),
            needed: (spec.q() as u128).saturating_pow(bnd.len() as u32),
            limit: limits.boundary as u128,
        });
    }
    Ok(out)
}

/// The conditional laws of a family of boundary conditions on a region,
/// tabulated over a common candidate list.
///
/// Sites are ordered with `U` first (lexicographic), then `V \ U`
/// (lexicographic). Candidates are sorted in that order, so configurations
/// sharing a restriction to `U` form contiguous groups.
#[derive(Clone, Debug)]
pub struct Family {
    region: Region,
    u: Region,
    key_sites: Vec<Vertex>,
    /// Position in `key_sites` of each vertex of `region` (lexicographic).
    lex_to_key: Vec<usize>,
    u_len: usize,
    width: usize,
    candidates: Vec<Symbol>,
    group_start: Vec<usize>,
    taus: Vec<Vec<Symbol>>,
    probs: Vec<Vec<f64>>,
}

impl Family {
    /// Tabulate `P^tau_V` for every `tau` in `taus` (default: every
    /// feasible boundary condition).
    pub fn build(
        spec: &Spec,
        v: &Region,
        u: &Region,
        taus: Option<Vec<Vec<Symbol>>>,
        limits: &Limits,
    ) -> Result<Family> {
        if !u.is_subset_of(v) {
            return Err(Error::RegionMismatch("U is not contained in V".into()));
        }
        let taus = match taus {
            Some(t) => t,
            None => feasible_boundaries(spec, v, limits)?,
        };
        let rest = v.difference(u);
        let key_sites: Vec<Vertex> = u.iter().chain(rest.iter()).copied().collect();
        let bnd = v.boundary();
        let inner = Domain::ordered(key_sites.clone(), &Region::empty(v.dim()));
        let full = Domain::ordered(key_sites.clone(), &bnd);
        let width = key_sites.len();
        let mut candidates = Vec::new();
        let mut inner_w = Vec::new();
        dfs(spec, &inner, &[], limits.interior, |c, w| {
            candidates.extend_from_slice(c);
            inner_w.push(w);
            true
        })?;
        let n_cand = inner_w.len();
        let cells = (n_cand as u128) * (taus.len() as u128);
        if cells > limits.interior as u128 {
            return Err(Error::Capacity {
                what: "boundary family table".into(),
                needed: cells,
                limit: limits.interior as u128,
            });
        }
        let u_len = u.len();
        let mut group_start = vec![0];
        for k in 1..n_cand {
            let a = &candidates[(k - 1) * width..(k - 1) * width + u_len];
            let b = &candidates[k * width..k * width + u_len];
            if a != b {
                group_start.push(k);
            }
        }
        group_start.push(n_cand);
        if n_cand == 0 {
            group_start = vec![0];
        }
        let edges = full.boundary_edges();
        let kahan = width > KAHAN_ABOVE;
        let mut probs = Vec::with_capacity(taus.len());
        for t in &taus {
            if t.len() != bnd.len() {
                return Err(Error::RegionMismatch("boundary condition length".into()));
            }
            let mut row = Vec::with_capacity(n_cand);
            let mut z = Summer::new(kahan);
            for k in 0..n_cand {
                let c = &candidates[k * width..(k + 1) * width];
                let mut w = inner_w[k];
                for &(i, b) in &edges {
                    w *= spec.edge_weight(c[i as usize], t[b as usize]);
                }
                z.add(w);
                row.push(w);
            }
            let z = z.value();
            if z <= 0.0 {
                return Err(Error::InfeasibleBoundary);
            }
            for w in row.iter_mut() {
                *w /= z;
            }
            probs.push(row);
        }
        let lex_to_key = v
            .iter()
            .map(|x| key_sites.iter().position(|y| y == x).unwrap())
            .collect();
        Ok(Family {
            region: v.clone(),
            u: u.clone(),
            key_sites,
            lex_to_key,
            u_len,
            width,
            candidates,
            group_start,
            taus,
            probs,
        })
    }

    /// A family of laws on one site, given as symbol masses (normalized here).
    pub fn from_pmfs(pmfs: &[Vec<f64>]) -> Result<Family> {
        if pmfs.is_empty() {
            return Err(invalid("family", "needs at least one law"));
        }
        let q = pmfs[0].len();
        if q == 0 || pmfs.iter().any(|p| p.len() != q) {
            return Err(invalid("family", "laws must share one alphabet"));
        }
        let mut probs = Vec::new();
        for p in pmfs {
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(invalid("family", "masses must be non-negative"));
            }
            let z: f64 = p.iter().sum();
            if z <= 0.0 {
                return Err(invalid("family", "law with zero total mass"));
            }
            probs.push(p.iter().map(|x| x / z).collect::<Vec<f64>>());
        }
        let region = Region::singleton(Vertex::origin(1));
        Ok(Family {
            u: region.clone(),
            key_sites: region.vertices().to_vec(),
            region,
            lex_to_key: vec![0],
            u_len: 1,
            width: 1,
            candidates: (0..q as Symbol).collect(),
            group_start: (0..=q).collect(),
            taus: (0..pmfs.len()).map(|i| vec![i as Symbol]).collect(),
            probs,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn u(&self) -> &Region {
        &self.u
    }

    pub fn key_sites(&self) -> &[Vertex] {
        &self.key_sites
    }

    pub fn lex_to_key(&self) -> &[usize] {
        &self.lex_to_key
    }

    pub fn u_len(&self) -> usize {
        self.u_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_candidates(&self) -> usize {
        if self.width == 0 {
            self.probs.first().map_or(0, |p| p.len())
        } else {
            self.candidates.len() / self.width
        }
    }

    pub fn candidate(&self, k: usize) -> &[Symbol] {
        &self.candidates[k * self.width..(k + 1) * self.width]
    }

    pub fn n_groups(&self) -> usize {
        self.group_start.len().saturating_sub(1)
    }

    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        self.group_start[g]..self.group_start[g + 1]
    }

    pub fn taus(&self) -> &[Vec<Symbol>] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn probs(&self, t: usize) -> &[f64] {
        &self.probs[t]
    }

    /// `P^tau_{V,U}` over groups.
    pub fn group_probs(&self, t: usize) -> Vec<f64> {
        let p = &self.probs[t];
        (0..self.n_groups())
            .map(|g| self.group_range(g).map(|k| p[k]).sum())
            .collect()
    }

    /// Pointwise minimum over the family of the group masses.
    pub fn min_measure(&self) -> Vec<f64> {
        let mut m = vec![f64::INFINITY; self.n_groups()];
        for t in 0..self.len() {
            for (g, x) in self.group_probs(t).into_iter().enumerate() {
                m[g] = m[g].min(x);
            }
        }
        if self.is_empty() {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    /// Configuration in key order, rearranged to lexicographic order of V.
    pub fn to_lex(&self, key_cfg: &[Symbol]) -> Vec<Symbol> {
        self.lex_to_key.iter().map(|&k| key_cfg[k]).collect()
    }

    pub fn pmf(&self, t: usize) -> Pmf {
        let rows: Vec<Vec<Symbol>> = (0..self.n_candidates())
            .filter(|&k| self.probs[t][k] > 0.0)
            .map(|k| self.to_lex(self.candidate(k)))
            .collect();
        let probs: Vec<f64> = self.probs[t].iter().copied().filter(|&p| p > 0.0).collect();
        Pmf::new(self.region.clone(), rows, probs).expect("family rows are distinct")
    }
}

/// `gamma(V,U)`: total mass of the pointwise minimum over all feasible
/// boundary conditions of the marginals on `U`.
pub fn gamma(spec: &Spec, v: &Region, u: &Region) -> Result<f64> {
    gamma_with(spec, v, u, &Limits::default())
}

pub fn gamma_with(spec: &Spec, v: &Region, u: &Region, limits: &Limits) -> Result<f64> {
    if !u.is_subset_of(v) {
        return Err(Error::RegionMismatch("U is not contained in V".into()));
    }
    if spec.is_boundary_independent() {
        return Ok(1.0);
    }
    let fam = Family::build(spec, v, u, None, limits)?;
    Ok(fam.min_measure().iter().sum::<f64>().min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// `gamma({v},{v}) > 1 - 1/(2d)`.
pub fn check_high_noise(spec: &Spec) -> Result<Verdict> {
    let v = Region::singleton(Vertex::origin(spec.dim()));
    let value = gamma(spec, &v, &v)?;
    let threshold = 1.0 - 1.0 / (2.0 * spec.dim() as f64);
    Ok(Verdict {
        value,
        threshold,
        pass: value > threshold,
    })
}

fn single_site_family(spec: &Spec) -> Result<(Region, Vec<Vec<Symbol>>, Vec<Vec<f64>>)> {
    let v = Region::singleton(Vertex::origin(spec.dim()));
    let fam = Family::build(spec, &v, &v, None, &Limits::default())?;
    let q = spec.q();
    let laws = (0..fam.len())
        .map(|t| {
            let mut law = vec![0.0; q];
            for k in 0..fam.n_candidates() {
                law[fam.candidate(k)[0] as usize] += fam.probs(t)[k];
            }
            law
        })
        .collect();
    Ok((v.boundary(), fam.taus().to_vec(), laws))
}

fn tv_vec(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

/// Sum over neighbours `u` of the largest single-site influence of changing
/// the boundary at `u` alone; passes below 1.
pub fn check_dobrushin(spec: &Spec) -> Result<Verdict> {
    let (bnd, taus, laws) = single_site_family(spec)?;
    let mut total = 0.0;
    for b in 0..bnd.len() {
        let mut classes: HashMap<Vec<Symbol>, Vec<usize>> = HashMap::new();
        for (t, tau) in taus.iter().enumerate() {
            let mut key = tau.clone();
            key.remove(b);
            classes.entry(key).or_default().push(t);
        }
        let mut worst: f64 = 0.0;
        for members in classes.values() {
            for (i, &a) in members.iter().enumerate() {
                for &c in &members[i + 1..] {
                    worst = worst.max(tv_vec(&laws[a], &laws[c]));
                }
            }
        }
        total += worst;
    }
    Ok(Verdict {
        value: total,
        threshold: 1.0,
        pass: total < 1.0,
    })
}

/// Largest single-site TV over all pairs of feasible boundary conditions,
/// compared with the supplied percolation threshold.
pub fn check_disagreement_percolation(spec: &Spec, p_c: f64) -> Result<Verdict> {
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(invalid("p_c", "must lie in (0, 1]"));
    }
    let (_, _, laws) = single_site_family(spec)?;
    let mut worst: f64 = 0.0;
    for (i, a) in laws.iter().enumerate() {
        for b in &laws[i + 1..] {
            worst = worst.max(tv_vec(a, b));
        }
    }
    Ok(Verdict {
        value: worst,
        threshold: p_c,
        pass: worst < p_c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Weak,
    Strong,
    RatioWeak,
    RatioStrong,
}

impl MixingKind {
    fn is_ratio(self) -> bool {
        matches!(self, MixingKind::RatioWeak | MixingKind::RatioStrong)
    }

    fn is_strong(self) -> bool {
        matches!(self, MixingKind::Strong | MixingKind::RatioStrong)
    }
}

/// Which boundary pairs a probe compares.
#[derive(Clone, Debug, PartialEq)]
pub enum PairGen {
    /// Every ordered pair of feasible boundary conditions.
    AllFeasible,
    /// Pairs of feasible constant boundary conditions.
    Constant,
    /// Feasible pairs whose disagreement set lies inside the region.
    DisagreeWithin(Region),
    Explicit(Vec<(BoundaryCondition, BoundaryCondition)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub v: Region,
    pub u: Region,
    pub pairs: PairGen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub kind: MixingKind,
    /// (separation, worst normalized discrepancy), separations increasing.
    pub distances: Vec<(u32, f64)>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub residual: Option<f64>,
}

impl MixingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("separation,worst_discrepancy\n");
        for (r, x) in &self.distances {
            s.push_str(&format!("{r},{x:e}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Least-squares line through `(x, ln y)` for positive `y`:
/// (slope, intercept, RMS residual).
pub fn log_linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|(x, y)| (*x, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Some((slope, intercept, rms))
}

fn discrepancy(kind: MixingKind, p: &[f64], q: &[f64], u_len: usize) -> f64 {
    let d = if kind.is_ratio() {
        let one = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| 1.0 - y / x)
                .fold(0.0f64, f64::max)
        };
        one(p, q).max(one(q, p))
    } else {
        tv_vec(p, q)
    };
    d / u_len.max(1) as f64
}

/// Worst normalized discrepancy between the marginals on `U` of pairs of
/// boundary conditions, per separation.
pub fn mixing_profile(spec: &Spec, kind: MixingKind, family: &[Probe]) -> Result<MixingReport> {
    mixing_profile_with(spec, kind, family, &Limits::default())
}

pub fn mixing_profile_with(
    spec: &Spec,
    kind: MixingKind,
    family: &[Probe],
    limits: &Limits,
) -> Result<MixingReport> {
    let mut worst: BTreeMap<u32, f64> = BTreeMap::new();
    for probe in family {
        let bnd = probe.v.boundary();
        let taus = match &probe.pairs {
            PairGen::Explicit(list) => {
                let mut ts: Vec<Vec<Symbol>> = Vec::new();
                for (a, b) in list {
                    check_boundary(&probe.v, a)?;
                    check_boundary(&probe.v, b)?;
                    ts.push(a.values().to_vec());
                    ts.push(b.values().to_vec());
                }
                ts.sort();
                ts.dedup();
                ts
            }
            _ => feasible_boundaries(spec, &probe.v, limits)?,
        };
        let fam = Family::build(spec, &probe.v, &probe.u, Some(taus), limits)?;
        let index: HashMap<&[Symbol], usize> = fam
            .taus()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i))
            .collect();
        let marg: Vec<Vec<f64>> = (0..fam.len()).map(|t| fam.group_probs(t)).collect();
        let weak_sep = dist(&probe.u, &bnd);
        let mut record = |a: usize, b: usize| {
            let ta = &fam.taus()[a];
            let tb = &fam.taus()[b];
            let sep = if kind.is_strong() {
                let sigma: Vec<Vertex> = bnd
                    .iter()
                    .zip(ta.iter().zip(tb))
                    .filter(|(_, (x, y))| x != y)
                    .map(|(v, _)| *v)
                    .collect();
                if sigma.is_empty() {
                    return;
                }
                dist(&probe.u, &Region::new(bnd.dim(), sigma))
            } else {
                weak_sep
            };
            let d = discrepancy(kind, &marg[a], &marg[b], probe.u.len());
            let e = worst.entry(sep).or_insert(0.0);
            *e = e.max(d);
        };
        match &probe.pairs {
            PairGen::AllFeasible => {
                for a in 0..fam.len() {
                    for b in a + 1..fam.len() {
                        record(a, b);
                    }
                }
            }
            PairGen::Constant => {
                let consts: Vec<usize> = (0..fam.len())
                    .filter(|&t| fam.taus()[t].windows(2).all(|w| w[0] == w[1]))
                    .collect();
                for (i, &a) in consts.iter().enumerate() {
                    for &b in &consts[i + 1..] {
                        record(a, b);
                    }
                }
            }
            PairGen::DisagreeWithin(region) => {
                let free: Vec<usize> = bnd
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| region.contains(x))
                    .map(|(i, _)| i)
                    .collect();
                let mut classes: HashMap<Vec<Symbol>, Vec<usize>> = HashMap::new();
                for (t, tau) in fam.taus().iter().enumerate() {
                    let key: Vec<Symbol> = tau
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !free.contains(i))
                        .map(|(_, s)| *s)
                        .collect();
                    classes.entry(key).or_default().push(t);
                }
                let mut keys: Vec<_> = classes.keys().cloned().collect();
                keys.sort();
                for k in keys {
                    let members = &classes[&k];
                    for (i, &a) in members.iter().enumerate() {
                        for &b in &members[i + 1..] {
                            record(a, b);
                        }
                    }
                }
            }
            PairGen::Explicit(list) => {
                for (x, y) in list {
                    let a = index[x.values()];
                    let b = index[y.values()];
                    record(a, b);
                }
            }
        }
    }
    let distances: Vec<(u32, f64)> = worst.into_iter().collect();
    let pts: Vec<(f64, f64)> = distances.iter().map(|(r, x)| (*r as f64, *x)).collect();
    let fit = log_linear_fit(&pts);
    Ok(MixingReport {
        kind,
        distances,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        residual: fit.map(|f| f.2),
    })
}

/// Segments `{-n..n}` in d = 1 with `U = {0}`, compared under the constant
/// boundary conditions.
pub fn preset_segments(ns: &[u32]) -> Vec<Probe> {
    ns.iter()
        .map(|&n| Probe {
            v: crate::lattice::ball(n, 1),
            u: crate::lattice::ball(0, 1),
            pairs: PairGen::Constant,
        })
        .collect()
}

/// Boxes `Λ_n` with `U = {0}` under all feasible boundary pairs.
pub fn preset_boxes(ns: &[u32], d: usize) -> Vec<Probe> {
    ns.iter()
        .map(|&n| Probe {
            v: crate::lattice::ball(n, d),
            u: crate::lattice::ball(0, d),
            pairs: PairGen::AllFeasible,
        })
        .collect()
}

/// The restricted planar class: `V = S_r x S_r`, `U = {0} x S_r`, boundary
/// pairs differing only on the columns `x = ±(r+1)`.
pub fn preset_planar_strip(r: u32) -> Probe {
    let r = r as i32;
    let v = crate::lattice::boxed(&[-r, -r], &[r, r]);
    let u = crate::lattice::boxed(&[0, -r], &[0, r]);
    let sides: Vec<Vertex> = (-r..=r)
        .flat_map(|y| [Vertex::new(&[-r - 1, y]), Vertex::new(&[r + 1, y])])
        .collect();
    Probe {
        v,
        u,
        pairs: PairGen::DisagreeWithin(Region::new(2, sides)),
    }
}

/// `3 s_{⌊r/2⌋} sqrt(rho(⌊r/2⌋))`, infinite at `r = 1`.
pub fn rho_star(rho_values: &BTreeMap<u32, f64>, r: u32, d: usize) -> Result<f64> {
    if r == 0 {
        return Err(invalid("r", "must be at least 1"));
    }
    if r == 1 {
        return Ok(f64::INFINITY);
    }
    let h = r / 2;
    let rho = rho_values
        .get(&h)
        .ok_or_else(|| invalid("rho", format!("no rate value at {h}")))?;
    if *rho < 0.0 {
        return Err(invalid("rho", "rate values must be non-negative"));
    }
    Ok(3.0 * sphere_count(h, d) as f64 * rho.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ball;

    fn origin2() -> Region {
        ball(0, 2)
    }

    fn bc(v: &Region, vals: &[Symbol]) -> BoundaryCondition {
        BoundaryCondition::new(v.boundary(), vals.to_vec()).unwrap()
    }

    #[test]
    fn coloring_single_site_exclusion() {
        let spec = Spec::coloring(3, 2).unwrap();
        let v = origin2();
        let f = enumerate_feasible(&spec, &v, &bc(&v, &[0, 1, 0, 1])).unwrap();
        assert_eq!(f, vec![vec![2]]);
        let f = enumerate_feasible(&spec, &v, &bc(&v, &[0, 1, 2, 1])).unwrap();
        assert!(f.is_empty());
        assert!(matches!(
            conditional_dist(&spec, &v, &bc(&v, &[0, 1, 2, 1])),
            Err(Error::InfeasibleBoundary)
        ));
    }

    #[test]
    fn independent_sets_of_three_by_three() {
        let spec = Spec::hardcore(1.0, 2).unwrap();
        let v = ball(1, 2);
        let tau = BoundaryCondition::constant(v.boundary(), 0);
        let f = enumerate_feasible(&spec, &v, &tau).unwrap();
        // brute-force count over all 512 subsets
        let verts = v.vertices();
        let mut count = 0;
        for mask in 0u32..512 {
            let ok = (0..9).all(|i| {
                (0..9).all(|j| {
                    !(mask >> i & 1 == 1 && mask >> j & 1 == 1 && verts[i].l1(&verts[j]) == 1)
                })
            });
            count += ok as usize;
        }
        assert_eq!(f.len(), count);
        assert_eq!(count, 63);
    }

    #[test]
    fn single_site_laws() {
        let beta: f64 = 0.3;
        let spec = Spec::ising(beta, 2).unwrap();
        let v = origin2();
        let p = conditional_dist(&spec, &v, &bc(&v, &[0, 0, 0, 1])).unwrap();
        let want = (3.0 * beta).exp() / ((3.0 * beta).exp() + beta.exp());
        assert!((p.prob_of(&[0]) - want).abs() < 1e-14);
        let hc = Spec::hardcore(0.7, 2).unwrap();
        let p = conditional_dist(&hc, &v, &bc(&v, &[0, 0, 0, 0])).unwrap();
        assert!((p.prob_of(&[1]) - 0.7 / 1.7).abs() < 1e-14);
    }

    #[test]
    fn path_marginal_by_brute_force() {
        let spec = Spec::hardcore(1.0, 1).unwrap();
        let v = ball(1, 1);
        let p = conditional_dist(&spec, &v, &BoundaryCondition::constant(v.boundary(), 0)).unwrap();
        // independent sets of the 3-path, by brute force
        let sets: Vec<u32> = (0u32..8).filter(|m| m & (m >> 1) == 0).collect();
        assert_eq!(p.len(), sets.len());
        let with_mid = sets.iter().filter(|m| *m & 2 != 0).count();
        let m = marginal(&p, &ball(0, 1)).unwrap();
        assert!((m.prob_of(&[1]) - with_mid as f64 / sets.len() as f64).abs() < 1e-15);
        assert_eq!(marginal(&p, &v).unwrap(), p);
        assert!(marginal(&p, &ball(2, 1)).is_err());
    }

    #[test]
    fn tv_examples() {
        let k = 4;
        let laws: Vec<Pmf> = (0..k)
            .map(|i| {
                let m: Vec<f64> = (0..k).map(|j| if j == i { 0.0 } else { 1.0 / 3.0 }).collect();
                Pmf::single_site(&m).unwrap()
            })
            .collect();
        for a in 0..k {
            for b in 0..k {
                let d = tv_distance(&laws[a], &laws[b]).unwrap();
                let want = if a == b { 0.0 } else { 1.0 / 3.0 };
                assert!((d - want).abs() < 1e-15);
            }
        }
        let point = Pmf::single_site(&[1.0, 0.0, 0.0]).unwrap();
        let unif = Pmf::single_site(&[1.0 / 3.0; 3]).unwrap();
        assert!((tv_distance(&point, &unif).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_examples() {
        for d in [1usize, 2, 3] {
            let spec = Spec::hardcore(0.3, d).unwrap();
            let v = ball(0, d);
            let g = gamma(&spec, &v, &v).unwrap();
            assert!((g - 1.0 / 1.3).abs() < 1e-14);
        }
        let col = Spec::coloring(3, 2).unwrap();
        assert_eq!(gamma(&col, &origin2(), &origin2()).unwrap(), 0.0);
        let free = Spec::potts(3, 0.0, 2).unwrap();
        assert_eq!(gamma(&free, &ball(1, 2), &origin2()).unwrap(), 1.0);
    }

    #[test]
    fn condition_checks() {
        let hn = check_high_noise(&Spec::hardcore(0.2, 2).unwrap()).unwrap();
        assert!(hn.pass && (hn.value - 1.0 / 1.2).abs() < 1e-14);
        assert!(!check_high_noise(&Spec::hardcore(0.5, 2).unwrap()).unwrap().pass);
        let dob = check_dobrushin(&Spec::hardcore(0.3, 2).unwrap()).unwrap();
        assert!((dob.value - 4.0 * 0.3 / 1.3).abs() < 1e-12);
        let dp = check_disagreement_percolation(&Spec::hardcore(1.0, 2).unwrap(), 0.5927).unwrap();
        assert!((dp.value - 0.5).abs() < 1e-14 && dp.pass);
        let free = Spec::potts(2, 0.0, 2).unwrap();
        assert_eq!(check_dobrushin(&free).unwrap().value, 0.0);
        assert_eq!(check_disagreement_percolation(&free, 0.5).unwrap().value, 0.0);
    }

    #[test]
    fn rho_star_values() {
        let mut rho = BTreeMap::new();
        rho.insert(1, 0.01);
        rho.insert(2, 0.04);
        assert!(rho_star(&rho, 1, 2).unwrap().is_infinite());
        assert!((rho_star(&rho, 2, 2).unwrap() - 1.2).abs() < 1e-12);
        assert!((rho_star(&rho, 4, 2).unwrap() - 4.8).abs() < 1e-12);
        assert!(rho_star(&rho, 6, 2).is_err());
    }

    #[test]
    fn torus_gibbs_is_normalized() {
        let t = Torus::new(&[3, 3]).unwrap();
        let p = torus_gibbs(&Spec::ising(0.15, 2).unwrap(), &t).unwrap();
        assert_eq!(p.len(), 512);
        assert!((p.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn family_groups_are_contiguous() {
        let spec = Spec::hardcore(0.5, 2).unwrap();
        let v = ball(1, 2);
        let u = origin2();
        let fam = Family::build(&spec, &v, &u, None, &Limits::default()).unwrap();
        assert_eq!(fam.n_groups(), 2);
        for t in 0..fam.len() {
            let s: f64 = fam.probs(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
