use std::collections::HashMap;

use super::{Addr, Draw, GrandCoupling, EXACT_JOINT_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::exactgibbs::{Family, Limits};
use crate::lattice::Region;
use crate::model::{Spec, Symbol};

const COMMON: Addr = Addr::new(0, 0);
const RESID: u32 = 1;
const EXT: u32 = 2;

/// Coupling that is optimal on the marginal on `U`: with probability
/// `gamma(V,U)` all boundary conditions share one `U`-configuration drawn
/// from the normalized pointwise minimum; otherwise each draws from its own
/// residual. Both the residual and the extension to `V \ U` go site by site
/// with one shared uniform per site.
pub struct OptimalCoupling {
    id: String,
    fam: Family,
    boundary: Region,
    q: usize,
    index: HashMap<Vec<Symbol>, usize>,
    gamma: f64,
    common_cdf: Vec<f64>,
    min_measure: Vec<f64>,
    cand_prefix: Vec<Vec<f64>>,
    resid_prefix: Vec<Vec<f64>>,
    max_support: usize,
}

fn prefix(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for x in xs {
        acc += x;
        out.push(acc);
    }
    out
}

impl OptimalCoupling {
    /// Optimal-on-`U` coupling of `(P^tau_V)` over all feasible `tau`.
    pub fn new(spec: &Spec, v: &Region, u: &Region, limits: &Limits) -> Result<Self> {
        let fam = Family::build(spec, v, u, None, limits)?;
        let id = format!("optimal[{}|V={}|U={}]", spec.name(), v.len(), u.len());
        Ok(Self::from_family(fam, v.boundary(), spec.q(), id))
    }

    /// Coupling of explicit laws on one site; member `i` is law `i`.
    pub fn from_pmfs(pmfs: &[Vec<f64>]) -> Result<Self> {
        let fam = Family::from_pmfs(pmfs)?;
        let q = pmfs[0].len();
        if q > 256 {
            return Err(invalid("family", "at most 256 symbols"));
        }
        let boundary = Region::singleton(crate::lattice::Vertex::origin(1));
        Ok(Self::from_family(fam, boundary, q, format!("optimal[pmfs x{}]", pmfs.len())))
    }

    fn from_family(fam: Family, boundary: Region, q: usize, id: String) -> Self {
        let m = fam.min_measure();
        let gamma: f64 = m.iter().sum::<f64>().min(1.0);
        let mut common_w = m.clone();
        let rest = 1.0 - gamma;
        common_w.push(if rest > 1e-15 { rest } else { 0.0 });
        let mut cand_prefix = Vec::with_capacity(fam.len());
        let mut resid_prefix = Vec::with_capacity(fam.len());
        let mut max_support = 0;
        for t in 0..fam.len() {
            cand_prefix.push(prefix(fam.probs(t).iter().copied()));
            let gp = fam.group_probs(t);
            resid_prefix.push(prefix(gp.iter().zip(&m).map(|(p, mm)| (p - mm).max(0.0))));
            max_support = max_support.max(fam.probs(t).iter().filter(|p| **p > 0.0).count());
        }
        let common_cdf = super::cdf(&common_w);
        let index = fam
            .taus()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        OptimalCoupling {
            id,
            fam,
            boundary,
            q,
            index,
            gamma,
            common_cdf,
            min_measure: m,
            cand_prefix,
            resid_prefix,
            max_support,
        }
    }

    pub fn family(&self) -> &Family {
        &self.fam
    }

    /// `gamma(V,U)`, the probability of the common branch.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn min_measure(&self) -> &[f64] {
        &self.min_measure
    }

    pub fn member_index(&self, tau: &[Symbol]) -> Option<usize> {
        self.index.get(tau).copied()
    }

    /// Split `lo..hi` (sorted with a fixed prefix) by the symbol at `pos`.
    fn split_by<F: Fn(usize) -> Symbol>(&self, lo: usize, hi: usize, sym: F) -> Vec<(usize, usize)> {
        let mut out = vec![(lo, lo); self.q];
        let mut start = lo;
        while start < hi {
            let s = sym(start);
            let (mut a, mut b) = (start + 1, hi);
            while a < b {
                let mid = (a + b) / 2;
                if sym(mid) <= s {
                    a = mid + 1;
                } else {
                    b = mid;
                }
            }
            out[s as usize] = (start, a);
            start = a;
        }
        out
    }

    fn residual_group(&self, t: usize, draw: &dyn Draw) -> usize {
        let fam = &self.fam;
        let rp = &self.resid_prefix[t];
        let cp = &self.cand_prefix[t];
        let first = |g: usize| fam.group_range(g).start;
        let group_mass = |a: usize, b: usize| cp[first_or_end(fam, b)] - cp[first(a)];
        let (mut lo, mut hi) = (0, fam.n_groups());
        for j in 0..fam.u_len() {
            let parts = self.split_by(lo, hi, |g| fam.candidate(first(g))[j]);
            let mut w: Vec<f64> = parts.iter().map(|&(a, b)| (rp[b] - rp[a]).max(0.0)).collect();
            if w.iter().all(|x| *x <= 0.0) {
                w = parts
                    .iter()
                    .map(|&(a, b)| if a < b { group_mass(a, b).max(0.0) } else { 0.0 })
                    .collect();
            }
            let s = draw.choose(Addr::new(RESID, j as u32), &w);
            lo = parts[s].0;
            hi = parts[s].1;
        }
        lo
    }

    /// Sample for member `t` in key order (U first).
    fn sample_key(&self, t: usize, draw: &dyn Draw) -> &[Symbol] {
        let fam = &self.fam;
        let g_count = fam.n_groups();
        let c = draw.choose_cdf(COMMON, &self.common_cdf);
        let g = if c < g_count { c } else { self.residual_group(t, draw) };
        let cp = &self.cand_prefix[t];
        let range = fam.group_range(g);
        let (mut lo, mut hi) = (range.start, range.end);
        for j in fam.u_len()..fam.width() {
            if hi - lo == 1 {
                break;
            }
            let parts = self.split_by(lo, hi, |k| fam.candidate(k)[j]);
            let w: Vec<f64> = parts.iter().map(|&(a, b)| (cp[b] - cp[a]).max(0.0)).collect();
            let s = draw.choose(Addr::new(EXT, j as u32), &w);
            lo = parts[s].0;
            hi = parts[s].1;
        }
        fam.candidate(lo)
    }
}

fn first_or_end(fam: &Family, g: usize) -> usize {
    if g < fam.n_groups() {
        fam.group_range(g).start
    } else {
        fam.n_candidates()
    }
}

impl GrandCoupling for OptimalCoupling {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn region(&self) -> &Region {
        self.fam.region()
    }

    fn boundary(&self) -> &Region {
        &self.boundary
    }

    fn members(&self) -> Option<&[Vec<Symbol>]> {
        Some(self.fam.taus())
    }

    fn admits(&self, tau: &[Symbol]) -> bool {
        self.index.contains_key(tau)
    }

    fn sample(&self, tau: &[Symbol], draw: &dyn Draw) -> Result<Vec<Symbol>> {
        let t = self.member_index(tau).ok_or(Error::InfeasibleBoundary)?;
        Ok(self.sample_member(t, draw))
    }

    fn sample_member(&self, t: usize, draw: &dyn Draw) -> Vec<Symbol> {
        self.fam.to_lex(self.sample_key(t, draw))
    }

    fn common_values(&self, draw: &dyn Draw) -> Option<Vec<Option<Symbol>>> {
        let g = draw.choose_cdf(COMMON, &self.common_cdf);
        if g >= self.fam.n_groups() {
            return None;
        }
        let key = self.fam.candidate(self.fam.group_range(g).start);
        let u_len = self.fam.u_len();
        Some(self.fam.lex_to_key().iter().map(|&k| (k < u_len).then(|| key[k])).collect())
    }

    fn tau_independent(&self) -> bool {
        self.gamma >= 1.0 && self.fam.u_len() == self.fam.width()
    }

    fn joint_size(&self) -> Option<u128> {
        Some(self.fam.len() as u128 * self.max_support as u128)
    }
}

impl OptimalCoupling {
    pub fn exact_joint_allowed(&self) -> bool {
        self.joint_size().is_some_and(|n| n <= EXACT_JOINT_THRESHOLD)
    }
}

/// Sites drawn independently from the single-site law. Valid only for
/// specifications whose conditional laws ignore the boundary.
pub struct ProductCoupling {
    id: String,
    region: Region,
    boundary: Region,
    weights: Vec<f64>,
}

impl ProductCoupling {
    pub fn new(spec: &Spec, v: &Region) -> Result<Self> {
        if !spec.is_boundary_independent() {
            return Err(invalid(
                "coupling",
                "the product coupling needs a boundary-independent specification",
            ));
        }
        Ok(ProductCoupling {
            id: format!("product[{}|V={}]", spec.name(), v.len()),
            region: v.clone(),
            boundary: v.boundary(),
            weights: spec.vertex_weights().to_vec(),
        })
    }

    /// Sample site `i` of a product region at stage `stage`.
    pub(crate) fn site(weights: &[f64], stage: u32, i: usize, draw: &dyn Draw) -> Symbol {
        draw.choose(Addr::new(stage, i as u32), weights) as Symbol
    }
}

impl GrandCoupling for ProductCoupling {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn region(&self) -> &Region {
        &self.region
    }

    fn boundary(&self) -> &Region {
        &self.boundary
    }

    fn members(&self) -> Option<&[Vec<Symbol>]> {
        None
    }

    fn admits(&self, tau: &[Symbol]) -> bool {
        tau.len() == self.boundary.len() && tau.iter().all(|s| (*s as usize) < self.weights.len())
    }

    fn sample(&self, tau: &[Symbol], draw: &dyn Draw) -> Result<Vec<Symbol>> {
        if !self.admits(tau) {
            return Err(Error::RegionMismatch("boundary condition shape".into()));
        }
        Ok((0..self.region.len())
            .map(|i| Self::site(&self.weights, EXT, i, draw))
            .collect())
    }

    fn tau_independent(&self) -> bool {
        true
    }
}

/// Optimal coupling of two laws over indices `0..n`, with one shared
/// uniform for the common branch and one for both residuals.
pub fn optimal_pair(p: &[f64], q: &[f64], draw: &dyn Draw, stage: u32) -> (usize, usize) {
    assert_eq!(p.len(), q.len());
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.min(*b)).collect();
    let g: f64 = m.iter().sum();
    let mut w = m.clone();
    w.push(if 1.0 - g > 1e-15 { 1.0 - g } else { 0.0 });
    if w.iter().all(|x| *x <= 0.0) {
        w[0] = 1.0;
    }
    let c = draw.choose(Addr::new(stage, 0), &w);
    if c < m.len() {
        return (c, c);
    }
    let resid = |x: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = x.iter().zip(&m).map(|(a, b)| (a - b).max(0.0)).collect();
        if r.iter().all(|v| *v <= 0.0) {
            x.to_vec()
        } else {
            r
        }
    };
    let i = draw.choose(Addr::new(stage, 1), &resid(p));
    let j = draw.choose(Addr::new(stage, 1), &resid(q));
    (i, j)
}
