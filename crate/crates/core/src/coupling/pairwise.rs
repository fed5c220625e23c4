//! Three-stage coupling of two conditional laws `P^tau_V`, `P^tau'_V` that
//! keeps the disagreement away from `U`.
//!
//! With `r = floor(dist(U, Σ) / 2)`, `B` is the layer of sites at distance
//! exactly `r` from `U` and `W` the sites closer than `r`. Stage one couples
//! the two marginals on `B` optimally. Stage two couples the laws on `W`
//! given the `B` values; when they agree the laws coincide and so do the
//! samples. Stage three fills in the rest with shared variates.

use std::collections::{HashMap, VecDeque};

use super::{optimal_pair, Addr, Draw};
use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::exactgibbs::Limits;
use crate::lattice::{Region, Vertex};
use crate::model::{BoundaryCondition, Spec, Symbol};

const STAGE_B: u32 = 0;
const STAGE_W: u32 = 1;
const STAGE_REST: u32 = 1 << 20;

#[derive(Clone, Copy, Debug)]
enum Nbr {
    Enum(u32),
    Ext(u32),
}

/// A connected set of sites whose outside neighbours all carry known
/// values. One parity class is enumerated; the other class is then a set of
/// independent sites.
#[derive(Clone, Debug)]
struct Piece {
    /// Positions in V (lexicographic) of the enumerated sites, then the free ones.
    enum_pos: Vec<usize>,
    free_pos: Vec<usize>,
    enum_ext: Vec<Vec<u32>>,
    free_nbrs: Vec<Vec<Nbr>>,
    q: usize,
    size: usize,
}

fn parity(v: &Vertex) -> i32 {
    v.coords().iter().sum::<i32>().rem_euclid(2)
}

impl Piece {
    fn new(
        sites: &[Vertex],
        v: &Region,
        ext: &HashMap<Vertex, usize>,
        q: usize,
        limits: &Limits,
    ) -> Result<Piece> {
        let even: Vec<Vertex> = sites.iter().filter(|x| parity(x) == 0).copied().collect();
        let odd: Vec<Vertex> = sites.iter().filter(|x| parity(x) == 1).copied().collect();
        let (en, fr) = if even.len() <= odd.len() { (even, odd) } else { (odd, even) };
        let size = (q as u128).checked_pow(en.len() as u32).unwrap_or(u128::MAX);
        if size > limits.interior as u128 {
            return Err(Error::Capacity {
                what: "parity-class enumeration".into(),
                needed: size,
                limit: limits.interior as u128,
            });
        }
        let local: HashMap<Vertex, u32> = en.iter().enumerate().map(|(i, x)| (*x, i as u32)).collect();
        let ext_of = |u: &Vertex| -> u32 {
            *ext.get(u).expect("piece neighbours lie in the piece or carry known values") as u32
        };
        let enum_ext = en
            .iter()
            .map(|x| x.neighbors().filter(|u| !sites.contains(u)).map(|u| ext_of(&u)).collect())
            .collect();
        let free_nbrs = fr
            .iter()
            .map(|x| {
                x.neighbors()
                    .map(|u| match local.get(&u) {
                        Some(&i) => Nbr::Enum(i),
                        None => Nbr::Ext(ext_of(&u)),
                    })
                    .collect()
            })
            .collect();
        let pos = |xs: &[Vertex]| xs.iter().map(|x| v.index_of(x).expect("site of V")).collect();
        Ok(Piece {
            enum_pos: pos(&en),
            free_pos: pos(&fr),
            enum_ext,
            free_nbrs,
            q,
            size: size as usize,
        })
    }

    fn decode(&self, mut idx: usize, out: &mut [Symbol]) {
        for s in out.iter_mut().rev() {
            *s = (idx % self.q) as Symbol;
            idx /= self.q;
        }
    }

    fn free_weights(&self, spec: &Spec, k: usize, cfg: &[Symbol], ext: &[Symbol]) -> Vec<f64> {
        (0..self.q as Symbol)
            .map(|s| {
                let mut w = spec.vertex_weight(s);
                for n in &self.free_nbrs[k] {
                    let t = match *n {
                        Nbr::Enum(i) => cfg[i as usize],
                        Nbr::Ext(j) => ext[j as usize],
                    };
                    w *= spec.edge_weight(s, t);
                }
                w
            })
            .collect()
    }

    /// Unnormalized weight of each configuration of the enumerated class,
    /// with the free class summed out.
    fn enum_weights(&self, spec: &Spec, ext: &[Symbol]) -> Vec<f64> {
        let mut cfg = vec![0 as Symbol; self.enum_pos.len()];
        (0..self.size)
            .map(|idx| {
                self.decode(idx, &mut cfg);
                let mut w = 1.0;
                for (i, s) in cfg.iter().enumerate() {
                    w *= spec.vertex_weight(*s);
                    for j in &self.enum_ext[i] {
                        w *= spec.edge_weight(*s, ext[*j as usize]);
                    }
                }
                if w == 0.0 {
                    return 0.0;
                }
                for k in 0..self.free_pos.len() {
                    w *= self.free_weights(spec, k, &cfg, ext).iter().sum::<f64>();
                    if w == 0.0 {
                        break;
                    }
                }
                w
            })
            .collect()
    }

    fn z(&self, spec: &Spec, ext: &[Symbol]) -> f64 {
        self.enum_weights(spec, ext).iter().sum()
    }

    /// Sample with variates at `stage`, writing into `out` (indexed by V).
    fn sample(&self, spec: &Spec, ext: &[Symbol], draw: &dyn Draw, stage: u32, out: &mut [Symbol]) {
        let w = self.enum_weights(spec, ext);
        let mut cfg = vec![0 as Symbol; self.enum_pos.len()];
        self.decode(draw.choose(Addr::new(stage, 0), &w), &mut cfg);
        for (p, s) in self.enum_pos.iter().zip(&cfg) {
            out[*p] = *s;
        }
        for k in 0..self.free_pos.len() {
            let fw = self.free_weights(spec, k, &cfg, ext);
            out[self.free_pos[k]] = draw.choose(Addr::new(stage, 1 + k as u32), &fw) as Symbol;
        }
    }

    /// Couple the two conditional laws class by class, each step with an
    /// optimal coupling of the two step laws.
    #[allow(clippy::too_many_arguments)]
    fn sample_pair(
        &self,
        spec: &Spec,
        ext_a: &[Symbol],
        ext_b: &[Symbol],
        draw: &dyn Draw,
        stage: u32,
        out_a: &mut [Symbol],
        out_b: &mut [Symbol],
    ) {
        let norm = |w: Vec<f64>| {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let (i, j) = optimal_pair(
            &norm(self.enum_weights(spec, ext_a)),
            &norm(self.enum_weights(spec, ext_b)),
            draw,
            stage,
        );
        let mut ca = vec![0 as Symbol; self.enum_pos.len()];
        let mut cb = ca.clone();
        self.decode(i, &mut ca);
        self.decode(j, &mut cb);
        for (k, p) in self.enum_pos.iter().enumerate() {
            out_a[*p] = ca[k];
            out_b[*p] = cb[k];
        }
        for k in 0..self.free_pos.len() {
            let (x, y) = optimal_pair(
                &norm(self.free_weights(spec, k, &ca, ext_a)),
                &norm(self.free_weights(spec, k, &cb, ext_b)),
                draw,
                stage + 1 + k as u32,
            );
            out_a[self.free_pos[k]] = x as Symbol;
            out_b[self.free_pos[k]] = y as Symbol;
        }
    }

    fn stages(&self) -> u32 {
        1 + self.free_pos.len() as u32
    }
}

/// Outputs of one draw of the pairwise coupling, with the coincidence
/// events of the three stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub omega: Vec<Symbol>,
    pub sigma: Vec<Symbol>,
    pub b_equal: bool,
    pub w_equal: bool,
    pub u_equal: bool,
}

/// Three-stage coupling of `P^tau_V` and `P^tau'_V`.
pub struct PairwiseRatioCoupling {
    spec: Spec,
    v: Region,
    u_pos: Vec<usize>,
    r_star: u32,
    b: Region,
    w: Region,
    b_pos: Vec<usize>,
    w_piece: Option<Piece>,
    rest: Vec<Piece>,
    /// Boundary values of the two members; the external value vector of a
    /// piece is the `B` configuration followed by these.
    tau: [Vec<Symbol>; 2],
    b_law: [Vec<f64>; 2],
    q: usize,
}

fn components(sites: &[Vertex]) -> Vec<Vec<Vertex>> {
    let set: std::collections::HashSet<Vertex> = sites.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in sites {
        if !seen.insert(*s) {
            continue;
        }
        let mut comp = vec![*s];
        let mut queue = VecDeque::from([*s]);
        while let Some(x) = queue.pop_front() {
            for y in x.neighbors() {
                if set.contains(&y) && seen.insert(y) {
                    comp.push(y);
                    queue.push_back(y);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

impl PairwiseRatioCoupling {
    pub fn new(
        spec: &Spec,
        v: &Region,
        u: &Region,
        tau: &BoundaryCondition,
        tau2: &BoundaryCondition,
        limits: &Limits,
    ) -> Result<Self> {
        if u.is_empty() || !u.is_subset_of(v) {
            return Err(invalid("U", "must be a non-empty subset of V"));
        }
        let bv = v.boundary();
        if *tau.region() != bv || *tau2.region() != bv {
            return Err(Error::RegionMismatch("boundary conditions must live on ∂V".into()));
        }
        let sigma = tau.disagreement(tau2)?;
        let r_star = if sigma.is_empty() {
            (crate::lattice::dist(u, &bv) / 2).max(1)
        } else {
            crate::lattice::dist(u, &sigma) / 2
        };
        if r_star < 1 {
            return Err(invalid("tau", "U is adjacent to the disagreement set; no separating layer exists"));
        }
        let dist: Vec<u32> = v.iter().map(|x| u.dist_to(x)).collect();
        let pick = |f: &dyn Fn(u32) -> bool| -> Vec<Vertex> {
            v.iter().zip(&dist).filter(|(_, d)| f(**d)).map(|(x, _)| *x).collect()
        };
        let b = Region::new(v.dim(), pick(&|d| d == r_star));
        let w = Region::new(v.dim(), pick(&|d| d < r_star));
        let rest = pick(&|d| d > r_star);
        let q = spec.q();
        let bsize = (q as u128).checked_pow(b.len() as u32).unwrap_or(u128::MAX);
        if bsize > limits.interior as u128 {
            return Err(Error::Capacity {
                what: "layer enumeration".into(),
                needed: bsize,
                limit: limits.interior as u128,
            });
        }
        let mut ext: HashMap<Vertex, usize> = b.iter().enumerate().map(|(i, x)| (*x, i)).collect();
        for (i, x) in bv.iter().enumerate() {
            ext.insert(*x, b.len() + i);
        }
        let w_piece = if w.is_empty() {
            None
        } else {
            Some(Piece::new(w.vertices(), v, &ext, q, limits)?)
        };
        let rest = components(&rest)
            .iter()
            .map(|c| Piece::new(c, v, &ext, q, limits))
            .collect::<Result<Vec<_>>>()?;
        let mut me = PairwiseRatioCoupling {
            spec: spec.clone(),
            v: v.clone(),
            u_pos: u.iter().map(|x| v.index_of(x).unwrap()).collect(),
            r_star,
            b_pos: b.iter().map(|x| v.index_of(x).unwrap()).collect(),
            b,
            w,
            w_piece,
            rest,
            tau: [tau.values().to_vec(), tau2.values().to_vec()],
            b_law: [Vec::new(), Vec::new()],
            q,
        };
        me.b_law = [me.layer_law(0)?, me.layer_law(1)?];
        Ok(me)
    }

    fn ext(&self, k: usize, cfg_b: &[Symbol]) -> Vec<Symbol> {
        let mut e = cfg_b.to_vec();
        e.extend_from_slice(&self.tau[k]);
        e
    }

    fn decode_b(&self, mut idx: usize) -> Vec<Symbol> {
        let mut cfg = vec![0 as Symbol; self.b.len()];
        for s in cfg.iter_mut().rev() {
            *s = (idx % self.q) as Symbol;
            idx /= self.q;
        }
        cfg
    }

    fn n_layer(&self) -> usize {
        self.q.pow(self.b.len() as u32)
    }

    /// Law of the configuration on `B` under member `k`, indexed by base-q code.
    fn layer_law(&self, k: usize) -> Result<Vec<f64>> {
        let dom = Domain::ordered(self.b.vertices().to_vec(), &self.v.boundary());
        let mut w: Vec<f64> = (0..self.n_layer())
            .map(|idx| {
                let cfg = self.decode_b(idx);
                let mut x = dom.weight(&self.spec, &cfg, &self.tau[k]);
                if x == 0.0 {
                    return 0.0;
                }
                let e = self.ext(k, &cfg);
                for p in self.w_piece.iter().chain(&self.rest) {
                    x *= p.z(&self.spec, &e);
                    if x == 0.0 {
                        break;
                    }
                }
                x
            })
            .collect();
        let z: f64 = w.iter().sum();
        if z <= 0.0 {
            return Err(Error::InfeasibleBoundary);
        }
        w.iter_mut().for_each(|x| *x /= z);
        Ok(w)
    }

    pub fn r_star(&self) -> u32 {
        self.r_star
    }

    pub fn layer(&self) -> &Region {
        &self.b
    }

    pub fn inner(&self) -> &Region {
        &self.w
    }

    pub fn region(&self) -> &Region {
        &self.v
    }

    /// Exact law on `U` of member `k` (0 for tau, 1 for tau'), over
    /// configurations indexed by base-q code in the order of `U`.
    pub fn u_marginal(&self, k: usize) -> Result<Vec<f64>> {
        let nu = self.u_pos.len();
        let size = (self.q as u128).checked_pow(nu as u32).unwrap_or(u128::MAX);
        if size > (1 << 20) {
            return Err(Error::Capacity {
                what: "U-marginal table".into(),
                needed: size,
                limit: 1 << 20,
            });
        }
        let mut out = vec![0.0; size as usize];
        let n = self.v.len();
        for (idx, pb) in self.b_law[k].iter().enumerate() {
            if *pb == 0.0 {
                continue;
            }
            let cfg_b = self.decode_b(idx);
            let e = self.ext(k, &cfg_b);
            // The law of the full configuration factorizes over the pieces;
            // only pieces meeting U matter.
            let mut partial: Vec<(Vec<Symbol>, f64)> = vec![(vec![Symbol::MAX; n], *pb)];
            for (pos, s) in self.b_pos.iter().zip(&cfg_b) {
                partial[0].0[*pos] = *s;
            }
            for p in self.w_piece.iter().chain(&self.rest) {
                if !self.u_pos.iter().any(|x| p.enum_pos.contains(x) || p.free_pos.contains(x)) {
                    continue;
                }
                let law = piece_law(p, &self.spec, &e, &self.u_pos);
                let mut next = Vec::with_capacity(partial.len() * law.len());
                for (cfg, w) in &partial {
                    for (assign, pw) in &law {
                        let mut c = cfg.clone();
                        for (pos, s) in assign {
                            c[*pos] = *s;
                        }
                        next.push((c, w * pw));
                    }
                }
                partial = next;
            }
            for (cfg, w) in partial {
                let mut code = 0usize;
                for pos in &self.u_pos {
                    code = code * self.q + cfg[*pos] as usize;
                }
                out[code] += w;
            }
        }
        Ok(out)
    }

    /// Exact total variation between the two laws on `U`.
    pub fn u_tv(&self) -> Result<f64> {
        let a = self.u_marginal(0)?;
        let b = self.u_marginal(1)?;
        Ok(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>())
    }

    /// Stages one and two: values on `B` and `W`, with the outside of
    /// `B ∪ W` left at 0.
    fn sample_inner(&self, draw: &dyn Draw) -> (Vec<Symbol>, Vec<Symbol>, [Vec<Symbol>; 2], bool, bool) {
        let n = self.v.len();
        let mut omega = vec![0 as Symbol; n];
        let mut sigma = vec![0 as Symbol; n];
        let (ib, jb) = optimal_pair(&self.b_law[0], &self.b_law[1], draw, STAGE_B);
        let (cb0, cb1) = (self.decode_b(ib), self.decode_b(jb));
        for (k, pos) in self.b_pos.iter().enumerate() {
            omega[*pos] = cb0[k];
            sigma[*pos] = cb1[k];
        }
        let b_equal = ib == jb;
        let e0 = self.ext(0, &cb0);
        let e1 = self.ext(1, &cb1);
        let mut w_equal = true;
        if let Some(p) = &self.w_piece {
            if b_equal {
                // Same layer values: both laws on W are one and the same.
                p.sample(&self.spec, &e0, draw, STAGE_W, &mut omega);
                for pos in p.enum_pos.iter().chain(&p.free_pos) {
                    sigma[*pos] = omega[*pos];
                }
            } else {
                p.sample_pair(&self.spec, &e0, &e1, draw, STAGE_W, &mut omega, &mut sigma);
            }
            w_equal = p.enum_pos.iter().chain(&p.free_pos).all(|x| omega[*x] == sigma[*x]);
        }
        assert!(!b_equal || w_equal, "coincidence on B must force coincidence on W");
        (omega, sigma, [e0, e1], b_equal, w_equal)
    }

    pub fn sample(&self, draw: &dyn Draw) -> PairSample {
        let (mut omega, mut sigma, [e0, e1], b_equal, w_equal) = self.sample_inner(draw);
        let mut stage = STAGE_REST;
        for p in &self.rest {
            p.sample(&self.spec, &e0, draw, stage, &mut omega);
            p.sample(&self.spec, &e1, draw, stage, &mut sigma);
            stage += p.stages();
        }
        let u_equal = self.u_pos.iter().all(|x| omega[*x] == sigma[*x]);
        assert!(!w_equal || u_equal, "coincidence on W must force coincidence on U");
        PairSample {
            omega,
            sigma,
            b_equal,
            w_equal,
            u_equal,
        }
    }

    /// Coincidence events `(B, W, U)` of one draw. `U` lies inside `W`, so
    /// the third stage is not needed and is skipped; the events agree with
    /// those of [`Self::sample`] on the same draw.
    pub fn sample_events(&self, draw: &dyn Draw) -> (bool, bool, bool) {
        let (omega, sigma, _, b_equal, w_equal) = self.sample_inner(draw);
        let u_equal = self.u_pos.iter().all(|x| omega[*x] == sigma[*x]);
        (b_equal, w_equal, u_equal)
    }
}

/// Law of a piece restricted to the sites of `u` it contains, as a list of
/// (assignments, probability).
fn piece_law(p: &Piece, spec: &Spec, ext: &[Symbol], u: &[usize]) -> Vec<(Vec<(usize, Symbol)>, f64)> {
    let w = p.enum_weights(spec, ext);
    let z: f64 = w.iter().sum();
    let free_in_u: Vec<usize> = (0..p.free_pos.len()).filter(|k| u.contains(&p.free_pos[*k])).collect();
    let enum_in_u: Vec<usize> = (0..p.enum_pos.len()).filter(|k| u.contains(&p.enum_pos[*k])).collect();
    let mut acc: HashMap<Vec<(usize, Symbol)>, f64> = HashMap::new();
    let mut cfg = vec![0 as Symbol; p.enum_pos.len()];
    for (idx, we) in w.iter().enumerate() {
        if *we == 0.0 {
            continue;
        }
        p.decode(idx, &mut cfg);
        let base: Vec<(usize, Symbol)> = enum_in_u.iter().map(|k| (p.enum_pos[*k], cfg[*k])).collect();
        // Free sites in U are independent given the enumerated class.
        let mut branches = vec![(base, we / z)];
        for &k in &free_in_u {
            let fw = p.free_weights(spec, k, &cfg, ext);
            let fz: f64 = fw.iter().sum();
            let mut next = Vec::new();
            for (a, pa) in &branches {
                for (s, x) in fw.iter().enumerate() {
                    if *x > 0.0 {
                        let mut a2 = a.clone();
                        a2.push((p.free_pos[k], s as Symbol));
                        next.push((a2, pa * x / fz));
                    }
                }
            }
            branches = next;
        }
        for (a, pa) in branches {
            *acc.entry(a).or_insert(0.0) += pa;
        }
    }
    let mut out: Vec<_> = acc.into_iter().collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
