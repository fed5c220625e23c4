//! Coupling diagnostics: coincidence probabilities, `kappa`, the uncoupled
//! fractions `lambda(tau, A)` and `lambda_psi(eta)`, and contraction sweeps.
//!
//! A [`Joint`] is the joint law of the outputs of all listed boundary
//! conditions, either enumerated exactly or sampled from a random field.

use serde::Serialize;

use super::{exact_joint, FieldDraw, GrandCoupling, EXACT_JOINT_THRESHOLD};
use crate::error::{invalid, Result};
use crate::lattice::{Region, Vertex};
use crate::model::{Symbol, SymbolSet};
use crate::par;
use crate::randomness::RandomField;

const CHUNK: usize = 512;
const NO_VALUE: Symbol = Symbol::MAX;

/// Point estimate with standard error; `se` is 0 for exact values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub exact: bool,
    pub draws: u64,
}

impl Estimate {
    /// Upper confidence bound `value + z se`, plus `1/draws` for sampled
    /// values so that an all-zero sample does not certify zero.
    pub fn upper(&self, z: f64) -> f64 {
        if self.exact {
            self.value
        } else {
            self.value + z * self.se + 1.0 / self.draws as f64
        }
    }
}

/// How the joint law is obtained.
pub enum JointLaw {
    Exact(Vec<(f64, Vec<Vec<Symbol>>)>),
    MonteCarlo { field: RandomField, draws: u64 },
}

/// Joint law of a coupling's outputs over a list of boundary conditions.
pub struct Joint<'a> {
    coupling: &'a dyn GrandCoupling,
    members: Vec<Vec<Symbol>>,
    indexed: bool,
    law: JointLaw,
}

fn outputs(c: &dyn GrandCoupling, members: &[Vec<Symbol>], indexed: bool, d: &dyn super::Draw) -> Result<Vec<Vec<Symbol>>> {
    if indexed {
        Ok((0..members.len()).map(|t| c.sample_member(t, d)).collect())
    } else {
        members.iter().map(|m| c.sample(m, d)).collect()
    }
}

impl<'a> Joint<'a> {
    fn tabulated(c: &'a dyn GrandCoupling) -> Result<(Vec<Vec<Symbol>>, bool)> {
        match c.members() {
            Some(m) => Ok((m.to_vec(), true)),
            None => Err(invalid("members", "coupling has no tabulated boundary conditions; pass them explicitly")),
        }
    }

    fn check_members(c: &dyn GrandCoupling, members: &[Vec<Symbol>]) -> Result<()> {
        if members.is_empty() {
            return Err(invalid("members", "at least one boundary condition is needed"));
        }
        if let Some(m) = members.iter().find(|m| !c.admits(m)) {
            return Err(invalid("members", format!("boundary condition {m:?} is not admitted")));
        }
        Ok(())
    }

    /// Exact joint law over the coupling's tabulated members.
    pub fn exact(c: &'a dyn GrandCoupling, max_atoms: usize) -> Result<Self> {
        let (members, indexed) = Self::tabulated(c)?;
        Self::exact_impl(c, members, indexed, max_atoms)
    }

    /// Exact joint law over an explicit list of boundary conditions.
    pub fn exact_for(c: &'a dyn GrandCoupling, members: Vec<Vec<Symbol>>, max_atoms: usize) -> Result<Self> {
        Self::exact_impl(c, members, false, max_atoms)
    }

    fn exact_impl(c: &'a dyn GrandCoupling, members: Vec<Vec<Symbol>>, indexed: bool, max_atoms: usize) -> Result<Self> {
        Self::check_members(c, &members)?;
        let atoms = exact_joint(|d| outputs(c, &members, indexed, d), max_atoms)?;
        Ok(Joint {
            coupling: c,
            members,
            indexed,
            law: JointLaw::Exact(atoms),
        })
    }

    /// Sampled joint law over the tabulated members: draw `i` reads the field
    /// at the origin and time `i`.
    pub fn monte_carlo(c: &'a dyn GrandCoupling, field: RandomField, draws: u64) -> Result<Self> {
        let (members, indexed) = Self::tabulated(c)?;
        Self::mc_impl(c, members, indexed, field, draws)
    }

    pub fn monte_carlo_for(
        c: &'a dyn GrandCoupling,
        members: Vec<Vec<Symbol>>,
        field: RandomField,
        draws: u64,
    ) -> Result<Self> {
        Self::mc_impl(c, members, false, field, draws)
    }

    fn mc_impl(
        c: &'a dyn GrandCoupling,
        members: Vec<Vec<Symbol>>,
        indexed: bool,
        field: RandomField,
        draws: u64,
    ) -> Result<Self> {
        Self::check_members(c, &members)?;
        if draws < 2 {
            return Err(invalid("draws", "at least 2 draws"));
        }
        Ok(Joint {
            coupling: c,
            members,
            indexed,
            law: JointLaw::MonteCarlo { field, draws },
        })
    }

    /// Exact when the joint is small enough, sampled otherwise.
    pub fn auto(c: &'a dyn GrandCoupling, field: RandomField, draws: u64) -> Result<Self> {
        match c.joint_size() {
            Some(n) if n <= EXACT_JOINT_THRESHOLD => Self::exact(c, EXACT_JOINT_THRESHOLD as usize),
            _ => Self::monte_carlo(c, field, draws),
        }
    }

    pub fn coupling(&self) -> &dyn GrandCoupling {
        self.coupling
    }

    pub fn members(&self) -> &[Vec<Symbol>] {
        &self.members
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.law, JointLaw::Exact(_))
    }

    pub fn law(&self) -> &JointLaw {
        &self.law
    }

    fn site_count(&self) -> usize {
        self.coupling.region().len()
    }

    /// Feed the atoms (probability, outputs per member) to `f` in a fixed
    /// order, chunk by chunk. Sampled chunks are generated in parallel.
    fn scan<F: FnMut(&[(f64, Vec<Vec<Symbol>>)])>(&self, mut f: F) {
        match &self.law {
            JointLaw::Exact(atoms) => f(atoms),
            JointLaw::MonteCarlo { field, draws } => {
                let n = *draws;
                let w = 1.0 / n as f64;
                let origin = Vertex::origin(self.coupling.region().dim());
                let mut start = 0u64;
                while start < n {
                    let len = (n - start).min(CHUNK as u64) as usize;
                    let chunk = par::map_range(len, |k| {
                        let d = FieldDraw::new(field, origin, start + k as u64);
                        let out = outputs(self.coupling, &self.members, self.indexed, &d)
                            .expect("members were validated");
                        (w, out)
                    });
                    f(&chunk);
                    start += len as u64;
                }
            }
        }
    }

    fn draws(&self) -> u64 {
        match &self.law {
            JointLaw::Exact(_) => 0,
            JointLaw::MonteCarlo { draws, .. } => *draws,
        }
    }

    fn finish(&self, m1: f64, m2: f64) -> Estimate {
        finish(self.is_exact(), self.draws(), m1, m2)
    }

    /// Expectation of a per-atom statistic.
    pub fn expect<F: FnMut(&[Vec<Symbol>]) -> f64>(&self, mut stat: F) -> Estimate {
        let (mut m1, mut m2) = (0.0, 0.0);
        self.scan(|chunk| {
            for (p, out) in chunk {
                let x = stat(out);
                m1 += p * x;
                m2 += p * x * x;
            }
        });
        self.finish(m1, m2)
    }

    fn positions(&self, u: &Region) -> Result<Vec<usize>> {
        let v = self.coupling.region();
        u.iter()
            .map(|x| v.index_of(x).ok_or_else(|| invalid("U", "must be a subset of V")))
            .collect()
    }

    /// Indices into the boundary region of the vertices of `a`.
    pub fn boundary_indices(&self, a: &Region) -> Result<Vec<usize>> {
        let b = self.coupling.boundary();
        a.iter()
            .map(|x| b.index_of(x).ok_or_else(|| invalid("A", "must be a subset of the boundary")))
            .collect()
    }

    pub fn member_index(&self, tau: &[Symbol]) -> Option<usize> {
        self.members.iter().position(|m| m.as_slice() == tau)
    }
}

fn finish(exact: bool, draws: u64, m1: f64, m2: f64) -> Estimate {
    if exact {
        return Estimate {
            value: m1,
            se: 0.0,
            exact: true,
            draws: 0,
        };
    }
    let n = draws as f64;
    let var = ((m2 - m1 * m1) * n / (n - 1.0)).max(0.0);
    Estimate {
        value: m1,
        se: (var / n).sqrt(),
        exact: false,
        draws,
    }
}

/// Probability that the members listed in `family` agree on all of `U`.
pub fn coincidence_probability(joint: &Joint, u: &Region, family: &[usize]) -> Result<Estimate> {
    if family.is_empty() {
        return Err(invalid("family", "must be non-empty"));
    }
    if let Some(t) = family.iter().find(|t| **t >= joint.members().len()) {
        return Err(invalid("family", format!("member {t} out of range")));
    }
    let pos = joint.positions(u)?;
    Ok(joint.expect(|out| {
        let first = &out[family[0]];
        let same = family[1..].iter().all(|&t| pos.iter().all(|&i| out[t][i] == first[i]));
        same as u8 as f64
    }))
}

/// Average fraction of sites on which all members agree.
pub fn kappa(joint: &Joint) -> Estimate {
    let nv = joint.site_count() as f64;
    joint.expect(|out| {
        let agree = (0..out[0].len())
            .filter(|&i| out[1..].iter().all(|o| o[i] == out[0][i]))
            .count();
        agree as f64 / nv
    })
}

/// Members agreeing with member `t` off the boundary positions `a`.
fn class_of(members: &[Vec<Symbol>], t: usize, a: &[usize]) -> Vec<usize> {
    let tau = &members[t];
    members
        .iter()
        .enumerate()
        .filter(|(_, m)| (0..tau.len()).all(|b| a.contains(&b) || m[b] == tau[b]))
        .map(|(i, _)| i)
        .collect()
}

/// Average fraction of sites where member `t` differs from some member that
/// agrees with it off `a` (boundary indices).
pub fn lambda_tau_a(joint: &Joint, t: usize, a: &[usize]) -> Result<Estimate> {
    if t >= joint.members().len() {
        return Err(invalid("tau", "not a member of the joint"));
    }
    let class = class_of(joint.members(), t, a);
    let nv = joint.site_count() as f64;
    Ok(joint.expect(|out| {
        let bad = (0..out[t].len())
            .filter(|&i| class.iter().any(|&s| out[s][i] != out[t][i]))
            .count();
        bad as f64 / nv
    }))
}

/// Uncertainty measure on sets of symbols: monotone and zero exactly on
/// singletons.
pub enum Psi {
    /// 1 on sets with more than one element.
    Indicator,
    /// `|A| - 1`.
    Excess,
    Custom(Box<dyn Fn(SymbolSet) -> f64 + Send + Sync>),
}

impl Psi {
    /// Custom measure, checked on every non-empty subset of `q` symbols.
    pub fn custom<F: Fn(SymbolSet) -> f64 + Send + Sync + 'static>(f: F, q: usize) -> Result<Psi> {
        if q == 0 || q > 16 {
            return Err(invalid("psi", "validation needs 1 <= q <= 16"));
        }
        for bits in 1u64..(1 << q) {
            let s = SymbolSet(bits);
            let v = f(s);
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid("psi", format!("value {v} on {bits:#b} is not a non-negative real")));
            }
            if (v == 0.0) != s.is_singleton() {
                return Err(invalid("psi", format!("must vanish exactly on singletons (set {bits:#b})")));
            }
            for x in s.iter() {
                let smaller = SymbolSet(bits & !(1 << x));
                if !smaller.is_empty() && f(smaller) > v {
                    return Err(invalid("psi", format!("not monotone at {bits:#b}")));
                }
            }
        }
        Ok(Psi::Custom(Box::new(f)))
    }

    pub fn eval(&self, s: SymbolSet) -> f64 {
        match self {
            Psi::Indicator => (s.len() > 1) as u8 as f64,
            Psi::Excess => s.len().saturating_sub(1) as f64,
            Psi::Custom(f) => f(s),
        }
    }
}

fn eta_class(members: &[Vec<Symbol>], eta: &[SymbolSet]) -> Result<Vec<usize>> {
    if members.first().is_some_and(|m| m.len() != eta.len()) {
        return Err(invalid("eta", "one symbol set per boundary vertex"));
    }
    let class: Vec<usize> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.iter().zip(eta).all(|(s, e)| e.contains(*s)))
        .map(|(i, _)| i)
        .collect();
    if class.is_empty() {
        return Err(invalid("eta", "no feasible boundary condition takes values in eta"));
    }
    Ok(class)
}

/// Expected average of `psi` over the per-site sets of values reached by
/// the boundary conditions with `tau_b` in `eta_b` for every `b`.
pub fn lambda_psi(joint: &Joint, psi: &Psi, eta: &[SymbolSet]) -> Result<Estimate> {
    let class = eta_class(joint.members(), eta)?;
    let nv = joint.site_count() as f64;
    Ok(joint.expect(|out| {
        let total: f64 = (0..out[class[0]].len())
            .map(|i| {
                let mut s = SymbolSet::EMPTY;
                for &t in &class {
                    s.insert(out[t][i]);
                }
                psi.eval(s)
            })
            .sum();
        total / nv
    }))
}

/// What a contraction sweep checks.
pub enum ContractionMode {
    /// `lambda(tau, A) < |A| / |∂V|` for every member and each listed `A`.
    TauA { sets: Vec<Vec<usize>> },
    /// `lambda_psi(eta) <= (1 - eps) / |∂V| sum_b psi(eta_b)` for each `eta`.
    Psi { psi: Psi, etas: Vec<Vec<SymbolSet>> },
}

/// One tested case; for `TauA` sweeps, the worst member for a set `A`.
#[derive(Clone, Debug, Serialize)]
pub struct DiagRecord {
    pub coupling_id: String,
    pub tau_hash: String,
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    pub lambda: f64,
    pub se: f64,
    pub bound: f64,
    pub slack: f64,
}

impl DiagRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub pass: bool,
    /// Minimum of `bound - upper(lambda)` over the tested cases.
    pub worst_slack: f64,
    /// Largest `eps` with `upper(lambda) <= (1 - eps) bound` in every case.
    pub epsilon: f64,
    pub statistical: bool,
    pub z: f64,
    pub tested: u64,
    pub records: Vec<DiagRecord>,
}

/// FNV-1a of a boundary condition, as hex.
pub fn tau_hash(tau: &[Symbol]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in tau {
        h ^= *s as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Accumulators of `lambda(tau, A)` over all members for one set `A`.
struct SetSweep {
    group_of: Vec<u32>,
    n_groups: usize,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl SetSweep {
    fn new(members: &[Vec<Symbol>], a: &[usize]) -> SetSweep {
        let mut ids = std::collections::HashMap::new();
        let group_of = members
            .iter()
            .map(|m| {
                let key: Vec<Symbol> = m
                    .iter()
                    .enumerate()
                    .map(|(b, s)| if a.contains(&b) { NO_VALUE } else { *s })
                    .collect();
                let next = ids.len() as u32;
                *ids.entry(key).or_insert(next)
            })
            .collect();
        SetSweep {
            group_of,
            n_groups: ids.len(),
            m1: vec![0.0; members.len()],
            m2: vec![0.0; members.len()],
        }
    }

    fn add(&mut self, p: f64, out: &[Vec<Symbol>], split_sites: &[usize], nv: f64) {
        let mut cnt = vec![0u16; out.len()];
        let mut val = vec![NO_VALUE; self.n_groups];
        let mut split = vec![false; self.n_groups];
        let mut any = false;
        for &i in split_sites {
            val.fill(NO_VALUE);
            split.fill(false);
            for (t, o) in out.iter().enumerate() {
                let g = self.group_of[t] as usize;
                if val[g] == NO_VALUE {
                    val[g] = o[i];
                } else if val[g] != o[i] {
                    split[g] = true;
                }
            }
            for (t, c) in cnt.iter_mut().enumerate() {
                if split[self.group_of[t] as usize] {
                    *c += 1;
                    any = true;
                }
            }
        }
        if any {
            for (t, c) in cnt.iter().enumerate() {
                let x = *c as f64 / nv;
                self.m1[t] += p * x;
                self.m2[t] += p * x * x;
            }
        }
    }
}

/// Check a contraction condition over the given cases. Sampled joints are
/// judged by the upper bound `estimate + z se + 1/draws`.
pub fn check_contraction(joint: &Joint, mode: &ContractionMode, z: f64) -> Result<ContractionReport> {
    let nb = joint.coupling().boundary().len() as f64;
    let id = joint.coupling().id();
    let members = joint.members();
    let mut records = Vec::new();
    let mut tested = 0u64;
    match mode {
        ContractionMode::TauA { sets } => {
            for a in sets {
                if a.is_empty() || a.iter().any(|b| (*b as f64) >= nb) {
                    return Err(invalid("A", "sets must be non-empty subsets of the boundary"));
                }
            }
            let mut sweeps: Vec<SetSweep> = par::map_range(sets.len(), |k| SetSweep::new(members, &sets[k]));
            let nv = joint.site_count() as f64;
            joint.scan(|chunk| {
                let split_sites: Vec<Vec<usize>> = chunk
                    .iter()
                    .map(|(_, out)| {
                        (0..out[0].len())
                            .filter(|&i| out[1..].iter().any(|o| o[i] != out[0][i]))
                            .collect()
                    })
                    .collect();
                par::for_each_mut(&mut sweeps, |_, sw| {
                    for ((p, out), sites) in chunk.iter().zip(&split_sites) {
                        if !sites.is_empty() {
                            sw.add(*p, out, sites, nv);
                        }
                    }
                });
            });
            for (a, sw) in sets.iter().zip(&sweeps) {
                let bound = a.len() as f64 / nb;
                let mut worst: Option<(usize, Estimate, f64)> = None;
                for t in 0..members.len() {
                    let est = joint.finish(sw.m1[t], sw.m2[t]);
                    let slack = bound - est.upper(z);
                    tested += 1;
                    if worst.as_ref().is_none_or(|w| slack < w.2) {
                        worst = Some((t, est, slack));
                    }
                }
                let (t, est, slack) = worst.expect("members are non-empty");
                records.push(DiagRecord {
                    coupling_id: id.clone(),
                    tau_hash: tau_hash(&members[t]),
                    a: a.clone(),
                    lambda: est.value,
                    se: est.se,
                    bound,
                    slack,
                });
            }
        }
        ContractionMode::Psi { psi, etas } => {
            for eta in etas {
                let est = lambda_psi(joint, psi, eta)?;
                let bound = eta.iter().map(|e| psi.eval(*e)).sum::<f64>() / nb;
                let class = eta_class(members, eta)?;
                tested += 1;
                let a: Vec<usize> = eta
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| !e.is_singleton())
                    .map(|(b, _)| b)
                    .collect();
                records.push(DiagRecord {
                    coupling_id: id.clone(),
                    tau_hash: tau_hash(&members[class[0]]),
                    a,
                    lambda: est.value,
                    se: est.se,
                    bound,
                    slack: bound - est.upper(z),
                });
            }
        }
    }
    let statistical = !joint.is_exact();
    let worst_slack = records.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    let pass = records
        .iter()
        .all(|r| r.slack > 0.0 || (r.bound == 0.0 && r.lambda == 0.0 && r.se == 0.0));
    let epsilon = records
        .iter()
        .filter(|r| r.bound > 0.0)
        .map(|r| r.slack / r.bound)
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    Ok(ContractionReport {
        pass,
        worst_slack,
        epsilon,
        statistical,
        z,
        tested,
        records,
    })
}

/// All non-empty subsets of `0..n` with at most `k` elements, by size and
/// then lexicographically.
pub fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 1..=k.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.clone());
            let mut i = size;
            while i > 0 && idx[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// `count` random subsets of `0..n` with sizes uniform in `min_size..=n`,
/// each sorted. Deterministic in `field`.
pub fn random_subsets(n: usize, count: usize, min_size: usize, field: &RandomField) -> Vec<Vec<usize>> {
    assert!(min_size >= 1 && min_size <= n);
    let origin = Vertex::origin(1);
    (0..count)
        .map(|k| {
            let k = k as u64;
            let span = (n - min_size + 1) as u64;
            let size = min_size + (field.bits(&origin, k, 0, 0) % span) as usize;
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..size {
                let j = i + (field.bits(&origin, k, 1, i as u32) % (n - i) as u64) as usize;
                pool.swap(i, j);
            }
            let mut s = pool[..size].to_vec();
            s.sort_unstable();
            s
        })
        .collect()
}
