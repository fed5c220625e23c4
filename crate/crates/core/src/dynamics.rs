//! Coupled heat-bath block dynamics and coupling from the past.
//!
//! At step `n` every vertex is active independently with probability `p_n`;
//! an active vertex with no other active vertex within distance `r_n` is
//! chosen, and the block `u + Δ_n` of each chosen `u` is replaced by the
//! sample of the grand coupling `π_n` drawn from the field at `(u, n)` and
//! evaluated at the block's current boundary values.
//!
//! Coalescence is detected on per-site sets of possible values. Evaluation
//! is demand driven: only the sites that the target depends on through the
//! chosen blocks are ever touched.

use rustc_hash::{FxHashMap, FxHashSet};
use std::sync::Arc;

use serde::Serialize;

use crate::coupling::{Draw, FieldDraw, GrandCoupling};
use crate::error::{invalid, Error, Result};
use crate::lattice::{l1_ball, ball, Region, Substrate, Torus, Vertex};
use crate::model::{Spec, Symbol, SymbolSet};
use crate::randomness::{RandomField, STAGE_ACTIVE};

/// Neighbourhood in which another active vertex blocks a choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Exclusion {
    /// `|u - v|_1 <= r_n`.
    L1Ball,
    /// `|u - v|_inf <= r_n`, the box `v + Λ_{r_n}`.
    Box,
}

impl Exclusion {
    pub fn offsets(&self, r: u32, dim: usize) -> Region {
        match self {
            Exclusion::L1Ball => l1_ball(r, dim),
            Exclusion::Box => ball(r, dim),
        }
    }
}

/// Parameters of one step: activation probability, block and coupling.
#[derive(Clone)]
pub struct Stage {
    p: f64,
    block: Region,
    r: u32,
    coupling: Arc<dyn GrandCoupling>,
    /// Offsets of the exclusion neighbourhood, without the origin.
    exclusion: Vec<Vertex>,
}

impl Stage {
    pub fn new(p: f64, coupling: Arc<dyn GrandCoupling>, exclusion: Exclusion) -> Result<Stage> {
        if !(p > 0.0 && p < 1.0) {
            return Err(invalid("p", format!("must lie in (0,1), got {p}")));
        }
        let block = coupling.region().clone();
        let origin = Vertex::origin(block.dim());
        if !block.contains(&origin) {
            return Err(invalid("block", "must contain the origin"));
        }
        if *coupling.boundary() != block.boundary() {
            return Err(invalid("coupling", "boundary must be the outer boundary of the block"));
        }
        let r = block.diameter() + 1;
        let exclusion = exclusion
            .offsets(r, block.dim())
            .iter()
            .filter(|w| **w != origin)
            .copied()
            .collect();
        Ok(Stage {
            p,
            block,
            r,
            coupling,
            exclusion,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn block(&self) -> &Region {
        &self.block
    }

    /// `r_n = diam(Δ_n) + 1`.
    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn coupling(&self) -> &dyn GrandCoupling {
        self.coupling.as_ref()
    }
}

/// Sequence of stages. A fixed schedule repeats its last stage forever; a
/// finite one ends after its listed stages.
#[derive(Clone)]
pub struct Schedule {
    stages: Vec<Stage>,
    repeat_last: bool,
    exclusion: Exclusion,
}

impl Schedule {
    pub fn new(stages: Vec<Stage>, repeat_last: bool, exclusion: Exclusion) -> Result<Schedule> {
        if stages.is_empty() {
            return Err(invalid("schedule", "needs at least one stage"));
        }
        let d = stages[0].block.dim();
        if stages.iter().any(|s| s.block.dim() != d) {
            return Err(invalid("schedule", "all blocks must share one dimension"));
        }
        Ok(Schedule {
            stages,
            repeat_last,
            exclusion,
        })
    }

    /// One stage repeated forever.
    pub fn fixed(p: f64, coupling: Arc<dyn GrandCoupling>, exclusion: Exclusion) -> Result<Schedule> {
        Schedule::new(vec![Stage::new(p, coupling, exclusion)?], true, exclusion)
    }

    pub fn dim(&self) -> usize {
        self.stages[0].block.dim()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn exclusion(&self) -> Exclusion {
        self.exclusion
    }

    /// Stage used at step `n >= 1`.
    pub fn stage(&self, n: u32) -> Option<&Stage> {
        assert!(n >= 1, "steps are numbered from 1");
        let i = (n - 1) as usize;
        if i < self.stages.len() {
            Some(&self.stages[i])
        } else if self.repeat_last {
            self.stages.last()
        } else {
            None
        }
    }

    /// Last step the schedule defines, if it is finite.
    pub fn len_limit(&self) -> Option<u32> {
        (!self.repeat_last).then_some(self.stages.len() as u32)
    }

    /// `2 (r_1 + ... + r_t)`.
    pub fn radius_bound(&self, t: u32) -> u64 {
        (1..=t).map(|n| 2 * self.stage(n).map_or(0, |s| s.r as u64)).sum()
    }
}

/// `A_{v,n}`.
pub fn active(field: &RandomField, schedule: &Schedule, v: &Vertex, n: u32) -> bool {
    let st = schedule.stage(n).expect("step within the schedule");
    field.bernoulli(v, n as u64, STAGE_ACTIVE, 0, st.p)
}

/// Whether `v` is chosen at step `n` on Z^d.
pub fn chosen(field: &RandomField, schedule: &Schedule, v: &Vertex, n: u32) -> bool {
    chosen_on(&Substrate::Lattice { dim: v.dim() }, field, schedule, v, n)
}

/// Whether `v` (canonical on the substrate) is chosen at step `n`.
pub fn chosen_on(sub: &Substrate, field: &RandomField, schedule: &Schedule, v: &Vertex, n: u32) -> bool {
    if !active(field, schedule, v, n) {
        return false;
    }
    let st = schedule.stage(n).expect("step within the schedule");
    st.exclusion.iter().all(|w| {
        let u = sub.canonical(&v.add(w));
        u == *v || !field.bernoulli(&u, n as u64, STAGE_ACTIVE, 0, st.p)
    })
}

/// `U_{v,n}`: the chosen vertex whose block covers `v`, if any.
pub fn update_set(field: &RandomField, schedule: &Schedule, v: &Vertex, n: u32) -> Option<Vertex> {
    update_set_on(&Substrate::Lattice { dim: v.dim() }, field, schedule, v, n)
}

pub fn update_set_on(sub: &Substrate, field: &RandomField, schedule: &Schedule, v: &Vertex, n: u32) -> Option<Vertex> {
    let st = schedule.stage(n).expect("step within the schedule");
    let mut found = None;
    for w in st.block.iter() {
        let u = sub.canonical(&v.sub(w));
        if chosen_on(sub, field, schedule, &u, n) {
            assert!(
                found.is_none() || found == Some(u),
                "two chosen blocks cover {v:?} at step {n}"
            );
            found = Some(u);
        }
    }
    found
}

/// A configuration on a finite window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    pub region: Region,
    pub values: Vec<Symbol>,
}

/// Sets of possible values on a finite window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetConfig {
    pub region: Region,
    pub sets: Vec<SymbolSet>,
}

impl SetConfig {
    pub fn full(region: Region, spec: &Spec) -> SetConfig {
        let f = spec.feasible_symbols();
        SetConfig {
            sets: vec![f; region.len()],
            region,
        }
    }

    pub fn from_config(c: &Config) -> SetConfig {
        SetConfig {
            region: c.region.clone(),
            sets: c.values.iter().map(|s| SymbolSet::singleton(*s)).collect(),
        }
    }

    pub fn get(&self, v: &Vertex) -> Option<SymbolSet> {
        self.region.index_of(v).map(|i| self.sets[i])
    }

    pub fn all_singletons(&self) -> bool {
        self.sets.iter().all(|s| s.is_singleton())
    }
}

/// Work done while evaluating compositions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Work {
    pub blocks: u64,
    pub taus: u64,
    pub widened_steps: u64,
    pub evaluations: u64,
}

impl Work {
    fn absorb(&mut self, o: &Work) {
        self.blocks += o.blocks;
        self.taus += o.taus;
        self.widened_steps += o.widened_steps;
        self.evaluations += o.evaluations;
    }
}

/// Result of coupling from the past at one vertex.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CftpResult {
    pub vertex: Vec<i32>,
    pub value: Symbol,
    #[serde(rename = "T_v")]
    pub t: u32,
    pub radius_bound: u64,
    pub work: Work,
}

/// Result of coupling from the past for every site of a torus.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusSample {
    /// Values in the lexicographic order of the torus vertices.
    pub values: Vec<Symbol>,
    /// First horizon of the doubling sequence at which every site is
    /// determined; an upper bound on the coalescence time.
    pub horizon: u32,
    pub work: Work,
}

/// First time the forward set-valued chain is a singleton at `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ForwardSample {
    pub t: u32,
    pub censored: bool,
}

/// Everything a composition evaluation needs.
pub struct Dynamics<'a> {
    spec: &'a Spec,
    schedule: &'a Schedule,
    field: &'a RandomField,
    sub: Substrate,
    exhaustion_limit: usize,
    site_budget: usize,
    feasible: SymbolSet,
}

type Level = FxHashMap<Vertex, Option<Vertex>>;

/// Sets of possible values, by site.
pub type SiteSets = FxHashMap<Vertex, SymbolSet>;

impl<'a> Dynamics<'a> {
    /// Dynamics on Z^d.
    pub fn new(spec: &'a Spec, schedule: &'a Schedule, field: &'a RandomField) -> Result<Self> {
        if spec.dim() != schedule.dim() {
            return Err(invalid("schedule", "block dimension differs from the specification"));
        }
        Ok(Dynamics {
            spec,
            schedule,
            field,
            sub: Substrate::Lattice { dim: spec.dim() },
            exhaustion_limit: 12,
            site_budget: 1 << 25,
            feasible: spec.feasible_symbols(),
        })
    }

    /// Dynamics on a torus. Every block together with its boundary must
    /// embed without overlap.
    pub fn on_torus(spec: &'a Spec, schedule: &'a Schedule, field: &'a RandomField, torus: &Torus) -> Result<Self> {
        let mut me = Dynamics::new(spec, schedule, field)?;
        if torus.dim() != spec.dim() {
            return Err(invalid("torus", "dimension differs from the specification"));
        }
        let sub = Substrate::Torus(torus.clone());
        for (i, st) in schedule.stages.iter().enumerate() {
            let n = i + 1;
            let hull = st.block.union(&st.block.boundary());
            let images: FxHashSet<Vertex> = sub.place(&hull, &Vertex::origin(spec.dim())).into_iter().collect();
            if images.len() != hull.len() {
                return Err(Error::WindowTooSmall(format!(
                    "block of step {n} and its boundary ({} sites) wrap onto {} torus sites",
                    hull.len(),
                    images.len()
                )));
            }
        }
        me.sub = sub;
        Ok(me)
    }

    pub fn with_exhaustion_limit(mut self, limit: usize) -> Self {
        self.exhaustion_limit = limit;
        self
    }

    /// Largest total number of (site, step) pairs one evaluation may track.
    pub fn with_site_budget(mut self, budget: usize) -> Self {
        self.site_budget = budget;
        self
    }

    pub fn spec(&self) -> &Spec {
        self.spec
    }

    pub fn substrate(&self) -> &Substrate {
        &self.sub
    }

    fn stage(&self, n: u32) -> Result<&'a Stage> {
        self.schedule
            .stage(n)
            .ok_or_else(|| invalid("horizon", format!("the schedule defines no step {n}")))
    }

    pub fn chosen(&self, v: &Vertex, n: u32) -> bool {
        chosen_on(&self.sub, self.field, self.schedule, &self.sub.canonical(v), n)
    }

    pub fn update_set(&self, v: &Vertex, n: u32) -> Option<Vertex> {
        update_set_on(&self.sub, self.field, self.schedule, &self.sub.canonical(v), n)
    }

    /// Sets of possible values of the output of block `u` at step `n`, given
    /// sets on the block's boundary (in boundary order).
    fn block_sets(&self, u: &Vertex, n: u32, bsets: &[SymbolSet], work: &mut Work) -> Result<Vec<SymbolSet>> {
        let st = self.stage(n)?;
        let c = st.coupling();
        let draw = FieldDraw::new(self.field, *u, n as u64);
        work.blocks += 1;
        let size = st.block.len();
        if c.tau_independent() {
            let tau: Vec<Symbol> = match c.members() {
                Some(m) => m[0].clone(),
                None => bsets.iter().map(|s| s.iter().next().unwrap()).collect(),
            };
            work.taus += 1;
            let out = c.sample(&tau, &draw)?;
            return Ok(out.into_iter().map(SymbolSet::singleton).collect());
        }
        let undetermined = bsets.iter().filter(|s| !s.is_singleton()).count();
        if undetermined > self.exhaustion_limit {
            work.widened_steps += 1;
            return Ok(self.widened(c, &draw, size));
        }
        let choices: Vec<Vec<Symbol>> = bsets.iter().map(|s| s.iter().collect()).collect();
        let mut idx = vec![0usize; choices.len()];
        let mut tau: Vec<Symbol> = choices.iter().map(|c| c[0]).collect();
        let mut out = vec![SymbolSet::EMPTY; size];
        let mut any = false;
        'odometer: loop {
            if c.admits(&tau) {
                any = true;
                work.taus += 1;
                for (o, s) in out.iter_mut().zip(c.sample(&tau, &draw)?) {
                    o.insert(s);
                }
            }
            let mut k = choices.len();
            loop {
                if k == 0 {
                    break 'odometer;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < choices[k].len() {
                    tau[k] = choices[k][idx[k]];
                    break;
                }
                idx[k] = 0;
                tau[k] = choices[k][0];
            }
        }
        if !any {
            if undetermined == 0 {
                return Err(Error::InfeasibleBoundary);
            }
            work.widened_steps += 1;
            return Ok(self.widened(c, &draw, size));
        }
        Ok(out)
    }

    /// Output sets when the boundary conditions are not enumerated: the
    /// feasible set, except at sites the draw fixes for every condition.
    fn widened(&self, c: &dyn GrandCoupling, draw: &dyn Draw, size: usize) -> Vec<SymbolSet> {
        match c.common_values(draw) {
            Some(vals) => vals
                .into_iter()
                .map(|v| v.map_or(self.feasible, SymbolSet::singleton))
                .collect(),
            None => vec![self.feasible; size],
        }
    }

    /// Sets at `targets` after applying the maps `f_{times[L-1]}`, ...,
    /// `f_{times[0]}` in that order to the sets given by `init`.
    fn compose<F>(&self, targets: &[Vertex], times: &[u32], init: F, work: &mut Work) -> Result<SiteSets>
    where
        F: Fn(&Vertex) -> Result<SymbolSet>,
    {
        work.evaluations += 1;
        let depth = times.len();
        let mut levels: Vec<Level> = Vec::with_capacity(depth);
        let mut need: FxHashSet<Vertex> = targets.iter().map(|v| self.sub.canonical(v)).collect();
        let mut chosen_memo: FxHashMap<Vertex, bool> = FxHashMap::default();
        let mut tracked = 0usize;
        for &n in times {
            let st = self.stage(n)?;
            let bnd = st.block.boundary();
            chosen_memo.clear();
            let mut level = Level::with_capacity_and_hasher(need.len(), Default::default());
            let mut next = FxHashSet::default();
            for x in &need {
                let mut found = None;
                for w in st.block.iter() {
                    let u = self.sub.canonical(&x.sub(w));
                    let c = *chosen_memo
                        .entry(u)
                        .or_insert_with(|| chosen_on(&self.sub, self.field, self.schedule, &u, n));
                    if c {
                        found = Some(u);
                        break;
                    }
                }
                match found {
                    None => {
                        next.insert(*x);
                    }
                    Some(u) => {
                        for b in self.sub.place(&bnd, &u) {
                            next.insert(b);
                        }
                    }
                }
                level.insert(*x, found);
            }
            tracked += level.len();
            if tracked > self.site_budget {
                return Err(Error::Capacity {
                    what: "sites tracked by the backward composition".into(),
                    needed: tracked as u128,
                    limit: self.site_budget as u128,
                });
            }
            levels.push(level);
            need = next;
        }
        let mut sets: FxHashMap<Vertex, SymbolSet> = FxHashMap::with_capacity_and_hasher(need.len(), Default::default());
        for x in &need {
            sets.insert(*x, init(x)?);
        }
        for (i, level) in levels.iter().enumerate().rev() {
            let n = times[i];
            let st = self.stage(n)?;
            let bnd = st.block.boundary();
            let mut blocks: FxHashMap<Vertex, (FxHashMap<Vertex, usize>, Vec<SymbolSet>)> = FxHashMap::default();
            let mut out = FxHashMap::with_capacity_and_hasher(level.len(), Default::default());
            for (x, u) in level {
                let s = match u {
                    None => sets[x],
                    Some(u) => {
                        if !blocks.contains_key(u) {
                            let bsets: Vec<SymbolSet> = self.sub.place(&bnd, u).iter().map(|b| sets[b]).collect();
                            let res = self.block_sets(u, n, &bsets, work)?;
                            let pos: FxHashMap<Vertex, usize> = self
                                .sub
                                .place(&st.block, u)
                                .into_iter()
                                .enumerate()
                                .map(|(k, y)| (y, k))
                                .collect();
                            blocks.insert(*u, (pos, res));
                        }
                        let (pos, res) = &blocks[u];
                        res[pos[x]]
                    }
                };
                out.insert(*x, s);
            }
            sets = out;
        }
        Ok(sets)
    }

    fn full_init(&self) -> impl Fn(&Vertex) -> Result<SymbolSet> + '_ {
        move |_| Ok(self.feasible)
    }

    /// `f_n` applied to a configuration, on the sites of `target`.
    pub fn step(&self, cfg: &Config, target: &Region, n: u32) -> Result<Config> {
        let (sc, _) = self.step_sets(&SetConfig::from_config(cfg), target, n)?;
        Ok(Config {
            region: sc.region,
            values: sc.sets.iter().map(|s| s.single().expect("exact input gives exact output")).collect(),
        })
    }

    /// Set-valued `f_n`: each output set contains `f_n(ξ)_x` for every `ξ`
    /// with `ξ_y` in the input set at `y`.
    pub fn step_sets(&self, sc: &SetConfig, target: &Region, n: u32) -> Result<(SetConfig, Work)> {
        let mut work = Work::default();
        let init = |y: &Vertex| {
            sc.get(y).ok_or_else(|| {
                Error::WindowTooSmall(format!("step {n} needs the value at {:?}, outside the window", y.coords()))
            })
        };
        let targets: Vec<Vertex> = target.iter().map(|v| self.sub.canonical(v)).collect();
        let sets = self.compose(&targets, &[n], init, &mut work)?;
        Ok((
            SetConfig {
                region: target.clone(),
                sets: targets.iter().map(|v| sets[v]).collect(),
            },
            work,
        ))
    }

    /// Sets at `targets` for the backward composition `f_1 ∘ ... ∘ f_horizon`
    /// applied to all configurations.
    pub fn backward_sets(&self, targets: &[Vertex], horizon: u32, work: &mut Work) -> Result<SiteSets> {
        let times: Vec<u32> = (1..=horizon).collect();
        self.compose(targets, &times, self.full_init(), work)
    }

    /// Sets at `targets` for the forward composition `f_t ∘ ... ∘ f_1`.
    pub fn forward_sets(&self, targets: &[Vertex], t: u32, work: &mut Work) -> Result<SiteSets> {
        let times: Vec<u32> = (1..=t).rev().collect();
        self.compose(targets, &times, self.full_init(), work)
    }

    fn horizon_cap(&self, cap: u32) -> u32 {
        self.schedule.len_limit().map_or(cap, |l| l.min(cap))
    }

    /// Smallest horizon at which all targets are singletons: doubling, then
    /// bisection (coalescence is monotone in the horizon).
    fn coalescence(&self, targets: &[Vertex], cap: u32, work: &mut Work) -> Result<(u32, SiteSets)> {
        let done = |s: &SiteSets| s.values().all(|x| x.is_singleton());
        if self.feasible.is_singleton() {
            let s: SiteSets = targets.iter().map(|v| (self.sub.canonical(v), self.feasible)).collect();
            return Ok((0, s));
        }
        let cap = self.horizon_cap(cap);
        let mut lo = 0u32;
        let mut hi = 1u32.min(cap);
        let mut last;
        loop {
            if hi == 0 {
                return Err(Error::NoCoalescence { horizon: 0, max_set: self.feasible.len() });
            }
            last = self.backward_sets(targets, hi, work)?;
            if done(&last) {
                break;
            }
            if hi >= cap {
                let max_set = last.values().map(|s| s.len()).max().unwrap_or(0);
                return Err(Error::NoCoalescence { horizon: hi, max_set });
            }
            lo = hi;
            hi = (hi.saturating_mul(2)).min(cap);
        }
        let top = last.clone();
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let s = self.backward_sets(targets, mid, work)?;
            if done(&s) {
                hi = mid;
                last = s;
            } else {
                lo = mid;
            }
        }
        for (v, s) in &last {
            assert_eq!(top[v], *s, "value at {v:?} changed after coalescence");
        }
        Ok((hi, last))
    }

    /// Perfect sample at `v` by coupling from the past.
    pub fn cftp_value(&self, v: &Vertex, horizon_cap: u32) -> Result<CftpResult> {
        let mut work = Work::default();
        let v = self.sub.canonical(v);
        let (t, sets) = self.coalescence(&[v], horizon_cap, &mut work)?;
        Ok(CftpResult {
            vertex: v.coords().to_vec(),
            value: sets[&v].single().unwrap(),
            t,
            radius_bound: self.schedule.radius_bound(t),
            work,
        })
    }

    /// Sets on every torus site after `f_{times[L-1]}`, ..., `f_{times[0]}`
    /// applied to all configurations, on dense arrays.
    fn torus_sets(&self, torus: &Torus, times: &[u32], work: &mut Work) -> Result<Vec<SymbolSet>> {
        work.evaluations += 1;
        let sites = torus.vertices();
        let idx = |v: &Vertex| sites.index_of(&torus.wrap(v)).expect("torus site");
        let mut sets = vec![self.feasible; sites.len()];
        let mut is_active = vec![false; sites.len()];
        for &n in times.iter().rev() {
            let st = self.stage(n)?;
            for (i, v) in sites.iter().enumerate() {
                is_active[i] = self.field.bernoulli(v, n as u64, STAGE_ACTIVE, 0, st.p);
            }
            let bnd = st.block.boundary();
            let mut next = sets.clone();
            for (i, u) in sites.iter().enumerate() {
                if !is_active[i] || st.exclusion.iter().any(|w| {
                    let j = idx(&u.add(w));
                    j != i && is_active[j]
                }) {
                    continue;
                }
                let bsets: Vec<SymbolSet> = bnd.iter().map(|b| sets[idx(&b.add(u))]).collect();
                let res = self.block_sets(u, n, &bsets, work)?;
                for (x, r) in st.block.iter().zip(res) {
                    next[idx(&x.add(u))] = r;
                }
            }
            sets = next;
        }
        Ok(sets)
    }

    /// Perfect sample of the whole torus.
    pub fn cftp_torus(&self, horizon_cap: u32) -> Result<TorusSample> {
        let Substrate::Torus(torus) = &self.sub else {
            return Err(invalid("substrate", "whole-configuration sampling needs a torus"));
        };
        let mut work = Work::default();
        let done = |s: &[SymbolSet]| s.iter().all(|x| x.is_singleton());
        let eval = |h: u32, work: &mut Work| {
            let times: Vec<u32> = (1..=h).collect();
            self.torus_sets(torus, &times, work)
        };
        let cap = self.horizon_cap(horizon_cap);
        if self.feasible.is_singleton() {
            let single = self.feasible.single().unwrap();
            return Ok(TorusSample { values: vec![single; torus.volume()], horizon: 0, work });
        }
        let mut hi = 1u32.min(cap);
        let mut last;
        loop {
            if hi == 0 {
                return Err(Error::NoCoalescence { horizon: 0, max_set: self.feasible.len() });
            }
            last = eval(hi, &mut work)?;
            if done(&last) {
                break;
            }
            if hi >= cap {
                let max_set = last.iter().map(|s| s.len()).max().unwrap_or(0);
                return Err(Error::NoCoalescence { horizon: hi, max_set });
            }
            hi = hi.saturating_mul(2).min(cap);
        }
        Ok(TorusSample {
            values: last.iter().map(|s| s.single().unwrap()).collect(),
            horizon: hi,
            work,
        })
    }

    /// First `t` at which the forward chain started from all
    /// configurations is a singleton at `v`; censored at the cap.
    pub fn forward_coalescence_sample(&self, v: &Vertex, horizon_cap: u32) -> Result<(ForwardSample, Work)> {
        let mut work = Work::default();
        let v = self.sub.canonical(v);
        if self.feasible.is_singleton() {
            return Ok((ForwardSample { t: 0, censored: false }, work));
        }
        let cap = self.horizon_cap(horizon_cap);
        for t in 1..=cap {
            let s = self.forward_sets(&[v], t, &mut work)?;
            if s[&v].is_singleton() {
                return Ok((ForwardSample { t, censored: false }, work));
            }
        }
        Ok((ForwardSample { t: cap, censored: true }, work))
    }
}

impl Dynamics<'_> {
    /// Union of `step(ξ)` over every configuration `ξ` drawn from the sets
    /// of `sc`. Configurations some block cannot evaluate are skipped.
    pub fn brute_force_sets(&self, sc: &SetConfig, target: &Region, n: u32, max_configs: u64) -> Result<SetConfig> {
        let choices: Vec<Vec<Symbol>> = sc.sets.iter().map(|s| s.iter().collect()).collect();
        let total = choices
            .iter()
            .try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64))
            .unwrap_or(u64::MAX);
        if total > max_configs {
            return Err(Error::Capacity {
                what: "configurations of the window".into(),
                needed: total as u128,
                limit: max_configs as u128,
            });
        }
        let mut out = vec![SymbolSet::EMPTY; target.len()];
        let mut idx = vec![0usize; choices.len()];
        'odometer: loop {
            let cfg = Config {
                region: sc.region.clone(),
                values: idx.iter().zip(&choices).map(|(i, c)| c[*i]).collect(),
            };
            match self.step(&cfg, target, n) {
                Ok(c) => {
                    for (o, s) in out.iter_mut().zip(c.values) {
                        o.insert(s);
                    }
                }
                Err(Error::InfeasibleBoundary) => {}
                Err(e) => return Err(e),
            }
            let mut k = choices.len();
            loop {
                if k == 0 {
                    break 'odometer;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < choices[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(SetConfig {
            region: target.clone(),
            sets: out,
        })
    }
}

/// One JSON line per perfect sample.
#[derive(Clone, Debug, Serialize)]
pub struct CftpRecord {
    pub seed: u64,
    pub v: Vec<i32>,
    #[serde(rename = "T_v")]
    pub t: u32,
    pub radius_bound: u64,
    pub value: Symbol,
    pub widened_steps: u64,
}

impl CftpRecord {
    pub fn new(seed: u64, r: &CftpResult) -> Self {
        CftpRecord {
            seed,
            v: r.vertex.clone(),
            t: r.t,
            radius_bound: r.radius_bound,
            value: r.value,
            widened_steps: r.work.widened_steps,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Add the work of several evaluations.
pub fn total_work<'w>(items: impl IntoIterator<Item = &'w Work>) -> Work {
    let mut w = Work::default();
    for x in items {
        w.absorb(x);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use crate::coupling::{OptimalCoupling, ProductCoupling};
    use crate::exactgibbs::{torus_gibbs, Limits};
    use crate::lattice::boxed;

    fn single_site(spec: &Spec, ex: Exclusion) -> Schedule {
        let v = Region::singleton(Vertex::origin(spec.dim()));
        let c = OptimalCoupling::new(spec, &v, &v, &Limits::default()).unwrap();
        Schedule::fixed(0.5, Arc::new(c), ex).unwrap()
    }

    fn v2(x: i32, y: i32) -> Vertex {
        Vertex::new(&[x, y])
    }

    #[test]
    fn chosen_frequency() {
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        for (ex, k) in [(Exclusion::L1Ball, 5), (Exclusion::Box, 9)] {
            let s = single_site(&spec, ex);
            let f = RandomField::new(3);
            let trials = 200_000;
            let hits = (0..trials)
                .filter(|i| chosen(&f, &s, &v2(i % 101, i / 101), 1 + (i % 7) as u32))
                .count();
            let p = 0.5f64.powi(k);
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((hits as f64 / trials as f64 - p).abs() < 4.0 * se, "{ex:?}");
        }
    }

    #[test]
    fn isolated_and_adjacent() {
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(11);
        for n in 1..400 {
            for x in -3..3 {
                let v = v2(x, 0);
                let w = v2(x + 1, 0);
                if active(&f, &s, &v, n) && active(&f, &s, &w, n) {
                    assert!(!chosen(&f, &s, &v, n) && !chosen(&f, &s, &w, n));
                }
            }
        }
    }

    #[test]
    fn update_sets_are_unique() {
        let spec = Spec::ising(0.05, 2).unwrap();
        let b = ball(1, 2);
        let c = OptimalCoupling::new(&spec, &b, &Region::singleton(Vertex::origin(2)), &Limits::default()).unwrap();
        let s = Schedule::fixed(0.5, Arc::new(c), Exclusion::L1Ball).unwrap();
        assert_eq!(s.stage(1).unwrap().r(), 5);
        let f = RandomField::new(5);
        let mut seen = 0;
        for i in 0..10_000 {
            let v = v2(i % 50, i / 50);
            if let Some(u) = update_set(&f, &s, &v, 1 + (i % 13) as u32) {
                assert!(b.contains(&v.sub(&u)));
                seen += 1;
            }
        }
        let _ = seen;
    }

    #[test]
    fn step_keeps_untouched_sites() {
        let spec = Spec::ising(0.2, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(9);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let win = ball(3, 2);
        let target = ball(2, 2);
        let cfg = Config {
            values: (0..win.len()).map(|i| (i % 2) as Symbol).collect(),
            region: win.clone(),
        };
        for n in 1..50 {
            let out = dy.step(&cfg, &target, n).unwrap();
            for (x, val) in target.iter().zip(&out.values) {
                if dy.update_set(x, n).is_none() {
                    assert_eq!(*val, cfg.values[win.index_of(x).unwrap()]);
                }
            }
        }
    }

    #[test]
    fn window_too_small_is_reported() {
        let spec = Spec::ising(0.2, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(9);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let win = ball(1, 2);
        let sc = SetConfig::full(win.clone(), &spec);
        let err = (1..200).find_map(|n| dy.step_sets(&sc, &win, n).err());
        assert!(matches!(err, Some(Error::WindowTooSmall(_))));
    }

    #[test]
    fn potts_zero_updates_are_singletons() {
        let spec = Spec::potts(3, 0.0, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(1);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let win = ball(3, 2);
        let target = ball(2, 2);
        let sc = SetConfig::full(win, &spec);
        for n in 1..30 {
            let (out, _) = dy.step_sets(&sc, &target, n).unwrap();
            for (x, set) in target.iter().zip(&out.sets) {
                assert_eq!(set.is_singleton(), dy.update_set(x, n).is_some());
            }
        }
    }

    #[test]
    fn potts_zero_time_is_first_update() {
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        let s = single_site(&spec, Exclusion::Box);
        for seed in 0..20 {
            let f = RandomField::new(seed);
            let dy = Dynamics::new(&spec, &s, &f).unwrap();
            let v = v2(1, -2);
            let r = dy.cftp_value(&v, 1 << 16).unwrap();
            let first = (1..).find(|n| dy.update_set(&v, *n).is_some()).unwrap();
            assert_eq!(r.t, first);
            assert_eq!(r.radius_bound, 2 * first as u64);
        }
    }

    #[test]
    fn step_sets_contain_every_image() {
        let spec = Spec::hardcore(0.7, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(21);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let win = ball(2, 2);
        let target = ball(1, 2);
        let mut sc = SetConfig::full(win, &spec);
        for (i, set) in sc.sets.iter_mut().enumerate() {
            if i % 3 == 0 {
                *set = SymbolSet::singleton((i % 2) as Symbol);
            }
        }
        for n in 1..40 {
            let (fast, _) = dy.step_sets(&sc, &target, n).unwrap();
            let slow = dy.brute_force_sets(&sc, &target, n, 1 << 16).unwrap();
            for (a, b) in slow.sets.iter().zip(&fast.sets) {
                assert!(a.is_subset_of(b));
            }
        }
    }

    #[test]
    fn widened_sets_contain_every_image() {
        let spec = Spec::ising(0.3, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(8);
        let dy = Dynamics::new(&spec, &s, &f).unwrap().with_exhaustion_limit(0);
        let win = ball(2, 2);
        let target = ball(1, 2);
        let mut sc = SetConfig::full(win, &spec);
        for (i, set) in sc.sets.iter_mut().enumerate() {
            if i % 2 == 0 {
                *set = SymbolSet::singleton((i % 3 == 0) as Symbol);
            }
        }
        let mut singles = 0;
        for n in 1..60 {
            let (fast, w) = dy.step_sets(&sc, &target, n).unwrap();
            let slow = dy.brute_force_sets(&sc, &target, n, 1 << 16).unwrap();
            for (a, b) in slow.sets.iter().zip(&fast.sets) {
                assert!(a.is_subset_of(b));
            }
            if w.widened_steps > 0 {
                singles += fast.sets.iter().filter(|x| x.is_singleton()).count();
            }
        }
        assert!(singles > 0);
    }

    #[test]
    fn translation_equivariance() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(77);
        let shift = v2(5, -3);
        let g = f.shifted(&shift);
        let a = Dynamics::new(&spec, &s, &f).unwrap();
        let b = Dynamics::new(&spec, &s, &g).unwrap();
        for x in 0..5 {
            let v = v2(x, 2 * x);
            let ra = a.cftp_value(&v.add(&shift), 1 << 14).unwrap();
            let rb = b.cftp_value(&v, 1 << 14).unwrap();
            assert_eq!((ra.value, ra.t), (rb.value, rb.t));
        }
    }

    #[test]
    fn stabilization_and_radius() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(4);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let v = Vertex::origin(2);
        let r = dy.cftp_value(&v, 1 << 14).unwrap();
        assert_eq!(r.radius_bound, 2 * r.t as u64);
        let mut w = Work::default();
        for h in [r.t, r.t + 1, r.t + 7, 2 * r.t + 3] {
            let sets = dy.backward_sets(&[v], h, &mut w).unwrap();
            assert_eq!(sets[&v].single(), Some(r.value));
        }
        if r.t > 1 {
            assert!(!dy.backward_sets(&[v], r.t - 1, &mut w).unwrap()[&v].is_singleton());
        }
    }

    #[test]
    fn widening_never_changes_values() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        for seed in 0..10 {
            let f = RandomField::new(seed);
            let wide = Dynamics::new(&spec, &s, &f).unwrap().with_exhaustion_limit(2);
            let full = Dynamics::new(&spec, &s, &f).unwrap().with_exhaustion_limit(4);
            let v = Vertex::origin(2);
            let a = full.cftp_value(&v, 1 << 14).unwrap();
            if let Ok(b) = wide.cftp_value(&v, 512) {
                assert_eq!(a.value, b.value);
                assert!(b.t >= a.t);
            }
        }
    }

    #[test]
    fn torus_steps_preserve_gibbs_law() {
        let spec = Spec::ising(0.3, 2).unwrap();
        let torus = Torus::new(&[3, 3]).unwrap();
        let law = torus_gibbs(&spec, &torus).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let sites = torus.vertices();
        let mut acc = vec![0.0; law.len()];
        let index: HashMap<Vec<Symbol>, usize> =
            law.support().iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let steps = 400;
        for seed in 0..steps {
            let f = RandomField::new(seed);
            let dy = Dynamics::on_torus(&spec, &s, &f, &torus).unwrap();
            for (cfg, p) in law.iter() {
                let c = Config {
                    region: sites.clone(),
                    values: cfg.to_vec(),
                };
                let out = dy.step(&c, &sites, 1).unwrap();
                acc[index[&out.values]] += p / steps as f64;
            }
        }
        let tv: f64 = acc.iter().zip(law.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.06, "tv {tv}");
    }

    #[test]
    fn torus_cftp_runs() {
        let spec = Spec::hardcore(0.2, 2).unwrap();
        let torus = Torus::new(&[4, 4]).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        let f = RandomField::new(2);
        let dy = Dynamics::on_torus(&spec, &s, &f, &torus).unwrap();
        let out = dy.cftp_torus(1 << 16).unwrap();
        assert_eq!(out.values.len(), 16);
        let sites = torus.vertices();
        for (i, x) in sites.iter().enumerate() {
            for y in x.neighbors() {
                let j = sites.index_of(&torus.wrap(&y)).unwrap();
                assert!(!(out.values[i] == 1 && out.values[j] == 1));
            }
        }
    }

    #[test]
    fn dense_torus_path_matches_sparse() {
        let spec = Spec::ising(0.15, 2).unwrap();
        let torus = Torus::new(&[3, 4]).unwrap();
        let s = single_site(&spec, Exclusion::L1Ball);
        for seed in 0..5 {
            let f = RandomField::new(seed);
            let dy = Dynamics::on_torus(&spec, &s, &f, &torus).unwrap();
            let sites = torus.vertices();
            let mut w = Work::default();
            for h in [1, 3, 17, 60] {
                let dense = dy.torus_sets(&torus, &(1..=h).collect::<Vec<_>>(), &mut w).unwrap();
                let sparse = dy.backward_sets(sites.vertices(), h, &mut w).unwrap();
                for (x, d) in sites.iter().zip(&dense) {
                    assert_eq!(sparse[x], *d);
                }
            }
        }
    }

    #[test]
    fn torus_rejects_wrapping_blocks() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let b = boxed(&[-1, -1], &[1, 1]);
        let c = ProductCoupling::new(&Spec::potts(2, 0.0, 2).unwrap(), &b).unwrap();
        let s = Schedule::fixed(0.5, Arc::new(c), Exclusion::L1Ball).unwrap();
        let f = RandomField::new(0);
        let torus = Torus::new(&[3, 3]).unwrap();
        assert!(matches!(
            Dynamics::on_torus(&spec, &s, &f, &torus),
            Err(Error::WindowTooSmall(_))
        ));
    }

    #[test]
    fn finite_schedule_reports_non_coalescence() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let v = Region::singleton(Vertex::origin(2));
        let c: Arc<dyn GrandCoupling> = Arc::new(OptimalCoupling::new(&spec, &v, &v, &Limits::default()).unwrap());
        let st = Stage::new(0.5, c, Exclusion::L1Ball).unwrap();
        let s = Schedule::new(vec![st], false, Exclusion::L1Ball).unwrap();
        let f = RandomField::new(8);
        let dy = Dynamics::new(&spec, &s, &f).unwrap();
        let mut failures = 0;
        for x in 0..64 {
            match dy.cftp_value(&v2(x, 0), 100) {
                Err(Error::NoCoalescence { horizon, max_set }) => {
                    assert_eq!(horizon, 1);
                    assert_eq!(max_set, 2);
                    failures += 1;
                }
                Ok(r) => assert_eq!(r.t, 1),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(failures > 0);
    }
}
