//! Schedule builders: a fixed block with `p = 1/2`, and growing blocks
//! `Λ_{ℓ_n}` with `p_n = ℓ_n^{-d}`.

use std::sync::Arc;

use serde::Serialize;
use statrs::distribution::{Binomial, Discrete};

use crate::coupling::{ContractingCoupling2d, FieldDraw, GrandCoupling, OptimalCoupling, ProductCoupling};
use crate::dynamics::{update_set, Dynamics, Exclusion, Schedule, Stage};
use crate::error::{invalid, Error, Result};
use crate::exactgibbs::{gamma_with, Limits};
use crate::lattice::{ball, Region, Vertex};
use crate::model::Spec;
use crate::randomness::RandomField;

/// Which grand coupling a fixed schedule uses on its block.
#[derive(Clone, Debug)]
pub enum CouplingKind {
    /// Optimal for the marginals on `u`.
    Optimal { u: Region },
    /// The staged coupling on `Λ_n` (d = 2).
    Contracting { n: u32, r: u32, s: u32 },
    /// Independent sites; boundary-independent specifications only.
    Product,
}

/// Build the coupling of `kind` on `v`. An optimal coupling whose table is
/// too large falls back to the product coupling when the specification
/// ignores boundaries, since the two then have the same law.
pub fn build_coupling(spec: &Spec, v: &Region, kind: &CouplingKind, limits: &Limits) -> Result<Arc<dyn GrandCoupling>> {
    Ok(match kind {
        CouplingKind::Optimal { u } => match OptimalCoupling::new(spec, v, u, limits) {
            Ok(c) => Arc::new(c),
            Err(Error::Capacity { .. }) if spec.is_boundary_independent() => Arc::new(ProductCoupling::new(spec, v)?),
            Err(e) => return Err(e),
        },
        CouplingKind::Contracting { n, r, s } => {
            if *v != ball(*n, 2) {
                return Err(invalid("V", "the staged coupling lives on Λ_n"));
            }
            Arc::new(ContractingCoupling2d::new(spec, *n, *r, *s)?)
        }
        CouplingKind::Product => Arc::new(ProductCoupling::new(spec, v)?),
    })
}

/// `Δ_n = V`, `p_n = 1/2` and the same coupling at every step.
pub fn fixed_schedule(spec: &Spec, v: &Region, kind: &CouplingKind, limits: &Limits, exclusion: Exclusion) -> Result<Schedule> {
    if v.dim() != spec.dim() {
        return Err(invalid("V", "dimension differs from the specification"));
    }
    let c = build_coupling(spec, v, kind, limits)?;
    Schedule::fixed(0.5, c, exclusion)
}

/// Single-site heat-bath schedule.
pub fn single_site_schedule(spec: &Spec, exclusion: Exclusion) -> Result<Schedule> {
    let v = Region::singleton(Vertex::origin(spec.dim()));
    fixed_schedule(spec, &v, &CouplingKind::Optimal { u: v.clone() }, &Limits::default(), exclusion)
}

/// Exact fraction `num/den` equal to `x` as a double, with `den <= 10^6`.
pub fn rational(x: f64) -> Option<(u64, u64)> {
    if !(x > 0.0 && x.is_finite()) {
        return None;
    }
    (1..=1_000_000u64).find_map(|den| {
        let num = (x * den as f64).round();
        (num >= 1.0 && num / den as f64 == x).then_some((num as u64, den))
    })
}

/// Smallest `ℓ` with `δ ℓ > 4 d sum`, for `δ = num/den`.
pub fn next_ell(num: u64, den: u64, d: u64, sum: u64) -> u64 {
    let lhs = 4u128 * d as u128 * sum as u128 * den as u128;
    (lhs / num as u128 + 1) as u64
}

/// One stage of a growing plan.
#[derive(Clone, Debug, Serialize)]
pub struct PlanStage {
    pub ell: u64,
    pub p: f64,
    /// `diam(Λ_ℓ) + 1`.
    pub r: u64,
    /// Half-side of the region `Λ_{⌊δℓ⌋}` the origin must be updated from.
    pub core: u64,
    /// Half-side of the region `Λ_{⌊3δℓ⌋}` the coupling must shield.
    pub inner: u64,
    /// `γ(Λ_ℓ, Λ_{⌊3δℓ⌋})`, when it could be computed.
    pub gamma: Option<f64>,
    pub certified: bool,
}

/// Block half-sides `ℓ_1, ℓ_2, ...` with `δ ℓ_{n+1} > 4 d (ℓ_1 + ... + ℓ_n)`.
#[derive(Clone, Debug, Serialize)]
pub struct GrowingPlan {
    pub d: usize,
    pub delta: f64,
    pub delta_ratio: (u64, u64),
    pub epsilon: f64,
    pub stages: Vec<PlanStage>,
    /// Why the plan stops short of the requested length.
    pub truncated: Option<String>,
}

/// Default number of stages the CLI builds.
pub const DEFAULT_MAX_STAGES: usize = 4;

impl GrowingPlan {
    /// Minimal sequence from `ell1`. Each stage is certified when
    /// `γ(Λ_ℓ, Λ_{⌊3δℓ⌋}) > ε` is verified exactly; the plan ends at the
    /// first stage that cannot be certified.
    pub fn build(spec: &Spec, delta: f64, epsilon: f64, ell1: u64, n_max: usize, limits: &Limits) -> Result<GrowingPlan> {
        for (name, x) in [("delta", delta), ("epsilon", epsilon)] {
            if !(x > 0.0 && x < 1.0 / 3.0) {
                return Err(invalid(name, format!("must lie in (0, 1/3), got {x}")));
            }
        }
        if ell1 == 0 || n_max == 0 {
            return Err(invalid("ell", "need ell_1 >= 1 and at least one stage"));
        }
        let (num, den) = rational(delta).ok_or_else(|| invalid("delta", "no exact fraction with denominator <= 10^6"))?;
        let d = spec.dim();
        let mut plan = GrowingPlan {
            d,
            delta,
            delta_ratio: (num, den),
            epsilon,
            stages: Vec::new(),
            truncated: None,
        };
        let mut ells = vec![ell1];
        while ells.len() < n_max {
            let s: u64 = ells.iter().sum();
            ells.push(next_ell(num, den, d as u64, s));
        }
        for ell in ells {
            let core = ell * num / den;
            let inner = 3 * ell * num / den;
            let (gamma, certified) = if spec.is_boundary_independent() {
                (Some(1.0), true)
            } else {
                let v = ball(ell as u32, d);
                let u = ball(inner as u32, d);
                match gamma_with(spec, &v, &u, limits) {
                    Ok(g) => (Some(g), g > epsilon),
                    Err(Error::Capacity { .. }) => (None, false),
                    Err(e) => return Err(e),
                }
            };
            let stage = PlanStage {
                ell,
                p: (ell as f64).powi(-(d as i32)),
                r: 2 * d as u64 * ell + 1,
                core,
                inner,
                gamma,
                certified,
            };
            if !certified {
                plan.truncated = Some(match gamma {
                    Some(g) => format!("stage {} (ell = {ell}): gamma = {g} <= epsilon", plan.stages.len() + 1),
                    None => format!("stage {} (ell = {ell}): gamma is beyond exact enumeration", plan.stages.len() + 1),
                });
                break;
            }
            plan.stages.push(stage);
        }
        Ok(plan)
    }

    /// `δ ℓ_{n+1} > 4 d (ℓ_1 + ... + ℓ_n)` in integers, for every pair.
    pub fn satisfies_growth(&self) -> bool {
        let (num, den) = self.delta_ratio;
        let mut sum = 0u128;
        for w in self.stages.windows(2) {
            sum += w[0].ell as u128;
            if num as u128 * w[1].ell as u128 <= 4 * self.d as u128 * sum * den as u128 {
                return false;
            }
        }
        true
    }

    /// Finite schedule over the certified stages, each coupling optimal on
    /// `Λ_{⌊3δℓ⌋}`.
    pub fn schedule(&self, spec: &Spec, limits: &Limits, exclusion: Exclusion) -> Result<Schedule> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let v = ball(st.ell as u32, self.d);
            let u = ball(st.inner as u32, self.d);
            let c = build_coupling(spec, &v, &CouplingKind::Optimal { u }, limits)?;
            stages.push(Stage::new(st.p, c, exclusion)?);
        }
        if stages.is_empty() {
            return Err(invalid("plan", "no certified stage"));
        }
        Schedule::new(stages, false, exclusion)
    }

    /// Lower bound on the probability that stage `n` alone determines the
    /// origin: `γ · P(Bin(|Λ_a|, p) = 1) · P(Bin(|Λ_{a+r}| - |Λ_a|, p) = 0)`
    /// with `a = ⌊δℓ⌋`.
    pub fn stage_success_bound(&self, n: usize) -> Option<f64> {
        let st = self.stages.get(n.checked_sub(1)?)?;
        let vol = |h: u64| (2 * h + 1).pow(self.d as u32);
        let inner = vol(st.core);
        let ring = vol(st.core + st.r) - inner;
        let one = Binomial::new(st.p, inner).ok()?.pmf(1);
        let zero = (1.0 - st.p).powf(ring as f64);
        Some(st.gamma? * one * zero)
    }

    /// Plain-text form readable by the experiment config parser.
    pub fn to_config_text(&self) -> String {
        let ells: Vec<String> = self.stages.iter().map(|s| s.ell.to_string()).collect();
        format!(
            "[schedule]\nkind = growing\ndelta = {}\nepsilon = {}\nells = {}\n",
            self.delta,
            self.epsilon,
            ells.join(",")
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// Whether the block chosen at `(u, n)` draws the same configuration on
/// `inner` (block coordinates) for every boundary condition.
pub fn shields(coupling: &dyn GrandCoupling, field: &RandomField, u: &Vertex, n: u32, inner: &Region) -> Result<bool> {
    if coupling.tau_independent() {
        return Ok(true);
    }
    let members = coupling.members().ok_or_else(|| Error::Capacity {
        what: "boundary conditions of a block without a table".into(),
        needed: u128::MAX,
        limit: 0,
    })?;
    let pos: Vec<usize> = inner
        .iter()
        .map(|x| coupling.region().index_of(x).ok_or_else(|| Error::RegionMismatch("inner region leaves the block".into())))
        .collect::<Result<_>>()?;
    let draw = FieldDraw::new(field, *u, n as u64);
    let first = coupling.sample_member(0, &draw);
    for t in 1..members.len() {
        let other = coupling.sample_member(t, &draw);
        if pos.iter().any(|&i| other[i] != first[i]) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The event that step `n` alone fixes the value at `v`: `v` is updated by
/// a block based in `v + Λ_{⌊δℓ_n⌋}` that shields its inner region.
pub fn stage_success(plan: &GrowingPlan, schedule: &Schedule, field: &RandomField, v: &Vertex, n: u32) -> Result<bool> {
    let ps = plan.stages.get(n as usize - 1).ok_or_else(|| invalid("n", "beyond the plan"))?;
    let st = schedule.stage(n).ok_or_else(|| invalid("n", "beyond the schedule"))?;
    let Some(u) = update_set(field, schedule, v, n) else {
        return Ok(false);
    };
    if u.sub(v).coords().iter().any(|c| c.unsigned_abs() as u64 > ps.core) {
        return Ok(false);
    }
    shields(st.coupling(), field, &u, n, &ball(ps.inner as u32, plan.d))
}

/// First `n <= cap` at which [`stage_success`] holds.
pub fn t_prime(plan: &GrowingPlan, schedule: &Schedule, field: &RandomField, v: &Vertex, cap: u32) -> Result<Option<u32>> {
    for n in 1..=cap.min(plan.stages.len() as u32) {
        if stage_success(plan, schedule, field, v, n)? {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

/// Frequency of [`stage_success`] at stage `n` over independent fields.
#[derive(Clone, Debug, Serialize)]
pub struct StageTrial {
    pub n: u32,
    pub trials: u64,
    pub successes: u64,
    pub frequency: f64,
    /// Binomial standard error at `max(frequency, bound)`.
    pub se: f64,
    pub bound: f64,
    /// `frequency >= bound - 3 se`.
    pub pass: bool,
    /// Trials where stage success held and the backward chain was checked.
    pub t_checks: u64,
}

/// Simulate stage `n` and check both the success bound and, on every
/// success, that the backward chain from horizon `n` is coalesced at the
/// origin.
pub fn simulate_stage(spec: &Spec, plan: &GrowingPlan, schedule: &Schedule, n: u32, trials: u64, seed: u64) -> Result<StageTrial> {
    let bound = plan.stage_success_bound(n as usize).ok_or_else(|| invalid("n", "beyond the plan"))?;
    let base = RandomField::new(seed);
    let origin = Vertex::origin(plan.d);
    let results = crate::par::map_range(trials as usize, |i| -> Result<(bool, bool)> {
        let f = base.substream(i as u64);
        let ok = stage_success(plan, schedule, &f, &origin, n)?;
        if !ok {
            return Ok((false, false));
        }
        let dy = Dynamics::new(spec, schedule, &f)?;
        let mut w = Default::default();
        let sets = dy.backward_sets(&[origin], n, &mut w)?;
        assert!(sets[&origin].is_singleton(), "stage success without coalescence at step {n}");
        Ok((true, true))
    });
    let mut successes = 0;
    let mut t_checks = 0;
    for r in results {
        let (s, c) = r?;
        successes += s as u64;
        t_checks += c as u64;
    }
    let freq = successes as f64 / trials as f64;
    let q = freq.max(bound);
    let se = (q * (1.0 - q) / trials as f64).sqrt();
    Ok(StageTrial {
        n,
        trials,
        successes,
        frequency: freq,
        se,
        bound,
        pass: freq >= bound - 3.0 * se,
        t_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_arithmetic() {
        assert_eq!(rational(0.25), Some((1, 4)));
        assert_eq!(next_ell(1, 4, 2, 4), 129);
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        let plan = GrowingPlan::build(&spec, 0.25, 0.1, 4, 3, &Limits::default()).unwrap();
        let ells: Vec<u64> = plan.stages.iter().map(|s| s.ell).collect();
        assert_eq!(ells, vec![4, 129, 4257]);
        assert!(plan.satisfies_growth());
        assert!(plan.stages.iter().all(|s| s.gamma == Some(1.0)));
    }

    #[test]
    fn fixed_block_radius() {
        let spec = Spec::ising(0.05, 2).unwrap();
        let v = ball(1, 2);
        let s = fixed_schedule(&spec, &v, &CouplingKind::Optimal { u: v.clone() }, &Limits::default(), Exclusion::L1Ball).unwrap();
        assert_eq!(s.stage(1).unwrap().r(), 5);
        assert_eq!(s.stage(40).unwrap().p(), 0.5);
        let one = single_site_schedule(&spec, Exclusion::Box).unwrap();
        assert_eq!(one.stage(3).unwrap().r(), 1);
    }

    #[test]
    fn ising_plan_is_truncated() {
        let spec = Spec::ising(0.1, 2).unwrap();
        let plan = GrowingPlan::build(&spec, 0.25, 0.1, 1, 3, &Limits::default()).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert!(plan.stages[0].certified);
        assert!(plan.truncated.is_some());
    }

    #[test]
    fn stage_bound_for_small_blocks() {
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        let plan = GrowingPlan::build(&spec, 0.25, 0.1, 2, 1, &Limits::default()).unwrap();
        let b = plan.stage_success_bound(1).unwrap();
        let expected = 0.25 * 0.75f64.powi(360);
        assert!((b / expected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn success_implies_coalescence() {
        let spec = Spec::potts(2, 0.0, 2).unwrap();
        let plan = GrowingPlan::build(&spec, 0.3, 0.1, 3, 1, &Limits::default()).unwrap();
        let sched = plan.schedule(&spec, &Limits::default(), Exclusion::L1Ball).unwrap();
        let t = simulate_stage(&spec, &plan, &sched, 1, 3000, 5).unwrap();
        assert!(t.pass);
        assert_eq!(t.successes, t.t_checks);
    }
}
