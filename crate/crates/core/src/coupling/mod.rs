//! Grand couplings of the family `(P^tau_V)_tau`.
//!
//! A coupling is a deterministic map from a boundary condition and a
//! [`Draw`] to a configuration. Every random choice goes through
//! [`Draw::choose`] at a fixed [`Addr`], so evaluating many boundary
//! conditions against one draw couples them, and the same draw can be
//! re-read at will. [`ExactDraw`] replaces the uniforms by intervals and
//! enumerates the joint law exactly on small instances.

mod contracting;
mod diag;
mod optimal;
mod pairwise;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lattice::{Region, Vertex};
use crate::model::Symbol;
use crate::randomness::{RandomField, STAGE_COUPLING};

pub use contracting::{ContractingCoupling2d, FacePlan};
pub use diag::{
    check_contraction, coincidence_probability, kappa, lambda_psi, lambda_tau_a,
    random_subsets, subsets_up_to, ContractionMode, ContractionReport, DiagRecord, Estimate,
    Joint, JointLaw, Psi,
};
pub use optimal::{optimal_pair, OptimalCoupling, ProductCoupling};
pub use pairwise::{PairSample, PairwiseRatioCoupling};

/// Where a random choice is read from. Stages separate the phases of one
/// coupling; the index separates choices within a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr {
    pub stage: u32,
    pub index: u32,
}

impl Addr {
    pub const fn new(stage: u32, index: u32) -> Addr {
        Addr { stage, index }
    }
}

/// Source of the random choices of a coupling.
pub trait Draw {
    /// Pick index `i` with probability `cdf[i] - cdf[i-1]`, where `cdf` is
    /// the output of [`cdf`]: the first `i` with `u < cdf[i]`.
    fn choose_cdf(&self, addr: Addr, cdf: &[f64]) -> usize;

    /// Pick an index with probability proportional to `weights` by inverse
    /// CDF. Weights are non-negative with a positive total.
    fn choose(&self, addr: Addr, weights: &[f64]) -> usize {
        self.choose_cdf(addr, &cdf(weights))
    }
}

/// Normalized cumulative sums; entries from the last positive weight on are
/// pinned to 1.
pub fn cdf(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0 && total.is_finite(), "choose needs a positive total weight");
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc / total
        })
        .collect();
    if let Some(last) = weights.iter().rposition(|w| *w > 0.0) {
        for c in out[last..].iter_mut() {
            *c = 1.0;
        }
    }
    out
}

#[inline]
fn locate(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

/// Inverse-CDF choice with a given uniform.
pub fn pick(u: f64, weights: &[f64]) -> usize {
    locate(&cdf(weights), u)
}

/// Draw backed by the random field at a block's base vertex and time.
pub struct FieldDraw<'a> {
    field: &'a RandomField,
    vertex: Vertex,
    time: u64,
}

impl<'a> FieldDraw<'a> {
    pub fn new(field: &'a RandomField, vertex: Vertex, time: u64) -> Self {
        FieldDraw {
            field,
            vertex,
            time,
        }
    }
}

impl Draw for FieldDraw<'_> {
    fn choose_cdf(&self, addr: Addr, cdf: &[f64]) -> usize {
        let u = self
            .field
            .uniform(&self.vertex, self.time, STAGE_COUPLING + addr.stage, addr.index);
        locate(cdf, u)
    }
}

/// Draw with every stage shifted, for nesting couplings.
pub struct ShiftedDraw<'a> {
    inner: &'a dyn Draw,
    by: u32,
}

impl<'a> ShiftedDraw<'a> {
    pub fn new(inner: &'a dyn Draw, by: u32) -> Self {
        ShiftedDraw { inner, by }
    }
}

impl Draw for ShiftedDraw<'_> {
    fn choose_cdf(&self, addr: Addr, cdf: &[f64]) -> usize {
        self.inner.choose_cdf(Addr::new(addr.stage + self.by, addr.index), cdf)
    }
}

/// Draw whose uniforms are only known to lie in intervals. A choice whose
/// bucket boundary falls inside the current interval records a split; the
/// enumerator then refines that interval and evaluates again.
pub struct ExactDraw {
    intervals: RefCell<BTreeMap<Addr, (f64, f64)>>,
    split: RefCell<Option<(Addr, f64)>>,
}

impl ExactDraw {
    fn new(intervals: BTreeMap<Addr, (f64, f64)>) -> Self {
        ExactDraw {
            intervals: RefCell::new(intervals),
            split: RefCell::new(None),
        }
    }

    fn mass(&self) -> f64 {
        self.intervals.borrow().values().map(|(lo, hi)| hi - lo).product()
    }
}

impl Draw for ExactDraw {
    fn choose_cdf(&self, addr: Addr, cdf: &[f64]) -> usize {
        let (lo, hi) = *self
            .intervals
            .borrow_mut()
            .entry(addr)
            .or_insert((0.0, 1.0));
        let i = locate(cdf, lo);
        if cdf[i] < hi {
            let mut split = self.split.borrow_mut();
            if split.is_none() {
                *split = Some((addr, cdf[i]));
            }
        }
        i
    }
}

/// Enumerate the law of `eval` over all draws. Each returned atom carries
/// its exact probability; atoms are listed in a deterministic order.
pub fn exact_joint<R, F>(mut eval: F, max_atoms: usize) -> Result<Vec<(f64, R)>>
where
    F: FnMut(&dyn Draw) -> Result<R>,
{
    let mut out = Vec::new();
    let mut stack = vec![BTreeMap::new()];
    while let Some(iv) = stack.pop() {
        let draw = ExactDraw::new(iv);
        let value = eval(&draw)?;
        let split = draw.split.borrow_mut().take();
        match split {
            Some((addr, c)) => {
                let iv = draw.intervals.into_inner();
                let (lo, hi) = iv[&addr];
                let mut right = iv.clone();
                right.insert(addr, (c, hi));
                let mut left = iv;
                left.insert(addr, (lo, c));
                stack.push(right);
                stack.push(left);
            }
            None => {
                let p = draw.mass();
                if p > 0.0 {
                    out.push((p, value));
                }
                if out.len() > max_atoms {
                    return Err(Error::Capacity {
                        what: "exact joint enumeration".into(),
                        needed: out.len() as u128,
                        limit: max_atoms as u128,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Exact-joint mode is offered when |Ω_∂V| x |support| is at most this.
pub const EXACT_JOINT_THRESHOLD: u128 = 1 << 20;

/// A coupling of the conditional laws on `V` over the feasible boundary
/// conditions on `∂V`.
pub trait GrandCoupling: Send + Sync {
    fn id(&self) -> String;

    fn region(&self) -> &Region;

    /// The region whose values form a boundary condition.
    fn boundary(&self) -> &Region;

    /// Enumerated boundary conditions, when the family was tabulated.
    fn members(&self) -> Option<&[Vec<Symbol>]>;

    /// Whether `tau` is a boundary condition the coupling can evaluate.
    fn admits(&self, tau: &[Symbol]) -> bool;

    /// Configuration on `V` (lexicographic order) for boundary `tau`.
    fn sample(&self, tau: &[Symbol], draw: &dyn Draw) -> Result<Vec<Symbol>>;

    fn sample_member(&self, t: usize, draw: &dyn Draw) -> Vec<Symbol> {
        let tau = &self.members().expect("tabulated family")[t];
        self.sample(tau, draw).expect("member is admissible")
    }

    /// Values this draw gives every boundary condition alike, per site of
    /// `V` (lexicographic); `None` when the coupling cannot tell.
    fn common_values(&self, _draw: &dyn Draw) -> Option<Vec<Option<Symbol>>> {
        None
    }

    /// True when the output never depends on the boundary condition.
    fn tau_independent(&self) -> bool {
        false
    }

    /// |Ω_∂V| x largest support, when known.
    fn joint_size(&self) -> Option<u128> {
        None
    }
}
