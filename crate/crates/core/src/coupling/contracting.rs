//! Sequential coupling of `(P^tau_{Λ_n})` in two dimensions: first the core
//! `U = Λ_{n-r}`, then radial faces of the annulus one at a time, then the
//! remaining pockets.

use super::{Draw, GrandCoupling, ProductCoupling};
use crate::error::{invalid, Error, Result};
use crate::lattice::{ball, Region, Vertex};
use crate::model::{Spec, Symbol};

const STAGE_CORE: u32 = 0;
const STAGE_FACES: u32 = 1;

/// Geometry of the staged coupling on `Λ_n`.
#[derive(Clone, Debug)]
pub struct FacePlan {
    pub n: u32,
    pub r: u32,
    pub s: u32,
    pub core: Region,
    /// Faces `L_1, L_2, ...`: radial segments of length `r` crossing the
    /// annulus, pairwise at distance at least `s`.
    pub faces: Vec<Region>,
    /// `T_i`: sites of `∂V_{i-1}` within distance `< s` of `L_i`, where
    /// `V_{i-1}` is `Λ_n` minus the core and the earlier faces.
    pub keys: Vec<Region>,
    /// Connected components left after removing the core and all faces.
    pub pockets: Vec<Region>,
}

impl FacePlan {
    pub fn new(n: u32, r: u32, s: u32) -> Result<FacePlan> {
        if !(1 <= r && r < s && s <= 4 * r && 4 * r <= n) {
            return Err(invalid("r, s", format!("need 1 <= r < s <= 4r <= n, got n={n} r={r} s={s}")));
        }
        let (n, r, s) = (n as i32, r as i32, s as i32);
        let core = ball((n - r) as u32, 2);
        let lo = -(n - r);
        let hi = n - r;
        let mut faces = Vec::new();
        // Side strips, one per direction; positions along the strip run
        // from lo+s to hi-s so that no face sits at a corner.
        for (axis, sign) in [(0usize, 1i32), (0, -1), (1, 1), (1, -1)] {
            let mut y = lo + s;
            while y <= hi - s {
                let seg: Vec<Vertex> = (n - r + 1..=n)
                    .map(|x| {
                        let mut c = [0i32; 2];
                        c[axis] = sign * x;
                        c[1 - axis] = y;
                        Vertex::new(&c)
                    })
                    .collect();
                faces.push(Region::new(2, seg));
                y += s;
            }
        }
        let v = ball(n as u32, 2);
        let mut inside = v.difference(&core);
        let mut keys = Vec::with_capacity(faces.len());
        for f in &faces {
            let bd = inside.boundary();
            let key: Vec<Vertex> = bd.iter().filter(|x| f.dist_to(x) < s as u32).copied().collect();
            keys.push(Region::new(2, key));
            inside = inside.difference(f);
        }
        let pockets = components(&inside);
        Ok(FacePlan {
            n: n as u32,
            r: r as u32,
            s: s as u32,
            core,
            faces,
            keys,
            pockets,
        })
    }

    /// Smallest distance between two distinct faces.
    pub fn min_face_gap(&self) -> Option<u32> {
        let mut best: Option<u32> = None;
        for (i, a) in self.faces.iter().enumerate() {
            for b in &self.faces[i + 1..] {
                let d = crate::lattice::dist(a, b);
                best = Some(best.map_or(d, |x| x.min(d)));
            }
        }
        best
    }
}

fn components(r: &Region) -> Vec<Region> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in r.iter() {
        if !seen.insert(*s) {
            continue;
        }
        let mut comp = vec![*s];
        let mut stack = vec![*s];
        while let Some(x) = stack.pop() {
            for y in x.neighbors() {
                if r.contains(&y) && seen.insert(y) {
                    comp.push(y);
                    stack.push(y);
                }
            }
        }
        out.push(Region::new(r.dim(), comp));
    }
    out
}

/// Staged grand coupling on `Λ_n` for `d = 2`.
///
/// Each stage of the construction couples the conditional laws of a
/// family indexed by the boundary values it can see. Those families are
/// tabulated exactly, which is possible only when the laws do not depend on
/// the boundary at all; other specifications fail with a capacity error.
pub struct ContractingCoupling2d {
    plan: FacePlan,
    region: Region,
    boundary: Region,
    weights: Vec<f64>,
    /// Position in `region` of every site, stage by stage.
    order: Vec<(u32, Vec<usize>)>,
    id: String,
}

impl ContractingCoupling2d {
    pub fn new(spec: &Spec, n: u32, r: u32, s: u32) -> Result<Self> {
        if spec.dim() != 2 {
            return Err(invalid("dim", "the staged coupling is built for d = 2"));
        }
        let plan = FacePlan::new(n, r, s)?;
        let region = ball(n, 2);
        let boundary = region.boundary();
        if !spec.is_boundary_independent() {
            let needed = (spec.q() as u128)
                .checked_pow(boundary.len() as u32)
                .unwrap_or(u128::MAX);
            return Err(Error::Capacity {
                what: "boundary classes of the staged coupling".into(),
                needed,
                limit: crate::exactgibbs::Limits::default().boundary as u128,
            });
        }
        let pos = |x: &Region| x.iter().map(|v| region.index_of(v).unwrap()).collect::<Vec<_>>();
        let mut order = vec![(STAGE_CORE, pos(&plan.core))];
        for (i, f) in plan.faces.iter().enumerate() {
            order.push((STAGE_FACES + i as u32, pos(f)));
        }
        let base = STAGE_FACES + plan.faces.len() as u32;
        for (c, p) in plan.pockets.iter().enumerate() {
            order.push((base + c as u32, pos(p)));
        }
        Ok(ContractingCoupling2d {
            id: format!("contracting2d[{}|n={n}|r={r}|s={s}]", spec.name()),
            plan,
            region,
            boundary,
            weights: spec.vertex_weights().to_vec(),
            order,
        })
    }

    pub fn plan(&self) -> &FacePlan {
        &self.plan
    }
}

impl GrandCoupling for ContractingCoupling2d {
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
        let mut out = vec![0 as Symbol; self.region.len()];
        for (stage, sites) in &self.order {
            for (k, p) in sites.iter().enumerate() {
                out[*p] = ProductCoupling::site(&self.weights, *stage, k, draw);
            }
        }
        Ok(out)
    }

    fn tau_independent(&self) -> bool {
        true
    }
}
