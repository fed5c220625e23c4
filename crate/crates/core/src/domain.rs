//! Edge structure of a finite region and its boundary, in a chosen site order.

use std::collections::HashMap;

use crate::lattice::{Region, Torus, Vertex};
use crate::model::{Spec, Symbol};

/// Sites of a finite region listed in enumeration order, together with the
/// edges needed to evaluate weights incrementally along that order.
#[derive(Clone, Debug)]
pub struct Domain {
    sites: Vec<Vertex>,
    index: HashMap<Vertex, usize>,
    boundary: Region,
    /// For site i, the neighbouring sites j < i (one entry per edge).
    back: Vec<Vec<u32>>,
    /// For site i, the neighbouring boundary vertices (indices into `boundary`).
    bnd: Vec<Vec<u32>>,
}

impl Domain {
    /// Region on Z^d in lexicographic order, with boundary `∂V`.
    pub fn lattice(region: &Region) -> Domain {
        Domain::ordered(region.vertices().to_vec(), &region.boundary())
    }

    /// Sites in the given order; `boundary` lists the outside vertices whose
    /// values are supplied by a boundary condition.
    pub fn ordered(sites: Vec<Vertex>, boundary: &Region) -> Domain {
        let index: HashMap<Vertex, usize> =
            sites.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut back = vec![Vec::new(); sites.len()];
        let mut bnd = vec![Vec::new(); sites.len()];
        for (i, v) in sites.iter().enumerate() {
            for u in v.neighbors() {
                if let Some(&j) = index.get(&u) {
                    if j < i {
                        back[i].push(j as u32);
                    }
                } else if let Some(b) = boundary.index_of(&u) {
                    bnd[i].push(b as u32);
                }
            }
        }
        Domain {
            sites,
            index,
            boundary: boundary.clone(),
            back,
            bnd,
        }
    }

    /// All sites of a torus, with wrap-around edges and no boundary.
    pub fn torus(torus: &Torus) -> Domain {
        let sites = torus.vertices().vertices().to_vec();
        let index: HashMap<Vertex, usize> =
            sites.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut back = vec![Vec::new(); sites.len()];
        for (a, b) in torus.edges() {
            let (i, j) = (index[&a], index[&b]);
            let (hi, lo) = if i > j { (i, j) } else { (j, i) };
            back[hi].push(lo as u32);
        }
        let n = sites.len();
        Domain {
            sites,
            index,
            boundary: Region::empty(torus.dim()),
            back,
            bnd: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Vertex] {
        &self.sites
    }

    pub fn site_index(&self, v: &Vertex) -> Option<usize> {
        self.index.get(v).copied()
    }

    pub fn boundary(&self) -> &Region {
        &self.boundary
    }

    #[inline]
    pub fn back_neighbors(&self, i: usize) -> &[u32] {
        &self.back[i]
    }

    #[inline]
    pub fn boundary_neighbors(&self, i: usize) -> &[u32] {
        &self.bnd[i]
    }

    /// Factor contributed by site `i` given the earlier sites and the boundary.
    #[inline]
    pub fn site_factor(&self, spec: &Spec, i: usize, s: Symbol, cfg: &[Symbol], tau: &[Symbol]) -> f64 {
        let mut w = spec.vertex_weight(s);
        for &j in &self.back[i] {
            w *= spec.edge_weight(s, cfg[j as usize]);
        }
        if w > 0.0 {
            for &b in &self.bnd[i] {
                w *= spec.edge_weight(s, tau[b as usize]);
            }
        }
        w
    }

    /// Product of vertex weights and weights of all edges meeting the sites.
    pub fn weight(&self, spec: &Spec, cfg: &[Symbol], tau: &[Symbol]) -> f64 {
        let mut w = 1.0;
        for i in 0..self.len() {
            w *= self.site_factor(spec, i, cfg[i], cfg, tau);
            if w == 0.0 {
                return 0.0;
            }
        }
        w
    }

    /// Weight of the edges between sites and boundary only.
    pub fn boundary_factor(&self, spec: &Spec, cfg: &[Symbol], tau: &[Symbol]) -> f64 {
        let mut w = 1.0;
        for i in 0..self.len() {
            for &b in &self.bnd[i] {
                w *= spec.edge_weight(cfg[i], tau[b as usize]);
            }
        }
        w
    }

    /// Edges (site, boundary index) in site order.
    pub fn boundary_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (i, bs) in self.bnd.iter().enumerate() {
            for &b in bs {
                out.push((i as u32, b));
            }
        }
        out
    }
}
