//! Geometry of Z^d: vertices, finite regions, boxes, boundaries, distances
//! and the finite tori used as a validation substrate.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 4;

/// A vertex of Z^d, stored as a fixed-width coordinate array.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vertex {
    coords: [i32; MAX_DIM],
    dim: u8,
}

impl Vertex {
    pub fn new(coords: &[i32]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "dimension must be in 1..={MAX_DIM}"
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Vertex {
            coords: c,
            dim: coords.len() as u8,
        }
    }

    pub fn origin(dim: usize) -> Self {
        Vertex::new(&vec![0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.coords[..self.dim as usize]
    }

    #[inline]
    pub fn coord(&self, i: usize) -> i32 {
        self.coords[i]
    }

    /// The l1 norm |v|.
    pub fn norm(&self) -> u32 {
        self.coords().iter().map(|c| c.unsigned_abs()).sum()
    }

    pub fn l1(&self, other: &Vertex) -> u32 {
        debug_assert_eq!(self.dim, other.dim);
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| a.abs_diff(*b))
            .sum()
    }

    #[inline]
    pub fn add(&self, other: &Vertex) -> Vertex {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] += other.coords[i];
        }
        out
    }

    #[inline]
    pub fn sub(&self, other: &Vertex) -> Vertex {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] -= other.coords[i];
        }
        out
    }

    pub fn neg(&self) -> Vertex {
        let mut out = *self;
        for i in 0..self.dim() {
            out.coords[i] = -out.coords[i];
        }
        out
    }

    /// Shift along one axis.
    #[inline]
    pub fn step(&self, axis: usize, delta: i32) -> Vertex {
        let mut out = *self;
        out.coords[axis] += delta;
        out
    }

    /// The 2d nearest neighbours, in a fixed order.
    pub fn neighbors(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.dim()).flat_map(move |axis| [self.step(axis, -1), self.step(axis, 1)])
    }
}

impl Ord for Vertex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dim
            .cmp(&other.dim)
            .then_with(|| self.coords().cmp(other.coords()))
    }
}

impl PartialOrd for Vertex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl Serialize for Vertex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vertex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i32>::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom("bad vertex dimension"));
        }
        Ok(Vertex::new(&v))
    }
}

/// A finite subset of Z^d, kept in lexicographic order without duplicates.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    dim: usize,
    vertices: Vec<Vertex>,
}

impl Region {
    pub fn new(dim: usize, mut vertices: Vec<Vertex>) -> Self {
        assert!((1..=MAX_DIM).contains(&dim));
        assert!(vertices.iter().all(|v| v.dim() == dim), "mixed dimensions");
        vertices.sort_unstable();
        vertices.dedup();
        Region { dim, vertices }
    }

    pub fn empty(dim: usize) -> Self {
        Region::new(dim, Vec::new())
    }

    pub fn singleton(v: Vertex) -> Self {
        Region::new(v.dim(), vec![v])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    #[inline]
    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vertex> {
        self.vertices.iter()
    }

    #[inline]
    pub fn index_of(&self, v: &Vertex) -> Option<usize> {
        self.vertices.binary_search(v).ok()
    }

    #[inline]
    pub fn contains(&self, v: &Vertex) -> bool {
        self.index_of(v).is_some()
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.vertices.iter().all(|v| other.contains(v))
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.vertices.iter().any(|v| other.contains(v))
    }

    pub fn union(&self, other: &Region) -> Region {
        let mut v = self.vertices.clone();
        v.extend_from_slice(&other.vertices);
        Region::new(self.dim, v)
    }

    pub fn difference(&self, other: &Region) -> Region {
        Region::new(
            self.dim,
            self.vertices
                .iter()
                .filter(|v| !other.contains(v))
                .copied()
                .collect(),
        )
    }

    pub fn translate(&self, by: &Vertex) -> Region {
        Region::new(self.dim, self.vertices.iter().map(|v| v.add(by)).collect())
    }

    /// Vertices at graph distance exactly 1 from the region.
    pub fn boundary(&self) -> Region {
        let mut out = Vec::new();
        for v in &self.vertices {
            for u in v.neighbors() {
                if !self.contains(&u) {
                    out.push(u);
                }
            }
        }
        Region::new(self.dim, out)
    }

    /// Maximum pairwise l1 distance (0 for regions with fewer than two points).
    pub fn diameter(&self) -> u32 {
        let mut best = 0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max(a.l1(b));
            }
        }
        best
    }

    /// Minimum l1 distance from `v` to the region.
    pub fn dist_to(&self, v: &Vertex) -> u32 {
        assert!(!self.is_empty(), "distance to an empty region");
        self.vertices.iter().map(|u| u.l1(v)).min().unwrap()
    }

    /// Text form: one vertex per line, comma-separated integers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let parts: Vec<String> = v.coords().iter().map(|c| c.to_string()).collect();
            s.push_str(&parts.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Region> {
        let mut vertices = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let coords = line
                .split(',')
                .map(|t| i32::from_str(t.trim()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if coords.is_empty() || coords.len() > MAX_DIM {
                return Err(Error::Parse(format!("line {}: bad dimension", lineno + 1)));
            }
            match dim {
                None => dim = Some(coords.len()),
                Some(d) if d != coords.len() => {
                    return Err(Error::Parse(format!(
                        "line {}: expected {d} coordinates",
                        lineno + 1
                    )))
                }
                _ => {}
            }
            vertices.push(Vertex::new(&coords));
        }
        let dim = dim.ok_or_else(|| Error::Parse("empty region".into()))?;
        Ok(Region::new(dim, vertices))
    }
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.vertices.iter()).finish()
    }
}

impl<'a> IntoIterator for &'a Region {
    type Item = &'a Vertex;
    type IntoIter = std::slice::Iter<'a, Vertex>;
    fn into_iter(self) -> Self::IntoIter {
        self.vertices.iter()
    }
}

/// The box [-r, r]^d.
pub fn ball(r: u32, d: usize) -> Region {
    boxed(&vec![-(r as i32); d], &vec![r as i32; d])
}

/// The box with the given inclusive corner coordinates.
pub fn boxed(lo: &[i32], hi: &[i32]) -> Region {
    let d = lo.len();
    assert_eq!(d, hi.len());
    let mut out = Vec::new();
    let mut cur = lo.to_vec();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return Region::empty(d);
    }
    loop {
        out.push(Vertex::new(&cur));
        let mut axis = d;
        loop {
            if axis == 0 {
                return Region::new(d, out);
            }
            axis -= 1;
            if cur[axis] < hi[axis] {
                cur[axis] += 1;
                for (k, c) in cur.iter_mut().enumerate().skip(axis + 1) {
                    *c = lo[k];
                }
                break;
            }
        }
    }
}

/// The l1 ball {v : |v| <= r}.
pub fn l1_ball(r: u32, d: usize) -> Region {
    let b = ball(r, d);
    Region::new(d, b.iter().filter(|v| v.norm() <= r).copied().collect())
}

/// Number of v in Z^d with |v| = r.
pub fn sphere_count(r: u32, d: usize) -> u64 {
    if r == 0 {
        return 1;
    }
    // sum over the number k of non-zero coordinates
    (1..=d.min(r as usize))
        .map(|k| (1u64 << k) * binom(d as u64, k as u64) * binom(r as u64 - 1, k as u64 - 1))
        .sum()
}

fn binom(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Minimum l1 distance between two non-empty regions.
pub fn dist(a: &Region, b: &Region) -> u32 {
    assert!(!a.is_empty() && !b.is_empty(), "distance between empty regions");
    a.iter().map(|v| b.dist_to(v)).min().unwrap()
}

/// Finite torus (Z/L_1) x ... x (Z/L_d), coordinates in 0..L_i.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Torus {
    sides: Vec<u32>,
}

impl Torus {
    pub fn new(sides: &[u32]) -> Result<Self> {
        if sides.is_empty() || sides.len() > MAX_DIM {
            return Err(Error::InvalidParameter {
                name: "torus".into(),
                reason: format!("dimension must be in 1..={MAX_DIM}"),
            });
        }
        if let Some(s) = sides.iter().find(|&&s| s < 3) {
            return Err(Error::InvalidParameter {
                name: "torus".into(),
                reason: format!("side length {s} < 3"),
            });
        }
        Ok(Torus {
            sides: sides.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    pub fn sides(&self) -> &[u32] {
        &self.sides
    }

    pub fn volume(&self) -> usize {
        self.sides.iter().map(|&s| s as usize).product()
    }

    /// Reduce coordinates into the fundamental domain.
    pub fn wrap(&self, v: &Vertex) -> Vertex {
        let c: Vec<i32> = v
            .coords()
            .iter()
            .zip(&self.sides)
            .map(|(&x, &l)| x.rem_euclid(l as i32))
            .collect();
        Vertex::new(&c)
    }

    /// All vertices of the torus in lexicographic order.
    pub fn vertices(&self) -> Region {
        let hi: Vec<i32> = self.sides.iter().map(|&s| s as i32 - 1).collect();
        boxed(&vec![0; self.dim()], &hi)
    }

    pub fn l1(&self, a: &Vertex, b: &Vertex) -> u32 {
        a.coords()
            .iter()
            .zip(b.coords())
            .zip(&self.sides)
            .map(|((&x, &y), &l)| {
                let d = (x - y).rem_euclid(l as i32) as u32;
                d.min(l - d)
            })
            .sum()
    }

    /// Each undirected edge once, as pairs of vertices.
    pub fn edges(&self) -> Vec<(Vertex, Vertex)> {
        let mut out = Vec::new();
        for v in self.vertices().iter() {
            for axis in 0..self.dim() {
                out.push((*v, self.wrap(&v.step(axis, 1))));
            }
        }
        out
    }
}

/// The graph on which dynamics run: all of Z^d, or a torus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Substrate {
    Lattice { dim: usize },
    Torus(Torus),
}

impl Substrate {
    pub fn dim(&self) -> usize {
        match self {
            Substrate::Lattice { dim } => *dim,
            Substrate::Torus(t) => t.dim(),
        }
    }

    #[inline]
    pub fn canonical(&self, v: &Vertex) -> Vertex {
        match self {
            Substrate::Lattice { .. } => *v,
            Substrate::Torus(t) => t.wrap(v),
        }
    }

    pub fn l1(&self, a: &Vertex, b: &Vertex) -> u32 {
        match self {
            Substrate::Lattice { .. } => a.l1(b),
            Substrate::Torus(t) => t.l1(a, b),
        }
    }

    /// Canonical images of `region` translated by `by`.
    pub fn place(&self, region: &Region, by: &Vertex) -> Vec<Vertex> {
        region.iter().map(|w| self.canonical(&w.add(by))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(c: &[i32]) -> Vertex {
        Vertex::new(c)
    }

    #[test]
    fn ball_sizes() {
        assert_eq!(ball(0, 2).vertices(), &[v(&[0, 0])]);
        assert_eq!(ball(1, 2).len(), 9);
        assert_eq!(ball(2, 3).len(), 125);
        for d in 1..=3 {
            for r in 0..=6u32 {
                assert_eq!(ball(r, d).len(), (2 * r as usize + 1).pow(d as u32));
            }
        }
    }

    #[test]
    fn boundary_counts() {
        assert_eq!(ball(0, 2).boundary().len(), 4);
        assert_eq!(ball(1, 2).boundary().len(), 12);
        assert_eq!(ball(0, 3).boundary().len(), 6);
        let b = ball(2, 2);
        assert!(!b.boundary().intersects(&b));
    }

    #[test]
    fn distances() {
        let a = Region::singleton(v(&[0, 0]));
        let b = Region::singleton(v(&[3, 4]));
        assert_eq!(dist(&a, &b), 7);
        let l1 = ball(1, 2);
        assert_eq!(dist(&l1, &l1.boundary()), 1);
        // brute force over both regions
        let b3 = ball(3, 2).boundary();
        let brute = l1
            .iter()
            .flat_map(|x| b3.iter().map(move |y| x.l1(y)))
            .min()
            .unwrap();
        assert_eq!(brute, 3);
        assert_eq!(dist(&l1, &b3), 3);
    }

    #[test]
    fn sphere_counts() {
        assert_eq!(sphere_count(1, 2), 4);
        assert_eq!(sphere_count(0, 3), 1);
        let brute = ball(2, 2).iter().filter(|x| x.norm() == 2).count() as u64;
        assert_eq!(brute, 8);
        assert_eq!(sphere_count(2, 2), 8);
        for d in 1..=3 {
            for r in 1..=6u32 {
                let shell = ball(r, d).iter().filter(|x| x.norm() == r).count() as u64;
                assert_eq!(sphere_count(r, d), shell, "r={r} d={d}");
                assert_eq!(
                    sphere_count(r, d),
                    (l1_ball(r, d).len() - l1_ball(r - 1, d).len()) as u64
                );
            }
        }
    }

    #[test]
    fn translation_equivariance_of_boundary() {
        let r = Region::new(2, vec![v(&[0, 0]), v(&[1, 0]), v(&[1, 1])]);
        let u = v(&[5, -2]);
        assert_eq!(r.translate(&u).boundary(), r.boundary().translate(&u));
    }

    #[test]
    fn text_roundtrip() {
        let r = ball(1, 3);
        assert_eq!(Region::from_text(&r.to_text()).unwrap(), r);
        assert!(Region::from_text("1,2\n3\n").is_err());
    }

    #[test]
    fn torus_wrap() {
        let t = Torus::new(&[3, 4]).unwrap();
        assert_eq!(t.wrap(&v(&[-1, 5])), v(&[2, 1]));
        assert_eq!(t.l1(&v(&[0, 0]), &v(&[2, 3])), 2);
        assert_eq!(t.edges().len(), 24);
        assert!(Torus::new(&[2, 5]).is_err());
    }

    #[test]
    fn diameter_of_box() {
        assert_eq!(ball(1, 2).diameter(), 4);
        assert_eq!(ball(0, 3).diameter(), 0);
    }
}
