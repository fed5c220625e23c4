//! Nearest-neighbour specifications.
//!
//! Every built-in model is expressed in one generic form: a positive weight
//! per symbol, a symmetric non-negative weight per ordered symbol pair (zero
//! marks a forbidden pair), and the dimension of the lattice. The induced
//! conditional law on a finite region `V` with boundary condition `tau` is
//! proportional to the product of vertex weights over `V` and edge weights
//! over all edges meeting `V`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{Region, Vertex};

/// Index of a symbol in the alphabet.
pub type Symbol = u8;

/// Maximum alphabet size (symbol sets are 64-bit masks).
pub const MAX_ALPHABET: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    labels: Vec<String>,
}

impl Alphabet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(invalid("alphabet", "needs at least two symbols"));
        }
        if labels.len() > MAX_ALPHABET {
            return Err(invalid(
                "alphabet",
                format!("at most {MAX_ALPHABET} symbols supported"),
            ));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(invalid("alphabet", format!("duplicate symbol `{l}`")));
            }
        }
        Ok(Alphabet { labels })
    }

    pub fn numbered<I: IntoIterator<Item = i64>>(values: I) -> Result<Self> {
        Alphabet::new(values.into_iter().map(|v| v.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, s: Symbol) -> &str {
        &self.labels[s as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Option<Symbol> {
        self.labels.iter().position(|l| l == label).map(|i| i as Symbol)
    }
}

/// A set of symbols, as a bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SymbolSet(pub u64);

impl SymbolSet {
    pub const EMPTY: SymbolSet = SymbolSet(0);

    #[inline]
    pub fn singleton(s: Symbol) -> Self {
        SymbolSet(1 << s)
    }

    #[inline]
    pub fn full(q: usize) -> Self {
        if q == 64 {
            SymbolSet(u64::MAX)
        } else {
            SymbolSet((1u64 << q) - 1)
        }
    }

    #[inline]
    pub fn insert(&mut self, s: Symbol) {
        self.0 |= 1 << s;
    }

    #[inline]
    pub fn contains(&self, s: Symbol) -> bool {
        self.0 >> s & 1 == 1
    }

    #[inline]
    pub fn len(&self) -> u32 {
        self.0.count_ones()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn is_singleton(&self) -> bool {
        self.0 != 0 && self.0 & (self.0 - 1) == 0
    }

    /// The unique element of a singleton.
    #[inline]
    pub fn single(&self) -> Option<Symbol> {
        self.is_singleton().then(|| self.0.trailing_zeros() as Symbol)
    }

    #[inline]
    pub fn union(self, other: SymbolSet) -> SymbolSet {
        SymbolSet(self.0 | other.0)
    }

    pub fn is_subset_of(&self, other: &SymbolSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Symbol> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let s = bits.trailing_zeros();
                bits &= bits - 1;
                Some(s as Symbol)
            }
        })
    }
}

impl fmt::Debug for SymbolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// A nearest-neighbour specification on Z^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spec {
    name: String,
    alphabet: Alphabet,
    dim: usize,
    vertex_weight: Vec<f64>,
    /// Row-major q x q table; 0 marks a forbidden pair.
    edge_weight: Vec<f64>,
}

impl Spec {
    /// Build and validate a generic specification.
    pub fn new(
        name: impl Into<String>,
        alphabet: Alphabet,
        dim: usize,
        vertex_weight: Vec<f64>,
        edge_weight: Vec<f64>,
    ) -> Result<Self> {
        let q = alphabet.len();
        if !(1..=crate::lattice::MAX_DIM).contains(&dim) {
            return Err(invalid("d", format!("must be in 1..={}", crate::lattice::MAX_DIM)));
        }
        if vertex_weight.len() != q {
            return Err(invalid("vertex_weights", format!("expected {q} entries")));
        }
        if edge_weight.len() != q * q {
            return Err(invalid("edge_weights", format!("expected {q}x{q} table")));
        }
        if let Some(w) = vertex_weight.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(invalid("vertex_weights", format!("weight {w} is not positive")));
        }
        for a in 0..q {
            for b in 0..q {
                let w = edge_weight[a * q + b];
                if !(w.is_finite() && w >= 0.0) {
                    return Err(invalid("edge_weights", format!("weight {w} is invalid")));
                }
                if w != edge_weight[b * q + a] {
                    return Err(invalid("edge_weights", "table must be symmetric"));
                }
            }
            if (0..q).all(|b| edge_weight[a * q + b] == 0.0) {
                return Err(invalid(
                    "edge_weights",
                    format!("symbol `{}` has no allowed partner", alphabet.label(a as Symbol)),
                ));
            }
        }
        Ok(Spec {
            name: name.into(),
            alphabet,
            dim,
            vertex_weight,
            edge_weight,
        })
    }

    pub fn potts(q: usize, beta: f64, dim: usize) -> Result<Self> {
        if q < 2 {
            return Err(invalid("q", "Potts needs q >= 2"));
        }
        if !beta.is_finite() {
            return Err(invalid("beta", "must be finite; use the coloring model for beta = -inf"));
        }
        let alphabet = Alphabet::numbered(1..=q as i64)?;
        let agree = beta.exp();
        let edge = (0..q * q)
            .map(|k| if k / q == k % q { agree } else { 1.0 })
            .collect();
        Spec::new(format!("potts(q={q},beta={beta})"), alphabet, dim, vec![1.0; q], edge)
    }

    pub fn ising(beta: f64, dim: usize) -> Result<Self> {
        Spec::potts(2, beta, dim)
    }

    pub fn coloring(q: usize, dim: usize) -> Result<Self> {
        if q < 3 {
            return Err(invalid("q", "proper colorings need q >= 3"));
        }
        let alphabet = Alphabet::numbered(1..=q as i64)?;
        let edge = (0..q * q)
            .map(|k| if k / q == k % q { 0.0 } else { 1.0 })
            .collect();
        Spec::new(format!("coloring(q={q})"), alphabet, dim, vec![1.0; q], edge)
    }

    pub fn hardcore(lambda: f64, dim: usize) -> Result<Self> {
        check_activity(lambda)?;
        let alphabet = Alphabet::numbered(0..=1)?;
        Spec::new(
            format!("hardcore(lambda={lambda})"),
            alphabet,
            dim,
            vec![1.0, lambda],
            vec![1.0, 1.0, 1.0, 0.0],
        )
    }

    /// Widom-Rowlinson with `q` particle types: symbols 0..=q, adjacent
    /// non-zero symbols must agree.
    pub fn widom_rowlinson(q: usize, lambda: f64, dim: usize) -> Result<Self> {
        if q < 2 {
            return Err(invalid("q", "Widom-Rowlinson needs q >= 2"));
        }
        check_activity(lambda)?;
        let n = q + 1;
        let alphabet = Alphabet::numbered(0..=q as i64)?;
        let vertex = (0..n).map(|s| if s == 0 { 1.0 } else { lambda }).collect();
        let edge = (0..n * n)
            .map(|k| {
                let (a, b) = (k / n, k % n);
                if a == 0 || b == 0 || a == b {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Spec::new(format!("widom_rowlinson(q={q},lambda={lambda})"), alphabet, dim, vertex, edge)
    }

    /// Beach model on {-2,-1,1,2}: adjacent values must satisfy x*y >= -1,
    /// weight lambda^|x| per site.
    pub fn beach(lambda: f64, dim: usize) -> Result<Self> {
        check_activity(lambda)?;
        let values = [-2i64, -1, 1, 2];
        let alphabet = Alphabet::numbered(values)?;
        let vertex = values.iter().map(|x| lambda.powi(x.abs() as i32)).collect();
        let edge = values
            .iter()
            .flat_map(|a| values.iter().map(move |b| if a * b >= -1 { 1.0 } else { 0.0 }))
            .collect();
        Spec::new(format!("beach(lambda={lambda})"), alphabet, dim, vertex, edge)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    #[inline]
    pub fn q(&self) -> usize {
        self.alphabet.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn vertex_weight(&self, s: Symbol) -> f64 {
        self.vertex_weight[s as usize]
    }

    #[inline]
    pub fn edge_weight(&self, a: Symbol, b: Symbol) -> f64 {
        self.edge_weight[a as usize * self.q() + b as usize]
    }

    #[inline]
    pub fn allowed(&self, a: Symbol, b: Symbol) -> bool {
        self.edge_weight(a, b) > 0.0
    }

    pub fn vertex_weights(&self) -> &[f64] {
        &self.vertex_weight
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weight
    }

    pub fn with_dim(&self, dim: usize) -> Result<Spec> {
        Spec::new(
            self.name.clone(),
            self.alphabet.clone(),
            dim,
            self.vertex_weight.clone(),
            self.edge_weight.clone(),
        )
    }

    /// Unordered allowed pairs (a <= b).
    pub fn feasible_pairs(&self) -> Vec<(Symbol, Symbol)> {
        let q = self.q() as Symbol;
        let mut out = Vec::new();
        for a in 0..q {
            for b in a..q {
                if self.allowed(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Symbols that can appear at a vertex of some feasible configuration.
    pub fn feasible_symbols(&self) -> SymbolSet {
        let q = self.q() as Symbol;
        let mut set = SymbolSet::EMPTY;
        for a in 0..q {
            if (0..q).any(|b| self.allowed(a, b)) {
                set.insert(a);
            }
        }
        set
    }

    /// True when every pair has the same positive weight, so conditional
    /// laws do not depend on the boundary condition.
    pub fn is_boundary_independent(&self) -> bool {
        let w0 = self.edge_weight[0];
        w0 > 0.0 && self.edge_weight.iter().all(|&w| w == w0)
    }

    pub fn has_hard_constraints(&self) -> bool {
        self.edge_weight.iter().any(|&w| w == 0.0)
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> {
        0..self.q() as Symbol
    }
}

/// An assignment of symbols to every vertex of a boundary region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundaryCondition {
    region: Region,
    values: Vec<Symbol>,
}

impl BoundaryCondition {
    pub fn new(region: Region, values: Vec<Symbol>) -> Result<Self> {
        if region.len() != values.len() {
            return Err(Error::RegionMismatch(format!(
                "boundary has {} vertices but {} values were given",
                region.len(),
                values.len()
            )));
        }
        Ok(BoundaryCondition { region, values })
    }

    pub fn constant(region: Region, s: Symbol) -> Self {
        let values = vec![s; region.len()];
        BoundaryCondition { region, values }
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn values(&self) -> &[Symbol] {
        &self.values
    }

    pub fn get(&self, v: &Vertex) -> Option<Symbol> {
        self.region.index_of(v).map(|i| self.values[i])
    }

    /// Vertices where `self` and `other` disagree.
    pub fn disagreement(&self, other: &BoundaryCondition) -> Result<Region> {
        if self.region != other.region {
            return Err(Error::RegionMismatch("boundary regions differ".into()));
        }
        let verts = self
            .region
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .filter(|(_, (a, b))| a != b)
            .map(|(v, _)| *v)
            .collect();
        Ok(Region::new(self.region.dim(), verts))
    }

    pub fn translate(&self, by: &Vertex) -> BoundaryCondition {
        BoundaryCondition {
            region: self.region.translate(by),
            values: self.values.clone(),
        }
    }
}

fn check_activity(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid("lambda", "must be a positive finite number"));
    }
    Ok(())
}

/// Model parameters keyed by name.
pub type Params = BTreeMap<String, String>;

fn param_f64(params: &Params, name: &str) -> Result<f64> {
    let raw = params
        .get(name)
        .ok_or_else(|| invalid(name, "missing"))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| invalid(name, format!("`{raw}` is not a number")))
}

fn param_usize(params: &Params, name: &str) -> Result<usize> {
    let raw = params
        .get(name)
        .ok_or_else(|| invalid(name, "missing"))?;
    raw.trim()
        .parse::<usize>()
        .map_err(|_| invalid(name, format!("`{raw}` is not a non-negative integer")))
}

fn param_list_f64(raw: &str, name: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(name, format!("`{t}` is not a number")))
        })
        .collect()
}

/// Build a named model. Recognised names: potts, ising, coloring, hardcore,
/// widom_rowlinson, beach, custom.
///
/// Custom models take `alphabet` (comma list), `vertex_weights` (comma list)
/// and `edge_weights` (rows separated by `;`, entries by `,`; 0 forbids).
pub fn make_model(name: &str, params: &Params, d: usize) -> Result<Spec> {
    match name {
        "potts" => Spec::potts(param_usize(params, "q")?, param_f64(params, "beta")?, d),
        "ising" => Spec::ising(param_f64(params, "beta")?, d),
        "coloring" => Spec::coloring(param_usize(params, "q")?, d),
        "hardcore" => Spec::hardcore(param_f64(params, "lambda")?, d),
        "widom_rowlinson" => Spec::widom_rowlinson(
            param_usize(params, "q")?,
            param_f64(params, "lambda")?,
            d,
        ),
        "beach" => Spec::beach(param_f64(params, "lambda")?, d),
        "custom" => {
            let alphabet = Alphabet::new(
                params
                    .get("alphabet")
                    .ok_or_else(|| invalid("alphabet", "missing"))?
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect(),
            )?;
            let vertex = param_list_f64(
                params
                    .get("vertex_weights")
                    .ok_or_else(|| invalid("vertex_weights", "missing"))?,
                "vertex_weights",
            )?;
            let rows = params
                .get("edge_weights")
                .ok_or_else(|| invalid("edge_weights", "missing"))?;
            let mut edge = Vec::new();
            for row in rows.split(';') {
                edge.extend(param_list_f64(row, "edge_weights")?);
            }
            let label = params.get("label").cloned().unwrap_or_else(|| "custom".into());
            Spec::new(label, alphabet, d, vertex, edge)
        }
        other => Err(Error::InvalidParameter {
            name: "model".into(),
            reason: format!("unknown model `{other}`"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, &str)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn feasible_pairs_of_builtins() {
        let c = Spec::coloring(3, 2).unwrap();
        assert_eq!(c.feasible_pairs(), vec![(0, 1), (0, 2), (1, 2)]);
        let h = Spec::hardcore(1.0, 2).unwrap();
        assert_eq!(h.feasible_pairs(), vec![(0, 0), (0, 1)]);
        let b = Spec::beach(1.0, 2).unwrap();
        let vals = [-2i64, -1, 1, 2];
        for (a, c) in b.feasible_pairs() {
            assert!(vals[a as usize] * vals[c as usize] >= -1);
        }
        assert_eq!(b.feasible_pairs().len(), 7);
    }

    #[test]
    fn parameter_errors_name_the_parameter() {
        let err = make_model("potts", &params(&[("q", "1"), ("beta", "0")]), 2).unwrap_err();
        assert!(err.to_string().contains("`q`"));
        let err = make_model("hardcore", &params(&[("lambda", "-1")]), 2).unwrap_err();
        assert!(err.to_string().contains("`lambda`"));
        let err = make_model("coloring", &params(&[("q", "2")]), 2).unwrap_err();
        assert!(err.to_string().contains("`q`"));
        assert!(make_model("nope", &Params::new(), 2).is_err());
    }

    #[test]
    fn custom_model_from_params() {
        let p = params(&[
            ("alphabet", "a,b"),
            ("vertex_weights", "1,2"),
            ("edge_weights", "1,1;1,0"),
        ]);
        let s = make_model("custom", &p, 2).unwrap();
        assert_eq!(s.q(), 2);
        assert!(!s.allowed(1, 1));
        let asym = params(&[
            ("alphabet", "a,b"),
            ("vertex_weights", "1,2"),
            ("edge_weights", "1,0;1,1"),
        ]);
        assert!(make_model("custom", &asym, 2).is_err());
        let isolated = params(&[
            ("alphabet", "a,b"),
            ("vertex_weights", "1,1"),
            ("edge_weights", "1,0;0,0"),
        ]);
        assert!(make_model("custom", &isolated, 2).is_err());
    }

    #[test]
    fn boundary_independence() {
        assert!(Spec::potts(3, 0.0, 2).unwrap().is_boundary_independent());
        assert!(!Spec::potts(3, 0.1, 2).unwrap().is_boundary_independent());
        assert!(!Spec::hardcore(0.1, 2).unwrap().is_boundary_independent());
    }

    #[test]
    fn symbol_sets() {
        let mut s = SymbolSet::EMPTY;
        s.insert(3);
        assert_eq!(s.single(), Some(3));
        s.insert(0);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3]);
        assert!(!s.is_singleton());
        assert_eq!(SymbolSet::full(64).len(), 64);
    }
}
