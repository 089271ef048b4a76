//! Directed-graph operators of the compartment network and the parameter
//! sharing scheme that maps edges and heat sources onto shared parameters.
//!
//! The operators are stored as edge and source lists; dense matrix views
//! are available for small problems and for tests.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::{Compartment, CompartmentMesh, Role};

/// Directed edge `tail -> head`. The edge carries `scale * k[class]` and
/// moves the head temperature towards the tail temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub class: usize,
    pub scale: f64,
}

/// One heat input: column `input` of `P` enters `compartment` with gain
/// `gain_scale * scale * z[class]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub compartment: usize,
    pub class: usize,
    /// Row scale of the source-to-compartment selector.
    pub scale: f64,
    /// Row scale of the parameter-to-source selector.
    pub gain_scale: f64,
}

/// Incidence operators `J`, the head-only matrix and the three selector
/// matrices, kept in sparse edge/source form.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    n: usize,
    n_k: usize,
    n_z: usize,
    edges: Vec<Edge>,
    sources: Vec<Source>,
}

impl GraphOperators {
    pub fn new(n: usize, n_k: usize, n_z: usize, mut edges: Vec<Edge>, sources: Vec<Source>) -> Result<Self> {
        for e in &edges {
            if e.tail >= n || e.head >= n || e.tail == e.head {
                return Err(Error::InvalidArgument(format!("edge {} -> {} is invalid for n = {n}", e.tail, e.head)));
            }
            if e.class >= n_k {
                return Err(Error::InvalidArgument(format!("edge class {} out of range (n_k = {n_k})", e.class)));
            }
            if !(e.scale > 0.0) {
                return Err(Error::InvalidArgument(format!("edge {} -> {} has non-positive scale", e.tail, e.head)));
            }
        }
        for s in &sources {
            if s.compartment >= n || s.class >= n_z || !(s.scale > 0.0) || !(s.gain_scale > 0.0) {
                return Err(Error::InvalidArgument(format!("invalid source {s:?}")));
            }
        }
        edges.sort_by_key(|e| (e.tail, e.head));
        Ok(GraphOperators { n, n_k, n_z, edges, sources })
    }

    /// Operators for a mesh under a sharing scheme. Every symmetric coupling
    /// yields two directed edges, except that no edge ends in the ambient
    /// compartment, so ambient temperature only follows its own history.
    pub fn build(mesh: &CompartmentMesh, scheme: &SharingScheme) -> Result<Self> {
        let ambient = mesh.ambient_index();
        let mut edges = Vec::new();
        for a in mesh.adjacency() {
            let (ci, cj) = (mesh.compartment(a.from), mesh.compartment(a.to));
            let coupling = scheme.edge_class(ci, cj)?;
            let Coupling::Shared(class) = coupling else {
                continue;
            };
            if a.to == ambient {
                continue;
            }
            edges.push(Edge { tail: a.from, head: a.to, class, scale: a.weight });
        }
        let mut sources = Vec::new();
        for c in mesh.compartments().iter().filter(|c| c.has_source) {
            let class = scheme.source_class(c)?;
            sources.push(Source { compartment: c.index, class, scale: 1.0, gain_scale: 1.0 });
        }
        GraphOperators::new(mesh.len(), scheme.n_k(), scheme.n_z(), edges, sources)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn n_p(&self) -> usize {
        self.sources.len()
    }

    pub fn n_theta(&self) -> usize {
        self.n_k + self.n_z
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    /// Dense `n x m` incidence matrix: +1 at the tail, -1 at the head.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n, self.edges.len());
        for (l, e) in self.edges.iter().enumerate() {
            j[(e.tail, l)] = 1.0;
            j[(e.head, l)] = -1.0;
        }
        j
    }

    /// Incidence matrix with the +1 entries replaced by 0.
    pub fn head_incidence(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.edges.len());
        for (l, e) in self.edges.iter().enumerate() {
            h[(e.head, l)] = -1.0;
        }
        h
    }

    /// `m x n_k` map from conductance parameters to edges.
    pub fn edge_selector(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.edges.len(), self.n_k);
        for (l, e) in self.edges.iter().enumerate() {
            c[(l, e.class)] = e.scale;
        }
        c
    }

    /// `n x n_P` map from heat inputs to compartments.
    pub fn source_selector(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n, self.sources.len());
        for (p, s) in self.sources.iter().enumerate() {
            b[(s.compartment, p)] = s.scale;
        }
        b
    }

    /// `n_P x n_z` map from source gains to heat inputs.
    pub fn gain_selector(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.sources.len(), self.n_z);
        for (p, s) in self.sources.iter().enumerate() {
            a[(p, s.class)] = s.gain_scale;
        }
        a
    }
}

/// Number of directed couplings a mesh defines (two per symmetric pair).
pub fn edge_count(mesh: &CompartmentMesh) -> usize {
    mesh.adjacency().len()
}

/// Outcome of classifying a compartment pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    Shared(usize),
    /// Declared adjacent but thermally decoupled (no edge is emitted).
    Decoupled,
}

/// Matches a compartment by role and/or layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matcher {
    pub role: Option<Role>,
    pub layer: Option<usize>,
}

impl Matcher {
    pub fn role(role: Role) -> Self {
        Matcher { role: Some(role), layer: None }
    }

    pub fn layer(layer: usize) -> Self {
        Matcher { role: None, layer: Some(layer) }
    }

    pub fn matches(&self, c: &Compartment) -> bool {
        self.role.is_none_or(|r| r == c.role) && self.layer.is_none_or(|l| l == c.layer)
    }

    /// Parses `role`, `role@layer` or `*@layer`.
    pub fn parse(s: &str) -> Result<Self> {
        let (role, layer) = match s.split_once('@') {
            Some((r, l)) => {
                let layer = l
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad layer in matcher '{s}'")))?;
                (r.trim(), Some(layer))
            }
            None => (s.trim(), None),
        };
        let role = if role == "*" { None } else { Some(role.parse::<Role>()?) };
        Ok(Matcher { role, layer })
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.role, self.layer) {
            (Some(r), Some(l)) => write!(f, "{r}@{l}"),
            (Some(r), None) => write!(f, "{r}"),
            (None, Some(l)) => write!(f, "*@{l}"),
            (None, None) => write!(f, "*"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdgeRule {
    pub a: Matcher,
    pub b: Matcher,
    pub coupling: Coupling,
}

#[derive(Clone, Debug)]
pub struct SourceRule {
    pub matcher: Matcher,
    pub class: usize,
}

/// Maps compartment pairs onto conductance classes and source compartments
/// onto gain classes. Rules are tried in order; pair rules are symmetric.
#[derive(Clone, Debug)]
pub struct SharingScheme {
    pub name: String,
    pub k_names: Vec<String>,
    pub z_names: Vec<String>,
    pub edge_rules: Vec<EdgeRule>,
    pub source_rules: Vec<SourceRule>,
}

impl SharingScheme {
    pub fn n_k(&self) -> usize {
        self.k_names.len()
    }

    pub fn n_z(&self) -> usize {
        self.z_names.len()
    }

    pub fn edge_class(&self, ci: &Compartment, cj: &Compartment) -> Result<Coupling> {
        self.edge_rules
            .iter()
            .find(|r| (r.a.matches(ci) && r.b.matches(cj)) || (r.a.matches(cj) && r.b.matches(ci)))
            .map(|r| r.coupling)
            .ok_or_else(|| {
                Error::Config(format!(
                    "scheme '{}' has no rule for the pair {}@{} <-> {}@{}",
                    self.name, ci.role, ci.layer, cj.role, cj.layer
                ))
            })
    }

    pub fn source_class(&self, c: &Compartment) -> Result<usize> {
        self.source_rules
            .iter()
            .find(|r| r.matcher.matches(c))
            .map(|r| r.class)
            .ok_or_else(|| {
                Error::Config(format!(
                    "scheme '{}' has no gain class for source compartment {} ({}@{})",
                    self.name, c.index, c.role, c.layer
                ))
            })
    }
}
