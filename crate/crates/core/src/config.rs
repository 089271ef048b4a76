//! Declarative mesh layouts and sharing schemes.
//!
//! A [`LayoutSpec`] describes the grid, one character map per layer, the
//! refinement list, the source compartments and the observation set. A
//! [`SchemeSpec`] lists named parameter classes and the pair rules that map
//! adjacent compartments onto them. Both deserialize from TOML.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Coupling, EdgeRule, Matcher, SharingScheme, SourceRule};
use crate::mesh::{CompartmentMesh, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    /// `[nx, ny, nz]`
    pub grid: [usize; 3],
    /// Base cell size `[dx, dy, dz]` in meters.
    pub cell_size: [f64; 3],
    #[serde(default = "default_max_level")]
    pub max_level: u32,
    /// One entry per layer, top layer first.
    pub layers: Vec<LayerMap>,
    #[serde(default)]
    pub refine: Vec<RefineSpec>,
    /// Matchers selecting the compartments that carry a heat source.
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub observe: ObserveSpec,
    /// Expected per-layer counts (ambient last), checked after construction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_counts: Option<Vec<usize>>,
}

fn default_max_level() -> u32 {
    1
}

/// Role codes for one layer: either a uniform `fill` or `rows`, one string
/// of `nx` codes per `y`, starting at `y = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMap {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<char>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<String>,
}

impl LayerMap {
    pub fn fill(role: Role) -> Self {
        LayerMap { fill: Some(role.code()), rows: Vec::new() }
    }
}

/// Refines the cells `x..=x_to`, `y..=y_to` of one layer. `children` gives
/// four role codes in SW, SE, NW, NE order; otherwise the children inherit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSpec {
    pub layer: usize,
    pub x: usize,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_to: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_to: Option<usize>,
    /// Quadrant path of the compartment to split, for nested refinement.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveSpec {
    #[serde(default)]
    pub ambient: bool,
    /// The `count` lowest-index compartments matching each matcher.
    #[serde(default)]
    pub groups: Vec<ObserveGroup>,
    #[serde(default)]
    pub cells: Vec<CellRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveGroup {
    #[serde(rename = "match")]
    pub matcher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRef {
    pub layer: usize,
    pub x: usize,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<u8>,
}

impl LayoutSpec {
    pub fn build(&self) -> Result<CompartmentMesh> {
        let [nx, ny, nz] = self.grid;
        if self.layers.len() != nz {
            return Err(Error::Config(format!("{} layer maps given for {nz} layers", self.layers.len())));
        }
        let mut maps = Vec::with_capacity(nz);
        for (layer, map) in self.layers.iter().enumerate() {
            maps.push(parse_layer(layer, map, nx, ny)?);
        }
        let mut mesh =
            CompartmentMesh::build_grid(nx, ny, nz, self.cell_size, |x, y, l| maps[l][y][x])?.with_max_level(self.max_level);

        for r in &self.refine {
            let children = match &r.children {
                Some(s) => Some(parse_children(s)?),
                None => None,
            };
            for y in r.y..=r.y_to.unwrap_or(r.y) {
                for x in r.x..=r.x_to.unwrap_or(r.x) {
                    let idx = mesh.find(r.layer, x, y, &r.path).ok_or_else(|| {
                        Error::Config(format!("refine: no compartment at layer {} cell ({x}, {y}) path {:?}", r.layer, r.path))
                    })?;
                    mesh = mesh.refine_with_roles(idx, children)?;
                }
            }
        }
        let (mut mesh, _) = mesh.prune_inactive(|c| c.role != Role::Inactive)?;

        let source_matchers = self.sources.iter().map(|s| Matcher::parse(s)).collect::<Result<Vec<_>>>()?;
        let flagged: Vec<usize> = mesh
            .compartments()
            .iter()
            .filter(|c| !c.is_ambient() && source_matchers.iter().any(|m| m.matches(c)))
            .map(|c| c.index)
            .collect();
        for i in flagged {
            mesh.set_source(i, true)?;
        }

        for idx in self.observed_indices(&mesh)? {
            mesh.set_observed(idx, true)?;
        }

        if let Some(expected) = &self.expect_counts {
            let got = mesh.layer_counts();
            if &got != expected {
                return Err(Error::Config(format!("layer populations {got:?} differ from the expected {expected:?}")));
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }

    fn observed_indices(&self, mesh: &CompartmentMesh) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for g in &self.observe.groups {
            let m = Matcher::parse(&g.matcher)?;
            let hits: Vec<usize> =
                mesh.compartments().iter().filter(|c| !c.is_ambient() && m.matches(c)).map(|c| c.index).collect();
            let count = g.count.unwrap_or(hits.len());
            if count > hits.len() {
                return Err(Error::Config(format!(
                    "observe: '{}' matches {} compartments, {count} requested",
                    g.matcher,
                    hits.len()
                )));
            }
            out.extend_from_slice(&hits[..count]);
        }
        for c in &self.observe.cells {
            let idx = mesh.find(c.layer, c.x, c.y, &c.path).ok_or_else(|| {
                Error::Config(format!("observe: no compartment at layer {} cell ({}, {}) path {:?}", c.layer, c.x, c.y, c.path))
            })?;
            out.push(idx);
        }
        if self.observe.ambient {
            out.push(mesh.ambient_index());
        }
        Ok(out)
    }
}

fn parse_role_code(c: char) -> Result<Role> {
    match Role::from_code(c) {
        Some(Role::Ambient) | None => Err(Error::Config(format!("unknown role code '{c}'"))),
        Some(r) => Ok(r),
    }
}

fn parse_layer(layer: usize, map: &LayerMap, nx: usize, ny: usize) -> Result<Vec<Vec<Role>>> {
    match (map.fill, map.rows.is_empty()) {
        (Some(c), true) => Ok(vec![vec![parse_role_code(c)?; nx]; ny]),
        (None, false) => {
            if map.rows.len() != ny {
                return Err(Error::Config(format!("layer {layer}: {} rows for ny = {ny}", map.rows.len())));
            }
            map.rows
                .iter()
                .enumerate()
                .map(|(y, row)| {
                    let roles = row.chars().map(parse_role_code).collect::<Result<Vec<_>>>()?;
                    if roles.len() != nx {
                        return Err(Error::Config(format!("layer {layer} row {y}: {} codes for nx = {nx}", roles.len())));
                    }
                    Ok(roles)
                })
                .collect()
        }
        _ => Err(Error::Config(format!("layer {layer}: give exactly one of 'fill' and 'rows'"))),
    }
}

fn parse_children(s: &str) -> Result<[Role; 4]> {
    let roles = s.chars().map(parse_role_code).collect::<Result<Vec<_>>>()?;
    roles
        .try_into()
        .map_err(|_| Error::Config(format!("children '{s}' must list exactly four role codes")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub name: String,
    /// Conductance class names.
    pub k: Vec<String>,
    /// Source gain class names.
    pub z: Vec<String>,
    pub pairs: Vec<PairSpec>,
    pub sources: Vec<SourceSpec>,
}

/// `a <-> b` maps onto class `class`, or is dropped when `class` is absent
/// and `decoupled = true`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub decoupled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(rename = "match")]
    pub matcher: String,
    pub class: String,
}

impl SchemeSpec {
    pub fn build(&self) -> Result<SharingScheme> {
        let lookup = |names: &[String], name: &str, what: &str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("scheme '{}': unknown {what} class '{name}'", self.name)))
        };
        let mut edge_rules = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let coupling = match (&p.class, p.decoupled) {
                (Some(c), false) => Coupling::Shared(lookup(&self.k, c, "conductance")?),
                (None, true) => Coupling::Decoupled,
                _ => {
                    return Err(Error::Config(format!(
                        "scheme '{}': pair {} <-> {} needs either a class or decoupled = true",
                        self.name, p.a, p.b
                    )))
                }
            };
            edge_rules.push(EdgeRule { a: Matcher::parse(&p.a)?, b: Matcher::parse(&p.b)?, coupling });
        }
        let mut source_rules = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            source_rules.push(SourceRule { matcher: Matcher::parse(&s.matcher)?, class: lookup(&self.z, &s.class, "gain")? });
        }
        Ok(SharingScheme {
            name: self.name.clone(),
            k_names: self.k.clone(),
            z_names: self.z.clone(),
            edge_rules,
            source_rules,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
grid = [3, 2, 2]
cell_size = [0.003, 0.003, 0.001]
sources = ["IGBT@0"]
expect_counts = [7, 6, 1]

[[layers]]
rows = ["ID.", "II."]

[[layers]]
fill = "C"

[[refine]]
layer = 0
x = 0
y = 0
children = "IIDD"

[observe]
ambient = true
groups = [{ match = "IGBT@0", count = 2 }]
cells = [{ layer = 1, x = 2, y = 1 }]
"#;

    #[test]
    fn small_layout_from_toml() {
        let spec: LayoutSpec = toml::from_str(SMALL).unwrap();
        let mesh = spec.build().unwrap();
        assert_eq!(mesh.layer_counts(), vec![7, 6, 1]);
        // two refined IGBT children plus the two unrefined IGBT cells
        assert_eq!(mesh.source_indices().len(), 4);
        let obs = mesh.observed_indices();
        assert_eq!(obs.len(), 4);
        assert_eq!(*obs.last().unwrap(), mesh.ambient_index());
        let back: LayoutSpec = toml::from_str(&toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn layout_errors() {
        let mut spec: LayoutSpec = toml::from_str(SMALL).unwrap();
        spec.expect_counts = Some(vec![1, 2, 3]);
        assert!(matches!(spec.build(), Err(Error::Config(_))));
        let mut spec: LayoutSpec = toml::from_str(SMALL).unwrap();
        spec.layers[0].rows[0] = "IX.".into();
        assert!(spec.build().is_err());
        let mut spec: LayoutSpec = toml::from_str(SMALL).unwrap();
        spec.refine[0].children = Some("II".into());
        assert!(spec.build().is_err());
        let mut spec: LayoutSpec = toml::from_str(SMALL).unwrap();
        spec.observe.groups[0].count = Some(9);
        assert!(spec.build().is_err());
        assert!(toml::from_str::<LayoutSpec>("grid = [1, 1, 1]\nbogus = 1").is_err());
    }

    #[test]
    fn scheme_from_toml() {
        let text = r#"
name = "s"
k = ["a", "b"]
z = ["z"]
pairs = [
  { a = "IGBT@0", b = "IGBT@0", class = "a" },
  { a = "*@0", b = "*@0", decoupled = true },
  { a = "*", b = "*", class = "b" },
]
sources = [{ match = "IGBT", class = "z" }]
"#;
        let spec: SchemeSpec = toml::from_str(text).unwrap();
        let scheme = spec.build().unwrap();
        assert_eq!((scheme.n_k(), scheme.n_z()), (2, 1));
        assert_eq!(scheme.edge_rules[1].coupling, Coupling::Decoupled);
        let mut bad = spec.clone();
        bad.pairs[0].class = Some("c".into());
        assert!(bad.build().is_err());
        let mut bad = spec;
        bad.pairs[0].decoupled = true;
        assert!(bad.build().is_err());
    }
}
