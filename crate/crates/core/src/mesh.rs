//! Cartesian compartment grid with single-axis-pair (X-Y) quadtree refinement.
//!
//! Compartments are kept sorted by `(layer, y, x, quadtree path)` with the
//! ambient compartment last. Adjacency is recomputed geometrically after
//! every structural edit, so the listing is always a pure function of the
//! compartment boxes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when testing whether two box faces touch.
const GEOM_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Igbt,
    Diode,
    Rectifier,
    Copper,
    Substrate,
    Baseplate,
    Ambient,
    Inactive,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Igbt,
        Role::Diode,
        Role::Rectifier,
        Role::Copper,
        Role::Substrate,
        Role::Baseplate,
        Role::Ambient,
        Role::Inactive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Igbt => "IGBT",
            Role::Diode => "diode",
            Role::Rectifier => "rectifier",
            Role::Copper => "copper",
            Role::Substrate => "substrate",
            Role::Baseplate => "baseplate",
            Role::Ambient => "ambient",
            Role::Inactive => "inactive",
        }
    }

    /// Single-character code used in layer maps.
    pub fn code(self) -> char {
        match self {
            Role::Igbt => 'I',
            Role::Diode => 'D',
            Role::Rectifier => 'R',
            Role::Copper => 'C',
            Role::Substrate => 'S',
            Role::Baseplate => 'B',
            Role::Ambient => 'A',
            Role::Inactive => '.',
        }
    }

    pub fn from_code(c: char) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.code() == c)
    }

    /// Roles that may carry a heat source.
    pub fn is_active_device(self) -> bool {
        matches!(self, Role::Igbt | Role::Diode | Role::Rectifier)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Role::ALL
            .into_iter()
            .find(|r| r.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::Parse(format!("unknown role '{s}'")))
    }
}

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    fn overlap(&self, other: &Extent, axis: usize) -> f64 {
        (self.max[axis].min(other.max[axis]) - self.min[axis].max(other.min[axis])).max(0.0)
    }

    fn footprint(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }
}

/// Quadrant order for children of a refined cell.
pub const QUADRANTS: [&str; 4] = ["SW", "SE", "NW", "NE"];

#[derive(Clone, Debug, PartialEq)]
pub struct Compartment {
    pub index: usize,
    /// Z index; 0 is the top (device) layer. The ambient compartment uses `nz`.
    pub layer: usize,
    /// Base grid cell `(x, y)` this compartment lies in.
    pub cell: (usize, usize),
    /// Quadtree path below the base cell, one quadrant index per level.
    pub path: Vec<u8>,
    pub extent: Extent,
    pub refinement_level: u32,
    pub role: Role,
    pub observed: bool,
    pub has_source: bool,
}

impl Compartment {
    fn sort_key(&self) -> (usize, usize, usize, &[u8]) {
        (self.layer, self.cell.1, self.cell.0, &self.path)
    }

    pub fn is_ambient(&self) -> bool {
        self.role == Role::Ambient
    }
}

/// One directed adjacency entry; every entry has a mirror `(to, from)` with
/// the same weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adjacency {
    pub from: usize,
    pub to: usize,
    /// Shared face area divided by the base-cell face area in that direction.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct CompartmentMesh {
    nx: usize,
    ny: usize,
    nz: usize,
    cell_size: [f64; 3],
    max_level: u32,
    compartments: Vec<Compartment>,
    adjacency: Vec<Adjacency>,
}

impl CompartmentMesh {
    /// Uniform `nx * ny * nz` grid plus one ambient compartment. `role_map`
    /// receives `(x, y, layer)`.
    pub fn build_grid<F>(nx: usize, ny: usize, nz: usize, cell_size: [f64; 3], role_map: F) -> Result<Self>
    where
        F: Fn(usize, usize, usize) -> Role,
    {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        if cell_size.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size:?}"
            )));
        }
        let [dx, dy, dz] = cell_size;
        let mut compartments = Vec::with_capacity(nx * ny * nz + 1);
        for layer in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let role = role_map(x, y, layer);
                    if role == Role::Ambient {
                        return Err(Error::InvalidArgument(format!(
                            "grid cell ({x}, {y}, {layer}) cannot take the ambient role"
                        )));
                    }
                    compartments.push(Compartment {
                        index: 0,
                        layer,
                        cell: (x, y),
                        path: Vec::new(),
                        extent: Extent {
                            min: [x as f64 * dx, y as f64 * dy, -((layer + 1) as f64) * dz],
                            max: [(x + 1) as f64 * dx, (y + 1) as f64 * dy, -(layer as f64) * dz],
                        },
                        refinement_level: 0,
                        role,
                        observed: false,
                        has_source: false,
                    });
                }
            }
        }
        compartments.push(Compartment {
            index: 0,
            layer: nz,
            cell: (0, 0),
            path: Vec::new(),
            extent: Extent { min: [0.0; 3], max: [0.0; 3] },
            refinement_level: 0,
            role: Role::Ambient,
            observed: false,
            has_source: false,
        });
        let mut mesh = CompartmentMesh {
            nx,
            ny,
            nz,
            cell_size,
            max_level: 1,
            compartments,
            adjacency: Vec::new(),
        };
        mesh.reindex();
        Ok(mesh)
    }

    pub fn with_max_level(mut self, max_level: u32) -> Self {
        self.max_level = max_level;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn cell_size(&self) -> [f64; 3] {
        self.cell_size
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn len(&self) -> usize {
        self.compartments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compartments.is_empty()
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.compartments
    }

    pub fn compartment(&self, index: usize) -> &Compartment {
        &self.compartments[index]
    }

    pub fn adjacency(&self) -> &[Adjacency] {
        &self.adjacency
    }

    /// Number of symmetric couplings (each stored twice in `adjacency`).
    pub fn pair_count(&self) -> usize {
        self.adjacency.iter().filter(|a| a.from < a.to).count()
    }

    pub fn ambient_index(&self) -> usize {
        self.compartments.len() - 1
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        self.compartments
            .iter()
            .filter(|c| c.observed)
            .map(|c| c.index)
            .collect()
    }

    pub fn source_indices(&self) -> Vec<usize> {
        self.compartments
            .iter()
            .filter(|c| c.has_source)
            .map(|c| c.index)
            .collect()
    }

    /// Compartment count per layer, followed by the ambient count (always 1).
    pub fn layer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nz + 1];
        for c in &self.compartments {
            counts[c.layer] += 1;
        }
        counts
    }

    pub fn total_volume(&self) -> f64 {
        self.compartments.iter().map(|c| c.extent.volume()).sum()
    }

    /// Locate a compartment by grid coordinates and quadtree path.
    pub fn find(&self, layer: usize, x: usize, y: usize, path: &[u8]) -> Option<usize> {
        self.compartments
            .iter()
            .find(|c| c.layer == layer && c.cell == (x, y) && c.path == path && !c.is_ambient())
            .map(|c| c.index)
    }

    pub fn set_observed(&mut self, index: usize, observed: bool) -> Result<()> {
        self.check_index(index)?;
        self.compartments[index].observed = observed;
        Ok(())
    }

    pub fn set_source(&mut self, index: usize, has_source: bool) -> Result<()> {
        self.check_index(index)?;
        let c = &self.compartments[index];
        if has_source && (c.is_ambient() || c.role == Role::Inactive) {
            return Err(Error::InvalidArgument(format!(
                "compartment {index} with role {} cannot carry a heat source",
                c.role
            )));
        }
        self.compartments[index].has_source = has_source;
        Ok(())
    }

    pub fn set_role(&mut self, index: usize, role: Role) -> Result<()> {
        self.check_index(index)?;
        if self.compartments[index].is_ambient() || role == Role::Ambient {
            return Err(Error::InvalidArgument(
                "the ambient role cannot be reassigned".to_string(),
            ));
        }
        self.compartments[index].role = role;
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.compartments.len() {
            return Err(Error::InvalidArgument(format!(
                "compartment index {index} out of range (mesh has {})",
                self.compartments.len()
            )));
        }
        Ok(())
    }

    /// Split one compartment into four X-Y children that inherit its role.
    pub fn refine(&self, index: usize) -> Result<CompartmentMesh> {
        self.refine_with_roles(index, None)
    }

    /// Split one compartment; `roles` assigns the children in SW, SE, NW, NE
    /// order.
    pub fn refine_with_roles(&self, index: usize, roles: Option<[Role; 4]>) -> Result<CompartmentMesh> {
        self.check_index(index)?;
        let parent = &self.compartments[index];
        if parent.is_ambient() {
            return Err(Error::InvalidArgument("the ambient compartment cannot be refined".to_string()));
        }
        if parent.refinement_level >= self.max_level {
            return Err(Error::InvalidArgument(format!(
                "compartment {index} is already at refinement level {} (maximum {})",
                parent.refinement_level, self.max_level
            )));
        }
        if let Some(r) = roles {
            if r.contains(&Role::Ambient) {
                return Err(Error::InvalidArgument("children cannot take the ambient role".to_string()));
            }
        }
        let mid = [
            0.5 * (parent.extent.min[0] + parent.extent.max[0]),
            0.5 * (parent.extent.min[1] + parent.extent.max[1]),
        ];
        let mut compartments: Vec<Compartment> = Vec::with_capacity(self.compartments.len() + 3);
        for (i, c) in self.compartments.iter().enumerate() {
            if i != index {
                compartments.push(c.clone());
                continue;
            }
            for q in 0..4u8 {
                let east = q & 1 == 1;
                let north = q & 2 == 2;
                let mut extent = c.extent;
                if east {
                    extent.min[0] = mid[0];
                } else {
                    extent.max[0] = mid[0];
                }
                if north {
                    extent.min[1] = mid[1];
                } else {
                    extent.max[1] = mid[1];
                }
                let mut path = c.path.clone();
                path.push(q);
                compartments.push(Compartment {
                    index: 0,
                    layer: c.layer,
                    cell: c.cell,
                    path,
                    extent,
                    refinement_level: c.refinement_level + 1,
                    role: roles.map_or(c.role, |r| r[q as usize]),
                    observed: false,
                    has_source: c.has_source,
                });
            }
        }
        let mut mesh = CompartmentMesh {
            compartments,
            adjacency: Vec::new(),
            ..self.clone_header()
        };
        mesh.reindex();
        Ok(mesh)
    }

    /// Remove compartments failing `keep`. Returns the compacted mesh and the
    /// old-to-new index map.
    pub fn prune_inactive<F>(&self, keep: F) -> Result<(CompartmentMesh, Vec<Option<usize>>)>
    where
        F: Fn(&Compartment) -> bool,
    {
        let ambient = &self.compartments[self.ambient_index()];
        if !keep(ambient) {
            return Err(Error::InvalidArgument("pruning predicate must keep the ambient compartment".to_string()));
        }
        let compartments: Vec<Compartment> = self.compartments.iter().filter(|c| keep(c)).cloned().collect();
        let mut mesh = CompartmentMesh {
            compartments,
            adjacency: Vec::new(),
            ..self.clone_header()
        };
        mesh.reindex();
        // survivors keep their relative order
        let mut mapping = vec![None; self.compartments.len()];
        let mut next = 0;
        for (old, c) in self.compartments.iter().enumerate() {
            if keep(c) {
                mapping[old] = Some(next);
                next += 1;
            }
        }
        if let Some(isolated) = mesh.isolated() {
            return Err(Error::InvalidArgument(format!(
                "pruning leaves compartment {isolated} without any coupling"
            )));
        }
        Ok((mesh, mapping))
    }

    /// Structural checks: symmetric adjacency, no isolated compartments, a
    /// single trailing ambient compartment.
    pub fn validate(&self) -> Result<()> {
        let amb: Vec<_> = self.compartments.iter().filter(|c| c.is_ambient()).collect();
        if amb.len() != 1 || amb[0].index != self.ambient_index() {
            return Err(Error::InvalidArgument("mesh must contain exactly one trailing ambient compartment".to_string()));
        }
        if let Some(i) = self.isolated() {
            return Err(Error::InvalidArgument(format!("compartment {i} has no coupling")));
        }
        let lookup: HashMap<(usize, usize), f64> =
            self.adjacency.iter().map(|a| ((a.from, a.to), a.weight)).collect();
        for a in &self.adjacency {
            match lookup.get(&(a.to, a.from)) {
                Some(&w) if w == a.weight => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency ({}, {}) has no symmetric counterpart",
                        a.from, a.to
                    )))
                }
            }
        }
        Ok(())
    }

    fn isolated(&self) -> Option<usize> {
        let mut degree = vec![0usize; self.compartments.len()];
        for a in &self.adjacency {
            degree[a.from] += 1;
        }
        (0..self.compartments.len()).find(|&i| i != self.ambient_index() && degree[i] == 0)
    }

    fn clone_header(&self) -> CompartmentMesh {
        CompartmentMesh {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            cell_size: self.cell_size,
            max_level: self.max_level,
            compartments: Vec::new(),
            adjacency: Vec::new(),
        }
    }

    /// Sort compartments, renumber them and rebuild the adjacency list.
    fn reindex(&mut self) {
        self.compartments.sort_by(|a, b| {
            a.is_ambient()
                .cmp(&b.is_ambient())
                .then_with(|| a.sort_key().cmp(&b.sort_key()))
        });
        for (i, c) in self.compartments.iter_mut().enumerate() {
            c.index = i;
        }
        self.rebuild_adjacency();
    }

    fn rebuild_adjacency(&mut self) {
        let ambient = self.ambient_index();
        let mut by_cell: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
        for c in &self.compartments[..ambient] {
            by_cell.entry((c.layer, c.cell.0, c.cell.1)).or_default().push(c.index);
        }
        let mut adjacency = Vec::new();
        for c in &self.compartments[..ambient] {
            let (x, y) = (c.cell.0 as isize, c.cell.1 as isize);
            let l = c.layer as isize;
            let candidates = [
                (l, x, y),
                (l, x - 1, y),
                (l, x + 1, y),
                (l, x, y - 1),
                (l, x, y + 1),
                (l - 1, x, y),
                (l + 1, x, y),
            ];
            let mut found: Vec<Adjacency> = Vec::new();
            for (cl, cx, cy) in candidates {
                if cl < 0 || cx < 0 || cy < 0 {
                    continue;
                }
                let Some(list) = by_cell.get(&(cl as usize, cx as usize, cy as usize)) else {
                    continue;
                };
                for &j in list {
                    if j == c.index {
                        continue;
                    }
                    if let Some(w) = self.contact(c, &self.compartments[j]) {
                        found.push(Adjacency { from: c.index, to: j, weight: w });
                    }
                }
            }
            if c.layer + 1 == self.nz {
                let w = c.extent.footprint() / (self.cell_size[0] * self.cell_size[1]);
                found.push(Adjacency { from: c.index, to: ambient, weight: w });
            }
            adjacency.extend(found);
        }
        let mirrored: Vec<Adjacency> = adjacency
            .iter()
            .filter(|a| a.to == ambient)
            .map(|a| Adjacency { from: ambient, to: a.from, weight: a.weight })
            .collect();
        adjacency.extend(mirrored);
        adjacency.sort_by_key(|a| (a.from, a.to));
        self.adjacency = adjacency;
    }

    /// Face-contact weight between two non-ambient compartments.
    fn contact(&self, a: &Compartment, b: &Compartment) -> Option<f64> {
        let [dx, dy, dz] = self.cell_size;
        let (ea, eb) = (&a.extent, &b.extent);
        if a.layer == b.layer {
            let touches = |axis: usize, d: f64| {
                (ea.max[axis] - eb.min[axis]).abs() < GEOM_EPS * d || (eb.max[axis] - ea.min[axis]).abs() < GEOM_EPS * d
            };
            if touches(0, dx) {
                let shared = ea.overlap(eb, 1);
                if shared > GEOM_EPS * dy {
                    return Some(shared * dz / (dy * dz));
                }
            }
            if touches(1, dy) {
                let shared = ea.overlap(eb, 0);
                if shared > GEOM_EPS * dx {
                    return Some(shared * dz / (dx * dz));
                }
            }
            None
        } else if a.layer.abs_diff(b.layer) == 1 {
            let area = ea.overlap(eb, 0) * ea.overlap(eb, 1);
            (area > GEOM_EPS * dx * dy).then(|| area / (dx * dy))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copper(nx: usize, ny: usize, nz: usize) -> CompartmentMesh {
        CompartmentMesh::build_grid(nx, ny, nz, [1.0, 1.0, 1.0], |_, _, _| Role::Copper).unwrap()
    }

    #[test]
    fn two_by_two_grid_counts() {
        let m = copper(2, 2, 1);
        assert_eq!(m.len(), 5);
        assert_eq!(m.pair_count(), 8);
        let amb = m.ambient_index();
        assert_eq!(m.adjacency().iter().filter(|a| a.from == amb).count(), 4);
        m.validate().unwrap();
    }

    #[test]
    fn single_cell_grid() {
        let m = copper(1, 1, 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.pair_count(), 1);
    }

    #[test]
    fn full_size_grid_count() {
        let m = copper(17, 10, 4);
        assert_eq!(m.len(), 681);
        // 4 layers of 17x10: x-pairs 16*10, y-pairs 17*9, vertical 3*170, ambient 170
        assert_eq!(m.pair_count(), 4 * (160 + 153) + 3 * 170 + 170);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(CompartmentMesh::build_grid(0, 1, 1, [1.0; 3], |_, _, _| Role::Copper).is_err());
        assert!(CompartmentMesh::build_grid(1, 1, 1, [1.0, -1.0, 1.0], |_, _, _| Role::Copper).is_err());
    }

    #[test]
    fn refine_one_cell() {
        let m = copper(2, 2, 1);
        let before = m.total_volume();
        let r = m.refine(0).unwrap();
        assert_eq!(r.len(), 8);
        assert!((r.total_volume() - before).abs() < 1e-12);
        r.validate().unwrap();
        // children are indices 0..4 (SW, SE, NW, NE) of base cell (0, 0)
        for q in 0..4 {
            let c = r.compartment(q);
            assert_eq!(c.cell, (0, 0));
            assert_eq!(c.path, vec![q as u8]);
            assert_eq!(c.refinement_level, 1);
        }
        // SE child touches unrefined neighbour (1, 0) along an X face
        let east = r.find(0, 1, 0, &[]).unwrap();
        let w = r
            .adjacency()
            .iter()
            .find(|a| a.from == 1 && a.to == east)
            .unwrap()
            .weight;
        assert_eq!(w, 0.5);
        // siblings are coupled: SW-SE and SW-NW, not SW-NE (diagonal)
        let pairs: Vec<_> = r.adjacency().iter().filter(|a| a.from == 0).map(|a| a.to).collect();
        assert!(pairs.contains(&1) && pairs.contains(&2) && !pairs.contains(&3));
    }

    #[test]
    fn refine_respects_max_level_and_ambient() {
        let m = copper(2, 2, 1);
        let r = m.refine(0).unwrap();
        assert!(r.refine(0).is_err());
        assert!(m.refine(m.ambient_index()).is_err());
        let deep = m.with_max_level(2).refine(0).unwrap().refine(0).unwrap();
        assert_eq!(deep.len(), 11);
        deep.validate().unwrap();
    }

    #[test]
    fn vertical_weights_after_refinement() {
        let m = copper(1, 1, 2);
        let r = m.refine(0).unwrap();
        let below = r.find(1, 0, 0, &[]).unwrap();
        for q in 0..4 {
            let w = r.adjacency().iter().find(|a| a.from == q && a.to == below).unwrap().weight;
            assert_eq!(w, 0.25);
        }
    }

    #[test]
    fn prune_identity_and_drop() {
        let m = copper(2, 2, 1);
        let (same, map) = m.prune_inactive(|_| true).unwrap();
        assert_eq!(same.compartments(), m.compartments());
        assert_eq!(same.adjacency(), m.adjacency());
        assert_eq!(map, (0..5).map(Some).collect::<Vec<_>>());

        let (p, map) = m.prune_inactive(|c| c.index != 3).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.pair_count(), 5);
        assert_eq!(map[3], None);
        assert_eq!(map[4], Some(3));
        assert!(m.prune_inactive(|c| !c.is_ambient()).is_err());
    }

    #[test]
    fn role_codes_round_trip() {
        for r in Role::ALL {
            assert_eq!(Role::from_code(r.code()), Some(r));
            assert_eq!(r.name().parse::<Role>().unwrap(), r);
        }
    }
}
