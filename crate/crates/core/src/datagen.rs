//! Synthetic power-module toy: layout, sharing schemes, true parameters,
//! input profile and dataset generation.
//!
//! The toy has four layers (devices, copper, substrate, baseplate) plus the
//! ambient compartment. The device layer holds IGBT clusters with a diode
//! row, a rectifier block and refined interface cells; the copper layer is
//! refined under the clusters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{CellRef, LayerMap, LayoutSpec, ObserveGroup, ObserveSpec, PairSpec, RefineSpec, SchemeSpec, SourceSpec};
use crate::error::{Error, Result};
use crate::graph::{GraphOperators, SharingScheme};
use crate::mesh::{CompartmentMesh, Role};
use crate::model::{assemble, dynamics_matrix, simulate_with, NoiseSwitch, ThetaParams, Trajectory};

/// Weak-scheme conductances in class order.
pub const WEAK_K: [f64; 12] = [0.035, 0.015, 0.024, 0.022, 0.044, 0.020, 0.056, 0.052, 0.052, 0.047, 0.062, 0.020];
/// Strong-scheme conductances in class order.
pub const STRONG_K: [f64; 5] = [0.025, 0.029, 0.053, 0.055, 0.020];
/// Source gain shared by all IGBT inputs.
pub const Z_TRUE: f64 = 0.05;

/// Square pulses applied to all sources whose base cell `x` lies in
/// `x_from..=x_to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseGroup {
    pub x_from: usize,
    pub x_to: usize,
    pub period: usize,
    /// Fraction of the period the pulse is on.
    pub duty: f64,
    #[serde(default)]
    pub phase: usize,
    pub amplitude: f64,
}

impl PulseGroup {
    pub fn value(&self, t: usize) -> f64 {
        let on = (self.duty * self.period as f64).round() as usize;
        if (t + self.phase) % self.period < on {
            self.amplitude
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputProfile {
    pub groups: Vec<PulseGroup>,
    /// Value for sources outside every group.
    #[serde(default)]
    pub base: f64,
}

impl InputProfile {
    /// `n_P x steps` input matrix; rows follow the source compartments in
    /// index order.
    pub fn sample(&self, mesh: &CompartmentMesh, steps: usize) -> Result<DMatrix<f64>> {
        for g in &self.groups {
            if g.period == 0 || !(0.0..=1.0).contains(&g.duty) {
                return Err(Error::Config(format!("pulse group {g:?} needs period > 0 and duty in [0, 1]")));
            }
        }
        let sources = mesh.source_indices();
        let mut p = DMatrix::from_element(sources.len(), steps, self.base);
        for (row, &i) in sources.iter().enumerate() {
            let x = mesh.compartment(i).cell.0;
            if let Some(g) = self.groups.iter().find(|g| (g.x_from..=g.x_to).contains(&x)) {
                for t in 0..steps {
                    p[(row, t)] = g.value(t);
                }
            }
        }
        Ok(p)
    }
}

/// Which of the two sharing schemes to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Weak,
    Strong,
}

impl std::str::FromStr for SchemeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(SchemeChoice::Weak),
            "strong" => Ok(SchemeChoice::Strong),
            _ => Err(Error::Parse(format!("unknown scheme '{s}' (expected weak or strong)"))),
        }
    }
}

impl std::fmt::Display for SchemeChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchemeChoice::Weak => "weak",
            SchemeChoice::Strong => "strong",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub name: String,
    pub layout: LayoutSpec,
    pub weak: SchemeSpec,
    pub strong: SchemeSpec,
    pub weak_k: Vec<f64>,
    pub strong_k: Vec<f64>,
    pub z: Vec<f64>,
    pub dtau: f64,
    /// Ambient and initial temperature.
    pub ambient: f64,
    /// Measurement noise variance, `R = r_var I`.
    pub r_var: f64,
    pub inputs: InputProfile,
}

impl ToySpec {
    /// The full 17 x 10 x 4 toy with 817 compartments.
    pub fn full() -> Self {
        let layer0 = [
            ".................",
            ".IIII.IIII.IIII..",
            ".IIII.IIII.IIII..",
            ".IIII.IIII.IIII..",
            ".IIII.IIII.IIII..",
            ".DDDD.DDDD.DDDD..",
            ".................",
            ".RRRRRR..........",
            ".RRRRRR..........",
            ".................",
        ];
        let mut refine = Vec::new();
        for c in 0..3 {
            let x0 = 1 + 5 * c;
            refine.push(rect(0, x0, x0 + 3, 4, 4, Some("IIDD")));
        }
        refine.push(rect(0, 1, 3, 7, 7, Some("RRRR")));
        for c in 0..3 {
            let x0 = 1 + 5 * c;
            refine.push(rect(1, x0, x0 + 3, 1, 5, None));
        }
        refine.push(rect(1, 1, 3, 7, 7, None));
        let inputs = InputProfile {
            groups: vec![pulse(1, 4, 3000), pulse(6, 9, 4500), pulse(11, 14, 6000)],
            base: 0.0,
        };
        Self::assemble_spec(
            "full",
            [17, 10, 4],
            &layer0,
            refine,
            40,
            CellRef { layer: 3, x: 8, y: 5, path: Vec::new() },
            Some(vec![117, 359, 170, 170, 1]),
            inputs,
        )
    }

    /// A 9 x 5 x 4 variant with the same roles and sharing classes.
    pub fn reduced() -> Self {
        let layer0 = [".........", ".IIII.RR.", ".IIII.RR.", ".DDDD.RR.", "........."];
        let refine = vec![
            rect(0, 1, 4, 2, 2, Some("IIDD")),
            rect(0, 6, 6, 1, 1, Some("RRRR")),
            rect(1, 1, 4, 1, 3, None),
            rect(1, 6, 6, 1, 1, None),
        ];
        let inputs =
            InputProfile { groups: vec![pulse(1, 2, 1500), pulse(3, 4, 2300)], base: 0.0 };
        Self::assemble_spec(
            "reduced",
            [9, 5, 4],
            &layer0,
            refine,
            8,
            CellRef { layer: 3, x: 4, y: 2, path: Vec::new() },
            Some(vec![33, 84, 45, 45, 1]),
            inputs,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_spec(
        name: &str,
        grid: [usize; 3],
        layer0: &[&str],
        refine: Vec<RefineSpec>,
        observed_igbts: usize,
        sensor: CellRef,
        expect_counts: Option<Vec<usize>>,
        inputs: InputProfile,
    ) -> Self {
        let layout = LayoutSpec {
            grid,
            cell_size: [3e-3, 3e-3, 1e-3],
            max_level: 1,
            layers: vec![
                LayerMap { fill: None, rows: layer0.iter().map(|s| s.to_string()).collect() },
                LayerMap::fill(Role::Copper),
                LayerMap::fill(Role::Substrate),
                LayerMap::fill(Role::Baseplate),
            ],
            refine,
            sources: vec!["IGBT@0".to_string()],
            observe: ObserveSpec {
                ambient: true,
                groups: vec![ObserveGroup { matcher: "IGBT@0".to_string(), count: Some(observed_igbts) }],
                cells: vec![sensor],
            },
            expect_counts,
        };
        ToySpec {
            name: name.to_string(),
            layout,
            weak: weak_scheme(),
            strong: strong_scheme(),
            weak_k: WEAK_K.to_vec(),
            strong_k: STRONG_K.to_vec(),
            z: vec![Z_TRUE],
            dtau: 1.0,
            ambient: 25.0,
            r_var: 1e-6,
            inputs,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "reduced" => Ok(Self::reduced()),
            _ => Err(Error::Config(format!("unknown toy preset '{name}' (expected full or reduced)"))),
        }
    }
}

/// Per-source pulse height; with `Z_TRUE` it heats the IGBTs by more than
/// 10 degrees above ambient on both presets.
pub const DEFAULT_AMPLITUDE: f64 = 2.5;

fn rect(layer: usize, x: usize, x_to: usize, y: usize, y_to: usize, children: Option<&str>) -> RefineSpec {
    RefineSpec {
        layer,
        x,
        y,
        x_to: Some(x_to),
        y_to: Some(y_to),
        path: Vec::new(),
        children: children.map(str::to_string),
    }
}

fn pulse(x_from: usize, x_to: usize, period: usize) -> PulseGroup {
    PulseGroup { x_from, x_to, period, duty: 0.5, phase: 0, amplitude: DEFAULT_AMPLITUDE }
}

fn pair(a: &str, b: &str, class: &str) -> PairSpec {
    PairSpec { a: a.to_string(), b: b.to_string(), class: Some(class.to_string()), decoupled: false }
}

fn decoupled(a: &str, b: &str) -> PairSpec {
    PairSpec { a: a.to_string(), b: b.to_string(), class: None, decoupled: true }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Twelve classes, one per coupling type.
pub fn weak_scheme() -> SchemeSpec {
    SchemeSpec {
        name: "weak".to_string(),
        k: strings(&[
            "igbt-igbt",
            "diode-diode",
            "rect-rect",
            "l2-l2",
            "l3-l3",
            "l4-l4",
            "igbt-l2",
            "diode-l2",
            "rect-l2",
            "l2-l3",
            "l3-l4",
            "l4-amb",
        ]),
        z: strings(&["z"]),
        pairs: vec![
            pair("IGBT@0", "IGBT@0", "igbt-igbt"),
            pair("diode@0", "diode@0", "diode-diode"),
            pair("rectifier@0", "rectifier@0", "rect-rect"),
            decoupled("*@0", "*@0"),
            pair("*@1", "*@1", "l2-l2"),
            pair("*@2", "*@2", "l3-l3"),
            pair("*@3", "*@3", "l4-l4"),
            pair("IGBT@0", "*@1", "igbt-l2"),
            pair("diode@0", "*@1", "diode-l2"),
            pair("rectifier@0", "*@1", "rect-l2"),
            pair("*@1", "*@2", "l2-l3"),
            pair("*@2", "*@3", "l3-l4"),
            pair("*@3", "ambient", "l4-amb"),
        ],
        sources: vec![SourceSpec { matcher: "IGBT@0".to_string(), class: "z".to_string() }],
    }
}

/// Five classes: device in-layer, lower in-layer, device-copper, vertical
/// and ambient.
pub fn strong_scheme() -> SchemeSpec {
    SchemeSpec {
        name: "strong".to_string(),
        k: strings(&["k1", "k2", "k3", "k4", "k5"]),
        z: strings(&["z"]),
        pairs: vec![
            pair("IGBT@0", "IGBT@0", "k1"),
            pair("diode@0", "diode@0", "k1"),
            pair("rectifier@0", "rectifier@0", "k1"),
            decoupled("*@0", "*@0"),
            pair("*@1", "*@1", "k2"),
            pair("*@2", "*@2", "k2"),
            pair("*@3", "*@3", "k2"),
            pair("*@0", "*@1", "k3"),
            pair("*@1", "*@2", "k4"),
            pair("*@2", "*@3", "k4"),
            pair("*@3", "ambient", "k5"),
        ],
        sources: vec![SourceSpec { matcher: "IGBT@0".to_string(), class: "z".to_string() }],
    }
}

/// A constructed toy with operators for both schemes.
#[derive(Clone, Debug)]
pub struct Toy {
    pub spec: ToySpec,
    pub mesh: CompartmentMesh,
    pub weak: SharingScheme,
    pub strong: SharingScheme,
    pub weak_ops: GraphOperators,
    pub strong_ops: GraphOperators,
    pub observed: Vec<usize>,
}

pub fn build_toy(spec: &ToySpec) -> Result<Toy> {
    let mesh = spec.layout.build()?;
    let weak = spec.weak.build()?;
    let strong = spec.strong.build()?;
    if weak.n_k() != spec.weak_k.len() || strong.n_k() != spec.strong_k.len() {
        return Err(Error::Config("true conductance vectors do not match the scheme class counts".to_string()));
    }
    if weak.n_z() != spec.z.len() || strong.n_z() != spec.z.len() {
        return Err(Error::Config("true gain vector does not match the scheme gain classes".to_string()));
    }
    let weak_ops = GraphOperators::build(&mesh, &weak)?;
    let strong_ops = GraphOperators::build(&mesh, &strong)?;
    let observed = mesh.observed_indices();
    Ok(Toy { spec: spec.clone(), mesh, weak, strong, weak_ops, strong_ops, observed })
}

impl Toy {
    pub fn ops(&self, scheme: SchemeChoice) -> &GraphOperators {
        match scheme {
            SchemeChoice::Weak => &self.weak_ops,
            SchemeChoice::Strong => &self.strong_ops,
        }
    }

    pub fn scheme(&self, scheme: SchemeChoice) -> &SharingScheme {
        match scheme {
            SchemeChoice::Weak => &self.weak,
            SchemeChoice::Strong => &self.strong,
        }
    }

    pub fn true_theta(&self, scheme: SchemeChoice) -> ThetaParams {
        let k = match scheme {
            SchemeChoice::Weak => self.spec.weak_k.clone(),
            SchemeChoice::Strong => self.spec.strong_k.clone(),
        };
        ThetaParams { k, z: self.spec.z.clone(), dtau: self.spec.dtau }
    }

    pub fn inputs(&self, steps: usize) -> Result<DMatrix<f64>> {
        self.spec.inputs.sample(&self.mesh, steps)
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_element(self.mesh.len(), self.spec.ambient)
    }

    /// Dataset from the true parameters of `scheme`.
    pub fn generate(&self, scheme: SchemeChoice, noise: NoiseSpec, steps: usize, seed: u64) -> Result<Trajectory> {
        let inputs = self.inputs(steps)?;
        generate_dataset(
            self.ops(scheme),
            &self.true_theta(scheme),
            &self.observed,
            noise,
            &inputs,
            &self.initial_state(),
            self.spec.r_var,
            seed,
        )
    }
}

/// Process noise used for data generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// Neither process nor measurement noise.
    None,
    /// `Q = sigma2 I`
    Isotropic { sigma2: f64 },
    /// `Q = sigma2 A A'` with the true dynamics matrix.
    Aat { sigma2: f64 },
}

impl NoiseSpec {
    pub fn process_covariance(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        match *self {
            NoiseSpec::None => DMatrix::zeros(n, n),
            NoiseSpec::Isotropic { sigma2 } => DMatrix::from_diagonal_element(n, n, sigma2),
            NoiseSpec::Aat { sigma2 } => a * a.transpose() * sigma2,
        }
    }
}

/// Simulates the model with the requested process noise; measurements use
/// `R = r_var I` unless `noise` is [`NoiseSpec::None`].
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    ops: &GraphOperators,
    theta: &ThetaParams,
    observed: &[usize],
    noise: NoiseSpec,
    inputs: &DMatrix<f64>,
    initial: &DVector<f64>,
    r_var: f64,
    seed: u64,
) -> Result<Trajectory> {
    if let NoiseSpec::Isotropic { sigma2 } | NoiseSpec::Aat { sigma2 } = noise {
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise variance must be non-negative, got {sigma2}")));
        }
    }
    if !(r_var >= 0.0) {
        return Err(Error::InvalidArgument(format!("measurement variance must be non-negative, got {r_var}")));
    }
    let a = dynamics_matrix(ops, theta)?;
    let q = noise.process_covariance(&a);
    let r = DMatrix::from_diagonal_element(observed.len(), observed.len(), r_var);
    let model = assemble(ops, theta, observed, q, r)?;
    let switch = match noise {
        NoiseSpec::None => NoiseSwitch { process: false, measurement: false },
        _ => NoiseSwitch { process: true, measurement: true },
    };
    simulate_with(&model, initial, inputs, seed, switch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_toy_counts() {
        let toy = build_toy(&ToySpec::reduced()).unwrap();
        assert_eq!(toy.mesh.layer_counts(), vec![33, 84, 45, 45, 1]);
        assert_eq!(toy.mesh.source_indices().len(), 12);
        assert_eq!(toy.observed.len(), 10);
        assert_eq!((toy.weak.n_k(), toy.strong.n_k()), (12, 5));
    }

    #[test]
    fn pulses() {
        let g = PulseGroup { x_from: 0, x_to: 0, period: 4, duty: 0.5, phase: 1, amplitude: 2.0 };
        let v: Vec<f64> = (0..5).map(|t| g.value(t)).collect();
        assert_eq!(v, vec![2.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("Weak".parse::<SchemeChoice>().unwrap(), SchemeChoice::Weak);
        assert!("medium".parse::<SchemeChoice>().is_err());
    }

    #[test]
    fn zero_variance_matches_noiseless_states() {
        let toy = build_toy(&ToySpec::reduced()).unwrap();
        let a = toy.generate(SchemeChoice::Strong, NoiseSpec::None, 50, 3).unwrap();
        let b = toy.generate(SchemeChoice::Strong, NoiseSpec::Aat { sigma2: 0.0 }, 50, 3).unwrap();
        assert_eq!(a.states, b.states);
    }
}
