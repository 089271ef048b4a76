//! Experiment configuration file.
//!
//! ```toml
//! [toy]
//! preset = "reduced"        # or: file = "my_toy.toml"
//!
//! [generate]
//! scheme = "weak"
//! steps = 5000
//! seed = 7
//! noise = { kind = "aat", sigma2 = 1e-4 }
//!
//! [identify]
//! scheme = "strong"
//! constraint = "qI"
//! max_iter = 500
//!
//! [predict]
//! horizon = 18000
//!
//! [paths]
//! out = "runs/weak"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use compartment::datagen::{NoiseSpec, SchemeChoice, ToySpec};
use compartment::estimation::ConstraintKind;
use compartment::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub toy: ToySource,
    pub generate: GenerateSection,
    pub identify: IdentifySection,
    pub predict: PredictSection,
    pub paths: PathsSection,
}

/// Where the toy definition comes from: a built-in preset, a TOML file
/// holding a full toy spec, or the spec inline.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub spec: Option<Box<ToySpec>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub scheme: SchemeChoice,
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Overrides the toy's measurement variance.
    pub r_var: Option<f64>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { scheme: SchemeChoice::Strong, steps: 5000, seed: 1, noise: NoiseSpec::None, r_var: None }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifySection {
    pub scheme: SchemeChoice,
    pub constraint: ConstraintKind,
    pub max_iter: usize,
    pub theta_tol: f64,
    /// Starting value of every `k` and `z`.
    pub theta_init: f64,
    pub q_init: f64,
}

impl Default for IdentifySection {
    fn default() -> Self {
        IdentifySection {
            scheme: SchemeChoice::Strong,
            constraint: ConstraintKind::ScalarIdentity,
            max_iter: 500,
            theta_tol: 1e-6,
            theta_init: 0.01,
            q_init: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub horizon: i64,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection { horizon: 18000 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory written by `generate`.
    pub data: Option<PathBuf>,
    /// Estimate file written by `identify`.
    pub estimate: Option<PathBuf>,
    /// Ground-truth states CSV for `predict`.
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.toy.file);
        fix(&mut self.paths.data);
        fix(&mut self.paths.estimate);
        fix(&mut self.paths.truth);
        fix(&mut self.paths.out);
    }

    /// The configured toy, or `None` when the config does not name one.
    pub fn toy_spec(&self) -> Result<Option<ToySpec>> {
        let t = &self.toy;
        let given = t.preset.is_some() as u8 + t.file.is_some() as u8 + t.spec.is_some() as u8;
        if given > 1 {
            return Err(Error::Config("[toy] takes exactly one of preset, file or spec".to_string()));
        }
        if let Some(name) = &t.preset {
            return ToySpec::preset(name).map(Some);
        }
        if let Some(path) = &t.file {
            return read_toy(path).map(Some);
        }
        Ok(t.spec.as_deref().cloned())
    }
}

pub fn read_toy(path: &Path) -> Result<ToySpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
