//! Experiment configuration, parsed from TOML, and its content hash.

use std::path::{Path, PathBuf};

use polaron_core::polaron::Init;
use polaron_core::{KernelMode, LatticeSpec, NuclearDensity, ResponseParams, ScfParams, Statistics};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub lattice: LatticeSpec,
    pub nuclei: NuclearDensity,
    /// Polaron mass.
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "bare")]
    pub kernel: KernelMode,
    #[serde(default)]
    pub scf: ScfParams,
    #[serde(default)]
    pub response: ResponseParams,
    /// Output directory; not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub experiment: Experiment,
}

fn one() -> f64 {
    1.0
}

fn bare() -> KernelMode {
    KernelMode::Bare
}

/// Lengths are in units of the lattice constant a.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Crystal {},
    FcrysProps {
        #[serde(default = "d50")]
        samples: usize,
        #[serde(default = "d50")]
        triples: usize,
        #[serde(default = "d50")]
        pairs: usize,
        #[serde(default = "d20")]
        translations: usize,
        #[serde(default = "d10")]
        strict: usize,
        #[serde(default = "default_shifts")]
        shifts: Vec<f64>,
        #[serde(default = "default_thetas")]
        thetas: Vec<f64>,
        #[serde(default = "half")]
        t: f64,
    },
    Decoupling {
        #[serde(default = "default_scales")]
        separations: Vec<f64>,
        #[serde(default = "default_bump")]
        radius: f64,
        #[serde(default = "default_charges")]
        charges: [f64; 2],
    },
    Localization {
        #[serde(default = "default_scales")]
        radii: Vec<f64>,
        #[serde(default = "default_bump")]
        probe_radius: f64,
        #[serde(default = "one")]
        probe_charge: f64,
        /// Bound on q_norm(Q - X Q X) / q_norm(Q) at the largest radius.
        #[serde(default = "default_approximation")]
        approximation_threshold: f64,
    },
    E1 {
        #[serde(default = "default_outer_tol")]
        outer_tol: f64,
        #[serde(default = "d200")]
        max_outer: usize,
        #[serde(default = "default_init")]
        init: Init,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_profile")]
        profile_s: f64,
    },
    Binding {
        #[serde(default = "two")]
        n: usize,
        #[serde(default = "default_shift")]
        shift: f64,
        #[serde(default = "default_outer_tol")]
        outer_tol: f64,
        #[serde(default)]
        statistics: Statistics,
    },
    Macrolimit {
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_profile")]
        profile_s: f64,
    },
    Choquard {
        eps: f64,
        #[serde(default = "default_choquard_tol")]
        tol: f64,
    },
}

fn d10() -> usize {
    10
}
fn d20() -> usize {
    20
}
fn d50() -> usize {
    50
}
fn d200() -> usize {
    200
}
fn two() -> usize {
    2
}
fn half() -> f64 {
    0.5
}
fn default_shifts() -> Vec<f64> {
    vec![1.0, 3.0]
}
fn default_thetas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}
fn default_scales() -> Vec<f64> {
    vec![2.0, 4.0, 8.0, 16.0]
}
fn default_bump() -> f64 {
    0.9
}
fn default_charges() -> [f64; 2] {
    [1.0, 1.0]
}
fn default_outer_tol() -> f64 {
    1e-9
}
fn default_init() -> Init {
    Init::Gaussian { width: 1.0 }
}
fn default_lambdas() -> Vec<f64> {
    vec![4.0, 8.0, 16.0]
}
fn default_profile() -> f64 {
    0.25
}
fn default_shift() -> f64 {
    8.0
}
fn default_choquard_tol() -> f64 {
    1e-8
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Crystal {} => "exp-crystal",
            Self::FcrysProps { .. } => "exp-fcrys-props",
            Self::Decoupling { .. } => "exp-decoupling",
            Self::Localization { .. } => "exp-localization",
            Self::E1 { .. } => "exp-e1",
            Self::Binding { .. } => "exp-binding",
            Self::Macrolimit { .. } => "exp-macrolimit",
            Self::Choquard { .. } => "exp-choquard",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.lattice.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.nuclei.z().map_err(|e| LabError::Config(e.to_string()))?;
        if !(self.mass > 0.0) {
            return Err(LabError::Config(format!("mass {} must be positive", self.mass)));
        }
        if let KernelMode::Yukawa { mu } = self.kernel {
            if !(mu > 0.0) {
                return Err(LabError::Config(format!("screening {mu} must be positive")));
            }
        }
        if let Experiment::Choquard { eps, .. } = self.experiment {
            if !(eps > 1.0) {
                return Err(LabError::Config(format!("dielectric constant {eps} must exceed 1")));
            }
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        digest(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Hash of the fields the crystal depends on.
    pub fn crystal_hash(&self) -> String {
        let key = serde_json::json!({
            "lattice": self.lattice,
            "nuclei": self.nuclei,
            "mass": self.mass,
            "scf": self.scf,
        });
        digest(key.to_string().as_bytes())
    }
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
seed = 3
mass = 1.0

[lattice]
dim = 1
a = 1.0
n_c = 8
m = 4

[nuclei]
kind = "gaussian"
sites = [{ center = [0.5, 0.0, 0.0], width = 0.1, charge = 1.0 }]

[kernel]
kind = "yukawa"
mu = 0.5

[experiment]
kind = "decoupling"
separations = [1.0, 2.0]
"#;

    #[test]
    fn round_trip_and_defaults() {
        let c = ExperimentConfig::from_toml(TEXT).unwrap();
        assert_eq!(c.scf, ScfParams::default());
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.experiment.name(), "exp-decoupling");
    }

    #[test]
    fn hash_ignores_key_order_and_output() {
        let c = ExperimentConfig::from_toml(TEXT).unwrap();
        let reordered = TEXT.replace("seed = 3\nmass = 1.0", "mass = 1.0\nseed = 3");
        let d = ExperimentConfig::from_toml(&reordered).unwrap();
        assert_eq!(c.hash(), d.hash());
        let mut e = c.clone();
        e.output = Some("elsewhere".into());
        assert_eq!(c.hash(), e.hash());
        e.seed = 4;
        assert_ne!(c.hash(), e.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
        let bad = TEXT.replace("n_c = 8", "n_c = 3");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(LabError::Config(_))));
        let unknown = TEXT.replace("separations", "separation_list");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
    }
}

fn default_approximation() -> f64 {
    0.1
}
