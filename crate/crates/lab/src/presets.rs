//! Named configurations.

use polaron_core::polaron::Init;
use polaron_core::{KernelMode, LatticeSpec, NuclearDensity, ResponseParams, ScfParams, Statistics};

use crate::config::{Experiment, ExperimentConfig};

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: fn() -> ExperimentConfig,
}

fn lattice(dim: usize, n_c: usize, m: usize) -> LatticeSpec {
    LatticeSpec::new(dim, 1.0, n_c, m).expect("valid preset lattice")
}

fn deep_well(dim: usize, width: f64) -> NuclearDensity {
    let c = if dim == 1 { [0.5, 0.0, 0.0] } else { [0.5; 3] };
    NuclearDensity::single_site(c, width, 1.0)
}

fn base(name: &str, lattice: LatticeSpec, nuclei: NuclearDensity, kernel: KernelMode, experiment: Experiment) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some(name.to_string()),
        seed: 20240611,
        lattice,
        nuclei,
        mass: 1.0,
        kernel,
        scf: ScfParams::default(),
        response: ResponseParams::default(),
        output: None,
        experiment,
    }
}

/// Response solves accurate well below the outer tolerance of the polaron presets.
fn tight() -> ResponseParams {
    ResponseParams { gap_tol: Some(1e-11), ..ResponseParams::default() }
}

fn fcrys_props() -> Experiment {
    Experiment::FcrysProps {
        samples: 50,
        triples: 50,
        pairs: 50,
        translations: 20,
        strict: 10,
        shifts: vec![1.0, 3.0],
        thetas: vec![0.25, 0.5, 0.75],
        t: 0.5,
    }
}

/// Uniform background: a metal, rejected by the insulator check.
pub fn free() -> ExperimentConfig {
    base("free", lattice(1, 16, 4), NuclearDensity::Uniform { z: 1 }, KernelMode::Bare, Experiment::Crystal {})
}

/// One narrow Gaussian nucleus per cell in 1D; the workhorse.
pub fn deepwell_1d() -> ExperimentConfig {
    base("deepwell-1d", lattice(1, 16, 16), deep_well(1, 0.1), KernelMode::Bare, fcrys_props())
}

/// Small 3D crystal for single-particle runs. At this size the reduced Hartree-Fock bands
/// overlap and the run stops at the insulator check.
pub fn deepwell_3d_small() -> ExperimentConfig {
    let e1 = Experiment::E1 {
        outer_tol: 1e-8,
        max_outer: 100,
        init: Init::Gaussian { width: 0.5 },
        lambdas: Vec::new(),
        profile_s: 0.25,
    };
    base("deepwell-3d-small", lattice(3, 4, 2), deep_well(3, 0.3), KernelMode::Bare, e1)
}

/// Single polaron on the deep-well crystal.
pub fn e1_1d() -> ExperimentConfig {
    let e1 = Experiment::E1 {
        outer_tol: 1e-11,
        max_outer: 300,
        init: Init::UperBump { width: 1.0 },
        lambdas: Vec::new(),
        profile_s: 0.25,
    };
    ExperimentConfig { preset: Some("e1-1d".into()), response: tight(), experiment: e1, ..deepwell_1d() }
}

/// Deep-well crystal on a long supercell for the localization radii up to 16a.
pub fn localization_1d() -> ExperimentConfig {
    let exp = Experiment::Localization { radii: vec![2.0, 4.0, 8.0, 16.0], probe_radius: 0.9, probe_charge: 0.25, approximation_threshold: 0.3 };
    ExperimentConfig { preset: Some("localization-1d".into()), lattice: lattice(1, 16, 66), experiment: exp, ..deepwell_1d() }
}

/// Two well-separated bumps on a long supercell with a screened kernel.
pub fn two_bump_1d() -> ExperimentConfig {
    let exp = Experiment::Decoupling { separations: vec![2.0, 4.0, 8.0, 16.0], radius: 0.9, charges: [1.0, 1.0] };
    base("two-bump-1d", lattice(1, 16, 36), deep_well(1, 0.1), KernelMode::Yukawa { mu: 0.25 }, exp)
}

/// Dilated trial states and the macroscopic limit with a screened kernel.
pub fn screened_1d() -> ExperimentConfig {
    let exp = Experiment::Macrolimit { lambdas: vec![4.0, 8.0, 16.0], profile_s: 0.25 };
    base("screened-1d", lattice(1, 16, 32), deep_well(1, 0.1), KernelMode::Yukawa { mu: 1.0 }, exp)
}

/// Trial-state sweep on the screened crystal.
pub fn trial_1d() -> ExperimentConfig {
    let exp = Experiment::E1 {
        outer_tol: 1e-11,
        max_outer: 300,
        init: Init::UperBump { width: 1.0 },
        lambdas: vec![4.0, 8.0, 16.0],
        profile_s: 0.25,
    };
    ExperimentConfig { preset: Some("trial-1d".into()), response: tight(), experiment: exp, ..screened_1d() }
}

/// Two polarons on a 48-point supercell.
pub fn pair_1d() -> ExperimentConfig {
    let exp = Experiment::Binding { n: 2, shift: 8.0, outer_tol: 1e-9, statistics: Statistics::Fermion };
    base("pair-1d", lattice(1, 4, 12), deep_well(1, 0.25), KernelMode::Bare, exp)
}

/// Pekar-Choquard ground state.
pub fn choquard_1d() -> ExperimentConfig {
    base("choquard-1d", lattice(1, 8, 16), deep_well(1, 0.1), KernelMode::Bare, Experiment::Choquard { eps: 3.0, tol: 1e-8 })
}

pub const PRESETS: &[Preset] = &[
    Preset { name: "free", summary: "uniform background, expected to fail the insulator check", build: free },
    Preset { name: "deepwell-1d", summary: "1D deep-well crystal, response property suites", build: deepwell_1d },
    Preset { name: "deepwell-3d-small", summary: "3D deep-well crystal, single polaron; metallic at this grid size", build: deepwell_3d_small },
    Preset { name: "e1-1d", summary: "single polaron on the 1D deep-well crystal", build: e1_1d },
    Preset { name: "localization-1d", summary: "localization errors on a 66-cell supercell", build: localization_1d },
    Preset { name: "two-bump-1d", summary: "decoupling of separated charges, screened kernel", build: two_bump_1d },
    Preset { name: "screened-1d", summary: "dielectric constant from dilated charges", build: screened_1d },
    Preset { name: "trial-1d", summary: "single polaron with dilated trial states", build: trial_1d },
    Preset { name: "pair-1d", summary: "two polarons and the binding table", build: pair_1d },
    Preset { name: "choquard-1d", summary: "Choquard ground state", build: choquard_1d },
];

pub fn get(name: &str) -> Option<ExperimentConfig> {
    PRESETS.iter().find(|p| p.name == name).map(|p| (p.build)())
}
