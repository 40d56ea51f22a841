//! Periodic reduced Hartree-Fock crystal: SCF on Bloch fibers, band structure,
//! insulator check and the polaron band bottom.
//!
//! The SCF runs on the unit cell with the Bloch vectors commensurate with the
//! supercell, so the converged fibers reproduce the supercell spectrum exactly.
//! The Fermi sea is then rebuilt densely on the supercell for the response solver.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coulomb::CoulombKernel;
use crate::error::{Error, Result};
use crate::grid::{self, FieldKind, GridFunction, LatticeSpec};
use crate::linalg::{self, Eigen};

/// Mass of the crystal electrons (atomic units).
pub const ELECTRON_MASS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    /// Position inside the unit cell.
    pub center: [f64; 3],
    pub width: f64,
    pub charge: f64,
}

/// Periodic nuclear charge density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NuclearDensity {
    Uniform { z: usize },
    Gaussian { sites: Vec<Site> },
}

impl NuclearDensity {
    pub fn single_site(center: [f64; 3], width: f64, charge: f64) -> Self {
        Self::Gaussian { sites: vec![Site { center, width, charge }] }
    }

    pub fn z(&self) -> Result<usize> {
        match self {
            Self::Uniform { z } if *z > 0 => Ok(*z),
            Self::Uniform { .. } => Err(Error::Invalid("nuclear charge must be positive".into())),
            Self::Gaussian { sites } => {
                if sites.is_empty() {
                    return Err(Error::Invalid("no nuclear sites".into()));
                }
                for s in sites {
                    if !(s.width > 0.0 && s.charge > 0.0) {
                        return Err(Error::Invalid(format!("bad site {s:?}")));
                    }
                }
                let total: f64 = sites.iter().map(|s| s.charge).sum();
                if (total - total.round()).abs() > 1e-9 || total.round() < 1.0 {
                    return Err(Error::Invalid(format!("total nuclear charge {total} is not a positive integer")));
                }
                Ok(total.round() as usize)
            }
        }
    }

    /// Samples on the unit cell, periodized and renormalized so that the cell integral is Z.
    pub fn sample(&self, cell: &LatticeSpec) -> Result<Vec<f64>> {
        let z = self.z()? as f64;
        let n = cell.n_points();
        let mut values = match self {
            Self::Uniform { .. } => vec![1.0; n],
            Self::Gaussian { sites } => {
                let d = cell.dim as i32;
                let images: Vec<[f64; 3]> = image_offsets(cell.dim, 3)
                    .into_iter()
                    .map(|o| [o[0] * cell.a, o[1] * cell.a, o[2] * cell.a])
                    .collect();
                (0..n)
                    .map(|i| {
                        let x = cell.position(i);
                        let mut acc = 0.0;
                        for s in sites {
                            let norm = s.charge / (2.0 * PI * s.width * s.width).powf(0.5 * d as f64);
                            for off in &images {
                                let r2: f64 = (0..cell.dim)
                                    .map(|ax| (x[ax] - s.center[ax] - off[ax]).powi(2))
                                    .sum();
                                acc += norm * (-r2 / (2.0 * s.width * s.width)).exp();
                            }
                        }
                        acc
                    })
                    .collect()
            }
        };
        let total: f64 = values.iter().sum::<f64>() * cell.weight();
        values.iter_mut().for_each(|v| *v *= z / total);
        Ok(values)
    }
}

fn image_offsets(dim: usize, reach: i32) -> Vec<[f64; 3]> {
    let range: Vec<i32> = (-reach..=reach).collect();
    let mut out = vec![[0.0; 3]];
    for axis in 0..dim {
        let mut next = Vec::new();
        for base in &out {
            for &r in &range {
                let mut v = *base;
                v[axis] = r as f64;
                next.push(v);
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfParams {
    pub mixing: f64,
    pub max_iter: usize,
    /// Bound on the Frobenius distance between the output projector and the
    /// Aufbau projector of its own mean field.
    pub tol: f64,
    pub gap_tol: f64,
    /// Uniform Bloch points per axis added to the commensurate set for the gap check.
    pub check_k: usize,
}

impl Default for ScfParams {
    fn default() -> Self {
        Self { mixing: 0.5, max_iter: 300, tol: 1e-9, gap_tol: 1e-6, check_k: 8 }
    }
}

/// Bloch vectors k = 2 pi j / L, j in [0, M)^d: the fibers of the supercell.
pub fn commensurate_kpoints(spec: &LatticeSpec) -> Vec<[f64; 3]> {
    uniform_kpoints(spec.dim, spec.a, spec.m)
}

/// Uniform Bloch grid with `k_per_axis` points per axis, k = 2 pi j / (K a).
pub fn uniform_kpoints(dim: usize, a: f64, k_per_axis: usize) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    for axis in 0..dim {
        let mut next = Vec::new();
        for base in &out {
            for j in 0..k_per_axis {
                let mut v = *base;
                v[axis] = 2.0 * PI * j as f64 / (k_per_axis as f64 * a);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Kinetic part -(grad + ik)^2/(2 mass) of one Bloch fiber on the unit cell.
pub fn fiber_kinetic(cell: &LatticeSpec, k: &[f64; 3], mass: f64) -> DMatrix<Complex64> {
    let symbol: Vec<Complex64> = grid::wavevectors(cell)
        .iter()
        .map(|g| {
            let s: f64 = (0..3).map(|ax| (g[ax] + k[ax]).powi(2)).sum();
            Complex64::new(s / (2.0 * mass), 0.0)
        })
        .collect();
    let kernel = grid::symbol_kernel(cell, &symbol);
    grid::circulant(cell, &kernel)
}

fn with_potential(t: &DMatrix<Complex64>, v: &[f64]) -> DMatrix<Complex64> {
    let mut h = t.clone();
    for (i, vi) in v.iter().enumerate() {
        h[(i, i)] += Complex64::new(*vi, 0.0);
    }
    h
}

/// Sorted fiber eigenvalues of -(grad + ik)^2/(2 mass) + V for each k. `v` lives on the unit cell.
pub fn band_structure(v: &GridFunction, mass: f64, k_points: &[[f64; 3]]) -> Result<Vec<Vec<f64>>> {
    let cell = *v.spec();
    if cell.m != 1 {
        return Err(Error::Invalid("band_structure expects a unit-cell potential".into()));
    }
    let vr = v.to_real()?;
    Ok(k_points
        .par_iter()
        .map(|k| linalg::herm_eig(with_potential(&fiber_kinetic(&cell, k, mass), &vr)).0)
        .collect())
}

/// Gap between bands Z and Z+1 over all k, and the midgap Fermi level.
/// Gaps at round-off level count as closed.
pub fn insulator_check(bands: &[Vec<f64>], z: usize) -> Result<(f64, f64)> {
    if z == 0 || bands.iter().any(|b| b.len() <= z) {
        return Err(Error::Invalid(format!("need more than {z} bands at every k")));
    }
    let homo = bands.iter().map(|b| b[z - 1]).fold(f64::NEG_INFINITY, f64::max);
    let lumo = bands.iter().map(|b| b[z]).fold(f64::INFINITY, f64::min);
    if lumo - homo <= 1e-10 * (1.0 + homo.abs().max(lumo.abs())) {
        return Err(Error::InsulatorViolation { homo, lumo });
    }
    Ok((lumo - homo, 0.5 * (homo + lumo)))
}

/// Bottom of the polaron band and its periodic Bloch function.
#[derive(Debug, Clone)]
pub struct PolaronBand {
    pub e_per: f64,
    /// Normalized on the unit cell (real when the minimum sits at k = 0).
    pub u_per: GridFunction,
    pub k_min: [f64; 3],
    pub at_gamma: bool,
}

/// E_per = inf spec(-Delta/(2m) + V) over the supercell-commensurate fibers.
/// `at_gamma` also consults the uniform check grid.
pub fn polaron_band(v: &GridFunction, m: f64, spec: &LatticeSpec, check_k: usize) -> Result<PolaronBand> {
    let cell = *v.spec();
    let vr = v.to_real()?;
    let kc = commensurate_kpoints(spec);
    let mut best = (f64::INFINITY, 0usize);
    let lows: Vec<f64> = kc
        .par_iter()
        .map(|k| linalg::herm_eig(with_potential(&fiber_kinetic(&cell, k, m), &vr)).0[0])
        .collect();
    for (i, e) in lows.iter().enumerate() {
        if *e < best.0 {
            best = (*e, i);
        }
    }
    let extra: Vec<f64> = uniform_kpoints(cell.dim, cell.a, check_k.max(1))
        .par_iter()
        .map(|k| linalg::herm_eig(with_potential(&fiber_kinetic(&cell, k, m), &vr)).0[0])
        .collect();
    let overall = extra.iter().copied().fold(best.0, f64::min);
    let e_gamma = lows[0];
    let at_gamma = e_gamma <= overall + 1e-12 * (1.0 + overall.abs());
    let k_min = if at_gamma { [0.0; 3] } else { kc[best.1] };
    let norm = 1.0 / cell.weight().sqrt();
    let u_per = if at_gamma {
        let mut h = grid::kinetic_matrix(&cell, m);
        for (i, v) in vr.iter().enumerate() {
            h[(i, i)] += v;
        }
        let eig = linalg::sym_eig(h);
        let mut u: Vec<f64> = eig.vectors.column(0).iter().map(|x| x * norm).collect();
        if u.iter().sum::<f64>() < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        GridFunction::real(cell, u)?
    } else {
        let (_, vecs) = linalg::herm_eig(with_potential(&fiber_kinetic(&cell, &k_min, m), &vr));
        GridFunction::complex(cell, vecs.column(0).iter().map(|c| c * norm).collect())?
    };
    let e_per = if at_gamma { e_gamma } else { best.0 };
    Ok(PolaronBand { e_per, u_per, k_min, at_gamma })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScfReport {
    pub iterations: usize,
    pub residual: f64,
    pub residual_trace: Vec<f64>,
    pub energy_trace: Vec<f64>,
    pub mixing_trace: Vec<f64>,
}

/// Converged periodic Fermi sea together with its dense supercell realization.
#[derive(Debug, Clone)]
pub struct CrystalState {
    pub spec: LatticeSpec,
    pub z: usize,
    /// Polaron mass.
    pub mass: f64,
    pub v_cell: Vec<f64>,
    pub rho_cell: Vec<f64>,
    pub v_super: Vec<f64>,
    pub rho_super: Vec<f64>,
    pub eps_f: f64,
    pub gap: f64,
    /// Eigen-decomposition of H0 = -Delta/2 + V0 on the supercell grid.
    pub h0: Eigen,
    pub gamma0: DMatrix<f64>,
    pub n_occ: usize,
    pub band: PolaronBand,
    pub scf: ScfReport,
}

struct Aufbau {
    occupied: Vec<DMatrix<Complex64>>,
    rho: Vec<f64>,
    kinetic: f64,
}

struct FiberSolver {
    cell: LatticeSpec,
    z: usize,
    gap_tol: f64,
    kin: Vec<DMatrix<Complex64>>,
    check: Vec<DMatrix<Complex64>>,
}

impl FiberSolver {
    fn new(spec: &LatticeSpec, z: usize, params: &ScfParams) -> Self {
        let cell = spec.unit_cell();
        let kin = commensurate_kpoints(spec).iter().map(|k| fiber_kinetic(&cell, k, ELECTRON_MASS)).collect();
        let check = uniform_kpoints(cell.dim, cell.a, params.check_k.max(1))
            .iter()
            .map(|k| fiber_kinetic(&cell, k, ELECTRON_MASS))
            .collect();
        Self { cell, z, gap_tol: params.gap_tol, kin, check }
    }

    fn solve(&self, v: &[f64]) -> Result<Aufbau> {
        let z = self.z;
        let solved: Vec<(Vec<f64>, DMatrix<Complex64>)> =
            self.kin.par_iter().map(|t| linalg::herm_eig(with_potential(t, v))).collect();
        let mut bands: Vec<Vec<f64>> = solved.iter().map(|(e, _)| e.clone()).collect();
        bands.extend(self.check.par_iter().map(|t| linalg::herm_eig(with_potential(t, v)).0).collect::<Vec<_>>());
        let (gap, _) = insulator_check(&bands, z)?;
        if gap <= self.gap_tol {
            let homo = bands.iter().map(|b| b[z - 1]).fold(f64::NEG_INFINITY, f64::max);
            let lumo = bands.iter().map(|b| b[z]).fold(f64::INFINITY, f64::min);
            return Err(Error::InsulatorViolation { homo, lumo });
        }
        let n = self.cell.n_points();
        let nk = solved.len() as f64;
        let w = self.cell.weight();
        let mut rho = vec![0.0; n];
        let mut band_sum = 0.0;
        let mut occupied = Vec::with_capacity(solved.len());
        for (e, vecs) in &solved {
            band_sum += e[..z].iter().sum::<f64>() / nk;
            let occ = vecs.columns(0, z).into_owned();
            for (x, r) in rho.iter_mut().enumerate() {
                *r += occ.row(x).iter().map(|c| c.norm_sqr()).sum::<f64>() / (nk * w);
            }
            occupied.push(occ);
        }
        let vrho: f64 = v.iter().zip(&rho).map(|(a, b)| a * b).sum::<f64>() * w;
        Ok(Aufbau { occupied, rho, kinetic: band_sum - vrho })
    }
}

fn projector_distance(a: &Aufbau, b: &Aufbau, z: usize) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.occupied.iter().zip(&b.occupied) {
        let overlap = p.adjoint() * q;
        s += 2.0 * z as f64 - 2.0 * overlap.iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    s.max(0.0).sqrt()
}

/// Self-consistent periodic reduced Hartree-Fock ground state by damped density mixing.
pub fn scf_solve(nuclei: &NuclearDensity, spec: &LatticeSpec, mass: f64, params: &ScfParams) -> Result<CrystalState> {
    spec.validate()?;
    if !(params.mixing > 0.0 && params.mixing <= 1.0) {
        return Err(Error::Invalid(format!("mixing {} not in (0, 1]", params.mixing)));
    }
    let z = nuclei.z()?;
    let cell = spec.unit_cell();
    let mu = nuclei.sample(&cell)?;
    let kernel = CoulombKernel::bare(&cell);
    let solver = FiberSolver::new(spec, z, params);
    let potential = |rho: &[f64]| {
        let diff: Vec<f64> = rho.iter().zip(&mu).map(|(a, b)| a - b).collect();
        kernel.potential(&diff)
    };
    let energy = |rho: &[f64], kin: f64| {
        let diff: Vec<f64> = rho.iter().zip(&mu).map(|(a, b)| a - b).collect();
        kin + 0.5 * kernel.self_energy(&diff)
    };

    let uniform = vec![z as f64 / cell.volume(); cell.n_points()];
    let first = solver.solve(&potential(&uniform))?;
    let mut state = (first.rho.clone(), first.kinetic);
    let mut e_state = energy(&state.0, state.1);
    let mut out = solver.solve(&potential(&state.0))?;
    let mut alpha = params.mixing;
    let mut report = ScfReport { energy_trace: vec![e_state], ..Default::default() };

    for iter in 0..params.max_iter {
        let next = solver.solve(&potential(&out.rho))?;
        let r = projector_distance(&out, &next, z);
        report.residual_trace.push(r);
        if r <= params.tol {
            report.iterations = iter + 1;
            report.residual = r;
            let v = potential(&out.rho);
            let mut crystal = CrystalState::from_potential(spec, z, v, mass, params)?;
            crystal.scf = report;
            return Ok(crystal);
        }
        let tol_e = 1e-13 * (1.0 + e_state.abs());
        let (trial, e_trial) = loop {
            let rho: Vec<f64> = state.0.iter().zip(&out.rho).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
            let kin = (1.0 - alpha) * state.1 + alpha * out.kinetic;
            let e = energy(&rho, kin);
            if e <= e_state + tol_e {
                break ((rho, kin), e);
            }
            alpha *= 0.5;
            if alpha < 1e-10 {
                return Err(Error::Diverged {
                    what: "scf mixing",
                    iterations: iter + 1,
                    last: r,
                    trace: report.residual_trace,
                });
            }
        };
        report.mixing_trace.push(alpha);
        state = trial;
        e_state = e_trial;
        report.energy_trace.push(e_state);
        out = if alpha == 1.0 { next } else { solver.solve(&potential(&state.0))? };
    }
    Err(Error::Diverged {
        what: "scf",
        iterations: params.max_iter,
        last: report.residual_trace.last().copied().unwrap_or(f64::NAN),
        trace: report.residual_trace,
    })
}

impl CrystalState {
    /// Fermi sea of a fixed periodic potential given on the unit cell.
    /// The potential is shifted to zero mean.
    pub fn from_potential(spec: &LatticeSpec, z: usize, mut v_cell: Vec<f64>, mass: f64, params: &ScfParams) -> Result<Self> {
        spec.validate()?;
        let cell = spec.unit_cell();
        if v_cell.len() != cell.n_points() {
            return Err(Error::Invalid("potential does not match the unit cell".into()));
        }
        if !(mass > 0.0) {
            return Err(Error::Invalid(format!("polaron mass {mass} must be positive")));
        }
        let mean = v_cell.iter().sum::<f64>() / v_cell.len() as f64;
        v_cell.iter_mut().for_each(|v| *v -= mean);

        let solver = FiberSolver::new(spec, z, params);
        let aufbau = solver.solve(&v_cell)?;
        let v_gf = GridFunction::real(cell, v_cell.clone())?;
        let mut k_all = commensurate_kpoints(spec);
        k_all.extend(uniform_kpoints(cell.dim, cell.a, params.check_k.max(1)));
        let bands = band_structure(&v_gf, ELECTRON_MASS, &k_all)?;
        let (gap, eps_f) = insulator_check(&bands, z)?;

        let v_super = grid::periodize(spec, &v_cell);
        let mut h = grid::kinetic_matrix(spec, ELECTRON_MASS);
        for (i, v) in v_super.iter().enumerate() {
            h[(i, i)] += v;
        }
        let h0 = linalg::sym_eig(h);
        let n_occ = z * spec.n_cells();
        Self::assemble(spec, z, mass, v_cell, aufbau.rho, v_super, eps_f, gap, h0, n_occ, params.check_k, ScfReport::default())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        spec: &LatticeSpec,
        z: usize,
        mass: f64,
        v_cell: Vec<f64>,
        rho_cell: Vec<f64>,
        v_super: Vec<f64>,
        eps_f: f64,
        gap: f64,
        h0: Eigen,
        n_occ: usize,
        check_k: usize,
        scf: ScfReport,
    ) -> Result<Self> {
        let npts = spec.n_points();
        if n_occ >= npts {
            return Err(Error::Invalid("every grid state is occupied".into()));
        }
        let (homo, lumo) = (h0.values[n_occ - 1], h0.values[n_occ]);
        if !(homo < eps_f && eps_f < lumo) {
            return Err(Error::InsulatorViolation { homo, lumo });
        }
        let gamma0 = linalg::projector(&h0.vectors, 0..n_occ);
        let w = spec.weight();
        let rho_super = (0..npts).map(|i| gamma0[(i, i)] / w).collect();
        let band = polaron_band(&GridFunction::real(spec.unit_cell(), v_cell.clone())?, mass, spec, check_k)?;
        Ok(Self { spec: *spec, z, mass, v_cell, rho_cell, v_super, rho_super, eps_f, gap, h0, gamma0, n_occ, band, scf })
    }

    pub fn e_per(&self) -> f64 {
        self.band.e_per
    }

    pub fn potential(&self) -> GridFunction {
        GridFunction::real(self.spec.unit_cell(), self.v_cell.clone()).expect("cell sized")
    }

    /// H0 - eps_F eigenvalues, ascending.
    pub fn shifted_levels(&self) -> DVector<f64> {
        self.h0.values.map(|e| e - self.eps_f)
    }

    /// Dense H0 = -Delta/2 + V0 on the supercell.
    pub fn hamiltonian(&self) -> DMatrix<f64> {
        linalg::sym_function(&self.h0, |x| x)
    }

    /// Dense -Delta/(2m) + V0 on the supercell for the polaron mass.
    pub fn polaron_hamiltonian(&self) -> DMatrix<f64> {
        let mut h = grid::kinetic_matrix(&self.spec, self.mass);
        for (i, v) in self.v_super.iter().enumerate() {
            h[(i, i)] += v;
        }
        h
    }

    /// Same Fermi sea with a different polaron mass.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        let band = polaron_band(&self.potential(), mass, &self.spec, ScfParams::default().check_k)?;
        Ok(Self { mass, band, ..self.clone() })
    }

    /// Write the JSON header and binary arrays into `dir`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = CrystalHeader {
            spec: self.spec,
            z: self.z,
            m: self.mass,
            eps_f: self.eps_f,
            gap: self.gap,
            e_per: self.band.e_per,
            scf_residual: self.scf.residual,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            n_occ: self.n_occ,
            k_min: self.band.k_min,
            at_gamma: self.band.at_gamma,
            scf: self.scf.clone(),
        };
        fs::write(dir.join("crystal.json"), serde_json::to_vec_pretty(&header)?)?;
        let cell = self.spec.unit_cell();
        GridFunction::real(cell, self.v_cell.clone())?.write(&dir.join("v_per.bin"))?;
        GridFunction::real(cell, self.rho_cell.clone())?.write(&dir.join("rho0_cell.bin"))?;
        self.band.u_per.write(&dir.join("u_per.bin"))?;
        write_f64s(&dir.join("h0_values.bin"), self.h0.values.as_slice())?;
        write_f64s(&dir.join("h0_vectors.bin"), self.h0.vectors.as_slice())?;
        Ok(())
    }

    /// Load a cached state; fails unless the stored hash equals `config_hash`.
    pub fn load(dir: &Path, config_hash: &str) -> Result<Self> {
        let header: CrystalHeader = serde_json::from_slice(&fs::read(dir.join("crystal.json"))?)?;
        if header.config_hash != config_hash {
            return Err(Error::Invalid("cached crystal has a different config hash".into()));
        }
        let spec = header.spec;
        let v_cell = GridFunction::read(&dir.join("v_per.bin"))?.to_real()?;
        let rho_cell = GridFunction::read(&dir.join("rho0_cell.bin"))?.to_real()?;
        let u_per = GridFunction::read(&dir.join("u_per.bin"))?;
        let npts = spec.n_points();
        let values = read_f64s(&dir.join("h0_values.bin"))?;
        let vectors = read_f64s(&dir.join("h0_vectors.bin"))?;
        if values.len() != npts || vectors.len() != npts * npts {
            return Err(Error::Invalid("cached arrays have the wrong size".into()));
        }
        let h0 = Eigen { values: DVector::from_vec(values), vectors: DMatrix::from_vec(npts, npts, vectors) };
        let gamma0 = linalg::projector(&h0.vectors, 0..header.n_occ);
        let w = spec.weight();
        let rho_super = (0..npts).map(|i| gamma0[(i, i)] / w).collect();
        let v_super = grid::periodize(&spec, &v_cell);
        let band = PolaronBand { e_per: header.e_per, u_per, k_min: header.k_min, at_gamma: header.at_gamma };
        Ok(Self {
            spec,
            z: header.z,
            mass: header.m,
            v_cell,
            rho_cell,
            v_super,
            rho_super,
            eps_f: header.eps_f,
            gap: header.gap,
            h0,
            gamma0,
            n_occ: header.n_occ,
            band,
            scf: header.scf,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CrystalHeader {
    spec: LatticeSpec,
    #[serde(rename = "Z")]
    z: usize,
    m: f64,
    eps_f: f64,
    gap: f64,
    e_per: f64,
    scf_residual: f64,
    code_version: String,
    config_hash: String,
    n_occ: usize,
    k_min: [f64; 3],
    at_gamma: bool,
    scf: ScfReport,
}

fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    Ok(fs::read(path)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Convenience: the free (V = 0) real field tagged on the unit cell.
pub fn zero_potential(spec: &LatticeSpec) -> GridFunction {
    GridFunction::zeros(spec.unit_cell(), FieldKind::Real)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deep_well(n_c: usize, m: usize) -> (NuclearDensity, LatticeSpec) {
        let spec = LatticeSpec::new(1, 1.0, n_c, m).unwrap();
        (NuclearDensity::single_site([0.5, 0.0, 0.0], 0.1, 1.0), spec)
    }

    #[test]
    fn nuclear_density_is_normalized_and_positive() {
        let cell = LatticeSpec::new(2, 1.5, 8, 1).unwrap();
        let mu = NuclearDensity::Gaussian {
            sites: vec![
                Site { center: [0.2, 0.3, 0.0], width: 0.2, charge: 1.0 },
                Site { center: [1.0, 1.0, 0.0], width: 0.3, charge: 1.0 },
            ],
        };
        let s = mu.sample(&cell).unwrap();
        assert!(s.iter().all(|v| *v >= 0.0));
        assert!((s.iter().sum::<f64>() * cell.weight() - 2.0).abs() < 1e-12);
        let bad = NuclearDensity::single_site([0.0; 3], 0.1, 1.5);
        assert!(bad.z().is_err());
    }

    #[test]
    fn free_bands_match_formula() {
        let cell = LatticeSpec::new(1, 1.0, 8, 1).unwrap();
        let ks = uniform_kpoints(1, 1.0, 5);
        let bands = band_structure(&zero_potential(&cell), 1.0, &ks).unwrap();
        for (k, b) in ks.iter().zip(&bands) {
            let mut expect: Vec<f64> = grid::wavevectors(&cell).iter().map(|g| 0.5 * (g[0] + k[0]).powi(2)).collect();
            expect.sort_by(f64::total_cmp);
            for (x, y) in b.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
        let check = uniform_kpoints(1, 1.0, 8);
        let bands = band_structure(&zero_potential(&cell), 1.0, &check).unwrap();
        assert!(matches!(insulator_check(&bands, 1), Err(Error::InsulatorViolation { .. })));
    }

    #[test]
    fn uniform_nuclei_violate_insulator_assumption() {
        let spec = LatticeSpec::new(1, 1.0, 8, 1).unwrap();
        let r = scf_solve(&NuclearDensity::Uniform { z: 1 }, &spec, 1.0, &ScfParams::default());
        assert!(matches!(r, Err(Error::InsulatorViolation { .. })), "{r:?}");
    }

    #[test]
    fn constant_shift_moves_fermi_level() {
        let cell = LatticeSpec::new(1, 1.0, 8, 1).unwrap();
        let v: Vec<f64> = (0..8).map(|i| -8.0 * (-(i as f64 - 4.0).powi(2) / 2.0).exp()).collect();
        let ks = uniform_kpoints(1, 1.0, 6);
        let b1 = band_structure(&GridFunction::real(cell, v.clone()).unwrap(), 1.0, &ks).unwrap();
        let b2 = band_structure(&GridFunction::real(cell, v.iter().map(|x| x + 0.7).collect()).unwrap(), 1.0, &ks).unwrap();
        let (g1, e1) = insulator_check(&b1, 1).unwrap();
        let (g2, e2) = insulator_check(&b2, 1).unwrap();
        assert!((g1 - g2).abs() < 1e-10);
        assert!((e2 - e1 - 0.7).abs() < 1e-10);
    }

    #[test]
    fn deep_well_scf_converges_with_consistent_supercell() {
        let (mu, spec) = deep_well(16, 3);
        let params = ScfParams::default();
        let c = scf_solve(&mu, &spec, 1.0, &params).unwrap();
        assert!(c.gap > params.gap_tol);
        assert!(c.scf.residual <= params.tol);
        for w in c.scf.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
        let mean: f64 = c.v_cell.iter().sum::<f64>() / c.v_cell.len() as f64;
        assert!(mean.abs() < 1e-12);
        let cell = spec.unit_cell();
        assert!((c.rho_cell.iter().sum::<f64>() * cell.weight() - 1.0).abs() < 1e-9);
        // projector invariants
        let g2 = &c.gamma0 * &c.gamma0;
        assert!((g2 - &c.gamma0).amax() < 1e-10);
        assert!((c.gamma0.trace() - 3.0).abs() < 1e-10);
        let h = c.hamiltonian();
        let comm = &h * &c.gamma0 - &c.gamma0 * &h;
        assert!(comm.amax() < 1e-8);
        // fibers reproduce the supercell spectrum
        let bands = band_structure(&c.potential(), 1.0, &commensurate_kpoints(&spec)).unwrap();
        let mut union: Vec<f64> = bands.into_iter().flatten().collect();
        union.sort_by(f64::total_cmp);
        for (a, b) in union.iter().zip(c.h0.values.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        // the polaron band bottom sits below the Fermi level and equals the supercell bottom
        assert!(c.e_per() < c.eps_f);
        assert!((c.e_per() - c.h0.values[0]).abs() < 1e-8);
        let u = c.band.u_per.norm();
        assert!((u - 1.0).abs() < 1e-10);
        // supercell density integrates to Z per cell
        let total: f64 = c.rho_super.iter().sum::<f64>() * spec.weight();
        assert!((total - 3.0).abs() < 1e-8);
    }

    #[test]
    fn heavy_polaron_sinks_to_potential_minimum() {
        let (mu, spec) = deep_well(16, 1);
        let c = scf_solve(&mu, &spec, 1.0, &ScfParams::default()).unwrap();
        let vmin = c.v_cell.iter().copied().fold(f64::INFINITY, f64::min);
        let mut prev = f64::NEG_INFINITY;
        for m in [1.0, 4.0, 16.0, 64.0] {
            let e = polaron_band(&c.potential(), m, &spec, 8).unwrap().e_per;
            assert!(e > vmin, "m = {m}: {e}");
            if prev.is_finite() {
                assert!(e < prev, "m = {m}: {e} not below {prev}");
            }
            prev = e;
        }
        let e_far = polaron_band(&c.potential(), 1e4, &spec, 8).unwrap().e_per;
        assert!((e_far - vmin).abs() < 0.05 * vmin.abs().max(1.0));
    }

    #[test]
    fn free_polaron_band_is_flat_state() {
        let spec = LatticeSpec::new(2, 1.0, 4, 2).unwrap();
        let b = polaron_band(&zero_potential(&spec), 1.0, &spec, 4).unwrap();
        assert!(b.e_per.abs() < 1e-12);
        assert!(b.at_gamma);
        let u = b.u_per.to_real().unwrap();
        assert!(u.iter().all(|x| (x - u[0]).abs() < 1e-10));
    }

    #[test]
    fn cache_round_trip() {
        let (mu, spec) = deep_well(8, 2);
        let c = scf_solve(&mu, &spec, 1.0, &ScfParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path(), "abc").unwrap();
        assert!(CrystalState::load(dir.path(), "other").is_err());
        let back = CrystalState::load(dir.path(), "abc").unwrap();
        assert_eq!(back.gamma0, c.gamma0);
        assert_eq!(back.v_super, c.v_super);
        assert_eq!(back.eps_f, c.eps_f);
    }
}
