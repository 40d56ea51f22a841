//! Crystal response functional and its Frank-Wolfe minimization.
//!
//! For an external density `nu` the Fermi sea responds with a perturbation
//! `Q = gamma - gamma0`, `0 <= gamma <= 1`, minimizing
//!
//! ```text
//! F[nu, Q] = Tr0((H0 - eps_F) Q) + D(rho_Q, rho_Q)/2 + D(nu, rho_Q)
//! ```
//!
//! The objective is linear plus convex quadratic in `Q`, and the linear
//! minimization oracle over the constraint set is a single spectral projection.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coulomb::CoulombKernel;
use crate::crystal::CrystalState;
use crate::error::{Error, Result};
use crate::grid::{self, GridFunction, LatticeSpec};
use crate::linalg::{self, Eigen};

/// Feasibility slack on the spectrum of gamma0 + Q.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Blocks {
    pub mm: DMatrix<f64>,
    pub mp: DMatrix<f64>,
    pub pm: DMatrix<f64>,
    pub pp: DMatrix<f64>,
}

/// A symmetric response operator Q with its density.
#[derive(Debug, Clone)]
pub struct Perturbation {
    q: DMatrix<f64>,
    rho: Vec<f64>,
    blocks: OnceLock<Blocks>,
}

impl Perturbation {
    pub fn new(q: DMatrix<f64>, crystal: &CrystalState) -> Result<Self> {
        let n = crystal.spec.n_points();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Invalid(format!("Q is {}x{}, expected {n}x{n}", q.nrows(), q.ncols())));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::Invalid(format!("Q is not symmetric (defect {asym:.2e})")));
        }
        let w = crystal.spec.weight();
        let rho = (0..n).map(|i| q[(i, i)] / w).collect();
        Ok(Self { q, rho, blocks: OnceLock::new() })
    }

    pub fn zero(crystal: &CrystalState) -> Self {
        let n = crystal.spec.n_points();
        Self { q: DMatrix::zeros(n, n), rho: vec![0.0; n], blocks: OnceLock::new() }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// rho_Q(x) = Q_xx / h^d.
    pub fn density(&self) -> &[f64] {
        &self.rho
    }

    pub fn density_field(&self, crystal: &CrystalState) -> GridFunction {
        GridFunction::real(crystal.spec, self.rho.clone()).expect("sized by construction")
    }

    pub fn trace(&self) -> f64 {
        self.q.trace()
    }

    /// Q^{--} = g Q g, Q^{-+} = g Q (1-g), Q^{+-}, Q^{++} in the position basis.
    pub fn blocks(&self, crystal: &CrystalState) -> &Blocks {
        self.blocks.get_or_init(|| {
            let g = &crystal.gamma0;
            let gq = g * &self.q;
            let mm = &gq * g;
            let mp = &gq - &mm;
            let pm = &self.q * g - &mm;
            let pp = &self.q - &mm - &mp - &pm;
            Blocks { mm, mp, pm, pp }
        })
    }

    /// Spectrum of gamma0 + Q.
    pub fn occupation_range(&self, crystal: &CrystalState) -> (f64, f64) {
        let v = linalg::sym_eigenvalues(&crystal.gamma0 + &self.q);
        (v[0], v[v.len() - 1])
    }

    pub fn check_feasible(&self, crystal: &CrystalState) -> Result<()> {
        let (min, max) = self.occupation_range(crystal);
        if min < -FEASIBILITY_TOL || max > 1.0 + FEASIBILITY_TOL {
            return Err(Error::Infeasible { min, max });
        }
        Ok(())
    }

    /// Q expressed in the eigenbasis of H0.
    pub fn in_eigenbasis(&self, crystal: &CrystalState) -> DMatrix<f64> {
        let u = &crystal.h0.vectors;
        u.transpose() * &self.q * u
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { q: &self.q * s, rho: self.rho.iter().map(|r| r * s).collect(), blocks: OnceLock::new() }
    }
}

/// Tr Q^{++} + Tr Q^{--}.
pub fn tr0(q: &Perturbation, crystal: &CrystalState) -> f64 {
    let b = q.blocks(crystal);
    b.pp.trace() + b.mm.trace()
}

/// Tr(|H0 - eps_F|^{1/2} (Q^{++} - Q^{--}) |H0 - eps_F|^{1/2}), evaluated in the eigenbasis of H0.
pub fn kinetic_energy(q: &Perturbation, crystal: &CrystalState) -> f64 {
    let qt = q.in_eigenbasis(crystal);
    crystal
        .h0
        .values
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let sign = if i < crystal.n_occ { -1.0 } else { 1.0 };
            (e - crystal.eps_f).abs() * sign * qt[(i, i)]
        })
        .sum()
}

/// Tr((H0 - eps_F)(Q^{++} + Q^{--})) in the position basis.
pub fn kinetic_energy_direct(q: &Perturbation, crystal: &CrystalState) -> f64 {
    let b = q.blocks(crystal);
    let n = crystal.spec.n_points();
    let h = crystal.hamiltonian() - DMatrix::identity(n, n) * crystal.eps_f;
    linalg::trace_product(&h, &(&b.pp + &b.mm))
}

/// F[nu, Q] for a feasible Q.
pub fn energy_of(nu: &GridFunction, q: &Perturbation, crystal: &CrystalState, w: &CoulombKernel) -> Result<f64> {
    if nu.spec() != &crystal.spec || w.spec() != &crystal.spec {
        return Err(Error::SpecMismatch);
    }
    q.check_feasible(crystal)?;
    let nu = nu.to_real()?;
    let rho = q.density();
    Ok(kinetic_energy(q, crystal) + 0.5 * w.self_energy(rho) + w.pair(&nu, rho))
}

/// Exact minimizer of Tr(A Q) over -gamma0 <= Q <= 1 - gamma0: the negative spectral
/// projector of A minus gamma0. Zero eigenvalues are left unoccupied.
pub fn lmo(a: &DMatrix<f64>, crystal: &CrystalState) -> Result<Perturbation> {
    let eig = linalg::sym_eig(a.clone());
    let n_neg = eig.values.iter().filter(|v| **v < 0.0).count();
    let p = linalg::projector(&eig.vectors, 0..n_neg);
    let mut q = p - &crystal.gamma0;
    linalg::symmetrize(&mut q);
    Perturbation::new(q, crystal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Open-loop step 2/(k+2).
    FrankWolfe,
    /// Exact line search on the quadratic.
    FwLinesearch,
    /// Exact line search, also trying a vertex built from a Pulay-extrapolated density
    /// and keeping whichever step lowers the objective more.
    FwExtrapolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseParams {
    /// Absolute duality-gap tolerance; `None` means 1e-7 (1 + D(nu, nu)/2).
    pub gap_tol: Option<f64>,
    pub max_iter: usize,
    pub variant: Variant,
}

impl Default for ResponseParams {
    fn default() -> Self {
        Self { gap_tol: None, max_iter: 5000, variant: Variant::FwExtrapolated }
    }
}

impl ResponseParams {
    pub fn tolerance(&self, d_nu: f64) -> f64 {
        self.gap_tol.unwrap_or(1e-7 * (1.0 + 0.5 * d_nu))
    }
}

#[derive(Debug, Clone)]
pub struct ResponseResult {
    pub value: f64,
    pub minimizer: Perturbation,
    pub gap: f64,
    pub gap_tol: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    /// D(nu, nu) of the input.
    pub d_nu: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tr0: f64,
    pub d_rho: f64,
    pub q_norm: f64,
}

impl ResponseResult {
    pub fn diagnostics(&self, crystal: &CrystalState, w: &CoulombKernel) -> Diagnostics {
        Diagnostics {
            tr0: tr0(&self.minimizer, crystal),
            d_rho: w.self_energy(self.minimizer.density()),
            q_norm: q_norm(&self.minimizer, crystal),
        }
    }
}

/// Precomputed pieces of a crystal reused across response solves.
pub struct ResponseContext<'a> {
    pub crystal: &'a CrystalState,
    pub kernel: &'a CoulombKernel,
    shifted: DMatrix<f64>,
    kin_gamma0: f64,
}

impl<'a> ResponseContext<'a> {
    pub fn new(crystal: &'a CrystalState, kernel: &'a CoulombKernel) -> Result<Self> {
        if kernel.spec() != &crystal.spec {
            return Err(Error::SpecMismatch);
        }
        let n = crystal.spec.n_points();
        let shifted = crystal.hamiltonian() - DMatrix::identity(n, n) * crystal.eps_f;
        let kin_gamma0 = crystal.h0.values.iter().take(crystal.n_occ).map(|e| e - crystal.eps_f).sum();
        Ok(Self { crystal, kernel, shifted, kin_gamma0 })
    }

    fn potential_with(&self, rho: &[f64], nu: &[f64]) -> Vec<f64> {
        let total: Vec<f64> = rho.iter().zip(nu).map(|(a, b)| a + b).collect();
        self.kernel.potential(&total)
    }

    fn spectrum(&self, v: &[f64]) -> Eigen {
        let mut a = self.shifted.clone();
        for (i, vi) in v.iter().enumerate() {
            a[(i, i)] += vi;
        }
        linalg::sym_eig(a)
    }

    /// sum_i occ_i |u_i><u_i| - gamma0 for eigenvectors of H0 - eps_F + v.
    fn occupied(&self, eig: &Eigen, v: &[f64], occ: &[(usize, f64)]) -> Vertex {
        let crystal = self.crystal;
        let n = crystal.spec.n_points();
        let h = crystal.spec.weight();
        let u = DMatrix::from_fn(n, occ.len(), |i, j| eig.vectors[(i, occ[j].0)]);
        let weights: Vec<f64> = occ.iter().map(|o| o.1).collect();
        let rho_p: Vec<f64> = (0..n)
            .map(|i| (0..occ.len()).map(|j| weights[j] * u[(i, j)] * u[(i, j)]).sum::<f64>() / h)
            .collect();
        let kin = occ.iter().map(|(k, t)| t * eig.values[*k]).sum::<f64>() - dot(v, &rho_p) * h - self.kin_gamma0;
        let rho = rho_p.iter().zip(&crystal.rho_super).map(|(a, b)| a - b).collect();
        Vertex { u, occ: weights, rho, kin }
    }

    /// Negative spectral projector of H0 - eps_F + v, shifted by gamma0.
    fn vertex(&self, v: &[f64]) -> (Vertex, Eigen) {
        let eig = self.spectrum(v);
        let occ: Vec<(usize, f64)> = eig.values.iter().enumerate().filter(|(_, x)| **x < 0.0).map(|(i, _)| (i, 1.0)).collect();
        (self.occupied(&eig, v, &occ), eig)
    }

    /// Best point of the face spanned by the levels within `delta` of zero: the occupations of
    /// those levels minimize the objective over [0, 1]^k by coordinate descent.
    fn face(&self, eig: &Eigen, v: &[f64], nu: &[f64], delta: f64) -> Option<Vertex> {
        let h = self.crystal.spec.weight();
        let n = eig.values.len();
        let mut near: Vec<usize> = (0..n).filter(|i| eig.values[*i].abs() <= delta).collect();
        if near.is_empty() {
            return None;
        }
        near.sort_by(|a, b| eig.values[*a].abs().total_cmp(&eig.values[*b].abs()));
        near.truncate(FACE_DIM);
        let mut occ: Vec<(usize, f64)> = (0..n).filter(|i| eig.values[*i] < -delta).map(|i| (i, 1.0)).collect();
        let base = self.occupied(eig, v, &occ);
        let dens: Vec<Vec<f64>> = near
            .iter()
            .map(|k| eig.vectors.column(*k).iter().map(|x| x * x / h).collect())
            .collect();
        let pots: Vec<Vec<f64>> = dens.iter().map(|d| self.kernel.potential(d)).collect();
        let lin: Vec<f64> = near.iter().zip(&dens).map(|(k, d)| eig.values[*k] - dot(v, d) * h).collect();
        let base_pot = self.potential_with(&base.rho, nu);
        let m = near.len();
        let hess = DMatrix::from_fn(m, m, |i, j| dot(&dens[i], &pots[j]) * h);
        let b: Vec<f64> = (0..m).map(|i| lin[i] + dot(&dens[i], &base_pot) * h).collect();
        let mut theta: Vec<f64> = near.iter().map(|k| if eig.values[*k] < 0.0 { 1.0 } else { 0.0 }).collect();
        for _ in 0..200 {
            let mut moved = 0.0f64;
            for i in 0..m {
                if hess[(i, i)] <= 0.0 {
                    continue;
                }
                let g = b[i] + (0..m).map(|j| hess[(i, j)] * theta[j]).sum::<f64>();
                let t = (theta[i] - g / hess[(i, i)]).clamp(0.0, 1.0);
                moved = moved.max((t - theta[i]).abs());
                theta[i] = t;
            }
            if moved < 1e-13 {
                break;
            }
        }
        occ.extend(near.iter().zip(&theta).filter(|(_, t)| **t > 0.0).map(|(k, t)| (*k, *t)));
        Some(self.occupied(eig, v, &occ))
    }

    /// Self-consistent density of the minimizer, polished from the Frank-Wolfe result by
    /// Pulay-accelerated fixed-point steps. Each step takes the best point of the face of
    /// levels near zero for the current mean field, so fractionally occupied levels at the
    /// Fermi level are resolved. `None` when the iteration stalls or leaves the ball the
    /// duality gap allows, with the gap floored at the rounding level of the objective.
    pub fn refine_density(&self, nu: &[f64], res: &ResponseResult, tol: f64, max_iter: usize) -> Option<Vec<f64>> {
        let w = self.kernel;
        let h = self.crystal.spec.weight();
        let delta = FACE_WIDTH * self.crystal.gap;
        let start = res.minimizer.density();
        let mut rho = start.to_vec();
        let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..max_iter {
            let v = self.potential_with(&rho, nu);
            let eig = self.spectrum(&v);
            let s = match self.face(&eig, &v, nu, delta) {
                Some(s) => s,
                None => {
                    let occ: Vec<(usize, f64)> =
                        eig.values.iter().enumerate().filter(|(_, x)| **x < 0.0).map(|(i, _)| (i, 1.0)).collect();
                    self.occupied(&eig, &v, &occ)
                }
            };
            let resid: Vec<f64> = s.rho.iter().zip(&rho).map(|(a, b)| a - b).collect();
            if resid.iter().map(|r| r * r).sum::<f64>().sqrt() * h.sqrt() < tol {
                let d: Vec<f64> = s.rho.iter().zip(start).map(|(a, b)| a - b).collect();
                let floor = 1e-12 * (1.0 + res.value.abs());
                let radius = 2.0 * (2.0 * res.gap.max(res.gap_tol).max(floor)).sqrt();
                return (w.self_energy(&d).max(0.0).sqrt() <= radius).then_some(s.rho);
            }
            history.push((rho.clone(), resid));
            if history.len() > EXTRAPOLATION_DEPTH + 1 {
                history.remove(0);
            }
            rho = extrapolate(&history)?;
        }
        None
    }

    /// F_crys[nu] from a cold start.
    pub fn solve(&self, nu: &[f64], params: &ResponseParams) -> Result<ResponseResult> {
        self.solve_from(nu, params, None)
    }

    /// F_crys[nu], optionally warm-started from a feasible perturbation.
    pub fn solve_from(&self, nu: &[f64], params: &ResponseParams, start: Option<&Perturbation>) -> Result<ResponseResult> {
        let crystal = self.crystal;
        let w = self.kernel;
        let spec = crystal.spec;
        let n = spec.n_points();
        if nu.len() != n {
            return Err(Error::SpecMismatch);
        }
        let h = spec.weight();
        let d_nu = w.self_energy(nu);
        let tol = params.tolerance(d_nu);

        let (mut q, mut rho, mut kin) = match start {
            Some(p) => (p.q.clone(), p.rho.clone(), kinetic_energy(p, crystal)),
            None => (DMatrix::zeros(n, n), vec![0.0; n], 0.0),
        };
        let objective = |rho: &[f64], kin: f64| kin + 0.5 * w.self_energy(rho) + w.pair(nu, rho);
        let mut value = objective(&rho, kin);
        let mut objective_trace = vec![value];
        let mut gap_trace = Vec::new();

        let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for iter in 0..params.max_iter {
            let v = self.potential_with(&rho, nu);
            let (s, eig) = self.vertex(&v);
            let lin_q = kin + dot(&v, &rho) * h;
            let gap = (lin_q - s.linear(&v, h)).max(0.0);
            gap_trace.push(gap);
            if gap <= tol {
                let mut qm = q;
                linalg::symmetrize(&mut qm);
                return Ok(ResponseResult {
                    value,
                    minimizer: Perturbation { q: qm, rho, blocks: OnceLock::new() },
                    gap,
                    gap_tol: tol,
                    iterations: iter,
                    objective_trace,
                    gap_trace,
                    d_nu,
                });
            }
            let rho_d: Vec<f64> = s.rho.iter().zip(&rho).map(|(a, b)| a - b).collect();
            let curv = w.self_energy(&rho_d);
            let (t, chosen) = match params.variant {
                Variant::FrankWolfe => (2.0 / (iter as f64 + 2.0), s),
                Variant::FwLinesearch => (exact_step(gap, curv), s),
                Variant::FwExtrapolated => {
                    let t_fw = exact_step(gap, curv);
                    let mut best = (gap * t_fw - 0.5 * curv * t_fw * t_fw, t_fw, s);
                    let mut consider = |c: Vertex| {
                        let gap_c = lin_q - c.linear(&v, h);
                        if gap_c <= 0.0 {
                            return;
                        }
                        let dc: Vec<f64> = c.rho.iter().zip(&rho).map(|(a, b)| a - b).collect();
                        let curv_c = w.self_energy(&dc);
                        let t_c = exact_step(gap_c, curv_c);
                        let gain = gap_c * t_c - 0.5 * curv_c * t_c * t_c;
                        if gain > best.0 {
                            best = (gain, t_c, c);
                        }
                    };
                    let delta = FACE_WIDTH * crystal.gap;
                    if let Some(c) = self.face(&eig, &v, nu, delta) {
                        consider(c);
                    }
                    history.push((rho.clone(), rho_d.clone()));
                    if history.len() > EXTRAPOLATION_DEPTH + 1 {
                        history.remove(0);
                    }
                    if let Some(rho_x) = extrapolate(&history) {
                        let vx = self.potential_with(&rho_x, nu);
                        let (sx, eig_x) = self.vertex(&vx);
                        consider(sx);
                        if let Some(c) = self.face(&eig_x, &vx, nu, delta) {
                            consider(c);
                        }
                    }
                    (best.1, best.2)
                }
            };
            let p = &chosen.u * DMatrix::from_diagonal(&DVector::from_vec(chosen.occ.clone())) * chosen.u.transpose();
            q *= 1.0 - t;
            q += (p - &crystal.gamma0) * t;
            rho.iter_mut().zip(&chosen.rho).for_each(|(r, l)| *r = (1.0 - t) * *r + t * l);
            kin = (1.0 - t) * kin + t * chosen.kin;
            value = objective(&rho, kin);
            objective_trace.push(value);
        }
        Err(Error::Diverged {
            what: "frank-wolfe",
            iterations: params.max_iter,
            last: gap_trace.last().copied().unwrap_or(f64::NAN),
            trace: gap_trace,
        })
    }
}

struct Vertex {
    u: DMatrix<f64>,
    occ: Vec<f64>,
    rho: Vec<f64>,
    kin: f64,
}

impl Vertex {
    /// Tr(A S) up to the common constant, for A = H0 - eps_F + v.
    fn linear(&self, v: &[f64], h: f64) -> f64 {
        self.kin + dot(v, &self.rho) * h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn exact_step(gap: f64, curv: f64) -> f64 {
    if curv > 0.0 {
        (gap / curv).min(1.0)
    } else {
        1.0
    }
}

const EXTRAPOLATION_DEPTH: usize = 6;
const FACE_DIM: usize = 8;
/// Levels within this fraction of the crystal gap of zero may be fractionally occupied.
const FACE_WIDTH: f64 = 0.25;

/// Pulay extrapolation of the density fixed point from (input, residual) pairs.
fn extrapolate(history: &[(Vec<f64>, Vec<f64>)]) -> Option<Vec<f64>> {
    let k = history.len();
    let (x_k, f_k) = history.last()?;
    let mut out: Vec<f64> = x_k.iter().zip(f_k).map(|(x, f)| x + f).collect();
    if k < 2 {
        return Some(out);
    }
    let n = x_k.len();
    let df = DMatrix::from_fn(n, k - 1, |i, j| history[j + 1].1[i] - history[j].1[i]);
    let rhs = DVector::from_column_slice(f_k);
    let gamma = df.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
    for j in 0..k - 1 {
        let g = gamma[j];
        for (i, o) in out.iter_mut().enumerate() {
            let dx = history[j + 1].0[i] - history[j].0[i];
            *o -= g * (dx + df[(i, j)]);
        }
    }
    Some(out)
}

/// F_crys[nu] = inf over feasible Q of F[nu, Q].
pub fn minimize_fcrys(
    nu: &GridFunction,
    crystal: &CrystalState,
    w: &CoulombKernel,
    params: &ResponseParams,
) -> Result<ResponseResult> {
    if nu.spec() != &crystal.spec {
        return Err(Error::SpecMismatch);
    }
    ResponseContext::new(crystal, w)?.solve(&nu.to_real()?, params)
}

/// Discrete analogue of the natural norm of the perturbation space:
/// |Q|_2 + |Q++|_1 + |Q--|_1 + ||grad| Q|_2 + ||grad| Q++ |grad||_1 + ||grad| Q-- |grad||_1.
pub fn q_norm(q: &Perturbation, crystal: &CrystalState) -> f64 {
    let b = q.blocks(crystal);
    let g = grid::abs_gradient_matrix(&crystal.spec);
    let s2 = q.q.norm();
    let gq = (&g * &q.q).norm();
    let pp = linalg::trace_norm(&b.pp);
    let mm = linalg::trace_norm(&b.mm);
    let gpp = linalg::trace_norm(&(&g * &b.pp * &g));
    let gmm = linalg::trace_norm(&(&g * &b.mm * &g));
    s2 + pp + mm + gq + gpp + gmm
}

/// One row of a decoupling table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecouplingRow {
    pub separation: f64,
    pub f_joint: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecouplingTable {
    pub f1: f64,
    pub f2: f64,
    pub rows: Vec<DecouplingRow>,
}

/// Compactly supported density charge * cos^2(pi r / (2 radius)) / norm around `center`.
pub fn bump_density(spec: &LatticeSpec, center: [f64; 3], radius: f64, charge: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..spec.n_points())
        .map(|i| {
            let r = spec.distance(&spec.position(i), &center);
            if r < radius {
                (0.5 * std::f64::consts::PI * r / radius).cos().powi(2)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum::<f64>() * spec.weight();
    raw.into_iter().map(|v| v * charge / total).collect()
}

/// Relative threshold below which a density counts as outside its support.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// True when the supports of `a` and `b` (points above threshold times the max) intersect.
pub fn supports_overlap(a: &[f64], b: &[f64]) -> bool {
    let ta = SUPPORT_THRESHOLD * a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tb = SUPPORT_THRESHOLD * b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).any(|(x, y)| x.abs() > ta && y.abs() > tb && ta > 0.0 && tb > 0.0)
}

/// delta(s) = |F[rho1 + T_s rho2] - F[rho1] - F[rho2]| along the first axis for s in `separations` (in lengths).
pub fn decoupling_probe(
    rho1: &GridFunction,
    rho2: &GridFunction,
    separations: &[f64],
    crystal: &CrystalState,
    w: &CoulombKernel,
    params: &ResponseParams,
) -> Result<DecouplingTable> {
    let half = 0.5 * crystal.spec.side();
    let mut shifted = Vec::with_capacity(separations.len());
    for &s in separations {
        if s.abs() > half + 1e-12 {
            return Err(Error::Invalid(format!("separation {s} exceeds half the supercell")));
        }
        let moved = grid::translate(rho2, &[s])?.to_real()?;
        if supports_overlap(&rho1.to_real()?, &moved) {
            return Err(Error::Overlap);
        }
        shifted.push(moved);
    }
    let ctx = ResponseContext::new(crystal, w)?;
    let r1 = rho1.to_real()?;
    let f1 = ctx.solve(&r1, params)?.value;
    let f2 = ctx.solve(&rho2.to_real()?, params)?.value;
    let mut rows = Vec::with_capacity(separations.len());
    for (&s, moved) in separations.iter().zip(&shifted) {
        let joint: Vec<f64> = r1.iter().zip(moved).map(|(a, b)| a + b).collect();
        let fj = ctx.solve(&joint, params)?.value;
        rows.push(DecouplingRow { separation: s, f_joint: fj, delta: (fj - f1 - f2).abs() });
    }
    Ok(DecouplingTable { f1, f2, rows })
}

/// Eigenvalues of H0 - eps_F, exposed for callers that build oracles.
pub fn shifted_spectrum(crystal: &CrystalState) -> DVector<f64> {
    crystal.shifted_levels()
}

/// Random feasible perturbation gamma - gamma0 with gamma = U diag(o) U^T, o uniform in [0, 1].
pub fn random_feasible<R: rand::Rng + ?Sized>(crystal: &CrystalState, rng: &mut R) -> Perturbation {
    let n = crystal.spec.n_points();
    let u = linalg::random_orthogonal(n, rng);
    let occ: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut scaled = u.clone();
    for (j, o) in occ.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*o);
    }
    let mut q = scaled * u.transpose() - &crystal.gamma0;
    linalg::symmetrize(&mut q);
    Perturbation::new(q, crystal).expect("symmetric by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coulomb::KernelMode;
    use crate::crystal::{NuclearDensity, ScfParams};
    use crate::grid::LatticeSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_crystal() -> CrystalState {
        let spec = LatticeSpec::new(1, 1.0, 8, 4).unwrap();
        let mu = NuclearDensity::single_site([0.5, 0.0, 0.0], 0.1, 1.0);
        crate::crystal::scf_solve(&mu, &spec, 1.0, &ScfParams::default()).unwrap()
    }

    fn bump(crystal: &CrystalState, center: f64, width: f64, mass: f64) -> Vec<f64> {
        let spec = crystal.spec;
        let c = [center, 0.0, 0.0];
        let raw: Vec<f64> = (0..spec.n_points())
            .map(|i| (-(spec.distance(&spec.position(i), &c) / width).powi(2) / 2.0).exp())
            .collect();
        let total: f64 = raw.iter().sum::<f64>() * spec.weight();
        raw.into_iter().map(|v| v * mass / total).collect()
    }

    #[test]
    fn trace_identities_on_random_feasible() {
        let c = small_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let q = random_feasible(&c, &mut rng);
            q.check_feasible(&c).unwrap();
            assert!((tr0(&q, &c) - q.trace()).abs() < 1e-10);
            let b = q.blocks(&c);
            let sum = &b.mm + &b.mp + &b.pm + &b.pp;
            assert!((sum - q.matrix()).amax() < 1e-12);
            let integral: f64 = q.density().iter().sum::<f64>() * c.spec.weight();
            assert!((integral - q.trace()).abs() < 1e-10);
            let k1 = kinetic_energy(&q, &c);
            let k2 = kinetic_energy_direct(&q, &c);
            assert!(k1 >= -1e-10);
            assert!((k1 - k2).abs() < 1e-8 * (1.0 + k1.abs()), "{k1} vs {k2}");
            let v: Vec<f64> = (0..c.spec.n_points()).map(|_| rng.random::<f64>()).collect();
            let tr: f64 = (0..v.len()).map(|i| v[i] * q.matrix()[(i, i)]).sum();
            let int: f64 = v.iter().zip(q.density()).map(|(a, b)| a * b).sum::<f64>() * c.spec.weight();
            assert!((tr - int).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_excitation_costs_the_level_spacing() {
        let c = small_crystal();
        let u = &c.h0.vectors;
        let (h, l) = (c.n_occ - 1, c.n_occ);
        let ph = u.column(h) * u.column(h).transpose();
        let pl = u.column(l) * u.column(l).transpose();
        let q = Perturbation::new(pl - ph, &c).unwrap();
        q.check_feasible(&c).unwrap();
        let k = kinetic_energy(&q, &c);
        let expect = c.h0.values[l] - c.h0.values[h];
        assert!((k - expect).abs() < 1e-10);
        assert!(k >= c.gap - 1e-12);
        assert!((kinetic_energy_direct(&q, &c) - expect).abs() < 1e-8);
        // an eps-multiple of a projector inside the + range has tr0 = eps
        let q = Perturbation::new(u.column(l) * u.column(l).transpose() * 0.3, &c).unwrap();
        assert!((tr0(&q, &c) - 0.3).abs() < 1e-12);
        assert_eq!(tr0(&Perturbation::zero(&c), &c), 0.0);
    }

    #[test]
    fn lmo_special_cases() {
        let c = small_crystal();
        let n = c.spec.n_points();
        let a = c.hamiltonian() - DMatrix::identity(n, n) * c.eps_f;
        assert!(lmo(&a, &c).unwrap().matrix().amax() < 1e-10);
        let inv = lmo(&(-&a), &c).unwrap();
        let expect = DMatrix::identity(n, n) - &c.gamma0 * 2.0;
        assert!((inv.matrix() - expect).amax() < 1e-10);
    }

    #[test]
    fn lmo_beats_random_feasible_points() {
        let spec = LatticeSpec::new(1, 1.0, 6, 1).unwrap();
        let v: Vec<f64> = (0..6).map(|i| -30.0 * (-((i as f64 - 3.0) / 0.8).powi(2)).exp()).collect();
        let c = CrystalState::from_potential(&spec, 1, v, 1.0, &ScfParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5);
        linalg::symmetrize(&mut a);
        let best = lmo(&a, &c).unwrap();
        best.check_feasible(&c).unwrap();
        let f_best = linalg::trace_product(&a, best.matrix());
        for _ in 0..10_000 {
            let q = random_feasible(&c, &mut rng);
            assert!(f_best <= linalg::trace_product(&a, q.matrix()) + 1e-12);
        }
    }

    #[test]
    fn energy_bounds() {
        let c = small_crystal();
        let w = CoulombKernel::bare(&c.spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nu = GridFunction::real(c.spec, bump(&c, 1.7, 0.3, 0.8)).unwrap();
        let zero = GridFunction::zeros(c.spec, crate::grid::FieldKind::Real);
        let d_nu = w.self_energy(&nu.to_real().unwrap());
        assert_eq!(energy_of(&nu, &Perturbation::zero(&c), &c, &w).unwrap(), 0.0);
        for _ in 0..5 {
            let q = random_feasible(&c, &mut rng);
            assert!(energy_of(&zero, &q, &c, &w).unwrap() >= -1e-10);
            assert!(energy_of(&nu, &q, &c, &w).unwrap() >= -0.5 * d_nu - 1e-10);
        }
        let bad = Perturbation::new(DMatrix::identity(c.spec.n_points(), c.spec.n_points()) * 1.1, &c).unwrap();
        assert!(matches!(energy_of(&nu, &bad, &c, &w), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn frank_wolfe_solves_and_certifies() {
        let c = small_crystal();
        for w in [CoulombKernel::bare(&c.spec), CoulombKernel::new(&c.spec, KernelMode::Yukawa { mu: 0.5 }).unwrap()] {
            let zero = GridFunction::zeros(c.spec, crate::grid::FieldKind::Real);
            let r0 = minimize_fcrys(&zero, &c, &w, &ResponseParams::default()).unwrap();
            assert_eq!(r0.value, 0.0);
            assert!(r0.minimizer.matrix().amax() == 0.0);

            let nu = GridFunction::real(c.spec, bump(&c, 1.5, 0.3, 1.0)).unwrap();
            let r = minimize_fcrys(&nu, &c, &w, &ResponseParams::default()).unwrap();
            assert!(r.gap <= r.gap_tol);
            assert!(r.value <= 0.0 && r.value >= -0.5 * r.d_nu - r.gap_tol);
            for s in r.objective_trace.windows(2) {
                assert!(s[1] <= s[0] + 1e-12);
            }
            r.minimizer.check_feasible(&c).unwrap();
            let direct = energy_of(&nu, &r.minimizer, &c, &w).unwrap();
            assert!((direct - r.value).abs() < 1e-9, "{direct} vs {}", r.value);
            // warm restart is already converged
            let ctx = ResponseContext::new(&c, &w).unwrap();
            let again = ctx.solve_from(&nu.to_real().unwrap(), &ResponseParams::default(), Some(&r.minimizer)).unwrap();
            assert_eq!(again.iterations, 0);
            // open-loop variant reaches the same value
            let params = ResponseParams { variant: Variant::FrankWolfe, gap_tol: Some(1e-4), max_iter: 100_000 };
            let ol = minimize_fcrys(&nu, &c, &w, &params).unwrap();
            assert!((ol.value - r.value).abs() < 1e-3);
        }
    }

    #[test]
    fn q_norm_of_plane_wave_dyad() {
        let spec = LatticeSpec::new(1, 1.0, 4, 1).unwrap();
        let params = ScfParams { check_k: 1, ..ScfParams::default() };
        let c = CrystalState::from_potential(&spec, 1, vec![0.0; 4], 1.0, &params).unwrap();
        let k = 2.0 * std::f64::consts::PI;
        let e = DVector::from_fn(4, |i, _| (2.0f64 / 4.0).sqrt() * (k * spec.position(i)[0]).cos());
        let eps = 0.4;
        let q = Perturbation::new(&e * e.transpose() * eps, &c).unwrap();
        let expect = eps * (2.0 + k + k * k);
        assert!((q_norm(&q, &c) - expect).abs() < 1e-10, "{} vs {expect}", q_norm(&q, &c));
        assert_eq!(q_norm(&Perturbation::zero(&c), &c), 0.0);
    }

    #[test]
    fn q_norm_triangle_inequality() {
        let c = small_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_feasible(&c, &mut rng);
        let b = random_feasible(&c, &mut rng);
        let sum = Perturbation::new(a.matrix() + b.matrix(), &c).unwrap();
        assert!(q_norm(&sum, &c) <= q_norm(&a, &c) + q_norm(&b, &c) + 1e-10);
        assert!(q_norm(&a, &c) > 0.0);
    }

    #[test]
    fn decoupling_rejects_overlap_and_zero_partner() {
        let c = small_crystal();
        let w = CoulombKernel::bare(&c.spec);
        let r1 = GridFunction::real(c.spec, bump(&c, 1.0, 0.1, 0.5)).unwrap();
        let r0 = GridFunction::zeros(c.spec, crate::grid::FieldKind::Real);
        let t = decoupling_probe(&r1, &r0, &[1.0, 2.0], &c, &w, &ResponseParams::default()).unwrap();
        for row in &t.rows {
            assert!(row.delta < 1e-6);
        }
        let wide = GridFunction::real(c.spec, bump(&c, 1.0, 0.8, 0.5)).unwrap();
        assert!(matches!(
            decoupling_probe(&r1, &wide, &[1.0], &c, &w, &ResponseParams::default()),
            Err(Error::Overlap)
        ));
    }
}
