//! Macroscopic Pekar functionals, dielectric-constant extraction from the crystal
//! response, and a Choquard ground-state solver.

use nalgebra::{Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coulomb::{CoulombKernel, KernelMode};
use crate::crystal::CrystalState;
use crate::error::{Error, Result};
use crate::grid::{self, GridFunction, LatticeSpec};
use crate::polaron::SingleState;
use crate::response::{ResponseContext, ResponseParams};

/// Static dielectric constant, scalar or a symmetric d x d matrix (row-major, unused entries zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DielectricModel {
    Scalar(f64),
    Matrix([[f64; 3]; 3]),
}

impl DielectricModel {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Self::Scalar(e) if *e > 1.0 && e.is_finite() => Ok(()),
            Self::Scalar(e) => Err(Error::Invalid(format!("dielectric constant {e} must exceed 1"))),
            Self::Matrix(m) => {
                let mut full = Matrix3::identity() * 2.0;
                for i in 0..dim {
                    for j in 0..dim {
                        full[(i, j)] = m[i][j];
                        if (m[i][j] - m[j][i]).abs() > 1e-12 {
                            return Err(Error::Invalid("dielectric matrix is not symmetric".into()));
                        }
                    }
                }
                let eig = SymmetricEigen::new(full);
                if eig.eigenvalues.iter().all(|e| *e > 1.0) {
                    Ok(())
                } else {
                    Err(Error::Invalid("dielectric matrix must have eigenvalues above 1".into()))
                }
            }
        }
    }

    /// k^T eps k / |k|^2.
    fn ratio(&self, k: &[f64; 3]) -> f64 {
        let k2: f64 = k.iter().map(|c| c * c).sum();
        match self {
            Self::Scalar(e) => *e,
            Self::Matrix(m) => {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += k[i] * m[i][j] * k[j];
                    }
                }
                s / k2
            }
        }
    }
}

/// Screened-minus-bare interaction energy, with the screening applied to the kernel `w`:
/// (1/2) L^{-d} sum_{k != 0} w(k) (|k|^2 / k^T eps k - 1) |rho^(k)|^2.
pub fn fp_effective_with(rho: &[f64], eps: &DielectricModel, w: &CoulombKernel) -> f64 {
    let spec = w.spec();
    let coeffs = w.fourier().forward_real(rho);
    let ks = grid::wavevectors(spec);
    let s: f64 = coeffs
        .iter()
        .zip(&ks)
        .zip(w.symbol())
        .filter(|((_, k), _)| k.iter().any(|v| *v != 0.0))
        .map(|((c, k), s)| s * (1.0 / eps.ratio(k) - 1.0) * c.norm_sqr())
        .sum();
    0.5 * s / spec.volume()
}

/// Pekar's effective interaction energy with the bare Coulomb symbol:
/// 2 pi L^{-d} sum_{k != 0} |rho^(k)|^2 (1/(k^T eps k) - 1/|k|^2).
pub fn fp_effective(rho: &GridFunction, eps: &DielectricModel) -> Result<f64> {
    eps.validate_soft(rho.spec().dim)?;
    let w = CoulombKernel::bare(rho.spec());
    Ok(fp_effective_with(&rho.to_real()?, eps, &w))
}

impl DielectricModel {
    /// Like `validate` but admits eps = 1.
    fn validate_soft(&self, dim: usize) -> Result<()> {
        match self {
            Self::Scalar(e) if *e >= 1.0 => Ok(()),
            Self::Scalar(e) => Err(Error::Invalid(format!("dielectric constant {e} below 1"))),
            Self::Matrix(_) => self.validate(dim),
        }
    }
}

/// (2m)^{-1} int |grad psi|^2 + F^P[|psi|^2] with the interaction of `w`.
pub fn pekar_energy(psi: &SingleState, eps: &DielectricModel, w: &CoulombKernel) -> Result<f64> {
    eps.validate_soft(psi.psi.spec().dim)?;
    if psi.psi.spec() != w.spec() {
        return Err(Error::SpecMismatch);
    }
    let kinetic = grid::gradient_norm_sq(&psi.psi) / (2.0 * psi.mass);
    let rho = psi.density();
    Ok(kinetic + fp_effective_with(&rho, eps, w))
}

/// Dilation family rho_lambda(x) = lambda^{-d} |chi((x - c)/lambda)|^2 of a Gaussian profile
/// |chi(y)|^2 = (2 pi s^2)^{-d/2} exp(-|y|^2 / (2 s^2)).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianProfile {
    pub s: f64,
}

impl GaussianProfile {
    /// Normalized density of the profile dilated by `lambda`, centred in the supercell.
    pub fn density(&self, spec: &LatticeSpec, lambda: f64) -> Vec<f64> {
        let c = spec.center();
        let sd = self.s * lambda;
        let raw: Vec<f64> = (0..spec.n_points())
            .map(|i| {
                let r = spec.distance(&spec.position(i), &c);
                (-r * r / (2.0 * sd * sd)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum::<f64>() * spec.weight();
        raw.into_iter().map(|v| v / total).collect()
    }

    /// Amplitude chi_lambda = sqrt(rho_lambda).
    pub fn amplitude(&self, spec: &LatticeSpec, lambda: f64) -> Vec<f64> {
        self.density(spec, lambda).into_iter().map(f64::sqrt).collect()
    }

    /// Largest dilation whose 4-sigma radius stays inside half the supercell.
    pub fn fits(&self, spec: &LatticeSpec, lambda: f64) -> bool {
        4.0 * self.s * lambda <= 0.5 * spec.side() + 1e-12
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonFit {
    pub eps_fit: f64,
    /// Least-squares c in F ~ c / lambda.
    pub c: f64,
    /// Log-log slope of |F| against lambda.
    pub slope_fit: f64,
    pub residuals: Vec<f64>,
    /// (lambda, F_crys[rho_lambda]).
    pub table: Vec<(f64, f64)>,
    /// eps solving F^P[rho_lambda] = F_crys[rho_lambda] at each lambda.
    pub eps_per_lambda: Vec<f64>,
}

/// Least squares c of F ~ c / lambda.
pub fn fit_inverse_law(table: &[(f64, f64)]) -> f64 {
    let num: f64 = table.iter().map(|(l, f)| f / l).sum();
    let den: f64 = table.iter().map(|(l, _)| 1.0 / (l * l)).sum();
    num / den
}

const EPS_MAX: f64 = 1e6;

/// Scalar eps with g(eps) = target, for g decreasing from 0 at eps = 1.
pub fn bisect_epsilon(target: f64, g: impl Fn(f64) -> f64) -> Option<f64> {
    if !(target < 0.0) || g(EPS_MAX) > target {
        return None;
    }
    let (mut lo, mut hi) = (1.0f64, EPS_MAX);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt().max(0.5 * (lo + hi) * 1e-300);
        let mid = if hi / lo > 4.0 { mid } else { 0.5 * (lo + hi) };
        if g(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Solve for eps from tabulated (lambda, F) data. `densities[i]` is the dilated density at the
/// i-th lambda; the model c(eps) is the same least-squares fit applied to F^P[rho_lambda], which
/// for a kernel homogeneous of degree -1 reduces to F^P[rho_1].
pub fn epsilon_from_table(table: &[(f64, f64)], densities: &[Vec<f64>], w: &CoulombKernel) -> Result<(f64, f64, Vec<f64>)> {
    if densities.len() != table.len() {
        return Err(Error::Invalid("one density per lambda".into()));
    }
    let c = fit_inverse_law(table);
    let residuals = table.iter().map(|(l, f)| f - c / l).collect();
    let model = |e: f64| {
        let pts: Vec<(f64, f64)> =
            table.iter().zip(densities).map(|((l, _), rho)| (*l, fp_effective_with(rho, &DielectricModel::Scalar(e), w))).collect();
        fit_inverse_law(&pts)
    };
    let eps = bisect_epsilon(c, model)
        .ok_or_else(|| Error::FitUnreliable { reason: format!("no eps > 1 reproduces c = {c:.6e}"), table: table.to_vec() })?;
    Ok((eps, c, residuals))
}

/// Fit eps_M from the large-lambda behaviour F_crys[rho_lambda] ~ F^P[rho_1] / lambda.
pub fn extract_epsilon(
    crystal: &CrystalState,
    profile: &GaussianProfile,
    lambdas: &[f64],
    w: &CoulombKernel,
    params: &ResponseParams,
) -> Result<EpsilonFit> {
    if lambdas.len() < 2 || lambdas.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Invalid("need at least two increasing dilations".into()));
    }
    let spec = crystal.spec;
    if let Some(l) = lambdas.iter().find(|l| !profile.fits(&spec, **l)) {
        return Err(Error::Invalid(format!("dilation {l} does not fit the supercell")));
    }
    let ctx = ResponseContext::new(crystal, w)?;
    let values: Vec<Result<f64>> = lambdas
        .par_iter()
        .map(|l| ctx.solve(&profile.density(&spec, *l), params).map(|r| r.value))
        .collect();
    let mut table = Vec::with_capacity(lambdas.len());
    for (l, v) in lambdas.iter().zip(values) {
        table.push((*l, v?));
    }
    let eps_per_lambda = table
        .iter()
        .map(|(l, f)| {
            let rho = profile.density(&spec, *l);
            bisect_epsilon(*f, |e| fp_effective_with(&rho, &DielectricModel::Scalar(e), w)).unwrap_or(f64::NAN)
        })
        .collect();
    let pts: Vec<(f64, f64)> = table.iter().map(|(l, f)| (*l, f.abs())).collect();
    let slope_fit = crate::localization::loglog_slope(&pts).unwrap_or(f64::NAN);
    let monotone = table.windows(2).all(|p| p[1].1.abs() < p[0].1.abs());
    if !monotone || table.iter().any(|(_, f)| *f >= 0.0) {
        return Err(Error::FitUnreliable {
            reason: format!("|F_crys| is not decreasing in lambda (log-log slope {slope_fit:.3})"),
            table,
        });
    }
    let densities: Vec<Vec<f64>> = lambdas.iter().map(|l| profile.density(&spec, *l)).collect();
    let (eps_fit, c, residuals) = epsilon_from_table(&table, &densities, w)?;
    Ok(EpsilonFit { eps_fit, c, slope_fit, residuals, table, eps_per_lambda })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChoquardParams {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial Gaussian width as a fraction of the supercell side.
    pub init_width: f64,
    pub kernel: KernelMode,
}

impl Default for ChoquardParams {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 20_000, init_width: 0.125, kernel: KernelMode::Bare }
    }
}

#[derive(Debug, Clone)]
pub struct ChoquardResult {
    pub state: SingleState,
    pub energy: f64,
    pub energy_trace: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Normalized preconditioned steepest descent on the Pekar functional with step halving.
pub fn choquard_solve(eps: &DielectricModel, m: f64, spec: &LatticeSpec, params: &ChoquardParams) -> Result<ChoquardResult> {
    let c = spec.center();
    let width = params.init_width * spec.side();
    let init = GridFunction::from_fn(*spec, |x| {
        let r = spec.distance(&x, &c);
        (-r * r / (4.0 * width * width)).exp()
    });
    choquard_from(eps, m, SingleState::new(init, m)?, params)
}

/// As `choquard_solve`, starting from a given state.
pub fn choquard_from(eps: &DielectricModel, m: f64, start: SingleState, params: &ChoquardParams) -> Result<ChoquardResult> {
    eps.validate(start.psi.spec().dim)?;
    let spec = *start.psi.spec();
    let w = CoulombKernel::new(&spec, params.kernel)?;
    let ft = w.fourier().clone();
    let k2 = ft.k_squared().to_vec();
    let hw = spec.weight();
    let coupling = |rho: &[f64]| -> Vec<f64> {
        let coeffs = ft.forward_real(rho);
        let ks = grid::wavevectors(&spec);
        let mut data: Vec<Complex64> = coeffs
            .iter()
            .zip(&ks)
            .zip(w.symbol())
            .map(|((c, k), s)| if k.iter().all(|v| *v == 0.0) { Complex64::new(0.0, 0.0) } else { c * s * (1.0 / eps.ratio(k) - 1.0) })
            .collect();
        ft.inverse_in_place(&mut data);
        data.into_iter().map(|z| z.re).collect()
    };
    let energy_of = |psi: &[f64]| -> f64 {
        let kin: f64 = {
            let c = ft.forward_real(psi);
            c.iter().zip(&k2).map(|(z, k)| k * z.norm_sqr()).sum::<f64>() / spec.volume()
        };
        let rho: Vec<f64> = psi.iter().map(|p| p * p).collect();
        kin / (2.0 * m) + fp_effective_with(&rho, eps, &w)
    };
    let normalize = |psi: &mut Vec<f64>| {
        let n = (psi.iter().map(|p| p * p).sum::<f64>() * hw).sqrt();
        psi.iter_mut().for_each(|p| *p /= n);
    };
    let mut psi: Vec<f64> = start.psi.values().iter().map(|z| z.re).collect();
    normalize(&mut psi);
    let precond: Vec<f64> = k2.iter().map(|k| 1.0 / (1.0 + k / (2.0 * m))).collect();
    let mut energy = energy_of(&psi);
    let mut trace = vec![energy];
    let mut tau = 1.0;
    let mut residual = f64::INFINITY;
    for iter in 0..params.max_iter {
        let rho: Vec<f64> = psi.iter().map(|p| p * p).collect();
        let v = coupling(&rho);
        let kin_psi = ft.apply_multiplier_real(&psi, &k2.iter().map(|k| k / (2.0 * m)).collect::<Vec<_>>());
        let h_psi: Vec<f64> = kin_psi.iter().zip(&v).zip(&psi).map(|((a, b), p)| a + b * p).collect();
        let lambda = h_psi.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() * hw;
        let r: Vec<f64> = h_psi.iter().zip(&psi).map(|(a, p)| a - lambda * p).collect();
        residual = (r.iter().map(|x| x * x).sum::<f64>() * hw).sqrt();
        if residual <= params.tol {
            let state = SingleState::new(GridFunction::real(spec, psi)?, m)?;
            return Ok(ChoquardResult { state, energy, energy_trace: trace, residual, iterations: iter });
        }
        let mut d = ft.apply_multiplier_real(&r, &precond);
        let proj = d.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() * hw;
        d.iter_mut().zip(&psi).for_each(|(a, p)| *a -= proj * p);
        loop {
            let mut trial: Vec<f64> = psi.iter().zip(&d).map(|(p, s)| p - tau * s).collect();
            normalize(&mut trial);
            let e = energy_of(&trial);
            if e <= energy {
                psi = trial;
                energy = e;
                tau = (tau * 1.5).min(4.0);
                break;
            }
            tau *= 0.5;
            if tau < 1e-14 {
                let state = SingleState::new(GridFunction::real(spec, psi)?, m)?;
                return Ok(ChoquardResult { state, energy, energy_trace: trace, residual, iterations: iter });
            }
        }
        trace.push(energy);
    }
    Err(Error::Diverged { what: "choquard descent", iterations: params.max_iter, last: residual, trace })
}

/// Direct real-space double sum of D(rho, rho) through the periodic pair kernel.
pub fn coulomb_direct(rho: &[f64], w: &CoulombKernel) -> f64 {
    let spec = w.spec();
    let ker = w.real_space();
    let n = spec.n_points();
    let axis = spec.points_per_axis();
    let hw = spec.weight();
    let mut s = 0.0;
    for i in 0..n {
        if rho[i] == 0.0 {
            continue;
        }
        let a = spec.unflatten(i);
        for j in 0..n {
            let b = spec.unflatten(j);
            let mut diff = [0usize; 3];
            for ax in 0..spec.dim {
                diff[ax] = (a[ax] + axis - b[ax]) % axis;
            }
            s += rho[i] * rho[j] * ker[spec.flatten(&diff)];
        }
    }
    s * hw * hw
}
