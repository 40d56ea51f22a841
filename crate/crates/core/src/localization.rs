//! Localization operators commuting with the Fermi sea, the exact "adding states"
//! inequality, and measured localization errors.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coulomb::CoulombKernel;
use crate::crystal::CrystalState;
use crate::error::{Error, Result};
use crate::grid::{self, GridFunction, LatticeSpec};
use crate::linalg;
use crate::response::{kinetic_energy, q_norm, Perturbation};

/// Smooth partition of unity chi^2 + eta^2 = 1 around a centre.
#[derive(Debug, Clone)]
pub struct PartitionPair {
    pub radius: f64,
    pub center: [f64; 3],
    pub chi: GridFunction,
    pub eta: GridFunction,
    /// R max|grad chi| measured with the spectral gradient.
    pub gradient_constant: f64,
}

/// Switching angle: 0 for r <= R, pi/2 for r >= 2R, C^2 in between.
fn angle(r: f64, radius: f64) -> f64 {
    let t = ((r - radius) / radius).clamp(0.0, 1.0);
    0.5 * PI * (t - (2.0 * PI * t).sin() / (2.0 * PI))
}

/// chi(r) = cos(angle): 1 for r <= R, 0 beyond 2R.
pub fn profile(r: f64, radius: f64) -> f64 {
    if r >= 2.0 * radius {
        0.0
    } else {
        angle(r, radius).cos()
    }
}

pub fn build_pair(radius: f64, center: [f64; 3], spec: &LatticeSpec) -> Result<PartitionPair> {
    let side = spec.side();
    if !(radius > 0.0) || 2.0 * radius >= 0.5 * side {
        return Err(Error::RadiusTooLarge { radius, side });
    }
    let chi: Vec<f64> = (0..spec.n_points())
        .map(|i| profile(spec.distance(&spec.position(i), &center), radius))
        .collect();
    let eta: Vec<f64> = (0..spec.n_points())
        .map(|i| angle(spec.distance(&spec.position(i), &center), radius).sin())
        .collect();
    let grad = grid::gradient_magnitude(spec, &chi);
    let gradient_constant = radius * grad.iter().copied().fold(0.0, f64::max);
    Ok(PartitionPair {
        radius,
        center,
        chi: GridFunction::real(*spec, chi)?,
        eta: GridFunction::real(*spec, eta)?,
        gradient_constant,
    })
}

/// X = g chi g + (1-g) chi (1-g) and Y likewise with eta.
#[derive(Debug, Clone)]
pub struct LocalizationOps {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Pi f Pi + (1 - Pi) f (1 - Pi) for a multiplication operator f.
pub fn sandwich(pi: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let pf = pi * f;
    let fp = f * pi;
    let pfp = &pf * pi;
    let mut out = f - pf - fp + pfp * 2.0;
    linalg::symmetrize(&mut out);
    out
}

impl LocalizationOps {
    pub fn new(pair: &PartitionPair, crystal: &CrystalState) -> Result<Self> {
        if pair.chi.spec() != &crystal.spec {
            return Err(Error::SpecMismatch);
        }
        let chi = DMatrix::from_diagonal(&pair.chi.to_real()?.into());
        let eta = DMatrix::from_diagonal(&pair.eta.to_real()?.into());
        Ok(Self { x: sandwich(&crystal.gamma0, &chi), y: sandwich(&crystal.gamma0, &eta) })
    }
}

/// A Q A.
pub fn localize(q: &Perturbation, a: &DMatrix<f64>, crystal: &CrystalState) -> Result<Perturbation> {
    let mut m = a * q.matrix() * a;
    linalg::symmetrize(&mut m);
    Perturbation::new(m, crystal)
}

/// Tolerance of the adding-states spectrum check.
pub const ADDING_TOL: f64 = 1e-11;

fn spectrum_within(m: &DMatrix<f64>, lo: f64, hi: f64, tol: f64) -> (bool, f64, f64) {
    let v = linalg::sym_eigenvalues(m.clone());
    let (min, max) = (v[0], v[v.len() - 1]);
    (min >= lo - tol && max <= hi + tol, min, max)
}

/// Checks -Pi <= X Q X + Y Q' Y <= 1 - Pi, with X, Y built from chi, eta and Pi.
/// Preconditions (Pi a projector, chi^2 + eta^2 <= 1, Q and Q' feasible) are
/// verified first and reported as errors.
pub fn adding_lemma_check(
    pi: &DMatrix<f64>,
    chi: &DMatrix<f64>,
    eta: &DMatrix<f64>,
    q: &DMatrix<f64>,
    q2: &DMatrix<f64>,
) -> Result<bool> {
    let n = pi.nrows();
    for (name, m) in [("projector", pi), ("chi", chi), ("eta", eta), ("Q", q), ("Q'", q2)] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::Invalid(format!("{name} has the wrong shape")));
        }
        if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
            return Err(Error::Invalid(format!("{name} is not symmetric")));
        }
    }
    if (pi * pi - pi).amax() > 1e-10 {
        return Err(Error::Invalid("Pi is not a projector".into()));
    }
    let (ok, min, max) = spectrum_within(&(chi * chi + eta * eta), f64::NEG_INFINITY, 1.0, 1e-12);
    if !ok {
        return Err(Error::Invalid(format!("chi^2 + eta^2 has spectrum up to {max:.3e} (min {min:.3e})")));
    }
    for m in [q, q2] {
        let (ok, min, max) = spectrum_within(&(pi + m), 0.0, 1.0, ADDING_TOL);
        if !ok {
            return Err(Error::Infeasible { min, max });
        }
    }
    let x = sandwich(pi, chi);
    let y = sandwich(pi, eta);
    let sum = pi + &x * q * &x + &y * q2 * &y;
    Ok(spectrum_within(&sum, 0.0, 1.0, ADDING_TOL).0)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub radius: f64,
    pub e_rho: f64,
    pub e_kin: f64,
    pub n_bound: f64,
    /// q_norm(Q - X Q X) / q_norm(Q).
    pub approximation: f64,
    pub gradient_constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub rows: Vec<LocalizationRow>,
    pub slope_rho: Option<f64>,
    pub slope_kin: Option<f64>,
    pub skipped: Vec<f64>,
}

/// Least-squares slope of log y against log x over the points with x, y > 0.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Localization errors of Q for each radius around `center`.
pub fn localization_error_report(
    q: &Perturbation,
    crystal: &CrystalState,
    w: &CoulombKernel,
    radii: &[f64],
    center: [f64; 3],
) -> Result<LocalizationReport> {
    if radii.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Invalid("radii must be increasing".into()));
    }
    let spec = crystal.spec;
    let usable: Vec<f64> = radii.iter().copied().filter(|r| 2.0 * r < 0.5 * spec.side()).collect();
    let skipped: Vec<f64> = radii.iter().copied().filter(|r| 2.0 * r >= 0.5 * spec.side()).collect();
    if usable.len() < 3 {
        return Err(Error::Invalid(format!("only {} radii fit the supercell", usable.len())));
    }
    let kin_q = kinetic_energy(q, crystal);
    let norm_q = q_norm(q, crystal);
    let h = spec.weight();
    let mut rows = Vec::with_capacity(usable.len());
    for &r in &usable {
        let pair = build_pair(r, center, &spec)?;
        let ops = LocalizationOps::new(&pair, crystal)?;
        let xq = localize(q, &ops.x, crystal)?;
        let yq = localize(q, &ops.y, crystal)?;
        let e: Vec<f64> = q
            .density()
            .iter()
            .zip(xq.density())
            .zip(yq.density())
            .map(|((a, b), c)| a - b - c)
            .collect();
        let l2 = (e.iter().map(|v| v * v).sum::<f64>() * h).sqrt();
        let e_rho = w.self_energy(&e).max(0.0).sqrt() + l2;
        let e_kin = (kin_q - kinetic_energy(&xq, crystal) - kinetic_energy(&yq, crystal)).abs();
        let (n_bound, approximation) = if norm_q > 0.0 {
            let rest = Perturbation::new(q.matrix() - xq.matrix(), crystal)?;
            ((q_norm(&xq, crystal) + q_norm(&yq, crystal)) / norm_q, q_norm(&rest, crystal) / norm_q)
        } else {
            (0.0, 0.0)
        };
        rows.push(LocalizationRow { radius: r, e_rho, e_kin, n_bound, approximation, gradient_constant: pair.gradient_constant });
    }
    let slope_rho = loglog_slope(&rows.iter().map(|r| (r.radius, r.e_rho)).collect::<Vec<_>>());
    let slope_kin = loglog_slope(&rows.iter().map(|r| (r.radius, r.e_kin)).collect::<Vec<_>>());
    Ok(LocalizationReport { rows, slope_rho, slope_kin, skipped })
}

/// Operator norm of T - chi T chi - eta T eta + |grad chi|^2/2 + |grad eta|^2/2 with T = -Delta/2,
/// which vanishes in the continuum for chi^2 + eta^2 = 1. Measured on the plane waves up to half
/// the Nyquist frequency per axis, where the grid resolves the products.
pub fn ims_defect(chi: &GridFunction, eta: &GridFunction) -> Result<f64> {
    let spec = *chi.spec();
    if eta.spec() != &spec {
        return Err(Error::SpecMismatch);
    }
    let c = chi.to_real()?;
    let e = eta.to_real()?;
    let t = grid::kinetic_matrix(&spec, 1.0);
    let cm = DMatrix::from_diagonal(&c.clone().into());
    let em = DMatrix::from_diagonal(&e.clone().into());
    let gc = grid::gradient_magnitude(&spec, &c);
    let ge = grid::gradient_magnitude(&spec, &e);
    let mut d = &t - &cm * &t * &cm - &em * &t * &em;
    for i in 0..spec.n_points() {
        d[(i, i)] += 0.5 * (gc[i] * gc[i] + ge[i] * ge[i]);
    }
    let half = PI / (2.0 * spec.spacing());
    let band = grid::multiplier_matrix(&spec, |k| {
        if k.iter().take(spec.dim).all(|c| c.abs() <= half + 1e-12) {
            1.0
        } else {
            0.0
        }
    });
    let mut d = &band * d * &band;
    linalg::symmetrize(&mut d);
    Ok(linalg::sym_norm(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{scf_solve, NuclearDensity, ScfParams};
    use crate::response::random_feasible;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn crystal() -> CrystalState {
        let spec = LatticeSpec::new(1, 1.0, 8, 5).unwrap();
        scf_solve(&NuclearDensity::single_site([0.5, 0.0, 0.0], 0.1, 1.0), &spec, 1.0, &ScfParams::default()).unwrap()
    }

    #[test]
    fn partition_invariants() {
        let spec = LatticeSpec::new(2, 1.0, 8, 4).unwrap();
        let c = spec.center();
        let p = build_pair(0.8, c, &spec).unwrap();
        let chi = p.chi.to_real().unwrap();
        let eta = p.eta.to_real().unwrap();
        for (a, b) in chi.iter().zip(&eta) {
            assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
            assert!((a * a + b * b - 1.0).abs() <= 1e-12);
        }
        assert_eq!(profile(0.0, 0.8), 1.0);
        assert_eq!(profile(2.4, 0.8), 0.0);
        let at_center = spec.flatten(&[16, 16, 0]);
        assert_eq!(chi[at_center], 1.0);
        assert!(p.gradient_constant > 0.0 && p.gradient_constant < 3.5);
        assert!(matches!(build_pair(1.0, c, &spec), Err(Error::RadiusTooLarge { .. })));
    }

    #[test]
    fn operators_commute_and_contract() {
        let c = crystal();
        let p = build_pair(0.9, c.spec.center(), &c.spec).unwrap();
        let ops = LocalizationOps::new(&p, &c).unwrap();
        for m in [&ops.x, &ops.y] {
            let comm = m * &c.gamma0 - &c.gamma0 * m;
            assert!(comm.amax() < 1e-12);
            assert!(linalg::sym_norm(m) <= 1.0 + 1e-12);
        }
        let s = &ops.x * &ops.x + &ops.y * &ops.y;
        assert!(linalg::sym_eigenvalues(s).max() <= 1.0 + 1e-12);
    }

    #[test]
    fn localization_preserves_feasibility() {
        let c = crystal();
        let p = build_pair(0.7, c.spec.center(), &c.spec).unwrap();
        let ops = LocalizationOps::new(&p, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let q = random_feasible(&c, &mut rng);
            for a in [&ops.x, &ops.y] {
                let l = localize(&q, a, &c).unwrap();
                let (min, max) = l.occupation_range(&c);
                assert!(min >= -1e-9 && max <= 1.0 + 1e-9);
            }
        }
        let zero = Perturbation::zero(&c);
        assert_eq!(localize(&zero, &ops.x, &c).unwrap().matrix().amax(), 0.0);
    }

    #[test]
    fn unit_cutoff_is_identity() {
        let c = crystal();
        let n = c.spec.n_points();
        let x = sandwich(&c.gamma0, &DMatrix::identity(n, n));
        assert!((x - DMatrix::<f64>::identity(n, n)).amax() < 1e-12);
    }

    #[test]
    fn adding_lemma_preconditions() {
        let n = 6;
        let z = DMatrix::<f64>::zeros(n, n);
        let mut pi = DMatrix::zeros(n, n);
        pi[(0, 0)] = 1.0;
        let id = DMatrix::identity(n, n) * 0.5f64.sqrt();
        assert!(adding_lemma_check(&pi, &id, &id, &z, &z).unwrap());
        let bad = DMatrix::identity(n, n) * 1.1;
        assert!(matches!(adding_lemma_check(&pi, &id, &id, &bad, &z), Err(Error::Infeasible { .. })));
        let big = DMatrix::identity(n, n);
        assert!(adding_lemma_check(&pi, &big, &big, &z, &z).is_err());
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|r: &f64| (*r, 3.0 * r.powf(-1.5))).collect();
        assert!((loglog_slope(&pts).unwrap() + 1.5).abs() < 1e-12);
    }

    #[test]
    fn ims_defect_trivial_and_refined() {
        let spec = LatticeSpec::new(1, 1.0, 4, 4).unwrap();
        let one = GridFunction::from_fn(spec, |_| 1.0);
        let zero = GridFunction::from_fn(spec, |_| 0.0);
        assert!(ims_defect(&one, &zero).unwrap() < 1e-12);
        let coarse = {
            let p = build_pair(0.9, spec.center(), &spec).unwrap();
            ims_defect(&p.chi, &p.eta).unwrap()
        };
        let fine_spec = LatticeSpec::new(1, 1.0, 8, 4).unwrap();
        let fine = {
            let p = build_pair(0.9, fine_spec.center(), &fine_spec).unwrap();
            ims_defect(&p.chi, &p.eta).unwrap()
        };
        assert!(fine < coarse, "{fine} !< {coarse}");
    }

    #[test]
    fn report_needs_three_radii() {
        let c = crystal();
        let w = CoulombKernel::bare(&c.spec);
        let q = Perturbation::zero(&c);
        assert!(localization_error_report(&q, &c, &w, &[0.5, 1.0], c.spec.center()).is_err());
        let r = localization_error_report(&q, &c, &w, &[0.3, 0.6, 1.2], c.spec.center()).unwrap();
        assert!(r.rows.iter().all(|row| row.e_rho == 0.0 && row.e_kin == 0.0));
    }
}
