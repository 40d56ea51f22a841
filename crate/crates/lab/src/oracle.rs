//! Brute-force reference for F_crys on a four-point crystal.
//!
//! Every feasible gamma = gamma0 + Q is U diag(o) U^T with U in SO(4) and o in [0, 1]^4.
//! U is written as a product of six Givens rotations and o_i = sin^2(phi_i), so the
//! search runs over ten unconstrained angles with multistart Nelder-Mead.

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use polaron_core::{CoulombKernel, CrystalState, KernelMode, LatticeSpec, ScfParams};
use rand::Rng;

use crate::suites::stream;
use crate::LabError;

pub const TOY_POINTS: usize = 4;
const ANGLES: usize = 6;

/// Unit cell of four points with one deep well; one occupied level.
pub fn toy_crystal() -> Result<(CrystalState, CoulombKernel), LabError> {
    let spec = LatticeSpec::new(1, 1.0, TOY_POINTS, 1)?;
    let crystal = CrystalState::from_potential(&spec, 1, vec![-20.0, 5.0, 10.0, 5.0], 1.0, &ScfParams::default())?;
    let w = CoulombKernel::new(&spec, KernelMode::Bare)?;
    Ok((crystal, w))
}

pub fn toy_density<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..TOY_POINTS).map(|_| rng.random_range(0.0..2.0)).collect()
}

fn rotation(angles: &[f64]) -> DMatrix<f64> {
    let n = TOY_POINTS;
    let mut u = DMatrix::identity(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (s, c) = angles[k].sin_cos();
            let mut g = DMatrix::identity(n, n);
            g[(i, i)] = c;
            g[(j, j)] = c;
            g[(i, j)] = -s;
            g[(j, i)] = s;
            u = u * g;
            k += 1;
        }
    }
    u
}

struct Objective<'a> {
    crystal: &'a CrystalState,
    w: &'a CoulombKernel,
    nu: &'a [f64],
    shifted: DMatrix<f64>,
}

impl Objective<'_> {
    fn value(&self, p: &[f64]) -> f64 {
        let u = rotation(&p[..ANGLES]);
        let mut scaled = u.clone();
        for (j, phi) in p[ANGLES..].iter().enumerate() {
            scaled.column_mut(j).scale_mut(phi.sin().powi(2));
        }
        let q = scaled * u.transpose() - &self.crystal.gamma0;
        let h = self.crystal.spec.weight();
        let rho: Vec<f64> = (0..TOY_POINTS).map(|i| q[(i, i)] / h).collect();
        let kin = self.shifted.component_mul(&q).sum();
        kin + 0.5 * self.w.self_energy(&rho) + self.w.pair(self.nu, &rho)
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, ArgminError> {
        Ok(self.value(p))
    }
}

fn simplex(center: &[f64], step: f64) -> Vec<Vec<f64>> {
    let mut pts = vec![center.to_vec()];
    for i in 0..center.len() {
        let mut p = center.to_vec();
        p[i] += step;
        pts.push(p);
    }
    pts
}

fn nelder_mead(obj: &Objective, start: &[f64], step: f64, iters: u64) -> Result<(Vec<f64>, f64), LabError> {
    let solver = NelderMead::new(simplex(start, step)).with_sd_tolerance(1e-15).map_err(|e| LabError::Config(e.to_string()))?;
    let obj = Objective { crystal: obj.crystal, w: obj.w, nu: obj.nu, shifted: obj.shifted.clone() };
    let res = Executor::new(obj, solver)
        .configure(|s| s.max_iters(iters))
        .run()
        .map_err(|e| LabError::Config(e.to_string()))?;
    let state = res.state();
    let best = state.best_param.clone().unwrap_or_else(|| start.to_vec());
    Ok((best, state.best_cost))
}

/// Minimum of F[nu, Q] over the parameterized feasible family, from `starts` random starts
/// each refined by repeated restarts with shrinking simplices.
pub fn brute_force(crystal: &CrystalState, w: &CoulombKernel, nu: &[f64], starts: usize, seed: u64) -> Result<f64, LabError> {
    let n = crystal.spec.n_points();
    let shifted = crystal.hamiltonian() - DMatrix::identity(n, n) * crystal.eps_f;
    let obj = Objective { crystal, w, nu, shifted };
    let mut rng = stream(seed, 0);
    let mut best = f64::INFINITY;
    for _ in 0..starts {
        let mut p: Vec<f64> = (0..ANGLES + TOY_POINTS).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        let mut value = f64::INFINITY;
        for step in [0.8, 0.2, 0.05, 0.01, 1e-3] {
            let (q, v) = nelder_mead(&obj, &p, step, 3000)?;
            p = q;
            value = v;
        }
        best = best.min(value);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use polaron_core::response::Perturbation;
    use polaron_core::{response::energy_of, GridFunction};

    #[test]
    fn toy_crystal_has_one_occupied_level() {
        let (c, _) = toy_crystal().unwrap();
        assert_eq!(c.n_occ, 1);
        assert!(c.gap > 1.0);
    }

    #[test]
    fn objective_matches_library_energy() {
        let (c, w) = toy_crystal().unwrap();
        let mut rng = stream(3, 0);
        let nu = toy_density(&mut rng);
        let n = c.spec.n_points();
        let shifted = c.hamiltonian() - DMatrix::identity(n, n) * c.eps_f;
        let obj = Objective { crystal: &c, w: &w, nu: &nu, shifted };
        let p: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u = rotation(&p[..ANGLES]);
        let mut scaled = u.clone();
        for (j, phi) in p[ANGLES..].iter().enumerate() {
            scaled.column_mut(j).scale_mut(phi.sin().powi(2));
        }
        let mut q = scaled * u.transpose() - &c.gamma0;
        q = (&q + q.transpose()) * 0.5;
        let pert = Perturbation::new(q, &c).unwrap();
        let nu_f = GridFunction::real(c.spec, nu.clone()).unwrap();
        let lib = energy_of(&nu_f, &pert, &c, &w).unwrap();
        assert!((lib - obj.value(&p)).abs() < 1e-10);
        // Q = 0 is reachable.
        assert!(brute_force(&c, &w, &nu, 2, 1).unwrap() <= 1e-12);
    }
}
