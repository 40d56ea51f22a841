use std::sync::OnceLock;

use polaron_core::crystal::scf_solve;
use polaron_core::grid::{self, translate};
use polaron_core::response::{bump_density, kinetic_energy, ResponseParams};
use polaron_core::{CoulombKernel, CrystalState, GridFunction, KernelMode, LatticeSpec, NuclearDensity, ResponseContext, ScfParams};
use proptest::prelude::*;

fn crystal() -> &'static CrystalState {
    static C: OnceLock<CrystalState> = OnceLock::new();
    C.get_or_init(|| {
        let spec = LatticeSpec::new(1, 1.0, 8, 6).unwrap();
        scf_solve(&NuclearDensity::single_site([0.5, 0.0, 0.0], 0.1, 1.0), &spec, 1.0, &ScfParams::default()).unwrap()
    })
}

fn kernel() -> &'static CoulombKernel {
    static W: OnceLock<CoulombKernel> = OnceLock::new();
    W.get_or_init(|| CoulombKernel::bare(&crystal().spec))
}

fn params() -> ResponseParams {
    ResponseParams { gap_tol: Some(1e-9), ..Default::default() }
}

fn density(center: f64, radius: f64, charge: f64) -> Vec<f64> {
    bump_density(&crystal().spec, [center, 0.0, 0.0], radius, charge)
}

#[test]
fn crystal_is_an_insulating_projector() {
    let c = crystal();
    assert!(c.gap > 0.1);
    let p2 = &c.gamma0 * &c.gamma0;
    assert!((p2 - &c.gamma0).norm() < 1e-8);
    let charge: f64 = c.rho_super.iter().sum::<f64>() * c.spec.weight();
    assert!((charge - c.spec.n_cells() as f64).abs() < 1e-8);
}

#[test]
fn zero_charge_has_zero_response() {
    let c = crystal();
    let r = ResponseContext::new(c, kernel()).unwrap().solve(&vec![0.0; c.spec.n_points()], &params()).unwrap();
    assert!(r.value.abs() < 1e-12);
    assert!(kinetic_energy(&r.minimizer, c).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn response_is_bracketed(center in 1.0f64..5.0, radius in 0.4f64..1.5, charge in 0.1f64..1.0) {
        let c = crystal();
        let w = kernel();
        let nu = density(center, radius, charge);
        let r = ResponseContext::new(c, w).unwrap().solve(&nu, &params()).unwrap();
        let slack = 2.0 * r.gap_tol;
        prop_assert!(r.value <= slack);
        prop_assert!(r.value >= -0.5 * w.self_energy(&nu) - slack);
        r.minimizer.check_feasible(c).unwrap();
    }

    #[test]
    fn response_is_concave(a in 1.0f64..5.0, b in 1.0f64..5.0, theta in 0.1f64..0.9) {
        let ctx = ResponseContext::new(crystal(), kernel()).unwrap();
        let (nu0, nu1) = (density(a, 0.8, 0.6), density(b, 1.2, 0.4));
        let mix: Vec<f64> = nu0.iter().zip(&nu1).map(|(x, y)| (1.0 - theta) * x + theta * y).collect();
        let p = params();
        let f = |nu: &[f64]| ctx.solve(nu, &p).unwrap().value;
        let chord = (1.0 - theta) * f(&nu0) + theta * f(&nu1);
        prop_assert!(f(&mix) >= chord - 4e-9);
    }

    #[test]
    fn response_is_translation_invariant(center in 1.0f64..3.0, cells in 1i64..3) {
        let c = crystal();
        let ctx = ResponseContext::new(c, kernel()).unwrap();
        let nu = GridFunction::real(c.spec, density(center, 0.9, 0.5)).unwrap();
        let moved = translate(&nu, &[cells as f64 * c.spec.a, 0.0, 0.0]).unwrap();
        let p = params();
        let a = ctx.solve(&nu.to_real().unwrap(), &p).unwrap().value;
        let b = ctx.solve(&moved.to_real().unwrap(), &p).unwrap().value;
        prop_assert!((a - b).abs() <= 4e-9);
    }

    #[test]
    fn fourier_round_trip(values in proptest::collection::vec(-3.0f64..3.0, 24)) {
        let spec = LatticeSpec::new(1, 1.0, 8, 3).unwrap();
        let f = GridFunction::real(spec, values).unwrap();
        let back = grid::inverse_fourier(&grid::fourier(&f));
        let err = back.sub(&f).unwrap().norm();
        prop_assert!(err <= 1e-12 * (1.0 + f.norm()));
    }

    #[test]
    fn coulomb_energy_is_nonnegative(values in proptest::collection::vec(-1.0f64..1.0, 48), mu in 0.1f64..2.0) {
        let spec = LatticeSpec::new(1, 1.0, 8, 6).unwrap();
        let yukawa = CoulombKernel::new(&spec, KernelMode::Yukawa { mu }).unwrap();
        prop_assert!(yukawa.self_energy(&values) >= -1e-12);
        prop_assert!(CoulombKernel::bare(&spec).self_energy(&values) >= -1e-12);
    }
}
