//! Randomized property suites for the response functional and the adding lemma.

use std::time::Instant;

use nalgebra::DMatrix;
use polaron_core::localization::{adding_lemma_check, ADDING_TOL};
use polaron_core::response::{bump_density, ResponseContext};
use polaron_core::{grid, linalg, CoulombKernel, CrystalState, GridFunction, LatticeSpec, ResponseParams, ResponseResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::record::{Assertion, Table};
use crate::LabError;

/// Independent generator for sample `index` of a run with `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Nonnegative density made of one to three cos^2 bumps with random centers, radii and charges.
pub fn random_density(spec: &LatticeSpec, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream(seed, index);
    let bumps = rng.random_range(1..=3);
    let mut rho = vec![0.0; spec.n_points()];
    let side = spec.side().min(4.0 * spec.a);
    let origin = spec.center();
    for _ in 0..bumps {
        let mut c = origin;
        for x in c.iter_mut().take(spec.dim) {
            *x += (rng.random::<f64>() - 0.5) * side;
        }
        let r = spec.a * rng.random_range(0.4..1.5);
        let q = rng.random_range(0.2..1.0);
        for (v, b) in rho.iter_mut().zip(bump_density(spec, c, r, q)) {
            *v += b;
        }
    }
    rho
}

/// Settings of the response property suites.
#[derive(Debug, Clone)]
pub struct SuiteSettings {
    pub seed: u64,
    pub samples: usize,
    pub triples: usize,
    pub pairs: usize,
    pub translations: usize,
    pub strict: usize,
    pub shifts: Vec<f64>,
    pub thetas: Vec<f64>,
    pub t: f64,
}

pub struct SuiteOutput {
    pub assertions: Vec<Assertion>,
    pub tables: Vec<Table>,
    pub solves: usize,
    /// Wall time of the bracket samples.
    pub bracket_seconds: f64,
}

struct Solved {
    rho: Vec<f64>,
    res: ResponseResult,
}

fn solve_all(ctx: &ResponseContext, params: &ResponseParams, inputs: Vec<Vec<f64>>) -> Result<Vec<Solved>, LabError> {
    inputs
        .into_par_iter()
        .map(|rho| {
            let res = ctx.solve(&rho, params)?;
            Ok(Solved { rho, res })
        })
        .collect()
}

fn combine(a: &[f64], b: &[f64], s: f64, t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| s * x + t * y).collect()
}

/// Bracket, concavity, Coulomb-Lipschitz, translation and strict-concavity checks of F_crys.
pub fn fcrys_suites(crystal: &CrystalState, w: &CoulombKernel, params: &ResponseParams, s: &SuiteSettings) -> Result<SuiteOutput, LabError> {
    let spec = crystal.spec;
    let ctx = ResponseContext::new(crystal, w)?;
    let pool = s.samples.max(2 * s.triples.max(s.pairs)).max(s.translations).max(s.strict);
    let start = Instant::now();
    let mut base = solve_all(&ctx, params, (0..s.samples as u64).map(|i| random_density(&spec, s.seed, i)).collect())?;
    let bracket_seconds = start.elapsed().as_secs_f64();
    base.extend(solve_all(&ctx, params, (s.samples as u64..pool.max(s.samples) as u64).map(|i| random_density(&spec, s.seed, i)).collect())?);
    let mut solves = base.len();
    let mut assertions = Vec::new();

    let mut bracket = Table::new("bracket", &["index", "f", "lower", "gap_tol"]);
    let mut ok = true;
    let mut worst = f64::INFINITY;
    for (i, b) in base.iter().take(s.samples).enumerate() {
        let slack = 2.0 * b.res.gap_tol;
        let lower = -0.5 * b.res.d_nu;
        let margin = b.res.value - (lower - slack);
        ok &= b.res.value >= lower - slack && b.res.value <= 0.0;
        worst = worst.min(margin);
        bracket.push(vec![i as f64, b.res.value, lower, b.res.gap_tol]);
    }
    assertions.push(Assertion::new(
        "bracket",
        "-D(nu,nu)/2 - 2 gap_tol <= F_crys[nu] <= 0",
        ok,
        format!("{} samples, smallest lower margin {worst:.3e}", s.samples),
    ));

    let pairs: Vec<(usize, usize)> = (0..s.triples.max(s.pairs)).map(|i| (2 * i, 2 * i + 1)).collect();
    let mixes: Vec<Vec<f64>> = pairs
        .iter()
        .take(s.triples)
        .flat_map(|&(i, j)| s.thetas.iter().map(move |&th| (i, j, th)))
        .map(|(i, j, th)| combine(&base[i].rho, &base[j].rho, th, 1.0 - th))
        .collect();
    let mixed = solve_all(&ctx, params, mixes)?;
    solves += mixed.len();
    let mut concavity = Table::new("concavity", &["i", "j", "theta", "f_mix", "f_chord", "slack"]);
    let mut ok = true;
    let mut worst = f64::INFINITY;
    for (k, m) in mixed.iter().enumerate() {
        let (i, j) = pairs[k / s.thetas.len()];
        let th = s.thetas[k % s.thetas.len()];
        let (a, b) = (&base[i].res, &base[j].res);
        let chord = th * a.value + (1.0 - th) * b.value;
        let slack = 2.0 * a.gap_tol.max(b.gap_tol).max(m.res.gap_tol);
        ok &= m.res.value >= chord - slack;
        worst = worst.min(m.res.value - chord);
        concavity.push(vec![i as f64, j as f64, th, m.res.value, chord, slack]);
    }
    assertions.push(Assertion::new(
        "concavity",
        "F_crys[theta rho1 + (1 - theta) rho2] >= theta F_crys[rho1] + (1 - theta) F_crys[rho2] - 2 gap_tol",
        ok,
        format!("{} checks, smallest excess {worst:.3e}", mixed.len()),
    ));

    let mut lipschitz = Table::new("lipschitz", &["i", "j", "diff", "bound", "local_bound", "slack"]);
    let (mut ok, mut ok_local) = (true, true);
    let (mut worst, mut worst_local) = (f64::INFINITY, f64::INFINITY);
    for &(i, j) in pairs.iter().take(s.pairs) {
        let (a, b) = (&base[i], &base[j]);
        let diff = (a.res.value - b.res.value).abs();
        let d = w.self_energy(&combine(&a.rho, &b.rho, 1.0, -1.0));
        let bound = 0.5 * d;
        let local = 2.0 * d.max(0.0).sqrt() * a.res.d_nu.max(b.res.d_nu).max(0.0).sqrt();
        let slack = 2.0 * a.res.gap_tol.max(b.res.gap_tol);
        ok &= diff <= bound + slack;
        ok_local &= diff <= local + slack;
        worst = worst.min(bound + slack - diff);
        worst_local = worst_local.min(local + slack - diff);
        lipschitz.push(vec![i as f64, j as f64, diff, bound, local, slack]);
    }
    assertions.push(Assertion::new(
        "lipschitz",
        "|F_crys[rho] - F_crys[rho']| <= D(rho - rho', rho - rho')/2 + 2 gap_tol",
        ok,
        format!("{} pairs, smallest margin {worst:.3e}", s.pairs),
    ));
    assertions.push(Assertion::new(
        "lipschitz_local",
        "|F_crys[rho] - F_crys[rho']| <= 2 |rho - rho'|_C max(|rho|_C, |rho'|_C) + 2 gap_tol",
        ok_local,
        format!("{} pairs, smallest margin {worst_local:.3e}", s.pairs),
    ));

    let mut moved = Vec::new();
    for b in base.iter().take(s.translations) {
        for &tau in &s.shifts {
            let f = GridFunction::real(spec, b.rho.clone())?;
            let shift = vec![tau * spec.a; spec.dim];
            moved.push(grid::translate(&f, &shift)?.to_real()?);
        }
    }
    let translated = solve_all(&ctx, params, moved)?;
    solves += translated.len();
    let mut translation = Table::new("translation", &["index", "shift", "f", "f_shifted", "slack"]);
    let mut ok = true;
    let mut worst = 0.0f64;
    for (k, m) in translated.iter().enumerate() {
        let i = k / s.shifts.len();
        let tau = s.shifts[k % s.shifts.len()];
        let slack = 2.0 * base[i].res.gap_tol.max(m.res.gap_tol);
        let d = (m.res.value - base[i].res.value).abs();
        ok &= d <= slack;
        worst = worst.max(d);
        translation.push(vec![i as f64, tau, base[i].res.value, m.res.value, slack]);
    }
    assertions.push(Assertion::new(
        "translation",
        "|F_crys[rho(. - tau)] - F_crys[rho]| <= 2 gap_tol for lattice vectors tau",
        ok,
        format!("{} checks, largest difference {worst:.3e}", translated.len()),
    ));

    let chosen: Vec<usize> = (0..base.len()).filter(|&i| base[i].res.value < -10.0 * base[i].res.gap_tol).take(s.strict).collect();
    let scaled = solve_all(&ctx, params, chosen.iter().map(|&i| base[i].rho.iter().map(|v| s.t * v).collect()).collect())?;
    solves += scaled.len();
    let mut strict = Table::new("strict_concavity", &["index", "t", "f", "f_scaled", "margin", "gap_tol"]);
    let mut ok = chosen.len() == s.strict;
    let mut worst = f64::INFINITY;
    for (&i, m) in chosen.iter().zip(&scaled) {
        let margin = m.res.value - s.t * base[i].res.value;
        let tol = base[i].res.gap_tol.max(m.res.gap_tol);
        ok &= margin > tol;
        worst = worst.min(margin / tol);
        strict.push(vec![i as f64, s.t, base[i].res.value, m.res.value, margin, tol]);
    }
    assertions.push(Assertion::new(
        "strict_concavity",
        "F_crys[t rho] - t F_crys[rho] > gap_tol when F_crys[rho] < -10 gap_tol",
        ok,
        format!("{} of {} samples, smallest margin/gap_tol {worst:.3e}", chosen.len(), s.strict),
    ));

    Ok(SuiteOutput { assertions, tables: vec![bracket, concavity, lipschitz, translation, strict], solves, bracket_seconds })
}

/// One random instance of the adding lemma at dimension `n`.
pub struct AddingInstance {
    pub pi: DMatrix<f64>,
    pub chi: DMatrix<f64>,
    pub eta: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q2: DMatrix<f64>,
}

fn random_symmetric<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    (&a + a.transpose()) * 0.5
}

fn random_state<R: Rng>(pi: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let n = pi.nrows();
    let u = linalg::random_orthogonal(n, rng);
    let mut scaled = u.clone();
    for j in 0..n {
        let o = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        scaled.column_mut(j).scale_mut(o);
    }
    let mut q = scaled * u.transpose() - pi;
    linalg::symmetrize(&mut q);
    q
}

pub fn adding_instance<R: Rng>(n: usize, rng: &mut R) -> AddingInstance {
    let u = linalg::random_orthogonal(n, rng);
    let pi = linalg::projector(&u, 0..n / 2);
    let chi = random_symmetric(n, rng);
    let eta = random_symmetric(n, rng);
    let top = linalg::sym_eigenvalues(&chi * &chi + &eta * &eta).max();
    // Half the instances saturate chi^2 + eta^2 <= 1.
    let s = if rng.random::<bool>() { 1.0 } else { rng.random::<f64>() };
    let scale = s / top.sqrt() * (1.0 - 1e-14);
    let q = random_state(&pi, rng);
    let q2 = random_state(&pi, rng);
    AddingInstance { pi, chi: chi * scale, eta: eta * scale, q, q2 }
}

/// Runs `count` random instances at dimension `n`; returns the assertion and the number of failures.
pub fn adding_lemma_suite(n: usize, count: usize, seed: u64) -> Result<(Assertion, usize), LabError> {
    let outcomes: Vec<bool> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let inst = adding_instance(n, &mut rng);
            adding_lemma_check(&inst.pi, &inst.chi, &inst.eta, &inst.q, &inst.q2).map_err(LabError::from)
        })
        .collect::<Result<_, _>>()?;
    let failures = outcomes.iter().filter(|o| !**o).count();
    let a = Assertion::new(
        "adding_lemma",
        "-Pi <= X Q X + Y Q' Y <= 1 - Pi for feasible Q, Q' and chi^2 + eta^2 <= 1",
        failures == 0,
        format!("{count} instances at n = {n}, tolerance {ADDING_TOL:e}, {failures} failures"),
    );
    Ok((a, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_are_deterministic_and_nonnegative() {
        let spec = LatticeSpec::new(1, 1.0, 8, 8).unwrap();
        let a = random_density(&spec, 7, 3);
        assert_eq!(a, random_density(&spec, 7, 3));
        assert_ne!(a, random_density(&spec, 7, 4));
        assert!(a.iter().all(|v| *v >= 0.0));
        assert!(a.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn adding_lemma_small_suite() {
        let (a, failures) = adding_lemma_suite(8, 50, 1).unwrap();
        assert!(a.passed);
        assert_eq!(failures, 0);
    }
}
