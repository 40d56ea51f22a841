//! Experiment dispatch. Each experiment returns metrics, asserted properties and tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use polaron_core::crystal::{band_structure, uniform_kpoints, ELECTRON_MASS};
use polaron_core::localization::localization_error_report;
use polaron_core::pekar::{self, ChoquardParams, DielectricModel, GaussianProfile};
use polaron_core::polaron::{self, Factor, Init, Terms};
use polaron_core::response::{bump_density, decoupling_probe, ResponseContext};
use polaron_core::{grid, linalg, CoulombKernel, CrystalState, GridFunction, LatticeSpec, PolaronParams, ResponseParams, SingleState};
use rand::Rng;

use crate::config::{Experiment, ExperimentConfig};
use crate::oracle;
use crate::record::{Assertion, Table};
use crate::suites::{self, stream, SuiteSettings};
use crate::{cache, LabError};

/// Instances of the adding lemma checked by the localization experiment.
pub const ADDING_INSTANCES: usize = 1000;
pub const ADDING_DIM: usize = 16;
/// Random densities compared against the brute-force search.
pub const ORACLE_SAMPLES: usize = 10;
pub const ORACLE_STARTS: usize = 12;
pub const ORACLE_TOL: f64 = 1e-5;
pub const GRADIENT_SAMPLES: usize = 10;
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub cache_hit: bool,
    pub metrics: BTreeMap<String, f64>,
    pub assertions: Vec<Assertion>,
    pub tables: Vec<Table>,
}

impl Outcome {
    fn metric(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.to_string(), v);
    }

    fn check(&mut self, name: &str, property: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion::new(name, property, passed, detail));
    }
}

pub fn execute(cfg: &ExperimentConfig, cache_root: &Path, no_cache: bool) -> Result<Outcome, LabError> {
    if let Experiment::Choquard { eps, tol } = cfg.experiment {
        return choquard(cfg, eps, tol);
    }
    let (crystal, hit) = cache::crystal(cfg, cache_root, no_cache)?;
    let w = CoulombKernel::new(&cfg.lattice, cfg.kernel)?;
    let mut out = Outcome { cache_hit: hit, ..Default::default() };
    out.metric("gap", crystal.gap);
    out.metric("eps_f", crystal.eps_f);
    out.metric("e_per", crystal.e_per());
    match &cfg.experiment {
        Experiment::Crystal {} => crystal_props(&crystal, &mut out)?,
        Experiment::FcrysProps { samples, triples, pairs, translations, strict, shifts, thetas, t } => {
            let s = SuiteSettings {
                seed: cfg.seed,
                samples: *samples,
                triples: *triples,
                pairs: *pairs,
                translations: *translations,
                strict: *strict,
                shifts: shifts.clone(),
                thetas: thetas.clone(),
                t: *t,
            };
            let suite = suites::fcrys_suites(&crystal, &w, &cfg.response, &s)?;
            out.metric("solves", suite.solves as f64);
            out.metric("bracket_seconds", suite.bracket_seconds);
            out.assertions.extend(suite.assertions);
            out.tables.extend(suite.tables);
            oracle_check(cfg, &mut out)?;
        }
        Experiment::Decoupling { separations, radius, charges } => decoupling(cfg, &crystal, &w, separations, *radius, *charges, &mut out)?,
        Experiment::Localization { .. } => localization(cfg, &crystal, &w, &mut out)?,
        Experiment::E1 { outer_tol, max_outer, init, lambdas, profile_s } => {
            let params = PolaronParams {
                outer_tol: *outer_tol,
                max_outer: *max_outer,
                init: init.clone(),
                response: cfg.response,
                seed: cfg.seed,
                ..Default::default()
            };
            e1(cfg, &crystal, &w, &params, lambdas, *profile_s, &mut out)?
        }
        Experiment::Binding { n, shift, outer_tol, statistics } => {
            let params = PolaronParams {
                outer_tol: *outer_tol,
                response: cfg.response,
                statistics: *statistics,
                seed: cfg.seed,
                ..Default::default()
            };
            binding(cfg, &crystal, &w, &params, *n, *shift, &mut out)?
        }
        Experiment::Macrolimit { lambdas, profile_s } => macrolimit(cfg, &crystal, &w, lambdas, *profile_s, &mut out)?,
        Experiment::Choquard { .. } => unreachable!(),
    }
    Ok(out)
}

fn crystal_props(c: &CrystalState, out: &mut Outcome) -> Result<(), LabError> {
    let spec = c.spec;
    out.metric("scf_iterations", c.scf.iterations as f64);
    out.metric("scf_residual", c.scf.residual);
    let idem = (&c.gamma0 * &c.gamma0 - &c.gamma0).amax();
    out.check("projector", "gamma0^2 = gamma0", idem <= 1e-8, format!("{idem:.3e}"));
    let trace = c.gamma0.trace();
    let expected = (c.z * spec.n_cells()) as f64;
    out.check("trace", "Tr gamma0 = Z M^d", (trace - expected).abs() < 1e-8, format!("{trace} vs {expected}"));
    let h = c.hamiltonian();
    let comm = (&h * &c.gamma0 - &c.gamma0 * &h).amax();
    out.check("commutes", "[H0, gamma0] = 0", comm <= 1e-6, format!("{comm:.3e}"));
    let charge: f64 = c.rho_cell.iter().sum::<f64>() * spec.unit_cell().weight();
    out.check("charge", "cell integral of rho0 = Z", (charge - c.z as f64).abs() <= 1e-6, format!("{charge}"));
    out.check("insulator", "eps_F lies strictly inside a positive gap", c.gap > 0.0, format!("gap {:.6e}", c.gap));

    let kpts = uniform_kpoints(spec.dim, spec.a, if spec.dim == 1 { 32 } else { 6 });
    let bands = band_structure(&c.potential(), ELECTRON_MASS, &kpts)?;
    let nb = bands.first().map_or(0, |b| b.len()).min(2 * c.z + 4);
    let mut cols: Vec<String> = vec!["kx".into(), "ky".into(), "kz".into()];
    cols.extend((0..nb).map(|j| format!("band_{j}")));
    let names: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = Table::new("bands", &names);
    for (k, b) in kpts.iter().zip(&bands) {
        let mut row = k.to_vec();
        row.extend(b.iter().take(nb));
        table.push(row);
    }
    out.tables.push(table);
    Ok(())
}

fn oracle_check(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let start = Instant::now();
    let (toy, w) = oracle::toy_crystal()?;
    let params = ResponseParams { gap_tol: Some(1e-10), ..cfg.response };
    let ctx = ResponseContext::new(&toy, &w)?;
    let mut table = Table::new("oracle", &["index", "f_crys", "brute_force", "difference"]);
    let mut worst = 0.0f64;
    for i in 0..ORACLE_SAMPLES {
        let mut rng = stream(cfg.seed ^ 0x0a0c, i as u64);
        let nu = oracle::toy_density(&mut rng);
        let f = ctx.solve(&nu, &params)?.value;
        let b = oracle::brute_force(&toy, &w, &nu, ORACLE_STARTS, cfg.seed.wrapping_add(i as u64))?;
        worst = worst.max((f - b).abs());
        table.push(vec![i as f64, f, b, f - b]);
    }
    out.metric("oracle_max_difference", worst);
    out.metric("oracle_seconds", start.elapsed().as_secs_f64());
    out.check(
        "oracle",
        "F_crys agrees with a direct search over gamma = U diag(o) U^T on a four-point crystal",
        worst <= ORACLE_TOL,
        format!("{ORACLE_SAMPLES} densities, largest difference {worst:.3e}"),
    );
    out.tables.push(table);
    Ok(())
}

fn list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Center of the unit cell nearest to `x` along each axis.
fn cell_center(spec: &LatticeSpec, x: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for i in 0..spec.dim {
        c[i] = ((x[i] / spec.a).floor() + 0.5) * spec.a;
    }
    c
}

fn decoupling(
    cfg: &ExperimentConfig,
    crystal: &CrystalState,
    w: &CoulombKernel,
    separations: &[f64],
    radius: f64,
    charges: [f64; 2],
    out: &mut Outcome,
) -> Result<(), LabError> {
    let spec = crystal.spec;
    let mut quarter = [0.0; 3];
    quarter[0] = 0.25 * spec.side();
    let center = cell_center(&spec, quarter);
    let rho1 = GridFunction::real(spec, bump_density(&spec, center, radius * spec.a, charges[0]))?;
    let rho2 = GridFunction::real(spec, bump_density(&spec, center, radius * spec.a, charges[1]))?;
    let seps: Vec<f64> = separations.iter().map(|s| s * spec.a).collect();
    let t = decoupling_probe(&rho1, &rho2, &seps, crystal, w, &cfg.response)?;
    out.metric("f1", t.f1);
    out.metric("f2", t.f2);
    let mut table = Table::new("decoupling", &["separation", "f_joint", "delta"]);
    for r in &t.rows {
        table.push(vec![r.separation, r.f_joint, r.delta]);
    }
    let deltas: Vec<f64> = t.rows.iter().map(|r| r.delta).collect();
    let decreasing = deltas.windows(2).all(|p| p[1] < p[0]);
    out.check(
        "decoupling_monotone",
        "delta(s) = |F[rho1 + rho2(. - s)] - F[rho1] - F[rho2]| decreases strictly with s",
        decreasing,
        list(&deltas),
    );
    let (first, last) = (deltas[0], deltas[deltas.len() - 1]);
    out.check(
        "decoupling_ratio",
        "delta at the largest separation is below a fifth of delta at the smallest",
        last < 0.2 * first,
        format!("ratio {:.3e}", last / first),
    );
    if let Some(slope) = polaron_core::localization::loglog_slope(&t.rows.iter().map(|r| (r.separation, r.delta)).collect::<Vec<_>>()) {
        out.metric("delta_slope", slope);
    }
    out.tables.push(table);
    Ok(())
}

fn localization(cfg: &ExperimentConfig, crystal: &CrystalState, w: &CoulombKernel, out: &mut Outcome) -> Result<(), LabError> {
    let Experiment::Localization { radii, probe_radius, probe_charge, approximation_threshold } = &cfg.experiment else {
        return Err(LabError::Config("not a localization experiment".into()));
    };
    let (probe_radius, probe_charge, approximation_threshold) = (*probe_radius, *probe_charge, *approximation_threshold);
    let start = Instant::now();
    let (adding, failures) = suites::adding_lemma_suite(ADDING_DIM, ADDING_INSTANCES, cfg.seed)?;
    out.metric("adding_failures", failures as f64);
    out.metric("adding_seconds", start.elapsed().as_secs_f64());
    let start = Instant::now();
    out.assertions.push(adding);

    let spec = crystal.spec;
    let center = cell_center(&spec, spec.center());
    let nu = bump_density(&spec, center, probe_radius * spec.a, probe_charge);
    let res = ResponseContext::new(crystal, w)?.solve(&nu, &cfg.response)?;
    out.metric("f_probe", res.value);
    out.metric("probe_iterations", res.iterations as f64);
    let rs: Vec<f64> = radii.iter().map(|r| r * spec.a).collect();
    let rep = localization_error_report(&res.minimizer, crystal, w, &rs, center)?;
    let mut table = Table::new("localization", &["radius", "e_rho", "e_kin", "n_bound", "approximation", "gradient_constant"]);
    for r in &rep.rows {
        table.push(vec![r.radius, r.e_rho, r.e_kin, r.n_bound, r.approximation, r.gradient_constant]);
    }
    out.tables.push(table);
    let sr = rep.slope_rho.unwrap_or(f64::NAN);
    let sk = rep.slope_kin.unwrap_or(f64::NAN);
    out.metric("slope_rho", sr);
    out.metric("slope_kin", sk);
    out.metric("radii_skipped", rep.skipped.len() as f64);
    out.check("density_decay", "log-log slope of e_rho(R) is at most -1/2", sr <= -0.5, format!("slope {sr:.3}"));
    out.check(
        "kinetic_decay",
        "log-log slope of e_kin(R) is at most the e_rho slope minus 1/2",
        sk <= sr - 0.5,
        format!("slope {sk:.3} vs {sr:.3}"),
    );
    out.metric("localization_seconds", start.elapsed().as_secs_f64());
    out.check("all_radii", "every radius fits the supercell", rep.skipped.is_empty(), format!("skipped {:?}", rep.skipped));
    let approx: Vec<f64> = rep.rows.iter().map(|r| r.approximation).collect();
    let last = approx.last().copied().unwrap_or(f64::NAN);
    out.check(
        "approximation",
        "q_norm(Q - X Q X) / q_norm(Q) decreases in R and ends below the threshold",
        approx.windows(2).all(|p| p[1] < p[0]) && last <= approximation_threshold,
        format!("{} vs {approximation_threshold}", list(&approx)),
    );
    Ok(())
}

/// Random smooth normalized state: a few complex Gaussians.
pub fn random_state(spec: &LatticeSpec, mass: f64, seed: u64, index: u64) -> Result<SingleState, LabError> {
    let mut rng = stream(seed, index);
    let mut values = vec![Complex64::new(0.0, 0.0); spec.n_points()];
    for _ in 0..3 {
        let mut c = [0.0; 3];
        for x in c.iter_mut().take(spec.dim) {
            *x = rng.random::<f64>() * spec.side();
        }
        let width = spec.a * rng.random_range(0.5..2.0);
        let amp = Complex64::from_polar(rng.random_range(0.3..1.0), rng.random_range(0.0..std::f64::consts::TAU));
        let k = rng.random_range(-2.0..2.0) / spec.a;
        for (i, v) in values.iter_mut().enumerate() {
            let x = spec.position(i);
            let d = spec.displacement(&x, &c);
            let r2: f64 = d.iter().map(|t| t * t).sum();
            *v += amp * (-r2 / (2.0 * width * width)).exp() * Complex64::from_polar(1.0, k * d[0]);
        }
    }
    Ok(SingleState::new(GridFunction::complex(*spec, values)?, mass)?)
}

/// Directional derivative against the centered finite difference at step `t`.
pub fn gradient_check(
    crystal: &CrystalState,
    w: &CoulombKernel,
    mass: f64,
    seed: u64,
    samples: usize,
    t: f64,
) -> Result<(Table, f64), LabError> {
    let rp = ResponseParams { gap_tol: Some(1e-12), ..Default::default() };
    let exact_rp = ResponseParams { gap_tol: Some(1e-14), ..Default::default() };
    let mut table = Table::new("gradient", &["index", "derivative", "finite_difference", "relative"]);
    let mut worst = 0.0f64;
    for i in 0..samples {
        let psi = random_state(&crystal.spec, mass, seed, i as u64)?;
        let mut rng = stream(seed ^ 0x7a9, i as u64);
        let delta = polaron::random_tangent(&psi, &mut rng)?;
        let exact = polaron::directional_derivative(&psi, &delta, crystal, w, &exact_rp)?;
        let fd = polaron::finite_difference(&psi, &delta, t, crystal, w, &rp)?;
        let rel = (exact - fd).abs() / exact.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        table.push(vec![i as f64, exact, fd, rel]);
    }
    Ok((table, worst))
}

fn e1(
    cfg: &ExperimentConfig,
    crystal: &CrystalState,
    w: &CoulombKernel,
    params: &PolaronParams,
    lambdas: &[f64],
    profile_s: f64,
    out: &mut Outcome,
) -> Result<(), LabError> {
    let e_per = crystal.e_per();
    let start = Instant::now();
    let r = polaron::minimize_e1(crystal, cfg.mass, w, params)?;
    out.metric("e1_seconds", start.elapsed().as_secs_f64());
    out.metric("e1", r.energy);
    out.metric("binding_energy", e_per - r.energy);
    out.metric("outer_iterations", r.outer_iterations as f64);
    out.metric("eigen_residual", r.eigen_residual);
    out.metric("monotone_excess", r.monotone_excess);
    let mut trace = Table::new("outer_trace", &["half_step", "energy"]);
    for (i, v) in r.outer_trace.iter().enumerate() {
        trace.push(vec![i as f64, *v]);
    }
    out.tables.push(trace);
    out.check(
        "bound_below_eper",
        "E(1) < E_per - 10 outer_tol",
        r.energy < e_per - 10.0 * params.outer_tol,
        format!("E(1) = {:.10e}, E_per = {e_per:.10e}", r.energy),
    );
    out.check("monotone", "alternating minimization never increases the energy beyond 2 gap_tol", r.monotone(), format!("excess {:.3e}", r.monotone_excess));
    out.check("eigen_residual", "psi is the ground state of its mean-field Hamiltonian to 1e-6", r.eigen_residual <= 1e-6, format!("{:.3e}", r.eigen_residual));
    let psi = r.single().expect("single-particle result").clone();
    let gap_tol = cfg.response.tolerance(w.self_energy(&psi.density()));
    let last_gap = r.inner_gaps.last().copied().unwrap_or(f64::NAN);
    out.check("inner_gap", "the final response solve meets its gap tolerance", last_gap <= gap_tol, format!("{last_gap:.3e} vs {gap_tol:.3e}"));

    let spec = crystal.spec;
    let mut tau = vec![0.0; spec.dim];
    tau[0] = spec.a;
    let moved = grid::translate(&psi.psi, &tau)?;
    let restart = PolaronParams { init: Init::Provided(moved.values().to_vec()), ..params.clone() };
    let r2 = polaron::minimize_e1(crystal, cfg.mass, w, &restart)?;
    let diff = (r2.energy - r.energy).abs();
    out.metric("restart_difference", diff);
    out.check(
        "translation_restart",
        "restarting from psi(. - a) reconverges to E(1) within 5 outer_tol",
        diff <= 5.0 * params.outer_tol,
        format!("{diff:.3e}"),
    );

    let (grad, worst) = gradient_check(crystal, w, cfg.mass, cfg.seed, GRADIENT_SAMPLES, 1e-3)?;
    out.metric("gradient_worst_relative", worst);
    out.check(
        "gradient",
        "directional derivatives of the single-polaron energy match finite differences",
        worst <= GRADIENT_TOL,
        format!("{GRADIENT_SAMPLES} states, worst relative error {worst:.3e}"),
    );
    out.tables.push(grad);

    if !lambdas.is_empty() {
        let profile = GaussianProfile { s: profile_s };
        let ls: Vec<f64> = lambdas.iter().map(|l| l * spec.a).collect();
        let rows = polaron::trial_sweep(crystal, &profile, &ls, cfg.mass, w, &cfg.response)?;
        let mut table = Table::new("trial_sweep", &["lambda", "energy", "scaled"]);
        for row in &rows {
            table.push(vec![row.lambda, row.energy, row.scaled]);
        }
        out.tables.push(table);
        let best_trial = rows.iter().map(|t| t.energy).fold(f64::INFINITY, f64::min);
        out.check(
            "e1_below_trials",
            "E(1) does not exceed the energy of any dilated trial state",
            r.energy <= best_trial + 2.0 * gap_tol,
            format!("E(1) {:.6e}, best trial {best_trial:.6e}", r.energy),
        );
        let scaled: Vec<f64> = rows.iter().map(|t| t.scaled).collect();
        let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
        let spread = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - scaled.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        out.metric("trial_scaled_mean", mean);
        out.metric("trial_scaled_spread", spread);
        out.check("trial_negative", "lambda (E(psi_lambda) - E_per) < 0 for every lambda", scaled.iter().all(|s| *s < 0.0), list(&scaled));
        out.check(
            "trial_converges",
            "lambda (E(psi_lambda) - E_per) varies by at most half its mean magnitude",
            spread <= 0.5 * mean.abs(),
            format!("spread {spread:.3e}, mean {mean:.3e}"),
        );
    }
    Ok(())
}

/// psi restricted to the points within `radius` of its largest amplitude, renormalized.
fn truncate(psi: &SingleState, radius: f64) -> Result<SingleState, LabError> {
    let spec = *psi.spec();
    let rho = psi.density();
    let peak = (0..rho.len()).max_by(|&i, &j| rho[i].total_cmp(&rho[j])).unwrap_or(0);
    let c = spec.position(peak);
    let values = psi
        .psi
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| if spec.distance(&spec.position(i), &c) < radius { *v } else { Complex64::new(0.0, 0.0) })
        .collect();
    Ok(SingleState::new(GridFunction::complex(spec, values)?, psi.mass)?)
}

fn binding(
    cfg: &ExperimentConfig,
    crystal: &CrystalState,
    w: &CoulombKernel,
    params: &PolaronParams,
    n: usize,
    shift: f64,
    out: &mut Outcome,
) -> Result<(), LabError> {
    let spec = crystal.spec;
    let rp = &params.response;
    let start = Instant::now();
    let report = polaron::binding_report(n, crystal, cfg.mass, w, params)?;
    out.metric("binding_seconds", start.elapsed().as_secs_f64());
    let mut table = Table::new("binding", &["n", "k", "e_k", "e_n_minus_k", "split", "e_n", "strict", "large"]);
    let e = |k: usize| report.energies[k - 1];
    for row in &report.rows {
        table.push(vec![
            n as f64,
            row.k as f64,
            e(row.k),
            e(n - row.k),
            row.split,
            row.e_n,
            row.strict as u8 as f64,
            row.large as u8 as f64,
        ]);
    }
    out.tables.push(table);
    for (k, v) in report.energies.iter().enumerate() {
        out.metric(&format!("e{}", k + 1), *v);
    }
    out.metric("strict_binding", report.satisfied as u8 as f64);
    out.check(
        "large_binding",
        "E(N) <= E(N - k) + E(k) + tol for every split",
        report.large_satisfied,
        format!("energies {}", list(&report.energies)),
    );

    let e1 = polaron::minimize_e1(crystal, cfg.mass, w, params)?;
    let psi1 = e1.single().expect("single-particle result");
    let s = shift * spec.a;
    let window = 0.5 * s.min(spec.side() - s) - spec.spacing();
    let factor = Factor::Single(truncate(psi1, window)?);
    let trial = polaron::wedge_trial(&factor, &factor, &[s])?;
    let trial_energy = polaron::energy_many(&trial, crystal, w, rp)?;
    let e2 = report.energies.get(1).copied().unwrap_or(f64::NAN);
    let tol = 2.0 * params.outer_tol.max(rp.tolerance(0.0)) * 2.0;
    out.metric("wedge_energy", trial_energy);
    out.check(
        "wedge_bound",
        "E(2) <= energy of the antisymmetrized product of two separated one-polaron states + tol",
        e2 <= trial_energy + tol,
        format!("E(2) {e2:.8e}, trial {trial_energy:.8e}"),
    );

    let free = PolaronParams { terms: Terms { interaction: false, response: false }, ..params.clone() };
    let rf = polaron::minimize_en(2, crystal, cfg.mass, w, &free)?;
    let levels = linalg::sym_eigenvalues(crystal.with_mass(cfg.mass)?.polaron_hamiltonian());
    let mut sorted: Vec<f64> = levels.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let expected = match params.statistics {
        polaron_core::Statistics::Fermion => sorted[0] + sorted[1],
        polaron_core::Statistics::Boson => 2.0 * sorted[0],
    };
    let diff = (rf.energy - expected).abs();
    out.metric("free_pair_difference", diff);
    out.check(
        "free_pair",
        "without interaction and response E(2) is the sum of the two lowest one-body levels",
        diff <= 1e-8,
        format!("{:.12e} vs {expected:.12e}", rf.energy),
    );
    Ok(())
}

fn macrolimit(cfg: &ExperimentConfig, crystal: &CrystalState, w: &CoulombKernel, lambdas: &[f64], profile_s: f64, out: &mut Outcome) -> Result<(), LabError> {
    let spec = crystal.spec;
    let profile = GaussianProfile { s: profile_s };
    let eps_true = 2.5;
    let ls: Vec<f64> = lambdas.iter().map(|l| l * spec.a).collect();
    let dens: Vec<Vec<f64>> = ls.iter().map(|l| profile.density(&spec, *l)).collect();
    let synthetic: Vec<(f64, f64)> =
        ls.iter().zip(&dens).map(|(l, rho)| (*l, pekar::fp_effective_with(rho, &DielectricModel::Scalar(eps_true), w))).collect();
    let (eps_back, _, _) = pekar::epsilon_from_table(&synthetic, &dens, w)?;
    out.metric("synthetic_eps", eps_back);
    out.check(
        "synthetic_round_trip",
        "fitting exact c / lambda data recovers the dielectric constant used to make it",
        (eps_back - eps_true).abs() <= 1e-6,
        format!("{eps_back:.12} vs {eps_true}"),
    );

    let fit = pekar::extract_epsilon(crystal, &profile, &ls, w, &cfg.response)?;
    let mut table = Table::new("macrolimit", &["lambda", "f_crys", "lambda_f_crys", "residual", "eps_lambda"]);
    for (((l, f), r), e) in fit.table.iter().zip(&fit.residuals).zip(&fit.eps_per_lambda) {
        table.push(vec![*l, *f, l * f, *r, *e]);
    }
    out.tables.push(table);
    out.metric("eps_fit", fit.eps_fit);
    out.metric("slope_fit", fit.slope_fit);
    out.metric("c_fit", fit.c);
    out.check(
        "inverse_scaling",
        "log-log slope of |F_crys[rho_lambda]| against lambda lies in [-1.3, -0.7]",
        (-1.3..=-0.7).contains(&fit.slope_fit),
        format!("slope {:.4}", fit.slope_fit),
    );
    out.check("eps_above_one", "the fitted dielectric constant exceeds 1", fit.eps_fit > 1.0, format!("{:.6}", fit.eps_fit));
    Ok(())
}

fn choquard(cfg: &ExperimentConfig, eps: f64, tol: f64) -> Result<Outcome, LabError> {
    let spec = cfg.lattice;
    let model = DielectricModel::Scalar(eps);
    let params = ChoquardParams { tol, kernel: cfg.kernel, ..Default::default() };
    let r = pekar::choquard_solve(&model, cfg.mass, &spec, &params)?;
    let mut out = Outcome::default();
    out.metric("energy", r.energy);
    out.metric("residual", r.residual);
    out.metric("iterations", r.iterations as f64);
    let mut trace = Table::new("choquard_trace", &["iteration", "energy"]);
    for (i, v) in r.energy_trace.iter().enumerate() {
        trace.push(vec![i as f64, *v]);
    }
    out.tables.push(trace);
    let monotone = r.energy_trace.windows(2).all(|p| p[1] <= p[0] + 1e-14 * p[0].abs().max(1.0));
    out.check("monotone", "the Pekar energy never increases along the descent", monotone, format!("{} steps", r.energy_trace.len()));
    let w = CoulombKernel::new(&spec, cfg.kernel)?;
    let c = spec.center();
    let mut best_trial = f64::INFINITY;
    for width in [0.5, 1.0, 2.0, 4.0] {
        let g = GridFunction::from_fn(spec, |x| {
            let r = spec.distance(&x, &c);
            (-r * r / (4.0 * width * width * spec.a * spec.a)).exp()
        });
        best_trial = best_trial.min(pekar::pekar_energy(&SingleState::new(g, cfg.mass)?, &model, &w)?);
    }
    out.metric("best_gaussian", best_trial);
    out.check("below_gaussians", "the Choquard energy does not exceed any Gaussian trial energy", r.energy <= best_trial + tol, format!("{:.8e} vs {best_trial:.8e}", r.energy));
    let mut steps = vec![0i64; spec.dim];
    steps[0] = (spec.points_per_axis() / 3) as i64;
    let moved = grid::shift_points(&r.state.psi, &steps);
    let r2 = pekar::choquard_from(&model, cfg.mass, SingleState::new(moved, cfg.mass)?, &params)?;
    let diff = (r2.energy - r.energy).abs();
    out.metric("restart_difference", diff);
    out.check(
        "translation_restart",
        "restarting from a translated minimizer reconverges to the same energy",
        diff <= 10.0 * tol * r.energy.abs().max(1.0),
        format!("{diff:.3e}"),
    );
    Ok(out)
}
