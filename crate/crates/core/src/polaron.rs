//! Single- and many-polaron energies, alternating ground-state solvers, trial states and
//! binding tables.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coulomb::CoulombKernel;
use crate::crystal::CrystalState;
use crate::error::{Error, Result};
use crate::grid::{self, GridFunction, LatticeSpec};
use crate::lanczos::{self, LanczosParams};
use crate::linalg;
use crate::pekar::GaussianProfile;
use crate::response::{self, Perturbation, ResponseContext, ResponseParams};

const NORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SingleState {
    pub psi: GridFunction,
    pub mass: f64,
}

impl SingleState {
    /// Normalizes `psi` to unit L2 norm.
    pub fn new(psi: GridFunction, mass: f64) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::Invalid(format!("mass {mass} must be positive")));
        }
        let n = psi.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Invalid("state has zero or non-finite norm".into()));
        }
        Ok(Self { psi: psi.scale(1.0 / n), mass })
    }

    pub fn spec(&self) -> &LatticeSpec {
        self.psi.spec()
    }

    /// |psi|^2 on the grid.
    pub fn density(&self) -> Vec<f64> {
        self.psi.values().iter().map(|z| z.norm_sqr()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Statistics {
    #[default]
    Fermion,
    Boson,
}

impl Statistics {
    fn sign(&self, parity: f64) -> f64 {
        match self {
            Self::Fermion => parity,
            Self::Boson => 1.0,
        }
    }
}

/// Index bookkeeping for tensors over (grid points)^n, particle 0 most significant.
#[derive(Debug, Clone)]
pub struct TensorShape {
    pub n: usize,
    pub p: usize,
    perms: Vec<(Vec<u32>, f64)>,
}

fn permutations(n: usize) -> Vec<(Vec<usize>, f64)> {
    if n == 1 {
        return vec![(vec![0], 1.0)];
    }
    let mut out = Vec::new();
    for (perm, sign) in permutations(n - 1) {
        for pos in 0..n {
            let mut p = perm.clone();
            p.insert(pos, n - 1);
            // inserting at `pos` adds n - 1 - pos inversions
            let s = if (n - 1 - pos) % 2 == 0 { sign } else { -sign };
            out.push((p, s));
        }
    }
    out
}

impl TensorShape {
    pub fn new(n: usize, p: usize) -> Result<Self> {
        let len = p.checked_pow(n as u32).ok_or_else(|| Error::Invalid("tensor too large".into()))?;
        if len > u32::MAX as usize {
            return Err(Error::Invalid("tensor too large".into()));
        }
        let perms = permutations(n)
            .into_iter()
            .map(|(perm, sign)| {
                let map = (0..len)
                    .map(|idx| {
                        let digits = Self::digits_of(idx, n, p);
                        let mut src = 0;
                        for k in 0..n {
                            src = src * p + digits[perm[k]];
                        }
                        src as u32
                    })
                    .collect();
                (map, sign)
            })
            .collect();
        Ok(Self { n, p, perms })
    }

    pub fn len(&self) -> usize {
        self.p.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn digits_of(mut idx: usize, n: usize, p: usize) -> Vec<usize> {
        let mut d = vec![0; n];
        for k in (0..n).rev() {
            d[k] = idx % p;
            idx /= p;
        }
        d
    }

    pub fn digits(&self, idx: usize) -> Vec<usize> {
        Self::digits_of(idx, self.n, self.p)
    }

    /// Orthogonal projection onto the (anti)symmetric subspace.
    pub fn symmetrize(&self, x: &mut [f64], stats: Statistics) {
        let src = x.to_vec();
        let norm = 1.0 / self.perms.len() as f64;
        for (idx, out) in x.iter_mut().enumerate() {
            *out = self.perms.iter().map(|(map, s)| stats.sign(*s) * src[map[idx] as usize]).sum::<f64>() * norm;
        }
    }

    pub fn symmetrize_complex(&self, x: &mut [Complex64], stats: Statistics) {
        let src = x.to_vec();
        let norm = 1.0 / self.perms.len() as f64;
        for (idx, out) in x.iter_mut().enumerate() {
            *out = self.perms.iter().map(|(map, s)| src[map[idx] as usize] * stats.sign(*s)).sum::<Complex64>() * norm;
        }
    }

    /// x composed with the transposition of particles i and j.
    pub fn swap(&self, x: &[Complex64], i: usize, j: usize) -> Vec<Complex64> {
        (0..x.len())
            .map(|idx| {
                let mut d = self.digits(idx);
                d.swap(i, j);
                x[d.iter().fold(0, |acc, v| acc * self.p + v)]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ManyBodyState {
    pub shape: TensorShape,
    pub spec: LatticeSpec,
    pub amplitudes: Vec<Complex64>,
    pub mass: f64,
    pub statistics: Statistics,
}

impl ManyBodyState {
    /// Validates symmetry and normalizes.
    pub fn new(n: usize, spec: LatticeSpec, amplitudes: Vec<Complex64>, mass: f64, statistics: Statistics) -> Result<Self> {
        if spec.dim != 1 {
            return Err(Error::Invalid("many-body states need a one-dimensional grid".into()));
        }
        if n < 2 {
            return Err(Error::Invalid("many-body states need at least two particles".into()));
        }
        if !(mass > 0.0) {
            return Err(Error::Invalid(format!("mass {mass} must be positive")));
        }
        let shape = TensorShape::new(n, spec.n_points())?;
        if amplitudes.len() != shape.len() {
            return Err(Error::SpecMismatch);
        }
        let mut state = Self { shape, spec, amplitudes, mass, statistics };
        let norm = state.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Invalid("state has zero or non-finite norm".into()));
        }
        state.amplitudes.iter_mut().for_each(|z| *z /= norm);
        let bad = state.symmetry_defect();
        if bad > NORM_TOL {
            return Err(Error::Invalid(format!("state violates exchange symmetry by {bad:.3e}")));
        }
        Ok(state)
    }

    pub fn n(&self) -> usize {
        self.shape.n
    }

    fn weight(&self) -> f64 {
        self.spec.weight().powi(self.n() as i32)
    }

    pub fn norm(&self) -> f64 {
        (self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.weight()).sqrt()
    }

    /// Largest ||Psi -+ Psi o swap(i, j)|| over pairs.
    pub fn symmetry_defect(&self) -> f64 {
        let sign = self.statistics.sign(-1.0);
        let mut worst = 0.0f64;
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                let s = self.shape.swap(&self.amplitudes, i, j);
                let d = self.amplitudes.iter().zip(&s).map(|(a, b)| (a - b * sign).norm_sqr()).sum::<f64>();
                worst = worst.max((d * self.weight()).sqrt());
            }
        }
        worst
    }
}

/// Normalized (anti)symmetrized product of one-particle orbitals on a 1D grid.
pub fn product_state(orbitals: &[&GridFunction], mass: f64, statistics: Statistics) -> Result<ManyBodyState> {
    let spec = *orbitals.first().ok_or_else(|| Error::Invalid("no orbitals".into()))?.spec();
    if orbitals.iter().any(|o| o.spec() != &spec) {
        return Err(Error::SpecMismatch);
    }
    let shape = TensorShape::new(orbitals.len(), spec.n_points())?;
    let mut amp: Vec<Complex64> = (0..shape.len())
        .map(|idx| shape.digits(idx).iter().zip(orbitals).map(|(d, o)| o.values()[*d]).product())
        .collect();
    shape.symmetrize_complex(&mut amp, statistics);
    ManyBodyState::new(orbitals.len(), spec, amp, mass, statistics)
}

/// rho(x) = sum over particle slots of the one-body marginal; integrates to N.
pub fn density_many(state: &ManyBodyState) -> GridFunction {
    let p = state.shape.p;
    let n = state.n();
    let mut rho = vec![0.0; p];
    for (idx, z) in state.amplitudes.iter().enumerate() {
        let a = z.norm_sqr();
        if a == 0.0 {
            continue;
        }
        for d in state.shape.digits(idx) {
            rho[d] += a;
        }
    }
    let w = state.spec.weight().powi(n as i32 - 1);
    GridFunction::real(state.spec, rho.into_iter().map(|r| r * w).collect()).expect("grid sized")
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub potential: f64,
    pub interaction: f64,
    pub response: f64,
    pub total: f64,
}

/// Which terms enter the energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub interaction: bool,
    pub response: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self { interaction: true, response: true }
    }
}

fn check_crystal(spec: &LatticeSpec, crystal: &CrystalState, w: &CoulombKernel) -> Result<()> {
    if spec != &crystal.spec || w.spec() != spec {
        Err(Error::SpecMismatch)
    } else {
        Ok(())
    }
}

fn response_value(rho: &[f64], crystal: &CrystalState, w: &CoulombKernel, rp: &ResponseParams) -> Result<f64> {
    Ok(ResponseContext::new(crystal, w)?.solve(rho, rp)?.value)
}

pub fn energy_single_parts(
    psi: &SingleState,
    crystal: &CrystalState,
    w: &CoulombKernel,
    rp: &ResponseParams,
    terms: Terms,
) -> Result<EnergyParts> {
    check_crystal(psi.spec(), crystal, w)?;
    let rho = psi.density();
    let h = crystal.spec.weight();
    let kinetic = grid::gradient_norm_sq(&psi.psi) / (2.0 * psi.mass);
    let potential = rho.iter().zip(&crystal.v_super).map(|(r, v)| r * v).sum::<f64>() * h;
    let response = if terms.response { response_value(&rho, crystal, w, rp)? } else { 0.0 };
    Ok(EnergyParts { kinetic, potential, interaction: 0.0, response, total: kinetic + potential + response })
}

/// (2m)^{-1} int |grad psi|^2 + int V0 |psi|^2 + F_crys[|psi|^2].
pub fn energy_single(psi: &SingleState, crystal: &CrystalState, w: &CoulombKernel, rp: &ResponseParams) -> Result<f64> {
    Ok(energy_single_parts(psi, crystal, w, rp, Terms::default())?.total)
}

/// H(N) plus a one-body potential on real tensors.
struct ManyBodyOperator<'s> {
    shape: &'s TensorShape,
    kinetic: DMatrix<f64>,
    diag: Vec<f64>,
}

impl<'s> ManyBodyOperator<'s> {
    fn new(shape: &'s TensorShape, spec: &LatticeSpec, mass: f64, one_body: &[f64], pair: Option<&[f64]>) -> Self {
        let p = shape.p;
        let diag = (0..shape.len())
            .map(|idx| {
                let d = shape.digits(idx);
                let mut e: f64 = d.iter().map(|i| one_body[*i]).sum();
                if let Some(wr) = pair {
                    for k in 0..d.len() {
                        for l in k + 1..d.len() {
                            e += wr[(d[k] + p - d[l]) % p];
                        }
                    }
                }
                e
            })
            .collect();
        Self { shape, kinetic: grid::kinetic_matrix(spec, mass), diag }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let p = self.shape.p;
        let n = self.shape.n;
        y.iter_mut().zip(x).zip(&self.diag).for_each(|((yi, xi), d)| *yi = d * xi);
        for axis in 0..n {
            let inner = p.pow((n - 1 - axis) as u32);
            let outer = p.pow(axis as u32);
            for o in 0..outer {
                let base = o * p * inner;
                for a in 0..p {
                    let row = self.kinetic.row(a);
                    for b in 0..p {
                        let t = row[b];
                        if t == 0.0 {
                            continue;
                        }
                        let (ya, xb) = (base + a * inner, base + b * inner);
                        for i in 0..inner {
                            y[ya + i] += t * x[xb + i];
                        }
                    }
                }
            }
        }
    }

    fn expectation(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }
}

pub fn energy_many_parts(
    state: &ManyBodyState,
    crystal: &CrystalState,
    w: &CoulombKernel,
    rp: &ResponseParams,
    terms: Terms,
) -> Result<EnergyParts> {
    check_crystal(&state.spec, crystal, w)?;
    let weight = state.weight();
    let zeros = vec![0.0; state.shape.p];
    let wr = w.real_space();
    let kin_op = ManyBodyOperator::new(&state.shape, &state.spec, state.mass, &zeros, None);
    let re: Vec<f64> = state.amplitudes.iter().map(|z| z.re).collect();
    let im: Vec<f64> = state.amplitudes.iter().map(|z| z.im).collect();
    let kinetic = (kin_op.expectation(&re) + kin_op.expectation(&im)) * weight;
    let int_op = ManyBodyOperator::new(&state.shape, &state.spec, state.mass, &zeros, Some(&wr));
    let interaction = if terms.interaction {
        state.amplitudes.iter().zip(&int_op.diag).map(|(z, d)| z.norm_sqr() * d).sum::<f64>() * weight
    } else {
        0.0
    };
    let rho = density_many(state).to_real()?;
    let potential = rho.iter().zip(&crystal.v_super).map(|(r, v)| r * v).sum::<f64>() * crystal.spec.weight();
    let response = if terms.response { response_value(&rho, crystal, w, rp)? } else { 0.0 };
    Ok(EnergyParts { kinetic, potential, interaction, response, total: kinetic + potential + interaction + response })
}

/// Kinetic + pair interaction through the periodic real-space kernel + int V0 rho + F_crys[rho].
pub fn energy_many(state: &ManyBodyState, crystal: &CrystalState, w: &CoulombKernel, rp: &ResponseParams) -> Result<f64> {
    Ok(energy_many_parts(state, crystal, w, rp, Terms::default())?.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// u_per times a Gaussian envelope of the given width, centred in the supercell.
    UperBump { width: f64 },
    Gaussian { width: f64 },
    #[serde(skip)]
    Provided(Vec<Complex64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolaronParams {
    pub outer_tol: f64,
    pub max_outer: usize,
    pub init: Init,
    pub response: ResponseParams,
    pub terms: Terms,
    pub statistics: Statistics,
    pub lanczos_tol: f64,
    pub krylov: usize,
    /// Bytes available for many-body Krylov storage.
    pub memory_budget: usize,
    pub seed: u64,
}

impl Default for PolaronParams {
    fn default() -> Self {
        Self {
            outer_tol: 1e-9,
            max_outer: 200,
            init: Init::Gaussian { width: 1.0 },
            response: ResponseParams::default(),
            terms: Terms::default(),
            statistics: Statistics::Fermion,
            lanczos_tol: 1e-9,
            krylov: 40,
            memory_budget: 2 << 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum FinalState {
    Single(SingleState),
    Many(ManyBodyState),
}

#[derive(Debug, Clone)]
pub struct PolaronResult {
    pub n: usize,
    pub energy: f64,
    pub state: FinalState,
    pub q: Perturbation,
    pub rho: Vec<f64>,
    /// Joint functional after every half step.
    pub outer_trace: Vec<f64>,
    pub inner_gaps: Vec<f64>,
    pub e_per: f64,
    pub bound_vs_eper: bool,
    /// Largest increase of the joint functional over a half step, minus the allowed 2 gap_tol.
    pub monotone_excess: f64,
    pub eigen_residual: f64,
    pub outer_iterations: usize,
}

impl PolaronResult {
    pub fn monotone(&self) -> bool {
        self.monotone_excess <= 0.0
    }

    pub fn single(&self) -> Option<&SingleState> {
        match &self.state {
            FinalState::Single(s) => Some(s),
            FinalState::Many(_) => None,
        }
    }

    pub fn many(&self) -> Option<&ManyBodyState> {
        match &self.state {
            FinalState::Many(s) => Some(s),
            FinalState::Single(_) => None,
        }
    }
}

fn crystal_for_mass(crystal: &CrystalState, m: f64) -> Result<Cow<'_, CrystalState>> {
    if (crystal.mass - m).abs() <= 1e-15 * m {
        Ok(Cow::Borrowed(crystal))
    } else {
        Ok(Cow::Owned(crystal.with_mass(m)?))
    }
}

fn envelope(spec: &LatticeSpec, width: f64) -> Vec<f64> {
    let c = spec.center();
    (0..spec.n_points())
        .map(|i| {
            let r = spec.distance(&spec.position(i), &c);
            (-r * r / (4.0 * width * width)).exp()
        })
        .collect()
}

fn initial_single(crystal: &CrystalState, m: f64, init: &Init) -> Result<SingleState> {
    let spec = crystal.spec;
    let values: Vec<Complex64> = match init {
        Init::Gaussian { width } => envelope(&spec, *width).into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        Init::UperBump { width } => {
            let u = grid::periodize(&spec, crystal.band.u_per.values());
            u.into_iter().zip(envelope(&spec, *width)).map(|(u, e)| u * e).collect()
        }
        Init::Provided(v) => v.clone(),
    };
    SingleState::new(GridFunction::complex(spec, values)?, m)
}

/// Lowest eigenvector of a dense real symmetric matrix with a fixed sign convention.
fn ground_state(h: DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = linalg::sym_eig(h);
    let mut v: Vec<f64> = eig.vectors.column(0).iter().copied().collect();
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (eig.values[0], v)
}

struct Tracker {
    trace: Vec<f64>,
    gaps: Vec<f64>,
    excess: f64,
}

impl Tracker {
    fn push(&mut self, j: f64, slack: f64) {
        if let Some(prev) = self.trace.last() {
            self.excess = self.excess.max(j - prev - slack);
        }
        self.trace.push(j);
    }
}

/// One-body H = -Delta/(2m) + V0 + w * rho_Q.
fn one_body(crystal: &CrystalState, m: f64, rho_q: &[f64], w: &CoulombKernel) -> DMatrix<f64> {
    let mut h = grid::kinetic_matrix(&crystal.spec, m);
    let vq = w.potential(rho_q);
    for i in 0..crystal.spec.n_points() {
        h[(i, i)] += crystal.v_super[i] + vq[i];
    }
    h
}

fn residual_of(h: &DMatrix<f64>, v: &[f64]) -> f64 {
    let x = DVector::from_column_slice(v);
    let hx = h * &x;
    let rq = x.dot(&hx) / x.dot(&x);
    (hx - x * rq).norm() / DVector::from_column_slice(v).norm()
}

/// E(1) by alternating between the ground state of the mean-field Hamiltonian and the
/// crystal response to |psi|^2.
pub fn minimize_e1(crystal: &CrystalState, m: f64, w: &CoulombKernel, params: &PolaronParams) -> Result<PolaronResult> {
    check_crystal(&crystal.spec, crystal, w)?;
    let crystal = crystal_for_mass(crystal, m)?;
    let crystal = crystal.as_ref();
    let spec = crystal.spec;
    let h = spec.weight();
    let n = spec.n_points();
    let e_per = crystal.e_per();
    let h0 = one_body(crystal, m, &vec![0.0; n], w);
    let as_state = |v: &[f64]| -> Result<SingleState> {
        SingleState::new(GridFunction::real(spec, v.iter().map(|x| x / h.sqrt()).collect())?, m)
    };
    if !params.terms.response {
        let (e, v) = ground_state(h0.clone());
        let residual = residual_of(&h0, &v);
        let state = as_state(&v)?;
        let rho = state.density();
        return Ok(PolaronResult {
            n: 1,
            energy: e,
            state: FinalState::Single(state),
            q: Perturbation::zero(crystal),
            rho,
            outer_trace: vec![e],
            inner_gaps: Vec::new(),
            e_per,
            bound_vs_eper: e < e_per - params.outer_tol,
            monotone_excess: f64::NEG_INFINITY,
            eigen_residual: residual,
            outer_iterations: 0,
        });
    }
    let ctx = ResponseContext::new(crystal, w)?;
    let init = initial_single(crystal, m, &params.init)?;
    // orthonormal-basis coefficients
    let mut x: Vec<f64> = init.psi.values().iter().map(|z| z.re * h.sqrt()).collect();
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= xn);
    let density = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| v * v / h).collect() };
    let expect = |x: &[f64]| -> f64 {
        let xv = DVector::from_column_slice(x);
        xv.dot(&(&h0 * &xv))
    };
    let mut nu = density(&x);
    let mut r = ctx.solve(&nu, &params.response)?;
    let mut tracker = Tracker { trace: Vec::new(), gaps: vec![r.gap], excess: f64::NEG_INFINITY };
    let mut j_outer = expect(&x) + r.value;
    tracker.push(j_outer, 0.0);
    let mut outer = 0;
    loop {
        if outer >= params.max_outer {
            return Err(Error::Diverged {
                what: "single-polaron alternation",
                iterations: outer,
                last: tracker.trace.last().copied().unwrap_or(f64::NAN),
                trace: tracker.trace,
            });
        }
        outer += 1;
        let slack = 2.0 * r.gap_tol;
        let rho_q = r.minimizer.density().to_vec();
        let (lambda, next) = ground_state(one_body(crystal, m, &rho_q, w));
        let functional_q = r.value - w.pair(&nu, &rho_q);
        tracker.push(lambda + functional_q, slack);
        x = next;
        nu = density(&x);
        r = ctx.solve_from(&nu, &params.response, Some(&r.minimizer))?;
        tracker.gaps.push(r.gap);
        let j = expect(&x) + r.value;
        tracker.push(j, slack);
        let decrease = j_outer - j;
        j_outer = j;
        if decrease < params.outer_tol {
            break;
        }
    }
    let hq = one_body(crystal, m, r.minimizer.density(), w);
    let eigen_residual = residual_of(&hq, &x);
    let state = as_state(&x)?;
    Ok(PolaronResult {
        n: 1,
        energy: j_outer,
        state: FinalState::Single(state),
        rho: nu,
        q: r.minimizer,
        outer_trace: tracker.trace,
        inner_gaps: tracker.gaps,
        e_per,
        bound_vs_eper: j_outer < e_per - params.outer_tol,
        monotone_excess: tracker.excess,
        eigen_residual,
        outer_iterations: outer,
    })
}

/// E(N) for N >= 2 on a one-dimensional grid; the N-body step is a Lanczos solve on the
/// (anti)symmetric subspace.
pub fn minimize_en(n: usize, crystal: &CrystalState, m: f64, w: &CoulombKernel, params: &PolaronParams) -> Result<PolaronResult> {
    if n == 1 {
        return minimize_e1(crystal, m, w, params);
    }
    check_crystal(&crystal.spec, crystal, w)?;
    let spec = crystal.spec;
    if spec.dim != 1 {
        return Err(Error::Invalid("N-polaron solver requires d = 1".into()));
    }
    let p = spec.n_points();
    if n > 3 || p > 64 {
        return Err(Error::Invalid(format!("N = {n} on {p} points exceeds the supported size (N <= 3, 64 points)")));
    }
    let dim = p.pow(n as u32);
    let needed = lanczos::memory_needed(dim, params.krylov);
    if needed > params.memory_budget {
        return Err(Error::MemoryBudget { needed, budget: params.memory_budget });
    }
    let crystal = crystal_for_mass(crystal, m)?;
    let crystal = crystal.as_ref();
    let e_per = crystal.e_per();
    let h = spec.weight();
    let weight = h.powi(n as i32);
    let shape = TensorShape::new(n, p)?;
    let stats = params.statistics;
    let wr = w.real_space();
    let pair = params.terms.interaction.then_some(wr.as_slice());
    let lparams = LanczosParams { krylov: params.krylov, tol: params.lanczos_tol, ..Default::default() };

    // start from the (anti)symmetrized product of the lowest one-body orbitals, lightly randomized
    let eig = linalg::sym_eig(one_body(crystal, m, &vec![0.0; p], w));
    let orbitals: Vec<GridFunction> = (0..n)
        .map(|k| {
            let col = if stats == Statistics::Fermion { k } else { 0 };
            GridFunction::real(spec, eig.vectors.column(col).iter().map(|v| v / h.sqrt()).collect()).expect("grid sized")
        })
        .collect();
    let refs: Vec<&GridFunction> = orbitals.iter().collect();
    let start = product_state(&refs, m, stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut x: Vec<f64> = start.amplitudes.iter().map(|z| z.re * weight.sqrt() + 1e-3 * (rng.random::<f64>() - 0.5)).collect();
    shape.symmetrize(&mut x, stats);
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= xn);

    let to_state = |x: &[f64]| -> Result<ManyBodyState> {
        let amp = x.iter().map(|v| Complex64::new(v / weight.sqrt(), 0.0)).collect();
        ManyBodyState::new(n, spec, amp, m, stats)
    };
    let density_of = |x: &[f64]| -> Vec<f64> {
        let mut rho = vec![0.0; p];
        for (idx, v) in x.iter().enumerate() {
            for d in shape.digits(idx) {
                rho[d] += v * v;
            }
        }
        rho.into_iter().map(|r| r / h).collect()
    };
    let base: Vec<f64> = crystal.v_super.clone();
    let solve_lanczos = |rho_q: &[f64], x: &[f64]| -> Result<(f64, Vec<f64>, f64)> {
        let vq = w.potential(rho_q);
        let one: Vec<f64> = base.iter().zip(&vq).map(|(a, b)| a + b).collect();
        let op = ManyBodyOperator::new(&shape, &spec, m, &one, pair);
        let r = lanczos::lowest(|a, b| op.apply(a, b), |v| shape.symmetrize(v, stats), x, &lparams)?;
        Ok((r.value, r.vector, r.residual))
    };
    let h_free = ManyBodyOperator::new(&shape, &spec, m, &base, pair);

    if !params.terms.response {
        let (e, v, residual) = solve_lanczos(&vec![0.0; p], &x)?;
        let rho = density_of(&v);
        return Ok(PolaronResult {
            n,
            energy: e,
            state: FinalState::Many(to_state(&v)?),
            q: Perturbation::zero(crystal),
            rho,
            outer_trace: vec![e],
            inner_gaps: Vec::new(),
            e_per,
            bound_vs_eper: e < n as f64 * e_per - params.outer_tol,
            monotone_excess: f64::NEG_INFINITY,
            eigen_residual: residual,
            outer_iterations: 0,
        });
    }

    let ctx = ResponseContext::new(crystal, w)?;
    let (_, v0, _) = solve_lanczos(&vec![0.0; p], &x)?;
    x = v0;
    let mut nu = density_of(&x);
    let mut r = ctx.solve(&nu, &params.response)?;
    let mut tracker = Tracker { trace: Vec::new(), gaps: vec![r.gap], excess: f64::NEG_INFINITY };
    let mut j_outer = h_free.expectation(&x) + r.value;
    tracker.push(j_outer, 0.0);
    let mut outer = 0;
    let mut residual;
    loop {
        if outer >= params.max_outer {
            return Err(Error::Diverged {
                what: "many-polaron alternation",
                iterations: outer,
                last: j_outer,
                trace: tracker.trace,
            });
        }
        outer += 1;
        let slack = 2.0 * r.gap_tol + 2.0 * params.lanczos_tol;
        let rho_q = r.minimizer.density().to_vec();
        let (lambda, next, res) = solve_lanczos(&rho_q, &x)?;
        residual = res;
        tracker.push(lambda + r.value - w.pair(&nu, &rho_q), slack);
        x = next;
        nu = density_of(&x);
        r = ctx.solve_from(&nu, &params.response, Some(&r.minimizer))?;
        tracker.gaps.push(r.gap);
        let j = h_free.expectation(&x) + r.value;
        tracker.push(j, slack);
        let decrease = j_outer - j;
        j_outer = j;
        if decrease < params.outer_tol {
            break;
        }
    }
    Ok(PolaronResult {
        n,
        energy: j_outer,
        state: FinalState::Many(to_state(&x)?),
        rho: nu,
        q: r.minimizer,
        outer_trace: tracker.trace,
        inner_gaps: tracker.gaps,
        e_per,
        bound_vs_eper: j_outer < n as f64 * e_per - params.outer_tol,
        monotone_excess: tracker.excess,
        eigen_residual: residual,
        outer_iterations: outer,
    })
}

/// psi_lambda = u_per(x) chi((x - c)/lambda), normalized, for the Gaussian amplitude profile.
pub fn trial_lambda(crystal: &CrystalState, chi: &GaussianProfile, lambda: f64, m: f64) -> Result<SingleState> {
    let spec = crystal.spec;
    if !chi.fits(&spec, lambda) {
        return Err(Error::RadiusTooLarge { radius: 4.0 * chi.s * lambda, side: spec.side() });
    }
    let crystal = crystal_for_mass(crystal, m)?;
    let u = grid::periodize(&spec, crystal.band.u_per.values());
    let env = chi.amplitude(&spec, lambda);
    let values = u.into_iter().zip(env).map(|(u, e)| u * e).collect();
    SingleState::new(GridFunction::complex(spec, values)?, m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub lambda: f64,
    pub energy: f64,
    /// lambda (E[psi_lambda] - E_per).
    pub scaled: f64,
}

pub fn trial_sweep(
    crystal: &CrystalState,
    chi: &GaussianProfile,
    lambdas: &[f64],
    m: f64,
    w: &CoulombKernel,
    rp: &ResponseParams,
) -> Result<Vec<TrialRow>> {
    let crystal = crystal_for_mass(crystal, m)?;
    let crystal = crystal.as_ref();
    let e_per = crystal.e_per();
    lambdas
        .par_iter()
        .map(|l| {
            let psi = trial_lambda(crystal, chi, *l, m)?;
            let e = energy_single(&psi, crystal, w, rp)?;
            Ok(TrialRow { lambda: *l, energy: e, scaled: l * (e - e_per) })
        })
        .collect()
}

/// A factor of a wedge product.
#[derive(Debug, Clone)]
pub enum Factor {
    Single(SingleState),
    Many(ManyBodyState),
}

impl Factor {
    fn parts(&self) -> (usize, LatticeSpec, Vec<Complex64>, f64, Vec<f64>) {
        match self {
            Factor::Single(s) => (1, *s.spec(), s.psi.values().to_vec(), s.mass, s.density()),
            Factor::Many(s) => (s.n(), s.spec, s.amplitudes.clone(), s.mass, density_many(s).to_real().expect("real")),
        }
    }
}

/// Antisymmetrized product of `a` with `b` translated by the lattice vector `shift`.
pub fn wedge_trial(a: &Factor, b: &Factor, shift: &[f64]) -> Result<ManyBodyState> {
    let (na, spec, amp_a, mass, rho_a) = a.parts();
    let (nb, spec_b, amp_b, mass_b, rho_b) = b.parts();
    if spec != spec_b {
        return Err(Error::SpecMismatch);
    }
    if spec.dim != 1 {
        return Err(Error::Invalid("wedge products need a one-dimensional grid".into()));
    }
    if (mass - mass_b).abs() > 1e-15 * mass {
        return Err(Error::Invalid("factors carry different masses".into()));
    }
    let steps = grid::lattice_shift(&spec, shift)?;
    let p = spec.n_points();
    let s = steps[0].rem_euclid(p as i64) as usize;
    let rho_b_shifted: Vec<f64> = (0..p).map(|i| rho_b[(i + p - s) % p]).collect();
    if response::supports_overlap(&rho_a, &rho_b_shifted) {
        return Err(Error::Overlap);
    }
    let n = na + nb;
    let shape = TensorShape::new(n, p)?;
    let shape_b = TensorShape::new(nb, p)?;
    let pa = p.pow(nb as u32);
    let mut amp: Vec<Complex64> = (0..shape.len())
        .map(|idx| {
            let d = shape.digits(idx);
            let ia = idx / pa;
            let ib = d[na..].iter().fold(0, |acc, v| acc * p + (v + p - s) % p);
            debug_assert!(ib < shape_b.len());
            amp_a[ia] * amp_b[ib]
        })
        .collect();
    shape.symmetrize_complex(&mut amp, Statistics::Fermion);
    ManyBodyState::new(n, spec, amp, mass, Statistics::Fermion)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindingRow {
    pub k: usize,
    pub split: f64,
    pub e_n: f64,
    /// E(N) < E(N-k) + E(k).
    pub strict: bool,
    /// E(N) <= E(N-k) + E(k) + tol.
    pub large: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindingReport {
    pub n: usize,
    /// E(1), ..., E(N).
    pub energies: Vec<f64>,
    pub rows: Vec<BindingRow>,
    pub satisfied: bool,
    pub large_satisfied: bool,
}

/// Binding table from E(1..=N).
pub fn binding_table(energies: &[f64], tol: f64) -> BindingReport {
    let n = energies.len();
    let e = |k: usize| energies[k - 1];
    let rows: Vec<BindingRow> = (1..n)
        .map(|k| {
            let split = e(k) + e(n - k);
            BindingRow { k, split, e_n: e(n), strict: e(n) < split, large: e(n) <= split + tol }
        })
        .collect();
    BindingReport {
        n,
        energies: energies.to_vec(),
        satisfied: rows.iter().all(|r| r.strict),
        large_satisfied: rows.iter().all(|r| r.large),
        rows,
    }
}

/// Computes E(1), ..., E(N) in parallel and tabulates the binding inequalities.
pub fn binding_report(n: usize, crystal: &CrystalState, m: f64, w: &CoulombKernel, params: &PolaronParams) -> Result<BindingReport> {
    let results: Vec<Result<f64>> = (1..=n).into_par_iter().map(|k| minimize_en(k, crystal, m, w, params).map(|r| r.energy)).collect();
    let energies = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let tol = 2.0 * params.outer_tol.max(params.response.gap_tol.unwrap_or(1e-7)) * n as f64;
    Ok(binding_table(&energies, tol))
}

/// d/dt E[(psi + t delta)/|psi + t delta|] at t = 0, with F_crys differentiated at its
/// fixed minimizer.
pub fn directional_derivative(
    psi: &SingleState,
    delta: &GridFunction,
    crystal: &CrystalState,
    w: &CoulombKernel,
    rp: &ResponseParams,
) -> Result<f64> {
    check_crystal(psi.spec(), crystal, w)?;
    let spec = crystal.spec;
    let h = spec.weight();
    let rho = psi.density();
    let ctx = ResponseContext::new(crystal, w)?;
    let r = ctx.solve(&rho, rp)?;
    let rho_q = ctx.refine_density(&rho, &r, 1e-11, 60).unwrap_or_else(|| r.minimizer.density().to_vec());
    let vq = w.potential(&rho_q);
    let hpsi = {
        let lap = grid::laplacian_apply(&psi.psi);
        lap.values()
            .iter()
            .zip(psi.psi.values())
            .enumerate()
            .map(|(i, (l, p))| l / (2.0 * psi.mass) + p * (crystal.v_super[i] + vq[i]))
            .collect::<Vec<Complex64>>()
    };
    let e: f64 = psi.psi.values().iter().zip(&hpsi).map(|(p, hp)| (p.conj() * hp).re).sum::<f64>() * h;
    let overlap: f64 = psi.psi.values().iter().zip(delta.values()).map(|(p, d)| (p.conj() * d).re).sum::<f64>() * h;
    let g: f64 = delta.values().iter().zip(&hpsi).map(|(d, hp)| (d.conj() * hp).re).sum::<f64>() * h;
    Ok(2.0 * (g - e * overlap))
}

/// Fourth-order central difference of energy_single along the normalized path (psi + t delta)/|.|.
pub fn finite_difference(
    psi: &SingleState,
    delta: &GridFunction,
    t: f64,
    crystal: &CrystalState,
    w: &CoulombKernel,
    rp: &ResponseParams,
) -> Result<f64> {
    let at = |s: f64| -> Result<f64> {
        let moved = psi.psi.add(&delta.scale(s))?;
        energy_single(&SingleState::new(moved, psi.mass)?, crystal, w, rp)
    };
    Ok((8.0 * (at(t)? - at(-t)?) - (at(2.0 * t)? - at(-2.0 * t)?)) / (12.0 * t))
}

/// A random complex tangent direction at psi: Re <psi, delta> = 0 and |delta| = 1.
pub fn random_tangent<R: Rng + ?Sized>(psi: &SingleState, rng: &mut R) -> Result<GridFunction> {
    let spec = *psi.spec();
    let raw: Vec<Complex64> = (0..spec.n_points()).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
    let d = GridFunction::complex(spec, raw)?;
    let ov = psi.psi.inner(&d)?;
    let d = d.sub(&psi.psi.scale(ov.re))?;
    let n = d.norm();
    Ok(d.scale(1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{scf_solve, NuclearDensity, ScfParams};
    use crate::grid::FieldKind;

    fn ortho_pair(spec: LatticeSpec) -> (GridFunction, GridFunction) {
        let l = spec.side();
        let k = 2.0 * std::f64::consts::PI / l;
        let a = GridFunction::from_fn(spec, |_| 1.0 / l.sqrt());
        let b = GridFunction::from_fn(spec, |x| (2.0 / l).sqrt() * (k * x[0]).cos());
        (a, b)
    }

    #[test]
    fn slater_density() {
        let spec = LatticeSpec::new(1, 1.0, 4, 3).unwrap();
        let (a, b) = ortho_pair(spec);
        let s = product_state(&[&a, &b], 1.0, Statistics::Fermion).unwrap();
        assert!(s.symmetry_defect() < 1e-12);
        let rho = density_many(&s).to_real().unwrap();
        for (i, r) in rho.iter().enumerate() {
            let expect = a.values()[i].norm_sqr() + b.values()[i].norm_sqr();
            assert!((r - expect).abs() < 1e-12);
        }
        // symmetric product is not antisymmetric
        let p = spec.n_points();
        let sym: Vec<Complex64> = (0..p * p).map(|i| a.values()[i / p] * a.values()[i % p]).collect();
        assert!(ManyBodyState::new(2, spec, sym.clone(), 1.0, Statistics::Fermion).is_err());
        assert!(ManyBodyState::new(2, spec, sym, 1.0, Statistics::Boson).is_ok());
    }

    #[test]
    fn random_antisymmetric_density_integrates() {
        let spec = LatticeSpec::new(1, 1.0, 4, 2).unwrap();
        let shape = TensorShape::new(3, spec.n_points()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut amp: Vec<Complex64> = (0..shape.len()).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        shape.symmetrize_complex(&mut amp, Statistics::Fermion);
        let s = ManyBodyState::new(3, spec, amp, 1.0, Statistics::Fermion).unwrap();
        let rho = density_many(&s);
        assert!((rho.integral().re - 3.0).abs() < 1e-9);
        assert!(rho.values().iter().all(|z| z.re >= 0.0));
    }

    fn deep_crystal(n_c: usize, m: usize) -> CrystalState {
        let spec = LatticeSpec::new(1, 1.0, n_c, m).unwrap();
        let nuclei = NuclearDensity::single_site([0.5, 0.0, 0.0], 0.1, 1.0);
        scf_solve(&nuclei, &spec, 1.0, &ScfParams::default()).unwrap()
    }

    #[test]
    fn free_energies_are_eigenvalues() {
        let c = deep_crystal(4, 4);
        let w = CoulombKernel::bare(&c.spec);
        let params = PolaronParams { terms: Terms { interaction: false, response: false }, ..Default::default() };
        let r1 = minimize_e1(&c, 1.0, &w, &params).unwrap();
        assert!((r1.energy - c.e_per()).abs() < 1e-10);
        let r2 = minimize_en(2, &c, 1.0, &w, &params).unwrap();
        let levels = linalg::sym_eigenvalues(c.polaron_hamiltonian());
        assert!((r2.energy - levels[0] - levels[1]).abs() < 1e-8, "{} {}", r2.energy, levels[0] + levels[1]);
        let boson = PolaronParams { statistics: Statistics::Boson, ..params };
        let rb = minimize_en(2, &c, 1.0, &w, &boson).unwrap();
        assert!((rb.energy - 2.0 * levels[0]).abs() < 1e-8);
    }

    #[test]
    fn energy_single_constant_is_zero() {
        let c = deep_crystal(4, 4);
        let w = CoulombKernel::bare(&c.spec);
        let psi = SingleState::new(GridFunction::from_fn(c.spec, |_| 1.0), 1.0).unwrap();
        let e = energy_single(&psi, &c, &w, &ResponseParams::default()).unwrap();
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn pair_term_of_separated_orbitals() {
        let spec = LatticeSpec::new(1, 1.0, 4, 6).unwrap();
        let p = spec.n_points();
        let c = deep_crystal(4, 6);
        let w = CoulombKernel::bare(&spec);
        let delta = |i: usize| {
            let mut v = vec![0.0; p];
            v[i] = 1.0;
            GridFunction::real(spec, v).unwrap()
        };
        let (i, j) = (2, 14);
        let s = product_state(&[&delta(i), &delta(j)], 1.0, Statistics::Fermion).unwrap();
        let parts = energy_many_parts(&s, &c, &w, &ResponseParams::default(), Terms { interaction: true, response: false }).unwrap();
        assert!((parts.interaction - w.real_space()[(j - i) % p]).abs() < 1e-12);
    }

    #[test]
    fn two_body_energy_matches_dense() {
        let spec = LatticeSpec::new(1, 1.0, 4, 2).unwrap();
        let p = spec.n_points();
        let c = deep_crystal(4, 2);
        let w = CoulombKernel::bare(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = TensorShape::new(2, p).unwrap();
        let mut amp: Vec<Complex64> = (0..p * p).map(|_| Complex64::new(rng.random::<f64>() - 0.5, 0.0)).collect();
        shape.symmetrize_complex(&mut amp, Statistics::Fermion);
        let s = ManyBodyState::new(2, spec, amp, 1.0, Statistics::Fermion).unwrap();
        let got = energy_many_parts(&s, &c, &w, &ResponseParams::default(), Terms { interaction: true, response: false }).unwrap();
        let h1 = c.polaron_hamiltonian();
        let wr = w.real_space();
        let eye = DMatrix::<f64>::identity(p, p);
        let mut h2 = h1.kronecker(&eye) + eye.kronecker(&h1);
        for a in 0..p {
            for b in 0..p {
                h2[(a * p + b, a * p + b)] += wr[(a + p - b) % p];
            }
        }
        let x = DVector::from_iterator(p * p, s.amplitudes.iter().map(|z| z.re * spec.weight()));
        let dense = x.dot(&(&h2 * &x));
        assert!((got.total - dense).abs() < 1e-10, "{} {}", got.total, dense);
        // Lanczos ground state on the antisymmetric subspace
        let params = PolaronParams { terms: Terms { interaction: true, response: false }, ..Default::default() };
        let r = minimize_en(2, &c, 1.0, &w, &params).unwrap();
        let mut anti = DMatrix::<f64>::zeros(p * p, p * p);
        for a in 0..p {
            for b in 0..p {
                anti[(a * p + b, a * p + b)] += 0.5;
                anti[(a * p + b, b * p + a)] -= 0.5;
            }
        }
        let proj = &anti * &h2 * &anti;
        let ev = linalg::sym_eigenvalues(proj);
        let lowest = ev.iter().copied().filter(|e| e.abs() > 1e-9).fold(f64::INFINITY, f64::min);
        assert!((r.energy - lowest).abs() < 1e-8, "{} {}", r.energy, lowest);
    }

    #[test]
    fn wedge_of_disjoint_states() {
        let spec = LatticeSpec::new(1, 1.0, 4, 6).unwrap();
        let bump = GridFunction::from_fn(spec, |x| if x[0] < 1.0 { (std::f64::consts::PI * x[0]).sin() } else { 0.0 });
        let s = SingleState::new(bump, 1.0).unwrap();
        let w = wedge_trial(&Factor::Single(s.clone()), &Factor::Single(s.clone()), &[3.0]).unwrap();
        let rho = density_many(&w).to_real().unwrap();
        let r1 = s.density();
        let shifted = grid::translate(&s.psi.density(), &[3.0]).unwrap().to_real().unwrap();
        for i in 0..rho.len() {
            assert!((rho[i] - r1[i] - shifted[i]).abs() < 1e-9);
        }
        assert!(matches!(wedge_trial(&Factor::Single(s.clone()), &Factor::Single(s), &[0.0]), Err(Error::Overlap)));
        let z = GridFunction::zeros(spec, FieldKind::Complex);
        assert!(SingleState::new(z, 1.0).is_err());
    }

    #[test]
    fn binding_table_symmetric() {
        let t = binding_table(&[-1.0, -2.5, -4.0], 1e-9);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].split, t.rows[1].split);
        assert!(t.satisfied);
        let t = binding_table(&[-1.0, -1.5], 1e-9);
        assert!(!t.satisfied && !t.large_satisfied);
    }

    #[test]
    fn single_polaron_and_gradient() {
        let c = deep_crystal(8, 4);
        let w = CoulombKernel::bare(&c.spec);
        let params = PolaronParams::default();
        let r = minimize_e1(&c, 1.0, &w, &params).unwrap();
        assert!(r.monotone(), "{}", r.monotone_excess);
        assert!(r.energy <= c.e_per() + 1e-9);
        let psi = r.single().unwrap();
        let e = energy_single(psi, &c, &w, &params.response).unwrap();
        assert!((e - r.energy).abs() < 1e-6);
        let tight = ResponseParams { gap_tol: Some(1e-13), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = SingleState::new(
            GridFunction::from_fn(c.spec, |x| (-(x[0] - 2.0).powi(2)).exp() + 0.3 * (x[0]).sin()),
            1.0,
        )
        .unwrap();
        let d = random_tangent(&probe, &mut rng).unwrap();
        let exact = directional_derivative(&probe, &d, &c, &w, &tight).unwrap();
        let fd = finite_difference(&probe, &d, 1e-4, &c, &w, &tight).unwrap();
        assert!((exact - fd).abs() <= 1e-4 * exact.abs().max(1e-3), "{exact} {fd}");
    }
}
