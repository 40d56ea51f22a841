//! Periodic supercell grids, spectral differential operators and lattice translations.
//!
//! A [`LatticeSpec`] describes a cubic unit cell of side `a` sampled with `n_c`
//! points per axis, repeated `m` times per axis to form the supercell. Integrals
//! are weighted grid sums with weight `h^d`, and Fourier coefficients follow the
//! continuum convention
//!
//! ```text
//! f^(k) = h^d sum_x f(x) e^{-ik.x},      f(x) = L^{-d} sum_k f^(k) e^{ik.x}
//! ```
//!
//! so that Parseval reads `int |f|^2 = L^{-d} sum_k |f^(k)|^2`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Spatial dimension, 1 to 3.
    pub dim: usize,
    /// Side of the cubic unit cell.
    pub a: f64,
    /// Grid points per unit cell along each axis (even, at least 4).
    pub n_c: usize,
    /// Supercell multiplier per axis.
    pub m: usize,
}

impl LatticeSpec {
    pub fn new(dim: usize, a: f64, n_c: usize, m: usize) -> Result<Self> {
        let spec = Self { dim, a, n_c, m };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidSpec(format!("dimension {} not in 1..=3", self.dim)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::InvalidSpec(format!("cell side {} must be positive", self.a)));
        }
        if self.n_c < 4 || self.n_c % 2 != 0 {
            return Err(Error::InvalidSpec(format!("n_c = {} must be even and >= 4", self.n_c)));
        }
        if self.m < 1 {
            return Err(Error::InvalidSpec("supercell multiplier must be >= 1".into()));
        }
        Ok(())
    }

    /// The same cell with a single-cell supercell.
    pub fn unit_cell(&self) -> Self {
        Self { m: 1, ..*self }
    }

    pub fn with_multiplier(&self, m: usize) -> Self {
        Self { m, ..*self }
    }

    pub fn points_per_axis(&self) -> usize {
        self.n_c * self.m
    }

    pub fn n_points(&self) -> usize {
        self.points_per_axis().pow(self.dim as u32)
    }

    /// Supercell side L = M a.
    pub fn side(&self) -> f64 {
        self.m as f64 * self.a
    }

    pub fn spacing(&self) -> f64 {
        self.a / self.n_c as f64
    }

    /// Quadrature weight h^d.
    pub fn weight(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim as i32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.a.powi(self.dim as i32)
    }

    pub fn n_cells(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    /// Multi-index of a flat (row-major) index.
    pub fn unflatten(&self, mut idx: usize) -> [usize; 3] {
        let n = self.points_per_axis();
        let mut out = [0usize; 3];
        for axis in (0..self.dim).rev() {
            out[axis] = idx % n;
            idx /= n;
        }
        out
    }

    pub fn flatten(&self, multi: &[usize; 3]) -> usize {
        let n = self.points_per_axis();
        (0..self.dim).fold(0, |acc, axis| acc * n + multi[axis])
    }

    /// Cartesian position of grid point `idx` (unused components are zero).
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let h = self.spacing();
        let multi = self.unflatten(idx);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = multi[axis] as f64 * h;
        }
        x
    }

    /// Minimum-image displacement x - c on the supercell torus.
    pub fn displacement(&self, x: &[f64; 3], c: &[f64; 3]) -> [f64; 3] {
        let l = self.side();
        let mut d = [0.0; 3];
        for axis in 0..self.dim {
            let mut v = x[axis] - c[axis];
            v -= l * (v / l).round();
            d[axis] = v;
        }
        d
    }

    pub fn distance(&self, x: &[f64; 3], c: &[f64; 3]) -> f64 {
        self.displacement(x, c).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Centre of the supercell.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in c.iter_mut().take(self.dim) {
            *v = 0.5 * self.side();
        }
        c
    }

    /// Signed integer frequency of FFT index `i` along one axis.
    pub fn frequency_index(&self, i: usize) -> i64 {
        let n = self.points_per_axis();
        if i < n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Real,
    Complex,
}

/// A real or complex field sampled on a supercell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    spec: LatticeSpec,
    values: Vec<Complex64>,
    kind: FieldKind,
}

const REAL_TOL: f64 = 1e-12;

impl GridFunction {
    pub fn complex(spec: LatticeSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != spec.n_points() {
            return Err(Error::Invalid(format!(
                "{} values for a grid of {} points",
                values.len(),
                spec.n_points()
            )));
        }
        Ok(Self { spec, values, kind: FieldKind::Complex })
    }

    pub fn real(spec: LatticeSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_points() {
            return Err(Error::Invalid(format!(
                "{} values for a grid of {} points",
                values.len(),
                spec.n_points()
            )));
        }
        let values = values.into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        Ok(Self { spec, values, kind: FieldKind::Real })
    }

    pub fn zeros(spec: LatticeSpec, kind: FieldKind) -> Self {
        Self { spec, values: vec![Complex64::new(0.0, 0.0); spec.n_points()], kind }
    }

    pub fn from_fn(spec: LatticeSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..spec.n_points())
            .map(|i| Complex64::new(f(spec.position(i)), 0.0))
            .collect();
        Self { spec, values, kind: FieldKind::Real }
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn is_real(&self) -> bool {
        self.kind == FieldKind::Real
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Real parts, for real-tagged fields.
    pub fn to_real(&self) -> Result<Vec<f64>> {
        if self.kind != FieldKind::Real {
            return Err(Error::NotReal);
        }
        Ok(self.values.iter().map(|c| c.re).collect())
    }

    /// Re-tag as real if every imaginary part is negligible.
    pub fn into_real(self) -> Result<Self> {
        if self.values.iter().any(|c| c.im.abs() > REAL_TOL * (1.0 + c.re.abs())) {
            return Err(Error::NotReal);
        }
        let values = self.values.into_iter().map(|c| Complex64::new(c.re, 0.0)).collect();
        Ok(Self { values, kind: FieldKind::Real, ..self })
    }

    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let v = self.to_real()?;
        Self::real(self.spec, v.into_iter().map(f).collect())
    }

    /// Weighted integral of the field.
    pub fn integral(&self) -> Complex64 {
        self.values.iter().sum::<Complex64>() * self.spec.weight()
    }

    /// L2 norm with quadrature weight.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.spec.weight()).sqrt()
    }

    /// Weighted inner product <self, other> (antilinear in the first slot).
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.spec.weight())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch);
        }
        let kind = if self.is_real() && other.is_real() {
            FieldKind::Real
        } else {
            FieldKind::Complex
        };
        Ok(Self {
            spec: self.spec,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            kind,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    /// |f|^2 as a real field.
    pub fn density(&self) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect(),
            kind: FieldKind::Real,
        }
    }

    /// Write the little-endian binary payload and its JSON sidecar (`<path>.json`).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len() * 16);
        for c in &self.values {
            buf.extend_from_slice(&c.re.to_le_bytes());
            if self.kind == FieldKind::Complex {
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        let sidecar = Sidecar {
            d: self.spec.dim,
            a: self.spec.a,
            n_c: self.spec.n_c,
            m: self.spec.m,
            tag: self.kind,
            version: FORMAT_VERSION,
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        if sidecar.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported grid format version {}", sidecar.version)));
        }
        let spec = LatticeSpec::new(sidecar.d, sidecar.a, sidecar.n_c, sidecar.m)?;
        let bytes = fs::read(path)?;
        let words: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        match sidecar.tag {
            FieldKind::Real => Self::real(spec, words),
            FieldKind::Complex => {
                let values = words.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
                Self::complex(spec, values)
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    d: usize,
    a: f64,
    n_c: usize,
    #[serde(rename = "M")]
    m: usize,
    tag: FieldKind,
    version: u32,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Planned d-dimensional FFTs for one lattice.
#[derive(Clone)]
pub struct Fourier {
    spec: LatticeSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k2: Vec<f64>,
}

impl std::fmt::Debug for Fourier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fourier").field("spec", &self.spec).finish()
    }
}

impl Fourier {
    pub fn new(spec: &LatticeSpec) -> Self {
        let mut planner = FftPlanner::new();
        let n = spec.points_per_axis();
        let k2 = wavevectors(spec).iter().map(|k| k.iter().map(|c| c * c).sum()).collect();
        Self {
            spec: *spec,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            k2,
        }
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    /// |k|^2 per FFT index.
    pub fn k_squared(&self) -> &[f64] {
        &self.k2
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.spec.points_per_axis();
        let d = self.spec.dim;
        let total = data.len();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in 0..d {
            let stride = n.pow((d - 1 - axis) as u32);
            let block = stride * n;
            for start in (0..total).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                }
            }
        }
    }

    /// In-place forward transform with the continuum normalization.
    pub fn forward_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
        let w = self.spec.weight();
        data.iter_mut().for_each(|v| *v *= w);
    }

    pub fn inverse_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
        let s = 1.0 / self.spec.volume();
        data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn forward_real(&self, f: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_in_place(&mut data);
        data
    }

    /// Apply a real Fourier multiplier to a real field, returning the real part.
    pub fn apply_multiplier_real(&self, f: &[f64], symbol: &[f64]) -> Vec<f64> {
        let mut data = self.forward_real(f);
        data.iter_mut().zip(symbol).for_each(|(v, s)| *v *= *s);
        self.inverse_in_place(&mut data);
        data.into_iter().map(|c| c.re).collect()
    }
}

/// Discrete Fourier dual of the supercell, in FFT order: k = 2 pi n / L with n in
/// the symmetric range (the Nyquist frequency is negative).
pub fn wavevectors(spec: &LatticeSpec) -> Vec<[f64; 3]> {
    let l = spec.side();
    (0..spec.n_points())
        .map(|idx| {
            let multi = spec.unflatten(idx);
            let mut k = [0.0; 3];
            for axis in 0..spec.dim {
                k[axis] = 2.0 * PI * spec.frequency_index(multi[axis]) as f64 / l;
            }
            k
        })
        .collect()
}

/// Spectral coefficients of `f` (tagged complex).
pub fn fourier(f: &GridFunction) -> GridFunction {
    let mut data = f.values.clone();
    Fourier::new(&f.spec).forward_in_place(&mut data);
    GridFunction { spec: f.spec, values: data, kind: FieldKind::Complex }
}

/// Inverse of [`fourier`]; the result is tagged complex.
pub fn inverse_fourier(coeffs: &GridFunction) -> GridFunction {
    let mut data = coeffs.values.clone();
    Fourier::new(&coeffs.spec).inverse_in_place(&mut data);
    GridFunction { spec: coeffs.spec, values: data, kind: FieldKind::Complex }
}

/// -Delta f as the Fourier multiplier |k|^2.
pub fn laplacian_apply(f: &GridFunction) -> GridFunction {
    let ft = Fourier::new(&f.spec);
    let mut data = f.values.clone();
    ft.forward_in_place(&mut data);
    data.iter_mut().zip(ft.k_squared()).for_each(|(v, k2)| *v *= *k2);
    ft.inverse_in_place(&mut data);
    if f.is_real() {
        data.iter_mut().for_each(|v| v.im = 0.0);
    }
    GridFunction { spec: f.spec, values: data, kind: f.kind }
}

/// int |grad f|^2 = L^{-d} sum_k |k|^2 |f^(k)|^2.
pub fn gradient_norm_sq(f: &GridFunction) -> f64 {
    let ft = Fourier::new(&f.spec);
    let mut data = f.values.clone();
    ft.forward_in_place(&mut data);
    data.iter().zip(ft.k_squared()).map(|(c, k2)| k2 * c.norm_sqr()).sum::<f64>() / f.spec.volume()
}

/// Pointwise |grad f| of a real field via spectral derivatives (Nyquist mode dropped).
pub fn gradient_magnitude(spec: &LatticeSpec, f: &[f64]) -> Vec<f64> {
    let ft = Fourier::new(spec);
    let coeffs = ft.forward_real(f);
    let ks = wavevectors(spec);
    let n = spec.points_per_axis();
    let mut acc = vec![0.0; f.len()];
    for axis in 0..spec.dim {
        let mut data: Vec<Complex64> = coeffs
            .iter()
            .zip(&ks)
            .enumerate()
            .map(|(idx, (c, k))| {
                if spec.unflatten(idx)[axis] == n / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    c * Complex64::new(0.0, k[axis])
                }
            })
            .collect();
        ft.inverse_in_place(&mut data);
        acc.iter_mut().zip(&data).for_each(|(a, d)| *a += d.re * d.re);
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// Cyclic shift by whole grid points: result(x) = f(x - shift h).
pub fn shift_points(f: &GridFunction, shift: &[i64]) -> GridFunction {
    let spec = f.spec;
    let n = spec.points_per_axis() as i64;
    let mut values = vec![Complex64::new(0.0, 0.0); f.len()];
    for (idx, v) in f.values.iter().enumerate() {
        let mut multi = spec.unflatten(idx);
        for axis in 0..spec.dim {
            let s = shift.get(axis).copied().unwrap_or(0);
            multi[axis] = (multi[axis] as i64 + s).rem_euclid(n) as usize;
        }
        values[spec.flatten(&multi)] = *v;
    }
    GridFunction { spec, values, kind: f.kind }
}

/// Grid-point shift equivalent to a lattice vector, or `NotCommensurate`.
pub fn lattice_shift(spec: &LatticeSpec, tau: &[f64]) -> Result<Vec<i64>> {
    if tau.len() > spec.dim && tau[spec.dim..].iter().any(|&t| t != 0.0) {
        return Err(Error::NotCommensurate(tau.to_vec()));
    }
    let mut shift = Vec::with_capacity(spec.dim);
    for axis in 0..spec.dim {
        let t = tau.get(axis).copied().unwrap_or(0.0);
        let cells = t / spec.a;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::NotCommensurate(tau.to_vec()));
        }
        shift.push(cells.round() as i64 * spec.n_c as i64);
    }
    Ok(shift)
}

/// Translation by a lattice vector tau: result(x) = f(x - tau).
pub fn translate(f: &GridFunction, tau: &[f64]) -> Result<GridFunction> {
    let shift = lattice_shift(&f.spec, tau)?;
    Ok(shift_points(f, &shift))
}

/// Convolution kernel c(r) = N^{-1} sum_k s(k) e^{ik.r} of a Fourier symbol given in FFT order.
pub fn symbol_kernel(spec: &LatticeSpec, symbol: &[Complex64]) -> Vec<Complex64> {
    let mut data = symbol.to_vec();
    Fourier::new(spec).inverse_in_place(&mut data);
    let w = spec.weight();
    data.iter_mut().for_each(|v| *v *= w);
    data
}

/// Dense circulant matrix M_xy = c(x - y) on the periodic grid.
pub fn circulant<T: nalgebra::Scalar + Copy + num_traits::Zero>(spec: &LatticeSpec, kernel: &[T]) -> DMatrix<T> {
    let npts = spec.n_points();
    let n = spec.points_per_axis();
    let multi: Vec<[usize; 3]> = (0..npts).map(|i| spec.unflatten(i)).collect();
    DMatrix::from_fn(npts, npts, |i, j| {
        let (a, b) = (&multi[i], &multi[j]);
        let mut diff = [0usize; 3];
        for axis in 0..spec.dim {
            diff[axis] = (a[axis] + n - b[axis]) % n;
        }
        kernel[spec.flatten(&diff)]
    })
}

/// Dense matrix of a real even Fourier multiplier in the orthonormal grid basis.
pub fn multiplier_matrix(spec: &LatticeSpec, symbol: impl Fn(&[f64; 3]) -> f64) -> DMatrix<f64> {
    let values: Vec<Complex64> = wavevectors(spec).iter().map(|k| Complex64::new(symbol(k), 0.0)).collect();
    let kernel: Vec<f64> = symbol_kernel(spec, &values).iter().map(|c| c.re).collect();
    circulant(spec, &kernel)
}

/// Repeat unit-cell samples over every cell of the supercell.
pub fn periodize<T: Copy>(spec: &LatticeSpec, cell: &[T]) -> Vec<T> {
    let unit = spec.unit_cell();
    (0..spec.n_points())
        .map(|i| {
            let mut multi = spec.unflatten(i);
            for v in multi.iter_mut().take(spec.dim) {
                *v %= spec.n_c;
            }
            cell[unit.flatten(&multi)]
        })
        .collect()
}

/// -Delta/(2 mass) as a dense matrix.
pub fn kinetic_matrix(spec: &LatticeSpec, mass: f64) -> DMatrix<f64> {
    multiplier_matrix(spec, |k| (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) / (2.0 * mass))
}

/// |grad| (the multiplier |k|) as a dense matrix.
pub fn abs_gradient_matrix(spec: &LatticeSpec) -> DMatrix<f64> {
    multiplier_matrix(spec, |k| (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(spec: LatticeSpec, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..spec.n_points())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        GridFunction::complex(spec, v).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(LatticeSpec::new(4, 1.0, 4, 1).is_err());
        assert!(LatticeSpec::new(1, 1.0, 5, 1).is_err());
        assert!(LatticeSpec::new(1, 1.0, 2, 1).is_err());
        assert!(LatticeSpec::new(1, -1.0, 4, 1).is_err());
        assert!(LatticeSpec::new(1, 1.0, 4, 0).is_err());
        let s = LatticeSpec::new(2, 1.0, 6, 3).unwrap();
        assert_eq!(s.n_points(), 18 * 18);
    }

    #[test]
    fn wavevectors_fft_order() {
        let s = LatticeSpec::new(1, 1.0, 4, 1).unwrap();
        let k: Vec<f64> = wavevectors(&s).iter().map(|k| k[0]).collect();
        let expect = [0.0, 2.0 * PI, -4.0 * PI, -2.0 * PI];
        for (a, b) in k.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        let s2 = LatticeSpec::new(1, 1.0, 4, 2).unwrap();
        let k2: Vec<f64> = wavevectors(&s2).iter().map(|k| k[0]).collect();
        assert_eq!(k2.len(), 8);
        assert!((k2[1] - PI).abs() < 1e-14);
        for s in [s, s2, LatticeSpec::new(3, 1.3, 4, 2).unwrap()] {
            let zeros = wavevectors(&s).iter().filter(|k| k.iter().all(|c| *c == 0.0)).count();
            assert_eq!(zeros, 1);
        }
    }

    #[test]
    fn constant_and_plane_wave_spectra() {
        let s = LatticeSpec::new(2, 1.0, 4, 2).unwrap();
        let one = GridFunction::from_fn(s, |_| 1.0);
        let c = fourier(&one);
        assert!((c.values()[0].re - s.volume()).abs() < 1e-12);
        assert!(c.values()[1..].iter().all(|v| v.norm() < 1e-12));

        let k0 = 2.0 * PI / s.side();
        let pw = GridFunction::complex(
            s,
            (0..s.n_points()).map(|i| Complex64::from_polar(1.0, k0 * s.position(i)[1])).collect(),
        )
        .unwrap();
        let c = fourier(&pw);
        let nonzero = c.values().iter().filter(|v| v.norm() > 1e-9).count();
        assert_eq!(nonzero, 1);
        let lap = laplacian_apply(&pw);
        for (a, b) in lap.values().iter().zip(pw.values()) {
            assert!((a - b * k0 * k0).norm() < 1e-10);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for spec in [
            LatticeSpec::new(1, 1.0, 8, 3).unwrap(),
            LatticeSpec::new(2, 0.7, 6, 2).unwrap(),
            LatticeSpec::new(3, 2.0, 4, 2).unwrap(),
        ] {
            let f = random_field(spec, 11);
            let back = inverse_fourier(&fourier(&f));
            let err = f.values().iter().zip(back.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "round trip {err}");
            let lhs = f.norm().powi(2);
            let rhs = fourier(&f).values().iter().map(|c| c.norm_sqr()).sum::<f64>() / spec.volume();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs);
        }
    }

    #[test]
    fn gradient_norm_matches_quadratic_form() {
        let spec = LatticeSpec::new(2, 1.0, 6, 2).unwrap();
        let f = random_field(spec, 4);
        let g = gradient_norm_sq(&f);
        let q = f.inner(&laplacian_apply(&f)).unwrap();
        assert!((g - q.re).abs() <= 1e-10 * g.max(1.0));
        assert!(q.im.abs() < 1e-10);
        let c = GridFunction::from_fn(spec, |_| 2.5);
        assert!(gradient_norm_sq(&c).abs() < 1e-12);
    }

    #[test]
    fn translation_rules() {
        let spec = LatticeSpec::new(1, 1.0, 4, 4).unwrap();
        let f = random_field(spec, 9);
        assert_eq!(translate(&f, &[0.0]).unwrap(), f);
        let there = translate(&f, &[1.0]).unwrap();
        let back = translate(&there, &[-1.0]).unwrap();
        assert_eq!(back, f);
        assert!((there.norm() - f.norm()).abs() <= 1e-15 * f.norm());
        assert!(matches!(translate(&f, &[0.5]), Err(Error::NotCommensurate(_))));
        // a bump at index 1 moves to index 1 + n_c
        let mut v = vec![0.0; spec.n_points()];
        v[1] = 1.0;
        let bump = GridFunction::real(spec, v).unwrap();
        let moved = translate(&bump, &[1.0]).unwrap().to_real().unwrap();
        assert_eq!(moved[5], 1.0);
        assert_eq!(moved.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn kinetic_matrix_matches_multiplier() {
        let spec = LatticeSpec::new(2, 1.0, 4, 2).unwrap();
        let t = kinetic_matrix(&spec, 0.5);
        let f = random_field(spec, 2);
        let re: Vec<f64> = f.values().iter().map(|c| c.re).collect();
        let fr = GridFunction::real(spec, re.clone()).unwrap();
        let direct = laplacian_apply(&fr).to_real().unwrap();
        let via = &t * nalgebra::DVector::from_vec(re);
        for (a, b) in direct.iter().zip(via.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((&t - t.transpose()).amax() < 1e-12);
    }

    #[test]
    fn serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = LatticeSpec::new(2, 1.5, 4, 1).unwrap();
        let f = random_field(spec, 1);
        let p = dir.path().join("f.bin");
        f.write(&p).unwrap();
        assert_eq!(GridFunction::read(&p).unwrap(), f);
        let r = f.density();
        r.write(&p).unwrap();
        let back = GridFunction::read(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8 * spec.n_points() as u64);
    }
}
