//! Coulomb pair form, Coulomb norm and potential solves as Fourier multipliers.
//!
//! `D(f, g) = L^{-d} sum_k w(k) Re(f^(k)* g^(k))` with `w(k) = 4 pi / |k|^2`
//! (bare) or `4 pi / (|k|^2 + mu^2)` (Yukawa). The bare zero mode is dropped,
//! which amounts to a uniform neutralizing background; the Yukawa one is finite and kept.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Fourier, GridFunction, LatticeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelMode {
    Bare,
    Yukawa { mu: f64 },
}

impl Default for KernelMode {
    fn default() -> Self {
        Self::Bare
    }
}

#[derive(Debug, Clone)]
pub struct CoulombKernel {
    spec: LatticeSpec,
    mode: KernelMode,
    symbol: Vec<f64>,
    fourier: Fourier,
}

impl CoulombKernel {
    pub fn new(spec: &LatticeSpec, mode: KernelMode) -> Result<Self> {
        if let KernelMode::Yukawa { mu } = mode {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::Invalid(format!("Yukawa screening {mu} must be positive")));
            }
        }
        let fourier = Fourier::new(spec);
        let mu2 = match mode {
            KernelMode::Bare => 0.0,
            KernelMode::Yukawa { mu } => mu * mu,
        };
        let symbol = fourier
            .k_squared()
            .iter()
            .map(|&k2| if k2 == 0.0 && mu2 == 0.0 { 0.0 } else { 4.0 * PI / (k2 + mu2) })
            .collect();
        Ok(Self { spec: *spec, mode, symbol, fourier })
    }

    pub fn bare(spec: &LatticeSpec) -> Self {
        Self::new(spec, KernelMode::Bare).expect("bare kernel is always valid")
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    /// Spectral coefficients in FFT order.
    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }

    pub fn max_symbol(&self) -> f64 {
        self.symbol.iter().copied().fold(0.0, f64::max)
    }

    pub fn fourier(&self) -> &Fourier {
        &self.fourier
    }

    /// D(f, g) for raw grid samples.
    pub fn pair(&self, f: &[f64], g: &[f64]) -> f64 {
        let fh = self.fourier.forward_real(f);
        let gh = self.fourier.forward_real(g);
        let s: f64 = fh
            .iter()
            .zip(&gh)
            .zip(&self.symbol)
            .map(|((a, b), w)| w * (a.conj() * b).re)
            .sum();
        s / self.spec.volume()
    }

    pub fn self_energy(&self, f: &[f64]) -> f64 {
        let fh = self.fourier.forward_real(f);
        fh.iter().zip(&self.symbol).map(|(a, w)| w * a.norm_sqr()).sum::<f64>() / self.spec.volume()
    }

    /// V = w * rho on raw samples.
    pub fn potential(&self, rho: &[f64]) -> Vec<f64> {
        self.fourier.apply_multiplier_real(rho, &self.symbol)
    }

    /// Real-space pair interaction W(x) = L^{-d} sum_k w(k) e^{ik.x} at every grid displacement.
    pub fn real_space(&self) -> Vec<f64> {
        let mut data: Vec<Complex64> = self.symbol.iter().map(|&w| Complex64::new(w, 0.0)).collect();
        self.fourier.inverse_in_place(&mut data);
        data.into_iter().map(|c| c.re).collect()
    }

    fn check(&self, f: &GridFunction) -> Result<Vec<f64>> {
        if f.spec() != &self.spec {
            return Err(Error::SpecMismatch);
        }
        f.to_real()
    }
}

pub fn d_pair(f: &GridFunction, g: &GridFunction, w: &CoulombKernel) -> Result<f64> {
    let a = w.check(f)?;
    let b = w.check(g)?;
    Ok(w.pair(&a, &b))
}

pub fn coulomb_norm(f: &GridFunction, w: &CoulombKernel) -> Result<f64> {
    let a = w.check(f)?;
    Ok(w.self_energy(&a).max(0.0).sqrt())
}

pub fn potential_of(rho: &GridFunction, w: &CoulombKernel) -> Result<GridFunction> {
    let a = w.check(rho)?;
    GridFunction::real(*rho.spec(), w.potential(&a))
}
