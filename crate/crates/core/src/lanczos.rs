//! Restarted Lanczos for the lowest eigenpair of a large real symmetric operator,
//! with an optional projection applied after every product.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LanczosParams {
    pub krylov: usize,
    pub tol: f64,
    pub max_restarts: usize,
}

impl Default for LanczosParams {
    fn default() -> Self {
        Self { krylov: 60, tol: 1e-10, max_restarts: 400 }
    }
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub products: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Doubles needed for a Krylov basis of `krylov` vectors of length `dim` plus work space.
pub fn memory_needed(dim: usize, krylov: usize) -> usize {
    dim.saturating_mul(krylov + 4).saturating_mul(std::mem::size_of::<f64>())
}

/// Lowest eigenpair of `apply` restricted to the range of `project` (an orthogonal projector).
/// Convergence is on the residual norm |A x - lambda x| of the unit Ritz vector.
pub fn lowest(
    apply: impl Fn(&[f64], &mut [f64]),
    project: impl Fn(&mut [f64]),
    start: &[f64],
    params: &LanczosParams,
) -> Result<LanczosResult> {
    let dim = start.len();
    let mut x = start.to_vec();
    project(&mut x);
    if normalize(&mut x) == 0.0 {
        return Err(Error::Invalid("start vector vanishes after projection".into()));
    }
    let mut products = 0;
    let mut w = vec![0.0; dim];
    let mut last = f64::INFINITY;
    let mut trace = Vec::new();
    for _ in 0..params.max_restarts {
        let mut basis: Vec<Vec<f64>> = vec![x.clone()];
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for j in 0..params.krylov.min(dim) {
            apply(&basis[j], &mut w);
            project(&mut w);
            products += 1;
            let a = dot(&w, &basis[j]);
            alpha.push(a);
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&w, b);
                    w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
                }
            }
            let bnorm = normalize(&mut w);
            if bnorm <= 1e-13 * a.abs().max(1.0) || j + 1 == params.krylov.min(dim) {
                beta.push(bnorm);
                break;
            }
            beta.push(bnorm);
            basis.push(w.clone());
        }
        let k = alpha.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let imin = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("nonempty Krylov space");
        let s = eig.eigenvectors.column(imin);
        let mut y = vec![0.0; dim];
        for (c, b) in s.iter().zip(&basis) {
            y.iter_mut().zip(b).for_each(|(yi, bi)| *yi += c * bi);
        }
        project(&mut y);
        normalize(&mut y);
        apply(&y, &mut w);
        project(&mut w);
        products += 1;
        let rq = dot(&y, &w);
        let residual = w.iter().zip(&y).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
        trace.push(residual);
        if residual <= params.tol {
            return Ok(LanczosResult { value: rq, vector: y, residual, products });
        }
        last = residual;
        x = y;
    }
    Err(Error::Diverged { what: "lanczos", iterations: params.max_restarts, last, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let mut m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        m = &m + m.transpose();
        let dense = linalg::sym_eigenvalues(m.clone());
        let start: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let r = lowest(
            |x, y| {
                let v = &m * nalgebra::DVector::from_column_slice(x);
                y.copy_from_slice(v.as_slice());
            },
            |_| {},
            &start,
            &LanczosParams::default(),
        )
        .unwrap();
        assert!((r.value - dense[0]).abs() < 1e-9, "{} {}", r.value, dense[0]);
    }

    #[test]
    fn respects_projection() {
        // diag(0, 1, 2, ...) restricted to vectors vanishing on the first coordinate
        let n = 30;
        let r = lowest(
            |x, y| y.iter_mut().zip(x).enumerate().for_each(|(i, (yi, xi))| *yi = i as f64 * xi),
            |v| v[0] = 0.0,
            &vec![1.0; n],
            &LanczosParams::default(),
        )
        .unwrap();
        assert!((r.value - 1.0).abs() < 1e-10);
        assert!(memory_needed(64 * 64 * 64, 60) > 64 * 64 * 64 * 8 * 60);
    }
}
