//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eig(m: DMatrix<f64>) -> Eigen {
    let n = m.nrows();
    let a = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let Ok(eig) = a.self_adjoint_eigen(faer::Side::Lower) else {
        return fallback_eig(m);
    };
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| s[i]));
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, order[j])]);
    Eigen { values, vectors }
}

fn fallback_eig(m: DMatrix<f64>) -> Eigen {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Eigen { values, vectors }
}

pub fn sym_eigenvalues(m: DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let a = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let mut v: Vec<f64> = match a.self_adjoint_eigenvalues(faer::Side::Lower) {
        Ok(v) => v,
        Err(_) => m.symmetric_eigenvalues().iter().copied().collect(),
    };
    v.sort_by(f64::total_cmp);
    DVector::from_vec(v)
}

/// Hermitian eigen-decomposition, eigenvalues ascending.
pub fn herm_eig(m: DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let n = m.nrows();
    let a = faer::Mat::<faer::c64>::from_fn(n, n, |i, j| {
        let z = m[(i, j)];
        faer::c64::new(z.re, z.im)
    });
    let Ok(eig) = a.self_adjoint_eigen(faer::Side::Lower) else {
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        return (values, DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]));
    };
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].re.total_cmp(&s[j].re));
    let values = order.iter().map(|&i| s[i].re).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| {
        let z = u[(i, order[j])];
        Complex64::new(z.re, z.im)
    });
    (values, vectors)
}

/// Tr(A B) for symmetric A (or B): the Frobenius inner product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Orthogonal projector onto the span of the selected columns.
pub fn projector(vectors: &DMatrix<f64>, cols: std::ops::Range<usize>) -> DMatrix<f64> {
    let sub = vectors.columns(cols.start, cols.len());
    &sub * sub.transpose()
}

/// Largest absolute eigenvalue (spectral norm) of a symmetric matrix.
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    let v = sym_eigenvalues(m.clone());
    if v.is_empty() {
        return 0.0;
    }
    v[0].abs().max(v[v.len() - 1].abs())
}

/// Sum of absolute eigenvalues (trace norm) of a symmetric matrix.
pub fn trace_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m.clone()).iter().map(|x| x.abs()).sum()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// f(M) for symmetric M through its eigen-decomposition.
pub fn sym_function(eig: &Eigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let fj = f(eig.values[j]);
        scaled.column_mut(j).scale_mut(fj);
    }
    scaled * eig.vectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eig_is_sorted_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = DMatrix::from_fn(7, 7, |_, _| rng.random::<f64>() - 0.5);
        symmetrize(&mut m);
        let e = sym_eig(m.clone());
        for w in e.values.as_slice().windows(2) {
            assert!(w[0] <= w[1]);
        }
        let back = sym_function(&e, |x| x);
        assert!((back - m).amax() < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_orthogonal(6, &mut rng);
        let id = q.transpose() * &q;
        assert!((id - DMatrix::identity(6, 6)).amax() < 1e-12);
    }
}
