//! Small dense symmetric solvers used by the local least-squares fits.
//!
//! Matrices are row-major `n x n` slices. Sizes here are tiny (the number of
//! polynomial basis functions), so plain loops beat pulling in a BLAS.

use crate::scalar::Scalar;

/// In-place Cholesky factorisation `A = L Lᵀ`; the lower triangle holds `L`.
/// Returns `false` if a pivot is not strictly positive.
pub fn cholesky_in_place<T: Scalar>(a: &mut [T], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky_in_place`].
pub fn cholesky_solve<T: Scalar>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = l[i * n + k] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = l[k * n + i] * y[k];
            y[i] -= t;
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as columns
/// of the row-major matrix. Eigenvalues are not sorted.
pub fn symmetric_eigen<T: Scalar>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut m = a.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let scale: T = m.iter().map(|x| x.abs()).fold(T::zero(), T::max);
    if scale == T::zero() {
        return (vec![T::zero(); n], v);
    }
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i * n + j] * m[i * n + j];
                }
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Minimum-norm solution through the truncated eigen-decomposition.
/// Eigenvalues at or below `cutoff * max|λ|` are dropped.
pub fn pseudo_inverse_solve<T: Scalar>(a: &[T], n: usize, b: &[T], cutoff: T) -> Vec<T> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let max = vals.iter().map(|x| x.abs()).fold(T::zero(), T::max);
    let mut x = vec![T::zero(); n];
    if max == T::zero() {
        return x;
    }
    for (k, &lam) in vals.iter().enumerate() {
        if lam.abs() <= cutoff * max {
            continue;
        }
        let proj: T = (0..n).map(|i| vecs[i * n + k] * b[i]).sum();
        let coef = proj / lam;
        for i in 0..n {
            x[i] += coef * vecs[i * n + k];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(a: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let b = vec![1.0, -2.0, 0.5];
        let mut l = a.clone();
        assert!(cholesky_in_place(&mut l, 3));
        let x = cholesky_solve(&l, 3, &b);
        let r = matvec(&a, 3, &x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut a, 2));
    }

    #[test]
    fn eigen_reconstructs() {
        let a = vec![2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let mut s = vals.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let r2 = 2f64.sqrt();
        assert!((s[0] - (2.0 - r2)).abs() < 1e-12 && (s[2] - (2.0 + r2)).abs() < 1e-12);
    }

    #[test]
    fn pinv_on_rank_one() {
        // a = u uᵀ with u = (1, 1): min-norm solution of a x = (2, 2) is (1, 1)
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let x: Vec<f64> = pseudo_inverse_solve(&a, 2, &[2.0, 2.0], 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
