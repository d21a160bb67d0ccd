//! Small dense linear algebra on [`Tensor2`]: factorizations and solves for
//! matrices of factor dimension.

use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Real>(a: &Tensor2<T>) -> Result<Tensor2<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let mut l = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > T::zero()) {
                    return Err(Error::Data(format!(
                        "matrix is not positive definite (pivot {i} = {s})"
                    )));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse<T: Real>(a: &Tensor2<T>) -> Result<Tensor2<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "inverse",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let mut m = a.clone();
    let mut inv = Tensor2::identity(n);
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&x, &y| m[(x, c)].abs().partial_cmp(&m[(y, c)].abs()).unwrap())
            .unwrap_or(c);
        if m[(piv, c)].abs() <= T::epsilon() * a.max_abs().max(T::one()) {
            return Err(Error::Data("matrix is singular".into()));
        }
        if piv != c {
            for k in 0..n {
                let t = m[(c, k)];
                m[(c, k)] = m[(piv, k)];
                m[(piv, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(piv, k)];
                inv[(piv, k)] = t;
            }
        }
        let d = m[(c, c)];
        for k in 0..n {
            m[(c, k)] /= d;
            inv[(c, k)] /= d;
        }
        for r in 0..n {
            if r == c {
                continue;
            }
            let f = m[(r, c)];
            if f == T::zero() {
                continue;
            }
            for k in 0..n {
                let (mv, iv) = (m[(c, k)], inv[(c, k)]);
                m[(r, k)] -= f * mv;
                inv[(r, k)] -= f * iv;
            }
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Real>(a: &Tensor2<T>) -> Vec<T> {
    let n = a.rows();
    let mut m = a.clone();
    let tol = T::epsilon() * T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        let scale: T = m.data().iter().map(|v| *v * *v).sum();
        if off <= tol * scale.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let two = T::one() + T::one();
                let theta = (m[(q, q)] - m[(p, p)]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// `L Lᵀ` for a square `L`.
pub fn outer_self<T: Real>(l: &Tensor2<T>) -> Tensor2<T> {
    let n = l.rows();
    Tensor2::from_fn(n, n, |i, j| (0..l.cols()).map(|k| l[(i, k)] * l[(j, k)]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd() -> Tensor2<f64> {
        Tensor2::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, -0.2],
            vec![0.5, -0.2, 2.0],
        ])
        .unwrap()
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd();
        let l = cholesky(&a).unwrap();
        let back = outer_self(&l);
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = Tensor2::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let prod = inverse(&a).unwrap().matmul(&a).unwrap();
        let id = Tensor2::<f64>::identity(3);
        for (x, y) in prod.data().iter().zip(id.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        // Eigenvalues of [[1, r], [r, 1]] are 1 ± r.
        let a = Tensor2::<f64>::from_rows(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let ev = symmetric_eigenvalues(&a);
        assert!((ev[0] - 0.7).abs() < 1e-14 && (ev[1] - 1.3).abs() < 1e-14);
        let ev = symmetric_eigenvalues(&spd());
        let trace: f64 = ev.iter().sum();
        assert!((trace - 9.0).abs() < 1e-12);
    }
}
