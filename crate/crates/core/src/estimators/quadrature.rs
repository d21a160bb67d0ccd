//! Reference marginal log-likelihood by tensor-product Gauss-Hermite
//! quadrature, for one or two factors.

use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::grm::{GrmParams, ResponseMatrix};
use crate::scalar::logsumexp;

/// Nodes and weights for `∫ e^{-t²} f(t) dt`, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal Hermite recurrence with the usual
    // asymptotic starting guesses for the largest roots.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = (j + 1) as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - (j as f64 / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// `ln p(x_i)` for every respondent with `n_nodes` per factor.
pub fn marginal_loglik(params: &GrmParams<f64>, x: &ResponseMatrix, n_nodes: usize) -> Result<Vec<f64>> {
    let p = params.n_factors();
    if p > 2 {
        return Err(Error::UnsupportedDimension(p));
    }
    if n_nodes == 0 {
        return Err(Error::config("n_nodes", "must be at least 1"));
    }
    let (t, w) = gauss_hermite(n_nodes);
    let l = params.corr_chol();
    let q = n_nodes.pow(p as u32);
    let norm = std::f64::consts::PI.powf(-(p as f64) / 2.0);
    let mut nodes = Tensor2::zeros(q, p);
    let mut log_w = vec![0.0; q];
    for k in 0..q {
        let idx = [k % n_nodes, k / n_nodes];
        let u: Vec<f64> = (0..p).map(|d| std::f64::consts::SQRT_2 * t[idx[d]]).collect();
        for r in 0..p {
            nodes[(k, r)] = (0..=r).map(|c| l[(r, c)] * u[c]).sum();
        }
        log_w[k] = (norm * (0..p).map(|d| w[idx[d]]).product::<f64>()).ln();
    }
    let lp = params.category_logprob(&nodes)?;
    let cmax = params.categories().iter().copied().max().unwrap_or(2);
    if x.n_items() != params.n_items() || x.categories() != params.categories() {
        return Err(Error::Data("responses do not match the model items".into()));
    }
    let mut terms = vec![0.0; q];
    Ok((0..x.n_respondents())
        .map(|i| {
            for k in 0..q {
                let row = lp.row(k);
                terms[k] = log_w[k]
                    + (0..x.n_items())
                        .filter_map(|j| x.get(i, j).map(|c| row[j * cmax + c]))
                        .sum::<f64>();
            }
            logsumexp(&terms)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_rules_match_tables() {
        let (x, w) = gauss_hermite(2);
        assert!((x[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((w[0] - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
        let (x, w) = gauss_hermite(3);
        assert!(x[1].abs() < 1e-14);
        assert!((x[2] - 1.5_f64.sqrt()).abs() < 1e-14);
        assert!((w[1] - 2.0 * std::f64::consts::PI.sqrt() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn integrates_even_moments() {
        let sp = std::f64::consts::PI.sqrt();
        for n in [5, 20, 61, 150] {
            let (x, w) = gauss_hermite(n);
            let m0: f64 = w.iter().sum();
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            assert!((m0 - sp).abs() < 1e-12, "n={n}");
            assert!((m2 - sp / 2.0).abs() < 1e-12, "n={n}");
            assert!((m4 - 0.75 * sp).abs() < 1e-11, "n={n}");
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
