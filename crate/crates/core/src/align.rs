//! Post-processing of exploratory solutions: Geomin oblique rotation, sign
//! reflection, column matching and Tucker congruence.

use crate::diffkernel::Tensor2;
use crate::error::{Error, Result};
use crate::linalg::inverse;
use crate::scalar::{lit, Real};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeominConfig {
    pub epsilon: f64,
    pub starts: usize,
    pub max_iterations: usize,
    /// Stop once the projected gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for GeominConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            starts: 30,
            max_iterations: 1000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationResult<T> {
    /// `Λ (Tᵀ)⁻¹`.
    pub loadings: Tensor2<T>,
    pub rotation: Tensor2<T>,
    /// `TᵀT`.
    pub factor_corr: Tensor2<T>,
    pub criterion: T,
    pub converged: bool,
}

/// Geomin criterion `Σ_j (Π_p (λ²_jp + ε))^{1/P}` and its gradient in Λ.
pub fn geomin_criterion<T: Real>(l: &Tensor2<T>, eps: T) -> (T, Tensor2<T>) {
    let (m, p) = l.shape();
    let pf: T = lit(p as f64);
    let mut g = Tensor2::zeros(m, p);
    let mut f = T::zero();
    for j in 0..m {
        let row = l.row(j);
        let pro = (row.iter().map(|&v| (v * v + eps).ln()).sum::<T>() / pf).exp();
        f += pro;
        for (k, &v) in row.iter().enumerate() {
            g[(j, k)] = lit::<T>(2.0) * v / (v * v + eps) * pro / pf;
        }
    }
    (f, g)
}

fn rotated<T: Real>(a: &Tensor2<T>, t: &Tensor2<T>) -> Result<(Tensor2<T>, Tensor2<T>)> {
    let ti = inverse(t)?;
    Ok((a.matmul(&ti.transpose())?, ti))
}

/// Gradient-projection oblique rotation from start `t`.
fn gpf_oblique<T: Real>(a: &Tensor2<T>, mut t: Tensor2<T>, cfg: &GeominConfig) -> Result<RotationResult<T>> {
    let eps: T = lit(cfg.epsilon);
    let tol: T = lit(cfg.tolerance);
    let p = t.rows();
    let (mut l, mut ti) = rotated(a, &t)?;
    let (mut f, mut gq) = geomin_criterion(&l, eps);
    let mut g = l.transpose().matmul(&gq)?.matmul(&ti)?.transpose().map(|v| -v);
    let mut alpha = T::one();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let mut gp = g.clone();
        for c in 0..p {
            let d: T = (0..p).map(|r| t[(r, c)] * g[(r, c)]).sum();
            for r in 0..p {
                gp[(r, c)] -= t[(r, c)] * d;
            }
        }
        let s = gp.data().iter().map(|v| *v * *v).sum::<T>().sqrt();
        if s < tol {
            converged = true;
            break;
        }
        alpha = alpha + alpha;
        let mut accepted = None;
        for _ in 0..20 {
            let mut x = t.zip_map(&gp, |a, b| a - alpha * b);
            for c in 0..p {
                let n = (0..p).map(|r| x[(r, c)] * x[(r, c)]).sum::<T>().sqrt();
                for r in 0..p {
                    x[(r, c)] /= n;
                }
            }
            let Ok((lt, tit)) = rotated(a, &x) else {
                alpha = alpha / lit(2.0);
                continue;
            };
            let (ft, gqt) = geomin_criterion(&lt, eps);
            if f - ft > lit::<T>(0.5) * s * s * alpha {
                accepted = Some((x, lt, tit, ft, gqt));
                break;
            }
            alpha = alpha / lit(2.0);
        }
        let Some((x, lt, tit, ft, gqt)) = accepted else {
            // No sufficient decrease at any step length: numerically stationary.
            converged = s < tol.sqrt();
            break;
        };
        t = x;
        l = lt;
        ti = tit;
        f = ft;
        gq = gqt;
        g = l.transpose().matmul(&gq)?.matmul(&ti)?.transpose().map(|v| -v);
    }
    let phi = t.transpose().matmul(&t)?;
    Ok(RotationResult {
        loadings: l,
        rotation: t,
        factor_corr: phi,
        criterion: f,
        converged,
    })
}

fn random_orthonormal<T: Real>(p: usize, rng: &mut impl Rng) -> Tensor2<T> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
        let mut ok = true;
        for _ in 0..p {
            let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
        if ok {
            return Tensor2::from_fn(p, p, |i, j| lit(q[j][i]));
        }
    }
}

/// Geomin rotation; the identity start is always tried, then `starts − 1`
/// random orthonormal ones. The lowest criterion wins, earlier start on ties.
pub fn geomin_rotate<T: Real>(loadings: &Tensor2<T>, cfg: &GeominConfig, rng: &mut impl Rng) -> Result<RotationResult<T>> {
    let p = loadings.cols();
    if p <= 1 {
        let eps = lit(cfg.epsilon);
        return Ok(RotationResult {
            loadings: loadings.clone(),
            rotation: Tensor2::identity(p),
            factor_corr: Tensor2::identity(p),
            criterion: geomin_criterion(loadings, eps).0,
            converged: true,
        });
    }
    if loadings.rows() <= p {
        return Err(Error::config("loadings", format!("rotation needs more items than factors, got {}×{p}", loadings.rows())));
    }
    let mut best: Option<RotationResult<T>> = None;
    for s in 0..cfg.starts.max(1) {
        let start = if s == 0 { Tensor2::identity(p) } else { random_orthonormal(p, rng) };
        let Ok(res) = gpf_oblique(loadings, start, cfg) else { continue };
        let better = match &best {
            None => true,
            Some(b) => res.criterion < b.criterion || (!b.converged && res.converged && res.criterion <= b.criterion),
        };
        if better {
            best = Some(res);
        }
    }
    best.ok_or_else(|| Error::Data("rotation failed from every start".into()))
}

/// Signed column permutation: aligned column `q` is `signs[q]` times
/// candidate column `permutation[q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
}

impl AlignmentMap {
    pub fn identity(p: usize) -> Self {
        Self {
            permutation: (0..p).collect(),
            signs: vec![1; p],
        }
    }

    pub fn apply<T: Real>(&self, l: &Tensor2<T>) -> Tensor2<T> {
        Tensor2::from_fn(l.rows(), self.permutation.len(), |j, q| {
            let v = l[(j, self.permutation[q])];
            if self.signs[q] < 0 {
                -v
            } else {
                v
            }
        })
    }
}

/// Flips every column with a negative sum; zero-sum columns keep their sign.
pub fn reflect_signs<T: Real>(l: &Tensor2<T>) -> (Tensor2<T>, Vec<i8>) {
    let signs: Vec<i8> = (0..l.cols())
        .map(|c| if (0..l.rows()).map(|j| l[(j, c)]).sum::<T>() < T::zero() { -1 } else { 1 })
        .collect();
    let out = Tensor2::from_fn(l.rows(), l.cols(), |j, c| if signs[c] < 0 { -l[(j, c)] } else { l[(j, c)] });
    (out, signs)
}

/// Minimum-cost assignment for a square cost matrix (Hungarian method).
/// Returns `assign[row] = col`.
pub fn optimal_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // Potentials and matching over 1-based indices with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assign[matched[j] - 1] = j - 1;
        }
    }
    assign
}

fn column_mse<T: Real>(a: &Tensor2<T>, p: usize, b: &Tensor2<T>, q: usize) -> f64 {
    let m = a.rows();
    (0..m)
        .map(|j| {
            let d = (a[(j, p)] - b[(j, q)]).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / m.max(1) as f64
}

/// Reorders candidate columns to minimize the summed column MSE against the
/// reference. Signs are left as they are.
pub fn match_columns<T: Real>(candidate: &Tensor2<T>, reference: &Tensor2<T>) -> Result<(AlignmentMap, Tensor2<T>)> {
    if candidate.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "match_columns",
            left: candidate.shape(),
            right: reference.shape(),
        });
    }
    let p = reference.cols();
    // cost[q][c]: reference column q taking candidate column c.
    let cost: Vec<Vec<f64>> = (0..p).map(|q| (0..p).map(|c| column_mse(candidate, c, reference, q)).collect()).collect();
    let map = AlignmentMap {
        permutation: optimal_assignment(&cost),
        signs: vec![1; p],
    };
    let aligned = map.apply(candidate);
    Ok((map, aligned))
}

/// Per-column Tucker congruence; `NaN` where a column is all zeros.
pub fn tucker_congruence<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "tucker_congruence",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok((0..a.cols())
        .map(|c| {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for j in 0..a.rows() {
                let (x, y) = (a[(j, c)].to_f64().unwrap_or(f64::NAN), b[(j, c)].to_f64().unwrap_or(f64::NAN));
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa == 0.0 || bb == 0.0 {
                f64::NAN
            } else {
                (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Every column above the 0.98 equivalence threshold.
pub fn congruent(coefficients: &[f64]) -> bool {
    coefficients.iter().all(|&c| c > 0.98)
}

/// `D P Σ Pᵀ D` for the signed permutation in `map`.
pub fn align_correlations<T: Real>(sigma: &Tensor2<T>, map: &AlignmentMap) -> Tensor2<T> {
    let p = map.permutation.len();
    Tensor2::from_fn(p, p, |a, b| {
        let v = sigma[(map.permutation[a], map.permutation[b])];
        if map.signs[a] * map.signs[b] < 0 {
            -v
        } else {
            v
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport<T> {
    pub map: AlignmentMap,
    pub loadings: Tensor2<T>,
    pub factor_corr: Tensor2<T>,
    pub congruence: Vec<f64>,
    pub equivalent: bool,
    pub rotation_converged: bool,
}

/// Rotation, reflection and column matching of a candidate solution against
/// a reference. With `rotate` off the candidate is taken as already oblique
/// with correlation `sigma`.
pub fn align_to_reference<T: Real>(
    candidate: &Tensor2<T>,
    sigma: &Tensor2<T>,
    reference: &Tensor2<T>,
    rotate: Option<&GeominConfig>,
    rng: &mut impl Rng,
) -> Result<AlignmentReport<T>> {
    let (l, phi, converged) = match rotate {
        Some(cfg) => {
            let r = geomin_rotate(candidate, cfg, rng)?;
            (r.loadings, r.factor_corr, r.converged)
        }
        None => (candidate.clone(), sigma.clone(), true),
    };
    let (reflected, signs) = reflect_signs(&l);
    let (perm, aligned) = match_columns(&reflected, reference)?;
    let map = AlignmentMap {
        signs: perm.permutation.iter().map(|&c| signs[c]).collect(),
        permutation: perm.permutation,
    };
    let congruence = tucker_congruence(&aligned, reference)?;
    Ok(AlignmentReport {
        loadings: aligned,
        factor_corr: align_correlations(&phi, &map),
        equivalent: congruent(&congruence),
        congruence,
        map,
        rotation_converged: converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(m: usize, p: usize, rng: &mut impl Rng) -> Tensor2<f64> {
        Tensor2::from_fn(m, p, |j, k| if j * p / m == k { rng.random_range(0.5..1.5) } else { 0.0 })
    }

    #[test]
    fn one_factor_is_untouched() {
        let l = Tensor2::from_fn(6, 1, |j, _| j as f64 - 2.0);
        let r = geomin_rotate(&l, &GeominConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.loadings, l);
        assert_eq!(r.rotation, Tensor2::identity(1));
    }

    #[test]
    fn simple_structure_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = block(12, 3, &mut rng);
        let cfg = GeominConfig::default();
        let r = geomin_rotate(&l, &cfg, &mut rng).unwrap();
        let (f0, _) = geomin_criterion(&l, 0.01);
        assert!((r.criterion - f0).abs() < 1e-8, "{} vs {f0}", r.criterion);
    }

    #[test]
    fn rotated_simple_structure_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = block(15, 3, &mut rng);
        let t = random_orthonormal::<f64>(3, &mut rng);
        let mixed = l.matmul(&t).unwrap();
        let (f_mixed, _) = geomin_criterion(&mixed, 0.01);
        let r = geomin_rotate(&mixed, &GeominConfig::default(), &mut rng).unwrap();
        assert!(r.criterion < f_mixed);
        let (f0, _) = geomin_criterion(&l, 0.01);
        assert!(r.criterion <= f0 + 1e-6);
        let rep = align_to_reference(&mixed, &Tensor2::identity(3), &l, Some(&GeominConfig::default()), &mut rng).unwrap();
        assert!(rep.congruence.iter().all(|&c| c > 0.999), "{:?}", rep.congruence);
        for i in 0..3 {
            assert!((r.factor_corr[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection() {
        let l = Tensor2::from_rows(&[vec![1.0, -2.0, 1.0], vec![0.5, 1.0, -1.0]]).unwrap();
        let (r, s) = reflect_signs(&l);
        assert_eq!(s, vec![1, -1, 1]);
        assert_eq!(r[(0, 1)], 2.0);
        assert_eq!(reflect_signs(&r).0, r);
        let pos = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(reflect_signs(&pos).0, pos);
    }

    #[test]
    fn matching_recovers_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Tensor2::from_fn(10, 4, |_, _| rng.random::<f64>());
        let (m, a) = match_columns(&l, &l).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2, 3]);
        assert_eq!(a, l);
        let swapped = AlignmentMap {
            permutation: vec![2, 0, 3, 1],
            signs: vec![1; 4],
        }
        .apply(&l);
        let (_, a) = match_columns(&swapped, &l).unwrap();
        assert_eq!(a, l);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=6 {
            let perms = permutations(n);
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
                let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
                let best = perms.iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
                let a = optimal_assignment(&cost);
                assert!((total(&a) - best).abs() < 1e-12);
                assert!(total(&a) <= total(&(0..n).collect::<Vec<_>>()) + 1e-15);
            }
        }
    }

    #[test]
    fn congruence_examples() {
        let a = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![2.0, 1.0, 0.0]]).unwrap();
        let b = a.map(|v| 2.0 * v);
        let c = tucker_congruence(&a, &b).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15);
        assert!(c[2].is_nan());
        assert!(!congruent(&c));
        let x = Tensor2::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let y = Tensor2::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(tucker_congruence(&x, &y).unwrap(), vec![0.0]);
    }

    #[test]
    fn correlation_realignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = crate::simlab::sample_lkj(4, 1.0, &mut rng).unwrap();
        assert_eq!(align_correlations(&s, &AlignmentMap::identity(4)), s);
        let map = AlignmentMap {
            permutation: vec![3, 1, 0, 2],
            signs: vec![1, -1, -1, 1],
        };
        let out = align_correlations(&s, &map);
        for a in 0..4 {
            assert_eq!(out[(a, a)], 1.0);
            for b in 0..4 {
                let sign = f64::from(map.signs[a]) * f64::from(map.signs[b]);
                assert_eq!(out[(a, b)], sign * s[(map.permutation[a], map.permutation[b])]);
            }
        }
    }
}
