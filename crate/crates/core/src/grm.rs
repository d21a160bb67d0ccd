//! The graded response model decoder.
//!
//! For item `j` with `C_j` categories and latent vector `z`,
//! `P(x ≥ k | z) = σ(βⱼᵀz + α_{j,k})` for `k = 1..C_j−1`, and the probability of
//! category `k` is the difference of successive boundaries. The intercepts
//! therefore decrease strictly in `k`; that ordering is built into the
//! parameterization
//!
//! ```text
//! α_{j,1} = base_j
//! α_{j,k} = base_j − Σ_{l<k} (softplus(raw_{j,l}) + GAP)
//! ```
//!
//! so no projection is ever needed during optimization. Loadings are either
//! free (exploratory) or `softplus(raw) ⊙ mask` (confirmatory). The factor
//! correlation is `Σ = LLᵀ` where `L` is a lower-triangular matrix whose rows
//! are normalized to unit length.

use crate::diffkernel::{OrdinalTargets, Tape, Tensor2, Var, LOG_PROB_FLOOR, MISSING_CODE};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::{lit, ln_2pi, sigmoid, softplus, softplus_inv, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Minimum spacing added between successive intercepts.
pub const INTERCEPT_GAP: f64 = 1e-6;

/// Ordinal responses, `N×M`, with per-item category counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    n: usize,
    m: usize,
    categories: Vec<usize>,
    codes: Vec<i16>,
}

impl ResponseMatrix {
    /// Builds from row-major codes where [`MISSING_CODE`] marks a missing entry.
    pub fn new(n: usize, m: usize, categories: Vec<usize>, codes: Vec<i16>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Data("response matrix needs at least one row and one item".into()));
        }
        if categories.len() != m || codes.len() != n * m {
            return Err(Error::Data(format!(
                "expected {m} category counts and {} codes, got {} and {}",
                n * m,
                categories.len(),
                codes.len()
            )));
        }
        if let Some(j) = categories.iter().position(|&c| c < 2 || c > i16::MAX as usize) {
            return Err(Error::Data(format!("item {} has {} categories", j + 1, categories[j])));
        }
        for (idx, &c) in codes.iter().enumerate() {
            let j = idx % m;
            if c != MISSING_CODE && (c < 0 || c as usize >= categories[j]) {
                return Err(Error::Data(format!(
                    "response {c} at row {}, item {} is outside 0..{}",
                    idx / m + 1,
                    j + 1,
                    categories[j]
                )));
            }
        }
        Ok(Self {
            n,
            m,
            categories,
            codes,
        })
    }

    /// Builds from rows of optional responses.
    pub fn from_rows(rows: &[Vec<Option<usize>>], categories: Vec<usize>) -> Result<Self> {
        let m = categories.len();
        let mut codes = Vec::with_capacity(rows.len() * m);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::Data(format!("row {} has {} entries, expected {m}", i + 1, r.len())));
            }
            codes.extend(r.iter().map(|v| v.map_or(MISSING_CODE, |k| k.min(i16::MAX as usize) as i16)));
        }
        Self::new(rows.len(), m, categories, codes)
    }

    pub fn n_respondents(&self) -> usize {
        self.n
    }

    pub fn n_items(&self) -> usize {
        self.m
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn max_categories(&self) -> usize {
        self.categories.iter().copied().max().unwrap_or(2)
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    pub fn row(&self, i: usize) -> &[i16] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        let c = self.codes[i * self.m + j];
        (c >= 0).then_some(c as usize)
    }

    pub fn has_missing(&self) -> bool {
        self.codes.contains(&MISSING_CODE)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut codes = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            codes.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            m: self.m,
            categories: self.categories.clone(),
            codes,
        }
    }

    /// Targets for the likelihood kernel, each row used for `repeat` consecutive
    /// latent draws.
    pub fn targets(&self, repeat: usize) -> Rc<OrdinalTargets> {
        Rc::new(OrdinalTargets {
            codes: self.codes.clone(),
            n_rows: self.n,
            categories: self.categories.clone(),
            repeat,
        })
    }
}

/// Which loadings are free and whether they are sign-constrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadingPattern {
    pub n_items: usize,
    pub n_factors: usize,
    /// Row-major `M×P`; `false` pins the loading at exactly zero.
    pub mask: Vec<bool>,
    /// Confirmatory positivity through a softplus map.
    pub positive: bool,
}

impl LoadingPattern {
    pub fn exploratory(m: usize, p: usize) -> Self {
        Self {
            n_items: m,
            n_factors: p,
            mask: vec![true; m * p],
            positive: false,
        }
    }

    /// Consecutive blocks of `M/P` items each load on one factor, positively.
    pub fn simple(m: usize, p: usize) -> Result<Self> {
        if p == 0 || m % p != 0 {
            return Err(Error::config("structure", format!("simple structure needs P | M, got M={m}, P={p}")));
        }
        let per = m / p;
        let mask = (0..m * p).map(|idx| (idx / p) / per == idx % p).collect();
        Ok(Self {
            n_items: m,
            n_factors: p,
            mask,
            positive: true,
        })
    }

    /// Positive loadings on the cells marked `true` in an `M×P` mask.
    pub fn from_mask(mask: &[Vec<bool>]) -> Result<Self> {
        let m = mask.len();
        let p = mask.first().map_or(0, Vec::len);
        if m == 0 || p == 0 || mask.iter().any(|r| r.len() != p) {
            return Err(Error::config("structure", "mask must be a non-empty rectangular M×P matrix"));
        }
        if let Some(j) = mask.iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::config("structure", format!("item {j} loads on no factor")));
        }
        Ok(Self {
            n_items: m,
            n_factors: p,
            mask: mask.concat(),
            positive: true,
        })
    }

    pub fn is_free(&self, j: usize, p: usize) -> bool {
        self.mask[j * self.n_factors + p]
    }

    pub fn is_exploratory(&self) -> bool {
        !self.positive && self.mask.iter().all(|&b| b)
    }

    fn mask_tensor<T: Real>(&self) -> Tensor2<T> {
        Tensor2::from_fn(self.n_items, self.n_factors, |j, p| {
            if self.is_free(j, p) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Decoder parameters θ in unconstrained form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmParams<T> {
    loadings_raw: Tensor2<T>,
    intercept_base: Tensor2<T>,
    /// `M×(K−1)` where `K = max C_j − 1`; columns past `C_j − 2` are unused.
    intercept_raw: Tensor2<T>,
    /// Lower triangle: diagonal is `ln` of the unnormalized diagonal.
    corr_raw: Tensor2<T>,
    pattern: LoadingPattern,
    categories: Vec<usize>,
    free_corr: bool,
}

/// Tape handles for one [`GrmParams`].
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// `M×P` loadings β.
    pub loadings: Var,
    /// `M×K` intercepts, decreasing along each row.
    pub thresholds: Var,
    /// `P×P` Cholesky factor of Σ.
    pub chol: Var,
    /// Leaves in [`GrmParams::tensors`] order; empty when recorded as constants.
    pub leaves: Vec<Var>,
}

impl<T: Real> GrmParams<T> {
    /// Xavier-style initialization: loadings and intercepts drawn from
    /// `U(−b, b)` with `b = √(2/(P+M))`; Σ starts at the identity.
    pub fn init(
        categories: &[usize],
        pattern: LoadingPattern,
        free_corr: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (m, p) = (pattern.n_items, pattern.n_factors);
        if categories.len() != m || p == 0 || categories.iter().any(|&c| c < 2) {
            return Err(Error::config(
                "categories",
                format!("need {m} items with at least 2 categories and P ≥ 1"),
            ));
        }
        let bound = xavier_bound(m, p);
        let draw = |rng: &mut dyn rand::RngCore| lit::<T>(rng.random_range(-bound..bound));
        let loadings_raw = Tensor2::from_fn(m, p, |j, k| {
            let u = draw(rng);
            if !pattern.is_free(j, k) {
                T::zero()
            } else if pattern.positive {
                softplus_inv(u.abs().max(lit(1e-4)))
            } else {
                u
            }
        });
        let kmax = categories.iter().copied().max().unwrap_or(2) - 1;
        let mut intercept_base = Tensor2::zeros(m, 1);
        let mut intercept_raw = Tensor2::zeros(m, kmax - 1);
        for j in 0..m {
            let mut a: Vec<T> = (0..kmax).map(|_| draw(rng)).collect();
            a.sort_by(|x, y| y.partial_cmp(x).unwrap());
            intercept_base[(j, 0)] = a[0];
            for l in 0..kmax - 1 {
                let gap = (a[l] - a[l + 1] - lit(INTERCEPT_GAP)).max(lit(1e-4));
                intercept_raw[(j, l)] = softplus_inv(gap);
            }
        }
        Ok(Self {
            loadings_raw,
            intercept_base,
            intercept_raw,
            corr_raw: Tensor2::zeros(p, p),
            pattern,
            categories: categories.to_vec(),
            free_corr: free_corr && p > 1,
        })
    }

    /// Builds from constrained values: `loadings` (`M×P`), per-item decreasing
    /// intercepts and a correlation matrix.
    pub fn from_values(
        loadings: &Tensor2<T>,
        intercepts: &[Vec<T>],
        factor_corr: &Tensor2<T>,
        pattern: LoadingPattern,
        free_corr: bool,
    ) -> Result<Self> {
        let (m, p) = (pattern.n_items, pattern.n_factors);
        if loadings.shape() != (m, p) || intercepts.len() != m || factor_corr.shape() != (p, p) {
            return Err(Error::Shape {
                op: "GrmParams::from_values",
                left: loadings.shape(),
                right: (intercepts.len(), factor_corr.rows()),
            });
        }
        let mut loadings_raw = Tensor2::zeros(m, p);
        for j in 0..m {
            for k in 0..p {
                let v = loadings[(j, k)];
                loadings_raw[(j, k)] = if !pattern.is_free(j, k) {
                    if v != T::zero() {
                        return Err(Error::Data(format!("loading ({j}, {k}) is masked but nonzero")));
                    }
                    T::zero()
                } else if pattern.positive {
                    if !(v > T::zero()) {
                        return Err(Error::Data(format!("loading ({j}, {k}) must be positive")));
                    }
                    softplus_inv(v)
                } else {
                    v
                };
            }
        }
        let categories: Vec<usize> = intercepts.iter().map(|a| a.len() + 1).collect();
        if categories.iter().any(|&c| c < 2) {
            return Err(Error::Data("every item needs at least one intercept".into()));
        }
        let kmax = categories.iter().copied().max().unwrap_or(2) - 1;
        let mut intercept_base = Tensor2::zeros(m, 1);
        let mut intercept_raw = Tensor2::zeros(m, kmax - 1);
        for (j, a) in intercepts.iter().enumerate() {
            intercept_base[(j, 0)] = a[0];
            for l in 0..kmax - 1 {
                intercept_raw[(j, l)] = if l + 1 < a.len() {
                    let gap = a[l] - a[l + 1] - lit(INTERCEPT_GAP);
                    if !(gap > T::zero()) {
                        return Err(Error::Data(format!(
                            "intercepts of item {} are not strictly decreasing",
                            j + 1
                        )));
                    }
                    softplus_inv(gap)
                } else {
                    T::zero()
                };
            }
        }
        let l = linalg::cholesky(factor_corr)?;
        let corr_raw = Tensor2::from_fn(p, p, |i, k| match i.cmp(&k) {
            std::cmp::Ordering::Greater => l[(i, k)],
            std::cmp::Ordering::Equal => l[(i, i)].ln(),
            std::cmp::Ordering::Less => T::zero(),
        });
        Ok(Self {
            loadings_raw,
            intercept_base,
            intercept_raw,
            corr_raw,
            pattern,
            categories,
            free_corr: free_corr && p > 1,
        })
    }

    pub fn n_items(&self) -> usize {
        self.pattern.n_items
    }

    pub fn n_factors(&self) -> usize {
        self.pattern.n_factors
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn pattern(&self) -> &LoadingPattern {
        &self.pattern
    }

    pub fn free_corr(&self) -> bool {
        self.free_corr
    }

    /// Constrained loadings β, `M×P`.
    pub fn loadings(&self) -> Tensor2<T> {
        let mask = self.pattern.mask_tensor::<T>();
        let positive = self.pattern.positive;
        self.loadings_raw.zip_map(&mask, |r, m| if positive { softplus(r) * m } else { r * m })
    }

    /// `M×K` intercept table, row `j` valid in its first `C_j − 1` columns.
    pub fn thresholds(&self) -> Tensor2<T> {
        let (m, kmax) = (self.n_items(), self.intercept_raw.cols() + 1);
        let gap: T = lit(INTERCEPT_GAP);
        let mut out = Tensor2::zeros(m, kmax);
        for j in 0..m {
            let mut a = self.intercept_base[(j, 0)];
            out[(j, 0)] = a;
            for l in 1..kmax {
                a -= softplus(self.intercept_raw[(j, l - 1)]) + gap;
                out[(j, l)] = a;
            }
        }
        out
    }

    /// Intercepts per item, `C_j − 1` entries each.
    pub fn intercepts(&self) -> Vec<Vec<T>> {
        let th = self.thresholds();
        (0..self.n_items())
            .map(|j| th.row(j)[..self.categories[j] - 1].to_vec())
            .collect()
    }

    /// Cholesky factor `L` of Σ.
    pub fn corr_chol(&self) -> Tensor2<T> {
        let p = self.n_factors();
        let mut a = Tensor2::from_fn(p, p, |i, k| match i.cmp(&k) {
            std::cmp::Ordering::Greater => self.corr_raw[(i, k)],
            std::cmp::Ordering::Equal => self.corr_raw[(i, i)].exp(),
            std::cmp::Ordering::Less => T::zero(),
        });
        for i in 0..p {
            let norm = a.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            a.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        a
    }

    /// Factor correlation Σ = LLᵀ.
    pub fn factor_corr(&self) -> Tensor2<T> {
        linalg::outer_self(&self.corr_chol())
    }

    /// Trainable raw tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        let mut v = vec![&self.loadings_raw, &self.intercept_base, &self.intercept_raw];
        if self.free_corr {
            v.push(&self.corr_raw);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut v = vec![&mut self.loadings_raw, &mut self.intercept_base, &mut self.intercept_raw];
        if self.free_corr {
            v.push(&mut self.corr_raw);
        }
        v
    }

    /// Records the constrained parameters on `tape`. With `trainable` the raw
    /// tensors become leaves listed in [`DecoderVars::leaves`].
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Result<DecoderVars> {
        let inputs: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let mut dv = self.record_from(tape, &inputs)?;
        if !trainable {
            dv.leaves.clear();
        }
        Ok(dv)
    }

    /// Builds the constrained parameters from handles already on `tape`, one
    /// per entry of [`GrmParams::tensors`].
    pub fn record_from(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<DecoderVars> {
        let expected = self.tensors().len();
        if inputs.len() != expected {
            return Err(Error::Index(format!("decoder expects {expected} inputs, got {}", inputs.len())));
        }
        let (lraw, base, iraw) = (inputs[0], inputs[1], inputs[2]);

        let loadings = if self.pattern.positive {
            let mask = tape.constant(self.pattern.mask_tensor());
            let sp = tape.softplus(lraw);
            tape.mul(sp, mask)?
        } else if self.pattern.mask.iter().all(|&b| b) {
            lraw
        } else {
            let mask = tape.constant(self.pattern.mask_tensor());
            tape.mul(lraw, mask)?
        };

        let thresholds = if self.intercept_raw.cols() == 0 {
            base
        } else {
            let sp = tape.softplus(iraw);
            let inc = tape.add_scalar(sp, lit(INTERCEPT_GAP));
            let cum = tape.cumsum_cols(inc);
            let neg = tape.neg(cum);
            let rest = tape.broadcast_add_colvec(neg, base)?;
            tape.concat_cols(&[base, rest])?
        };

        let chol = if self.free_corr {
            let craw = inputs[3];
            let p = self.n_factors();
            let diag = tape.constant(Tensor2::identity(p));
            let strict = tape.constant(Tensor2::from_fn(p, p, |i, k| if i > k { T::one() } else { T::zero() }));
            let e = tape.exp(craw);
            let d = tape.mul(e, diag)?;
            let s = tape.mul(craw, strict)?;
            let a = tape.add(d, s)?;
            let sq = tape.square(a);
            let ss = tape.sum_rows(sq);
            let norm = tape.sqrt(ss);
            let ones = tape.constant(Tensor2::filled(p, 1, T::one()));
            let inv = tape.div(ones, norm)?;
            tape.broadcast_mul_colvec(a, inv)?
        } else {
            tape.constant(self.corr_chol())
        };
        Ok(DecoderVars {
            loadings,
            thresholds,
            chol,
            leaves: inputs.to_vec(),
        })
    }

    /// `P(x_j ≥ k | z)` for every row of `z`.
    pub fn boundary_prob(&self, z: &Tensor2<T>, j: usize, k: usize) -> Result<Vec<T>> {
        if j >= self.n_items() || k > self.categories[j] {
            return Err(Error::Index(format!(
                "item {j}, level {k} (item count {}, level range 0..={})",
                self.n_items(),
                self.categories.get(j).copied().unwrap_or(0)
            )));
        }
        self.check_latents(z)?;
        if k == 0 {
            return Ok(vec![T::one(); z.rows()]);
        }
        if k == self.categories[j] {
            return Ok(vec![T::zero(); z.rows()]);
        }
        let beta = self.loadings();
        let a = self.thresholds()[(j, k - 1)];
        Ok((0..z.rows())
            .map(|i| {
                let eta: T = z.row(i).iter().zip(beta.row(j)).map(|(&zv, &b)| zv * b).sum();
                sigmoid(eta + a)
            })
            .collect())
    }

    /// Log category probabilities, `B × (M·maxC)`; entry `(i, j·maxC + k)` is
    /// `ln P(x_j = k | z_i)`, and `−∞` for `k ≥ C_j`.
    pub fn category_logprob(&self, z: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.check_latents(z)?;
        let (m, cmax) = (self.n_items(), self.categories.iter().copied().max().unwrap_or(2));
        let eta = self.linear_predictor(z);
        let th = self.thresholds();
        let floor: T = lit(LOG_PROB_FLOOR);
        Ok(Tensor2::from_fn(z.rows(), m * cmax, |i, col| {
            let (j, k) = (col / cmax, col % cmax);
            if k >= self.categories[j] {
                T::neg_infinity()
            } else {
                crate::diffkernel::category_logp(eta[(i, j)], th.row(j), self.categories[j], k).max(floor)
            }
        }))
    }

    /// `Σ_j ln P(x_{ij} | z_i)` with missing entries skipped.
    pub fn conditional_loglik(&self, x: &ResponseMatrix, z: &Tensor2<T>) -> Result<Vec<T>> {
        self.check_latents(z)?;
        self.check_responses(x)?;
        if x.n_respondents() != z.rows() {
            return Err(Error::Shape {
                op: "conditional_loglik",
                left: (x.n_respondents(), x.n_items()),
                right: z.shape(),
            });
        }
        let eta = self.linear_predictor(z);
        let th = self.thresholds();
        let floor: T = lit(LOG_PROB_FLOOR);
        Ok((0..z.rows())
            .map(|i| {
                let mut acc = T::zero();
                for (j, &code) in x.row(i).iter().enumerate() {
                    if code < 0 {
                        continue;
                    }
                    let lp = crate::diffkernel::category_logp(
                        eta[(i, j)],
                        th.row(j),
                        self.categories[j],
                        code as usize,
                    );
                    acc += lp.max(floor);
                }
                acc
            })
            .collect())
    }

    /// `ln N(z; 0, Σ)` per row.
    pub fn prior_logpdf(&self, z: &Tensor2<T>) -> Result<Vec<T>> {
        self.check_latents(z)?;
        let l = self.corr_chol();
        let p = self.n_factors();
        let logdet: T = (0..p).map(|i| l[(i, i)].ln()).sum();
        let c = lit::<T>(0.5 * p as f64) * ln_2pi::<T>();
        let mut y = vec![T::zero(); p];
        Ok((0..z.rows())
            .map(|i| {
                for r in 0..p {
                    let mut s = z[(i, r)];
                    for k in 0..r {
                        s -= l[(r, k)] * y[k];
                    }
                    y[r] = s / l[(r, r)];
                }
                let q: T = y.iter().map(|&v| v * v).sum();
                -lit::<T>(0.5) * q - logdet - c
            })
            .collect())
    }

    /// `ln p(x, z) = ln p(x | z) + ln N(z; 0, Σ)` per respondent.
    pub fn joint_logprob(&self, x: &ResponseMatrix, z: &Tensor2<T>) -> Result<Vec<T>> {
        let cond = self.conditional_loglik(x, z)?;
        let prior = self.prior_logpdf(z)?;
        Ok(cond.into_iter().zip(prior).map(|(a, b)| a + b).collect())
    }

    /// `z βᵀ`, `B×M`.
    pub fn linear_predictor(&self, z: &Tensor2<T>) -> Tensor2<T> {
        let beta = self.loadings();
        let mut out = Tensor2::zeros(z.rows(), self.n_items());
        crate::diffkernel::gemm_into(z, false, &beta, true, T::one(), T::zero(), &mut out);
        out
    }

    /// Checks the structural invariants: strictly decreasing intercepts, a
    /// unit-diagonal positive-definite Σ and exact zeros off the loading mask.
    pub fn check_invariants(&self) -> Result<()> {
        for (j, a) in self.intercepts().iter().enumerate() {
            if a.windows(2).any(|w| !(w[0] > w[1])) || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("intercepts of item {} lost their ordering", j + 1)));
            }
        }
        let sigma = self.factor_corr();
        let tol: T = lit(1e-12);
        for i in 0..self.n_factors() {
            if (sigma[(i, i)] - T::one()).abs() > tol {
                return Err(Error::Data(format!("factor correlation diagonal {i} is {}", sigma[(i, i)])));
            }
        }
        let ev = linalg::symmetric_eigenvalues(&sigma);
        if !(ev[0] > T::zero()) {
            return Err(Error::Data(format!("factor correlation is not positive definite (λ_min = {})", ev[0])));
        }
        let beta = self.loadings();
        for j in 0..self.n_items() {
            for k in 0..self.n_factors() {
                if !self.pattern.is_free(j, k) && beta[(j, k)] != T::zero() {
                    return Err(Error::Data(format!("masked loading ({j}, {k}) is nonzero")));
                }
            }
        }
        Ok(())
    }

    fn check_latents(&self, z: &Tensor2<T>) -> Result<()> {
        if z.cols() != self.n_factors() {
            return Err(Error::Shape {
                op: "latents",
                left: z.shape(),
                right: (z.rows(), self.n_factors()),
            });
        }
        Ok(())
    }

    fn check_responses(&self, x: &ResponseMatrix) -> Result<()> {
        if x.categories() != self.categories.as_slice() {
            return Err(Error::Data(format!(
                "responses have {} items with categories {:?}, model expects {:?}",
                x.n_items(),
                x.categories(),
                self.categories
            )));
        }
        Ok(())
    }
}

/// Half-width of the Xavier uniform draw, `√(2/(P+M))`.
pub fn xavier_bound(m: usize, p: usize) -> f64 {
    (2.0 / (p + m) as f64).sqrt()
}

/// Serialized decoder: constrained values for reading plus the raw state for
/// exact round trips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmDocument {
    pub loadings: Vec<Vec<f64>>,
    pub intercepts: Vec<Vec<f64>>,
    pub factor_corr: Vec<Vec<f64>>,
    pub raw: GrmParams<f64>,
}

impl GrmParams<f64> {
    pub fn to_document(&self) -> GrmDocument {
        GrmDocument {
            loadings: self.loadings().to_rows(),
            intercepts: self.intercepts(),
            factor_corr: self.factor_corr().to_rows(),
            raw: self.clone(),
        }
    }
}

impl GrmDocument {
    pub fn into_params(self) -> GrmParams<f64> {
        self.raw
    }
}
