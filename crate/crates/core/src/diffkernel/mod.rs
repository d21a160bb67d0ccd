//! Define-by-run reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is always a
//! topological order of the graph. [`Tape::backward`] walks it once in reverse
//! and returns a [`Gradients`] table indexed by [`Var`].
//!
//! A tape accepts exactly one backward pass. Training builds a fresh tape for
//! every step.

pub mod check;
mod tensor;

pub use tensor::Tensor2;

use crate::error::{Error, Result};
use crate::scalar::{lit, log_sigmoid, normal_cdf, normal_pdf, sigmoid, softplus, Real};
use std::rc::Rc;
pub(crate) use tensor::gemm_into;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Missing-response sentinel in [`OrdinalTargets`].
pub const MISSING_CODE: i16 = -1;

/// Observed ordinal responses feeding [`Tape::ordinal_loglik`].
///
/// Row `r` of the linear predictor uses response row `r / repeat`, which lets
/// many latent draws per respondent share one copy of the responses.
#[derive(Clone, Debug)]
pub struct OrdinalTargets {
    pub codes: Vec<i16>,
    pub n_rows: usize,
    pub categories: Vec<usize>,
    pub repeat: usize,
}

impl OrdinalTargets {
    pub fn n_items(&self) -> usize {
        self.categories.len()
    }

    #[inline]
    fn code(&self, row: usize, item: usize) -> i16 {
        self.codes[(row / self.repeat) * self.categories.len() + item]
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    /// Input and `Φ(x)` saved from the forward pass.
    Gelu(Var, Tensor2<T>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    AddColVec(Var, Var),
    MulColVec(Var, Var),
    LogSumExpRows(Var),
    StopGradient,
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RepeatRows(Var, usize),
    CumsumCols(Var),
    OrdinalLogLik {
        eta: Var,
        thresholds: Var,
        targets: Rc<OrdinalTargets>,
    },
    MvnLogPdf {
        z: Var,
        chol: Var,
    },
    GaussianKl {
        mean: Var,
        log_std: Var,
        chol: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor2<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor2<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor2<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        left: a,
        right: b,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor2<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor2::zeros(sa.0, sb.1);
        gemm_into(self.value(a), false, self.value(b), false, T::one(), T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let mut out = Tensor2::zeros(sa.0, sb.0);
        gemm_into(self.value(a), false, self.value(b), true, T::one(), T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulBt(a, b), out, rg))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(idx) = t.data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::Domain {
                row: idx / t.cols(),
                col: idx % t.cols(),
                value: t.data()[idx].to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.unary(x, T::ln, Op::Log(x)))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, T::sqrt, Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let cdf = self.value(x).map(normal_cdf);
        let out = self.value(x).zip_map(&cdf, |v, c| v * c);
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x, cdf), out, rg)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor2::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = lit::<T>(t.len().max(1) as f64);
        let s = t.sum() / n;
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor2::scalar(s), rg)
    }

    /// Per-row sum, `r×c → r×1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor2::from_fn(t.rows(), 1, |i, _| t.row(i).iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(Op::SumRows(x), out, rg)
    }

    /// Per-row `ln Σ exp`, max-shifted, `r×c → r×1`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor2::from_fn(t.rows(), 1, |i, _| crate::scalar::logsumexp(t.row(i)));
        let rg = self.rg(&[x]);
        self.push(Op::LogSumExpRows(x), out, rg)
    }

    // ------------------------------------------------------------ broadcasts

    fn check_rowvec(&self, name: &'static str, x: Var, v: Var) -> Result<()> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv != (1, sx.1) {
            return Err(shape_err(name, sx, sv));
        }
        Ok(())
    }

    fn check_colvec(&self, name: &'static str, x: Var, v: Var) -> Result<()> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv != (sx.0, 1) {
            return Err(shape_err(name, sx, sv));
        }
        Ok(())
    }

    /// `x + 1·bias` for a `1×c` bias.
    pub fn broadcast_add_rowvec(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_rowvec("broadcast_add_rowvec", x, bias)?;
        let (t, b) = (self.value(x), self.value(bias));
        let out = Tensor2::from_fn(t.rows(), t.cols(), |i, j| t[(i, j)] + b[(0, j)]);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddRowVec(x, bias), out, rg))
    }

    /// Scales column `j` of `x` by `v[j]`.
    pub fn broadcast_mul_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_rowvec("broadcast_mul_rowvec", x, v)?;
        let (t, b) = (self.value(x), self.value(v));
        let out = Tensor2::from_fn(t.rows(), t.cols(), |i, j| t[(i, j)] * b[(0, j)]);
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::MulRowVec(x, v), out, rg))
    }

    /// Adds `v[i]` to every entry of row `i`.
    pub fn broadcast_add_colvec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_colvec("broadcast_add_colvec", x, v)?;
        let (t, b) = (self.value(x), self.value(v));
        let out = Tensor2::from_fn(t.rows(), t.cols(), |i, j| t[(i, j)] + b[(i, 0)]);
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::AddColVec(x, v), out, rg))
    }

    /// Scales row `i` of `x` by `v[i]`.
    pub fn broadcast_mul_colvec(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_colvec("broadcast_mul_colvec", x, v)?;
        let (t, b) = (self.value(x), self.value(v));
        let out = Tensor2::from_fn(t.rows(), t.cols(), |i, j| t[(i, j)] * b[(i, 0)]);
        let rg = self.rg(&[x, v]);
        Ok(self.push(Op::MulColVec(x, v), out, rg))
    }

    // -------------------------------------------------------------- plumbing

    /// Identity forward; blocks every gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(Op::StopGradient, v, false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", (rows, 0), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// Same data, new row-major shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Each row repeated `k` times consecutively: row `i` lands on rows `i·k..(i+1)·k`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let out = Tensor2::from_fn(t.rows() * k, t.cols(), |i, j| t[(i / k, j)]);
        let rg = self.rg(&[x]);
        self.push(Op::RepeatRows(x, k), out, rg)
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 1..row.len() {
                row[j] = row[j] + row[j - 1];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::CumsumCols(x), out, rg)
    }

    // ------------------------------------------------------- model kernels

    /// Graded-response log-likelihood summed over items.
    ///
    /// `eta` is `n×M` (the linear predictor `βⱼᵀz`), `thresholds` is `M×K` with
    /// `thresholds[j][k-1] = α_{j,k}` strictly decreasing in `k`. Row `r` of the
    /// output is `Σ_j ln P(x_j | eta_r)` where `P(x ≥ k) = σ(eta + α_k)`.
    /// Missing responses contribute nothing.
    pub fn ordinal_loglik(
        &mut self,
        eta: Var,
        thresholds: Var,
        targets: Rc<OrdinalTargets>,
    ) -> Result<Var> {
        let (se, st) = (self.shape(eta), self.shape(thresholds));
        let m = targets.n_items();
        let kmax = targets.categories.iter().copied().max().unwrap_or(2) - 1;
        if se.1 != m || st.0 != m || st.1 < kmax {
            return Err(shape_err("ordinal_loglik", se, st));
        }
        if se.0 != targets.n_rows * targets.repeat {
            return Err(shape_err("ordinal_loglik", se, (targets.n_rows, targets.repeat)));
        }
        let (e, th) = (self.value(eta), self.value(thresholds));
        let floor: T = lit(LOG_PROB_FLOOR);
        let mut out = Tensor2::zeros(se.0, 1);
        for r in 0..se.0 {
            let mut acc = T::zero();
            for j in 0..m {
                let code = targets.code(r, j);
                if code < 0 {
                    continue;
                }
                let lp = category_logp(e[(r, j)], th.row(j), targets.categories[j], code as usize);
                acc += lp.max(floor);
            }
            out[(r, 0)] = acc;
        }
        let rg = self.rg(&[eta, thresholds]);
        Ok(self.push(
            Op::OrdinalLogLik {
                eta,
                thresholds,
                targets,
            },
            out,
            rg,
        ))
    }

    /// Row-wise `ln N(z; 0, LLᵀ)` for a lower-triangular `L` with positive diagonal.
    pub fn mvn_logpdf_chol(&mut self, z: Var, chol: Var) -> Result<Var> {
        let (sz, sl) = (self.shape(z), self.shape(chol));
        if sl.0 != sl.1 || sz.1 != sl.0 {
            return Err(shape_err("mvn_logpdf_chol", sz, sl));
        }
        let (zt, l) = (self.value(z), self.value(chol));
        let p = sl.0;
        let logdet: T = (0..p).map(|i| l[(i, i)].ln()).sum();
        let c = lit::<T>(0.5) * lit::<T>(p as f64) * crate::scalar::ln_2pi::<T>();
        let mut y = vec![T::zero(); p];
        let out = Tensor2::from_fn(zt.rows(), 1, |i, _| {
            forward_subst(l, zt.row(i), &mut y);
            let q: T = y.iter().map(|&v| v * v).sum();
            -lit::<T>(0.5) * q - logdet - c
        });
        let rg = self.rg(&[z, chol]);
        Ok(self.push(Op::MvnLogPdf { z, chol }, out, rg))
    }

    /// Row-wise `KL[N(μ, diag e^{2s}) ‖ N(0, LLᵀ)]`.
    pub fn gaussian_kl(&mut self, mean: Var, log_std: Var, chol: Var) -> Result<Var> {
        let (sm, ss, sl) = (self.shape(mean), self.shape(log_std), self.shape(chol));
        if sm != ss || sl.0 != sl.1 || sm.1 != sl.0 {
            return Err(shape_err("gaussian_kl", sm, sl));
        }
        let (mu, ls, l) = (self.value(mean), self.value(log_std), self.value(chol));
        let p = sl.0;
        let linv = lower_inverse(l);
        let kdiag: Vec<T> = (0..p)
            .map(|c| (0..p).map(|r| linv[(r, c)] * linv[(r, c)]).sum())
            .collect();
        let logdet: T = (0..p).map(|i| l[(i, i)].ln()).sum();
        let half = lit::<T>(0.5);
        let mut y = vec![T::zero(); p];
        let out = Tensor2::from_fn(sm.0, 1, |i, _| {
            forward_subst(l, mu.row(i), &mut y);
            let quad: T = y.iter().map(|&v| v * v).sum();
            let mut tr = T::zero();
            let mut sum_ls = T::zero();
            for k in 0..p {
                let s = ls[(i, k)];
                tr += (s + s).exp() * kdiag[k];
                sum_ls += s;
            }
            half * (tr + quad - lit::<T>(p as f64) + logdet + logdet - sum_ls - sum_ls)
        });
        let rg = self.rg(&[mean, log_std, chol]);
        Ok(self.push(
            Op::GaussianKl {
                mean,
                log_std,
                chol,
            },
            out,
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a `1×1` node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::NotScalar(s));
        }
        self.backward_seeded(vec![(loss, Tensor2::scalar(T::one()))])
    }

    /// Reverse pass from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Tensor2<T>)>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor2<T>>> = vec![None; n];
        for (v, g) in seeds {
            let s = self.shape(v);
            if g.shape() != s {
                return Err(shape_err("backward seed", s, g.shape()));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut visited = 0;
        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2<T>, grads: &mut [Option<Tensor2<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let live = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, d: Tensor2<T>, grads: &mut [Option<Tensor2<T>>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        let half = lit::<T>(0.5);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if live(*a) {
                    let mut da = Tensor2::zeros(val(*a).rows(), val(*a).cols());
                    gemm_into(g, false, val(*b), true, T::one(), T::zero(), &mut da);
                    send(*a, da, grads);
                }
                if live(*b) {
                    let mut db = Tensor2::zeros(val(*b).rows(), val(*b).cols());
                    gemm_into(val(*a), true, g, false, T::one(), T::zero(), &mut db);
                    send(*b, db, grads);
                }
            }
            Op::MatMulBt(a, b) => {
                if live(*a) {
                    let mut da = Tensor2::zeros(val(*a).rows(), val(*a).cols());
                    gemm_into(g, false, val(*b), false, T::one(), T::zero(), &mut da);
                    send(*a, da, grads);
                }
                if live(*b) {
                    let mut db = Tensor2::zeros(val(*b).rows(), val(*b).cols());
                    gemm_into(g, true, val(*a), false, T::one(), T::zero(), &mut db);
                    send(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    send(*a, g.zip_map(val(*b), |d, y| d * y), grads);
                }
                if live(*b) {
                    send(*b, g.zip_map(val(*a), |d, x| d * x), grads);
                }
            }
            Op::Div(a, b) => {
                if live(*a) {
                    send(*a, g.zip_map(val(*b), |d, y| d / y), grads);
                }
                if live(*b) {
                    // d(a/b)/db = -out / b
                    let t = out.zip_map(val(*b), |o, y| o / y);
                    send(*b, g.zip_map(&t, |d, q| -d * q), grads);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|d| d * *c), grads),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let s = val(*x).shape();
                let d = g.clone().reshaped(s.0, s.1).expect("reshape grad");
                send(*x, d, grads)
            }
            Op::Exp(x) => send(*x, g.zip_map(out, |d, o| d * o), grads),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |d, v| d / v), grads),
            Op::Softplus(x) => send(*x, g.zip_map(val(*x), |d, v| d * sigmoid(v)), grads),
            Op::Square(x) => send(*x, g.zip_map(val(*x), |d, v| d * (v + v)), grads),
            Op::Sqrt(x) => send(*x, g.zip_map(out, |d, o| d * half / o), grads),
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |d, o| d * o * (T::one() - o)), grads),
            Op::LogSigmoid(x) => send(*x, g.zip_map(val(*x), |d, v| d * sigmoid(-v)), grads),
            Op::Gelu(x, cdf) => {
                let mut d = g.zip_map(val(*x), |d, v| d * v * normal_pdf(v));
                d.data_mut().iter_mut().zip(cdf.data()).zip(g.data()).for_each(|((o, &c), &gi)| *o += gi * c);
                send(*x, d, grads)
            }
            Op::Sum(x) => {
                let s = val(*x).shape();
                send(*x, Tensor2::filled(s.0, s.1, g.item()), grads)
            }
            Op::Mean(x) => {
                let s = val(*x).shape();
                let n = lit::<T>((s.0 * s.1).max(1) as f64);
                send(*x, Tensor2::filled(s.0, s.1, g.item() / n), grads)
            }
            Op::SumRows(x) => {
                let s = val(*x).shape();
                send(*x, Tensor2::from_fn(s.0, s.1, |i, _| g[(i, 0)]), grads)
            }
            Op::LogSumExpRows(x) => {
                let t = val(*x);
                let d = Tensor2::from_fn(t.rows(), t.cols(), |i, j| {
                    let lse = out[(i, 0)];
                    if lse.is_finite() {
                        g[(i, 0)] * (t[(i, j)] - lse).exp()
                    } else {
                        T::zero()
                    }
                });
                send(*x, d, grads)
            }
            Op::AddRowVec(x, b) => {
                send(*x, g.clone(), grads);
                if live(*b) {
                    let db = Tensor2::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g[(i, j)]).sum());
                    send(*b, db, grads);
                }
            }
            Op::MulRowVec(x, v) => {
                let (t, b) = (val(*x), val(*v));
                if live(*x) {
                    send(*x, Tensor2::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * b[(0, j)]), grads);
                }
                if live(*v) {
                    let db = Tensor2::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g[(i, j)] * t[(i, j)]).sum()
                    });
                    send(*v, db, grads);
                }
            }
            Op::AddColVec(x, v) => {
                send(*x, g.clone(), grads);
                if live(*v) {
                    send(*v, Tensor2::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum()), grads);
                }
            }
            Op::MulColVec(x, v) => {
                let (t, b) = (val(*x), val(*v));
                if live(*x) {
                    send(*x, Tensor2::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * b[(i, 0)]), grads);
                }
                if live(*v) {
                    let dv = Tensor2::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(t.row(i)).map(|(&d, &y)| d * y).sum()
                    });
                    send(*v, dv, grads);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if live(p) {
                        send(p, Tensor2::from_fn(g.rows(), c, |i, j| g[(i, off + j)]), grads);
                    }
                    off += c;
                }
            }
            Op::RepeatRows(x, k) => {
                let t = val(*x);
                let mut d = Tensor2::zeros(t.rows(), t.cols());
                for i in 0..g.rows() {
                    let dst = d.row_mut(i / k);
                    for (a, &b) in dst.iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                send(*x, d, grads)
            }
            Op::CumsumCols(x) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    let row = d.row_mut(i);
                    for j in (0..row.len().saturating_sub(1)).rev() {
                        row[j] = row[j] + row[j + 1];
                    }
                }
                send(*x, d, grads)
            }
            Op::OrdinalLogLik {
                eta,
                thresholds,
                targets,
            } => {
                let (e, th) = (val(*eta), val(*thresholds));
                let mut deta = Tensor2::zeros(e.rows(), e.cols());
                let mut dth = Tensor2::zeros(th.rows(), th.cols());
                let floor: T = lit(LOG_PROB_FLOOR);
                for r in 0..e.rows() {
                    let up = g[(r, 0)];
                    if up == T::zero() {
                        continue;
                    }
                    for j in 0..targets.n_items() {
                        let code = targets.code(r, j);
                        if code < 0 {
                            continue;
                        }
                        let k = code as usize;
                        let c = targets.categories[j];
                        let eta_rj = e[(r, j)];
                        if category_logp(eta_rj, th.row(j), c, k) < floor {
                            continue;
                        }
                        let (ga, gb) = category_logp_partials(eta_rj, th.row(j), c, k);
                        deta[(r, j)] = up * (ga + gb);
                        if k >= 1 {
                            dth[(j, k - 1)] += up * ga;
                        }
                        if k + 1 < c {
                            dth[(j, k)] += up * gb;
                        }
                    }
                }
                if live(*eta) {
                    send(*eta, deta, grads);
                }
                if live(*thresholds) {
                    send(*thresholds, dth, grads);
                }
            }
            Op::MvnLogPdf { z, chol } => {
                let (zt, l) = (val(*z), val(*chol));
                let p = l.rows();
                let mut dz = Tensor2::zeros(zt.rows(), p);
                let mut dl = Tensor2::zeros(p, p);
                let mut y = vec![T::zero(); p];
                let mut a = vec![T::zero(); p];
                let mut wsum = T::zero();
                for i in 0..zt.rows() {
                    let up = g[(i, 0)];
                    forward_subst(l, zt.row(i), &mut y);
                    back_subst_t(l, &y, &mut a);
                    for k in 0..p {
                        dz[(i, k)] = -up * a[k];
                    }
                    for r in 0..p {
                        for c in 0..=r {
                            dl[(r, c)] += up * a[r] * y[c];
                        }
                    }
                    wsum += up;
                }
                for k in 0..p {
                    dl[(k, k)] -= wsum / l[(k, k)];
                }
                if live(*z) {
                    send(*z, dz, grads);
                }
                if live(*chol) {
                    send(*chol, dl, grads);
                }
            }
            Op::GaussianKl {
                mean,
                log_std,
                chol,
            } => {
                let (mu, ls, l) = (val(*mean), val(*log_std), val(*chol));
                let p = l.rows();
                let linv = lower_inverse(l);
                let kdiag: Vec<T> = (0..p)
                    .map(|c| (0..p).map(|r| linv[(r, c)] * linv[(r, c)]).sum())
                    .collect();
                // Linvᵀ column products reused for the trace term's L-gradient.
                let col = |c: usize| -> Vec<T> { (0..p).map(|r| linv[(r, c)]).collect() };
                let lt_col: Vec<Vec<T>> = (0..p)
                    .map(|c| {
                        let cc = col(c);
                        let mut out = vec![T::zero(); p];
                        back_subst_t(l, &cc, &mut out);
                        out
                    })
                    .collect();
                let mut dmu = Tensor2::zeros(mu.rows(), p);
                let mut dls = Tensor2::zeros(mu.rows(), p);
                let mut dl = Tensor2::zeros(p, p);
                let mut y = vec![T::zero(); p];
                let mut a = vec![T::zero(); p];
                let mut wsum = T::zero();
                for i in 0..mu.rows() {
                    let up = g[(i, 0)];
                    forward_subst(l, mu.row(i), &mut y);
                    back_subst_t(l, &y, &mut a);
                    for k in 0..p {
                        let var = (ls[(i, k)] + ls[(i, k)]).exp();
                        dmu[(i, k)] = up * a[k];
                        dls[(i, k)] = up * (var * kdiag[k] - T::one());
                    }
                    for r in 0..p {
                        for c in 0..=r {
                            let mut acc = a[r] * y[c];
                            for (q, ltq) in lt_col.iter().enumerate() {
                                let var = (ls[(i, q)] + ls[(i, q)]).exp();
                                acc += var * ltq[r] * linv[(c, q)];
                            }
                            dl[(r, c)] -= up * acc;
                        }
                    }
                    wsum += up;
                }
                for k in 0..p {
                    dl[(k, k)] += wsum / l[(k, k)];
                }
                if live(*mean) {
                    send(*mean, dmu, grads);
                }
                if live(*log_std) {
                    send(*log_std, dls, grads);
                }
                if live(*chol) {
                    send(*chol, dl, grads);
                }
            }
        }
    }
}

/// Lower clamp applied to every per-item log-probability (`ln 1e-300`).
pub const LOG_PROB_FLOOR: f64 = -690.775_527_898_213_7;

fn accumulate<T: Real>(slot: &mut Option<Tensor2<T>>, g: Tensor2<T>) {
    match slot {
        Some(acc) => acc.axpy(T::one(), &g),
        None => *slot = Some(g),
    }
}

/// `ln P(x = k)` for one item with `c` categories, computed without cancellation.
#[inline]
pub(crate) fn category_logp<T: Real>(eta: T, th: &[T], c: usize, k: usize) -> T {
    let lower = k == 0;
    let upper = k + 1 == c;
    match (lower, upper) {
        (true, true) => T::zero(),
        (true, false) => log_sigmoid(-(eta + th[k])),
        (false, true) => log_sigmoid(eta + th[k - 1]),
        (false, false) => {
            let a = eta + th[k - 1];
            let b = eta + th[k];
            let gap = a - b;
            log_sigmoid(a) + log_sigmoid(-b) + (-(-gap).exp_m1()).ln()
        }
    }
}

/// Partial derivatives of [`category_logp`] with respect to the upper boundary
/// argument `a = η + α_k` and lower boundary argument `b = η + α_{k+1}`.
#[inline]
fn category_logp_partials<T: Real>(eta: T, th: &[T], c: usize, k: usize) -> (T, T) {
    let lower = k == 0;
    let upper = k + 1 == c;
    match (lower, upper) {
        (true, true) => (T::zero(), T::zero()),
        (true, false) => (T::zero(), -sigmoid(eta + th[k])),
        (false, true) => (sigmoid(-(eta + th[k - 1])), T::zero()),
        (false, false) => {
            let a = eta + th[k - 1];
            let b = eta + th[k];
            let r = T::one() / (a - b).exp_m1();
            (sigmoid(-a) + r, -sigmoid(b) - r)
        }
    }
}

/// Solves `L y = z` for lower-triangular `L`.
fn forward_subst<T: Real>(l: &Tensor2<T>, z: &[T], y: &mut [T]) {
    for i in 0..z.len() {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ a = y` for lower-triangular `L`.
fn back_subst_t<T: Real>(l: &Tensor2<T>, y: &[T], a: &mut [T]) {
    let p = y.len();
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[(k, i)] * a[k];
        }
        a[i] = s / l[(i, i)];
    }
}

fn lower_inverse<T: Real>(l: &Tensor2<T>) -> Tensor2<T> {
    let p = l.rows();
    let mut inv = Tensor2::zeros(p, p);
    let mut e = vec![T::zero(); p];
    let mut y = vec![T::zero(); p];
    for c in 0..p {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[c] = T::one();
        forward_subst(l, &e, &mut y);
        for r in 0..p {
            inv[(r, c)] = y[r];
        }
    }
    inv
}

#[cfg(test)]
mod tests;
