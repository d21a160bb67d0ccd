//! Central finite-difference gradient checking.

use super::{Tape, Tensor2, Var};
use crate::error::Result;

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error `‖analytic − numeric‖₂ / max(‖analytic‖₂ + ‖numeric‖₂, 1e-12)`,
    /// maximised over inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Evaluates `f` on a fresh tape with `inputs` as differentiable leaves and
/// returns its scalar value.
fn eval<F>(f: &F, inputs: &[Tensor2<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).sum())
}

/// Central-difference gradient of the (summed) output of `f` w.r.t. every input.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor2<f64>], h: f64) -> Result<Vec<Tensor2<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor2<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor2::zeros(inputs[k].rows(), inputs[k].cols());
        for idx in 0..inputs[k].len() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let fp = eval(f, &work)?;
            work[k].data_mut()[idx] = orig - h;
            let fm = eval(f, &work)?;
            work[k].data_mut()[idx] = orig;
            g.data_mut()[idx] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Tape gradient of the summed output of `f` w.r.t. every input.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor2<f64>]) -> Result<Vec<Tensor2<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.sum(out);
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Compares tape gradients with central differences of step `h`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor2<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradient(&f, inputs)?;
    let n = numeric_gradient(&f, inputs, h)?;
    let per_input: Vec<f64> = a
        .iter()
        .zip(&n)
        .map(|(a, n)| {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).powi(2)).sum();
            let na: f64 = a.data().iter().map(|x| x * x).sum();
            let nn: f64 = n.data().iter().map(|x| x * x).sum();
            diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12)
        })
        .collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
    })
}
