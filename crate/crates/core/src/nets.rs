//! Feed-forward networks for the encoder and discriminator roles.
//!
//! Layers compute `h = f(h_prev Wᵀ + b)` on row-major batches, with `W` stored
//! as `out×in`. Hidden layers use GELU; output layers are linear.

use crate::diffkernel::{Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::grm::ResponseMatrix;
use crate::scalar::{lit, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    /// `out×in`.
    pub weight: Tensor2<T>,
    /// `1×out`.
    pub bias: Tensor2<T>,
    pub activation: Activation,
}

/// Half-width of the Kaiming uniform draw, `√(3/fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Weights (`fan_out×fan_in`) and biases (`1×fan_out`) drawn i.i.d. from
/// `U(−√(3/fan_in), √(3/fan_in))`.
pub fn kaiming_init<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (Tensor2<T>, Tensor2<T>) {
    let b = kaiming_bound(fan_in.max(1));
    let w = Tensor2::from_fn(fan_out, fan_in, |_, _| lit(rng.random_range(-b..b)));
    let bias = Tensor2::from_fn(1, fan_out, |_, _| lit(rng.random_range(-b..b)));
    (w, bias)
}

impl<T: Real> Layer<T> {
    pub fn kaiming(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let (weight, bias) = kaiming_init(fan_in, fan_out, rng);
        Self {
            weight,
            bias,
            activation,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = tape.matmul_bt(x, w)?;
        let h = tape.broadcast_add_rowvec(h, b)?;
        Ok(match self.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Identity => h,
        })
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardNet<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> FeedForwardNet<T> {
    /// `dims = [in, h1, …, out]`; GELU on every hidden layer, identity output.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::build(dims, false, rng)
    }

    /// Like [`FeedForwardNet::new`] but with GELU on the last layer as well,
    /// for use as a shared trunk.
    pub fn trunk(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::build(dims, true, rng)
    }

    fn build(dims: &[usize], gelu_last: bool, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("hidden", format!("invalid layer sizes {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 < n || gelu_last {
                    Activation::Gelu
                } else {
                    Activation::Identity
                };
                Layer::kaiming(dims[l], dims[l + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layers", "a network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].weight.rows() != w[1].weight.cols() {
                return Err(Error::Shape {
                    op: "FeedForwardNet",
                    left: w[0].weight.shape(),
                    right: w[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Weights and biases, layer by layer.
    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Puts the parameters on `tape`, as leaves when `trainable`.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        record_all(tape, self.tensors(), trainable)
    }

    /// Forward pass using handles returned by [`FeedForwardNet::record`].
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
        if tape.shape(x).1 != self.input_dim() {
            return Err(Error::Shape {
                op: "FeedForwardNet::forward",
                left: tape.shape(x),
                right: self.layers[0].weight.shape(),
            });
        }
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, params[2 * l], params[2 * l + 1])?;
        }
        Ok(h)
    }

    /// Untracked forward pass.
    pub fn eval(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut tape = Tape::new();
        let p = self.record(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, &p)?;
        Ok(tape.value(out).clone())
    }
}

fn record_all<T: Real>(tape: &mut Tape<T>, ts: Vec<&Tensor2<T>>, trainable: bool) -> Vec<Var> {
    ts.into_iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Diagonal Gaussian encoder: a GELU trunk with linear mean and log-std heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEncoder<T> {
    pub trunk: FeedForwardNet<T>,
    pub mean_head: Layer<T>,
    pub log_std_head: Layer<T>,
}

/// Tape handles for the two heads of a [`GaussianEncoder`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianHeads {
    pub mean: Var,
    pub log_std: Var,
}

impl<T: Real> GaussianEncoder<T> {
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config("encoder_hidden", "the Gaussian encoder needs a hidden layer"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let trunk = FeedForwardNet::trunk(&dims, rng)?;
        let h = trunk.output_dim();
        Ok(Self {
            trunk,
            mean_head: Layer::kaiming(h, latent_dim, Activation::Identity, rng),
            log_std_head: Layer::kaiming(h, latent_dim, Activation::Identity, rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.weight.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        let mut v = self.trunk.tensors();
        v.extend([
            &self.mean_head.weight,
            &self.mean_head.bias,
            &self.log_std_head.weight,
            &self.log_std_head.bias,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        let mut v = self.trunk.tensors_mut();
        v.extend([
            &mut self.mean_head.weight,
            &mut self.mean_head.bias,
            &mut self.log_std_head.weight,
            &mut self.log_std_head.bias,
        ]);
        v
    }

    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        record_all(tape, self.tensors(), trainable)
    }

    /// `μ(x)` and `ln σ(x)`, each `B×P`.
    pub fn heads(&self, tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<GaussianHeads> {
        let nt = self.trunk.layers().len() * 2;
        let h = self.trunk.forward(tape, x, &params[..nt])?;
        let mean = self.mean_head.forward(tape, h, params[nt], params[nt + 1])?;
        let log_std = self.log_std_head.forward(tape, h, params[nt + 2], params[nt + 3])?;
        Ok(GaussianHeads { mean, log_std })
    }

    /// Untracked `(z, μ, σ)` with `z = μ + σ ⊙ u`.
    pub fn encode(&self, x: &Tensor2<T>, u: &Tensor2<T>) -> Result<(Tensor2<T>, Tensor2<T>, Tensor2<T>)> {
        if u.shape() != (x.rows(), self.latent_dim()) {
            return Err(Error::Shape {
                op: "encode_gaussian",
                left: x.shape(),
                right: u.shape(),
            });
        }
        let mut tape = Tape::new();
        let p = self.record(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = self.heads(&mut tape, xv, &p)?;
        let mu = tape.value(h.mean).clone();
        let sigma = tape.value(h.log_std).map(T::exp);
        let z = Tensor2::from_fn(mu.rows(), mu.cols(), |i, k| mu[(i, k)] + sigma[(i, k)] * u[(i, k)]);
        Ok((z, mu, sigma))
    }
}

/// Implicit encoder `z = net([x, ε])` with noise injected at the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxEncoder<T> {
    pub net: FeedForwardNet<T>,
    pub noise_dim: usize,
}

impl<T: Real> BlackBoxEncoder<T> {
    pub fn new(
        input_dim: usize,
        noise_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::config("noise_dim", "must be at least 1"));
        }
        let mut dims = vec![input_dim + noise_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        Ok(Self {
            net: FeedForwardNet::new(&dims, rng)?,
            noise_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim() - self.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        self.net.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        self.net.tensors_mut()
    }

    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.net.record(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, eps: Var, params: &[Var]) -> Result<Var> {
        if tape.shape(eps).1 != self.noise_dim || tape.shape(x).1 != self.input_dim() {
            return Err(Error::Shape {
                op: "encode_blackbox",
                left: tape.shape(x),
                right: tape.shape(eps),
            });
        }
        let input = tape.concat_cols(&[x, eps])?;
        self.net.forward(tape, input, params)
    }

    /// Untracked `z = net([x, ε])`.
    pub fn encode(&self, x: &Tensor2<T>, eps: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut tape = Tape::new();
        let p = self.record(&mut tape, false);
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone());
        let z = self.forward(&mut tape, xv, ev, &p)?;
        Ok(tape.value(z).clone())
    }
}

/// Discriminator `T(x, z)` returning one raw logit per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator<T> {
    pub net: FeedForwardNet<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(input_dim: usize, latent_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![input_dim + latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            net: FeedForwardNet::new(&dims, rng)?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor2<T>> {
        self.net.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        self.net.tensors_mut()
    }

    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.net.record(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, z: Var, params: &[Var]) -> Result<Var> {
        let input = tape.concat_cols(&[x, z])?;
        self.net.forward(tape, input, params)
    }

    /// Untracked logits, `B×1`.
    pub fn discriminate(&self, x: &Tensor2<T>, z: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut tape = Tape::new();
        let p = self.record(&mut tape, false);
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        let t = self.forward(&mut tape, xv, zv, &p)?;
        Ok(tape.value(t).clone())
    }
}

/// Encoder input width for `m` items.
pub fn encoded_width(m: usize, indicators: bool) -> usize {
    if indicators {
        2 * m
    } else {
        m
    }
}

/// Network input for each respondent: `(x + 0.5)/C_j` per item, with missing
/// entries at 0.5. When `indicators` is set a 0/1 missingness column per item
/// follows the responses.
pub fn encode_responses<T: Real>(x: &ResponseMatrix, indicators: bool) -> Tensor2<T> {
    let m = x.n_items();
    let cats = x.categories();
    let half: T = lit(0.5);
    Tensor2::from_fn(x.n_respondents(), encoded_width(m, indicators), |i, c| {
        if c < m {
            match x.get(i, c) {
                Some(k) => (lit::<T>(k as f64) + half) / lit(cats[c] as f64),
                None => half,
            }
        } else if x.get(i, c - m).is_none() {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::check::gradient_check;
    use crate::scalar::normal_cdf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kaiming_bounds_and_variance() {
        assert!((kaiming_bound(128) - 0.153_093).abs() < 1e-6);
        assert_eq!(kaiming_bound(3), 1.0);
        let (w, b) = kaiming_init::<f64>(128, 1000, &mut rng(1));
        let bound = kaiming_bound(128);
        assert!(w.max_abs() <= bound && b.max_abs() <= bound);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = bound * bound / 3.0;
        assert!((var / target - 1.0).abs() < 0.05, "{var} vs {target}");
    }

    #[test]
    fn one_hidden_layer_matches_hand_composition() {
        let net = FeedForwardNet::<f64>::new(&[3, 5, 2], &mut rng(2)).unwrap();
        let x = Tensor2::from_rows(&[vec![0.2, -0.7, 1.1], vec![-1.3, 0.4, 0.0]]).unwrap();
        let out = net.eval(&x).unwrap();
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        for i in 0..2 {
            let h: Vec<f64> = (0..5)
                .map(|o| {
                    let a: f64 = (0..3).map(|k| l0.weight[(o, k)] * x[(i, k)]).sum::<f64>() + l0.bias[(0, o)];
                    a * normal_cdf(a)
                })
                .collect();
            for o in 0..2 {
                let y: f64 = (0..5).map(|k| l1.weight[(o, k)] * h[k]).sum::<f64>() + l1.bias[(0, o)];
                assert!((out[(i, o)] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_encoder_reparameterization() {
        let enc = GaussianEncoder::<f64>::new(4, &[6], 2, &mut rng(3)).unwrap();
        let x = Tensor2::from_fn(3, 4, |i, j| 0.1 * (i + j) as f64);
        let (z0, mu, sigma) = enc.encode(&x, &Tensor2::zeros(3, 2)).unwrap();
        assert_eq!(z0, mu);
        assert!(sigma.data().iter().all(|&s| s > 0.0));
        let u1 = Tensor2::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.5 * j as f64);
        let u2 = Tensor2::from_fn(3, 2, |i, j| -0.2 + 0.7 * (i * j) as f64);
        let (z1, mu1, s1) = enc.encode(&x, &u1).unwrap();
        let (z2, _, _) = enc.encode(&x, &u2).unwrap();
        let (z12, _, _) = enc.encode(&x, &u1.zip_map(&u2, |a, b| a + b)).unwrap();
        assert_eq!((&mu1, &s1), (&mu, &sigma));
        assert_ne!(z1, z2);
        for idx in 0..6 {
            let lhs = z1.data()[idx] + z2.data()[idx] - z0.data()[idx];
            assert!((lhs - z12.data()[idx]).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_encoder_sample_mean() {
        use rand_distr::{Distribution, StandardNormal};
        let enc = GaussianEncoder::<f64>::new(2, &[4], 1, &mut rng(4)).unwrap();
        let n = 10_000;
        let x = Tensor2::from_fn(n, 2, |_, j| 0.25 + 0.5 * j as f64);
        let mut r = rng(5);
        let u = Tensor2::from_fn(n, 1, |_, _| StandardNormal.sample(&mut r));
        let (z, mu, sigma) = enc.encode(&x, &u).unwrap();
        let mean = z.sum() / n as f64;
        let se = sigma[(0, 0)] / (n as f64).sqrt();
        assert!((mean - mu[(0, 0)]).abs() < 3.0 * se);
    }

    #[test]
    fn blackbox_encoder_is_pure_and_noise_driven() {
        let enc = BlackBoxEncoder::<f64>::new(3, 2, &[8], 2, &mut rng(6)).unwrap();
        let x = Tensor2::filled(50, 3, 0.5);
        let mut r = rng(7);
        let eps = Tensor2::from_fn(50, 2, |_, _| r.random_range(-2.0..2.0));
        let a = enc.encode(&x, &eps).unwrap();
        assert_eq!(a, enc.encode(&x, &eps).unwrap());
        let col: Vec<f64> = (0..50).map(|i| a[(i, 0)]).collect();
        let m = col.iter().sum::<f64>() / 50.0;
        assert!(col.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 0.0);
        assert!(enc.encode(&x, &Tensor2::zeros(50, 3)).is_err());
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let enc = BlackBoxEncoder::<f64>::new(3, 2, &[4], 2, &mut rng(8)).unwrap();
        let x = Tensor2::from_fn(4, 3, |i, j| 0.2 * i as f64 - 0.1 * j as f64);
        let eps = Tensor2::from_fn(4, 2, |i, j| 0.3 * (i as f64 - j as f64));
        let inputs: Vec<Tensor2<f64>> = enc.tensors().into_iter().cloned().collect();
        let chk = gradient_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let ev = t.constant(eps.clone());
                let z = enc.forward(t, xv, ev, v)?;
                let c = t.constant(Tensor2::from_fn(4, 2, |i, j| 1.0 + 0.1 * (i + 2 * j) as f64));
                t.mul(z, c)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(chk.max_rel_error < 1e-6, "{chk:?}");
    }

    #[test]
    fn discriminator_shapes() {
        let d = Discriminator::<f64>::new(5, 2, &[16, 8], &mut rng(9)).unwrap();
        let t = d.discriminate(&Tensor2::filled(7, 5, 0.3), &Tensor2::filled(7, 2, -1.0)).unwrap();
        assert_eq!(t.shape(), (7, 1));
        assert!(t.all_finite());
    }

    #[test]
    fn response_encoding() {
        let x = ResponseMatrix::from_rows(&[vec![Some(4), None], vec![Some(0), Some(1)]], vec![5, 2]).unwrap();
        let e = encode_responses::<f64>(&x, true);
        assert_eq!(e.shape(), (2, 4));
        assert!((e[(0, 0)] - 0.9).abs() < 1e-15);
        assert_eq!((e[(0, 1)], e[(0, 3)]), (0.5, 1.0));
        assert_eq!(e[(1, 2)], 0.0);
        assert!(e.data()[..2].iter().chain(&e.data()[4..6]).all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(encode_responses::<f64>(&x, false).shape(), (2, 2));
    }
}
