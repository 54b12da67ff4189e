//! Two-hidden-layer perceptron that produces the `(s, t)` pair of a coupling
//! layer, with a hand-written reverse pass.
//!
//! Parameters live in a caller-owned flat slice laid out as
//! `W1 | b1 | W2 | b2 | W3 | b3`, weights row-major `fan_in x fan_out`.

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::numkit::{gemm, Batch, RngState};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Glorot-uniform hidden weights, zero output layer (identity coupling).
    #[default]
    GlorotUniform,
    /// Glorot-uniform everywhere, output layer included. Useful for probing
    /// non-trivial maps, and for leaving the saddle that identity couplings
    /// sit on when a single data dimension is paired with independent noise.
    GlorotUniformFull,
}

/// Shape descriptor of one network; owns no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Activations retained by [`Mlp::forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    x: Batch<T>,
    a1: Batch<T>,
    a2: Batch<T>,
    fingerprint: u64,
}

impl<T: Real> MlpCache<T> {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn input(&self) -> &Batch<T> {
        &self.x
    }

    /// Number of retained scalars.
    pub fn scalars(&self) -> usize {
        self.x.as_slice().len() + self.a1.as_slice().len() + self.a2.as_slice().len()
    }
}

/// Cheap order-sensitive hash of a parameter slice, used to detect caches
/// that outlived a parameter update.
pub(crate) fn fingerprint<T: Real>(theta: &[T]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ theta.len() as u64;
    for v in theta {
        h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize) -> Result<Mlp> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(KrnetError::config("mlp", "dimensions must be positive"));
        }
        Ok(Mlp {
            in_dim,
            hidden,
            out_dim,
            activation: Activation::Tanh,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Mlp {
        self.activation = activation;
        self
    }

    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.in_dim, self.hidden, 2 * self.out_dim);
        let w1 = 0;
        let b1 = w1 + i * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * o;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + o,
        }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().end
    }

    /// Range of the output layer `W3 | b3` inside the parameter slice.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let o = self.offsets();
        o.w3..o.end
    }

    /// Writes initial parameters into `theta` (length [`Mlp::n_params`]).
    pub fn init<T: Real>(&self, rng: &mut RngState, scheme: InitScheme, theta: &mut [T]) {
        assert_eq!(theta.len(), self.n_params());
        let o = self.offsets();
        let (i, h, out) = (self.in_dim, self.hidden, 2 * self.out_dim);
        theta.iter_mut().for_each(|v| *v = T::zero());
        let mut glorot = |dst: &mut [T], fan_in: usize, fan_out: usize| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in dst {
                *v = T::lit(rng.uniform_range(-lim, lim));
            }
        };
        glorot(&mut theta[o.w1..o.b1], i, h);
        glorot(&mut theta[o.w2..o.b2], h, h);
        if scheme == InitScheme::GlorotUniformFull {
            glorot(&mut theta[o.w3..o.b3], h, out);
        }
    }

    fn activate<T: Real>(&self, a: &mut Batch<T>) {
        match self.activation {
            Activation::Tanh => T::tanh_in_place(a.as_mut_slice()),
            Activation::Softplus => {
                for v in a.as_mut_slice() {
                    // ln(1 + e^x) without overflow
                    *v = v.max(T::zero()) + (-v.abs()).exp().ln_1p();
                }
            }
        }
    }

    /// Multiplies `d` in place by the activation derivative, expressed through
    /// the post-activation value `a`.
    fn activation_grad<T: Real>(&self, d: &mut [T], a: &[T]) {
        match self.activation {
            Activation::Tanh => {
                for (g, &v) in d.iter_mut().zip(a) {
                    *g *= T::one() - v * v;
                }
            }
            Activation::Softplus => {
                for (g, &v) in d.iter_mut().zip(a) {
                    *g *= T::one() - (-v).exp();
                }
            }
        }
    }

    fn dense<T: Real>(x: &Batch<T>, w: &[T], b: &[T], n_out: usize) -> Batch<T> {
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            data.extend_from_slice(b);
        }
        gemm(
            T::one(),
            x.as_slice(),
            rows,
            x.cols(),
            false,
            w,
            x.cols(),
            n_out,
            false,
            T::one(),
            &mut data,
        );
        Batch::new(rows, n_out, data).expect("dense output shape")
    }

    /// Forward pass returning the raw `rows x 2*out_dim` output (`s` columns
    /// first) and, when requested, the cache for [`Mlp::vjp`].
    pub fn forward_raw<T: Real>(
        &self,
        theta: &[T],
        x: &Batch<T>,
        keep_cache: bool,
    ) -> Result<(Batch<T>, Option<MlpCache<T>>)> {
        let o = self.offsets();
        if theta.len() != o.end {
            return Err(KrnetError::DimMismatch {
                context: "mlp parameters",
                expected: o.end,
                got: theta.len(),
            });
        }
        x.expect_cols(self.in_dim, "mlp input")?;
        let h = self.hidden;
        let mut a1 = Self::dense(x, &theta[o.w1..o.b1], &theta[o.b1..o.w2], h);
        self.activate(&mut a1);
        let mut a2 = Self::dense(&a1, &theta[o.w2..o.b2], &theta[o.b2..o.w3], h);
        self.activate(&mut a2);
        let out = Self::dense(&a2, &theta[o.w3..o.b3], &theta[o.b3..o.end], 2 * self.out_dim);
        let cache = keep_cache.then(|| MlpCache {
            x: x.clone(),
            a1,
            a2,
            fingerprint: fingerprint(theta),
        });
        Ok((out, cache))
    }

    /// Forward pass split into `(s, t)`.
    pub fn forward<T: Real>(
        &self,
        theta: &[T],
        x: &Batch<T>,
    ) -> Result<(Batch<T>, Batch<T>, MlpCache<T>)> {
        let (out, cache) = self.forward_raw(theta, x, true)?;
        let (s, t) = self.split(&out);
        Ok((s, t, cache.expect("cache requested")))
    }

    pub fn split<T: Real>(&self, out: &Batch<T>) -> (Batch<T>, Batch<T>) {
        let m = self.out_dim;
        let s: Vec<usize> = (0..m).collect();
        let t: Vec<usize> = (m..2 * m).collect();
        (out.gather_cols(&s), out.gather_cols(&t))
    }

    /// Reverse pass for the raw output cotangent (`rows x 2*out_dim`).
    /// Parameter gradients are summed over rows and added into `grad`;
    /// returns the per-row input cotangent.
    pub fn vjp_raw<T: Real>(
        &self,
        theta: &[T],
        cache: &MlpCache<T>,
        cot: &Batch<T>,
        grad: &mut [T],
    ) -> Result<Batch<T>> {
        let o = self.offsets();
        if cache.fingerprint != fingerprint(theta) {
            return Err(KrnetError::StaleCache("mlp parameters changed since forward"));
        }
        if cot.rows() != cache.rows() {
            return Err(KrnetError::StaleCache("cotangent batch differs from cached batch"));
        }
        cot.expect_cols(2 * self.out_dim, "mlp output cotangent")?;
        if grad.len() != o.end {
            return Err(KrnetError::DimMismatch {
                context: "mlp gradient",
                expected: o.end,
                got: grad.len(),
            });
        }
        let (n, i, h, out) = (cot.rows(), self.in_dim, self.hidden, 2 * self.out_dim);
        let one = T::one();

        col_sum_into(cot, &mut grad[o.b3..o.end]);
        gemm(one, cache.a2.as_slice(), n, h, true, cot.as_slice(), n, out, false, one, &mut grad[o.w3..o.b3]);
        let mut d2 = vec![T::zero(); n * h];
        gemm(one, cot.as_slice(), n, out, false, &theta[o.w3..o.b3], h, out, true, T::zero(), &mut d2);
        self.activation_grad(&mut d2, cache.a2.as_slice());
        let d2 = Batch::new(n, h, d2)?;

        col_sum_into(&d2, &mut grad[o.b2..o.w3]);
        gemm(one, cache.a1.as_slice(), n, h, true, d2.as_slice(), n, h, false, one, &mut grad[o.w2..o.b2]);
        let mut d1 = vec![T::zero(); n * h];
        gemm(one, d2.as_slice(), n, h, false, &theta[o.w2..o.b2], h, h, true, T::zero(), &mut d1);
        self.activation_grad(&mut d1, cache.a1.as_slice());
        let d1 = Batch::new(n, h, d1)?;

        col_sum_into(&d1, &mut grad[o.b1..o.w2]);
        gemm(one, cache.x.as_slice(), n, i, true, d1.as_slice(), n, h, false, one, &mut grad[o.w1..o.b1]);
        let mut gx = vec![T::zero(); n * i];
        gemm(one, d1.as_slice(), n, h, false, &theta[o.w1..o.b1], i, h, true, T::zero(), &mut gx);
        Batch::new(n, i, gx)
    }

    /// Reverse pass for separate `s` and `t` cotangents.
    pub fn vjp<T: Real>(
        &self,
        theta: &[T],
        cache: &MlpCache<T>,
        cot_s: &Batch<T>,
        cot_t: &Batch<T>,
        grad: &mut [T],
    ) -> Result<Batch<T>> {
        let joined = Batch::hstack(cot_s, cot_t)?;
        self.vjp_raw(theta, cache, &joined, grad)
    }
}

fn col_sum_into<T: Real>(b: &Batch<T>, acc: &mut [T]) {
    for row in b.row_iter() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Owned parameters plus their shape, for standalone use of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub shape: Mlp,
    pub theta: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn init(
        rng: &mut RngState,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        scheme: InitScheme,
    ) -> Result<Self> {
        let shape = Mlp::new(in_dim, hidden, out_dim)?;
        let mut theta = vec![T::zero(); shape.n_params()];
        shape.init(rng, scheme, &mut theta);
        Ok(MlpParams { shape, theta })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn forward(&self, x: &Batch<T>) -> Result<(Batch<T>, Batch<T>, MlpCache<T>)> {
        self.shape.forward(&self.theta, x)
    }

    /// Returns `(parameter gradient, input cotangent)`.
    pub fn vjp(
        &self,
        cache: &MlpCache<T>,
        cot_s: &Batch<T>,
        cot_t: &Batch<T>,
    ) -> Result<(Vec<T>, Batch<T>)> {
        let mut g = vec![T::zero(); self.theta.len()];
        let gx = self.shape.vjp(&self.theta, cache, cot_s, cot_t, &mut g)?;
        Ok((g, gx))
    }
}
