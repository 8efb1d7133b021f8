//! Dense layers, ReLU MLPs with manual backpropagation, and Adam.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every float scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Fully connected layer `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weights: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    /// Uniform init in `±1/sqrt(fan_in)` for both weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut sample = || T::from_f64_lossy(rng.random_range(-bound..bound));
        let weights = Array2::from_shape_simple_fn((output, input), &mut sample);
        let bias = Array1::from_shape_simple_fn(output, &mut sample);
        Self { weights, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Batched forward pass; `x` is `batch × in`.
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        y
    }

    pub fn forward_one(&self, x: ArrayView1<T>) -> Array1<T> {
        self.weights.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        grads: &mut DenseGrads<T>,
        want_input_grad: bool,
    ) -> Option<Array2<T>> {
        grads.weights += &dy.t().dot(&x);
        grads.bias += &dy.sum_axis(Axis(0));
        want_input_grad.then(|| dy.dot(&self.weights))
    }

    pub fn zero_grads(&self) -> DenseGrads<T> {
        DenseGrads { weights: Array2::zeros(self.weights.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Stack of dense layers with ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Activations recorded by [`Mlp::forward_cached`]; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub activations: Vec<Array2<T>>,
}

impl<T> MlpCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<DenseGrads<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn scale(&mut self, factor: T) {
        for g in &mut self.layers {
            g.weights.mapv_inplace(|v| v * factor);
            g.bias.mapv_inplace(|v| v * factor);
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for g in &self.layers {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.bias.as_slice().expect("standard layout"));
        }
        out
    }
}

impl<T: Scalar> Mlp<T> {
    /// Builds an MLP mapping `input` through each entry of `dims` (output size per layer).
    pub fn init<R: Rng + ?Sized>(input: usize, dims: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for &d in dims {
            layers.push(Dense::init(prev, d, rng));
            prev = d;
        }
        Self { layers }
    }

    pub fn zeros(input: usize, dims: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for &d in dims {
            layers.push(Dense::zeros(prev, d));
            prev = d;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = x.to_owned();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last {
                relu_inplace(&mut h);
            }
        }
        h
    }

    pub fn forward_one(&self, x: ArrayView1<T>) -> Array1<T> {
        let mut h = x.to_owned();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_one(h.view());
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> MlpCache<T> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(activations[i].view());
            if i < last {
                relu_inplace(&mut h);
            }
            activations.push(h);
        }
        MlpCache { activations }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final layer output).
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        d_out: Array2<T>,
        grads: &mut MlpGrads<T>,
        want_input_grad: bool,
    ) -> Option<Array2<T>> {
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let need_dx = i > 0 || want_input_grad;
            let dx = self.layers[i].backward(cache.activations[i].view(), delta.view(), &mut grads.layers[i], need_dx);
            match dx {
                Some(mut dx) if i > 0 => {
                    // activations[i] is a ReLU output; gradient passes where it is positive
                    ndarray::Zip::from(&mut dx)
                        .and(&cache.activations[i])
                        .for_each(|d, &a| {
                            if a <= T::zero() {
                                *d = T::zero();
                            }
                        });
                    delta = dx;
                }
                other => return other,
            }
        }
        None
    }

    pub fn zero_grads(&self) -> MlpGrads<T> {
        MlpGrads { layers: self.layers.iter().map(Dense::zero_grads).collect() }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let c = |v: &T| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN));
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { weights: l.weights.map(c), bias: l.bias.map(c) })
                .collect(),
        }
    }
}

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn relu_inplace<T: Scalar>(a: &mut Array2<T>) {
    a.mapv_inplace(relu);
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam over a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must list tensors in the same order every call.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.learning_rate);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.epsilon);
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let one = T::one();
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            assert_eq!(p.len(), g.len(), "tensor {k} shape");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Cosine similarity in f64; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}
