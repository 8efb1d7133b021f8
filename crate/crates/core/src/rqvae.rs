//! Residual-quantized autoencoder.
//!
//! An encoder MLP maps a content embedding `x` to a latent `z`. The latent is
//! quantized level by level: each level picks the codebook vector nearest to
//! the current residual and subtracts it, so the chosen indices form the
//! item's Semantic ID. A decoder MLP reconstructs `x` from the sum of the
//! selected vectors.
//!
//! Training minimizes `||x - x̂||² + Σ_l β||r_l - sg[e_l]||² + ||sg[r_l] - e_l||²`
//! with a straight-through estimator between decoder input and encoder output.
//! Residuals are treated as functions of `z` only, so codebook vectors are
//! moved exclusively by the second term.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{self, read_header, read_u32, read_u8, to_u32};
use crate::error::{Error, Result};
use crate::nn::{squared_distance, Adam, AdamConfig, Mlp, MlpGrads, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Output size of each encoder layer; the last must equal `latent_dim`.
    pub encoder_dims: Vec<usize>,
    /// Output size of each decoder layer; the last must equal `input_dim`.
    pub decoder_dims: Vec<usize>,
    pub num_levels: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Codes used at most this many times in a batch are reset.
    pub reset_threshold: u32,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            latent_dim: 64,
            encoder_dims: vec![256, 128, 64],
            decoder_dims: vec![64, 128, 256],
            num_levels: 4,
            codebook_size: 64,
            beta: 0.25,
            learning_rate: 1e-3,
            batch_size: 256,
            reset_threshold: 0,
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("input and latent dims must be positive".into());
        }
        if self.encoder_dims.last() != Some(&self.latent_dim) {
            return bad(format!("encoder output {:?} must equal latent_dim {}", self.encoder_dims.last(), self.latent_dim));
        }
        if self.decoder_dims.last() != Some(&self.input_dim) {
            return bad(format!("decoder output {:?} must equal input_dim {}", self.decoder_dims.last(), self.input_dim));
        }
        if self.encoder_dims.iter().chain(&self.decoder_dims).any(|&d| d == 0) {
            return bad("layer sizes must be positive".into());
        }
        if self.num_levels == 0 || self.codebook_size == 0 {
            return bad("num_levels and codebook_size must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// One level's codebook: `K` vectors of dimension `D'` stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    /// 1-based level index.
    pub level: usize,
    pub vectors: Array2<T>,
    /// Per-batch usage tally, cleared after every training step.
    pub usage_counts: Vec<u32>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(level: usize, vectors: Array2<T>) -> Self {
        let k = vectors.nrows();
        Self { level, vectors, usage_counts: vec![0; k] }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vector(&self, k: usize) -> ArrayView1<'_, T> {
        self.vectors.row(k)
    }

    /// Index of the nearest vector, lowest index on ties.
    pub fn nearest(&self, r: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (k, row) in self.vectors.outer_iter().enumerate() {
            let d = squared_distance(row.as_slice().expect("standard layout"), r);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T> {
    pub codes: Vec<usize>,
    /// `r_1 = z` through `r_{L+1}`.
    pub residuals: Vec<Vec<T>>,
    /// Sum of the selected codebook vectors, accumulated in level order.
    pub quantized_latent: Vec<T>,
    /// Decoder output, filled in by [`RqVaeModel::loss`].
    pub reconstruction: Option<Vec<T>>,
}

/// Greedy residual quantization of `z` through `codebooks` in order.
pub fn quantize<T: Scalar>(codebooks: &[Codebook<T>], z: &[T]) -> Result<QuantizationResult<T>> {
    if codebooks.is_empty() {
        return Err(Error::Empty("codebook list"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    let dim = z.len();
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    let mut zhat = vec![T::zero(); dim];
    residuals.push(z.to_vec());
    for cb in codebooks {
        if cb.size() == 0 {
            return Err(Error::Empty("codebook"));
        }
        if cb.vectors.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: cb.vectors.ncols(), got: dim });
        }
        let r = residuals.last().expect("seeded with z");
        let c = cb.nearest(r);
        let e = cb.vector(c);
        let next: Vec<T> = r.iter().zip(e.iter()).map(|(&a, &b)| a - b).collect();
        for (acc, &v) in zhat.iter_mut().zip(e.iter()) {
            *acc += v;
        }
        codes.push(c);
        residuals.push(next);
    }
    Ok(QuantizationResult { codes, residuals, quantized_latent: zhat, reconstruction: None })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub recon: T,
    pub rqvae: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub recon: T,
    pub rqvae: T,
    pub result: QuantizationResult<T>,
}

/// Gradients laid out like the model parameters: encoder, decoder, codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeGradients<T> {
    pub encoder: MlpGrads<T>,
    pub decoder: MlpGrads<T>,
    pub codebooks: Vec<Array2<T>>,
}

impl<T: Scalar> RqVaeGradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = self.encoder.slices();
        out.extend(self.decoder.slices());
        out.extend(self.codebooks.iter().map(|c| c.as_slice().expect("standard layout")));
        out
    }
}

/// Everything a training step needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    /// Batch means.
    pub losses: LossParts<T>,
    /// `batch × L` codes.
    pub codes: Vec<Vec<usize>>,
    /// Per level `l`, the `batch × D'` residuals `r_l` that level quantized.
    pub residuals: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeModel<T = f32> {
    config: RqVaeConfig,
    encoder: Mlp<T>,
    decoder: Mlp<T>,
    codebooks: Vec<Codebook<T>>,
    frozen: bool,
}

impl<T: Scalar> RqVaeModel<T> {
    /// Random init; codebooks start as small Gaussian vectors.
    pub fn new(config: RqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(config.input_dim, &config.encoder_dims, &mut rng);
        let decoder = Mlp::init(config.latent_dim, &config.decoder_dims, &mut rng);
        let scale = 0.1 / (config.latent_dim as f64).sqrt();
        let codebooks = (1..=config.num_levels)
            .map(|level| {
                let v = Array2::from_shape_simple_fn((config.codebook_size, config.latent_dim), || {
                    T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * scale)
                });
                Codebook::new(level, v)
            })
            .collect();
        Ok(Self { config, encoder, decoder, codebooks, frozen: false })
    }

    /// Assembles a model from explicit parts, checking every shape.
    pub fn from_parts(config: RqVaeConfig, encoder: Mlp<T>, decoder: Mlp<T>, codebooks: Vec<Codebook<T>>) -> Result<Self> {
        config.validate()?;
        check_mlp(&encoder, config.input_dim, &config.encoder_dims, "encoder")?;
        check_mlp(&decoder, config.latent_dim, &config.decoder_dims, "decoder")?;
        if codebooks.len() != config.num_levels {
            return Err(Error::InvalidConfig(format!("{} codebooks for {} levels", codebooks.len(), config.num_levels)));
        }
        for cb in &codebooks {
            if cb.vectors.dim() != (config.codebook_size, config.latent_dim) {
                return Err(Error::InvalidConfig(format!("codebook {} has shape {:?}", cb.level, cb.vectors.dim())));
            }
        }
        Ok(Self { config, encoder, decoder, codebooks, frozen: false })
    }

    pub fn config(&self) -> &RqVaeConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Mlp<T> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp<T> {
        &self.decoder
    }

    pub fn codebooks(&self) -> &[Codebook<T>] {
        &self.codebooks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Frozen)
        } else {
            Ok(())
        }
    }

    pub fn codebooks_mut(&mut self) -> Result<&mut [Codebook<T>]> {
        self.ensure_mutable()?;
        Ok(&mut self.codebooks)
    }

    /// Mutable parameter tensors in gradient order.
    pub fn param_slices_mut(&mut self) -> Result<Vec<&mut [T]>> {
        self.ensure_mutable()?;
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        out.extend(self.codebooks.iter_mut().map(|c| c.vectors.as_slice_mut().expect("standard layout")));
        Ok(out)
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = self.encoder.param_slices();
        out.extend(self.decoder.param_slices());
        out.extend(self.codebooks.iter().map(|c| c.vectors.as_slice().expect("standard layout")));
        out
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        check_input(x, self.config.input_dim, "content embedding")?;
        let z = self.encoder.forward_one(ArrayView1::from(x));
        finite_vec(z, "encoder output")
    }

    /// Encodes the rows of `xs`.
    pub fn encode_batch(&self, xs: ArrayView2<T>) -> Result<Array2<T>> {
        if xs.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, got: xs.ncols() });
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("content embedding".into()));
        }
        let z = self.encoder.forward(xs);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(z)
    }

    pub fn quantize(&self, z: &[T]) -> Result<QuantizationResult<T>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.config.latent_dim, got: z.len() });
        }
        quantize(&self.codebooks, z)
    }

    pub fn decode(&self, z_hat: &[T]) -> Result<Vec<T>> {
        check_input(z_hat, self.config.latent_dim, "quantized latent")?;
        finite_vec(self.decoder.forward_one(ArrayView1::from(z_hat)), "decoder output")
    }

    /// Codes for one embedding.
    pub fn codes(&self, x: &[T]) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(x)?)?.codes)
    }

    pub fn loss(&self, x: &[T]) -> Result<LossBreakdown<T>> {
        let z = self.encode(x)?;
        let mut result = self.quantize(&z)?;
        let x_hat = self.decode(&result.quantized_latent)?;
        let recon = squared_distance(x, &x_hat);
        let rqvae = self.rqvae_term(&result);
        result.reconstruction = Some(x_hat);
        let total = recon + rqvae;
        if !total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(LossBreakdown { total, recon, rqvae, result })
    }

    fn rqvae_term(&self, result: &QuantizationResult<T>) -> T {
        let beta = T::from_f64_lossy(self.config.beta);
        let mut sum = T::zero();
        for (l, &c) in result.codes.iter().enumerate() {
            let e = self.codebooks[l].vector(c);
            let d = squared_distance(&result.residuals[l], e.as_slice().expect("standard layout"));
            // commitment term, then codebook term; equal in value, distinct in gradient
            sum += beta * d + d;
        }
        sum
    }

    /// Mean loss over the batch rows and its gradient with respect to every parameter.
    pub fn batch_gradients(&self, batch: ArrayView2<T>) -> Result<(RqVaeGradients<T>, BatchForward<T>)> {
        let n = batch.nrows();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if batch.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, got: batch.ncols() });
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("content embedding".into()));
        }
        let levels = self.config.num_levels;
        let latent = self.config.latent_dim;
        let enc_cache = self.encoder.forward_cached(batch);
        let z = enc_cache.output();

        let mut z_hat = Array2::<T>::zeros((n, latent));
        let mut residuals: Vec<Array2<T>> = (0..levels).map(|_| Array2::zeros((n, latent))).collect();
        let mut selected: Vec<Array2<T>> = (0..levels).map(|_| Array2::zeros((n, latent))).collect();
        let mut codes = Vec::with_capacity(n);
        for b in 0..n {
            let q = quantize(&self.codebooks, z.row(b).as_slice().expect("standard layout"))?;
            for l in 0..levels {
                residuals[l].row_mut(b).assign(&ArrayView1::from(&q.residuals[l]));
                selected[l].row_mut(b).assign(&self.codebooks[l].vector(q.codes[l]));
            }
            z_hat.row_mut(b).assign(&ArrayView1::from(&q.quantized_latent));
            codes.push(q.codes);
        }

        let dec_cache = self.decoder.forward_cached(z_hat.view());
        let x_hat = dec_cache.output();
        let diff = &batch - x_hat;
        let inv_n = T::one() / T::from_usize(n).expect("batch size fits");
        let two = T::from_f64_lossy(2.0);
        let beta = T::from_f64_lossy(self.config.beta);

        let recon = diff.iter().map(|&d| d * d).sum::<T>() * inv_n;
        let mut rqvae = T::zero();
        let mut commit = Array2::<T>::zeros((n, latent));
        for l in 0..levels {
            let gap = &residuals[l] - &selected[l];
            let d = gap.iter().map(|&v| v * v).sum::<T>();
            rqvae += beta * d + d;
            commit += &gap;
        }
        let rqvae = rqvae * inv_n;
        let losses = LossParts { total: recon + rqvae, recon, rqvae };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }

        // reconstruction: dL/dx̂ = -2 (x - x̂) / n
        let d_xhat = diff.mapv(|v| -two * v * inv_n);
        let mut dec_grads = self.decoder.zero_grads();
        let d_zhat = self
            .decoder
            .backward(&dec_cache, d_xhat, &mut dec_grads, true)
            .expect("input gradient requested");

        // straight-through: dL/dz picks up dL/dẑ, plus the commitment pull
        let d_z = d_zhat + &commit.mapv(|v| two * beta * v * inv_n);
        let mut enc_grads = self.encoder.zero_grads();
        self.encoder.backward(&enc_cache, d_z, &mut enc_grads, false);

        let mut cb_grads: Vec<Array2<T>> = self.codebooks.iter().map(|c| Array2::zeros(c.vectors.raw_dim())).collect();
        for l in 0..levels {
            for b in 0..n {
                let c = codes[b][l];
                let mut g = cb_grads[l].row_mut(c);
                for ((gv, &e), &r) in g.iter_mut().zip(selected[l].row(b)).zip(residuals[l].row(b)) {
                    *gv += two * (e - r) * inv_n;
                }
            }
        }

        let grads = RqVaeGradients { encoder: enc_grads, decoder: dec_grads, codebooks: cb_grads };
        Ok((grads, BatchForward { losses, codes, residuals }))
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.codebooks.iter().map(|c| c.vectors.len()).sum::<usize>()
    }
}

fn check_mlp<T: Scalar>(mlp: &Mlp<T>, input: usize, dims: &[usize], what: &str) -> Result<()> {
    let mut prev = input;
    if mlp.layers.len() != dims.len() {
        return Err(Error::InvalidConfig(format!("{what} has {} layers, config {}", mlp.layers.len(), dims.len())));
    }
    for (l, &d) in mlp.layers.iter().zip(dims) {
        if l.weights.dim() != (d, prev) || l.bias.len() != d {
            return Err(Error::InvalidConfig(format!("{what} layer shape {:?} expected {:?}", l.weights.dim(), (d, prev))));
        }
        prev = d;
    }
    Ok(())
}

fn check_input<T: Scalar>(x: &[T], dim: usize, what: &str) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn finite_vec<T: Scalar>(v: Array1<T>, what: &str) -> Result<Vec<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(v.to_vec())
}

/// Overwrites every code used at most `threshold` times in the current batch
/// with the residual its level saw for a uniformly drawn batch element.
/// Clears the usage tallies and returns the number of resets.
pub fn reset_dead_codes<T: Scalar, R: Rng + ?Sized>(
    codebooks: &mut [Codebook<T>],
    level_residuals: &[Array2<T>],
    threshold: u32,
    rng: &mut R,
) -> Result<usize> {
    let n = level_residuals.first().map_or(0, |r| r.nrows());
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut resets = 0;
    for (cb, res) in codebooks.iter_mut().zip(level_residuals) {
        for k in 0..cb.size() {
            if cb.usage_counts[k] <= threshold {
                let pick = rng.random_range(0..n);
                cb.vectors.row_mut(k).assign(&res.row(pick));
                resets += 1;
            }
        }
        cb.usage_counts.iter_mut().for_each(|c| *c = 0);
    }
    Ok(resets)
}

/// Seeds each level's codebook with residuals of distinct batch elements;
/// small batches are padded with jittered copies.
fn init_codebooks_from_batch<T: Scalar, R: Rng + ?Sized>(
    codebooks: &mut [Codebook<T>],
    z: &Array2<T>,
    rng: &mut R,
) {
    let n = z.nrows();
    let mut residual = z.clone();
    for cb in codebooks.iter_mut() {
        let k = cb.size();
        let picks: Vec<usize> = if n >= k {
            index::sample(rng, n, k).into_vec()
        } else {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p.extend((n..k).map(|_| rng.random_range(0..n)));
            p
        };
        for (slot, &src) in picks.iter().enumerate() {
            cb.vectors.row_mut(slot).assign(&residual.row(src));
            if slot >= n {
                for v in cb.vectors.row_mut(slot).iter_mut() {
                    *v += T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * 1e-3);
                }
            }
        }
        for mut row in residual.axis_iter_mut(Axis(0)) {
            let c = cb.nearest(row.as_slice().expect("standard layout"));
            row -= &cb.vector(c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub resets: bool,
    /// Initialize codebooks from the first batch's residuals.
    pub data_init: bool,
    /// Number of trailing batches used for the utilization statistic.
    pub utilization_window: usize,
}

impl TrainOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, seed, resets: true, data_init: true, utilization_window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub recon_loss: f64,
    pub rqvae_loss: f64,
    pub total_loss: f64,
    /// Fraction of codes used per level over the trailing window.
    pub utilization: Vec<f64>,
    pub resets: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn final_utilization(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.utilization.as_slice())
    }

    pub fn to_tsv(&self, num_levels: usize) -> String {
        let mut s = String::from("step\trecon_loss\trqvae_loss\ttotal_loss");
        for l in 1..=num_levels {
            let _ = write!(s, "\tutil_l{l}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}\t{}\t{}\t{}", r.step, r.recon_loss, r.rqvae_loss, r.total_loss);
            for u in &r.utilization {
                let _ = write!(s, "\t{u}");
            }
            s.push('\n');
        }
        s
    }
}

/// Owns a mutable model plus optimizer and RNG state.
#[derive(Debug, Clone)]
pub struct RqVaeTrainer<T: Scalar> {
    model: RqVaeModel<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    options: TrainOptions,
    initialized: bool,
    steps: usize,
    window: VecDeque<Vec<Vec<bool>>>,
}

impl<T: Scalar> RqVaeTrainer<T> {
    pub fn new(model: RqVaeModel<T>, options: TrainOptions) -> Result<Self> {
        model.ensure_mutable()?;
        let adam = Adam::new(AdamConfig::with_lr(model.config.learning_rate));
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(11);
        Ok(Self {
            initialized: !options.data_init,
            model,
            adam,
            rng,
            options,
            steps: 0,
            window: VecDeque::new(),
        })
    }

    pub fn model(&self) -> &RqVaeModel<T> {
        &self.model
    }

    pub fn into_model(self) -> RqVaeModel<T> {
        self.model
    }

    /// Per-level fraction of codes used at least once over the trailing window.
    pub fn utilization(&self) -> Vec<f64> {
        let k = self.model.config.codebook_size;
        (0..self.model.config.num_levels)
            .map(|l| {
                let used = (0..k).filter(|&c| self.window.iter().any(|w| w[l][c])).count();
                used as f64 / k as f64
            })
            .collect()
    }

    pub fn train_step(&mut self, batch: ArrayView2<T>) -> Result<StepRecord> {
        self.model.ensure_mutable()?;
        if batch.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if !self.initialized {
            let z = self.model.encode_batch(batch)?;
            init_codebooks_from_batch(&mut self.model.codebooks, &z, &mut self.rng);
            self.initialized = true;
        }
        let (grads, fwd) = self.model.batch_gradients(batch)?;
        for row in &fwd.codes {
            for (l, &c) in row.iter().enumerate() {
                self.model.codebooks[l].usage_counts[c] += 1;
            }
        }
        let used: Vec<Vec<bool>> =
            self.model.codebooks.iter().map(|cb| cb.usage_counts.iter().map(|&u| u > 0).collect()).collect();

        let params = self.model.param_slices_mut()?;
        self.adam.step(params, grads.slices());

        let resets = if self.options.resets {
            reset_dead_codes(&mut self.model.codebooks, &fwd.residuals, self.model.config.reset_threshold, &mut self.rng)?
        } else {
            for cb in &mut self.model.codebooks {
                cb.usage_counts.iter_mut().for_each(|c| *c = 0);
            }
            0
        };

        self.window.push_back(used);
        while self.window.len() > self.options.utilization_window.max(1) {
            self.window.pop_front();
        }
        self.steps += 1;
        let to_f64 = |v: T| v.to_f64().unwrap_or(f64::NAN);
        Ok(StepRecord {
            step: self.steps,
            recon_loss: to_f64(fwd.losses.recon),
            rqvae_loss: to_f64(fwd.losses.rqvae),
            total_loss: to_f64(fwd.losses.total),
            utilization: self.utilization(),
            resets,
        })
    }
}

/// Trains for `options.steps` mini-batches, reshuffling the rows of `data`
/// every epoch. Batches that would be short at the end of an epoch are dropped.
pub fn train<T: Scalar>(model: RqVaeModel<T>, data: ArrayView2<T>, options: TrainOptions) -> Result<(RqVaeModel<T>, TrainingLog)> {
    let n = data.nrows();
    if n == 0 {
        return Err(Error::Empty("training data"));
    }
    let batch = model.config.batch_size.min(n);
    let mut trainer = RqVaeTrainer::new(model, options)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(options.seed);
    shuffle_rng.set_stream(12);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut log = TrainingLog::default();
    for step in 1..=options.steps {
        if cursor + batch > n {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let x = data.select(Axis(0), rows);
        let record = trainer.train_step(x.view()).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
            other => other,
        })?;
        log.records.push(record);
    }
    Ok((trainer.into_model(), log))
}

/// Row-stacks equally sized embeddings into a matrix.
pub fn embedding_matrix<'a, I>(rows: I, dim: usize) -> Result<Array2<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
        }
        flat.extend_from_slice(r);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, dim), flat).expect("shape matches data"))
}

impl RqVaeModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        codec::write_header(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(to_u32(c.input_dim, "input_dim")?)?;
        w.write_u32::<LittleEndian>(to_u32(c.latent_dim, "latent_dim")?)?;
        for dims in [&c.encoder_dims, &c.decoder_dims] {
            w.write_u32::<LittleEndian>(to_u32(dims.len(), "layer count")?)?;
            for &d in dims {
                w.write_u32::<LittleEndian>(to_u32(d, "layer dim")?)?;
            }
        }
        w.write_u32::<LittleEndian>(to_u32(c.num_levels, "num_levels")?)?;
        w.write_u32::<LittleEndian>(to_u32(c.codebook_size, "codebook_size")?)?;
        w.write_f64::<LittleEndian>(c.beta)?;
        w.write_f64::<LittleEndian>(c.learning_rate)?;
        w.write_u32::<LittleEndian>(to_u32(c.batch_size, "batch_size")?)?;
        w.write_u32::<LittleEndian>(c.reset_threshold)?;
        w.write_u8(self.frozen as u8)?;
        for layer in self.encoder.layers.iter().chain(&self.decoder.layers) {
            codec::write_f32s(w, layer.weights.as_slice().expect("standard layout"))?;
            codec::write_f32s(w, layer.bias.as_slice().expect("standard layout"))?;
        }
        for cb in &self.codebooks {
            codec::write_f32s(w, cb.vectors.as_slice().expect("standard layout"))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let u = |r: &mut R| read_u32(r, "checkpoint config").map(|v| v as usize);
        let input_dim = u(r)?;
        let latent_dim = u(r)?;
        let dims = |r: &mut R| -> Result<Vec<usize>> {
            let n = u(r)?;
            if n > 1024 {
                return Err(Error::Corrupt(format!("{n} layers")));
            }
            (0..n).map(|_| u(r)).collect()
        };
        let encoder_dims = dims(r)?;
        let decoder_dims = dims(r)?;
        let config = RqVaeConfig {
            input_dim,
            latent_dim,
            encoder_dims,
            decoder_dims,
            num_levels: u(r)?,
            codebook_size: u(r)?,
            beta: codec::read_f64(r, "checkpoint config")?,
            learning_rate: codec::read_f64(r, "checkpoint config")?,
            batch_size: u(r)?,
            reset_threshold: read_u32(r, "checkpoint config")?,
        };
        config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let frozen = match read_u8(r, "frozen flag")? {
            0 => false,
            1 => true,
            v => return Err(Error::Corrupt(format!("frozen flag {v}"))),
        };
        let read_mlp = |r: &mut R, input: usize, dims: &[usize]| -> Result<Mlp<f32>> {
            let mut mlp = Mlp::zeros(input, dims);
            for layer in &mut mlp.layers {
                let (o, i) = layer.weights.dim();
                layer.weights = Array2::from_shape_vec((o, i), codec::read_f32s(r, o * i, "layer weights")?)
                    .expect("shape matches data");
                layer.bias = Array1::from(codec::read_f32s(r, o, "layer bias")?);
            }
            Ok(mlp)
        };
        let encoder = read_mlp(r, config.input_dim, &config.encoder_dims)?;
        let decoder = read_mlp(r, config.latent_dim, &config.decoder_dims)?;
        let (k, d) = (config.codebook_size, config.latent_dim);
        let codebooks = (1..=config.num_levels)
            .map(|level| {
                let v = codec::read_f32s(r, k * d, "codebook")?;
                Ok(Codebook::new(level, Array2::from_shape_vec((k, d), v).expect("shape matches data")))
            })
            .collect::<Result<Vec<_>>>()?;
        codec::expect_eof(r)?;
        let mut model = Self::from_parts(config, encoder, decoder, codebooks)?;
        model.frozen = frozen;
        Ok(model)
    }
}
