#[path = "common/oracles.rs"]
mod oracles;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semid::nn::{Dense, Mlp};
use semid::rqvae::{quantize, Codebook, RqVaeConfig, RqVaeModel};

use oracles::brute_force_codes;

fn random_codebooks(rng: &mut ChaCha8Rng, levels: usize, k: usize, dim: usize) -> Vec<Codebook<f32>> {
    (1..=levels)
        .map(|l| {
            let scale = 1.0 / l as f64;
            Codebook::new(l, Array2::from_shape_simple_fn((k, dim), || (rng.sample::<f64, _>(StandardNormal) * scale) as f32))
        })
        .collect()
}

#[test]
fn greedy_codes_equal_brute_force_on_random_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let codebooks = random_codebooks(&mut rng, 4, 16, 8);
    for _ in 0..1000 {
        let z: Vec<f32> = (0..8).map(|_| rng.sample::<f32, _>(StandardNormal) * 1.5).collect();
        let q = quantize(&codebooks, &z).unwrap();
        assert_eq!(q.codes, brute_force_codes(&codebooks, &z));
    }
}

#[test]
fn duplicated_vectors_resolve_to_lowest_index() {
    let v = array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0]];
    let cb = vec![Codebook::new(1, v)];
    assert_eq!(quantize(&cb, &[0.9, 0.1]).unwrap().codes, vec![0]);
    assert_eq!(brute_force_codes(&cb, &[0.9, 0.1]), vec![0]);
}

#[test]
fn residuals_telescope() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let codebooks = random_codebooks(&mut rng, 4, 16, 8);
    for _ in 0..1000 {
        let z: Vec<f32> = (0..8).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let q = quantize(&codebooks, &z).unwrap();
        // subtracting the selected vectors in level order reproduces the final residual exactly
        let mut folded = z.clone();
        for (cb, &c) in codebooks.iter().zip(&q.codes) {
            for (f, e) in folded.iter_mut().zip(cb.vectors.row(c)) {
                *f -= e;
            }
        }
        let last = q.residuals.last().unwrap();
        assert_eq!(folded.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), last.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for ((zv, zh), r) in z.iter().zip(&q.quantized_latent).zip(last) {
            assert!((zv - zh - r).abs() < 1e-5);
        }
        assert_eq!(q.residuals.len(), codebooks.len() + 1);
        assert_eq!(q.residuals[0], z);
    }
}

#[test]
fn total_loss_is_reconstruction_plus_quantization() {
    let config = RqVaeConfig { input_dim: 16, latent_dim: 4, encoder_dims: vec![8, 4], decoder_dims: vec![8, 16], codebook_size: 8, ..RqVaeConfig::default() };
    let model = RqVaeModel::<f32>::new(config.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let x: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = model.loss(&x).unwrap();
        let sum = l.recon + l.rqvae;
        assert!(((l.total - sum) / sum).abs() <= 1e-6);

        let x_hat = l.result.reconstruction.as_ref().unwrap();
        let recon: f64 = x.iter().zip(x_hat).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        assert!((recon - l.recon as f64).abs() <= 1e-5 * recon.max(1e-6));
        let mut d = 0f64;
        for (lvl, &c) in l.result.codes.iter().enumerate() {
            let e = model.codebooks()[lvl].vector(c);
            d += l.result.residuals[lvl].iter().zip(e.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        let expected = (config.beta + 1.0) * d;
        assert!((expected - l.rqvae as f64).abs() <= 1e-5 * expected.max(1e-6));
    }
}

#[test]
fn hand_case_gives_one_and_a_quarter() {
    let config = RqVaeConfig {
        input_dim: 2,
        latent_dim: 2,
        encoder_dims: vec![2],
        decoder_dims: vec![2],
        num_levels: 1,
        codebook_size: 1,
        beta: 0.25,
        ..RqVaeConfig::default()
    };
    let identity = || {
        let mut d = Dense::<f32>::zeros(2, 2);
        d.weights = array![[1.0, 0.0], [0.0, 1.0]];
        d.bias = Array1::zeros(2);
        Mlp { layers: vec![d] }
    };
    let cb = Codebook::new(1, array![[0.0f32, 0.0]]);
    let model = RqVaeModel::from_parts(config, identity(), identity(), vec![cb]).unwrap();
    let l = model.loss(&[1.0, 0.0]).unwrap();
    assert_eq!(l.rqvae, 1.25);
    assert_eq!(l.recon, 1.0);
    assert_eq!(l.total, 2.25);
}
