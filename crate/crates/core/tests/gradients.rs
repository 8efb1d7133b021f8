#[path = "common/oracles.rs"]
mod oracles;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semid::corpus::{generate_corpus, generate_interactions, HierarchyGenConfig, InteractionConfig, ItemId};
use semid::ranking::{ItemFeatures, ItemSources, RankingModel, RepresentationConfig, RepresentationKind};
use semid::rqvae::{RqVaeConfig, RqVaeModel};
use semid::semantic_id::SemanticId;

use oracles::*;

fn tiny_rqvae_config() -> RqVaeConfig {
    RqVaeConfig {
        input_dim: 6,
        latent_dim: 3,
        encoder_dims: vec![5, 3],
        decoder_dims: vec![5, 6],
        num_levels: 2,
        codebook_size: 4,
        batch_size: 8,
        ..RqVaeConfig::default()
    }
}

#[test]
fn rqvae_gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut model = RqVaeModel::<f64>::new(tiny_rqvae_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < 8 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            if rqvae_kink_margin(&model, &x) > 1e-2 {
                rows.push(x);
            }
        }
        let batch = Array2::from_shape_vec((8, 6), rows.concat()).unwrap();
        let (grads, _) = model.batch_gradients(batch.view()).unwrap();
        let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
        let anchor = rqvae_anchor(&model, &rows);
        let (worst, n) = finite_difference_check(
            &mut model,
            &analytic,
            |m| m.param_slices_mut().unwrap(),
            |m| rqvae_surrogate_loss(m, &rows, &anchor),
        );
        assert_eq!(n, model.num_params());
        assert!(worst < FD_TOLERANCE, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn ranking_gradients_match_finite_differences() {
    let config = HierarchyGenConfig {
        branching: vec![2, 2, 2],
        embedding_dim: 6,
        num_items: 60,
        num_days: 3,
        ..HierarchyGenConfig::default()
    };
    let corpus = generate_corpus(&config, 3).unwrap();
    let sids: HashMap<ItemId, SemanticId> = corpus
        .iter()
        .map(|i| {
            let codes = i.cluster_path.iter().map(|&c| c as u32).chain([i.id.0 % 4]).collect();
            (i.id, SemanticId::new(codes, 4).unwrap())
        })
        .collect();
    let events = generate_interactions(&corpus, &InteractionConfig::new(3, 12), 8).unwrap();
    let batch: Vec<_> = events.iter().take(12).collect();
    let sources = ItemSources { corpus: &corpus, sids: Some(&sids), codebook_size: 4 };
    for kind in [
        RepresentationKind::VidRandomHash { buckets: 5 },
        RepresentationKind::ContentEmbedding,
        RepresentationKind::SidUnigramSum,
        RepresentationKind::SidBigramSum,
    ] {
        let rep = RepresentationConfig { kind, embedding_dim: 4, hash_seed: 1 };
        let features = Arc::new(ItemFeatures::build(&rep, &sources).unwrap());
        let mut model = RankingModel::<f64>::new(rep, features, &[4], 2).unwrap();
        let (grads, loss) = model.batch_gradients(&batch).unwrap();
        assert!((loss - ranking_bce(&model, &batch)).abs() < 1e-12);
        let analytic = grads.to_dense(&model);
        let (worst, _) = finite_difference_check(
            &mut model,
            &analytic,
            |m| m.param_slices_mut(),
            |m| ranking_bce(m, &batch),
        );
        assert!(worst < FD_TOLERANCE, "{kind}: worst relative error {worst}");
    }
}
