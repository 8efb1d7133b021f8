#[path = "common/oracles.rs"]
mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semid::corpus::{generate_corpus, HierarchyGenConfig};
use semid::rqvae::{embedding_matrix, train, RqVaeConfig, RqVaeModel, TrainOptions};
use semid::semantic_id::*;
use semid::Error;

use oracles::{all_pairs_prefix_similarity, shift_or_pack};

#[test]
fn pack_round_trips_over_random_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bits in [8u32, 16] {
        for _ in 0..10_000 {
            let levels = rng.random_range(1..=64 / bits as usize);
            let codes: Vec<u32> = (0..levels).map(|_| rng.random_range(0..1u32 << bits)).collect();
            let sid = SemanticId::new(codes.clone(), 1 << bits).unwrap();
            let packed = sid.pack(bits).unwrap();
            assert_eq!(packed.0, shift_or_pack(&codes, bits));
            assert_eq!(SemanticId::unpack(packed, levels, bits).unwrap(), sid);
        }
    }
}

#[test]
fn worked_example_packs_to_shift_or_value() {
    let sid = SemanticId::new(vec![1, 4, 5, 2], 64).unwrap();
    let packed = sid.pack(16).unwrap();
    assert_eq!(packed.0, (1u64 << 48) | (4 << 32) | (5 << 16) | 2);
    assert_eq!(packed.0, shift_or_pack(&[1, 4, 5, 2], 16));
    assert_eq!(storage_compression_ratio(256, 4), 128.0);
}

#[test]
fn semantic_ids_need_a_frozen_model() {
    let config = RqVaeConfig { input_dim: 8, encoder_dims: vec![16, 64], decoder_dims: vec![16, 8], ..RqVaeConfig::default() };
    let model = RqVaeModel::<f32>::new(config, 0).unwrap();
    assert!(matches!(assign_semantic_id(&model, &[0.0; 8]), Err(Error::NotFrozen)));
    let model = model.freeze();
    let a = assign_semantic_id(&model, &[0.5; 8]).unwrap();
    assert_eq!(a, assign_semantic_id(&model, &[0.5; 8]).unwrap());
    assert_eq!(a.num_levels(), 4);
}

#[test]
fn prefix_report_agrees_with_all_pairs_scan() {
    let corpus_config = HierarchyGenConfig { num_items: 2000, ..HierarchyGenConfig::default() };
    let items = generate_corpus(&corpus_config, 2).unwrap();
    let data = embedding_matrix(items.iter().map(|i| i.embedding.as_slice()), 256).unwrap();
    let model = RqVaeModel::<f32>::new(RqVaeConfig::default(), 3).unwrap();
    let (model, _) = train(model, data.view(), TrainOptions::new(150, 3)).unwrap();
    let model = model.freeze();
    let sids: Vec<SemanticId> = items.iter().map(|i| assign_semantic_id(&model, &i.embedding).unwrap()).collect();
    let pairs: Vec<(&[f32], &SemanticId)> = items.iter().zip(&sids).map(|(i, s)| (i.embedding.as_slice(), s)).collect();
    let rows = prefix_similarity_report(&pairs, usize::MAX, 0).unwrap();

    let embeddings: Vec<&[f32]> = items.iter().map(|i| i.embedding.as_slice()).collect();
    let codes: Vec<Vec<u32>> = sids.iter().map(|s| s.codes().to_vec()).collect();
    for row in &rows {
        let oracle = all_pairs_prefix_similarity(&embeddings, &codes, row.prefix_len);
        match (row.avg_cos_sim, oracle) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "prefix {}: {a} vs {b}", row.prefix_len),
            (a, b) => assert_eq!(a, b),
        }
    }
    assert!(rows.windows(2).all(|w| w[0].p50_size >= w[1].p50_size));
}

#[test]
fn sid_map_covers_every_item_and_round_trips() {
    let items = generate_corpus(&HierarchyGenConfig { num_items: 300, embedding_dim: 16, ..HierarchyGenConfig::default() }, 1).unwrap();
    let config = RqVaeConfig {
        input_dim: 16,
        latent_dim: 8,
        encoder_dims: vec![16, 8],
        decoder_dims: vec![16, 16],
        codebook_size: 16,
        ..RqVaeConfig::default()
    };
    let model = RqVaeModel::<f32>::new(config, 1).unwrap().freeze();
    let map = SidMap::build(&model, &items, 16).unwrap();
    assert_eq!(map.len(), items.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sids.bin");
    map.save(&path).unwrap();
    let back = SidMap::load(&path).unwrap();
    assert_eq!(back, map);
    let unpacked = back.unpack_all().unwrap();
    for item in &items {
        assert_eq!(unpacked[&item.id], assign_semantic_id(&model, &item.embedding).unwrap());
    }
}
