use semid::corpus::{generate_corpus, HierarchyGenConfig};
use semid::rqvae::*;
use semid::Error;

fn setup() -> (ndarray::Array2<f32>, RqVaeConfig) {
    let corpus = generate_corpus(&HierarchyGenConfig { num_items: 3000, embedding_dim: 64, ..HierarchyGenConfig::default() }, 5).unwrap();
    let data = embedding_matrix(corpus.iter().map(|i| i.embedding.as_slice()), 64).unwrap();
    let config = RqVaeConfig {
        input_dim: 64,
        latent_dim: 16,
        encoder_dims: vec![64, 16],
        decoder_dims: vec![64, 64],
        codebook_size: 32,
        ..RqVaeConfig::default()
    };
    (data, config)
}

#[test]
fn resets_keep_codebooks_in_use() {
    let (data, config) = setup();
    let run = |resets| {
        let model = RqVaeModel::<f32>::new(config.clone(), 2).unwrap();
        let (_, log) = train(model, data.view(), TrainOptions { resets, ..TrainOptions::new(200, 2) }).unwrap();
        log.final_utilization().unwrap()[0]
    };
    let with = run(true);
    let without = run(false);
    assert!(with >= 0.8, "{with}");
    assert!(without < with, "{without} vs {with}");
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (data, config) = setup();
    let go = || {
        let model = RqVaeModel::<f32>::new(config.clone(), 4).unwrap();
        let (model, log) = train(model, data.view(), TrainOptions::new(120, 4)).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        (bytes, log)
    };
    let (a, log) = go();
    let (b, log_b) = go();
    assert_eq!(a, b);
    assert_eq!(log.to_tsv(4), log_b.to_tsv(4));
    let first = log.records[..10].iter().map(|r| r.total_loss).sum::<f64>();
    let last = log.records[log.records.len() - 10..].iter().map(|r| r.total_loss).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_file_round_trip_and_freeze() {
    let (data, config) = setup();
    let model = RqVaeModel::<f32>::new(config, 6).unwrap();
    let (model, _) = train(model, data.view(), TrainOptions::new(20, 6)).unwrap();
    let model = model.freeze();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let mut loaded = RqVaeModel::load(&path).unwrap();
    assert!(loaded.is_frozen());
    assert_eq!(loaded, model);
    for row in data.rows().into_iter().take(50) {
        assert_eq!(loaded.codes(row.as_slice().unwrap()).unwrap(), model.codes(row.as_slice().unwrap()).unwrap());
    }
    assert!(matches!(loaded.param_slices_mut(), Err(Error::Frozen)));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(RqVaeModel::read_from(&mut bytes.as_slice()), Err(Error::Truncated(_))));
}
