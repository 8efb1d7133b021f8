use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semid")).current_dir(dir).args(args).output().expect("spawn semid")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = semid(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL_DATA: &[&str] = &["gen-data", "--out-dir", "data", "--num-items", "600", "--events-per-day", "200", "--num-days", "4"];
const SMALL_RQVAE: &[&str] = &["--steps", "30", "--latent-dim", "8", "--codebook-size", "8", "--batch-size", "64"];

fn small_pipeline(dir: &Path, manifest: bool) {
    let mut gen = SMALL_DATA.to_vec();
    let mut train = vec!["train-rqvae", "--corpus", "data/corpus.bin", "--out", "model.bin"];
    train.extend_from_slice(SMALL_RQVAE);
    let mut enc = vec!["encode", "--model", "model.bin", "--corpus", "data/corpus.bin", "--out", "sids.bin"];
    if manifest {
        for v in [&mut gen, &mut train, &mut enc] {
            v.extend_from_slice(&["--manifest", "manifest.txt"]);
        }
    }
    ok(dir, &gen);
    ok(dir, &train);
    ok(dir, &enc);
}

#[test]
fn gen_data_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), SMALL_DATA);
    assert!(out.contains("items            600"));
    assert!(out.contains("click rate"));
    assert!(dir.path().join("data/corpus.bin").exists());
    assert!(dir.path().join("data/interactions.bin").exists());
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&semid(dir.path(), &["gen-data", "--no-such-flag"])), 2);
    assert_eq!(code(&semid(dir.path(), &["frobnicate"])), 2);
    // parses, but the configuration is invalid
    assert_eq!(code(&semid(dir.path(), &["gen-data", "--out-dir", "d", "--sigmas", "1,2,3,4"])), 2);
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = semid(dir.path(), &["train-rqvae", "--corpus", "missing.bin", "--out", "m.bin"]);
    assert_eq!(code(&out), 3);
    fs::write(dir.path().join("garbage.bin"), b"not a corpus").unwrap();
    let out = semid(dir.path(), &["train-rqvae", "--corpus", "garbage.bin", "--out", "m.bin"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn non_finite_training_exits_4_with_step() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SMALL_DATA);
    let mut args = vec!["train-rqvae", "--corpus", "data/corpus.bin", "--out", "m.bin"];
    args.extend_from_slice(SMALL_RQVAE);
    args.extend_from_slice(&["--learning-rate", "1e30"]);
    let out = semid(dir.path(), &args);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

#[test]
fn stale_manifest_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path(), true);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("sid_map=sids.bin"));
    assert!(manifest.contains("rqvae_checkpoint.sha256="));

    let analyze = ["analyze-trie", "--corpus", "data/corpus.bin", "--sid-map", "sids.bin", "--out", "t.tsv", "--manifest", "manifest.txt"];
    ok(dir.path(), &analyze);
    let mut bytes = fs::read(dir.path().join("model.bin")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(dir.path().join("model.bin"), bytes).unwrap();
    let out = semid(dir.path(), &analyze);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.bin"));
}

#[test]
fn encode_reports_compression_ratio() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path(), false);
    let out = ok(dir.path(), &["encode", "--model", "model.bin", "--corpus", "data/corpus.bin", "--out", "s2.bin"]);
    assert!(out.contains("compression ratio 128x"), "{out}");
    assert_eq!(fs::read(dir.path().join("sids.bin")).unwrap(), fs::read(dir.path().join("s2.bin")).unwrap());
}

#[test]
fn analyze_and_experiment_write_tsv() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path(), false);
    ok(dir.path(), &["analyze-trie", "--corpus", "data/corpus.bin", "--sid-map", "sids.bin", "--out", "trie.tsv"]);
    let trie = fs::read_to_string(dir.path().join("trie.tsv")).unwrap();
    assert_eq!(trie.lines().count(), 5);

    fs::write(
        dir.path().join("exp.conf"),
        "corpus = data/corpus.bin\nsid_map = sids.bin\ninteractions = data/interactions.bin\n\
         codebook_size = 8\nseeds = 1,2\nhidden = 8\ncompare = sid_bigram_sum vs vid_random_hash@matched\n",
    )
    .unwrap();
    ok(dir.path(), &["run-experiment", "--config", "exp.conf", "--out-dir", "exp"]);
    let runs = fs::read_to_string(dir.path().join("exp/runs.tsv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2);
    let summary = fs::read_to_string(dir.path().join("exp/summary.tsv")).unwrap();
    assert!(summary.contains("sid_bigram_sum\tvid_random_hash@192\t2\t192\t192"), "{summary}");

    fs::write(dir.path().join("bad.conf"), "corpus = data/corpus.bin\ncompare = sid_bigram_sum vs nonsense\n").unwrap();
    assert_eq!(code(&semid(dir.path(), &["run-experiment", "--config", "bad.conf", "--out-dir", "x"])), 2);
}

#[test]
fn stability_identical_snapshots_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SMALL_DATA);
    let mut args = vec![
        "stability-study",
        "--early",
        "data/corpus.bin",
        "--later",
        "data/corpus.bin",
        "--out-dir",
        "stab",
        "--seeds",
        "1,2",
        "--train-days",
        "3",
        "--events-per-day",
        "200",
    ];
    args.extend_from_slice(SMALL_RQVAE);
    ok(dir.path(), &args);
    let d = dir.path().join("stab");
    assert_eq!(fs::read(d.join("rqvae_v0.bin")).unwrap(), fs::read(d.join("rqvae_v1.bin")).unwrap());
    let runs = fs::read_to_string(d.join("stability_runs.tsv")).unwrap();
    for line in runs.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[1], f[2], "{line}");
        assert_eq!(f[4], f[5], "{line}");
    }
}

#[test]
fn stability_encodes_items_unseen_by_v0_and_rejects_unrelated_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = SMALL_DATA.to_vec();
    gen.extend_from_slice(&["--drift-fraction", "0.2"]);
    ok(dir.path(), &gen);
    let mut args = vec![
        "stability-study",
        "--early",
        "data/corpus.bin",
        "--later",
        "data/corpus_later.bin",
        "--out-dir",
        "stab",
        "--seeds",
        "1",
        "--train-days",
        "3",
        "--events-per-day",
        "200",
    ];
    args.extend_from_slice(SMALL_RQVAE);
    ok(dir.path(), &args);
    assert!(dir.path().join("stab/sids_v0.bin").exists());

    ok(dir.path(), &["gen-data", "--out-dir", "other", "--seed", "99", "--num-items", "600", "--num-days", "2", "--events-per-day", "10"]);
    args[2] = "other/corpus.bin";
    assert_eq!(code(&semid(dir.path(), &args)), 2);
}
