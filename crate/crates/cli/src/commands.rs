use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use semid::corpus::{
    generate_drift_snapshots, generate_interactions, read_corpus, read_interactions, write_corpus,
    write_interactions, CorpusItem, HierarchyGenConfig, InteractionConfig, InteractionEvent, ItemId,
};
use semid::ranking::{
    compare_representations, run_once, runs_tsv, summary_tsv, Comparison, ExperimentSpec, InteractionSource,
    ItemSources, RankerSettings, RepresentationConfig, RepresentationKind, RunRecord,
};
use semid::rqvae::{embedding_matrix, train, RqVaeConfig, RqVaeModel, TrainOptions};
use semid::semantic_id::{prefix_similarity_report, report_tsv, storage_compression_ratio, SemanticId, SidMap};
use semid::stats::{mean_std, paired_t_test};

use crate::experiment::ExperimentConfig;
use crate::manifest::Tracker;
use crate::{AnalyzeArgs, CliError, EncodeArgs, ExperimentArgs, GenDataArgs, RqVaeArgs, StabilityArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

/// Leaves whose centroids point this far apart are not the same cluster.
const MIN_SHARED_CENTROID_COSINE: f64 = 0.5;

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_corpus(path: &Path, tracker: &Tracker) -> Result<Vec<CorpusItem>, CliError> {
    tracker.input(path)?;
    let items = read_corpus(path).map_err(|e| with_path(path, e))?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{}: corpus is empty", path.display())));
    }
    Ok(items)
}

fn with_path(path: &Path, e: semid::Error) -> CliError {
    match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn embedding_dim(items: &[CorpusItem]) -> usize {
    items.first().map_or(0, |i| i.embedding.len())
}

fn click_rate(events: &[InteractionEvent]) -> f64 {
    events.iter().filter(|e| e.clicked).count() as f64 / events.len().max(1) as f64
}

fn cold_start_events(items: &[CorpusItem], events: &[InteractionEvent]) -> usize {
    let arrival: HashMap<ItemId, u32> = items.iter().map(|i| (i.id, i.arrival_day)).collect();
    events.iter().filter(|e| arrival.get(&e.candidate) == Some(&e.day) && e.day > 0).count()
}

pub fn gen_data(args: &GenDataArgs) -> CmdResult {
    let config = HierarchyGenConfig {
        depth: args.branching.len(),
        branching: args.branching.clone(),
        noise_sigmas: args.sigmas.clone(),
        embedding_dim: args.embedding_dim,
        num_items: args.num_items,
        power_law_alpha: args.power_law_alpha,
        num_days: args.num_days,
        new_items_per_day_fraction: args.new_fraction,
    };
    config.validate()?;
    let interactions = InteractionConfig::new(args.num_days, args.events_per_day);
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    create_dir(&args.out_dir)?;

    let (early, later) = generate_drift_snapshots(&config, args.seed, args.drift_fraction.unwrap_or(0.0))?;
    let mut outputs = vec![("corpus", "interactions", early)];
    if args.drift_fraction.is_some() {
        outputs.push(("corpus_later", "interactions_later", later));
    }
    for (corpus_key, events_key, items) in outputs {
        let events = generate_interactions(&items, &interactions, args.seed)?;
        let corpus_path = args.out_dir.join(format!("{corpus_key}.bin"));
        let events_path = args.out_dir.join(format!("{events_key}.bin"));
        write_corpus(&items, &corpus_path).map_err(|e| with_path(&corpus_path, e))?;
        write_interactions(&events, &events_path).map_err(|e| with_path(&events_path, e))?;
        tracker.output(corpus_key, &corpus_path)?;
        tracker.output(events_key, &events_path)?;
        let leaves: HashSet<&[u16]> = items.iter().map(|i| i.cluster_path.as_slice()).collect();
        println!("{}:", corpus_path.display());
        println!("  items            {}", items.len());
        println!("  embedding dim    {}", args.embedding_dim);
        println!("  occupied leaves  {}", leaves.len());
        println!("  days             {}", args.num_days);
        println!("  events           {}", events.len());
        println!("  click rate       {:.4}", click_rate(&events));
        println!("  cold-start events {}", cold_start_events(&items, &events));
    }
    tracker.set("seed", args.seed);
    if let Some(f) = args.drift_fraction {
        tracker.set("drift_fraction", f);
    }
    tracker.finish()
}

fn rqvae_config(args: &RqVaeArgs, input_dim: usize) -> RqVaeConfig {
    RqVaeConfig {
        input_dim,
        latent_dim: args.latent_dim,
        encoder_dims: vec![256, 128, args.latent_dim],
        decoder_dims: vec![args.latent_dim, 128, input_dim],
        num_levels: args.levels,
        codebook_size: args.codebook_size,
        beta: args.beta,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        reset_threshold: args.reset_threshold,
    }
}

fn train_frozen(
    items: &[CorpusItem],
    args: &RqVaeArgs,
    seed: u64,
) -> Result<(RqVaeModel<f32>, semid::rqvae::TrainingLog), CliError> {
    let dim = embedding_dim(items);
    let config = rqvae_config(args, dim);
    config.validate()?;
    let data = embedding_matrix(items.iter().map(|i| i.embedding.as_slice()), dim)?;
    let model = RqVaeModel::<f32>::new(config, seed)?;
    let mut options = TrainOptions::new(args.steps, seed);
    options.resets = !args.no_resets;
    let (model, log) = train(model, data.view(), options)?;
    Ok((model.freeze(), log))
}

pub fn train_rqvae(args: &TrainArgs) -> CmdResult {
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    let items = load_corpus(&args.corpus, &tracker)?;
    let (model, log) = train_frozen(&items, &args.rqvae, args.seed)?;
    model.save(&args.out).map_err(|e| with_path(&args.out, e))?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.tsv"));
    write_text(&log_path, &log.to_tsv(args.rqvae.levels))?;

    if let Some(last) = log.records.last() {
        println!(
            "step {}: recon {:.6} rqvae {:.6} total {:.6}",
            last.step, last.recon_loss, last.rqvae_loss, last.total_loss
        );
    }
    for (l, u) in log.final_utilization().unwrap_or(&[]).iter().enumerate() {
        println!("level {} utilization {:.1}%", l + 1, 100.0 * u);
    }
    println!("checkpoint {}", args.out.display());
    println!("training log {}", log_path.display());
    tracker.output("rqvae_checkpoint", &args.out)?;
    tracker.output("rqvae_log", &log_path)?;
    tracker.set("rqvae_seed", args.seed);
    tracker.set("rqvae_steps", args.rqvae.steps);
    tracker.finish()
}

pub fn encode(args: &EncodeArgs) -> CmdResult {
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    tracker.input(&args.model)?;
    let model = RqVaeModel::load(&args.model).map_err(|e| with_path(&args.model, e))?;
    let items = load_corpus(&args.corpus, &tracker)?;
    if embedding_dim(&items) != model.config().input_dim {
        return Err(CliError::Usage(format!(
            "corpus embeddings have dimension {} but the model expects {}",
            embedding_dim(&items),
            model.config().input_dim
        )));
    }
    let map = SidMap::build(&model, &items, args.bits_per_token)?;
    map.save(&args.out).map_err(|e| with_path(&args.out, e))?;
    let dim = embedding_dim(&items);
    println!("encoded {} items into {}-level ids", map.len(), map.num_levels);
    println!(
        "compression ratio {}x ({} bytes of f32 embedding vs 8 bytes per id)",
        storage_compression_ratio(dim, 4),
        dim * 4
    );
    tracker.output("sid_map", &args.out)?;
    tracker.finish()
}

fn load_sids(path: &Path, tracker: &Tracker) -> Result<(SidMap, HashMap<ItemId, SemanticId>), CliError> {
    tracker.input(path)?;
    let map = SidMap::load(path).map_err(|e| with_path(path, e))?;
    let sids = map.unpack_all()?;
    Ok((map, sids))
}

pub fn analyze_trie(args: &AnalyzeArgs) -> CmdResult {
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    let items = load_corpus(&args.corpus, &tracker)?;
    let (_, sids) = load_sids(&args.sid_map, &tracker)?;
    let pairs = items
        .iter()
        .map(|i| sids.get(&i.id).map(|s| (i.embedding.as_slice(), s)).ok_or(semid::Error::UnknownItem(i.id.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = prefix_similarity_report(&pairs, args.max_pairs, args.seed)?;
    let tsv = report_tsv(&rows);
    write_text(&args.out, &tsv)?;
    print!("{tsv}");
    tracker.output("trie_report", &args.out)?;
    tracker.finish()
}

pub fn run_experiment(args: &ExperimentArgs) -> CmdResult {
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    tracker.input(&args.config)?;
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::parse(&text, base)?;

    let items = load_corpus(&config.corpus, &tracker)?;
    let loaded = config.sid_map.as_deref().map(|p| load_sids(p, &tracker)).transpose()?;
    let levels = loaded.as_ref().map_or(0, |(m, _)| m.num_levels as usize);
    let pairs = config.resolve_comparisons(levels)?;
    if loaded.is_none() && pairs.iter().any(|(v, b)| v.kind.ngram_order().is_some() || b.kind.ngram_order().is_some()) {
        return Err(CliError::Usage("sid representations need a `sid_map` in the experiment config".into()));
    }
    let fixed = match &config.interactions {
        Some(p) => {
            tracker.input(p)?;
            Some(read_interactions(p).map_err(|e| with_path(p, e))?)
        }
        None => None,
    };
    let interactions = match &fixed {
        Some(events) => InteractionSource::Fixed(events),
        None => InteractionSource::Generated(InteractionConfig::new(config.train_days + 1, config.events_per_day)),
    };
    let sources = ItemSources {
        corpus: &items,
        sids: loaded.as_ref().map(|(_, s)| s),
        codebook_size: config.codebook_size,
    };
    let spec = ExperimentSpec {
        comparisons: pairs.into_iter().map(|(variant, baseline)| Comparison { variant, baseline }).collect(),
        seeds: config.seeds.clone(),
        interactions,
        settings: config.settings.clone(),
    };
    let result = compare_representations(&sources, &spec)?;

    create_dir(&args.out_dir)?;
    let runs_path = args.out_dir.join("runs.tsv");
    let summary_path = args.out_dir.join("summary.tsv");
    write_text(&runs_path, &runs_tsv(&result.runs))?;
    let summary = summary_tsv(&result.summaries);
    write_text(&summary_path, &summary)?;
    print!("{summary}");
    tracker.output("experiment_config", &args.config)?;
    tracker.output("experiment_runs", &runs_path)?;
    tracker.output("experiment_summary", &summary_path)?;
    tracker.set("experiment_seeds", config.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    tracker.finish()
}

/// Rejects snapshot pairs that do not describe the same hierarchy at two points
/// in time: they must share occupied leaves, and those leaves must sit in the
/// same region of embedding space.
pub fn check_shared_hierarchy(early: &[CorpusItem], later: &[CorpusItem]) -> CmdResult {
    if embedding_dim(early) != embedding_dim(later) {
        return Err(CliError::Usage(format!(
            "snapshots have embedding dimensions {} and {}",
            embedding_dim(early),
            embedding_dim(later)
        )));
    }
    let centroids = |items: &[CorpusItem]| {
        let mut sums: BTreeMap<Vec<u16>, Vec<f64>> = BTreeMap::new();
        for it in items {
            let s = sums.entry(it.cluster_path.clone()).or_insert_with(|| vec![0.0; it.embedding.len()]);
            s.iter_mut().zip(&it.embedding).for_each(|(a, &b)| *a += b as f64);
        }
        sums
    };
    let a = centroids(early);
    let b = centroids(later);
    let shared: Vec<(&Vec<f64>, &Vec<f64>)> = a.iter().filter_map(|(k, v)| b.get(k).map(|w| (v, w))).collect();
    if shared.is_empty() {
        return Err(CliError::Usage("snapshots share no hierarchy leaves".into()));
    }
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny).max(f64::MIN_POSITIVE)
    };
    let mean = shared.iter().map(|(x, y)| cos(x, y)).sum::<f64>() / shared.len() as f64;
    if mean < MIN_SHARED_CENTROID_COSINE {
        return Err(CliError::Usage(format!(
            "snapshots have disjoint hierarchies: shared leaves have mean centroid cosine {mean:.3}"
        )));
    }
    Ok(())
}

fn stability_runs_tsv(v0: &[RunRecord], v1: &[RunRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut s = String::from("seed\tv0_ctr_auc\tv1_ctr_auc\tdelta_ctr_auc\tv0_ctr_1d_auc\tv1_ctr_1d_auc\tnum_eval_events\n");
    for (a, b) in v0.iter().zip(v1) {
        let delta = a.report.ctr_auc.zip(b.report.ctr_auc).map(|(x, y)| y - x);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            a.seed,
            opt(a.report.ctr_auc),
            opt(b.report.ctr_auc),
            opt(delta),
            opt(a.report.ctr_1d_auc),
            opt(b.report.ctr_1d_auc),
            a.report.num_eval_events
        );
    }
    s
}

fn stability_summary_tsv(v0: &[f64], v1: &[f64]) -> String {
    let diffs: Vec<f64> = v0.iter().zip(v1).map(|(a, b)| b - a).collect();
    let (m0, s0) = mean_std(v0);
    let (m1, s1) = mean_std(v1);
    let (md, sd) = mean_std(&diffs);
    let p = paired_t_test(v1, v0);
    let verdict = if p > 0.05 { "comparable" } else { "different" };
    format!(
        "seeds\tv0_ctr_auc_mean\tv0_ctr_auc_std\tv1_ctr_auc_mean\tv1_ctr_auc_std\tdelta_mean\tdelta_std\tt_test_p\tverdict\n\
         {}\t{m0:.6}\t{s0:.6}\t{m1:.6}\t{s1:.6}\t{md:.6}\t{sd:.6}\t{p:.6}\t{verdict}\n",
        v0.len()
    )
}

pub fn stability_study(args: &StabilityArgs) -> CmdResult {
    let mut tracker = Tracker::new(args.manifest.manifest.as_deref())?;
    if args.seeds.is_empty() || args.train_days == 0 {
        return Err(CliError::Usage("need at least one seed and one training day".into()));
    }
    let early = load_corpus(&args.early, &tracker)?;
    let later = load_corpus(&args.later, &tracker)?;
    check_shared_hierarchy(&early, &later)?;
    let fixed = match &args.interactions {
        Some(p) => {
            tracker.input(p)?;
            Some(read_interactions(p).map_err(|e| with_path(p, e))?)
        }
        None => None,
    };
    create_dir(&args.out_dir)?;

    let mut maps = Vec::new();
    for (name, snapshot) in [("v0", &early), ("v1", &later)] {
        let (model, log) = train_frozen(snapshot, &args.rqvae, args.rqvae_seed)?;
        let ckpt: PathBuf = args.out_dir.join(format!("rqvae_{name}.bin"));
        model.save(&ckpt).map_err(|e| with_path(&ckpt, e))?;
        let map = SidMap::build(&model, &later, semid::semantic_id::DEFAULT_BITS_PER_TOKEN)?;
        let map_path = args.out_dir.join(format!("sids_{name}.bin"));
        map.save(&map_path).map_err(|e| with_path(&map_path, e))?;
        let util = log.final_utilization().unwrap_or(&[]);
        println!(
            "{name}: trained on {} items, level utilization {}",
            snapshot.len(),
            util.iter().map(|u| format!("{:.0}%", 100.0 * u)).collect::<Vec<_>>().join(" ")
        );
        tracker.output(&format!("rqvae_{name}"), &ckpt)?;
        tracker.output(&format!("sid_map_{name}"), &map_path)?;
        maps.push(map.unpack_all()?);
    }

    let rep = RepresentationConfig::new(RepresentationKind::SidBigramSum);
    let settings = RankerSettings::default();
    let generated_config = InteractionConfig::new(args.train_days + 1, args.events_per_day);
    let (mut runs0, mut runs1) = (Vec::new(), Vec::new());
    for &seed in &args.seeds {
        let generated;
        let events: &[InteractionEvent] = match &fixed {
            Some(e) => e,
            None => {
                generated = generate_interactions(&later, &generated_config, seed)?;
                &generated
            }
        };
        let eval_day = events.iter().map(|e| e.day).max().unwrap_or(0);
        if eval_day == 0 {
            return Err(CliError::Usage("interaction log needs at least two days".into()));
        }
        for (sids, runs) in maps.iter().zip([&mut runs0, &mut runs1]) {
            let sources = ItemSources {
                corpus: &later,
                sids: Some(sids),
                codebook_size: args.rqvae.codebook_size,
            };
            runs.push(run_once(&sources, &rep, &settings, events, eval_day, seed)?);
        }
    }
    let auc = |runs: &[RunRecord]| -> Result<Vec<f64>, CliError> {
        runs.iter()
            .map(|r| r.report.ctr_auc.ok_or_else(|| CliError::Usage(format!("seed {}: evaluation day has one class", r.seed))))
            .collect()
    };
    let (a0, a1) = (auc(&runs0)?, auc(&runs1)?);
    let runs_path = args.out_dir.join("stability_runs.tsv");
    let summary_path = args.out_dir.join("stability_summary.tsv");
    write_text(&runs_path, &stability_runs_tsv(&runs0, &runs1))?;
    let summary = stability_summary_tsv(&a0, &a1);
    write_text(&summary_path, &summary)?;
    print!("{summary}");
    tracker.output("stability_runs", &runs_path)?;
    tracker.output("stability_summary", &summary_path)?;
    tracker.finish()
}
