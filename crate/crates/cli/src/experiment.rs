//! `key=value` experiment configuration for `run-experiment`.
//!
//! ```text
//! corpus = corpus.bin
//! sid_map = sids.bin
//! codebook_size = 64
//! train_days = 9
//! events_per_day = 5000
//! seeds = 1,2,3,4,5
//! dim = 32
//! compare = sid_unigram_sum vs vid_random_hash@matched
//! compare = content_embedding vs vid_random_hash
//! buckets = 15360
//! ```
//!
//! `vid_random_hash@matched` gets as many rows as the variant it is compared
//! with; a bare `vid_random_hash` uses `buckets`.

use std::path::{Path, PathBuf};

use semid::ranking::{RankerSettings, RepresentationConfig, RepresentationKind, DEFAULT_EMBEDDING_DIM};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub sid_map: Option<PathBuf>,
    /// Shared click log; when absent, one log per seed is generated.
    pub interactions: Option<PathBuf>,
    pub codebook_size: usize,
    pub train_days: u32,
    pub events_per_day: usize,
    pub seeds: Vec<u64>,
    pub dim: usize,
    pub hash_seed: u64,
    pub buckets: Option<usize>,
    pub settings: RankerSettings,
    pub comparisons: Vec<(String, String)>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("bad value for {key}: {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut c = ExperimentConfig {
            corpus: PathBuf::new(),
            sid_map: None,
            interactions: None,
            codebook_size: 64,
            train_days: 9,
            events_per_day: 5000,
            seeds: vec![1, 2, 3, 4, 5],
            dim: DEFAULT_EMBEDDING_DIM,
            hash_seed: 0,
            buckets: None,
            settings: RankerSettings::default(),
            comparisons: Vec::new(),
        };
        let mut have_corpus = false;
        let path = |v: &str| {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "corpus" => {
                    c.corpus = path(value);
                    have_corpus = true;
                }
                "sid_map" => c.sid_map = Some(path(value)),
                "interactions" => c.interactions = Some(path(value)),
                "codebook_size" => c.codebook_size = parse(key, value)?,
                "train_days" => c.train_days = parse(key, value)?,
                "events_per_day" => c.events_per_day = parse(key, value)?,
                "seeds" => c.seeds = parse_list(key, value)?,
                "dim" => c.dim = parse(key, value)?,
                "hash_seed" => c.hash_seed = parse(key, value)?,
                "buckets" => c.buckets = Some(parse(key, value)?),
                "hidden" => c.settings.hidden = parse_list(key, value)?,
                "learning_rate" => c.settings.learning_rate = parse(key, value)?,
                "batch_size" => c.settings.batch_size = parse(key, value)?,
                "compare" => {
                    let (v, b) = value
                        .split_once(" vs ")
                        .ok_or_else(|| CliError::Usage(format!("line {}: expected `compare = A vs B`", n + 1)))?;
                    c.comparisons.push((v.trim().to_string(), b.trim().to_string()));
                }
                other => return Err(CliError::Usage(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        if !have_corpus {
            return Err(CliError::Usage("experiment config needs `corpus`".into()));
        }
        if c.comparisons.is_empty() {
            return Err(CliError::Usage("experiment config needs at least one `compare` line".into()));
        }
        if c.seeds.is_empty() || c.train_days == 0 || c.dim == 0 {
            return Err(CliError::Usage("seeds, train_days and dim must be non-empty/positive".into()));
        }
        Ok(c)
    }

    fn representation(&self, kind: RepresentationKind) -> RepresentationConfig {
        RepresentationConfig { kind, embedding_dim: self.dim, hash_seed: self.hash_seed }
    }

    /// Resolves the comparison lines against the ID length of the SID map.
    pub fn resolve_comparisons(&self, levels: usize) -> Result<Vec<(RepresentationConfig, RepresentationConfig)>, CliError> {
        let mut out = Vec::new();
        for (v, b) in &self.comparisons {
            let variant = self.kind(v, None, levels)?;
            let baseline = self.kind(b, Some(variant), levels)?;
            out.push((self.representation(variant), self.representation(baseline)));
        }
        Ok(out)
    }

    fn kind(&self, name: &str, partner: Option<RepresentationKind>, levels: usize) -> Result<RepresentationKind, CliError> {
        match name {
            "vid_random_hash" => {
                let buckets = self
                    .buckets
                    .ok_or_else(|| CliError::Usage("bare vid_random_hash needs a `buckets` key".into()))?;
                Ok(RepresentationKind::VidRandomHash { buckets })
            }
            "vid_random_hash@matched" => partner
                .and_then(|p| p.capacity_matched_hash(levels, self.codebook_size))
                .ok_or_else(|| CliError::Usage("vid_random_hash@matched must be compared against a sid kind".into())),
            other => other.parse().map_err(|e: semid::Error| CliError::Usage(e.to_string())),
        }
    }
}
