//! Synthetic item corpus with a planted concept hierarchy, power-law
//! popularity and day-stamped arrival, plus a click log whose labels follow
//! content similarity.
//!
//! The hierarchy is a tree of cluster centers. Each level adds an isotropic
//! Gaussian offset to its parent's center, leaves add per-item noise, and the
//! result is L2-normalized so cosine similarity equals the dot product.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{self, read_header, read_u16, read_u32, read_u8, to_u32};
use crate::error::{Error, Result};
use crate::nn::{cosine, sigmoid};

pub const CORPUS_MAGIC: &[u8; 4] = b"SQC1";
pub const INTERACTIONS_MAGIC: &[u8; 4] = b"SQI1";
pub const FORMAT_VERSION: u32 = 1;

/// Opaque item identifier. Zero is reserved as the history pad sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ItemId(pub u32);

impl ItemId {
    pub const PAD: ItemId = ItemId(0);

    pub fn is_pad(self) -> bool {
        self == Self::PAD
    }
}

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: ItemId,
    pub embedding: Vec<f32>,
    /// First day on which the item may be recommended.
    pub arrival_day: u32,
    pub popularity_weight: f32,
    /// Ground-truth path through the generator tree. Never shown to models.
    pub cluster_path: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyGenConfig {
    pub depth: usize,
    pub branching: Vec<usize>,
    /// One sigma per tree level plus one for per-item noise, strictly decreasing.
    pub noise_sigmas: Vec<f64>,
    pub embedding_dim: usize,
    pub num_items: usize,
    pub power_law_alpha: f64,
    pub num_days: u32,
    pub new_items_per_day_fraction: f64,
}

impl Default for HierarchyGenConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: vec![8, 16, 8],
            noise_sigmas: vec![1.0, 0.35, 0.12, 0.04],
            embedding_dim: 256,
            num_items: 10_000,
            power_law_alpha: 1.2,
            num_days: 10,
            new_items_per_day_fraction: 0.3,
        }
    }
}

impl HierarchyGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.depth == 0 || self.depth > u8::MAX as usize {
            return bad(format!("depth must be in 1..=255, got {}", self.depth));
        }
        if self.branching.len() != self.depth {
            return bad(format!("branching has {} entries for depth {}", self.branching.len(), self.depth));
        }
        if let Some(b) = self.branching.iter().find(|&&b| b < 2 || b > u16::MAX as usize / 2) {
            return bad(format!("branching entry {b} out of range"));
        }
        if self.noise_sigmas.len() != self.depth + 1 {
            return bad(format!("expected {} noise sigmas, got {}", self.depth + 1, self.noise_sigmas.len()));
        }
        if self.noise_sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("noise sigmas must be finite and non-negative".into());
        }
        if self.noise_sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return bad("noise sigmas must be strictly decreasing".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.num_items == 0 || self.num_items > u32::MAX as usize - 1 {
            return bad(format!("num_items {} out of range", self.num_items));
        }
        if !self.power_law_alpha.is_finite() || self.power_law_alpha <= 0.0 {
            return bad(format!("power_law_alpha must be positive, got {}", self.power_law_alpha));
        }
        if self.num_days == 0 {
            return bad("num_days must be positive".into());
        }
        let f = self.new_items_per_day_fraction;
        if !f.is_finite() || !(0.0..1.0).contains(&f) {
            return bad(format!("new_items_per_day_fraction must be in [0, 1), got {f}"));
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> usize {
        self.branching.iter().product()
    }
}

/// Cluster centers of the generator tree, keyed by path prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyTree {
    dim: usize,
    depth: usize,
    /// `levels[l]` maps each node path of length `l + 1` to its absolute center.
    levels: Vec<BTreeMap<Vec<u16>, Vec<f64>>>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    let scale = sigma / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl HierarchyTree {
    pub fn generate(config: &HierarchyGenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 1);
        let dim = config.embedding_dim;
        let mut levels: Vec<BTreeMap<Vec<u16>, Vec<f64>>> = Vec::with_capacity(config.depth);
        let root = vec![0.0; dim];
        let mut parents: Vec<(Vec<u16>, Vec<f64>)> = vec![(Vec::new(), root)];
        for level in 0..config.depth {
            let sigma = config.noise_sigmas[level];
            let mut nodes = BTreeMap::new();
            for (path, center) in &parents {
                for child in 0..config.branching[level] {
                    let mut p = path.clone();
                    p.push(child as u16);
                    nodes.insert(p, add(center, &gaussian_vec(&mut rng, dim, sigma)));
                }
            }
            parents = nodes.iter().map(|(p, c)| (p.clone(), c.clone())).collect();
            levels.push(nodes);
        }
        Ok(Self { dim, depth: config.depth, levels })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&Vec<u16>, &Vec<f64>)> {
        self.levels[self.depth - 1].iter()
    }

    pub fn num_leaves(&self) -> usize {
        self.levels[self.depth - 1].len()
    }

    pub fn center(&self, path: &[u16]) -> Option<&[f64]> {
        if path.is_empty() || path.len() > self.depth {
            return None;
        }
        self.levels[path.len() - 1].get(path).map(Vec::as_slice)
    }

    /// Returns a copy with `round(fraction * leaves)` new leaves attached under
    /// randomly chosen existing parents. Existing centers are unchanged.
    pub fn with_extra_leaves(&self, config: &HierarchyGenConfig, fraction: f64, seed: u64) -> Result<Self> {
        if !fraction.is_finite() || fraction < 0.0 {
            return Err(Error::InvalidConfig(format!("leaf fraction must be non-negative, got {fraction}")));
        }
        let mut out = self.clone();
        let extra = (fraction * self.num_leaves() as f64).round() as usize;
        let mut rng = stream(seed, 2);
        let leaf_level = self.depth - 1;
        let sigma = config.noise_sigmas[leaf_level];
        let parents: Vec<(Vec<u16>, Vec<f64>)> = if leaf_level == 0 {
            vec![(Vec::new(), vec![0.0; self.dim])]
        } else {
            self.levels[leaf_level - 1].iter().map(|(p, c)| (p.clone(), c.clone())).collect()
        };
        for _ in 0..extra {
            let (ppath, pcenter) = &parents[rng.random_range(0..parents.len())];
            let next = out.levels[leaf_level]
                .keys()
                .filter(|k| k[..leaf_level] == ppath[..])
                .map(|k| k[leaf_level])
                .max()
                .map_or(0, |m| m + 1);
            if next == u16::MAX {
                return Err(Error::InvalidConfig("too many leaves under one parent".into()));
            }
            let mut p = ppath.clone();
            p.push(next);
            out.levels[leaf_level].insert(p, add(pcenter, &gaussian_vec(&mut rng, self.dim, sigma)));
        }
        Ok(out)
    }
}

/// Generates a corpus from a freshly drawn hierarchy.
pub fn generate_corpus(config: &HierarchyGenConfig, seed: u64) -> Result<Vec<CorpusItem>> {
    let tree = HierarchyTree::generate(config, seed)?;
    sample_items(&tree, config, seed)
}

/// Draws `config.num_items` items over the leaves of `tree`.
///
/// When there are at least as many items as leaves every leaf receives one
/// item first; the rest land on uniformly random leaves.
pub fn sample_items(tree: &HierarchyTree, config: &HierarchyGenConfig, seed: u64) -> Result<Vec<CorpusItem>> {
    config.validate()?;
    if tree.depth() != config.depth || tree.dim != config.embedding_dim {
        return Err(Error::InvalidConfig("tree shape does not match config".into()));
    }
    let n = config.num_items;
    let leaves: Vec<(&Vec<u16>, &Vec<f64>)> = tree.leaves().collect();

    let mut assign_rng = stream(seed, 3);
    let mut order: Vec<usize> = (0..leaves.len()).collect();
    order.shuffle(&mut assign_rng);
    let leaf_of: Vec<usize> = (0..n)
        .map(|i| if i < order.len() { order[i] } else { assign_rng.random_range(0..leaves.len()) })
        .collect();

    // Popularity: a random permutation of ranks, weight ~ rank^-alpha with a
    // half-open jitter so the sorted order matches the rank order.
    let mut pop_rng = stream(seed, 4);
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(&mut pop_rng);
    let weights: Vec<f32> = ranks
        .iter()
        .map(|&r| {
            let jitter: f64 = pop_rng.random_range(-0.5..0.5);
            ((r as f64 + jitter).powf(-config.power_law_alpha)) as f32
        })
        .collect();

    let mut day_rng = stream(seed, 5);
    let mut arrival = vec![0u32; n];
    if config.num_days > 1 {
        let late = (config.new_items_per_day_fraction * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut day_rng);
        for &i in idx.iter().take(late) {
            arrival[i] = day_rng.random_range(1..config.num_days);
        }
    }

    let mut noise_rng = stream(seed, 6);
    let item_sigma = config.noise_sigmas[config.depth];
    let items = (0..n)
        .map(|i| {
            let (path, center) = leaves[leaf_of[i]];
            let raw = add(center, &gaussian_vec(&mut noise_rng, config.embedding_dim, item_sigma));
            CorpusItem {
                id: ItemId(i as u32 + 1),
                embedding: normalize(&raw),
                arrival_day: arrival[i],
                popularity_weight: weights[i].max(f32::MIN_POSITIVE),
                cluster_path: path.clone(),
            }
        })
        .collect();
    Ok(items)
}

fn normalize(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| (x / norm) as f32).collect()
    } else {
        v.iter().map(|&x| x as f32).collect()
    }
}

/// Two corpora over one hierarchy: the later snapshot gains new leaves and a
/// freshly drawn item population.
pub fn generate_drift_snapshots(
    config: &HierarchyGenConfig,
    seed: u64,
    new_leaf_fraction: f64,
) -> Result<(Vec<CorpusItem>, Vec<CorpusItem>)> {
    let tree = HierarchyTree::generate(config, seed)?;
    let early = sample_items(&tree, config, seed)?;
    let later_tree = tree.with_extra_leaves(config, new_leaf_fraction, seed)?;
    let later = sample_items(&later_tree, config, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    Ok((early, later))
}

/// Length of the shared prefix of two cluster paths.
pub fn common_depth(a: &[u16], b: &[u16]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

pub fn index_by_id(items: &[CorpusItem]) -> HashMap<ItemId, usize> {
    items.iter().enumerate().map(|(i, it)| (it.id, i)).collect()
}

pub fn write_corpus(items: &[CorpusItem], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus_to(items, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus_to<W: Write>(items: &[CorpusItem], w: &mut W) -> Result<()> {
    let dim = items.first().map_or(0, |it| it.embedding.len());
    if let Some(bad) = items.iter().find(|it| it.embedding.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.embedding.len() });
    }
    codec::write_header(w, CORPUS_MAGIC, FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(items.len(), "num_items")?)?;
    w.write_u32::<LittleEndian>(to_u32(dim, "dimension")?)?;
    for it in items {
        let path_len = u8::try_from(it.cluster_path.len())
            .map_err(|_| Error::InvalidConfig("cluster path longer than 255".into()))?;
        w.write_u32::<LittleEndian>(it.id.0)?;
        w.write_u32::<LittleEndian>(it.arrival_day)?;
        w.write_f32::<LittleEndian>(it.popularity_weight)?;
        w.write_u8(path_len)?;
        for &p in &it.cluster_path {
            w.write_u16::<LittleEndian>(p)?;
        }
        codec::write_f32s(w, &it.embedding)?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let mut r = BufReader::new(File::open(path)?);
    read_corpus_from(&mut r)
}

pub fn read_corpus_from<R: Read>(r: &mut R) -> Result<Vec<CorpusItem>> {
    read_header(r, CORPUS_MAGIC, FORMAT_VERSION)?;
    let n = read_u32(r, "corpus header")? as usize;
    let dim = read_u32(r, "corpus header")? as usize;
    let mut items = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = ItemId(read_u32(r, "item")?);
        let arrival_day = read_u32(r, "item")?;
        let popularity_weight = codec::read_f32(r, "item")?;
        let path_len = read_u8(r, "item")? as usize;
        let cluster_path = (0..path_len).map(|_| read_u16(r, "cluster path")).collect::<Result<Vec<_>>>()?;
        let embedding = codec::read_f32s(r, dim, "embedding")?;
        items.push(CorpusItem { id, embedding, arrival_day, popularity_weight, cluster_path });
    }
    codec::expect_eof(r)?;
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionEvent {
    pub day: u32,
    /// Fixed-length history, padded with [`ItemId::PAD`].
    pub history: Vec<ItemId>,
    pub context: ItemId,
    pub candidate: ItemId,
    pub clicked: bool,
}

/// Hidden click model: `P(click) = sigmoid(scale * (cos - offset))` where
/// `cos` compares the candidate to the mean of history and context embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickAffinity {
    pub scale: f64,
    pub offset: f64,
}

impl Default for ClickAffinity {
    fn default() -> Self {
        Self { scale: 8.0, offset: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionConfig {
    pub num_days: u32,
    pub events_per_day: usize,
    pub history_len: usize,
    pub min_history_len: usize,
    /// Probability that a history slot is drawn from the user's interest cluster.
    pub interest_focus: f64,
    /// Probability that the candidate is drawn from the user's interest cluster.
    pub candidate_focus: f64,
    pub affinity: ClickAffinity,
}

impl InteractionConfig {
    pub fn new(num_days: u32, events_per_day: usize) -> Self {
        Self {
            num_days,
            events_per_day,
            history_len: 16,
            min_history_len: 4,
            interest_focus: 0.8,
            candidate_focus: 0.5,
            affinity: ClickAffinity::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if self.num_days == 0 || self.events_per_day == 0 {
            return Err(Error::InvalidConfig("num_days and events_per_day must be positive".into()));
        }
        if self.history_len == 0 || self.min_history_len > self.history_len {
            return Err(Error::InvalidConfig("history length bounds are inconsistent".into()));
        }
        if !prob(self.interest_focus) || !prob(self.candidate_focus) {
            return Err(Error::InvalidConfig("focus probabilities must lie in [0, 1]".into()));
        }
        if !self.affinity.scale.is_finite() || !self.affinity.offset.is_finite() {
            return Err(Error::InvalidConfig("affinity parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Click probability under the hidden affinity, given the embeddings of the
/// non-pad history items, the context item and the candidate.
pub fn click_probability(affinity: &ClickAffinity, history: &[&[f32]], context: &[f32], candidate: &[f32]) -> f64 {
    let dim = candidate.len();
    let mut user = vec![0f32; dim];
    for e in history.iter().copied().chain(std::iter::once(context)) {
        for (u, v) in user.iter_mut().zip(e) {
            *u += v;
        }
    }
    let count = (history.len() + 1) as f32;
    user.iter_mut().for_each(|u| *u /= count);
    sigmoid(affinity.scale * (cosine(candidate, &user) - affinity.offset))
}

/// Recomputes the generating click probability of an event from the corpus.
pub fn event_click_probability(
    affinity: &ClickAffinity,
    event: &InteractionEvent,
    items: &[CorpusItem],
    index: &HashMap<ItemId, usize>,
) -> Result<f64> {
    let emb = |id: ItemId| -> Result<&[f32]> {
        index.get(&id).map(|&i| items[i].embedding.as_slice()).ok_or(Error::UnknownItem(id.0))
    };
    let history = event.history.iter().filter(|h| !h.is_pad()).map(|&h| emb(h)).collect::<Result<Vec<_>>>()?;
    Ok(click_probability(affinity, &history, emb(event.context)?, emb(event.candidate)?))
}

struct WeightedPool {
    members: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl WeightedPool {
    fn new(members: Vec<usize>, items: &[CorpusItem]) -> Self {
        let dist = WeightedIndex::new(members.iter().map(|&i| items[i].popularity_weight as f64))
            .expect("popularity weights are positive");
        Self { members, dist }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.members[self.dist.sample(rng)]
    }
}

/// Generates a day-ordered click log. Each event draws a user interest
/// cluster through a popularity-weighted anchor item; context, history and
/// candidate are then drawn by popularity, mostly from that cluster.
pub fn generate_interactions(
    items: &[CorpusItem],
    config: &InteractionConfig,
    seed: u64,
) -> Result<Vec<InteractionEvent>> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut rng = stream(seed, 7);
    let mut events = Vec::with_capacity(config.num_days as usize * config.events_per_day);
    for day in 0..config.num_days {
        let eligible: Vec<usize> = (0..items.len()).filter(|&i| items[i].arrival_day <= day).collect();
        if eligible.is_empty() {
            return Err(Error::NoEligibleItems(day));
        }
        let mut by_cluster: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for &i in &eligible {
            by_cluster.entry(items[i].cluster_path.first().copied().unwrap_or(0)).or_default().push(i);
        }
        let global = WeightedPool::new(eligible, items);
        let clusters: BTreeMap<u16, WeightedPool> =
            by_cluster.into_iter().map(|(c, m)| (c, WeightedPool::new(m, items))).collect();

        for _ in 0..config.events_per_day {
            let anchor = global.sample(&mut rng);
            let interest = &clusters[&items[anchor].cluster_path.first().copied().unwrap_or(0)];
            let context = interest.sample(&mut rng);
            let len = rng.random_range(config.min_history_len..=config.history_len);
            let mut history = Vec::with_capacity(config.history_len);
            for _ in 0..len {
                let pool = if rng.random::<f64>() < config.interest_focus { interest } else { &global };
                history.push(pool.sample(&mut rng));
            }
            let candidate =
                if rng.random::<f64>() < config.candidate_focus { interest } else { &global }.sample(&mut rng);

            let hist_emb: Vec<&[f32]> = history.iter().map(|&i| items[i].embedding.as_slice()).collect();
            let p = click_probability(&config.affinity, &hist_emb, &items[context].embedding, &items[candidate].embedding);
            let clicked = rng.random::<f64>() < p;

            let mut history: Vec<ItemId> = history.into_iter().map(|i| items[i].id).collect();
            history.resize(config.history_len, ItemId::PAD);
            events.push(InteractionEvent {
                day,
                history,
                context: items[context].id,
                candidate: items[candidate].id,
                clicked,
            });
        }
    }
    Ok(events)
}

pub fn write_interactions(events: &[InteractionEvent], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_interactions_to(events, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_interactions_to<W: Write>(events: &[InteractionEvent], w: &mut W) -> Result<()> {
    let history_len = events.first().map_or(0, |e| e.history.len());
    if let Some(bad) = events.iter().find(|e| e.history.len() != history_len) {
        return Err(Error::DimensionMismatch { expected: history_len, got: bad.history.len() });
    }
    codec::write_header(w, INTERACTIONS_MAGIC, FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(events.len(), "num_events")?)?;
    w.write_u32::<LittleEndian>(to_u32(history_len, "history_len")?)?;
    for e in events {
        w.write_u32::<LittleEndian>(e.day)?;
        for h in &e.history {
            w.write_u32::<LittleEndian>(h.0)?;
        }
        w.write_u32::<LittleEndian>(e.context.0)?;
        w.write_u32::<LittleEndian>(e.candidate.0)?;
        w.write_u8(e.clicked as u8)?;
    }
    Ok(())
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionEvent>> {
    let mut r = BufReader::new(File::open(path)?);
    read_interactions_from(&mut r)
}

pub fn read_interactions_from<R: Read>(r: &mut R) -> Result<Vec<InteractionEvent>> {
    read_header(r, INTERACTIONS_MAGIC, FORMAT_VERSION)?;
    let n = read_u32(r, "interactions header")? as usize;
    let history_len = read_u32(r, "interactions header")? as usize;
    let mut events = Vec::with_capacity(n.min(1 << 22));
    for _ in 0..n {
        let day = read_u32(r, "event")?;
        let history = (0..history_len).map(|_| read_u32(r, "history").map(ItemId)).collect::<Result<Vec<_>>>()?;
        let context = ItemId(read_u32(r, "event")?);
        let candidate = ItemId(read_u32(r, "event")?);
        let clicked = match read_u8(r, "event")? {
            0 => false,
            1 => true,
            v => return Err(Error::Corrupt(format!("clicked flag {v}"))),
        };
        events.push(InteractionEvent { day, history, context, candidate, clicked });
    }
    codec::expect_eof(r)?;
    Ok(events)
}
