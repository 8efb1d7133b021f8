//! Sequential CTR ranker over three kinds of item representation: randomly
//! hashed item IDs, a projection of the raw content embedding, and sums of
//! Semantic ID n-gram embeddings.
//!
//! The ranker is trained one day at a time on a click log and evaluated on the
//! following day, both overall and on the slice of candidates that first
//! appear on that day.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{generate_interactions, CorpusItem, InteractionConfig, InteractionEvent, ItemId};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, AdamConfig, Mlp, MlpGrads, Scalar};
use crate::semantic_id::{extract_ngrams, ngram_table_rows, num_ngram_tables, SemanticId};
use crate::stats::{mean_std, paired_t_test, roc_auc, sign_test_greater, SignTest};

pub const DEFAULT_EMBEDDING_DIM: usize = 32;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

const TABLE_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepresentationKind {
    VidRandomHash { buckets: usize },
    ContentEmbedding,
    SidUnigramSum,
    SidBigramSum,
}

impl RepresentationKind {
    pub fn ngram_order(self) -> Option<usize> {
        match self {
            Self::SidUnigramSum => Some(1),
            Self::SidBigramSum => Some(2),
            _ => None,
        }
    }

    /// Hash kind with the same number of embedding rows as this n-gram kind
    /// would use for `levels`-level IDs over a `codebook_size` codebook.
    pub fn capacity_matched_hash(self, levels: usize, codebook_size: usize) -> Option<Self> {
        let n = self.ngram_order()?;
        let buckets = num_ngram_tables(levels, n) * ngram_table_rows(codebook_size, n);
        Some(Self::VidRandomHash { buckets })
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::VidRandomHash { buckets } => write!(f, "vid_random_hash@{buckets}"),
            Self::ContentEmbedding => f.write_str("content_embedding"),
            Self::SidUnigramSum => f.write_str("sid_unigram_sum"),
            Self::SidBigramSum => f.write_str("sid_bigram_sum"),
        }
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    /// Parses the `Display` form; the hash kind needs a bucket count, as in `vid_random_hash@256`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "content_embedding" => return Ok(Self::ContentEmbedding),
            "sid_unigram_sum" => return Ok(Self::SidUnigramSum),
            "sid_bigram_sum" => return Ok(Self::SidBigramSum),
            _ => {}
        }
        let buckets = s
            .strip_prefix("vid_random_hash@")
            .ok_or_else(|| Error::InvalidConfig(format!("unknown representation {s:?}")))?;
        let buckets: usize = buckets
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad bucket count in {s:?}")))?;
        if buckets == 0 {
            return Err(Error::InvalidConfig("bucket count must be positive".into()));
        }
        Ok(Self::VidRandomHash { buckets })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RepresentationConfig {
    pub kind: RepresentationKind,
    pub embedding_dim: usize,
    pub hash_seed: u64,
}

impl RepresentationConfig {
    pub fn new(kind: RepresentationKind) -> Self {
        Self { kind, embedding_dim: DEFAULT_EMBEDDING_DIM, hash_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        if let RepresentationKind::VidRandomHash { buckets: 0 } = self.kind {
            return Err(Error::InvalidConfig("bucket count must be positive".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a with the offset basis XORed with `seed`.
pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_bucket(item: ItemId, hash_seed: u64, buckets: usize) -> usize {
    (fnv1a64(&item.0.to_le_bytes(), hash_seed) % buckets as u64) as usize
}

/// Data a representation may need: the corpus (content embeddings, arrival
/// days) and a Semantic ID per item.
#[derive(Debug, Clone, Copy)]
pub struct ItemSources<'a> {
    pub corpus: &'a [CorpusItem],
    pub sids: Option<&'a HashMap<ItemId, SemanticId>>,
    pub codebook_size: usize,
}

/// Resolves item IDs to embedding-table rows or content vectors.
#[derive(Debug, Clone)]
pub struct ItemFeatures {
    kind: RepresentationKind,
    inner: Features,
}

#[derive(Debug, Clone)]
enum Features {
    Hashed { buckets: usize, seed: u64 },
    Ngrams { table_rows: Vec<usize>, rows: HashMap<ItemId, Vec<usize>> },
    Content { index: HashMap<ItemId, usize>, embeddings: Array2<f32> },
}

#[derive(Debug, Clone, Copy)]
enum Lookup<'a> {
    Row(usize),
    Rows(&'a [usize]),
    Content(usize),
}

impl ItemFeatures {
    pub fn build(config: &RepresentationConfig, sources: &ItemSources<'_>) -> Result<Self> {
        config.validate()?;
        let inner = match config.kind {
            RepresentationKind::VidRandomHash { buckets } => Features::Hashed { buckets, seed: config.hash_seed },
            RepresentationKind::ContentEmbedding => {
                let first = sources.corpus.first().ok_or(Error::Empty("corpus"))?;
                let dim = first.embedding.len();
                let mut embeddings = Array2::zeros((sources.corpus.len(), dim));
                let mut index = HashMap::with_capacity(sources.corpus.len());
                for (i, item) in sources.corpus.iter().enumerate() {
                    if item.embedding.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: item.embedding.len() });
                    }
                    embeddings.row_mut(i).assign(&ndarray::ArrayView1::from(&item.embedding[..]));
                    index.insert(item.id, i);
                }
                Features::Content { index, embeddings }
            }
            RepresentationKind::SidUnigramSum | RepresentationKind::SidBigramSum => {
                let n = config.kind.ngram_order().expect("sid kinds have an n-gram order");
                let sids = sources
                    .sids
                    .ok_or_else(|| Error::InvalidConfig(format!("{} needs a semantic-ID map", config.kind)))?;
                let levels = sids.values().next().ok_or(Error::Empty("semantic-ID map"))?.num_levels();
                if sources.codebook_size == 0 {
                    return Err(Error::InvalidConfig("codebook_size must be positive".into()));
                }
                let mut rows = HashMap::with_capacity(sids.len());
                for (&id, sid) in sids {
                    if sid.num_levels() != levels {
                        return Err(Error::Corrupt(format!("item {} has {} levels, expected {levels}", id.0, sid.num_levels())));
                    }
                    let grams = extract_ngrams(sid, n, sources.codebook_size)?;
                    rows.insert(id, grams.iter().map(|g| g.row_index).collect());
                }
                let table_rows = vec![ngram_table_rows(sources.codebook_size, n); num_ngram_tables(levels, n)];
                if table_rows.is_empty() {
                    return Err(Error::InvalidConfig(format!("{levels}-level IDs have no {n}-grams")));
                }
                Features::Ngrams { table_rows, rows }
            }
        };
        Ok(Self { kind: config.kind, inner })
    }

    pub fn kind(&self) -> RepresentationKind {
        self.kind
    }

    /// Row counts of the embedding tables this representation addresses.
    pub fn table_rows(&self) -> Vec<usize> {
        match &self.inner {
            Features::Hashed { buckets, .. } => vec![*buckets],
            Features::Ngrams { table_rows, .. } => table_rows.clone(),
            Features::Content { .. } => Vec::new(),
        }
    }

    pub fn content_dim(&self) -> Option<usize> {
        match &self.inner {
            Features::Content { embeddings, .. } => Some(embeddings.ncols()),
            _ => None,
        }
    }

    fn lookup(&self, item: ItemId) -> Result<Lookup<'_>> {
        match &self.inner {
            Features::Hashed { buckets, seed } => Ok(Lookup::Row(hash_bucket(item, *seed, *buckets))),
            Features::Ngrams { rows, .. } => {
                rows.get(&item).map(|r| Lookup::Rows(r)).ok_or(Error::UnknownItem(item.0))
            }
            Features::Content { index, .. } => index.get(&item).map(|&i| Lookup::Content(i)).ok_or(Error::UnknownItem(item.0)),
        }
    }

    fn content_row(&self, i: usize) -> &[f32] {
        match &self.inner {
            Features::Content { embeddings, .. } => {
                let cols = embeddings.ncols();
                &embeddings.as_slice().expect("standard layout")[i * cols..(i + 1) * cols]
            }
            _ => unreachable!("content lookup on a table representation"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    /// `rows × dim`.
    pub weights: Array2<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
    }
}

/// Gradient rows touched by one batch, in first-touch order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    dim: usize,
    slot: HashMap<usize, usize>,
    rows: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseRows<T> {
    pub fn new(dim: usize) -> Self {
        Self { dim, slot: HashMap::new(), rows: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, row: usize, grad: &[T]) {
        let dim = self.dim;
        let k = *self.slot.entry(row).or_insert_with(|| {
            self.rows.push(row);
            self.values.extend(std::iter::repeat_n(T::zero(), dim));
            self.rows.len() - 1
        });
        for (v, &g) in self.values[k * dim..(k + 1) * dim].iter_mut().zip(grad) {
            *v += g;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.rows.iter().enumerate().map(|(k, &r)| (r, &self.values[k * self.dim..(k + 1) * self.dim]))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RankingGradients<T> {
    pub tables: Vec<SparseRows<T>>,
    pub projection: Option<Array2<T>>,
    pub scorer: MlpGrads<T>,
}

impl<T: Scalar> RankingGradients<T> {
    /// Dense copies in the order of [`RankingModel::param_slices`].
    pub fn to_dense(&self, model: &RankingModel<T>) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        for (table, grads) in model.tables.iter().zip(&self.tables) {
            let dim = table.dim();
            let mut dense = vec![T::zero(); table.weights.len()];
            for (row, g) in grads.iter() {
                dense[row * dim..(row + 1) * dim].copy_from_slice(g);
            }
            out.push(dense);
        }
        if let Some(p) = &self.projection {
            out.push(p.iter().copied().collect());
        }
        out.extend(self.scorer.slices().into_iter().map(<[T]>::to_vec));
        out
    }
}

/// Embedding tables (or a content projection) feeding a feed-forward scorer
/// over `[mean-pooled history, context, candidate]`.
#[derive(Debug, Clone)]
pub struct RankingModel<T = f32> {
    representation: RepresentationConfig,
    features: Arc<ItemFeatures>,
    tables: Vec<EmbeddingTable<T>>,
    /// `embedding_dim × D`, shared by the three feature slots.
    projection: Option<Array2<T>>,
    scorer: Mlp<T>,
}

struct EventInputs<'a> {
    history: Vec<Lookup<'a>>,
    context: Lookup<'a>,
    candidate: Lookup<'a>,
}

impl<T: Scalar> RankingModel<T> {
    pub fn new(
        representation: RepresentationConfig,
        features: Arc<ItemFeatures>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        representation.validate()?;
        if features.kind() != representation.kind {
            return Err(Error::InvalidConfig(format!(
                "features built for {} but model configured for {}",
                features.kind(),
                representation.kind
            )));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        let dim = representation.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(21);
        let tables = features
            .table_rows()
            .into_iter()
            .map(|rows| EmbeddingTable {
                weights: Array2::from_shape_simple_fn((rows, dim), || {
                    T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * TABLE_INIT_STD)
                }),
            })
            .collect();
        let projection = features.content_dim().map(|d| {
            let bound = 1.0 / (d as f64).sqrt();
            Array2::from_shape_simple_fn((dim, d), || T::from_f64_lossy(rng.random_range(-bound..bound)))
        });
        let mut dims = hidden.to_vec();
        dims.push(1);
        let scorer = Mlp::init(3 * dim, &dims, &mut rng);
        Ok(Self { representation, features, tables, projection, scorer })
    }

    pub fn representation(&self) -> &RepresentationConfig {
        &self.representation
    }

    pub fn features(&self) -> &Arc<ItemFeatures> {
        &self.features
    }

    pub fn tables(&self) -> &[EmbeddingTable<T>] {
        &self.tables
    }

    pub fn projection(&self) -> Option<&Array2<T>> {
        self.projection.as_ref()
    }

    pub fn scorer(&self) -> &Mlp<T> {
        &self.scorer
    }

    pub fn scorer_mut(&mut self) -> &mut Mlp<T> {
        &mut self.scorer
    }

    /// Parameters of the item representation: table cells, or projection weights.
    pub fn embedding_params(&self) -> usize {
        self.tables.iter().map(|t| t.weights.len()).sum::<usize>() + self.projection.as_ref().map_or(0, Array2::len)
    }

    pub fn embedding_rows(&self) -> usize {
        self.tables.iter().map(EmbeddingTable::rows).sum()
    }

    /// Tables, then projection, then scorer layers.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> =
            self.tables.iter().map(|t| t.weights.as_slice().expect("standard layout")).collect();
        if let Some(p) = &self.projection {
            out.push(p.as_slice().expect("standard layout"));
        }
        out.extend(self.scorer.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> =
            self.tables.iter_mut().map(|t| t.weights.as_slice_mut().expect("standard layout")).collect();
        if let Some(p) = &mut self.projection {
            out.push(p.as_slice_mut().expect("standard layout"));
        }
        out.extend(self.scorer.param_slices_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tables.iter().all(EmbeddingTable::is_finite)
            && self.projection.as_ref().is_none_or(|p| p.iter().all(|v| v.is_finite()))
            && self.scorer.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> RankingModel<U> {
        let c = |v: &T| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN));
        RankingModel {
            representation: self.representation,
            features: Arc::clone(&self.features),
            tables: self.tables.iter().map(|t| EmbeddingTable { weights: t.weights.map(c) }).collect(),
            projection: self.projection.as_ref().map(|p| p.map(c)),
            scorer: self.scorer.cast(),
        }
    }

    /// Adds `weight * repr(item)` into `out`.
    fn accumulate(&self, lookup: Lookup<'_>, weight: T, out: &mut [T]) {
        match lookup {
            Lookup::Row(r) => {
                for (o, &v) in out.iter_mut().zip(self.tables[0].weights.row(r)) {
                    *o += weight * v;
                }
            }
            Lookup::Rows(rows) => {
                for (table, &r) in self.tables.iter().zip(rows) {
                    for (o, &v) in out.iter_mut().zip(table.weights.row(r)) {
                        *o += weight * v;
                    }
                }
            }
            Lookup::Content(i) => {
                let x = self.features.content_row(i);
                let p = self.projection.as_ref().expect("content kind has a projection");
                for (o, prow) in out.iter_mut().zip(p.rows()) {
                    let s: T = prow.iter().zip(x).map(|(&w, &xv)| w * T::from_f32(xv).expect("finite f32")).sum();
                    *o += weight * s;
                }
            }
        }
    }

    fn scatter(&self, lookup: Lookup<'_>, grad: &[T], grads: &mut RankingGradients<T>) {
        match lookup {
            Lookup::Row(r) => grads.tables[0].add(r, grad),
            Lookup::Rows(rows) => {
                for (t, &r) in rows.iter().enumerate() {
                    grads.tables[t].add(r, grad);
                }
            }
            Lookup::Content(i) => {
                let x = self.features.content_row(i);
                let gp = grads.projection.as_mut().expect("content kind has a projection");
                for (mut prow, &g) in gp.rows_mut().into_iter().zip(grad) {
                    for (w, &xv) in prow.iter_mut().zip(x) {
                        *w += g * T::from_f32(xv).expect("finite f32");
                    }
                }
            }
        }
    }

    /// The `embedding_dim` representation of one item.
    pub fn represent(&self, item: ItemId) -> Result<Array1<T>> {
        let mut out = Array1::zeros(self.representation.embedding_dim);
        let lookup = self.features.lookup(item)?;
        self.accumulate(lookup, T::one(), out.as_slice_mut().expect("standard layout"));
        Ok(out)
    }

    fn resolve<'a>(&'a self, history: &[ItemId], context: ItemId, candidate: ItemId) -> Result<EventInputs<'a>> {
        Ok(EventInputs {
            history: history.iter().filter(|h| !h.is_pad()).map(|&h| self.features.lookup(h)).collect::<Result<_>>()?,
            context: self.features.lookup(context)?,
            candidate: self.features.lookup(candidate)?,
        })
    }

    fn fill_input(&self, inputs: &EventInputs<'_>, row: &mut [T]) {
        let d = self.representation.embedding_dim;
        let (hist, rest) = row.split_at_mut(d);
        let (ctx, cand) = rest.split_at_mut(d);
        if !inputs.history.is_empty() {
            let w = T::one() / T::from_usize(inputs.history.len()).expect("small count");
            for &lk in &inputs.history {
                self.accumulate(lk, w, hist);
            }
        }
        self.accumulate(inputs.context, T::one(), ctx);
        self.accumulate(inputs.candidate, T::one(), cand);
    }

    fn input_matrix<'a>(&'a self, events: &[&InteractionEvent]) -> Result<(Array2<T>, Vec<EventInputs<'a>>)> {
        let width = 3 * self.representation.embedding_dim;
        let mut x = Array2::zeros((events.len(), width));
        let mut resolved = Vec::with_capacity(events.len());
        for (mut row, e) in x.rows_mut().into_iter().zip(events) {
            let inputs = self.resolve(&e.history, e.context, e.candidate)?;
            self.fill_input(&inputs, row.as_slice_mut().expect("standard layout"));
            resolved.push(inputs);
        }
        Ok((x, resolved))
    }

    /// Scorer logit for one event.
    pub fn logit(&self, history: &[ItemId], context: ItemId, candidate: ItemId) -> Result<T> {
        let inputs = self.resolve(history, context, candidate)?;
        let mut row = Array1::zeros(3 * self.representation.embedding_dim);
        self.fill_input(&inputs, row.as_slice_mut().expect("standard layout"));
        Ok(self.scorer.forward_one(row.view())[0])
    }

    /// Click probability; pad entries in `history` are ignored.
    pub fn score(&self, history: &[ItemId], context: ItemId, candidate: ItemId) -> Result<T> {
        self.logit(history, context, candidate).map(sigmoid)
    }

    /// Click probabilities for a batch of events, in f64.
    pub fn score_events(&self, events: &[&InteractionEvent]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(events.len());
        for chunk in events.chunks(512) {
            let (x, _) = self.input_matrix(chunk)?;
            let logits = self.scorer.forward(x.view());
            out.extend(logits.column(0).iter().map(|z| sigmoid(z.to_f64().unwrap_or(f64::NAN))));
        }
        Ok(out)
    }

    /// Mean binary cross-entropy over `events` and its gradient.
    pub fn batch_gradients(&self, events: &[&InteractionEvent]) -> Result<(RankingGradients<T>, T)> {
        if events.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let dim = self.representation.embedding_dim;
        let (x, resolved) = self.input_matrix(events)?;
        let cache = self.scorer.forward_cached(x.view());
        let n = T::from_usize(events.len()).expect("batch size fits");
        let mut loss = T::zero();
        let mut d_out = Array2::zeros((events.len(), 1));
        for (b, e) in events.iter().enumerate() {
            let z = cache.output()[[b, 0]];
            let y = if e.clicked { T::one() } else { T::zero() };
            // softplus(z) - y z, computed stably
            loss += z.max(T::zero()) + (-z.abs()).exp().ln_1p() - y * z;
            d_out[[b, 0]] = (sigmoid(z) - y) / n;
        }
        loss = loss / n;

        let mut grads = RankingGradients {
            tables: self.tables.iter().map(|t| SparseRows::new(t.dim())).collect(),
            projection: self.projection.as_ref().map(|p| Array2::zeros(p.raw_dim())),
            scorer: self.scorer.zero_grads(),
        };
        let dx = self.scorer.backward(&cache, d_out, &mut grads.scorer, true).expect("input gradient requested");
        for (inputs, drow) in resolved.iter().zip(dx.rows()) {
            let drow = drow.as_slice().expect("standard layout");
            let (dh, rest) = drow.split_at(dim);
            let (dc, dcand) = rest.split_at(dim);
            if !inputs.history.is_empty() {
                let w = T::one() / T::from_usize(inputs.history.len()).expect("small count");
                let dh: Vec<T> = dh.iter().map(|&g| g * w).collect();
                for &lk in &inputs.history {
                    self.scatter(lk, &dh, &mut grads);
                }
            }
            self.scatter(inputs.context, dc, &mut grads);
            self.scatter(inputs.candidate, dcand, &mut grads);
        }
        Ok((grads, loss))
    }

    /// Trains on days `train_days` in order, shuffling events within each day.
    pub fn train_sequential(
        &mut self,
        events: &[InteractionEvent],
        train_days: Range<u32>,
        options: &RankingTrainOptions,
    ) -> Result<RankingTrainLog> {
        if events.windows(2).any(|w| w[0].day > w[1].day) {
            return Err(Error::InvalidConfig("interactions must be sorted by day".into()));
        }
        let mut by_day: BTreeMap<u32, Vec<&InteractionEvent>> = BTreeMap::new();
        for e in events.iter().filter(|e| train_days.contains(&e.day)) {
            by_day.entry(e.day).or_default().push(e);
        }
        if by_day.is_empty() {
            return Err(Error::Empty("training range"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(31);
        let mut optimizer = RankingOptimizer::new(self, options.learning_rate);
        let mut log = RankingTrainLog::default();
        for (day, mut day_events) in by_day {
            day_events.shuffle(&mut rng);
            log.days.push(self.fit_group(day, &day_events, options.batch_size, &mut optimizer)?);
        }
        Ok(log)
    }

    /// Trains on `events` in exactly the given order, as a single group.
    pub fn train_in_order(
        &mut self,
        events: &[&InteractionEvent],
        options: &RankingTrainOptions,
    ) -> Result<RankingTrainLog> {
        if events.is_empty() {
            return Err(Error::Empty("training range"));
        }
        let mut optimizer = RankingOptimizer::new(self, options.learning_rate);
        let day = events[0].day;
        Ok(RankingTrainLog { days: vec![self.fit_group(day, events, options.batch_size, &mut optimizer)?] })
    }

    fn fit_group(
        &mut self,
        day: u32,
        events: &[&InteractionEvent],
        batch_size: usize,
        optimizer: &mut RankingOptimizer<T>,
    ) -> Result<DayLoss> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let mut total = 0f64;
        for batch in events.chunks(batch_size) {
            let (grads, loss) = self.batch_gradients(batch)?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("ranking loss on day {day}")));
            }
            total += loss * batch.len() as f64;
            optimizer.apply(self, &grads);
        }
        Ok(DayLoss { day, events: events.len(), mean_loss: total / events.len() as f64 })
    }

    /// AUC over all events of `eval_day`, and over those whose candidate
    /// arrives on that day.
    pub fn evaluate(&self, events: &[InteractionEvent], eval_day: u32, corpus: &[CorpusItem]) -> Result<EvalReport> {
        let arrival: HashMap<ItemId, u32> = corpus.iter().map(|i| (i.id, i.arrival_day)).collect();
        let day_events: Vec<&InteractionEvent> = events.iter().filter(|e| e.day == eval_day).collect();
        if day_events.is_empty() {
            return Err(Error::Empty("evaluation day"));
        }
        let scores = self.score_events(&day_events)?;
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("evaluation score {bad}")));
        }
        let labels: Vec<bool> = day_events.iter().map(|e| e.clicked).collect();
        let mut cold_scores = Vec::new();
        let mut cold_labels = Vec::new();
        for (e, &s) in day_events.iter().zip(&scores) {
            let day = *arrival.get(&e.candidate).ok_or(Error::UnknownItem(e.candidate.0))?;
            if day == eval_day {
                cold_scores.push(s);
                cold_labels.push(e.clicked);
            }
        }
        Ok(EvalReport {
            ctr_auc: roc_auc(&scores, &labels),
            ctr_1d_auc: roc_auc(&cold_scores, &cold_labels),
            num_eval_events: day_events.len(),
            num_cold_start_events: cold_scores.len(),
            delta_vs_baseline_pct: None,
        })
    }
}

/// Adam for the dense parameters and lazy Adam for table rows: only rows
/// present in a batch have their moments updated.
struct RankingOptimizer<T> {
    config: AdamConfig,
    dense: Adam<T>,
    step: u64,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> RankingOptimizer<T> {
    fn new(model: &RankingModel<T>, learning_rate: f64) -> Self {
        let config = AdamConfig::with_lr(learning_rate);
        let zeros: Vec<Array2<T>> = model.tables.iter().map(|t| Array2::zeros(t.weights.raw_dim())).collect();
        Self { config, dense: Adam::new(config), step: 0, first: zeros.clone(), second: zeros }
    }

    fn apply(&mut self, model: &mut RankingModel<T>, grads: &RankingGradients<T>) {
        let mut params: Vec<&mut [T]> = Vec::new();
        let mut dense_grads: Vec<&[T]> = Vec::new();
        if let (Some(p), Some(g)) = (&mut model.projection, &grads.projection) {
            params.push(p.as_slice_mut().expect("standard layout"));
            dense_grads.push(g.as_slice().expect("standard layout"));
        }
        params.extend(model.scorer.param_slices_mut());
        dense_grads.extend(grads.scorer.slices());
        self.dense.step(params, dense_grads);

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
        for (k, rows) in grads.tables.iter().enumerate() {
            for (r, g) in rows.iter() {
                let mut w = model.tables[k].weights.row_mut(r);
                let mut m = self.first[k].row_mut(r);
                let mut v = self.second[k].row_mut(r);
                for j in 0..g.len() {
                    m[j] = b1 * m[j] + (one - b1) * g[j];
                    v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                    w[j] -= lr * (m[j] / corr1) / ((v[j] / corr2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingTrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl RankingTrainOptions {
    pub fn new(seed: u64) -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayLoss {
    pub day: u32,
    pub events: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankingTrainLog {
    pub days: Vec<DayLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricDelta {
    pub ctr_auc_pct: Option<f64>,
    pub ctr_1d_auc_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// `None` when the slice holds only one class.
    pub ctr_auc: Option<f64>,
    pub ctr_1d_auc: Option<f64>,
    pub num_eval_events: usize,
    pub num_cold_start_events: usize,
    pub delta_vs_baseline_pct: Option<MetricDelta>,
}

pub fn percent_delta(variant: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    match (variant, baseline) {
        (Some(v), Some(b)) if b != 0.0 => Some(100.0 * (v - b) / b),
        _ => None,
    }
}

impl EvalReport {
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        self.delta_vs_baseline_pct = Some(MetricDelta {
            ctr_auc_pct: percent_delta(self.ctr_auc, baseline.ctr_auc),
            ctr_1d_auc_pct: percent_delta(self.ctr_1d_auc, baseline.ctr_1d_auc),
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerSettings {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for RankerSettings {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN.to_vec(), learning_rate: 1e-3, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    pub embed_rows: usize,
    pub embed_params: usize,
}

/// Trains one ranker on days `[0, eval_day)` of `events` and evaluates it on `eval_day`.
pub fn run_once(
    sources: &ItemSources<'_>,
    representation: &RepresentationConfig,
    settings: &RankerSettings,
    events: &[InteractionEvent],
    eval_day: u32,
    seed: u64,
) -> Result<RunRecord> {
    let features = Arc::new(ItemFeatures::build(representation, sources)?);
    let mut model = RankingModel::<f32>::new(*representation, features, &settings.hidden, seed)?;
    let options = RankingTrainOptions { learning_rate: settings.learning_rate, batch_size: settings.batch_size, seed };
    model.train_sequential(events, 0..eval_day, &options)?;
    let report = model.evaluate(events, eval_day, sources.corpus)?;
    Ok(RunRecord {
        label: representation.kind.to_string(),
        seed,
        report,
        embed_rows: model.embedding_rows(),
        embed_params: model.embedding_params(),
    })
}

/// Where the click log of each seed comes from.
#[derive(Debug, Clone)]
pub enum InteractionSource<'a> {
    /// A fresh log per seed, generated from the corpus.
    Generated(InteractionConfig),
    /// One log shared by every seed; seeds then vary initialization and shuffling only.
    Fixed(&'a [InteractionEvent]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub variant: RepresentationConfig,
    pub baseline: RepresentationConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec<'a> {
    pub comparisons: Vec<Comparison>,
    pub seeds: Vec<u64>,
    pub interactions: InteractionSource<'a>,
    pub settings: RankerSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    pub variant: String,
    pub baseline: String,
    pub num_seeds: usize,
    pub variant_embed_rows: usize,
    pub baseline_embed_rows: usize,
    pub variant_embed_params: usize,
    pub baseline_embed_params: usize,
    pub delta_embed_params_pct: f64,
    pub variant_ctr_auc: f64,
    pub baseline_ctr_auc: f64,
    pub delta_ctr_auc_pct: (f64, f64),
    pub variant_ctr_1d_auc: Option<f64>,
    pub baseline_ctr_1d_auc: Option<f64>,
    pub delta_ctr_1d_auc_pct: Option<(f64, f64)>,
    /// Seeds where both runs have a cold-start AUC.
    pub ctr_1d_seeds: usize,
    pub ctr_1d_sign_test: Option<SignTest>,
    /// Two-sided paired t-test on overall AUC.
    pub ctr_auc_t_test_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<ComparisonSummary>,
}

/// Runs every representation named in `spec` once per seed and summarizes each comparison.
pub fn compare_representations(sources: &ItemSources<'_>, spec: &ExperimentSpec<'_>) -> Result<ExperimentResult> {
    if spec.seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    if spec.comparisons.is_empty() {
        return Err(Error::Empty("comparison list"));
    }
    let mut representations: Vec<RepresentationConfig> = Vec::new();
    for c in &spec.comparisons {
        for r in [c.variant, c.baseline] {
            if !representations.contains(&r) {
                representations.push(r);
            }
        }
    }
    let mut runs = Vec::with_capacity(representations.len() * spec.seeds.len());
    for &seed in &spec.seeds {
        let generated;
        let events: &[InteractionEvent] = match &spec.interactions {
            InteractionSource::Generated(config) => {
                generated = generate_interactions(sources.corpus, config, seed)?;
                &generated
            }
            InteractionSource::Fixed(events) => events,
        };
        let eval_day = events.iter().map(|e| e.day).max().ok_or(Error::Empty("interactions"))?;
        if eval_day == 0 {
            return Err(Error::Empty("training range"));
        }
        for r in &representations {
            runs.push(run_once(sources, r, &spec.settings, events, eval_day, seed)?);
        }
    }
    let summaries = spec
        .comparisons
        .iter()
        .map(|c| {
            let pick = |label: String| runs.iter().filter(|r| r.label == label).cloned().collect::<Vec<_>>();
            summarize(&pick(c.variant.kind.to_string()), &pick(c.baseline.kind.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentResult { runs, summaries })
}

/// Pairs runs by seed and aggregates per-seed percentage deltas.
pub fn summarize(variant: &[RunRecord], baseline: &[RunRecord]) -> Result<ComparisonSummary> {
    let by_seed = |runs: &[RunRecord]| -> BTreeMap<u64, RunRecord> { runs.iter().map(|r| (r.seed, r.clone())).collect() };
    let v = by_seed(variant);
    let b = by_seed(baseline);
    if v.len() != variant.len() || b.len() != baseline.len() || !v.keys().eq(b.keys()) {
        return Err(Error::SeedMismatch);
    }
    let (vf, bf) = match (v.values().next(), b.values().next()) {
        (Some(vf), Some(bf)) => (vf, bf),
        _ => return Err(Error::Empty("run list")),
    };
    let auc = |r: &RunRecord| r.report.ctr_auc.ok_or_else(|| Error::Corrupt(format!("{} seed {} has no CTR AUC", r.label, r.seed)));
    let mut v_auc = Vec::new();
    let mut b_auc = Vec::new();
    let mut v_1d = Vec::new();
    let mut b_1d = Vec::new();
    for (vr, br) in v.values().zip(b.values()) {
        v_auc.push(auc(vr)?);
        b_auc.push(auc(br)?);
        if let (Some(x), Some(y)) = (vr.report.ctr_1d_auc, br.report.ctr_1d_auc) {
            v_1d.push(x);
            b_1d.push(y);
        }
    }
    let pct = |a: &[f64], c: &[f64]| -> Vec<f64> { a.iter().zip(c).map(|(x, y)| 100.0 * (x - y) / y).collect() };
    let has_1d = !v_1d.is_empty();
    Ok(ComparisonSummary {
        variant: vf.label.clone(),
        baseline: bf.label.clone(),
        num_seeds: v.len(),
        variant_embed_rows: vf.embed_rows,
        baseline_embed_rows: bf.embed_rows,
        variant_embed_params: vf.embed_params,
        baseline_embed_params: bf.embed_params,
        delta_embed_params_pct: 100.0 * (vf.embed_params as f64 - bf.embed_params as f64) / bf.embed_params as f64,
        variant_ctr_auc: mean_std(&v_auc).0,
        baseline_ctr_auc: mean_std(&b_auc).0,
        delta_ctr_auc_pct: mean_std(&pct(&v_auc, &b_auc)),
        variant_ctr_1d_auc: has_1d.then(|| mean_std(&v_1d).0),
        baseline_ctr_1d_auc: has_1d.then(|| mean_std(&b_1d).0),
        delta_ctr_1d_auc_pct: has_1d.then(|| mean_std(&pct(&v_1d, &b_1d))),
        ctr_1d_seeds: v_1d.len(),
        ctr_1d_sign_test: has_1d.then(|| sign_test_greater(&v_1d, &b_1d)),
        ctr_auc_t_test_p: paired_t_test(&v_auc, &b_auc),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub fn runs_tsv(runs: &[RunRecord]) -> String {
    let mut out = String::from("representation\tseed\tctr_auc\tctr_1d_auc\tnum_eval_events\tnum_cold_start_events\tembed_rows\tembed_params\n");
    for r in runs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.seed,
            fmt_opt(r.report.ctr_auc),
            fmt_opt(r.report.ctr_1d_auc),
            r.report.num_eval_events,
            r.report.num_cold_start_events,
            r.embed_rows,
            r.embed_params
        ));
    }
    out
}

/// One row per comparison: embedding sizes, %Δ parameters, and mean ± std %Δ of both AUCs.
pub fn summary_tsv(summaries: &[ComparisonSummary]) -> String {
    let mut out = String::from(
        "variant\tbaseline\tseeds\tvariant_rows\tbaseline_rows\tdelta_embed_params_pct\t\
         variant_ctr_auc\tbaseline_ctr_auc\tdelta_ctr_auc_pct_mean\tdelta_ctr_auc_pct_std\t\
         variant_ctr_1d_auc\tbaseline_ctr_1d_auc\tdelta_ctr_1d_auc_pct_mean\tdelta_ctr_1d_auc_pct_std\t\
         ctr_1d_wins\tctr_1d_sign_p\tctr_auc_t_test_p\n",
    );
    for s in summaries {
        let sign = s.ctr_1d_sign_test;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\n",
            s.variant,
            s.baseline,
            s.num_seeds,
            s.variant_embed_rows,
            s.baseline_embed_rows,
            s.delta_embed_params_pct,
            s.variant_ctr_auc,
            s.baseline_ctr_auc,
            s.delta_ctr_auc_pct.0,
            s.delta_ctr_auc_pct.1,
            fmt_opt(s.variant_ctr_1d_auc),
            fmt_opt(s.baseline_ctr_1d_auc),
            s.delta_ctr_1d_auc_pct.map_or("NA".into(), |d| format!("{:.4}", d.0)),
            s.delta_ctr_1d_auc_pct.map_or("NA".into(), |d| format!("{:.4}", d.1)),
            sign.map_or("NA".into(), |t| format!("{}/{}", t.wins, t.wins + t.losses)),
            sign.map_or("NA".into(), |t| format!("{:.6}", t.p_value)),
            s.ctr_auc_t_test_p,
        ));
    }
    out
}
