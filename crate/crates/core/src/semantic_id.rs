//! Semantic IDs: packing into `u64`, n-gram features, and prefix (subtrie)
//! analytics.
//!
//! Tokens are packed big-endian: the first (coarsest) code occupies the
//! highest field, so numeric order of packed IDs follows prefix order and a
//! subtrie is a contiguous range.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, read_header, read_u32, read_u64, read_u8, to_u32};
use crate::corpus::{CorpusItem, ItemId};
use crate::error::{Error, Result};
use crate::nn::cosine;
use crate::rqvae::RqVaeModel;

pub const SID_MAP_MAGIC: &[u8; 4] = b"SQS1";
pub const SID_MAP_VERSION: u32 = 1;
pub const DEFAULT_BITS_PER_TOKEN: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticId {
    codes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PackedSemanticId(pub u64);

/// Smallest field width that holds codes in `[0, codebook_size)`.
pub fn min_bits_per_token(codebook_size: usize) -> u32 {
    let k = codebook_size.max(2) as u64;
    64 - (k - 1).leading_zeros()
}

fn field_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

impl SemanticId {
    pub fn new(codes: Vec<u32>, codebook_size: usize) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Empty("semantic id"));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::InvalidConfig(format!("code {c} outside codebook of size {codebook_size}")));
        }
        Ok(Self { codes })
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn num_levels(&self) -> usize {
        self.codes.len()
    }

    pub fn prefix(&self, n: usize) -> &[u32] {
        &self.codes[..n.min(self.codes.len())]
    }

    /// Length of the prefix shared with `other`.
    pub fn shared_prefix_len(&self, other: &SemanticId) -> usize {
        self.codes.iter().zip(&other.codes).take_while(|(a, b)| a == b).count()
    }

    pub fn pack(&self, bits_per_token: u32) -> Result<PackedSemanticId> {
        let levels = self.codes.len();
        if bits_per_token == 0 || levels as u64 * bits_per_token as u64 > 64 {
            return Err(Error::PackOverflow { levels, bits: bits_per_token });
        }
        let mask = field_mask(bits_per_token);
        let mut value = 0u64;
        for (l, &c) in self.codes.iter().enumerate() {
            if c as u64 > mask {
                return Err(Error::TokenTooWide { code: c, bits: bits_per_token });
            }
            let shift = (levels - 1 - l) as u32 * bits_per_token;
            value |= (c as u64) << shift;
        }
        Ok(PackedSemanticId(value))
    }

    pub fn unpack(packed: PackedSemanticId, levels: usize, bits_per_token: u32) -> Result<Self> {
        let total = levels as u64 * bits_per_token as u64;
        if levels == 0 {
            return Err(Error::Empty("semantic id"));
        }
        if bits_per_token == 0 || total > 64 {
            return Err(Error::PackOverflow { levels, bits: bits_per_token });
        }
        if total < 64 && packed.0 >> total != 0 {
            return Err(Error::Corrupt(format!("packed id {:#x} has bits above {total}", packed.0)));
        }
        let mask = field_mask(bits_per_token);
        let codes = (0..levels)
            .map(|l| {
                let shift = (levels - 1 - l) as u32 * bits_per_token;
                let v = if shift >= 64 { 0 } else { (packed.0 >> shift) & mask };
                u32::try_from(v).map_err(|_| Error::Corrupt(format!("token {v} exceeds u32")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { codes })
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.codes.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Addresses one row of one n-gram embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NgramFeature {
    pub n: usize,
    pub table_index: usize,
    pub row_index: usize,
}

pub fn num_ngram_tables(levels: usize, n: usize) -> usize {
    levels.saturating_sub(n - 1)
}

pub fn ngram_table_rows(codebook_size: usize, n: usize) -> usize {
    codebook_size.pow(n as u32)
}

/// Contiguous n-grams of a Semantic ID. Only unigrams and bigrams are supported.
pub fn extract_ngrams(sid: &SemanticId, n: usize, codebook_size: usize) -> Result<Vec<NgramFeature>> {
    if !(1..=2).contains(&n) {
        return Err(Error::UnsupportedNgram(n));
    }
    if let Some(&c) = sid.codes.iter().find(|&&c| c as usize >= codebook_size) {
        return Err(Error::InvalidConfig(format!("code {c} outside codebook of size {codebook_size}")));
    }
    Ok(sid
        .codes
        .windows(n)
        .enumerate()
        .map(|(table_index, w)| NgramFeature {
            n,
            table_index,
            row_index: w.iter().fold(0usize, |acc, &c| acc * codebook_size + c as usize),
        })
        .collect())
}

/// Semantic ID of `x` under a frozen model.
pub fn assign_semantic_id(model: &RqVaeModel<f32>, x: &[f32]) -> Result<SemanticId> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let codes = model.codes(x)?.into_iter().map(|c| c as u32).collect();
    SemanticId::new(codes, model.config().codebook_size)
}

/// Storage ratio of a dense `dim`-float embedding to one packed `u64` ID.
pub fn storage_compression_ratio(dim: usize, bytes_per_value: usize) -> f64 {
    (dim * bytes_per_value) as f64 / std::mem::size_of::<u64>() as f64
}

/// Item-to-packed-ID table produced by a frozen model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidMap {
    pub num_levels: u8,
    pub bits_per_token: u8,
    pub entries: Vec<(ItemId, PackedSemanticId)>,
}

impl SidMap {
    pub fn build(model: &RqVaeModel<f32>, items: &[CorpusItem], bits_per_token: u32) -> Result<Self> {
        let k = model.config().codebook_size;
        let levels = model.config().num_levels;
        if bits_per_token < min_bits_per_token(k) {
            return Err(Error::TokenTooWide { code: (k - 1) as u32, bits: bits_per_token });
        }
        let num_levels = u8::try_from(levels).map_err(|_| Error::PackOverflow { levels, bits: bits_per_token })?;
        let bits = u8::try_from(bits_per_token).map_err(|_| Error::PackOverflow { levels, bits: bits_per_token })?;
        let entries = items
            .iter()
            .map(|it| Ok((it.id, assign_semantic_id(model, &it.embedding)?.pack(bits_per_token)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { num_levels, bits_per_token: bits, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unpack_all(&self) -> Result<HashMap<ItemId, SemanticId>> {
        self.entries
            .iter()
            .map(|&(id, p)| Ok((id, SemanticId::unpack(p, self.num_levels as usize, self.bits_per_token as u32)?)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, SID_MAP_MAGIC, SID_MAP_VERSION)?;
        w.write_u32::<LittleEndian>(to_u32(self.entries.len(), "num_items")?)?;
        w.write_u8(self.num_levels)?;
        w.write_u8(self.bits_per_token)?;
        for &(id, p) in &self.entries {
            w.write_u32::<LittleEndian>(id.0)?;
            w.write_u64::<LittleEndian>(p.0)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, SID_MAP_MAGIC, SID_MAP_VERSION)?;
        let n = read_u32(r, "sid map header")? as usize;
        let num_levels = read_u8(r, "sid map header")?;
        let bits_per_token = read_u8(r, "sid map header")?;
        if num_levels == 0 || num_levels as u32 * bits_per_token as u32 > 64 || bits_per_token == 0 {
            return Err(Error::Corrupt(format!("{num_levels} levels of {bits_per_token} bits")));
        }
        let entries = (0..n)
            .map(|_| Ok((ItemId(read_u32(r, "sid map entry")?), PackedSemanticId(read_u64(r, "sid map entry")?))))
            .collect::<Result<Vec<_>>>()?;
        codec::expect_eof(r)?;
        Ok(Self { num_levels, bits_per_token, entries })
    }
}

/// One row of the prefix report.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixRow {
    pub prefix_len: usize,
    /// Mean cosine similarity over (sampled) within-group pairs; `None` when no
    /// group has two members.
    pub avg_cos_sim: Option<f64>,
    pub num_pairs: usize,
    pub p25_size: usize,
    pub p50_size: usize,
    pub p75_size: usize,
    pub num_groups: usize,
}

/// Groups item indices by their first `n` codes.
pub fn prefix_groups(sids: &[&SemanticId], n: usize) -> BTreeMap<Vec<u32>, Vec<usize>> {
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, s) in sids.iter().enumerate() {
        groups.entry(s.prefix(n).to_vec()).or_default().push(i);
    }
    groups
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[usize], p: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// For every prefix length, the mean pairwise cosine similarity of items that
/// share that prefix and the distribution of subtrie sizes.
///
/// Groups with more than `max_pairs_per_bucket` pairs contribute that many
/// seeded random pairs instead of all of them.
pub fn prefix_similarity_report(
    items: &[(&[f32], &SemanticId)],
    max_pairs_per_bucket: usize,
    seed: u64,
) -> Result<Vec<PrefixRow>> {
    if items.is_empty() {
        return Err(Error::Empty("items with semantic ids"));
    }
    let levels = items[0].1.num_levels();
    if items.iter().any(|(_, s)| s.num_levels() != levels) {
        return Err(Error::InvalidConfig("semantic ids of different lengths".into()));
    }
    let sids: Vec<&SemanticId> = items.iter().map(|(_, s)| *s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(levels);
    for n in 1..=levels {
        let groups = prefix_groups(&sids, n);
        let mut sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        sizes.sort_unstable();
        let (mut sum, mut count) = (0f64, 0usize);
        for members in groups.values() {
            let s = members.len();
            if s < 2 {
                continue;
            }
            let total_pairs = s * (s - 1) / 2;
            if total_pairs <= max_pairs_per_bucket {
                for a in 0..s {
                    for b in a + 1..s {
                        sum += cosine(items[members[a]].0, items[members[b]].0);
                        count += 1;
                    }
                }
            } else {
                for _ in 0..max_pairs_per_bucket {
                    let a = rng.random_range(0..s);
                    let mut b = rng.random_range(0..s - 1);
                    if b >= a {
                        b += 1;
                    }
                    sum += cosine(items[members[a]].0, items[members[b]].0);
                    count += 1;
                }
            }
        }
        rows.push(PrefixRow {
            prefix_len: n,
            avg_cos_sim: (count > 0).then(|| sum / count as f64),
            num_pairs: count,
            p25_size: percentile(&sizes, 25.0),
            p50_size: percentile(&sizes, 50.0),
            p75_size: percentile(&sizes, 75.0),
            num_groups: groups.len(),
        });
    }
    Ok(rows)
}

pub fn report_tsv(rows: &[PrefixRow]) -> String {
    let mut s = String::from("prefix_len\tavg_cos_sim\tp25_size\tp50_size\tp75_size\tnum_groups\n");
    for r in rows {
        let sim = r.avg_cos_sim.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.prefix_len, sim, r.p25_size, r.p50_size, r.p75_size, r.num_groups);
    }
    s
}
