//! Dataset ingestion: schemas, vocabularies with low-frequency bucketing,
//! deterministic splits and batching, and the synthetic benchmark generator.

pub mod cache;
pub mod formats;
pub mod synth;
pub mod transform;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical vs (raw) numeric feature field. Numeric fields are
/// discretized by [`transform::transform_numeric`] at ingest time and share
/// the categorical embedding path afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSchema {
    pub field_id: usize,
    pub kind: FieldKind,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::data("schema must have at least one field"));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.field_id != i {
                return Err(Error::data(format!(
                    "field ids must be contiguous: expected {i}, got {}",
                    f.field_id
                )));
            }
        }
        Ok(Schema { fields })
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }
}

/// Reserved id for the merged low-frequency bucket; also the target for
/// missing values and tokens unseen during vocabulary construction.
pub const OTHERS_ID: u32 = 0;
pub const OTHERS_TOKEN: &str = "<others>";

/// Per-field token -> id map. Id 0 is always the "others" bucket; surviving
/// tokens occupy 1..n_i in lexicographic order for determinism.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldVocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl FieldVocab {
    fn from_sorted(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + 1) as u32))
            .collect();
        FieldVocab { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + 1) as u32))
            .collect();
    }

    /// Vocabulary size n_i including the "others" bucket.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OTHERS_ID)
    }

    pub fn token_name(&self, id: u32) -> &str {
        if id == OTHERS_ID {
            OTHERS_TOKEN
        } else {
            &self.tokens[(id - 1) as usize]
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub fields: Vec<FieldVocab>,
}

impl Vocabulary {
    pub fn reindex(&mut self) {
        for f in &mut self.fields {
            f.reindex();
        }
    }

    pub fn field_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.size()).collect()
    }
}

/// Build a single field's vocabulary from token counts.
///
/// Tokens with frequency < `min_freq` all collapse into the "others" bucket
/// (id 0). Counts must come from the training split only.
pub fn build_field_vocab(counts: &HashMap<String, u64>, min_freq: u64) -> Result<FieldVocab> {
    if counts.is_empty() {
        return Err(Error::data("empty field"));
    }
    let mut kept: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c >= min_freq)
        .map(|(t, _)| t.clone())
        .collect();
    kept.sort_unstable();
    Ok(FieldVocab::from_sorted(kept))
}

/// Build per-field vocabularies from streams of raw tokens.
pub fn build_vocab<I, S>(field_streams: Vec<I>, min_freq: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_freq < 1 {
        return Err(Error::config("min_freq must be >= 1"));
    }
    let mut fields = Vec::new();
    for stream in field_streams {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in stream {
            *counts.entry(tok.as_ref().to_owned()).or_insert(0) += 1;
        }
        fields.push(build_field_vocab(&counts, min_freq)?);
    }
    Ok(Vocabulary { fields })
}

/// One encoded training instance: one categorical id per field plus the
/// binary click label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub tokens: Vec<u32>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: Schema,
    /// n_i per field; every record token must be < n_i.
    pub field_sizes: Vec<usize>,
    pub records: Vec<Record>,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn new(
        schema: Schema,
        field_sizes: Vec<usize>,
        records: Vec<Record>,
        tag: SplitTag,
    ) -> Result<Self> {
        let m = schema.num_fields();
        if field_sizes.len() != m {
            return Err(Error::data("field_sizes length does not match schema"));
        }
        for (ri, r) in records.iter().enumerate() {
            if r.tokens.len() != m {
                return Err(Error::data(format!("record {ri} has wrong field count")));
            }
            if r.label > 1 {
                return Err(Error::data(format!("record {ri} label not in {{0,1}}")));
            }
            for (i, &t) in r.tokens.iter().enumerate() {
                if t as usize >= field_sizes[i] {
                    return Err(Error::data(format!(
                        "record {ri} token {t} out of range for field {i} (n={})",
                        field_sizes[i]
                    )));
                }
            }
        }
        Ok(Dataset {
            schema,
            field_sizes,
            records,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn with_records(&self, records: Vec<Record>, tag: SplitTag) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            field_sizes: self.field_sizes.clone(),
            records,
            tag,
        }
    }
}

/// Deterministic 3-way index partition by ratio under a seeded permutation.
///
/// Partition sizes follow the largest-remainder rule, so each differs from
/// the exact ratio by less than one record.
pub fn split_indices(
    n: usize,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::config("split ratios must be positive"));
    }
    if n < 3 {
        return Err(Error::data("fewer records than partitions"));
    }
    let total = (a + b + c) as f64;
    let shares = [a, b, c].map(|r| n as f64 * r as f64 / total);
    let mut sizes = shares.map(|s| s.floor() as usize);
    // Hand out the remainder by largest fractional part, ties to earlier parts.
    let mut rem = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let fi = shares[i] - shares[i].floor();
        let fj = shares[j] - shares[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in &order {
        if rem == 0 {
            break;
        }
        sizes[i] += 1;
        rem -= 1;
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let valid_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok((
        perm[..valid_start].to_vec(),
        perm[valid_start..test_start].to_vec(),
        perm[test_start..].to_vec(),
    ))
}

/// Deterministically split a dataset by ratio (train, valid, test).
pub fn split(dataset: &Dataset, ratios: (u32, u32, u32), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = split_indices(dataset.len(), ratios, seed)?;
    let take = |idx: &[usize], tag: SplitTag| {
        dataset.with_records(idx.iter().map(|&i| dataset.records[i].clone()).collect(), tag)
    };
    Ok((
        take(&tr, SplitTag::Train),
        take(&va, SplitTag::Valid),
        take(&te, SplitTag::Test),
    ))
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a Record>,
    pub batch_index: usize,
}

/// Deterministic epoch iteration: every record exactly once, final batch may
/// be short. `shuffle=false` preserves dataset order.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch<'_>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(batch_index, chunk)| Batch {
            records: chunk.iter().map(|&i| &dataset.records[i]).collect(),
            batch_index,
        })
        .collect()
}

/// Synthetic schema with `m` anonymous categorical fields.
pub fn synthetic_schema(m: usize) -> Schema {
    Schema {
        fields: (0..m)
            .map(|i| FieldSchema {
                field_id: i,
                kind: FieldKind::Categorical,
                name: format!("f{i}"),
            })
            .collect(),
    }
}
