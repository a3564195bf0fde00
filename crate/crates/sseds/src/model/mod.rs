//! The training engine: embedding tables, FM / Wide&Deep / DeepFM
//! interaction layers with hand-derived forward and backward passes.
//!
//! One struct covers both the pretrained model (uniform dimension, no
//! alignment) and the slim model (mixed dimensions behind field-wise
//! transform matrices), so the two share every line of interaction math.

pub mod adam;
pub mod checkpoint;
pub mod train;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Record;
use crate::error::{Error, Result};
use crate::real::Real;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fm,
    WideDeep,
    DeepFm,
}

impl Architecture {
    pub fn has_fm(self) -> bool {
        matches!(self, Architecture::Fm | Architecture::DeepFm)
    }
    pub fn has_deep(self) -> bool {
        matches!(self, Architecture::WideDeep | Architecture::DeepFm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Initial (pre-pruning) embedding dimension, shared by all fields.
    pub embedding_dim: usize,
    /// Hidden layer widths of the deep component.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::DeepFm,
            embedding_dim: 128,
            hidden: vec![1024, 1024],
        }
    }
}

/// How a parameter group was initialized, persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    WinningTicket,
    Identity,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub embeddings: InitKind,
    pub align: InitKind,
    pub linear: InitKind,
    pub interaction: InitKind,
}

impl Provenance {
    pub fn fresh() -> Self {
        Provenance {
            embeddings: InitKind::Random,
            align: InitKind::Absent,
            linear: InitKind::Random,
            interaction: InitKind::Random,
        }
    }
}

/// One field's embedding table: `n` rows of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable<F> {
    pub field_id: usize,
    pub n: usize,
    pub dim: usize,
    /// Which of the original `d` dimensions each column corresponds to;
    /// identity for unpruned tables.
    pub kept_dims: Vec<u32>,
    pub weights: Vec<F>,
}

impl<F: Real> FieldTable<F> {
    pub fn row(&self, token: u32) -> &[F] {
        let t = token as usize;
        &self.weights[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, token: u32) -> &mut [F] {
        let t = token as usize;
        &mut self.weights[t * self.dim..(t + 1) * self.dim]
    }

    pub fn param_count(&self) -> usize {
        self.n * self.dim
    }
}

/// Field-wise transform matrix, `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignMatrix<F> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<F>,
}

impl<F: Real> AlignMatrix<F> {
    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        debug_assert_eq!(v.len(), self.in_dim);
        (0..self.out_dim)
            .map(|r| {
                let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
                let mut acc = F::zero();
                for (w, x) in row.iter().zip(v) {
                    acc += *w * *x;
                }
                acc
            })
            .collect()
    }

    /// Identity padded with zero rows below the diagonal.
    pub fn identity(out_dim: usize, in_dim: usize) -> Self {
        let mut weights = vec![F::zero(); out_dim * in_dim];
        for c in 0..in_dim.min(out_dim) {
            weights[c * in_dim + c] = F::one();
        }
        AlignMatrix {
            out_dim,
            in_dim,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// out_dim x in_dim, row-major.
    pub w: Vec<F>,
    pub b: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<DenseLayer<F>>,
}

/// Wide component: global bias plus one scalar weight per token per field.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPart<F> {
    pub bias: F,
    pub weights: Vec<Vec<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel<F> {
    pub arch: Architecture,
    pub tables: Vec<FieldTable<F>>,
    /// Field-wise transform matrices of the slim model; `None` before
    /// pruning.
    pub align: Option<Vec<AlignMatrix<F>>>,
    pub linear: LinearPart<F>,
    pub mlp: Option<Mlp<F>>,
    /// Embedding width seen by the interaction layers (d, or d_max when
    /// aligned).
    pub d_align: usize,
    pub provenance: Provenance,
}

fn uniform<F: Real, R: Rng>(rng: &mut R, scale: f64) -> F {
    F::from_f64(rng.gen_range(-scale..scale))
}

pub fn init_mlp<F: Real, R: Rng>(rng: &mut R, input_dim: usize, hidden: &[usize]) -> Mlp<F> {
    let mut layers = Vec::new();
    let mut in_dim = input_dim;
    for &h in hidden.iter().chain(std::iter::once(&1)) {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = (0..h * in_dim).map(|_| uniform(rng, scale)).collect();
        let b = vec![F::zero(); h];
        layers.push(DenseLayer {
            in_dim,
            out_dim: h,
            w,
            b,
        });
        in_dim = h;
    }
    Mlp { layers }
}

impl<F: Real> CtrModel<F> {
    /// Fresh uniform-dimension model. Embeddings are uniform in
    /// [-1/sqrt(d), 1/sqrt(d)]; the wide part starts at zero.
    pub fn init(config: &ModelConfig, field_sizes: &[usize], seed: u64) -> Result<Self> {
        if config.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be >= 1"));
        }
        if field_sizes.is_empty() {
            return Err(Error::config("need at least one field"));
        }
        let d = config.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let tables = field_sizes
            .iter()
            .enumerate()
            .map(|(field_id, &n)| FieldTable {
                field_id,
                n,
                dim: d,
                kept_dims: (0..d as u32).collect(),
                weights: (0..n * d).map(|_| uniform(&mut rng, scale)).collect(),
            })
            .collect();
        let linear = LinearPart {
            bias: F::zero(),
            weights: field_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        };
        let mlp = config.architecture.has_deep().then(|| {
            init_mlp(&mut rng, field_sizes.len() * d, &config.hidden)
        });
        Ok(CtrModel {
            arch: config.architecture,
            tables,
            align: None,
            linear,
            mlp,
            d_align: d,
            provenance: Provenance::fresh(),
        })
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    /// Total embedding parameters (the budget denominator counts only these).
    pub fn embedding_param_count(&self) -> usize {
        self.tables.iter().map(|t| t.param_count()).sum()
    }

    pub fn align_param_count(&self) -> usize {
        self.align
            .as_ref()
            .map(|ms| ms.iter().map(|m| m.weights.len()).sum())
            .unwrap_or(0)
    }

    pub fn interaction_param_count(&self) -> usize {
        let lin: usize = 1 + self.linear.weights.iter().map(|w| w.len()).sum::<usize>();
        let deep: usize = self
            .mlp
            .as_ref()
            .map(|mlp| mlp.layers.iter().map(|l| l.w.len() + l.b.len()).sum())
            .unwrap_or(0);
        lin + deep
    }

    fn lookup_token(&self, k: usize, record: &Record) -> Result<u32> {
        let table = &self.tables[k];
        let t = *record
            .tokens
            .get(table.field_id)
            .ok_or_else(|| Error::data("record has too few fields"))?;
        if t as usize >= table.n {
            return Err(Error::data(format!(
                "token {t} out of range for field {} (n={})",
                table.field_id, table.n
            )));
        }
        Ok(t)
    }

    /// Embedding lookup for one record: e_k = row of table k at its token.
    pub fn embed_lookup(&self, record: &Record) -> Result<Vec<Vec<F>>> {
        (0..self.tables.len())
            .map(|k| {
                let t = self.lookup_token(k, record)?;
                Ok(self.tables[k].row(t).to_vec())
            })
            .collect()
    }

    /// Forward pass over a batch, returning clamped probabilities and the
    /// trace consumed by [`CtrModel::backward`].
    pub fn forward(&self, records: &[&Record]) -> Result<(Vec<F>, ForwardTrace<F>)> {
        let mut probs = Vec::with_capacity(records.len());
        let mut traces = Vec::with_capacity(records.len());
        for record in records {
            let trace = self.forward_record(record)?;
            probs.push(trace.p);
            traces.push(trace);
        }
        Ok((
            probs,
            ForwardTrace {
                records: traces,
                tokens: records.iter().map(|r| r.tokens.clone()).collect(),
            },
        ))
    }

    fn forward_record(&self, record: &Record) -> Result<RecordTrace<F>> {
        let q = self.tables.len();
        let mut raw = Vec::with_capacity(q);
        let mut aligned = Vec::with_capacity(q);
        let mut z = self.linear.bias;
        for k in 0..q {
            let t = self.lookup_token(k, record)?;
            z += self.linear.weights[k][t as usize];
            let e = self.tables[k].row(t);
            let a = match &self.align {
                Some(ms) => {
                    let a = ms[k].matvec(e);
                    raw.push(e.to_vec());
                    a
                }
                None => e.to_vec(),
            };
            aligned.push(a);
        }

        let mut sum_vec = Vec::new();
        if self.arch.has_fm() {
            sum_vec = vec![F::zero(); self.d_align];
            let mut sq = F::zero();
            for a in &aligned {
                for (s, &x) in sum_vec.iter_mut().zip(a) {
                    *s += x;
                }
                for &x in a {
                    sq += x * x;
                }
            }
            let mut dot = F::zero();
            for &s in &sum_vec {
                dot += s * s;
            }
            z += F::from_f64(0.5) * (dot - sq);
        }

        let mlp_trace = if let Some(mlp) = &self.mlp {
            let mut x: Vec<F> = Vec::with_capacity(q * self.d_align);
            for a in &aligned {
                x.extend_from_slice(a);
            }
            let (out, trace) = mlp_forward(mlp, x);
            z += out;
            Some(trace)
        } else {
            None
        };

        if !z.is_finite() {
            return Err(Error::numerical("numerical blowup: non-finite logit"));
        }
        let p = sigmoid_clamped(z);
        Ok(RecordTrace {
            raw_emb: raw,
            aligned,
            sum_vec,
            mlp: mlp_trace,
            z,
            p,
        })
    }

    /// Backward pass for the trace produced by `forward` on the same batch.
    /// Embedding and wide gradients are sparse over the tokens present.
    pub fn backward(&self, records: &[&Record], trace: &ForwardTrace<F>) -> Result<Gradients<F>> {
        if trace.records.len() != records.len()
            || !trace
                .tokens
                .iter()
                .zip(records)
                .all(|(toks, r)| toks == &r.tokens)
        {
            return Err(Error::data("stale trace: batch does not match"));
        }
        let q = self.tables.len();
        let mut grads = Gradients {
            bias: F::zero(),
            linear: vec![BTreeMap::new(); q],
            embedding: vec![BTreeMap::new(); q],
            align: self.align.as_ref().map(|ms| {
                ms.iter().map(|m| vec![F::zero(); m.weights.len()]).collect()
            }),
            mlp: self.mlp.as_ref().map(|mlp| MlpGrads {
                w: mlp.layers.iter().map(|l| vec![F::zero(); l.w.len()]).collect(),
                b: mlp.layers.iter().map(|l| vec![F::zero(); l.b.len()]).collect(),
            }),
        };

        for (record, rt) in records.iter().zip(&trace.records) {
            let dz = rt.p - F::from_f64(record.label as f64);
            grads.bias += dz;
            let mut d_aligned = vec![vec![F::zero(); self.d_align]; q];

            if self.arch.has_fm() {
                for (k, a) in rt.aligned.iter().enumerate() {
                    for j in 0..self.d_align {
                        d_aligned[k][j] += dz * (rt.sum_vec[j] - a[j]);
                    }
                }
            }

            if let Some(mlp) = &self.mlp {
                let mg = grads.mlp.as_mut().unwrap();
                let d_input = mlp_backward(mlp, rt.mlp.as_ref().unwrap(), dz, mg);
                for (k, d_a) in d_aligned.iter_mut().enumerate() {
                    let off = k * self.d_align;
                    for j in 0..self.d_align {
                        d_a[j] += d_input[off + j];
                    }
                }
            }

            for k in 0..q {
                let t = self.lookup_token(k, record)?;
                *grads.linear[k].entry(t).or_insert_with(F::zero) += dz;
                match &self.align {
                    Some(ms) => {
                        let m = &ms[k];
                        let gm = &mut grads.align.as_mut().unwrap()[k];
                        let raw = &rt.raw_emb[k];
                        let row_grad = grads.embedding[k]
                            .entry(t)
                            .or_insert_with(|| vec![F::zero(); m.in_dim]);
                        for r in 0..m.out_dim {
                            let d_out = d_aligned[k][r];
                            for c in 0..m.in_dim {
                                gm[r * m.in_dim + c] += d_out * raw[c];
                                row_grad[c] += m.weights[r * m.in_dim + c] * d_out;
                            }
                        }
                    }
                    None => {
                        let row_grad = grads.embedding[k]
                            .entry(t)
                            .or_insert_with(|| vec![F::zero(); self.tables[k].dim]);
                        for (g, &d) in row_grad.iter_mut().zip(&d_aligned[k]) {
                            *g += d;
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn mlp_forward<F: Real>(mlp: &Mlp<F>, input: Vec<F>) -> (F, MlpTrace<F>) {
    let n_layers = mlp.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pres = Vec::with_capacity(n_layers);
    let mut x = input;
    for (li, layer) in mlp.layers.iter().enumerate() {
        let mut pre = vec![F::zero(); layer.out_dim];
        for (r, p) in pre.iter_mut().enumerate() {
            let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            let mut acc = layer.b[r];
            for (w, v) in row.iter().zip(&x) {
                acc += *w * *v;
            }
            *p = acc;
        }
        inputs.push(x);
        let last = li + 1 == n_layers;
        x = if last {
            pre.clone()
        } else {
            pre.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
        };
        pres.push(pre);
    }
    (x[0], MlpTrace { inputs, pres })
}

fn mlp_backward<F: Real>(
    mlp: &Mlp<F>,
    trace: &MlpTrace<F>,
    dz: F,
    grads: &mut MlpGrads<F>,
) -> Vec<F> {
    let n_layers = mlp.layers.len();
    let mut d_out = vec![dz];
    for li in (0..n_layers).rev() {
        let layer = &mlp.layers[li];
        let last = li + 1 == n_layers;
        let d_pre: Vec<F> = if last {
            d_out
        } else {
            trace.pres[li]
                .iter()
                .zip(&d_out)
                .map(|(&pre, &d)| if pre > F::zero() { d } else { F::zero() })
                .collect()
        };
        let input = &trace.inputs[li];
        let mut d_in = vec![F::zero(); layer.in_dim];
        for r in 0..layer.out_dim {
            let d = d_pre[r];
            grads.b[li][r] += d;
            let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            let grow = &mut grads.w[li][r * layer.in_dim..(r + 1) * layer.in_dim];
            for c in 0..layer.in_dim {
                grow[c] += d * input[c];
                d_in[c] += row[c] * d;
            }
        }
        d_out = d_in;
    }
    d_out
}

pub fn sigmoid_clamped<F: Real>(z: F) -> F {
    let p = F::one() / (F::one() + (-z).exp());
    let lo = F::from_f64(PROB_CLAMP);
    let hi = F::one() - lo;
    p.max(lo).min(hi)
}

/// Sum-reduction cross-entropy over a batch.
pub fn loss<F: Real>(probs: &[F], labels: &[u8]) -> F {
    debug_assert_eq!(probs.len(), labels.len());
    let mut total = F::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        total -= if y == 1 { p.ln() } else { (F::one() - p).ln() };
    }
    total
}

pub fn batch_labels(records: &[&Record]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

#[derive(Debug, Clone)]
pub struct MlpTrace<F> {
    /// Input vector of each layer.
    pub inputs: Vec<Vec<F>>,
    /// Pre-activation of each layer.
    pub pres: Vec<Vec<F>>,
}

#[derive(Debug, Clone)]
pub struct RecordTrace<F> {
    /// Pre-alignment embeddings (only populated when align matrices exist).
    pub raw_emb: Vec<Vec<F>>,
    pub aligned: Vec<Vec<F>>,
    pub sum_vec: Vec<F>,
    pub mlp: Option<MlpTrace<F>>,
    pub z: F,
    pub p: F,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub records: Vec<RecordTrace<F>>,
    tokens: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads<F> {
    pub w: Vec<Vec<F>>,
    pub b: Vec<Vec<F>>,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub bias: F,
    /// Per field: token -> wide-weight gradient.
    pub linear: Vec<BTreeMap<u32, F>>,
    /// Per field: token -> embedding row gradient.
    pub embedding: Vec<BTreeMap<u32, Vec<F>>>,
    pub align: Option<Vec<Vec<F>>>,
    pub mlp: Option<MlpGrads<F>>,
}

#[cfg(test)]
mod tests;
