//! Single-shot saliency pruning: per-slot mask gradients from one
//! forward-backward pass, normalized saliency scores, budget-maximal mask
//! selection, and mixed-dimension table extraction.
//!
//! A slot is a (field, dimension) pair; pruning one costs n_i parameters.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::dataio::Record;
use crate::error::{Error, Result};
use crate::model::train::PassCounter;
use crate::model::{CtrModel, FieldTable};
use crate::real::Real;

/// Gradients of the loss with respect to a multiplicative per-slot mask,
/// evaluated at mask = 1. Shape m x d over the model's tables.
#[derive(Debug, Clone)]
pub struct SlotGradients<F> {
    pub g: Vec<Vec<F>>,
}

/// Normalized saliency scores: s_{i,j} >= 0, summing to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub s: Vec<Vec<f64>>,
}

/// How kept slots are chosen against the parameter budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Greedy over the descending saliency ranking, charging each slot its
    /// n_i parameters, stopping at the first slot that no longer fits.
    #[default]
    WeightedGreedy,
    /// Pure saliency quantile: keep the top floor(kappa * m * d) slots
    /// regardless of their parameter cost.
    Quantile,
}

/// Field-level boolean mask at (field, dimension) granularity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
    /// Saliency of the last kept slot (the induced quantile threshold);
    /// infinity when nothing was kept.
    pub threshold: f64,
    pub kappa: f64,
    pub kept_params: usize,
    pub total_params: usize,
    pub warning: Option<String>,
}

/// Post-pruning embedding tables with heterogeneous per-field widths.
/// Fields whose every dimension was pruned are dropped (q <= m).
#[derive(Debug, Clone)]
pub struct MixedDimTable<F> {
    pub fields: Vec<FieldTable<F>>,
    pub removed_fields: Vec<usize>,
    pub original_dim: usize,
}

impl<F: Real> MixedDimTable<F> {
    pub fn param_count(&self) -> usize {
        self.fields.iter().map(|t| t.param_count()).sum()
    }

    pub fn d_max(&self) -> usize {
        self.fields.iter().map(|t| t.dim).max().unwrap_or(0)
    }
}

fn slot_gradients_from_backward<F: Real>(
    model: &CtrModel<F>,
    grads: &crate::model::Gradients<F>,
) -> SlotGradients<F> {
    let g = model
        .tables
        .iter()
        .enumerate()
        .map(|(k, table)| {
            let mut row = vec![F::zero(); table.dim];
            for (&tok, row_grad) in &grads.embedding[k] {
                let values = table.row(tok);
                for j in 0..table.dim {
                    row[j] += values[j] * row_grad[j];
                }
            }
            row
        })
        .collect();
    SlotGradients { g }
}

/// Exact chain-rule gradient of L(V ⊙ α) w.r.t. the row-broadcast mask
/// α_{i,j} at α = 1, from a single forward-backward pass on `records`.
pub fn compute_slot_gradients<F: Real>(
    model: &CtrModel<F>,
    records: &[&Record],
    counter: &mut PassCounter,
) -> Result<SlotGradients<F>> {
    if records.is_empty() {
        return Err(Error::data("saliency batch is empty"));
    }
    if model.tables.is_empty() {
        return Err(Error::data("model has no embedding tables"));
    }
    let (_, trace) = model.forward(records)?;
    let grads = model.backward(records, &trace)?;
    counter.forward_backward += 1;
    Ok(slot_gradients_from_backward(model, &grads))
}

/// Frozen-logit variant: the backward pass replays the supplied
/// probabilities instead of the model's own forward output. Used by the
/// scale-covariance verification suite.
pub fn compute_slot_gradients_frozen<F: Real>(
    model: &CtrModel<F>,
    records: &[&Record],
    probs: &[F],
) -> Result<SlotGradients<F>> {
    if probs.len() != records.len() {
        return Err(Error::data("frozen probs length mismatch"));
    }
    let (_, mut trace) = model.forward(records)?;
    for (rt, &p) in trace.records.iter_mut().zip(probs) {
        rt.p = p;
    }
    let grads = model.backward(records, &trace)?;
    Ok(slot_gradients_from_backward(model, &grads))
}

/// Normalized magnitudes s_{i,j} = |g_{i,j}| / sum |g|.
pub fn saliency<F: Real>(grads: &SlotGradients<F>) -> Result<SaliencyMap> {
    let total: f64 = grads
        .g
        .iter()
        .flatten()
        .map(|g| g.into_f64().abs())
        .sum();
    if total == 0.0 {
        return Err(Error::numerical("degenerate saliency: all gradients are zero"));
    }
    Ok(SaliencyMap {
        s: grads
            .g
            .iter()
            .map(|row| row.iter().map(|g| g.into_f64().abs() / total).collect())
            .collect(),
    })
}

/// Rank slots by saliency descending (ties broken by ascending
/// (field, dim)) and keep a prefix within the parameter budget
/// kappa * total. Prefix selection makes kept sets nest across budgets.
pub fn select_mask(
    map: &SaliencyMap,
    field_sizes: &[usize],
    kappa: f64,
    mode: SelectionMode,
) -> Result<PruneMask> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::config(format!("kappa must be in (0,1], got {kappa}")));
    }
    if map.s.len() != field_sizes.len() {
        return Err(Error::data("saliency/field_sizes shape mismatch"));
    }
    let m = field_sizes.len();
    let dims: Vec<usize> = map.s.iter().map(|r| r.len()).collect();
    let total_params: usize = field_sizes.iter().zip(&dims).map(|(&n, &d)| n * d).sum();
    let total_slots: usize = dims.iter().sum();

    let mut slots: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..dims[i]).map(move |j| (i, j)))
        .collect();
    slots.sort_by(|&(ai, aj), &(bi, bj)| {
        map.s[bi][bj]
            .partial_cmp(&map.s[ai][aj])
            .unwrap()
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });

    let mut keep = vec![Vec::new(); m];
    for (i, &d) in dims.iter().enumerate() {
        keep[i] = vec![false; d];
    }
    let mut kept_params = 0usize;
    let mut threshold = f64::INFINITY;
    match mode {
        SelectionMode::WeightedGreedy => {
            let budget = kappa * total_params as f64;
            for &(i, j) in &slots {
                if (kept_params + field_sizes[i]) as f64 > budget {
                    break;
                }
                kept_params += field_sizes[i];
                keep[i][j] = true;
                threshold = map.s[i][j];
            }
        }
        SelectionMode::Quantile => {
            let k = (kappa * total_slots as f64).floor() as usize;
            for &(i, j) in slots.iter().take(k) {
                kept_params += field_sizes[i];
                keep[i][j] = true;
                threshold = map.s[i][j];
            }
        }
    }
    let warning = (kept_params == 0)
        .then(|| "budget below the smallest field size: every field pruned".to_string());
    Ok(PruneMask {
        keep,
        threshold,
        kappa,
        kept_params,
        total_params,
        warning,
    })
}

/// Extract kept dimensions per field, preserving order and exact
/// pretrained values. Fields with no kept dimensions are removed.
pub fn apply_mask<F: Real>(tables: &[FieldTable<F>], mask: &PruneMask) -> Result<MixedDimTable<F>> {
    if tables.len() != mask.keep.len() {
        return Err(Error::data("mask/tables shape mismatch"));
    }
    let original_dim = tables.iter().map(|t| t.dim).max().unwrap_or(0);
    let mut fields = Vec::new();
    let mut removed = Vec::new();
    for (table, keep) in tables.iter().zip(&mask.keep) {
        if keep.len() != table.dim {
            return Err(Error::data("mask width does not match table dim"));
        }
        let kept_dims: Vec<u32> = (0..table.dim as u32)
            .filter(|&j| keep[j as usize])
            .collect();
        if kept_dims.is_empty() {
            removed.push(table.field_id);
            continue;
        }
        let dim = kept_dims.len();
        let mut weights = Vec::with_capacity(table.n * dim);
        for row in 0..table.n {
            for &j in &kept_dims {
                weights.push(table.weights[row * table.dim + j as usize]);
            }
        }
        fields.push(FieldTable {
            field_id: table.field_id,
            n: table.n,
            dim,
            kept_dims,
            weights,
        });
    }
    Ok(MixedDimTable {
        fields,
        removed_fields: removed,
        original_dim,
    })
}

#[cfg(test)]
mod tests;
