//! Independent verification oracles for the mask gradients: forward
//! differences on a perturbed copy of the model, and the exact loss change
//! from zeroing a slot outright. Both go through the ordinary forward path
//! so they share no code with the analytic gradient.

use crate::dataio::Record;
use crate::error::Result;
use crate::model::train::PassCounter;
use crate::model::{loss, CtrModel};
use crate::real::Real;

/// Loss with dimension `dim` of field-table `field` scaled by `factor`.
pub fn scaled_slot_loss<F: Real>(
    model: &CtrModel<F>,
    records: &[&Record],
    field: usize,
    dim: usize,
    factor: F,
    counter: &mut PassCounter,
) -> Result<F> {
    let mut perturbed = model.clone();
    let table = &mut perturbed.tables[field];
    let d = table.dim;
    for row in 0..table.n {
        table.weights[row * d + dim] *= factor;
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let (probs, _) = perturbed.forward(records)?;
    counter.forward_only += 1;
    Ok(loss(&probs, &labels))
}

/// Forward-difference estimate of dL/dalpha_{field,dim} at alpha = 1:
/// (L(1) - L(1 - delta)) / delta. Costs two forward passes.
pub fn finite_diff_oracle<F: Real>(
    model: &CtrModel<F>,
    records: &[&Record],
    field: usize,
    dim: usize,
    delta: f64,
    counter: &mut PassCounter,
) -> Result<f64> {
    let base = scaled_slot_loss(model, records, field, dim, F::one(), counter)?;
    let shrunk = scaled_slot_loss(
        model,
        records,
        field,
        dim,
        F::from_f64(1.0 - delta),
        counter,
    )?;
    Ok((base.into_f64() - shrunk.into_f64()) / delta)
}

/// Exact loss increase from removing a slot entirely: L(0) - L(1).
pub fn exact_loss_change<F: Real>(
    model: &CtrModel<F>,
    records: &[&Record],
    field: usize,
    dim: usize,
    counter: &mut PassCounter,
) -> Result<f64> {
    let base = scaled_slot_loss(model, records, field, dim, F::one(), counter)?;
    let ablated = scaled_slot_loss(model, records, field, dim, F::zero(), counter)?;
    Ok(ablated.into_f64() - base.into_f64())
}
