//! Adam with bias correction. Embedding rows and wide weights update
//! lazily: rows whose gradient is absent from the sparse batch gradient are
//! left untouched, moments included.

use serde::{Deserialize, Serialize};

use crate::model::{CtrModel, Gradients};
use crate::real::Real;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> Moments<F> {
    fn zeros(len: usize) -> Self {
        Moments {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub hyper: AdamHyper,
    pub step: u64,
    bias: Moments<F>,
    linear: Vec<Moments<F>>,
    embedding: Vec<Moments<F>>,
    align: Vec<Moments<F>>,
    mlp_w: Vec<Moments<F>>,
    mlp_b: Vec<Moments<F>>,
}

impl<F: Real> AdamState<F> {
    /// Zeroed moments mirroring the model's parameter shapes.
    pub fn new(model: &CtrModel<F>, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            step: 0,
            bias: Moments::zeros(1),
            linear: model
                .linear
                .weights
                .iter()
                .map(|w| Moments::zeros(w.len()))
                .collect(),
            embedding: model
                .tables
                .iter()
                .map(|t| Moments::zeros(t.weights.len()))
                .collect(),
            align: model
                .align
                .as_ref()
                .map(|ms| ms.iter().map(|m| Moments::zeros(m.weights.len())).collect())
                .unwrap_or_default(),
            mlp_w: model
                .mlp
                .as_ref()
                .map(|mlp| mlp.layers.iter().map(|l| Moments::zeros(l.w.len())).collect())
                .unwrap_or_default(),
            mlp_b: model
                .mlp
                .as_ref()
                .map(|mlp| mlp.layers.iter().map(|l| Moments::zeros(l.b.len())).collect())
                .unwrap_or_default(),
        }
    }
}

struct Corrections<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    inv_bc1: F,
    inv_bc2: F,
}

fn update_slice<F: Real>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    c: &Corrections<F>,
) {
    debug_assert_eq!(params.len(), grads.len());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (F::one() - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (F::one() - c.beta2) * g * g;
        let m_hat = m[i] * c.inv_bc1;
        let v_hat = v[i] * c.inv_bc2;
        params[i] = params[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

/// One Adam step over all parameter groups touched by `grads`.
pub fn adam_step<F: Real>(model: &mut CtrModel<F>, grads: &Gradients<F>, state: &mut AdamState<F>) {
    state.step += 1;
    let t = state.step as i32;
    let beta1 = F::from_f64(state.hyper.beta1);
    let beta2 = F::from_f64(state.hyper.beta2);
    let c = Corrections {
        lr: F::from_f64(state.hyper.lr),
        beta1,
        beta2,
        eps: F::from_f64(state.hyper.eps),
        inv_bc1: F::one() / (F::one() - beta1.powi(t)),
        inv_bc2: F::one() / (F::one() - beta2.powi(t)),
    };

    {
        let mut bias = [model.linear.bias];
        update_slice(&mut bias, &[grads.bias], &mut state.bias.m, &mut state.bias.v, &c);
        model.linear.bias = bias[0];
    }

    for (k, field_grads) in grads.linear.iter().enumerate() {
        let mom = &mut state.linear[k];
        for (&tok, &g) in field_grads {
            let i = tok as usize;
            update_slice(
                &mut model.linear.weights[k][i..=i],
                &[g],
                &mut mom.m[i..=i],
                &mut mom.v[i..=i],
                &c,
            );
        }
    }

    for (k, field_grads) in grads.embedding.iter().enumerate() {
        let dim = model.tables[k].dim;
        let mom = &mut state.embedding[k];
        for (&tok, row_grad) in field_grads {
            let off = tok as usize * dim;
            update_slice(
                &mut model.tables[k].weights[off..off + dim],
                row_grad,
                &mut mom.m[off..off + dim],
                &mut mom.v[off..off + dim],
                &c,
            );
        }
    }

    if let (Some(align), Some(g_align)) = (model.align.as_mut(), grads.align.as_ref()) {
        for (k, g) in g_align.iter().enumerate() {
            let mom = &mut state.align[k];
            update_slice(&mut align[k].weights, g, &mut mom.m, &mut mom.v, &c);
        }
    }

    if let (Some(mlp), Some(g_mlp)) = (model.mlp.as_mut(), grads.mlp.as_ref()) {
        for (li, layer) in mlp.layers.iter_mut().enumerate() {
            let mom_w = &mut state.mlp_w[li];
            update_slice(&mut layer.w, &g_mlp.w[li], &mut mom_w.m, &mut mom_w.v, &c);
            let mom_b = &mut state.mlp_b[li];
            update_slice(&mut layer.b, &g_mlp.b[li], &mut mom_b.m, &mut mom_b.v, &c);
        }
    }
}
