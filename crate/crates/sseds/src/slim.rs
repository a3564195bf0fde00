//! Slim model construction: mixed-dimension tables from pruning, per-field
//! alignment matrices lifting each e_i into R^{d_max}, and winning-ticket
//! inheritance of the surviving pretrained parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    init_mlp, AlignMatrix, CtrModel, InitKind, LinearPart, ModelConfig, Provenance,
};
use crate::pruning::MixedDimTable;
use crate::real::Real;

/// Where the slim embedding values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingInit {
    /// Inherit the surviving pretrained values exactly.
    #[default]
    WinningTicket,
    /// Fresh random values of the searched shapes (ticket ablation).
    Random,
}

/// How the alignment matrices start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignInit {
    #[default]
    Random,
    /// Identity padded with zero rows. With a full mask this reproduces
    /// the pretrained model bit for bit.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlimInit {
    pub embeddings: EmbeddingInit,
    pub align: AlignInit,
}

/// Assemble the slim model from the searched dimensions.
///
/// Embedding tables take the pruned shapes; alignment matrices are
/// d_max x d_i. The wide part is inherited restricted to surviving fields.
/// Deep hidden layers are inherited when their shapes carry over; the
/// input layer is rebuilt for the q * d_max concatenation unless the
/// width is unchanged.
pub fn build_slim<F: Real>(
    mixed: &MixedDimTable<F>,
    pretrained: &CtrModel<F>,
    config: &ModelConfig,
    init: SlimInit,
    seed: u64,
) -> Result<CtrModel<F>> {
    let q = mixed.fields.len();
    if q < 2 {
        return Err(Error::data(format!(
            "insufficient fields: {q} survived pruning, interactions need at least 2"
        )));
    }
    let d_max = mixed.d_max();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tables = match init.embeddings {
        EmbeddingInit::WinningTicket => mixed.fields.clone(),
        EmbeddingInit::Random => mixed
            .fields
            .iter()
            .map(|t| {
                let scale = 1.0 / (t.dim as f64).sqrt();
                let mut fresh = t.clone();
                fresh
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = F::from_f64(rng.gen_range(-scale..scale)));
                fresh
            })
            .collect(),
    };

    let align: Vec<AlignMatrix<F>> = tables
        .iter()
        .map(|t| match init.align {
            AlignInit::Identity => AlignMatrix::identity(d_max, t.dim),
            AlignInit::Random => {
                let scale = 1.0 / (t.dim as f64).sqrt();
                AlignMatrix {
                    out_dim: d_max,
                    in_dim: t.dim,
                    weights: (0..d_max * t.dim)
                        .map(|_| F::from_f64(rng.gen_range(-scale..scale)))
                        .collect(),
                }
            }
        })
        .collect();

    let linear = LinearPart {
        bias: pretrained.linear.bias,
        weights: tables
            .iter()
            .map(|t| pretrained.linear.weights[t.field_id].clone())
            .collect(),
    };

    let mut interaction = InitKind::WinningTicket;
    let mlp = if config.architecture.has_deep() {
        let input_dim = q * d_max;
        let mut mlp = init_mlp(&mut rng, input_dim, &config.hidden);
        let mut inherited_all = true;
        if let Some(old) = &pretrained.mlp {
            for (layer, prev) in mlp.layers.iter_mut().zip(&old.layers) {
                if layer.in_dim == prev.in_dim && layer.out_dim == prev.out_dim {
                    layer.w.copy_from_slice(&prev.w);
                    layer.b.copy_from_slice(&prev.b);
                } else {
                    inherited_all = false;
                }
            }
        } else {
            inherited_all = false;
        }
        if !inherited_all {
            interaction = InitKind::Random;
        }
        Some(mlp)
    } else {
        None
    };

    Ok(CtrModel {
        arch: config.architecture,
        tables,
        align: Some(align),
        linear,
        mlp,
        d_align: d_max,
        provenance: Provenance {
            embeddings: match init.embeddings {
                EmbeddingInit::WinningTicket => InitKind::WinningTicket,
                EmbeddingInit::Random => InitKind::Random,
            },
            align: match init.align {
                AlignInit::Identity => InitKind::Identity,
                AlignInit::Random => InitKind::Random,
            },
            linear: InitKind::WinningTicket,
            interaction,
        },
    })
}
