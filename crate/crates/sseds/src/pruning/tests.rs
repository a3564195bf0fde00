use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{exact_loss_change, finite_diff_oracle, scaled_slot_loss};
use super::*;
use crate::model::train::PassCounter;
use crate::model::{Architecture, CtrModel, ModelConfig};

fn planted_model(
    arch: Architecture,
    m: usize,
    d: usize,
    seed: u64,
) -> (CtrModel<f64>, Vec<Record>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field_sizes: Vec<usize> = (0..m).map(|_| rng.gen_range(4..=16)).collect();
    let config = ModelConfig {
        architecture: arch,
        embedding_dim: d,
        hidden: vec![5, 4],
    };
    let model = CtrModel::init(&config, &field_sizes, rng.gen()).unwrap();
    let records: Vec<Record> = (0..16)
        .map(|_| Record {
            tokens: field_sizes
                .iter()
                .map(|&n| rng.gen_range(0..n) as u32)
                .collect(),
            label: rng.gen_range(0..2) as u8,
        })
        .collect();
    (model, records)
}

#[test]
fn saliency_hand_normalization() {
    // g = [[1,-1],[2,0]] -> |g| sums to 4 -> s = [[.25,.25],[.5,0]]
    let grads = SlotGradients {
        g: vec![vec![1.0f64, -1.0], vec![2.0, 0.0]],
    };
    let map = saliency(&grads).unwrap();
    assert_eq!(map.s, vec![vec![0.25, 0.25], vec![0.5, 0.0]]);
}

#[test]
fn saliency_all_zero_is_error() {
    let grads = SlotGradients {
        g: vec![vec![0.0f64; 3]; 2],
    };
    let err = saliency(&grads).unwrap_err();
    assert!(err.to_string().contains("degenerate saliency"));
}

#[test]
fn empty_batch_is_error() {
    let (model, _) = planted_model(Architecture::Fm, 2, 2, 0);
    let mut counter = PassCounter::default();
    assert!(compute_slot_gradients(&model, &[], &mut counter).is_err());
}

#[test]
fn one_forward_backward_pass_exactly() {
    let (model, records) = planted_model(Architecture::DeepFm, 3, 4, 1);
    let refs: Vec<&Record> = records.iter().collect();
    let mut counter = PassCounter::default();
    compute_slot_gradients(&model, &refs, &mut counter).unwrap();
    assert_eq!(counter.forward_backward, 1);
    assert_eq!(counter.forward_only, 0);
}

#[test]
fn slot_gradient_matches_central_difference() {
    // independent oracle: central differences on the multiplicative mask,
    // h = 1e-5 in f64, relative tolerance 1e-6
    let h = 1e-5;
    for (si, arch) in [Architecture::Fm, Architecture::WideDeep, Architecture::DeepFm]
        .into_iter()
        .enumerate()
    {
        let (model, records) = planted_model(arch, 3, 3, 40 + si as u64);
        let refs: Vec<&Record> = records.iter().collect();
        let mut counter = PassCounter::default();
        let grads = compute_slot_gradients(&model, &refs, &mut counter).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let plus =
                    scaled_slot_loss(&model, &refs, i, j, 1.0 + h, &mut counter).unwrap();
                let minus =
                    scaled_slot_loss(&model, &refs, i, j, 1.0 - h, &mut counter).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let g = grads.g[i][j];
                let denom = g.abs().max(1e-8);
                assert!(
                    (fd - g).abs() / denom < 1e-6,
                    "{arch:?} slot ({i},{j}): analytic {g} vs fd {fd}"
                );
            }
        }
    }
}

#[test]
fn forward_diff_oracle_counts_two_forwards() {
    let (model, records) = planted_model(Architecture::Fm, 2, 2, 5);
    let refs: Vec<&Record> = records.iter().collect();
    let mut counter = PassCounter::default();
    finite_diff_oracle(&model, &refs, 0, 1, 1e-3, &mut counter).unwrap();
    assert_eq!(counter.forward_only, 2);
    assert_eq!(counter.forward_backward, 0);
}

#[test]
fn exact_ablation_of_dead_slot_is_zero() {
    // zero out one column; removing it must not change the loss
    let (mut model, records) = planted_model(Architecture::Fm, 3, 3, 6);
    for row in 0..model.tables[1].n {
        let d = model.tables[1].dim;
        model.tables[1].weights[row * d + 2] = 0.0;
    }
    let refs: Vec<&Record> = records.iter().collect();
    let mut counter = PassCounter::default();
    let delta = exact_loss_change(&model, &refs, 1, 2, &mut counter).unwrap();
    assert_eq!(delta, 0.0);
}

#[test]
fn frozen_logit_scaling_preserves_ranking() {
    // with p frozen, scaling every embedding by c scales each mask
    // gradient by exactly c^2 for the FM interaction, so the saliency
    // ranking is invariant
    let (model, records) = planted_model(Architecture::Fm, 3, 4, 8);
    let refs: Vec<&Record> = records.iter().collect();
    let (probs, _) = model.forward(&refs).unwrap();

    let c = 1.7;
    let mut scaled = model.clone();
    for t in &mut scaled.tables {
        t.weights.iter_mut().for_each(|w| *w *= c);
    }
    // keep the wide part out of the comparison: its mask gradient is zero
    for w in &mut scaled.linear.weights {
        w.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut base_model = model.clone();
    for w in &mut base_model.linear.weights {
        w.iter_mut().for_each(|x| *x = 0.0);
    }
    let base = compute_slot_gradients_frozen(&base_model, &refs, &probs).unwrap();
    let after = compute_slot_gradients_frozen(&scaled, &refs, &probs).unwrap();
    for i in 0..base.g.len() {
        for j in 0..base.g[i].len() {
            assert!(
                (after.g[i][j] - c * c * base.g[i][j]).abs() < 1e-9,
                "slot ({i},{j})"
            );
        }
    }
    let rank = |g: &SlotGradients<f64>| {
        let mut idx: Vec<(usize, usize)> = (0..g.g.len())
            .flat_map(|i| (0..g.g[i].len()).map(move |j| (i, j)))
            .collect();
        idx.sort_by(|&(ai, aj), &(bi, bj)| {
            g.g[bi][bj]
                .abs()
                .partial_cmp(&g.g[ai][aj].abs())
                .unwrap()
                .then(ai.cmp(&bi))
                .then(aj.cmp(&bj))
        });
        idx
    };
    assert_eq!(rank(&base), rank(&after));
}

#[test]
fn budget_hand_example() {
    // m=2, d=2, n=(10,10): total = 40 params, kappa=0.5 -> budget 20
    // params = 2 slots; the two highest-saliency slots are kept
    let map = SaliencyMap {
        s: vec![vec![0.4, 0.1], vec![0.3, 0.2]],
    };
    let mask = select_mask(&map, &[10, 10], 0.5, SelectionMode::WeightedGreedy).unwrap();
    assert_eq!(mask.keep, vec![vec![true, false], vec![true, false]]);
    assert_eq!(mask.kept_params, 20);
    assert_eq!(mask.total_params, 40);
    assert_eq!(mask.threshold, 0.3);
    assert!(mask.warning.is_none());
}

#[test]
fn kappa_one_keeps_everything() {
    let map = SaliencyMap {
        s: vec![vec![0.4, 0.1], vec![0.3, 0.2]],
    };
    let mask = select_mask(&map, &[7, 9], 1.0, SelectionMode::WeightedGreedy).unwrap();
    assert!(mask.keep.iter().flatten().all(|&k| k));
    assert_eq!(mask.kept_params, mask.total_params);
}

#[test]
fn kappa_out_of_range_is_config_error() {
    let map = SaliencyMap {
        s: vec![vec![1.0]],
    };
    for kappa in [0.0, -0.1, 1.5] {
        let err = select_mask(&map, &[3], kappa, SelectionMode::WeightedGreedy).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn unsatisfiable_budget_yields_empty_mask_with_warning() {
    // budget of 0.01 * 40 = 0.4 params cannot fit any n_i = 10 slot
    let map = SaliencyMap {
        s: vec![vec![0.4, 0.1], vec![0.3, 0.2]],
    };
    let mask = select_mask(&map, &[10, 10], 0.01, SelectionMode::WeightedGreedy).unwrap();
    assert_eq!(mask.kept_params, 0);
    assert!(mask.keep.iter().flatten().all(|&k| !k));
    assert!(mask.warning.is_some());
    assert_eq!(mask.threshold, f64::INFINITY);
}

#[test]
fn weighted_greedy_prefers_cheap_fields_at_tight_budgets() {
    // field 0 is 100x cheaper; a budget too small for field 1 slots can
    // still keep field 0 slots ranked below them? no: prefix-greedy stops
    // at the first slot that does not fit, so the expensive top slot
    // blocks everything after it
    let map = SaliencyMap {
        s: vec![vec![0.1], vec![0.9]],
    };
    let mask = select_mask(&map, &[1, 100], 0.05, SelectionMode::WeightedGreedy).unwrap();
    // budget = 5.05 params; top slot costs 100 -> stop immediately
    assert_eq!(mask.kept_params, 0);
}

#[test]
fn quantile_mode_counts_slots_not_params() {
    let map = SaliencyMap {
        s: vec![vec![0.4, 0.1], vec![0.3, 0.2]],
    };
    // kappa=0.5 of 4 slots -> keep top 2 by saliency, ignoring that the
    // fields have very different sizes
    let mask = select_mask(&map, &[1, 1000], 0.5, SelectionMode::Quantile).unwrap();
    assert_eq!(mask.keep, vec![vec![true, false], vec![true, false]]);
    assert_eq!(mask.kept_params, 1001);
}

#[test]
fn ties_break_by_ascending_field_then_dim() {
    let map = SaliencyMap {
        s: vec![vec![0.25, 0.25], vec![0.25, 0.25]],
    };
    let mask = select_mask(&map, &[2, 2], 0.5, SelectionMode::WeightedGreedy).unwrap();
    assert_eq!(mask.keep, vec![vec![true, true], vec![false, false]]);
}

#[test]
fn apply_mask_preserves_values_bitwise_and_drops_empty_fields() {
    let (model, _) = planted_model(Architecture::Fm, 3, 4, 12);
    let mask = PruneMask {
        keep: vec![
            vec![true, false, true, false],
            vec![false, false, false, false],
            vec![false, true, true, true],
        ],
        threshold: 0.0,
        kappa: 0.5,
        kept_params: 0,
        total_params: 0,
        warning: None,
    };
    let mixed = apply_mask(&model.tables, &mask).unwrap();
    assert_eq!(mixed.fields.len(), 2);
    assert_eq!(mixed.removed_fields, vec![1]);
    assert_eq!(mixed.original_dim, 4);
    let f0 = &mixed.fields[0];
    assert_eq!(f0.field_id, 0);
    assert_eq!(f0.kept_dims, vec![0, 2]);
    for row in 0..f0.n {
        assert_eq!(f0.row(row as u32)[0].to_bits(), model.tables[0].row(row as u32)[0].to_bits());
        assert_eq!(f0.row(row as u32)[1].to_bits(), model.tables[0].row(row as u32)[2].to_bits());
    }
    let f2 = &mixed.fields[1];
    assert_eq!(f2.field_id, 2);
    assert_eq!(f2.kept_dims, vec![1, 2, 3]);
    assert_eq!(mixed.d_max(), 3);
}

fn saliency_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..5, 2usize..6).prop_flat_map(|(m, d)| {
        (
            proptest::collection::vec(
                proptest::collection::vec(0.0f64..10.0, d..=d),
                m..=m,
            ),
            proptest::collection::vec(1usize..50, m..=m),
        )
    })
}

proptest! {
    #[test]
    fn saliency_normalizes_to_one((raw, _) in saliency_strategy()) {
        let grads = SlotGradients {
            g: raw.iter().map(|r| r.iter().map(|x| x - 5.0).collect()).collect(),
        };
        if let Ok(map) = saliency(&grads) {
            let total: f64 = map.s.iter().flatten().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(map.s.iter().flatten().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn mask_respects_budget_and_is_maximal(
        (raw, sizes) in saliency_strategy(),
        kappa in 0.05f64..1.0,
    ) {
        let total: f64 = raw.iter().flatten().sum();
        prop_assume!(total > 0.0);
        let map = SaliencyMap {
            s: raw.iter().map(|r| r.iter().map(|x| x / total).collect()).collect(),
        };
        let mask = select_mask(&map, &sizes, kappa, SelectionMode::WeightedGreedy).unwrap();
        let budget = kappa * mask.total_params as f64;
        prop_assert!(mask.kept_params as f64 <= budget);
        // recomputed cost matches the reported cost
        let cost: usize = mask.keep.iter().enumerate()
            .map(|(i, row)| row.iter().filter(|&&k| k).count() * sizes[i])
            .sum();
        prop_assert_eq!(cost, mask.kept_params);
        // maximality: the best-ranked rejected slot would exceed the budget
        let mut slots: Vec<(usize, usize)> = (0..map.s.len())
            .flat_map(|i| (0..map.s[i].len()).map(move |j| (i, j)))
            .collect();
        slots.sort_by(|&(ai, aj), &(bi, bj)| {
            map.s[bi][bj].partial_cmp(&map.s[ai][aj]).unwrap()
                .then(ai.cmp(&bi)).then(aj.cmp(&bj))
        });
        if let Some(&(i, _)) = slots.iter().find(|&&(i, j)| !mask.keep[i][j]) {
            prop_assert!((mask.kept_params + sizes[i]) as f64 > budget);
        }
    }

    #[test]
    fn kept_sets_nest_across_budgets(
        (raw, sizes) in saliency_strategy(),
        lo in 0.05f64..0.5,
        hi_extra in 0.0f64..0.5,
    ) {
        let total: f64 = raw.iter().flatten().sum();
        prop_assume!(total > 0.0);
        let map = SaliencyMap {
            s: raw.iter().map(|r| r.iter().map(|x| x / total).collect()).collect(),
        };
        let hi = (lo + hi_extra).min(1.0);
        for mode in [SelectionMode::WeightedGreedy, SelectionMode::Quantile] {
            let small = select_mask(&map, &sizes, lo, mode).unwrap();
            let large = select_mask(&map, &sizes, hi, mode).unwrap();
            for (rs, rl) in small.keep.iter().zip(&large.keep) {
                for (&ks, &kl) in rs.iter().zip(rl) {
                    prop_assert!(!ks || kl, "nesting violated ({mode:?})");
                }
            }
        }
    }
}
