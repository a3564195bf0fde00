use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{predict, pretrain, train_model, PassCounter, TrainOptions};
use super::*;
use crate::dataio::synth::{synth_generate, SynthSpec};
use crate::dataio::{split, Dataset};
use crate::eval;
use crate::model::adam::{adam_step, AdamHyper, AdamState};

fn rec(tokens: Vec<u32>) -> Record {
    Record { tokens, label: 1 }
}

fn fm_model(field_sizes: &[usize], d: usize, seed: u64) -> CtrModel<f64> {
    let config = ModelConfig {
        architecture: Architecture::Fm,
        embedding_dim: d,
        hidden: vec![],
    };
    CtrModel::init(&config, field_sizes, seed).unwrap()
}

fn random_model(arch: Architecture, seed: u64) -> (CtrModel<f64>, Vec<Record>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=4);
    let d = rng.gen_range(2..=8);
    let field_sizes: Vec<usize> = (0..m).map(|_| rng.gen_range(4..=32)).collect();
    let config = ModelConfig {
        architecture: arch,
        embedding_dim: d,
        hidden: vec![6, 5],
    };
    let mut model = CtrModel::init(&config, &field_sizes, rng.gen()).unwrap();
    // random wide weights so all parameter classes are exercised
    for w in &mut model.linear.weights {
        for x in w.iter_mut() {
            *x = rng.gen_range(-0.3..0.3);
        }
    }
    model.linear.bias = rng.gen_range(-0.2..0.2);
    let records: Vec<Record> = (0..12)
        .map(|_| Record {
            tokens: field_sizes.iter().map(|&n| rng.gen_range(0..n) as u32).collect(),
            label: rng.gen_range(0..2) as u8,
        })
        .collect();
    (model, records)
}

fn batch_loss(model: &CtrModel<f64>, records: &[&Record]) -> f64 {
    let (probs, _) = model.forward(records).unwrap();
    loss(&probs, &batch_labels(records))
}

#[test]
fn embed_lookup_identity() {
    let mut model = fm_model(&[3, 3], 2, 0);
    model.tables[0].row_mut(1).copy_from_slice(&[0.1, -0.2]);
    let e = model.embed_lookup(&rec(vec![1, 0])).unwrap();
    assert_eq!(e[0], vec![0.1, -0.2]);
}

#[test]
fn embed_lookup_zero_table() {
    let mut model = fm_model(&[3, 3], 2, 0);
    for t in &mut model.tables {
        t.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let e = model.embed_lookup(&rec(vec![2, 1])).unwrap();
    assert!(e.iter().flatten().all(|&x| x == 0.0));
}

#[test]
fn embed_lookup_out_of_range() {
    let model = fm_model(&[3, 3], 2, 0);
    assert!(model.embed_lookup(&rec(vec![3, 0])).is_err());
}

#[test]
fn all_zero_parameters_give_half() {
    let config = ModelConfig {
        architecture: Architecture::DeepFm,
        embedding_dim: 3,
        hidden: vec![4],
    };
    let mut model: CtrModel<f64> = CtrModel::init(&config, &[4, 4], 1).unwrap();
    for t in &mut model.tables {
        t.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    if let Some(mlp) = &mut model.mlp {
        for l in &mut mlp.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
    }
    let r = rec(vec![0, 3]);
    let (probs, _) = model.forward(&[&r]).unwrap();
    assert_eq!(probs[0], 0.5);
}

#[test]
fn fm_hand_example() {
    // e_1=(1,0), e_2=(2,0), no linear part: z = <e1,e2> = 2
    let mut model = fm_model(&[2, 2], 2, 0);
    for w in &mut model.linear.weights {
        w.iter_mut().for_each(|x| *x = 0.0);
    }
    model.linear.bias = 0.0;
    model.tables[0].row_mut(0).copy_from_slice(&[1.0, 0.0]);
    model.tables[1].row_mut(0).copy_from_slice(&[2.0, 0.0]);
    let r = rec(vec![0, 0]);
    let (probs, trace) = model.forward(&[&r]).unwrap();
    assert!((trace.records[0].z - 2.0).abs() < 1e-12);
    assert!((probs[0] - 0.8807970779778823).abs() < 1e-12);
}

#[test]
fn fm_bilinearity() {
    let mut model = fm_model(&[4, 4, 4], 3, 9);
    for w in &mut model.linear.weights {
        w.iter_mut().for_each(|x| *x = 0.0);
    }
    model.linear.bias = 0.0;
    let r = rec(vec![1, 2, 3]);
    let (_, t1) = model.forward(&[&r]).unwrap();
    let z1 = t1.records[0].z;
    // doubling e_0 doubles every pairwise term involving field 0:
    // z = <e0, e1+e2> + <e1,e2>; so z' - <e1,e2> = 2(z - <e1,e2>)
    let e1 = model.tables[1].row(2).to_vec();
    let e2 = model.tables[2].row(3).to_vec();
    let cross: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
    for x in model.tables[0].row_mut(1) {
        *x *= 2.0;
    }
    let (_, t2) = model.forward(&[&r]).unwrap();
    let z2 = t2.records[0].z;
    assert!((z2 - cross - 2.0 * (z1 - cross)).abs() < 1e-10);
}

#[test]
fn loss_analytic_values() {
    // p = 0.5 for N records -> L = N ln 2
    let probs = vec![0.5f64; 7];
    let labels = vec![1u8, 0, 1, 0, 1, 0, 1];
    assert!((loss(&probs, &labels) - 7.0 * std::f64::consts::LN_2).abs() < 1e-12);
    // p=(0.9,0.1), y=(1,0) -> L = -2 ln 0.9
    let l = loss(&[0.9f64, 0.1], &[1, 0]);
    assert!((l - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
}

#[test]
fn loss_convex_in_logit() {
    // numerical second differences of L(z) are non-negative per record
    for y in [0u8, 1] {
        for i in -20..20 {
            let z = i as f64 * 0.3;
            let h = 1e-3;
            let l = |z: f64| {
                let p: f64 = sigmoid_clamped(z);
                loss(&[p], &[y])
            };
            let second = l(z + h) - 2.0 * l(z) + l(z - h);
            assert!(second >= -1e-12, "non-convex at z={z}, y={y}");
        }
    }
}

#[test]
fn gradient_matches_central_differences_all_archs() {
    // central-difference oracle at h=1e-4, relative tolerance 1e-4
    let h = 1e-4;
    for (si, arch) in [Architecture::Fm, Architecture::WideDeep, Architecture::DeepFm]
        .into_iter()
        .enumerate()
    {
        let (model, records) = random_model(arch, 100 + si as u64);
        let refs: Vec<&Record> = records.iter().collect();
        let (_, trace) = model.forward(&refs).unwrap();
        let grads = model.backward(&refs, &trace).unwrap();

        let check = |analytic: f64, mut bump: Box<dyn FnMut(&mut CtrModel<f64>, f64)>, what: &str| {
            let mut plus = model.clone();
            bump(&mut plus, h);
            let mut minus = model.clone();
            bump(&mut minus, -h);
            let fd = (batch_loss(&plus, &refs) - batch_loss(&minus, &refs)) / (2.0 * h);
            let denom = analytic.abs().max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "{arch:?} {what}: analytic {analytic} vs fd {fd}"
            );
        };

        // bias
        check(
            grads.bias,
            Box::new(|m, eps| m.linear.bias += eps),
            "bias",
        );
        // one linear weight per field
        for (k, fg) in grads.linear.iter().enumerate() {
            if let Some((&tok, &g)) = fg.iter().next() {
                check(
                    g,
                    Box::new(move |m, eps| m.linear.weights[k][tok as usize] += eps),
                    "linear",
                );
            }
        }
        // a few embedding coordinates
        for (k, fg) in grads.embedding.iter().enumerate() {
            if let Some((&tok, row)) = fg.iter().next() {
                for j in 0..row.len().min(2) {
                    let g = row[j];
                    check(
                        g,
                        Box::new(move |m, eps| m.tables[k].row_mut(tok)[j] += eps),
                        "embedding",
                    );
                }
            }
        }
        // MLP weights and biases
        if let Some(mg) = &grads.mlp {
            for li in 0..mg.w.len() {
                for wi in [0, mg.w[li].len() / 2] {
                    let g = mg.w[li][wi];
                    check(
                        g,
                        Box::new(move |m, eps| m.mlp.as_mut().unwrap().layers[li].w[wi] += eps),
                        "mlp w",
                    );
                }
                let g = mg.b[li][0];
                check(
                    g,
                    Box::new(move |m, eps| m.mlp.as_mut().unwrap().layers[li].b[0] += eps),
                    "mlp b",
                );
            }
        }
    }
}

#[test]
fn gradient_sparsity_untouched_tokens() {
    let (model, records) = random_model(Architecture::DeepFm, 7);
    let refs: Vec<&Record> = records.iter().collect();
    let (_, trace) = model.forward(&refs).unwrap();
    let grads = model.backward(&refs, &trace).unwrap();
    for (k, fg) in grads.embedding.iter().enumerate() {
        let active: std::collections::BTreeSet<u32> = records
            .iter()
            .map(|r| r.tokens[model.tables[k].field_id])
            .collect();
        let with_grad: std::collections::BTreeSet<u32> = fg.keys().copied().collect();
        assert_eq!(active, with_grad);
    }
}

#[test]
fn stale_trace_rejected() {
    let (model, records) = random_model(Architecture::Fm, 3);
    let refs: Vec<&Record> = records.iter().collect();
    let (_, trace) = model.forward(&refs[..4]).unwrap();
    assert!(model.backward(&refs[4..8], &trace).is_err());
}

#[test]
fn balanced_symmetric_batch_zero_bias_gradient() {
    // all-zero model gives p=0.5; balanced labels make sum(p-y) = 0
    let mut model = fm_model(&[2, 2], 2, 0);
    for t in &mut model.tables {
        t.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let mut r0 = rec(vec![0, 0]);
    r0.label = 0;
    let r1 = rec(vec![0, 0]);
    let refs = vec![&r0, &r1];
    let (_, trace) = model.forward(&refs).unwrap();
    let grads = model.backward(&refs, &trace).unwrap();
    assert_eq!(grads.bias, 0.0);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let (mut model, _) = random_model(Architecture::DeepFm, 21);
    let before = model.clone();
    let zero = Gradients {
        bias: 0.0,
        linear: vec![Default::default(); model.tables.len()],
        embedding: vec![Default::default(); model.tables.len()],
        align: None,
        mlp: model.mlp.as_ref().map(|mlp| MlpGrads {
            w: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }),
    };
    let mut state = AdamState::new(&model, AdamHyper::default());
    adam_step(&mut model, &zero, &mut state);
    assert_eq!(model, before);
}

#[test]
fn adam_first_step_magnitude() {
    // scalar with g=1 at step 1 moves by ~lr
    let mut model = fm_model(&[2, 2], 2, 0);
    let mut grads = Gradients {
        bias: 1.0,
        linear: vec![Default::default(); 2],
        embedding: vec![Default::default(); 2],
        align: None,
        mlp: None,
    };
    let mut state = AdamState::new(&model, AdamHyper::default());
    let before = model.linear.bias;
    adam_step(&mut model, &grads, &mut state);
    let delta: f64 = model.linear.bias - before;
    assert!((delta + 0.001).abs() < 1e-6, "delta={delta}");
    grads.bias = 0.0;
}

#[test]
fn training_is_deterministic() {
    let spec = SynthSpec::uniform_signal(3, 8, 400, 2, 2, 1.2);
    let ds = synth_generate(&spec, 5).unwrap();
    let (train, valid, _) = split(&ds, (8, 1, 1), 0).unwrap();
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 32,
        shuffle_seed: 1,
        hyper: AdamHyper::with_lr(0.01),
    };
    let run = || {
        let config = ModelConfig {
            architecture: Architecture::Fm,
            embedding_dim: 4,
            hidden: vec![],
        };
        let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, 2).unwrap();
        let mut counter = PassCounter::default();
        train_model(&mut model, &train, &valid, &opts, &mut counter).unwrap();
        model
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn untouched_rows_stay_at_initialization() {
    // token ids above what the records use must keep their init values
    let spec = SynthSpec::uniform_signal(2, 6, 200, 2, 1, 1.0);
    let mut ds = synth_generate(&spec, 9).unwrap();
    // restrict tokens to the lower half of each vocabulary
    for r in &mut ds.records {
        for t in &mut r.tokens {
            *t %= 3;
        }
    }
    let (train, valid, _) = split(&ds, (8, 1, 1), 0).unwrap();
    let config = ModelConfig {
        architecture: Architecture::Fm,
        embedding_dim: 3,
        hidden: vec![],
    };
    let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, 4).unwrap();
    let init = model.clone();
    let mut counter = PassCounter::default();
    train_model(
        &mut model,
        &train,
        &valid,
        &TrainOptions {
            epochs: 1,
            batch_size: 16,
            shuffle_seed: 0,
            hyper: AdamHyper::default(),
        },
        &mut counter,
    )
    .unwrap();
    for k in 0..2 {
        for t in 3..6u32 {
            assert_eq!(model.tables[k].row(t), init.tables[k].row(t));
        }
    }
}

#[test]
fn pretrain_rejects_zero_epochs() {
    let spec = SynthSpec::zero_signal(2, 4, 50);
    let ds = synth_generate(&spec, 1).unwrap();
    let (train, valid, _) = split(&ds, (8, 1, 1), 0).unwrap();
    let config = ModelConfig {
        architecture: Architecture::Fm,
        embedding_dim: 2,
        hidden: vec![],
    };
    let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, 0).unwrap();
    let mut counter = PassCounter::default();
    let opts = TrainOptions {
        epochs: 0,
        ..Default::default()
    };
    assert!(pretrain(&mut model, &train, &valid, &opts, &mut counter).is_err());
}

#[test]
fn pretrain_separates_planted_signal() {
    let spec = SynthSpec::uniform_signal(3, 12, 4000, 2, 2, 2.0);
    let ds = synth_generate(&spec, 17).unwrap();
    let (train, valid, _) = split(&ds, (8, 1, 1), 0).unwrap();
    let config = ModelConfig {
        architecture: Architecture::Fm,
        embedding_dim: 8,
        hidden: vec![],
    };
    let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, 3).unwrap();
    let mut counter = PassCounter::default();
    let log = pretrain(
        &mut model,
        &train,
        &valid,
        &TrainOptions {
            epochs: 3,
            batch_size: 64,
            shuffle_seed: 0,
            hyper: AdamHyper::with_lr(0.05),
        },
        &mut counter,
    )
    .unwrap();
    assert_eq!(log.len(), 3);
    let final_auc = log.last().unwrap().valid_auc;
    assert!(final_auc > 0.95, "auc={final_auc}");
}

#[test]
fn zero_signal_data_trains_to_chance() {
    let mut aucs = Vec::new();
    for seed in 0..5 {
        let spec = SynthSpec::zero_signal(3, 8, 3000);
        let ds = synth_generate(&spec, 100 + seed).unwrap();
        let (train, _, test) = split(&ds, (8, 1, 1), 0).unwrap();
        let config = ModelConfig {
            architecture: Architecture::Fm,
            embedding_dim: 4,
            hidden: vec![],
        };
        let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, seed).unwrap();
        let mut counter = PassCounter::default();
        train_model(
            &mut model,
            &train,
            &test,
            &TrainOptions {
                epochs: 2,
                batch_size: 128,
                shuffle_seed: 0,
                hyper: AdamHyper::default(),
            },
            &mut counter,
        )
        .unwrap();
        let preds = predict(&model, &test, 128, &mut counter).unwrap();
        let labels: Vec<u8> = test.records.iter().map(|r| r.label).collect();
        aucs.push(eval::auc(&preds, &labels).unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() < 0.02, "mean auc={mean}");
}

#[test]
fn forward_deterministic_bitwise() {
    let (model, records) = random_model(Architecture::DeepFm, 33);
    let refs: Vec<&Record> = records.iter().collect();
    let (p1, _) = model.forward(&refs).unwrap();
    let (p2, _) = model.forward(&refs).unwrap();
    assert_eq!(p1, p2);
}

/// Pruned-shape lookup: after restricting a table to kept dims, lookups
/// return vectors of the searched length.
#[test]
fn lookup_length_tracks_table_dim() {
    let mut model = fm_model(&[4, 4], 4, 11);
    let t = &mut model.tables[0];
    // keep dims 0 and 2
    let mut new_weights = Vec::new();
    for row in 0..t.n {
        for &j in &[0usize, 2] {
            new_weights.push(t.weights[row * t.dim + j]);
        }
    }
    t.dim = 2;
    t.kept_dims = vec![0, 2];
    t.weights = new_weights;
    let e = model.embed_lookup(&rec(vec![1, 1])).unwrap();
    assert_eq!(e[0].len(), 2);
    assert_eq!(e[1].len(), 4);
}

fn labels_of(ds: &Dataset) -> Vec<u8> {
    ds.records.iter().map(|r| r.label).collect()
}

#[test]
fn synth_planted_field_zero_dominates_saliency_proxy() {
    // field 0 carries much stronger signal; after training, the squared
    // embedding mass of field 0 should dominate (proxy recovery check)
    let mut wins = 0;
    for seed in 0..5 {
        let spec = SynthSpec {
            num_fields: 3,
            vocab_sizes: vec![10, 10, 10],
            num_records: 3000,
            profile: vec![vec![3.0, 3.0], vec![0.8, 0.8], vec![0.8, 0.8]],
            intercept: 0.0,
        };
        let ds = synth_generate(&spec, 200 + seed).unwrap();
        let (train, valid, _) = split(&ds, (8, 1, 1), 0).unwrap();
        let config = ModelConfig {
            architecture: Architecture::Fm,
            embedding_dim: 4,
            hidden: vec![],
        };
        let mut model: CtrModel<f64> = CtrModel::init(&config, &train.field_sizes, seed).unwrap();
        let mut counter = PassCounter::default();
        train_model(
            &mut model,
            &train,
            &valid,
            &TrainOptions {
                epochs: 3,
                batch_size: 64,
                shuffle_seed: 0,
                hyper: AdamHyper::with_lr(0.05),
            },
            &mut counter,
        )
        .unwrap();
        let norms: Vec<f64> = model
            .tables
            .iter()
            .map(|t| t.weights.iter().map(|w| w * w).sum::<f64>() / t.n as f64)
            .collect();
        if norms[0] > norms[1] && norms[0] > norms[2] {
            wins += 1;
        }
        let _ = labels_of(&valid);
    }
    assert!(wins >= 4, "field-0 dominance in {wins}/5 runs");
}
