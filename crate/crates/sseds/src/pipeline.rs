//! Stage orchestration shared by the CLI and the end-to-end tests. Every
//! stage is restartable from its on-disk inputs; stage seeds derive from the
//! global seed by fixed offsets so stages can be re-run independently.
//!
//! Deterministic artifacts (caches, checkpoints, metrics, reports) never
//! contain wall-clock data; timings go to per-stage `timing_*.json` files.

use std::fs::File;
use std::io::{BufReader, Read as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, RetrainInit};
use crate::dataio::cache::{read_cache, write_cache};
use crate::dataio::formats::{
    build_vocab_from_rows, encode_rows, parse_avazu, parse_criteo, RawFormat,
};
use crate::dataio::synth::synth_generate;
use crate::dataio::{batch_iter, split_indices, Dataset, SplitTag, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    self, saliency_histogram, write_report, FieldDimReport, MetricsRecord, PruneReport,
    StageTiming, REPORT_SCHEMA_VERSION,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::train::{predict, pretrain, train_model, EpochMetrics, PassCounter, TrainOptions};
use crate::model::{CtrModel, InitKind, LinearPart, Provenance};
use crate::pruning::{apply_mask, compute_slot_gradients, saliency, select_mask, MixedDimTable, SlotGradients};
use crate::slim::{build_slim, AlignInit, EmbeddingInit, SlimInit};

// Fixed offsets deriving stage seeds from the global seed.
const SEED_SYNTH: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_PRETRAIN_SHUFFLE: u64 = 4;
const SEED_SALIENCY: u64 = 5;
const SEED_SLIM: u64 = 6;
const SEED_RETRAIN_SHUFFLE: u64 = 7;

pub fn stage_seed(global: u64, offset: u64) -> u64 {
    global.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset)
}

/// On-disk layout under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out_dir: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &Path) -> Artifacts {
        Artifacts {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn cache(&self, tag: SplitTag) -> PathBuf {
        let name = match tag {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        };
        self.out_dir.join(format!("cache_{name}.bin"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.out_dir.join("vocab.json")
    }

    pub fn cache_meta(&self) -> PathBuf {
        self.out_dir.join("cache_meta.json")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.out_dir.join("pretrained.ckpt")
    }

    pub fn pruned(&self) -> PathBuf {
        self.out_dir.join("pruned.ckpt")
    }

    pub fn slim(&self) -> PathBuf {
        self.out_dir.join("slim.ckpt")
    }

    pub fn pretrain_metrics(&self) -> PathBuf {
        self.out_dir.join("pretrain_metrics.json")
    }

    pub fn retrain_metrics(&self) -> PathBuf {
        self.out_dir.join("retrain_metrics.json")
    }

    pub fn report(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn eval_metrics(&self, stem: &str, tag: SplitTag) -> PathBuf {
        let split = match tag {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        };
        self.out_dir.join(format!("eval_{stem}_{split}.json"))
    }

    pub fn timing(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("timing_{stage}.json"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("missing artifact {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_timing(arts: &Artifacts, stage: &str, start: Instant, counter: &PassCounter) -> Result<()> {
    write_json(
        &arts.timing(stage),
        &StageTiming {
            stage: stage.to_string(),
            wall_ms: start.elapsed().as_millis(),
            forward_backward_passes: counter.forward_backward,
            forward_only_passes: counter.forward_only,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub content_hash: String,
    pub up_to_date: bool,
    pub train_records: usize,
    pub valid_records: usize,
    pub test_records: usize,
    pub skipped_rows: usize,
    pub field_sizes: Vec<usize>,
}

/// Hash of everything the cache depends on: the dataset config block, the
/// seed, and the raw input bytes when a file is involved.
fn ingest_content_hash(config: &PipelineConfig) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&config.dataset)?);
    hasher.update(config.seed.to_le_bytes());
    if let Some(path) = &config.dataset.path {
        let file = File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        let mut reader = BufReader::new(file);
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn run_ingest(config: &PipelineConfig) -> Result<IngestSummary> {
    let arts = Artifacts::new(&config.out_dir);
    let hash = ingest_content_hash(config)?;
    if let Ok(meta) = read_json::<IngestSummary>(&arts.cache_meta()) {
        let caches_exist = [SplitTag::Train, SplitTag::Valid, SplitTag::Test]
            .iter()
            .all(|&t| arts.cache(t).exists());
        if meta.content_hash == hash && caches_exist {
            return Ok(IngestSummary {
                up_to_date: true,
                ..meta
            });
        }
    }

    let split_seed = stage_seed(config.seed, SEED_SPLIT);
    let (train, valid, test, skipped, vocab) = match config.dataset.format {
        RawFormat::Synth => {
            let spec = config.dataset.synth.as_ref().unwrap();
            let full = synth_generate(spec, stage_seed(config.seed, SEED_SYNTH))?;
            let (tr, va, te) = crate::dataio::split(&full, config.dataset.ratios, split_seed)?;
            (tr, va, te, 0, None)
        }
        format => {
            let path = config.dataset.path.as_ref().unwrap();
            let file = File::open(path)
                .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
            let reader = BufReader::new(file);
            let raw = match format {
                RawFormat::Criteo => {
                    parse_criteo(reader, config.dataset.transform, config.dataset.strict)?
                }
                RawFormat::Avazu => parse_avazu(reader, config.dataset.strict)?,
                RawFormat::Synth => unreachable!(),
            };
            let (tr_idx, va_idx, te_idx) =
                split_indices(raw.rows.len(), config.dataset.ratios, split_seed)?;
            let pick = |idx: &[usize]| -> Vec<&_> { idx.iter().map(|&i| &raw.rows[i]).collect() };
            let tr_rows = pick(&tr_idx);
            // vocabulary counts come from the training split only
            let vocab =
                build_vocab_from_rows(&tr_rows, raw.schema.num_fields(), config.dataset.min_freq)?;
            let sizes = vocab.field_sizes();
            let make = |rows: &[&_], tag| {
                Dataset::new(raw.schema.clone(), sizes.clone(), encode_rows(rows, &vocab), tag)
            };
            let tr = make(&tr_rows, SplitTag::Train)?;
            let va = make(&pick(&va_idx), SplitTag::Valid)?;
            let te = make(&pick(&te_idx), SplitTag::Test)?;
            (tr, va, te, raw.skipped, Some(vocab))
        }
    };

    std::fs::create_dir_all(&config.out_dir)?;
    write_cache(&arts.cache(SplitTag::Train), &train)?;
    write_cache(&arts.cache(SplitTag::Valid), &valid)?;
    write_cache(&arts.cache(SplitTag::Test), &test)?;
    if let Some(vocab) = &vocab {
        write_json::<Vocabulary>(&arts.vocab(), vocab)?;
    }
    let summary = IngestSummary {
        content_hash: hash,
        up_to_date: false,
        train_records: train.len(),
        valid_records: valid.len(),
        test_records: test.len(),
        skipped_rows: skipped,
        field_sizes: train.field_sizes.clone(),
    };
    write_json(&arts.cache_meta(), &summary)?;
    Ok(summary)
}

pub fn run_pretrain(config: &PipelineConfig) -> Result<Vec<EpochMetrics>> {
    let arts = Artifacts::new(&config.out_dir);
    let start = Instant::now();
    let train = read_cache(&arts.cache(SplitTag::Train))?;
    let valid = read_cache(&arts.cache(SplitTag::Valid))?;
    let mut model: CtrModel<f32> = CtrModel::init(
        &config.model,
        &train.field_sizes,
        stage_seed(config.seed, SEED_INIT),
    )?;
    let mut counter = PassCounter::default();
    let opts = TrainOptions {
        epochs: config.optimizer.epochs,
        batch_size: config.optimizer.batch_size,
        shuffle_seed: stage_seed(config.seed, SEED_PRETRAIN_SHUFFLE),
        hyper: config.optimizer.hyper(),
    };
    let log = pretrain(&mut model, &train, &valid, &opts, &mut counter)?;
    save_checkpoint(&arts.pretrained(), &model)?;
    write_json(&arts.pretrain_metrics(), &log)?;
    write_timing(&arts, "pretrain", start, &counter)?;
    Ok(log)
}

/// Reconstruct the mixed-dimension table bundle from the pruned artifact
/// model plus the pretrained one (for removed fields and the original d).
pub fn mixed_from_checkpoints(
    pruned: &CtrModel<f32>,
    pretrained: &CtrModel<f32>,
) -> MixedDimTable<f32> {
    let surviving: Vec<usize> = pruned.tables.iter().map(|t| t.field_id).collect();
    let removed = pretrained
        .tables
        .iter()
        .map(|t| t.field_id)
        .filter(|id| !surviving.contains(id))
        .collect();
    MixedDimTable {
        fields: pruned.tables.clone(),
        removed_fields: removed,
        original_dim: pretrained.d_align,
    }
}

pub fn run_prune(config: &PipelineConfig) -> Result<PruneReport> {
    prune_to(config, &config.out_dir)
}

/// Prune reading inputs from the configured output directory but writing
/// artifacts to `out` (used by the kappa-sweep flag).
pub fn prune_to(config: &PipelineConfig, out: &Path) -> Result<PruneReport> {
    let inputs = Artifacts::new(&config.out_dir);
    let arts = Artifacts::new(out);
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let model = load_checkpoint(&inputs.pretrained())?;
    let train = read_cache(&inputs.cache(SplitTag::Train))?;

    // deterministic saliency batches, drawn with a dedicated seed
    let batches = batch_iter(
        &train,
        config.optimizer.batch_size,
        stage_seed(config.seed, SEED_SALIENCY),
        true,
    );
    let k = config.pruning.saliency_batches.min(batches.len());
    let mut counter = PassCounter::default();
    let mut total: Option<SlotGradients<f32>> = None;
    for batch in &batches[..k] {
        let g = compute_slot_gradients(&model, &batch.records, &mut counter)?;
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.g.iter_mut().zip(&g.g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += *y;
                    }
                }
                acc
            }
        });
    }
    let grads = total.ok_or_else(|| Error::data("no saliency batches available"))?;
    let map = saliency(&grads)?;
    let mask = select_mask(&map, &train.field_sizes, config.pruning.kappa, config.pruning.selection)?;
    if let Some(w) = &mask.warning {
        eprintln!("warning: {w}");
    }
    let mixed = apply_mask(&model.tables, &mask)?;

    // pruned artifact checkpoint: mixed tables plus the surviving wide rows;
    // the full pretrained interaction parameters stay in pretrained.ckpt
    let pruned_artifact = CtrModel {
        arch: model.arch,
        linear: LinearPart {
            bias: model.linear.bias,
            weights: mixed
                .fields
                .iter()
                .map(|t| model.linear.weights[t.field_id].clone())
                .collect(),
        },
        align: None,
        mlp: None,
        d_align: mixed.d_max(),
        provenance: Provenance {
            embeddings: InitKind::WinningTicket,
            align: InitKind::Absent,
            linear: InitKind::WinningTicket,
            interaction: InitKind::Absent,
        },
        tables: mixed.fields.clone(),
    };
    save_checkpoint(&arts.pruned(), &pruned_artifact)?;

    let fields = model
        .tables
        .iter()
        .map(|t| {
            let kept = mixed.fields.iter().find(|f| f.field_id == t.field_id);
            FieldDimReport {
                field_id: t.field_id,
                name: train.schema.fields[t.field_id].name.clone(),
                n: t.n,
                original_dim: t.dim,
                searched_dim: kept.map_or(0, |f| f.dim),
                kept_dims: kept.map_or_else(Vec::new, |f| f.kept_dims.clone()),
            }
        })
        .collect();
    let mut sorted: Vec<f64> = map.s.iter().flatten().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let (histogram, bin_width) = saliency_histogram(&map.s);
    let report = PruneReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kappa: config.pruning.kappa,
        total_embedding_params: mask.total_params,
        kept_embedding_params: mask.kept_params,
        threshold: mask.threshold,
        forward_backward_passes: counter.forward_backward,
        fields,
        removed_fields: mixed.removed_fields.clone(),
        saliency: map.s.clone(),
        sorted_saliency: sorted,
        histogram,
        histogram_bin_width: bin_width,
    };
    write_report(&report, out)?;
    write_timing(&arts, "prune", start, &counter)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RetrainOverrides {
    /// Skip the retraining epochs (the "w/o retraining" ablation).
    pub no_retrain: bool,
    /// Random slim embedding init instead of the winning ticket
    /// (the "w/o ticket" ablation).
    pub random_init: bool,
}

pub fn run_retrain(
    config: &PipelineConfig,
    overrides: RetrainOverrides,
) -> Result<Vec<EpochMetrics>> {
    let arts = Artifacts::new(&config.out_dir);
    let start = Instant::now();
    let pretrained = load_checkpoint(&arts.pretrained())?;
    let pruned = load_checkpoint(&arts.pruned())?;
    let train = read_cache(&arts.cache(SplitTag::Train))?;
    let valid = read_cache(&arts.cache(SplitTag::Valid))?;

    let mixed = mixed_from_checkpoints(&pruned, &pretrained);
    let embeddings = if overrides.random_init || config.retrain.init == RetrainInit::Random {
        EmbeddingInit::Random
    } else {
        EmbeddingInit::WinningTicket
    };
    let align = if config.retrain.random_align {
        AlignInit::Random
    } else {
        AlignInit::Identity
    };
    let mut slim = build_slim(
        &mixed,
        &pretrained,
        &config.model,
        SlimInit { embeddings, align },
        stage_seed(config.seed, SEED_SLIM),
    )?;

    let epochs = if overrides.no_retrain {
        0
    } else {
        config.retrain.epochs
    };
    let opts = TrainOptions {
        epochs,
        batch_size: config.optimizer.batch_size,
        shuffle_seed: stage_seed(config.seed, SEED_RETRAIN_SHUFFLE),
        hyper: config.optimizer.hyper(),
    };
    let mut counter = PassCounter::default();
    let log = train_model(&mut slim, &train, &valid, &opts, &mut counter)?;
    save_checkpoint(&arts.slim(), &slim)?;
    write_json(&arts.retrain_metrics(), &log)?;
    write_timing(&arts, "retrain", start, &counter)?;
    Ok(log)
}

pub fn run_eval(
    config: &PipelineConfig,
    checkpoint: &Path,
    tag: SplitTag,
) -> Result<MetricsRecord> {
    let arts = Artifacts::new(&config.out_dir);
    let start = Instant::now();
    let model = load_checkpoint(checkpoint)?;
    let data = read_cache(&arts.cache(tag))?;
    let mut counter = PassCounter::default();
    let preds32 = predict(&model, &data, config.optimizer.batch_size, &mut counter)?;
    let preds: Vec<f64> = preds32.iter().map(|&p| p as f64).collect();
    let labels: Vec<u8> = data.records.iter().map(|r| r.label).collect();
    let record = MetricsRecord {
        auc: eval::auc(&preds, &labels)?,
        logloss: eval::logloss(&preds, &labels),
        param_count: model.embedding_param_count()
            + model.align_param_count()
            + model.interaction_param_count(),
        embedding_param_count: model.embedding_param_count(),
    };
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    write_json(&arts.eval_metrics(stem, tag), &record)?;
    write_timing(&arts, &format!("eval_{stem}"), start, &counter)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub kappa: f64,
    pub kept_embedding_params: usize,
    pub total_embedding_params: usize,
    pub removed_fields: usize,
    pub eval_points: Vec<(String, usize, f64)>,
}

/// Consolidate the pruning report and any eval metrics present into the
/// CSV outputs (`saliency.csv`, `dims.csv`, `auc_vs_params.csv`).
pub fn run_report(config: &PipelineConfig) -> Result<ReportSummary> {
    let arts = Artifacts::new(&config.out_dir);
    let report: PruneReport = read_json(&arts.report())?;
    write_report(&report, &config.out_dir)?;

    // AUC-vs-parameter points from whichever eval artifacts exist
    let mut names: Vec<String> = std::fs::read_dir(&config.out_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("eval_") && n.ends_with(".json"))
        .collect();
    names.sort();
    let mut points = Vec::new();
    let mut csv = String::from("source,param_count,auc\n");
    for name in &names {
        let rec: MetricsRecord = read_json(&config.out_dir.join(name))?;
        let stem = name.trim_end_matches(".json").to_string();
        csv.push_str(&format!("{stem},{},{}\n", rec.param_count, rec.auc));
        points.push((stem, rec.param_count, rec.auc));
    }
    std::fs::write(config.out_dir.join("auc_vs_params.csv"), csv)?;
    Ok(ReportSummary {
        kappa: report.kappa,
        kept_embedding_params: report.kept_embedding_params,
        total_embedding_params: report.total_embedding_params,
        removed_fields: report.removed_fields.len(),
        eval_points: points,
    })
}
