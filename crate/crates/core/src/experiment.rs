//! Dataset generation, training, evaluation and ablation runs over files.
//!
//! A dataset directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.txt` | the generating [`ExperimentConfig`] |
//! | `synonyms.tsv` | the category table |
//! | `text.emb`, `text.idx` | teacher text embeddings and their word index |
//! | `train.rbt`, `val.rbt` | region batches |
//! | `val_gt.lbv` | validation ground-truth label maps |
//! | `split.txt` | seen and unseen category ids |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::distill::DistillVariant;
use crate::diversify::DiversifyStrategy;
use crate::embeddings::{
    read_embedding_store, write_embedding_store, CategoryTable, EmbeddingRecord, TeacherSpace,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, video_from_bytes, video_to_bytes, EvalMetrics, LabelMap, SplitMetrics,
};
use crate::losses::LossBreakdown;
use crate::pipeline::{
    gt_label_map, read_batches, segment_then_classify, train_step, write_batches, Dataset,
    StudentModel, TrainConfig, TrainContext,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const SYNONYM_FILE: &str = "synonyms.tsv";
pub const TEXT_STORE: &str = "text.emb";
pub const TEXT_INDEX: &str = "text.idx";
pub const TRAIN_FILE: &str = "train.rbt";
pub const VAL_FILE: &str = "val.rbt";
pub const VAL_GT_FILE: &str = "val_gt.lbv";
pub const SPLIT_FILE: &str = "split.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.gkc";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const ABLATION_FILE: &str = "ablation.tsv";

fn id_list(ids: &[usize]) -> String {
    ids.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Generates the synthetic world for `cfg` and writes it to `out`.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let ds = Dataset::generate(&cfg.world, cfg.seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    ds.table.save(&out.join(SYNONYM_FILE))?;
    let records: Vec<EmbeddingRecord> = ds
        .space
        .text_records()
        .into_iter()
        .map(|(word, embedding)| EmbeddingRecord { word, embedding })
        .collect();
    write_embedding_store(&out.join(TEXT_STORE), &out.join(TEXT_INDEX), &records)?;
    write_batches(&out.join(TRAIN_FILE), &ds.train)?;
    write_batches(&out.join(VAL_FILE), &ds.val)?;
    let gt: Vec<LabelMap> = ds.val.iter().map(gt_label_map).collect();
    fs::write(out.join(VAL_GT_FILE), video_to_bytes(&gt))?;
    fs::write(
        out.join(SPLIT_FILE),
        format!(
            "seen = {}\nunseen = {}\n",
            id_list(&cfg.world.seen()),
            id_list(&cfg.world.unseen)
        ),
    )?;
    Ok(ds)
}

/// Reads a dataset directory. The teacher is rebuilt from the stored
/// config and checked against the stored table and text embeddings.
pub fn load_dataset(dir: &Path) -> Result<(ExperimentConfig, Dataset)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let table = CategoryTable::load(&dir.join(SYNONYM_FILE))?;
    let space = TeacherSpace::build(&cfg.world.teacher, &table, cfg.seed)?;
    let stored = read_embedding_store(&dir.join(TEXT_STORE), &dir.join(TEXT_INDEX))?;
    let rebuilt = space.text_records();
    let matches = stored.len() == rebuilt.len()
        && stored.iter().zip(&rebuilt).all(|(s, (word, e))| {
            s.word == *word
                && s.embedding.dim() == e.dim()
                && s.embedding
                    .as_slice()
                    .iter()
                    .zip(e.as_slice())
                    .all(|(a, b)| *a == f64::from(*b as f32))
        });
    if !matches {
        return Err(Error::Format(format!(
            "{} does not match the teacher rebuilt from {}",
            TEXT_STORE, CONFIG_FILE
        )));
    }
    let train = read_batches(&dir.join(TRAIN_FILE), &table)?;
    let val = read_batches(&dir.join(VAL_FILE), &table)?;
    let ds = Dataset {
        config: cfg.world.clone(),
        seed: cfg.seed,
        table,
        space,
        train,
        val,
    };
    Ok((cfg, ds))
}

/// Trains from the seeded initialization for `cfg.train.steps` steps and
/// returns the `f32`-rounded model with the per-step losses.
pub fn train_model(
    cfg: &ExperimentConfig,
    ds: &Dataset,
) -> Result<(StudentModel, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if cfg.world != ds.config {
        return Err(Error::Config(
            "world settings differ from the dataset's".into(),
        ));
    }
    let seen = ds.config.seen();
    let ctx = TrainContext {
        table: &ds.table,
        space: &ds.space,
        vocab: &seen,
    };
    let mut model = StudentModel::init(cfg.dims(), cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let (next, breakdown) = train_step(&model, &ds.train, &ctx, &cfg.train, cfg.seed, step)?;
        model = next;
        log.push(breakdown);
    }
    Ok((model.quantized(), log))
}

/// One tab-separated record per step after a header line.
pub fn loss_log_text(log: &[LossBreakdown]) -> String {
    let mut out = String::from("step\ttotal\tmask\tce\tgrounding\tkd\n");
    for (step, b) in log.iter().enumerate() {
        let t = &b.terms;
        let _ = writeln!(
            out,
            "{step}\t{}\t{}\t{}\t{}\t{}",
            b.total, t.mask, t.ce, t.grounding, t.kd
        );
    }
    out
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out: &Path,
) -> Result<(StudentModel, Vec<LossBreakdown>)> {
    let (_, ds) = load_dataset(dataset_dir)?;
    let (model, log) = train_model(cfg, &ds)?;
    fs::create_dir_all(out)?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(LOSS_LOG_FILE), loss_log_text(&log))?;
    Ok((model, log))
}

/// Predicts every validation image over the full vocabulary.
pub fn predict(model: &StudentModel, ds: &Dataset, train: &TrainConfig) -> Result<Vec<LabelMap>> {
    let all: Vec<usize> = (0..ds.config.categories).collect();
    ds.val
        .iter()
        .map(|b| segment_then_classify(model, b, &ds.space, &all, train.mode, train.logit_scale))
        .collect()
}

pub fn evaluate_model(
    model: &StudentModel,
    ds: &Dataset,
    train: &TrainConfig,
) -> Result<EvalMetrics> {
    let preds = predict(model, ds, train)?;
    let gts: Vec<LabelMap> = ds.val.iter().map(gt_label_map).collect();
    evaluate(&preds, &gts, ds.config.categories, &ds.config.seen())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// `key = value` report. Per-class IoU is a fraction, the means are
/// percentages; absent values read `undefined`.
pub fn report_text(m: &EvalMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "classes = {}", m.per_class.len());
    for (c, iou) in m.per_class.iter().enumerate() {
        let _ = writeln!(out, "iou.{c} = {}", opt(*iou));
    }
    let _ = writeln!(out, "miou = {}", m.miou);
    let _ = writeln!(out, "seen = {}", opt(m.split.seen));
    let _ = writeln!(out, "unseen = {}", opt(m.split.unseen));
    let _ = writeln!(out, "harmonic = {}", m.split.harmonic);
    out
}

/// Evaluates a checkpoint on the validation split. Classification settings
/// come from `cfg` when given, else from the dataset's config.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    report: &Path,
    cfg: Option<&ExperimentConfig>,
) -> Result<EvalMetrics> {
    let (stored, ds) = load_dataset(dataset_dir)?;
    let model = StudentModel::load(checkpoint)?;
    let expected = stored.dims();
    let dims = model.dims();
    if dims.text_dim != expected.text_dim || dims.feature_dim != expected.feature_dim {
        return Err(Error::Shape(format!(
            "checkpoint dims {dims:?} do not fit the dataset"
        )));
    }
    let preds = predict(&model, &ds, &cfg.unwrap_or(&stored).train)?;
    let gts = video_from_bytes(&fs::read(dataset_dir.join(VAL_GT_FILE))?)?;
    let metrics = evaluate(&preds, &gts, ds.config.categories, &ds.config.seen())?;
    if let Some(parent) = report.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(report, report_text(&metrics))?;
    Ok(metrics)
}

/// One ablation cell and its validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub diversify: DiversifyStrategy,
    pub distill: DistillVariant,
    pub metrics: SplitMetrics,
}

/// The 2x2 grid of diversification and text-guided distillation switched
/// on and off, in the order baseline, td, tgkd, td+tgkd.
pub fn grid_cells() -> [(&'static str, DiversifyStrategy, DistillVariant); 4] {
    [
        ("baseline", DiversifyStrategy::None, DistillVariant::None),
        ("td", DiversifyStrategy::Random, DistillVariant::None),
        ("tgkd", DiversifyStrategy::None, DistillVariant::TextGuided),
        (
            "td+tgkd",
            DiversifyStrategy::Random,
            DistillVariant::TextGuided,
        ),
    ]
}

/// Trains and evaluates `cfg` with the given switches.
pub fn run_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    diversify: DiversifyStrategy,
    distill: DistillVariant,
) -> Result<SplitMetrics> {
    let mut cell = cfg.clone();
    cell.train.diversify = diversify;
    cell.train.distill = distill;
    let (model, _) = train_model(&cell, ds)?;
    Ok(evaluate_model(&model, ds, &cell.train)?.split)
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell\tdiversify\tdistill\tseen\tunseen\tharmonic\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            r.diversify.name(),
            r.distill.name(),
            opt(m.seen),
            opt(m.unseen),
            m.harmonic
        );
    }
    out
}

/// Runs the 2x2 grid, then every distillation variant with the configured
/// diversification, and writes the table to `out`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let (_, ds) = load_dataset(dataset_dir)?;
    let mut cells: Vec<(String, DiversifyStrategy, DistillVariant)> = grid_cells()
        .into_iter()
        .map(|(n, d, k)| (n.to_string(), d, k))
        .collect();
    for variant in DistillVariant::ALL {
        cells.push((
            format!("kd={}", variant.name()),
            cfg.train.diversify,
            variant,
        ));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (name, diversify, distill) in cells {
        let metrics = run_cell(cfg, &ds, diversify, distill)?;
        rows.push(AblationRow {
            name,
            diversify,
            distill,
            metrics,
        });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(ABLATION_FILE), ablation_text(&rows))?;
    Ok(rows)
}
