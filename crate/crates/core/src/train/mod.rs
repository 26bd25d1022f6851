//! Training loop, evaluation, checkpoints, the ablation harness, inference
//! and the gradient-check suite.

mod checkpoint;
mod config;
mod detect;
pub mod gradsuite;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{OptimizerConfig, OptimizerKind, ScheduleConfig, TrainConfig};
pub use detect::{detect_images, render_overlay, DetectOptions, DetectResult};
pub use optim::Optimizer;

use crate::anchors::{build_targets, generate_anchors, AnchorSet};
use crate::data::{five_area_augment, hu_normalize, resample_window, CTSlice, Dataset, LesionAnnotation};
use crate::error::{PdseError, Result};
use crate::eval::{
    evaluate_map, postprocess, table, write_detections_csv, DetectionBox, EvalReport, LevelMaps, PostprocessConfig,
};
use crate::geometry::BBox;
use crate::network::Model;
use crate::nn::BN_MOMENTUM;
use crate::params::{name_seed, ParamStore};
use crate::tensor::{Graph, Tensor};

/// One image ready for the network: `1 × S × S` and boxes in input pixels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub image: Tensor<f32>,
    pub annotations: Vec<LesionAnnotation>,
    /// Original `(width, height)`.
    pub original: (usize, usize),
}

/// Normalizes a slice and resamples it (and its boxes) to `size × size`.
pub fn prepare_slice(slice: &CTSlice, size: usize) -> Prepared {
    let norm: Tensor<f32> = hu_normalize(slice);
    let (h, w) = (slice.height, slice.width);
    let (image, annotations) = if (h, w) == (size, size) {
        (norm, slice.annotations.clone())
    } else {
        let data = resample_window(norm.data(), h, w, (0.0, 0.0, h as f64, w as f64), size, size);
        let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
        let anns = slice
            .annotations
            .iter()
            .map(|a| LesionAnnotation {
                bbox: a.bbox.scale(sx, sy),
                lesion_type: a.lesion_type,
            })
            .collect();
        (Tensor::new(&[1, size, size], data).expect("positive size"), anns)
    };
    Prepared {
        id: slice.image_id.clone(),
        image,
        annotations,
        original: (w, h),
    }
}

pub fn prepare_split(ds: &Dataset, ids: &[String], size: usize) -> Result<Vec<Prepared>> {
    ids.iter().map(|id| Ok(prepare_slice(&ds.load(id)?, size))).collect()
}

fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let s = images[0].shape();
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

fn gts_of(anns: &[LesionAnnotation]) -> Vec<(BBox, u8)> {
    anns.iter().map(|a| (a.bbox, a.class_id())).collect()
}

/// Runs the model in inference mode and returns detections per image.
pub fn detect_batch(
    model: &Model,
    store: &ParamStore<f32>,
    anchors: &AnchorSet,
    images: &[&Tensor<f32>],
    pp: &PostprocessConfig,
) -> Result<Vec<Vec<DetectionBox>>> {
    let x = stack(images)?;
    let size = (x.shape()[3] as f64, x.shape()[2] as f64);
    let mut g = Graph::new(false);
    let xv = g.constant(x);
    let out = model.forward(&mut g, store, xv)?;
    let maps: Vec<LevelMaps<f32>> = out
        .levels
        .iter()
        .map(|l| LevelMaps {
            cls: g.value(l.cls),
            boxes: g.value(l.boxes),
        })
        .collect();
    (0..images.len())
        .map(|b| postprocess(&maps, b, anchors, model.config.num_classes, size, pp))
        .collect()
}

const EVAL_BATCH: usize = 8;

/// Detections and the AP report for prepared images.
pub fn evaluate_prepared(
    model: &Model,
    store: &ParamStore<f32>,
    images: &[Prepared],
    input_size: usize,
    pp: &PostprocessConfig,
    iou: f64,
) -> Result<(EvalReport, Vec<(String, Vec<DetectionBox>)>)> {
    let anchors = generate_anchors(&model.config.anchors, input_size, input_size)?;
    let mut dets = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let ims: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.image).collect();
        for (p, d) in chunk.iter().zip(detect_batch(model, store, &anchors, &ims, pp)?) {
            dets.push((p.id.clone(), d));
        }
    }
    let ann: Vec<(String, Vec<(BBox, u8)>)> = images.iter().map(|p| (p.id.clone(), gts_of(&p.annotations))).collect();
    Ok((evaluate_map(&dets, &ann, iou)?, dets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub val_map: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub best_val_map: Option<f64>,
    pub test_report: Option<EvalReport>,
    pub history: Vec<EpochMetrics>,
}

fn first_non_finite(store: &ParamStore<f32>) -> String {
    for (_, p) in store.iter() {
        if p.grad.as_ref().is_some_and(|g| !g.is_finite()) {
            return format!("first non-finite gradient in parameter {}", p.name);
        }
        if !p.value.is_finite() {
            return format!("first non-finite value in parameter {}", p.name);
        }
    }
    let largest = store
        .iter()
        .map(|(_, p)| (p.value.data().iter().fold(0.0f32, |m, v| m.max(v.abs())), &p.name))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match largest {
        Some((v, name)) => format!("parameters are finite; largest magnitude {v:e} in parameter {name}"),
        None => "no parameters".into(),
    }
}

/// Writes `<stem>.json` and `<stem>.txt` for a report.
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let mut json = report.to_json()?;
    json.push('\n');
    fs::write(dir.join(format!("{stem}.json")), json)?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_table())?;
    Ok(())
}

pub fn train(cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    train_on(cfg, &ds)
}

pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("train_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let s = cfg.input_size;
    let train_ids = ds.split("train")?;
    if train_ids.is_empty() {
        return Err(PdseError::Config("training split is empty".into()));
    }
    let train_set = prepare_split(ds, train_ids, s)?;
    let val_set = match ds.split(&cfg.val_split)? {
        [] => {
            log::warn!("split {:?} is empty; validating on the training split", cfg.val_split);
            train_set.clone()
        }
        ids => prepare_split(ds, ids, s)?,
    };
    let anchors = generate_anchors(&cfg.model.anchors, s, s)?;
    let (model, mut store) = Model::init::<f32>(&cfg.model, cfg.seed)?;
    log::info!(
        "model: {} tensors, {} trainable values; {} train / {} val images",
        store.len(),
        store.num_trainable(),
        train_set.len(),
        val_set.len()
    );
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "train.sampling"));
    let metrics_log = out_dir.join("metrics.jsonl");
    fs::File::create(&metrics_log)?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut best: Option<f64> = None;
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let factor = cfg.schedule.factor(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut sum, mut sum_cls, mut sum_box, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut gts = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &train_set[i];
                let crop = if cfg.augment && rng.random_bool(cfg.crop_prob) {
                    let mut crops = five_area_augment(&p.image, &p.annotations, &cfg.augmentation, s, &mut rng);
                    if crops.is_empty() {
                        None
                    } else {
                        let k = rng.random_range(0..crops.len());
                        Some(crops.swap_remove(k))
                    }
                } else {
                    None
                };
                match crop {
                    Some(c) => {
                        gts.push(gts_of(&c.annotations));
                        images.push(c.image);
                    }
                    None => {
                        gts.push(gts_of(&p.annotations));
                        images.push(p.image.clone());
                    }
                }
            }
            let refs: Vec<&Tensor<f32>> = images.iter().collect();
            let x = stack(&refs)?;
            let targets = build_targets::<f32>(&anchors, &gts, cfg.model.num_classes, cfg.model.matching)?;
            let mut g = Graph::new(true);
            let xv = g.constant(x);
            let step_id = opt.steps();
            let forward = model
                .forward(&mut g, &store, xv)
                .and_then(|out| model.loss(&mut g, &out, &targets));
            let parts = match forward {
                Ok(p) => p,
                Err(PdseError::NonFinite { op }) => {
                    return Err(PdseError::Training(format!(
                        "non-finite value in {op} at epoch {} step {step_id}; {}",
                        epoch + 1,
                        first_non_finite(&store)
                    )))
                }
                Err(e) => return Err(e),
            };
            let (loss, lc, lb) = (
                g.value(parts.total).item() as f64,
                g.value(parts.cls).item() as f64,
                g.value(parts.boxes).item() as f64,
            );
            let grads = g.backward(parts.total)?;
            grads.accumulate_into(&mut store)?;
            if !loss.is_finite() {
                return Err(PdseError::Training(format!(
                    "non-finite loss at epoch {} step {step_id}; {}",
                    epoch + 1,
                    first_non_finite(&store)
                )));
            }
            store.apply_bn_updates(&g.take_bn_updates(), BN_MOMENTUM);
            lr = opt.lr(factor);
            opt.step(&mut store, lr).map_err(|e| match e {
                PdseError::Training(m) => PdseError::Training(format!("epoch {} step {step_id}: {m}", epoch + 1)),
                e => e,
            })?;
            sum += loss;
            sum_cls += lc;
            sum_box += lb;
            n += 1;
        }
        let val_map = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let (r, _) = evaluate_prepared(&model, &store, &val_set, s, &cfg.postprocess, cfg.eval_iou)?;
            Some(r.map)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            steps: opt.steps(),
            lr,
            loss: sum / n as f64,
            cls_loss: sum_cls / n as f64,
            box_loss: sum_box / n as f64,
            val_map,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3} loss {:.4} (cls {:.4}, box {:.4}) lr {:.2e} val mAP {} [{:.0}s]",
            m.epoch,
            m.loss,
            m.cls_loss,
            m.box_loss,
            m.lr,
            val_map.map_or("-".into(), |v| format!("{v:.4}")),
            m.elapsed_s
        );
        let mut f = OpenOptions::new().append(true).open(&metrics_log)?;
        writeln!(f, "{}", serde_json::to_string(&m)?)?;
        if let Some(v) = val_map {
            if best.is_none_or(|b| v > b) {
                best = Some(v);
                Checkpoint::new(&cfg.model, &store, s, cfg.postprocess, epoch + 1, Some(v)).save(&best_path)?;
            }
        }
        Checkpoint::new(&cfg.model, &store, s, cfg.postprocess, epoch + 1, val_map).save(&last_path)?;
        history.push(m);
    }
    let test_report = match ds.split(&cfg.test_split)? {
        [] => None,
        ids => {
            let test_set = prepare_split(ds, ids, s)?;
            let (bm, bstore, _) = Checkpoint::<f32>::load(&best_path)?.into_model()?;
            let (report, dets) = evaluate_prepared(&bm, &bstore, &test_set, s, &cfg.postprocess, cfg.eval_iou)?;
            write_report(&out_dir, "test_report", &report)?;
            write_detections_csv(fs::File::create(out_dir.join("test_detections.csv"))?, &dets)?;
            log::info!("test mAP {:.4}", report.map);
            Some(report)
        }
    };
    Ok(RunArtifacts {
        output_dir: out_dir,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics_log,
        best_val_map: best,
        test_report,
        history,
    })
}

/// Loads a checkpoint and scores one split of a dataset.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Path, split: &str) -> Result<EvalReport> {
    let (model, store, manifest) = Checkpoint::<f32>::load(checkpoint)?.into_model()?;
    let ds = Dataset::open(dataset)?;
    let ids = ds.split(split)?;
    if ids.is_empty() {
        return Err(PdseError::Config(format!("split {split:?} is empty")));
    }
    let set = prepare_split(&ds, ids, manifest.input_size)?;
    let (report, _) = evaluate_prepared(&model, &store, &set, manifest.input_size, &manifest.postprocess, 0.5)?;
    Ok(report)
}

/// The three compared variants: `(column name, directory, use_panet, use_dse)`.
pub const ABLATION_VARIANTS: [(&str, &str, bool, bool); 3] = [
    ("RetinaNet", "retinanet", false, false),
    ("RetinaNet-PA", "retinanet_pa", true, false),
    ("Ours", "ours", true, true),
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub use_panet: bool,
    pub use_dse: bool,
    pub checkpoint: PathBuf,
    pub best_val_map: Option<f64>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub variants: Vec<AblationVariant>,
    pub table: String,
}

/// Trains every variant with the same seed and schedule and writes
/// `ablation.json` and `ablation.txt`.
pub fn run_ablation(base: &TrainConfig) -> Result<AblationResult> {
    base.validate()?;
    let ds = Dataset::open(&base.dataset)?;
    if ds.split(&base.test_split)?.is_empty() {
        return Err(PdseError::Config(format!("ablation needs a non-empty {:?} split", base.test_split)));
    }
    let mut variants = Vec::new();
    for (name, dir, panet, dse) in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.model.use_panet = panet;
        cfg.model.use_dse = dse;
        cfg.output_dir = base.output_dir.join(dir);
        log::info!("ablation: training {name}");
        let run = train_on(&cfg, &ds)?;
        let report = run
            .test_report
            .ok_or_else(|| PdseError::Config("missing test report".into()))?;
        variants.push(AblationVariant {
            name: name.to_string(),
            use_panet: panet,
            use_dse: dse,
            checkpoint: run.best_checkpoint,
            best_val_map: run.best_val_map,
            report,
        });
    }
    let cols: Vec<(&str, &EvalReport)> = variants.iter().map(|v| (v.name.as_str(), &v.report)).collect();
    let table = table(&cols);
    let (base_map, full_map) = (variants[0].report.map, variants[2].report.map);
    log::info!(
        "ablation: full model mAP {full_map:.4} vs baseline {base_map:.4} ({})",
        if full_map > base_map { "full model ahead" } else { "baseline ahead or tied" }
    );
    let result = AblationResult { variants, table };
    fs::create_dir_all(&base.output_dir)?;
    fs::write(base.output_dir.join("ablation.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    fs::write(base.output_dir.join("ablation.txt"), &result.table)?;
    Ok(result)
}
