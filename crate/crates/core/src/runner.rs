//! Stage drivers behind the CLI subcommands: data generation, the two
//! pretraining phases, detection finetuning, evaluation, heatmap rendering
//! and the 2x2 ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{blobs_from, load_into, Checkpoint, CheckpointKind};
use crate::config::{ExperimentConfig, Split};
use crate::data::{
    coco_thresholds, eval_ap, gen_synthetic_dataset, heatmap_argmax, load_image, pointing_game,
    read_manifest, retrieval_recall, similarity_heatmap, DatasetRecord, EvalDetection,
    HeatmapContext, HeatmapMode,
};
use crate::ovd::{
    category_embeddings, detect, finetune_step, init_background, CategoryTable, DetectSettings,
    DetectorParams, EnsembleParams, FinetuneExample, FinetuneSetup,
};
use crate::pretrain::dop::{dop_pretrain_step, DopBatch, DopHeads};
use crate::pretrain::{
    clip_pretrain_step, encode_text, AdamW, ClipBatch, ClipSetup, ContrastiveHead, DopSetup,
    SgdMomentum, TextBatch, VlmParams,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::{FeatureGrid, Tape, Tensor};
use crate::vit::ViTParams;
use crate::{Error, Result};

pub const CLIP_CKPT: &str = "clip.ckpt";
pub const DOP_CKPT: &str = "dop.ckpt";
pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const RESOLVED_CONFIG: &str = "resolved.toml";
pub const METRICS_FILE: &str = "metrics.txt";
pub const REPORT_FILE: &str = "report.txt";

/// Machine-readable metrics: sorted `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub entries: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn set(&mut self, key: &str, value: f64) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v:.6}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad metrics line '{line}'")))?;
            entries.insert(
                k.to_string(),
                v.parse::<f64>().map_err(|_| Error::Data(format!("bad metric value '{v}'")))?,
            );
        }
        Ok(Metrics { entries })
    }

    pub fn table(&self, title: &str) -> String {
        let width = self.entries.keys().map(String::len).max().unwrap_or(8).max(8);
        let mut out = format!("{title}\n{}\n", "-".repeat(width + 12));
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k:<width$}  {v:>9.4}");
        }
        out
    }

    pub fn write(&self, dir: &Path, title: &str) -> Result<()> {
        std::fs::write(dir.join(METRICS_FILE), self.to_kv())?;
        std::fs::write(dir.join(REPORT_FILE), self.table(title))?;
        Ok(())
    }
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    Ok(())
}

fn data_dir(cfg: &ExperimentConfig, split: Split) -> PathBuf {
    cfg.run.out_dir.join("data").join(split.dir_name())
}

/// Generate all three splits.
pub fn run_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    write_resolved(cfg, &cfg.run.out_dir)?;
    for split in [Split::Pretrain, Split::Finetune, Split::Eval] {
        let dir = data_dir(cfg, split);
        std::fs::create_dir_all(&dir)?;
        let spec = cfg.synthetic_spec(split);
        let records = gen_synthetic_dataset(&spec, &dir)?;
        println!("[gen-data] {}: {} images", split.dir_name(), records.len());
    }
    Ok(())
}

struct LoadedSplit {
    records: Vec<DatasetRecord>,
    images: Vec<FeatureGrid<f32>>,
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<LoadedSplit> {
    let dir = data_dir(cfg, split);
    let records = read_manifest(&dir).map_err(|_| {
        Error::Missing(format!(
            "dataset split '{}' not found under {}; run `dito gen-data` first",
            split.dir_name(),
            dir.display()
        ))
    })?;
    let images = records
        .iter()
        .map(|r| load_image::<f32>(&dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit { records, images })
}

fn clip_setup(cfg: &ExperimentConfig) -> ClipSetup {
    ClipSetup {
        vit_cfg: cfg.vit_clip_cfg(),
        text_cfg: cfg.text_cfg(),
        crop_scale: (cfg.clip.crop_scale[0], cfg.clip.crop_scale[1]),
        crop_aspect: (cfg.clip.crop_aspect[0], cfg.clip.crop_aspect[1]),
    }
}

fn dop_setup(cfg: &ExperimentConfig) -> DopSetup {
    DopSetup {
        vit_cfg: cfg.vit_dop_cfg(),
        roi_out: cfg.model.roi_out,
        samples_per_bin: cfg.model.samples_per_bin,
        pooling: cfg.dop.pooling,
        n_per_level: cfg.n_per_level_map(),
        scale_range: (cfg.dop.scale_range[0], cfg.dop.scale_range[1]),
        aspect_range: (cfg.dop.aspect_range[0], cfg.dop.aspect_range[1]),
        crop_scale: (cfg.clip.crop_scale[0], cfg.clip.crop_scale[1]),
        crop_aspect: (cfg.clip.crop_aspect[0], cfg.clip.crop_aspect[1]),
    }
}

fn init_vlm(cfg: &ExperimentConfig, seed: u64) -> VlmParams<Tensor<f32>> {
    let mut r = stream(seed, "init-vlm");
    VlmParams {
        vit: ViTParams::init(&cfg.vit_detection_cfg(), cfg.model.joint_dim, &mut r),
        text: crate::pretrain::TextEncoderParams::init(&cfg.text_cfg(), cfg.model.joint_dim, &mut r),
        head: ContrastiveHead::init(),
    }
}

fn init_heads(cfg: &ExperimentConfig, seed: u64) -> DopHeads<Tensor<f32>> {
    let mut r = stream(seed, "init-heads");
    let roi_dim = cfg.model.roi_out * cfg.model.roi_out * cfg.model.fpn_channels;
    DopHeads {
        fpn: crate::heads::FpnParams::init(cfg.model.embed_dim, cfg.model.fpn_channels, &mut r),
        rcnn: crate::heads::RcnnParams::init(roi_dim, cfg.model.rcnn_hidden, cfg.model.joint_dim, &mut r),
        head: ContrastiveHead::init(),
    }
}

/// Cyclic shuffled batch indices for one training step.
fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n / batch.max(1);
    let epoch = if per_epoch == 0 { step } else { step / per_epoch };
    let offset = if per_epoch == 0 { 0 } else { (step % per_epoch) * batch };
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = stream(seed, &format!("epoch{epoch}"));
    order.shuffle(&mut r);
    (0..batch).map(|i| order[(offset + i) % n]).collect()
}

fn restore_vlm(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<VlmParams<Tensor<f32>>> {
    let mut vlm = init_vlm(cfg, ck.seed);
    let mut targets = vlm.named_mut();
    load_into(&ck.blobs, &mut targets)?;
    Ok(vlm)
}

/// Phase 1: train the dual encoder on the pretraining split.
pub fn run_pretrain_clip(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let start = Instant::now();
    write_resolved(cfg, &cfg.run.out_dir)?;
    let split = load_split(cfg, Split::Pretrain)?;
    let vocab = cfg.vocab();
    let setup = clip_setup(cfg);
    let captions: Vec<Vec<u32>> = split
        .records
        .iter()
        .map(|r| vocab.encode(&r.caption))
        .collect::<Result<_>>()?;
    let small: Vec<FeatureGrid<f32>> = split
        .images
        .iter()
        .map(|img| img.resize(cfg.clip.image_size, cfg.clip.image_size))
        .collect();

    let mut vlm = init_vlm(cfg, cfg.run.seed);
    let mut opt = AdamW::new(cfg.clip.lr, cfg.clip.weight_decay, cfg.clip.warmup_steps, cfg.clip.total_steps);
    let mut last = 0.0;
    for step in 0..cfg.clip.total_steps {
        let idx = batch_indices(small.len(), cfg.clip.batch_size, step, derive_seed(cfg.run.seed, "clip-order"));
        let batch = ClipBatch {
            images: idx.iter().map(|&i| small[i].clone()).collect(),
            texts: TextBatch::new(
                idx.iter().map(|&i| captions[i].clone()).collect(),
                cfg.model.text_max_len,
            )?,
        };
        last = clip_pretrain_step(&mut vlm, &mut opt, &batch, &setup, derive_seed(cfg.run.seed, &format!("clip-step{step}")))?;
        if step % 100 == 0 {
            println!("[pretrain-clip] step {step}: loss {last:.4}");
        }
    }
    let named = vlm.named();
    let ck = Checkpoint {
        kind: CheckpointKind::Clip,
        config_toml: cfg.to_toml(),
        step: cfg.clip.total_steps as u64,
        seed: cfg.run.seed,
        blobs: blobs_from(&named),
    };
    let path = cfg.run.out_dir.join(CLIP_CKPT);
    ck.save(&path)?;
    println!(
        "[pretrain-clip] done in {:.1}s, final loss {last:.4} -> {}",
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(path)
}

/// Phase 2: detection-oriented pretraining of the heads on frozen towers.
pub fn run_pretrain_dop(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let start = Instant::now();
    write_resolved(cfg, &cfg.run.out_dir)?;
    let clip_path = cfg.run.out_dir.join(CLIP_CKPT);
    let clip_ck = Checkpoint::load(&clip_path).map_err(|_| {
        Error::Missing(format!(
            "phase-1 checkpoint {} not found; run `dito pretrain-clip` first",
            clip_path.display()
        ))
    })?;
    let vlm = restore_vlm(cfg, &clip_ck)?;
    let split = load_split(cfg, Split::Pretrain)?;
    let vocab = cfg.vocab();
    let captions: Vec<Vec<u32>> = split
        .records
        .iter()
        .map(|r| vocab.encode(&r.caption))
        .collect::<Result<_>>()?;
    let images: Vec<FeatureGrid<f32>> = if cfg.dop.image_size == cfg.data.image_size {
        split.images.clone()
    } else {
        split.images.iter().map(|i| i.resize(cfg.dop.image_size, cfg.dop.image_size)).collect()
    };

    let c_setup = clip_setup(cfg);
    let d_setup = dop_setup(cfg);
    let mut heads = init_heads(cfg, cfg.run.seed);
    let mut opt = AdamW::new(cfg.dop.lr, cfg.dop.weight_decay, cfg.dop.warmup_steps, cfg.dop.total_steps);
    let mut last = 0.0;
    for step in 0..cfg.dop.total_steps {
        let idx = batch_indices(images.len(), cfg.dop.batch_size, step, derive_seed(cfg.run.seed, "dop-order"));
        let batch = DopBatch {
            images: idx.iter().map(|&i| images[i].clone()).collect(),
            texts: TextBatch::new(
                idx.iter().map(|&i| captions[i].clone()).collect(),
                cfg.model.text_max_len,
            )?,
        };
        last = dop_pretrain_step(
            &vlm,
            &mut heads,
            &mut opt,
            &batch,
            &c_setup,
            &d_setup,
            derive_seed(cfg.run.seed, &format!("dop-step{step}")),
        )?;
        if step % 100 == 0 {
            println!("[pretrain-dop] step {step}: loss {last:.4}");
        }
    }

    // The towers never received gradients; persist them from the live
    // structs so any accidental mutation would be visible in the blobs.
    let mut blobs = blobs_from(&vlm.named());
    let mut head_pairs = Vec::new();
    heads.visit("dop", &mut head_pairs);
    blobs.extend(blobs_from(&head_pairs));
    let ck = Checkpoint {
        kind: CheckpointKind::Dop,
        config_toml: cfg.to_toml(),
        step: cfg.dop.total_steps as u64,
        seed: cfg.run.seed,
        blobs,
    };
    let path = cfg.run.out_dir.join(DOP_CKPT);
    ck.save(&path)?;
    println!(
        "[pretrain-dop] done in {:.1}s, final loss {last:.4} -> {}",
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(path)
}

fn build_category_table(
    cfg: &ExperimentConfig,
    vlm: &VlmParams<Tensor<f32>>,
) -> Result<CategoryTable<f32>> {
    category_embeddings(&cfg.all_categories(), &cfg.templates(), vlm, &clip_setup(cfg), &cfg.vocab())
}

/// Detection finetuning on the base categories.
pub fn run_finetune(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let start = Instant::now();
    write_resolved(cfg, &cfg.run.out_dir)?;

    // Frozen towers and head initialization.
    let (vlm, dop_heads) = if cfg.finetune.init_heads_from_dop {
        let path = cfg.run.out_dir.join(DOP_CKPT);
        let ck = Checkpoint::load(&path).map_err(|_| {
            Error::Missing(format!(
                "phase-2 checkpoint {} not found; run `dito pretrain-dop` first (or set finetune.init_heads_from_dop = false)",
                path.display()
            ))
        })?;
        let vlm = restore_vlm(cfg, &ck)?;
        let mut heads = init_heads(cfg, ck.seed);
        let mut targets = Vec::new();
        heads.visit_mut("dop", &mut targets);
        load_into(&ck.blobs, &mut targets)?;
        (vlm, heads)
    } else {
        let path = cfg.run.out_dir.join(CLIP_CKPT);
        let ck = Checkpoint::load(&path).map_err(|_| {
            Error::Missing(format!(
                "phase-1 checkpoint {} not found; run `dito pretrain-clip` first",
                path.display()
            ))
        })?;
        let vlm = restore_vlm(cfg, &ck)?;
        let heads = init_heads(cfg, cfg.run.seed);
        (vlm, heads)
    };

    let table = build_category_table(cfg, &vlm)?;
    let base_cats = table.base_embeddings();
    let background = init_background(&base_cats, derive_seed(cfg.run.seed, "background"))?;

    let mut det = DetectorParams {
        backbone: vlm.vit.map(&mut |t| t.clone()),
        fpn: dop_heads.fpn.map(&mut |t| t.clone()),
        rcnn: dop_heads.rcnn.map(&mut |t| t.clone()),
        rpn: crate::heads::RpnParams::init(cfg.model.fpn_channels, &mut stream(cfg.run.seed, "init-rpn")),
        background,
    };

    let split = load_split(cfg, Split::Finetune)?;
    let base_index: BTreeMap<&str, usize> = cfg
        .data
        .base_categories
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let examples: Vec<FinetuneExample<f32>> = split
        .records
        .iter()
        .zip(&split.images)
        .map(|(r, img)| {
            let gt = r
                .annotations
                .iter()
                .map(|(b, name)| {
                    base_index
                        .get(name.as_str())
                        .map(|&i| (*b, i))
                        .ok_or_else(|| {
                            Error::Data(format!("finetune split contains non-base category '{name}'"))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FinetuneExample { image: img.clone(), gt })
        })
        .collect::<Result<_>>()?;

    let setup = FinetuneSetup {
        view: cfg.detection_view()?,
        det_temp: cfg.score.det_temp,
        rpn_pos_iou: cfg.finetune.rpn_pos_iou,
        rpn_neg_iou: cfg.finetune.rpn_neg_iou,
        rpn_samples: cfg.finetune.rpn_samples,
        match_iou: cfg.finetune.match_iou,
        proposals_per_image: cfg.finetune.proposals_per_image,
        pos_fraction: cfg.finetune.pos_fraction,
        backbone_lr_ratio: cfg.finetune.backbone_lr_ratio,
    };
    let mut opt = SgdMomentum::new(
        cfg.finetune.lr,
        cfg.finetune.momentum,
        cfg.finetune.weight_decay,
        cfg.finetune.warmup_steps,
        cfg.finetune.total_steps,
        cfg.finetune.step_decay_milestones.clone(),
        cfg.finetune.step_decay_factor,
    );
    let mut last = 0.0;
    for step in 0..cfg.finetune.total_steps {
        let idx = batch_indices(
            examples.len(),
            cfg.finetune.batch_size,
            step,
            derive_seed(cfg.run.seed, "finetune-order"),
        );
        let batch: Vec<FinetuneExample<f32>> = idx
            .iter()
            .map(|&i| FinetuneExample { image: examples[i].image.clone(), gt: examples[i].gt.clone() })
            .collect();
        last = finetune_step(
            &mut det,
            &base_cats,
            &mut opt,
            &batch,
            &setup,
            derive_seed(cfg.run.seed, &format!("finetune-step{step}")),
        )?;
        if step % 100 == 0 {
            println!("[finetune] step {step}: loss {last:.4}");
        }
    }

    let mut blobs = blobs_from(&vlm.named());
    let mut det_pairs = Vec::new();
    det.visit("det", &mut det_pairs);
    blobs.extend(blobs_from(&det_pairs));
    let ck = Checkpoint {
        kind: CheckpointKind::Detector,
        config_toml: cfg.to_toml(),
        step: cfg.finetune.total_steps as u64,
        seed: cfg.run.seed,
        blobs,
    };
    let path = cfg.run.out_dir.join(DETECTOR_CKPT);
    ck.save(&path)?;
    println!(
        "[finetune] done in {:.1}s, final loss {last:.4} -> {}",
        start.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(path)
}

pub struct LoadedDetector {
    /// The config the detector was trained with (geometry and SWL flags are
    /// enforced from here).
    pub train_cfg: ExperimentConfig,
    pub det: DetectorParams<Tensor<f32>>,
    pub frozen: VlmParams<Tensor<f32>>,
    pub seed: u64,
}

pub fn load_detector(path: &Path) -> Result<LoadedDetector> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != CheckpointKind::Detector {
        return Err(Error::Checkpoint(format!("{} is not a detector checkpoint", path.display())));
    }
    let train_cfg = ExperimentConfig::from_toml(&ck.config_toml)?;
    let frozen = restore_vlm(&train_cfg, &ck)?;
    let heads = init_heads(&train_cfg, ck.seed);
    let mut det = DetectorParams {
        backbone: frozen.vit.map(&mut |t| t.clone()),
        fpn: heads.fpn,
        rcnn: heads.rcnn,
        rpn: crate::heads::RpnParams::init(train_cfg.model.fpn_channels, &mut stream(ck.seed, "init-rpn")),
        background: Tensor::zeros(vec![1, train_cfg.model.joint_dim]),
    };
    let mut targets = Vec::new();
    det.visit_mut("det", &mut targets);
    load_into(&ck.blobs, &mut targets)?;
    Ok(LoadedDetector { train_cfg, det, frozen, seed: ck.seed })
}

/// Detection settings for evaluating a trained checkpoint. Geometry, SWL
/// flags and temperatures come from the training config; ensemble weights
/// and thresholds from the evaluation config.
fn detect_settings(train_cfg: &ExperimentConfig, eval_cfg: &ExperimentConfig) -> Result<DetectSettings> {
    Ok(DetectSettings {
        view: train_cfg.detection_view()?,
        det_temp: train_cfg.score.det_temp,
        vlm_temp: train_cfg.score.vlm_temp,
        ensemble: EnsembleParams { alpha: eval_cfg.score.alpha, beta: eval_cfg.score.beta },
        score_thresh: eval_cfg.score.score_thresh,
        nms_iou: eval_cfg.score.nms_iou,
        max_dets: eval_cfg.score.max_dets,
        use_frozen_vlm: eval_cfg.score.use_frozen_vlm,
        vlm_roi_out: eval_cfg.score.vlm_roi_out,
    })
}

/// Evaluate the detector checkpoint on the eval split: AP, retrieval and
/// pointing game. Writes `metrics.txt` and `report.txt`.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<Metrics> {
    let start = Instant::now();
    write_resolved(cfg, &cfg.run.out_dir)?;
    let det_path = cfg.run.out_dir.join(DETECTOR_CKPT);
    let loaded = load_detector(&det_path).map_err(|e| match e {
        Error::Missing(_) => Error::Missing(format!(
            "detector checkpoint {} not found; run `dito finetune` first",
            det_path.display()
        )),
        other => other,
    })?;
    let train_cfg = &loaded.train_cfg;
    let table = build_category_table(train_cfg, &loaded.frozen)?;
    let settings = detect_settings(train_cfg, cfg)?;
    let split = load_split(cfg, Split::Eval)?;

    let detections: Vec<Vec<EvalDetection>> = if cfg.run.deterministic {
        split
            .images
            .iter()
            .map(|img| detect_one(img, &loaded, &table, &settings))
            .collect::<Result<_>>()?
    } else {
        split
            .images
            .par_iter()
            .map(|img| detect_one(img, &loaded, &table, &settings))
            .collect::<Result<_>>()?
    };
    let ground_truth: Vec<Vec<(crate::boxes::NormBox, String)>> =
        split.records.iter().map(|r| r.annotations.clone()).collect();
    let categories = train_cfg.all_categories();
    let summary = eval_ap(&detections, &ground_truth, &coco_thresholds(), &categories)?;

    // Phase-1 retrieval sanity on the eval split.
    let recall = eval_retrieval(train_cfg, &loaded.frozen, &split)?;

    // Pointing game: prefer the phase-2 heads (the pretraining artifact the
    // similarity-map comparison is about); fall back to the finetuned heads.
    let heads = match Checkpoint::load(&cfg.run.out_dir.join(DOP_CKPT)) {
        Ok(ck) => {
            let mut heads = init_heads(train_cfg, ck.seed);
            let mut targets = Vec::new();
            heads.visit_mut("dop", &mut targets);
            load_into(&ck.blobs, &mut targets)?;
            heads
        }
        Err(_) => DopHeads {
            fpn: loaded.det.fpn.map(&mut |t| t.clone()),
            rcnn: loaded.det.rcnn.map(&mut |t| t.clone()),
            head: ContrastiveHead::init(),
        },
    };
    let (point_backbone, point_dop) = eval_pointing(train_cfg, &loaded.frozen, &heads, &split)?;

    let mut metrics = Metrics::default();
    metrics.set("novel_ap50", summary.novel_ap50);
    metrics.set("base_ap50", summary.base_ap50);
    metrics.set("mean_ap50", summary.mean_ap50);
    metrics.set("novel_ap", summary.novel_ap);
    metrics.set("base_ap", summary.base_ap);
    metrics.set("mean_ap", summary.mean_ap);
    metrics.set("retrieval_recall1", recall);
    metrics.set("pointing_backbone", point_backbone);
    metrics.set("pointing_dop", point_dop);
    metrics.set("seed", loaded.seed as f64);
    metrics.write(&cfg.run.out_dir, "evaluation")?;
    println!("{}", metrics.table("evaluation"));
    println!("[evaluate] done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(metrics)
}

fn detect_one(
    image: &FeatureGrid<f32>,
    loaded: &LoadedDetector,
    table: &CategoryTable<f32>,
    settings: &DetectSettings,
) -> Result<Vec<EvalDetection>> {
    Ok(detect(image, &loaded.det, &loaded.frozen, table, settings)?
        .into_iter()
        .map(|d| EvalDetection { box_: d.box_, category: d.label, score: d.s_ens })
        .collect())
}

fn eval_retrieval(
    train_cfg: &ExperimentConfig,
    vlm: &VlmParams<Tensor<f32>>,
    split: &LoadedSplit,
) -> Result<f64> {
    let setup = clip_setup(train_cfg);
    let vocab = train_cfg.vocab();
    let mut tape = Tape::new();
    let vit = vlm.vit.map(&mut |t| tape.constant(t.clone()));
    let text_params = vlm.text.map(&mut |t| tape.constant(t.clone()));
    let mut img_rows = Vec::with_capacity(split.images.len());
    for img in &split.images {
        let small = img.resize(train_cfg.clip.image_size, train_cfg.clip.image_size);
        img_rows.push(crate::pretrain::clip::image_embedding(
            &mut tape, &small, &vit, &setup.vit_cfg, None,
        )?);
    }
    let img_emb = {
        let stacked = tape.concat_rows(&img_rows);
        tape.value(stacked).clone()
    };
    let captions: Vec<Vec<u32>> = split
        .records
        .iter()
        .map(|r| vocab.encode(&r.caption))
        .collect::<Result<_>>()?;
    let batch = TextBatch::new(captions, train_cfg.model.text_max_len)?;
    let txt = encode_text(&mut tape, &batch, &text_params, &setup.text_cfg)?;
    let txt_emb = tape.value(txt).clone();
    retrieval_recall(&img_emb, &txt_emb, 1)
}

/// Pointing-game hit rates of the backbone-mode and head-mode heatmaps over
/// eval images with single-instance categories.
fn eval_pointing(
    train_cfg: &ExperimentConfig,
    vlm: &VlmParams<Tensor<f32>>,
    heads: &DopHeads<Tensor<f32>>,
    split: &LoadedSplit,
) -> Result<(f64, f64)> {
    let vocab = train_cfg.vocab();
    let (_, shift) = train_cfg.shift()?;
    let ctx = HeatmapContext {
        vlm,
        heads,
        vocab: &vocab,
        text_cfg: train_cfg.text_cfg(),
        vit_cfg: train_cfg.vit_detection_cfg(),
        swl_frozen: train_cfg.swl.frozen,
        shift,
        roi_out: train_cfg.model.roi_out,
        samples_per_bin: train_cfg.model.samples_per_bin,
        window_cells: train_cfg.eval.heatmap_window_cells,
    };
    let mut backbone_samples = Vec::new();
    let mut dop_samples = Vec::new();
    for (img, rec) in split.images.iter().zip(&split.records) {
        for (box_, name) in single_instance_targets(rec) {
            let hb = similarity_heatmap(&ctx, img, &name, HeatmapMode::Backbone)?;
            backbone_samples.push((heatmap_argmax(&hb), box_));
            let hd = similarity_heatmap(&ctx, img, &name, HeatmapMode::Dop)?;
            dop_samples.push((heatmap_argmax(&hd), box_));
        }
    }
    Ok((pointing_game(&backbone_samples), pointing_game(&dop_samples)))
}

/// (box, category) pairs for categories with exactly one instance in the
/// record — the pointing game needs an unambiguous target.
fn single_instance_targets(rec: &DatasetRecord) -> Vec<(crate::boxes::NormBox, String)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, name) in &rec.annotations {
        *counts.entry(name).or_insert(0) += 1;
    }
    rec.annotations
        .iter()
        .filter(|(_, name)| counts[name.as_str()] == 1)
        .map(|(b, name)| (*b, name.clone()))
        .collect()
}

/// Render heatmap PNG pairs for the first `eval.heatmap_images` eval images.
pub fn run_heatmap(cfg: &ExperimentConfig) -> Result<()> {
    write_resolved(cfg, &cfg.run.out_dir)?;
    let det_path = cfg.run.out_dir.join(DETECTOR_CKPT);
    let loaded = load_detector(&det_path).map_err(|e| match e {
        Error::Missing(_) => Error::Missing(format!(
            "detector checkpoint {} not found; run `dito finetune` first",
            det_path.display()
        )),
        other => other,
    })?;
    let train_cfg = &loaded.train_cfg;
    let heads = match Checkpoint::load(&cfg.run.out_dir.join(DOP_CKPT)) {
        Ok(ck) => {
            let mut heads = init_heads(train_cfg, ck.seed);
            let mut targets = Vec::new();
            heads.visit_mut("dop", &mut targets);
            load_into(&ck.blobs, &mut targets)?;
            heads
        }
        Err(_) => DopHeads {
            fpn: loaded.det.fpn.map(&mut |t| t.clone()),
            rcnn: loaded.det.rcnn.map(&mut |t| t.clone()),
            head: ContrastiveHead::init(),
        },
    };
    let split = load_split(cfg, Split::Eval)?;
    let vocab = train_cfg.vocab();
    let (_, shift) = train_cfg.shift()?;
    let ctx = HeatmapContext {
        vlm: &loaded.frozen,
        heads: &heads,
        vocab: &vocab,
        text_cfg: train_cfg.text_cfg(),
        vit_cfg: train_cfg.vit_detection_cfg(),
        swl_frozen: train_cfg.swl.frozen,
        shift,
        roi_out: train_cfg.model.roi_out,
        samples_per_bin: train_cfg.model.samples_per_bin,
        window_cells: train_cfg.eval.heatmap_window_cells,
    };
    let out = cfg.run.out_dir.join("heatmaps");
    std::fs::create_dir_all(&out)?;
    let mut rendered = 0;
    for (i, (img, rec)) in split.images.iter().zip(&split.records).enumerate() {
        if i >= cfg.eval.heatmap_images {
            break;
        }
        for (_, name) in single_instance_targets(rec).into_iter().take(1) {
            for (mode, tag) in [(HeatmapMode::Backbone, "backbone"), (HeatmapMode::Dop, "dop")] {
                let map = similarity_heatmap(&ctx, img, &name, mode)?;
                let slug = name.replace(' ', "-");
                save_heatmap(&map, img, &out, &format!("{i:03}_{slug}_{tag}"))?;
                rendered += 1;
            }
        }
    }
    println!("[heatmap] wrote {rendered} heatmap pairs to {}", out.display());
    Ok(())
}

fn save_heatmap(
    map: &FeatureGrid<f32>,
    img: &FeatureGrid<f32>,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    crate::data::heatmap::save_heatmap_pngs(
        map,
        img,
        &dir.join(format!("{stem}_gray.png")),
        &dir.join(format!("{stem}_overlay.png")),
    )
}

/// One cell of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("dop", true, false),
    ("swl", false, true),
    ("dop_swl", true, true),
];

/// Run the 2x2 {DOP on/off} x {SWL on/off} grid over the given seeds. The
/// phase-1 and phase-2 checkpoints are shared per seed (phase 2 is only
/// trained when some variant needs it).
pub fn run_ablate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationOutcome>> {
    write_resolved(cfg, &cfg.run.out_dir)?;
    let outcomes: Vec<Vec<AblationOutcome>> = seeds
        .par_iter()
        .map(|&seed| ablate_one_seed(cfg, seed))
        .collect::<Result<_>>()?;
    let flat: Vec<AblationOutcome> = outcomes.into_iter().flatten().collect();

    let mut report = String::from("ablation: mean novel AP50 over seeds\n");
    let mut kv = Metrics::default();
    for (variant, _, _) in ABLATION_VARIANTS {
        let vals: Vec<f64> = flat
            .iter()
            .filter(|o| o.variant == variant)
            .filter_map(|o| o.metrics.get("novel_ap50"))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let base_vals: Vec<f64> = flat
            .iter()
            .filter(|o| o.variant == variant)
            .filter_map(|o| o.metrics.get("base_ap50"))
            .collect();
        let base_mean = base_vals.iter().sum::<f64>() / base_vals.len().max(1) as f64;
        let _ = writeln!(
            report,
            "{variant:<10} novel_ap50 {mean:.4} (seeds: {})  base_ap50 {base_mean:.4}",
            vals.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
        );
        kv.set(&format!("{variant}.novel_ap50"), mean);
        kv.set(&format!("{variant}.base_ap50"), base_mean);
    }
    std::fs::write(cfg.run.out_dir.join("ablate_report.txt"), &report)?;
    std::fs::write(cfg.run.out_dir.join("ablate_metrics.txt"), kv.to_kv())?;
    println!("{report}");
    Ok(flat)
}

fn ablate_one_seed(base_cfg: &ExperimentConfig, seed: u64) -> Result<Vec<AblationOutcome>> {
    let seed_dir = base_cfg.run.out_dir.join("ablate").join(format!("seed{seed}"));
    let mut shared = base_cfg.clone();
    shared.run.seed = seed;
    shared.run.out_dir = seed_dir.clone();
    run_gen_data(&shared)?;
    run_pretrain_clip(&shared)?;
    if ABLATION_VARIANTS.iter().any(|&(_, dop, _)| dop) {
        run_pretrain_dop(&shared)?;
    }

    let mut outcomes = Vec::new();
    for (variant, use_dop, use_swl) in ABLATION_VARIANTS {
        let mut vcfg = shared.clone();
        vcfg.run.out_dir = seed_dir.join(variant);
        vcfg.finetune.init_heads_from_dop = use_dop;
        vcfg.swl.finetuned = use_swl;
        vcfg.swl.frozen = use_swl;
        std::fs::create_dir_all(&vcfg.run.out_dir)?;
        // Variants share the seed-level dataset and pretraining checkpoints.
        link_shared(&seed_dir, &vcfg.run.out_dir)?;
        run_finetune(&vcfg)?;
        let metrics = run_evaluate(&vcfg)?;
        outcomes.push(AblationOutcome { variant: variant.to_string(), seed, metrics });
    }
    Ok(outcomes)
}

/// Copy the seed-level artifacts a variant depends on into its directory.
fn link_shared(seed_dir: &Path, variant_dir: &Path) -> Result<()> {
    for name in [CLIP_CKPT, DOP_CKPT] {
        let src = seed_dir.join(name);
        if src.exists() {
            std::fs::copy(&src, variant_dir.join(name))?;
        }
    }
    let data_src = seed_dir.join("data");
    let data_dst = variant_dir.join("data");
    if !data_dst.exists() {
        copy_dir(&data_src, &data_dst)?;
    }
    Ok(())
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else {
            std::fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}
