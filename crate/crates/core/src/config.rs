//! Experiment configuration: one TOML tree covering every stage, validated
//! against the module invariants at load time. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{grammar_words, CategoryDef, SyntheticSpec};
use crate::ovd::{DetectionView, EnsembleParams};
use crate::pretrain::{PoolingMode, TextConfig, Vocab};
use crate::swl::{compute_shift_size, SwlConfig};
use crate::vit::ViTConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub num_pretrain: usize,
    pub num_finetune: usize,
    pub num_eval: usize,
    pub base_categories: Vec<String>,
    pub novel_categories: Vec<String>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_scale: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Detection-time window grid K per side.
    pub grid: usize,
    pub global_layers: usize,
    pub joint_dim: usize,
    pub fpn_channels: usize,
    pub rcnn_hidden: usize,
    pub roi_out: usize,
    pub samples_per_bin: usize,
    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwlSection {
    pub q: f64,
    pub finetuned: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub image_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub crop_scale: [f64; 2],
    pub crop_aspect: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DopConfig {
    pub image_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Regions per pyramid level 2..5.
    pub n_per_level: [usize; 4],
    pub pooling: PoolingMode,
    pub scale_range: [f64; 2],
    pub aspect_range: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub backbone_lr_ratio: f64,
    pub step_decay_factor: f64,
    pub step_decay_milestones: Vec<f64>,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Initialize FPN and region head from the phase-2 checkpoint.
    pub init_heads_from_dop: bool,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_samples: usize,
    pub match_iou: f64,
    pub proposals_per_image: usize,
    pub pos_fraction: f64,
    pub anchor_scale: f64,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub det_temp: f64,
    pub vlm_temp: f64,
    pub alpha: f64,
    pub beta: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    pub use_frozen_vlm: bool,
    pub vlm_roi_out: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub heatmap_window_cells: usize,
    pub heatmap_images: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub swl: SwlSection,
    pub clip: ClipConfig,
    pub dop: DopConfig,
    pub finetune: FinetuneConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults sized for a CPU-only run.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            run: RunConfig { seed: 1, deterministic: true, out_dir: PathBuf::from("runs/desk") },
            data: DataConfig {
                seed: 7,
                image_size: 64,
                num_pretrain: 1200,
                num_finetune: 300,
                num_eval: 200,
                base_categories: vec![
                    "red circle".into(),
                    "blue square".into(),
                    "green triangle".into(),
                    "yellow cross".into(),
                    "purple diamond".into(),
                    "orange ring".into(),
                    "cyan circle".into(),
                    "white square".into(),
                ],
                novel_categories: vec![
                    "blue triangle".into(),
                    "red cross".into(),
                    "green square".into(),
                    "yellow circle".into(),
                ],
                objects_min: 2,
                objects_max: 3,
                object_scale: [0.18, 0.36],
            },
            model: ModelConfig {
                patch_size: 8,
                embed_dim: 48,
                depth: 4,
                heads: 4,
                grid: 2,
                global_layers: 1,
                joint_dim: 48,
                fpn_channels: 16,
                rcnn_hidden: 96,
                roi_out: 5,
                samples_per_bin: 2,
                text_dim: 64,
                text_depth: 2,
                text_heads: 4,
                text_max_len: 24,
            },
            swl: SwlSection { q: 0.5, finetuned: true, frozen: true },
            clip: ClipConfig {
                image_size: 32,
                lr: 3e-3,
                weight_decay: 0.01,
                warmup_steps: 40,
                total_steps: 400,
                batch_size: 16,
                crop_scale: [0.3, 1.0],
                crop_aspect: [0.5, 2.0],
            },
            dop: DopConfig {
                image_size: 64,
                lr: 1e-3,
                weight_decay: 0.01,
                warmup_steps: 25,
                total_steps: 250,
                batch_size: 8,
                n_per_level: [24, 12, 6, 3],
                pooling: PoolingMode::MaxPerLevel,
                scale_range: [0.2, 1.0],
                aspect_range: [0.5, 2.0],
            },
            finetune: FinetuneConfig {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
                backbone_lr_ratio: 0.6,
                step_decay_factor: 0.1,
                step_decay_milestones: vec![0.8, 0.9, 0.95],
                warmup_steps: 30,
                total_steps: 400,
                batch_size: 4,
                init_heads_from_dop: true,
                rpn_pos_iou: 0.7,
                rpn_neg_iou: 0.3,
                rpn_samples: 64,
                match_iou: 0.5,
                proposals_per_image: 64,
                pos_fraction: 0.25,
                anchor_scale: 4.0,
                rpn_pre_nms: 300,
                rpn_post_nms: 48,
                rpn_nms_iou: 0.7,
            },
            score: ScoreConfig {
                det_temp: 0.01,
                vlm_temp: 0.01,
                alpha: 0.35,
                beta: 0.65,
                score_thresh: 0.02,
                nms_iou: 0.5,
                max_dets: 20,
                use_frozen_vlm: true,
                vlm_roi_out: 4,
            },
            eval: EvalConfig { heatmap_window_cells: 3, heatmap_images: 8 },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut tree, key, value)?;
        }
        let rendered = toml::to_string(&tree).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&rendered)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.vit_detection_cfg().validate()?;
        self.vit_clip_cfg().validate()?;
        self.vit_dop_cfg().validate()?;
        self.swl_config().validate()?;
        if m.embed_dim % 4 != 0 {
            return Err(Error::Config("embed_dim must be divisible by 4 for the pyramid".into()));
        }
        let det_side = self.data.image_size / m.patch_size;
        if det_side < 8 || det_side % 2 != 0 {
            return Err(Error::Config(format!(
                "detection token side {det_side} must be an even number >= 8"
            )));
        }
        let dop_side = self.dop.image_size / m.patch_size;
        if dop_side < 8 || dop_side % 2 != 0 {
            return Err(Error::Config(format!(
                "phase-2 token side {dop_side} must be an even number >= 8"
            )));
        }
        if m.text_dim % m.text_heads != 0 {
            return Err(Error::Config("text_heads must divide text_dim".into()));
        }
        for name in self.data.base_categories.iter().chain(&self.data.novel_categories) {
            CategoryDef::from_name(name)?;
        }
        for b in &self.data.base_categories {
            if self.data.novel_categories.contains(b) {
                return Err(Error::Config(format!("category '{b}' is both base and novel")));
            }
        }
        if self.data.base_categories.is_empty() || self.data.novel_categories.is_empty() {
            return Err(Error::Config("need at least one base and one novel category".into()));
        }
        if self.dop.n_per_level.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "dop.n_per_level must be non-increasing, got {:?}",
                self.dop.n_per_level
            )));
        }
        EnsembleParams { alpha: self.score.alpha, beta: self.score.beta }.validate()?;
        if !(0.0..1.0).contains(&self.finetune.pos_fraction) {
            return Err(Error::Config("finetune.pos_fraction must be in [0, 1)".into()));
        }
        if self.score.det_temp <= 0.0 || self.score.vlm_temp <= 0.0 {
            return Err(Error::Config("score temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn swl_config(&self) -> SwlConfig {
        SwlConfig { q: self.swl.q, finetuned: self.swl.finetuned, frozen: self.swl.frozen }
    }

    /// Backbone view at detection resolution with window attention.
    pub fn vit_detection_cfg(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.data.image_size,
            patch_size: self.model.patch_size,
            embed_dim: self.model.embed_dim,
            depth: self.model.depth,
            heads: self.model.heads,
            grid: self.model.grid,
            global_layers: self.model.global_layers,
        }
    }

    /// Backbone view for phase-1 pretraining: global attention.
    pub fn vit_clip_cfg(&self) -> ViTConfig {
        ViTConfig { image_size: self.clip.image_size, grid: 1, ..self.vit_detection_cfg() }
    }

    /// Backbone view for phase-2 pretraining: global attention.
    pub fn vit_dop_cfg(&self) -> ViTConfig {
        ViTConfig { image_size: self.dop.image_size, grid: 1, ..self.vit_detection_cfg() }
    }

    pub fn all_categories(&self) -> Vec<(String, bool)> {
        let mut v: Vec<(String, bool)> =
            self.data.base_categories.iter().map(|n| (n.clone(), false)).collect();
        v.extend(self.data.novel_categories.iter().map(|n| (n.clone(), true)));
        v
    }

    /// CLIP-style prompt templates for category embeddings.
    pub fn templates(&self) -> Vec<String> {
        vec![
            "a photo of a {}".into(),
            "an image of a {}".into(),
            "a picture showing a {}".into(),
            "a scene with a {}".into(),
        ]
    }

    /// Vocabulary of the caption grammar plus all category words.
    pub fn vocab(&self) -> Vocab {
        let mut words = grammar_words();
        for name in self.data.base_categories.iter().chain(&self.data.novel_categories) {
            for w in name.split_whitespace() {
                words.push(w.to_string());
            }
        }
        for t in self.templates() {
            for w in t.replace("{}", "").split_whitespace() {
                words.push(w.to_string());
            }
        }
        Vocab::new(words)
    }

    pub fn text_cfg(&self) -> TextConfig {
        TextConfig {
            vocab_size: self.vocab().len(),
            dim: self.model.text_dim,
            depth: self.model.text_depth,
            heads: self.model.text_heads,
            max_len: self.model.text_max_len,
        }
    }

    pub fn n_per_level_map(&self) -> BTreeMap<u8, usize> {
        [2u8, 3, 4, 5].iter().copied().zip(self.dop.n_per_level).collect()
    }

    /// Dataset spec for one split. Pretraining and evaluation draw from all
    /// categories; finetuning sees only base objects.
    pub fn synthetic_spec(&self, split: Split) -> SyntheticSpec {
        let (seed_tag, num_images, categories) = match split {
            Split::Pretrain => ("pretrain", self.data.num_pretrain, self.all_names()),
            Split::Finetune => ("finetune", self.data.num_finetune, self.data.base_categories.clone()),
            Split::Eval => ("eval", self.data.num_eval, self.all_names()),
        };
        SyntheticSpec {
            seed: crate::rng::derive_seed(self.data.seed, seed_tag),
            image_size: self.data.image_size,
            num_images,
            categories,
            objects_min: self.data.objects_min,
            objects_max: self.data.objects_max,
            object_scale: (self.data.object_scale[0], self.data.object_scale[1]),
        }
    }

    fn all_names(&self) -> Vec<String> {
        self.data
            .base_categories
            .iter()
            .chain(&self.data.novel_categories)
            .cloned()
            .collect()
    }

    /// Shift size at detection resolution.
    pub fn shift(&self) -> Result<(usize, usize)> {
        compute_shift_size(self.data.image_size, self.model.patch_size, self.model.grid, self.swl.q)
    }

    pub fn detection_view(&self) -> Result<DetectionView> {
        let (_, shift) = self.shift()?;
        Ok(DetectionView {
            vit_cfg: self.vit_detection_cfg(),
            swl: self.swl_config(),
            shift,
            roi_out: self.model.roi_out,
            samples_per_bin: self.model.samples_per_bin,
            anchor_scale: self.finetune.anchor_scale,
            rpn_pre_nms: self.finetune.rpn_pre_nms,
            rpn_post_nms: self.finetune.rpn_post_nms,
            rpn_nms_iou: self.finetune.rpn_nms_iou,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Finetune,
    Eval,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Eval => "eval",
        }
    }
}

/// Apply one `--set path.to.key=value` override onto the TOML tree. The
/// value is parsed as TOML when possible, falling back to a string.
fn apply_override(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty override key '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::desk_default().to_toml();
        text.push_str("\n[bogus]\nx = 1\n");
        let err = ExperimentConfig::from_toml(&text);
        assert!(err.is_err());
        let mut text2 = ExperimentConfig::desk_default().to_toml();
        text2 = text2.replace("[swl]", "[swl]\nnot_a_field = 3");
        assert!(ExperimentConfig::from_toml(&text2).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = ExperimentConfig::desk_default().to_toml();
        let cfg = ExperimentConfig::from_toml_with_overrides(
            &text,
            &[
                ("swl.q".to_string(), "0.25".to_string()),
                ("run.seed".to_string(), "99".to_string()),
                ("dop.n_per_level".to_string(), "[8, 4, 2, 1]".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.swl.q, 0.25);
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.dop.n_per_level, [8, 4, 2, 1]);
    }

    #[test]
    fn invalid_values_produce_field_errors() {
        let text = ExperimentConfig::desk_default().to_toml();
        // q outside (0, 1]
        assert!(ExperimentConfig::from_toml_with_overrides(
            &text,
            &[("swl.q".to_string(), "1.5".to_string())]
        )
        .is_err());
        // overlapping splits
        assert!(ExperimentConfig::from_toml_with_overrides(
            &text,
            &[("data.novel_categories".to_string(), "[\"red circle\"]".to_string())]
        )
        .is_err());
        // increasing region counts
        assert!(ExperimentConfig::from_toml_with_overrides(
            &text,
            &[("dop.n_per_level".to_string(), "[1, 2, 3, 4]".to_string())]
        )
        .is_err());
    }

    #[test]
    fn derived_views_share_dimensions() {
        let cfg = ExperimentConfig::desk_default();
        let det = cfg.vit_detection_cfg();
        let clip = cfg.vit_clip_cfg();
        assert_eq!(det.embed_dim, clip.embed_dim);
        assert_eq!(clip.grid, 1);
        let (m, s) = cfg.shift().unwrap();
        assert_eq!(m, det.window_cell());
        assert!(s >= 1 && s <= m);
    }

    #[test]
    fn vocab_covers_captions_and_templates() {
        let cfg = ExperimentConfig::desk_default();
        let vocab = cfg.vocab();
        vocab.encode("a photo of a red circle and a blue square").unwrap();
        for t in cfg.templates() {
            vocab.encode(&t.replace("{}", "yellow circle")).unwrap();
        }
    }
}
