//! Run configuration: model structure, ablation switches, training
//! schedule, and synthetic-world parameters.
//!
//! Everything serializes to TOML. `Default` gives the desk-scale setup
//! used by the test suite and the examples: it trains in minutes on a
//! laptop while preserving every architectural mechanism of the full
//! design.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Which form of language guidance is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextualMode {
    /// No language path: search features are fused with raw text
    /// features by a plain decoder stack ([`AblationConfig::fusion_layers`]).
    Off,
    /// Target-word awareness only: the word-probability head weights the
    /// text features, but no context calibration runs.
    Awareness,
    /// Full path: awareness plus memory-calibrated context words.
    Calibrated,
}

/// How the target-context heatmap treats positions outside the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Correlation scores over the whole search region (the full design:
    /// context positions keep graded weights).
    Global,
    /// Scores outside 1.5x the previous box are zeroed (crop-style mask).
    CropMask,
    /// No correlation at all: uniform weight inside 1.5x the previous
    /// box, zero outside (box-pooling baseline).
    Roi,
}

/// Which keys the parameter-free memory read attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKeys {
    /// The whole bank plus the current state, with a residual connection.
    Bank,
    /// Only the current compressed state, no residual (the minimal
    /// single-key read).
    Newest,
}

/// Which templates contribute rows to the correlation heatmap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapTemplates {
    /// Initial and dynamic template tokens together.
    Both,
    /// Only the initial template.
    InitialOnly,
    /// Only the dynamic template.
    DynamicOnly,
}

/// Structural switches. The full model is `AblationConfig::default()`;
/// the named presets of [`RunConfig::apply_ablation`] disable parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Language-guidance form.
    pub textual: TextualMode,
    /// Feed both raw and calibrated text into the search features
    /// (ignored unless `textual` is `Calibrated`).
    pub dual_text: bool,
    /// Whether the visual guidance path (heatmap, memory read) runs.
    pub visual: bool,
    /// Heatmap masking mode (ignored when `visual` is off).
    pub heatmap: HeatmapMode,
    /// Templates used for the heatmap correlation.
    pub heatmap_templates: HeatmapTemplates,
    /// Key set for the parameter-free memory read.
    pub memory_keys: MemoryKeys,
    /// Inject text multiplicatively (`f + f * attn`) instead of
    /// additively (`f + attn`).
    pub multiplicative_text: bool,
    /// Maintain a dynamic template alongside the initial one.
    pub dynamic_template: bool,
    /// Depth of the fallback fusion decoder when `textual` is `Off`.
    pub fusion_layers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            textual: TextualMode::Calibrated,
            dual_text: true,
            visual: true,
            heatmap: HeatmapMode::Global,
            heatmap_templates: HeatmapTemplates::Both,
            memory_keys: MemoryKeys::Bank,
            multiplicative_text: true,
            dynamic_template: true,
            fusion_layers: 4,
        }
    }
}

/// Model structure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub dim: usize,
    /// Attention heads in every attention layer.
    pub heads: usize,
    /// Square patch side in pixels.
    pub patch: usize,
    /// Search-region side in pixels (square crop).
    pub search_size: usize,
    /// Template side in pixels (square crop).
    pub template_size: usize,
    /// Image channels.
    pub channels: usize,
    /// Depth of the joint vision encoder.
    pub vision_layers: usize,
    /// Depth of the text encoder.
    pub text_layers: usize,
    /// Maximum words per sentence (position table size).
    pub max_words: usize,
    /// Memory bank capacity.
    pub memory_len: usize,
    /// Convolution layers per head branch.
    pub head_layers: usize,
    /// Search crop side as a multiple of the box scale.
    pub search_scale: f64,
    /// Template crop side as a multiple of the box scale.
    pub template_scale: f64,
    /// Frame stride for dynamic-template refresh opportunities.
    pub template_interval: usize,
    /// Confidence floor for taking a refresh opportunity.
    pub template_threshold: f64,
    /// Structural ablation switches.
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 1,
            patch: 8,
            search_size: 64,
            template_size: 32,
            channels: 3,
            vision_layers: 2,
            text_layers: 2,
            max_words: 16,
            memory_len: 4,
            head_layers: 3,
            search_scale: 4.0,
            template_scale: 2.0,
            template_interval: 25,
            template_threshold: 0.8,
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Search-grid extent in patches (per side).
    pub fn search_tokens_side(&self) -> usize {
        self.search_size / self.patch
    }

    /// Number of search tokens.
    pub fn num_search_tokens(&self) -> usize {
        self.search_tokens_side() * self.search_tokens_side()
    }

    /// Number of tokens per template.
    pub fn num_template_tokens(&self) -> usize {
        let side = self.template_size / self.patch;
        side * side
    }

    /// Sanity checks on the combination of sizes.
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.search_size % self.patch != 0 || self.template_size % self.patch != 0 {
            return Err(Error::Contract(format!(
                "patch size {} must divide search {} and template {}",
                self.patch, self.search_size, self.template_size
            )));
        }
        if self.dim < 2 || self.dim % self.heads != 0 {
            return Err(Error::Contract(format!(
                "feature width {} must be >= 2 and divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.memory_len == 0 {
            return Err(Error::Contract("memory_len must be at least 1".into()));
        }
        if self.head_layers == 0 {
            return Err(Error::Contract("head_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training schedule and loss weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of passes over the sample budget.
    pub epochs: usize,
    /// Samples drawn per epoch.
    pub samples_per_epoch: usize,
    /// Consecutive frames per training sample.
    pub frames_per_sample: usize,
    /// Learning rate for everything outside the encoders.
    pub lr_main: f64,
    /// Learning rate for vision-encoder parameters (`vision/`).
    pub lr_encoder: f64,
    /// Learning rate for text-encoder parameters (`text/`). Keeping
    /// this far below `lr_main` mimics a near-frozen pretrained
    /// language backbone: the word head still learns roles at full
    /// rate, while raw text features stay generic.
    pub lr_text: f64,
    /// Epoch fractions at which the learning rate drops by 10x.
    pub lr_drops: [f64; 2],
    /// Decoupled weight decay on weight matrices.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
    /// Center/scale jitter amplitude for training crops (fraction).
    pub jitter: f64,
    /// Master seed for initialization and sampling.
    pub seed: u64,
    /// Classification (focal) loss weight.
    pub w_cls: f64,
    /// Generalized-overlap loss weight.
    pub w_iou: f64,
    /// Coordinate L1 loss weight.
    pub w_l1: f64,
    /// Word-role supervision weight.
    pub w_bce: f64,
    /// Validation sequences scored at the end of each epoch.
    pub val_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            samples_per_epoch: 200,
            frames_per_sample: 4,
            lr_main: 1e-3,
            lr_encoder: 1e-4,
            lr_text: 1e-4,
            lr_drops: [2.0 / 3.0, 5.0 / 6.0],
            weight_decay: 1e-4,
            clip_grad_norm: 1.0,
            jitter: 0.1,
            seed: 1,
            w_cls: 1.0,
            w_iou: 2.0,
            w_l1: 5.0,
            w_bce: 0.2,
            val_sequences: 8,
        }
    }
}

/// Synthetic-world generation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Square frame side in pixels.
    pub frame_size: usize,
    /// Frames per sequence.
    pub sequence_length: usize,
    /// Extra objects beyond target and described context object.
    pub num_distractors: usize,
    /// Minimum object radius in pixels.
    pub min_radius: f64,
    /// Maximum object radius in pixels.
    pub max_radius: f64,
    /// Maximum per-axis speed in pixels per frame.
    pub max_speed: f64,
    /// How far the target's color drifts toward another color by the
    /// final frame (0 = stable appearance, 1 = full swap).
    pub color_drift: f64,
    /// Probability that a sequence contains a sweeping occluder bar.
    pub occlusion_prob: f64,
    /// Probability that each distractor shares its shape or color with
    /// the target.
    pub distractor_similarity: f64,
    /// Whether sentences mention the reference object. `Auto` leaves it
    /// to the sentence template draw (about half mention it), `Always`
    /// and `Never` force the matter without disturbing the rest of the
    /// generator's random stream.
    pub reference_mentions: ReferenceMentions,
    /// Extra objects that copy the reference object's shape and color
    /// exactly, making the sentence's context words visually prominent.
    pub reference_clones: usize,
}

/// Sentence policy for mentioning the reference object; see
/// [`WorldConfig::reference_mentions`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMentions {
    /// Template draw decides (paper-like mixed corpus).
    #[default]
    Auto,
    /// Every sentence describes the reference object too.
    Always,
    /// No sentence mentions the reference object.
    Never,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            frame_size: 96,
            sequence_length: 32,
            num_distractors: 2,
            min_radius: 6.0,
            max_radius: 11.0,
            max_speed: 2.5,
            color_drift: 0.6,
            occlusion_prob: 0.3,
            distractor_similarity: 0.7,
            reference_mentions: ReferenceMentions::Auto,
            reference_clones: 0,
        }
    }
}

/// Every named structural preset, one per ablation-table row.
pub const ABLATION_PRESETS: [&str; 14] = [
    "full",
    "naive",
    "textual_only",
    "visual_only",
    "no_context_calibration",
    "single_text",
    "additive_text",
    "heatmap_crop_mask",
    "heatmap_roi",
    "heatmap_initial_only",
    "heatmap_dynamic_only",
    "memory_newest_only",
    "no_dynamic_template",
    "no_word_supervision",
];

/// Everything a run needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Model structure and ablations.
    pub model: ModelConfig,
    /// Training schedule.
    pub train: TrainConfig,
    /// Synthetic-world parameters.
    pub world: WorldConfig,
}

impl RunConfig {
    /// Reads a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Writes the TOML form of this config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("serializing config: {e}")))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    /// Applies a named ablation preset. Presets adjust structure (and,
    /// for `no_word_supervision`, the word loss weight); unknown names
    /// list the available presets.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        let ab = &mut self.model.ablation;
        match name {
            "full" => {}
            // No guidance at all: raw text reaches the search features
            // only through a plain decoder stack. The decoder depth
            // matches the visual-only row so each headline comparison
            // changes exactly one mechanism.
            "naive" => {
                ab.textual = TextualMode::Off;
                ab.visual = false;
                ab.fusion_layers = 2;
            }
            // Textual guidance only.
            "textual_only" => {
                ab.visual = false;
            }
            // Visual guidance only: text enters through a 2-layer
            // decoder instead of the language path.
            "visual_only" => {
                ab.textual = TextualMode::Off;
                ab.fusion_layers = 2;
            }
            "no_context_calibration" => ab.textual = TextualMode::Awareness,
            "single_text" => ab.dual_text = false,
            "additive_text" => ab.multiplicative_text = false,
            "heatmap_crop_mask" => ab.heatmap = HeatmapMode::CropMask,
            "heatmap_roi" => ab.heatmap = HeatmapMode::Roi,
            "heatmap_initial_only" => ab.heatmap_templates = HeatmapTemplates::InitialOnly,
            "heatmap_dynamic_only" => ab.heatmap_templates = HeatmapTemplates::DynamicOnly,
            "memory_newest_only" => ab.memory_keys = MemoryKeys::Newest,
            "no_dynamic_template" => ab.dynamic_template = false,
            "no_word_supervision" => self.train.w_bce = 0.0,
            other => {
                return Err(Error::Input(format!(
                    "unknown ablation {other:?}; available: {}",
                    ABLATION_PRESETS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// The preset name whose structural flags this config matches, if
    /// any — the reverse of [`RunConfig::apply_ablation`]. Knobs outside
    /// the ablation switches (sizes, schedule) are ignored.
    pub fn ablation_row(&self) -> Option<&'static str> {
        for name in ABLATION_PRESETS {
            let mut candidate = *self;
            candidate.model.ablation = AblationConfig::default();
            candidate.train.w_bce = TrainConfig::default().w_bce;
            candidate
                .apply_ablation(name)
                .expect("preset table names are valid");
            if candidate.model.ablation == self.model.ablation
                && candidate.train.w_bce == self.train.w_bce
            {
                return Some(name);
            }
        }
        None
    }
}
