//! Full tracker assembly: encoders, textual guidance, visual guidance,
//! and the prediction head, wired per the structural switches in
//! [`AblationConfig`].
//!
//! One [`Tracker::forward`] call processes a single search frame. The
//! caller owns the per-sequence state (memory bank, dynamic template,
//! previous box) and threads it through: training keeps the bank as
//! live graph handles so gradients flow across a sample's frames, while
//! inference stores detached tensors and rebuilds a fresh graph per
//! frame.
//!
//! Ablation wiring:
//!
//! * `textual = Off` — no word head, no calibration, no injection; the
//!   search features instead cross-attend to the raw text through a
//!   plain decoder stack of `fusion_layers` blocks.
//! * `textual = Awareness` — word probabilities weight the text, and
//!   `[f_LT; f_L]` is injected; no calibration.
//! * `textual = Calibrated` — the full path, with `dual_text` choosing
//!   `[f_L; f_L']` versus `f_L'` alone.
//! * `visual = false` — no heatmap, no memory representation, no
//!   parameter-free read; the head consumes the text-injected features
//!   directly. When the calibrated text path still needs memory units,
//!   the encoder's aggregation token stands in for the compressed
//!   state, so the bank keeps tracking recent appearance.
//!
//! Disabled paths register no parameters, so a structural ablation is
//! visible in the checkpoint itself.

use crate::boxes::BBox;
use crate::config::{HeatmapMode, ModelConfig, TextualMode};
use crate::encoders::{TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::head::{HeadMaps, PredictionHead};
use crate::image::Image;
use crate::nn::DecoderBlock;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::ParamStore;
use crate::text_guidance::{guidance_features, ContextCalibration, TargetWordHead, TextInjection};
use crate::visual_guidance::{
    apply_heatmap_mode, box_footprint, correlation_heatmap, heatmap_reference, memory_read,
    memory_read_keys, MemoryRepresentation,
};

/// Everything one search-frame pass needs from the caller.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    /// Search crop (`search_size` square).
    pub search: &'a Image,
    /// Initial template crop (`template_size` square).
    pub template_initial: &'a Image,
    /// Dynamic template crop; ignored when the dynamic template is
    /// disabled structurally.
    pub template_dynamic: Option<&'a Image>,
    /// Tokenized sentence.
    pub ids: &'a [usize],
    /// Memory snapshot `M*: [L_m, dim]`, oldest unit first.
    pub memory: Var,
    /// Previous box in window coordinates; required by the masked
    /// heatmap modes, ignored otherwise.
    pub prev_box: Option<&'a BBox>,
}

/// Products of one search-frame pass.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutput {
    /// Head maps over the search grid.
    pub maps: HeadMaps,
    /// Target-word probabilities `p_T: [N_l, 1]`, when the language
    /// path runs.
    pub word_probs: Option<Var>,
    /// Normalized target-context heatmap actually used for memory
    /// weighting (`[N_x, 1]`), when the visual path runs.
    pub heatmap: Option<Var>,
    /// Raw (pre-sigmoid, unscaled) correlation row-means.
    pub heatmap_raw: Option<Var>,
    /// State the caller should push into the memory bank after this
    /// frame, if the active configuration maintains memory.
    pub new_memory_state: Option<Var>,
    /// Aggregation token `f_cls: [1, dim]`.
    pub cls: Var,
    /// Encoded sentence `f_L: [N_l, dim]` (the raw encoder output).
    pub text_features: Var,
    /// Encoded search region `f_X: [N_x, dim]` before any guidance.
    pub search_features: Var,
}

/// The assembled tracker.
#[derive(Clone, Debug)]
pub struct Tracker {
    /// Structure this instance was built with.
    pub cfg: ModelConfig,
    vision: VisionEncoder,
    text: TextEncoder,
    word_head: Option<TargetWordHead>,
    calibration: Option<ContextCalibration>,
    injection: Option<TextInjection>,
    fusion: Vec<DecoderBlock>,
    memory_repr: Option<MemoryRepresentation>,
    head: PredictionHead,
}

impl Tracker {
    /// Registers every parameter the configuration calls for. Paths
    /// switched off by the ablation flags register nothing.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let ab = cfg.ablation;
        let vision = VisionEncoder::new(store, cfg)?;
        let text = TextEncoder::new(store, cfg, vocab_size)?;
        let (word_head, injection) = if ab.textual == TextualMode::Off {
            (None, None)
        } else {
            (
                Some(TargetWordHead::new(store, "wordhead", cfg.dim)?),
                Some(TextInjection::new(store, "inject", cfg.dim, cfg.heads)?),
            )
        };
        let calibration = if ab.textual == TextualMode::Calibrated {
            Some(ContextCalibration::new(store, "calib", cfg.dim, cfg.heads)?)
        } else {
            None
        };
        let fusion = if ab.textual == TextualMode::Off {
            if ab.fusion_layers == 0 {
                return Err(Error::Contract(
                    "the language path is off, so fusion_layers must be at least 1".into(),
                ));
            }
            (0..ab.fusion_layers)
                .map(|i| DecoderBlock::new(store, &format!("fusion/block{i}"), cfg.dim, cfg.heads))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let memory_repr = if ab.visual {
            Some(MemoryRepresentation::new(store, "memrep", cfg.dim, cfg.heads)?)
        } else {
            None
        };
        let head = PredictionHead::new(store, "head", cfg.dim, cfg.head_layers)?;
        Ok(Tracker { cfg: *cfg, vision, text, word_head, calibration, injection, fusion, memory_repr, head })
    }

    /// Search-grid side in patches.
    pub fn grid_side(&self) -> usize {
        self.cfg.search_tokens_side()
    }

    /// Target-word probabilities for a sentence alone — the text
    /// encoder plus the word head, no visual pass. `None` when the
    /// language path is structurally off.
    pub fn word_probabilities(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
    ) -> Result<Option<Var>> {
        match &self.word_head {
            None => Ok(None),
            Some(wh) => {
                let f_l = self.text.apply(g, store, ids)?;
                Ok(Some(wh.probabilities(g, store, f_l)?))
            }
        }
    }

    /// Raw encoder outputs for one frame, bypassing all guidance: the
    /// sentence features `f_L: [N_l, dim]` and the search features
    /// `f_X: [N_x, dim]`. This is what the similarity-baseline probe
    /// compares — plain token alignment, no learned word head.
    pub fn encode_frame(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        search: &Image,
        template: &Image,
        ids: &[usize],
    ) -> Result<(Var, Var)> {
        let dynamic = self.cfg.ablation.dynamic_template.then_some(template);
        let vis = self.vision.apply(g, store, search, template, dynamic)?;
        let f_l = self.text.apply(g, store, ids)?;
        Ok((f_l, vis.search))
    }

    /// Encodes frame 0 and returns the aggregation token that seeds the
    /// memory bank. The dynamic template starts as a copy of the
    /// initial one, matching how tracking begins.
    pub fn initial_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        search0: &Image,
        template: &Image,
    ) -> Result<Var> {
        let dynamic = self.cfg.ablation.dynamic_template.then_some(template);
        let vis = self.vision.apply(g, store, search0, template, dynamic)?;
        Ok(vis.cls)
    }

    /// Runs textual then visual guidance on one search frame and
    /// decodes head maps over the search grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &FrameInput,
    ) -> Result<FrameOutput> {
        let ab = self.cfg.ablation;
        let mshape = g.shape(input.memory).to_vec();
        if mshape != [self.cfg.memory_len, self.cfg.dim] {
            return Err(Error::Contract(format!(
                "memory snapshot must be [{}, {}], got {mshape:?}",
                self.cfg.memory_len, self.cfg.dim
            )));
        }
        let dynamic = if ab.dynamic_template { input.template_dynamic } else { None };
        let vis = self.vision.apply(g, store, input.search, input.template_initial, dynamic)?;
        let f_l = self.text.apply(g, store, input.ids)?;

        // Textual guidance, or the plain fusion fallback.
        let (f_xl, word_probs) = match ab.textual {
            TextualMode::Off => {
                let mut x = vis.search;
                for block in &self.fusion {
                    x = block.apply(g, store, x, f_l)?;
                }
                (x, None)
            }
            TextualMode::Awareness => {
                let wh = self.word_head.as_ref().expect("built with a language path");
                let (f_lt, p_t) = wh.weight(g, store, f_l)?;
                let f_lc = guidance_features(g, &ab, f_l, f_lt, None)?;
                let inject = self.injection.as_ref().expect("built with a language path");
                let f_xl = inject.apply(g, store, vis.search, f_lc, ab.multiplicative_text)?;
                (f_xl, Some(p_t))
            }
            TextualMode::Calibrated => {
                let wh = self.word_head.as_ref().expect("built with a language path");
                let (f_lt, p_t) = wh.weight(g, store, f_l)?;
                let calib = self.calibration.as_ref().expect("built calibrated");
                let f_lp = calib.apply(g, store, f_l, f_lt, input.memory)?;
                let f_lc = guidance_features(g, &ab, f_l, f_lt, Some(f_lp))?;
                let inject = self.injection.as_ref().expect("built with a language path");
                let f_xl = inject.apply(g, store, vis.search, f_lc, ab.multiplicative_text)?;
                (f_xl, Some(p_t))
            }
        };

        // Visual guidance: heatmap over raw search features, compressed
        // state, parameter-free read over the injected features.
        let side = self.grid_side();
        let (f_r, heatmap, heatmap_raw, m_t) = if ab.visual {
            let f_z =
                heatmap_reference(g, ab.heatmap_templates, vis.template_initial, vis.template_dynamic)?;
            let (raw, h) = correlation_heatmap(g, vis.search, f_z)?;
            let footprint = match ab.heatmap {
                HeatmapMode::Global => None,
                HeatmapMode::CropMask | HeatmapMode::Roi => {
                    let prev = input.prev_box.ok_or_else(|| {
                        Error::Contract("masked heatmap modes need the previous box".into())
                    })?;
                    Some(box_footprint(prev, side, side, 1.5))
                }
            };
            let h_used = apply_heatmap_mode(g, h, ab.heatmap, footprint.as_ref())?;
            let repr = self.memory_repr.as_ref().expect("built with the visual path");
            let m_t = repr.apply(g, store, vis.cls, input.memory, vis.search, h_used)?;
            let (keys, residual) = memory_read_keys(g, ab.memory_keys, input.memory, m_t)?;
            let f_r = memory_read(g, f_xl, keys, residual)?;
            (f_r, Some(h_used), Some(raw), Some(m_t))
        } else {
            (f_xl, None, None, None)
        };

        let maps = self.head.apply(g, store, f_r, side, side)?;
        // Without the visual path the aggregation token stands in for
        // the compressed state, keeping calibration memory fresh.
        let new_memory_state = match (m_t, ab.textual) {
            (Some(m), _) => Some(m),
            (None, TextualMode::Calibrated) => Some(vis.cls),
            (None, _) => None,
        };
        Ok(FrameOutput {
            maps,
            word_probs,
            heatmap,
            heatmap_raw,
            new_memory_state,
            cls: vis.cls,
            text_features: f_l,
            search_features: vis.search,
        })
    }
}
