//! Inference: run a trained tracker over a frame sequence.
//!
//! Frame 0 initializes the per-sequence state — both templates are cut
//! around the given box, and the memory bank is seeded with the
//! aggregation token of an encoding pass on that frame. Every later
//! frame crops a search window around the previous prediction, runs the
//! full forward pass on a fresh graph, decodes a box, pushes the new
//! compressed state into the bank, and refreshes the dynamic template
//! when the update policy fires.

use std::path::Path;

use crate::boxes::{BBox, Window};
use crate::checkpoint::{load_records, save_records};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::memory::{MemoryBank, TemplatePolicy};
use crate::model::{FrameInput, Tracker};
use crate::tensor::graph::Graph;
use crate::tensor::{ParamStore, Tensor};

/// One tracked frame.
#[derive(Clone, Copy, Debug)]
pub struct TrackRecord {
    /// Frame index.
    pub frame: usize,
    /// Predicted box in frame pixels.
    pub bbox: BBox,
    /// Decoded score-map confidence (1.0 on the init frame).
    pub confidence: f64,
}

/// What [`track_sequence`] should retain beyond boxes.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrackOptions {
    /// Keep each frame's raw and normalized heatmaps.
    pub collect_heatmaps: bool,
    /// Keep each frame's text and search features (similarity probe).
    pub collect_features: bool,
}

/// Everything a tracking run produced.
#[derive(Clone, Debug)]
pub struct TrackOutcome {
    /// One record per frame, index 0 first.
    pub records: Vec<TrackRecord>,
    /// Per processed frame (1..T-1): `(raw, normalized)` heatmap
    /// columns, when collected.
    pub heatmaps: Vec<(Tensor, Tensor)>,
    /// Per processed frame: `(f_L, f_X)` features, when collected.
    pub features: Vec<(Tensor, Tensor)>,
    /// Search windows used on frames 1..T-1 (for mapping grid cells
    /// back to frame pixels).
    pub windows: Vec<Window>,
}

/// Per-sequence mutable tracking state.
#[derive(Clone, Debug)]
pub struct TrackState {
    /// Latest predicted box in frame pixels.
    pub bbox: BBox,
    /// Latest confidence.
    pub confidence: f64,
    /// Next frame index to process.
    pub frame_index: usize,
    /// Current dynamic template crop.
    pub dynamic_template: Image,
    /// Memory bank of detached compressed states.
    pub bank: MemoryBank<Tensor>,
}

impl TrackState {
    /// Serializes the state as named-tensor records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Tensor::new(
            vec![1, 6],
            vec![
                self.bbox.x,
                self.bbox.y,
                self.bbox.w,
                self.bbox.h,
                self.confidence,
                self.frame_index as f64,
            ],
        )?;
        let template = self.dynamic_template.to_tensor();
        let mut records = vec![
            ("state/meta".to_string(), meta),
            ("state/dynamic_template".to_string(), template),
        ];
        records.extend(self.bank.to_records("state/bank"));
        save_records(path, records.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Restores a state written by [`TrackState::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let records = load_records(path)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("{}: missing {name}", path.display())))
        };
        let meta = find("state/meta")?;
        if meta.shape() != [1, 6] {
            return Err(Error::Format(format!(
                "{}: state/meta must be [1, 6], got {:?}",
                path.display(),
                meta.shape()
            )));
        }
        let m = meta.data();
        let template = find("state/dynamic_template")?;
        let ts = template.shape().to_vec();
        if ts.len() != 3 {
            return Err(Error::Format(format!(
                "{}: dynamic template must be [c, h, w], got {ts:?}",
                path.display()
            )));
        }
        let dynamic_template = Image::from_data(
            ts[0],
            ts[1],
            ts[2],
            template.data().iter().map(|&v| v as f32).collect(),
        )?;
        Ok(TrackState {
            bbox: BBox::new(m[0], m[1], m[2], m[3]),
            confidence: m[4],
            frame_index: m[5] as usize,
            dynamic_template,
            bank: MemoryBank::from_records(&records, "state/bank")?,
        })
    }
}

/// Crops a model input around `b` scaled by `scale`, resized to `out`.
fn crop(frame: &Image, b: &BBox, scale: f64, out: usize) -> Result<Image> {
    let win = Window::around(b, scale);
    frame.crop_resize(win.cx, win.cy, win.side, out)
}

/// Runs the tracker over `frames`, starting from `init_box` (frame
/// pixels). Returns one record per frame; frame 0's record is the init
/// box at confidence 1.
pub fn track_sequence(
    tracker: &Tracker,
    store: &ParamStore,
    frames: &[Image],
    ids: &[usize],
    init_box: &BBox,
    opts: &TrackOptions,
) -> Result<TrackOutcome> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("cannot track an empty sequence".into()))?;
    if init_box.w <= 0.0 || init_box.h <= 0.0 {
        return Err(Error::Input(format!(
            "initial box must have positive size, got {}x{}",
            init_box.w, init_box.h
        )));
    }
    let cfg = &tracker.cfg;
    let policy =
        TemplatePolicy { interval: cfg.template_interval, threshold: cfg.template_threshold };
    let (frame_w, frame_h) = (first.width as f64, first.height as f64);

    let initial_template = crop(first, init_box, cfg.template_scale, cfg.template_size)?;
    let mut state = {
        let search0 = crop(first, init_box, cfg.search_scale, cfg.search_size)?;
        let mut g = Graph::new();
        let cls0 = tracker.initial_state(&mut g, store, &search0, &initial_template)?;
        let bank = MemoryBank::init(g.tensor(cls0).clone(), cfg.memory_len)?;
        TrackState {
            bbox: *init_box,
            confidence: 1.0,
            frame_index: 1,
            dynamic_template: initial_template.clone(),
            bank,
        }
    };

    let mut outcome = TrackOutcome {
        records: vec![TrackRecord { frame: 0, bbox: *init_box, confidence: 1.0 }],
        heatmaps: Vec::new(),
        features: Vec::new(),
        windows: Vec::new(),
    };

    for (t, frame) in frames.iter().enumerate().skip(1) {
        let window = Window::around(&state.bbox, cfg.search_scale);
        let search = frame.crop_resize(window.cx, window.cy, window.side, cfg.search_size)?;
        let prev_win = window.normalize(&state.bbox);

        let mut g = Graph::new();
        let memory = g.constant(state.bank.snapshot()?);
        let out = tracker.forward(
            &mut g,
            store,
            &FrameInput {
                search: &search,
                template_initial: &initial_template,
                template_dynamic: Some(&state.dynamic_template),
                ids,
                memory,
                prev_box: Some(&prev_win),
            },
        )?;
        let (box_win, confidence, _) = out.maps.decode(&g);
        let raw = window.denormalize(&box_win);
        let bbox = BBox {
            x: raw.x,
            y: raw.y,
            w: raw.w.clamp(1.0, frame_w),
            h: raw.h.clamp(1.0, frame_h),
        }
        .clamp_center(frame_w, frame_h);

        if let Some(m) = out.new_memory_state {
            state.bank.push(g.tensor(m).clone(), t);
        }
        if cfg.ablation.dynamic_template && policy.due(t, confidence) {
            state.dynamic_template = crop(frame, &bbox, cfg.template_scale, cfg.template_size)?;
        }
        if opts.collect_heatmaps {
            if let (Some(raw_h), Some(h)) = (out.heatmap_raw, out.heatmap) {
                outcome.heatmaps.push((g.tensor(raw_h).clone(), g.tensor(h).clone()));
            }
        }
        if opts.collect_features {
            outcome
                .features
                .push((g.tensor(out.text_features).clone(), g.tensor(out.search_features).clone()));
        }
        outcome.windows.push(window);

        state.bbox = bbox;
        state.confidence = confidence;
        state.frame_index = t + 1;
        outcome.records.push(TrackRecord { frame: t, bbox, confidence });
    }
    Ok(outcome)
}
