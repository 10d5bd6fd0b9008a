//! Deterministic synthetic tracking world.
//!
//! Each sequence is a short video of colored geometric objects drifting
//! over a textured background: one *target*, one *reference* object
//! (used by relation sentences), and a few extra distractors that may
//! share the target's shape or color. The target's color can drift over
//! time and an occluder bar may sweep the scene, so appearance cues
//! decay and context cues matter — the regime the tracker is built for.
//!
//! Every sequence carries a templated sentence ("the red circle near
//! the blue square") whose per-word target/context labels are known by
//! construction: the target's color and shape words are 1, everything
//! else 0. Relation words are computed from actual frame-0 geometry, so
//! the language is always true of the scene.
//!
//! Generation is pure in `(config, seed)` — same inputs, bit-identical
//! frames, boxes, and sentence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{BBox, Window};
use crate::config::{ModelConfig, ReferenceMentions, WorldConfig};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::image::Image;

/// Color names and RGB values (unit range).
pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("green", [0.10, 0.70, 0.20]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("purple", [0.60, 0.20, 0.75]),
    ("orange", [0.95, 0.55, 0.10]),
];

/// Shape names, indexed by the drawing code below.
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "ring"];

/// Non-object words used by the sentence templates.
pub const FUNCTION_WORDS: [&str; 9] =
    ["the", "near", "left", "right", "of", "above", "below", "track", "moving"];

/// The closed vocabulary of every sentence this world can emit.
pub fn world_vocabulary() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    words.extend(COLORS.iter().map(|(n, _)| n.to_string()));
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    Vocab::from_words(words)
}

/// One moving object.
#[derive(Clone, Debug)]
struct ObjectState {
    shape: usize,
    color_index: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    radius: f64,
}

impl ObjectState {
    /// Tight bounding box for the drawn shape.
    fn bbox(&self) -> BBox {
        let r = self.radius;
        let (w, h) = match self.shape {
            1 => (1.6 * r, 1.6 * r),   // square
            2 => (1.8 * r, 1.75 * r),  // triangle
            _ => (2.0 * r, 2.0 * r),   // circle, ring
        };
        BBox::new(self.x, self.y, w, h)
    }

    fn step(&mut self, lo: f64, hi_x: f64, hi_y: f64) {
        self.x += self.vx;
        self.y += self.vy;
        if self.x < lo {
            self.x = 2.0 * lo - self.x;
            self.vx = self.vx.abs();
        }
        if self.x > hi_x {
            self.x = 2.0 * hi_x - self.x;
            self.vx = -self.vx.abs();
        }
        if self.y < lo {
            self.y = 2.0 * lo - self.y;
            self.vy = self.vy.abs();
        }
        if self.y > hi_y {
            self.y = 2.0 * hi_y - self.y;
            self.vy = -self.vy.abs();
        }
    }
}

/// A generated sequence: frames, ground truth, and labeled sentence.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    /// RGB frames, unit range.
    pub frames: Vec<Image>,
    /// Per-frame target box in frame pixels, center-based.
    pub gt: Vec<BBox>,
    /// Sentence words, lowercase.
    pub sentence: Vec<String>,
    /// Per-word role labels: 1.0 target word, 0.0 context word.
    pub labels: Vec<f64>,
    /// Generator seed.
    pub seed: u64,
    /// Square frame side.
    pub frame_size: usize,
}

/// Deterministic per-pixel background hash, mapped into a narrow gray
/// band so objects always stand out.
fn background_value(seed: u64, x: usize, y: usize) -> f32 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64) << 32;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    0.38 + 0.14 * (z % 1000) as f32 / 1000.0
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => {
            // Upward triangle spanning y in [-0.875r, 0.875r].
            let top = -0.875 * r;
            let bottom = 0.875 * r;
            if dy < top || dy > bottom {
                return false;
            }
            // Half-width grows linearly from 0 at the apex to 0.9r.
            let t = (dy - top) / (bottom - top);
            dx.abs() <= 0.9 * r * t
        }
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

fn draw_object(img: &mut Image, obj: &ObjectState, color: [f32; 3]) {
    let size = img.width;
    let r = obj.radius;
    let x0 = ((obj.x - r).floor().max(0.0)) as usize;
    let x1 = ((obj.x + r).ceil().min(size as f64 - 1.0)) as usize;
    let y0 = ((obj.y - r).floor().max(0.0)) as usize;
    let y1 = ((obj.y + r).ceil().min(size as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - obj.x;
            let dy = y as f64 + 0.5 - obj.y;
            if inside(obj.shape, dx, dy, r) {
                for c in 0..3 {
                    img.set(c, y, x, color[c]);
                }
            }
        }
    }
}

fn lerp_color(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Builds the sentence and labels from frame-0 geometry.
fn compose_sentence(
    rng: &mut ChaCha8Rng,
    mentions: ReferenceMentions,
    target: &ObjectState,
    reference: &ObjectState,
) -> (Vec<String>, Vec<f64>) {
    let tc = COLORS[target.color_index].0;
    let ts = SHAPES[target.shape];
    let rc = COLORS[reference.color_index].0;
    let rs = SHAPES[reference.shape];
    let mut words: Vec<&str> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let push = |w: &'static str, l: f64, words: &mut Vec<&str>, labels: &mut Vec<f64>| {
        words.push(w);
        labels.push(l);
    };
    // The template draw happens unconditionally so that forcing the
    // mention policy never shifts the generator's random stream.
    let drawn = rng.gen_range(0..4u32);
    let arm = match mentions {
        ReferenceMentions::Auto => drawn,
        // Templates 1 and 2 mention the reference; 0 and 3 do not. The
        // remap keeps the drawn variety (two styles either way).
        ReferenceMentions::Always => match drawn {
            0 | 1 => 1,
            _ => 2,
        },
        ReferenceMentions::Never => match drawn {
            0 | 1 => 0,
            _ => 3,
        },
    };
    match arm {
        0 => {
            for (w, l) in [("the", 0.0), (tc, 1.0), (ts, 1.0)] {
                push(w, l, &mut words, &mut labels);
            }
        }
        1 => {
            for (w, l) in
                [("the", 0.0), (tc, 1.0), (ts, 1.0), ("near", 0.0), ("the", 0.0), (rc, 0.0), (rs, 0.0)]
            {
                push(w, l, &mut words, &mut labels);
            }
        }
        2 => {
            let dx = target.x - reference.x;
            let dy = target.y - reference.y;
            if dx.abs() > dy.abs() {
                let rel = if dx < 0.0 { "left" } else { "right" };
                for (w, l) in [
                    ("the", 0.0),
                    (tc, 1.0),
                    (ts, 1.0),
                    (rel, 0.0),
                    ("of", 0.0),
                    ("the", 0.0),
                    (rc, 0.0),
                    (rs, 0.0),
                ] {
                    push(w, l, &mut words, &mut labels);
                }
            } else {
                let rel = if dy < 0.0 { "above" } else { "below" };
                for (w, l) in [
                    ("the", 0.0),
                    (tc, 1.0),
                    (ts, 1.0),
                    (rel, 0.0),
                    ("the", 0.0),
                    (rc, 0.0),
                    (rs, 0.0),
                ] {
                    push(w, l, &mut words, &mut labels);
                }
            }
        }
        _ => {
            for (w, l) in [("track", 0.0), ("the", 0.0), ("moving", 0.0), (tc, 1.0), (ts, 1.0)] {
                push(w, l, &mut words, &mut labels);
            }
        }
    }
    (words.into_iter().map(String::from).collect(), labels)
}

/// Generates one sequence, deterministic in `(config, seed)`.
pub fn generate_sequence(cfg: &WorldConfig, seed: u64) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.frame_size;
    let frames_n = cfg.sequence_length;
    let n_objects = 2 + cfg.num_distractors + cfg.reference_clones;

    // --- cast the scene -------------------------------------------------
    let target_shape = rng.gen_range(0..SHAPES.len());
    let target_color = rng.gen_range(0..COLORS.len());
    let mut objects: Vec<ObjectState> = Vec::with_capacity(n_objects);
    let spawn = |rng: &mut ChaCha8Rng, shape: usize, color_index: usize,
                     objects: &[ObjectState]| {
        let radius = rng.gen_range(cfg.min_radius..=cfg.max_radius);
        let lo = radius + 1.0;
        let hi = size as f64 - radius - 1.0;
        let mut x = rng.gen_range(lo..hi);
        let mut y = rng.gen_range(lo..hi);
        for _ in 0..100 {
            let crowded = objects.iter().any(|o| {
                let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
                d < o.radius + radius + 4.0
            });
            if !crowded {
                break;
            }
            x = rng.gen_range(lo..hi);
            y = rng.gen_range(lo..hi);
        }
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.4 * cfg.max_speed..=cfg.max_speed);
        ObjectState {
            shape,
            color_index,
            x,
            y,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            radius,
        }
    };

    let target = spawn(&mut rng, target_shape, target_color, &objects);
    objects.push(target);

    // Reference object: must differ from the target in shape or color so
    // the sentence stays unambiguous.
    let (ref_shape, ref_color) = loop {
        let s = rng.gen_range(0..SHAPES.len());
        let c = rng.gen_range(0..COLORS.len());
        if s != target_shape || c != target_color {
            break (s, c);
        }
    };
    let reference = spawn(&mut rng, ref_shape, ref_color, &objects);
    objects.push(reference);

    for _ in 0..cfg.num_distractors {
        let (s, c) = if rng.gen_bool(cfg.distractor_similarity.clamp(0.0, 1.0)) {
            if rng.gen_bool(0.5) {
                // Same shape, different color.
                let c = loop {
                    let c = rng.gen_range(0..COLORS.len());
                    if c != target_color {
                        break c;
                    }
                };
                (target_shape, c)
            } else {
                // Same color, different shape.
                let s = loop {
                    let s = rng.gen_range(0..SHAPES.len());
                    if s != target_shape {
                        break s;
                    }
                };
                (s, target_color)
            }
        } else {
            loop {
                let s = rng.gen_range(0..SHAPES.len());
                let c = rng.gen_range(0..COLORS.len());
                if s != target_shape || c != target_color {
                    break (s, c);
                }
            }
        };
        let d = spawn(&mut rng, s, c, &objects);
        objects.push(d);
    }
    for _ in 0..cfg.reference_clones {
        let d = spawn(&mut rng, ref_shape, ref_color, &objects);
        objects.push(d);
    }

    // --- language --------------------------------------------------------
    let (sentence, labels) =
        compose_sentence(&mut rng, cfg.reference_mentions, &objects[0], &objects[1]);

    // --- appearance dynamics ----------------------------------------------
    let drift_color = loop {
        let c = rng.gen_range(0..COLORS.len());
        if c != target_color {
            break c;
        }
    };
    let occluder = if rng.gen_bool(cfg.occlusion_prob.clamp(0.0, 1.0)) {
        // (vertical?, thickness); the bar sweeps the frame linearly.
        Some((rng.gen_bool(0.5), 0.8 * cfg.max_radius))
    } else {
        None
    };

    // --- render ------------------------------------------------------------
    let mut frames = Vec::with_capacity(frames_n);
    let mut gt = Vec::with_capacity(frames_n);
    let bg_seed = rng.gen::<u64>();
    for t in 0..frames_n {
        let mut img = Image::new(3, size, size);
        for y in 0..size {
            for x in 0..size {
                let v = background_value(bg_seed, x, y);
                for c in 0..3 {
                    img.set(c, y, x, v);
                }
            }
        }
        // Extras first, then reference, target on top.
        for idx in (1..objects.len()).rev() {
            let obj = &objects[idx];
            draw_object(&mut img, obj, COLORS[obj.color_index].1);
        }
        let phase = if frames_n > 1 { t as f64 / (frames_n - 1) as f64 } else { 0.0 };
        let t_color = lerp_color(
            COLORS[target_color].1,
            COLORS[drift_color].1,
            (cfg.color_drift * phase) as f32,
        );
        draw_object(&mut img, &objects[0], t_color);
        if let Some((vertical, thickness)) = occluder {
            let span = size as f64 + 2.0 * thickness;
            let center = -thickness + phase * span;
            let lo = ((center - thickness / 2.0).floor().max(0.0)) as usize;
            let hi = ((center + thickness / 2.0).ceil().min(size as f64 - 1.0)) as usize;
            if lo <= hi {
                for a in lo..=hi {
                    for b in 0..size {
                        let (y, x) = if vertical { (b, a) } else { (a, b) };
                        for c in 0..3 {
                            img.set(c, y, x, 0.45);
                        }
                    }
                }
            }
        }
        frames.push(img);
        gt.push(objects[0].bbox());

        for obj in objects.iter_mut() {
            let lo = obj.radius + 1.0;
            let hi = size as f64 - obj.radius - 1.0;
            obj.step(lo, hi, hi);
        }
    }

    SyntheticSequence { frames, gt, sentence, labels, seed, frame_size: size }
}

/// One training/evaluation sample cut from a sequence.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// Token ids for the sentence.
    pub ids: Vec<usize>,
    /// Per-word role labels aligned with `ids`.
    pub labels: Vec<f64>,
    /// Initial template crop (frame 0, ground truth).
    pub initial_template: Image,
    /// Dynamic template crop (from `dyn_frame`, ground truth).
    pub dynamic_template: Image,
    /// Search crop around the (possibly jittered) current box.
    pub search: Image,
    /// The search window in frame coordinates.
    pub window: Window,
    /// Ground-truth box in window-normalized coordinates.
    pub gt_window: BBox,
}

/// Cuts the sample for frame `t`. Crops are square windows resized to
/// square model inputs, so aspect is preserved by construction and no
/// letterbox padding is ever needed. `jitter` shifts the search-window
/// center by up to `+-jitter * side` per axis and scales the side by
/// `1 +- jitter` (pass `None` for evaluation).
pub fn make_training_sample(
    seq: &SyntheticSequence,
    vocab: &Vocab,
    mcfg: &ModelConfig,
    t: usize,
    dyn_frame: usize,
    jitter: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<TrainingSample> {
    if t >= seq.frames.len() {
        return Err(Error::Input(format!(
            "frame {t} out of range for a {}-frame sequence",
            seq.frames.len()
        )));
    }
    if dyn_frame >= seq.frames.len() {
        return Err(Error::Input(format!("dynamic-template frame {dyn_frame} out of range")));
    }
    let ids = vocab.tokenize(&seq.sentence.join(" "))?;
    let z_win = Window::around(&seq.gt[0], mcfg.template_scale);
    let initial_template =
        seq.frames[0].crop_resize(z_win.cx, z_win.cy, z_win.side, mcfg.template_size)?;
    let d_win = Window::around(&seq.gt[dyn_frame], mcfg.template_scale);
    let dynamic_template =
        seq.frames[dyn_frame].crop_resize(d_win.cx, d_win.cy, d_win.side, mcfg.template_size)?;

    let mut window = Window::around(&seq.gt[t], mcfg.search_scale);
    if let Some((rng, amount)) = jitter {
        let dx = rng.gen_range(-amount..=amount) * window.side;
        let dy = rng.gen_range(-amount..=amount) * window.side;
        let ds = 1.0 + rng.gen_range(-amount..=amount);
        window = Window { cx: window.cx + dx, cy: window.cy + dy, side: window.side * ds };
    }
    let search = seq.frames[t].crop_resize(window.cx, window.cy, window.side, mcfg.search_size)?;
    let gt_window = window.normalize(&seq.gt[t]);
    Ok(TrainingSample {
        ids,
        labels: seq.labels.clone(),
        initial_template,
        dynamic_template,
        search,
        window,
        gt_window,
    })
}
