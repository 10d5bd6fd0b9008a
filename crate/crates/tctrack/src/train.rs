//! Training loop: sequential per-sample optimization with in-graph
//! memory dynamics.
//!
//! One training sample is a sentence, the two templates, and
//! `frames_per_sample` consecutive search frames processed in order on
//! a single graph. The memory bank holds live graph handles inside a
//! sample, so the loss at frame `t+1` backpropagates through the
//! compressed state written at frame `t` — the memory path is trained,
//! not just run. The dynamic template refreshes mid-sample whenever the
//! update policy fires on the tracker's own confidence.
//!
//! Supervision is teacher-forced: search windows are cut around the
//! (jittered) ground-truth box, the classification loss targets the
//! ground-truth cell, and the box losses read the predicted box at that
//! cell, so the regression branches learn regardless of where the
//! current argmax lands.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_store;
use crate::config::RunConfig;
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::head::center_cell;
use crate::loss::{
    bce_word_loss, combine_values, focal_score_loss, giou_loss, l1_box_loss, LossWeights,
};
use crate::memory::{stack_units, MemoryBank, TemplatePolicy};
use crate::metrics::{accuracy, topk_map, tracking_metrics};
use crate::model::{FrameInput, Tracker};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::synthetic::{make_training_sample, SyntheticSequence};
use crate::tensor::graph::Graph;
use crate::tensor::ParamStore;
use crate::track::{track_sequence, TrackOptions};

/// Per-epoch summary. Loss fields are means over the epoch's samples.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    /// Epoch index, from 0.
    pub epoch: usize,
    /// Weighted total loss.
    pub loss: f64,
    /// Classification (focal) component, unweighted.
    pub cls: f64,
    /// Generalized-overlap component, unweighted.
    pub iou: f64,
    /// Coordinate L1 component, unweighted.
    pub l1: f64,
    /// Word-role component, unweighted (0 when the path is off).
    pub bce: f64,
    /// Learning-rate scale in effect (1, 0.1, or 0.01).
    pub lr_scale: f64,
    /// Mean validation AUC over the validation pool.
    pub val_auc: f64,
    /// Mean validation target-word accuracy; `None` when the language
    /// path is off.
    pub val_acc_target: Option<f64>,
}

impl EpochLog {
    /// One deterministic, parseable log line.
    pub fn format_row(&self) -> String {
        let acc = match self.val_acc_target {
            Some(a) => format!("{a:.6}"),
            None => "-".to_string(),
        };
        format!(
            "epoch {:>3}  loss {:.6}  cls {:.6}  iou {:.6}  l1 {:.6}  bce {:.6}  lr x{:.2}  val_auc {:.6}  val_acc_target {}",
            self.epoch,
            self.loss,
            self.cls,
            self.iou,
            self.l1,
            self.bce,
            self.lr_scale,
            self.val_auc,
            acc
        )
    }
}

/// A finished training run.
pub struct TrainResult {
    /// Trained parameters.
    pub store: ParamStore,
    /// The model they belong to.
    pub tracker: Tracker,
    /// One entry per epoch.
    pub logs: Vec<EpochLog>,
}

/// Mean target-word accuracy of the word head over a pool of labeled
/// sentences, mapping probabilities to roles by top-k with k = the
/// ground-truth target count. `None` when the language path is off.
pub fn validate_word_accuracy(
    tracker: &Tracker,
    store: &ParamStore,
    vocab: &Vocab,
    pool: &[&SyntheticSequence],
) -> Result<Option<f64>> {
    let mut total = 0.0;
    for seq in pool {
        let ids = vocab.tokenize(&seq.sentence.join(" "))?;
        let mut g = Graph::new();
        let probs = match tracker.word_probabilities(&mut g, store, &ids)? {
            Some(p) => p,
            None => return Ok(None),
        };
        let scores = g.tensor(probs).data().to_vec();
        let k = seq.labels.iter().filter(|&&v| v == 1.0).count();
        let p = topk_map(&scores, k)?;
        let (_, acc_t) = accuracy(&p, &seq.labels)?;
        total += acc_t;
    }
    Ok(Some(total / pool.len() as f64))
}

/// Mean AUC of full tracking runs over a pool of sequences.
pub fn validate_auc(
    tracker: &Tracker,
    store: &ParamStore,
    vocab: &Vocab,
    pool: &[&SyntheticSequence],
) -> Result<f64> {
    let mut total = 0.0;
    for seq in pool {
        let ids = vocab.tokenize(&seq.sentence.join(" "))?;
        let out = track_sequence(
            tracker,
            store,
            &seq.frames,
            &ids,
            &seq.gt[0],
            &TrackOptions::default(),
        )?;
        let pred: Vec<_> = out.records.iter().map(|r| r.bbox).collect();
        let sizes = vec![(seq.frame_size as f64, seq.frame_size as f64); seq.gt.len()];
        total += tracking_metrics(&pred, &seq.gt, &sizes)?.auc;
    }
    Ok(total / pool.len() as f64)
}

/// Unweighted loss components of one optimization step.
struct SampleLoss {
    cls: f64,
    iou: f64,
    l1: f64,
    bce: f64,
}

/// Runs one teacher-forced sample (window of consecutive frames) and
/// leaves its gradients accumulated in `store`.
fn run_sample(
    tracker: &Tracker,
    store: &mut ParamStore,
    run: &RunConfig,
    vocab: &Vocab,
    seq: &SyntheticSequence,
    t0: usize,
    dyn_frame: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLoss> {
    let mcfg = &tracker.cfg;
    let weights = LossWeights {
        cls: run.train.w_cls,
        iou: run.train.w_iou,
        l1: run.train.w_l1,
        bce: run.train.w_bce,
    };
    let policy =
        TemplatePolicy { interval: mcfg.template_interval, threshold: mcfg.template_threshold };
    let frame_size = seq.frame_size as f64;
    let side = tracker.grid_side();
    let mut g = Graph::new();

    // Frame 0 seeds the bank, inside the same graph so its gradients
    // are part of the sample.
    let first = make_training_sample(seq, vocab, mcfg, 0, dyn_frame, None)?;
    let cls0 = tracker.initial_state(&mut g, store, &first.search, &first.initial_template)?;
    let mut bank = MemoryBank::init(cls0, mcfg.memory_len)?;
    let mut dynamic_template = first.dynamic_template.clone();

    let mut frame_losses = Vec::with_capacity(run.train.frames_per_sample);
    let mut word_probs = None;
    for t in t0..t0 + run.train.frames_per_sample {
        let sample =
            make_training_sample(seq, vocab, mcfg, t, dyn_frame, Some((rng, run.train.jitter)))?;
        let memory = stack_units(&mut g, &bank)?;
        let prev_gt = sample.window.normalize(&seq.gt[t - 1]);
        let out = tracker.forward(
            &mut g,
            store,
            &FrameInput {
                search: &sample.search,
                template_initial: &sample.initial_template,
                template_dynamic: Some(&dynamic_template),
                ids: &sample.ids,
                memory,
                prev_box: Some(&prev_gt),
            },
        )?;

        let (row, col) = center_cell(&sample.gt_window, side, side);
        let l_cls = focal_score_loss(&mut g, out.maps.score, row, col)?;
        let pred = out.maps.box_at(&mut g, row, col)?;
        let l_iou = giou_loss(&mut g, &pred, &sample.gt_window)?;
        let l_1 = l1_box_loss(&mut g, &pred, &sample.gt_window)?;
        let l_bce = match out.word_probs {
            Some(p) => Some(bce_word_loss(&mut g, p, &sample.labels)?),
            None => None,
        };
        frame_losses.push((l_cls, l_iou, l_1, l_bce));
        word_probs = out.word_probs;

        if let Some(m) = out.new_memory_state {
            bank.push(m, t);
        }
        let (box_win, conf, _) = out.maps.decode(&g);
        if mcfg.ablation.dynamic_template && policy.due(t, conf) {
            let raw = sample.window.denormalize(&box_win);
            let clamped = crate::boxes::BBox {
                x: raw.x,
                y: raw.y,
                w: raw.w.clamp(1.0, frame_size),
                h: raw.h.clamp(1.0, frame_size),
            }
            .clamp_center(frame_size, frame_size);
            let win = crate::boxes::Window::around(&clamped, mcfg.template_scale);
            dynamic_template =
                seq.frames[t].crop_resize(win.cx, win.cy, win.side, mcfg.template_size)?;
        }
    }
    let _ = word_probs;

    // Mean each component over the window, then weight and sum.
    let n = frame_losses.len() as f64;
    let mut sums: [Option<crate::tensor::graph::Var>; 4] = [None; 4];
    for (c, i, l, b) in &frame_losses {
        let parts = [Some(*c), Some(*i), Some(*l), *b];
        for (slot, part) in sums.iter_mut().zip(parts) {
            if let Some(p) = part {
                *slot = Some(match slot.take() {
                    Some(acc) => g.add(acc, p)?,
                    None => p,
                });
            }
        }
    }
    let mean_of = |g: &mut Graph, v: Option<crate::tensor::graph::Var>| {
        v.map(|v| g.scalar_mul(v, 1.0 / n))
    };
    let m_cls = mean_of(&mut g, sums[0]).expect("cls always present");
    let m_iou = mean_of(&mut g, sums[1]).expect("iou always present");
    let m_l1 = mean_of(&mut g, sums[2]).expect("l1 always present");
    let m_bce = mean_of(&mut g, sums[3]);

    let mut total = g.scalar_mul(m_cls, weights.cls);
    let wi = g.scalar_mul(m_iou, weights.iou);
    total = g.add(total, wi)?;
    let wl = g.scalar_mul(m_l1, weights.l1);
    total = g.add(total, wl)?;
    if let Some(b) = m_bce {
        let wb = g.scalar_mul(b, weights.bce);
        total = g.add(total, wb)?;
    }

    let loss_value = g.item(total);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss_value} on sequence seed {}, window start {t0}, dynamic frame {dyn_frame}",
            seq.seed
        )));
    }
    g.backward(total)?;
    store.accumulate_grads(&g)?;
    Ok(SampleLoss {
        cls: g.item(m_cls),
        iou: g.item(m_iou),
        l1: g.item(m_l1),
        bce: m_bce.map_or(0.0, |b| g.item(b)),
    })
}

/// Learning-rate scale for an epoch under the two-drop schedule.
fn lr_scale(epoch: usize, epochs: usize, drops: [f64; 2]) -> f64 {
    let mut scale = 1.0;
    for d in drops {
        if (epoch as f64) >= d * epochs as f64 {
            scale *= 0.1;
        }
    }
    scale
}

/// Trains a fresh model on `train_pool`, validating each epoch on
/// `val_pool`. Deterministic in `run.train.seed` and the pools. Writes
/// periodic checkpoints when `checkpoint_dir` is set. `progress` sees
/// each epoch's log as it completes.
pub fn train(
    run: &RunConfig,
    vocab: &Vocab,
    train_pool: &[SyntheticSequence],
    val_pool: &[SyntheticSequence],
    checkpoint_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainResult> {
    if train_pool.is_empty() {
        return Err(Error::Input("training pool is empty".into()));
    }
    if val_pool.is_empty() {
        return Err(Error::Input("validation pool is empty".into()));
    }
    let t = run.train;
    for seq in train_pool {
        if seq.frames.len() < t.frames_per_sample + 1 {
            return Err(Error::Input(format!(
                "sequence seed {} has {} frames, needs at least {}",
                seq.seed,
                seq.frames.len(),
                t.frames_per_sample + 1
            )));
        }
    }

    let mut store = ParamStore::new(t.seed);
    let tracker = Tracker::new(&mut store, &run.model, vocab.len())?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: t.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let val_refs: Vec<&SyntheticSequence> = val_pool.iter().collect();
    let ckpt_every = (t.epochs / 6).max(1);

    let mut logs = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let scale = lr_scale(epoch, t.epochs, t.lr_drops);
        let mut sums = SampleLoss { cls: 0.0, iou: 0.0, l1: 0.0, bce: 0.0 };
        for _ in 0..t.samples_per_epoch {
            let seq = &train_pool[rng.gen_range(0..train_pool.len())];
            let t_max = seq.frames.len() - t.frames_per_sample;
            let t0 = rng.gen_range(1..=t_max);
            let dyn_frame = rng.gen_range(0..t0);
            store.zero_grads();
            let loss = run_sample(&tracker, &mut store, run, vocab, seq, t0, dyn_frame, &mut rng)?;
            clip_grad_norm(&mut store, t.clip_grad_norm);
            opt.step(&mut store, &|name| {
                let base = if name.starts_with("vision/") {
                    t.lr_encoder
                } else if name.starts_with("text/") {
                    t.lr_text
                } else {
                    t.lr_main
                };
                base * scale
            })?;
            sums.cls += loss.cls;
            sums.iou += loss.iou;
            sums.l1 += loss.l1;
            sums.bce += loss.bce;
        }
        let n = t.samples_per_epoch as f64;
        let (cls, iou, l1, bce) = (sums.cls / n, sums.iou / n, sums.l1 / n, sums.bce / n);
        let weights =
            LossWeights { cls: t.w_cls, iou: t.w_iou, l1: t.w_l1, bce: t.w_bce };
        let val_n = t.val_sequences.min(val_refs.len()).max(1);
        let log = EpochLog {
            epoch,
            loss: combine_values(cls, iou, l1, bce, &weights),
            cls,
            iou,
            l1,
            bce,
            lr_scale: scale,
            val_auc: validate_auc(&tracker, &store, vocab, &val_refs[..val_n])?,
            val_acc_target: validate_word_accuracy(&tracker, &store, vocab, &val_refs[..val_n])?,
        };
        progress(&log);
        logs.push(log);
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % ckpt_every == 0 || epoch + 1 == t.epochs {
                save_store(&dir.join(format!("checkpoint_epoch{epoch:04}.bin")), &store)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_store(&dir.join("checkpoint_final.bin"), &store)?;
    }
    Ok(TrainResult { store, tracker, logs })
}
