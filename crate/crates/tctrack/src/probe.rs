//! Word-role probe: how well does a checkpoint tell target words from
//! context words?
//!
//! Two methods are measured side by side on the same model and the same
//! sentences:
//!
//! * **Word head** — the learned per-word probability head on the text
//!   encoder. Text only; no frames involved.
//! * **Similarity baseline** — raw token alignment: per frame, the mean
//!   dot product between each sentence token and the encoded tokens of
//!   the whole scene, averaged over time. No learned head; this is the
//!   score a model gives away for free.
//!
//! Both score vectors are mapped to binary predictions by taking the
//! top `k` words, where `k` is the ground-truth target-word count, and
//! scored with the same accuracy pair — so the comparison isolates the
//! quality of the scores, not the thresholding. Reported accuracies are
//! per-sentence means (each sentence weighs the same regardless of
//! length).

use crate::boxes::Window;
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, similarity_probe, topk_map};
use crate::model::Tracker;
use crate::synthetic::SyntheticSequence;
use crate::tensor::graph::Graph;
use crate::tensor::{ParamStore, Tensor};

/// The two accuracy figures of the evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyPair {
    /// Fraction of all words classified correctly.
    pub acc_all: f64,
    /// Fraction of true target words recovered.
    pub acc_target: f64,
}

/// Probe results over a sentence pool.
#[derive(Clone, Copy, Debug)]
pub struct ProbeReport {
    /// Number of sentences scored.
    pub sentences: usize,
    /// Word-head accuracies; `None` when the config has no word head.
    pub head: Option<AccuracyPair>,
    /// Similarity-baseline accuracies.
    pub baseline: AccuracyPair,
}

impl ProbeReport {
    /// Fixed-width table, one row per method.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22}{:>10}{:>13}{:>12}\n",
            "method", "Acc_all", "Acc_target", "sentences"
        ));
        match &self.head {
            Some(pair) => out.push_str(&format!(
                "{:<22}{:>10.4}{:>13.4}{:>12}\n",
                "word-head", pair.acc_all, pair.acc_target, self.sentences
            )),
            None => out.push_str(&format!(
                "{:<22}{:>10}{:>13}{:>12}\n",
                "word-head", "-", "-", self.sentences
            )),
        }
        out.push_str(&format!(
            "{:<22}{:>10.4}{:>13.4}{:>12}\n",
            "similarity-baseline", self.baseline.acc_all, self.baseline.acc_target, self.sentences
        ));
        out
    }
}

/// Evenly spaced frame indices: `n` of them over `0..total`, always
/// including the first and last frame when `n ≥ 2`. `n = 0` or
/// `n ≥ total` selects every frame.
fn probe_frames(total: usize, n: usize) -> Vec<usize> {
    if n == 0 || n >= total {
        return (0..total).collect();
    }
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| (i as f64 * (total - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Score both methods over a pool of labeled sequences.
///
/// The baseline views the whole scene: each probed frame is resized to
/// the search input in full, so the target competes with every other
/// object for each word's dot products and the measurement reflects
/// token-role alignment rather than a window pre-centered on the
/// answer. `frames_per_sentence` bounds the per-sequence frame count
/// (0 = all frames).
pub fn probe_word_roles(
    tracker: &Tracker,
    store: &ParamStore,
    vocab: &Vocab,
    pool: &[SyntheticSequence],
    frames_per_sentence: usize,
) -> Result<ProbeReport> {
    if pool.is_empty() {
        return Err(Error::Input("word-role probe needs at least one sentence".into()));
    }
    let cfg = &tracker.cfg;
    let mut head_sums: Option<(f64, f64)> = None;
    let mut base_sums = (0.0, 0.0);
    for seq in pool {
        let sentence = seq.sentence.join(" ");
        let ids = vocab.tokenize(&sentence)?;
        let k = seq.labels.iter().filter(|&&l| l == 1.0).count();
        if k == 0 {
            return Err(Error::Input(format!(
                "sequence {} has no target words in its labels",
                seq.seed
            )));
        }

        // Learned head: text alone.
        let mut g = Graph::new();
        if let Some(prob_var) = tracker.word_probabilities(&mut g, store, &ids)? {
            let scores = g.tensor(prob_var).data().to_vec();
            let p = topk_map(&scores, k)?;
            let (acc_all, acc_target) = accuracy(&p, &seq.labels)?;
            let sums = head_sums.get_or_insert((0.0, 0.0));
            sums.0 += acc_all;
            sums.1 += acc_target;
        }

        // Similarity baseline: raw encoder tokens over sampled frames.
        let first_gt = &seq.gt[0];
        let first = &seq.frames[0];
        let twin = Window::around(first_gt, cfg.template_scale);
        let template = first.crop_resize(twin.cx, twin.cy, twin.side, cfg.template_size)?;
        let mut pairs: Vec<(Tensor, Tensor)> = Vec::new();
        let half = seq.frame_size as f64 / 2.0;
        for t in probe_frames(seq.frames.len(), frames_per_sentence) {
            let search =
                seq.frames[t].crop_resize(half, half, seq.frame_size as f64, cfg.search_size)?;
            let mut g = Graph::new();
            let (f_l, f_x) = tracker.encode_frame(&mut g, store, &search, &template, &ids)?;
            pairs.push((g.tensor(f_l).clone(), g.tensor(f_x).clone()));
        }
        let trace = similarity_probe(&pairs)?;
        let p = topk_map(&trace.res, k)?;
        let (acc_all, acc_target) = accuracy(&p, &seq.labels)?;
        base_sums.0 += acc_all;
        base_sums.1 += acc_target;
    }
    let n = pool.len() as f64;
    Ok(ProbeReport {
        sentences: pool.len(),
        head: head_sums.map(|(a, t)| AccuracyPair { acc_all: a / n, acc_target: t / n }),
        baseline: AccuracyPair { acc_all: base_sums.0 / n, acc_target: base_sums.1 / n },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, WorldConfig};
    use crate::synthetic::{generate_sequence, world_vocabulary};

    fn tiny_setup() -> (Tracker, ParamStore, Vocab, Vec<SyntheticSequence>) {
        let mut run = RunConfig::default();
        run.model.dim = 16;
        run.model.search_size = 32;
        run.model.template_size = 16;
        run.model.vision_layers = 1;
        run.model.text_layers = 1;
        run.model.memory_len = 2;
        let world = WorldConfig { sequence_length: 5, ..WorldConfig::default() };
        let vocab = world_vocabulary();
        let mut store = ParamStore::new(7);
        let tracker = Tracker::new(&mut store, &run.model, vocab.len()).unwrap();
        let pool: Vec<SyntheticSequence> =
            (0..4).map(|s| generate_sequence(&world, 300 + s)).collect();
        (tracker, store, vocab, pool)
    }

    #[test]
    fn untrained_probe_reports_are_sane_and_deterministic() {
        let (tracker, store, vocab, pool) = tiny_setup();
        let a = probe_word_roles(&tracker, &store, &vocab, &pool, 3).unwrap();
        let b = probe_word_roles(&tracker, &store, &vocab, &pool, 3).unwrap();
        assert_eq!(a.sentences, pool.len());
        let head = a.head.expect("default config has a word head");
        for v in [head.acc_all, head.acc_target, a.baseline.acc_all, a.baseline.acc_target] {
            assert!((0.0..=1.0).contains(&v), "accuracy {v} out of range");
        }
        assert_eq!(a.head, b.head);
        assert_eq!(a.baseline, b.baseline);
        let table = a.format_table();
        assert!(table.contains("word-head"));
        assert!(table.contains("similarity-baseline"));
    }

    #[test]
    fn headless_config_reports_no_head_row() {
        let mut run = RunConfig::default();
        run.apply_ablation("visual_only").unwrap();
        run.model.dim = 16;
        run.model.search_size = 32;
        run.model.template_size = 16;
        run.model.vision_layers = 1;
        run.model.text_layers = 1;
        run.model.memory_len = 2;
        let world = WorldConfig { sequence_length: 4, ..WorldConfig::default() };
        let vocab = world_vocabulary();
        let mut store = ParamStore::new(7);
        let tracker = Tracker::new(&mut store, &run.model, vocab.len()).unwrap();
        let pool = vec![generate_sequence(&world, 11)];
        let report = probe_word_roles(&tracker, &store, &vocab, &pool, 2).unwrap();
        assert!(report.head.is_none());
        assert!(report.format_table().contains('-'));
    }

    #[test]
    fn probe_frame_selection_covers_the_span() {
        assert_eq!(probe_frames(10, 0), (0..10).collect::<Vec<_>>());
        assert_eq!(probe_frames(10, 20), (0..10).collect::<Vec<_>>());
        assert_eq!(probe_frames(10, 1), vec![0]);
        assert_eq!(probe_frames(10, 2), vec![0, 9]);
        assert_eq!(probe_frames(9, 3), vec![0, 4, 8]);
        let picked = probe_frames(100, 7);
        assert_eq!(picked.len(), 7);
        assert_eq!(picked[0], 0);
        assert_eq!(*picked.last().unwrap(), 99);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }
}
