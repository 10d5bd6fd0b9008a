//! Compares the learned word-role head against the raw similarity
//! baseline on a labeled dataset, then prints the aggregate table.
//!
//! The first few sentences are shown word by word: the ground-truth
//! role, the head probability, and the baseline's time-averaged
//! similarity score, so you can see *which* words each method ranks
//! high, not just the accuracy it ends up with.
//!
//! Usage:
//!   cargo run --example word_role_probe -- <checkpoint> <manifest> [sentences] [frames]

use std::path::Path;

use tctrack::boxes::Window;
use tctrack::checkpoint::load_store;
use tctrack::config::RunConfig;
use tctrack::dataset::{load_manifest, record_to_sequence};
use tctrack::metrics::similarity_probe;
use tctrack::model::Tracker;
use tctrack::probe::probe_word_roles;
use tctrack::synthetic::{world_vocabulary, SyntheticSequence};
use tctrack::tensor::{Graph, ParamStore, Tensor};

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        return Err("usage: word_role_probe <checkpoint> <manifest> [sentences] [frames]".into());
    }
    let checkpoint = Path::new(&args[1]);
    let manifest = Path::new(&args[2]);
    let shown: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let frames: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(4);

    // A training run saves its resolved config next to the checkpoints.
    let cfg_path = checkpoint.parent().map(|d| d.join("config.toml"));
    let run_cfg = match cfg_path.as_deref().filter(|p| p.exists()) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };

    let vocab = world_vocabulary();
    let mut store = ParamStore::new(0);
    let tracker = Tracker::new(&mut store, &run_cfg.model, vocab.len())?;
    load_store(checkpoint, &mut store)?;

    let records = load_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let pool: Vec<SyntheticSequence> = records
        .iter()
        .map(|r| record_to_sequence(r, dir))
        .collect::<tctrack::error::Result<_>>()?;

    for seq in pool.iter().take(shown) {
        let ids = vocab.tokenize(&seq.sentence.join(" "))?;
        let mut g = Graph::new();
        let head: Option<Vec<f64>> = tracker
            .word_probabilities(&mut g, &store, &ids)?
            .map(|v| g.tensor(v).data().to_vec());

        // Whole-scene similarity, averaged over a few probed frames.
        let twin = Window::around(&seq.gt[0], tracker.cfg.template_scale);
        let template =
            seq.frames[0].crop_resize(twin.cx, twin.cy, twin.side, tracker.cfg.template_size)?;
        let half = seq.frame_size as f64 / 2.0;
        let step = (seq.frames.len() - 1).max(1) / frames.clamp(1, seq.frames.len());
        let mut pairs: Vec<(Tensor, Tensor)> = Vec::new();
        for t in (0..seq.frames.len()).step_by(step.max(1)).take(frames) {
            let search =
                seq.frames[t].crop_resize(half, half, seq.frame_size as f64, tracker.cfg.search_size)?;
            let mut g = Graph::new();
            let (f_l, f_x) = tracker.encode_frame(&mut g, &store, &search, &template, &ids)?;
            pairs.push((g.tensor(f_l).clone(), g.tensor(f_x).clone()));
        }
        let trace = similarity_probe(&pairs)?;

        println!("sequence {:>6}  \"{}\"", seq.seed, seq.sentence.join(" "));
        println!("  {:<10}{:>6}{:>12}{:>12}", "word", "label", "head p", "similarity");
        for (i, w) in seq.sentence.iter().enumerate() {
            let p = head.as_ref().map(|h| format!("{:.4}", h[i])).unwrap_or("-".into());
            println!("  {:<10}{:>6}{:>12}{:>12.4}", w, seq.labels[i], p, trace.res[i]);
        }
        println!();
    }

    let report = probe_word_roles(&tracker, &store, &vocab, &pool, frames)?;
    print!("{}", report.format_table());
    Ok(())
}
