//! Command-line surface: dataset generation, training, tracking,
//! evaluation, word-role probing, heatmap inspection, and annotation as
//! subcommands over the library. Output is files and printed tables.
//!
//! Conventions shared by every subcommand:
//!
//! * `--config` points at a TOML file with `[model]`, `[train]`, and
//!   `[world]` sections; missing fields take their defaults. Commands
//!   that read a checkpoint also look for a `config.toml` next to the
//!   checkpoint file before falling back to defaults, so a training
//!   output directory is self-describing.
//! * `--ablation <name>` applies one named structural preset (one row
//!   of the ablation tables) on top of the loaded config, and `--seed`
//!   overrides the run seed.
//! * Exit codes: 0 success, 2 input/usage error, 3 numeric failure
//!   (non-finite loss).

use crate::annotate::{annotate_batch, Annotator, EndpointClient, LabelCache};
use crate::boxes::BBox;
use crate::checkpoint::load_store;
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_manifest, record_to_sequence, SequenceRecord};
use crate::encoders::Vocab;
use crate::error::{io_err, Error, Result};
use crate::image::write_pgm;
use crate::metrics::tracking_metrics;
use crate::model::Tracker;
use crate::probe::probe_word_roles;
use crate::synthetic::world_vocabulary;
use crate::tensor::ParamStore;
use crate::track::{track_sequence, TrackOptions, TrackOutcome};
use crate::train::train;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Vision-language tracker: synthetic data, training, tracking, and
/// evaluation, fully deterministic per seed.
#[derive(Parser, Debug)]
#[command(name = "tctrack", version, about, max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Clone, Debug, Default)]
struct CommonOpts {
    /// TOML run config; missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Apply a named structural preset (ablation-table row).
    #[arg(long, value_name = "NAME")]
    ablation: Option<String>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, value_name = "N")]
    device_threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset (frames, boxes, sentences).
    GenerateData(GenerateDataArgs),
    /// Train a tracker on a generated dataset.
    Train(TrainArgs),
    /// Run a trained tracker over dataset sequences, writing per-frame
    /// boxes and confidences.
    Track(TrackArgs),
    /// Score tracking results against ground truth (AUC, P, P_norm).
    Eval(EvalArgs),
    /// Compare the learned word head against the raw similarity
    /// baseline on held-out sentences.
    ProbeWords(ProbeWordsArgs),
    /// Dump one frame's target-context heatmap as graymaps and a
    /// numeric grid.
    InspectHeatmap(InspectHeatmapArgs),
    /// Label sentence words as target/context, offline or via an HTTP
    /// endpoint.
    Annotate(AnnotateArgs),
}

#[derive(Args, Debug)]
struct GenerateDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Output directory (receives frames/ and manifest.jsonl).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of sequences. Sequence seeds run base..base+count, where
    /// base is --seed (or the config seed).
    #[arg(long, default_value_t = 20)]
    count: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Training dataset manifest (from generate-data).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Validation dataset manifest; defaults to holding out the last
    /// `train.val_sequences` training sequences.
    #[arg(long, value_name = "FILE")]
    val_data: Option<PathBuf>,
    /// Output directory for config.toml, logs, and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved config and which ablation row it matches,
    /// then exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Trained parameter checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset manifest with the sequences to track.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Track only this sequence (index into the manifest); all when
    /// absent.
    #[arg(long)]
    sequence: Option<usize>,
    /// Output results file (JSON lines, one record per frame).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Results file written by `track`.
    #[arg(long, value_name = "FILE")]
    results: PathBuf,
    /// Dataset manifest with the ground truth.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Also write the table to this file (tab-separated).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeWordsArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Trained parameter checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset manifest with held-out labeled sentences.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Frames sampled per sentence for the similarity baseline
    /// (0 = every frame).
    #[arg(long, default_value_t = 6)]
    frames_per_sentence: usize,
    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectHeatmapArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Trained parameter checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset manifest with the sequence to inspect.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Sequence index into the manifest.
    #[arg(long, default_value_t = 0)]
    sequence: usize,
    /// Frame index to dump (frame 0 initializes and has no heatmap).
    #[arg(long)]
    frame: usize,
    /// Output directory for the graymap and grid files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Text file with one sentence per line (blank lines skipped).
    #[arg(long, value_name = "FILE")]
    sentences: PathBuf,
    /// Output labels file (JSON array in input order).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Use the offline rule instead of the HTTP endpoint.
    #[arg(long)]
    offline: bool,
    /// Labels cache file; sentences found there skip the endpoint.
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    /// Concurrent endpoint requests.
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
}

/// One tracked frame in a results file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Generator seed identifying the sequence.
    pub sequence: u64,
    /// Frame index within the sequence.
    pub frame: usize,
    /// Box center x, frame pixels.
    pub x: f64,
    /// Box center y, frame pixels.
    pub y: f64,
    /// Box width, frame pixels.
    pub w: f64,
    /// Box height, frame pixels.
    pub h: f64,
    /// Head confidence at the predicted cell (1.0 on the init frame).
    pub confidence: f64,
}

/// Parse `args` and run the selected subcommand, returning the process
/// exit code. The first element of `args` is the program name.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ProbeWords(args) => cmd_probe_words(args),
        Command::InspectHeatmap(args) => cmd_inspect_heatmap(args),
        Command::Annotate(args) => cmd_annotate(args),
    }
}

/// Apply `--device-threads`. Ignores a pool that is already built (it
/// can only be sized once per process).
fn init_threads(common: &CommonOpts) {
    if let Some(n) = common.device_threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Load the run config: `--config` first, else a `config.toml` next to
/// `near_checkpoint`, else defaults; then apply `--ablation`/`--seed`.
fn resolve_config(common: &CommonOpts, near_checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut run = if let Some(path) = &common.config {
        RunConfig::load(path)?
    } else {
        let sibling = near_checkpoint
            .and_then(|c| c.parent())
            .map(|dir| dir.join("config.toml"))
            .filter(|p| p.exists());
        match sibling {
            Some(path) => RunConfig::load(&path)?,
            None => RunConfig::default(),
        }
    };
    if let Some(name) = &common.ablation {
        run.apply_ablation(name)?;
    }
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

/// Build the model and load `checkpoint` into it.
fn load_tracker(run: &RunConfig, checkpoint: &Path) -> Result<(Tracker, ParamStore, Vocab)> {
    let vocab = world_vocabulary();
    let mut store = ParamStore::new(run.train.seed);
    let tracker = Tracker::new(&mut store, &run.model, vocab.len())?;
    load_store(checkpoint, &mut store)?;
    Ok((tracker, store, vocab))
}

/// Load a manifest and materialize every record's frames.
fn load_sequences(
    manifest: &Path,
) -> Result<(Vec<SequenceRecord>, Vec<crate::synthetic::SyntheticSequence>)> {
    let records = load_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let sequences = records
        .par_iter()
        .map(|r| record_to_sequence(r, dir))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, sequences))
}

fn cmd_generate_data(args: GenerateDataArgs) -> Result<()> {
    init_threads(&args.common);
    let run = resolve_config(&args.common, None)?;
    let base = args.common.seed.unwrap_or(run.train.seed);
    let manifest = generate_dataset(&run.world, args.count, base, &args.out)?;
    println!(
        "wrote {} sequences (seeds {base}..{}) -> {}",
        args.count,
        base + args.count as u64,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    init_threads(&args.common);
    let run = resolve_config(&args.common, None)?;

    if args.print_config {
        let row = run.ablation_row().unwrap_or("custom");
        print!(
            "{}",
            toml::to_string_pretty(&run)
                .map_err(|e| Error::Format(format!("serializing config: {e}")))?
        );
        println!("\n# ablation row: {row}");
        return Ok(());
    }

    let data = args
        .data
        .as_deref()
        .ok_or_else(|| Error::Input("training needs --data <manifest>".into()))?;
    let out = args
        .out
        .as_deref()
        .ok_or_else(|| Error::Input("training needs --out <dir>".into()))?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let (_, mut pool) = load_sequences(data)?;
    let val_pool = match &args.val_data {
        Some(path) => load_sequences(path)?.1,
        None => {
            let held = run.train.val_sequences.min(pool.len().saturating_sub(1));
            if held == 0 {
                return Err(Error::Input(
                    "dataset too small to hold out validation sequences; \
                     pass --val-data or add sequences"
                        .into(),
                ));
            }
            pool.split_off(pool.len() - held)
        }
    };

    // The output directory is self-describing: the exact config that
    // produced the checkpoints sits next to them.
    run.save(&out.join("config.toml"))?;
    let row = run.ablation_row().unwrap_or("custom");
    println!(
        "training {} train / {} val sequences, ablation row: {row}",
        pool.len(),
        val_pool.len()
    );

    let vocab = world_vocabulary();
    let mut rows = String::new();
    let mut logs_json = String::new();
    let result = train(&run, &vocab, &pool, &val_pool, Some(out), &mut |log| {
        let line = log.format_row();
        println!("{line}");
        rows.push_str(&line);
        rows.push('\n');
        logs_json.push_str(&serde_json::to_string(log).expect("epoch log serializes"));
        logs_json.push('\n');
    })?;

    let log_path = out.join("train_log.txt");
    std::fs::write(&log_path, rows).map_err(|e| io_err(&log_path, e))?;
    let metrics_path = out.join("metrics.jsonl");
    std::fs::write(&metrics_path, logs_json).map_err(|e| io_err(&metrics_path, e))?;
    println!(
        "final loss {:.6}, checkpoint {}",
        result.logs.last().map(|l| l.loss).unwrap_or(f64::NAN),
        out.join("checkpoint_final.bin").display()
    );
    Ok(())
}

fn cmd_track(args: TrackArgs) -> Result<()> {
    init_threads(&args.common);
    let run = resolve_config(&args.common, Some(&args.checkpoint))?;
    let (tracker, store, vocab) = load_tracker(&run, &args.checkpoint)?;
    let (records, sequences) = load_sequences(&args.data)?;

    let selected: Vec<usize> = match args.sequence {
        Some(i) if i >= records.len() => {
            return Err(Error::Input(format!(
                "sequence index {i} out of range; the manifest has {} sequences",
                records.len()
            )));
        }
        Some(i) => vec![i],
        None => (0..records.len()).collect(),
    };

    let opts = TrackOptions::default();
    let outcomes: Vec<(u64, TrackOutcome)> = selected
        .par_iter()
        .map(|&i| {
            let seq = &sequences[i];
            let ids = vocab.tokenize(&seq.sentence.join(" "))?;
            let outcome =
                track_sequence(&tracker, &store, &seq.frames, &ids, &seq.gt[0], &opts)?;
            Ok((seq.seed, outcome))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut lines = String::new();
    let mut frames = 0usize;
    for (seed, outcome) in &outcomes {
        for r in &outcome.records {
            let record = ResultRecord {
                sequence: *seed,
                frame: r.frame,
                x: r.bbox.x,
                y: r.bbox.y,
                w: r.bbox.w,
                h: r.bbox.h,
                confidence: r.confidence,
            };
            lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
            lines.push('\n');
            frames += 1;
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    std::fs::write(&args.out, lines).map_err(|e| io_err(&args.out, e))?;
    println!(
        "tracked {} sequences ({frames} frames) -> {}",
        outcomes.len(),
        args.out.display()
    );
    Ok(())
}

/// Parse a results file into per-sequence box/confidence lists, ordered
/// and validated against the manifest.
fn read_results(
    path: &Path,
    records: &[SequenceRecord],
) -> Result<Vec<(usize, Vec<BBox>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut parsed: Vec<ResultRecord> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ResultRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), ln + 1))
        })?;
        parsed.push(record);
    }
    if parsed.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())));
    }
    let mut out = Vec::new();
    for (idx, rec) in records.iter().enumerate() {
        let mut frames: Vec<&ResultRecord> =
            parsed.iter().filter(|r| r.sequence == rec.seed).collect();
        if frames.is_empty() {
            continue;
        }
        frames.sort_by_key(|r| r.frame);
        if frames.len() != rec.gt.len()
            || frames.iter().enumerate().any(|(t, r)| r.frame != t)
        {
            return Err(Error::Input(format!(
                "sequence {} needs exactly frames 0..{}, found {} records",
                rec.seed,
                rec.gt.len(),
                frames.len()
            )));
        }
        let boxes: Vec<BBox> =
            frames.iter().map(|r| BBox::new(r.x, r.y, r.w, r.h)).collect();
        out.push((idx, boxes));
    }
    let known: usize = out.iter().map(|(_, b)| b.len()).sum();
    if known != parsed.len() {
        return Err(Error::Input(format!(
            "{} records reference sequences absent from the manifest",
            parsed.len() - known
        )));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    init_threads(&args.common);
    let records = load_manifest(&args.data)?;
    let per_sequence = read_results(&args.results, &records)?;
    if per_sequence.is_empty() {
        return Err(Error::Input(
            "no result records match the manifest sequences".into(),
        ));
    }

    let mut table = format!(
        "{:<12}{:>9}{:>9}{:>9}{:>8}\n",
        "sequence", "AUC", "P", "P_norm", "frames"
    );
    let mut sums = (0.0, 0.0, 0.0);
    let mut total_frames = 0usize;
    for (idx, pred) in &per_sequence {
        let rec = &records[*idx];
        let gt = rec.boxes();
        let sizes = vec![(rec.frame_size as f64, rec.frame_size as f64); gt.len()];
        let m = tracking_metrics(pred, &gt, &sizes)?;
        table.push_str(&format!(
            "{:<12}{:>9.4}{:>9.4}{:>9.4}{:>8}\n",
            rec.seed,
            m.auc,
            m.precision,
            m.precision_norm,
            gt.len()
        ));
        sums.0 += m.auc;
        sums.1 += m.precision;
        sums.2 += m.precision_norm;
        total_frames += gt.len();
    }
    let n = per_sequence.len() as f64;
    table.push_str(&format!(
        "{:<12}{:>9.4}{:>9.4}{:>9.4}{:>8}\n",
        "aggregate",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        total_frames
    ));
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table).map_err(|e| io_err(out, e))?;
    }
    Ok(())
}

fn cmd_probe_words(args: ProbeWordsArgs) -> Result<()> {
    init_threads(&args.common);
    let run = resolve_config(&args.common, Some(&args.checkpoint))?;
    let (tracker, store, vocab) = load_tracker(&run, &args.checkpoint)?;
    let (_, sequences) = load_sequences(&args.data)?;
    let report =
        probe_word_roles(&tracker, &store, &vocab, &sequences, args.frames_per_sentence)?;
    let table = report.format_table();
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table).map_err(|e| io_err(out, e))?;
    }
    Ok(())
}

fn cmd_inspect_heatmap(args: InspectHeatmapArgs) -> Result<()> {
    init_threads(&args.common);
    let run = resolve_config(&args.common, Some(&args.checkpoint))?;
    if !run.model.ablation.visual {
        return Err(Error::Input(
            "this configuration has the visual path off; there is no heatmap to inspect".into(),
        ));
    }
    let (tracker, store, vocab) = load_tracker(&run, &args.checkpoint)?;
    let (records, sequences) = load_sequences(&args.data)?;
    if args.sequence >= records.len() {
        return Err(Error::Input(format!(
            "sequence index {} out of range; the manifest has {} sequences",
            args.sequence,
            records.len()
        )));
    }
    let seq = &sequences[args.sequence];
    if args.frame == 0 || args.frame >= seq.frames.len() {
        return Err(Error::Input(format!(
            "frame must be 1..{} (frame 0 initializes the tracker and has no heatmap)",
            seq.frames.len() - 1
        )));
    }
    let ids = vocab.tokenize(&seq.sentence.join(" "))?;
    let opts = TrackOptions { collect_heatmaps: true, ..TrackOptions::default() };
    let outcome = track_sequence(&tracker, &store, &seq.frames, &ids, &seq.gt[0], &opts)?;
    let (raw, normalized) = &outcome.heatmaps[args.frame - 1];

    let side = tracker.grid_side();
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let raw_values = raw.data();
    let norm_values = normalized.data();

    // The raw correlation means are unbounded, so the graymap rescales
    // them to the frame's own min..max; exact values live in the grid
    // file.
    let (lo, hi) = raw_values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let raw_gray: Vec<f64> = raw_values.iter().map(|&v| (v - lo) / span).collect();

    let raw_pgm = args.out.join(format!("heatmap_raw_frame{:04}.pgm", args.frame));
    write_pgm(&raw_pgm, side, side, &raw_gray)?;
    let norm_pgm = args.out.join(format!("heatmap_frame{:04}.pgm", args.frame));
    write_pgm(&norm_pgm, side, side, norm_values)?;

    let mut grid = String::from("# raw correlation row-means (pre-sigmoid)\n");
    for r in 0..side {
        let row: Vec<String> =
            (0..side).map(|c| format!("{:.17e}", raw_values[r * side + c])).collect();
        grid.push_str(&row.join(" "));
        grid.push('\n');
    }
    grid.push_str("\n# normalized heatmap\n");
    for r in 0..side {
        let row: Vec<String> =
            (0..side).map(|c| format!("{:.17e}", norm_values[r * side + c])).collect();
        grid.push_str(&row.join(" "));
        grid.push('\n');
    }
    let grid_path = args.out.join(format!("heatmap_frame{:04}.txt", args.frame));
    std::fs::write(&grid_path, grid).map_err(|e| io_err(&grid_path, e))?;

    println!(
        "wrote {side}x{side} heatmap grids for sequence {} frame {} -> {}",
        records[args.sequence].seed,
        args.frame,
        args.out.display()
    );
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs) -> Result<()> {
    let text =
        std::fs::read_to_string(&args.sentences).map_err(|e| io_err(&args.sentences, e))?;
    let sentences: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if sentences.is_empty() {
        return Err(Error::Input(format!(
            "{} holds no sentences",
            args.sentences.display()
        )));
    }
    let annotator = if args.offline {
        Annotator::Offline
    } else {
        Annotator::Endpoint(EndpointClient::from_env()?)
    };
    let mut cache = match &args.cache {
        Some(path) => Some(LabelCache::open(path)?),
        None => None,
    };
    let labels = annotate_batch(&sentences, &annotator, cache.as_mut(), args.parallelism)?;
    let body = serde_json::to_string_pretty(&labels)
        .map_err(|e| Error::Format(format!("encoding labels: {e}")))?;
    std::fs::write(&args.out, body).map_err(|e| io_err(&args.out, e))?;
    let targets: f64 = labels.iter().map(|l| l.labels.iter().sum::<f64>()).sum();
    println!(
        "annotated {} sentences ({} target words) -> {}",
        labels.len(),
        targets as usize,
        args.out.display()
    );
    Ok(())
}
