//! On-disk dataset: a JSON-lines manifest plus raw frame files.
//!
//! Layout under a dataset directory:
//!
//! ```text
//! manifest.jsonl          one JSON record per sequence
//! frames/seq_<seed>.bin   raw frames for that sequence
//! ```
//!
//! A manifest record holds the seed, the frames path (relative to the
//! manifest), the sentence with its word-role labels, the per-frame
//! ground-truth boxes (center-based frame pixels), and the frame
//! geometry.
//!
//! The frame file is little-endian: magic `TCFR`, version `1` (u32),
//! then `T, C, H, W` (u32 each), then `T*C*H*W` 32-bit floats in
//! `[t][c][y][x]` order. Reads validate every header field and the
//! exact payload length, so truncated or foreign files fail loudly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::config::WorldConfig;
use crate::error::{io_err, Error, Result};
use crate::image::Image;
use crate::synthetic::{generate_sequence, SyntheticSequence};

const FRAME_MAGIC: &[u8; 4] = b"TCFR";
const FRAME_VERSION: u32 = 1;
/// Upper bound on elements in one frame file (keeps a corrupt header
/// from triggering a giant allocation).
const MAX_ELEMS: u64 = 1 << 31;

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceRecord {
    /// Generator seed.
    pub seed: u64,
    /// Frames file, relative to the manifest's directory.
    pub frames_path: String,
    /// Sentence words.
    pub sentence: Vec<String>,
    /// Word-role labels aligned with `sentence` (1 target, 0 context).
    pub word_labels: Vec<f64>,
    /// Per-frame ground truth as `[x, y, w, h]` (center-based pixels).
    pub gt: Vec<[f64; 4]>,
    /// Square frame side in pixels.
    pub frame_size: usize,
}

impl SequenceRecord {
    /// Ground-truth boxes as [`BBox`] values.
    pub fn boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|g| BBox::new(g[0], g[1], g[2], g[3])).collect()
    }

    /// Loads this record's frames, resolving the path against the
    /// directory holding the manifest.
    pub fn load_frames(&self, manifest_dir: &Path) -> Result<Vec<Image>> {
        read_frames(&manifest_dir.join(&self.frames_path))
    }
}

/// Serializes frames to the raw format described in the module docs.
pub fn write_frames(path: &Path, frames: &[Image]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty frame sequence".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    if frames.iter().any(|f| f.channels != c || f.height != h || f.width != w) {
        return Err(Error::Input("all frames in a sequence must share dimensions".into()));
    }
    let mut buf: Vec<u8> =
        Vec::with_capacity(24 + frames.len() * c * h * w * std::mem::size_of::<f32>());
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    for dim in [frames.len(), c, h, w] {
        buf.extend_from_slice(&u32::try_from(dim).map_err(|_| {
            Error::Input(format!("dimension {dim} does not fit the frame header"))
        })?
        .to_le_bytes());
    }
    for frame in frames {
        for v in &frame.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads frames back, validating header and payload length.
pub fn read_frames(path: &Path) -> Result<Vec<Image>> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != FRAME_MAGIC {
        return Err(Error::Format(format!("{}: not a frame file (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FRAME_VERSION {
        return Err(Error::Format(format!(
            "{}: frame format version {version}, expected {FRAME_VERSION}",
            path.display()
        )));
    }
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    }
    let [t, c, h, w] = dims.map(|d| d as usize);
    let elems = (t as u64) * (c as u64) * (h as u64) * (w as u64);
    if t == 0 || c == 0 || h == 0 || w == 0 || elems > MAX_ELEMS {
        return Err(Error::Format(format!(
            "{}: implausible frame dimensions {t}x{c}x{h}x{w}",
            path.display()
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    let expect = elems as usize * std::mem::size_of::<f32>();
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "{}: expected {expect} payload bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    let per_frame = c * h * w;
    let mut frames = Vec::with_capacity(t);
    for ft in 0..t {
        let mut data = Vec::with_capacity(per_frame);
        let base = ft * per_frame * 4;
        for i in 0..per_frame {
            let at = base + i * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        frames.push(Image::from_data(c, h, w, data)?);
    }
    Ok(frames)
}

/// Writes a full dataset: `n` sequences with seeds `base_seed..`, one
/// manifest record each. Returns the manifest path. Deterministic in
/// `(config, base_seed, n)`; rerunning reproduces identical bytes.
pub fn generate_dataset(
    cfg: &WorldConfig,
    n: usize,
    base_seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    if n == 0 {
        eprintln!("generate_dataset: writing an empty manifest (n = 0)");
    }
    // Generation is pure per seed, so it parallelizes; writes stay in
    // seed order for reproducible bytes.
    let sequences: Vec<SyntheticSequence> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sequence(cfg, base_seed + i))
        .collect();
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    for seq in &sequences {
        let rel = format!("frames/seq_{:08}.bin", seq.seed);
        write_frames(&out_dir.join(&rel), &seq.frames)?;
        let record = SequenceRecord {
            seed: seq.seed,
            frames_path: rel,
            sentence: seq.sentence.clone(),
            word_labels: seq.labels.clone(),
            gt: seq.gt.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
            frame_size: seq.frame_size,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("manifest record: {e}")))?;
        manifest.write_all(line.as_bytes()).map_err(|e| io_err(&manifest_path, e))?;
        manifest.write_all(b"\n").map_err(|e| io_err(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// Parses a manifest into records (order preserved).
pub fn load_manifest(path: &Path) -> Result<Vec<SequenceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if record.sentence.len() != record.word_labels.len() {
            return Err(Error::Format(format!(
                "{}:{}: {} words but {} labels",
                path.display(),
                i + 1,
                record.sentence.len(),
                record.word_labels.len()
            )));
        }
        records.push(record);
    }
    Ok(records)
}

/// Rebuilds the in-memory sequence for a record (frames loaded from
/// disk, boxes and sentence from the manifest).
pub fn record_to_sequence(record: &SequenceRecord, manifest_dir: &Path) -> Result<SyntheticSequence> {
    Ok(SyntheticSequence {
        frames: record.load_frames(manifest_dir)?,
        gt: record.boxes(),
        sentence: record.sentence.clone(),
        labels: record.word_labels.clone(),
        seed: record.seed,
        frame_size: record.frame_size,
    })
}
