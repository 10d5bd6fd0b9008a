//! Text and vision encoders plus the word-level tokenizer.
//!
//! The vision encoder is one-stream: a learnable aggregation token, the
//! initial template, the dynamic template, and the search region are
//! embedded with a shared patch projection and jointly attended by a
//! stack of post-norm blocks. The output splits back into the
//! aggregation token `f_cls`, template features `f_Z`, and search
//! features `f_X`. The text encoder embeds whitespace tokens with
//! learned positions and runs its own stack.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Linear, SelfBlock};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Init, ParamStore, Tensor};

/// Closed word-level vocabulary with case-insensitive lookup.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from any word list; words are lowercased,
    /// deduplicated, and sorted so the id assignment is reproducible
    /// regardless of input order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index = BTreeMap::new();
        for w in words {
            index.entry(w.as_ref().to_lowercase()).or_insert(0);
        }
        let words: Vec<String> = index.keys().cloned().collect();
        for (i, w) in words.iter().enumerate() {
            *index.get_mut(w).expect("key exists") = i;
        }
        Vocab { words, index }
    }

    /// Number of words.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// True for an empty vocabulary.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// The word with the given id.
    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Id of a (lowercased) word, if present.
    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    /// Splits a sentence on whitespace, strips surrounding punctuation,
    /// lowercases, and maps every word to its id. Empty sentences and
    /// unknown words are rejected.
    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        let words = split_words(sentence);
        if words.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        words
            .iter()
            .map(|w| {
                self.id(w).ok_or_else(|| {
                    Error::Input(format!("word {w:?} is not in the vocabulary"))
                })
            })
            .collect()
    }
}

/// Sentence splitting shared by the tokenizer and the annotation layer:
/// whitespace-separated units with surrounding ASCII punctuation
/// stripped, lowercased. Units that were pure punctuation disappear.
pub fn split_words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word-level text encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tok_table: String,
    pos_table: String,
    blocks: Vec<SelfBlock>,
    /// Maximum sentence length (position-table rows).
    pub max_words: usize,
}

impl TextEncoder {
    /// Registers embedding tables and `text_layers` blocks under `text/`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Contract("text encoder needs a non-empty vocabulary".into()));
        }
        let tok_table = "text/tok_embed".to_string();
        let pos_table = "text/pos_embed".to_string();
        store.register(&tok_table, &[vocab_size, cfg.dim], Init::TruncNormal { std: 0.02 })?;
        store.register(&pos_table, &[cfg.max_words, cfg.dim], Init::TruncNormal { std: 0.02 })?;
        let blocks = (0..cfg.text_layers)
            .map(|i| SelfBlock::new(store, &format!("text/block{i}"), cfg.dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder { tok_table, pos_table, blocks, max_words: cfg.max_words })
    }

    /// Encodes token ids into `f_L: [n_words, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Input("cannot encode an empty sentence".into()));
        }
        if ids.len() > self.max_words {
            return Err(Error::Input(format!(
                "sentence has {} words, the encoder supports at most {}",
                ids.len(),
                self.max_words
            )));
        }
        let table = g.param(store, &self.tok_table)?;
        let tok = g.embed(table, ids)?;
        let pos_full = g.param(store, &self.pos_table)?;
        let pos = g.slice_rows(pos_full, 0, ids.len())?;
        let mut x = g.add(tok, pos)?;
        for b in &self.blocks {
            x = b.apply(g, store, x)?;
        }
        Ok(x)
    }
}

/// Features produced by one joint encoding pass.
#[derive(Clone, Copy, Debug)]
pub struct VisionFeatures {
    /// Aggregation token `f_cls: [1, dim]`.
    pub cls: Var,
    /// Initial-template features `[n_template_tokens, dim]`.
    pub template_initial: Var,
    /// Dynamic-template features, when a dynamic template was encoded.
    pub template_dynamic: Option<Var>,
    /// Search features `f_X: [n_search_tokens, dim]`.
    pub search: Var,
}

/// One-stream vision encoder over aggregation, template, and search
/// tokens.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch_proj: Linear,
    pos_search: String,
    pos_template: String,
    role_dynamic: String,
    cls: String,
    blocks: Vec<SelfBlock>,
    patch: usize,
    channels: usize,
    search_size: usize,
    template_size: usize,
}

impl VisionEncoder {
    /// Registers patch projection, position tables, the aggregation
    /// token, and `vision_layers` blocks under `vision/`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.channels * cfg.patch * cfg.patch;
        let patch_proj = Linear::new(store, "vision/patch", patch_dim, cfg.dim)?;
        let pos_search = "vision/pos_search".to_string();
        let pos_template = "vision/pos_template".to_string();
        let role_dynamic = "vision/role_dynamic".to_string();
        let cls = "vision/cls".to_string();
        store.register(&pos_search, &[cfg.num_search_tokens(), cfg.dim], Init::TruncNormal { std: 0.02 })?;
        store.register(&pos_template, &[cfg.num_template_tokens(), cfg.dim], Init::TruncNormal { std: 0.02 })?;
        // Zero-initialized role marker: the two templates start
        // indistinguishable and learn to separate.
        store.register(&role_dynamic, &[1, cfg.dim], Init::Zeros)?;
        store.register(&cls, &[1, cfg.dim], Init::TruncNormal { std: 0.02 })?;
        let blocks = (0..cfg.vision_layers)
            .map(|i| SelfBlock::new(store, &format!("vision/block{i}"), cfg.dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionEncoder {
            patch_proj,
            pos_search,
            pos_template,
            role_dynamic,
            cls,
            blocks,
            patch: cfg.patch,
            channels: cfg.channels,
            search_size: cfg.search_size,
            template_size: cfg.template_size,
        })
    }

    fn check_image(&self, what: &str, img: &Image, side: usize) -> Result<()> {
        if img.channels != self.channels || img.height != side || img.width != side {
            return Err(Error::Input(format!(
                "{what} crop must be {}x{side}x{side}, got {}x{}x{}",
                self.channels, img.channels, img.height, img.width
            )));
        }
        if !img.in_unit_range() {
            return Err(Error::Input(format!("{what} crop has pixel values outside [0, 1]")));
        }
        Ok(())
    }

    /// Embeds one image as patch tokens (no positions yet).
    fn embed_patches(&self, g: &mut Graph, store: &ParamStore, img: &Image) -> Result<Var> {
        let t = patchify(img, self.patch);
        let tokens = g.input(&t)?;
        self.patch_proj.apply(g, store, tokens)
    }

    /// Jointly encodes search and template crops.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        search: &Image,
        template_initial: &Image,
        template_dynamic: Option<&Image>,
    ) -> Result<VisionFeatures> {
        self.check_image("search", search, self.search_size)?;
        self.check_image("initial template", template_initial, self.template_size)?;
        if let Some(zd) = template_dynamic {
            self.check_image("dynamic template", zd, self.template_size)?;
        }

        let pos_s = g.param(store, &self.pos_search)?;
        let pos_t = g.param(store, &self.pos_template)?;
        let cls = g.param(store, &self.cls)?;

        let z0_raw = self.embed_patches(g, store, template_initial)?;
        let z0 = g.add(z0_raw, pos_t)?;
        let zd = match template_dynamic {
            Some(img) => {
                let zd_raw = self.embed_patches(g, store, img)?;
                let zd_pos = g.add(zd_raw, pos_t)?;
                let role = g.param(store, &self.role_dynamic)?;
                Some(g.add_row(zd_pos, role)?)
            }
            None => None,
        };
        let x_raw = self.embed_patches(g, store, search)?;
        let x = g.add(x_raw, pos_s)?;

        let mut parts = vec![cls, z0];
        if let Some(zd) = zd {
            parts.push(zd);
        }
        parts.push(x);
        let mut tokens = g.concat_rows(&parts)?;
        for b in &self.blocks {
            tokens = b.apply(g, store, tokens)?;
        }

        let n_t = g.shape(z0)[0];
        let n_x = g.shape(x)[0];
        let total = g.shape(tokens)[0];
        let cls_out = g.slice_rows(tokens, 0, 1)?;
        let z0_out = g.slice_rows(tokens, 1, 1 + n_t)?;
        let (zd_out, x_start) = if template_dynamic.is_some() {
            (Some(g.slice_rows(tokens, 1 + n_t, 1 + 2 * n_t)?), 1 + 2 * n_t)
        } else {
            (None, 1 + n_t)
        };
        debug_assert_eq!(total, x_start + n_x);
        let x_out = g.slice_rows(tokens, x_start, total)?;
        Ok(VisionFeatures {
            cls: cls_out,
            template_initial: z0_out,
            template_dynamic: zd_out,
            search: x_out,
        })
    }
}

/// Cuts an image into non-overlapping `patch x patch` tiles, row-major
/// over the tile grid, and flattens each tile channel-major. Pixels are
/// remapped from `[0, 1]` to `[-1, 1]` so tokens are zero-centered.
pub fn patchify(img: &Image, patch: usize) -> Tensor {
    debug_assert_eq!(img.height % patch, 0);
    debug_assert_eq!(img.width % patch, 0);
    let gh = img.height / patch;
    let gw = img.width / patch;
    let width = img.channels * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..img.channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let v = f64::from(img.get(c, gy * patch + py, gx * patch + px));
                        data.push((v - 0.5) * 2.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], data).expect("patch grid consistent")
}
