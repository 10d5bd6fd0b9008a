//! Visual-guidance path: target-context heatmap, compressed memory
//! states, and a parameter-free memory read over the search features.
//!
//! Per frame the path:
//!
//! 1. Correlates every search token with the template tokens and
//!    squashes the row means into a heatmap `h` in `(0, 1)` — high where
//!    the search region looks like the target, graded elsewhere so
//!    context (distractors, neighbors) keeps signal.
//! 2. Compresses the heatmap-weighted search features into one state
//!    vector `m^t`: the class token and the memory bank form a query
//!    sequence that cross-attends into `h * f_X` through two
//!    attention + feed-forward blocks; the refreshed class row is `m^t`.
//! 3. Reads the memory back into the fused search features without any
//!    parameters: rows of `f_XL` attend over the memory keys by scaled
//!    dot product. With [`MemoryKeys::Bank`] the keys are the bank plus
//!    `m^t` and the read is residual; with [`MemoryKeys::Newest`] the
//!    single current state is the only key and replaces the features.
//!
//! [`HeatmapMode`] swaps the heatmap for masked or box-pooling
//! baselines, and [`HeatmapTemplates`] restricts which template tokens
//! the correlation sees.

use crate::boxes::BBox;
use crate::config::{HeatmapMode, HeatmapTemplates, MemoryKeys};
use crate::error::{Error, Result};
use crate::nn::CrossBlock;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Correlation heatmap over search tokens.
///
/// Returns `(raw, normalized)`: `raw[i]` is the mean dot product of
/// search token `i` with all template tokens (shape `[N_x, 1]`), and
/// `normalized = sigmoid(raw / sqrt(D))` squashes it into `(0, 1)`.
pub fn correlation_heatmap(g: &mut Graph, f_x: Var, f_z: Var) -> Result<(Var, Var)> {
    let zshape = g.shape(f_z).to_vec();
    if zshape.len() != 2 || zshape[0] == 0 {
        return Err(Error::Contract(format!(
            "heatmap needs at least one template token, got shape {zshape:?}"
        )));
    }
    let dim = zshape[1];
    let zt = g.transpose(f_z)?;
    let scores = g.matmul(f_x, zt)?;
    let raw = g.row_mean(scores)?;
    let scaled = g.scalar_mul(raw, 1.0 / (dim as f64).sqrt());
    let normalized = g.sigmoid(scaled);
    Ok((raw, normalized))
}

/// Selects the template tokens the heatmap correlates against.
pub fn heatmap_reference(
    g: &mut Graph,
    mode: HeatmapTemplates,
    initial: Var,
    dynamic: Option<Var>,
) -> Result<Var> {
    match (mode, dynamic) {
        (HeatmapTemplates::Both, Some(d)) => g.concat_rows(&[initial, d]),
        (HeatmapTemplates::Both, None) => Ok(initial),
        (HeatmapTemplates::InitialOnly, _) => Ok(initial),
        (HeatmapTemplates::DynamicOnly, Some(d)) => Ok(d),
        (HeatmapTemplates::DynamicOnly, None) => Err(Error::Contract(
            "dynamic-only heatmap needs a dynamic template".into(),
        )),
    }
}

/// A 0/1 column marking which grid cells fall inside `expand` times the
/// previous box (window-normalized coordinates, cell centers tested).
/// Degenerate boxes fall back to the single cell under the box center.
pub fn box_footprint(prev: &BBox, grid_h: usize, grid_w: usize, expand: f64) -> Tensor {
    let half_w = (prev.w * expand / 2.0).max(0.0);
    let half_h = (prev.h * expand / 2.0).max(0.0);
    let mut data = vec![0.0; grid_h * grid_w];
    let mut any = false;
    for r in 0..grid_h {
        for c in 0..grid_w {
            let cx = (c as f64 + 0.5) / grid_w as f64;
            let cy = (r as f64 + 0.5) / grid_h as f64;
            if (cx - prev.x).abs() <= half_w && (cy - prev.y).abs() <= half_h {
                data[r * grid_w + c] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let c = ((prev.x * grid_w as f64).floor() as isize).clamp(0, grid_w as isize - 1) as usize;
        let r = ((prev.y * grid_h as f64).floor() as isize).clamp(0, grid_h as isize - 1) as usize;
        data[r * grid_w + c] = 1.0;
    }
    Tensor::new(vec![grid_h * grid_w, 1], data).expect("footprint shape")
}

/// Applies the heatmap masking mode. `Global` passes `h` through;
/// `CropMask` zeroes `h` outside the footprint; `Roi` discards the
/// correlation entirely and uses the footprint as a uniform weight.
pub fn apply_heatmap_mode(
    g: &mut Graph,
    h: Var,
    mode: HeatmapMode,
    footprint: Option<&Tensor>,
) -> Result<Var> {
    match mode {
        HeatmapMode::Global => Ok(h),
        HeatmapMode::CropMask | HeatmapMode::Roi => {
            let fp = footprint.ok_or_else(|| {
                Error::Contract("masked heatmap modes need a box footprint".into())
            })?;
            if fp.shape() != g.shape(h) {
                return Err(Error::Shape {
                    op: "apply_heatmap_mode",
                    lhs: g.shape(h).to_vec(),
                    rhs: fp.shape().to_vec(),
                });
            }
            let mask = g.constant(fp.clone());
            if mode == HeatmapMode::Roi {
                Ok(mask)
            } else {
                g.mul(h, mask)
            }
        }
    }
}

/// Compresses heatmap-weighted search features into one state vector.
#[derive(Clone, Debug)]
pub struct MemoryRepresentation {
    blocks: Vec<CrossBlock>,
    dim: usize,
}

impl MemoryRepresentation {
    /// Stacking depth of the compression blocks.
    pub const DEPTH: usize = 2;

    /// Registers parameters under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(Self::DEPTH);
        for i in 0..Self::DEPTH {
            blocks.push(CrossBlock::new(store, &format!("{prefix}/block{i}"), dim, heads)?);
        }
        Ok(MemoryRepresentation { blocks, dim })
    }

    /// The new state `m^t`, shape `[1, D]`.
    ///
    /// `f_cls` is the class token `[1, D]`, `memory` the stacked bank
    /// `[L_m, D]`, `f_x` the search tokens, and `h` the heatmap column.
    /// The query sequence `[f_cls; memory]` is refreshed against
    /// `h * f_X`; its first row (the class slot) is the result.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_cls: Var,
        memory: Var,
        f_x: Var,
        h: Var,
    ) -> Result<Var> {
        if g.shape(f_cls) != [1, self.dim] {
            return Err(Error::Contract(format!(
                "memory representation needs a [1, {}] class token, got {:?}",
                self.dim,
                g.shape(f_cls)
            )));
        }
        let weighted = g.scale_rows(f_x, h)?;
        let mut query = g.concat_rows(&[f_cls, memory])?;
        for block in &self.blocks {
            query = block.apply(g, store, query, weighted)?;
        }
        g.slice_rows(query, 0, 1)
    }
}

/// Key sequence and residual flag for the parameter-free memory read.
pub fn memory_read_keys(
    g: &mut Graph,
    mode: MemoryKeys,
    memory: Var,
    m_t: Var,
) -> Result<(Var, bool)> {
    match mode {
        MemoryKeys::Bank => Ok((g.concat_rows(&[memory, m_t])?, true)),
        MemoryKeys::Newest => Ok((m_t, false)),
    }
}

/// Parameter-free memory read: each row of `f_xl` attends over `keys`
/// by scaled dot product. With `residual` the read adds onto `f_xl`;
/// without it the read replaces the features.
pub fn memory_read(g: &mut Graph, f_xl: Var, keys: Var, residual: bool) -> Result<Var> {
    let kshape = g.shape(keys).to_vec();
    let xshape = g.shape(f_xl).to_vec();
    if kshape.len() != 2 || xshape.len() != 2 || kshape[1] != xshape[1] || kshape[0] == 0 {
        return Err(Error::Shape { op: "memory_read", lhs: xshape, rhs: kshape });
    }
    let dim = kshape[1];
    let kt = g.transpose(keys)?;
    let scores = g.matmul(f_xl, kt)?;
    let scaled = g.scalar_mul(scores, 1.0 / (dim as f64).sqrt());
    let attn = g.softmax_rows(scaled)?;
    let read = g.matmul(attn, keys)?;
    if residual {
        g.add(f_xl, read)
    } else {
        Ok(read)
    }
}
