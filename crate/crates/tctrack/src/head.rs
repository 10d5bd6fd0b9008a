//! Convolutional prediction head and box decoding.
//!
//! The guided search features `f_R` (`[N_x, D]`) are reshaped to a
//! `D x H_s x W_s` map (tokens are row-major over the grid) and fed to
//! three branches of stacked convolution–normalization–activation
//! layers:
//!
//! * **score** `P` (`[1, H_s, W_s]`) — per-cell target probability;
//! * **size** `B` (`[2, H_s, W_s]`) — box width/height, normalized to
//!   the search window;
//! * **offset** `O` (`[2, H_s, W_s]`) — sub-cell center offset.
//!
//! All three end in a sigmoid, so every map value lies in `(0, 1)`.
//! Decoding takes the argmax cell `(r, c)` of `P` (ties break to the
//! smallest row-major index) and reads
//! `x = (c + O[0]) / W_s`, `y = (r + O[1]) / H_s`, `w = B[0]`,
//! `h = B[1]` — a center-based box in window-normalized coordinates.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamStore, Var};

const INIT_STD: f64 = 0.02;

/// One convolution–normalization–activation stage.
#[derive(Clone, Debug)]
struct Stage {
    conv_w: String,
    conv_b: String,
    norm_gain: String,
    norm_bias: String,
}

/// One output branch: hidden stages plus a projection convolution.
#[derive(Clone, Debug)]
struct Branch {
    stages: Vec<Stage>,
    out_w: String,
    out_b: String,
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        layers: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        for l in 0..layers.saturating_sub(1) {
            let stage = Stage {
                conv_w: format!("{prefix}/conv{l}/w"),
                conv_b: format!("{prefix}/conv{l}/b"),
                norm_gain: format!("{prefix}/conv{l}/gain"),
                norm_bias: format!("{prefix}/conv{l}/bias"),
            };
            store.register(&stage.conv_w, &[dim, dim, 3, 3], Init::TruncNormal { std: INIT_STD })?;
            store.register(&stage.conv_b, &[1, dim], Init::Zeros)?;
            store.register(&stage.norm_gain, &[1, dim], Init::Ones)?;
            store.register(&stage.norm_bias, &[1, dim], Init::Zeros)?;
            stages.push(stage);
        }
        let out_w = format!("{prefix}/out/w");
        let out_b = format!("{prefix}/out/b");
        store.register(&out_w, &[out_channels, dim, 3, 3], Init::TruncNormal { std: INIT_STD })?;
        store.register(&out_b, &[1, out_channels], Init::Zeros)?;
        Ok(Branch { stages, out_w, out_b })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<Var> {
        let mut x = map;
        for stage in &self.stages {
            let w = g.param(store, &stage.conv_w)?;
            let b = g.param(store, &stage.conv_b)?;
            let conv = g.conv3x3(x, w, b)?;
            let gain = g.param(store, &stage.norm_gain)?;
            let bias = g.param(store, &stage.norm_bias)?;
            let normed = g.instance_norm(conv, gain, bias)?;
            x = g.relu(normed);
        }
        let w = g.param(store, &self.out_w)?;
        let b = g.param(store, &self.out_b)?;
        let out = g.conv3x3(x, w, b)?;
        Ok(g.sigmoid(out))
    }
}

/// The three decoded map tensors for one search frame, still on the
/// graph so losses can differentiate through them.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps {
    /// Score map `[1, H_s, W_s]`.
    pub score: Var,
    /// Size map `[2, H_s, W_s]`.
    pub size: Var,
    /// Offset map `[2, H_s, W_s]`.
    pub offset: Var,
    /// Grid height.
    pub grid_h: usize,
    /// Grid width.
    pub grid_w: usize,
}

/// Box coordinates at one grid cell, each a `[1, 1]` graph value.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    /// Center x in `[0, 1]`.
    pub x: Var,
    /// Center y in `[0, 1]`.
    pub y: Var,
    /// Width in `(0, 1)`.
    pub w: Var,
    /// Height in `(0, 1)`.
    pub h: Var,
}

/// Three-branch convolutional head.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    score: Branch,
    size: Branch,
    offset: Branch,
    dim: usize,
}

impl PredictionHead {
    /// Registers parameters under `prefix`. `layers` counts all
    /// convolutions per branch, the last one projecting to the output
    /// channels.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Contract("prediction head needs at least one layer".into()));
        }
        Ok(PredictionHead {
            score: Branch::new(store, &format!("{prefix}/score"), dim, layers, 1)?,
            size: Branch::new(store, &format!("{prefix}/size"), dim, layers, 2)?,
            offset: Branch::new(store, &format!("{prefix}/offset"), dim, layers, 2)?,
            dim,
        })
    }

    /// Runs all three branches over `f_r` (`[grid_h * grid_w, D]`).
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_r: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<HeadMaps> {
        let shape = g.shape(f_r).to_vec();
        if shape.len() != 2 || shape[0] != grid_h * grid_w || shape[1] != self.dim {
            return Err(Error::Contract(format!(
                "head needs [{}, {}] features for a {}x{} grid, got {:?}",
                grid_h * grid_w,
                self.dim,
                grid_h,
                grid_w,
                shape
            )));
        }
        if grid_h * grid_w < 2 {
            return Err(Error::Contract("head grid must have at least two cells".into()));
        }
        let channels_first = g.transpose(f_r)?;
        let map = g.reshape(channels_first, &[self.dim, grid_h, grid_w])?;
        Ok(HeadMaps {
            score: self.score.apply(g, store, map)?,
            size: self.size.apply(g, store, map)?,
            offset: self.offset.apply(g, store, map)?,
            grid_h,
            grid_w,
        })
    }
}

impl HeadMaps {
    /// The differentiable box at a given cell `(row, col)` — used with
    /// the ground-truth cell during training.
    pub fn box_at(&self, g: &mut Graph, row: usize, col: usize) -> Result<BoxVars> {
        if row >= self.grid_h || col >= self.grid_w {
            return Err(Error::Contract(format!(
                "cell ({row}, {col}) outside {}x{} grid",
                self.grid_h, self.grid_w
            )));
        }
        let cells = self.grid_h * self.grid_w;
        let flat = row * self.grid_w + col;
        let size_col = g.reshape(self.size, &[2 * cells, 1])?;
        let offset_col = g.reshape(self.offset, &[2 * cells, 1])?;
        let w = g.slice_rows(size_col, flat, flat + 1)?;
        let h = g.slice_rows(size_col, cells + flat, cells + flat + 1)?;
        let off_x = g.slice_rows(offset_col, flat, flat + 1)?;
        let off_y = g.slice_rows(offset_col, cells + flat, cells + flat + 1)?;
        let x_cells = g.scalar_add(off_x, col as f64);
        let x = g.scalar_mul(x_cells, 1.0 / self.grid_w as f64);
        let y_cells = g.scalar_add(off_y, row as f64);
        let y = g.scalar_mul(y_cells, 1.0 / self.grid_h as f64);
        Ok(BoxVars { x, y, w, h })
    }

    /// Decodes the most confident box: `(box, confidence, (row, col))`.
    pub fn decode(&self, g: &Graph) -> (BBox, f64, (usize, usize)) {
        decode_maps(
            g.value(self.score),
            g.value(self.size),
            g.value(self.offset),
            self.grid_h,
            self.grid_w,
        )
    }
}

/// Pure decode over raw map buffers (`score` length `H*W`, `size` and
/// `offset` length `2*H*W`, channel-major). Ties break to the smallest
/// row-major index.
pub fn decode_maps(
    score: &[f64],
    size: &[f64],
    offset: &[f64],
    grid_h: usize,
    grid_w: usize,
) -> (BBox, f64, (usize, usize)) {
    let cells = grid_h * grid_w;
    debug_assert_eq!(score.len(), cells);
    debug_assert_eq!(size.len(), 2 * cells);
    debug_assert_eq!(offset.len(), 2 * cells);
    let mut best = 0;
    for i in 1..cells {
        if score[i] > score[best] {
            best = i;
        }
    }
    let (row, col) = (best / grid_w, best % grid_w);
    let b = BBox {
        x: (col as f64 + offset[best]) / grid_w as f64,
        y: (row as f64 + offset[cells + best]) / grid_h as f64,
        w: size[best],
        h: size[cells + best],
    };
    (b, score[best], (row, col))
}

/// The grid cell containing a window-normalized box center, clamped
/// into the grid — the classification target during training.
pub fn center_cell(b: &BBox, grid_h: usize, grid_w: usize) -> (usize, usize) {
    let col = ((b.x * grid_w as f64).floor() as isize).clamp(0, grid_w as isize - 1) as usize;
    let row = ((b.y * grid_h as f64).floor() as isize).clamp(0, grid_h as isize - 1) as usize;
    (row, col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 4;
    const GH: usize = 3;
    const GW: usize = 3;

    fn features(rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..GH * GW * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![GH * GW, DIM], data).unwrap()
    }

    #[test]
    fn maps_have_declared_shapes_and_ranges() {
        let mut store = ParamStore::new(40);
        let head = PredictionHead::new(&mut store, "head", DIM, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut g = Graph::new();
        let f_r = g.input(&features(&mut rng)).unwrap();
        let maps = head.apply(&mut g, &store, f_r, GH, GW).unwrap();
        assert_eq!(g.shape(maps.score), &[1, GH, GW]);
        assert_eq!(g.shape(maps.size), &[2, GH, GW]);
        assert_eq!(g.shape(maps.offset), &[2, GH, GW]);
        for v in [maps.score, maps.size, maps.offset] {
            for &x in g.value(v) {
                assert!(x > 0.0 && x < 1.0);
            }
        }
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let mut store = ParamStore::new(42);
        let head = PredictionHead::new(&mut store, "head", DIM, 2).unwrap();
        let mut g = Graph::new();
        let bad = g.input(&Tensor::zeros(&[GH * GW + 1, DIM])).unwrap();
        assert!(head.apply(&mut g, &store, bad, GH, GW).is_err());
        assert!(PredictionHead::new(&mut store, "head0", DIM, 0).is_err());
    }

    #[test]
    fn decode_matches_hand_case() {
        // One-hot score at (row 2, col 1) on a 3x3 grid.
        let mut score = vec![0.1; 9];
        score[2 * 3 + 1] = 0.9;
        let size = vec![0.25; 18];
        let mut offset = vec![0.0; 18];
        offset[2 * 3 + 1] = 0.5; // x offset at the peak
        offset[9 + 2 * 3 + 1] = 0.25; // y offset at the peak
        let (b, conf, cell) = decode_maps(&score, &size, &offset, 3, 3);
        assert_eq!(cell, (2, 1));
        assert!((conf - 0.9).abs() < 1e-12);
        assert!((b.x - (1.0 + 0.5) / 3.0).abs() < 1e-12);
        assert!((b.y - (2.0 + 0.25) / 3.0).abs() < 1e-12);
        assert!((b.w - 0.25).abs() < 1e-12);
        assert!((b.h - 0.25).abs() < 1e-12);
    }

    #[test]
    fn decode_ties_break_to_first_cell() {
        let score = vec![0.5; 9];
        let size = vec![0.1; 18];
        let offset = vec![0.0; 18];
        let (_, _, cell) = decode_maps(&score, &size, &offset, 3, 3);
        assert_eq!(cell, (0, 0));
    }

    #[test]
    fn decode_agrees_with_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let score: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
            let size: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let offset: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (b, conf, (row, col)) = decode_maps(&score, &size, &offset, 3, 3);
            // Oracle: scan every cell, keep the strictly best, first wins.
            let mut best = (0usize, 0usize);
            let mut best_v = f64::NEG_INFINITY;
            for r in 0..3 {
                for c in 0..3 {
                    let v = score[r * 3 + c];
                    if v > best_v {
                        best_v = v;
                        best = (r, c);
                    }
                }
            }
            assert_eq!((row, col), best);
            assert!((conf - best_v).abs() < 1e-15);
            let flat = row * 3 + col;
            assert!((b.w - size[flat]).abs() < 1e-15);
            assert!((b.h - size[9 + flat]).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_is_invariant_to_constant_score_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..100 {
            let score: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
            let size: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let offset: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let shifted: Vec<f64> = score.iter().map(|v| v + 0.37).collect();
            let (a, _, cell_a) = decode_maps(&score, &size, &offset, 3, 3);
            let (b, _, cell_b) = decode_maps(&shifted, &size, &offset, 3, 3);
            assert_eq!(cell_a, cell_b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn box_at_matches_decode_at_the_argmax_cell() {
        let mut store = ParamStore::new(45);
        let head = PredictionHead::new(&mut store, "head", DIM, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut g = Graph::new();
        let f_r = g.input(&features(&mut rng)).unwrap();
        let maps = head.apply(&mut g, &store, f_r, GH, GW).unwrap();
        let (decoded, _, (row, col)) = maps.decode(&g);
        let vars = maps.box_at(&mut g, row, col).unwrap();
        assert!((g.item(vars.x) - decoded.x).abs() < 1e-12);
        assert!((g.item(vars.y) - decoded.y).abs() < 1e-12);
        assert!((g.item(vars.w) - decoded.w).abs() < 1e-12);
        assert!((g.item(vars.h) - decoded.h).abs() < 1e-12);
        assert!(maps.box_at(&mut g, GH, 0).is_err());
    }

    #[test]
    fn center_cell_covers_the_grid_and_clamps() {
        assert_eq!(center_cell(&BBox::new(0.5, 0.5, 0.1, 0.1), 4, 4), (2, 2));
        assert_eq!(center_cell(&BBox::new(0.0, 0.0, 0.1, 0.1), 4, 4), (0, 0));
        assert_eq!(center_cell(&BBox::new(1.0, 1.0, 0.1, 0.1), 4, 4), (3, 3));
        assert_eq!(center_cell(&BBox::new(-0.2, 1.4, 0.1, 0.1), 4, 4), (3, 0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut store = ParamStore::new(47);
        let head = PredictionHead::new(&mut store, "head", DIM, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let f_r_t = features(&mut rng);
        let report = check_gradients(&store, 1e-5, |g, store| {
            let f_r = g.input(&f_r_t)?;
            let maps = head.apply(g, store, f_r, GH, GW)?;
            // Mix all three branches into the scalar.
            let s = g.mean(maps.score);
            let b = g.mean(maps.size);
            let o = g.mean(maps.offset);
            let sb = g.add(s, b)?;
            g.add(sb, o)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
    }
}
