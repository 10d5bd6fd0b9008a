//! Neural building blocks composed from graph operations.
//!
//! Each block owns the *names* of its parameters (registered once in a
//! [`ParamStore`] at construction) and stages them into whatever
//! [`Graph`] it is applied in. All transformer blocks are post-norm:
//! `x = Norm(x + Sublayer(x))`, matching the residual-then-normalize
//! fusion used throughout the model.
//!
//! Naming convention (relied on by the optimizer's decay rule): weight
//! matrices and kernels end in `/w`, their biases in `/b`, normalization
//! parameters in `/gain` and `/bias`.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Init, ParamStore, Tensor};

/// Standard deviation for truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Hidden width of feed-forward blocks, as a multiple of the model width.
pub const FFN_EXPANSION: usize = 4;

/// Affine map `x @ w + b` with `w: [d_in, d_out]`, `b: [1, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    /// Input width.
    pub d_in: usize,
    /// Output width.
    pub d_out: usize,
}

impl Linear {
    /// Registers `{prefix}/w` and `{prefix}/b`.
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = format!("{prefix}/w");
        let b = format!("{prefix}/b");
        store.register(&w, &[d_in, d_out], Init::TruncNormal { std: INIT_STD })?;
        store.register(&b, &[1, d_out], Init::Zeros)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    /// `x: [m, d_in] -> [m, d_out]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Layer normalization with learned per-column gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
    /// Normalized width.
    pub dim: usize,
}

impl LayerNorm {
    /// Registers `{prefix}/gain` (ones) and `{prefix}/bias` (zeros).
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = format!("{prefix}/gain");
        let bias = format!("{prefix}/bias");
        store.register(&gain, &[1, dim], Init::Ones)?;
        store.register(&bias, &[1, dim], Init::Zeros)?;
        Ok(LayerNorm { gain, bias, dim })
    }

    /// Normalizes each row of `x: [m, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Scaled dot-product attention with learned projections. Queries come
/// from one sequence, keys and values from another (pass the same handle
/// twice for self-attention). Multi-head splitting is along columns;
/// with one head (the default configuration) the split is skipped.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    /// Number of attention heads; divides `dim`.
    pub heads: usize,
    /// Model width.
    pub dim: usize,
}

impl CrossAttention {
    /// Registers the four projections under `{prefix}/{q,k,v,o}`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Contract(format!(
                "attention at {prefix:?}: {heads} heads do not divide width {dim}"
            )));
        }
        Ok(CrossAttention {
            wq: Linear::new(store, &format!("{prefix}/q"), dim, dim)?,
            wk: Linear::new(store, &format!("{prefix}/k"), dim, dim)?,
            wv: Linear::new(store, &format!("{prefix}/v"), dim, dim)?,
            wo: Linear::new(store, &format!("{prefix}/o"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `queries_from: [m, dim]`, `keys_values_from: [n, dim]` -> `[m, dim]`.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries_from: Var,
        keys_values_from: Var,
    ) -> Result<Var> {
        let q = self.wq.apply(g, store, queries_from)?;
        let k = self.wk.apply(g, store, keys_values_from)?;
        let v = self.wv.apply(g, store, keys_values_from)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mixed = if self.heads == 1 {
            attend(g, q, k, v, scale)?
        } else {
            // Column selector S_h picks head h's slice; summing the
            // re-projected heads reassembles the concatenation.
            let mut total: Option<Var> = None;
            for h in 0..self.heads {
                let sel = g.constant(head_selector(self.dim, dh, h));
                let qh = g.matmul(q, sel)?;
                let kh = g.matmul(k, sel)?;
                let vh = g.matmul(v, sel)?;
                let oh = attend(g, qh, kh, vh, scale)?;
                let selt = g.transpose(sel)?;
                let placed = g.matmul(oh, selt)?;
                total = Some(match total {
                    None => placed,
                    Some(t) => g.add(t, placed)?,
                });
            }
            total.expect("at least one head")
        };
        self.wo.apply(g, store, mixed)
    }
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scalar_mul(scores, scale);
    let attn = g.softmax_rows(scaled)?;
    g.matmul(attn, v)
}

/// `[d, dh]` selector matrix whose rows `h*dh..(h+1)*dh` carry an
/// identity block.
fn head_selector(d: usize, dh: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; d * dh];
    for j in 0..dh {
        data[(h * dh + j) * dh + j] = 1.0;
    }
    Tensor::new(vec![d, dh], data).expect("selector shape consistent")
}

/// Two-layer feed-forward with GELU: `dim -> 4*dim -> dim`.
#[derive(Clone, Debug)]
pub struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    /// Registers `{prefix}/in` and `{prefix}/out`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Ffn {
            l1: Linear::new(store, &format!("{prefix}/in"), dim, dim * FFN_EXPANSION)?,
            l2: Linear::new(store, &format!("{prefix}/out"), dim * FFN_EXPANSION, dim)?,
        })
    }

    /// `x: [m, dim] -> [m, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, store, x)?;
        let a = g.gelu(h);
        self.l2.apply(g, store, a)
    }
}

/// Post-norm transformer encoder block:
/// `x = Norm(x + SelfAttn(x)); x = Norm(x + Ffn(x))`.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    attn: CrossAttention,
    norm1: LayerNorm,
    ffn: Ffn,
    norm2: LayerNorm,
}

impl SelfBlock {
    /// Registers all sublayers under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(SelfBlock {
            attn: CrossAttention::new(store, &format!("{prefix}/attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{prefix}/norm1"), dim)?,
            ffn: Ffn::new(store, &format!("{prefix}/ffn"), dim)?,
            norm2: LayerNorm::new(store, &format!("{prefix}/norm2"), dim)?,
        })
    }

    /// `x: [m, dim] -> [m, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.apply(g, store, x, x)?;
        let r1 = g.add(x, a)?;
        let x = self.norm1.apply(g, store, r1)?;
        let f = self.ffn.apply(g, store, x)?;
        let r2 = g.add(x, f)?;
        self.norm2.apply(g, store, r2)
    }
}

/// Post-norm cross-attention block with a feed-forward tail:
/// `x = Norm(x + CrossAttn(x, kv)); x = Norm(x + Ffn(x))`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    attn: CrossAttention,
    norm1: LayerNorm,
    ffn: Ffn,
    norm2: LayerNorm,
}

impl CrossBlock {
    /// Registers all sublayers under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossBlock {
            attn: CrossAttention::new(store, &format!("{prefix}/attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{prefix}/norm1"), dim)?,
            ffn: Ffn::new(store, &format!("{prefix}/ffn"), dim)?,
            norm2: LayerNorm::new(store, &format!("{prefix}/norm2"), dim)?,
        })
    }

    /// `x: [m, dim]`, `kv: [n, dim] -> [m, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Var) -> Result<Var> {
        let a = self.attn.apply(g, store, x, kv)?;
        let r1 = g.add(x, a)?;
        let x = self.norm1.apply(g, store, r1)?;
        let f = self.ffn.apply(g, store, x)?;
        let r2 = g.add(x, f)?;
        self.norm2.apply(g, store, r2)
    }
}

/// Post-norm transformer decoder block (self-attention, cross-attention
/// to an external memory, feed-forward). Used by the plain
/// feature-fusion baselines.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    self_attn: CrossAttention,
    norm1: LayerNorm,
    cross_attn: CrossAttention,
    norm2: LayerNorm,
    ffn: Ffn,
    norm3: LayerNorm,
}

impl DecoderBlock {
    /// Registers all sublayers under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: CrossAttention::new(store, &format!("{prefix}/self"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{prefix}/norm1"), dim)?,
            cross_attn: CrossAttention::new(store, &format!("{prefix}/cross"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{prefix}/norm2"), dim)?,
            ffn: Ffn::new(store, &format!("{prefix}/ffn"), dim)?,
            norm3: LayerNorm::new(store, &format!("{prefix}/norm3"), dim)?,
        })
    }

    /// `x: [m, dim]`, `memory: [n, dim] -> [m, dim]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.apply(g, store, x, x)?;
        let r1 = g.add(x, a)?;
        let x = self.norm1.apply(g, store, r1)?;
        let c = self.cross_attn.apply(g, store, x, memory)?;
        let r2 = g.add(x, c)?;
        let x = self.norm2.apply(g, store, r2)?;
        let f = self.ffn.apply(g, store, x)?;
        let r3 = g.add(x, f)?;
        self.norm3.apply(g, store, r3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 6;

    fn input_param(store: &mut ParamStore, name: &str, rows: usize, seed: u64) {
        store.register(name, &[rows, D], Init::Zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.get_mut(name).unwrap().value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }

    #[test]
    fn linear_shapes_and_determinism() {
        let mut s1 = ParamStore::new(5);
        let mut s2 = ParamStore::new(5);
        let l1 = Linear::new(&mut s1, "lin", 4, 7).unwrap();
        let l2 = Linear::new(&mut s2, "lin", 4, 7).unwrap();
        assert_eq!(s1.get("lin/w").unwrap().value, s2.get("lin/w").unwrap().value);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let y = l1.apply(&mut g, &s1, x).unwrap();
        assert_eq!(g.shape(y), &[3, 7]);
        let _ = l2;
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let mut s = ParamStore::new(0);
        assert!(CrossAttention::new(&mut s, "a", 6, 4).is_err());
        assert!(CrossAttention::new(&mut s, "b", 6, 0).is_err());
        assert!(CrossAttention::new(&mut s, "c", 6, 3).is_ok());
    }

    #[test]
    fn grad_self_block() {
        for seed in 0..5 {
            let mut store = ParamStore::new(seed);
            let block = SelfBlock::new(&mut store, "blk", D, 1).unwrap();
            input_param(&mut store, "x", 5, seed);
            let report = check_gradients(&store, 1e-5, |g, s| {
                let x = g.param(s, "x")?;
                let y = block.apply(g, s, x)?;
                g.sum(y);
                // Mix entries asymmetrically so errors cannot cancel.
                let w = g.constant(Tensor::new(
                    vec![5, D],
                    (0..5 * D).map(|i| 0.2 + 0.07 * i as f64).collect(),
                )?);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.passes(1e-6), "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn grad_cross_block_multihead() {
        for seed in 0..5 {
            let mut store = ParamStore::new(seed);
            let block = CrossBlock::new(&mut store, "blk", D, 2).unwrap();
            input_param(&mut store, "x", 4, seed);
            input_param(&mut store, "kv", 7, seed + 100);
            let report = check_gradients(&store, 1e-5, |g, s| {
                let x = g.param(s, "x")?;
                let kv = g.param(s, "kv")?;
                let y = block.apply(g, s, x, kv)?;
                let w = g.constant(Tensor::new(
                    vec![4, D],
                    (0..4 * D).map(|i| 0.2 + 0.05 * i as f64).collect(),
                )?);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(report.passes(1e-6), "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn grad_decoder_block() {
        let mut store = ParamStore::new(9);
        let block = DecoderBlock::new(&mut store, "dec", D, 1).unwrap();
        input_param(&mut store, "x", 4, 1);
        input_param(&mut store, "mem", 3, 2);
        let report = check_gradients(&store, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            let mem = g.param(s, "mem")?;
            let y = block.apply(g, s, x, mem)?;
            let w = g.constant(Tensor::new(
                vec![4, D],
                (0..4 * D).map(|i| 0.3 + 0.04 * i as f64).collect(),
            )?);
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{:?}", report.worst);
    }

    #[test]
    fn multihead_differs_from_single_head_but_keeps_shape() {
        let mut s1 = ParamStore::new(4);
        let a1 = CrossAttention::new(&mut s1, "a", D, 1).unwrap();
        let mut s2 = ParamStore::new(4);
        let a2 = CrossAttention::new(&mut s2, "a", D, 3).unwrap();
        let x = Tensor::new(vec![4, D], (0..4 * D).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let run = |attn: &CrossAttention, store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.input(&x).unwrap();
            let y = attn.apply(&mut g, store, xv, xv).unwrap();
            g.value(y).to_vec()
        };
        let y1 = run(&a1, &s1);
        let y2 = run(&a2, &s2);
        assert_eq!(y1.len(), 4 * D);
        assert_eq!(y2.len(), 4 * D);
        // Same parameters (same seed and names), different head split:
        // the mixing pattern must actually change.
        assert_ne!(y1, y2);
    }
}
