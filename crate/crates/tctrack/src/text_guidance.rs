//! Language-guidance path: target-word scoring, memory-conditioned
//! context calibration, and injection of text features into the search
//! features.
//!
//! The path takes encoded word features `f_L` (`[N_l, D]`) and produces
//! a guidance sequence `f_LC` that the search features attend over:
//!
//! 1. **Target-word head** — a small MLP scores each word with the
//!    probability `p_T` that it names the target (vs. context such as
//!    relations or distractor descriptions). `f_LT = p_T * f_L` weights
//!    the words by that probability.
//! 2. **Context calibration** — context words ("left of", "near the
//!    blue box") describe a *relation to the current target state*, so
//!    their features are refreshed against the visual memory bank: the
//!    weighted words and the memory states form an aggregate sequence
//!    that self-attends, and the word features then cross-attend into
//!    it. Two such blocks run back to back; neither uses a
//!    feed-forward layer.
//! 3. **Assembly** — depending on [`TextualMode`], the guidance
//!    sequence is the raw and calibrated words stacked (`dual_text`),
//!    the calibrated words alone, or the weighted and raw words stacked
//!    (awareness only).
//! 4. **Injection** — search features gate themselves with attention
//!    over the guidance sequence: `f_XL = Norm(f_X + f_X * CA(f_X,
//!    f_LC))` (multiplicative by default; an additive variant drops the
//!    elementwise product).

use crate::config::{AblationConfig, TextualMode};
use crate::error::{Error, Result};
use crate::nn::{CrossAttention, LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Var};

/// MLP that scores each word's probability of naming the target.
#[derive(Clone, Debug)]
pub struct TargetWordHead {
    reduce: Linear,
    score: Linear,
}

impl TargetWordHead {
    /// Registers parameters under `prefix` for `dim`-wide word features.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let hidden = (dim / 2).max(1);
        Ok(TargetWordHead {
            reduce: Linear::new(store, &format!("{prefix}/reduce"), dim, hidden)?,
            score: Linear::new(store, &format!("{prefix}/score"), hidden, 1)?,
        })
    }

    /// Word probabilities `p_T` in `(0, 1)`, shape `[N_l, 1]`.
    pub fn probabilities(&self, g: &mut Graph, store: &ParamStore, f_l: Var) -> Result<Var> {
        let h = self.reduce.apply(g, store, f_l)?;
        let h = g.gelu(h);
        let s = self.score.apply(g, store, h)?;
        Ok(g.sigmoid(s))
    }

    /// Probability-weighted words `f_LT = p_T * f_L`, plus `p_T` itself.
    pub fn weight(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_l: Var,
    ) -> Result<(Var, Var)> {
        let p_t = self.probabilities(g, store, f_l)?;
        let f_lt = g.scale_rows(f_l, p_t)?;
        Ok((f_lt, p_t))
    }
}

/// One calibration block: the aggregate sequence self-attends, then the
/// word features cross-attend into it. Residuals and normalization on
/// both updates; no feed-forward layer.
#[derive(Clone, Debug)]
struct CalibrationBlock {
    agg_attn: CrossAttention,
    agg_norm: LayerNorm,
    word_attn: CrossAttention,
    word_norm: LayerNorm,
}

/// Refreshes word features against the visual memory bank.
#[derive(Clone, Debug)]
pub struct ContextCalibration {
    blocks: Vec<CalibrationBlock>,
    dim: usize,
}

impl ContextCalibration {
    /// Stacking depth of the calibration blocks.
    pub const DEPTH: usize = 2;

    /// Registers parameters under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(Self::DEPTH);
        for i in 0..Self::DEPTH {
            blocks.push(CalibrationBlock {
                agg_attn: CrossAttention::new(store, &format!("{prefix}/block{i}/agg"), dim, heads)?,
                agg_norm: LayerNorm::new(store, &format!("{prefix}/block{i}/agg_norm"), dim)?,
                word_attn: CrossAttention::new(
                    store,
                    &format!("{prefix}/block{i}/word"),
                    dim,
                    heads,
                )?,
                word_norm: LayerNorm::new(store, &format!("{prefix}/block{i}/word_norm"), dim)?,
            });
        }
        Ok(ContextCalibration { blocks, dim })
    }

    /// Calibrated word features `f_L'`, shape `[N_l, D]`.
    ///
    /// `f_l` are the raw word features, `f_lt` the probability-weighted
    /// ones, and `memory` the stacked memory states `[L_m, D]`. The
    /// aggregate `[f_lt; memory]` is built once and carried through all
    /// blocks.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_l: Var,
        f_lt: Var,
        memory: Var,
    ) -> Result<Var> {
        let mshape = g.shape(memory).to_vec();
        if mshape.len() != 2 || mshape[1] != self.dim || mshape[0] == 0 {
            return Err(Error::Contract(format!(
                "context calibration needs memory shaped [L_m>=1, {}], got {:?}",
                self.dim, mshape
            )));
        }
        let mut aggregate = g.concat_rows(&[f_lt, memory])?;
        let mut words = f_l;
        for block in &self.blocks {
            let self_attn = block.agg_attn.apply(g, store, aggregate, aggregate)?;
            let summed = g.add(aggregate, self_attn)?;
            aggregate = block.agg_norm.apply(g, store, summed)?;
            let cross = block.word_attn.apply(g, store, words, aggregate)?;
            let summed = g.add(words, cross)?;
            words = block.word_norm.apply(g, store, summed)?;
        }
        Ok(words)
    }
}

/// Stacks the guidance sequence `f_LC` for the active [`TextualMode`].
///
/// * `Calibrated` with `dual_text`: `[f_L; f_L']` — raw words first so
///   downstream attention sees both the initial and refreshed form.
/// * `Calibrated` without `dual_text`: `f_L'` alone.
/// * `Awareness`: `[f_LT; f_L]` — no calibration ran, so the weighted
///   and raw words stand in for the two forms (`calibrated` must be
///   `None`).
/// * `Off`: rejected; the caller should use the fusion fallback instead.
pub fn guidance_features(
    g: &mut Graph,
    ablation: &AblationConfig,
    f_l: Var,
    f_lt: Var,
    calibrated: Option<Var>,
) -> Result<Var> {
    match (ablation.textual, calibrated) {
        (TextualMode::Calibrated, Some(cal)) => {
            if ablation.dual_text {
                g.concat_rows(&[f_l, cal])
            } else {
                Ok(cal)
            }
        }
        (TextualMode::Calibrated, None) => Err(Error::Contract(
            "calibrated mode needs calibrated word features".into(),
        )),
        (TextualMode::Awareness, None) => g.concat_rows(&[f_lt, f_l]),
        (TextualMode::Awareness, Some(_)) => Err(Error::Contract(
            "awareness mode must not receive calibrated features".into(),
        )),
        (TextualMode::Off, _) => Err(Error::Contract(
            "guidance features are undefined with the language path off".into(),
        )),
    }
}

/// Injects the guidance sequence into the search features.
#[derive(Clone, Debug)]
pub struct TextInjection {
    attn: CrossAttention,
    norm: LayerNorm,
}

impl TextInjection {
    /// Registers parameters under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TextInjection {
            attn: CrossAttention::new(store, &format!("{prefix}/attn"), dim, heads)?,
            norm: LayerNorm::new(store, &format!("{prefix}/norm"), dim)?,
        })
    }

    /// `f_XL = Norm(f_X + f_X * CA(f_X, f_LC))`, or with the product
    /// replaced by the attention output alone when `multiplicative` is
    /// false.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_x: Var,
        f_lc: Var,
        multiplicative: bool,
    ) -> Result<Var> {
        let attended = self.attn.apply(g, store, f_x, f_lc)?;
        let update = if multiplicative { g.mul(f_x, attended)? } else { attended };
        let summed = g.add(f_x, update)?;
        self.norm.apply(g, store, summed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 6;
    const WORDS: usize = 4;
    const MEM: usize = 2;
    const SEARCH: usize = 5;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn build_store(heads: usize) -> (ParamStore, TargetWordHead, ContextCalibration, TextInjection)
    {
        let mut store = ParamStore::new(7);
        let head = TargetWordHead::new(&mut store, "tg/word", DIM).unwrap();
        let cal = ContextCalibration::new(&mut store, "tg/cal", DIM, heads).unwrap();
        let inj = TextInjection::new(&mut store, "tg/inj", DIM, heads).unwrap();
        (store, head, cal, inj)
    }

    #[test]
    fn probabilities_are_in_unit_interval() {
        let (store, head, _, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let p_t = head.probabilities(&mut g, &store, f_l).unwrap();
        assert_eq!(g.shape(p_t), &[WORDS, 1]);
        for &v in g.value(p_t) {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn weighting_scales_each_row_by_its_probability() {
        let (store, head, _, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let raw = random_tensor(&mut rng, WORDS, DIM);
        let f_l = g.input(&raw).unwrap();
        let (f_lt, p_t) = head.weight(&mut g, &store, f_l).unwrap();
        for i in 0..WORDS {
            let p = g.value(p_t)[i];
            for j in 0..DIM {
                let got = g.value(f_lt)[i * DIM + j];
                assert!((got - p * raw.data()[i * DIM + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calibration_keeps_word_count_and_width() {
        let (store, head, cal, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let memory = g.input(&random_tensor(&mut rng, MEM, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let out = cal.apply(&mut g, &store, f_l, f_lt, memory).unwrap();
        assert_eq!(g.shape(out), &[WORDS, DIM]);
        assert!(g.tensor(out).is_finite());
    }

    #[test]
    fn calibration_rejects_malformed_memory() {
        let (store, head, cal, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let narrow = g.input(&random_tensor(&mut rng, MEM, DIM - 1)).unwrap();
        assert!(cal.apply(&mut g, &store, f_l, f_lt, narrow).is_err());
        let empty = g.constant(Tensor::zeros(&[0, DIM]));
        assert!(cal.apply(&mut g, &store, f_l, f_lt, empty).is_err());
    }

    #[test]
    fn single_memory_state_is_accepted() {
        let (store, head, cal, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let memory = g.input(&random_tensor(&mut rng, 1, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let out = cal.apply(&mut g, &store, f_l, f_lt, memory).unwrap();
        assert_eq!(g.shape(out), &[WORDS, DIM]);
    }

    #[test]
    fn dual_guidance_stacks_raw_then_calibrated() {
        let (store, head, cal, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut g = Graph::new();
        let raw = random_tensor(&mut rng, WORDS, DIM);
        let f_l = g.input(&raw).unwrap();
        let memory = g.input(&random_tensor(&mut rng, MEM, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let cal_out = cal.apply(&mut g, &store, f_l, f_lt, memory).unwrap();
        let ab = AblationConfig::default();
        let f_lc = guidance_features(&mut g, &ab, f_l, f_lt, Some(cal_out)).unwrap();
        assert_eq!(g.shape(f_lc), &[2 * WORDS, DIM]);
        // Raw words occupy the first rows bit-for-bit.
        assert_eq!(&g.value(f_lc)[..WORDS * DIM], raw.data());
        assert_eq!(&g.value(f_lc)[WORDS * DIM..], g.value(cal_out));
    }

    #[test]
    fn single_text_guidance_is_calibrated_words_alone() {
        let (store, head, cal, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let memory = g.input(&random_tensor(&mut rng, MEM, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let cal_out = cal.apply(&mut g, &store, f_l, f_lt, memory).unwrap();
        let ab = AblationConfig { dual_text: false, ..AblationConfig::default() };
        let f_lc = guidance_features(&mut g, &ab, f_l, f_lt, Some(cal_out)).unwrap();
        assert_eq!(g.value(f_lc), g.value(cal_out));
    }

    #[test]
    fn awareness_guidance_stacks_weighted_then_raw() {
        let (store, head, _, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut g = Graph::new();
        let raw = random_tensor(&mut rng, WORDS, DIM);
        let f_l = g.input(&raw).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let ab = AblationConfig { textual: TextualMode::Awareness, ..AblationConfig::default() };
        let f_lc = guidance_features(&mut g, &ab, f_l, f_lt, None).unwrap();
        assert_eq!(g.shape(f_lc), &[2 * WORDS, DIM]);
        assert_eq!(&g.value(f_lc)[..WORDS * DIM], g.value(f_lt));
        assert_eq!(&g.value(f_lc)[WORDS * DIM..], raw.data());
        // Passing calibrated features in awareness mode is a bug upstream.
        assert!(guidance_features(&mut g, &ab, f_l, f_lt, Some(f_l)).is_err());
    }

    #[test]
    fn guidance_is_rejected_when_language_path_off() {
        let (store, head, _, _) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut g = Graph::new();
        let f_l = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let (f_lt, _) = head.weight(&mut g, &store, f_l).unwrap();
        let ab = AblationConfig { textual: TextualMode::Off, ..AblationConfig::default() };
        assert!(guidance_features(&mut g, &ab, f_l, f_lt, None).is_err());
    }

    #[test]
    fn multiplicative_and_additive_injection_differ() {
        let (store, _, _, inj) = build_store(1);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut g = Graph::new();
        let f_x = g.input(&random_tensor(&mut rng, SEARCH, DIM)).unwrap();
        let f_lc = g.input(&random_tensor(&mut rng, WORDS, DIM)).unwrap();
        let mul = inj.apply(&mut g, &store, f_x, f_lc, true).unwrap();
        let add = inj.apply(&mut g, &store, f_x, f_lc, false).unwrap();
        assert_eq!(g.shape(mul), &[SEARCH, DIM]);
        assert_eq!(g.shape(add), &[SEARCH, DIM]);
        let diff: f64 = g
            .value(mul)
            .iter()
            .zip(g.value(add))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    /// Finite-difference check through the full language path: word
    /// head, calibration, assembly, and injection, ending in a scalar.
    fn full_path_gradients(heads: usize) {
        let (store, head, cal, inj) = build_store(heads);
        let mut rng = ChaCha8Rng::seed_from_u64(21 + heads as u64);
        let f_l_t = random_tensor(&mut rng, WORDS, DIM);
        let mem_t = random_tensor(&mut rng, MEM, DIM);
        let f_x_t = random_tensor(&mut rng, SEARCH, DIM);
        let ab = AblationConfig::default();
        let report = check_gradients(&store, 1e-5, |g, store| {
            let f_l = g.input(&f_l_t)?;
            let memory = g.input(&mem_t)?;
            let f_x = g.input(&f_x_t)?;
            let (f_lt, p_t) = head.weight(g, store, f_l)?;
            let cal_out = cal.apply(g, store, f_l, f_lt, memory)?;
            let f_lc = guidance_features(g, &ab, f_l, f_lt, Some(cal_out))?;
            let f_xl = inj.apply(g, store, f_x, f_lc, true)?;
            // Fold the word probabilities in too so the score branch
            // gets gradient signal of its own.
            let spread = g.mean(f_xl);
            let p_sum = g.mean(p_t);
            g.add(spread, p_sum)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "heads={heads}: worst {:?}",
            report.worst
        );
    }

    #[test]
    fn full_path_matches_finite_differences() {
        full_path_gradients(1);
    }

    #[test]
    fn full_path_matches_finite_differences_two_heads() {
        full_path_gradients(2);
    }
}
