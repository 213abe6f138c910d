//! Multi-scale style predictor: semantic embeddings in, three levels of
//! predicted style out.
//!
//! The hierarchical context encoder (HCE) runs two recurrence+attention
//! stages: a bidirectional GRU over each sentence's subword embeddings
//! (its output for the current sentence is the subword context C_w) with
//! attention pooling each sentence into a vector, then a bidirectional GRU
//! over the 2L+1 sentence vectors (C_s) with attention pooling into the
//! global context C_g. The three style heads are each one linear layer and
//! a tanh, generated highest level first, each lower head conditioned on
//! the level above by input concatenation.

pub mod embedder;

pub use embedder::{
    EmbedRequest, EmbedResponse, HashEmbedder, SemanticEmbedder, SemanticEmbeddingSeq,
    SubprocessEmbedder, EMBED_PROTOCOL_VERSION,
};

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::nn::{AttentionPool, BiGru, Linear, ParamGraph, ParamStore};
use crate::num::Scalar;
use crate::rng::component_rng;
use crate::tensor::Tensor;

/// Predictor hyperparameters. Context widths are 2 * gru_hidden.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    /// Semantic embedding width the embedder produces.
    pub d_sem: usize,
    /// Width fed to the inter-subword recurrence (one projection upstream).
    pub hce_input: usize,
    /// GRU width per direction.
    pub gru_hidden: usize,
    /// Attention query/key width.
    pub attn_qk: usize,
    pub d_style: usize,
}

impl PredictorConfig {
    pub fn default_preset() -> Self {
        PredictorConfig {
            d_sem: 32,
            hce_input: 128,
            gru_hidden: 64,
            attn_qk: 64,
            d_style: 128,
        }
    }

    pub fn tiny_preset() -> Self {
        PredictorConfig {
            d_sem: 32,
            hce_input: 16,
            gru_hidden: 8,
            attn_qk: 8,
            d_style: 16,
        }
    }

    pub fn context_width(&self) -> usize {
        2 * self.gru_hidden
    }
}

/// HCE outputs: per-subword context of the current sentence, per-sentence
/// context, and the single global context vector.
pub struct ContextEmbeddings<T: Scalar> {
    /// [n_subwords_current, context_width]
    pub c_w: Tensor<T>,
    /// [2L+1, context_width]
    pub c_s: Tensor<T>,
    /// [1, context_width]
    pub c_g: Tensor<T>,
}

/// Attention weights of both HCE levels, for introspection.
pub struct HceAttention<T: Scalar> {
    /// Per sentence: weights over its subwords.
    pub sentence_weights: Vec<Array1<T>>,
    /// Weights over the 2L+1 sentence vectors.
    pub global_weights: Array1<T>,
}

/// Predicted style embeddings at the three levels.
pub struct PredictedStyles<T: Scalar> {
    pub global: Tensor<T>,
    pub sentence: Tensor<T>,
    pub subword: Vec<Tensor<T>>,
}

/// The HCE plus the three conditioned style heads.
pub struct MultiScalePredictor {
    pub config: PredictorConfig,
    proj: Linear,
    subword_gru: BiGru,
    sentence_pool: AttentionPool,
    sentence_gru: BiGru,
    global_pool: AttentionPool,
    head_global: Linear,
    head_sentence: Linear,
    head_subword: Linear,
}

impl MultiScalePredictor {
    pub fn new(config: &PredictorConfig) -> Self {
        let cw = config.context_width();
        MultiScalePredictor {
            config: config.clone(),
            proj: Linear::new("predictor.proj", config.d_sem, config.hce_input, true),
            subword_gru: BiGru::new("predictor.subword_gru", config.hce_input, config.gru_hidden),
            sentence_pool: AttentionPool::new("predictor.sentence_attn", cw, config.attn_qk, cw),
            sentence_gru: BiGru::new("predictor.sentence_gru", cw, config.gru_hidden),
            global_pool: AttentionPool::new("predictor.global_attn", cw, config.attn_qk, cw),
            head_global: Linear::new("predictor.head.global", cw, config.d_style, true),
            head_sentence: Linear::new(
                "predictor.head.sentence",
                cw + config.d_style,
                config.d_style,
                true,
            ),
            head_subword: Linear::new(
                "predictor.head.subword",
                cw + config.d_style,
                config.d_style,
                true,
            ),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = component_rng(seed, "predictor");
        self.proj.init(store, &mut rng);
        self.subword_gru.init(store, &mut rng);
        self.sentence_pool.init(store, &mut rng);
        self.sentence_gru.init(store, &mut rng);
        self.global_pool.init(store, &mut rng);
        self.head_global.init(store, &mut rng);
        self.head_sentence.init(store, &mut rng);
        self.head_subword.init(store, &mut rng);
    }

    /// Hierarchical context encoding of a semantic window. The current
    /// sentence is the center one.
    pub fn hce_forward<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        sem: &SemanticEmbeddingSeq<T>,
    ) -> Result<(ContextEmbeddings<T>, HceAttention<T>)> {
        sem.validate()?;
        if sem.sentences[0].ncols() != self.config.d_sem {
            return Err(Error::contract(format!(
                "semantic width {} does not match configured d_sem {}",
                sem.sentences[0].ncols(),
                self.config.d_sem
            )));
        }
        let radius = (sem.n_sentences() - 1) / 2;

        let mut sentence_vectors = Vec::with_capacity(sem.n_sentences());
        let mut sentence_weights = Vec::with_capacity(sem.n_sentences());
        let mut c_w = None;
        for (i, sent) in sem.sentences.iter().enumerate() {
            let x = Tensor::constant(sent.clone().into_dyn());
            let projected = self.proj.forward(g, &x);
            let states = self.subword_gru.forward(g, &projected);
            let (vec_i, w_i) = self.sentence_pool.forward(g, &states);
            if i == radius {
                c_w = Some(states);
            }
            sentence_vectors.push(vec_i);
            sentence_weights.push(w_i);
        }
        let sent_seq = Tensor::concat_rows(&sentence_vectors);
        let c_s = self.sentence_gru.forward(g, &sent_seq);
        let (c_g, global_weights) = self.global_pool.forward(g, &c_s);

        Ok((
            ContextEmbeddings {
                c_w: c_w.expect("window has a center sentence"),
                c_s,
                c_g,
            },
            HceAttention {
                sentence_weights,
                global_weights,
            },
        ))
    }

    /// The three style heads, highest level first; each lower level takes
    /// the level above as conditional input.
    pub fn predict_styles<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        ctx: &ContextEmbeddings<T>,
    ) -> PredictedStyles<T> {
        let s_g = self.head_global.forward(g, &ctx.c_g).tanh();

        let radius = (ctx.c_s.shape()[0] - 1) / 2;
        let c_s_current = ctx.c_s.slice_rows(radius, radius + 1);
        let s_s = self
            .head_sentence
            .forward(g, &Tensor::concat_cols(&[c_s_current, s_g.clone()]))
            .tanh();

        let n_subwords = ctx.c_w.shape()[0];
        let mut s_w = Vec::with_capacity(n_subwords);
        for i in 0..n_subwords {
            let c_w_i = ctx.c_w.slice_rows(i, i + 1);
            let s = self
                .head_subword
                .forward(g, &Tensor::concat_cols(&[c_w_i, s_s.clone()]))
                .tanh();
            s_w.push(s);
        }

        PredictedStyles {
            global: s_g,
            sentence: s_s,
            subword: s_w,
        }
    }

    /// Convenience: embed, encode and predict for one window of texts.
    pub fn predict_window<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        embedder: &dyn SemanticEmbedder<T>,
        window_texts: &[Vec<String>],
    ) -> Result<(PredictedStyles<T>, ContextEmbeddings<T>, HceAttention<T>)> {
        let sem = embedder.embed_window(window_texts)?;
        let (ctx, attn) = self.hce_forward(g, &sem)?;
        let pred = self.predict_styles(g, &ctx);
        Ok((pred, ctx, attn))
    }
}

/// Per-subword multi-scale embedding from predicted styles:
/// out[i] = S_g + S_s + S_w[i], the extractor-side summation applied to
/// the predictor's outputs.
pub fn combine_predicted<T: Scalar>(pred: &PredictedStyles<T>) -> Vec<Tensor<T>> {
    pred.subword
        .iter()
        .map(|sw| pred.global.add(&pred.sentence).add(sw))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn fixture() -> (MultiScalePredictor, ParamStore<f64>, HashEmbedder) {
        let cfg = PredictorConfig {
            d_sem: 6,
            hce_input: 8,
            gru_hidden: 4,
            attn_qk: 4,
            d_style: 8,
        };
        let p = MultiScalePredictor::new(&cfg);
        let mut store = ParamStore::<f64>::new();
        p.init(&mut store, 31);
        (p, store, HashEmbedder::new(17, 6))
    }

    fn window5() -> Vec<Vec<String>> {
        vec![
            toks(&["a"]),
            toks(&["ba", "ki"]),
            toks(&["mo", "ru", "sa"]),
            toks(&["de"]),
            toks(&["vi", "ne"]),
        ]
    }

    #[test]
    fn hce_weights_are_probability_vectors() {
        let (p, store, e) = fixture();
        let g = ParamGraph::new(&store);
        let sem = e.embed_window(&window5()).unwrap();
        let (_, attn) = p.hce_forward(&g, &sem).unwrap();
        for w in &attn.sentence_weights {
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
        let sum: f64 = attn.global_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(attn.global_weights.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identical_sentence_vectors_pool_to_their_projection() {
        // Drive the global pool directly: identical rows in, the pooled
        // output must equal the shared row's value projection.
        let (p, store, _) = fixture();
        let g = ParamGraph::new(&store);
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut m = Array2::<f64>::zeros((4, 8));
        for r in 0..4 {
            for c in 0..8 {
                m[(r, c)] = row[c];
            }
        }
        let x = Tensor::constant(m.into_dyn());
        let (pooled, w) = p.global_pool.forward(&g, &x);
        for &wi in w.iter() {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        let wv = store
            .get("predictor.global_attn.wv")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expected = Array2::from_shape_vec((1, 8), row).unwrap().dot(&wv);
        let got = pooled.value2();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_window_l0_single_subword() {
        let (p, store, e) = fixture();
        let g = ParamGraph::new(&store);
        let sem = e.embed_window(&[toks(&["ba"])]).unwrap();
        let (ctx, attn) = p.hce_forward(&g, &sem).unwrap();
        assert_eq!(ctx.c_w.shape(), &[1, 8]);
        assert_eq!(ctx.c_s.shape(), &[1, 8]);
        // One sentence: the global attention has a single weight of 1 and
        // C_g is the lone sentence vector's value projection.
        assert_eq!(attn.global_weights.len(), 1);
        assert!((attn.global_weights[0] - 1.0).abs() < 1e-12);
        let wv = store
            .get("predictor.global_attn.wv")
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expected = ctx.c_s.value2().dot(&wv);
        let got = ctx.c_g.value2();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn predictions_live_in_tanh_range_and_match_arity() {
        let (p, store, e) = fixture();
        let g = ParamGraph::new(&store);
        let (pred, ctx, _) = p.predict_window(&g, &e, &window5()).unwrap();
        assert_eq!(ctx.c_w.shape()[0], 3);
        assert_eq!(pred.subword.len(), 3);
        for t in [&pred.global, &pred.sentence]
            .into_iter()
            .chain(pred.subword.iter())
        {
            assert_eq!(t.shape(), &[1, 8]);
            assert!(t.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zero_head_parameters_give_zero_styles() {
        let (p, mut store, e) = fixture();
        for name in [
            "predictor.head.global.weight",
            "predictor.head.global.bias",
            "predictor.head.sentence.weight",
            "predictor.head.sentence.bias",
            "predictor.head.subword.weight",
            "predictor.head.subword.bias",
        ] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let g = ParamGraph::new(&store);
        let (pred, _, _) = p.predict_window(&g, &e, &window5()).unwrap();
        for t in [&pred.global, &pred.sentence]
            .into_iter()
            .chain(pred.subword.iter())
        {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conditioning_chain_carries_gradient_to_the_global_head() {
        // Distillation-style loss on all three levels: the global head must
        // receive gradient through S_s and S_w as well; verified against
        // central differences.
        let (p, store, e) = fixture();
        let window = window5();

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let g = ParamGraph::new(store);
            let (pred, _, _) = p.predict_window(&g, &e, &window).unwrap();
            let zeros = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 8]));
            // Exclude the direct S_g term: only the conditioned path remains.
            let mut loss = pred.sentence.mse_loss(&zeros);
            for sw in &pred.subword {
                loss = loss.add(&sw.mse_loss(&zeros));
            }
            loss.item()
        };

        let g = ParamGraph::new(&store);
        let (pred, _, _) = p.predict_window(&g, &e, &window).unwrap();
        let zeros = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 8]));
        let mut loss = pred.sentence.mse_loss(&zeros);
        for sw in &pred.subword {
            loss = loss.add(&sw.mse_loss(&zeros));
        }
        loss.backward();
        let grads = g.grads();
        let gw = &grads["predictor.head.global.weight"];
        let max_abs = gw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_abs > 0.0, "conditioning chain carried no gradient");

        // Central-difference check on one coordinate.
        let idx = gw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        let analytic = gw.iter().copied().nth(idx).unwrap();
        let eps = 1e-6;
        let mut plus = store.clone();
        let mut minus = store.clone();
        *plus
            .get_mut("predictor.head.global.weight")
            .unwrap()
            .iter_mut()
            .nth(idx)
            .unwrap() += eps;
        *minus
            .get_mut("predictor.head.global.weight")
            .unwrap()
            .iter_mut()
            .nth(idx)
            .unwrap() -= eps;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        let denom = fd.abs().max(analytic.abs()).max(1e-10);
        assert!(
            ((fd - analytic) / denom).abs() < 1e-4,
            "fd={fd} analytic={analytic}"
        );
    }

    #[test]
    fn conditioning_order_is_top_down() {
        let (p, store, e) = fixture();
        let window = window5();
        let g = ParamGraph::new(&store);
        let (pred_base, _, _) = p.predict_window(&g, &e, &window).unwrap();

        // Perturbing the global head moves S_s (and S_w).
        let mut up = store.clone();
        up.get_mut("predictor.head.global.weight")
            .unwrap()
            .mapv_inplace(|v| v + 0.05);
        let g2 = ParamGraph::new(&up);
        let (pred_up, _, _) = p.predict_window(&g2, &e, &window).unwrap();
        assert_ne!(pred_base.sentence.value2(), pred_up.sentence.value2());

        // Perturbing lower-level heads leaves S_g untouched.
        let mut low = store.clone();
        low.get_mut("predictor.head.sentence.weight")
            .unwrap()
            .mapv_inplace(|v| v + 0.5);
        low.get_mut("predictor.head.subword.weight")
            .unwrap()
            .mapv_inplace(|v| v - 0.5);
        let g3 = ParamGraph::new(&low);
        let (pred_low, _, _) = p.predict_window(&g3, &e, &window).unwrap();
        assert_eq!(pred_base.global.value2(), pred_low.global.value2());
        assert_ne!(pred_base.sentence.value2(), pred_low.sentence.value2());
    }

    #[test]
    fn combine_predicted_is_additive_identity_on_zero_lower_levels() {
        let d = 5;
        let g = Tensor::constant(
            Array2::from_shape_vec((1, d), vec![0.1, -0.2, 0.3, 0.4, -0.5])
                .unwrap()
                .into_dyn(),
        );
        let zero = Tensor::constant(Array2::<f64>::zeros((1, d)).into_dyn());
        let pred = PredictedStyles {
            global: g.clone(),
            sentence: zero.clone(),
            subword: vec![zero.clone(), zero.clone(), zero.clone(), zero],
        };
        let combined = combine_predicted(&pred);
        assert_eq!(combined.len(), 4);
        for c in &combined {
            assert_eq!(c.value2(), g.value2());
        }
    }

    #[test]
    fn combine_matches_extractor_summation_bit_exact() {
        // Identical level vectors through both modules' summation paths.
        let mk = |v: f64| Tensor::constant(Array2::from_elem((1, 4), v).into_dyn());
        let (sg, ss) = (mk(0.37), mk(-1.25));
        let sws = vec![mk(2.13), mk(-0.004)];
        let pred = PredictedStyles {
            global: sg.clone(),
            sentence: ss.clone(),
            subword: sws.clone(),
        };
        let via_predictor = combine_predicted(&pred);
        for (i, sw) in sws.iter().enumerate() {
            // The extractor combines as s_g.add(s_s).add(s_w).
            let via_extractor = sg.add(&ss).add(sw);
            let a = via_predictor[i].value2();
            let b = via_extractor.value2();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.bits(), y.bits());
            }
        }
    }

    #[test]
    fn determinism_with_fallback_embedder() {
        let (p, store, e) = fixture();
        let window = window5();
        let g1 = ParamGraph::new(&store);
        let (a, _, _) = p.predict_window(&g1, &e, &window).unwrap();
        let g2 = ParamGraph::new(&store);
        let (b, _, _) = p.predict_window(&g2, &e, &window).unwrap();
        assert_eq!(a.global.value2(), b.global.value2());
        assert_eq!(a.sentence.value2(), b.sentence.value2());
        for (x, y) in a.subword.iter().zip(&b.subword) {
            assert_eq!(x.value2(), y.value2());
        }
    }

    #[test]
    fn padded_edge_windows_keep_subword_arity() {
        let (p, store, e) = fixture();
        // Current sentence with 2 subwords; all neighbors empty (padding).
        let window = vec![vec![], vec![], toks(&["ba", "ki"]), vec![], vec![]];
        let g = ParamGraph::new(&store);
        let (pred, ctx, _) = p.predict_window(&g, &e, &window).unwrap();
        assert_eq!(ctx.c_w.shape()[0], 2);
        assert_eq!(pred.subword.len(), 2);
    }
}
