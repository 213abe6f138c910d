//! Parameter storage and the layer primitives shared by the extractor,
//! predictor and acoustic model.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! ("extractor.global.refenc.conv0.weight", ...). Each forward pass opens a
//! [`ParamGraph`] over the store: the first access to a name materializes a
//! graph leaf (tracked, or constant when the name is frozen), later accesses
//! reuse it so gradients from every use accumulate on one node.

use std::cell::RefCell;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::num::Scalar;
use crate::tensor::Tensor;

/// Named parameter arrays with deterministic iteration order.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Raw IEEE bits of every parameter under `prefixes` (all when empty),
    /// in store order. Used for byte-exact freeze checks.
    pub fn bits_snapshot(&self, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
        self.entries
            .iter()
            .filter(|(name, _)| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, arr)| {
                (
                    name.clone(),
                    arr.iter().map(|v| v.bits()).collect::<Vec<u64>>(),
                )
            })
            .collect()
    }

    /// Mean L2 norm per top-level group; part of the NaN diagnostics dump.
    pub fn norm_report(&self) -> Vec<(String, f64)> {
        let mut acc: IndexMap<String, (f64, usize)> = IndexMap::new();
        for (name, arr) in &self.entries {
            let group = name.split('.').next().unwrap_or(name).to_string();
            let e = acc.entry(group).or_insert((0.0, 0));
            e.0 += arr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            e.1 += arr.len();
        }
        acc.into_iter()
            .map(|(g, (sq, n))| (g, (sq / n.max(1) as f64).sqrt()))
            .collect()
    }
}

/// Frozen parameter groups, matched by name prefix.
#[derive(Clone, Debug, Default)]
pub struct FreezeMask {
    frozen_prefixes: Vec<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    /// Freezes every parameter (pure inference).
    pub fn all() -> Self {
        FreezeMask {
            frozen_prefixes: vec![String::new()],
        }
    }

    pub fn freeze(prefixes: &[&str]) -> Self {
        FreezeMask {
            frozen_prefixes: prefixes.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen_prefixes
    }
}

/// Per-forward-pass view of a [`ParamStore`]: hands out graph leaves and
/// collects gradients after `backward()`.
pub struct ParamGraph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    freeze: FreezeMask,
    leaves: RefCell<IndexMap<String, Tensor<T>>>,
}

impl<'a, T: Scalar> ParamGraph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self::with_freeze(store, FreezeMask::none())
    }

    pub fn with_freeze(store: &'a ParamStore<T>, freeze: FreezeMask) -> Self {
        ParamGraph {
            store,
            freeze,
            leaves: RefCell::new(IndexMap::new()),
        }
    }

    /// Leaf tensor for a parameter; frozen names come back as constants.
    pub fn param(&self, name: &str) -> Tensor<T> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let arr = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .clone();
        let t = if self.freeze.is_frozen(name) {
            Tensor::constant(arr)
        } else {
            Tensor::leaf(arr)
        };
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Gradients of every tracked leaf touched by the pass, in first-touch
    /// order. Leaves the loss never reached report zeros.
    pub fn grads(&self) -> IndexMap<String, ArrayD<T>> {
        let leaves = self.leaves.borrow();
        let mut out = IndexMap::new();
        for (name, t) in leaves.iter() {
            if !t.requires_grad() {
                continue;
            }
            let g = t
                .grad()
                .unwrap_or_else(|| ArrayD::zeros(t.data().raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

// ---- initializers ----

/// Xavier-uniform init; draws in f64 so f32/f64 stores agree.
pub fn xavier<T: Scalar>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> ArrayD<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(rng.gen_range(-limit..limit)))
}

/// Unit-variance normal init (style-token banks).
pub fn unit_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<T> {
    use rand_distr::{Distribution, StandardNormal};
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

// ---- layers ----

/// Fully connected layer; optional bias.
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.weight", self.name),
            xavier(rng, self.in_dim, self.out_dim, &[self.in_dim, self.out_dim]),
        );
        if self.bias {
            store.insert(format!("{}.bias", self.name), zeros::<T>(&[self.out_dim]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let w = g.param(&format!("{}.weight", self.name));
        let y = x.matmul(&w);
        if self.bias {
            y.add_bias(&g.param(&format!("{}.bias", self.name)))
        } else {
            y
        }
    }
}

/// GRU over a [len, in_dim] sequence; returns all hidden states [len, hidden].
/// Gates follow the usual reset/update/candidate form with the reset gate
/// applied to the recurrent term of the candidate.
pub struct Gru {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize) -> Self {
        Gru {
            name: name.into(),
            in_dim,
            hidden,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for gate in ["r", "z", "n"] {
            store.insert(
                format!("{}.wx_{gate}", self.name),
                xavier(rng, self.in_dim, self.hidden, &[self.in_dim, self.hidden]),
            );
            store.insert(
                format!("{}.wh_{gate}", self.name),
                xavier(rng, self.hidden, self.hidden, &[self.hidden, self.hidden]),
            );
            store.insert(
                format!("{}.b_{gate}", self.name),
                zeros::<T>(&[self.hidden]),
            );
        }
    }

    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let wx_r = g.param(&format!("{}.wx_r", self.name));
        let wx_z = g.param(&format!("{}.wx_z", self.name));
        let wx_n = g.param(&format!("{}.wx_n", self.name));
        let wh_r = g.param(&format!("{}.wh_r", self.name));
        let wh_z = g.param(&format!("{}.wh_z", self.name));
        let wh_n = g.param(&format!("{}.wh_n", self.name));
        let b_r = g.param(&format!("{}.b_r", self.name));
        let b_z = g.param(&format!("{}.b_z", self.name));
        let b_n = g.param(&format!("{}.b_n", self.name));

        let len = x.shape()[0];
        let mut h = Tensor::constant(zeros::<T>(&[1, self.hidden]));
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let xt = x.slice_rows(t, t + 1);
            let r = xt
                .matmul(&wx_r)
                .add(&h.matmul(&wh_r))
                .add_bias(&b_r)
                .sigmoid();
            let z = xt
                .matmul(&wx_z)
                .add(&h.matmul(&wh_z))
                .add_bias(&b_z)
                .sigmoid();
            let n = xt
                .matmul(&wx_n)
                .add(&r.mul(&h.matmul(&wh_n)))
                .add_bias(&b_n)
                .tanh();
            // h' = (1 - z) * n + z * h
            let one_minus_z = z.scale(-T::one()).add_scalar(T::one());
            h = one_minus_z.mul(&n).add(&z.mul(&h));
            states.push(h.clone());
        }
        Tensor::concat_rows(&states)
    }

    /// Final hidden state as a [1, hidden] tensor.
    pub fn final_state<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let states = self.forward(g, x);
        let len = states.shape()[0];
        states.slice_rows(len - 1, len)
    }
}

/// Bidirectional GRU; output width is 2 * hidden.
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(name: &str, in_dim: usize, hidden: usize) -> Self {
        BiGru {
            fwd: Gru::new(format!("{name}.fwd"), in_dim, hidden),
            bwd: Gru::new(format!("{name}.bwd"), in_dim, hidden),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.fwd.init(store, rng);
        self.bwd.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let f = self.fwd.forward(g, x);
        let b = self.bwd.forward(g, &x.reverse_rows()).reverse_rows();
        Tensor::concat_cols(&[f, b])
    }
}

/// Scaled dot-product attention pooling a [len, in_dim] sequence into a
/// single [1, out_dim] vector with a learned query.
pub struct AttentionPool {
    pub name: String,
    pub in_dim: usize,
    pub qk_dim: usize,
    pub out_dim: usize,
}

impl AttentionPool {
    pub fn new(name: impl Into<String>, in_dim: usize, qk_dim: usize, out_dim: usize) -> Self {
        AttentionPool {
            name: name.into(),
            in_dim,
            qk_dim,
            out_dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.query", self.name),
            xavier(rng, 1, self.qk_dim, &[1, self.qk_dim]),
        );
        store.insert(
            format!("{}.wk", self.name),
            xavier(rng, self.in_dim, self.qk_dim, &[self.in_dim, self.qk_dim]),
        );
        store.insert(
            format!("{}.wv", self.name),
            xavier(rng, self.in_dim, self.out_dim, &[self.in_dim, self.out_dim]),
        );
    }

    /// Returns the pooled vector and the attention weights over inputs.
    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, seq: &Tensor<T>) -> (Tensor<T>, Array1<T>) {
        let q = g.param(&format!("{}.query", self.name));
        let wk = g.param(&format!("{}.wk", self.name));
        let wv = g.param(&format!("{}.wv", self.name));
        let keys = seq.matmul(&wk); // [len, qk]
        let scale = T::one() / T::from_usize(self.qk_dim).unwrap().sqrt();
        let scores = q.matmul(&keys.transpose()).scale(scale); // [1, len]
        let weights = scores.softmax_rows();
        let values = seq.matmul(&wv); // [len, out]
        let pooled = weights.matmul(&values); // [1, out]
        let w = weights.value2().row(0).to_owned();
        (pooled, w)
    }
}

/// Multi-head attention of a single query vector over a learned token bank
/// (style-token layer). Heads concatenate to d_model; no output projection,
/// so the result stays in the span of the per-head value projections.
pub struct TokenAttention {
    pub name: String,
    pub d_model: usize,
    pub n_tokens: usize,
    pub n_heads: usize,
}

impl TokenAttention {
    pub fn new(name: impl Into<String>, d_model: usize, n_tokens: usize, n_heads: usize) -> Self {
        assert!(
            d_model.is_multiple_of(n_heads),
            "d_model must divide into heads"
        );
        TokenAttention {
            name: name.into(),
            d_model,
            n_tokens,
            n_heads,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.tokens", self.name),
            unit_normal(rng, &[self.n_tokens, self.d_model]),
        );
        let dh = self.d_head();
        for h in 0..self.n_heads {
            for (tag, cols) in [("wq", dh), ("wk", dh), ("wv", dh)] {
                store.insert(
                    format!("{}.head{h}.{tag}", self.name),
                    xavier(rng, self.d_model, cols, &[self.d_model, cols]),
                );
            }
        }
    }

    /// Attends `query` ([1, d_model]) over the bank. Returns the style
    /// vector and per-head attention weights.
    pub fn forward<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        query: &Tensor<T>,
    ) -> (Tensor<T>, Vec<Array1<T>>) {
        let tokens = g.param(&format!("{}.tokens", self.name));
        let scale = T::one() / T::from_usize(self.d_head()).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut all_weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let wq = g.param(&format!("{}.head{h}.wq", self.name));
            let wk = g.param(&format!("{}.head{h}.wk", self.name));
            let wv = g.param(&format!("{}.head{h}.wv", self.name));
            let q = query.matmul(&wq); // [1, dh]
            let k = tokens.matmul(&wk); // [K, dh]
            let v = tokens.matmul(&wv); // [K, dh]
            let weights = q.matmul(&k.transpose()).scale(scale).softmax_rows(); // [1, K]
            heads.push(weights.matmul(&v)); // [1, dh]
            all_weights.push(weights.value2().row(0).to_owned());
        }
        (Tensor::concat_cols(&heads), all_weights)
    }
}

/// Multi-head self-attention over a [len, d_model] sequence with output
/// projection.
pub struct SelfAttention {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn new(name: impl Into<String>, d_model: usize, n_heads: usize) -> Self {
        assert!(
            d_model.is_multiple_of(n_heads),
            "d_model must divide into heads"
        );
        SelfAttention {
            name: name.into(),
            d_model,
            n_heads,
        }
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let dh = self.d_head();
        for h in 0..self.n_heads {
            for tag in ["wq", "wk", "wv"] {
                store.insert(
                    format!("{}.head{h}.{tag}", self.name),
                    xavier(rng, self.d_model, dh, &[self.d_model, dh]),
                );
            }
        }
        store.insert(
            format!("{}.wo", self.name),
            xavier(
                rng,
                self.d_model,
                self.d_model,
                &[self.d_model, self.d_model],
            ),
        );
        store.insert(format!("{}.bo", self.name), zeros::<T>(&[self.d_model]));
    }

    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let scale = T::one() / T::from_usize(self.d_head()).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let wq = g.param(&format!("{}.head{h}.wq", self.name));
            let wk = g.param(&format!("{}.head{h}.wk", self.name));
            let wv = g.param(&format!("{}.head{h}.wv", self.name));
            let q = x.matmul(&wq);
            let k = x.matmul(&wk);
            let v = x.matmul(&wv);
            let a = q.matmul(&k.transpose()).scale(scale).softmax_rows();
            heads.push(a.matmul(&v));
        }
        let cat = Tensor::concat_cols(&heads);
        let wo = g.param(&format!("{}.wo", self.name));
        let bo = g.param(&format!("{}.bo", self.name));
        cat.matmul(&wo).add_bias(&bo)
    }
}

/// Feed-forward transformer block: self-attention and a two-layer 1-D conv
/// feed-forward, each with residual connection and layer norm.
pub struct FftBlock {
    pub name: String,
    pub attn: SelfAttention,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub kernel: usize,
}

impl FftBlock {
    pub fn new(
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
        kernel: usize,
    ) -> Self {
        FftBlock {
            name: name.to_string(),
            attn: SelfAttention::new(format!("{name}.attn"), d_model, n_heads),
            d_model,
            ffn_hidden,
            kernel,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.attn.init(store, rng);
        store.insert(
            format!("{}.ln1.gamma", self.name),
            ones::<T>(&[self.d_model]),
        );
        store.insert(
            format!("{}.ln1.beta", self.name),
            zeros::<T>(&[self.d_model]),
        );
        store.insert(
            format!("{}.conv1.weight", self.name),
            xavier(
                rng,
                self.d_model * self.kernel,
                self.ffn_hidden,
                &[self.d_model * self.kernel, self.ffn_hidden],
            ),
        );
        store.insert(
            format!("{}.conv1.bias", self.name),
            zeros::<T>(&[self.ffn_hidden]),
        );
        store.insert(
            format!("{}.conv2.weight", self.name),
            xavier(
                rng,
                self.ffn_hidden * self.kernel,
                self.d_model,
                &[self.ffn_hidden * self.kernel, self.d_model],
            ),
        );
        store.insert(
            format!("{}.conv2.bias", self.name),
            zeros::<T>(&[self.d_model]),
        );
        store.insert(
            format!("{}.ln2.gamma", self.name),
            ones::<T>(&[self.d_model]),
        );
        store.insert(
            format!("{}.ln2.beta", self.name),
            zeros::<T>(&[self.d_model]),
        );
    }

    pub fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::of(1e-6);
        let a = self.attn.forward(g, x);
        let x = x.add(&a).layer_norm(
            &g.param(&format!("{}.ln1.gamma", self.name)),
            &g.param(&format!("{}.ln1.beta", self.name)),
            eps,
        );
        let f = x
            .conv1d(
                &g.param(&format!("{}.conv1.weight", self.name)),
                &g.param(&format!("{}.conv1.bias", self.name)),
                self.kernel,
            )
            .relu()
            .conv1d(
                &g.param(&format!("{}.conv2.weight", self.name)),
                &g.param(&format!("{}.conv2.bias", self.name)),
                self.kernel,
            );
        x.add(&f).layer_norm(
            &g.param(&format!("{}.ln2.gamma", self.name)),
            &g.param(&format!("{}.ln2.beta", self.name)),
            eps,
        )
    }
}

/// Sinusoidal positional encoding rows for a sequence of `len` positions.
pub fn positional_encoding<T: Scalar>(len: usize, d_model: usize) -> Array2<T> {
    let mut pe = Array2::<T>::zeros((len, d_model));
    for pos in 0..len {
        for i in 0..d_model {
            let angle = pos as f64 / 10000f64.powf(2.0 * ((i / 2) as f64) / d_model as f64);
            pe[(pos, i)] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use ndarray::IxDyn;

    fn store_with<T: Scalar>(f: impl Fn(&mut ParamStore<T>, &mut ChaCha8Rng)) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut rng = component_rng(42, "nn-test");
        f(&mut store, &mut rng);
        store
    }

    #[test]
    fn param_graph_reuses_leaves_and_reports_grads() {
        let lin = Linear::new("lin", 3, 2, true);
        let store = store_with::<f64>(|s, r| lin.init(s, r));
        let g = ParamGraph::new(&store);
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[4, 3]), 0.5));
        let y1 = lin.forward(&g, &x);
        let y2 = lin.forward(&g, &x);
        let loss = y1.add(&y2).mse_loss(&ArrayD::zeros(IxDyn(&[4, 2])));
        loss.backward();
        let grads = g.grads();
        assert!(grads.contains_key("lin.weight"));
        assert!(grads.contains_key("lin.bias"));
        // Two uses of the same leaf must accumulate into one gradient.
        let gw = &grads["lin.weight"];
        assert!(gw.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let lin = Linear::new("lin", 3, 2, true);
        let store = store_with::<f64>(|s, r| lin.init(s, r));
        let g = ParamGraph::with_freeze(&store, FreezeMask::freeze(&["lin"]));
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 3]), 1.0));
        let y = lin.forward(&g, &x);
        assert!(!y.requires_grad());
        assert!(g.grads().is_empty());
    }

    #[test]
    fn gru_output_shape_and_determinism() {
        let gru = Gru::new("g", 4, 6);
        let store = store_with::<f32>(|s, r| gru.init(s, r));
        let g = ParamGraph::new(&store);
        let x = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[5, 4]), |ix| {
            (ix[0] as f32 * 0.3 - ix[1] as f32 * 0.1).sin()
        }));
        let h1 = gru.forward(&g, &x).value2();
        let g2 = ParamGraph::new(&store);
        let h2 = gru.forward(&g2, &x).value2();
        assert_eq!(h1.dim(), (5, 6));
        assert_eq!(h1, h2);
    }

    #[test]
    fn bigru_concatenates_directions() {
        let bi = BiGru::new("b", 3, 4);
        let store = store_with::<f32>(|s, r| bi.init(s, r));
        let g = ParamGraph::new(&store);
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[7, 3]), 0.2));
        let y = bi.forward(&g, &x);
        assert_eq!(y.shape(), &[7, 8]);
    }

    #[test]
    fn attention_pool_weights_are_probabilities() {
        let pool = AttentionPool::new("p", 5, 3, 4);
        let store = store_with::<f64>(|s, r| pool.init(s, r));
        let g = ParamGraph::new(&store);
        let x = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[6, 5]), |ix| {
            (ix[0] as f64 - ix[1] as f64) * 0.17
        }));
        let (pooled, w) = pool.forward(&g, &x);
        assert_eq!(pooled.shape(), &[1, 4]);
        assert!((w.sum() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn token_attention_single_token_ignores_query() {
        let attn = TokenAttention::new("t", 6, 1, 2);
        let store = store_with::<f64>(|s, r| attn.init(s, r));
        let g = ParamGraph::new(&store);
        let q1 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 6]), 0.9));
        let q2 = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 6]), -2.3));
        let (y1, _) = attn.forward(&g, &q1);
        let g2 = ParamGraph::new(&store);
        let (y2, _) = attn.forward(&g2, &q2);
        assert_eq!(y1.value2(), y2.value2());
    }

    #[test]
    fn positional_encoding_distinguishes_positions() {
        let pe = positional_encoding::<f32>(10, 8);
        assert_ne!(pe.row(0), pe.row(5));
        // First column is sin(pos), bounded.
        assert!(pe.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn fft_block_keeps_shape() {
        let block = FftBlock::new("f", 8, 2, 16, 3);
        let store = store_with::<f32>(|s, r| block.init(s, r));
        let g = ParamGraph::new(&store);
        let x = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[5, 8]), |ix| {
            (ix[0] * 8 + ix[1]) as f32 * 0.01
        }));
        let y = block.forward(&g, &x);
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
