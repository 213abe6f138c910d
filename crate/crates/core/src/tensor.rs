//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! Graphs are built per forward pass: leaves wrap parameter arrays, every
//! op records a backward closure, and `backward()` on a scalar loss walks
//! the graph once in reverse topological order. Ops whose inputs carry no
//! gradient short-circuit to plain array math, so frozen submodules cost
//! only their forward pass.
//!
//! Accumulation order is fixed by graph structure, which keeps training
//! bit-reproducible across runs on the same platform.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::num::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    data: ArrayD<T>,
    grad: RefCell<Option<ArrayD<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A value in the autodiff graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Tensor<T> {
    fn new_node(data: ArrayD<T>, parents: Vec<Tensor<T>>, backward: Option<BackwardFn<T>>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            parents,
            backward,
            requires_grad,
        }))
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        }))
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        }))
    }

    pub fn from_array2(a: Array2<T>, requires_grad: bool) -> Self {
        let d = a.into_dyn();
        if requires_grad {
            Self::leaf(d)
        } else {
            Self::constant(d)
        }
    }

    pub fn from_array1(a: Array1<T>, requires_grad: bool) -> Self {
        let d = a.into_dyn();
        if requires_grad {
            Self::leaf(d)
        } else {
            Self::constant(d)
        }
    }

    pub fn data(&self) -> &ArrayD<T> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// 2-D view of the value; panics if the tensor is not rank 2.
    pub fn value2(&self) -> Array2<T> {
        self.0
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tensor is not rank 2")
            .to_owned()
    }

    pub fn value1(&self) -> Array1<T> {
        self.0
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .expect("tensor is not rank 1")
            .to_owned()
    }

    /// Scalar value of a 0-dim tensor.
    pub fn item(&self) -> T {
        assert!(self.0.data.ndim() == 0, "item() on non-scalar tensor");
        self.0.data.iter().copied().next().unwrap()
    }

    /// Gradient accumulated by the most recent `backward()` call.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate_grad(&self, g: ArrayD<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc = &*acc + &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable node with `requires_grad`; leaves keep theirs for reading.
    pub fn backward(&self) {
        assert!(self.0.data.ndim() == 0, "backward() needs a scalar loss");
        if !self.0.requires_grad {
            return;
        }

        // Iterative post-order DFS; child-before-parent order reversed below.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.0.requires_grad && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(ArrayD::from_elem(IxDyn(&[]), T::one()));

        for node in order.iter().rev() {
            let Some(back) = node.0.backward.as_ref() else {
                continue;
            };
            let g = node
                .0
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| ArrayD::zeros(node.0.data.raw_dim()));
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if parent.0.requires_grad {
                        parent.accumulate_grad(c);
                    }
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = &self.0.data + &other.0.data;
        Tensor::new_node(
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = &self.0.data - &other.0.data;
        Tensor::new_node(
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.mapv(|v| -v))])),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let a = self.0.data.clone();
        let b = other.0.data.clone();
        let data = &self.0.data * &other.0.data;
        Tensor::new_node(
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| vec![Some(g * &b), Some(g * &a)])),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.0.data.mapv(|v| v * c);
        Tensor::new_node(
            data,
            vec![self.clone()],
            Some(Box::new(move |g| vec![Some(g.mapv(|v| v * c))])),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.0.data.mapv(|v| v + c);
        Tensor::new_node(
            data,
            vec![self.clone()],
            Some(Box::new(|g| vec![Some(g.clone())])),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let mask = self
            .0
            .data
            .mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
        let data = &self.0.data * &mask;
        Tensor::new_node(
            data,
            vec![self.clone()],
            Some(Box::new(move |g| vec![Some(g * &mask)])),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let y = self.0.data.mapv(|v| v.tanh());
        let yc = y.clone();
        Tensor::new_node(
            y,
            vec![self.clone()],
            Some(Box::new(move |g| {
                vec![Some(g * &yc.mapv(|v| T::one() - v * v))]
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let y = self.0.data.mapv(|v| T::one() / (T::one() + (-v).exp()));
        let yc = y.clone();
        Tensor::new_node(
            y,
            vec![self.clone()],
            Some(Box::new(move |g| {
                vec![Some(g * &yc.mapv(|v| v * (T::one() - v)))]
            })),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let y = self.0.data.mapv(|v| v.exp());
        let yc = y.clone();
        Tensor::new_node(
            y,
            vec![self.clone()],
            Some(Box::new(move |g| vec![Some(g * &yc)])),
        )
    }

    // ---- matrix ops (rank 2) ----

    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let a = self.value2();
        let b = other.value2();
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims mismatch");
        let y = a.dot(&b).into_dyn();
        Tensor::new_node(
            y,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b.t()).into_dyn();
                let db = a.t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            })),
        )
    }

    pub fn transpose(&self) -> Tensor<T> {
        let y = self.value2().reversed_axes().into_dyn();
        Tensor::new_node(
            y,
            vec![self.clone()],
            Some(Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(g2.t().to_owned().into_dyn())]
            })),
        )
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Tensor<T> {
        let x = self.value2();
        let b = bias.value1();
        assert_eq!(x.ncols(), b.len(), "add_bias: width mismatch");
        let y = (&x + &b).into_dyn();
        Tensor::new_node(
            y,
            vec![self.clone(), bias.clone()],
            Some(Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })),
        )
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let x = self.value2();
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros(yc.raw_dim());
                for i in 0..yc.nrows() {
                    let yr = yc.row(i);
                    let gr = g2.row(i);
                    let dot = yr
                        .iter()
                        .zip(gr.iter())
                        .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    let mut dr = dx.row_mut(i);
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<Array2<T>> = parts.iter().map(|p| p.value2()).collect();
        let ncols = views[0].ncols();
        let nrows: usize = views.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::<T>::zeros((nrows, ncols));
        let mut r = 0;
        for v in &views {
            out.slice_mut(ndarray::s![r..r + v.nrows(), ..]).assign(v);
            r += v.nrows();
        }
        let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        Tensor::new_node(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(row_counts.len());
                let mut r = 0;
                for &n in &row_counts {
                    out.push(Some(
                        g2.slice(ndarray::s![r..r + n, ..]).to_owned().into_dyn(),
                    ));
                    r += n;
                }
                out
            })),
        )
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<Array2<T>> = parts.iter().map(|p| p.value2()).collect();
        let nrows = views[0].nrows();
        let ncols: usize = views.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::<T>::zeros((nrows, ncols));
        let mut c = 0;
        for v in &views {
            out.slice_mut(ndarray::s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        let col_counts: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        Tensor::new_node(
            out.into_dyn(),
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(col_counts.len());
                let mut c = 0;
                for &n in &col_counts {
                    out.push(Some(
                        g2.slice(ndarray::s![.., c..c + n]).to_owned().into_dyn(),
                    ));
                    c += n;
                }
                out
            })),
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<T> {
        let x = self.value2();
        assert!(start <= end && end <= x.nrows(), "slice_rows out of range");
        let full = x.raw_dim();
        let y = x.slice(ndarray::s![start..end, ..]).to_owned();
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros(full);
                dx.slice_mut(ndarray::s![start..end, ..]).assign(&g2);
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Row lookup: out[i] = table[ids[i]]. Gradient scatters back into the
    /// table (embedding-style).
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor<T> {
        let table = self.value2();
        for &i in ids {
            assert!(i < table.nrows(), "gather_rows: id out of range");
        }
        let mut out = Array2::<T>::zeros((ids.len(), table.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&table.row(i));
        }
        let ids = ids.to_vec();
        let table_dim = table.raw_dim();
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<T>::zeros(table_dim);
                for (r, &i) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &g2.row(r);
                }
                vec![Some(dt.into_dyn())]
            })),
        )
    }

    /// Length regulation: row i is repeated counts[i] times. Zero counts
    /// drop the row. Gradient sums the expanded rows per source row.
    pub fn repeat_rows(&self, counts: &[usize]) -> Tensor<T> {
        let x = self.value2();
        assert_eq!(x.nrows(), counts.len(), "repeat_rows: arity mismatch");
        let total: usize = counts.iter().sum();
        let mut out = Array2::<T>::zeros((total, x.ncols()));
        let mut r = 0;
        for (i, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.row_mut(r).assign(&x.row(i));
                r += 1;
            }
        }
        let counts = counts.to_vec();
        let src_dim = x.raw_dim();
        Tensor::new_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros(src_dim);
                let mut r = 0;
                for (i, &n) in counts.iter().enumerate() {
                    for _ in 0..n {
                        let mut row = dx.row_mut(i);
                        row += &g2.row(r);
                        r += 1;
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    // ---- reductions & losses ----

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.0.data.sum();
        let dim = self.0.data.raw_dim();
        Tensor::new_node(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(dim.clone(), gv))]
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize(self.0.data.len()).unwrap();
        self.sum_all().scale(T::one() / n)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, target: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(self.shape(), target.shape(), "l1_loss: shape mismatch");
        let diff = &self.0.data - target;
        let n = T::from_usize(diff.len()).unwrap();
        let loss = diff.mapv(|v| v.abs()).sum() / n;
        let sign = diff.mapv(|v| {
            if v > T::zero() {
                T::one() / n
            } else if v < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        });
        Tensor::new_node(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(sign.mapv(|v| v * gv))]
            })),
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&self, target: &ArrayD<T>) -> Tensor<T> {
        assert_eq!(self.shape(), target.shape(), "mse_loss: shape mismatch");
        let diff = &self.0.data - target;
        let n = T::from_usize(diff.len()).unwrap();
        let loss = diff.mapv(|v| v * v).sum() / n;
        let two = T::of(2.0);
        Tensor::new_node(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(diff.mapv(|v| two * v / n * gv))]
            })),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Tensor<T> {
        let x = self.value2();
        let gm = gamma.value1();
        let bt = beta.value1();
        let d = x.ncols();
        assert_eq!(gm.len(), d);
        assert_eq!(bt.len(), d);
        let nd = T::from_usize(d).unwrap();

        let mut xhat = Array2::<T>::zeros(x.raw_dim());
        let mut inv_std = Array1::<T>::zeros(x.nrows());
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mu = row.sum() / nd;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / nd;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            let mut xr = xhat.row_mut(i);
            for j in 0..d {
                xr[j] = (row[j] - mu) * istd;
            }
        }
        let mut y = Array2::<T>::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..d {
                y[(i, j)] = xhat[(i, j)] * gm[j] + bt[j];
            }
        }
        let xhat_c = xhat.clone();
        let gm_c = gm.clone();
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let rows = xhat_c.nrows();
                let mut dgamma = Array1::<T>::zeros(d);
                let mut dbeta = Array1::<T>::zeros(d);
                let mut dx = Array2::<T>::zeros((rows, d));
                for i in 0..rows {
                    let gr = g2.row(i);
                    let xr = xhat_c.row(i);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_x = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gm_c[j];
                        mean_dxhat += dxh;
                        mean_dxhat_x += dxh * xr[j];
                    }
                    mean_dxhat = mean_dxhat / nd;
                    mean_dxhat_x = mean_dxhat_x / nd;
                    let istd = inv_std[i];
                    let mut dxr = dx.row_mut(i);
                    for j in 0..d {
                        let dxh = gr[j] * gm_c[j];
                        dxr[j] = istd * (dxh - mean_dxhat - xr[j] * mean_dxhat_x);
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            })),
        )
    }

    // ---- convolutions ----

    /// 1-D convolution over a [len, in_ch] sequence with odd kernel `k` and
    /// same padding. Weight layout: [in_ch * k, out_ch].
    pub fn conv1d(&self, weight: &Tensor<T>, bias: &Tensor<T>, k: usize) -> Tensor<T> {
        assert!(k % 2 == 1, "conv1d: kernel must be odd");
        let x = self.value2();
        let w = weight.value2();
        let (len, in_ch) = x.dim();
        assert_eq!(w.nrows(), in_ch * k, "conv1d: weight rows mismatch");
        let half = k / 2;

        let mut col = Array2::<T>::zeros((len, in_ch * k));
        for l in 0..len {
            for j in 0..k {
                let src = l as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < len {
                    for c in 0..in_ch {
                        col[(l, c * k + j)] = x[(src as usize, c)];
                    }
                }
            }
        }
        let y = col.dot(&w);
        let y = (&y + &bias.value1()).into_dyn();

        let col_c = col.clone();
        let w_c = w.clone();
        let x_dim = x.raw_dim();
        Tensor::new_node(
            y,
            vec![self.clone(), weight.clone(), bias.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dw = col_c.t().dot(&g2).into_dyn();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                let dcol = g2.dot(&w_c.t());
                let mut dx = Array2::<T>::zeros(x_dim);
                let len = dx.nrows();
                let in_ch = dx.ncols();
                for l in 0..len {
                    for j in 0..k {
                        let src = l as isize + j as isize - half as isize;
                        if src >= 0 && (src as usize) < len {
                            for c in 0..in_ch {
                                dx[(src as usize, c)] += dcol[(l, c * k + j)];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw), Some(db)]
            })),
        )
    }

    /// 2-D convolution over a [in_ch, h, w] input. Weight layout:
    /// [in_ch * kh * kw, out_ch]; output [out_ch, h', w'].
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<T> {
        let x = self
            .0
            .data
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv2d input must be rank 3");
        let (in_ch, h, w) = x.dim();
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let wmat = weight.value2();
        assert_eq!(
            wmat.nrows(),
            in_ch * kh * kw,
            "conv2d: weight rows mismatch"
        );
        let out_ch = wmat.ncols();
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;

        let mut col = Array2::<T>::zeros((ho * wo, in_ch * kh * kw));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
                for c in 0..in_ch {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = (oy * sh + dy) as isize - ph as isize;
                            let sx = (ox * sw + dx) as isize - pw as isize;
                            if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                                col[(row, c * kh * kw + dy * kw + dx)] =
                                    x[(c, sy as usize, sx as usize)];
                            }
                        }
                    }
                }
            }
        }
        let y2 = col.dot(&wmat);
        let y2 = &y2 + &bias.value1();
        let mut y = ndarray::Array3::<T>::zeros((out_ch, ho, wo));
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..out_ch {
                    y[(c, oy, ox)] = y2[(oy * wo + ox, c)];
                }
            }
        }

        let col_c = col.clone();
        let wmat_c = wmat.clone();
        let in_dim = (in_ch, h, w);
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut g2 = Array2::<T>::zeros((ho * wo, out_ch));
                for oy in 0..ho {
                    for ox in 0..wo {
                        for c in 0..out_ch {
                            g2[(oy * wo + ox, c)] = g3[(c, oy, ox)];
                        }
                    }
                }
                let dw = col_c.t().dot(&g2).into_dyn();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                let dcol = g2.dot(&wmat_c.t());
                let (in_ch, h, w) = in_dim;
                let mut dx = ndarray::Array3::<T>::zeros((in_ch, h, w));
                for oy in 0..ho {
                    for ox in 0..wo {
                        let row = oy * wo + ox;
                        for c in 0..in_ch {
                            for dy in 0..kh {
                                for dxx in 0..kw {
                                    let sy = (oy * sh + dy) as isize - ph as isize;
                                    let sx = (ox * sw + dxx) as isize - pw as isize;
                                    if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w
                                    {
                                        dx[(c, sy as usize, sx as usize)] +=
                                            dcol[(row, c * kh * kw + dy * kw + dxx)];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw), Some(db)]
            })),
        )
    }

    /// Rearranges conv output [c, h, w] into a per-row sequence [h, c*w],
    /// the layout a recurrent summarizer consumes.
    pub fn merge_channels(&self) -> Tensor<T> {
        let x = self
            .0
            .data
            .view()
            .into_dimensionality::<Ix3>()
            .expect("merge_channels input must be rank 3");
        let (c, h, w) = x.dim();
        let mut y = Array2::<T>::zeros((h, c * w));
        for hi in 0..h {
            for ci in 0..c {
                for wi in 0..w {
                    y[(hi, ci * w + wi)] = x[(ci, hi, wi)];
                }
            }
        }
        let dim = (c, h, w);
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (c, h, w) = dim;
                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                for hi in 0..h {
                    for ci in 0..c {
                        for wi in 0..w {
                            dx[(ci, hi, wi)] = g2[(hi, ci * w + wi)];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Reverses row order (used by the backward direction of bidirectional
    /// recurrences).
    pub fn reverse_rows(&self) -> Tensor<T> {
        let x = self.value2();
        let y = x
            .slice(ndarray::s![..;-1, ..])
            .as_standard_layout()
            .to_owned();
        Tensor::new_node(
            y.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(
                    g2.slice(ndarray::s![..;-1, ..])
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn(),
                )]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(leaf) for an arbitrary graph.
    fn check_grad<F>(leaf_data: ArrayD<f64>, build: F, tol: f64)
    where
        F: Fn(&Tensor<f64>) -> Tensor<f64>,
    {
        let leaf = Tensor::leaf(leaf_data.clone());
        let loss = build(&leaf);
        loss.backward();
        let analytic = leaf.grad().expect("no grad reached the leaf");

        let eps = 1e-5;
        for idx in 0..leaf_data.len() {
            let mut plus = leaf_data.clone();
            let mut minus = leaf_data.clone();
            {
                let p = plus.as_slice_mut().unwrap();
                p[idx] += eps;
            }
            {
                let m = minus.as_slice_mut().unwrap();
                m[idx] -= eps;
            }
            let lp = build(&Tensor::leaf(plus)).item();
            let lm = build(&Tensor::leaf(minus)).item();
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic.iter().copied().nth(idx).unwrap();
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                ((fd - an) / denom).abs() < tol,
                "grad mismatch at {idx}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr2(&mut rng, 3, 4).into_dyn();
        check_grad(
            x,
            |t| {
                let a = t.tanh().mul(&t.sigmoid()).add(&t.scale(0.5));
                a.relu().sum_all()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_bias_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr2(&mut rng, 3, 5).into_dyn();
        let w = Tensor::constant(rand_arr2(&mut rng, 5, 4).into_dyn());
        let b = Tensor::constant(arr1(&[0.1, -0.2, 0.3, 0.0]).into_dyn());
        check_grad(
            x,
            |t| {
                t.matmul(&w)
                    .add_bias(&b)
                    .softmax_rows()
                    .mse_loss(&Array2::from_elem((3, 4), 0.25).into_dyn())
            },
            1e-5,
        );
    }

    #[test]
    fn grad_concat_slice_repeat_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr2(&mut rng, 4, 3).into_dyn();
        check_grad(
            x,
            |t| {
                let top = t.slice_rows(0, 2);
                let cat = Tensor::concat_rows(&[top, t.clone()]);
                let rep = cat.repeat_rows(&[2, 0, 1, 3, 1, 2]);
                let gat = t.gather_rows(&[3, 3, 0]);
                Tensor::concat_rows(&[rep, gat]).exp().mean_all()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr2(&mut rng, 3, 6).into_dyn();
        let gamma = Tensor::constant(Array1::from_elem(6, 1.3).into_dyn());
        let beta = Tensor::constant(Array1::from_elem(6, -0.1).into_dyn());
        check_grad(
            x,
            |t| {
                t.layer_norm(&gamma, &beta, 1e-6)
                    .tanh()
                    .mse_loss(&Array2::from_elem((3, 6), 0.1).into_dyn())
            },
            1e-4,
        );
    }

    #[test]
    fn grad_layer_norm_affine_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::constant(rand_arr2(&mut rng, 3, 5).into_dyn());
        let g0 = arr1(&[1.0, 0.8, 1.2, 0.9, 1.1]).into_dyn();
        check_grad(
            g0,
            |gamma| {
                let beta = Tensor::constant(Array1::from_elem(5, 0.05).into_dyn());
                x.layer_norm(gamma, &beta, 1e-6).sum_all()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr2(&mut rng, 6, 2).into_dyn();
        let w = Tensor::constant(rand_arr2(&mut rng, 2 * 3, 4).into_dyn());
        let b = Tensor::constant(arr1(&[0.0, 0.1, -0.1, 0.2]).into_dyn());
        check_grad(x, |t| t.conv1d(&w, &b, 3).tanh().sum_all(), 1e-5);
    }

    #[test]
    fn grad_conv1d_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::constant(rand_arr2(&mut rng, 5, 2).into_dyn());
        let w0 = rand_arr2(&mut rng, 2 * 3, 3).into_dyn();
        check_grad(
            w0,
            |w| {
                let b = Tensor::constant(Array1::zeros(3).into_dyn());
                x.conv1d(w, &b, 3)
                    .mse_loss(&Array2::zeros((5, 3)).into_dyn())
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 5, 4]), |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::constant(rand_arr2(&mut rng, 2 * 9, 3).into_dyn());
        let b = Tensor::constant(arr1(&[0.0, 0.05, -0.05]).into_dyn());
        check_grad(
            x,
            |t| {
                t.conv2d(&w, &b, (3, 3), (2, 2), (1, 1))
                    .relu()
                    .merge_channels()
                    .sum_all()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let w0 = rand_arr2(&mut rng, 2 * 9, 2).into_dyn();
        check_grad(
            w0,
            |w| {
                let b = Tensor::constant(Array1::zeros(2).into_dyn());
                x.conv2d(w, &b, (3, 3), (2, 2), (1, 1)).tanh().mean_all()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_shared_leaf_accumulates() {
        // Same leaf used twice: gradients from both paths must sum.
        let x = Tensor::leaf(arr2(&[[2.0_f64]]).into_dyn());
        let y = x.mul(&x).sum_all(); // d/dx x^2 = 2x
        y.backward();
        let g = x.grad().unwrap();
        assert!((g.as_slice().unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constants_produce_no_graph() {
        let a = Tensor::<f64>::constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = a.tanh().scale(3.0);
        assert!(!b.requires_grad());
    }

    #[test]
    fn l1_and_mse_zero_at_equality() {
        let data = arr2(&[[1.0_f64, -2.0], [0.5, 0.0]]).into_dyn();
        let t = Tensor::leaf(data.clone());
        assert_eq!(t.l1_loss(&data).item(), 0.0);
        assert_eq!(t.mse_loss(&data).item(), 0.0);
    }

    #[test]
    fn reverse_rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr2(&mut rng, 4, 2).into_dyn();
        check_grad(x, |t| t.reverse_rows().tanh().sum_all(), 1e-5);
    }
}
