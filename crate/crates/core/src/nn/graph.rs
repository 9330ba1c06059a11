//! The reverse-mode tape: eager forward values, recorded backward closures.
//!
//! A [`Graph`] lives for one forward/backward pass. Leaves are parameter
//! bindings or constants; every op pushes a node whose backward closure
//! routes the incoming gradient to its parents. Gradients follow NumPy
//! broadcasting: ops that broadcast sum the gradient back down to each
//! input's shape.

use ndarray::{ArrayD, Axis, IxDyn};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    backward: Option<BackFn>,
}

/// Gradients per node after a backward pass.
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node[v.0].as_ref()
    }
}

/// Computes the broadcast shape of two operand shapes (NumPy rules).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Sums `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] > 1 {
            let summed = g.sum_axis(Axis(i));
            g = summed.insert_axis(Axis(i));
        }
    }
    g
}

/// General batched matrix multiply.
///
/// `a` is `(..., m, k)`; `b` is either `(k, n)` (shared across the batch)
/// or `(..., k, n)` with identical leading dims.
fn mm(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    use ndarray::{Array2, Array3, Ix2};
    let ashape = a.shape().to_vec();
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    if a.ndim() == 2 && b.ndim() == 2 {
        let a2 = a.view().into_dimensionality::<Ix2>().expect("2d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("2d");
        return a2.dot(&b2).into_dyn();
    }
    let batch: usize = ashape[..ashape.len() - 2].iter().product();
    let a3 = Array3::from_shape_vec(
        (batch, m, k),
        a.as_standard_layout().iter().copied().collect(),
    )
    .expect("a reshape");
    let n = b.shape()[b.ndim() - 1];
    let kb = b.shape()[b.ndim() - 2];
    assert_eq!(k, kb, "inner dims {k} vs {kb}");
    let mut out = Array3::<f64>::zeros((batch, m, n));
    if b.ndim() == 2 {
        let b2: Array2<f64> = b
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2d")
            .to_owned();
        for i in 0..batch {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b2));
        }
    } else {
        let bbatch: usize = b.shape()[..b.ndim() - 2].iter().product();
        assert_eq!(batch, bbatch, "batch dims differ");
        let b3 = Array3::from_shape_vec(
            (batch, kb, n),
            b.as_standard_layout().iter().copied().collect(),
        )
        .expect("b reshape");
        for i in 0..batch {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
    }
    let mut oshape = ashape[..ashape.len() - 2].to_vec();
    oshape.push(m);
    oshape.push(n);
    out.into_shape_with_order(IxDyn(&oshape)).expect("out reshape")
}

fn transpose_last2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.ndim();
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    x.view().permuted_axes(IxDyn(&axes)).as_standard_layout().to_owned()
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), backward });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Leaves accumulate gradients but have no parents.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Alias for [`Graph::leaf`] used for values that never need grads.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("non-empty")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        broadcast_shape(&sa, &sb).expect("add broadcast");
        let out = self.value(a) + self.value(b);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, reduce_to_shape(g, &sa)), (b.0, reduce_to_shape(g, &sb))]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let out = self.value(a) - self.value(b);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![
                    (a.0, reduce_to_shape(g, &sa)),
                    (b.0, reduce_to_shape(&(-g), &sb)),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (va, vb) = (self.rc(a), self.rc(b));
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![
                    (a.0, reduce_to_shape(&(g * &*vb), &sa)),
                    (b.0, reduce_to_shape(&(g * &*va), &sb)),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Some(Box::new(move |g| vec![(a.0, g * c)])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    /// Elementwise power. For fractional exponents the input must stay
    /// positive (callers add an epsilon first).
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let va = self.rc(a);
        let out = va.mapv(|x| x.powf(p));
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, g * &va.mapv(|x| p * x.powf(p - 1.0)))]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.rc(a);
        let out = va.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = va.mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                });
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let out = mm(&va, &vb);
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = mm(g, &transpose_last2(&vb));
                let db_full = mm(&transpose_last2(&va), g);
                let db = reduce_to_shape(&db_full, vb.shape());
                vec![(a.0, reduce_to_shape(&da, va.shape())), (b.0, db)]
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes = axes.to_vec();
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(
                    a.0,
                    g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned(),
                )]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.0,
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(&old))
                        .expect("reshape back"),
                )]
            })),
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let full = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&full));
                da.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![(a.0, da)]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let lens: Vec<usize> = parts.iter().map(|v| self.value(*v).shape()[axis]).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut outg = Vec::with_capacity(ids.len());
                let mut at = 0;
                for (id, len) in ids.iter().zip(&lens) {
                    outg.push((
                        *id,
                        g.slice_axis(Axis(axis), ndarray::Slice::from(at..at + len))
                            .to_owned(),
                    ));
                    at += len;
                }
                outg
            })),
        )
    }

    /// Every `stride`-th index along `axis`, starting at 0.
    pub fn stride_axis(&mut self, a: Var, axis: usize, stride: usize) -> Var {
        let full = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::new(0, None, stride as isize))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&full));
                da.slice_axis_mut(Axis(axis), ndarray::Slice::new(0, None, stride as isize))
                    .assign(g);
                vec![(a.0, da)]
            })),
        )
    }

    /// Nearest-neighbor upsampling by `factor` along `axis`.
    pub fn upsample_nearest(&mut self, a: Var, axis: usize, factor: usize) -> Var {
        let n = self.value(a).shape()[axis];
        let idx: Vec<usize> = (0..n * factor).map(|i| i / factor).collect();
        let out = self.value(a).select(Axis(axis), &idx);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut shape = g.shape().to_vec();
                shape[axis] = n;
                let mut da = ArrayD::zeros(IxDyn(&shape));
                for i in 0..n * factor {
                    let gi = g.index_axis(Axis(axis), i);
                    let mut di = da.index_axis_mut(Axis(axis), i / factor);
                    di += &gi;
                }
                vec![(a.0, da)]
            })),
        )
    }

    /// Zero padding along `axis`.
    pub fn pad_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let mut shape = self.value(a).shape().to_vec();
        let n = shape[axis];
        shape[axis] = n + before + after;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), ndarray::Slice::from(before..before + n))
            .assign(self.value(a));
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.0,
                    g.slice_axis(Axis(axis), ndarray::Slice::from(before..before + n))
                        .to_owned(),
                )]
            })),
        )
    }

    /// Mean over `axes`, keeping them as length-1 dims.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes = axes.to_vec();
        let full = self.value(a).shape().to_vec();
        let count: usize = axes.iter().map(|&ax| full[ax]).product();
        let mut out = self.value(a).clone();
        let mut sorted = axes.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        for &ax in &sorted {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        out /= count as f64;
        self.push(
            out,
            Some(Box::new(move |g| {
                let expanded = g.broadcast(IxDyn(&full)).expect("mean grad broadcast").to_owned();
                vec![(a.0, expanded / count as f64)]
            })),
        )
    }

    /// Sum over `axes`, keeping them as length-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes = axes.to_vec();
        let full = self.value(a).shape().to_vec();
        let mut out = self.value(a).clone();
        let mut sorted = axes.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        for &ax in &sorted {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.0,
                    g.broadcast(IxDyn(&full)).expect("sum grad broadcast").to_owned(),
                )]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let shape = self.value(a).shape().to_vec();
        let s: f64 = self.value(a).iter().sum();
        let out = ArrayD::from_shape_vec(IxDyn(&[1]), vec![s / n as f64]).expect("scalar");
        self.push(
            out,
            Some(Box::new(move |g| {
                let gv = g[[0]] / n as f64;
                vec![(a.0, ArrayD::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let s: f64 = self.value(a).iter().sum();
        let out = ArrayD::from_shape_vec(IxDyn(&[1]), vec![s]).expect("scalar");
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, ArrayD::from_elem(IxDyn(&shape), g[[0]]))]
            })),
        )
    }

    /// Softmax over the last axis with an optional additive mask
    /// (`-inf` entries are excluded; the mask broadcasts over leading dims).
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&ArrayD<f64>>) -> Var {
        let logits = if let Some(m) = mask {
            self.value(a) + &m.broadcast(IxDyn(self.value(a).shape())).expect("mask broadcast")
        } else {
            self.value(a).clone()
        };
        let last = logits.ndim() - 1;
        let mut out = logits;
        for mut row in out.rows_mut() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let _ = last;
        let vout = Rc::new(out);
        let vb = Rc::clone(&vout);
        let value = (*vout).clone();
        self.push(
            value,
            Some(Box::new(move |g| {
                // dX = Y * (g - sum(g * Y, last))
                let gy = g * &*vb;
                let s = gy.sum_axis(Axis(gy.ndim() - 1)).insert_axis(Axis(gy.ndim() - 1));
                let da = &*vb * &(g - &s);
                vec![(a.0, da)]
            })),
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Gradient scatter-adds rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.rc(table);
        let rows = t.shape()[0];
        let dim = t.shape()[1];
        for &id in ids {
            assert!(id < rows, "embedding id {id} out of range ({rows} rows)");
        }
        let mut out = ArrayD::zeros(IxDyn(&[ids.len(), dim]));
        for (i, &id) in ids.iter().enumerate() {
            for d in 0..dim {
                out[[i, d]] = t[[id, d]];
            }
        }
        let ids = ids.to_vec();
        let tshape = t.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dt = ArrayD::zeros(IxDyn(&tshape));
                for (i, &id) in ids.iter().enumerate() {
                    for d in 0..tshape[1] {
                        dt[[id, d]] += g[[i, d]];
                    }
                }
                vec![(table.0, dt)]
            })),
        )
    }

    /// Cross product over a trailing axis of length 3.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "cross3 shapes");
        let out = cross_arrays(&va, &vb);
        self.push(
            out,
            Some(Box::new(move |g| {
                // d/da <g, a x b> = b x g ; d/db = g x a
                vec![(a.0, cross_arrays(&vb, g)), (b.0, cross_arrays(g, &va))]
            })),
        )
    }

    /// Mean cross-entropy of `logits` (N, K) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let l = self.rc(logits);
        let n = l.shape()[0];
        let k = l.shape()[1];
        assert_eq!(labels.len(), n, "labels length");
        let mut probs = (*l).clone();
        let mut loss = 0.0;
        for i in 0..n {
            let mx = (0..k).map(|j| probs[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                probs[[i, j]] = (probs[[i, j]] - mx).exp();
                sum += probs[[i, j]];
            }
            for j in 0..k {
                probs[[i, j]] /= sum;
            }
            loss -= probs[[i, labels[i]]].max(1e-300).ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        let probs = Rc::new(probs);
        let out = ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).expect("scalar");
        self.push(
            out,
            Some(Box::new(move |g| {
                let scale = g[[0]] / n as f64;
                let mut d = (*probs).clone();
                for (i, &lab) in labels.iter().enumerate() {
                    d[[i, lab]] -= 1.0;
                }
                vec![(logits.0, d * scale)]
            })),
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        assert_eq!(
            seed_shape.iter().product::<usize>(),
            1,
            "backward() needs a scalar loss"
        );
        grads[loss.0] = Some(ArrayD::ones(IxDyn(&seed_shape)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                for (pid, pg) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }
}

fn cross_arrays(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(a.shape()));
    let n = a.len() / 3;
    let af = a.as_standard_layout();
    let bf = b.as_standard_layout();
    let av = af.as_slice().expect("contiguous");
    let bv = bf.as_slice().expect("contiguous");
    {
        let ov = out.as_slice_mut().expect("contiguous");
        for i in 0..n {
            let (x, y) = (&av[3 * i..3 * i + 3], &bv[3 * i..3 * i + 3]);
            ov[3 * i] = x[1] * y[2] - x[2] * y[1];
            ov[3 * i + 1] = x[2] * y[0] - x[0] * y[2];
            ov[3 * i + 2] = x[0] * y[1] - x[1] * y[0];
        }
    }
    out
}
