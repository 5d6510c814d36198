//! Reverse-mode autodiff tape over dynamic-dimension f64 arrays.
//!
//! Every forward op appends a node holding its value, parent indices and a
//! backward closure; `Graph::backward` walks the tape in reverse, so any DAG
//! built eagerly (cross-branch edges, chained codes, unrolled recurrences)
//! differentiates without per-model backward code. Tensors carry an optional
//! leading step axis: ops written for (M, N) accept (T, M, N) and loop steps.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn};
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn =
    Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[&ArrayD<f64>], &[bool]) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Spike nonlinearity selector for the fused LIF scan.
///
/// `Hard` fires a Heaviside step and backpropagates the triangular surrogate
/// window (half-width 1, peak at the threshold). `Relaxed` replaces the step
/// by the piecewise-quadratic ramp whose exact derivative is that same
/// triangle, so finite differences agree with the analytic gradient; it exists
/// for gradient-check harnesses, not for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SpikeMode {
    Hard,
    Relaxed,
}

/// Triangular surrogate window: max(0, 1 - |u - v_th|).
pub fn surrogate_triangle(u: f64, v_th: f64) -> f64 {
    (1.0 - (u - v_th).abs()).max(0.0)
}

fn spike_hard(u: f64, v_th: f64) -> f64 {
    if u >= v_th {
        1.0
    } else {
        0.0
    }
}

/// C1 ramp whose derivative is `surrogate_triangle`.
fn spike_relaxed(u: f64, v_th: f64) -> f64 {
    let d = u - v_th;
    if d <= -1.0 {
        0.0
    } else if d <= 0.0 {
        0.5 * (d + 1.0) * (d + 1.0)
    } else if d <= 1.0 {
        1.0 - 0.5 * (1.0 - d) * (1.0 - d)
    } else {
        1.0
    }
}

pub fn spike_fn(u: f64, v_th: f64, mode: SpikeMode) -> f64 {
    match mode {
        SpikeMode::Hard => spike_hard(u, v_th),
        SpikeMode::Relaxed => spike_relaxed(u, v_th),
    }
}

/// Pooling flavor for [`Graph::pool_desc`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients produced by one backward pass, indexed by tape position.
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] > 1 {
            let summed = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            g = summed;
        }
    }
    g
}

/// View a 2-d or 3-d dynamic array as (steps, rows, cols); 2-d means one step.
fn steps_view(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    match a.ndim() {
        2 => {
            let v = a.view().into_dimensionality::<Ix2>().unwrap();
            v.insert_axis(Axis(0))
        }
        3 => a.view().into_dimensionality::<Ix3>().unwrap(),
        d => panic!("expected 2-d or 3-d array, got {}-d", d),
    }
}

fn like_steps(src_ndim: usize, a: Array3<f64>) -> ArrayD<f64> {
    if src_ndim == 2 {
        a.index_axis_move(Axis(0), 0).into_dyn()
    } else {
        a.into_dyn()
    }
}

/// PyTorch-style adaptive pooling bin over `len` elements into `bins`.
fn pool_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = (i * len) / bins;
    let end = ((i + 1) * len + bins - 1) / bins;
    (start, end.max(start + 1).min(len))
}

fn im2col_1d(x: &ArrayView2<'_, f64>, k: usize, pad: usize) -> Array2<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut cols = Array2::<f64>::zeros((m * k, n));
    for c in 0..m {
        for dk in 0..k {
            for j in 0..n {
                let src = j as isize + dk as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    cols[[c * k + dk, j]] = x[[c, src as usize]];
                }
            }
        }
    }
    cols
}

fn col2im_1d(dc: &ArrayView2<'_, f64>, m: usize, n: usize, k: usize, pad: usize) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros((m, n));
    for c in 0..m {
        for dk in 0..k {
            for j in 0..n {
                let src = j as isize + dk as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    dx[[c, src as usize]] += dc[[c * k + dk, j]];
                }
            }
        }
    }
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        let needs = back.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let node = Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if needs { back } else { None },
            needs_grad: needs,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let node = Node {
            value,
            parents: vec![],
            back: None,
            needs_grad: true,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id.0) {
            return *v;
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.insert(id.0, v);
        self.param_vars.push((id, v));
        v
    }

    /// Parameters bound on this tape, with their leaf vars.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.param_vars
    }

    /// Reverse sweep from a scalar root. Intermediate grads are freed as soon
    /// as they have been consumed; leaves keep theirs.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad && self.nodes[i].back.is_some() {
                continue;
            }
            let Some(back) = &self.nodes[i].back else { continue };
            let grad = g[i].take().unwrap();
            let parents = &self.nodes[i].parents;
            let pvals: Vec<&ArrayD<f64>> = parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let pgrads = back(&self.nodes[i].value, &grad, &pvals, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (slot, pg) in parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    debug_assert!(self.nodes[*slot].needs_grad);
                    match &mut g[*slot] {
                        Some(acc) => *acc += &pg,
                        none => *none = Some(pg),
                    }
                }
            }
        }
        Grads { g }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(av.shape(), bv.shape());
        let out = av.broadcast(IxDyn(&shape)).unwrap().to_owned()
            + bv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g, pv, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g.clone(), pv[0].shape())),
                    needs[1].then(|| reduce_to_shape(g.clone(), pv[1].shape())),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(av.shape(), bv.shape());
        let out = av.broadcast(IxDyn(&shape)).unwrap().to_owned()
            - bv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g, pv, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g.clone(), pv[0].shape())),
                    needs[1].then(|| reduce_to_shape(-g.clone(), pv[1].shape())),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(av.shape(), bv.shape());
        let out = av.broadcast(IxDyn(&shape)).unwrap().to_owned()
            * bv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g, pv, needs| {
                let da = needs[0].then(|| {
                    let gb = g * &pv[1].broadcast(g.raw_dim()).unwrap();
                    reduce_to_shape(gb, pv[0].shape())
                });
                let db = needs[1].then(|| {
                    let ga = g * &pv[0].broadcast(g.raw_dim()).unwrap();
                    reduce_to_shape(ga, pv[1].shape())
                });
                vec![da, db]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(av.shape(), bv.shape());
        let out = av.broadcast(IxDyn(&shape)).unwrap().to_owned()
            / bv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |_, g, pv, needs| {
                let bb = pv[1].broadcast(g.raw_dim()).unwrap().to_owned();
                let da = needs[0].then(|| reduce_to_shape(g / &bb, pv[0].shape()));
                let db = needs[1].then(|| {
                    let ab = pv[0].broadcast(g.raw_dim()).unwrap().to_owned();
                    reduce_to_shape(-(g * &ab) / (&bb * &bb), pv[1].shape())
                });
                vec![da, db]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, _, _| vec![Some(g.mapv(|v| v * c))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v + c);
        self.push(out, vec![a], Some(Box::new(move |_, g, _, _| vec![Some(g.clone())])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::abs);
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| {
                vec![Some(g * &pv[0].mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| {
                vec![Some(g * &pv[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            out,
            vec![a],
            Some(Box::new(|out, g, _, _| vec![Some(g * &out.mapv(|y| y * (1.0 - y)))])),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const B: f64 = 0.044_715;
        let out = self.nodes[a.0].value.mapv(|x| {
            0.5 * x * (1.0 + (C * (x + B * x * x * x)).tanh())
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| {
                let d = pv[0].mapv(|x| {
                    let t = (C * (x + B * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * B * x * x)
                });
                vec![Some(g * &d)]
            })),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::ln);
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| vec![Some(g / pv[0])])),
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v.clamp(lo, hi));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, pv, _| {
                vec![Some(g * &pv[0].mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 }))]
            })),
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape());
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, &y| *x = x.max(y));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, pv, needs| {
                let take_a = ndarray::Zip::from(pv[0]).and(pv[1]).map_collect(|&x, &y| if x >= y { 1.0 } else { 0.0 });
                vec![
                    needs[0].then(|| g * &take_a),
                    needs[1].then(|| g * &take_a.mapv(|m| 1.0 - m)),
                ]
            })),
        )
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape());
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, &y| *x = x.min(y));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, pv, needs| {
                let take_a = ndarray::Zip::from(pv[0]).and(pv[1]).map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
                vec![
                    needs[0].then(|| g * &take_a),
                    needs[1].then(|| g * &take_a.mapv(|m| 1.0 - m)),
                ]
            })),
        )
    }

    /// Soft-thresholding sign(x).max(|x| - theta, 0) with per-row thresholds.
    /// `theta` has shape (L,) matching the row axis of x (L, N) or (T, L, N);
    /// entries must be nonnegative.
    pub fn shrink(&mut self, x: Var, theta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let tv = &self.nodes[theta.0].value;
        assert_eq!(tv.ndim(), 1);
        let l = tv.shape()[0];
        let xs = steps_view(xv);
        assert_eq!(xs.shape()[1], l, "theta length must match row axis");
        assert!(tv.iter().all(|&t| t >= 0.0), "negative threshold");
        let t1 = tv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = Array3::<f64>::zeros((xs.shape()[0], l, xs.shape()[2]));
        for ((ti, li, ni), o) in out.indexed_iter_mut() {
            let v = xs[[ti, li, ni]];
            let th = t1[li];
            *o = v.signum() * (v.abs() - th).max(0.0);
        }
        let nd = xv.ndim();
        let out = like_steps(nd, out);
        self.push(
            out,
            vec![x, theta],
            Some(Box::new(move |_, g, pv, needs| {
                let xs = steps_view(pv[0]);
                let gs = steps_view(g);
                let th = pv[1];
                let (t, l, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let mut dx = Array3::<f64>::zeros((t, l, n));
                let mut dth = Array1::<f64>::zeros(l);
                for ti in 0..t {
                    for li in 0..l {
                        for ni in 0..n {
                            let v = xs[[ti, li, ni]];
                            if v.abs() > th[[li]] {
                                dx[[ti, li, ni]] = gs[[ti, li, ni]];
                                dth[li] -= v.signum() * gs[[ti, li, ni]];
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| like_steps(pv[0].ndim(), dx)),
                    needs[1].then(|| dth.into_dyn()),
                ]
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.nodes[a.0].value.clone().into_shape(IxDyn(shape)).expect("reshape size mismatch");
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| {
                vec![Some(g.clone().into_shape(pv[0].raw_dim()).unwrap())]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.shape()[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |_, g, _, needs| {
                let mut offs = 0usize;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &s) in sizes.iter().enumerate() {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offs..offs + s))
                        .to_owned();
                    grads.push(needs[i].then_some(piece));
                    offs += s;
                }
                grads
            })),
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let out = self.nodes[a.0].value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, pv, _| {
                let mut dx = ArrayD::<f64>::zeros(pv[0].raw_dim());
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![Some(dx)]
            })),
        )
    }

    /// Replicate a tensor T times along a new leading axis.
    pub fn broadcast_steps(&mut self, a: Var, t: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let mut shape = vec![t];
        shape.extend_from_slice(v.shape());
        let out = v
            .view()
            .insert_axis(Axis(0))
            .broadcast(IxDyn(&shape))
            .unwrap()
            .to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, _, _| vec![Some(g.sum_axis(Axis(0)))])),
        )
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let t = v.shape()[0] as f64;
        let out = v.mean_axis(Axis(0)).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, pv, _| {
                let mut shape = vec![pv[0].shape()[0]];
                shape.extend_from_slice(g.shape());
                let rep = g
                    .view()
                    .insert_axis(Axis(0))
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                vec![Some(rep / t)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, g, pv, _| {
                let gv = g[[]];
                vec![Some(ArrayD::from_elem(pv[0].raw_dim(), gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    pub fn matmul2(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let out = av.dot(&bv).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, pv, needs| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = pv[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    needs[0].then(|| g2.dot(&b2.t()).into_dyn()),
                    needs[1].then(|| a2.t().dot(&g2).into_dyn()),
                ]
            })),
        )
    }

    /// Apply a weight matrix (O, M) to tokens (M, N) or (T, M, N) per step.
    pub fn linear(&mut self, w: Var, x: Var) -> Var {
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let xs = steps_view(&self.nodes[x.0].value);
        let (t, _m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let o = wv.shape()[0];
        let mut out = Array3::<f64>::zeros((t, o, n));
        for ti in 0..t {
            out.index_axis_mut(Axis(0), ti).assign(&wv.dot(&xs.index_axis(Axis(0), ti)));
        }
        let nd = self.nodes[x.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![w, x],
            Some(Box::new(|_, g, pv, needs| {
                let w2 = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let xs = steps_view(pv[1]);
                let gs = steps_view(g);
                let t = xs.shape()[0];
                let dw = needs[0].then(|| {
                    let mut dw = Array2::<f64>::zeros((w2.shape()[0], w2.shape()[1]));
                    for ti in 0..t {
                        dw = dw + gs.index_axis(Axis(0), ti).dot(&xs.index_axis(Axis(0), ti).t());
                    }
                    dw.into_dyn()
                });
                let dx = needs[1].then(|| {
                    let mut dx = Array3::<f64>::zeros((t, xs.shape()[1], xs.shape()[2]));
                    for ti in 0..t {
                        dx.index_axis_mut(Axis(0), ti)
                            .assign(&w2.t().dot(&gs.index_axis(Axis(0), ti)));
                    }
                    like_steps(pv[1].ndim(), dx)
                });
                vec![dw, dx]
            })),
        )
    }

    /// Token gram matrix S = q^T k per step: (M, N) x (M, N) -> (N, N).
    /// S[i, j] is the similarity of query token i and key token j.
    pub fn gram(&mut self, q: Var, k: Var) -> Var {
        let qs = steps_view(&self.nodes[q.0].value);
        let ks = steps_view(&self.nodes[k.0].value);
        let (t, _m, n) = (qs.shape()[0], qs.shape()[1], qs.shape()[2]);
        let mut out = Array3::<f64>::zeros((t, n, n));
        for ti in 0..t {
            out.index_axis_mut(Axis(0), ti)
                .assign(&qs.index_axis(Axis(0), ti).t().dot(&ks.index_axis(Axis(0), ti)));
        }
        let nd = self.nodes[q.0].value.ndim();
        self.push(
            like_steps(nd.max(self.nodes[k.0].value.ndim()), out),
            vec![q, k],
            Some(Box::new(|_, g, pv, needs| {
                let qs = steps_view(pv[0]);
                let ks = steps_view(pv[1]);
                let gs = steps_view(g);
                let t = qs.shape()[0];
                let dq = needs[0].then(|| {
                    let mut dq = Array3::<f64>::zeros((t, qs.shape()[1], qs.shape()[2]));
                    for ti in 0..t {
                        dq.index_axis_mut(Axis(0), ti)
                            .assign(&ks.index_axis(Axis(0), ti).dot(&gs.index_axis(Axis(0), ti).t()));
                    }
                    like_steps(pv[0].ndim(), dq)
                });
                let dk = needs[1].then(|| {
                    let mut dk = Array3::<f64>::zeros((t, ks.shape()[1], ks.shape()[2]));
                    for ti in 0..t {
                        dk.index_axis_mut(Axis(0), ti)
                            .assign(&qs.index_axis(Axis(0), ti).dot(&gs.index_axis(Axis(0), ti)));
                    }
                    like_steps(pv[1].ndim(), dk)
                });
                vec![dq, dk]
            })),
        )
    }

    /// Attention application out = v s^T per step: values (M, N), scores (N, N).
    /// out[:, i] = sum_j s[i, j] v[:, j].
    pub fn attn_out(&mut self, v: Var, s: Var) -> Var {
        let vs = steps_view(&self.nodes[v.0].value);
        let ss = steps_view(&self.nodes[s.0].value);
        let (t, m, n) = (vs.shape()[0], vs.shape()[1], vs.shape()[2]);
        let mut out = Array3::<f64>::zeros((t, m, n));
        for ti in 0..t {
            out.index_axis_mut(Axis(0), ti)
                .assign(&vs.index_axis(Axis(0), ti).dot(&ss.index_axis(Axis(0), ti).t()));
        }
        let nd = self.nodes[v.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![v, s],
            Some(Box::new(|_, g, pv, needs| {
                let vs = steps_view(pv[0]);
                let ss = steps_view(pv[1]);
                let gs = steps_view(g);
                let t = vs.shape()[0];
                let dv = needs[0].then(|| {
                    let mut dv = Array3::<f64>::zeros((t, vs.shape()[1], vs.shape()[2]));
                    for ti in 0..t {
                        dv.index_axis_mut(Axis(0), ti)
                            .assign(&gs.index_axis(Axis(0), ti).dot(&ss.index_axis(Axis(0), ti)));
                    }
                    like_steps(pv[0].ndim(), dv)
                });
                let ds = needs[1].then(|| {
                    let mut ds = Array3::<f64>::zeros((t, ss.shape()[1], ss.shape()[2]));
                    for ti in 0..t {
                        ds.index_axis_mut(Axis(0), ti)
                            .assign(&gs.index_axis(Axis(0), ti).t().dot(&vs.index_axis(Axis(0), ti)));
                    }
                    like_steps(pv[1].ndim(), ds)
                });
                vec![dv, ds]
            })),
        )
    }

    /// Row softmax over the last axis of (N, N) or (T, N, N) score maps.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let xs = steps_view(&self.nodes[a.0].value);
        let (t, r, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let mut out = Array3::<f64>::zeros((t, r, c));
        for ti in 0..t {
            for ri in 0..r {
                let row = xs.slice(ndarray::s![ti, ri, ..]);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for ci in 0..c {
                    out[[ti, ri, ci]] = exps[ci] / sum;
                }
            }
        }
        let nd = self.nodes[a.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![a],
            Some(Box::new(|out, g, pv, _| {
                let ys = steps_view(out);
                let gs = steps_view(g);
                let (t, r, c) = (ys.shape()[0], ys.shape()[1], ys.shape()[2]);
                let mut dx = Array3::<f64>::zeros((t, r, c));
                for ti in 0..t {
                    for ri in 0..r {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += gs[[ti, ri, ci]] * ys[[ti, ri, ci]];
                        }
                        for ci in 0..c {
                            dx[[ti, ri, ci]] = ys[[ti, ri, ci]] * (gs[[ti, ri, ci]] - dot);
                        }
                    }
                }
                vec![Some(like_steps(pv[0].ndim(), dx))]
            })),
        )
    }

    // ---- convolutions ----

    /// 1-d convolution over the token axis, zero-padded to keep length.
    /// w: (O, M, K); x: (M, N) or (T, M, N).
    pub fn conv1d(&mut self, w: Var, x: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let (o, m, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let pad = k / 2;
        let w2 = wv.clone().into_shape(IxDyn(&[o, m * k])).unwrap();
        let w2 = w2.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let xs = steps_view(&self.nodes[x.0].value);
        let (t, _mx, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        assert_eq!(xs.shape()[1], m);
        let mut out = Array3::<f64>::zeros((t, o, n));
        for ti in 0..t {
            let cols = im2col_1d(&xs.index_axis(Axis(0), ti), k, pad);
            out.index_axis_mut(Axis(0), ti).assign(&w2.dot(&cols));
        }
        let nd = self.nodes[x.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![w, x],
            Some(Box::new(move |_, g, pv, needs| {
                let xs = steps_view(pv[1]);
                let gs = steps_view(g);
                let t = xs.shape()[0];
                let n = xs.shape()[2];
                let wv = pv[0];
                let (o, m, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let pad = k / 2;
                let w2 = wv.clone().into_shape(IxDyn(&[o, m * k])).unwrap();
                let w2 = w2.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let mut dw2 = Array2::<f64>::zeros((o, m * k));
                let mut dx = Array3::<f64>::zeros((t, m, n));
                for ti in 0..t {
                    let cols = im2col_1d(&xs.index_axis(Axis(0), ti), k, pad);
                    let g2 = gs.index_axis(Axis(0), ti);
                    if needs[0] {
                        dw2 = dw2 + g2.dot(&cols.t());
                    }
                    if needs[1] {
                        let dcols = w2.t().dot(&g2);
                        dx.index_axis_mut(Axis(0), ti)
                            .assign(&col2im_1d(&dcols.view(), m, n, k, pad));
                    }
                }
                vec![
                    needs[0].then(|| dw2.into_shape((o, m, k)).unwrap().into_dyn()),
                    needs[1].then(|| like_steps(pv[1].ndim(), dx)),
                ]
            })),
        )
    }

    /// 3x3-style 2-d convolution on a single feature map, zero-padded same.
    /// w: (O, C, kh, kw); x: (C, H, W).
    pub fn conv2d(&mut self, w: Var, x: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let (o, c, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let (cx, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c, cx);
        let (ph, pw) = (kh / 2, kw / 2);
        let cols = im2col_2d(xv, kh, kw, ph, pw);
        let w2 = wv.clone().into_shape(IxDyn(&[o, c * kh * kw])).unwrap();
        let w2 = w2.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let out2 = w2.dot(&cols);
        let out = out2.into_shape((o, h, wd)).unwrap().into_dyn();
        self.push(
            out,
            vec![w, x],
            Some(Box::new(move |_, g, pv, needs| {
                let wv = pv[0];
                let xv = pv[1];
                let (o, c, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let (h, wd) = (xv.shape()[1], xv.shape()[2]);
                let (ph, pw) = (kh / 2, kw / 2);
                let g2 = g.clone().into_shape(IxDyn(&[o, h * wd])).unwrap();
                let g2 = g2.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let dw = needs[0].then(|| {
                    let cols = im2col_2d(xv, kh, kw, ph, pw);
                    g2.dot(&cols.t()).into_shape((o, c, kh, kw)).unwrap().into_dyn()
                });
                let dx = needs[1].then(|| {
                    let w2 = wv.clone().into_shape(IxDyn(&[o, c * kh * kw])).unwrap();
                    let w2 = w2.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let dcols = w2.t().dot(&g2);
                    col2im_2d(&dcols, c, h, wd, kh, kw, ph, pw).into_dyn()
                });
                vec![dw, dx]
            })),
        )
    }

    /// Non-overlapping patch embedding: images (C, H, W) or (T, C, H, W) to
    /// tokens (O, nh*nw) or (T, O, nh*nw), patches scanned row-major.
    /// w: (O, C*p*p).
    pub fn patch_embed(&mut self, w: Var, img: Var, p: usize) -> Var {
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let iv = &self.nodes[img.0].value;
        let multi = iv.ndim() == 4;
        let steps = if multi { iv.shape()[0] } else { 1 };
        let (c, h, wd) = if multi {
            (iv.shape()[1], iv.shape()[2], iv.shape()[3])
        } else {
            (iv.shape()[0], iv.shape()[1], iv.shape()[2])
        };
        assert!(h % p == 0 && wd % p == 0, "image not divisible by patch size");
        let (nh, nw) = (h / p, wd / p);
        let o = wv.shape()[0];
        let mut out = Array3::<f64>::zeros((steps, o, nh * nw));
        for ti in 0..steps {
            let frame = if multi {
                iv.index_axis(Axis(0), ti).to_owned()
            } else {
                iv.clone()
            };
            let cols = patches_to_cols(&frame, c, nh, nw, p);
            out.index_axis_mut(Axis(0), ti).assign(&wv.dot(&cols));
        }
        let out = if multi {
            out.into_dyn()
        } else {
            out.index_axis_move(Axis(0), 0).into_dyn()
        };
        self.push(
            out,
            vec![w, img],
            Some(Box::new(move |_, g, pv, needs| {
                let iv = pv[1];
                let multi = iv.ndim() == 4;
                let steps = if multi { iv.shape()[0] } else { 1 };
                let (c, h, wd) = if multi {
                    (iv.shape()[1], iv.shape()[2], iv.shape()[3])
                } else {
                    (iv.shape()[0], iv.shape()[1], iv.shape()[2])
                };
                let (nh, nw) = (h / p, wd / p);
                let gs = steps_view(g);
                let dw = needs[0].then(|| {
                    let mut dw = Array2::<f64>::zeros((pv[0].shape()[0], pv[0].shape()[1]));
                    for ti in 0..steps {
                        let frame = if multi {
                            iv.index_axis(Axis(0), ti).to_owned()
                        } else {
                            iv.clone()
                        };
                        let cols = patches_to_cols(&frame, c, nh, nw, p);
                        dw = dw + gs.index_axis(Axis(0), ti).dot(&cols.t());
                    }
                    dw.into_dyn()
                });
                let dimg = needs[1].then(|| {
                    let w2 = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                    let mut dimg = ArrayD::<f64>::zeros(iv.raw_dim());
                    for ti in 0..steps {
                        let dcols = w2.t().dot(&gs.index_axis(Axis(0), ti));
                        let frame_grad = cols_to_patches(&dcols, c, nh, nw, p);
                        if multi {
                            dimg.index_axis_mut(Axis(0), ti)
                                .assign(&frame_grad.view().into_dyn());
                        } else {
                            dimg.assign(&frame_grad.into_dyn());
                        }
                    }
                    dimg
                });
                vec![dw, dimg]
            })),
        )
    }

    // ---- normalizations ----

    /// Per-token normalization over the channel axis (axis -2), with affine
    /// gamma/beta of shape (M,).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = steps_view(&self.nodes[x.0].value);
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let (t, m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let mut out = Array3::<f64>::zeros((t, m, n));
        for ti in 0..t {
            for ni in 0..n {
                let col = xs.slice(ndarray::s![ti, .., ni]);
                let mu = col.mean().unwrap();
                let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for mi in 0..m {
                    out[[ti, mi, ni]] = gv[[mi]] * (col[mi] - mu) * inv + bv[[mi]];
                }
            }
        }
        let nd = self.nodes[x.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![x, gamma, beta],
            Some(Box::new(move |_, g, pv, needs| {
                let xs = steps_view(pv[0]);
                let gs = steps_view(g);
                let gv = pv[1];
                let (t, m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let mut dx = Array3::<f64>::zeros((t, m, n));
                let mut dgamma = Array1::<f64>::zeros(m);
                let mut dbeta = Array1::<f64>::zeros(m);
                for ti in 0..t {
                    for ni in 0..n {
                        let col = xs.slice(ndarray::s![ti, .., ni]);
                        let mu = col.mean().unwrap();
                        let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for mi in 0..m {
                            let xh = (col[mi] - mu) * inv;
                            let dxh = gs[[ti, mi, ni]] * gv[[mi]];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                            dgamma[mi] += gs[[ti, mi, ni]] * xh;
                            dbeta[mi] += gs[[ti, mi, ni]];
                        }
                        mean_dxh /= m as f64;
                        mean_dxh_xh /= m as f64;
                        for mi in 0..m {
                            let xh = (col[mi] - mu) * inv;
                            let dxh = gs[[ti, mi, ni]] * gv[[mi]];
                            dx[[ti, mi, ni]] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                vec![
                    needs[0].then(|| like_steps(pv[0].ndim(), dx)),
                    needs[1].then(|| dgamma.into_dyn()),
                    needs[2].then(|| dbeta.into_dyn()),
                ]
            })),
        )
    }

    /// Per-channel normalization over tokens and steps jointly: one statistics
    /// bank shared across the step axis, per sample. gamma/beta: (M,).
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = steps_view(&self.nodes[x.0].value);
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let (t, m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let cnt = (t * n) as f64;
        let mut out = Array3::<f64>::zeros((t, m, n));
        for mi in 0..m {
            let lane = xs.slice(ndarray::s![.., mi, ..]);
            let mu = lane.sum() / cnt;
            let var = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cnt;
            let inv = 1.0 / (var + eps).sqrt();
            for ti in 0..t {
                for ni in 0..n {
                    out[[ti, mi, ni]] = gv[[mi]] * (xs[[ti, mi, ni]] - mu) * inv + bv[[mi]];
                }
            }
        }
        let nd = self.nodes[x.0].value.ndim();
        self.push(
            like_steps(nd, out),
            vec![x, gamma, beta],
            Some(Box::new(move |_, g, pv, needs| {
                let xs = steps_view(pv[0]);
                let gs = steps_view(g);
                let gv = pv[1];
                let (t, m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let cnt = (t * n) as f64;
                let mut dx = Array3::<f64>::zeros((t, m, n));
                let mut dgamma = Array1::<f64>::zeros(m);
                let mut dbeta = Array1::<f64>::zeros(m);
                for mi in 0..m {
                    let lane = xs.slice(ndarray::s![.., mi, ..]);
                    let mu = lane.sum() / cnt;
                    let var = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cnt;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for ti in 0..t {
                        for ni in 0..n {
                            let xh = (xs[[ti, mi, ni]] - mu) * inv;
                            let dxh = gs[[ti, mi, ni]] * gv[[mi]];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                            dgamma[mi] += gs[[ti, mi, ni]] * xh;
                            dbeta[mi] += gs[[ti, mi, ni]];
                        }
                    }
                    mean_dxh /= cnt;
                    mean_dxh_xh /= cnt;
                    for ti in 0..t {
                        for ni in 0..n {
                            let xh = (xs[[ti, mi, ni]] - mu) * inv;
                            let dxh = gs[[ti, mi, ni]] * gv[[mi]];
                            dx[[ti, mi, ni]] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
                vec![
                    needs[0].then(|| like_steps(pv[0].ndim(), dx)),
                    needs[1].then(|| dgamma.into_dyn()),
                    needs[2].then(|| dbeta.into_dyn()),
                ]
            })),
        )
    }

    // ---- spiking ----

    /// Fused leaky integrate-and-fire scan over the leading step axis.
    /// Input (T, M, N) of membrane currents; output (T, M, N) of spikes.
    /// Membrane: u' = tau * u + x_t (u carried post-reset), spike at
    /// u' >= v_th, hard reset to zero. Backward is BPTT through the
    /// recurrence with the triangular surrogate at the firing nonlinearity.
    pub fn lif(&mut self, x: Var, tau: f64, v_th: f64, mode: SpikeMode) -> Var {
        let xs = steps_view(&self.nodes[x.0].value);
        let (t, m, n) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let mut mem = Array2::<f64>::zeros((m, n));
        let mut pre = Array3::<f64>::zeros((t, m, n)); // pre-reset membranes
        let mut spikes = Array3::<f64>::zeros((t, m, n));
        for ti in 0..t {
            for mi in 0..m {
                for ni in 0..n {
                    let u = tau * mem[[mi, ni]] + xs[[ti, mi, ni]];
                    let s = spike_fn(u, v_th, mode);
                    pre[[ti, mi, ni]] = u;
                    spikes[[ti, mi, ni]] = s;
                    mem[[mi, ni]] = u * (1.0 - s);
                }
            }
        }
        let nd = self.nodes[x.0].value.ndim();
        self.push(
            like_steps(nd, spikes),
            vec![x],
            Some(Box::new(move |out, g, pv, _| {
                let ss = steps_view(out);
                let gs = steps_view(g);
                let (t, m, n) = (ss.shape()[0], ss.shape()[1], ss.shape()[2]);
                let mut dx = Array3::<f64>::zeros((t, m, n));
                let mut h_next = Array2::<f64>::zeros((m, n));
                for ti in (0..t).rev() {
                    for mi in 0..m {
                        for ni in 0..n {
                            let u = pre[[ti, mi, ni]];
                            let s = ss[[ti, mi, ni]];
                            let sur = surrogate_triangle(u, v_th);
                            let dm = tau * h_next[[mi, ni]];
                            let h = gs[[ti, mi, ni]] * sur + dm * ((1.0 - s) - u * sur);
                            dx[[ti, mi, ni]] = h;
                            h_next[[mi, ni]] = h;
                        }
                    }
                }
                vec![Some(like_steps(pv[0].ndim(), dx))]
            })),
        )
    }

    // ---- pooling ----

    /// Adaptive 1-d pooling of (T, L, N) flattened row-major to (T, bins).
    pub fn pool_desc(&mut self, a: Var, bins: usize, kind: PoolKind) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ndim(), 3);
        let (t, l, n) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let len = l * n;
        let flat = v.clone().into_shape(IxDyn(&[t, len])).unwrap();
        let mut out = Array2::<f64>::zeros((t, bins));
        for ti in 0..t {
            for bi in 0..bins {
                let (s, e) = pool_bin(bi, len, bins);
                let seg = flat.slice(ndarray::s![ti, s..e]);
                out[[ti, bi]] = match kind {
                    PoolKind::Avg => seg.mean().unwrap(),
                    PoolKind::Max => seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |_, g, pv, _| {
                let v = pv[0];
                let (t, l, n) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let len = l * n;
                let flat = v.clone().into_shape(IxDyn(&[t, len])).unwrap();
                let mut dflat = Array2::<f64>::zeros((t, len));
                for ti in 0..t {
                    for bi in 0..bins {
                        let (s, e) = pool_bin(bi, len, bins);
                        let gv = g[[ti, bi]];
                        match kind {
                            PoolKind::Avg => {
                                let w = gv / (e - s) as f64;
                                for j in s..e {
                                    dflat[[ti, j]] += w;
                                }
                            }
                            PoolKind::Max => {
                                let mut arg = s;
                                let mut best = f64::NEG_INFINITY;
                                for j in s..e {
                                    if flat[[ti, j]] > best {
                                        best = flat[[ti, j]];
                                        arg = j;
                                    }
                                }
                                dflat[[ti, arg]] += gv;
                            }
                        }
                    }
                }
                vec![Some(dflat.into_shape((t, l, n)).unwrap().into_dyn())]
            })),
        )
    }
}

fn im2col_2d(x: &ArrayD<f64>, kh: usize, kw: usize, ph: usize, pw: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, h * w));
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ci * kh * kw + dy * kw + dx;
                for yi in 0..h {
                    let sy = yi as isize + dy as isize - ph as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for xi in 0..w {
                        let sx = xi as isize + dx as isize - pw as isize;
                        if sx >= 0 && (sx as usize) < w {
                            cols[[row, yi * w + xi]] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    dc: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = ci * kh * kw + dy * kw + dxk;
                for yi in 0..h {
                    let sy = yi as isize + dy as isize - ph as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for xi in 0..w {
                        let sx = xi as isize + dxk as isize - pw as isize;
                        if sx >= 0 && (sx as usize) < w {
                            dx[[ci, sy as usize, sx as usize]] += dc[[row, yi * w + xi]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn patches_to_cols(frame: &ArrayD<f64>, c: usize, nh: usize, nw: usize, p: usize) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((c * p * p, nh * nw));
    for i in 0..nh {
        for j in 0..nw {
            let tok = i * nw + j;
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        cols[[ci * p * p + dy * p + dx, tok]] =
                            frame[[ci, i * p + dy, j * p + dx]];
                    }
                }
            }
        }
    }
    cols
}

fn cols_to_patches(cols: &Array2<f64>, c: usize, nh: usize, nw: usize, p: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((c, nh * p, nw * p));
    for i in 0..nh {
        for j in 0..nw {
            let tok = i * nw + j;
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        img[[ci, i * p + dy, j * p + dx]] = cols[[ci * p * p + dy * p + dx, tok]];
                    }
                }
            }
        }
    }
    img
}
