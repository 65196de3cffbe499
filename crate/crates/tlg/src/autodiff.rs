//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus a closure that maps the node's output gradient to gradients for
//! its parents. [`Graph::backward`] walks the tape in reverse insertion order,
//! which is a valid reverse topological order by construction.
//!
//! A fresh graph is built per forward pass; model parameters live outside the
//! graph and enter as leaves. All arithmetic is `f64` so gradients can be
//! verified against central finite differences at tight tolerances.

use ndarray::prelude::*;
use ndarray::{concatenate, IxDyn, SliceInfoElem};

use crate::error::{Result, TlgError};

pub type NodeId = usize;

/// Arguments handed to a node's backward closure.
pub struct BackArgs<'a> {
    /// Gradient of the scalar root with respect to this node's output.
    pub grad: &'a ArrayD<f64>,
    /// This node's forward value.
    pub value: &'a ArrayD<f64>,
    /// Forward values of the node's parents, in parent order.
    pub parents: &'a [&'a ArrayD<f64>],
}

type BackFn = Box<dyn Fn(&BackArgs<'_>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<NodeId>,
    back: Option<BackFn>,
}

/// Gradients of one scalar root with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `id`, or zeros if the node did not influence the root.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numpy-style broadcast of two shapes; `None` when incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Reduce a gradient produced at a broadcast shape back to `target` by
/// summing over the expanded axes.
fn unbroadcast(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if td == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected rank-2 array")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<NodeId>, back: Option<BackFn>) -> NodeId {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite value entered the graph");
        self.nodes.push(Node { value, parents, back });
        self.nodes.len() - 1
    }

    /// Insert a leaf. Used for constants and for model parameters alike.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert!(v.len() == 1, "scalar() called on node of length {}", v.len());
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary_values(&self, a: NodeId, b: NodeId) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("broadcast mismatch: {:?} vs {:?}", sa, sb));
        (sa, sb, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb, so) = self.binary_values(a, b);
        let out = {
            let av = self.nodes[a].value.broadcast(IxDyn(&so)).unwrap().to_owned();
            let bv = self.nodes[b].value.broadcast(IxDyn(&so)).unwrap();
            av + bv
        };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |args| {
                vec![unbroadcast(args.grad, &sa), unbroadcast(args.grad, &sb)]
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb, so) = self.binary_values(a, b);
        let out = {
            let av = self.nodes[a].value.broadcast(IxDyn(&so)).unwrap().to_owned();
            let bv = self.nodes[b].value.broadcast(IxDyn(&so)).unwrap();
            av - bv
        };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |args| {
                vec![unbroadcast(args.grad, &sa), unbroadcast(&(-args.grad), &sb)]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb, so) = self.binary_values(a, b);
        let out = {
            let av = self.nodes[a].value.broadcast(IxDyn(&so)).unwrap().to_owned();
            let bv = self.nodes[b].value.broadcast(IxDyn(&so)).unwrap();
            av * bv
        };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |args| {
                let av = args.parents[0].broadcast(IxDyn(args.grad.shape())).unwrap();
                let bv = args.parents[1].broadcast(IxDyn(args.grad.shape())).unwrap();
                vec![
                    unbroadcast(&(args.grad * &bv), &sa),
                    unbroadcast(&(args.grad * &av), &sb),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb, so) = self.binary_values(a, b);
        let out = {
            let av = self.nodes[a].value.broadcast(IxDyn(&so)).unwrap().to_owned();
            let bv = self.nodes[b].value.broadcast(IxDyn(&so)).unwrap();
            av / bv
        };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |args| {
                let av = args.parents[0].broadcast(IxDyn(args.grad.shape())).unwrap();
                let bv = args.parents[1].broadcast(IxDyn(args.grad.shape())).unwrap();
                let ga = args.grad / &bv;
                let gb = -(args.grad * &av) / (&bv.to_owned() * &bv);
                vec![unbroadcast(&ga, &sa), unbroadcast(&gb, &sb)]
            })),
        )
    }

    // ---- elementwise unary ops ----

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out = -self.nodes[a].value.clone();
        self.push(out, vec![a], Some(Box::new(|args| vec![-args.grad])))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = &self.nodes[a].value * c;
        self.push(out, vec![a], Some(Box::new(move |args| vec![args.grad * c])))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = &self.nodes[a].value + c;
        self.push(out, vec![a], Some(Box::new(|args| vec![args.grad.clone()])))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.mapv(f64::exp);
        self.push(out, vec![a], Some(Box::new(|args| vec![args.grad * args.value])))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.mapv(f64::ln);
        self.push(out, vec![a], Some(Box::new(|args| vec![args.grad / args.parents[0]])))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.mapv(f64::sqrt);
        self.push(
            out,
            vec![a],
            Some(Box::new(|args| vec![args.grad * &args.value.mapv(|y| 0.5 / y)])),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(|args| {
                let mask = args.parents[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![args.grad * &mask]
            })),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the (inclusive) interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let mask = args.parents[0].mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                vec![args.grad * &mask]
            })),
        )
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        self.clamp(a, lo, f64::INFINITY)
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = as2(&self.nodes[a].value).dot(&as2(&self.nodes[b].value));
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(|args| {
                let g = as2(args.grad);
                let av = as2(args.parents[0]);
                let bv = as2(args.parents[1]);
                vec![g.dot(&bv.t()).into_dyn(), av.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// 2-D transpose.
    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let out = as2(&self.nodes[a].value).t().to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(|args| vec![as2(args.grad).t().to_owned().into_dyn()])),
        )
    }

    /// Permute axes (generalized transpose), materializing standard layout.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let axes = axes.to_vec();
        let out = self.nodes[a]
            .value
            .view()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![args
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let orig = self.shape(a).to_vec();
        let out = self.nodes[a]
            .value
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", orig, shape));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                vec![args
                    .grad
                    .view()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap()]
            })),
        )
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let out = arr0(self.nodes[a].value.sum()).into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let g = *args.grad.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), g)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`. With `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> NodeId {
        let shape = self.shape(a).to_vec();
        let mut out = self.nodes[a].value.sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let g = if keepdim {
                    args.grad.clone()
                } else {
                    args.grad.clone().insert_axis(Axis(axis))
                };
                vec![g.broadcast(IxDyn(&shape)).unwrap().to_owned()]
            })),
        )
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let sa = self.shape(a).to_vec();
        let out = self.nodes[a]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", sa, shape))
            .to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| vec![unbroadcast(args.grad, &sa)])),
        )
    }

    /// Softmax along `axis`, computed with the max-shift for stability.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = &self.nodes[a].value;
        let mut out = v.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                // dL/dx = y * (g - sum(g * y, axis))
                let y = args.value;
                let gy = args.grad * y;
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let g = y * &(args.grad - &s.broadcast(IxDyn(args.grad.shape())).unwrap());
                vec![g]
            })),
        )
    }

    // ---- structural ops ----

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |args| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut start = 0usize;
                for &l in &lens {
                    let info: Vec<SliceInfoElem> = (0..args.grad.ndim())
                        .map(|d| {
                            if d == axis {
                                SliceInfoElem::Slice {
                                    start: start as isize,
                                    end: Some((start + l) as isize),
                                    step: 1,
                                }
                            } else {
                                SliceInfoElem::Slice { start: 0, end: None, step: 1 }
                            }
                        })
                        .collect();
                    grads.push(args.grad.slice(info.as_slice()).to_owned());
                    start += l;
                }
                grads
            })),
        )
    }

    /// Gather along axis 0. Duplicate indices accumulate in the backward pass.
    pub fn select_axis0(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let src = &self.nodes[a].value;
        let shape = src.shape().to_vec();
        let idx = indices.to_vec();
        let picked: Vec<_> = idx.iter().map(|&i| src.index_axis(Axis(0), i)).collect();
        let out = ndarray::stack(Axis(0), &picked).expect("select_axis0 stack");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |args| {
                let mut g = ArrayD::zeros(IxDyn(&shape));
                for (j, &i) in idx.iter().enumerate() {
                    let gj = args.grad.index_axis(Axis(0), j);
                    let mut slot = g.index_axis_mut(Axis(0), i);
                    slot += &gj;
                }
                vec![g]
            })),
        )
    }

    // ---- spatial ops on (C, H, W) ----

    /// 3x3 stride-1 average pool with same padding; border windows divide by
    /// the number of in-bounds cells so constants are preserved.
    pub fn avg_pool3x3(&mut self, a: NodeId) -> NodeId {
        let v = self.chw(a);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    let mut n = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                s += v[[ci, yy as usize, xx as usize]];
                                n += 1.0;
                            }
                        }
                    }
                    out[[ci, y, x]] = s / n;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut gi = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut n = 0.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                        n += 1.0;
                                    }
                                }
                            }
                            let share = g[[ci, y, x]] / n;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                        gi[[ci, yy as usize, xx as usize]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gi.into_dyn()]
            })),
        )
    }

    /// 3x3 stride-1 max pool with same padding; gradient routes to the argmax.
    pub fn max_pool3x3(&mut self, a: NodeId) -> NodeId {
        let v = self.chw(a);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Array3::<f64>::zeros((c, h, w));
        let mut arg = vec![0usize; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0usize;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                let val = v[[ci, yy as usize, xx as usize]];
                                if val > best {
                                    best = val;
                                    bi = (ci * h + yy as usize) * w + xx as usize;
                                }
                            }
                        }
                    }
                    out[[ci, y, x]] = best;
                    arg[(ci * h + y) * w + x] = bi;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |args| {
                let g = args.grad.as_slice().unwrap();
                let mut gi = vec![0.0f64; c * h * w];
                for (o, &src) in arg.iter().enumerate() {
                    gi[src] += g[o];
                }
                vec![Array3::from_shape_vec((c, h, w), gi).unwrap().into_dyn()]
            })),
        )
    }

    /// Bilinear resize of a (C, H, W) map to (C, oh, ow).
    pub fn bilinear_resize(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let v = self.chw(a);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let ytab = resize_taps(h, oh);
        let xtab = resize_taps(w, ow);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for (y, &(y0, y1, wy)) in ytab.iter().enumerate() {
                for (x, &(x0, x1, wx)) in xtab.iter().enumerate() {
                    out[[ci, y, x]] = (1.0 - wy) * (1.0 - wx) * v[[ci, y0, x0]]
                        + (1.0 - wy) * wx * v[[ci, y0, x1]]
                        + wy * (1.0 - wx) * v[[ci, y1, x0]]
                        + wy * wx * v[[ci, y1, x1]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut gi = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (y, &(y0, y1, wy)) in ytab.iter().enumerate() {
                        for (x, &(x0, x1, wx)) in xtab.iter().enumerate() {
                            let gv = g[[ci, y, x]];
                            gi[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                            gi[[ci, y0, x1]] += (1.0 - wy) * wx * gv;
                            gi[[ci, y1, x0]] += wy * (1.0 - wx) * gv;
                            gi[[ci, y1, x1]] += wy * wx * gv;
                        }
                    }
                }
                vec![gi.into_dyn()]
            })),
        )
    }

    /// Same-padding stride-1 2-D convolution on a batch: `x` is (B, Cin, H, W),
    /// `w` is (Cout, Cin, kh, kw) with odd kernel sides, `b` is (Cout).
    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("conv input rank 4");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().expect("conv weight rank 4");
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().expect("conv bias rank 1");
        let (bsz, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, cin_w, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, cin_w, "conv channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernel sides must be odd");
        let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((bsz, cout, h, wd));
        for bi in 0..bsz {
            let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw);
            let mut o = wmat.dot(&col); // (cout, h*w)
            for (mut row, &bias) in o.rows_mut().into_iter().zip(bv.iter()) {
                row += bias;
            }
            out.index_axis_mut(Axis(0), bi)
                .assign(&o.into_shape_with_order((cout, h, wd)).unwrap());
        }
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |args| {
                let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
                let xv = args.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = args.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut gx = Array4::<f64>::zeros((bsz, cin, h, wd));
                let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut gb = Array1::<f64>::zeros(cout);
                for bi in 0..bsz {
                    let gmat = g
                        .index_axis(Axis(0), bi)
                        .to_shape((cout, h * wd))
                        .unwrap()
                        .to_owned();
                    let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw);
                    gw += &gmat.dot(&col.t());
                    gb += &gmat.sum_axis(Axis(1));
                    let gcol = wmat.t().dot(&gmat); // (cin*kh*kw, h*w)
                    col2im(&gcol, &mut gx.index_axis_mut(Axis(0), bi), kh, kw);
                }
                vec![
                    gx.into_dyn(),
                    gw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                    gb.into_dyn(),
                ]
            })),
        )
    }

    fn chw(&self, a: NodeId) -> ArrayView3<'_, f64> {
        self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected rank-3 (C, H, W) array")
    }

    // ---- backward ----

    /// Reverse pass from a scalar (or elementwise-seeded) root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(IxDyn(self.nodes[root].value.shape())));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                let parent_vals: Vec<&ArrayD<f64>> =
                    self.nodes[id].parents.iter().map(|&p| &self.nodes[p].value).collect();
                let args = BackArgs { grad: &g, value: &self.nodes[id].value, parents: &parent_vals };
                let pgrads = back(&args);
                debug_assert_eq!(pgrads.len(), self.nodes[id].parents.len());
                for (&p, pg) in self.nodes[id].parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Per-output-pixel source taps for bilinear resizing (half-pixel centers).
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Unfold a (C, H, W) view into a (C*kh*kw, H*W) column matrix, zero-padded.
pub(crate) fn im2col(x: &ArrayView3<'_, f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    let mut col = Array2::<f64>::zeros((c * kh * kw, h * w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for y in 0..h {
                    let yy = y as i64 + ky as i64 - ph;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for xp in 0..w {
                        let xx = xp as i64 + kx as i64 - pw;
                        if xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        col[[row, y * w + xp]] = x[[ci, yy as usize, xx as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter a column-matrix gradient back onto the image.
pub(crate) fn col2im(gcol: &Array2<f64>, gx: &mut ndarray::ArrayViewMut3<'_, f64>, kh: usize, kw: usize) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for y in 0..h {
                    let yy = y as i64 + ky as i64 - ph;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for xp in 0..w {
                        let xx = xp as i64 + kx as i64 - pw;
                        if xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        gx[[ci, yy as usize, xx as usize]] += gcol[[row, y * w + xp]];
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of a scalar function of one array argument.
/// Lives in non-test code because the acceptance suite and module tests both
/// use it as the independent oracle for gradient verification.
pub fn numeric_gradient<F: FnMut(&ArrayD<f64>) -> f64>(
    x: &ArrayD<f64>,
    mut f: F,
    eps: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(IxDyn(x.shape()));
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Relative error with an absolute floor, used by every gradient check.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Validate that every entry of an array is finite.
pub fn ensure_finite(name: &str, x: &ArrayD<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TlgError::DataValidation(format!("{name} contains non-finite values")))
    }
}
