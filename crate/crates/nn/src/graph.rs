//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes hold their
//! value and a closure mapping the output gradient to parent gradients.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn, Slice, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamSet};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    let mut g = g.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn view2(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.view().into_shape_with_order((rows, cols)).expect("contiguous tensor")
}

fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    let s = t.shape();
    t.view().into_shape_with_order((s[0], s[1], s[2])).expect("rank-3 tensor")
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

trait Reshape {
    fn reshaped(self, shape: &[usize]) -> Tensor;
}

impl Reshape for Tensor {
    fn reshaped(self, shape: &[usize]) -> Tensor {
        standard(self).into_shape_with_order(IxDyn(shape)).expect("reshape")
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations of an LSTM pass, `[B, H]` per entry.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub i: Vec<Array2<f64>>,
    pub f: Vec<Array2<f64>>,
    pub g: Vec<Array2<f64>>,
    pub o: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
    pub h: Vec<Array2<f64>>,
}

/// Runs the LSTM recurrence with gate order (input, forget, candidate, output).
///
/// `x` is `[B, T, D]`, `wx` is `[D, 4H]`, `wh` is `[H, 4H]`, `b` is `[4H]`.
pub fn lstm_trace(
    x: ArrayView3<f64>,
    wx: ArrayView2<f64>,
    wh: ArrayView2<f64>,
    b: &[f64],
    h0: ArrayView2<f64>,
    c0: ArrayView2<f64>,
) -> LstmTrace {
    let (bsz, t_len, d) = x.dim();
    let h = wh.nrows();
    let xs = x.to_owned().into_shape_with_order((bsz * t_len, d)).expect("contiguous");
    let zx = xs.dot(&wx).into_dyn().reshaped(&[bsz, t_len, 4 * h]);
    let mut tr = LstmTrace {
        i: Vec::with_capacity(t_len),
        f: Vec::with_capacity(t_len),
        g: Vec::with_capacity(t_len),
        o: Vec::with_capacity(t_len),
        c: Vec::with_capacity(t_len),
        h: Vec::with_capacity(t_len),
    };
    let mut h_prev = h0.to_owned();
    let mut c_prev = c0.to_owned();
    for t in 0..t_len {
        let mut z = h_prev.dot(&wh);
        z += &zx.slice(s![.., t, ..]);
        let mut gi = Array2::zeros((bsz, h));
        let mut gf = Array2::zeros((bsz, h));
        let mut gg = Array2::zeros((bsz, h));
        let mut go = Array2::zeros((bsz, h));
        let mut c = Array2::zeros((bsz, h));
        let mut hh = Array2::zeros((bsz, h));
        for r in 0..bsz {
            for u in 0..h {
                let i = sigmoid(z[[r, u]] + b[u]);
                let f = sigmoid(z[[r, h + u]] + b[h + u]);
                let g = (z[[r, 2 * h + u]] + b[2 * h + u]).tanh();
                let o = sigmoid(z[[r, 3 * h + u]] + b[3 * h + u]);
                let cv = f * c_prev[[r, u]] + i * g;
                gi[[r, u]] = i;
                gf[[r, u]] = f;
                gg[[r, u]] = g;
                go[[r, u]] = o;
                c[[r, u]] = cv;
                hh[[r, u]] = o * cv.tanh();
            }
        }
        h_prev = hh.clone();
        c_prev = c.clone();
        tr.i.push(gi);
        tr.f.push(gf);
        tr.g.push(gg);
        tr.o.push(go);
        tr.c.push(c);
        tr.h.push(hh);
    }
    tr
}

fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, left: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let top = kh - 1;
    let mut cols = Array2::zeros((h * w, cin * kh * kw));
    for ci in 0..cin {
        for dh in 0..kh {
            for dw in 0..kw {
                let col = (ci * kh + dh) * kw + dw;
                for hh in 0..h {
                    let hs = hh + dh;
                    if hs < top || hs - top >= h {
                        continue;
                    }
                    let hs = hs - top;
                    for ww in 0..w {
                        let ws = ww + dw;
                        if ws < left || ws - left >= w {
                            continue;
                        }
                        cols[[hh * w + ww, col]] = x[[ci, hs, ws - left]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, cin: usize, h: usize, w: usize, kh: usize, kw: usize, left: usize) -> Array3<f64> {
    let top = kh - 1;
    let mut x = Array3::zeros((cin, h, w));
    for ci in 0..cin {
        for dh in 0..kh {
            for dw in 0..kw {
                let col = (ci * kh + dh) * kw + dw;
                for hh in 0..h {
                    let hs = hh + dh;
                    if hs < top || hs - top >= h {
                        continue;
                    }
                    let hs = hs - top;
                    for ww in 0..w {
                        let ws = ww + dw;
                        if ws < left || ws - left >= w {
                            continue;
                        }
                        x[[ci, hs, ws - left]] += cols[[hh * w + ww, col]];
                    }
                }
            }
        }
    }
    x
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout is the identity.
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph with dropout masks drawn from `seed`.
    pub fn training(params: &'p ParamSet, seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.iter().next().expect("non-empty tensor")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: standard(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a trainable parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: standard(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a one-element node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(back), Some(g)) = (&node.backward, grads[i].as_ref()) else {
                continue;
            };
            let owned;
            let g = if g.is_standard_layout() {
                g
            } else {
                owned = g.as_standard_layout().into_owned();
                &owned
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = back(g, &needs);
            for ((&p, gp), need) in node.parents.iter().zip(pg).zip(&needs) {
                let (Some(gp), true) = (gp, *need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => *acc += &gp,
                    slot => *slot = Some(gp),
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients in parameter-set order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads.grads[i]) {
                out[id.index()] += g;
            }
        }
        out
    }

    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let y = self.value(a) + self.value(b);
        self.push(
            y,
            &[a, b],
            Box::new(move |g, n| {
                vec![n[0].then(|| unbroadcast(g, &sa)), n[1].then(|| unbroadcast(g, &sb))]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let y = self.value(a) - self.value(b);
        self.push(
            y,
            &[a, b],
            Box::new(move |g, n| {
                vec![n[0].then(|| unbroadcast(g, &sa)), n[1].then(|| -unbroadcast(g, &sb))]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = &av * &bv;
        self.push(
            y,
            &[a, b],
            Box::new(move |g, n| {
                vec![
                    n[0].then(|| unbroadcast(&(g * &bv), av.shape())),
                    n[1].then(|| unbroadcast(&(g * &av), bv.shape())),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) * c;
        self.push(y, &[a], Box::new(move |g, _| vec![Some(g * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) + c;
        self.push(y, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value(a).clone();
        let y = x.mapv(f);
        let yc = y.clone();
        self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&x).and(&yc).for_each(|o, &x, &y| *o *= df(x, y));
                vec![Some(out)]
            }),
        )
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a);
        let rng = &mut self.rng;
        let mask = Tensor::from_shape_fn(IxDyn(&shape), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // Linear algebra

    /// `x · w + b` over the last axis of `x`; `w` is `[K, N]`, `b` is `[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let (k, n) = {
            let s = self.shape(w);
            (s[0], s[1])
        };
        assert_eq!(*xs.last().unwrap(), k, "linear input width {} vs weight rows {k}", xs.last().unwrap());
        let m = xs.iter().product::<usize>() / k;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut y = view2(&xv, m, k).dot(&view2(&wv, k, n));
        if let Some(b) = b {
            y += &view2(self.value(b), 1, n);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let y = y.into_dyn().reshaped(&out_shape);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            y,
            &parents,
            Box::new(move |g, need| {
                let g2 = view2(g, m, n);
                let dx = need[0].then(|| {
                    g2.dot(&view2(&wv, k, n).t())
                        .into_dyn().reshaped(&xs)
                });
                let dw = need[1].then(|| view2(&xv, m, k).t().dot(&g2).into_dyn());
                let mut out = vec![dx, dw];
                if need.len() == 3 {
                    out.push(need[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]` (or `[B, N, K]` when
    /// `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (bsz, m, _) = view3(&av).dim();
        let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut y = Array3::<f64>::zeros((bsz, m, n));
        {
            let (a3, b3) = (view3(&av), view3(&bv));
            for i in 0..bsz {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let yi = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
                y.index_axis_mut(Axis(0), i).assign(&yi);
            }
        }
        self.push(
            y.into_dyn(),
            &[a, b],
            Box::new(move |g, need| {
                let (a3, b3, g3) = (view3(&av), view3(&bv), view3(g));
                let mut da = Array3::<f64>::zeros(a3.raw_dim());
                let mut db = Array3::<f64>::zeros(b3.raw_dim());
                for i in 0..bsz {
                    let (ai, bi, gi) = (
                        a3.index_axis(Axis(0), i),
                        b3.index_axis(Axis(0), i),
                        g3.index_axis(Axis(0), i),
                    );
                    if transpose_b {
                        if need[0] {
                            da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                        }
                        if need[1] {
                            db.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                        }
                    } else {
                        if need[0] {
                            da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                        }
                        if need[1] {
                            db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                        }
                    }
                }
                vec![need[0].then(|| da.into_dyn()), need[1].then(|| db.into_dyn())]
            }),
        )
    }

    /// Same-size 2-D convolution of `[B, Cin, T, A]` with `[Cout, Cin, kh, kw]`.
    ///
    /// The time axis is padded causally (`kh − 1` rows before, none after);
    /// the asset axis gets `left` zero columns before and `kw − 1 − left` after.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, left: usize) -> Var {
        let xv = self.value(x).clone();
        let kv = self.value(k).clone();
        let bv = self.value(b).clone();
        let (bsz, cin, h, w) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (cout, kh, kw) = {
            let s = kv.shape();
            assert_eq!(s[1], cin, "conv input channels {cin} vs kernel {}", s[1]);
            (s[0], s[2], s[3])
        };
        assert!(left < kw.max(1), "asset padding exceeds kernel width");
        let p = cin * kh * kw;
        let kmat = view2(&kv, cout, p).to_owned();
        let x4 = xv.view().into_shape_with_order((bsz, cin, h, w)).unwrap().to_owned();
        let mut y = ndarray::Array4::<f64>::zeros((bsz, cout, h, w));
        for bi in 0..bsz {
            let cols = im2col(x4.index_axis(Axis(0), bi), kh, kw, left);
            let out = kmat.dot(&cols.t());
            let mut yb = y.index_axis_mut(Axis(0), bi);
            let mut yb2 = yb.view_mut().into_shape_with_order((cout, h * w)).unwrap();
            yb2.assign(&out);
            for co in 0..cout {
                yb.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + bv[co]);
            }
        }
        self.push(
            y.into_dyn(),
            &[x, k, b],
            Box::new(move |g, need| {
                let g4 = g.view().into_shape_with_order((bsz, cout, h * w)).unwrap();
                let mut dk = Array2::<f64>::zeros((cout, p));
                let mut dx = ndarray::Array4::<f64>::zeros((bsz, cin, h, w));
                for bi in 0..bsz {
                    let gb = g4.index_axis(Axis(0), bi);
                    if need[1] {
                        let cols = im2col(x4.index_axis(Axis(0), bi), kh, kw, left);
                        dk += &gb.dot(&cols);
                    }
                    if need[0] {
                        let dcols = gb.t().dot(&kmat);
                        dx.index_axis_mut(Axis(0), bi)
                            .assign(&col2im(&dcols, cin, h, w, kh, kw, left));
                    }
                }
                let db = g4.sum_axis(Axis(2)).sum_axis(Axis(0));
                vec![
                    need[0].then(|| dx.into_dyn()),
                    need[1].then(|| dk.into_dyn().reshaped(&[cout, cin, kh, kw])),
                    need[2].then(|| db.into_dyn()),
                ]
            }),
        )
    }

    /// Hidden-state sequence `[B, T, H]` of an LSTM; see [`lstm_trace`].
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, b: Var, h0: Var, c0: Var) -> Var {
        let xv = self.value(x).clone();
        let wxv = self.value(wx).clone();
        let whv = self.value(wh).clone();
        let bv = self.value(b).clone();
        let h0v = self.value(h0).clone();
        let c0v = self.value(c0).clone();
        let (bsz, t_len, d) = view3(&xv).dim();
        let h = whv.shape()[0];
        let tr = lstm_trace(
            view3(&xv),
            view2(&wxv, d, 4 * h),
            view2(&whv, h, 4 * h),
            bv.as_slice().unwrap(),
            view2(&h0v, bsz, h),
            view2(&c0v, bsz, h),
        );
        let mut y = Array3::<f64>::zeros((bsz, t_len, h));
        for (t, ht) in tr.h.iter().enumerate() {
            y.slice_mut(s![.., t, ..]).assign(ht);
        }
        self.push(
            y.into_dyn(),
            &[x, wx, wh, b, h0, c0],
            Box::new(move |g, need| {
                let g3 = view3(g);
                let wh2 = view2(&whv, h, 4 * h);
                let mut dz_all = Array3::<f64>::zeros((bsz, t_len, 4 * h));
                let mut dwh = Array2::<f64>::zeros((h, 4 * h));
                let mut dh_next = Array2::<f64>::zeros((bsz, h));
                let mut dc_next = Array2::<f64>::zeros((bsz, h));
                let h0_2 = view2(&h0v, bsz, h);
                let c0_2 = view2(&c0v, bsz, h);
                for t in (0..t_len).rev() {
                    let (i, f, gg, o, c) = (&tr.i[t], &tr.f[t], &tr.g[t], &tr.o[t], &tr.c[t]);
                    let c_prev = if t == 0 { c0_2 } else { tr.c[t - 1].view() };
                    let h_prev = if t == 0 { h0_2 } else { tr.h[t - 1].view() };
                    let mut dz = Array2::<f64>::zeros((bsz, 4 * h));
                    for r in 0..bsz {
                        for u in 0..h {
                            let dh = g3[[r, t, u]] + dh_next[[r, u]];
                            let tc = c[[r, u]].tanh();
                            let d_o = dh * tc;
                            let dc = dh * o[[r, u]] * (1.0 - tc * tc) + dc_next[[r, u]];
                            let di = dc * gg[[r, u]];
                            let dg = dc * i[[r, u]];
                            let df = dc * c_prev[[r, u]];
                            dc_next[[r, u]] = dc * f[[r, u]];
                            dz[[r, u]] = di * i[[r, u]] * (1.0 - i[[r, u]]);
                            dz[[r, h + u]] = df * f[[r, u]] * (1.0 - f[[r, u]]);
                            dz[[r, 2 * h + u]] = dg * (1.0 - gg[[r, u]] * gg[[r, u]]);
                            dz[[r, 3 * h + u]] = d_o * o[[r, u]] * (1.0 - o[[r, u]]);
                        }
                    }
                    dwh += &h_prev.t().dot(&dz);
                    dh_next = dz.dot(&wh2.t());
                    dz_all.slice_mut(s![.., t, ..]).assign(&dz);
                }
                let dz2 = dz_all.into_shape_with_order((bsz * t_len, 4 * h)).unwrap();
                let dx = need[0].then(|| {
                    dz2.dot(&view2(&wxv, d, 4 * h).t()).into_dyn().reshaped(&[bsz, t_len, d])
                });
                let dwx = need[1].then(|| view2(&xv, bsz * t_len, d).t().dot(&dz2).into_dyn());
                let db = need[3].then(|| dz2.sum_axis(Axis(0)).into_dyn());
                vec![
                    dx,
                    dwx,
                    need[2].then(|| dwh.into_dyn()),
                    db,
                    need[4].then(|| dh_next.into_dyn()),
                    need[5].then(|| dc_next.into_dyn()),
                ]
            }),
        )
    }

    // Shape manipulation

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a);
        let y = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {old:?} -> {shape:?}: {e}"));
        self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(g.clone().reshaped(&old))]),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let y = standard(self.value(a).clone().permuted_axes(IxDyn(axes)));
        let mut inv = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(standard(g.clone().permuted_axes(IxDyn(&inv))))]),
        )
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Var {
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = vars.iter().map(|v| self.value(*v).shape()[axis]).collect();
        self.push(
            y,
            vars,
            Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&n, &nd)| {
                        let part = nd.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + n)).to_owned()
                        });
                        start += n;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a);
        let y = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(IxDyn(&shape));
                out.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
                vec![Some(out)]
            }),
        )
    }

    /// Flat-index gather into a rank-1 result.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let shape = self.shape(a);
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let y = Tensor::from_shape_vec(IxDyn(&[idx.len()]), idx.iter().map(|&i| flat[i]).collect()).unwrap();
        self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let mut out = vec![0.0; shape.iter().product()];
                for (gi, &i) in g.iter().zip(&idx) {
                    out[i] += gi;
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&shape), out).unwrap())]
            }),
        )
    }

    // Reductions

    /// Sum over `axis`, kept as a size-1 axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a);
        let y = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(g.broadcast(IxDyn(&shape)).unwrap().to_owned())]),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let y = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(
            y,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::from_elem(IxDyn(&shape), g[IxDyn(&[])]))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // Normalisation

    /// Softmax over the last axis. With `causal`, entry `j` of query row `i`
    /// (second-to-last axis) is masked out for `j > i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap();
        let m = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let rows = x.len() / n;
        let xv = view2(x, rows, n);
        let mut y = Array2::<f64>::zeros((rows, n));
        for r in 0..rows {
            let lim = if causal { (r % m) + 1 } else { n }.min(n);
            let row = xv.row(r);
            let mx = row.iter().take(lim).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                y[[r, j]] = e;
                z += e;
            }
            for j in 0..lim {
                y[[r, j]] /= z;
            }
        }
        let yc = y.clone();
        let y = y.into_dyn().reshaped(&shape);
        self.push(
            y,
            &[a],
            Box::new(move |g, _| {
                let g2 = view2(g, rows, n);
                let mut dx = Array2::<f64>::zeros((rows, n));
                for r in 0..rows {
                    let dot: f64 = (0..n).map(|j| g2[[r, j]] * yc[[r, j]]).sum();
                    for j in 0..n {
                        dx[[r, j]] = yc[[r, j]] * (g2[[r, j]] - dot);
                    }
                }
                vec![Some(dx.into_dyn().reshaped(&shape))]
            }),
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap();
        let rows = x.len() / n;
        let xv = view2(x, rows, n);
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut xhat = Array2::<f64>::zeros((rows, n));
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            inv[r] = 1.0 / (var + EPS).sqrt();
            for j in 0..n {
                xhat[[r, j]] = (row[j] - mu) * inv[r];
            }
        }
        let mut y = xhat.clone();
        for r in 0..rows {
            for j in 0..n {
                y[[r, j]] = y[[r, j]] * gv[j] + bv[j];
            }
        }
        let y = y.into_dyn().reshaped(&shape);
        self.push(
            y,
            &[a, gamma, beta],
            Box::new(move |g, need| {
                let g2 = view2(g, rows, n);
                let mut dx = Array2::<f64>::zeros((rows, n));
                let nf = n as f64;
                for r in 0..rows {
                    let dxh: Vec<f64> = (0..n).map(|j| g2[[r, j]] * gv[j]).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().enumerate().map(|(j, d)| d * xhat[[r, j]]).sum();
                    for j in 0..n {
                        dx[[r, j]] = inv[r] / nf * (nf * dxh[j] - s1 - xhat[[r, j]] * s2);
                    }
                }
                let dgamma = (&g2 * &xhat).sum_axis(Axis(0));
                let dbeta = g2.sum_axis(Axis(0));
                vec![
                    need[0].then(|| dx.into_dyn().reshaped(&shape)),
                    need[1].then(|| dgamma.into_dyn()),
                    need[2].then(|| dbeta.into_dyn()),
                ]
            }),
        )
    }

    // Loss

    /// Sharpe loss of a rank-1 return vector against a fixed benchmark.
    pub fn sharpe_loss(&mut self, r: Var, benchmark: &[f64], k: f64) -> Result<Var> {
        let rp: Vec<f64> = self.value(r).iter().copied().collect();
        let loss = din_core::objective::sharpe_loss(&rp, benchmark, k).map_err(NnError::Core)?;
        let grad = din_core::objective::sharpe_loss_grad(&rp, benchmark, k).map_err(NnError::Core)?;
        let shape = self.shape(r);
        Ok(self.push(
            Tensor::from_elem(IxDyn(&[]), loss),
            &[r],
            Box::new(move |g, _| {
                let s = g[IxDyn(&[])];
                vec![Some(
                    Tensor::from_shape_vec(IxDyn(&shape), grad.iter().map(|v| v * s).collect()).unwrap(),
                )]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(sum(out · probe))/d(param) for every param.
    fn check(ps: &ParamSet, f: impl Fn(&mut Graph) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new(ps);
        let out = f(&mut g);
        let probe = rand_tensor(&mut rng, &g.shape(out));
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = g.param_grads(&grads);
        let eval = |ps: &ParamSet| {
            let mut g = Graph::new(ps);
            let out = f(&mut g);
            (g.value(out) * &probe).sum()
        };
        let h = 1e-5;
        for (pi, (name, t)) in ps.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = ps.clone();
                plus.values_mut()[pi].as_slice_mut().unwrap()[j] += h;
                let mut minus = ps.clone();
                minus.values_mut()[pi].as_slice_mut().unwrap()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[pi].as_slice().unwrap()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{j}]: fd {fd} analytic {an}");
            }
        }
    }

    fn params(shapes: &[(&str, &[usize])]) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::default();
        for (n, s) in shapes {
            ps.insert(n, rand_tensor(&mut rng, s));
        }
        ps
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let ps = params(&[("a", &[2, 3]), ("b", &[3]), ("c", &[2, 1])]);
        check(&ps, |g| {
            let a = g.param(ParamId::new(0));
            let b = g.param(ParamId::new(1));
            let c = g.param(ParamId::new(2));
            let x = g.mul(a, b);
            let x = g.sub(x, c);
            let x = g.elu(x);
            let y = g.sigmoid(a);
            let x = g.add(x, y);
            let x = g.tanh(x);
            let x = g.square(x);
            g.abs(x)
        });
    }

    #[test]
    fn linear_and_bmm_gradients() {
        let ps = params(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5]), ("q", &[2, 3, 5])]);
        check(&ps, |g| {
            let x = g.param(ParamId::new(0));
            let w = g.param(ParamId::new(1));
            let b = g.param(ParamId::new(2));
            let q = g.param(ParamId::new(3));
            let y = g.linear(x, w, Some(b));
            let s = g.bmm(y, q, true);
            g.bmm(s, y, false)
        });
    }

    #[test]
    fn shape_op_gradients() {
        let ps = params(&[("x", &[2, 3, 4])]);
        check(&ps, |g| {
            let x = g.param(ParamId::new(0));
            let p = g.permute(x, &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let n = g.narrow(r, 1, 1, 3);
            let c = g.concat(&[n, r], 1);
            let s = g.sum_axis(c, 0);
            let m = g.mean_axis(c, 1);
            let sm = g.sum_all(m);
            let s = g.mul(s, s);
            let gathered = g.gather(s, vec![0, 2, 2, 5]);
            let gs = g.sum_all(gathered);
            g.add(gs, sm)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let ps = params(&[("x", &[2, 4, 4]), ("gamma", &[4]), ("beta", &[4])]);
        check(&ps, |g| {
            let x = g.param(ParamId::new(0));
            let ga = g.param(ParamId::new(1));
            let be = g.param(ParamId::new(2));
            let s = g.softmax(x, true);
            let l = g.layer_norm(x, ga, be);
            g.add(s, l)
        });
    }

    #[test]
    fn causal_softmax_rows() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[1.0, 5.0, 2.0], [0.5, 0.1, 9.0], [1.0, 2.0, 3.0]].into_dyn());
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let ps = params(&[("x", &[2, 2, 5, 4]), ("k", &[3, 2, 3, 2]), ("b", &[3])]);
        check(&ps, |g| {
            let x = g.param(ParamId::new(0));
            let k = g.param(ParamId::new(1));
            let b = g.param(ParamId::new(2));
            g.conv2d(x, k, b, 1)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 5]);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, bv, 1);
        let y = g.value(y);
        for co in 0..2 {
            for t in 0..6 {
                for a in 0..5 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for dh in 0..3 {
                            for dw in 0..3 {
                                let ts = t as isize + dh as isize - 2;
                                let as_ = a as isize + dw as isize - 1;
                                if ts >= 0 && (0..5).contains(&as_) {
                                    acc += k[[co, ci, dh, dw]] * x[[0, ci, ts as usize, as_ as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, co, t, a]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lstm_gradients() {
        let ps = params(&[
            ("x", &[2, 4, 3]),
            ("wx", &[3, 8]),
            ("wh", &[2, 8]),
            ("b", &[8]),
            ("h0", &[2, 2]),
            ("c0", &[2, 2]),
        ]);
        check(&ps, |g| {
            let v: Vec<Var> = (0..6).map(|i| g.param(ParamId::new(i))).collect();
            g.lstm(v[0], v[1], v[2], v[3], v[4], v[5])
        });
    }

    #[test]
    fn sharpe_loss_node_gradient() {
        let ps = params(&[("r", &[12])]);
        let rb: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.01 - 0.02).collect();
        check(&ps, move |g| {
            let r = g.param(ParamId::new(0));
            g.sharpe_loss(r, &rb, 0.7).unwrap()
        });
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::ones(IxDyn(&[3, 3])));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::training(&ps, 1);
        let x = g.constant(Tensor::ones(IxDyn(&[200])));
        let y = g.dropout(x, 0.5);
        let v = g.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        assert!(v.iter().any(|&e| e == 0.0));
    }
}
