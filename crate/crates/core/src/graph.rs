//! Tape-based reverse-mode automatic differentiation over `ndarray` f32
//! tensors.
//!
//! Every forward op appends a node holding its owned output value plus a
//! closure that maps the output gradient to parent gradients. `backward`
//! walks the tape in reverse. All node values are kept in standard (row
//! major) layout so reshapes of gradients are always valid.
//!
//! Reductions and loss kernels accumulate in f64 so that f32 gradients agree
//! with central finite differences to tight relative tolerances.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamStore;

/// Dynamic-rank f32 tensor, the only value type on the tape.
pub type Arr = ArrayD<f32>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

type BackFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    back: Option<BackFn>,
    label: String,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn of(&self, v: Val) -> Option<&Arr> {
        self.by_node[v.0].as_ref()
    }
}

/// One forward/backward tape bound to a parameter store.
pub struct Graph<'s> {
    nodes: RefCell<Vec<Node>>,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Val>>>,
    pub train: bool,
    drop_rng: RefCell<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, train: bool, seed: u64) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            train,
            drop_rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn push(&self, value: Arr, parents: Vec<usize>, back: Option<BackFn>, label: &str) -> Val {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
            label: label.to_string(),
        });
        Val(nodes.len() - 1)
    }

    /// Leaf with no gradient consumers of its own (inputs, constants).
    /// Unnamed constant input; see [`Graph::input`] to attach a label that
    /// `first_non_finite` can report.
    pub fn inp(&self, value: Arr) -> Val {
        self.input(value, "input")
    }

    pub fn input(&self, value: Arr, label: &str) -> Val {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, vec![], None, label)
    }

    /// Binds a store parameter onto the tape, once per graph.
    pub fn param(&self, id: usize) -> Val {
        if let Some(v) = self.bound.borrow()[id] {
            return v;
        }
        let v = self.push(
            self.store.value(id).clone(),
            vec![],
            None,
            self.store.name(id),
        );
        self.bound.borrow_mut()[id] = Some(v);
        v
    }

    pub fn value(&self, v: Val) -> Arr {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Val) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the first tape node containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            if n.value.iter().any(|x| !x.is_finite()) {
                return Some(n.label.clone());
            }
        }
        None
    }

    // ---- arithmetic ----

    pub fn add(&self, a: Val, b: Val) -> Val {
        self.binary_broadcast(a, b, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: Val, b: Val) -> Val {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: Val, b: Val) -> Val {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let bv = &nodes[b.0].value;
        let out = (av * bv).as_standard_layout().into_owned();
        drop(nodes);
        let back: BackFn = Box::new(move |g, _out, ps| {
            let (av, bv) = (ps[0], ps[1]);
            let ga = reduce_to(&(g * bv), av.shape());
            let gb = reduce_to(&(g * av), bv.shape());
            vec![ga, gb]
        });
        self.push(out, vec![a.0, b.0], Some(back), "mul")
    }

    fn binary_broadcast(
        &self,
        a: Val,
        b: Val,
        label: &str,
        f: fn(&Arr, &Arr) -> Arr,
        coef: fn(&Arr, &Arr) -> (f32, f32),
    ) -> Val {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let bv = &nodes[b.0].value;
        let out = f(av, bv).as_standard_layout().into_owned();
        let (ca, cb) = coef(av, bv);
        drop(nodes);
        let back: BackFn = Box::new(move |g, _out, ps| {
            let ga = reduce_to(&g.mapv(|x| x * ca), ps[0].shape());
            let gb = reduce_to(&g.mapv(|x| x * cb), ps[1].shape());
            vec![ga, gb]
        });
        self.push(out, vec![a.0, b.0], Some(back), label)
    }

    pub fn scale(&self, a: Val, c: f32) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let back: BackFn = Box::new(move |g, _, _| vec![g.mapv(|x| x * c)]);
        self.push(out, vec![a.0], Some(back), "scale")
    }

    /// Division by a scalar, kept as a true division so loss composition is
    /// bit-exact with the documented formula.
    pub fn div_scalar(&self, a: Val, c: f32) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x / c);
        let back: BackFn = Box::new(move |g, _, _| vec![g.mapv(|x| x / c)]);
        self.push(out, vec![a.0], Some(back), "div_scalar")
    }

    pub fn add_scalar(&self, a: Val, c: f32) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        let back: BackFn = Box::new(move |g, _, _| vec![g.clone()]);
        self.push(out, vec![a.0], Some(back), "add_scalar")
    }

    // ---- matrix products ----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, a: Val, b: Val) -> Val {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
        let out = av.dot(&bv).into_dyn();
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, ps| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let av = ps[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let bv = ps[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
            vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
        });
        self.push(out, vec![a.0, b.0], Some(back), "matmul")
    }

    /// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`
    pub fn bmm(&self, a: Val, b: Val) -> Val {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(nb, bv.shape()[0], "bmm batch dims");
        assert_eq!(k, bv.shape()[1], "bmm inner dims");
        let n = bv.shape()[2];
        let mut out = ndarray::Array3::<f32>::zeros((nb, m, n));
        for i in 0..nb {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, ps| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let av = ps[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let bv = ps[1].view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut ga = ndarray::Array3::<f32>::zeros(av.dim());
            let mut gb = ndarray::Array3::<f32>::zeros(bv.dim());
            for i in 0..g3.shape()[0] {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                gb.index_axis_mut(Axis(0), i)
                    .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
            }
            vec![ga.into_dyn(), gb.into_dyn()]
        });
        self.push(out.into_dyn(), vec![a.0, b.0], Some(back), "bmm")
    }

    // ---- shape ops ----

    pub fn reshape(&self, a: Val, shape: &[usize]) -> Val {
        let (in_shape, out) = {
            let av = &self.nodes.borrow()[a.0].value;
            let out = av
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape size mismatch");
            (av.shape().to_vec(), out)
        };
        let back: BackFn = Box::new(move |g, _, _| {
            vec![g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap()]
        });
        self.push(out, vec![a.0], Some(back), "reshape")
    }

    pub fn permute(&self, a: Val, order: &[usize]) -> Val {
        let order_v = order.to_vec();
        let out = self.nodes.borrow()[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(order))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; order_v.len()];
        for (i, &o) in order_v.iter().enumerate() {
            inverse[o] = i;
        }
        let back: BackFn = Box::new(move |g, _, _| {
            vec![g
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned()]
        });
        self.push(out, vec![a.0], Some(back), "permute")
    }

    pub fn concat(&self, axis: usize, parts: &[Val]) -> Val {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
        let out = concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .into_owned();
        let sizes: Vec<usize> = parts.iter().map(|v| nodes[v.0].value.shape()[axis]).collect();
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, _| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut start = 0isize;
            for &sz in &sizes {
                let sl = g
                    .slice_axis(Axis(axis), Slice::new(start, Some(start + sz as isize), 1))
                    .as_standard_layout()
                    .into_owned();
                grads.push(sl);
                start += sz as isize;
            }
            grads
        });
        self.push(out, parts.iter().map(|v| v.0).collect(), Some(back), "concat")
    }

    pub fn narrow(&self, a: Val, axis: usize, start: usize, len: usize) -> Val {
        let out = self.nodes.borrow()[a.0]
            .value
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .as_standard_layout()
            .into_owned();
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut full = Arr::zeros(ps[0].raw_dim());
            full.slice_axis_mut(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .assign(g);
            vec![full]
        });
        self.push(out, vec![a.0], Some(back), "narrow")
    }

    pub fn broadcast_to(&self, a: Val, shape: &[usize]) -> Val {
        let (in_shape, out) = {
            let av = &self.nodes.borrow()[a.0].value;
            let out = av
                .broadcast(IxDyn(shape))
                .expect("broadcast_to incompatible")
                .as_standard_layout()
                .into_owned();
            (av.shape().to_vec(), out)
        };
        let back: BackFn = Box::new(move |g, _, _| vec![reduce_to(g, &in_shape)]);
        self.push(out, vec![a.0], Some(back), "broadcast_to")
    }

    // ---- elementwise nonlinearities ----

    pub fn relu(&self, a: Val) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x.max(0.0));
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut dx = g.clone();
            dx.zip_mut_with(ps[0], |gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0
                }
            });
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "relu")
    }

    pub fn tanh(&self, a: Val) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x.tanh());
        let back: BackFn = Box::new(move |g, out, _| {
            let mut dx = g.clone();
            dx.zip_mut_with(out, |gi, &y| *gi *= 1.0 - y * y);
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "tanh")
    }

    pub fn sigmoid(&self, a: Val) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(sigmoid_scalar);
        let back: BackFn = Box::new(move |g, out, _| {
            let mut dx = g.clone();
            dx.zip_mut_with(out, |gi, &y| *gi *= y * (1.0 - y));
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Val) -> Val {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let out = self.nodes.borrow()[a.0]
            .value
            .mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut dx = g.clone();
            dx.zip_mut_with(ps[0], |gi, &x| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * A * x * x);
                *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "gelu")
    }

    pub fn ln(&self, a: Val) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x.ln());
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut dx = g.clone();
            dx.zip_mut_with(ps[0], |gi, &x| *gi /= x);
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "ln")
    }

    pub fn clamp(&self, a: Val, lo: f32, hi: f32) -> Val {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x.clamp(lo, hi));
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut dx = g.clone();
            dx.zip_mut_with(ps[0], |gi, &x| {
                if x <= lo || x >= hi {
                    *gi = 0.0
                }
            });
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "clamp")
    }

    // ---- normalization, regularization, reductions ----

    /// Layer norm over the last axis. `gamma`/`beta` have shape `[n]`.
    pub fn layer_norm(&self, x: Val, gamma: Val, beta: Val, eps: f32) -> Val {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let gv = &nodes[gamma.0].value;
        let bv = &nodes[beta.0].value;
        let n = *xv.shape().last().expect("layer_norm on 0-d") as f64;
        let mut out = xv.clone();
        let last = xv.ndim() - 1;
        for mut lane in out.lanes_mut(Axis(last)) {
            let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                let xh = ((*v as f64 - mean) * inv) as f32;
                *v = gv[[i]] * xh + bv[[i]];
            }
        }
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, ps| {
            let (xv, gv) = (ps[0], ps[1]);
            let last = xv.ndim() - 1;
            let n = *xv.shape().last().unwrap();
            let nf = n as f64;
            let mut dx = Arr::zeros(xv.raw_dim());
            let mut dgamma = vec![0f64; n];
            let mut dbeta = vec![0f64; n];
            for ((xlane, glane), mut dlane) in xv
                .lanes(Axis(last))
                .into_iter()
                .zip(g.lanes(Axis(last)))
                .zip(dx.lanes_mut(Axis(last)))
            {
                let mean = xlane.iter().map(|&v| v as f64).sum::<f64>() / nf;
                let var = xlane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps as f64).sqrt();
                let mut s1 = 0f64;
                let mut s2 = 0f64;
                for i in 0..n {
                    let xh = (xlane[i] as f64 - mean) * inv;
                    let dg = glane[i] as f64 * gv[[i]] as f64;
                    s1 += dg;
                    s2 += dg * xh;
                    dgamma[i] += glane[i] as f64 * xh;
                    dbeta[i] += glane[i] as f64;
                }
                for i in 0..n {
                    let xh = (xlane[i] as f64 - mean) * inv;
                    let dg = glane[i] as f64 * gv[[i]] as f64;
                    dlane[i] = ((dg - s1 / nf - xh * s2 / nf) * inv) as f32;
                }
            }
            let dgamma = Arr::from_shape_vec(IxDyn(&[n]), dgamma.iter().map(|&v| v as f32).collect()).unwrap();
            let dbeta = Arr::from_shape_vec(IxDyn(&[n]), dbeta.iter().map(|&v| v as f32).collect()).unwrap();
            vec![dx, dgamma, dbeta]
        });
        self.push(out, vec![x.0, gamma.0, beta.0], Some(back), "layer_norm")
    }

    /// Inverted dropout. Identity when not training or p == 0.
    pub fn dropout(&self, a: Val, p: f32) -> Val {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask = {
            let mut rng = self.drop_rng.borrow_mut();
            let shape = self.nodes.borrow()[a.0].value.raw_dim();
            let mut m = Arr::zeros(shape);
            for v in m.iter_mut() {
                *v = if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 };
            }
            Arc::new(m)
        };
        let out = (&self.nodes.borrow()[a.0].value * mask.as_ref())
            .as_standard_layout()
            .into_owned();
        let mask_b = Arc::clone(&mask);
        let back: BackFn = Box::new(move |g, _, _| vec![(g * mask_b.as_ref()).into_owned()]);
        self.push(out, vec![a.0], Some(back), "dropout")
    }

    /// Sum of every element, f64-accumulated, as a rank-0 tensor.
    pub fn sum_all(&self, a: Val) -> Val {
        let s: f64 = self.nodes.borrow()[a.0].value.iter().map(|&v| v as f64).sum();
        let out = Arr::from_elem(IxDyn(&[]), s as f32);
        let back: BackFn = Box::new(move |g, _, ps| {
            let gs = g[[]];
            vec![Arr::from_elem(ps[0].raw_dim(), gs)]
        });
        self.push(out, vec![a.0], Some(back), "sum_all")
    }

    /// Softmax over the last axis with an optional boolean keep-mask
    /// (broadcastable to the input shape). Fully masked rows yield zeros.
    pub fn softmax_masked(&self, a: Val, mask: Option<Arc<ArrayD<bool>>>) -> Val {
        let nodes = self.nodes.borrow();
        let xv = &nodes[a.0].value;
        let last = xv.ndim() - 1;
        let mask_full = mask.as_ref().map(|m| {
            m.broadcast(xv.raw_dim())
                .expect("softmax mask not broadcastable")
                .to_owned()
        });
        let mut out = xv.clone();
        {
            let mask_lanes: Option<Vec<_>> = mask_full
                .as_ref()
                .map(|m| m.lanes(Axis(last)).into_iter().collect());
            for (li, mut lane) in out.lanes_mut(Axis(last)).into_iter().enumerate() {
                let keep = |i: usize| mask_lanes.as_ref().map_or(true, |ml| ml[li][i]);
                let mut mx = f32::NEG_INFINITY;
                for i in 0..lane.len() {
                    if keep(i) {
                        mx = mx.max(lane[i]);
                    }
                }
                if mx == f32::NEG_INFINITY {
                    lane.fill(0.0);
                    continue;
                }
                let mut denom = 0f64;
                for i in 0..lane.len() {
                    if keep(i) {
                        let e = ((lane[i] - mx) as f64).exp();
                        lane[i] = e as f32;
                        denom += e;
                    } else {
                        lane[i] = 0.0;
                    }
                }
                for v in lane.iter_mut() {
                    *v = (*v as f64 / denom) as f32;
                }
            }
        }
        drop(nodes);
        let back: BackFn = Box::new(move |g, out, _| {
            let last = out.ndim() - 1;
            let mut dx = g.clone();
            for (mut dlane, (glane, ylane)) in dx
                .lanes_mut(Axis(last))
                .into_iter()
                .zip(g.lanes(Axis(last)).into_iter().zip(out.lanes(Axis(last))))
            {
                let dot: f64 = glane
                    .iter()
                    .zip(ylane.iter())
                    .map(|(&gi, &yi)| gi as f64 * yi as f64)
                    .sum();
                for i in 0..dlane.len() {
                    dlane[i] = (ylane[i] as f64 * (glane[i] as f64 - dot)) as f32;
                }
            }
            vec![dx]
        });
        self.push(out, vec![a.0], Some(back), "softmax")
    }

    // ---- gather / spatial ops ----

    /// Rows of a 2-D table selected by index; scatter-add on backward.
    pub fn gather_rows(&self, table: Val, idx: Arc<Vec<usize>>) -> Val {
        let out = {
            let nodes = self.nodes.borrow();
            let tv = nodes[table.0].value.view().into_dimensionality::<ndarray::Ix2>()
                .expect("gather_rows wants a 2-D table");
            let mut out = ndarray::Array2::<f32>::zeros((idx.len(), tv.shape()[1]));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&tv.row(r));
            }
            out
        };
        let idx_b = Arc::clone(&idx);
        let back: BackFn = Box::new(move |g, _, ps| {
            let mut gt = Arr::zeros(ps[0].raw_dim());
            let mut gt2 = gt.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (i, &r) in idx_b.iter().enumerate() {
                let mut row = gt2.row_mut(r);
                row += &g2.row(i);
            }
            vec![gt]
        });
        self.push(out.into_dyn(), vec![table.0], Some(back), "gather_rows")
    }

    /// Bilinear sampling of `map [h, w, c]` at continuous `points [n, 2]`
    /// given as `(px, py)` in cell units. Out-of-range reads contribute
    /// zero, matching the kernel `g(a, b) = max(0, 1 - |a - b|)`.
    pub fn bilinear_sample(&self, map: Val, points: Val) -> Val {
        let nodes = self.nodes.borrow();
        let mv = nodes[map.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let pv = nodes[points.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(pv.shape()[1], 2, "points must be [n, 2]");
        let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let n = pv.shape()[0];
        let mut out = ndarray::Array2::<f32>::zeros((n, c));
        for i in 0..n {
            let (px, py) = (pv[[i, 0]], pv[[i, 1]]);
            for (yy, xx, wgt) in bilinear_taps(px, py, h, w) {
                for ch in 0..c {
                    out[[i, ch]] += wgt * mv[[yy, xx, ch]];
                }
            }
        }
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, ps| {
            let mv = ps[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let pv = ps[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
            let mut dmap = ndarray::Array3::<f32>::zeros((h, w, c));
            let mut dpts = ndarray::Array2::<f32>::zeros(pv.raw_dim());
            for i in 0..pv.shape()[0] {
                let (px, py) = (pv[[i, 0]], pv[[i, 1]]);
                for (yy, xx, wgt) in bilinear_taps(px, py, h, w) {
                    for ch in 0..c {
                        dmap[[yy, xx, ch]] += wgt * g2[[i, ch]];
                    }
                }
                let (mut dpx, mut dpy) = (0f64, 0f64);
                for (yy, xx, dwx, dwy) in bilinear_tap_derivs(px, py, h, w) {
                    for ch in 0..c {
                        let m = mv[[yy, xx, ch]] as f64 * g2[[i, ch]] as f64;
                        dpx += dwx as f64 * m;
                        dpy += dwy as f64 * m;
                    }
                }
                dpts[[i, 0]] = dpx as f32;
                dpts[[i, 1]] = dpy as f32;
            }
            vec![dmap.into_dyn(), dpts.into_dyn()]
        });
        self.push(out.into_dyn(), vec![map.0, points.0], Some(back), "bilinear_sample")
    }

    /// 2-D convolution over `x [h, w, cin]` with kernel `[k, k, cin, cout]`
    /// and bias `[cout]`, stride 1, zero same-padding (odd k).
    pub fn conv2d(&self, x: Val, w: Val, b: Val) -> Val {
        let nodes = self.nodes.borrow();
        let xv = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wv = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (h, ww, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (k, cin2, cout) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[1], k, "square kernels only");
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(k % 2, 1, "odd kernel sizes only");
        let col = im2col(&xv, k);
        let wf = wv.to_shape((k * k * cin, cout)).unwrap().to_owned();
        let mut out2 = col.dot(&wf);
        for mut row in out2.rows_mut() {
            row += &bv;
        }
        let out = out2
            .into_shape_with_order((h, ww, cout))
            .unwrap()
            .into_dyn();
        drop(nodes);
        let back: BackFn = Box::new(move |g, _, ps| {
            let xv = ps[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let wv = ps[1].view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (h, ww, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (k, cout) = (wv.shape()[0], wv.shape()[3]);
            let g2 = g.view().into_shape_with_order((h * ww, cout)).unwrap().to_owned();
            let col = im2col(&xv, k);
            let wf = wv.to_shape((k * k * cin, cout)).unwrap().to_owned();
            let dwf = col.t().dot(&g2);
            let dcol = g2.dot(&wf.t());
            let dx = col2im(&dcol, h, ww, cin, k);
            let mut db = ndarray::Array1::<f32>::zeros(cout);
            for row in g2.rows() {
                db += &row;
            }
            vec![
                dx.into_dyn(),
                dwf.into_shape_with_order((k, k, cin, cout)).unwrap().into_dyn(),
                db.into_dyn(),
            ]
        });
        self.push(out, vec![x.0, w.0, b.0], Some(back), "conv2d")
    }

    /// Nearest-neighbor 2x upsample of `[h, w, c]`.
    pub fn upsample2x(&self, x: Val) -> Val {
        let xv = self.nodes.borrow()[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let (h, w, c) = xv.dim();
        let mut out = ndarray::Array3::<f32>::zeros((2 * h, 2 * w, c));
        for y in 0..2 * h {
            for xc in 0..2 * w {
                out.slice_mut(ndarray::s![y, xc, ..])
                    .assign(&xv.slice(ndarray::s![y / 2, xc / 2, ..]));
            }
        }
        let back: BackFn = Box::new(move |g, _, ps| {
            let sh = ps[0].shape();
            let (h, w, c) = (sh[0], sh[1], sh[2]);
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut dx = ndarray::Array3::<f32>::zeros((h, w, c));
            for y in 0..2 * h {
                for xc in 0..2 * w {
                    let mut d = dx.slice_mut(ndarray::s![y / 2, xc / 2, ..]);
                    d += &g3.slice(ndarray::s![y, xc, ..]);
                }
            }
            vec![dx.into_dyn()]
        });
        self.push(out.into_dyn(), vec![x.0], Some(back), "upsample2x")
    }

    /// Cyclic roll of the two leading spatial axes of `[h, w, c]`:
    /// `out[y, x] = in[(y - dy) mod h, (x - dx) mod w]`.
    pub fn roll2d(&self, x: Val, dy: isize, dx: isize) -> Val {
        let out = roll2d_arr(&self.nodes.borrow()[x.0].value, dy, dx);
        let back: BackFn = Box::new(move |g, _, _| vec![roll2d_arr(g, -dy, -dx)]);
        self.push(out, vec![x.0], Some(back), "roll2d")
    }

    // ---- fused loss kernels ----

    /// Sum over all elements of focal loss plus binary cross-entropy.
    /// `pred` must lie strictly inside (0, 1); callers validate.
    pub fn focal_bce_sum(&self, pred: Val, gt: Arc<Arr>, gamma: f32, alpha: f32) -> Val {
        let out = {
            let pv = &self.nodes.borrow()[pred.0].value;
            assert_eq!(pv.shape(), gt.shape(), "focal_bce shape mismatch");
            let mut acc = 0f64;
            for (&p, &y) in pv.iter().zip(gt.iter()) {
                acc += focal_bce_point(p, y, gamma, alpha).0;
            }
            Arr::from_elem(IxDyn(&[]), acc as f32)
        };
        let gt_b = Arc::clone(&gt);
        let back: BackFn = Box::new(move |g, _, ps| {
            let gs = g[[]];
            let mut dp = ps[0].clone();
            dp.zip_mut_with(gt_b.as_ref(), |pi, &y| {
                *pi = focal_bce_point(*pi, y, gamma, alpha).1 * gs;
            });
            vec![dp]
        });
        self.push(out, vec![pred.0], Some(back), "focal_bce_sum")
    }

    /// Smooth-L1 (beta = 1) summed over elements where `mask` is nonzero.
    /// `mask` has the shape of `pred` minus its last axis and gates whole
    /// vectors (e.g. both flow components of one cell).
    pub fn smooth_l1_sum_masked(&self, pred: Val, target: Arc<Arr>, mask: Arc<Arr>) -> Val {
        let out = {
            let pv = &self.nodes.borrow()[pred.0].value;
            assert_eq!(pv.shape(), target.shape(), "smooth_l1 shape mismatch");
            assert_eq!(
                &pv.shape()[..pv.ndim() - 1],
                mask.shape(),
                "smooth_l1 mask shape mismatch"
            );
            let last = pv.shape()[pv.ndim() - 1];
            let mut acc = 0f64;
            for (i, (&p, &t)) in pv.iter().zip(target.iter()).enumerate() {
                let m = mask.as_slice().unwrap()[i / last];
                if m != 0.0 {
                    let d = (p - t).abs();
                    acc += if d < 1.0 { 0.5 * d as f64 * d as f64 } else { d as f64 - 0.5 };
                }
            }
            Arr::from_elem(IxDyn(&[]), acc as f32)
        };
        let (t_b, m_b) = (Arc::clone(&target), Arc::clone(&mask));
        let back: BackFn = Box::new(move |g, _, ps| {
            let gs = g[[]];
            let last = ps[0].shape()[ps[0].ndim() - 1];
            let mut dp = ps[0].clone();
            let ms = m_b.as_slice().unwrap();
            for (i, (pi, &t)) in dp.iter_mut().zip(t_b.iter()).enumerate() {
                if ms[i / last] != 0.0 {
                    let d = *pi - t;
                    *pi = gs * d.clamp(-1.0, 1.0);
                } else {
                    *pi = 0.0;
                }
            }
            vec![dp]
        });
        self.push(out, vec![pred.0], Some(back), "smooth_l1_sum")
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Val) -> Grads {
        assert_eq!(
            self.nodes.borrow()[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let seed = Arr::from_elem(self.nodes.borrow()[loss.0].value.raw_dim(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse-mode sweep from any node with an explicit output gradient.
    pub fn backward_with(&self, root: Val, seed: Arr) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.0].value.shape(), "seed shape");
        let mut by_node: Vec<Option<Arr>> = vec![None; nodes.len()];
        by_node[root.0] = Some(seed);
        let loss = root;
        for i in (0..=loss.0).rev() {
            let Some(g) = by_node[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Arr> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let pgrads = back(&g, &node.value, &parent_vals);
                assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for {}", nodes[p].label);
                    match &mut by_node[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            by_node[i] = Some(g);
        }
        Grads { by_node }
    }

    /// Parameter gradients aligned with the store, zeros for unused params.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Arr>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| slot.and_then(|v| grads.of(v).cloned()))
            .collect()
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(value, d/dpred)` of focal + BCE at one point, f64 internals.
pub fn focal_bce_point(p: f32, y: f32, gamma: f32, alpha: f32) -> (f64, f32) {
    let (p, y, gamma, alpha) = (p as f64, y as f64, gamma as f64, alpha as f64);
    let (pt, at, dpt) = if y >= 0.5 {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    let focal = -at * (1.0 - pt).powf(gamma) * pt.ln();
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let dfocal_dpt = -at * ((1.0 - pt).powf(gamma) / pt
        - gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln());
    let dbce = (p - y) / (p * (1.0 - p));
    (focal + bce, (dfocal_dpt * dpt + dbce) as f32)
}

/// Nonzero bilinear taps `(y, x, weight)` for a point, zero-extended.
pub(crate) fn bilinear_taps(px: f32, py: f32, h: usize, w: usize) -> Vec<(usize, usize, f32)> {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            let wgt = wy * wx;
            if wgt != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                taps.push((yy as usize, xx as usize, wgt));
            }
        }
    }
    taps
}

/// `(y, x, dweight/dpx, dweight/dpy)` for in-range taps.
fn bilinear_tap_derivs(px: f32, py: f32, h: usize, w: usize) -> Vec<(usize, usize, f32, f32)> {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, wy, dwy) in [(0isize, 1.0 - fy, -1.0f32), (1, fy, 1.0)] {
        for (dx, wx, dwx) in [(0isize, 1.0 - fx, -1.0f32), (1, fx, 1.0)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                taps.push((yy as usize, xx as usize, dwx * wy, wx * dwy));
            }
        }
    }
    taps
}

fn im2col(x: &ndarray::ArrayView3<f32>, k: usize) -> ndarray::Array2<f32> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = (k - 1) / 2;
    let mut col = ndarray::Array2::<f32>::zeros((h * w, k * k * cin));
    for y in 0..h {
        for xc in 0..w {
            let row = y * w + xc;
            for ky in 0..k {
                let sy = y as isize + ky as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xc as isize + kx as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * cin;
                    for ci in 0..cin {
                        col[[row, base + ci]] = x[[sy as usize, sx as usize, ci]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &ndarray::Array2<f32>, h: usize, w: usize, cin: usize, k: usize) -> ndarray::Array3<f32> {
    let p = (k - 1) / 2;
    let mut dx = ndarray::Array3::<f32>::zeros((h, w, cin));
    for y in 0..h {
        for xc in 0..w {
            let row = y * w + xc;
            for ky in 0..k {
                let sy = y as isize + ky as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xc as isize + kx as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * cin;
                    for ci in 0..cin {
                        dx[[sy as usize, sx as usize, ci]] += dcol[[row, base + ci]];
                    }
                }
            }
        }
    }
    dx
}

fn roll2d_arr(x: &Arr, dy: isize, dx: isize) -> Arr {
    let (h, w) = (x.shape()[0] as isize, x.shape()[1] as isize);
    let mut out = Arr::zeros(x.raw_dim());
    for y in 0..h {
        let sy = (y - dy).rem_euclid(h) as usize;
        for xc in 0..w {
            let sx = (xc - dx).rem_euclid(w) as usize;
            out.index_axis_mut(Axis(0), y as usize)
                .index_axis_mut(Axis(0), xc as usize)
                .assign(&x.index_axis(Axis(0), sy).index_axis(Axis(0), sx));
        }
    }
    out
}

/// Sums `g` down to `shape` per numpy broadcasting rules.
pub fn reduce_to(g: &Arr, shape: &[usize]) -> Arr {
    let mut cur = g.clone();
    while cur.ndim() > shape.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && cur.shape()[ax] > 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    cur.as_standard_layout().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check_inputs, FdSpec};
    use crate::nn::{Init, ParamStore};
    use ndarray::IxDyn;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Arr {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
        Arr::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    fn empty_store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn add_broadcasts_both_ways() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let a = g.input(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, 2.0]).unwrap(), "a");
        let b = g.input(Arr::from_shape_vec(IxDyn(&[1, 3]), vec![10.0, 20.0, 30.0]).unwrap(), "b");
        let c = g.add(a, b);
        assert_eq!(g.shape(c), vec![2, 3]);
        assert_eq!(g.value(c)[[1, 2]], 32.0);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.of(a).unwrap()[[0, 0]], 3.0);
        assert_eq!(grads.of(b).unwrap()[[0, 1]], 2.0);
    }

    #[test]
    fn matmul_matches_manual() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let a = g.input(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(), "a");
        let b = g.input(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![5.0, 6.0, 7.0, 8.0]).unwrap(), "b");
        let c = g.matmul(a, b);
        let v = g.value(c);
        assert_eq!(v[[0, 0]], 19.0);
        assert_eq!(v[[1, 1]], 50.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_rows_zero() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let mut r = rng(3);
        let x = g.input(randn(&[4, 5], &mut r), "x");
        let mut mask = ndarray::ArrayD::from_elem(IxDyn(&[4, 5]), true);
        for j in 0..5 {
            mask[[2, j]] = false;
        }
        mask[[1, 0]] = false;
        let y = g.softmax_masked(x, Some(Arc::new(mask)));
        let yv = g.value(y);
        for i in [0usize, 1, 3] {
            let s: f32 = (0..5).map(|j| yv[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
        assert_eq!(yv[[1, 0]], 0.0);
        for j in 0..5 {
            assert_eq!(yv[[2, j]], 0.0, "fully masked row must be zero");
        }
    }

    #[test]
    fn roll2d_round_trips() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let mut r = rng(5);
        let xa = randn(&[4, 6, 2], &mut r);
        let x = g.input(xa.clone(), "x");
        let y = g.roll2d(x, 1, 2);
        let z = g.roll2d(y, -1, -2);
        assert_eq!(g.value(z), xa);
        let yv = g.value(y);
        assert_eq!(yv[[1, 2, 0]], xa[[0, 0, 0]]);
    }

    #[test]
    fn upsample2x_repeats_nearest() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let x = g.input(Arr::from_shape_vec(IxDyn(&[1, 2, 1]), vec![3.0, 7.0]).unwrap(), "x");
        let y = g.upsample2x(x);
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 4, 1]);
        assert_eq!(v[[0, 0, 0]], 3.0);
        assert_eq!(v[[1, 1, 0]], 3.0);
        assert_eq!(v[[0, 3, 0]], 7.0);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let t = g.input(
            Arr::from_shape_vec(IxDyn(&[3, 2]), vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            "t",
        );
        let out = g.gather_rows(t, Arc::new(vec![2, 0, 2]));
        let v = g.value(out);
        assert_eq!(v[[0, 0]], 5.0);
        assert_eq!(v[[1, 1]], 2.0);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let gt = grads.of(t).unwrap();
        assert_eq!(gt[[2, 0]], 2.0);
        assert_eq!(gt[[1, 0]], 0.0);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_mean() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let mut r = rng(7);
        let xa = randn(&[32, 32], &mut r);
        let x = g.input(xa.clone(), "x");
        let y = g.dropout(x, 0.5);
        assert_eq!(y, x, "eval-mode dropout is a no-op");

        let gt = Graph::new(&st, true, 9);
        let x = gt.input(xa.clone(), "x");
        let y = gt.dropout(x, 0.5);
        let yv = gt.value(y);
        let kept = yv.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 300 && kept < 700, "kept {kept} of 1024");
    }

    // Finite-difference checks for every differentiable primitive.

    #[test]
    fn fd_elementwise_ops() {
        let st = empty_store();
        for (name, f) in [
            ("tanh", (|g: &Graph, x: Val| g.tanh(x)) as fn(&Graph, Val) -> Val),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("relu", |g, x| g.relu(x)),
            ("gelu", |g, x| g.gelu(x)),
            ("clamp", |g, x| g.clamp(x, -0.5, 0.5)),
        ] {
            let mut r = rng(11);
            for inst in 0..20 {
                // relu and clamp are not differentiable at 0 and +-0.5;
                // keep samples clear of those points.
                let x0 = randn(&[3, 4], &mut r).mapv(|v| {
                    let mut v = v;
                    if v.abs() < 0.03 {
                        v += 0.06;
                    }
                    if (v.abs() - 0.5).abs() < 0.03 {
                        v += 0.06;
                    }
                    v
                });
                fd_check_inputs(&st, &[x0], |g, xs| f(g, xs[0]), &FdSpec::default())
                    .unwrap_or_else(|e| panic!("{name} instance {inst}: {e}"));
            }
        }
    }

    #[test]
    fn fd_ln_positive_domain() {
        let st = empty_store();
        let mut r = rng(13);
        for _ in 0..20 {
            let x0 = randn(&[3, 3], &mut r).mapv(|v| v.abs() + 0.5);
            fd_check_inputs(&st, &[x0], |g, xs| g.ln(xs[0]), &FdSpec::default()).unwrap();
        }
    }

    #[test]
    fn fd_binary_and_matmul() {
        let st = empty_store();
        let mut r = rng(17);
        for _ in 0..20 {
            let a = randn(&[2, 3], &mut r);
            let b = randn(&[1, 3], &mut r);
            fd_check_inputs(
                &st,
                &[a, b],
                |g, xs| {
                    let m = g.mul(xs[0], xs[1]);
                    g.add(m, xs[0])
                },
                &FdSpec::default(),
            )
            .unwrap();

            let a = randn(&[3, 4], &mut r);
            let b = randn(&[4, 2], &mut r);
            fd_check_inputs(
                &st,
                &[a, b],
                |g, xs| {
                    let m = g.matmul(xs[0], xs[1]);
                    g.tanh(m)
                },
                &FdSpec::default(),
            )
            .unwrap();

            let a = randn(&[2, 3, 4], &mut r);
            let b = randn(&[2, 4, 2], &mut r);
            fd_check_inputs(&st, &[a, b], |g, xs| g.bmm(xs[0], xs[1]), &FdSpec::default())
                .unwrap();
        }
    }

    #[test]
    fn fd_shape_ops() {
        let st = empty_store();
        let mut r = rng(19);
        for _ in 0..20 {
            let a = randn(&[2, 3, 4], &mut r);
            fd_check_inputs(
                &st,
                &[a],
                |g, xs| {
                    let y = g.permute(xs[0], &[2, 0, 1]);
                    let y = g.reshape(y, &[4, 6]);
                    let y = g.narrow(y, 1, 1, 3);
                    let y = g.reshape(y, &[12]);
                    let y2 = g.broadcast_to(xs[0], &[2, 2, 3, 4]);
                    let y2 = g.reshape(g.tanh(y2), &[48]);
                    g.concat(0, &[y, y2])
                },
                &FdSpec::default(),
            )
            .unwrap();

            let a = randn(&[2, 3], &mut r);
            let b = randn(&[2, 2], &mut r);
            fd_check_inputs(
                &st,
                &[a, b],
                |g, xs| {
                    let c = g.concat(1, &[xs[0], xs[1], xs[0]]);
                    g.sigmoid(c)
                },
                &FdSpec::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_softmax_layernorm() {
        let mut st = ParamStore::new();
        let gamma = st.register("ln.g", &[5], Init::Ones);
        let beta = st.register("ln.b", &[5], Init::Zeros);
        st.init_all(42);
        let mut r = rng(23);
        for i in 0..20 {
            let x = randn(&[3, 5], &mut r);
            let mask = if i % 2 == 0 {
                None
            } else {
                let mut m = ndarray::ArrayD::from_elem(IxDyn(&[3, 5]), true);
                m[[0, 1]] = false;
                m[[2, 4]] = false;
                Some(Arc::new(m))
            };
            fd_check_inputs(
                &st,
                &[x],
                |g, xs| {
                    let y = g.softmax_masked(xs[0], mask.clone());
                    let z = g.layer_norm(xs[0], g.param(gamma), g.param(beta), 1e-5);
                    let a = g.reshape(g.mul(y, y), &[15]);
                    let b = g.reshape(g.tanh(z), &[15]);
                    g.concat(0, &[a, b])
                },
                &FdSpec::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_spatial_ops() {
        let st = empty_store();
        let mut r = rng(29);
        for _ in 0..20 {
            let x = randn(&[4, 4, 3], &mut r);
            fd_check_inputs(
                &st,
                &[x],
                |g, xs| {
                    let y = g.upsample2x(xs[0]);
                    let y = g.roll2d(y, 3, -1);
                    g.tanh(y)
                },
                &FdSpec::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_conv2d() {
        let st = empty_store();
        let mut r = rng(31);
        for inst in 0..20 {
            let k = if inst % 2 == 0 { 3 } else { 1 };
            let x = randn(&[5, 4, 2], &mut r);
            let w = randn(&[k, k, 2, 3], &mut r);
            let b = randn(&[3], &mut r);
            fd_check_inputs(
                &st,
                &[x, w, b],
                |g, xs| {
                    let y = g.conv2d(xs[0], xs[1], xs[2]);
                    g.tanh(y)
                },
                &FdSpec::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_bilinear_sample() {
        let st = empty_store();
        let mut r = rng(37);
        for _ in 0..20 {
            let map = randn(&[5, 6, 3], &mut r);
            // Keep fractional parts away from 0/1: the kernel has kinks at
            // integer coordinates where one-sided derivatives differ.
            let mut pts = randn(&[7, 2], &mut r);
            for p in pts.iter_mut() {
                let cell = (*p * 3.0 + 2.0).floor();
                let frac = 0.25 + 0.5 * (*p * 7.91).fract().abs();
                *p = cell + frac;
            }
            fd_check_inputs(
                &st,
                &[map, pts],
                |g, xs| g.bilinear_sample(xs[0], xs[1]),
                &FdSpec { eps: 2e-3, ..FdSpec::default() },
            )
            .unwrap();
        }
    }

    // The loss kernels reduce to an f32 scalar on the tape, so the finite
    // difference inherits that scalar's quantization. Small operands and a
    // larger step keep the comparison well above the noise floor.
    #[test]
    fn fd_losses() {
        let st = empty_store();
        let mut r = rng(41);
        let spec = FdSpec { eps: 5e-3, atol: 1e-4, max_checks: 6, ..FdSpec::default() };
        for _ in 0..20 {
            let logits = randn(&[2, 2, 1], &mut r);
            let gt = Arc::new(randn(&[2, 2, 1], &mut r).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            let gt2 = Arc::clone(&gt);
            fd_check_inputs(
                &st,
                &[logits],
                |g, xs| {
                    let p = g.sigmoid(xs[0]);
                    let p = g.clamp(p, 1e-6, 1.0 - 1e-6);
                    g.focal_bce_sum(p, Arc::clone(&gt2), 2.0, 0.25)
                },
                &spec,
            )
            .unwrap();

            let pred = randn(&[2, 2, 2], &mut r).mapv(|v| v * 2.0);
            let target = Arc::new(randn(&[2, 2, 2], &mut r).mapv(|v| v * 2.0));
            let mask = Arc::new(randn(&[2, 2], &mut r).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            let (t2, m2) = (Arc::clone(&target), Arc::clone(&mask));
            fd_check_inputs(
                &st,
                &[pred],
                |g, xs| g.smooth_l1_sum_masked(xs[0], Arc::clone(&t2), Arc::clone(&m2)),
                &spec,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_sum_all() {
        let st = empty_store();
        let mut r = rng(47);
        let spec = FdSpec { eps: 5e-3, atol: 1e-4, ..FdSpec::default() };
        for _ in 0..20 {
            let x = randn(&[2, 3], &mut r);
            fd_check_inputs(
                &st,
                &[x],
                |g, xs| {
                    let t = g.tanh(xs[0]);
                    g.sum_all(t)
                },
                &spec,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_gather_and_scale() {
        let st = empty_store();
        let mut r = rng(43);
        for _ in 0..20 {
            let table = randn(&[6, 3], &mut r);
            fd_check_inputs(
                &st,
                &[table],
                |g, xs| {
                    let rows = g.gather_rows(xs[0], Arc::new(vec![0, 5, 2, 5]));
                    let y = g.scale(rows, 1.7);
                    let y = g.div_scalar(y, 3.0);
                    g.add_scalar(y, 0.1)
                },
                &FdSpec::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let x = g.input(Arr::from_elem(IxDyn(&[1]), 3.0), "x");
        let y = g.mul(x, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.of(x).unwrap()[[0]], 6.0);
    }

    #[test]
    fn first_non_finite_names_the_node() {
        let st = empty_store();
        let g = Graph::new(&st, false, 0);
        let x = g.input(Arr::from_elem(IxDyn(&[2]), -1.0), "neg_input");
        let y = g.ln(x);
        let _ = g.sum_all(y);
        assert_eq!(g.first_non_finite().as_deref(), Some("ln"));
    }
}
