//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op records its
//! output value, its parent nodes, and a closure that maps the output
//! gradient to parent gradients. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order.

use std::collections::BTreeMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, for_each_broadcast, reduce_to_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input needs a gradient; closures may skip work when false.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to a parameter; `None` if the parameter was not
    /// used or did not influence the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Inserts a parameter as a tracked leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Records an op with a caller-provided backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        if tracked {
            self.push(value, inputs.to_vec(), Some(backward), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            // Interior gradients are dropped once propagated; leaves keep theirs.
            let Some(grad) = grads[i].take() else { continue };
            let args = BackwardArgs {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|p| self.nodes[p.0].tracked).collect(),
            };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].tracked {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "gradient shape mismatch");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    // ---------------------------------------------------------------------
    // Elementwise and broadcasting ops
    // ---------------------------------------------------------------------

    fn broadcast_binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", sa, sb));
        let mut out = Tensor::zeros(&out_shape);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let dst = out.data_mut();
            if sa == sb {
                for i in 0..dst.len() {
                    dst[i] = op.apply(va[i], vb[i]);
                }
            } else {
                for_each_broadcast(&sa, &sb, &out_shape, |i, ia, ib| dst[i] = op.apply(va[ia], vb[ib]));
            }
        }
        self.custom(
            &[a, b],
            out,
            Box::new(move |args| {
                let (va, vb) = (args.inputs[0], args.inputs[1]);
                let g = args.grad;
                let shape = g.shape().to_vec();
                let mut ga = args.needs[0].then(|| Tensor::zeros(&shape));
                let mut gb = args.needs[1].then(|| Tensor::zeros(&shape));
                let (da, db, gd) = (va.data(), vb.data(), g.data());
                for_each_broadcast(va.shape(), vb.shape(), &shape, |i, ia, ib| {
                    let (pa, pb) = op.partials(da[ia], db[ib]);
                    if let Some(ga) = ga.as_mut() {
                        ga.data_mut()[i] = gd[i] * pa;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.data_mut()[i] = gd[i] * pb;
                    }
                });
                vec![
                    ga.map(|t| reduce_to_shape(&t, va.shape())),
                    gb.map(|t| reduce_to_shape(&t, vb.shape())),
                ]
            }),
        )
    }

    /// Broadcasting addition (equal ranks; each axis equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinaryOp::Sub)
    }

    /// Broadcasting product (equal ranks; each axis equal or 1).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinaryOp::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.custom(
            &[a],
            out,
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let g = args.grad.data();
                let d = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::from_vec(args.grad.shape(), d))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.custom(&[a], out, Box::new(move |args| vec![Some(args.grad.scale(k))]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.custom(&[a], out, Box::new(|args| vec![Some(args.grad.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Leaky ReLU with negative slope 0.1.
    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |v| if v > 0.0 { v } else { LEAKY_SLOPE * v },
            |x, _| if x > 0.0 { 1.0 } else { LEAKY_SLOPE },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
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
        self.unary(a, |v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiplies by a fixed tensor (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let c = self.constant(mask);
        self.mul(a, c)
    }

    // ---------------------------------------------------------------------
    // Shape ops
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.custom(
            &[a],
            out,
            Box::new(|args| vec![Some(args.grad.clone().reshape(args.inputs[0].shape()))]),
        )
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat0(&values);
        let sizes: Vec<usize> = values.iter().map(|t| t.shape()[0]).collect();
        self.custom(
            parts,
            out,
            Box::new(move |args| {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let g = args.needs[i].then(|| args.grad.narrow0(start, n));
                        start += n;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Slice `[start, start+len)` along the first axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).narrow0(start, len);
        self.custom(
            &[a],
            out,
            Box::new(move |args| {
                let x = args.inputs[0];
                let inner: usize = x.shape()[1..].iter().product();
                let mut g = Tensor::zeros(x.shape());
                g.data_mut()[start * inner..(start + len) * inner].copy_from_slice(args.grad.data());
                vec![Some(g)]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose2(self.value(a));
        self.custom(&[a], out, Box::new(|args| vec![Some(transpose2(args.grad))]))
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), 0.0);
        self.custom(
            &[a, b],
            out,
            Box::new(move |args| {
                let (va, vb, g) = (args.inputs[0], args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let mut t = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), false, vb.data(), true, t.data_mut(), 0.0);
                    t
                });
                let gb = args.needs[1].then(|| {
                    let mut t = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, va.data(), true, g.data(), false, t.data_mut(), 0.0);
                    t
                });
                vec![ga, gb]
            }),
        )
    }

    /// Row-wise softmax of a `[m,n]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                out[r * n + c] = e;
                s += e;
            }
            for c in 0..n {
                out[r * n + c] /= s;
            }
        }
        self.custom(
            &[a],
            Tensor::from_vec(&[m, n], out),
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| y[r * n + c] * g[r * n + c]).sum();
                    for c in 0..n {
                        d[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[m, n], d))]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Image ops on C×H×W tensors
    // ---------------------------------------------------------------------

    /// 2-D convolution of a single `C×H×W` image with weights `O×C×k×k`
    /// and an optional bias of length `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, layout: ConvLayout) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
        assert_eq!(ws[1], c, "conv input has {} channels, weight expects {}", c, ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (o, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(c, h, wd, k, layout);
        let n = geom.out_h * geom.out_w;
        let cols = geom.im2col(self.value(x).data());
        let mut out = Tensor::zeros(&[o, geom.out_h, geom.out_w]);
        gemm(o, c * k * k, n, self.value(w).data(), false, &cols, false, out.data_mut(), 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "conv bias length mismatch");
            for (oc, chunk) in out.data_mut().chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.custom(
            &inputs,
            out,
            Box::new(move |args| {
                let (vx, vw, g) = (args.inputs[0], args.inputs[1], args.grad);
                let ckk = c * k * k;
                let gw = args.needs[1].then(|| {
                    let cols = geom.im2col(vx.data());
                    let mut t = Tensor::zeros(vw.shape());
                    gemm(o, n, ckk, g.data(), false, &cols, true, t.data_mut(), 0.0);
                    t
                });
                let gx = args.needs[0].then(|| {
                    let mut dcols = vec![0.0; ckk * n];
                    gemm(ckk, o, n, vw.data(), true, g.data(), false, &mut dcols, 0.0);
                    Tensor::from_vec(vx.shape(), geom.col2im(&dcols))
                });
                let mut res = vec![gx, gw];
                if args.inputs.len() == 3 {
                    res.push(args.needs[2].then(|| {
                        Tensor::from_vec(&[o], g.data().chunks(n).map(|r| r.iter().sum()).collect())
                    }));
                }
                res
            }),
        )
    }

    /// Mean over spatial axes: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let n = (h * w) as f64;
        let out = Tensor::from_vec(&[c], self.value(x).data().chunks(h * w).map(|r| r.iter().sum::<f64>() / n).collect());
        self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let g = args.grad.data();
                vec![Some(Tensor::from_fn(&[c, h, w], |i| g[i / (h * w)] / n))]
            }),
        )
    }

    /// Max over spatial axes: `C×H×W → C`. Ties route the gradient to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = h * w;
        let mut arg = vec![0usize; c];
        let mut out = vec![0.0; c];
        for (ch, row) in self.value(x).data().chunks(hw).enumerate() {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            arg[ch] = ch * hw + bi;
            out[ch] = bv;
        }
        self.custom(
            &[x],
            Tensor::from_vec(&[c], out),
            Box::new(move |args| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for (ch, &i) in arg.iter().enumerate() {
                    d.data_mut()[i] = args.grad.data()[ch];
                }
                vec![Some(d)]
            }),
        )
    }

    /// Max across channels: `C×H×W → 1×H×W`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = h * w;
        let xd = self.value(x).data();
        let mut arg = vec![0usize; hw];
        let mut out = vec![f64::NEG_INFINITY; hw];
        for ch in 0..c {
            for p in 0..hw {
                let v = xd[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    arg[p] = ch * hw + p;
                }
            }
        }
        self.custom(
            &[x],
            Tensor::from_vec(&[1, h, w], out),
            Box::new(move |args| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for (p, &i) in arg.iter().enumerate() {
                    d.data_mut()[i] = args.grad.data()[p];
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean across channels: `C×H×W → 1×H×W`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = h * w;
        let xd = self.value(x).data();
        let out = Tensor::from_fn(&[1, h, w], |p| (0..c).map(|ch| xd[ch * hw + p]).sum::<f64>() / c as f64);
        self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let g = args.grad.data();
                vec![Some(Tensor::from_fn(&[c, h, w], |i| g[i % hw] / c as f64))]
            }),
        )
    }

    /// Divides each entry along axis 0 by the L2 norm over axis 0, per
    /// position in the trailing axes. Norms below `eps` are clamped to `eps`.
    pub fn normalize_axis0(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = shape[0];
        let inner: usize = shape[1..].iter().product();
        let xd = self.value(x).data();
        let mut norms = vec![0.0; inner];
        for ch in 0..c {
            for p in 0..inner {
                norms[p] += xd[ch * inner + p] * xd[ch * inner + p];
            }
        }
        let norms: Vec<f64> = norms.into_iter().map(|s| s.sqrt()).collect();
        let out = Tensor::from_fn(&shape, |i| xd[i] / norms[i % inner].max(eps));
        self.custom(
            &[x],
            out,
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut dots = vec![0.0; inner];
                for ch in 0..c {
                    for p in 0..inner {
                        dots[p] += y[ch * inner + p] * g[ch * inner + p];
                    }
                }
                let d = Tensor::from_fn(&shape, |i| {
                    let p = i % inner;
                    if norms[p] > eps {
                        (g[i] - y[i] * dots[p]) / norms[p]
                    } else {
                        g[i] / eps
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    /// Flips the sign of a vector whose first entry is negative.
    pub fn canonical_sign(&mut self, x: Var) -> Var {
        let s = if self.value(x).data()[0] < 0.0 { -1.0 } else { 1.0 };
        self.scale(x, s)
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
        }
    }
}

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayout {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvLayout {
    /// Stride 1, "same" padding for a `k×k` kernel with dilation `d`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: (k - 1) / 2,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    layout: ConvLayout,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, layout: ConvLayout) -> Self {
        let span = layout.dilation * (k - 1) + 1;
        assert!(h + 2 * layout.padding >= span && w + 2 * layout.padding >= span, "kernel larger than padded input");
        Self {
            c,
            h,
            w,
            k,
            layout,
            out_h: (h + 2 * layout.padding - span) / layout.stride + 1,
            out_w: (w + 2 * layout.padding - span) / layout.stride + 1,
        }
    }

    /// Source coordinate for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.layout.stride + t * self.layout.dilation) as isize - self.layout.padding as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.out_h * self.out_w;
        let mut cols = vec![0.0; self.c * self.k * self.k * n];
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ch * self.k + ki) * self.k + kj) * n;
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let base = (ch * self.h + iy) * self.w;
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                cols[row + oy * self.out_w + ox] = x[base + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.out_h * self.out_w;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ch * self.k + ki) * self.k + kj) * n;
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let base = (ch * self.h + iy) * self.w;
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                x[base + ix] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = t.dims2();
    let d = t.data();
    Tensor::from_fn(&[n, m], |i| d[(i % m) * n + i / m])
}

/// `c = op(a)·op(b) + beta·c` for row-major operands, where `op` optionally
/// transposes. `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], layout: ConvLayout) -> Tensor {
        let (c, h, wd) = x.dims3();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let span = layout.dilation * (k - 1) + 1;
        let oh = (h + 2 * layout.padding - span) / layout.stride + 1;
        let ow = (wd + 2 * layout.padding - span) / layout.stride + 1;
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * layout.stride + ki * layout.dilation) as isize - layout.padding as isize;
                                let ix = (ox * layout.stride + kj * layout.dilation) as isize - layout.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((oc * c + ic) * k + ki) * k + kj] * x.at3(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set3(oc, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for layout in [ConvLayout::same(3, 1), ConvLayout::strided(3, 2), ConvLayout::same(3, 2), ConvLayout::same(1, 1)] {
            let k = if layout.padding == 0 && layout.dilation == 1 { 1 } else { 3 };
            let x = Tensor::randn(&[3, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let mut g = Graph::new();
            let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(vx, vw, Some(vb), layout);
            let expect = naive_conv(&x, &w, b.data(), layout);
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            Tensor::randn(&[2, 5, 6], 1.0, &mut rng),
            Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng),
            Tensor::randn(&[3], 1.0, &mut rng),
        ];
        let report = check_inputs(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvLayout::strided(3, 2));
            let y = g.square(y);
            g.sum(y)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = vec![
            Tensor::randn(&[3, 4, 5], 1.0, &mut rng),
            Tensor::randn(&[3, 1, 1], 1.0, &mut rng),
            Tensor::randn(&[1, 4, 5], 1.0, &mut rng),
        ];
        let report = check_inputs(&inputs, |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[2]);
            let c = g.sigmoid(b);
            let d = g.leaky_relu(b);
            let e = g.mul(c, d);
            let n = g.normalize_axis0(e, 1e-12);
            let mx = g.channel_max(n);
            let mn = g.channel_mean(e);
            let gm = g.global_max_pool(e);
            let ga = g.global_avg_pool(e);
            let s1 = g.sum(mx);
            let s2 = g.sum(mn);
            let s3 = g.mul(gm, ga);
            let s3 = g.sum(s3);
            let t = g.add(s1, s2);
            let t = g.add(t, s3);
            g.exp(t)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![Tensor::randn(&[4, 3], 1.0, &mut rng), Tensor::randn(&[3, 5], 1.0, &mut rng)];
        let report = check_inputs(&inputs, |g, v| {
            let m = g.matmul(v[0], v[1]);
            let s = g.softmax_rows(m);
            let t = g.transpose(s);
            let w = g.narrow(t, 1, 3);
            let w = g.square(w);
            g.sum(w)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.7).sin() * 30.0));
        let s = g.softmax_rows(x);
        for row in g.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untracked_inputs_produce_no_tape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.square(a);
        let v = g.variable(Tensor::scalar(3.0));
        let c = g.mul(b, v);
        let grads = g.backward(c);
        assert_eq!(grads.get(v).unwrap().item(), 4.0);
        assert!(grads.get(a).is_none());
    }
}
