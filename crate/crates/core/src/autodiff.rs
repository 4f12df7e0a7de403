//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is an eager tape: every operation computes its value when the
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Only the operations the encoders and losses need are
//! implemented. Shape violations are programming errors and panic; domain
//! errors (degenerate rows, bad labels) are validated by callers before nodes
//! are built.

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis1(Var),
    ScaleRows(Var, Var),
    AddRowVec(Var, Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var, ArrayD<f64>),
    Diag(Var),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    MeanAxis0(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    needs_grad: bool,
}

/// Eager computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn child_needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (zero-dim or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant: no gradient is ever computed for it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.child_needs_grad(&[a, b]);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.child_needs_grad(&[a, b]);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.child_needs_grad(&[a, b]);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::AddScalar(a, c), v, g)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::MulScalar(a, c), v, g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Recip(a), v, g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Sqrt(a), v, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Exp(a), v, g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Ln(a), v, g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Square(a), v, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Relu(a), v, g)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Softplus(a), v, g)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let g = self.child_needs_grad(&[a, b]);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().as_standard_layout().to_owned();
        let g = self.child_needs_grad(&[a]);
        self.push(Op::Transpose(a), v, g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let g = self.child_needs_grad(&[a]);
        self.push(Op::SumAll(a), ArrayD::from_elem(IxDyn(&[]), s), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.sum() / n;
        let g = self.child_needs_grad(&[a]);
        self.push(Op::MeanAll(a), ArrayD::from_elem(IxDyn(&[]), s), g)
    }

    /// Row sums of a 2-D matrix: `(n, k) -> (n)`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        let v = av.sum_axis(Axis(1)).into_dyn();
        let g = self.child_needs_grad(&[a]);
        self.push(Op::SumAxis1(a), v, g)
    }

    /// Scales row i of a `(n, k)` matrix by `v[i]` where `v` is 1-d of length n.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Var {
        let mv = self.as2(m);
        let vv = &self.nodes[v.0].value;
        assert_eq!(vv.ndim(), 1);
        assert_eq!(mv.nrows(), vv.len());
        let mut out = mv.to_owned();
        for (mut row, s) in out.rows_mut().into_iter().zip(vv.iter()) {
            row.mapv_inplace(|x| x * s);
        }
        let g = self.child_needs_grad(&[m, v]);
        self.push(Op::ScaleRows(m, v), out.into_dyn(), g)
    }

    /// Adds a length-k vector to every row of a `(n, k)` matrix.
    pub fn add_row_vec(&mut self, m: Var, b: Var) -> Var {
        let mv = self.as2(m);
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.ndim(), 1);
        assert_eq!(mv.ncols(), bv.len());
        let mut out = mv.to_owned();
        for mut row in out.rows_mut() {
            for (x, a) in row.iter_mut().zip(bv.iter()) {
                *x += a;
            }
        }
        let g = self.child_needs_grad(&[m, b]);
        self.push(Op::AddRowVec(m, b), out.into_dyn(), g)
    }

    /// Row-wise `log softmax` of a 2-D matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            row.mapv_inplace(|x| x - lse);
        }
        let g = self.child_needs_grad(&[a]);
        self.push(Op::LogSoftmaxRows(a), out.into_dyn(), g)
    }

    /// Row-wise `softmax` of a 2-D matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            row.mapv_inplace(|x| (x - mx).exp() / z);
        }
        let g = self.child_needs_grad(&[a]);
        self.push(Op::SoftmaxRows(a), out.into_dyn(), g)
    }

    /// Row-wise softmax restricted to positions where `mask` is nonzero;
    /// masked-out entries are exactly zero in the output. Every row of `mask`
    /// must contain at least one nonzero entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: ArrayD<f64>) -> Var {
        let av = self.as2(a);
        let mk = mask
            .view()
            .into_dimensionality::<Ix2>()
            .expect("mask must be 2-d");
        assert_eq!(av.shape(), mk.shape());
        let mut out = av.to_owned();
        for (mut row, mrow) in out.rows_mut().into_iter().zip(mk.rows()) {
            let mx = row
                .iter()
                .zip(mrow.iter())
                .filter(|(_, m)| **m != 0.0)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "masked_softmax_rows: empty mask row");
            let mut z = 0.0;
            for (x, m) in row.iter_mut().zip(mrow.iter()) {
                *x = if *m != 0.0 { (*x - mx).exp() } else { 0.0 };
                z += *x;
            }
            row.mapv_inplace(|x| x / z);
        }
        let g = self.child_needs_grad(&[a]);
        self.push(Op::MaskedSoftmaxRows(a, mask), out.into_dyn(), g)
    }

    /// Main diagonal of a square matrix: `(n, n) -> (n)`.
    pub fn diag(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        assert_eq!(av.nrows(), av.ncols(), "diag of non-square");
        let v: Vec<f64> = (0..av.nrows()).map(|i| av[(i, i)]).collect();
        let g = self.child_needs_grad(&[a]);
        self.push(
            Op::Diag(a),
            ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap(),
            g,
        )
    }

    /// Selects rows of a 2-D matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.as2(a);
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), av.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&av.row(i));
        }
        let g = self.child_needs_grad(&[a]);
        self.push(Op::GatherRows(a, idx), out.into_dyn(), g)
    }

    /// Stacks k 1-d vectors of equal length into a `(k, d)` matrix.
    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        assert!(!rows.is_empty());
        let d = self.nodes[rows[0].0].value.len();
        let mut out = ndarray::Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let rv = &self.nodes[r.0].value;
            assert_eq!(rv.ndim(), 1);
            assert_eq!(rv.len(), d);
            for (j, x) in rv.iter().enumerate() {
                out[(i, j)] = *x;
            }
        }
        let g = self.child_needs_grad(&rows);
        self.push(Op::StackRows(rows), out.into_dyn(), g)
    }

    /// Column means of a 2-D matrix: `(l, t) -> (t)`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let av = self.as2(a);
        let v = av.mean_axis(Axis(0)).unwrap().into_dyn();
        let g = self.child_needs_grad(&[a]);
        self.push(Op::MeanAxis0(a), v, g)
    }

    /// 2-D convolution over NCHW input with OIHW weights plus per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be 4-d");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be 4-d");
        let bv = &self.nodes[b.0].value;
        let (n, ci, h, wd) = xv.dim();
        let (co, ci2, kh, kw) = wv.dim();
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(bv.len(), co);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = ndarray::Array4::<f64>::zeros((n, co, ho, wo));
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for oc in 0..co {
                    let bias = bs[oc];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias;
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        acc += xs[((ni * ci + ic) * h + iy) * wd + ix]
                                            * ws[((oc * ci + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                            os[((ni * co + oc) * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
            }
        }
        let g = self.child_needs_grad(&[x, w, b]);
        self.push(Op::Conv2d { x, w, b, stride, pad }, out.into_dyn(), g)
    }

    /// Spatial mean of an NCHW tensor: `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("global_avg_pool input must be 4-d");
        let (n, c, h, w) = av.dim();
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += av[(ni, ci, y, x)];
                    }
                }
                out[(ni, ci)] = s / (h * w) as f64;
            }
        }
        let g = self.child_needs_grad(&[a]);
        self.push(Op::GlobalAvgPool(a), out.into_dyn(), g)
    }

    fn as2(&self, a: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d value")
    }

    /// Reverse pass from a scalar root. Gradients are accumulated for every
    /// node on a path from a grad-enabled leaf to the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * &self.nodes[b.0].value);
                self.add_grad(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::AddScalar(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.add_grad(grads, *a, g.mapv(|x| x * c)),
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, -(g * y * y));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, g * &y.mapv(|v| 0.5 / v));
            }
            Op::Exp(a) => self.add_grad(grads, *a, g * &self.nodes[id].value),
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                self.add_grad(grads, *a, g * &x.mapv(|v| 1.0 / v));
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                self.add_grad(grads, *a, g * &x.mapv(|v| 2.0 * v));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                self.add_grad(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                let sig = x.mapv(|v| 0.5 * (1.0 + (0.5 * v).tanh()));
                self.add_grad(grads, *a, g * &sig);
            }
            Op::MatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.as2(*a);
                let bv = self.as2(*b);
                self.add_grad(grads, *a, gv.dot(&bv.t()).into_dyn());
                self.add_grad(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.t().as_standard_layout().to_owned())
            }
            Op::SumAll(a) => {
                let s = *g.iter().next().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.add_grad(grads, *a, ArrayD::from_elem(shape, s));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let s = *g.iter().next().unwrap() / n;
                let shape = self.nodes[a.0].value.raw_dim();
                self.add_grad(grads, *a, ArrayD::from_elem(shape, s));
            }
            Op::SumAxis1(a) => {
                let av = self.as2(*a);
                let mut out = ndarray::Array2::<f64>::zeros(av.dim());
                for (mut row, gi) in out.rows_mut().into_iter().zip(g.iter()) {
                    row.fill(*gi);
                }
                self.add_grad(grads, *a, out.into_dyn());
            }
            Op::ScaleRows(m, v) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = self.as2(*m);
                let vv = &self.nodes[v.0].value;
                let mut dm = gv.to_owned();
                for (mut row, s) in dm.rows_mut().into_iter().zip(vv.iter()) {
                    row.mapv_inplace(|x| x * s);
                }
                self.add_grad(grads, *m, dm.into_dyn());
                let dv: Vec<f64> = gv
                    .rows()
                    .into_iter()
                    .zip(mv.rows())
                    .map(|(gr, mr)| gr.iter().zip(mr.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                self.add_grad(
                    grads,
                    *v,
                    ArrayD::from_shape_vec(IxDyn(&[dv.len()]), dv).unwrap(),
                );
            }
            Op::AddRowVec(m, b) => {
                self.add_grad(grads, *m, g.clone());
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = gv.sum_axis(Axis(0)).into_dyn();
                self.add_grad(grads, *b, db);
            }
            Op::LogSoftmaxRows(a) => {
                let y = self
                    .nodes[id]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gv.to_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = drow.iter().sum();
                    for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= yv.exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a, _) => {
                let y = self
                    .nodes[id]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros(y.dim());
                for ((mut drow, yrow), grow) in
                    dx.rows_mut().into_iter().zip(y.rows()).zip(gv.rows())
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    for ((d, yv), gi) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = yv * (gi - dot);
                    }
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut dx = ndarray::Array2::<f64>::zeros((n, n));
                for (i, gi) in g.iter().enumerate() {
                    dx[(i, i)] = *gi;
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
            Op::GatherRows(a, idx) => {
                let av = self.as2(*a);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros(av.dim());
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &gv.row(o);
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
            Op::StackRows(rows) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (i, r) in rows.iter().enumerate() {
                    self.add_grad(grads, *r, gv.row(i).to_owned().into_dyn());
                }
            }
            Op::MeanAxis0(a) => {
                let av = self.as2(*a);
                let l = av.nrows() as f64;
                let mut dx = ndarray::Array2::<f64>::zeros(av.dim());
                for mut row in dx.rows_mut() {
                    for (d, gi) in row.iter_mut().zip(g.iter()) {
                        *d = gi / l;
                    }
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, ci, h, wd) = xv.dim();
                let (co, _, kh, kw) = wv.dim();
                let (_, _, ho, wo) = gv.dim();
                let (stride, pad) = (*stride, *pad);
                let xs = xv.as_slice().unwrap();
                let ws = wv.as_slice().unwrap();
                let gs = gv.as_slice().unwrap();
                let mut dx = vec![0.0; n * ci * h * wd];
                let mut dw = vec![0.0; co * ci * kh * kw];
                let mut db = vec![0.0; co];
                for ni in 0..n {
                    for oc in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = gs[((ni * co + oc) * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                db[oc] += go;
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < pad || ix - pad >= wd {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            let xi = ((ni * ci + ic) * h + iy) * wd + ix;
                                            let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            dx[xi] += go * ws[wi];
                                            dw[wi] += go * xs[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(
                    grads,
                    *x,
                    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), dx).unwrap(),
                );
                self.add_grad(
                    grads,
                    *w,
                    ArrayD::from_shape_vec(IxDyn(&[co, ci, kh, kw]), dw).unwrap(),
                );
                self.add_grad(grads, *b, ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let av = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, c, h, w) = av.dim();
                let inv = 1.0 / (h * w) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gi = gv[(ni, ci)] * inv;
                        for y in 0..h {
                            for x in 0..w {
                                dx[(ni, ci, y, x)] = gi;
                            }
                        }
                    }
                }
                self.add_grad(grads, *a, dx.into_dyn());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    /// Central-difference check of `build` (a scalar function of one leaf).
    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, x0: &ArrayD<f64>, tol: f64) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic: Vec<f64> = grads.get(x).expect("no gradient").iter().copied().collect();

        let h = 1e-5;
        let mut flat = x0.as_standard_layout().to_owned();
        for i in 0..flat.len() {
            let orig = flat.as_slice().unwrap()[i];
            flat.as_slice_mut().unwrap()[i] = orig + h;
            let mut gp = Graph::new();
            let xp = gp.leaf(flat.clone());
            let yp = build(&mut gp, xp);
            let fp = gp.scalar(yp);
            flat.as_slice_mut().unwrap()[i] = orig - h;
            let mut gm = Graph::new();
            let xm = gm.leaf(flat.clone());
            let ym = build(&mut gm, xm);
            let fm = gm.scalar(ym);
            flat.as_slice_mut().unwrap()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[i];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < tol,
                "grad mismatch at {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, &[3, 4]);
        check_grad(
            |g, x| {
                let a = g.square(x);
                let b = g.mul_scalar(a, 0.5);
                let c = g.tanh(b);
                let d = g.softplus(c);
                g.mean_all(d)
            },
            &x0,
            1e-6,
        );
        let pos = x0.mapv(|v| v.abs() + 0.5);
        check_grad(
            |g, x| {
                let a = g.sqrt(x);
                let b = g.ln(a);
                let c = g.add_scalar(x, 2.0);
                let c = g.recip(c);
                let d = g.exp(b);
                let e = g.mul(d, c);
                g.sum_all(e)
            },
            &pos,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 2]);
        let v = randn(&mut rng, &[3]);
        let b = randn(&mut rng, &[2]);
        check_grad(
            |g, x| {
                let wc = g.leaf(w.clone());
                let vc = g.leaf(v.clone());
                let bc = g.leaf(b.clone());
                let y = g.matmul(x, wc);
                let y = g.add_row_vec(y, bc);
                let y = g.scale_rows(y, vc);
                let t = g.transpose(y);
                let s = g.sum_axis1(t);
                g.sum_all(s)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = randn(&mut rng, &[4, 5]);
        check_grad(
            |g, x| {
                let ls = g.log_softmax_rows(x);
                let d = g.mul_scalar(ls, -0.25);
                g.sum_all(d)
            },
            &x0,
            1e-6,
        );
        check_grad(
            |g, x| {
                let s = g.softmax_rows(x);
                let q = g.square(s);
                g.sum_all(q)
            },
            &x0,
            1e-6,
        );
        let mask = arr2(&[
            [1.0, 0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0, 1.0],
            [1.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0, 1.0],
        ])
        .into_dyn();
        check_grad(
            |g, x| {
                let s = g.masked_softmax_rows(x, mask.clone());
                let q = g.square(s);
                g.sum_all(q)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(arr2(&[[100.0, 1.0, 2.0]]).into_dyn());
        let s = g.masked_softmax_rows(x, arr2(&[[0.0, 1.0, 1.0]]).into_dyn());
        let v = g.value(s);
        assert_eq!(v[[0, 0]], 0.0);
        let total: f64 = v.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_stack_diag() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = randn(&mut rng, &[3, 4]);
        check_grad(
            |g, x| {
                let gt = g.gather_rows(x, vec![0, 2, 2, 1]);
                let s = g.square(gt);
                g.sum_all(s)
            },
            &x0,
            1e-6,
        );
        let sq = randn(&mut rng, &[4, 4]);
        check_grad(
            |g, x| {
                let d = g.diag(x);
                let e = g.exp(d);
                g.sum_all(e)
            },
            &sq,
            1e-6,
        );
        let r0 = randn(&mut rng, &[5]);
        check_grad(
            |g, x| {
                let other = g.constant(arr1(&[1.0, -2.0, 0.5, 0.0, 3.0]).into_dyn());
                let m = g.stack_rows(vec![x, other, x]);
                let p = g.mean_axis0(m);
                let q = g.square(p);
                g.sum_all(q)
            },
            &r0,
            1e-6,
        );
    }

    #[test]
    fn conv_and_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[2, 3, 6, 5]);
        let w0 = randn(&mut rng, &[4, 3, 3, 3]);
        let b0 = randn(&mut rng, &[4]);
        // input gradient
        check_grad(
            |g, x| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let y = g.conv2d(x, w, b, 2, 1);
                let p = g.global_avg_pool(y);
                let q = g.square(p);
                g.sum_all(q)
            },
            &x0,
            1e-5,
        );
        // weight and bias gradient
        check_grad(
            |g, w| {
                let x = g.constant(x0.clone());
                let b = g.constant(b0.clone());
                let y = g.conv2d(x, w, b, 1, 1);
                let p = g.global_avg_pool(y);
                g.sum_all(p)
            },
            &w0,
            1e-5,
        );
        check_grad(
            |g, b| {
                let x = g.constant(x0.clone());
                let w = g.constant(w0.clone());
                let y = g.conv2d(x, w, b, 2, 0);
                let s = g.square(y);
                g.mean_all(s)
            },
            &b0,
            1e-5,
        );
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 8, 4])));
        let w = g.constant(ArrayD::zeros(IxDyn(&[8, 3, 3, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[8])));
        let y = g.conv2d(x, w, b, 2, 1);
        assert_eq!(g.value(y).shape(), &[1, 8, 4, 2]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let c = g.constant(arr1(&[3.0, 4.0]).into_dyn());
        let y = g.mul(x, c);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &arr1(&[3.0, 4.0]).into_dyn());
    }

    #[test]
    fn relu_gradient_masks_negative_side() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[-1.0, 2.0, -0.5, 3.0]).into_dyn());
        let y = g.relu(x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(
            grads.get(x).unwrap(),
            &arr1(&[0.0, 1.0, 0.0, 1.0]).into_dyn()
        );
    }
}
