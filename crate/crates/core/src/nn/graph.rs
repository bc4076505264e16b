//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a single-use tape: forward calls append nodes,
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Training rebuilds the graph every step, which keeps the implementation
//! simple and makes each step's memory reclaimable.
//!
//! Shape misuse inside the graph is a programming error and panics; the
//! public model operations validate their inputs and return `Result`
//! before touching the tape.

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Min(Id, Id),
    Scale(Id, f64),
    AddScalar(Id),
    Matmul(Id, Id),
    AddRowBias(Id, Id),
    Conv2d {
        input: Id,
        weight: Id,
        bias: Id,
        stride: usize,
        pad: usize,
        /// im2col matrix saved from the forward pass,
        /// shape (C_in*k*k, H_out*W_out).
        cols: ndarray::Array2<f64>,
    },
    XcorrDepthwise {
        search: Id,
        template: Id,
    },
    Relu(Id),
    Tanh(Id),
    Softplus(Id),
    Softmax {
        x: Id,
        axis: usize,
    },
    LayerNorm {
        x: Id,
        gamma: Id,
        beta: Id,
    },
    Reshape(Id),
    Transpose2d(Id),
    Concat {
        axis: usize,
        parts: Vec<Id>,
    },
    Narrow {
        x: Id,
        axis: usize,
        start: usize,
    },
    GradReverse(Id),
    StopGradient,
    Sum(Id),
    Mean(Id),
    BceWithLogits {
        logits: Id,
        targets: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: Id) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: Id) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Id {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Id(self.nodes.len() - 1)
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Id {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Id {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min(&mut self, a: Id, b: Id) -> Id {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "min: shape mismatch");
        let mut v = av.clone();
        v.zip_mut_with(bv, |x, &y| *x = x.min(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Min(a, b), rg)
    }

    pub fn scale(&mut self, a: Id, factor: f64) -> Id {
        let v = &self.nodes[a.0].value * factor;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Id, c: f64) -> Id {
        let v = &self.nodes[a.0].value + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    /// Add a length-N bias row to every row of a (T, N) matrix.
    pub fn add_row_bias(&mut self, a: Id, bias: Id) -> Id {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("add_row_bias lhs must be 2-D");
        let bv = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-D");
        assert_eq!(av.ncols(), bv.len(), "add_row_bias: width mismatch");
        let v = (&av + &bv).into_dyn();
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddRowBias(a, bias), rg)
    }

    /// Linear layer: `x (T,N) . w (N,M) + b (M)`.
    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let m = self.matmul(x, w);
        self.add_row_bias(m, b)
    }

    /// 2-D convolution over a (C_in, H, W) input with a
    /// (C_out, C_in, k, k) kernel and per-channel bias.
    pub fn conv2d(&mut self, input: Id, weight: Id, bias: Id, stride: usize, pad: usize) -> Id {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv2d input must be (C,H,W)");
        let w = self.nodes[weight.0].value.view();
        assert_eq!(w.ndim(), 4, "conv2d weight must be (Cout,Cin,k,k)");
        let (cin, h, wd) = x.dim();
        let cout = w.shape()[0];
        let k = w.shape()[2];
        assert_eq!(w.shape()[1], cin, "conv2d: channel mismatch");
        assert_eq!(w.shape()[3], k, "conv2d: kernel must be square");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col(&x.to_owned(), k, stride, pad, ho, wo);
        let w2 = w
            .to_shape((cout, cin * k * k))
            .expect("conv2d weight reshape")
            .to_owned();
        let mut out2 = w2.dot(&cols);
        let bv = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv2d bias must be 1-D");
        assert_eq!(bv.len(), cout, "conv2d: bias length mismatch");
        for (mut row, b) in out2.outer_iter_mut().zip(bv.iter()) {
            row += *b;
        }
        let v = out2
            .into_shape_with_order((cout, ho, wo))
            .expect("conv2d output reshape")
            .into_dyn();
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Depth-wise valid cross-correlation: the template slides over the
    /// search map per channel. Output is
    /// (C, H_x - H_z + 1, W_x - W_z + 1).
    pub fn xcorr_depthwise(&mut self, search: Id, template: Id) -> Id {
        let s = self.nodes[search.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("xcorr search must be (C,H,W)");
        let t = self.nodes[template.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("xcorr template must be (C,H,W)");
        let (c, hs, ws) = s.dim();
        let (ct, hz, wz) = t.dim();
        assert_eq!(c, ct, "xcorr: channel mismatch");
        assert!(hz <= hs && wz <= ws, "xcorr: template larger than search");
        let ho = hs - hz + 1;
        let wo = ws - wz + 1;
        let mut out = ndarray::Array3::<f64>::zeros((c, ho, wo));
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for u in 0..hz {
                        for v in 0..wz {
                            acc += s[[ch, i + u, j + v]] * t[[ch, u, v]];
                        }
                    }
                    out[[ch, i, j]] = acc;
                }
            }
        }
        let rg = self.rg(search) || self.rg(template);
        self.push(out.into_dyn(), Op::XcorrDepthwise { search, template }, rg)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Numerically stable softplus: `max(x,0) + ln(1 + exp(-|x|))`.
    pub fn softplus(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: Id, axis: usize) -> Id {
        let mut v = self.nodes[a.0].value.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = lane.sum();
            lane.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(v, Op::Softmax { x: a, axis }, rg)
    }

    /// Layer normalization of each row of a (T, N) matrix, with learned
    /// per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Id, gamma: Id, beta: Id) -> Id {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("layer_norm input must be (T,N)");
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("layer_norm gamma must be 1-D");
        let b = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("layer_norm beta must be 1-D");
        let n = xv.ncols();
        assert_eq!(g.len(), n, "layer_norm: gamma length mismatch");
        assert_eq!(b.len(), n, "layer_norm: beta length mismatch");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta }, rg)
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn transpose2d(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose2d needs 2-D input")
            .t()
            .to_owned()
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::Transpose2d(a), rg)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Id]) -> Id {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            v,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Contiguous slice of length `len` along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Id, axis: usize, start: usize, len: usize) -> Id {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Narrow { x: a, axis, start }, rg)
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn gradient_reverse(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(v, Op::GradReverse(a), rg)
    }

    /// Identity forward, no gradient flows to the parent.
    pub fn stop_gradient(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&mut self, a: Id) -> Id {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Mean of all elements, as a single-element tensor.
    pub fn mean(&mut self, a: Id) -> Id {
        let n = self.nodes[a.0].value.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), self.nodes[a.0].value.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Per-element binary cross-entropy between logits and fixed targets:
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Id, targets: ArrayD<f64>) -> Id {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.shape(), targets.shape(), "bce: target shape mismatch");
        let mut v = x.clone();
        v.zip_mut_with(&targets, |l, &t| {
            *l = l.max(0.0) - *l * t + (-l.abs()).exp().ln_1p();
        });
        let rg = self.rg(logits);
        self.push(v, Op::BceWithLogits { logits, targets }, rg)
    }

    /// Backward pass from a single-element output node. Returns per-node
    /// gradients for every grad-tracked node reachable from `output`.
    pub fn backward(&self, output: Id) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "backward() requires a single-element output"
        );
        grads[output.0] = Some(ArrayD::ones(IxDyn(&out_shape)));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, gout: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let acc = |grads: &mut Vec<Option<ArrayD<f64>>>, id: Id, add: ArrayD<f64>| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(g) => *g += &add,
                slot => *slot = Some(add),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout.clone());
                acc(grads, *b, -gout);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, gout * &self.nodes[b.0].value);
                acc(grads, *b, gout * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, gout / bv);
                let av = &self.nodes[a.0].value;
                acc(grads, *b, -(gout * av) / (bv * bv));
            }
            Op::Min(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut mask_a = av.clone();
                mask_a.zip_mut_with(bv, |x, &y| *x = if *x <= y { 1.0 } else { 0.0 });
                let mask_b = mask_a.mapv(|m| 1.0 - m);
                acc(grads, *a, gout * &mask_a);
                acc(grads, *b, gout * &mask_b);
            }
            Op::Scale(a, f) => acc(grads, *a, gout * *f),
            Op::AddScalar(a) => acc(grads, *a, gout.clone()),
            Op::Matmul(a, b) => {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, g.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&g).into_dyn());
            }
            Op::AddRowBias(a, bias) => {
                acc(grads, *a, gout.clone());
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *bias, g.sum_axis(Axis(0)).into_dyn());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let w = self.nodes[weight.0].value.view();
                let cout = w.shape()[0];
                let cin = w.shape()[1];
                let k = w.shape()[2];
                let gshape = gout.shape();
                let (ho, wo) = (gshape[1], gshape[2]);
                let g2 = gout
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_shape((cout, ho * wo))
                    .unwrap()
                    .to_owned();
                // dW = dOut . colsT, reshaped to the kernel layout.
                let dw = g2
                    .dot(&cols.t())
                    .into_shape_with_order((cout, cin, k, k))
                    .unwrap()
                    .into_dyn();
                acc(grads, *weight, dw);
                acc(grads, *bias, g2.sum_axis(Axis(1)).into_dyn());
                if self.rg(*input) {
                    let w2 = w
                        .to_shape((cout, cin * k * k))
                        .unwrap()
                        .to_owned();
                    let dcols = w2.t().dot(&g2);
                    let xshape = self.nodes[input.0].value.shape();
                    let dx = col2im(&dcols, cin, xshape[1], xshape[2], k, *stride, *pad, ho, wo);
                    acc(grads, *input, dx.into_dyn());
                }
            }
            Op::XcorrDepthwise { search, template } => {
                let s = self.nodes[search.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let t = self.nodes[template.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let (c, hz, wz) = t.dim();
                let (_, ho, wo) = g.dim();
                if self.rg(*template) {
                    let mut dt = ndarray::Array3::<f64>::zeros(t.dim());
                    for ch in 0..c {
                        for u in 0..hz {
                            for v in 0..wz {
                                let mut a = 0.0;
                                for i in 0..ho {
                                    for j in 0..wo {
                                        a += g[[ch, i, j]] * s[[ch, i + u, j + v]];
                                    }
                                }
                                dt[[ch, u, v]] = a;
                            }
                        }
                    }
                    acc(grads, *template, dt.into_dyn());
                }
                if self.rg(*search) {
                    let mut ds = ndarray::Array3::<f64>::zeros(s.dim());
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = g[[ch, i, j]];
                                for u in 0..hz {
                                    for v in 0..wz {
                                        ds[[ch, i + u, j + v]] += gv * t[[ch, u, v]];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *search, ds.into_dyn());
                }
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, gout * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                acc(grads, *a, gout * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Softplus(a) => {
                let sig = self.nodes[a.0].value.mapv(sigmoid);
                acc(grads, *a, gout * &sig);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[idx].value;
                let mut dx = gout * y;
                // dx = y * (g - sum(g*y)) along the softmax axis
                for (mut lane, ylane) in dx.lanes_mut(Axis(*axis)).into_iter().zip(y.lanes(Axis(*axis))) {
                    let dot: f64 = lane.sum();
                    for (d, yv) in lane.iter_mut().zip(ylane.iter()) {
                        *d -= dot * yv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let gr = gout.view().into_dimensionality::<Ix2>().unwrap();
                let (t, n) = xv.dim();
                let mut dx = ndarray::Array2::<f64>::zeros((t, n));
                let mut dgamma = ndarray::Array1::<f64>::zeros(n);
                let mut dbeta = ndarray::Array1::<f64>::zeros(n);
                for r in 0..t {
                    let row = xv.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dy = gr.row(r);
                    let mut dxhat = vec![0.0; n];
                    for j in 0..n {
                        dgamma[j] += dy[j] * xhat[j];
                        dbeta[j] += dy[j];
                        dxhat[j] = dy[j] * g[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[[r, j]] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::Reshape(a) => {
                let pshape = self.nodes[a.0].value.shape().to_vec();
                acc(
                    grads,
                    *a,
                    gout.to_shape(IxDyn(&pshape)).unwrap().to_owned(),
                );
            }
            Op::Transpose2d(a) => {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, g.t().to_owned().into_dyn());
            }
            Op::Concat { axis, parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    let slice = gout
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    acc(grads, *p, slice);
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                let len = gout.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(gout);
                acc(grads, *x, dx);
            }
            Op::GradReverse(a) => acc(grads, *a, -gout),
            Op::StopGradient => {}
            Op::Sum(a) => {
                let g = gout.iter().next().copied().unwrap();
                acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g),
                );
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g = gout.iter().next().copied().unwrap() / n;
                acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g),
                );
            }
            Op::BceWithLogits { logits, targets } => {
                let x = &self.nodes[logits.0].value;
                let mut d = x.mapv(sigmoid);
                d -= targets;
                acc(grads, *logits, gout * &d);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfold (C,H,W) into (C*k*k, Ho*Wo) patches for matmul convolution.
fn im2col(
    x: &ndarray::Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((c * k * k, ho * wo));
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                for i in 0..ho {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cols[[row, i * wo + j]] = x[[ch, y as usize, xx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back into input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &ndarray::Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                for i in 0..ho {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[[ch, y as usize, xx as usize]] += dcols[[row, i * wo + j]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        let h = 1e-6;
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    /// Check the analytic input gradient of `build` (a scalar-valued graph
    /// function of one tensor input) against central differences.
    fn check_input_grad(build: &dyn Fn(&mut Graph, Id) -> Id, x: &ArrayD<f64>, tol: f64) {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let out = build(&mut g, xid);
        let grads = g.backward(out);
        let analytic = grads.get(xid).expect("input gradient missing").clone();

        let mut f = |xv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xid = g.leaf(xv.clone());
            let out = build(&mut g, xid);
            g.scalar(out)
        };
        let numeric = numeric_grad(&mut f, x);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr(&[3, 4], &mut rng);
        check_input_grad(
            &|g, x| {
                let t = g.tanh(x);
                let s = g.mul(t, t);
                let m = g.scale(s, 0.7);
                let a = g.add_scalar(m, 0.3);
                g.mean(a)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&[3, 4], &mut rng);
        let w = rand_arr(&[4, 5], &mut rng);
        let b = rand_arr(&[5], &mut rng);
        check_input_grad(
            &move |g, xid| {
                let wid = g.constant(w.clone());
                let bid = g.constant(b.clone());
                let l = g.linear(xid, wid, bid);
                let t = g.tanh(l);
                g.sum(t)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&[3, 4], &mut rng);
        let w = rand_arr(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let wid = g.leaf(w.clone());
        let mm = g.matmul(xid, wid);
        let t = g.tanh(mm);
        let out = g.sum(t);
        let grads = g.backward(out);
        let analytic = grads.get(wid).unwrap().clone();
        let mut f = |wv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let wid = g.leaf(wv.clone());
            let mm = g.matmul(xid, wid);
            let t = g.tanh(mm);
            let out = g.sum(t);
            g.scalar(out)
        };
        let numeric = numeric_grad(&mut f, &w);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn grad_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&[3, 5], &mut rng);
        let w = rand_arr(&[3, 5], &mut rng);
        check_input_grad(
            &move |g, xid| {
                let s = g.softmax(xid, 1);
                let c = g.constant(w.clone());
                let m = g.mul(s, c);
                g.sum(m)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&[4, 6], &mut rng);
        let gamma = rand_arr(&[6], &mut rng);
        let beta = rand_arr(&[6], &mut rng);
        let weights = rand_arr(&[4, 6], &mut rng);
        check_input_grad(
            &move |g, xid| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let ln = g.layer_norm(xid, ga, be);
                let c = g.constant(weights.clone());
                let m = g.mul(ln, c);
                g.sum(m)
            },
            &x,
            1e-4,
        );
    }

    #[test]
    fn grad_layer_norm_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_arr(&[4, 6], &mut rng);
        let gamma = rand_arr(&[6], &mut rng);
        let beta = rand_arr(&[6], &mut rng);
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let ga = g.leaf(gamma.clone());
        let be = g.leaf(beta.clone());
        let ln = g.layer_norm(xid, ga, be);
        let t = g.tanh(ln);
        let out = g.sum(t);
        let grads = g.backward(out);
        for (pid, pval) in [(ga, gamma.clone()), (be, beta.clone())] {
            let analytic = grads.get(pid).unwrap().clone();
            let mut f = |pv: &ArrayD<f64>| {
                let mut g = Graph::new();
                let xid = g.constant(x.clone());
                let (ga, be) = if pid == 1 {
                    // gamma node index is 1 in this fixed construction
                    (g.leaf(pv.clone()), g.constant(beta.clone()))
                } else {
                    (g.constant(gamma.clone()), g.leaf(pv.clone()))
                };
                let _ = ga;
                let _ = be;
                let ln = g.layer_norm(xid, ga, be);
                let t = g.tanh(ln);
                let out = g.sum(t);
                g.scalar(out)
            };
            let numeric = numeric_grad(&mut f, &pval);
            assert!(max_rel_err(&analytic, &numeric) < 1e-5);
        }
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&[2, 5, 5], &mut rng);
        let w = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b = rand_arr(&[3], &mut rng);

        // input gradient
        {
            let w = w.clone();
            let b = b.clone();
            check_input_grad(
                &move |g, xid| {
                    let wid = g.constant(w.clone());
                    let bid = g.constant(b.clone());
                    let c = g.conv2d(xid, wid, bid, 2, 1);
                    let t = g.tanh(c);
                    g.sum(t)
                },
                &x,
                1e-5,
            );
        }

        // weight and bias gradients
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let wid = g.leaf(w.clone());
        let bid = g.leaf(b.clone());
        let c = g.conv2d(xid, wid, bid, 1, 0);
        let t = g.tanh(c);
        let out = g.sum(t);
        let grads = g.backward(out);

        let analytic_w = grads.get(wid).unwrap().clone();
        let mut fw = |wv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let wid = g.leaf(wv.clone());
            let bid = g.constant(b.clone());
            let c = g.conv2d(xid, wid, bid, 1, 0);
            let t = g.tanh(c);
            let out = g.sum(t);
            g.scalar(out)
        };
        assert!(max_rel_err(&analytic_w, &numeric_grad(&mut fw, &w)) < 1e-5);

        let analytic_b = grads.get(bid).unwrap().clone();
        let mut fb = |bv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xid = g.constant(x.clone());
            let wid = g.constant(w.clone());
            let bid = g.leaf(bv.clone());
            let c = g.conv2d(xid, wid, bid, 1, 0);
            let t = g.tanh(c);
            let out = g.sum(t);
            g.scalar(out)
        };
        assert!(max_rel_err(&analytic_b, &numeric_grad(&mut fb, &b)) < 1e-5);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&[3, 6, 7], &mut rng);
        let w = rand_arr(&[4, 3, 3, 3], &mut rng);
        let b = rand_arr(&[4], &mut rng);
        let (stride, pad) = (2, 1);

        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let wid = g.constant(w.clone());
        let bid = g.constant(b.clone());
        let out = g.conv2d(xid, wid, bid, stride, pad);
        let got = g.value(out).clone();

        // independent direct convolution
        let ho = (6 + 2 * pad - 3) / stride + 1;
        let wo = (7 + 2 * pad - 3) / stride + 1;
        for co in 0..4 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[[co]];
                    for ci in 0..3 {
                        for u in 0..3 {
                            for v in 0..3 {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && y < 6 && xx >= 0 && xx < 7 {
                                    acc += x[[ci, y as usize, xx as usize]]
                                        * w[[co, ci, u, v]];
                                }
                            }
                        }
                    }
                    let diff = (got[[co, i, j]] - acc).abs();
                    assert!(diff < 1e-12, "conv mismatch at ({co},{i},{j}): {diff}");
                }
            }
        }
    }

    #[test]
    fn grad_xcorr_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = rand_arr(&[2, 5, 5], &mut rng);
        let t = rand_arr(&[2, 3, 3], &mut rng);

        {
            let t = t.clone();
            check_input_grad(
                &move |g, sid| {
                    let tid = g.constant(t.clone());
                    let c = g.xcorr_depthwise(sid, tid);
                    let a = g.tanh(c);
                    g.sum(a)
                },
                &s,
                1e-5,
            );
        }
        {
            let s = s.clone();
            check_input_grad(
                &move |g, tid| {
                    let sid = g.constant(s.clone());
                    let c = g.xcorr_depthwise(sid, tid);
                    let a = g.tanh(c);
                    g.sum(a)
                },
                &t,
                1e-5,
            );
        }
    }

    #[test]
    fn grad_concat_narrow_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_arr(&[3, 4], &mut rng);
        let w = rand_arr(&[4, 3], &mut rng);
        check_input_grad(
            &move |g, xid| {
                let c = g.constant(w.clone());
                let tr = g.transpose2d(c);
                let cat = g.concat(0, &[xid, tr]);
                let n = g.narrow(cat, 0, 2, 3);
                let t = g.tanh(n);
                g.mean(t)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_min_div_softplus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&[4, 4], &mut rng);
        let other = rand_arr(&[4, 4], &mut rng);
        check_input_grad(
            &move |g, xid| {
                let sp = g.softplus(xid);
                let c = g.constant(other.mapv(|v| v.abs() + 0.5));
                let mn = g.min(sp, c);
                let d = g.div(mn, c);
                g.sum(d)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn grad_bce_with_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_arr(&[3, 3], &mut rng);
        let targets = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| {
            if rng.random::<f64>() > 0.5 {
                1.0
            } else {
                0.0
            }
        });
        check_input_grad(
            &move |g, xid| {
                let l = g.bce_with_logits(xid, targets.clone());
                g.mean(l)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::zeros(IxDyn(&[4])));
        let t = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let l = g.bce_with_logits(x, t);
        let m = g.mean(l);
        assert!((g.scalar(m) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_reverse_is_identity_forward_negation_backward() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let r = g.gradient_reverse(x);
        assert_eq!(g.value(r), g.value(x));
        // d/dx grl(x)^2 at x=3 must be -6 (identity path gives +6).
        let sq = g.mul(r, r);
        let out = g.sum(sq);
        let grads = g.backward(out);
        let got = grads.get(x).unwrap()[[0]];
        assert!((got + 6.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let s = g.stop_gradient(x);
        let sq = g.mul(s, s);
        let out = g.sum(sq);
        let grads = g.backward(out);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_arr(&[5, 7], &mut rng);
        let mut g = Graph::new();
        let xid = g.constant(x);
        let s = g.softmax(xid, 1);
        let v = g.value(s);
        for row in v.view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_node_gradient_accumulates() {
        // f(x) = x*x + 3x => f'(x) = 2x + 3
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.5));
        let sq = g.mul(x, x);
        let lin = g.scale(x, 3.0);
        let s = g.add(sq, lin);
        let out = g.sum(s);
        let grads = g.backward(out);
        let got = grads.get(x).unwrap()[[0]];
        assert!((got - 6.0).abs() < 1e-12);
    }
}
