//! Reverse-mode tape over [`Tensor`] values.
//!
//! Ops append nodes to the tape; node indices are returned as opaque
//! [`TensorId`]s. The node list is already a topological order of the
//! DAG, so the backward pass is a single reverse sweep that visits each
//! node exactly once. Gradients are only propagated into subgraphs that
//! reach a trainable leaf.
//!
//! Every op validates shapes up front and checks its output for
//! non-finite values, so a NaN surfaces as an error naming the op that
//! produced it rather than as a silently poisoned training run.

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Fixed chunk count for batched conv/pool gradient accumulation: the
/// partial sums are combined in chunk order, keeping results identical
/// for any worker count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul {
        lhs: TensorId,
        rhs: TensorId,
    },
    /// Elementwise add; `rhs` may also be a vector broadcast across the
    /// rows of a 2-d `lhs`.
    Add {
        lhs: TensorId,
        rhs: TensorId,
        broadcast_rhs: bool,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Tanh {
        input: TensorId,
    },
    LeakyRelu {
        input: TensorId,
        slope: f64,
    },
    Conv2dSame {
        input: TensorId,
        filters: TensorId,
        bias: TensorId,
        dims: ConvDims,
        batch: usize,
    },
    AvgPool2d {
        input: TensorId,
        h: usize,
        w: usize,
        c: usize,
        ph: usize,
        pw: usize,
        batch: usize,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        input: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        input: TensorId,
    },
    Sum {
        input: TensorId,
    },
    Mean {
        input: TensorId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Conv2dSame { .. } => "conv2d_same",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. A tape and its tensors are confined to one worker;
/// independent tapes may run in parallel workers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record a constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Record a trainable input; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<TensorId> {
        if !value.all_finite() {
            return Err(Error::non_finite(op.name()));
        }
        let needs_grad = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn op_inputs(&self, op: &Op) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { lhs, rhs }
            | Op::Add { lhs, rhs, .. }
            | Op::Sub { lhs, rhs }
            | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Op::Sigmoid { input }
            | Op::Tanh { input }
            | Op::LeakyRelu { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Mean { input } => vec![*input],
            Op::Conv2dSame {
                input,
                filters,
                bias,
                ..
            } => vec![*input, *filters, *bias],
            Op::AvgPool2d { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    // ---- forward ops ----

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { lhs, rhs })
    }

    /// Elementwise add. A vector (or `[1,n]`) rhs broadcasts across the
    /// rows of a 2-d lhs.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa == sb {
            let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            return self.push(
                Tensor::new(sa, data)?,
                Op::Add {
                    lhs,
                    rhs,
                    broadcast_rhs: false,
                },
            );
        }
        let row_len = match sb.as_slice() {
            [n] => *n,
            [1, n] => *n,
            _ => 0,
        };
        if sa.len() == 2 && row_len == sa[1] {
            let n = sa[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            return self.push(
                Tensor::new(sa, data)?,
                Op::Add {
                    lhs,
                    rhs,
                    broadcast_rhs: true,
                },
            );
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Sub { lhs, rhs })
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul { lhs, rhs })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId> {
        let a = self.value(input);
        let data: Vec<f64> = a.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: TensorId) -> Result<TensorId> {
        let a = self.value(input);
        let data: Vec<f64> = a.data().iter().map(|&x| x.tanh()).collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Tanh { input })
    }

    pub fn leaky_relu(&mut self, input: TensorId, slope: f64) -> Result<TensorId> {
        let a = self.value(input);
        let data: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::LeakyRelu { input, slope })
    }

    /// Same-padding stride-1 convolution. Input is `[h,w,cin]` or
    /// batched `[b,h,w,cin]`; filters `[f,kh,kw,cin]`; bias `[f]`.
    /// Output keeps the input spatial size with `f` channels.
    pub fn conv2d_same(
        &mut self,
        input: TensorId,
        filters: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let (x, w, b) = (self.value(input), self.value(filters), self.value(bias));
        let sx = x.shape().to_vec();
        let sw = w.shape().to_vec();
        if sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, h, wd, cin, batched) = match sx.as_slice() {
            [h, w0, c] => (1usize, *h, *w0, *c, false),
            [n, h, w0, c] => (*n, *h, *w0, *c, true),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d_same",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let (f, kh, kw, wcin) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin || b.shape() != [f] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                lhs: sx,
                rhs: sw,
            });
        }
        let dims = ConvDims {
            h,
            w: wd,
            cin,
            filters: f,
            kh,
            kw,
        };
        let wt = kernels::filters_to_wt(w.data(), &dims);
        let sample_in = h * wd * cin;
        let sample_out = h * wd * f;
        let xdata = x.data();
        let bias_data = b.data().to_vec();
        let outs = exec::par_map_range(batch, |s| {
            kernels::conv2d_same_sample(
                &xdata[s * sample_in..(s + 1) * sample_in],
                &wt,
                &bias_data,
                &dims,
            )
        });
        let mut data = Vec::with_capacity(batch * sample_out);
        for o in outs {
            data.extend_from_slice(&o);
        }
        let shape = if batched {
            vec![batch, h, wd, f]
        } else {
            vec![h, wd, f]
        };
        self.push(
            Tensor::new(shape, data)?,
            Op::Conv2dSame {
                input,
                filters,
                bias,
                dims,
                batch,
            },
        )
    }

    /// Average pooling with stride = pool size and floor semantics.
    /// Input `[h,w,c]` or `[b,h,w,c]`.
    pub fn avgpool2d(&mut self, input: TensorId, pool: (usize, usize)) -> Result<TensorId> {
        let x = self.value(input);
        let sx = x.shape().to_vec();
        let (ph, pw) = pool;
        if ph == 0 || pw == 0 {
            return Err(Error::InvalidArg(format!(
                "avgpool2d: pool size must be >= 1, got [{ph},{pw}]"
            )));
        }
        let (batch, h, w, c, batched) = match sx.as_slice() {
            [h, w, c] => (1usize, *h, *w, *c, false),
            [n, h, w, c] => (*n, *h, *w, *c, true),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "avgpool2d",
                    lhs: sx,
                    rhs: vec![ph, pw],
                })
            }
        };
        let (oh, ow) = (h / ph, w / pw);
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArg(format!(
                "avgpool2d: input {h}x{w} smaller than pool [{ph},{pw}]"
            )));
        }
        let sample_in = h * w * c;
        let xdata = x.data();
        let outs = exec::par_map_range(batch, |s| {
            kernels::avgpool2d_sample(&xdata[s * sample_in..(s + 1) * sample_in], h, w, c, ph, pw)
        });
        let mut data = Vec::with_capacity(batch * oh * ow * c);
        for o in outs {
            data.extend_from_slice(&o);
        }
        let shape = if batched {
            vec![batch, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        self.push(
            Tensor::new(shape, data)?,
            Op::AvgPool2d {
                input,
                h,
                w,
                c,
                ph,
                pw,
                batch,
            },
        )
    }

    /// Concatenate same-rank tensors along `axis`; all other dims must
    /// match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat: no inputs".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArg(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let t = self.value(id);
            let d = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * d * inner;
                data[dst_start..dst_start + d * inner]
                    .copy_from_slice(&src[src_start..src_start + d * inner]);
            }
            offset += d;
        }
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Take `start..start+len` along `axis`.
    pub fn slice(
        &mut self,
        input: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let x = self.value(input);
        let s = x.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice: range {start}..{} on axis {axis} invalid for shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * d + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x.data()[src_start..src_start + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
        )
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let x = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = x.data().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Reshape { input })
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Full-mean reduction to a scalar.
    pub fn mean(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { input })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// node on a path from a trainable leaf to the loss.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidArg("backward: unknown tensor id".into()))?;
        if node.value.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.needs_grad {
            return Err(Error::InvalidArg(
                "backward: loss is detached from every trainable parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = grads[i].take().unwrap();
            self.apply_backward(i, &grad, &mut grads)?;
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: TensorId, shape: &[usize], contrib: Vec<f64>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), contrib).expect("gradient shape"));
            }
        }
    }

    fn apply_backward(
        &self,
        i: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let g = grad.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { lhs, rhs } => {
                let a = &self.nodes[lhs.0].value;
                let b = &self.nodes[rhs.0].value;
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if self.needs(*lhs) {
                    let da = kernels::matmul_a_bt(g, b.data(), m, n, k);
                    Self::accumulate(grads, *lhs, a.shape(), da);
                }
                if self.needs(*rhs) {
                    let db = kernels::matmul_at_b(a.data(), g, m, k, n);
                    Self::accumulate(grads, *rhs, b.shape(), db);
                }
            }
            Op::Add {
                lhs,
                rhs,
                broadcast_rhs,
            } => {
                if self.needs(*lhs) {
                    Self::accumulate(grads, *lhs, self.nodes[lhs.0].value.shape(), g.to_vec());
                }
                if self.needs(*rhs) {
                    if *broadcast_rhs {
                        let n = self.nodes[rhs.0].value.len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Self::accumulate(grads, *rhs, self.nodes[rhs.0].value.shape(), db);
                    } else {
                        Self::accumulate(grads, *rhs, self.nodes[rhs.0].value.shape(), g.to_vec());
                    }
                }
            }
            Op::Sub { lhs, rhs } => {
                if self.needs(*lhs) {
                    Self::accumulate(grads, *lhs, self.nodes[lhs.0].value.shape(), g.to_vec());
                }
                if self.needs(*rhs) {
                    let db: Vec<f64> = g.iter().map(|v| -v).collect();
                    Self::accumulate(grads, *rhs, self.nodes[rhs.0].value.shape(), db);
                }
            }
            Op::Mul { lhs, rhs } => {
                let a = &self.nodes[lhs.0].value;
                let b = &self.nodes[rhs.0].value;
                if self.needs(*lhs) {
                    let da: Vec<f64> = g.iter().zip(b.data()).map(|(gv, bv)| gv * bv).collect();
                    Self::accumulate(grads, *lhs, a.shape(), da);
                }
                if self.needs(*rhs) {
                    let db: Vec<f64> = g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect();
                    Self::accumulate(grads, *rhs, b.shape(), db);
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    let out = &self.nodes[i].value;
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    Self::accumulate(grads, *input, self.nodes[input.0].value.shape(), dg);
                }
            }
            Op::Tanh { input } => {
                if self.needs(*input) {
                    let out = &self.nodes[i].value;
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, &t)| gv * (1.0 - t * t))
                        .collect();
                    Self::accumulate(grads, *input, self.nodes[input.0].value.shape(), dg);
                }
            }
            Op::LeakyRelu { input, slope } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                        .collect();
                    Self::accumulate(grads, *input, x.shape(), dg);
                }
            }
            Op::Conv2dSame {
                input,
                filters,
                bias,
                dims,
                batch,
            } => {
                self.conv_backward(i, g, *input, *filters, *bias, dims, *batch, grads);
            }
            Op::AvgPool2d {
                input,
                h,
                w,
                c,
                ph,
                pw,
                batch,
            } => {
                if self.needs(*input) {
                    let sample_out = (h / ph) * (w / pw) * c;
                    let chunks = exec::par_map_range(*batch, |s| {
                        kernels::avgpool2d_backward_sample(
                            &g[s * sample_out..(s + 1) * sample_out],
                            *h,
                            *w,
                            *c,
                            *ph,
                            *pw,
                        )
                    });
                    let mut dinput = Vec::with_capacity(batch * h * w * c);
                    for ch in chunks {
                        dinput.extend_from_slice(&ch);
                    }
                    Self::accumulate(grads, *input, self.nodes[input.0].value.shape(), dinput);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &inp in inputs {
                    let s = self.nodes[inp.0].value.shape().to_vec();
                    let d = s[*axis];
                    if self.needs(inp) {
                        let mut di = vec![0.0; outer * d * inner];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            di[o * d * inner..(o + 1) * d * inner]
                                .copy_from_slice(&g[src_start..src_start + d * inner]);
                        }
                        Self::accumulate(grads, inp, &s, di);
                    }
                    offset += d;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                if self.needs(*input) {
                    let s = self.nodes[input.0].value.shape().to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let d = s[*axis];
                    let mut di = vec![0.0; self.nodes[input.0].value.len()];
                    for o in 0..outer {
                        let dst_start = (o * d + start) * inner;
                        di[dst_start..dst_start + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    Self::accumulate(grads, *input, &s, di);
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, self.nodes[input.0].value.shape(), g.to_vec());
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let n = self.nodes[input.0].value.len();
                    Self::accumulate(
                        grads,
                        *input,
                        self.nodes[input.0].value.shape(),
                        vec![g[0]; n],
                    );
                }
            }
            Op::Mean { input } => {
                if self.needs(*input) {
                    let n = self.nodes[input.0].value.len();
                    Self::accumulate(
                        grads,
                        *input,
                        self.nodes[input.0].value.shape(),
                        vec![g[0] / n as f64; n],
                    );
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: usize,
        g: &[f64],
        input: TensorId,
        filters: TensorId,
        bias: TensorId,
        dims: &ConvDims,
        batch: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let _ = node;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[filters.0].value;
        let wt = kernels::filters_to_wt(w.data(), dims);
        let sample_in = dims.h * dims.w * dims.cin;
        let sample_out = dims.h * dims.w * dims.filters;
        let k = dims.patch_len();
        let need_input = self.needs(input);
        let need_w = self.needs(filters);
        let need_b = self.needs(bias);

        let chunk = batch.div_ceil(GRAD_CHUNKS);
        let ranges: Vec<(usize, usize)> = (0..batch)
            .step_by(chunk.max(1))
            .map(|s| (s, (s + chunk).min(batch)))
            .collect();
        let xdata = x.data();
        // Per fixed chunk: local weight/bias accumulators plus the input
        // gradient for the chunk's samples. Combining in chunk order keeps
        // the sums independent of the worker count.
        let parts = exec::par_map(ranges, |(lo, hi)| {
            let mut dwt = vec![0.0; k * dims.filters];
            let mut dbias = vec![0.0; dims.filters];
            let mut dinput = vec![0.0; (hi - lo) * sample_in];
            for s in lo..hi {
                let (di, dw, db) = kernels::conv2d_same_backward_sample(
                    &xdata[s * sample_in..(s + 1) * sample_in],
                    &wt,
                    &g[s * sample_out..(s + 1) * sample_out],
                    dims,
                );
                dinput[(s - lo) * sample_in..(s - lo + 1) * sample_in].copy_from_slice(&di);
                for (a, b) in dwt.iter_mut().zip(&dw) {
                    *a += b;
                }
                for (a, b) in dbias.iter_mut().zip(&db) {
                    *a += b;
                }
            }
            (dinput, dwt, dbias)
        });

        let mut dwt_total = vec![0.0; k * dims.filters];
        let mut dbias_total = vec![0.0; dims.filters];
        let mut dinput_total = Vec::with_capacity(batch * sample_in);
        for (di, dw, db) in parts {
            dinput_total.extend_from_slice(&di);
            for (a, b) in dwt_total.iter_mut().zip(&dw) {
                *a += b;
            }
            for (a, b) in dbias_total.iter_mut().zip(&db) {
                *a += b;
            }
        }
        if need_input {
            Self::accumulate(grads, input, x.shape(), dinput_total);
        }
        if need_w {
            // dwt is [patch_len, f]; filters are [f, patch_len] flattened.
            let mut dfilters = vec![0.0; dims.filters * k];
            for ki in 0..k {
                for fi in 0..dims.filters {
                    dfilters[fi * k + ki] = dwt_total[ki * dims.filters + fi];
                }
            }
            Self::accumulate(grads, filters, w.shape(), dfilters);
        }
        if need_b {
            Self::accumulate(grads, bias, self.nodes[bias.0].value.shape(), dbias_total);
        }
    }
}
