//! Append-only computation graph with reverse-mode gradients.

use std::sync::Arc;

use super::conv::{gemm, ConvGeometry, MatRef};
use super::tensor::{strides, Result, Tensor, TensorError};
use super::warp::{Affine2, WarpPlan};

/// Inputs of `sqrt` below this value are differentiated as if they were at it.
pub const SQRT_GRAD_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Scale(f64),
    Offset(f64),
    Sqrt,
    Square,
    Sigmoid,
    LeakyRelu(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    /// `map[i]` is the output slot of input element `i`.
    Reduce {
        a: Var,
        map: Vec<usize>,
        scale: f64,
    },
    Max {
        a: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Stack(Vec<Var>),
    SliceLast {
        a: Var,
        start: usize,
    },
    SoftmaxLast(Var),
    SpatialDiff {
        a: Var,
        axis: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Warp {
        a: Var,
        plan: Arc<WarpPlan>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in insertion order; inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = match kind {
            UnaryKind::Scale(s) => x.data().iter().map(|v| v * s).collect(),
            UnaryKind::Offset(s) => x.data().iter().map(|v| v + s).collect(),
            UnaryKind::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.data().iter().map(|v| v.sqrt()).collect()
            }
            UnaryKind::Square => x.data().iter().map(|v| v * v).collect(),
            UnaryKind::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::LeakyRelu(slope) => x
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
            UnaryKind::Clamp(lo, hi) => x.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Unary { kind, a }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(s), a)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(UnaryKind::Offset(s), a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let bcast = if xa.shape() == xb.shape() {
            Broadcast::Same
        } else if xb.is_scalar() {
            Broadcast::RightScalar
        } else if xa.is_scalar() {
            Broadcast::LeftScalar
        } else {
            return Err(TensorError::ShapeMismatch {
                op: binary_name(kind),
                left: xa.shape().to_vec(),
                right: xb.shape().to_vec(),
            });
        };
        if kind == BinaryKind::Div && xb.data().iter().any(|v| *v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let f = |p: f64, q: f64| match kind {
            BinaryKind::Add => p + q,
            BinaryKind::Sub => p - q,
            BinaryKind::Mul => p * q,
            BinaryKind::Div => p / q,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
            Broadcast::Same => (
                xa.shape().to_vec(),
                xa.data().iter().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect(),
            ),
            Broadcast::RightScalar => {
                let q = xb.data()[0];
                (
                    xa.shape().to_vec(),
                    xa.data().iter().map(|&p| f(p, q)).collect(),
                )
            }
            Broadcast::LeftScalar => {
                let p = xa.data()[0];
                (
                    xb.shape().to_vec(),
                    xb.data().iter().map(|&q| f(p, q)).collect(),
                )
            }
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`, dropping them from the shape. An empty axis list
    /// reduces over every axis.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let op_name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let mut reduced = vec![axes.is_empty(); shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return Err(TensorError::InvalidAxis {
                    op: op_name,
                    axis: ax,
                    shape,
                });
            }
            reduced[ax] = true;
        }
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(n, _)| *n)
            .product();
        if count == 0 || x.numel() == 0 {
            return Err(TensorError::EmptyReduction { op: op_name });
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(n, _)| *n)
            .collect();
        let out_strides = strides(&out_shape);
        // Output stride contributed by each input axis (0 for reduced axes).
        let mut axis_step = vec![0; shape.len()];
        let mut k = 0;
        for (i, r) in reduced.iter().enumerate() {
            if !r {
                axis_step[i] = out_strides[k];
                k += 1;
            }
        }
        let out_len: usize = out_shape.iter().product();
        let mut map = Vec::with_capacity(x.numel());
        let mut coord = vec![0usize; shape.len()];
        let mut slot = 0usize;
        for _ in 0..x.numel() {
            map.push(slot);
            for ax in (0..shape.len()).rev() {
                coord[ax] += 1;
                slot += axis_step[ax];
                if coord[ax] < shape[ax] {
                    break;
                }
                slot -= axis_step[ax] * shape[ax];
                coord[ax] = 0;
            }
        }

        let rg = self.any_grad(&[a]);
        let x = self.value(a);
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if kind == ReduceKind::Mean {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let mut out = vec![0.0; out_len];
                for (v, &m) in x.data().iter().zip(&map) {
                    out[m] += v;
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                let value = Tensor::new(out_shape, out)?;
                Ok(self.push(value, Op::Reduce { a, map, scale }, rg))
            }
            ReduceKind::Max => {
                let mut out = vec![f64::NEG_INFINITY; out_len];
                let mut argmax = vec![usize::MAX; out_len];
                // Strictly-greater update keeps the lowest flat index on ties.
                for (i, (&v, &m)) in x.data().iter().zip(&map).enumerate() {
                    if argmax[m] == usize::MAX || v > out[m] {
                        out[m] = v;
                        argmax[m] = i;
                    }
                }
                let value = Tensor::new(out_shape, out)?;
                Ok(self.push(value, Op::Max { a, argmax }, rg))
            }
        }
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, &[])
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, &[])
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(TensorError::Dimension {
                op: "permute",
                detail: format!("permutation {perm:?} for rank {rank}"),
            });
        }
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::Dimension {
                    op: "permute",
                    detail: format!("invalid permutation {perm:?}"),
                });
            }
            seen[p] = true;
        }
        let data = permute_data(x.data(), x.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Dimension {
                op: "stack",
                detail: "nothing to stack".into(),
            });
        };
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).numel());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: inner,
                    right: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    /// Takes `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let Some(&last) = x.shape().last() else {
            return Err(TensorError::Dimension {
                op: "slice_last",
                detail: "scalar input".into(),
            });
        };
        if start + len > last || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice_last",
                detail: format!("range {start}..{} outside axis of {last}", start + len),
            });
        }
        let data: Vec<f64> = x
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceLast { a, start }, rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some(&last) = x.shape().last() else {
            return Err(TensorError::Dimension {
                op: "softmax",
                detail: "scalar input".into(),
            });
        };
        if last == 0 {
            return Err(TensorError::EmptyReduction { op: "softmax" });
        }
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / z));
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SoftmaxLast(a), rg))
    }

    /// Forward differences along one of the two trailing (spatial) axes:
    /// `axis = 0` differences rows, `axis = 1` columns. The last row or column,
    /// which has no neighbour, yields zero.
    pub fn spatial_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let rank = x.shape().len();
        if rank < 2 || axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "spatial_diff",
                axis,
                shape: x.shape().to_vec(),
            });
        }
        let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let mut data = vec![0.0; x.numel()];
        for (plane_in, plane_out) in x.data().chunks(h * w).zip(data.chunks_mut(h * w)) {
            for i in 0..h {
                for j in 0..w {
                    let next = if axis == 0 {
                        (i + 1 < h).then(|| plane_in[(i + 1) * w + j])
                    } else {
                        (j + 1 < w).then(|| plane_in[i * w + j + 1])
                    };
                    if let Some(n) = next {
                        plane_out[i * w + j] = n - plane_in[i * w + j];
                    }
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SpatialDiff { a, axis }, rg))
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of an `N×C×H×W` input with `O×C×kh×kw` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                detail: format!("input {xs:?} and kernel {ks:?} must both be rank 4"),
            });
        }
        if xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ks,
            });
        }
        if stride == 0 || xs[2] + 2 * pad < ks[2] || xs[3] + 2 * pad < ks[3] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                detail: format!("no output for input {xs:?}, kernel {ks:?}, stride {stride}, pad {pad}"),
            });
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - ks[2]) / stride + 1,
            out_w: (xs[3] + 2 * pad - ks[3]) / stride + 1,
        };
        let (batch, out_ch) = (xs[0], ks[0]);
        let keep_cols = self.requires_grad(kernel);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let out_plane = out_ch * cols_n;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; batch * out_plane];
        let mut saved = keep_cols.then(|| vec![0.0; batch * rows * cols_n]);
        let mut scratch = vec![0.0; rows * cols_n];
        for n in 0..batch {
            let col: &mut [f64] = match saved.as_mut() {
                Some(buf) => &mut buf[n * rows * cols_n..(n + 1) * rows * cols_n],
                None => &mut scratch,
            };
            geom.im2col(&x[n * in_plane..(n + 1) * in_plane], col);
            gemm(
                MatRef::new(k, out_ch, rows),
                MatRef::new(col, rows, cols_n),
                0.0,
                &mut out[n * out_plane..(n + 1) * out_plane],
            );
        }
        let value = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    /// Adds one bias per channel of an `N×C×H×W` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(input).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                left: xs,
                right: bs,
            });
        }
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(input).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = b[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(xs, data)?;
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    // ---- resampling --------------------------------------------------------

    /// Warps a `C×h×w` image onto a `C×out_h×out_w` canvas through `affine`
    /// (source to destination). Differentiable with respect to the image only.
    pub fn bilinear_warp(
        &mut self,
        image: Var,
        affine: &Affine2,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let s = self.shape(image);
        if s.len() != 3 {
            return Err(TensorError::Dimension {
                op: "bilinear_warp",
                detail: format!("expected C×H×W, got {s:?}"),
            });
        }
        let plan = WarpPlan::new(affine, (s[1], s[2]), out_hw)?;
        self.warp_with_plan(image, Arc::new(plan))
    }

    pub fn warp_with_plan(&mut self, image: Var, plan: Arc<WarpPlan>) -> Result<Var> {
        let s = self.shape(image).to_vec();
        if s.len() != 3 || (s[1], s[2]) != plan.src_hw() {
            return Err(TensorError::Dimension {
                op: "bilinear_warp",
                detail: format!("image {s:?} does not match plan source {:?}", plan.src_hw()),
            });
        }
        let data = plan.apply(self.value(image).data(), s[0]);
        let (h, w) = plan.dst_hw();
        let value = Tensor::new(vec![s[0], h, w], data)?;
        let rg = self.any_grad(&[image]);
        Ok(self.push(value, Op::Warp { a: image, plan }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `root`, visiting each node once in reverse
    /// insertion order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                    return None;
                }
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.value.numel()]);
                Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let mut acc = self.slot(grads, *a);
                for i in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Scale(s) => s,
                        UnaryKind::Offset(_) => 1.0,
                        UnaryKind::Sqrt => 0.5 / x[i].max(SQRT_GRAD_EPS).sqrt(),
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::LeakyRelu(slope) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                slope
                            }
                        }
                        UnaryKind::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    if let Some(acc) = acc.as_deref_mut() {
                        acc[i] += d * g[i];
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::Binary { kind, a, b, bcast } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let at = |i: usize, side_scalar: bool| if side_scalar { 0 } else { i };
                let (sa, sb) = (
                    *bcast == Broadcast::LeftScalar,
                    *bcast == Broadcast::RightScalar,
                );
                if self.requires_grad(*a) {
                    let mut acc = self.slot(grads, *a);
                    let acc_ref = acc.as_deref_mut().unwrap();
                    for i in 0..g.len() {
                        let q = xb[at(i, sb)];
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => q,
                            BinaryKind::Div => 1.0 / q,
                        };
                        acc_ref[at(i, sa)] += d * g[i];
                    }
                    self.store(grads, *a, acc);
                }
                if self.requires_grad(*b) {
                    let mut acc = self.slot(grads, *b);
                    let acc_ref = acc.as_deref_mut().unwrap();
                    for i in 0..g.len() {
                        let (p, q) = (xa[at(i, sa)], xb[at(i, sb)]);
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => p,
                            BinaryKind::Div => -p / (q * q),
                        };
                        acc_ref[at(i, sb)] += d * g[i];
                    }
                    self.store(grads, *b, acc);
                }
            }
            Op::Reduce { a, map, scale } => {
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    for (v, &m) in acc_ref.iter_mut().zip(map) {
                        *v += g[m] * scale;
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::Max { a, argmax } => {
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    for (o, &i) in argmax.iter().enumerate() {
                        acc_ref[i] += g[o];
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::Reshape(a) => {
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    acc_ref.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
                self.store(grads, *a, acc);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    acc_ref.iter_mut().zip(&back).for_each(|(v, d)| *v += d);
                }
                self.store(grads, *a, acc);
            }
            Op::Stack(parts) => {
                let chunk = g.len() / parts.len();
                for (k, p) in parts.iter().enumerate() {
                    let mut acc = self.slot(grads, *p);
                    if let Some(acc_ref) = acc.as_deref_mut() {
                        acc_ref
                            .iter_mut()
                            .zip(&g[k * chunk..(k + 1) * chunk])
                            .for_each(|(v, d)| *v += d);
                    }
                    self.store(grads, *p, acc);
                }
            }
            Op::SliceLast { a, start } => {
                let last_in = *self.shape(*a).last().unwrap();
                let last_out = *node.value.shape().last().unwrap();
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    for (row_in, row_g) in acc_ref.chunks_mut(last_in).zip(g.chunks(last_out)) {
                        for (v, d) in row_in[*start..*start + last_out].iter_mut().zip(row_g) {
                            *v += d;
                        }
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::SoftmaxLast(a) => {
                let last = *node.value.shape().last().unwrap();
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    for ((row_acc, y), gr) in acc_ref
                        .chunks_mut(last)
                        .zip(node.value.data().chunks(last))
                        .zip(g.chunks(last))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..last {
                            row_acc[k] += y[k] * (gr[k] - dot);
                        }
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::SpatialDiff { a, axis } => {
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    for (pa, pg) in acc_ref.chunks_mut(h * w).zip(g.chunks(h * w)) {
                        for i in 0..h {
                            for j in 0..w {
                                let next = if *axis == 0 {
                                    (i + 1 < h).then(|| (i + 1) * w + j)
                                } else {
                                    (j + 1 < w).then(|| i * w + j + 1)
                                };
                                if let Some(n) = next {
                                    let d = pg[i * w + j];
                                    pa[n] += d;
                                    pa[i * w + j] -= d;
                                }
                            }
                        }
                    }
                }
                self.store(grads, *a, acc);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let out_ch = self.shape(*kernel)[0];
                let batch = self.shape(*input)[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_plane = out_ch * cols_n;
                let in_plane = geom.channels * geom.height * geom.width;
                if self.requires_grad(*kernel) {
                    let cols = cols.as_ref().expect("columns saved for kernel gradient");
                    let mut acc = self.slot(grads, *kernel);
                    let acc_ref = acc.as_deref_mut().unwrap();
                    for n in 0..batch {
                        gemm(
                            MatRef::new(&g[n * out_plane..(n + 1) * out_plane], out_ch, cols_n),
                            MatRef::new(&cols[n * rows * cols_n..(n + 1) * rows * cols_n], rows, cols_n)
                                .t(),
                            1.0,
                            acc_ref,
                        );
                    }
                    self.store(grads, *kernel, acc);
                }
                if self.requires_grad(*input) {
                    let k = self.value(*kernel).data();
                    let mut acc = self.slot(grads, *input);
                    let acc_ref = acc.as_deref_mut().unwrap();
                    let mut dcol = vec![0.0; rows * cols_n];
                    for n in 0..batch {
                        gemm(
                            MatRef::new(k, out_ch, rows).t(),
                            MatRef::new(&g[n * out_plane..(n + 1) * out_plane], out_ch, cols_n),
                            0.0,
                            &mut dcol,
                        );
                        geom.col2im(&dcol, &mut acc_ref[n * in_plane..(n + 1) * in_plane]);
                    }
                    self.store(grads, *input, acc);
                }
            }
            Op::ChannelBias { input, bias } => {
                let s = node.value.shape();
                let (channels, plane) = (s[1], s[2] * s[3]);
                if self.requires_grad(*bias) {
                    let mut acc = self.slot(grads, *bias);
                    let acc_ref = acc.as_deref_mut().unwrap();
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        acc_ref[i % channels] += chunk.iter().sum::<f64>();
                    }
                    self.store(grads, *bias, acc);
                }
                let mut acc = self.slot(grads, *input);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    acc_ref.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
                self.store(grads, *input, acc);
            }
            Op::Warp { a, plan } => {
                let channels = self.shape(*a)[0];
                let mut acc = self.slot(grads, *a);
                if let Some(acc_ref) = acc.as_deref_mut() {
                    plan.apply_transpose(g, channels, acc_ref);
                }
                self.store(grads, *a, acc);
            }
        }
    }

    /// Takes the accumulator for `v` out of `grads`, or `None` when `v`
    /// needs no gradient.
    fn slot(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(v).numel()]),
        )
    }

    fn store(&self, grads: &mut [Option<Vec<f64>>], v: Var, acc: Option<Vec<f64>>) {
        if acc.is_some() {
            grads[v.0] = acc;
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut coord = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            coord[ax] += 1;
            src += step[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            coord[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mul_and_its_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1], &[2.0]), true);
        let b = g.leaf(t(&[1], &[3.0]), true);
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.1, -2.0, 7.5]), false);
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), Some(0.5));
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn sqrt_of_negative_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(g.sqrt(a), Err(TensorError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn max_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[0.72, 0.45]), true);
        let m = g.max(a, &[]).unwrap();
        assert_eq!(g.value(m).item(), Some(0.72));
        assert_eq!(g.backward(m).unwrap().get(a).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[0.5, 0.9, 0.9]), true);
        let m = g.max(a, &[]).unwrap();
        assert_eq!(g.backward(m).unwrap().get(a).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_and_sum() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = g.mean_all(a).unwrap();
        assert_eq!(g.value(m).item(), Some(2.5));
        assert_eq!(g.backward(m).unwrap().get(a).unwrap().data(), &[0.25; 4]);
        let ones = g.constant(Tensor::ones([2, 2]));
        let s = g.sum_all(ones).unwrap();
        assert_eq!(g.value(s).item(), Some(4.0));
    }

    #[test]
    fn partial_axis_reduction() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let rows = g.sum(a, &[1]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 15.0]);
        let cols = g.max(a, &[0]).unwrap();
        assert_eq!(g.value(cols).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_and_invalid_reductions_fail() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros([0, 3]));
        assert!(matches!(
            g.sum(e, &[0]),
            Err(TensorError::EmptyReduction { .. })
        ));
        let a = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.sum(a, &[1]), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([2]), true);
        let y = g.square(a).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let k = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_reproduces_interior() {
        let mut g = Graph::new();
        let img = Tensor::from_fn([1, 1, 4, 5], |i| i as f64 * 0.5);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = g.constant(img.clone());
        let kv = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, kv, 1, 0).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out.data()[i * 3 + j], img.data()[(i + 1) * 5 + j + 1]);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 2, 3, 3]));
        let k = g.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(matches!(
            g.conv2d(x, k, 1, 0),
            Err(TensorError::ShapeMismatch { op: "conv2d", .. })
        ));
    }

    #[test]
    fn permute_moves_channels_last() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 2, 1, 3], |i| i as f64));
        let y = g.permute(x, &[0, 2, 3, 1]).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let mut g = Graph::new();
        let img = Tensor::from_fn([3, 4, 5], |i| ((i * 7) % 11) as f64 / 11.0);
        let x = g.constant(img.clone());
        let y = g.bilinear_warp(x, &Affine2::IDENTITY, (4, 5)).unwrap();
        assert!(g.value(y).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn quarter_turn_permutes_two_by_two() {
        // a b      c a
        // c d  ->  d b   (90° about the centre, y pointing down)
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let about = Affine2::translation(1.0, 1.0)
            .then_after(&Affine2::rotation_deg(90.0))
            .then_after(&Affine2::translation(-1.0, -1.0));
        let y = g.bilinear_warp(x, &about, (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.0, 4.0, 2.0]);
    }
}
