//! Reverse-mode gradient recording.
//!
//! A [`Tape`] owns every value produced by the operations called on it. Each
//! operation appends one node holding its output and whatever it needs for
//! the backward pass, so nodes are in topological order by construction.
//! [`Tape::backward`] walks them in reverse and leaves the gradient of the
//! scalar output in the `grad` field of every node that depends on a leaf.
//!
//! A tape built with [`Tape::no_grad`] runs the same forward kernels without
//! keeping backward buffers; it is meant for inference.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

use super::ops::{self, count_macs, gemm, ConvGeom, MatRef};
use super::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Gather {
        input: Var,
        index: Vec<Option<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    ScalarFn {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only tape: values are computed but nothing is saved for
    /// backward and [`Tape::backward`] fails.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = self.record;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad.as_deref()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index()]
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        value.node = Some(var);
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        var
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.tape != self.id || v.index() >= self.nodes.len() {
                return Err(Error::Tape(format!("{op}: operand is not on this tape")));
            }
        }
        Ok(())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check("conv2d", &[input, kernel])?;
        let geom = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        let (out, cols) = ops::conv2d_raw(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.record,
        );
        let value = Tensor::new(&[geom.c_out, geom.ho, geom.wo], out)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: cols.unwrap_or_default(),
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C,H,W]` tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.check("add_channel_bias", &[input, bias])?;
        let x = self.value(input);
        let b = self.value(bias);
        x.expect_rank("add_channel_bias", 3)?;
        if b.shape() != [x.shape()[0]] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("input {:?}, bias {:?}", x.shape(), b.shape()),
            ));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.data().to_vec();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check("relu", &[input])?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    /// Batched affine map: `[n,in]·weightᵀ + bias` with `weight: [out,in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check("linear", &[input, weight, bias])?;
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        x.expect_rank("linear", 2)?;
        w.expect_rank("linear", 2)?;
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = w.shape()[0];
        if w.shape()[1] != d_in || b.shape() != [d_out] {
            return Err(Error::dim(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(MatRef::new(x.data(), n, d_in), MatRef::t(w.data(), d_out, d_in), 1.0, &mut out);
        count_macs((n * d_in * d_out) as u64);
        let value = Tensor::new(&[n, d_out], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// `[n,k]·[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        x.expect_rank("matmul", 2)?;
        y.expect_rank("matmul", 2)?;
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        if y.shape()[0] != k {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let mut out = vec![0.0; n * m];
        gemm(MatRef::new(x.data(), n, k), MatRef::new(y.data(), k, m), 0.0, &mut out);
        count_macs((n * k * m) as u64);
        let value = Tensor::new(&[n, m], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Softmax along the last axis (rank 1 or 2).
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        self.check("softmax", &[input])?;
        let x = self.value(input);
        if x.rank() > 2 {
            return Err(Error::dim("softmax", format!("rank {} unsupported", x.rank())));
        }
        let width = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        out.chunks_mut(width).for_each(ops::softmax_in_place);
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SoftmaxRows(input), rg))
    }

    /// `out[i] = input[index[i]]`, or zero where the index is `None`.
    /// Indices address the flattened input.
    pub fn gather(&mut self, input: Var, shape: &[usize], index: Vec<Option<usize>>) -> Result<Var> {
        self.check("gather", &[input])?;
        let x = self.value(input);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", format!("shape {shape:?} vs {} indices", index.len())));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= x.len()) {
            return Err(Error::dim("gather", format!("index {bad} out of range {}", x.len())));
        }
        let out = index
            .iter()
            .map(|i| i.map_or(0.0, |i| x.data()[i]))
            .collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[input]);
        let index = if self.record { index } else { Vec::new() };
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check("concat", inputs)?;
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need at least one input and axis 0 or 1"));
        }
        for &v in inputs {
            self.value(v).expect_rank("concat", 2)?;
        }
        let shapes: Vec<[usize; 2]> = inputs
            .iter()
            .map(|&v| [self.value(v).shape()[0], self.value(v).shape()[1]])
            .collect();
        let keep = 1 - axis;
        if shapes.iter().any(|s| s[keep] != shapes[0][keep]) {
            return Err(Error::dim("concat", format!("incompatible shapes {shapes:?}")));
        }
        let (out, shape) = if axis == 0 {
            let rows = shapes.iter().map(|s| s[0]).sum();
            let data = inputs.iter().flat_map(|&v| self.value(v).data().iter().copied()).collect();
            (data, [rows, shapes[0][1]])
        } else {
            let n = shapes[0][0];
            let width: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(n * width);
            for r in 0..n {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            (data, [n, width])
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(op, &[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check("scale", &[a])?;
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape(), out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", &[a])?;
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", &[a])?;
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Scalar function of `input` whose value and local gradient were
    /// computed by the caller. Backward scales `local_grad` by the upstream
    /// gradient.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        self.check("scalar_fn", &[input])?;
        if local_grad.len() != self.value(input).len() {
            return Err(Error::dim(
                "scalar_fn",
                format!("gradient of length {} for input of {}", local_grad.len(), self.value(input).len()),
            ));
        }
        let rg = self.needs(&[input]);
        let local_grad = if self.record { local_grad } else { Vec::new() };
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, local_grad }, rg))
    }

    /// Differentiates the `[1]`-shaped `output` with respect to every node
    /// that depends on a leaf. Results are read back with [`Tape::grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if output.tape != self.id || output.index() >= self.nodes.len() {
            return Err(Error::Tape("backward: output was not produced on this tape".into()));
        }
        if !self.record {
            return Err(Error::Tape("backward: tape was built without recording".into()));
        }
        if self.value(output).shape() != [1] {
            return Err(Error::Tape(format!(
                "backward: output must have shape [1], got {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.index() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index()] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.index()];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.index()].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.index()].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (co, k, p) = (geom.c_out, geom.patch_len(), geom.out_len());
                acc(*kernel, &mut |dk| {
                    gemm(MatRef::new(g, co, p), MatRef::t(cols, k, p), 1.0, dk)
                });
                acc(*input, &mut |dx| {
                    let mut dcols = vec![0.0; k * p];
                    gemm(MatRef::t(val(*kernel).data(), co, k), MatRef::new(g, co, p), 0.0, &mut dcols);
                    if geom.is_pointwise() {
                        dx.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
                    } else {
                        geom.col2im(&dcols, dx);
                    }
                });
            }
            Op::ChannelBias { input, bias } => {
                acc(*input, &mut |dx| dx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let c = val(*bias).len();
                let plane = g.len() / c;
                acc(*bias, &mut |db| {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        db[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let y = nodes[i].value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gy), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gy;
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let (n, d_in, d_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                acc(*input, &mut |dx| {
                    gemm(MatRef::new(g, n, d_out), MatRef::new(w.data(), d_out, d_in), 1.0, dx)
                });
                acc(*weight, &mut |dw| {
                    gemm(MatRef::t(g, n, d_out), MatRef::new(x.data(), n, d_in), 1.0, dw)
                });
                acc(*bias, &mut |db| {
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                acc(*a, &mut |da| gemm(MatRef::new(g, n, m), MatRef::t(y.data(), k, m), 1.0, da));
                acc(*b, &mut |db| gemm(MatRef::t(x.data(), n, k), MatRef::new(g, n, m), 1.0, db));
            }
            Op::SoftmaxRows(x) => {
                let y = &nodes[i].value;
                let width = *y.shape().last().unwrap();
                acc(*x, &mut |dx| {
                    for ((drow, yrow), grow) in dx
                        .chunks_mut(width)
                        .zip(y.data().chunks(width))
                        .zip(g.chunks(width))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                acc(*input, &mut |dx| {
                    for (src, &gv) in index.iter().zip(g) {
                        if let Some(s) = src {
                            dx[*s] += gv;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let len = val(v).len();
                        acc(v, &mut |dx| {
                            dx.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                        });
                        offset += len;
                    }
                } else {
                    let width = nodes[i].value.shape()[1];
                    let mut col = 0;
                    for &v in inputs {
                        let w = val(v).shape()[1];
                        acc(v, &mut |dx| {
                            for (r, drow) in dx.chunks_mut(w).enumerate() {
                                let src = &g[r * width + col..r * width + col + w];
                                drow.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * yv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                        *dv += gv * xv;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::ScalarFn { input, local_grad } => {
                acc(*input, &mut |d| {
                    d.iter_mut().zip(local_grad).for_each(|(x, l)| *x += g[0] * l)
                });
            }
        }
    }
}
