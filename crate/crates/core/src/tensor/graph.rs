use super::kernels::{self, ConvGeom};
use super::{Tensor, EPS};
use crate::error::{contract_err, dim_err, CsgError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a fused operation defined outside this module.
///
/// Receives the input values, the forward output and the upstream gradient;
/// returns one gradient buffer per input (`None` for inputs it does not
/// differentiate).
pub trait Backward: Send {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sum { input: Var, map: Vec<usize> },
    L2Normalize { input: Var, norms: Vec<f64> },
    Reshape(Var),
    AddRowBias(Var, Var),
    GatherRows { input: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    UpsampleNearest { input: Var, factor: usize },
    Custom { inputs: Vec<Var>, rule: Box<dyn Backward> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A single-threaded recording of tensor operations.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward replay.
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

    /// Trainable leaf; gradients accumulate into it on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    fn binary_node(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.binary_node(a, b, out, Op::MatMul(a, b)))
    }

    /// Cross-correlation of `CxHxW` or `NxCxHxW` input with a
    /// `C_out x C_in x k x k` kernel and optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols, geom) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.unary(x, out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.binary_node(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.binary_node(a, b, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.binary_node(a, b, out, Op::Mul(a, b)))
    }

    /// Elementwise quotient; divisor magnitudes are floored at `EPS`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).div(self.value(b))?;
        Ok(self.binary_node(a, b, out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.unary(x, out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.unary(x, out, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).exp();
        self.unary(x, out, Op::Exp(x))
    }

    /// Natural log with the argument floored at `EPS`.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).log();
        self.unary(x, out, Op::Log(x))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let axes = kernels::validate_axes(self.value(x).shape(), axes)?;
        let (shape, map) = kernels::reduce_map(self.value(x).shape(), &axes);
        let mut out = vec![0.0; shape.iter().product()];
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v;
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.unary(x, out, Op::Sum { input: x, map }))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let count: usize = kernels::validate_axes(&shape, axes)?.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_axes(x, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Normalise each last-axis row to unit length (`v / max(|v|, EPS)`).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (out, norms) = kernels::l2_normalize_rows(self.value(x));
        self.unary(x, out, Op::L2Normalize { input: x, norms })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.unary(x, out, Op::Reshape(x)))
    }

    /// `x[N x F] + b[F]` row-wise.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, f) = kernels::dims2(self.value(x))?;
        if self.value(bias).numel() != f {
            return dim_err(format!("bias of {} for {} features", self.value(bias).numel(), f));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let out = Tensor::new(vec![n, f], out)?;
        Ok(self.binary_node(x, bias, out, Op::AddRowBias(x, bias)))
    }

    /// Select outer-axis slices (rows of a matrix, images of a batch).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let outer = *t.shape().first().unwrap_or(&0);
        let inner: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return dim_err(format!("row {} out of range for {:?}", r, t.shape()));
            }
            data.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(
            x,
            out,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Concatenate along the outer axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CsgError::Dimension("concat of zero tensors".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut outer = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return dim_err(format!("concat {:?} with trailing {:?}", t.shape(), tail));
            }
            outer += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![outer];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Nearest-neighbour upsampling of the two trailing (spatial) axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(x), factor)?;
        Ok(self.unary(x, out, Op::UpsampleNearest { input: x, factor }))
    }

    /// Record a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn Backward>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = kernels::dims2(val(*a)).expect("matmul lhs");
                let n = val(*b).shape()[1];
                let mut res = Vec::new();
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b).data(), true, &mut ga, 0.0);
                    res.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, g, false, &mut gb, 0.0);
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(geom, cols, val(*kernel).data(), g, wants(*input));
                let mut res = vec![(*kernel, gk)];
                if let Some(gi) = gi {
                    res.push((*input, gi));
                }
                if let Some(b) = bias {
                    res.push((*b, gb));
                }
                res
            }
            Op::Relu(x) => {
                let gx = val(*x).data().iter().zip(g).map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 }).collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_broadcast(g, val(*a))),
                (*b, reduce_broadcast(g, val(*b))),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![(*a, reduce_broadcast(g, val(*a))), (*b, reduce_broadcast(&neg, val(*b)))]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(bv, j)).collect();
                let gb: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(av, j)).collect();
                vec![(*a, reduce_broadcast(&ga, av)), (*b, reduce_broadcast(&gb, bv))]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|j| g[j] / kernels::guard(bcast(bv, j))).collect();
                let gb: Vec<f64> = (0..g.len())
                    .map(|j| {
                        let d = bcast(bv, j);
                        if d.abs() < EPS {
                            0.0
                        } else {
                            -g[j] * bcast(av, j) / (d * d)
                        }
                    })
                    .collect();
                vec![(*a, reduce_broadcast(&ga, av)), (*b, reduce_broadcast(&gb, bv))]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(gg, e)| gg * e).collect())],
            Op::Log(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v < EPS { 0.0 } else { gg / v })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sum { input, map } => vec![(*input, map.iter().map(|&o| g[o]).collect())],
            Op::L2Normalize { input, norms } => {
                let width = *out.shape().last().unwrap_or(&1);
                let xv = val(*input).data();
                let mut gx = vec![0.0; xv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let (y, gy) = (&out.data()[span.clone()], &g[span.clone()]);
                    let raw = xv[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dst = &mut gx[span];
                    if raw < EPS {
                        // clamped branch: y = x / EPS is linear in x
                        dst.iter_mut().zip(gy).for_each(|(d, gg)| *d = gg / n);
                    } else {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            dst[j] = (gy[j] - y[j] * dot) / n;
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::AddRowBias(x, b) => {
                let f = val(*b).numel();
                let mut gb = vec![0.0; f];
                for row in g.chunks(f) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::GatherRows { input, rows } => {
                let iv = val(*input);
                let inner: usize = iv.shape()[1..].iter().product();
                let mut gx = vec![0.0; iv.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*input, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let piece = g[off..off + n].to_vec();
                        off += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::UpsampleNearest { input, factor } => {
                let iv = val(*input);
                let r = iv.rank();
                let (h, w) = (iv.shape()[r - 2], iv.shape()[r - 1]);
                let (ho, wo) = (h * factor, w * factor);
                let mut gx = vec![0.0; iv.numel()];
                for p in 0..iv.numel() / (h * w) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(p * h + y / factor) * w + xx / factor] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                rule.backward(&ins, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }
}

fn bcast(t: &Tensor, j: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

/// Collapse a gradient onto a scalar operand that was broadcast.
fn reduce_broadcast(g: &[f64], operand: &Tensor) -> Vec<f64> {
    if operand.numel() == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}
