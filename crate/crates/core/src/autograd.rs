//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes whose inputs were created earlier, so reverse insertion order
//! is a valid topological order for [`Tape::backward`]. Gradients land on
//! leaves that were created with `requires_grad` and accumulate across calls
//! until [`Tape::zero_grad`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{col2im, gemm, im2col, ConvGeom, Layout};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a custom backward rule may look at.
pub struct CustomGradCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync;
type BackwardFn = dyn Fn(&CustomGradCtx<'_>) -> Vec<Vec<f64>> + Send + Sync;

/// A user-defined operation with a hand-assigned gradient.
pub struct CustomOp {
    name: String,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl CustomOp {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomOp").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Registers an operation whose forward may be non-differentiable and whose
/// backward rule is applied verbatim by the tape. The backward closure must
/// return one gradient per input, each with that input's element count.
pub fn register_custom_grad<F, B>(name: impl Into<String>, forward: F, backward: B) -> Arc<CustomOp>
where
    F: Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
    B: Fn(&CustomGradCtx<'_>) -> Vec<Vec<f64>> + Send + Sync + 'static,
{
    Arc::new(CustomOp { name: name.into(), forward: Box::new(forward), backward: Box::new(backward) })
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Conv2d(ConvGeom),
    Relu,
    Add,
    AddBias,
    ScaleBy(f64),
    MulScalar,
    Sum,
    Mean,
    SoftmaxXent { targets: Vec<usize>, probs: Vec<f64> },
    Reshape,
    Custom(Arc<CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Vec::new(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { value, inputs, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: Vec<Var>, op: Op) -> Var {
        let rg = self.any_grad(&inputs);
        self.push(value, inputs, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), Layout::row_major(m, k), tb.data(), Layout::row_major(k, n), 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, vec![a, b], Op::MatMul))
    }

    /// Cross-correlation (no kernel flip) with zero padding.
    /// `x: N×C×H×W`, `w: F×C×kh×kw` → `N×F×H'×W'`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("conv2d", format!("input {:?} kernel {:?}", tx.shape(), tw.shape())));
        }
        let (batch, channels, height, width) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (filters, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let (out_h, out_w) = conv_output_extent(height, width, kh, kw, stride, padding)?;
        let g = ConvGeom { channels, height, width, kh, kw, stride, padding, out_h, out_w };
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; batch * filters * ncols];
        let img_len = channels * height * width;
        for n in 0..batch {
            im2col(&tx.data()[n * img_len..(n + 1) * img_len], &g, &mut cols);
            gemm(
                tw.data(),
                Layout::row_major(filters, rows),
                &cols,
                Layout::row_major(rows, ncols),
                0.0,
                &mut out[n * filters * ncols..(n + 1) * filters * ncols],
            );
        }
        let value = Tensor::new(vec![batch, filters, out_h, out_w], out)?;
        Ok(self.record(value, vec![x, w], Op::Conv2d(g)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(value, vec![x], Op::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Op::Add))
    }

    /// Adds `bias[f]` along axis 1 of an `N×F` or `N×F×H×W` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(mismatch("add_bias", format!("{:?} + bias {:?}", tx.shape(), tb.shape())));
        }
        let features = tb.shape()[0];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % features];
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.record(value, vec![x, bias], Op::AddBias))
    }

    /// Multiplies by a constant; the backward rule multiplies incoming grads by `s`.
    pub fn scale_by(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.record(value, vec![x], Op::ScaleBy(s))
    }

    /// Multiplies `x` by a scalar tape value; both receive gradients.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(x).map(|v| v * sv);
        Ok(self.record(value, vec![s, x], Op::MulScalar))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(total), vec![x], Op::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record(Tensor::scalar(m), vec![x], Op::Mean)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.record(value, vec![x], Op::Reshape))
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(mismatch("softmax_cross_entropy", format!("logits {:?}, {} targets", t.shape(), targets.len())));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::TargetOutOfRange { target: bad, classes });
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for (row, (&y, p)) in t.data().chunks_exact(classes).zip(targets.iter().zip(probs.chunks_exact_mut(classes))) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            loss += z.ln() - (row[y] - max);
        }
        loss /= targets.len() as f64;
        let op = Op::SoftmaxXent { targets: targets.to_vec(), probs };
        Ok(self.record(Tensor::scalar(loss), vec![logits], op))
    }

    /// Applies a registered custom operation.
    pub fn apply_custom(&mut self, op: &Arc<CustomOp>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            (op.forward)(&args)?
        };
        Ok(self.record(value, inputs.to_vec(), Op::Custom(Arc::clone(op))))
    }

    /// Back-propagates from a scalar `loss`, accumulating into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.nodes[idx].requires_grad {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                continue;
            }
            let node = &self.nodes[idx];
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward_rule(&node.op, &inputs, &node.value, &g, &needs)?;
            let input_ids = node.inputs.clone();
            for ((v, ig), need) in input_ids.into_iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}

/// Output extent of a strided, padded convolution; errors when not integral.
pub fn conv_output_extent(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    let one = |size: usize, k: usize| -> Result<usize> {
        let padded = size + 2 * padding;
        if stride == 0 || k == 0 || padded < k || (padded - k) % stride != 0 {
            return Err(mismatch(
                "conv2d",
                format!("extent {size} with kernel {k}, stride {stride}, padding {padding} is not integral"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok((one(h, kh)?, one(w, kw)?))
}

fn backward_rule(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let lg = Layout::row_major(m, n);
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(g, lg, b.data(), Layout::row_major(k, n).transposed(), 0.0, &mut ga);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(a.data(), Layout::row_major(m, k).transposed(), g, lg, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Op::Conv2d(geom) => {
            let (x, w) = (inputs[0], inputs[1]);
            let (batch, filters) = (x.shape()[0], w.shape()[0]);
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let img_len = geom.channels * geom.height * geom.width;
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = needs[1].then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; rows * ncols];
            let mut dcols = vec![0.0; rows * ncols];
            for n in 0..batch {
                let gn = &g[n * filters * ncols..(n + 1) * filters * ncols];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[n * img_len..(n + 1) * img_len], geom, &mut cols);
                    gemm(gn, Layout::row_major(filters, ncols), &cols, Layout::row_major(rows, ncols).transposed(), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        w.data(),
                        Layout::row_major(filters, rows).transposed(),
                        gn,
                        Layout::row_major(filters, ncols),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, geom, &mut gx[n * img_len..(n + 1) * img_len]);
                }
            }
            vec![gx, gw]
        }
        Op::Relu => {
            let x = inputs[0];
            vec![Some(x.data().iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect())]
        }
        Op::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        Op::AddBias => {
            let x = inputs[0];
            let features = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; features];
                for (i, &gi) in g.iter().enumerate() {
                    gb[(i / inner) % features] += gi;
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }
        Op::ScaleBy(s) => vec![Some(g.iter().map(|&gi| gi * s).collect())],
        Op::MulScalar => {
            let (s, x) = (inputs[0].data()[0], inputs[1]);
            let gs = needs[0].then(|| vec![x.data().iter().zip(g).map(|(a, b)| a * b).sum::<f64>()]);
            let gx = needs[1].then(|| g.iter().map(|&gi| gi * s).collect());
            vec![gs, gx]
        }
        Op::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
        Op::Mean => {
            let n = inputs[0].len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SoftmaxXent { targets, probs } => {
            let classes = inputs[0].shape()[1];
            let scale = g[0] / targets.len() as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (row, &y) in gl.chunks_exact_mut(classes).zip(targets) {
                row[y] -= scale;
            }
            vec![Some(gl)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Custom(custom) => {
            let ctx = CustomGradCtx { inputs, output: out, grad_output: g };
            let grads = (custom.backward)(&ctx);
            if grads.len() != inputs.len() {
                return Err(Error::CustomGradContract {
                    op: custom.name.clone(),
                    detail: format!("{} gradients for {} inputs", grads.len(), inputs.len()),
                });
            }
            for (i, (gi, x)) in grads.iter().zip(inputs).enumerate() {
                if gi.len() != x.len() {
                    return Err(Error::CustomGradContract {
                        op: custom.name.clone(),
                        detail: format!("input {i}: gradient has {} elements, input has {}", gi.len(), x.len()),
                    });
                }
            }
            grads.into_iter().map(Some).collect()
        }
    })
}
