use std::sync::Arc;

use super::kernels::{self, ConvCfg, ConvGeom, InterpMode, ResampleDir, ResamplePlan};
use super::{numel, Graph, Slot, Tensor};
use crate::error::{Error, Result};

/// Recorded operation. Each variant's vector-Jacobian product is written in
/// terms of other variants so backward passes are themselves differentiable.
#[derive(Clone)]
pub(super) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Square,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    /// Elementwise product with a constant; backs relu, leaky relu, abs and clamp.
    MaskMul(Arc<Vec<f64>>),
    /// Same gradient as `MaskMul`, plus a constant offset on masked-out entries.
    ClampMin(Arc<Vec<f64>>),
    Sum,
    Expand,
    Reshape,
    MatMul,
    Transpose,
    Conv(ConvCfg),
    ConvInputGrad(ConvCfg),
    ConvWeightGrad(ConvCfg),
    Resample(Arc<ResamplePlan>),
    ResampleT(Arc<ResamplePlan>),
    AddChannel,
    MulChannel,
    SumChannels,
    BroadcastChannels,
    SumLast,
    BroadcastLast,
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::MaskMul(_) => "mask_mul",
            Op::ClampMin(_) => "clamp_min",
            Op::Sum => "sum",
            Op::Expand => "expand",
            Op::Reshape => "reshape",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv(_) => "conv2d",
            Op::ConvInputGrad(_) => "conv2d_input_grad",
            Op::ConvWeightGrad(_) => "conv2d_weight_grad",
            Op::Resample(_) => "resample",
            Op::ResampleT(_) => "resample_transpose",
            Op::AddChannel => "add_channel",
            Op::MulChannel => "mul_channel",
            Op::SumChannels => "sum_channels",
            Op::BroadcastChannels => "broadcast_channels",
            Op::SumLast => "sum_last",
            Op::BroadcastLast => "broadcast_last",
        }
    }

    pub(super) fn vjp(
        &self,
        x: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        let one = |t: Tensor| Ok(vec![Some(t)]);
        match self {
            Op::Leaf => Ok(Vec::new()),
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), want(1).then(|| g.neg()).transpose()?]),
            Op::Mul => Ok(vec![
                want(0).then(|| g.mul(&x[1])).transpose()?,
                want(1).then(|| g.mul(&x[0])).transpose()?,
            ]),
            Op::Div => Ok(vec![
                want(0).then(|| g.div(&x[1])).transpose()?,
                want(1)
                    .then(|| g.mul(out)?.div(&x[1])?.neg())
                    .transpose()?,
            ]),
            Op::Neg => one(g.neg()?),
            Op::Scale(c) => one(g.scale(*c)?),
            Op::AddScalar => one(g.clone()),
            Op::Square => one(g.mul(&x[0])?.scale(2.0)?),
            Op::Sqrt => one(g.div(&out.scale(2.0)?)?),
            Op::Exp => one(g.mul(out)?),
            Op::Log => one(g.div(&x[0])?),
            Op::Sigmoid => {
                let slope = out.mul(&out.neg()?.add_scalar(1.0)?)?;
                one(g.mul(&slope)?)
            }
            Op::MaskMul(mask) | Op::ClampMin(mask) => one(g.mask_mul(mask.clone())?),
            Op::Sum => one(g.expand(x[0].shape())?),
            Op::Expand => one(g.sum()?.reshape(x[0].shape())?),
            Op::Reshape => one(g.reshape(x[0].shape())?),
            Op::MatMul => Ok(vec![
                want(0).then(|| g.matmul(&x[1].transpose()?)).transpose()?,
                want(1).then(|| x[0].transpose()?.matmul(g)).transpose()?,
            ]),
            Op::Transpose => one(g.transpose()?),
            Op::Conv(cfg) => Ok(vec![
                want(0)
                    .then(|| conv_input_grad(g, &x[1], *cfg, x[0].shape()))
                    .transpose()?,
                want(1)
                    .then(|| conv_weight_grad(&x[0], g, *cfg, x[1].shape()))
                    .transpose()?,
            ]),
            // x = (gy, w); forward is the adjoint of conv in its input.
            Op::ConvInputGrad(cfg) => Ok(vec![
                want(0).then(|| conv_raw(g, &x[1], *cfg)).transpose()?,
                want(1)
                    .then(|| conv_weight_grad(g, &x[0], *cfg, x[1].shape()))
                    .transpose()?,
            ]),
            // x = (input, gy); forward is the adjoint of conv in its weight.
            Op::ConvWeightGrad(cfg) => Ok(vec![
                want(0)
                    .then(|| conv_input_grad(&x[1], g, *cfg, x[0].shape()))
                    .transpose()?,
                want(1).then(|| conv_raw(&x[0], g, *cfg)).transpose()?,
            ]),
            Op::Resample(plan) => one(resample_t(g, plan.clone())?),
            Op::ResampleT(plan) => one(resample_plan(g, plan.clone())?),
            Op::AddChannel => Ok(vec![
                Some(g.clone()),
                want(1).then(|| g.sum_channels()).transpose()?,
            ]),
            Op::MulChannel => Ok(vec![
                want(0).then(|| g.mul_channel(&x[1])).transpose()?,
                want(1)
                    .then(|| g.mul(&x[0])?.sum_channels())
                    .transpose()?,
            ]),
            Op::SumChannels => one(g.broadcast_channels(x[0].shape())?),
            Op::BroadcastChannels => one(g.sum_channels()?),
            Op::SumLast => one(g.broadcast_last(x[0].shape()[1])?),
            Op::BroadcastLast => one(g.sum_last()?),
        }
    }
}

/// Shared graph of the tracked inputs, if any.
fn common_graph(inputs: &[&Tensor]) -> Result<Option<Graph>> {
    let mut found: Option<&Graph> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match found {
                None => found = Some(&n.graph),
                Some(g) if g.same(&n.graph) => {}
                Some(_) => return Err(Error::GraphMismatch),
            }
        }
    }
    Ok(found.cloned())
}

fn record(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    debug_assert_eq!(numel(&shape), data.len());
    match common_graph(inputs)? {
        None => Ok(Tensor::raw(shape, data)),
        Some(graph) => {
            let slots = inputs.iter().map(|t| t.slot()).collect();
            let out = Slot {
                id: None,
                shape,
                data: Arc::new(data),
            };
            Ok(graph.push(op, slots, out))
        }
    }
}

fn map_unary(x: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| f(v)).collect();
    record(op, &[x], x.shape.clone(), data)
}

fn zip_same(a: &Tensor, b: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    record(op, &[a, b], a.shape.clone(), data)
}

/// Equal shapes pass through; a one-element operand is expanded to the other's shape.
fn broadcast_pair(a: &Tensor, b: &Tensor, name: &'static str) -> Result<(Tensor, Tensor)> {
    if a.shape == b.shape {
        Ok((a.clone(), b.clone()))
    } else if a.numel() == 1 {
        Ok((a.expand(&b.shape)?, b.clone()))
    } else if b.numel() == 1 {
        Ok((a.clone(), b.expand(&a.shape)?))
    } else {
        Err(Error::ShapeMismatch {
            op: name,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            op,
            reason: format!("need rank >= 2, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other, "add")?;
        zip_same(&a, &b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other, "sub")?;
        zip_same(&a, &b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other, "mul")?;
        zip_same(&a, &b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other, "div")?;
        if b.data.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                reason: "division by zero".into(),
            });
        }
        zip_same(&a, &b, Op::Div, "div", |x, y| x / y)
    }

    pub fn neg(&self) -> Result<Tensor> {
        map_unary(self, Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        map_unary(self, Op::Scale(c), |v| c * v)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        map_unary(self, Op::AddScalar, |v| v + c)
    }

    pub fn square(&self) -> Result<Tensor> {
        map_unary(self, Op::Square, |v| v * v)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                reason: "negative input".into(),
            });
        }
        map_unary(self, Op::Sqrt, f64::sqrt)
    }

    pub fn exp(&self) -> Result<Tensor> {
        map_unary(self, Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                reason: "non-positive input".into(),
            });
        }
        map_unary(self, Op::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        map_unary(self, Op::Sigmoid, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn mask_mul(&self, mask: Arc<Vec<f64>>) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data = self.data.iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        record(Op::MaskMul(mask), &[self], self.shape.clone(), data)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.mask_mul(Arc::new(self.data.iter().map(|&v| sign(v)).collect()))
    }

    /// Elementwise sign; carries no gradient.
    pub fn sign(&self) -> Result<Tensor> {
        Ok(Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|&v| sign(v)).collect(),
        ))
    }

    pub fn clamp_min(&self, c: f64) -> Result<Tensor> {
        let mask: Vec<f64> = self.data.iter().map(|&v| if v > c { 1.0 } else { 0.0 }).collect();
        let data = self.data.iter().map(|&v| v.max(c)).collect();
        record(Op::ClampMin(Arc::new(mask)), &[self], self.shape.clone(), data)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        let mask = self.data.iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect();
        self.mask_mul(Arc::new(mask))
    }

    /// Leaky relu with one learnable slope per channel (axis 1).
    pub fn prelu(&self, slope: &Tensor) -> Result<Tensor> {
        let pos = self.relu()?;
        let neg_mask = self.data.iter().map(|&v| if v > 0.0 { 0.0 } else { 1.0 }).collect();
        let neg = self.mask_mul(Arc::new(neg_mask))?;
        pos.add(&neg.mul_channel(slope)?)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        record(Op::Sum, &[self], Vec::new(), vec![s])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "expand",
                reason: format!("only one-element tensors expand, got {:?}", self.shape),
            });
        }
        record(Op::Expand, &[self], shape.to_vec(), vec![self.data[0]; numel(shape)])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        record(Op::Reshape, &[self], shape.to_vec(), self.data.as_ref().clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let data = kernels::matmul(&self.data, &other.data, m, k, n);
                record(Op::MatMul, &[self, other], vec![m, n], data)
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "transpose",
                reason: format!("need rank 2, got {:?}", self.shape),
            });
        };
        record(Op::Transpose, &[self], vec![c, r], kernels::transpose(&self.data, r, c))
    }

    /// Adds `bias[c]` along axis 1.
    pub fn add_channel(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c, inner) = channel_layout(&self.shape, "add_channel")?;
        if bias.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_channel",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut data = self.data.as_ref().clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bias.data[(i / inner) % c];
        }
        record(Op::AddChannel, &[self, bias], self.shape.clone(), data)
    }

    /// Multiplies by `a[c]` along axis 1.
    pub fn mul_channel(&self, a: &Tensor) -> Result<Tensor> {
        let (_, c, inner) = channel_layout(&self.shape, "mul_channel")?;
        if a.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "mul_channel",
                lhs: self.shape.clone(),
                rhs: a.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * a.data[(i / inner) % c])
            .collect();
        record(Op::MulChannel, &[self, a], self.shape.clone(), data)
    }

    /// Sums everything except axis 1, giving shape `[C]`.
    pub fn sum_channels(&self) -> Result<Tensor> {
        let (_, c, inner) = channel_layout(&self.shape, "sum_channels")?;
        let mut data = vec![0.0; c];
        for (i, v) in self.data.iter().enumerate() {
            data[(i / inner) % c] += v;
        }
        record(Op::SumChannels, &[self], vec![c], data)
    }

    /// Inverse broadcast of [`Tensor::sum_channels`]: `[C]` to `shape`.
    pub fn broadcast_channels(&self, shape: &[usize]) -> Result<Tensor> {
        let (_, c, inner) = channel_layout(shape, "broadcast_channels")?;
        if self.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "broadcast_channels",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = (0..numel(shape)).map(|i| self.data[(i / inner) % c]).collect();
        record(Op::BroadcastChannels, &[self], shape.to_vec(), data)
    }

    /// Row sums of a rank-2 tensor: `[B, L]` to `[B]`.
    pub fn sum_last(&self) -> Result<Tensor> {
        let &[b, l] = self.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "sum_last",
                reason: format!("need rank 2, got {:?}", self.shape),
            });
        };
        let data = (0..b).map(|i| self.data[i * l..(i + 1) * l].iter().sum()).collect();
        record(Op::SumLast, &[self], vec![b], data)
    }

    /// `[B]` to `[B, n]`, repeating each entry along the new axis.
    pub fn broadcast_last(&self, n: usize) -> Result<Tensor> {
        let &[b] = self.shape.as_slice() else {
            return Err(Error::InvalidShape {
                op: "broadcast_last",
                reason: format!("need rank 1, got {:?}", self.shape),
            });
        };
        let data = (0..b * n).map(|i| self.data[i / n]).collect();
        record(Op::BroadcastLast, &[self], vec![b, n], data)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], cfg: ConvCfg) -> Result<ConvGeom> {
    let (&[n, cin, h, w], &[cout, cig, kh, kw]) = (xs, ws) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("need NCHW input and OIHW weight, got {xs:?} and {ws:?}"),
        });
    };
    if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::invalid("conv2d stride, dilation and groups must be >= 1"));
    }
    if cin % cfg.groups != 0 || cout % cfg.groups != 0 || cig * cfg.groups != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("kernel dims must be odd, got {kh}x{kw}"),
        });
    }
    let (Some(oh), Some(ow)) = (cfg.out_len(h, kh), cfg.out_len(w, kw)) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} with dilation {} exceeds padded input {h}x{w}", cfg.dilation),
        });
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        cfg,
    })
}

fn conv_raw(x: &Tensor, w: &Tensor, cfg: ConvCfg) -> Result<Tensor> {
    let geom = conv_geom(&x.shape, &w.shape, cfg)?;
    let data = kernels::conv2d_forward(&x.data, &w.data, &geom);
    record(
        Op::Conv(cfg),
        &[x, w],
        vec![geom.n, geom.cout, geom.oh, geom.ow],
        data,
    )
}

fn conv_input_grad(gy: &Tensor, w: &Tensor, cfg: ConvCfg, x_shape: &[usize]) -> Result<Tensor> {
    let geom = conv_geom(x_shape, &w.shape, cfg)?;
    let data = kernels::conv2d_input_grad(&gy.data, &w.data, &geom);
    record(
        Op::ConvInputGrad(cfg),
        &[gy, w],
        x_shape.to_vec(),
        data,
    )
}

fn conv_weight_grad(x: &Tensor, gy: &Tensor, cfg: ConvCfg, w_shape: &[usize]) -> Result<Tensor> {
    let geom = conv_geom(&x.shape, w_shape, cfg)?;
    let data = kernels::conv2d_weight_grad(&x.data, &gy.data, &geom);
    record(
        Op::ConvWeightGrad(cfg),
        &[x, gy],
        w_shape.to_vec(),
        data,
    )
}

/// 2-D convolution over an NCHW input with an OIHW weight (`I = C / groups`).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, cfg: ConvCfg) -> Result<Tensor> {
    let y = conv_raw(input, weight, cfg)?;
    match bias {
        Some(b) => y.add_channel(b),
        None => Ok(y),
    }
}

fn planes_of(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let &[n, c, h, w] = x.shape.as_slice() else {
        return Err(Error::InvalidShape {
            op,
            reason: format!("need NCHW, got {:?}", x.shape),
        });
    };
    Ok((n, c, h, w))
}

fn resample_plan(x: &Tensor, plan: Arc<ResamplePlan>) -> Result<Tensor> {
    let (n, c, _, _) = planes_of(x, "resample2x")?;
    let data = plan.apply(&x.data, n * c);
    let shape = vec![n, c, plan.out_h, plan.out_w];
    record(Op::Resample(plan), &[x], shape, data)
}

fn resample_t(g: &Tensor, plan: Arc<ResamplePlan>) -> Result<Tensor> {
    let (n, c, _, _) = planes_of(g, "resample2x")?;
    let data = plan.apply_transpose(&g.data, n * c);
    let shape = vec![n, c, plan.in_h, plan.in_w];
    record(Op::ResampleT(plan), &[g], shape, data)
}

/// Factor-2 spatial resize of an NCHW tensor with half-pixel sample centers.
pub fn resample2x(input: &Tensor, dir: ResampleDir, mode: InterpMode) -> Result<Tensor> {
    let (_, _, h, w) = planes_of(input, "resample2x")?;
    if dir == ResampleDir::Down && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::InvalidShape {
            op: "resample2x",
            reason: format!("downsampling needs even spatial dims, got {h}x{w}"),
        });
    }
    resample_plan(input, ResamplePlan::new(h, w, dir, mode))
}

/// `input · weight + bias` for `input: B×D`, `weight: D×K`, `bias: K`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.numel() != *weight.shape().last().unwrap_or(&0) {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: weight.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    input.matmul(weight)?.add_channel(bias)
}

/// Mean over the batch of `-log softmax(logits)[true class]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let &[b, l] = logits.shape() else {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            reason: format!("logits must be B×L, got {:?}", logits.shape()),
        });
    };
    if labels.shape() != logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape.clone(),
            rhs: labels.shape.clone(),
        });
    }
    for row in labels.data().chunks(l) {
        let hot = row.iter().filter(|v| (*v - 1.0).abs() <= 1e-9).count();
        let cold = row.iter().filter(|v| v.abs() <= 1e-9).count();
        if hot != 1 || hot + cold != l {
            return Err(Error::Domain {
                op: "softmax_cross_entropy",
                reason: format!("label row {row:?} is not one-hot"),
            });
        }
    }
    let row_max: Vec<f64> = logits
        .data()
        .chunks(l)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = Tensor::raw(
        vec![b, l],
        (0..b * l).map(|i| row_max[i / l]).collect(),
    );
    let lse = logits.sub(&shift)?.exp()?.sum_last()?.log()?.mean()?;
    let max_mean = row_max.iter().sum::<f64>() / b as f64;
    let picked = logits.mul(&labels.detach())?.sum()?.scale(1.0 / b as f64)?;
    lse.add_scalar(max_mean)?.sub(&picked)
}

/// Guard on the norm product in [`cosine_distance`].
pub const COSINE_EPS: f64 = 1e-12;

/// Negative cosine similarity between two tensor lists viewed as flat vectors.
pub fn cosine_distance(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "cosine_distance needs equal nonempty lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot: Option<Tensor> = None;
    let mut na: Option<Tensor> = None;
    let mut nb: Option<Tensor> = None;
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(s) => s.add(&t)?,
            None => t,
        });
        Ok(())
    };
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_distance",
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        acc(&mut dot, x.mul(y)?.sum()?)?;
        acc(&mut na, x.square()?.sum()?)?;
        acc(&mut nb, y.square()?.sum()?)?;
    }
    let (dot, na, nb) = (dot.unwrap(), na.unwrap(), nb.unwrap());
    if na.item() == 0.0 || nb.item() == 0.0 {
        return Err(Error::Domain {
            op: "cosine_distance",
            reason: "zero-norm input".into(),
        });
    }
    let denom = na.mul(&nb)?.sqrt()?.clamp_min(COSINE_EPS)?;
    dot.div(&denom)?.neg()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Square,
    Sqrt,
    Exp,
    Log,
    Sum,
    Mean,
    Abs,
    Sign,
    ClampMin(f64),
}

/// Dispatches the elementwise and reduction kinds; binary kinds need `b`.
pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseKind as K;
    let rhs = || b.ok_or_else(|| Error::invalid(format!("{kind:?} needs two operands")));
    match kind {
        K::Add => a.add(rhs()?),
        K::Sub => a.sub(rhs()?),
        K::Mul => a.mul(rhs()?),
        K::Div => a.div(rhs()?),
        K::Neg => a.neg(),
        K::Square => a.square(),
        K::Sqrt => a.sqrt(),
        K::Exp => a.exp(),
        K::Log => a.log(),
        K::Sum => a.sum(),
        K::Mean => a.mean(),
        K::Abs => a.abs(),
        K::Sign => a.sign(),
        K::ClampMin(c) => a.clamp_min(c),
    }
}
