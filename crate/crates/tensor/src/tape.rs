//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for its vector-Jacobian product. Nodes are created in dependency
//! order, so walking the tape backwards from the loss is a valid reverse
//! topological order and each node is visited exactly once.

use crate::error::{invalid, Result, TensorError};
use crate::ops::conv::{self, ConvGeometry, Padding};
use crate::ops::norm::{self, BatchMoments, NormMode, RunningStats, BN_EPSILON};
use crate::ops::softmax;
use crate::ops::upsample::BilinearPlan;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Bilinear {
        input: Var,
        plan: BilinearPlan,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    NegLogGather {
        probs: Var,
        entries: Vec<(usize, f64)>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and differentiates them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; its gradient is retained after [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    /// Sign of every rectifier input on the tape, in recording order.
    /// Two passes whose patterns differ straddle a kink of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, factor))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let area: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / area) % c];
        }
        debug_assert_eq!(out.numel(), n * c * area);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, rg, Op::ChannelBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// 2-d cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        conv::check_conv_shapes(self.value(input), self.value(kernel), "conv2d", false)?;
        let (_, _, h, w) = self.value(input).dims4()?;
        let (_, _, kh, kw) = self.value(kernel).dims4()?;
        let geom = ConvGeometry::new(h, w, kh, kw, stride, dilation, padding)?;
        let out = conv::conv2d_forward(self.value(input), self.value(kernel), &geom);
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(out, rg, Op::Conv2d {
            input,
            kernel,
            geom,
        }))
    }

    /// Transposed convolution of `[N, C_in, H, W]` with `[C_in, C_out, kh, kw]`;
    /// output is `[N, C_out, (H-1)*stride + kh, (W-1)*stride + kw]`.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        conv::check_conv_shapes(self.value(input), self.value(kernel), "conv2d_transpose", true)?;
        let (_, _, h, w) = self.value(input).dims4()?;
        let (_, _, kh, kw) = self.value(kernel).dims4()?;
        let geom = conv::transpose_geometry(h, w, kh, kw, stride)?;
        let out = conv::conv_transpose_forward(self.value(input), self.value(kernel), &geom);
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(out, rg, Op::ConvTranspose2d {
            input,
            kernel,
            geom,
        }))
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, target_h, target_w]`.
    pub fn bilinear_upsample(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if target_h < h || target_w < w {
            return Err(invalid(
                "bilinear_upsample",
                format!("target {target_h}x{target_w} smaller than input {h}x{w}"),
            ));
        }
        let plan = BilinearPlan::new(h, w, target_h, target_w);
        let mut out = Tensor::zeros(&[n, c, target_h, target_w]);
        let (src_area, dst_area) = (h * w, target_h * target_w);
        for p in 0..n * c {
            let src = &self.value(input).data()[p * src_area..(p + 1) * src_area];
            plan.forward_plane(src, &mut out.data_mut()[p * dst_area..(p + 1) * dst_area]);
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Bilinear { input, plan }))
    }

    fn check_norm_params(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize, usize)> {
        let dims = self.value(input).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [dims.1] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: self.value(input).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok(dims)
    }

    /// Batch normalization with batch statistics; returns the moments so the
    /// caller can fold them into its running statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments)> {
        let dims = self.check_norm_params(input, gamma, beta)?;
        let fwd = norm::train_forward(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.value(input).shape(), fwd.output)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(out, rg, Op::BatchNormTrain {
            input,
            gamma,
            beta,
            normalized: fwd.normalized,
            inv_std: fwd.inv_std,
        });
        Ok((v, fwd.moments))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, stats: &RunningStats) -> Result<Var> {
        let (n, c, h, w) = self.check_norm_params(input, gamma, beta)?;
        if stats.channels() != c {
            return Err(invalid(
                "batch_norm",
                format!("running stats have {} channels, input has {c}", stats.channels()),
            ));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let area = h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(input).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / area) % c;
            *v = g[ch] * (*v - stats.mean[ch]) * inv_std[ch] + b[ch];
        }
        debug_assert_eq!(out.numel(), n * c * area);
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(out, rg, Op::BatchNormEval {
            input,
            gamma,
            beta,
            mean: stats.mean.clone(),
            inv_std,
        }))
    }

    /// Batch normalization followed by ReLU. In train mode the running
    /// statistics are updated with the mode's EMA decay.
    pub fn batch_norm_relu(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
    ) -> Result<Var> {
        let normed = match mode {
            NormMode::Train { ema_decay } => {
                let (v, moments) = self.batch_norm_train(input, gamma, beta)?;
                stats.update(&moments, ema_decay)?;
                v
            }
            NormMode::Eval => self.batch_norm_eval(input, gamma, beta, stats)?,
        };
        Ok(self.relu(normed))
    }

    /// Softmax over axis 1 of an `[N, C, ...]` tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("softmax", format!("need a channel axis, got shape {shape:?}")));
        }
        let area: usize = shape[2..].iter().product();
        let data = softmax::forward(self.value(logits).data(), shape[0], shape[1], area);
        let out = Tensor::new(&shape, data)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, rg, Op::Softmax(logits)))
    }

    /// `-sum_i w_i * ln(max(probs[idx_i], eps))` over flat element indices.
    /// An empty entry list yields exactly 0 and still connects `probs` to the loss.
    pub fn neg_log_gather(&mut self, probs: Var, entries: Vec<(usize, f64)>, eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if let Some(&(bad, _)) = entries.iter().find(|(i, _)| *i >= p.numel()) {
            return Err(invalid(
                "neg_log_gather",
                format!("index {bad} out of range for {} elements", p.numel()),
            ));
        }
        let total: f64 = entries
            .iter()
            .map(|&(i, w)| -w * p.data()[i].max(eps).ln())
            .sum();
        let rg = self.any_grad(&[probs]);
        Ok(self.push(Tensor::scalar(total), rg, Op::NegLogGather { probs, entries, eps }))
    }

    /// Populate gradients of `loss` with respect to every node that requires them.
    ///
    /// Intermediate gradients are released as the sweep passes them; gradients
    /// of leaves created with [`param`](Self::param) remain readable via
    /// [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            for (v, contrib) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let ga = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::ChannelBias { x, bias } => {
                let shape = val(*x).shape();
                let c = shape[1];
                let area: usize = shape[2..].iter().product();
                let mut gb = vec![0.0; c];
                for (k, v) in g.data().iter().enumerate() {
                    gb[(k / area) % c] += v;
                }
                vec![(*x, g.clone()), (*bias, Tensor::new(&[c], gb)?)]
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(g.shape(), data)?)]
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) =
                    conv::conv2d_backward(val(*input), val(*kernel), geom, g, wants(*input), wants(*kernel));
                gi.map(|t| (*input, t)).into_iter().chain(gk.map(|t| (*kernel, t))).collect()
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let (gi, gk) = conv::conv_transpose_backward(
                    val(*input),
                    val(*kernel),
                    geom,
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                gi.map(|t| (*input, t)).into_iter().chain(gk.map(|t| (*kernel, t))).collect()
            }
            Op::Bilinear { input, plan } => {
                let (n, c, h, w) = val(*input).dims4()?;
                let mut gi = Tensor::zeros(&[n, c, h, w]);
                let dst_area = plan.rows.len() * plan.cols.len();
                for p in 0..n * c {
                    plan.backward_plane(
                        &g.data()[p * dst_area..(p + 1) * dst_area],
                        &mut gi.data_mut()[p * h * w..(p + 1) * h * w],
                    );
                }
                vec![(*input, gi)]
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let dims = val(*input).dims4()?;
                let (gx, gg, gb) = norm::train_backward(g.data(), normalized, inv_std, val(*gamma).data(), dims);
                vec![
                    (*input, Tensor::new(val(*input).shape(), gx)?),
                    (*gamma, Tensor::new(&[dims.1], gg)?),
                    (*beta, Tensor::new(&[dims.1], gb)?),
                ]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (_, c, h, w) = val(*input).dims4()?;
                let area = h * w;
                let x = val(*input).data();
                let gam = val(*gamma).data();
                let mut gx = vec![0.0; x.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (k, gv) in g.data().iter().enumerate() {
                    let ch = (k / area) % c;
                    gx[k] = gv * gam[ch] * inv_std[ch];
                    gg[ch] += gv * (x[k] - mean[ch]) * inv_std[ch];
                    gb[ch] += gv;
                }
                vec![
                    (*input, Tensor::new(val(*input).shape(), gx)?),
                    (*gamma, Tensor::new(&[c], gg)?),
                    (*beta, Tensor::new(&[c], gb)?),
                ]
            }
            Op::Softmax(x) => {
                let shape = node.value.shape();
                let area: usize = shape[2..].iter().product();
                let dx = softmax::backward(node.value.data(), g.data(), shape[0], shape[1], area);
                vec![(*x, Tensor::new(shape, dx)?)]
            }
            Op::NegLogGather { probs, entries, eps } => {
                let p = val(*probs);
                let mut gp = Tensor::zeros(p.shape());
                let up = g.item();
                for &(idx, w) in entries {
                    let v = p.data()[idx];
                    if v > *eps {
                        gp.data_mut()[idx] -= up * w / v;
                    }
                }
                vec![(*probs, gp)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_pattern_lists_input_signs_in_order() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let y = tape.scale(r, -1.0);
        tape.relu(y);
        assert_eq!(tape.relu_pattern(), [false, false, true, false, false, false]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gives_twice_x() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn empty_gather_is_zero_but_connected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[1, 2, 1, 1], 0.5));
        let l = tape.neg_log_gather(p, Vec::new(), 1e-12).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &Tensor::zeros(&[1, 2, 1, 1]));
    }

    #[test]
    fn gather_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let l = tape.neg_log_gather(p, vec![(0, 1.0)], 1e-12).unwrap();
        assert!((tape.value(l).item() - 1e-12f64.ln().abs()).abs() < 1e-9);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);
    }
}
