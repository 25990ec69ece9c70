//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one node per executed operation. [`Tape::backward`]
//! seeds a scalar loss with adjoint 1 and sweeps the nodes once in reverse
//! creation order; adjoints of intermediate tensors live in a map keyed by
//! tensor id, while leaf tensors that require grad have contributions added
//! into their persistent grad buffers. Calling backward twice (or from two
//! losses on one tape) therefore accumulates into leaf grads, as do shared
//! subexpressions within a single pass.
//!
//! Gradient flow is pruned at tensors with `requires_grad == false`: no
//! adjoint is computed for them or anything beneath them.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use super::kernels::{col2im, conv_out_dim, gemm_nn, gemm_nt, gemm_tn, im2col, transpose};
use super::shape::{broadcast_shape, broadcast_to, ew_broadcast, numel, reduce_to};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Pointwise nonlinearities available as tape ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Act {
    pub fn name(self) -> &'static str {
        match self {
            Act::Relu => "relu",
            Act::LeakyRelu => "leaky_relu",
            Act::Tanh => "tanh",
            Act::Sigmoid => "sigmoid",
            Act::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Act> {
        Some(match s {
            "relu" => Act::Relu,
            "leaky_relu" => Act::LeakyRelu,
            "tanh" => Act::Tanh,
            "sigmoid" => Act::Sigmoid,
            "softplus" => Act::Softplus,
            _ => return None,
        })
    }
}

const LEAKY_SLOPE: f64 = 0.01;

/// Numerically stable logistic function.
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softplus: max(x, 0) + log1p(exp(-|x|)).
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

enum Rule<S: Scalar> {
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Sub {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Mul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Div {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Matmul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Conv2d {
        x: Tensor<S>,
        k: Tensor<S>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Tensor<S>,
        k: Tensor<S>,
        stride: usize,
    },
    MaxPool2 {
        x: Tensor<S>,
        argmax: Vec<usize>,
    },
    Activation {
        x: Tensor<S>,
        kind: Act,
    },
    Exp {
        x: Tensor<S>,
    },
    Ln {
        x: Tensor<S>,
    },
    Abs {
        x: Tensor<S>,
    },
    Scale {
        x: Tensor<S>,
        c: S,
    },
    AddConst {
        x: Tensor<S>,
    },
    MulScalarT {
        x: Tensor<S>,
        s: Tensor<S>,
    },
    SumAll {
        x: Tensor<S>,
    },
    MeanAll {
        x: Tensor<S>,
    },
    SumLastAxis {
        x: Tensor<S>,
    },
    Concat {
        a: Tensor<S>,
        b: Tensor<S>,
        axis: usize,
    },
    Reshape {
        x: Tensor<S>,
    },
    Clamp {
        x: Tensor<S>,
        lo: S,
        hi: S,
    },
    MinElem {
        a: Tensor<S>,
        b: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    out: Tensor<S>,
    rule: Rule<S>,
}

/// Outcome of a backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes on the tape when backward ran.
    pub nodes_total: usize,
    /// Nodes whose output had a nonzero adjoint path to the loss; each is
    /// visited exactly once.
    pub nodes_visited: usize,
}

/// Records executed ops and replays them in reverse for gradients.
/// Single-threaded by design; create one per forward pass and drop it after
/// backward.
#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn record(
        &self,
        shape: &[usize],
        data: Vec<S>,
        requires_grad: bool,
        rule: Rule<S>,
    ) -> Tensor<S> {
        let out = Tensor::new(shape, data, requires_grad).expect("op output shape/data consistent");
        self.nodes.borrow_mut().push(Node {
            out: out.clone(),
            rule,
        });
        out
    }

    // ---- elementwise binary ops (same-rank broadcasting) ----

    fn ew_binary(
        &self,
        op: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl FnMut(S, S) -> S,
        rule: Rule<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        let data = ew_broadcast(&a.data(), a.shape(), &b.data(), b.shape(), &out_shape, f);
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(&out_shape, data, rg, rule))
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.ew_binary(
            "add",
            a,
            b,
            |x, y| x + y,
            Rule::Add {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.ew_binary(
            "sub",
            a,
            b,
            |x, y| x - y,
            Rule::Sub {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.ew_binary(
            "mul",
            a,
            b,
            |x, y| x * y,
            Rule::Mul {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn div(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.ew_binary(
            "div",
            a,
            b,
            |x, y| x / y,
            Rule::Div {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    /// Elementwise minimum; shapes must match exactly. Ties route gradient
    /// to the first argument.
    pub fn min_elem(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "min_elem",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(
            a.shape(),
            data,
            rg,
            Rule::MinElem {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    // ---- linear algebra ----

    /// Rank-2 matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                want: 2,
                shape: a.shape().to_vec(),
            });
        }
        if b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut data = vec![S::zero(); m * n];
        gemm_nn(m, k, n, &a.data(), &b.data(), &mut data);
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(
            &[m, n],
            data,
            rg,
            Rule::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
        ))
    }

    /// 2-D convolution: x [N,C,H,W], kernel [F,C,kh,kw], square stride/pad.
    pub fn conv2d(
        &self,
        x: &Tensor<S>,
        k: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                want: 4,
                shape: x.shape().to_vec(),
            });
        }
        if k.rank() != 4 || k.shape()[1] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![S::zero(); n * f * oh * ow];
        let mut cols = Vec::new();
        for i in 0..n {
            // cols: [c*kh*kw, oh*ow]; out_i = kernel (f x ckk) . cols
            im2col(
                &xd[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                &mut cols,
            );
            gemm_nn(
                f,
                c * kh * kw,
                oh * ow,
                &kd,
                &cols,
                &mut out[i * f * oh * ow..(i + 1) * f * oh * ow],
            );
        }
        drop(xd);
        drop(kd);
        let rg = x.requires_grad() || k.requires_grad();
        Ok(self.record(
            &[n, f, oh, ow],
            out,
            rg,
            Rule::Conv2d {
                x: x.clone(),
                k: k.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Transposed 2-D convolution: x [N,C,H,W], kernel [C,F,kh,kw], square
    /// stride, no padding. Output is [N,F,(H-1)*stride+kh,(W-1)*stride+kw].
    /// With matching geometry this is the adjoint of [`Tape::conv2d`] in its
    /// input argument.
    pub fn conv2d_transpose(
        &self,
        x: &Tensor<S>,
        k: &Tensor<S>,
        stride: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d_transpose",
                want: 4,
                shape: x.shape().to_vec(),
            });
        }
        if k.rank() != 4 || k.shape()[0] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: "stride must be positive".into(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![S::zero(); n * f * oh * ow];
        let mut cols = vec![S::zero(); f * kh * kw * h * w];
        for i in 0..n {
            cols.iter_mut().for_each(|v| *v = S::zero());
            // cols [f*kh*kw, h*w] = k^T (fkk x c) . x_i (c x hw)
            gemm_tn(
                f * kh * kw,
                c,
                h * w,
                &kd,
                &xd[i * c * h * w..(i + 1) * c * h * w],
                &mut cols,
            );
            col2im(
                &cols,
                f,
                oh,
                ow,
                kh,
                kw,
                stride,
                0,
                &mut out[i * f * oh * ow..(i + 1) * f * oh * ow],
            );
        }
        drop(xd);
        drop(kd);
        let rg = x.requires_grad() || k.requires_grad();
        Ok(self.record(
            &[n, f, oh, ow],
            out,
            rg,
            Rule::ConvT2d {
                x: x.clone(),
                k: k.clone(),
                stride,
            },
        ))
    }

    /// 2x2 max pooling with stride 2 on [N,C,H,W]; H and W must be even.
    /// Ties take the first element in scan order.
    pub fn max_pool2(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "max_pool2",
                want: 4,
                shape: x.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2",
                msg: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + (2 * oy) * w + 2 * ox;
                    let mut best = i0;
                    let mut bv = xd[i0];
                    for &cand in &[i0 + 1, i0 + w, i0 + w + 1] {
                        if xd[cand] > bv {
                            bv = xd[cand];
                            best = cand;
                        }
                    }
                    out.push(bv);
                    argmax.push(best);
                }
            }
        }
        drop(xd);
        let rg = x.requires_grad();
        Ok(self.record(
            &[n, c, oh, ow],
            out,
            rg,
            Rule::MaxPool2 {
                x: x.clone(),
                argmax,
            },
        ))
    }

    // ---- pointwise ----

    pub fn activation(&self, kind: Act, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let slope = S::from_f64_c(LEAKY_SLOPE);
        let data: Vec<S> = x
            .data()
            .iter()
            .map(|&v| match kind {
                Act::Relu => v.max(S::zero()),
                Act::LeakyRelu => {
                    if v > S::zero() {
                        v
                    } else {
                        slope * v
                    }
                }
                Act::Tanh => v.tanh(),
                Act::Sigmoid => sigmoid(v),
                Act::Softplus => softplus(v),
            })
            .collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Activation { x: x.clone(), kind },
        ))
    }

    pub fn relu(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.activation(Act::Relu, x)
    }

    pub fn tanh(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.activation(Act::Tanh, x)
    }

    pub fn sigmoid(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.activation(Act::Sigmoid, x)
    }

    pub fn softplus(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.activation(Act::Softplus, x)
    }

    pub fn exp(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let data = x.data().iter().map(|v| v.exp()).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Exp { x: x.clone() },
        ))
    }

    /// Natural log; caller is responsible for positive inputs.
    pub fn ln(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let data = x.data().iter().map(|v| v.ln()).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Ln { x: x.clone() },
        ))
    }

    pub fn abs(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let data = x.data().iter().map(|v| v.abs()).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Abs { x: x.clone() },
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>, TensorError> {
        let data = x.data().iter().map(|&v| v * c).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Scale { x: x.clone(), c },
        ))
    }

    pub fn neg(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.scale(x, -S::one())
    }

    /// Add a constant to every element.
    pub fn add_const(&self, x: &Tensor<S>, c: S) -> Result<Tensor<S>, TensorError> {
        let data = x.data().iter().map(|&v| v + c).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::AddConst { x: x.clone() },
        ))
    }

    /// Multiply a tensor by a rank-0 tensor (differentiable in both).
    pub fn mul_scalar_t(&self, x: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if s.rank() != 0 {
            return Err(TensorError::RankMismatch {
                op: "mul_scalar_t",
                want: 0,
                shape: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let data = x.data().iter().map(|&v| v * sv).collect();
        let rg = x.requires_grad() || s.requires_grad();
        Ok(self.record(
            x.shape(),
            data,
            rg,
            Rule::MulScalarT {
                x: x.clone(),
                s: s.clone(),
            },
        ))
    }

    // ---- reductions and shape ops ----

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mut acc = S::zero();
        for &v in x.data().iter() {
            acc += v;
        }
        Ok(self.record(
            &[],
            vec![acc],
            x.requires_grad(),
            Rule::SumAll { x: x.clone() },
        ))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if x.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean_all",
                msg: "mean of empty tensor".into(),
            });
        }
        let mut acc = S::zero();
        for &v in x.data().iter() {
            acc += v;
        }
        let n = S::from_f64_c(x.numel() as f64);
        Ok(self.record(
            &[],
            vec![acc / n],
            x.requires_grad(),
            Rule::MeanAll { x: x.clone() },
        ))
    }

    /// Sum over the last axis: [.., d] -> [..].
    pub fn sum_last_axis(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if x.rank() == 0 {
            return Err(TensorError::RankMismatch {
                op: "sum_last_axis",
                want: 1,
                shape: x.shape().to_vec(),
            });
        }
        let d = *x.shape().last().expect("rank >= 1");
        let out_shape: Vec<usize> = x.shape()[..x.rank() - 1].to_vec();
        let rows = numel(&out_shape);
        let xd = x.data();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = S::zero();
            for j in 0..d {
                acc += xd[r * d + j];
            }
            data.push(acc);
        }
        drop(xd);
        Ok(self.record(
            &out_shape,
            data,
            x.requires_grad(),
            Rule::SumLastAxis { x: x.clone() },
        ))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(
        &self,
        a: &Tensor<S>,
        b: &Tensor<S>,
        axis: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let mismatch = a.rank() != b.rank()
            || axis >= a.rank()
            || a.shape()
                .iter()
                .zip(b.shape())
                .enumerate()
                .any(|(d, (&x, &y))| d != axis && x != y);
        if mismatch {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out_shape = a.shape().to_vec();
        out_shape[axis] += b.shape()[axis];
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let (wa, wb) = (a.shape()[axis] * inner, b.shape()[axis] * inner);
        let ad = a.data();
        let bd = b.data();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            data.extend_from_slice(&ad[o * wa..(o + 1) * wa]);
            data.extend_from_slice(&bd[o * wb..(o + 1) * wb]);
        }
        drop(ad);
        drop(bd);
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(
            &out_shape,
            data,
            rg,
            Rule::Concat {
                a: a.clone(),
                b: b.clone(),
                axis,
            },
        ))
    }

    /// Same elements, new shape (element counts must match).
    pub fn reshape(&self, x: &Tensor<S>, new_shape: &[usize]) -> Result<Tensor<S>, TensorError> {
        if numel(new_shape) != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        Ok(self.record(
            new_shape,
            x.to_vec(),
            x.requires_grad(),
            Rule::Reshape { x: x.clone() },
        ))
    }

    /// Clamp to [lo, hi]; gradient passes through wherever lo <= x <= hi.
    pub fn clamp(&self, x: &Tensor<S>, lo: S, hi: S) -> Result<Tensor<S>, TensorError> {
        if lo > hi {
            return Err(TensorError::Invalid {
                op: "clamp",
                msg: "lo must not exceed hi".into(),
            });
        }
        let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok(self.record(
            x.shape(),
            data,
            x.requires_grad(),
            Rule::Clamp {
                x: x.clone(),
                lo,
                hi,
            },
        ))
    }

    /// Copy of x's values cut off from gradient flow. Not recorded.
    pub fn detach(&self, x: &Tensor<S>) -> Tensor<S> {
        x.detached()
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Leaf tensors with
    /// `requires_grad == true` receive gradient contributions added into
    /// their grad buffers. Each tape node is visited at most once.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<BackwardReport, TensorError> {
        if loss.numel() != 1 || !loss.requires_grad() {
            return Err(TensorError::InvalidBackwardSeed);
        }
        let nodes = self.nodes.borrow();
        let produced: HashSet<u64> = nodes.iter().map(|n| n.out.id()).collect();
        let mut adj: HashMap<u64, Vec<S>> = HashMap::new();

        if !produced.contains(&loss.id()) {
            // The loss is itself a leaf parameter.
            loss.accumulate_grad(&[S::one()]);
            return Ok(BackwardReport {
                nodes_total: nodes.len(),
                nodes_visited: 0,
            });
        }
        adj.insert(loss.id(), vec![S::one()]);

        let mut visited = 0usize;
        for node in nodes.iter().rev() {
            let Some(go) = adj.remove(&node.out.id()) else {
                continue;
            };
            visited += 1;
            backprop(&node.rule, &node.out, &go, &produced, &mut adj);
        }
        Ok(BackwardReport {
            nodes_total: nodes.len(),
            nodes_visited: visited,
        })
    }
}

/// Add `delta` to `t`'s adjoint: into the in-flight map for tensors produced
/// on the tape, or directly into the persistent grad buffer for leaves.
/// Tensors that do not require grad are pruned.
fn route<S: Scalar>(
    t: &Tensor<S>,
    delta: Vec<S>,
    produced: &HashSet<u64>,
    adj: &mut HashMap<u64, Vec<S>>,
) {
    if !t.requires_grad() {
        return;
    }
    if produced.contains(&t.id()) {
        match adj.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (acc, d) in e.get_mut().iter_mut().zip(&delta) {
                    *acc += *d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    } else {
        t.accumulate_grad(&delta);
    }
}

#[allow(clippy::too_many_lines)]
fn backprop<S: Scalar>(
    rule: &Rule<S>,
    out: &Tensor<S>,
    go: &[S],
    produced: &HashSet<u64>,
    adj: &mut HashMap<u64, Vec<S>>,
) {
    match rule {
        Rule::Add { a, b } => {
            if a.requires_grad() {
                route(a, reduce_to(go, out.shape(), a.shape()), produced, adj);
            }
            if b.requires_grad() {
                route(b, reduce_to(go, out.shape(), b.shape()), produced, adj);
            }
        }
        Rule::Sub { a, b } => {
            if a.requires_grad() {
                route(a, reduce_to(go, out.shape(), a.shape()), produced, adj);
            }
            if b.requires_grad() {
                let neg: Vec<S> = go.iter().map(|&g| -g).collect();
                route(b, reduce_to(&neg, out.shape(), b.shape()), produced, adj);
            }
        }
        Rule::Mul { a, b } => {
            if a.requires_grad() {
                let bb = broadcast_to(&b.data(), b.shape(), out.shape());
                let ga: Vec<S> = go.iter().zip(&bb).map(|(&g, &v)| g * v).collect();
                route(a, reduce_to(&ga, out.shape(), a.shape()), produced, adj);
            }
            if b.requires_grad() {
                let ab = broadcast_to(&a.data(), a.shape(), out.shape());
                let gb: Vec<S> = go.iter().zip(&ab).map(|(&g, &v)| g * v).collect();
                route(b, reduce_to(&gb, out.shape(), b.shape()), produced, adj);
            }
        }
        Rule::Div { a, b } => {
            // out = a / b
            if a.requires_grad() {
                let bb = broadcast_to(&b.data(), b.shape(), out.shape());
                let ga: Vec<S> = go.iter().zip(&bb).map(|(&g, &v)| g / v).collect();
                route(a, reduce_to(&ga, out.shape(), a.shape()), produced, adj);
            }
            if b.requires_grad() {
                let ab = broadcast_to(&a.data(), a.shape(), out.shape());
                let bb = broadcast_to(&b.data(), b.shape(), out.shape());
                let gb: Vec<S> = go
                    .iter()
                    .zip(&ab)
                    .zip(&bb)
                    .map(|((&g, &av), &bv)| -g * av / (bv * bv))
                    .collect();
                route(b, reduce_to(&gb, out.shape(), b.shape()), produced, adj);
            }
        }
        Rule::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // ga = go . b^T : gemm_nt with b as [n(result cols)=k, shared=n]
                let mut ga = vec![S::zero(); m * k];
                gemm_nt(m, n, k, go, &b.data(), &mut ga);
                route(a, ga, produced, adj);
            }
            if b.requires_grad() {
                // gb = a^T . go : a stored [m,k] is the k x m transposed view
                let mut gb = vec![S::zero(); k * n];
                gemm_tn(k, m, n, &a.data(), go, &mut gb);
                route(b, gb, produced, adj);
            }
        }
        Rule::Conv2d { x, k, stride, pad } => {
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let ckk = c * kh * kw;
            let xd = x.data();
            let kd = k.data();
            let mut gx = if x.requires_grad() {
                Some(vec![S::zero(); n * c * h * w])
            } else {
                None
            };
            let gk = if k.requires_grad() {
                Some(vec![S::zero(); f * ckk])
            } else {
                None
            };
            let mut cols = Vec::new();
            let mut gcols = vec![S::zero(); ckk * oh * ow];
            // kernel gradient is accumulated transposed ([ckk, f]) so the
            // contraction stays on the axpy GEMM path
            let mut gkt = gk.as_ref().map(|_| vec![S::zero(); ckk * f]);
            let mut got = Vec::new();
            for i in 0..n {
                let go_i = &go[i * f * oh * ow..(i + 1) * f * oh * ow];
                if let Some(gkt) = gkt.as_mut() {
                    im2col(
                        &xd[i * c * h * w..(i + 1) * c * h * w],
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut cols,
                    );
                    transpose(f, oh * ow, go_i, &mut got);
                    // gk^T += cols (ckk x ohw) . go_i^T (ohw x f)
                    gemm_nn(ckk, oh * ow, f, &cols, &got, gkt);
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.iter_mut().for_each(|v| *v = S::zero());
                    // gcols [ckk, ohw] = kernel^T (ckk x f) . go_i (f x ohw)
                    gemm_tn(ckk, f, oh * ow, &kd, go_i, &mut gcols);
                    col2im(
                        &gcols,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut gx[i * c * h * w..(i + 1) * c * h * w],
                    );
                }
            }
            drop(xd);
            drop(kd);
            if let Some(gx) = gx {
                route(x, gx, produced, adj);
            }
            if let Some(gkt) = gkt {
                let mut gkv = gk.expect("gkt implies gk");
                transpose(ckk, f, &gkt, &mut gkv);
                route(k, gkv, produced, adj);
            }
        }
        Rule::ConvT2d { x, k, stride } => {
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (f, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let fkk = f * kh * kw;
            let xd = x.data();
            let kd = k.data();
            let mut gx = if x.requires_grad() {
                Some(vec![S::zero(); n * c * h * w])
            } else {
                None
            };
            let gk = if k.requires_grad() {
                Some(vec![S::zero(); c * fkk])
            } else {
                None
            };
            // kernel gradient accumulated transposed ([fkk, c]), as in Conv2d
            let mut gkt = gk.as_ref().map(|_| vec![S::zero(); fkk * c]);
            let mut pat = Vec::new();
            let mut xt = Vec::new();
            for i in 0..n {
                // patches of the output gradient, same geometry as forward
                // col2im; layout [fkk, h*w]
                im2col(
                    &go[i * f * oh * ow..(i + 1) * f * oh * ow],
                    f,
                    oh,
                    ow,
                    kh,
                    kw,
                    *stride,
                    0,
                    &mut pat,
                );
                if let Some(gx) = gx.as_mut() {
                    // gx_i (c x hw) = k (c x fkk) . pat (fkk x hw)
                    gemm_nn(
                        c,
                        fkk,
                        h * w,
                        &kd,
                        &pat,
                        &mut gx[i * c * h * w..(i + 1) * c * h * w],
                    );
                }
                if let Some(gkt) = gkt.as_mut() {
                    // gk^T += pat (fkk x hw) . x_i^T (hw x c)
                    transpose(c, h * w, &xd[i * c * h * w..(i + 1) * c * h * w], &mut xt);
                    gemm_nn(fkk, h * w, c, &pat, &xt, gkt);
                }
            }
            drop(xd);
            drop(kd);
            if let Some(gx) = gx {
                route(x, gx, produced, adj);
            }
            if let Some(gkt) = gkt {
                let mut gkv = gk.expect("gkt implies gk");
                transpose(fkk, c, &gkt, &mut gkv);
                route(k, gkv, produced, adj);
            }
        }
        Rule::MaxPool2 { x, argmax } => {
            if x.requires_grad() {
                let mut gx = vec![S::zero(); x.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += go[o];
                }
                route(x, gx, produced, adj);
            }
        }
        Rule::Activation { x, kind } => {
            if !x.requires_grad() {
                return;
            }
            let slope = S::from_f64_c(LEAKY_SLOPE);
            let gx: Vec<S> = match kind {
                Act::Relu => x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect(),
                Act::LeakyRelu => x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| if v > S::zero() { g } else { g * slope })
                    .collect(),
                Act::Tanh => out
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&y, &g)| g * (S::one() - y * y))
                    .collect(),
                Act::Sigmoid => out
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&y, &g)| g * y * (S::one() - y))
                    .collect(),
                Act::Softplus => x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| g * sigmoid(v))
                    .collect(),
            };
            route(x, gx, produced, adj);
        }
        Rule::Exp { x } => {
            if x.requires_grad() {
                let gx: Vec<S> = out.data().iter().zip(go).map(|(&y, &g)| g * y).collect();
                route(x, gx, produced, adj);
            }
        }
        Rule::Ln { x } => {
            if x.requires_grad() {
                let gx: Vec<S> = x.data().iter().zip(go).map(|(&v, &g)| g / v).collect();
                route(x, gx, produced, adj);
            }
        }
        Rule::Abs { x } => {
            if x.requires_grad() {
                let gx: Vec<S> = x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                route(x, gx, produced, adj);
            }
        }
        Rule::Scale { x, c } => {
            if x.requires_grad() {
                let gx: Vec<S> = go.iter().map(|&g| g * *c).collect();
                route(x, gx, produced, adj);
            }
        }
        Rule::AddConst { x } => {
            if x.requires_grad() {
                route(x, go.to_vec(), produced, adj);
            }
        }
        Rule::MulScalarT { x, s } => {
            if x.requires_grad() {
                let sv = s.item();
                let gx: Vec<S> = go.iter().map(|&g| g * sv).collect();
                route(x, gx, produced, adj);
            }
            if s.requires_grad() {
                let mut acc = S::zero();
                for (&g, &v) in go.iter().zip(x.data().iter()) {
                    acc += g * v;
                }
                route(s, vec![acc], produced, adj);
            }
        }
        Rule::SumAll { x } => {
            if x.requires_grad() {
                route(x, vec![go[0]; x.numel()], produced, adj);
            }
        }
        Rule::MeanAll { x } => {
            if x.requires_grad() {
                let g = go[0] / S::from_f64_c(x.numel() as f64);
                route(x, vec![g; x.numel()], produced, adj);
            }
        }
        Rule::SumLastAxis { x } => {
            if x.requires_grad() {
                let d = *x.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(x.numel());
                for &g in go {
                    for _ in 0..d {
                        gx.push(g);
                    }
                }
                route(x, gx, produced, adj);
            }
        }
        Rule::Concat { a, b, axis } => {
            let outer: usize = a.shape()[..*axis].iter().product();
            let inner: usize = a.shape()[*axis + 1..].iter().product();
            let (wa, wb) = (a.shape()[*axis] * inner, b.shape()[*axis] * inner);
            if a.requires_grad() {
                let mut ga = Vec::with_capacity(a.numel());
                for o in 0..outer {
                    ga.extend_from_slice(&go[o * (wa + wb)..o * (wa + wb) + wa]);
                }
                route(a, ga, produced, adj);
            }
            if b.requires_grad() {
                let mut gb = Vec::with_capacity(b.numel());
                for o in 0..outer {
                    gb.extend_from_slice(&go[o * (wa + wb) + wa..(o + 1) * (wa + wb)]);
                }
                route(b, gb, produced, adj);
            }
        }
        Rule::Reshape { x } => {
            if x.requires_grad() {
                route(x, go.to_vec(), produced, adj);
            }
        }
        Rule::Clamp { x, lo, hi } => {
            if x.requires_grad() {
                let gx: Vec<S> = x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { S::zero() })
                    .collect();
                route(x, gx, produced, adj);
            }
        }
        Rule::MinElem { a, b } => {
            let ad = a.data();
            let bd = b.data();
            if a.requires_grad() {
                let ga: Vec<S> = ad
                    .iter()
                    .zip(bd.iter())
                    .zip(go)
                    .map(|((&x, &y), &g)| if x <= y { g } else { S::zero() })
                    .collect();
                route(a, ga, produced, adj);
            }
            if b.requires_grad() {
                let gb: Vec<S> = ad
                    .iter()
                    .zip(bd.iter())
                    .zip(go)
                    .map(|((&x, &y), &g)| if x <= y { S::zero() } else { g })
                    .collect();
                route(b, gb, produced, adj);
            }
        }
    }
}
