use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::{gemm, Element, RngStream, Tensor, Trans};
use crate::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Per-channel statistics of one training-mode batch-norm call. Variance is
/// unbiased, ready for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatmulNt {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: T,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    Argmax,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended after their inputs, so the node list is a topological
/// order by construction and [`Tape::backward`] visits each node once.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::DetachedTape);
        }
        self.nodes.get(v.index()).ok_or(Error::DetachedTape)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// Records a leaf; differentiable iff the tensor carries `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone().with_requires_grad(true), Op::Leaf, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone().with_requires_grad(false), Op::Leaf, false)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        self.check(&[input, kernel])?;
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [B,H,W,C], got {:?}", xs)));
        }
        if ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [kh,kw,Cin,Cout], got {:?}", ks),
            ));
        }
        if ks[2] != xs[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[2], xs[3]),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv2d", format!("stride must be 1 or 2, got {}", stride)));
        }
        let (h, w, kh, kw) = (xs[1], xs[2], ks[0], ks[1]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            h,
            w,
            cin: xs[3],
            kh,
            kw,
            cout: ks[3],
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        if let Some(b) = bias {
            self.check(&[b])?;
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be [{}], got {:?}", geom.cout, self.shape(b)),
                ));
            }
        }
        let data = kernels::conv_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.batch, out_h, out_w, geom.cout], data)?;
        let rg = self.any_needs(&[input, kernel]) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization over all axes but the last.
    ///
    /// In train mode the batch statistics are used and returned so the caller
    /// can update its running averages; in eval mode `running` is used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check(&[input, gamma, beta])?;
        let xs = self.shape(input).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta must be [{}]", c)));
        }
        let x = self.value(input).data();
        let n = x.len() / c;
        let eps = T::from_f64(eps);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "train mode needs at least two values per channel",
                    ));
                }
                let (mean, var) = kernels::channel_moments(x, c);
                let corr = T::from_f64(n as f64 / (n as f64 - 1.0));
                let unbiased = var.iter().map(|&v| v * corr).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats must have {} channels", c),
                    ));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((xr, hr), or) in x
            .chunks_exact(c)
            .zip(x_hat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let rg = self.any_needs(&[input, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Windowed pooling without padding; the output extent is
    /// `(H - window) / stride + 1`.
    pub fn pool(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        self.check(&[input])?;
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("pool", format!("input must be [B,H,W,C], got {:?}", xs)));
        }
        let (bsz, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool", "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::shape(
                "pool",
                format!("window {} larger than input {}x{}", window, h, w),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); bsz * oh * ow * c];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0u32; out.len()];
        }
        let inv = T::from_f64(1.0 / (window * window) as f64);
        for b in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let o = ((b * oh + oy) * ow + ox) * c + ch;
                        match kind {
                            PoolKind::Max => {
                                let mut best = T::neg_infinity();
                                let mut at = 0usize;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        let i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                        // strict comparison: ties keep the first element in scan order
                                        if x[i] > best {
                                            best = x[i];
                                            at = i;
                                        }
                                    }
                                }
                                out[o] = best;
                                argmax[o] = at as u32;
                            }
                            PoolKind::Avg => {
                                let mut s = T::zero();
                                for ky in 0..window {
                                    for kx in 0..window {
                                        s += x[((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch];
                                    }
                                }
                                out[o] = s * inv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, oh, ow, c], out)?;
        let rg = self.needs(input);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            PoolKind::Avg => Op::AvgPool { input, window, stride },
        };
        Ok(self.push(value, op, rg))
    }

    /// Mean over H and W; output is `[B, 1, 1, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be [B,H,W,C], got {:?}", xs),
            ));
        }
        let (bsz, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let x = self.value(input).data();
        let inv = T::from_f64(1.0 / hw as f64);
        let mut out = vec![T::zero(); bsz * c];
        for b in 0..bsz {
            let dst = &mut out[b * c..(b + 1) * c];
            for px in x[b * hw * c..(b + 1) * hw * c].chunks_exact(c) {
                for (d, &v) in dst.iter_mut().zip(px) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let value = Tensor::from_vec(&[bsz, 1, 1, c], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// `input [B,F] x weight [F,O] + bias [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(&[input, weight])?;
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", format!("cannot multiply {:?} by {:?}", xs, ws)));
        }
        let (bsz, f, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            self.check(&[b])?;
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "dense",
                    format!("bias must be [{}], got {:?}", o, self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); bsz * o];
        gemm(
            bsz,
            f,
            o,
            self.value(input).data(),
            Trans::No,
            self.value(weight).data(),
            Trans::No,
            T::zero(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                for (r, &v) in row.iter_mut().zip(bv) {
                    *r += v;
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, o], out)?;
        let rg = self.any_needs(&[input, weight]) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    /// `a [B,F] x b[K,F]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("cannot multiply {:?} by {:?}^T", as_, bs),
            ));
        }
        let (m, f, k) = (as_[0], as_[1], bs[0]);
        let mut out = vec![T::zero(); m * k];
        gemm(
            m,
            f,
            k,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::Yes,
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_vec(&[m, k], out)?;
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::MatmulNt { a, b }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Relu { input }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let k = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let k = *x.shape().last().unwrap();
        let floor = T::from_f64(1e-12);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / k);
        for row in out.chunks_exact_mut(k) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::L2Normalize { input, norms }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity in
    /// eval mode or at rate 0 (the input handle is returned unchanged).
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        self.check(&[input])?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Result<Var> {
        self.check(&[input])?;
        let (s, o) = (T::from_f64(scale), T::from_f64(offset));
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * s + o).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Affine { input, scale: s }, rg))
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        self.check(inputs)?;
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first).split_last().unwrap().1.to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.split_last().unwrap().1 != lead.as_slice() {
                return Err(Error::shape(
                    "concat",
                    format!("leading extents differ: {:?} vs {:?}", lead, s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.any_needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[input])?;
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(value.with_requires_grad(false), Op::Reshape { input }, rg))
    }

    /// Flattens to `[B, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let b = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[b, rest])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let s = self.value(input).sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len() as f64;
        let s = self.sum(input)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `sum(weights * x)` against constant weights of the same size.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.len()),
            ));
        }
        let s = x.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against one-hot targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        self.check(&[logits])?;
        let x = self.value(logits);
        if x.rank() != 2 || targets.shape() != x.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", x.shape(), targets.shape()),
            ));
        }
        validate_one_hot(targets)?;
        let (bsz, k) = (x.shape()[0], x.shape()[1]);
        let mut probs = x.data().to_vec();
        let mut loss = 0.0f64;
        for (row, (lrow, trow)) in probs
            .chunks_exact_mut(k)
            .zip(x.data().chunks_exact(k).zip(targets.data().chunks_exact(k)))
        {
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (&l, &t) in lrow.iter().zip(trow) {
                if t != T::zero() {
                    loss -= (t * (l - lse)).to_f64();
                }
            }
            softmax_in_place(row);
        }
        let value = Tensor::scalar(T::from_f64(loss / bsz as f64));
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// One-hot encoding of the per-row argmax. Not differentiable.
    pub fn argmax_one_hot(&mut self, input: Var) -> Result<Var> {
        self.check(&[input])?;
        let x = self.value(input);
        let k = *x.shape().last().unwrap();
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            dst[argmax(row)] = T::one();
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Argmax, rg))
    }

    /// Gradients of a scalar output with respect to every differentiable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let node = self.node(output)?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarOutput(node.value.shape().to_vec()));
        }
        self.backward_seeded(output, vec![T::one()])
    }

    fn backward_seeded(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let n = output.index() + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[output.index()].requires_grad {
            grads[output.index()] = Some(seed);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                Some(Tensor::from_vec(node.value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut give = |v: Var, g: Vec<T>| accumulate(grads, v, g);
        let val = |v: Var| self.nodes[v.index()].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (
                    self.needs(*input),
                    self.needs(*kernel),
                    bias.is_some_and(|b| self.needs(b)),
                );
                let g = kernels::conv_backward(val(*input), val(*kernel), dy, geom, want);
                if let Some(dx) = g.input {
                    give(*input, dx);
                }
                if let Some(dk) = g.kernel {
                    give(*kernel, dk);
                }
                if let (Some(db), Some(b)) = (g.bias, bias) {
                    give(*b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = T::from_f64((dy.len() / c) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (dr, hr) in dy.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += dr[j] * hr[j];
                        dbeta[j] += dr[j];
                    }
                }
                if self.needs(*input) {
                    let g = val(*gamma);
                    let mut dx = vec![T::zero(); dy.len()];
                    for ((xr, dr), hr) in dx
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(x_hat.chunks_exact(c))
                    {
                        for j in 0..c {
                            xr[j] = if *train {
                                g[j] * inv_std[j] / m * (m * dr[j] - dbeta[j] - hr[j] * dgamma[j])
                            } else {
                                g[j] * inv_std[j] * dr[j]
                            };
                        }
                    }
                    give(*input, dx);
                }
                if self.needs(*gamma) {
                    give(*gamma, dgamma);
                }
                if self.needs(*beta) {
                    give(*beta, dbeta);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&at, &d) in argmax.iter().zip(dy) {
                    dx[at as usize] += d;
                }
                give(*input, dx);
            }
            Op::AvgPool { input, window, stride } => {
                let xs = self.nodes[input.index()].value.shape();
                let (bsz, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                let inv = T::from_f64(1.0 / (window * window) as f64);
                let mut dx = vec![T::zero(); bsz * h * w * c];
                for b in 0..bsz {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let d = dy[((b * oh + oy) * ow + ox) * c + ch] * inv;
                                for ky in 0..*window {
                                    for kx in 0..*window {
                                        dx[((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch] += d;
                                    }
                                }
                            }
                        }
                    }
                }
                give(*input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.nodes[input.index()].value.shape();
                let (bsz, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = vec![T::zero(); bsz * hw * c];
                for b in 0..bsz {
                    let src = &dy[b * c..(b + 1) * c];
                    for px in dx[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c) {
                        for (d, &s) in px.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                give(*input, dx);
            }
            Op::Dense { input, weight, bias } => {
                let xs = self.nodes[input.index()].value.shape();
                let (bsz, f) = (xs[0], xs[1]);
                let o = node.value.shape()[1];
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); bsz * f];
                    gemm(bsz, o, f, dy, Trans::No, val(*weight), Trans::Yes, T::zero(), &mut dx);
                    give(*input, dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); f * o];
                    gemm(f, bsz, o, val(*input), Trans::Yes, dy, Trans::No, T::zero(), &mut dw);
                    give(*weight, dw);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    give(b, column_sums(dy, o));
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, f) = (
                    self.nodes[a.index()].value.shape()[0],
                    self.nodes[a.index()].value.shape()[1],
                );
                let k = self.nodes[b.index()].value.shape()[0];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * f];
                    gemm(m, k, f, dy, Trans::No, val(*b), Trans::No, T::zero(), &mut da);
                    give(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * f];
                    gemm(k, m, f, dy, Trans::Yes, val(*a), Trans::No, T::zero(), &mut db);
                    give(*b, db);
                }
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                give(*input, dx);
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((xr, yr), dr) in dx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(dy.chunks_exact(k)) {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        xr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                give(*input, dx);
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (((xr, yr), dr), &n) in dx
                    .chunks_exact_mut(k)
                    .zip(y.chunks_exact(k))
                    .zip(dy.chunks_exact(k))
                    .zip(norms)
                {
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        xr[j] = (dr[j] - yr[j] * dot) / n;
                    }
                }
                give(*input, dx);
            }
            Op::Dropout { input, mask } => {
                give(*input, dy.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    give(*a, dy.to_vec());
                }
                if self.needs(*b) {
                    give(*b, dy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    give(*a, dy.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect());
                }
                if self.needs(*b) {
                    give(*b, dy.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect());
                }
            }
            Op::Affine { input, scale } => {
                give(*input, dy.iter().map(|&d| d * *scale).collect());
            }
            Op::Concat { inputs } => {
                let widths: Vec<usize> = inputs
                    .iter()
                    .map(|v| *self.nodes[v.index()].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut off = 0;
                for (&v, &wd) in inputs.iter().zip(&widths) {
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            dx.extend_from_slice(&dy[r * total + off..r * total + off + wd]);
                        }
                        give(v, dx);
                    }
                    off += wd;
                }
            }
            Op::Reshape { input } => give(*input, dy.to_vec()),
            Op::Sum { input } => give(*input, vec![dy[0]; val(*input).len()]),
            Op::WeightedSum { input, weights } => {
                give(*input, weights.iter().map(|&w| w * dy[0]).collect());
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let bsz = self.nodes[logits.index()].value.shape()[0];
                let scale = dy[0] / T::from_f64(bsz as f64);
                give(
                    *logits,
                    probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect(),
                );
            }
            Op::Argmax => return Err(Error::NotDifferentiable("argmax_one_hot")),
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.index()] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index of the first maximal element.
pub(crate) fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validate_one_hot<T: Element>(targets: &Tensor<T>) -> Result<()> {
    let k = targets.shape()[1];
    for (i, row) in targets.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::InvalidTarget(format!("row {} is not one-hot", i)));
        }
    }
    Ok(())
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a differentiable leaf; zeros if the output does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Result<&Tensor<T>> {
        if v.tape != self.tape {
            return Err(Error::DetachedTape);
        }
        self.grads
            .get(v.index())
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("variable {} is not a differentiable leaf", v.index())))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        self.get(v)?;
        Ok(self.grads[v.index()].take().unwrap())
    }
}
