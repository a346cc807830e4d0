//! Reverse-mode automatic differentiation on a growing operation tape.
//!
//! Every differentiable op appends a node holding its kind, input
//! references, output tensor, and whatever the backward rule needs.
//! Insertion order is a topological order, so the backward pass is a
//! single reverse sweep with gradient accumulation across fan-out.
//! Construction is eager: values are computed (and checked finite) as
//! nodes are pushed, so NaN/Inf surface at the op that produced them.

use crate::error::{Error, Result};
use crate::kernels::broadcast::{binary_bcast, reduce_to_shape};
use crate::kernels::conv::ConvSpec;
use crate::kernels::{self, conv, matmul};
use crate::tensor::{numel, Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: E },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    TransposeLast2 { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<E>, invstds: Vec<E> },
    Softmax { x: Var },
    LnClamped { x: Var, floor: E },
    Gelu { x: Var },
    Silu { x: Var },
    EluPlusOne { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumAxis { x: Var, axis: usize },
    Rope { x: Var, cos: Vec<E>, sin: Vec<E>, seq: usize, dim: usize },
    PatchRegroup { x: Var, h: usize, w: usize, r: usize },
    ConcatLast { a: Var, b: Var },
}

impl<E: Element> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Linear { .. } => "linear",
            Op::Matmul { .. } => "matmul",
            Op::TransposeLast2 { .. } => "transpose_last2",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LnClamped { .. } => "ln_clamped",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::EluPlusOne { .. } => "elu_plus_one",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::Rope { .. } => "rope",
            Op::PatchRegroup { .. } => "patch_regroup",
            Op::ConcatLast { .. } => "concat_last",
        }
    }
}

struct Node<E: Element> {
    op: Op<E>,
    value: Tensor<E>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by `Var`.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// The recording tape.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output tensor of a node.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite values produced by {}",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Non-differentiable input (data, targets, constants).
    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf (parameters and gradient-checked inputs).
    pub fn leaf(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push(Op::Leaf, value, true)
    }

    // ── elementwise binary (broadcasting) ───────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub { a, b }, v, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul { a, b }, v, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_bcast(self.value(a), self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Div { a, b }, v, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar { a }, v, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::MulScalar { a, c }, v, rg)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// x[..., K] @ w[K, N] (+ b[N]).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape(format!(
                "linear: x {:?} incompatible with w {:?}",
                xs, ws
            )));
        }
        let (kk, nn) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / kk;
        let mut out = vec![E::zero(); rows * nn];
        matmul::matmul(self.value(x).data(), self.value(w).data(), rows, kk, nn, &mut out);
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [nn] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} does not match output width {}",
                    bs, nn
                )));
            }
            let bd = self.value(bv).data().to_vec();
            for r in 0..rows {
                for j in 0..nn {
                    out[r * nn + j] = out[r * nn + j] + bd[j];
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = nn;
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        self.push(Op::Linear { x, w, b }, Tensor::new(out_shape, out)?, rg)
    }

    /// Batched [..., M, K] @ [..., K, N] with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() < 2 || bshape.len() != ashape.len() {
            return Err(Error::shape(format!(
                "matmul: ranks {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let r = ashape.len();
        if ashape[..r - 2] != bshape[..r - 2] || ashape[r - 1] != bshape[r - 2] {
            return Err(Error::shape(format!(
                "matmul: {:?} incompatible with {:?}",
                ashape, bshape
            )));
        }
        let (m, k, n) = (ashape[r - 2], ashape[r - 1], bshape[r - 1]);
        let batch: usize = ashape[..r - 2].iter().product();
        let mut out = vec![E::zero(); batch * m * n];
        for bi in 0..batch {
            matmul::matmul(
                &self.value(a).data()[bi * m * k..(bi + 1) * m * k],
                &self.value(b).data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = ashape;
        out_shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul { a, b }, Tensor::new(out_shape, out)?, rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last2 needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let v = self.value(x).permute(&perm)?;
        let rg = self.rg(x);
        self.push(Op::TransposeLast2 { x }, v, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            v,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(Op::Reshape { x }, v, rg)
    }

    // ── convolutions ────────────────────────────────────────────────

    /// x[N, C_in, H, W] (cross-)correlated with w[C_out, C_in/g, k, k].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: need x rank 4 and w rank 4, got {:?} / {:?}",
                xs, ws
            )));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::shape(format!(
                "conv2d: groups {} must divide C_in {} and C_out {}",
                spec.groups, c_in, c_out
            )));
        }
        if ws[1] != c_in / spec.groups || ws[2] != spec.kernel || ws[3] != spec.kernel {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} inconsistent with C_in {} and {:?}",
                ws, c_in, spec
            )));
        }
        let oh = spec.out_extent(h)?;
        let ow = spec.out_extent(wd)?;
        let mut out = vec![E::zero(); n * c_out * oh * ow];
        conv::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            n,
            c_in,
            h,
            wd,
            c_out,
            spec,
            oh,
            ow,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        self.push(
            Op::Conv2d { x, w, b, spec },
            Tensor::new(vec![n, c_out, oh, ow], out)?,
            rg,
        )
    }

    /// Adjoint of conv2d as a forward op. w layout: [C_in, C_out/g, k, k].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv_transpose2d: need rank-4 x and w, got {:?} / {:?}",
                xs, ws
            )));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if c_in % spec.groups != 0 || ws[0] != c_in || ws[2] != spec.kernel || ws[3] != spec.kernel
        {
            return Err(Error::shape(format!(
                "conv_transpose2d: kernel {:?} inconsistent with C_in {} and {:?}",
                ws, c_in, spec
            )));
        }
        let c_out = ws[1] * spec.groups;
        let oh = spec.transposed_out_extent(h)?;
        let ow = spec.transposed_out_extent(wd)?;
        let mut out = vec![E::zero(); n * c_out * oh * ow];
        conv::conv_transpose2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            n,
            c_in,
            h,
            wd,
            c_out,
            spec,
            oh,
            ow,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        self.push(
            Op::ConvTranspose2d { x, w, b, spec },
            Tensor::new(vec![n, c_out, oh, ow], out)?,
            rg,
        )
    }

    // ── normalization & activations ─────────────────────────────────

    /// Normalize over the last axis, then scale/shift by gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        if eps < E::zero() {
            return Err(Error::config("layer_norm: eps must be >= 0"));
        }
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta must be [{}], got {:?} / {:?}",
                cols,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = vec![E::zero(); self.value(x).numel()];
        let (means, invstds) = kernels::layer_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            cols,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                invstds,
            },
            Tensor::new(xs, out)?,
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        let mut out = vec![E::zero(); self.value(x).numel()];
        kernels::softmax_fwd(self.value(x).data(), cols, &mut out);
        let rg = self.rg(x);
        self.push(Op::Softmax { x }, Tensor::new(xs, out)?, rg)
    }

    /// ln(max(x, floor)); gradient is zero on the clamped region.
    pub fn ln_clamped(&mut self, x: Var, floor: E) -> Result<Var> {
        if floor <= E::zero() {
            return Err(Error::config("ln_clamped: floor must be > 0"));
        }
        let v = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(Op::LnClamped { x, floor }, v, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu_val);
        let rg = self.rg(x);
        self.push(Op::Gelu { x }, v, rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(Op::Silu { x }, v, rg)
    }

    /// The positive feature map: elu(x) + 1.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| {
            if v >= E::zero() {
                v + E::one()
            } else {
                v.exp()
            }
        });
        let rg = self.rg(x);
        self.push(Op::EluPlusOne { x }, v, rg)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, Tensor::scalar(acc), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean_all of empty tensor"));
        }
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let rg = self.rg(x);
        self.push(
            Op::MeanAll { x },
            Tensor::scalar(acc / E::from_f64(n as f64)),
            rg,
        )
    }

    /// Sum out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!(
                "sum_axis: axis {} out of range for {:?}",
                axis, xs
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![E::zero(); outer * inner];
        let data = self.value(x).data();
        for o in 0..outer {
            for m in 0..mid {
                let src = &data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] = dst[i] + src[i];
                }
            }
        }
        let mut out_shape = xs;
        out_shape.remove(axis);
        let rg = self.rg(x);
        self.push(Op::SumAxis { x, axis }, Tensor::new(out_shape, out)?, rg)
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Rotate consecutive pairs of the last axis by per-position angles.
    /// `cos`/`sin` are flattened `[seq, dim/2]` tables.
    pub fn rope(&mut self, x: Var, cos: Vec<E>, sin: Vec<E>, seq: usize, dim: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if dim % 2 != 0 {
            return Err(Error::config(format!("rope: head dim {} must be even", dim)));
        }
        if xs.len() < 2 || xs[xs.len() - 1] != dim || xs[xs.len() - 2] != seq {
            return Err(Error::shape(format!(
                "rope: expected trailing [{}, {}], got {:?}",
                seq, dim, xs
            )));
        }
        if cos.len() != seq * dim / 2 || sin.len() != seq * dim / 2 {
            return Err(Error::shape("rope: angle tables sized seq*dim/2"));
        }
        let mut out = vec![E::zero(); self.value(x).numel()];
        kernels::rope_fwd(self.value(x).data(), &cos, &sin, seq, dim, &mut out);
        let rg = self.rg(x);
        self.push(Op::Rope { x, cos, sin, seq, dim }, Tensor::new(xs, out)?, rg)
    }

    /// [B, h*w, r*r*C] -> [B, rh*rw, C]: each position becomes an rxr patch.
    pub fn patch_regroup(&mut self, x: Var, h: usize, w: usize, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w || xs[2] % (r * r) != 0 {
            return Err(Error::shape(format!(
                "patch_regroup: need [B, {}, r*r*C], got {:?}",
                h * w,
                xs
            )));
        }
        let c = xs[2] / (r * r);
        let mut out = vec![E::zero(); self.value(x).numel()];
        kernels::patch_regroup_fwd(self.value(x).data(), h, w, r, c, &mut out);
        let rg = self.rg(x);
        self.push(
            Op::PatchRegroup { x, h, w, r },
            Tensor::new(vec![xs[0], h * w * r * r, c], out)?,
            rg,
        )
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() != bshape.len()
            || ashape.is_empty()
            || ashape[..ashape.len() - 1] != bshape[..bshape.len() - 1]
        {
            return Err(Error::shape(format!(
                "concat_last: {:?} vs {:?}",
                ashape, bshape
            )));
        }
        let (ca, cb) = (ashape[ashape.len() - 1], bshape[bshape.len() - 1]);
        let rows = self.value(a).numel() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        let mut out_shape = ashape;
        *out_shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatLast { a, b }, Tensor::new(out_shape, out)?, rg)
    }

    // ── composite helpers ───────────────────────────────────────────

    /// [B, H*W, C] -> [B, C, H, W]
    pub fn seq_to_grid(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(Error::shape(format!(
                "seq_to_grid: sequence length {} is not {}x{}",
                xs.get(1).copied().unwrap_or(0),
                h,
                w
            )));
        }
        let r = self.reshape(x, vec![xs[0], h, w, xs[2]])?;
        self.permute(r, &[0, 3, 1, 2])
    }

    /// [B, C, H, W] -> [B, H*W, C]
    pub fn grid_to_seq(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("grid_to_seq: need rank 4"));
        }
        let p = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(p, vec![xs[0], xs[2] * xs[3], xs[1]])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate across
    /// fan-out; leaves keep their gradients, interior grads are dropped
    /// once consumed.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(root_val.shape(), E::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // leaves keep their gradient
                continue;
            }
            self.backward_op(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => {
                let ed = existing.data_mut();
                for (e, &gv) in ed.iter_mut().zip(g.data()) {
                    *e = *e + gv;
                }
            }
            None => grads[v.0] = Some(g),
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaf handled by caller"),

            Op::Add { a, b } => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a)))?;
                self.accum(grads, *b, reduce_to_shape(g, self.shape(*b)))?;
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a)))?;
                let neg = g.map(|v| -v);
                self.accum(grads, *b, reduce_to_shape(&neg, self.shape(*b)))?;
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let da = binary_bcast(g, self.value(*b), |gv, bv| gv * bv)?;
                    self.accum(grads, *a, reduce_to_shape(&da, self.shape(*a)))?;
                }
                if self.rg(*b) {
                    let db = binary_bcast(g, self.value(*a), |gv, av| gv * av)?;
                    self.accum(grads, *b, reduce_to_shape(&db, self.shape(*b)))?;
                }
            }
            Op::Div { a, b } => {
                if self.rg(*a) {
                    let da = binary_bcast(g, self.value(*b), |gv, bv| gv / bv)?;
                    self.accum(grads, *a, reduce_to_shape(&da, self.shape(*a)))?;
                }
                if self.rg(*b) {
                    let ratio = binary_bcast(self.value(*a), self.value(*b), |av, bv| {
                        -av / (bv * bv)
                    })?;
                    let db = binary_bcast(g, &ratio, |gv, rv| gv * rv)?;
                    self.accum(grads, *b, reduce_to_shape(&db, self.shape(*b)))?;
                }
            }
            Op::AddScalar { a } => {
                self.accum(grads, *a, g.clone())?;
            }
            Op::MulScalar { a, c } => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c))?;
            }

            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (kk, nn) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / kk;
                if self.rg(*x) {
                    let mut dx = vec![E::zero(); rows * kk];
                    matmul::matmul_bt(g.data(), self.value(*w).data(), rows, nn, kk, &mut dx);
                    self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![E::zero(); kk * nn];
                    matmul::matmul_at(self.value(*x).data(), g.data(), rows, kk, nn, &mut dw);
                    self.accum(grads, *w, Tensor::new(vec![kk, nn], dw)?)?;
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let mut db = vec![E::zero(); nn];
                        for r in 0..rows {
                            for j in 0..nn {
                                db[j] = db[j] + g.data()[r * nn + j];
                            }
                        }
                        self.accum(grads, *bv, Tensor::new(vec![nn], db)?)?;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let ashape = self.shape(*a).to_vec();
                let bshape = self.shape(*b).to_vec();
                let r = ashape.len();
                let (m, k, n) = (ashape[r - 2], ashape[r - 1], bshape[r - 1]);
                let batch: usize = ashape[..r - 2].iter().product();
                if self.rg(*a) {
                    let mut da = vec![E::zero(); batch * m * k];
                    for bi in 0..batch {
                        matmul::matmul_bt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &self.value(*b).data()[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, Tensor::new(ashape.clone(), da)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![E::zero(); batch * k * n];
                    for bi in 0..batch {
                        matmul::matmul_at(
                            &self.value(*a).data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accum(grads, *b, Tensor::new(bshape, db)?)?;
                }
            }
            Op::TransposeLast2 { x } => {
                let r = g.rank();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                self.accum(grads, *x, g.permute(&perm)?)?;
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                self.accum(grads, *x, g.permute(&inv)?)?;
            }
            Op::Reshape { x } => {
                let back = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accum(grads, *x, back)?;
            }

            Op::Conv2d { x, w, b, spec } => {
                let xs = self.shape(*x).to_vec();
                let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let c_out = self.shape(*w)[0];
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                if self.rg(*x) {
                    let mut dx = vec![E::zero(); self.value(*x).numel()];
                    conv::conv2d_bwd_input(
                        g.data(),
                        self.value(*w).data(),
                        n,
                        c_in,
                        h,
                        wd,
                        c_out,
                        *spec,
                        oh,
                        ow,
                        &mut dx,
                    );
                    self.accum(grads, *x, Tensor::new(xs.clone(), dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![E::zero(); self.value(*w).numel()];
                    conv::conv2d_bwd_weight(
                        self.value(*x).data(),
                        g.data(),
                        n,
                        c_in,
                        h,
                        wd,
                        c_out,
                        *spec,
                        oh,
                        ow,
                        &mut dw,
                    );
                    self.accum(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?)?;
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let mut db = vec![E::zero(); c_out];
                        conv::conv2d_bwd_bias(g.data(), n, c_out, oh * ow, &mut db);
                        self.accum(grads, *bv, Tensor::new(vec![c_out], db)?)?;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let xs = self.shape(*x).to_vec();
                let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let c_out = g.shape()[1];
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                if self.rg(*x) {
                    let mut dx = vec![E::zero(); self.value(*x).numel()];
                    conv::conv_transpose2d_bwd_input(
                        g.data(),
                        self.value(*w).data(),
                        n,
                        c_in,
                        h,
                        wd,
                        c_out,
                        *spec,
                        oh,
                        ow,
                        &mut dx,
                    );
                    self.accum(grads, *x, Tensor::new(xs.clone(), dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![E::zero(); self.value(*w).numel()];
                    conv::conv_transpose2d_bwd_weight(
                        self.value(*x).data(),
                        g.data(),
                        n,
                        c_in,
                        h,
                        wd,
                        c_out,
                        *spec,
                        oh,
                        ow,
                        &mut dw,
                    );
                    self.accum(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?)?;
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let mut db = vec![E::zero(); c_out];
                        conv::conv2d_bwd_bias(g.data(), n, c_out, oh * ow, &mut db);
                        self.accum(grads, *bv, Tensor::new(vec![c_out], db)?)?;
                    }
                }
            }

            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                invstds,
            } => {
                let cols = *self.shape(*x).last().unwrap();
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                let mut dgamma = vec![E::zero(); cols];
                let mut dbeta = vec![E::zero(); cols];
                kernels::layer_norm_bwd(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    invstds,
                    g.data(),
                    cols,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                self.accum(grads, *gamma, Tensor::new(vec![cols], dgamma)?)?;
                self.accum(grads, *beta, Tensor::new(vec![cols], dbeta)?)?;
            }
            Op::Softmax { x } => {
                let cols = *self.shape(*x).last().unwrap();
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                kernels::softmax_bwd(self.nodes[i].value.data(), g.data(), cols, &mut dx);
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::LnClamped { x, floor } => {
                let floor = *floor;
                let xd = self.value(*x).data();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > floor { gv / xv } else { E::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::Gelu { x } => {
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::Silu { x } => {
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (E::one() + xv * (E::one() - s))
                    })
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::EluPlusOne { x } => {
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| {
                        if xv >= E::zero() {
                            gv
                        } else {
                            gv * xv.exp()
                        }
                    })
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }

            Op::SumAll { x } => {
                let gv = g.data()[0];
                self.accum(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::MeanAll { x } => {
                let n = E::from_f64(self.value(*x).numel() as f64);
                let gv = g.data()[0] / n;
                self.accum(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![E::zero(); numel(&xs)];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        dst.copy_from_slice(src);
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, dx)?)?;
            }

            Op::Rope { x, cos, sin, seq, dim } => {
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                kernels::rope_bwd(g.data(), cos, sin, *seq, *dim, &mut dx);
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::PatchRegroup { x, h, w, r } => {
                let c = self.shape(*x)[2] / (r * r);
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                kernels::patch_regroup_inv(g.data(), *h, *w, *r, c, &mut dx);
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = self.value(*a).numel() / ca;
                if self.rg(*a) {
                    let mut da = vec![E::zero(); rows * ca];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g.data()[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accum(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![E::zero(); rows * cb];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb].copy_from_slice(
                            &g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                        );
                    }
                    self.accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?)?;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_val<E: Element>(x: E) -> E {
    // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let a = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = E::from_f64(GELU_COEF);
    let u = a * (x + c * x * x * x);
    E::from_f64(0.5) * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let a = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = E::from_f64(GELU_COEF);
    let u = a * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    let du = a * (E::one() + E::from_f64(3.0 * GELU_COEF) * x * x);
    E::from_f64(0.5) * (E::one() + t) + E::from_f64(0.5) * x * sech2 * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2])).unwrap();
        let unused = tape.leaf(Tensor::ones(&[4])).unwrap();
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[4]).data(), &[0.0; 4]);
    }

    #[test]
    fn fanout_accumulates_once_per_consumer() {
        // f = sum(x) + sum(x) -> grad = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3])).unwrap();
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let t = tape.add(s1, s2).unwrap();
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::<f32>::new();
        let x = tape
            .leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.731).sin()))
            .unwrap();
        let w = tape
            .leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 1.13).cos()))
            .unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let act = tape.gelu(y).unwrap();
        let s = tape.sum_all(act).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
        assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0e30)).unwrap();
        // 1e60 overflows f32: the op must refuse to record the result
        assert!(matches!(tape.mul(x, x), Err(Error::Numeric(_))));
    }
}
