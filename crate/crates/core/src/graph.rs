//! Eager reverse-mode autodiff tape.
//!
//! Every op computes its value immediately and appends a node; `backward`
//! walks the tape in reverse. Ops validate shapes up front and fail with a
//! named numeric error if a forward value goes non-finite.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{err, Error, Result};
use crate::kernels::{conv2d_bwd, conv2d_fwd, gemm_nn, gemm_nt, gemm_tn, Conv2dSpec};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(String),
    Add,
    Sub,
    Mul,
    Scale(T),
    AddBias,
    MatMul,
    Bmm,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LayerNorm { eps: T },
    BatchNorm { eps: T, batch_stats: bool },
    Conv2d { spec: Conv2dSpec },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Permute { perm: Vec<usize> },
    Reshape,
    Gsp,
    Dropout,
    PairConcat,
    Bce { eps: T },
    MeanAll,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add-bias",
            Op::MatMul => "matmul",
            Op::Bmm => "bmm",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::BatchNorm { .. } => "batch-norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Permute { .. } => "permute",
            Op::Reshape => "reshape",
            Op::Gsp => "mean-std-pool",
            Op::Dropout => "dropout",
            Op::PairConcat => "pair-concat",
            Op::Bce { .. } => "bce-loss",
            Op::MeanAll => "mean",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    /// Saved intermediates for backward (masks, normalized values, ...).
    aux: Vec<Tensor<T>>,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    training: bool,
    rng: ChaCha8Rng,
    /// Buffer writes produced during forward (batch-norm running stats);
    /// the trainer applies them to the store after the step.
    pub buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Graph<T> {
    /// Inference-mode graph (dropout off, batch norm uses running stats).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode graph; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: BTreeMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        aux: Vec<Tensor<T>>,
        needs_grad: bool,
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(op.name().to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
        });
        Ok(id)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, vec![], t, vec![], false)
    }

    /// Differentiable input (for gradient checks against data).
    pub fn input_grad(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, vec![], t, vec![], true)
    }

    /// Parameter leaf; repeated calls with the same name share one node so
    /// gradients accumulate across every use.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let entry = store.get(name)?;
        let needs = entry.trainable;
        let id = self.push(
            Op::Param(name.to_string()),
            vec![],
            entry.tensor.clone(),
            vec![],
            needs,
        )?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        let ng = self.any_grad(&[a, b]);
        self.push(Op::Add, vec![a, b], v, vec![], ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(err!(Shape, "sub {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(va.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        self.push(Op::Sub, vec![a, b], v, vec![], ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(err!(Shape, "mul {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(va.shape(), data)?;
        let ng = self.any_grad(&[a, b]);
        self.push(Op::Mul, vec![a, b], v, vec![], ng)
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> Result<NodeId> {
        let v = self.nodes[a].value.scale(k);
        let ng = self.any_grad(&[a]);
        self.push(Op::Scale(k), vec![a], v, vec![], ng)
    }

    /// `x (…, n) + b (n)` broadcast over leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x].value, &self.nodes[b].value);
        let n = *vx.shape().last().ok_or_else(|| err!(Shape, "add_bias on scalar"))?;
        if vb.shape() != [n] {
            return Err(err!(Shape, "bias {:?} vs feature dim {}", vb.shape(), n));
        }
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &bv) in chunk.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(vx.shape(), data)?;
        let ng = self.any_grad(&[x, b]);
        self.push(Op::AddBias, vec![x, b], v, vec![], ng)
    }

    /// `a (…, k) @ w (k, n)`; leading axes of `a` are kept.
    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (va, vw) = (&self.nodes[a].value, &self.nodes[w].value);
        if vw.rank() != 2 {
            return Err(err!(Shape, "matmul rhs must be rank 2, got {:?}", vw.shape()));
        }
        let k = vw.dim(0);
        let n = vw.dim(1);
        if va.rank() < 1 || *va.shape().last().unwrap() != k {
            return Err(err!(Shape, "matmul {:?} @ {:?}", va.shape(), vw.shape()));
        }
        let rows = va.len() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm_nn(&mut out, va.data(), vw.data(), rows, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        let ng = self.any_grad(&[a, w]);
        self.push(Op::MatMul, vec![a, w], v, vec![], ng)
    }

    /// Batched matmul `(b, m, k) @ (b, k, n)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1) {
            return Err(err!(Shape, "bmm {:?} @ {:?}", va.shape(), vb.shape()));
        }
        let (bs, m, k, n) = (va.dim(0), va.dim(1), va.dim(2), vb.dim(2));
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &mut out[i * m * n..(i + 1) * m * n],
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        let ng = self.any_grad(&[a, b]);
        self.push(Op::Bmm, vec![a, b], v, vec![], ng)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.any_grad(&[x]);
        self.push(Op::Relu, vec![x], v, vec![], ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let one = T::one();
        let v = self.nodes[x].value.map(|v| one / (one + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(Op::Sigmoid, vec![x], v, vec![], ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|v| v.tanh());
        let ng = self.any_grad(&[x]);
        self.push(Op::Tanh, vec![x], v, vec![], ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let n = *vx.shape().last().ok_or_else(|| err!(Shape, "softmax on scalar"))?;
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let v = Tensor::new(vx.shape(), data)?;
        let ng = self.any_grad(&[x]);
        self.push(Op::Softmax, vec![x], v, vec![], ng)
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (vx, vg, vb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        let n = *vx.shape().last().ok_or_else(|| err!(Shape, "layer_norm on scalar"))?;
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(err!(Shape, "layer_norm affine dims {:?}/{:?} vs {}", vg.shape(), vb.shape(), n));
        }
        let rows = vx.len() / n;
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let nf = T::from_usize(n);
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let v = Tensor::new(vx.shape(), out)?;
        let aux = vec![
            Tensor::new(vx.shape(), xhat)?,
            Tensor::new(&[rows], inv_std)?,
        ];
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], v, aux, ng)
    }

    /// Batch norm over channel axis 1 of a rank-3 `(B, C, T)` or rank-4
    /// `(B, C, H, W)` tensor. In training mode the op normalizes with batch
    /// statistics and records running-stat updates in `buffer_updates`; in
    /// eval mode it uses the running statistics passed in.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mean_name: &str,
        var_name: &str,
        eps: T,
        momentum: T,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.rank() < 3 {
            return Err(err!(Shape, "batch_norm needs rank >= 3, got {:?}", vx.shape()));
        }
        let b = vx.dim(0);
        let c = vx.dim(1);
        let spatial: usize = vx.shape()[2..].iter().product();
        let vg = &self.nodes[gamma].value;
        let vb = &self.nodes[beta].value;
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(err!(Shape, "batch_norm affine dims vs channels {}", c));
        }
        let m = b * spatial;
        let mf = T::from_usize(m);
        let (mean, var) = if self.training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    mean[ci] += vx.data()[base..base + spatial].iter().copied().sum::<T>();
                }
            }
            for v in mean.iter_mut() {
                *v = *v / mf;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let mu = mean[ci];
                    var[ci] += vx.data()[base..base + spatial]
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<T>();
                }
            }
            for v in var.iter_mut() {
                *v = *v / mf;
            }
            // running <- (1-momentum) * running + momentum * batch
            let one = T::one();
            let upd_mean: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (one - momentum) * r + momentum * m)
                .collect();
            let upd_var: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (one - momentum) * r + momentum * v)
                .collect();
            self.buffer_updates
                .push((mean_name.to_string(), Tensor::new(&[c], upd_mean)?));
            self.buffer_updates
                .push((var_name.to_string(), Tensor::new(&[c], upd_var)?));
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            inv_std[ci] = T::one() / (var[ci] + eps).sqrt();
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                let (mu, is) = (mean[ci], inv_std[ci]);
                let (g, be) = (vg.data()[ci], vb.data()[ci]);
                for s in 0..spatial {
                    let h = (vx.data()[base + s] - mu) * is;
                    xhat[base + s] = h;
                    out[base + s] = g * h + be;
                }
            }
        }
        let v = Tensor::new(vx.shape(), out)?;
        let aux = vec![Tensor::new(vx.shape(), xhat)?, Tensor::new(&[c], inv_std)?];
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Op::BatchNorm { eps, batch_stats: self.training },
            vec![x, gamma, beta],
            v,
            aux,
            ng,
        )
    }

    /// 2-d convolution: `x (B, C_in, H, W)`, `w (C_out, C_in, kh, kw)`, `b (C_out)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let vb = &self.nodes[b].value;
        if vx.rank() != 4 || vx.dim(1) != spec.c_in {
            return Err(err!(Shape, "conv2d input {:?} vs c_in {}", vx.shape(), spec.c_in));
        }
        if vw.shape() != [spec.c_out, spec.c_in, spec.kh, spec.kw] || vb.shape() != [spec.c_out] {
            return Err(err!(Shape, "conv2d weight {:?} / bias {:?}", vw.shape(), vb.shape()));
        }
        let (batch, h, wdt) = (vx.dim(0), vx.dim(2), vx.dim(3));
        if h + 2 * spec.pad_h < spec.kh || wdt + 2 * spec.pad_w < spec.kw {
            return Err(err!(Shape, "conv2d input {}x{} smaller than kernel", h, wdt));
        }
        let (oh, ow) = spec.out_hw(h, wdt);
        let out = conv2d_fwd(vx.data(), vw.data(), vb.data(), &spec, batch, h, wdt);
        let v = Tensor::new(&[batch, spec.c_out, oh, ow], out)?;
        let ng = self.any_grad(&[x, w, b]);
        self.push(Op::Conv2d { spec }, vec![x, w, b], v, vec![], ng)
    }

    /// 1-d convolution over `(B, C, T)` realized as a 1-row conv2d.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.rank() != 3 {
            return Err(err!(Shape, "conv1d input must be rank 3, got {:?}", vx.shape()));
        }
        let (bs, c, t) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let vw = &self.nodes[w].value;
        if vw.rank() != 3 || vw.dim(1) != c || vw.dim(2) != k {
            return Err(err!(Shape, "conv1d weight {:?}", vw.shape()));
        }
        let co = vw.dim(0);
        let x4 = self.reshape(x, &[bs, c, 1, t])?;
        let w4 = self.reshape(w, &[co, c, 1, k])?;
        let spec = Conv2dSpec {
            c_in: c,
            c_out: co,
            kh: 1,
            kw: k,
            stride_h: 1,
            stride_w: stride,
            pad_h: 0,
            pad_w: pad,
        };
        let y = self.conv2d(x4, w4, b, spec)?;
        let (ob, oc, _, ot) = {
            let vy = self.value(y);
            (vy.dim(0), vy.dim(1), vy.dim(2), vy.dim(3))
        };
        self.reshape(y, &[ob, oc, ot])
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(err!(Shape, "concat of zero tensors"));
        }
        let first = self.nodes[parts[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(err!(Shape, "concat axis {} of rank {}", axis, first.len()));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(err!(Shape, "concat {:?} vs {:?}", s, first));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            let a = v.dim(axis);
            let chunk = a * inner;
            for o in 0..outer {
                let src = &v.data()[o * chunk..(o + 1) * chunk];
                let dst = &mut data[o * out_stride + offset..o * out_stride + offset + chunk];
                dst.copy_from_slice(src);
            }
            offset += chunk;
        }
        let v = Tensor::new(&shape, data)?;
        let ng = self.any_grad(parts);
        self.push(Op::Concat { axis }, parts.to_vec(), v, vec![], ng)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let shape = vx.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(err!(
                Shape,
                "narrow axis {} [{}, {}) of {:?}",
                axis,
                start,
                start + len,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let in_stride = shape[axis] * inner;
        for o in 0..outer {
            let src = &vx.data()[o * in_stride + start * inner..o * in_stride + (start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let v = Tensor::new(&out_shape, data)?;
        let ng = self.any_grad(&[x]);
        self.push(Op::Narrow { axis, start, len }, vec![x], v, vec![], ng)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let rank = vx.rank();
        if perm.len() != rank {
            return Err(err!(Shape, "permute {:?} on rank {}", perm, rank));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(err!(Shape, "invalid permutation {:?}", perm));
            }
            seen[p] = true;
        }
        let v = permute_tensor(vx, perm)?;
        let ng = self.any_grad(&[x]);
        self.push(Op::Permute { perm: perm.to_vec() }, vec![x], v, vec![], ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x].value.reshaped(shape)?;
        let ng = self.any_grad(&[x]);
        self.push(Op::Reshape, vec![x], v, vec![], ng)
    }

    /// Frame-level statistics pooling: `(B, C, H, T)` -> `(B, T, 2C)` where
    /// row t holds per-channel means then population standard deviations
    /// taken over the feature axis H. A constant column yields std exactly 0;
    /// backward clamps the std denominator at 1e-5.
    pub fn gsp(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.rank() != 4 {
            return Err(err!(Shape, "gsp needs (B, C, H, T), got {:?}", vx.shape()));
        }
        let (b, c, h, t) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        if h == 0 {
            return Err(err!(Shape, "gsp over empty feature axis"));
        }
        let hf = T::from_usize(h);
        let mut out = vec![T::zero(); b * t * 2 * c];
        let mut means = vec![T::zero(); b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let mut sum = T::zero();
                    for hi in 0..h {
                        sum += vx.data()[((bi * c + ci) * h + hi) * t + ti];
                    }
                    let mean = sum / hf;
                    let mut var = T::zero();
                    for hi in 0..h {
                        let d = vx.data()[((bi * c + ci) * h + hi) * t + ti] - mean;
                        var += d * d;
                    }
                    var = var / hf;
                    let std = if var > T::zero() { var.sqrt() } else { T::zero() };
                    means[(bi * c + ci) * t + ti] = mean;
                    out[(bi * t + ti) * 2 * c + ci] = mean;
                    out[(bi * t + ti) * 2 * c + c + ci] = std;
                }
            }
        }
        let v = Tensor::new(&[b, t, 2 * c], out)?;
        let aux = vec![Tensor::new(&[b, c, t], means)?];
        let ng = self.any_grad(&[x]);
        self.push(Op::Gsp, vec![x], v, aux, ng)
    }

    /// Inverted dropout; identity when not training or p = 0.
    pub fn dropout(&mut self, x: NodeId, p: T) -> Result<NodeId> {
        if !self.training || p <= T::zero() {
            return Ok(x);
        }
        let keep = T::one() - p;
        let scale = T::one() / keep;
        let vx = &self.nodes[x].value;
        let mask: Vec<T> = (0..vx.len())
            .map(|_| {
                if T::from_f64(self.rng.gen::<f64>()) < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = Tensor::new(vx.shape(), mask)?;
        let data = vx
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect();
        let v = Tensor::new(vx.shape(), data)?;
        let ng = self.any_grad(&[x]);
        self.push(Op::Dropout, vec![x], v, vec![mask], ng)
    }

    /// Pair every target embedding with every frame embedding:
    /// `bank (B, N, D)` + `frames (B, T, D)` -> `(B, N, T, 2D)`.
    pub fn pair_concat(&mut self, bank: NodeId, frames: NodeId) -> Result<NodeId> {
        let (vb, vf) = (&self.nodes[bank].value, &self.nodes[frames].value);
        if vb.rank() != 3 || vf.rank() != 3 || vb.dim(0) != vf.dim(0) || vb.dim(2) != vf.dim(2) {
            return Err(err!(
                Shape,
                "pair_concat bank {:?} vs frames {:?}",
                vb.shape(),
                vf.shape()
            ));
        }
        let (b, n, d) = (vb.dim(0), vb.dim(1), vb.dim(2));
        let t = vf.dim(1);
        let mut data = vec![T::zero(); b * n * t * 2 * d];
        for bi in 0..b {
            for ni in 0..n {
                let e = &vb.data()[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                for ti in 0..t {
                    let base = ((bi * n + ni) * t + ti) * 2 * d;
                    data[base..base + d].copy_from_slice(e);
                    data[base + d..base + 2 * d]
                        .copy_from_slice(&vf.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
                }
            }
        }
        let v = Tensor::new(&[b, n, t, 2 * d], data)?;
        let ng = self.any_grad(&[bank, frames]);
        self.push(Op::PairConcat, vec![bank, frames], v, vec![], ng)
    }

    /// Weighted binary cross entropy, mean over entries with weight > 0:
    /// `sum(w * bce(pred, label)) / sum(w)`. Predictions are clamped to
    /// `[eps, 1-eps]` before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, label: NodeId, weight: NodeId, eps: T) -> Result<NodeId> {
        let (vp, vl, vw) = (
            &self.nodes[pred].value,
            &self.nodes[label].value,
            &self.nodes[weight].value,
        );
        if vp.shape() != vl.shape() || vp.shape() != vw.shape() {
            return Err(err!(
                Shape,
                "bce pred {:?} label {:?} weight {:?}",
                vp.shape(),
                vl.shape(),
                vw.shape()
            ));
        }
        let wsum: T = vw.data().iter().copied().sum();
        if wsum <= T::zero() {
            return Err(err!(InvalidInput, "bce: all entries masked out"));
        }
        let one = T::one();
        let mut acc = T::zero();
        for ((&p, &y), &w) in vp.data().iter().zip(vl.data()).zip(vw.data()) {
            if w == T::zero() {
                continue;
            }
            let pc = clamp(p, eps, one - eps);
            acc += w * (-(y * pc.ln() + (one - y) * (one - pc).ln()));
        }
        let v = Tensor::scalar(acc / wsum);
        let ng = self.any_grad(&[pred]);
        self.push(Op::Bce { eps }, vec![pred, label, weight], v, vec![], ng)
    }

    /// Mean of all entries (scalar output).
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.is_empty() {
            return Err(err!(Shape, "mean of empty tensor"));
        }
        let v = Tensor::scalar(vx.data().iter().copied().sum::<T>() / T::from_usize(vx.len()));
        let ng = self.any_grad(&[x]);
        self.push(Op::MeanAll, vec![x], v, vec![], ng)
    }

    /// Reverse pass from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(err!(
                Shape,
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.shape(), T::one()));
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) -> Result<()> {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let need = |i: usize| self.nodes[ins[i]].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add => {
                for i in 0..2 {
                    if need(i) {
                        Self::accumulate(grads, ins[i], g.clone())?;
                    }
                }
            }
            Op::Sub => {
                if need(0) {
                    Self::accumulate(grads, ins[0], g.clone())?;
                }
                if need(1) {
                    Self::accumulate(grads, ins[1], g.scale(-T::one()))?;
                }
            }
            Op::Mul => {
                if need(0) {
                    let d = elementwise(g, val(1), |a, b| a * b)?;
                    Self::accumulate(grads, ins[0], d)?;
                }
                if need(1) {
                    let d = elementwise(g, val(0), |a, b| a * b)?;
                    Self::accumulate(grads, ins[1], d)?;
                }
            }
            Op::Scale(k) => {
                if need(0) {
                    Self::accumulate(grads, ins[0], g.scale(*k))?;
                }
            }
            Op::AddBias => {
                if need(0) {
                    Self::accumulate(grads, ins[0], g.clone())?;
                }
                if need(1) {
                    let n = val(1).len();
                    let mut gb = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    Self::accumulate(grads, ins[1], Tensor::new(&[n], gb)?)?;
                }
            }
            Op::MatMul => {
                let a = val(0);
                let w = val(1);
                let k = w.dim(0);
                let n = w.dim(1);
                let rows = a.len() / k;
                if need(0) {
                    let mut ga = vec![T::zero(); a.len()];
                    gemm_nt(&mut ga, g.data(), w.data(), rows, n, k);
                    Self::accumulate(grads, ins[0], Tensor::new(a.shape(), ga)?)?;
                }
                if need(1) {
                    let mut gw = vec![T::zero(); w.len()];
                    gemm_tn(&mut gw, a.data(), g.data(), rows, k, n);
                    Self::accumulate(grads, ins[1], Tensor::new(w.shape(), gw)?)?;
                }
            }
            Op::Bmm => {
                let a = val(0);
                let b = val(1);
                let (bs, m, k, n) = (a.dim(0), a.dim(1), a.dim(2), b.dim(2));
                if need(0) {
                    let mut ga = vec![T::zero(); a.len()];
                    for i in 0..bs {
                        gemm_nt(
                            &mut ga[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(a.shape(), ga)?)?;
                }
                if need(1) {
                    let mut gb = vec![T::zero(); b.len()];
                    for i in 0..bs {
                        gemm_tn(
                            &mut gb[i * k * n..(i + 1) * k * n],
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Self::accumulate(grads, ins[1], Tensor::new(b.shape(), gb)?)?;
                }
            }
            Op::Relu => {
                if need(0) {
                    let d = elementwise(g, val(0), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::Sigmoid => {
                if need(0) {
                    let one = T::one();
                    let d = elementwise(g, &node.value, |gv, y| gv * y * (one - y))?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::Tanh => {
                if need(0) {
                    let one = T::one();
                    let d = elementwise(g, &node.value, |gv, y| gv * (one - y * y))?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::Softmax => {
                if need(0) {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / n {
                        let ys = &y.data()[r * n..(r + 1) * n];
                        let gs = &g.data()[r * n..(r + 1) * n];
                        let dotv: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = ys[j] * (gs[j] - dotv);
                        }
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(y.shape(), gx)?)?;
                }
            }
            Op::LayerNorm { .. } => {
                let xhat = &node.aux[0];
                let inv_std = &node.aux[1];
                let n = *xhat.shape().last().unwrap();
                let rows = xhat.len() / n;
                let gamma = val(1);
                let nf = T::from_usize(n);
                if need(1) {
                    let mut gg = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g.data()[r * n + j] * xhat.data()[r * n + j];
                        }
                    }
                    Self::accumulate(grads, ins[1], Tensor::new(&[n], gg)?)?;
                }
                if need(2) {
                    let mut gb = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    Self::accumulate(grads, ins[2], Tensor::new(&[n], gb)?)?;
                }
                if need(0) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let mut sum_gh = T::zero();
                        let mut sum_ghh = T::zero();
                        for j in 0..n {
                            let gh = g.data()[r * n + j] * gamma.data()[j];
                            sum_gh += gh;
                            sum_ghh += gh * xhat.data()[r * n + j];
                        }
                        let is = inv_std.data()[r];
                        for j in 0..n {
                            let gh = g.data()[r * n + j] * gamma.data()[j];
                            gx[r * n + j] =
                                is / nf * (nf * gh - sum_gh - xhat.data()[r * n + j] * sum_ghh);
                        }
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(xhat.shape(), gx)?)?;
                }
            }
            Op::BatchNorm { batch_stats, .. } => {
                let xhat = &node.aux[0];
                let inv_std = &node.aux[1];
                let b = xhat.dim(0);
                let c = xhat.dim(1);
                let spatial: usize = xhat.shape()[2..].iter().product();
                let m = b * spatial;
                let mf = T::from_usize(m);
                let gamma = val(1);
                if need(1) || need(2) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for s in 0..spatial {
                                gg[ci] += g.data()[base + s] * xhat.data()[base + s];
                                gb[ci] += g.data()[base + s];
                            }
                        }
                    }
                    if need(1) {
                        Self::accumulate(grads, ins[1], Tensor::new(&[c], gg)?)?;
                    }
                    if need(2) {
                        Self::accumulate(grads, ins[2], Tensor::new(&[c], gb)?)?;
                    }
                }
                if need(0) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    if *batch_stats {
                        for ci in 0..c {
                            let mut sum_gh = T::zero();
                            let mut sum_ghh = T::zero();
                            for bi in 0..b {
                                let base = (bi * c + ci) * spatial;
                                for s in 0..spatial {
                                    let gh = g.data()[base + s] * gamma.data()[ci];
                                    sum_gh += gh;
                                    sum_ghh += gh * xhat.data()[base + s];
                                }
                            }
                            let is = inv_std.data()[ci];
                            for bi in 0..b {
                                let base = (bi * c + ci) * spatial;
                                for s in 0..spatial {
                                    let gh = g.data()[base + s] * gamma.data()[ci];
                                    gx[base + s] = is / mf
                                        * (mf * gh - sum_gh - xhat.data()[base + s] * sum_ghh);
                                }
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                let k = gamma.data()[ci] * inv_std.data()[ci];
                                for s in 0..spatial {
                                    gx[base + s] = g.data()[base + s] * k;
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(xhat.shape(), gx)?)?;
                }
            }
            Op::Conv2d { spec } => {
                let x = val(0);
                let w = val(1);
                let (batch, h, wdt) = (x.dim(0), x.dim(2), x.dim(3));
                let (gi, gw, gb) =
                    conv2d_bwd(x.data(), w.data(), g.data(), spec, batch, h, wdt);
                if need(0) {
                    Self::accumulate(grads, ins[0], Tensor::new(x.shape(), gi)?)?;
                }
                if need(1) {
                    Self::accumulate(grads, ins[1], Tensor::new(w.shape(), gw)?)?;
                }
                if need(2) {
                    Self::accumulate(grads, ins[2], Tensor::new(&[spec.c_out], gb)?)?;
                }
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let out_stride = shape[*axis] * inner;
                let mut offset = 0;
                for (i, &inp) in ins.iter().enumerate() {
                    let s = self.nodes[inp].value.shape();
                    let chunk = s[*axis] * inner;
                    if need(i) {
                        let mut d = vec![T::zero(); self.nodes[inp].value.len()];
                        for o in 0..outer {
                            d[o * chunk..(o + 1) * chunk].copy_from_slice(
                                &g.data()[o * out_stride + offset..o * out_stride + offset + chunk],
                            );
                        }
                        Self::accumulate(grads, inp, Tensor::new(s, d)?)?;
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { axis, start, len } => {
                if need(0) {
                    let x = val(0);
                    let shape = x.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let in_stride = shape[*axis] * inner;
                    let mut d = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        d[o * in_stride + start * inner..o * in_stride + (start + len) * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(shape, d)?)?;
                }
            }
            Op::Permute { perm } => {
                if need(0) {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let d = permute_tensor(g, &inverse)?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::Reshape => {
                if need(0) {
                    let d = g.reshaped(val(0).shape())?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::Gsp => {
                if need(0) {
                    let x = val(0);
                    let (b, c, h, t) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let hf = T::from_usize(h);
                    let means = &node.aux[0];
                    let std_floor = T::from_f64(1e-5);
                    let mut gx = vec![T::zero(); x.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            for ti in 0..t {
                                let gm = g.data()[(bi * t + ti) * 2 * c + ci];
                                let gs = g.data()[(bi * t + ti) * 2 * c + c + ci];
                                let mean = means.data()[(bi * c + ci) * t + ti];
                                let std = node.value.data()[(bi * t + ti) * 2 * c + c + ci];
                                let denom = if std > std_floor { std } else { std_floor };
                                for hi in 0..h {
                                    let idx = ((bi * c + ci) * h + hi) * t + ti;
                                    let centered = x.data()[idx] - mean;
                                    gx[idx] += gm / hf + gs * centered / (hf * denom);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(x.shape(), gx)?)?;
                }
            }
            Op::Dropout => {
                if need(0) {
                    let d = elementwise(g, &node.aux[0], |gv, m| gv * m)?;
                    Self::accumulate(grads, ins[0], d)?;
                }
            }
            Op::PairConcat => {
                let bank = val(0);
                let frames = val(1);
                let (b, n, d) = (bank.dim(0), bank.dim(1), bank.dim(2));
                let t = frames.dim(1);
                if need(0) {
                    let mut gb = vec![T::zero(); bank.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            for ti in 0..t {
                                let base = ((bi * n + ni) * t + ti) * 2 * d;
                                for di in 0..d {
                                    gb[(bi * n + ni) * d + di] += g.data()[base + di];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], Tensor::new(bank.shape(), gb)?)?;
                }
                if need(1) {
                    let mut gf = vec![T::zero(); frames.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            for ti in 0..t {
                                let base = ((bi * n + ni) * t + ti) * 2 * d;
                                for di in 0..d {
                                    gf[(bi * t + ti) * d + di] += g.data()[base + d + di];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, ins[1], Tensor::new(frames.shape(), gf)?)?;
                }
            }
            Op::Bce { eps } => {
                if need(0) {
                    let p = val(0);
                    let y = val(1);
                    let w = val(2);
                    let wsum: T = w.data().iter().copied().sum();
                    let one = T::one();
                    let gs = g.item();
                    let d: Vec<T> = p
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(w.data())
                        .map(|((&pv, &yv), &wv)| {
                            if wv == T::zero() || pv < *eps || pv > one - *eps {
                                T::zero()
                            } else {
                                gs * wv * (pv - yv) / (pv * (one - pv)) / wsum
                            }
                        })
                        .collect();
                    Self::accumulate(grads, ins[0], Tensor::new(p.shape(), d)?)?;
                }
            }
            Op::MeanAll => {
                if need(0) {
                    let x = val(0);
                    let k = g.item() / T::from_usize(x.len());
                    Self::accumulate(grads, ins[0], Tensor::full(x.shape(), k))?;
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn elementwise<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(err!(Shape, "elementwise {:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // stride of output axis i in the input layout
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![T::zero(); x.len()];
    if rank == 0 {
        data[0] = x.data()[0];
        return Tensor::new(&out_shape, data);
    }
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in data.iter_mut() {
        *slot = x.data()[src];
        // odometer increment over the output shape
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src += strides[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            src -= strides[axis] * out_shape[axis];
            coords[axis] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParameterStore;
    use alloc::format;
    use rand::Rng;

    /// Central-difference gradient of a scalar-valued rebuildable function.
    pub(crate) fn numeric_grad(
        build: &mut dyn FnMut(&[f64]) -> f64,
        x0: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        let mut xp = x0.to_vec();
        for i in 0..x0.len() {
            xp[i] = x0[i] + eps;
            let fp = build(&xp);
            xp[i] = x0[i] - eps;
            let fm = build(&xp);
            xp[i] = x0[i];
            g[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    pub(crate) fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = n.abs().max(1.0);
            let rel = (a - n).abs() / denom;
            assert!(
                rel < tol,
                "{what}: grad[{i}] analytic {a} vs numeric {n} (rel {rel:.3e})"
            );
        }
    }

    /// Gradcheck harness: builds the op twice per perturbed coordinate.
    fn check_unary(
        name: &str,
        shape: &[usize],
        seed: u64,
        f: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let mut build = |xs: &[f64]| {
            let mut g = Graph::<f64>::new();
            let x = g.input_grad(Tensor::new(shape, xs.to_vec()).unwrap()).unwrap();
            let y = f(&mut g, x);
            let m = g.mean_all(y).unwrap();
            g.value(m).item()
        };
        let numeric = numeric_grad(&mut build, &x0, 1e-5);
        let mut g = Graph::<f64>::new();
        let x = g.input_grad(Tensor::new(shape, x0.clone()).unwrap()).unwrap();
        let y = f(&mut g, x);
        let m = g.mean_all(y).unwrap();
        let grads = g.backward(m).unwrap();
        let analytic = grads.node(x).unwrap().data().to_vec();
        assert_close(&analytic, &numeric, 1e-4, &format!("{name} seed {seed}"));
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        for seed in 0..20 {
            check_unary("relu", &[3, 4], seed, &|g, x| {
                // shift away from the kink so finite differences are clean
                let s = g.scale(x, 1.0).unwrap();
                g.relu(s).unwrap()
            });
            check_unary("sigmoid", &[3, 4], seed, &|g, x| g.sigmoid(x).unwrap());
            check_unary("tanh", &[3, 4], seed, &|g, x| g.tanh(x).unwrap());
            check_unary("softmax", &[3, 5], seed, &|g, x| g.softmax(x).unwrap());
            check_unary("scale", &[2, 3], seed, &|g, x| g.scale(x, -0.7).unwrap());
        }
    }

    #[test]
    fn gradcheck_binary_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..20 {
            let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // d(loss)/d(a) for mul and matmul combined chain
            let mut build = |xs: &[f64]| {
                let mut g = Graph::<f64>::new();
                let a = g.input_grad(Tensor::new(&[2, 3], xs.to_vec()).unwrap()).unwrap();
                let b = g.input(Tensor::new(&[2, 3], b0.clone()).unwrap()).unwrap();
                let w = g.input(Tensor::new(&[3, 4], w0.clone()).unwrap()).unwrap();
                let m = g.mul(a, b).unwrap();
                let y = g.matmul(m, w).unwrap();
                let s = g.mean_all(y).unwrap();
                g.value(s).item()
            };
            let numeric = numeric_grad(&mut build, &a0, 1e-5);
            let mut g = Graph::<f64>::new();
            let a = g.input_grad(Tensor::new(&[2, 3], a0.clone()).unwrap()).unwrap();
            let b = g.input(Tensor::new(&[2, 3], b0.clone()).unwrap()).unwrap();
            let w = g.input(Tensor::new(&[3, 4], w0.clone()).unwrap()).unwrap();
            let m = g.mul(a, b).unwrap();
            let y = g.matmul(m, w).unwrap();
            let s = g.mean_all(y).unwrap();
            let grads = g.backward(s).unwrap();
            assert_close(
                grads.node(a).unwrap().data(),
                &numeric,
                1e-4,
                &format!("mul+matmul seed {seed}"),
            );
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half_and_softmax_singleton_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
        let s = g.input(Tensor::new(&[3, 1], vec![4.2, -1.0, 0.3]).unwrap()).unwrap();
        let sm = g.softmax(s).unwrap();
        for &v in g.value(sm).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[8, 5], data).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..8 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nonfinite_forward_is_reported_with_op_name() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[2], vec![1.0e38, 1.0e38]).unwrap()).unwrap();
        let err = g.mul(x, x).unwrap_err();
        assert_eq!(err, Error::Numeric("mul".into()));
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register("w", Tensor::new(&[2], vec![0.3, -0.8]).unwrap(), true)
            .unwrap();
        let mut g = Graph::<f64>::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap(); // y = w^2
        let s = g.mean_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        let gw = grads.node(w1).unwrap();
        // d mean(w*w) / dw = 2w / n
        assert!((gw.data()[0] - 0.3).abs() < 1e-12);
        assert!((gw.data()[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn permute_roundtrip_and_concat_narrow() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let a = g.input(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let b = g.input(Tensor::new(&[2, 1], vec![9., 8.]).unwrap()).unwrap();
        let c = g.concat(1, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
        let n = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(n).data(), &[9., 8.]);
    }

    #[test]
    fn bce_known_values() {
        // constant 0.5 prediction: loss = ln 2 regardless of labels
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::full(&[4, 2], 0.5)).unwrap();
        let y = g
            .input(Tensor::new(&[4, 2], vec![1., 0., 1., 1., 0., 0., 1., 0.]).unwrap())
            .unwrap();
        let w = g.input(Tensor::full(&[4, 2], 1.0)).unwrap();
        let l = g.bce_loss(p, y, w, 1e-7).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);

        // single entry: -ln 0.8
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::scalar(0.8)).unwrap();
        let y = g.input(Tensor::scalar(1.0)).unwrap();
        let w = g.input(Tensor::scalar(1.0)).unwrap();
        let l = g.bce_loss(p, y, w, 1e-7).unwrap();
        assert!((g.value(l).item() - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let p0: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
            let y0: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let w0: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
            if w0.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let mut build = |xs: &[f64]| {
                let mut g = Graph::<f64>::new();
                let p = g.input_grad(Tensor::new(&[3, 4], xs.to_vec()).unwrap()).unwrap();
                let y = g.input(Tensor::new(&[3, 4], y0.clone()).unwrap()).unwrap();
                let w = g.input(Tensor::new(&[3, 4], w0.clone()).unwrap()).unwrap();
                let l = g.bce_loss(p, y, w, 1e-7).unwrap();
                g.value(l).item()
            };
            let numeric = numeric_grad(&mut build, &p0, 1e-6);
            let mut g = Graph::<f64>::new();
            let p = g.input_grad(Tensor::new(&[3, 4], p0.clone()).unwrap()).unwrap();
            let y = g.input(Tensor::new(&[3, 4], y0).unwrap()).unwrap();
            let w = g.input(Tensor::new(&[3, 4], w0).unwrap()).unwrap();
            let l = g.bce_loss(p, y, w, 1e-7).unwrap();
            let grads = g.backward(l).unwrap();
            assert_close(
                grads.node(p).unwrap().data(),
                &numeric,
                1e-6,
                &format!("bce seed {seed}"),
            );
        }
    }
}
