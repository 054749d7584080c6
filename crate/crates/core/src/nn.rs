//! Parameter store and the layer kit built on the autodiff graph.
//!
//! Layers hold parameter *names* and dimensions only; values live in the
//! [`ParameterStore`], so the same layer definitions run in f32 or f64.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{err, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::kernels::Conv2dSpec;
use crate::tensor::{Scalar, Tensor};

/// One named tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub(crate) adam_m: Option<Tensor<T>>,
    pub(crate) adam_v: Option<Tensor<T>>,
    pub(crate) step: u64,
}

/// Named parameters and buffers, iterated in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(err!(Config, "duplicate parameter name {name}"));
        }
        self.names.push(name.to_string());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable,
                adam_m: None,
                adam_v: None,
                step: 0,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| err!(Config, "unknown parameter {name}"))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| err!(Config, "unknown parameter {name}"))
    }

    /// Overwrite a tensor value, keeping shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.tensor.shape() != value.shape() {
            return Err(err!(
                Shape,
                "parameter {name}: stored {:?} vs new {:?}",
                e.tensor.shape(),
                value.shape()
            ));
        }
        e.tensor = value;
        Ok(())
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Names in registration order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.names.iter().map(move |n| (n, &self.entries[n]))
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, e) in self.iter() {
            out.register(name, e.tensor.cast(), e.trainable).unwrap();
        }
        out
    }

    /// Collect named gradients for this graph's parameters.
    pub fn collect_param_grads(graph: &Graph<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &id) in graph.param_nodes() {
            if let Some(g) = grads.node(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Apply buffer updates recorded during a training forward pass.
    pub fn apply_buffer_updates(&mut self, updates: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in updates {
            self.set_value(name, value.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, rng, false)
    }

    /// Zero-initialized weights; used for residual paths that must start as
    /// the identity.
    pub fn new_zeroed<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, rng, true)
    }

    fn with_init<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
        zero: bool,
    ) -> Result<Self> {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let std = T::from_f64(1.0 / (in_dim as f64).sqrt());
        let wt = if zero {
            let _ = Tensor::<T>::randn(&[1], T::one(), rng); // keep rng stream stable
            Tensor::zeros(&[in_dim, out_dim])
        } else {
            Tensor::randn(&[in_dim, out_dim], std, rng)
        };
        store.register(&w, wt, true)?;
        store.register(&b, Tensor::zeros(&[out_dim]), true)?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}/gamma");
        let beta = format!("{name}/beta");
        store.register(&gamma, Tensor::full(&[dim], T::one()), true)?;
        store.register(&beta, Tensor::zeros(&[dim]), true)?;
        Ok(Self {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = g.param(ps, &self.gamma)?;
        let beta = g.param(ps, &self.beta)?;
        g.layer_norm(x, gamma, beta, T::from_f64(self.eps))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = format!("{name}/gamma");
        let beta = format!("{name}/beta");
        let mean = format!("{name}/running_mean");
        let var = format!("{name}/running_var");
        store.register(&gamma, Tensor::full(&[channels], T::one()), true)?;
        store.register(&beta, Tensor::zeros(&[channels]), true)?;
        store.register(&mean, Tensor::zeros(&[channels]), false)?;
        store.register(&var, Tensor::full(&[channels], T::one()), false)?;
        Ok(Self {
            gamma,
            beta,
            mean,
            var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = g.param(ps, &self.gamma)?;
        let beta = g.param(ps, &self.beta)?;
        let rm = ps.get(&self.mean)?.tensor.clone();
        let rv = ps.get(&self.var)?.tensor.clone();
        g.batch_norm(
            x,
            gamma,
            beta,
            &rm,
            &rv,
            &self.mean,
            &self.var,
            T::from_f64(self.eps),
            T::from_f64(self.momentum),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Conv2dSpec {
            c_in,
            c_out,
            kh: kernel.0,
            kw: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
        };
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let fan_in = c_in * kernel.0 * kernel.1;
        let std = T::from_f64((2.0 / fan_in as f64).sqrt());
        store.register(&w, Tensor::randn(&[c_out, c_in, kernel.0, kernel.1], std, rng), true)?;
        store.register(&b, Tensor::zeros(&[c_out]), true)?;
        Ok(Self { w, b, spec })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: String,
    pub b: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = format!("{name}/w");
        let b = format!("{name}/b");
        let std = T::from_f64((2.0 / (c_in * k) as f64).sqrt());
        store.register(&w, Tensor::randn(&[c_out, c_in, k], std, rng), true)?;
        store.register(&b, Tensor::zeros(&[c_out]), true)?;
        Ok(Self {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.conv1d(x, w, b, self.k, self.stride, self.pad)
    }
}

/// Multi-head self-attention over the time axis of `(B, T, dim)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, dim, heads, rng, false)
    }

    /// Output projection zero-initialized so the residual branch starts as a
    /// no-op (used by the cross-channel layer's reducing configuration).
    pub fn new_zero_out<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, dim, heads, rng, true)
    }

    fn with_init<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(err!(Config, "attention heads {heads} must divide dim {dim}"));
        }
        let q = Linear::new(store, &format!("{name}/q"), dim, dim, rng)?;
        let k = Linear::new(store, &format!("{name}/k"), dim, dim, rng)?;
        let v = Linear::new(store, &format!("{name}/v"), dim, dim, rng)?;
        let o = if zero_out {
            Linear::new_zeroed(store, &format!("{name}/o"), dim, dim, rng)?
        } else {
            Linear::new(store, &format!("{name}/o"), dim, dim, rng)?
        };
        Ok(Self {
            q,
            k,
            v,
            o,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(err!(Shape, "attention input {:?}, dim {}", shape, self.dim));
        }
        let (b, t) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let split = |g: &mut Graph<T>, n: NodeId| -> Result<NodeId> {
            let r = g.reshape(n, &[b, t, self.heads, dh])?;
            let p = g.permute(r, &[0, 2, 1, 3])?;
            g.reshape(p, &[b * self.heads, t, dh])
        };
        let q = self.q.forward(g, ps, x)?;
        let k = self.k.forward(g, ps, x)?;
        let v = self.v.forward(g, ps, x)?;
        let qh = split(g, q)?;
        let kh = split(g, k)?;
        let vh = split(g, v)?;
        let kt = g.permute(kh, &[0, 2, 1])?;
        let logits = g.bmm(qh, kt)?;
        let scaled = g.scale(logits, T::from_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(scaled)?;
        let ctx = g.bmm(attn, vh)?;
        let r = g.reshape(ctx, &[b, self.heads, t, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        let merged = g.reshape(p, &[b, t, self.dim])?;
        self.o.forward(g, ps, merged)
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lin1: Linear::new(store, &format!("{name}/lin1"), dim, hidden, rng)?,
            lin2: Linear::new(store, &format!("{name}/lin2"), hidden, dim, rng)?,
        })
    }

    /// Second projection zero-initialized (identity residual branch).
    pub fn new_zero_out<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lin1: Linear::new(store, &format!("{name}/lin1"), dim, hidden, rng)?,
            lin2: Linear::new_zeroed(store, &format!("{name}/lin2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.lin1.forward(g, ps, x)?;
        let a = g.relu(h)?;
        self.lin2.forward(g, ps, a)
    }
}

/// Pre-norm transformer encoder layer: attention and feed-forward residual
/// branches with optional dropout.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub mha: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}/ln1"), dim)?,
            mha: MultiHeadAttention::new(store, &format!("{name}/mha"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}/ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}/ffn"), dim, ff_hidden, rng)?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = T::from_f64(self.dropout);
        let n = self.ln1.forward(g, ps, x)?;
        let a = self.mha.forward(g, ps, n)?;
        let a = g.dropout(a, p)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, n)?;
        let f = g.dropout(f, p)?;
        g.add(x, f)
    }
}

/// Bidirectional gated recurrence (LSTM cells run in both directions,
/// outputs concatenated). Gate layout in the 4H axis is input, forget,
/// cell, output; forget biases start at one.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub in_dim: usize,
    pub hidden: usize,
    fwd: LstmDir,
    bwd: LstmDir,
}

#[derive(Debug, Clone)]
struct LstmDir {
    w_ih: String,
    w_hh: String,
    bias: String,
}

impl BiLstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mk = |store: &mut ParameterStore<T>, dir: &str, rng: &mut R| -> Result<LstmDir> {
            let w_ih = format!("{name}/{dir}/w_ih");
            let w_hh = format!("{name}/{dir}/w_hh");
            let bias = format!("{name}/{dir}/b");
            let std = T::from_f64(1.0 / (hidden as f64).sqrt());
            store.register(&w_ih, Tensor::randn(&[in_dim, 4 * hidden], std, rng), true)?;
            store.register(&w_hh, Tensor::randn(&[hidden, 4 * hidden], std, rng), true)?;
            let mut b = vec![T::zero(); 4 * hidden];
            for v in b.iter_mut().take(2 * hidden).skip(hidden) {
                *v = T::one();
            }
            store.register(&bias, Tensor::new(&[4 * hidden], b)?, true)?;
            Ok(LstmDir { w_ih, w_hh, bias })
        };
        Ok(Self {
            in_dim,
            hidden,
            fwd: mk(store, "fwd", rng)?,
            bwd: mk(store, "bwd", rng)?,
        })
    }

    fn run_dir<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
        dir: &LstmDir,
        reverse: bool,
    ) -> Result<Vec<NodeId>> {
        let (b, t) = {
            let v = g.value(x);
            (v.dim(0), v.dim(1))
        };
        let h_dim = self.hidden;
        let w_ih = g.param(ps, &dir.w_ih)?;
        let w_hh = g.param(ps, &dir.w_hh)?;
        let bias = g.param(ps, &dir.bias)?;
        let mut h = g.input(Tensor::zeros(&[b, h_dim]))?;
        let mut c = g.input(Tensor::zeros(&[b, h_dim]))?;
        let mut outs = vec![0usize; t];
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            let xt = g.narrow(x, 1, ti, 1)?;
            let xt = g.reshape(xt, &[b, self.in_dim])?;
            let gi = g.matmul(xt, w_ih)?;
            let gh = g.matmul(h, w_hh)?;
            let gates = g.add(gi, gh)?;
            let gates = g.add_bias(gates, bias)?;
            let i_g = g.narrow(gates, 1, 0, h_dim)?;
            let f_g = g.narrow(gates, 1, h_dim, h_dim)?;
            let c_g = g.narrow(gates, 1, 2 * h_dim, h_dim)?;
            let o_g = g.narrow(gates, 1, 3 * h_dim, h_dim)?;
            let i_s = g.sigmoid(i_g)?;
            let f_s = g.sigmoid(f_g)?;
            let c_t = g.tanh(c_g)?;
            let o_s = g.sigmoid(o_g)?;
            let keep = g.mul(f_s, c)?;
            let write = g.mul(i_s, c_t)?;
            c = g.add(keep, write)?;
            let c_act = g.tanh(c)?;
            h = g.mul(o_s, c_act)?;
            outs[ti] = g.reshape(h, &[b, 1, h_dim])?;
        }
        Ok(outs)
    }

    /// `(B, T, in)` -> `(B, T, 2H)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let v = g.value(x);
        if v.rank() != 3 || v.dim(2) != self.in_dim {
            return Err(err!(Shape, "bilstm input {:?}, in_dim {}", v.shape(), self.in_dim));
        }
        let f = self.run_dir(g, ps, x, &self.fwd.clone(), false)?;
        let bwd = self.run_dir(g, ps, x, &self.bwd.clone(), true)?;
        let f_seq = g.concat(1, &f)?;
        let b_seq = g.concat(1, &bwd)?;
        g.concat(2, &[f_seq, b_seq])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradcheck_params(
        name: &str,
        store: &ParameterStore<f64>,
        build: &dyn Fn(&mut Graph<f64>, &ParameterStore<f64>) -> NodeId,
        tol: f64,
    ) {
        // analytic
        let mut g = Graph::<f64>::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss).unwrap();
        let analytic = ParameterStore::collect_param_grads(&g, &grads);
        // numeric per trainable parameter
        for (pname, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let a = analytic
                .get(pname)
                .unwrap_or_else(|| panic!("{name}: no grad for {pname}"));
            let base = entry.tensor.data().to_vec();
            for i in (0..base.len()).step_by(base.len().div_ceil(5).max(1)) {
                let eps = 1e-5;
                let mut eval = |v: f64| {
                    let mut s2 = store.clone();
                    let mut t = base.clone();
                    t[i] = v;
                    s2.set_value(pname, Tensor::new(entry.tensor.shape(), t).unwrap())
                        .unwrap();
                    let mut g2 = Graph::<f64>::new();
                    let l = build(&mut g2, &s2);
                    g2.value(l).item()
                };
                let fd = (eval(base[i] + eps) - eval(base[i] - eps)) / (2.0 * eps);
                let an = a.data()[i];
                let rel = (an - fd).abs() / fd.abs().max(1.0);
                assert!(
                    rel < tol,
                    "{name}: {pname}[{i}] analytic {an} vs fd {fd} (rel {rel:.2e})"
                );
            }
        }
    }

    #[test]
    fn gradcheck_linear_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 3).unwrap();
        let x0: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.2).collect();
        let build = move |g: &mut Graph<f64>, ps: &ParameterStore<f64>| {
            let x = g.input(Tensor::new(&[2, 4], x0.clone()).unwrap()).unwrap();
            let y = lin.forward(g, ps, x).unwrap();
            let n = ln.forward(g, ps, y).unwrap();
            let s = g.sigmoid(n).unwrap();
            g.mean_all(s).unwrap()
        };
        gradcheck_params("linear+ln", &store, &build, 1e-4);
    }

    #[test]
    fn gradcheck_conv_and_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, (3, 3), (2, 2), (1, 1), &mut rng).unwrap();
        let bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        let x0: Vec<f64> = (0..2 * 2 * 6 * 8).map(|i| ((i * 31 % 17) as f64) * 0.11 - 0.9).collect();
        let build = move |g: &mut Graph<f64>, ps: &ParameterStore<f64>| {
            let x = g.input(Tensor::new(&[2, 2, 6, 8], x0.clone()).unwrap()).unwrap();
            let y = conv.forward(g, ps, x).unwrap();
            let n = bn.forward(g, ps, y).unwrap();
            let r = g.relu(n).unwrap();
            g.mean_all(r).unwrap()
        };
        // batch-norm path needs training mode for batch statistics
        let mut g = Graph::<f64>::training(0);
        let loss = build(&mut g, &store);
        let grads = g.backward(loss).unwrap();
        let analytic = ParameterStore::collect_param_grads(&g, &grads);
        for (pname, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let a = &analytic[pname];
            let base = entry.tensor.data().to_vec();
            for i in (0..base.len()).step_by((base.len() / 4).max(1)) {
                let eps = 1e-5;
                let mut eval = |v: f64| {
                    let mut s2 = store.clone();
                    let mut t = base.clone();
                    t[i] = v;
                    s2.set_value(pname, Tensor::new(entry.tensor.shape(), t).unwrap()).unwrap();
                    let mut g2 = Graph::<f64>::training(0);
                    let l = build(&mut g2, &s2);
                    g2.value(l).item()
                };
                let fd = (eval(base[i] + eps) - eval(base[i] - eps)) / (2.0 * eps);
                let an = a.data()[i];
                assert!(
                    (an - fd).abs() / fd.abs().max(1.0) < 1e-4,
                    "conv+bn {pname}[{i}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_attention_feedforward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParameterStore::<f64>::new();
        let enc = EncoderLayer::new(&mut store, "enc", 8, 2, 16, 0.0, &mut rng).unwrap();
        let x0: Vec<f64> = (0..2 * 5 * 8).map(|i| ((i * 7 % 13) as f64) * 0.17 - 1.0).collect();
        let build = move |g: &mut Graph<f64>, ps: &ParameterStore<f64>| {
            let x = g.input(Tensor::new(&[2, 5, 8], x0.clone()).unwrap()).unwrap();
            let y = enc.forward(g, ps, x).unwrap();
            let s = g.sigmoid(y).unwrap();
            g.mean_all(s).unwrap()
        };
        gradcheck_params("encoder-layer", &store, &build, 1e-4);
    }

    #[test]
    fn gradcheck_bilstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParameterStore::<f64>::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        let x0: Vec<f64> = (0..2 * 6 * 3).map(|i| ((i * 11 % 19) as f64) * 0.13 - 1.1).collect();
        let build = move |g: &mut Graph<f64>, ps: &ParameterStore<f64>| {
            let x = g.input(Tensor::new(&[2, 6, 3], x0.clone()).unwrap()).unwrap();
            let y = lstm.forward(g, ps, x).unwrap();
            let s = g.tanh(y).unwrap();
            g.mean_all(s).unwrap()
        };
        gradcheck_params("bilstm", &store, &build, 1e-4);
    }

    #[test]
    fn batch_norm_updates_running_stats_in_training_only() {
        let mut store = ParameterStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::new(&[1, 2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]).unwrap();

        let mut g = Graph::<f32>::new();
        let xi = g.input(x.clone()).unwrap();
        bn.forward(&mut g, &store, xi).unwrap();
        assert!(g.buffer_updates.is_empty());

        let mut g = Graph::<f32>::training(0);
        let xi = g.input(x).unwrap();
        bn.forward(&mut g, &store, xi).unwrap();
        assert_eq!(g.buffer_updates.len(), 2);
        store.apply_buffer_updates(&g.buffer_updates).unwrap();
        let rm = &store.get("bn/running_mean").unwrap().tensor;
        // momentum 0.1 toward batch mean 2.5 / -2.5
        assert!((rm.data()[0] - 0.25).abs() < 1e-6);
        assert!((rm.data()[1] + 0.25).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::<f64>::new();
        let lin = Linear::new(&mut store, "front/lin", 3, 2, &mut rng).unwrap();
        store.set_trainable_prefix("front/", false);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let y = lin.forward(&mut g, &store, x).unwrap();
        let s = g.sigmoid(y).unwrap();
        let l = g.mean_all(s).unwrap();
        let grads = g.backward(l).unwrap();
        let map = ParameterStore::collect_param_grads(&g, &grads);
        assert!(map.is_empty());
    }
}
