//! Multi-channel extension: per-position multi-head attention across the
//! channel axis of stacked per-channel (target, frame) pairs, followed by
//! channel-average pooling back to the single-channel layout.
//!
//! In the reducing configuration (desk default) the residual branches are
//! zero-initialized, so an untrained stack passes channel data through
//! unchanged and the C=1 path coincides with the single-channel model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backend::{concat_speaker_frames, TargetSpeakerBank};
use crate::error::{err, Result};
use crate::frontend::FrameEmbeddings;
use crate::graph::{Graph, NodeId};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Stack per-channel banks and frames into `(T, N, C, 2D)`.
pub fn build_channel_stack<T: Scalar>(
    banks: &[TargetSpeakerBank<T>],
    frames: &[FrameEmbeddings<T>],
) -> Result<Tensor<T>> {
    if banks.is_empty() || banks.len() != frames.len() {
        return Err(err!(
            Shape,
            "need one bank per channel: {} banks, {} frame sets",
            banks.len(),
            frames.len()
        ));
    }
    let c = banks.len();
    let (n, d) = (banks[0].num_speakers(), banks[0].dim());
    let t = frames[0].num_frames();
    for (i, (b, f)) in banks.iter().zip(frames).enumerate() {
        if b.num_speakers() != n || b.dim() != d || f.num_frames() != t || f.dim() != d {
            return Err(err!(Shape, "channel {i} shapes disagree"));
        }
    }
    let mut data = vec![T::zero(); t * n * c * 2 * d];
    for (ci, (b, f)) in banks.iter().zip(frames).enumerate() {
        for ni in 0..n {
            for ti in 0..t {
                let base = ((ti * n + ni) * c + ci) * 2 * d;
                data[base..base + d].copy_from_slice(b.row(ni));
                data[base + d..base + 2 * d].copy_from_slice(f.frame(ti));
            }
        }
    }
    Tensor::new(&[t, n, c, 2 * d], data)
}

/// Arithmetic mean over the channel axis: `(T, N, C, 2D)` -> `(T, N, 2D)`.
pub fn channel_average_pool<T: Scalar>(attended: &Tensor<T>) -> Result<Tensor<T>> {
    if attended.rank() != 4 {
        return Err(err!(Shape, "expected (T, N, C, 2D), got {:?}", attended.shape()));
    }
    let (t, n, c, dd) = (
        attended.dim(0),
        attended.dim(1),
        attended.dim(2),
        attended.dim(3),
    );
    let cf = T::from_usize(c);
    let mut data = vec![T::zero(); t * n * dd];
    for ti in 0..t {
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ti * n + ni) * c + ci) * dd;
                for di in 0..dd {
                    data[(ti * n + ni) * dd + di] += attended.data()[base + di];
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = *v / cf;
    }
    Tensor::new(&[t, n, dd], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Zero-initialize the residual branches so the untrained stack is an
    /// identity map and the C=1 reduction is exact.
    pub reducing_init: bool,
}

impl McConfig {
    /// Desk preset mirrors the reduced multi-channel encoder: 3 layers,
    /// 4 heads.
    pub fn desk() -> Self {
        Self {
            layers: 3,
            heads: 4,
            ff_hidden: 256,
            reducing_init: true,
        }
    }
}

struct CrossChannelLayer {
    ln1: LayerNorm,
    mha: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// The cross-channel attention stack.
pub struct McHead {
    pub config: McConfig,
    pub pair_dim: usize,
    layers: Vec<CrossChannelLayer>,
}

impl McHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: McConfig,
        pair_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || pair_dim % config.heads != 0 {
            return Err(err!(
                Config,
                "cross-channel heads {} must divide pair dim {}",
                config.heads,
                pair_dim
            ));
        }
        let mut layers = Vec::new();
        for i in 0..config.layers {
            let name = format!("{prefix}/xc{i}");
            let mha = if config.reducing_init {
                MultiHeadAttention::new_zero_out(store, &format!("{name}/mha"), pair_dim, config.heads, rng)?
            } else {
                MultiHeadAttention::new(store, &format!("{name}/mha"), pair_dim, config.heads, rng)?
            };
            let ffn = if config.reducing_init {
                FeedForward::new_zero_out(store, &format!("{name}/ffn"), pair_dim, config.ff_hidden, rng)?
            } else {
                FeedForward::new(store, &format!("{name}/ffn"), pair_dim, config.ff_hidden, rng)?
            };
            layers.push(CrossChannelLayer {
                ln1: LayerNorm::new(store, &format!("{name}/ln1"), pair_dim)?,
                mha,
                ln2: LayerNorm::new(store, &format!("{name}/ln2"), pair_dim)?,
                ffn,
            });
        }
        Ok(Self {
            config,
            pair_dim,
            layers,
        })
    }

    /// Graph forward over `(R, C, 2D)` rows, attention across C.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        mut x: NodeId,
    ) -> Result<NodeId> {
        for layer in &self.layers {
            let n = layer.ln1.forward(g, ps, x)?;
            let a = layer.mha.forward(g, ps, n)?;
            x = g.add(x, a)?;
            let n = layer.ln2.forward(g, ps, x)?;
            let f = layer.ffn.forward(g, ps, n)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Spec-shaped surface: `(T, N, C, 2D)` stack in, same shape out.
    pub fn cross_channel_attention<T: Scalar>(
        &self,
        ps: &ParameterStore<T>,
        stack: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if stack.rank() != 4 || stack.dim(3) != self.pair_dim {
            return Err(err!(
                Shape,
                "stack {:?} vs pair dim {}",
                stack.shape(),
                self.pair_dim
            ));
        }
        let (t, n, c, dd) = (stack.dim(0), stack.dim(1), stack.dim(2), stack.dim(3));
        let mut g = Graph::<T>::new();
        let x = g.input(stack.reshaped(&[t * n, c, dd])?)?;
        let y = self.forward(&mut g, ps, x)?;
        g.value(y).reshaped(&[t, n, c, dd])
    }
}
