//! Target-speaker detection head.
//!
//! Each target embedding is paired with every frame embedding; a shared
//! per-speaker encoder scores each pair sequence, a joint recurrent layer
//! mixes information across speakers, and a sigmoid head emits per-frame
//! per-speaker existence probabilities. The speaker axis order is fixed for
//! the life of a stream: output column n always belongs to bank row n.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{err, Result};
use crate::frontend::{FrameEmbeddings, FRAME_RESOLUTION_S};
use crate::graph::{Graph, NodeId};
use crate::nn::{BiLstm, EncoderLayer, Linear, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Ordered N x D matrix of target-speaker embeddings. Rows at or beyond
/// `active_count` are all-zero placeholder slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpeakerBank<T> {
    pub values: Tensor<T>,
    pub active_count: usize,
}

impl<T: Scalar> TargetSpeakerBank<T> {
    pub fn zeros(num_speakers: usize, dim: usize) -> Self {
        Self {
            values: Tensor::zeros(&[num_speakers, dim]),
            active_count: 0,
        }
    }

    pub fn new(values: Tensor<T>, active_count: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(err!(Shape, "bank must be (N, D), got {:?}", values.shape()));
        }
        if active_count > values.dim(0) {
            return Err(err!(Config, "active count exceeds speaker slots"));
        }
        Ok(Self {
            values,
            active_count,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.values.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }

    pub fn row(&self, n: usize) -> &[T] {
        self.values.row(n)
    }
}

/// `(T, N)` per-frame speaker existence probabilities in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMatrix<T> {
    pub values: Tensor<T>,
    pub frame_resolution_s: f64,
}

impl<T: Scalar> ActivityMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(err!(Shape, "activity must be (T, N), got {:?}", values.shape()));
        }
        Ok(Self {
            values,
            frame_resolution_s: FRAME_RESOLUTION_S,
        })
    }
    pub fn num_frames(&self) -> usize {
        self.values.dim(0)
    }
    pub fn num_speakers(&self) -> usize {
        self.values.dim(1)
    }
    pub fn prob(&self, t: usize, n: usize) -> T {
        self.values.at2(t, n)
    }
    /// `>= thres` binarization.
    pub fn binarize(&self, thres: T) -> Tensor<T> {
        self.values
            .map(|v| if v >= thres { T::one() } else { T::zero() })
    }
}

/// Pair target embeddings with frame embeddings: `(N, D)` + `(T, D)` ->
/// `(N, T, 2D)` where `[n, t, 0..D]` is bank row n and `[n, t, D..2D]` is
/// frame t.
pub fn concat_speaker_frames<T: Scalar>(
    bank: &TargetSpeakerBank<T>,
    frames: &FrameEmbeddings<T>,
) -> Result<Tensor<T>> {
    if bank.dim() != frames.dim() {
        return Err(err!(
            Shape,
            "bank dim {} vs frame dim {}",
            bank.dim(),
            frames.dim()
        ));
    }
    let (n, d, t) = (bank.num_speakers(), bank.dim(), frames.num_frames());
    let mut data = vec![T::zero(); n * t * 2 * d];
    for ni in 0..n {
        for ti in 0..t {
            let base = (ni * t + ti) * 2 * d;
            data[base..base + d].copy_from_slice(bank.row(ni));
            data[base + d..base + 2 * d].copy_from_slice(frames.frame(ti));
        }
    }
    Tensor::new(&[n, t, 2 * d], data)
}

/// How the joint layer mixes speakers.
#[derive(Debug, Clone, PartialEq)]
pub enum JointMode {
    /// Shared per-speaker projection plus a symmetric (mean) context; exactly
    /// permutation-equivariant. Desk default.
    Symmetric { ctx_dim: usize, lstm_hidden: usize },
    /// Feature-axis concatenation of all speakers in bank order before the
    /// recurrent layer; order-dependent weights.
    Concat { lstm_hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub num_speakers: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub joint: JointMode,
}

impl BackendConfig {
    /// Desk preset: 2 encoder layers, 4 heads, symmetric joint mixing.
    pub fn desk(num_speakers: usize, embed_dim: usize) -> Self {
        Self {
            num_speakers,
            embed_dim,
            layers: 2,
            heads: 4,
            ff_hidden: 256,
            dropout: 0.0,
            joint: JointMode::Symmetric {
                ctx_dim: 64,
                lstm_hidden: 64,
            },
        }
    }

    /// Full-scale preset: 6 encoder layers, 8 heads, 512-dim feed-forward,
    /// dropout 0.1, concatenating joint layer with a 256-unit recurrence.
    pub fn paper(num_speakers: usize) -> Self {
        Self {
            num_speakers,
            embed_dim: 256,
            layers: 6,
            heads: 8,
            ff_hidden: 512,
            dropout: 0.1,
            joint: JointMode::Concat { lstm_hidden: 256 },
        }
    }
}

enum Joint {
    Symmetric {
        proj: Linear,
        lstm: BiLstm,
        out: Linear,
    },
    Concat {
        lstm: BiLstm,
        out: Linear,
    },
}

pub struct Backend {
    pub config: BackendConfig,
    encoder: Vec<EncoderLayer>,
    joint: Joint,
}

impl Backend {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: BackendConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = 2 * config.embed_dim;
        let mut encoder = Vec::new();
        for i in 0..config.layers {
            encoder.push(EncoderLayer::new(
                store,
                &format!("{prefix}/enc{i}"),
                dim,
                config.heads,
                config.ff_hidden,
                config.dropout,
                rng,
            )?);
        }
        let joint = match config.joint {
            JointMode::Symmetric { ctx_dim, lstm_hidden } => Joint::Symmetric {
                proj: Linear::new(store, &format!("{prefix}/joint/proj"), dim, ctx_dim, rng)?,
                lstm: BiLstm::new(
                    store,
                    &format!("{prefix}/joint/lstm"),
                    dim + ctx_dim,
                    lstm_hidden,
                    rng,
                )?,
                out: Linear::new(store, &format!("{prefix}/joint/out"), 2 * lstm_hidden, 1, rng)?,
            },
            JointMode::Concat { lstm_hidden } => Joint::Concat {
                lstm: BiLstm::new(
                    store,
                    &format!("{prefix}/joint/lstm"),
                    config.num_speakers * dim,
                    lstm_hidden,
                    rng,
                )?,
                out: Linear::new(
                    store,
                    &format!("{prefix}/joint/out"),
                    2 * lstm_hidden,
                    config.num_speakers,
                    rng,
                )?,
            },
        };
        Ok(Self {
            config,
            encoder,
            joint,
        })
    }

    /// Per-speaker encoder stage (shared weights across speakers):
    /// `(B, N, T, 2D)` -> `(B, N, T, 2D)` score sequences.
    pub fn speaker_scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        block: NodeId,
    ) -> Result<NodeId> {
        let v = g.value(block);
        if v.rank() != 4 {
            return Err(err!(Shape, "concat block must be (B,N,T,2D): {:?}", v.shape()));
        }
        let (b, n, t, dd) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        if dd != 2 * self.config.embed_dim {
            return Err(err!(Shape, "pair dim {} vs 2D {}", dd, 2 * self.config.embed_dim));
        }
        let mut h = g.reshape(block, &[b * n, t, dd])?;
        for layer in &self.encoder {
            h = layer.forward(g, ps, h)?;
        }
        g.reshape(h, &[b, n, t, dd])
    }

    /// Joint refinement over the speaker axis plus the sigmoid output head:
    /// `(B, N, T, 2D)` scores -> `(B, T, N)` probabilities.
    pub fn joint_head<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        scores: NodeId,
    ) -> Result<NodeId> {
        let v = g.value(scores);
        let (b, n, t, dd) = (v.dim(0), v.dim(1), v.dim(2), v.dim(3));
        match &self.joint {
            Joint::Symmetric { proj, lstm, out } => {
                let flat = g.reshape(scores, &[b * n, t, dd])?;
                let ctx_all = proj.forward(g, ps, flat)?;
                let ctx_dim = g.value(ctx_all).dim(2);
                let ctx_r = g.reshape(ctx_all, &[b, n, t, ctx_dim])?;
                // mean over speakers
                let mut acc = None;
                for ni in 0..n {
                    let s = g.narrow(ctx_r, 1, ni, 1)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s)?,
                    });
                }
                let ctx = g.scale(acc.unwrap(), T::from_usize(n).recip())?;
                let ctx = g.reshape(ctx, &[b, t, ctx_dim])?;
                // per speaker: (own scores ; shared context) -> shared lstm
                let mut per = Vec::with_capacity(n);
                for ni in 0..n {
                    let s = g.narrow(scores, 1, ni, 1)?;
                    let s = g.reshape(s, &[b, t, dd])?;
                    let j = g.concat(2, &[s, ctx])?;
                    per.push(g.reshape(j, &[b, 1, t, dd + ctx_dim])?);
                }
                let joint_in = g.concat(1, &per)?;
                let joint_in = g.reshape(joint_in, &[b * n, t, dd + ctx_dim])?;
                let r = lstm.forward(g, ps, joint_in)?;
                let o = out.forward(g, ps, r)?;
                let o = g.reshape(o, &[b, n, t])?;
                let o = g.permute(o, &[0, 2, 1])?;
                g.sigmoid(o)
            }
            Joint::Concat { lstm, out } => {
                if n != self.config.num_speakers {
                    return Err(err!(
                        Shape,
                        "joint layer built for {} speakers, got {}",
                        self.config.num_speakers,
                        n
                    ));
                }
                let p = g.permute(scores, &[0, 2, 1, 3])?;
                let flat = g.reshape(p, &[b, t, n * dd])?;
                let r = lstm.forward(g, ps, flat)?;
                let o = out.forward(g, ps, r)?;
                g.sigmoid(o)
            }
        }
    }

    /// Full detection path over a `(B, N, T, 2D)` concat block.
    pub fn detect<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        block: NodeId,
    ) -> Result<NodeId> {
        let s = self.speaker_scores(g, ps, block)?;
        self.joint_head(g, ps, s)
    }

    /// Plain-tensor convenience: one bank, one window of frames -> `(T, N)`.
    pub fn detect_forward<T: Scalar>(
        &self,
        ps: &ParameterStore<T>,
        bank: &TargetSpeakerBank<T>,
        frames: &FrameEmbeddings<T>,
    ) -> Result<ActivityMatrix<T>> {
        let mut g = Graph::<T>::new();
        let (n, d, t) = (bank.num_speakers(), bank.dim(), frames.num_frames());
        let b = g.input(bank.values.reshaped(&[1, n, d])?)?;
        let f = g.input(frames.values.reshaped(&[1, t, d])?)?;
        let block = g.pair_concat(b, f)?;
        let y = self.detect(&mut g, ps, block)?;
        ActivityMatrix::new(g.value(y).reshaped(&[t, n])?)
    }
}
