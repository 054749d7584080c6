//! Frame-level speaker-embedding extractors.
//!
//! Two variants share one contract: take `(B, 1, H, L)` filterbank features,
//! downsample time by exactly 8, and emit `(B, T, D)` embeddings at 0.08 s
//! per frame.
//!
//! * residual: conv stack in stages -> frame-level statistics pooling over
//!   the feature axis -> linear projection.
//! * conformer: subsampling stem -> conformer blocks -> concatenation of all
//!   block outputs -> two stride-2 1-d convolutions down to the target rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{err, Result};
use crate::features::FeatureMatrix;
use crate::graph::{Graph, NodeId};
use crate::nn::{
    BatchNorm, Conv1d, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParameterStore,
};
use crate::tensor::{Scalar, Tensor};

/// Embedding frames per second follow from the fixed /8 time reduction of
/// 10 ms input frames.
pub const FRAME_RESOLUTION_S: f64 = 0.08;
pub const TIME_REDUCTION: usize = 8;

/// `(T, D)` frame embeddings for one channel of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings<T> {
    pub values: Tensor<T>,
    pub frame_resolution_s: f64,
}

impl<T: Scalar> FrameEmbeddings<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(err!(Shape, "frame embeddings must be (T, D), got {:?}", values.shape()));
        }
        Ok(Self {
            values,
            frame_resolution_s: FRAME_RESOLUTION_S,
        })
    }
    pub fn num_frames(&self) -> usize {
        self.values.dim(0)
    }
    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }
    pub fn frame(&self, t: usize) -> &[T] {
        self.values.row(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSpec {
    pub stem_width: usize,
    /// (feature, time) stride of the stem convolution.
    pub stem_stride: (usize, usize),
    pub stages: Vec<StageSpec>,
    pub embed_dim: usize,
}

impl ResidualSpec {
    fn validate(&self) -> Result<()> {
        let total: usize =
            self.stem_stride.1 * self.stages.iter().map(|s| s.stride).product::<usize>();
        if total != TIME_REDUCTION {
            return Err(err!(
                Config,
                "residual frontend must downsample time by {TIME_REDUCTION}, spec gives {total}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerSpec {
    pub stem_width: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub conv_kernel: usize,
    /// Channels between the two stride-2 downsampling convolutions.
    pub mfa_hidden: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

/// Which extractor to build, with its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum FrontendConfig {
    Residual(ResidualSpec),
    Conformer(ConformerSpec),
}

impl FrontendConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            FrontendConfig::Residual(s) => s.embed_dim,
            FrontendConfig::Conformer(s) => s.embed_dim,
        }
    }

    /// Desk-scale residual stack: two blocks per stage, four stages.
    pub fn desk(embed_dim: usize) -> Self {
        FrontendConfig::Residual(ResidualSpec {
            stem_width: 16,
            stem_stride: (1, 1),
            stages: vec![
                StageSpec { width: 16, blocks: 2, stride: 1 },
                StageSpec { width: 32, blocks: 2, stride: 2 },
                StageSpec { width: 64, blocks: 2, stride: 2 },
                StageSpec { width: 128, blocks: 2, stride: 2 },
            ],
            embed_dim,
        })
    }

    /// Lean residual stack for real-time CPU streaming: downsamples in the
    /// stem and uses one block per stage.
    pub fn desk_fast(embed_dim: usize) -> Self {
        FrontendConfig::Residual(ResidualSpec {
            stem_width: 8,
            stem_stride: (2, 2),
            stages: vec![
                StageSpec { width: 8, blocks: 1, stride: 1 },
                StageSpec { width: 16, blocks: 1, stride: 2 },
                StageSpec { width: 32, blocks: 1, stride: 2 },
            ],
            embed_dim,
        })
    }

    /// Full-scale 34-layer residual preset (3/4/6/3 blocks).
    pub fn paper_residual() -> Self {
        FrontendConfig::Residual(ResidualSpec {
            stem_width: 64,
            stem_stride: (1, 1),
            stages: vec![
                StageSpec { width: 64, blocks: 3, stride: 1 },
                StageSpec { width: 128, blocks: 4, stride: 2 },
                StageSpec { width: 256, blocks: 6, stride: 2 },
                StageSpec { width: 512, blocks: 3, stride: 2 },
            ],
            embed_dim: 256,
        })
    }

    /// Desk-scale conformer variant.
    pub fn desk_conformer(embed_dim: usize) -> Self {
        FrontendConfig::Conformer(ConformerSpec {
            stem_width: 16,
            model_dim: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
            conv_kernel: 15,
            mfa_hidden: 96,
            embed_dim,
            dropout: 0.0,
        })
    }

    /// Full-scale conformer preset (8 layers, 176-dim encoder).
    pub fn paper_conformer() -> Self {
        FrontendConfig::Conformer(ConformerSpec {
            stem_width: 32,
            model_dim: 176,
            layers: 8,
            heads: 4,
            ff_hidden: 704,
            conv_kernel: 31,
            mfa_hidden: 512,
            embed_dim: 256,
            dropout: 0.1,
        })
    }
}

struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

pub struct ResidualFrontend {
    spec: ResidualSpec,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    proj: Linear,
}

impl ResidualFrontend {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        spec: ResidualSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(
            store,
            &format!("{prefix}/stem"),
            1,
            spec.stem_width,
            (3, 3),
            spec.stem_stride,
            (1, 1),
            rng,
        )?;
        let stem_bn = BatchNorm::new(store, &format!("{prefix}/stem_bn"), spec.stem_width)?;
        let mut blocks = Vec::new();
        let mut c_in = spec.stem_width;
        for (si, stage) in spec.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let name = format!("{prefix}/stage{si}/block{bi}");
                let conv1 = Conv2d::new(
                    store,
                    &format!("{name}/conv1"),
                    c_in,
                    stage.width,
                    (3, 3),
                    (stride, stride),
                    (1, 1),
                    rng,
                )?;
                let bn1 = BatchNorm::new(store, &format!("{name}/bn1"), stage.width)?;
                let conv2 = Conv2d::new(
                    store,
                    &format!("{name}/conv2"),
                    stage.width,
                    stage.width,
                    (3, 3),
                    (1, 1),
                    (1, 1),
                    rng,
                )?;
                let bn2 = BatchNorm::new(store, &format!("{name}/bn2"), stage.width)?;
                let shortcut = if stride != 1 || c_in != stage.width {
                    Some((
                        Conv2d::new(
                            store,
                            &format!("{name}/down"),
                            c_in,
                            stage.width,
                            (1, 1),
                            (stride, stride),
                            (0, 0),
                            rng,
                        )?,
                        BatchNorm::new(store, &format!("{name}/down_bn"), stage.width)?,
                    ))
                } else {
                    None
                };
                blocks.push(ResidualBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                c_in = stage.width;
            }
        }
        let proj = Linear::new(store, &format!("{prefix}/proj"), 2 * c_in, spec.embed_dim, rng)?;
        Ok(Self {
            spec,
            stem,
            stem_bn,
            blocks,
            proj,
        })
    }

    /// `(B, 1, H, L)` features -> `(B, T, D)` embeddings, L divisible by 8.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.stem.forward(g, ps, x)?;
        h = self.stem_bn.forward(g, ps, h)?;
        h = g.relu(h)?;
        for b in &self.blocks {
            let mut main = b.conv1.forward(g, ps, h)?;
            main = b.bn1.forward(g, ps, main)?;
            main = g.relu(main)?;
            main = b.conv2.forward(g, ps, main)?;
            main = b.bn2.forward(g, ps, main)?;
            let skip = match &b.shortcut {
                Some((conv, bn)) => {
                    let s = conv.forward(g, ps, h)?;
                    bn.forward(g, ps, s)?
                }
                None => h,
            };
            let sum = g.add(main, skip)?;
            h = g.relu(sum)?;
        }
        let pooled = g.gsp(h)?;
        self.proj.forward(g, ps, pooled)
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }
}

struct ConformerBlock {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_att: LayerNorm,
    att: MultiHeadAttention,
    ln_conv: LayerNorm,
    conv_point1: Conv1d,
    conv_bn: BatchNorm,
    conv_point2: Conv1d,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
    dropout: f64,
}

pub struct ConformerFrontend {
    spec: ConformerSpec,
    stem: Conv2d,
    stem_proj: Linear,
    blocks: Vec<ConformerBlock>,
    mfa_norm: LayerNorm,
    down1: Conv1d,
    down2: Conv1d,
}

impl ConformerFrontend {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        spec: ConformerSpec,
        mel_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let stem = Conv2d::new(
            store,
            &format!("{prefix}/stem"),
            1,
            spec.stem_width,
            (3, 3),
            (2, 2),
            (1, 1),
            rng,
        )?;
        let h_half = mel_bins.div_ceil(2);
        let stem_proj = Linear::new(
            store,
            &format!("{prefix}/stem_proj"),
            spec.stem_width * h_half,
            spec.model_dim,
            rng,
        )?;
        let mut blocks = Vec::new();
        for li in 0..spec.layers {
            let name = format!("{prefix}/layer{li}");
            blocks.push(ConformerBlock {
                ln_ff1: LayerNorm::new(store, &format!("{name}/ln_ff1"), spec.model_dim)?,
                ff1: FeedForward::new(store, &format!("{name}/ff1"), spec.model_dim, spec.ff_hidden, rng)?,
                ln_att: LayerNorm::new(store, &format!("{name}/ln_att"), spec.model_dim)?,
                att: MultiHeadAttention::new(store, &format!("{name}/att"), spec.model_dim, spec.heads, rng)?,
                ln_conv: LayerNorm::new(store, &format!("{name}/ln_conv"), spec.model_dim)?,
                conv_point1: Conv1d::new(
                    store,
                    &format!("{name}/conv1"),
                    spec.model_dim,
                    spec.model_dim,
                    spec.conv_kernel,
                    1,
                    spec.conv_kernel / 2,
                    rng,
                )?,
                conv_bn: BatchNorm::new(store, &format!("{name}/conv_bn"), spec.model_dim)?,
                conv_point2: Conv1d::new(
                    store,
                    &format!("{name}/conv2"),
                    spec.model_dim,
                    spec.model_dim,
                    1,
                    1,
                    0,
                    rng,
                )?,
                ln_ff2: LayerNorm::new(store, &format!("{name}/ln_ff2"), spec.model_dim)?,
                ff2: FeedForward::new(store, &format!("{name}/ff2"), spec.model_dim, spec.ff_hidden, rng)?,
                ln_out: LayerNorm::new(store, &format!("{name}/ln_out"), spec.model_dim)?,
                dropout: spec.dropout,
            });
        }
        let mfa_dim = spec.layers * spec.model_dim;
        let mfa_norm = LayerNorm::new(store, &format!("{prefix}/mfa_norm"), mfa_dim)?;
        let down1 = Conv1d::new(store, &format!("{prefix}/down1"), mfa_dim, spec.mfa_hidden, 3, 2, 1, rng)?;
        let down2 = Conv1d::new(store, &format!("{prefix}/down2"), spec.mfa_hidden, spec.embed_dim, 3, 2, 1, rng)?;
        Ok(Self {
            spec,
            stem,
            stem_proj,
            blocks,
            mfa_norm,
            down1,
            down2,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        // (B,1,H,L) -> (B,C,H/2,L/2) -> (B, L/2, C*H/2) -> (B, L/2, d)
        let s = self.stem.forward(g, ps, x)?;
        let s = g.relu(s)?;
        let (b, c, h2, t2) = {
            let v = g.value(s);
            (v.dim(0), v.dim(1), v.dim(2), v.dim(3))
        };
        let p = g.permute(s, &[0, 3, 1, 2])?;
        let flat = g.reshape(p, &[b, t2, c * h2])?;
        let mut hcur = self.stem_proj.forward(g, ps, flat)?;
        let half = T::from_f64(0.5);
        let mut taps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let dp = T::from_f64(blk.dropout);
            let n = blk.ln_ff1.forward(g, ps, hcur)?;
            let f = blk.ff1.forward(g, ps, n)?;
            let f = g.dropout(f, dp)?;
            let f = g.scale(f, half)?;
            hcur = g.add(hcur, f)?;

            let n = blk.ln_att.forward(g, ps, hcur)?;
            let a = blk.att.forward(g, ps, n)?;
            let a = g.dropout(a, dp)?;
            hcur = g.add(hcur, a)?;

            let n = blk.ln_conv.forward(g, ps, hcur)?;
            let tr = g.permute(n, &[0, 2, 1])?;
            let cv = blk.conv_point1.forward(g, ps, tr)?;
            let cv = blk.conv_bn.forward(g, ps, cv)?;
            let cv = g.relu(cv)?;
            let cv = blk.conv_point2.forward(g, ps, cv)?;
            let back = g.permute(cv, &[0, 2, 1])?;
            let back = g.dropout(back, dp)?;
            hcur = g.add(hcur, back)?;

            let n = blk.ln_ff2.forward(g, ps, hcur)?;
            let f = blk.ff2.forward(g, ps, n)?;
            let f = g.dropout(f, dp)?;
            let f = g.scale(f, half)?;
            hcur = g.add(hcur, f)?;

            hcur = blk.ln_out.forward(g, ps, hcur)?;
            taps.push(hcur);
        }
        let mfa = g.concat(2, &taps)?;
        let mfa = self.mfa_norm.forward(g, ps, mfa)?;
        let tr = g.permute(mfa, &[0, 2, 1])?;
        let d1 = self.down1.forward(g, ps, tr)?;
        let d1 = g.relu(d1)?;
        let d2 = self.down2.forward(g, ps, d1)?;
        g.permute(d2, &[0, 2, 1])
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }
}

pub enum Frontend {
    Residual(ResidualFrontend),
    Conformer(ConformerFrontend),
}

impl Frontend {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: &FrontendConfig,
        mel_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match config {
            FrontendConfig::Residual(s) => {
                Frontend::Residual(ResidualFrontend::new(store, prefix, s.clone(), rng)?)
            }
            FrontendConfig::Conformer(s) => {
                Frontend::Conformer(ConformerFrontend::new(store, prefix, s.clone(), mel_bins, rng)?)
            }
        })
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Frontend::Residual(f) => f.embed_dim(),
            Frontend::Conformer(f) => f.embed_dim(),
        }
    }

    /// Graph forward over a prate `(B, 1, H, L)` input (time already padded
    /// to a multiple of 8).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            Frontend::Residual(f) => f.forward(g, ps, x),
            Frontend::Conformer(f) => f.forward(g, ps, x),
        }
    }
}

/// Stack equally-shaped feature matrices into a `(B, 1, H, L8)` input,
/// right-padding time with zeros to a multiple of 8.
pub fn features_to_input<T: Scalar>(feats: &[&FeatureMatrix<T>]) -> Result<Tensor<T>> {
    if feats.is_empty() {
        return Err(err!(InvalidInput, "empty feature batch"));
    }
    let h = feats[0].num_mels();
    let l = feats[0].num_frames();
    if l == 0 {
        return Err(err!(InvalidInput, "empty input: zero feature frames"));
    }
    for f in feats {
        if f.num_mels() != h || f.num_frames() != l {
            return Err(err!(Shape, "feature batch shapes differ"));
        }
    }
    let l8 = l.div_ceil(TIME_REDUCTION) * TIME_REDUCTION;
    let mut data = vec![T::zero(); feats.len() * h * l8];
    for (b, f) in feats.iter().enumerate() {
        for hi in 0..h {
            let dst = &mut data[(b * h + hi) * l8..(b * h + hi) * l8 + l];
            dst.copy_from_slice(f.values.row(hi));
        }
    }
    Tensor::new(&[feats.len(), 1, h, l8], data)
}

/// Mean and population standard deviation over the feature axis of a
/// `(C, H, T)` map, emitted as `(T, 2C)` with means first.
pub fn frame_gsp<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    if map.rank() != 3 {
        return Err(err!(Shape, "frame_gsp expects (C, H, T), got {:?}", map.shape()));
    }
    let mut g = Graph::<T>::new();
    let (c, h, t) = (map.dim(0), map.dim(1), map.dim(2));
    let x = g.input(map.reshaped(&[1, c, h, t])?)?;
    let y = g.gsp(x)?;
    g.value(y).reshaped(&[t, 2 * c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FbankConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_features(l: usize) -> FeatureMatrix<f32> {
        let data: Vec<f32> = (0..80 * l).map(|i| ((i * 131 % 61) as f32) * 0.03 - 0.9).collect();
        FeatureMatrix {
            values: Tensor::new(&[80, l], data).unwrap(),
            frame_shift_s: FbankConfig::default().frame_shift_s,
            frame_length_s: FbankConfig::default().frame_length_s,
        }
    }

    #[test]
    fn frame_gsp_constant_and_alternating() {
        // constant value c -> mean c, std exactly 0
        let m = Tensor::<f64>::full(&[3, 7, 4], 2.5);
        let out = frame_gsp(&m).unwrap();
        assert_eq!(out.shape(), &[4, 6]);
        for t in 0..4 {
            for c in 0..3 {
                assert_eq!(out.at2(t, c), 2.5);
                assert_eq!(out.at2(t, 3 + c), 0.0);
            }
        }
        // alternating 1/3 over an even feature axis -> mean 2, std 1
        let mut data = vec![0.0f64; 2 * 6 * 5];
        for c in 0..2 {
            for h in 0..6 {
                for t in 0..5 {
                    data[(c * 6 + h) * 5 + t] = if h % 2 == 0 { 1.0 } else { 3.0 };
                }
            }
        }
        let m = Tensor::new(&[2, 6, 5], data).unwrap();
        let out = frame_gsp(&m).unwrap();
        for t in 0..5 {
            for c in 0..2 {
                assert!((out.at2(t, c) - 2.0).abs() < 1e-12);
                assert!((out.at2(t, 2 + c) - 1.0).abs() < 1e-12);
            }
        }
        // shape contract: C=32, H'=10, T=50 -> 50 x 64
        let m = Tensor::<f32>::zeros(&[32, 10, 50]);
        assert_eq!(frame_gsp(&m).unwrap().shape(), &[50, 64]);
    }

    #[test]
    fn residual_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParameterStore::<f32>::new();
        let spec = match FrontendConfig::desk_fast(32) {
            FrontendConfig::Residual(s) => s,
            _ => unreachable!(),
        };
        let fe = ResidualFrontend::new(&mut store, "frontend", spec, &mut rng).unwrap();
        let feats = fake_features(256);
        let input = features_to_input(&[&feats]).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(input.clone()).unwrap();
        let y = fe.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 32, 32]);
        // rerun: bit-identical
        let mut g2 = Graph::<f32>::new();
        let x2 = g2.input(input).unwrap();
        let y2 = fe.forward(&mut g2, &store, x2).unwrap();
        assert_eq!(g.value(y), g2.value(y2));
        // 250 frames right-pad to 256 -> still 32
        let feats = fake_features(250);
        let input = features_to_input(&[&feats]).unwrap();
        assert_eq!(input.shape(), &[1, 1, 80, 256]);
        let mut g3 = Graph::<f32>::new();
        let x3 = g3.input(input).unwrap();
        let y3 = fe.forward(&mut g3, &store, x3).unwrap();
        assert_eq!(g3.value(y3).shape(), &[1, 32, 32]);
    }

    #[test]
    fn conformer_shapes_follow_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::<f32>::new();
        let spec = match FrontendConfig::desk_conformer(32) {
            FrontendConfig::Conformer(s) => s,
            _ => unreachable!(),
        };
        let fe = ConformerFrontend::new(&mut store, "frontend", spec, 80, &mut rng).unwrap();
        // 800 frames (8 s) -> 100 embedding frames at 0.08 s
        let feats = fake_features(800);
        let input = features_to_input(&[&feats]).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(input).unwrap();
        let y = fe.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 100, 32]);
        // each stride-2 conv halves frames: 200 -> 100 -> 50 after stem /2
        let feats = fake_features(200 * 8);
        let input = features_to_input(&[&feats]).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(input).unwrap();
        let y = fe.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).dim(1), 200);
    }

    #[test]
    fn empty_input_is_an_error() {
        let feats = FeatureMatrix::<f32>::empty(80, &FbankConfig::default());
        assert!(features_to_input(&[&feats]).is_err());
    }

    #[test]
    fn conformer_preset_is_smaller_than_residual_preset() {
        // full-scale presets
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rs = ParameterStore::<f32>::new();
        Frontend::new(&mut rs, "frontend", &FrontendConfig::paper_residual(), 80, &mut rng).unwrap();
        let mut cs = ParameterStore::<f32>::new();
        Frontend::new(&mut cs, "frontend", &FrontendConfig::paper_conformer(), 80, &mut rng).unwrap();
        let (res, conf) = (rs.total_values(), cs.total_values());
        assert!(
            conf < res,
            "conformer preset {conf} params should undercut residual {res}"
        );
        // desk presets preserve the inequality
        let mut rs = ParameterStore::<f32>::new();
        Frontend::new(&mut rs, "frontend", &FrontendConfig::desk(64), 80, &mut rng).unwrap();
        let mut cs = ParameterStore::<f32>::new();
        Frontend::new(&mut cs, "frontend", &FrontendConfig::desk_conformer(64), 80, &mut rng).unwrap();
        assert!(cs.total_values() < rs.total_values());
    }
}
