//! Four-stage hierarchical feature extractor: a two-convolution stem, two
//! MBConv stages, then two windowed self-attention stages. Stage `s` runs at
//! `1/2^(s+1)` of the input resolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Rng, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// (height, width) in pixels.
    pub input_size: [usize; 2],
    pub channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// Heads for the two attention stages (3 and 4).
    pub attention_heads: [usize; 2],
    pub window: usize,
    pub mlp_ratio: usize,
    /// Hidden-width multiplier of the MBConv inverted bottleneck.
    pub expand_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: [128, 128],
            channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            attention_heads: [2, 4],
            window: 4,
            mlp_ratio: 4,
            expand_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        if self.channels.contains(&0) || self.channels.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config(format!(
                "channels {:?} must be positive and non-decreasing",
                self.channels
            )));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        for (i, &heads) in self.attention_heads.iter().enumerate() {
            let c = self.channels[i + 2];
            if heads == 0 || !c.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "{heads} heads do not divide stage-{} channels {c}",
                    i + 3
                )));
            }
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.expand_ratio == 0 {
            return Err(Error::Config(
                "window, mlp_ratio and expand_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extent (h, w) of stage `s` (1-based).
    pub fn stage_extent(&self, s: usize) -> (usize, usize) {
        let f = 1 << (s + 1);
        (self.input_size[0] / f, self.input_size[1] / f)
    }

    /// Channels of the stem's first convolution.
    pub fn stem_channels(&self) -> usize {
        (self.channels[0] / 2).max(1)
    }

    /// Attention window side used at stage `s` (3 or 4).
    pub fn window_at(&self, s: usize) -> usize {
        let (h, w) = self.stage_extent(s);
        effective_window(self.window, h, w)
    }
}

/// Window side that tiles an `h`×`w` map: `window` when it divides both
/// sides, else the largest common divisor below it, else the whole map when
/// square (a 7×7 stage with window 4 attends globally).
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    let cap = window.min(h).min(w).max(1);
    let d = (1..=cap)
        .rev()
        .find(|d| h.is_multiple_of(*d) && w.is_multiple_of(*d))
        .unwrap_or(1);
    if d == 1 && h == w && window > 1 {
        h
    } else {
        d
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut Rng, name: &str, shape: [usize; 4]) -> Self {
        Conv {
            w: p.conv_kernel(rng, format!("{name}.weight"), &shape),
            b: p.zeros(format!("{name}.bias"), &[shape[0]]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Dense {
            w: p.weight(rng, format!("{name}.weight"), &[d_out, d_in]),
            b: p.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new<T: Real>(p: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Norm {
            gamma: p.ones(format!("{name}.weight"), &[d]),
            beta: p.zeros(format!("{name}.bias"), &[d]),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], T::c(LN_EPS))
    }
}

/// Inverted bottleneck: 1×1 expand, 3×3 depthwise (stride 1 or 2), 1×1
/// project. GELU after expand and depthwise; residual when shapes match.
#[derive(Clone, Debug)]
pub struct MbConv {
    pub(crate) expand: Conv,
    pub(crate) depthwise: Conv,
    pub(crate) project: Conv,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl MbConv {
    pub fn new<T: Real>(
        p: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        expand_ratio: usize,
        stride: usize,
    ) -> Self {
        let hidden = c_in * expand_ratio;
        MbConv {
            expand: Conv::new(p, rng, &format!("{name}.expand"), [hidden, c_in, 1, 1]),
            depthwise: Conv::new(p, rng, &format!("{name}.depthwise"), [hidden, 1, 3, 3]),
            project: Conv::new(p, rng, &format!("{name}.project"), [c_out, hidden, 1, 1]),
            stride,
            c_in,
            c_out,
        }
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    /// `x` is NCHW.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.c_in {
            return Err(Error::shape(
                "mbconv_block",
                format!("expected {} channels, got {c}", self.c_in),
            ));
        }
        let h = g.conv2d(x, p[self.expand.w], Some(p[self.expand.b]), 1, 0, 1)?;
        let h = g.gelu(h)?;
        let h = g.depthwise_conv2d(h, p[self.depthwise.w], Some(p[self.depthwise.b]), self.stride, 1)?;
        let h = g.gelu(h)?;
        let h = g.conv2d(h, p[self.project.w], Some(p[self.project.b]), 1, 0, 1)?;
        if self.has_residual() {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }
}

/// Pre-norm windowed multi-head self-attention followed by a pre-norm MLP,
/// each with a residual connection. No positional bias, no window shift.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub(crate) norm1: Norm,
    pub(crate) qkv: Dense,
    pub(crate) proj: Dense,
    pub(crate) norm2: Norm,
    pub(crate) fc1: Dense,
    pub(crate) fc2: Dense,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        p: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide {dim} channels")));
        }
        Ok(AttentionBlock {
            norm1: Norm::new(p, &format!("{name}.norm1"), dim),
            qkv: Dense::new(p, rng, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Dense::new(p, rng, &format!("{name}.proj"), dim, dim),
            norm2: Norm::new(p, &format!("{name}.norm2"), dim),
            fc1: Dense::new(p, rng, &format!("{name}.fc1"), dim, dim * mlp_ratio),
            fc2: Dense::new(p, rng, &format!("{name}.fc2"), dim * mlp_ratio, dim),
            dim,
            heads,
            window,
        })
    }

    /// `x` is (B, H, W, C).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (b, h, w, c) = match *g.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            ref s => {
                return Err(Error::shape(
                    "attention_block",
                    format!("expected (B,H,W,C), got {s:?}"),
                ))
            }
        };
        if c != self.dim {
            return Err(Error::shape(
                "attention_block",
                format!("expected {} channels, got {c}", self.dim),
            ));
        }
        let ws = effective_window(self.window, h, w);
        let normed = self.norm1.apply(g, p, x)?;
        let windows = g.window_partition(normed, ws)?;
        let attended = self.attend(g, p, windows)?;
        let merged = g.window_merge(attended, ws, b, h, w)?;
        let x = g.add(x, merged)?;

        let normed = self.norm2.apply(g, p, x)?;
        let hidden = self.fc1.apply(g, p, normed)?;
        let hidden = g.gelu(hidden)?;
        let out = self.fc2.apply(g, p, hidden)?;
        g.add(x, out)
    }

    /// Multi-head attention inside each window; `windows` is (Bw, Nw, C).
    fn attend<T: Real>(&self, g: &mut Graph<T>, p: &Bound, windows: Var) -> Result<Var> {
        let (bw, nw, c) = match *g.shape(windows) {
            [bw, nw, c] => (bw, nw, c),
            _ => unreachable!("window_partition yields rank-3 output"),
        };
        let heads = self.heads;
        let hd = c / heads;
        let qkv = self.qkv.apply(g, p, windows)?;
        let qkv = g.reshape(qkv, &[bw, nw, 3, heads, hd])?;
        let qkv = g.transpose(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, bw * heads, nw, hd])?;
        let mut parts = [windows; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = g.slice(qkv, 0, i, 1)?;
            *part = g.reshape(s, &[bw * heads, nw, hd])?;
        }
        let [q, k, v] = parts;
        let kt = g.transpose(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scalar_mul(scores, T::c(1.0 / (hd as f64).sqrt()))?;
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[bw, heads, nw, hd])?;
        let out = g.transpose(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[bw, nw, c])?;
        self.proj.apply(g, p, out)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum StageBlocks {
    Conv(Vec<MbConv>),
    Attention(Vec<AttentionBlock>),
}

#[derive(Clone, Debug)]
pub(crate) struct Stage {
    pub downsample: Option<MbConv>,
    pub blocks: StageBlocks,
}

/// The four stage outputs, each laid out (B, h, w, C_s). Stage 4 is
/// layer-normalized and is the token map the counting heads consume.
#[derive(Clone, Copy, Debug)]
pub struct TokenPyramid {
    pub stages: [Var; 4],
}

impl TokenPyramid {
    pub fn final_stage(&self) -> Var {
        self.stages[3]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub(crate) stem: [Conv; 2],
    pub(crate) stages: Vec<Stage>,
    pub(crate) norm: Norm,
}

impl Backbone {
    pub fn new<T: Real>(config: &BackboneConfig, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let stem_c = config.stem_channels();
        let stem = [
            Conv::new(p, rng, "stem.conv1", [stem_c, 3, 3, 3]),
            Conv::new(p, rng, "stem.conv2", [ch[0], stem_c, 3, 3]),
        ];
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let name = format!("stage{}", s + 1);
            let downsample = (s > 0).then(|| {
                MbConv::new(
                    p,
                    rng,
                    &format!("{name}.downsample"),
                    ch[s - 1],
                    ch[s],
                    config.expand_ratio,
                    2,
                )
            });
            let blocks = if s < 2 {
                StageBlocks::Conv(
                    (0..config.blocks_per_stage[s])
                        .map(|i| {
                            MbConv::new(
                                p,
                                rng,
                                &format!("{name}.block{i}"),
                                ch[s],
                                ch[s],
                                config.expand_ratio,
                                1,
                            )
                        })
                        .collect(),
                )
            } else {
                let heads = config.attention_heads[s - 2];
                let window = config.window_at(s + 1);
                StageBlocks::Attention(
                    (0..config.blocks_per_stage[s])
                        .map(|i| {
                            AttentionBlock::new(
                                p,
                                rng,
                                &format!("{name}.block{i}"),
                                ch[s],
                                heads,
                                window,
                                config.mlp_ratio,
                            )
                        })
                        .collect::<Result<_>>()?,
                )
            };
            stages.push(Stage { downsample, blocks });
        }
        let norm = Norm::new(p, "stage4.norm", ch[3]);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            norm,
        })
    }

    /// Two stride-2 3×3 convolutions with GELU: (B,3,H,W) → (B,C₁,H/4,W/4).
    pub fn patch_embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let [h, w] = self.config.input_size;
        match *g.shape(image) {
            [_, 3, ih, iw] if ih == h && iw == w => {}
            ref s => {
                return Err(Error::shape(
                    "patch_embed",
                    format!("expected (B,3,{h},{w}) image batch, got {s:?}"),
                ))
            }
        }
        let mut x = image;
        for conv in &self.stem {
            x = g.conv2d(x, p[conv.w], Some(p[conv.b]), 2, 1, 1)?;
            x = g.gelu(x)?;
        }
        Ok(x)
    }

    /// Image batch (B,3,H,W) in [-1,1] → token pyramid.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<TokenPyramid> {
        let mut x = self.patch_embed(g, p, image)?;
        let mut nhwc = false;
        let mut outs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.downsample {
                if nhwc {
                    x = g.transpose(x, &[0, 3, 1, 2])?;
                    nhwc = false;
                }
                x = down.forward(g, p, x)?;
            }
            match &stage.blocks {
                StageBlocks::Conv(blocks) => {
                    for block in blocks {
                        x = block.forward(g, p, x)?;
                    }
                    outs.push(g.transpose(x, &[0, 2, 3, 1])?);
                }
                StageBlocks::Attention(blocks) => {
                    if !nhwc {
                        x = g.transpose(x, &[0, 2, 3, 1])?;
                        nhwc = true;
                    }
                    for block in blocks {
                        x = block.forward(g, p, x)?;
                    }
                    if s == 3 {
                        x = self.norm.apply(g, p, x)?;
                    }
                    outs.push(x);
                }
            }
        }
        Ok(TokenPyramid {
            stages: [outs[0], outs[1], outs[2], outs[3]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{seeded_rng, Tensor};

    #[test]
    fn default_config_pyramid_shapes() {
        let cfg = BackboneConfig::default();
        let mut rng = seeded_rng(0);
        let mut p = ParamStore::<f32>::new();
        let bb = Backbone::new(&cfg, &mut p, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(&[1, 3, 128, 128]));
        let pyr = bb.forward(&mut g, &bound, img).unwrap();
        let expect = [[1, 32, 32, 16], [1, 16, 16, 32], [1, 8, 8, 64], [1, 4, 4, 128]];
        for (s, e) in pyr.stages.iter().zip(expect) {
            assert_eq!(g.shape(*s), e);
        }
    }

    #[test]
    fn input_224_gives_seven_by_seven_tokens() {
        let cfg = BackboneConfig {
            input_size: [224, 224],
            ..BackboneConfig::default()
        };
        let mut p = ParamStore::<f32>::new();
        let bb = Backbone::new(&cfg, &mut p, &mut seeded_rng(0)).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(&[1, 3, 224, 224]));
        let pyr = bb.forward(&mut g, &bound, img).unwrap();
        assert_eq!(g.shape(pyr.final_stage()), &[1, 7, 7, 128]);
    }

    #[test]
    fn effective_window_tiles() {
        assert_eq!(effective_window(4, 8, 8), 4);
        assert_eq!(effective_window(4, 4, 4), 4);
        assert_eq!(effective_window(4, 2, 2), 2);
        assert_eq!(effective_window(4, 7, 7), 7);
        assert_eq!(effective_window(4, 6, 6), 3);
        assert_eq!(effective_window(4, 6, 4), 2);
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let cfg = BackboneConfig::default();
        let mut rng = seeded_rng(0);
        let mut p = ParamStore::<f32>::new();
        let bb = Backbone::new(&cfg, &mut p, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(&[1, 3, 96, 128]));
        assert!(bb.patch_embed(&mut g, &bound, img).is_err());
    }

    #[test]
    fn non_multiple_of_32_is_rejected() {
        let cfg = BackboneConfig {
            input_size: [100, 100],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = BackboneConfig {
            attention_heads: [3, 4],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut p = ParamStore::<f64>::new();
        assert!(AttentionBlock::new(&mut p, &mut seeded_rng(0), "a", 64, 3, 4, 4).is_err());
    }

    #[test]
    fn stride_one_block_with_zero_weights_is_identity() {
        let mut rng = seeded_rng(1);
        let mut p = ParamStore::<f64>::new();
        let block = MbConv::new(&mut p, &mut rng, "b", 16, 16, 4, 1);
        for id in p.ids().collect::<Vec<_>>() {
            let shape = p.get(id).shape().to_vec();
            p.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let t = crate::autodiff::truncated_normal_tensor::<f64>(&mut rng, &[1, 16, 32, 32], 1.0);
        let x = g.constant(t.clone());
        let y = block.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn downsample_block_halves_resolution() {
        let mut rng = seeded_rng(2);
        let mut p = ParamStore::<f32>::new();
        let block = MbConv::new(&mut p, &mut rng, "d", 16, 32, 4, 2);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 16, 32, 32]));
        let y = block.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 16, 16]);
        let bad = g.constant(Tensor::zeros(&[1, 8, 32, 32]));
        assert!(block.forward(&mut g, &bound, bad).is_err());
    }

    #[test]
    fn attention_block_preserves_shape() {
        let mut rng = seeded_rng(3);
        let mut p = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut p, &mut rng, "a", 64, 2, 4, 4).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(crate::autodiff::truncated_normal_tensor(&mut rng, &[2, 8, 8, 64], 1.0));
        let y = block.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 8, 64]);
    }
}
