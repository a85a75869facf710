//! The two-tower classifier: one Transformer encoder per modality, fusion by
//! concatenation and temporal averaging, a ReLU hidden layer and linear
//! class logits.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, AttentionLayer, Mode, VariantConfig};
use crate::data::PaddedVideo;
use crate::error::{Error, Result};
use crate::masks::MaskSpec;
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention variant of one tower, independent of sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub mode: Mode,
    /// `ShareAtt`: one mask per local head (`M/2` of them). `GateAtt`,
    /// `GateOp` and `Local`: exactly one mask. `Baseline`: empty.
    #[serde(default)]
    pub masks: Vec<MaskSpec>,
}

impl VariantSpec {
    pub fn baseline() -> Self {
        VariantSpec {
            mode: Mode::Baseline,
            masks: Vec::new(),
        }
    }

    pub fn new(mode: Mode, masks: Vec<MaskSpec>) -> Self {
        VariantSpec { mode, masks }
    }

    pub fn build(&self, size: usize) -> Result<VariantConfig> {
        let local_masks = self
            .masks
            .iter()
            .map(|m| m.build(size))
            .collect::<Result<Vec<_>>>()?;
        Ok(VariantConfig {
            mode: self.mode,
            local_masks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frames per video after truncation/padding.
    pub max_frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means 4x the tower's feature dim.
    #[serde(default)]
    pub ff_dim: Option<usize>,
    /// Hidden layer width; `None` means `visual_dim + audio_dim`.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub visual_variant: VariantSpec,
    pub audio_variant: VariantSpec,
    #[serde(default)]
    pub renormalize_gate: bool,
}

fn default_depth() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale(VariantSpec::baseline(), 20)
    }
}

impl ModelConfig {
    /// Same variant on both towers.
    pub fn desk_scale(variant: VariantSpec, num_classes: usize) -> Self {
        ModelConfig {
            max_frames: 32,
            visual_dim: 32,
            audio_dim: 16,
            heads: 4,
            ff_dim: None,
            hidden_dim: None,
            num_classes,
            depth: 1,
            visual_variant: variant.clone(),
            audio_variant: variant,
            renormalize_gate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_frames", self.max_frames),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("depth", self.depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.ff_dim == Some(0) {
            return Err(Error::config("ff_dim", "must be >= 1"));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        for (name, dim) in [("visual_dim", self.visual_dim), ("audio_dim", self.audio_dim)] {
            if dim % self.heads != 0 {
                return Err(Error::config(
                    name,
                    format!("{dim} is not divisible by {} heads", self.heads),
                ));
            }
        }
        for (name, v) in [("visual_variant", &self.visual_variant), ("audio_variant", &self.audio_variant)] {
            let cfg = v
                .build(self.max_frames)
                .map_err(|e| Error::config(name, e.to_string()))?;
            cfg.validate(self.heads, self.max_frames)
                .map_err(|e| Error::config(name, e.to_string()))?;
        }
        Ok(())
    }

    pub fn ff_dim_for(&self, dim: usize) -> usize {
        self.ff_dim.unwrap_or(4 * dim)
    }

    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.visual_dim + self.audio_dim)
    }
}

/// Named, ordered access to trainable tensors. Gradient containers use the
/// same type as the parameters, so both sides enumerate in the same order.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    let c = x.cols();
    for i in 0..x.rows() {
        for (v, bj) in x.row_mut(i).iter_mut().zip(b.data()) {
            *v += bj;
        }
    }
    debug_assert_eq!(c, b.len());
}

fn column_sums(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[x.cols()]);
    for i in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let d = x.cols();
        let mut normalized = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let nrow = normalized.row_mut(i);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let yrow = y.row_mut(i);
            for j in 0..d {
                yrow[j] = normalized.get(i, j) * self.gamma.data()[j] + self.beta.data()[j];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &LayerNormCache, dy: &Tensor) -> (Tensor, LayerNorm) {
        let d = dy.cols();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = Tensor::zeros(&[d]);
        let dbeta = column_sums(dy);
        let mut dn = vec![0.0; d];
        for i in 0..dy.rows() {
            let nrow = cache.normalized.row(i);
            let drow = dy.row(i);
            for j in 0..d {
                dgamma.data_mut()[j] += drow[j] * nrow[j];
                dn[j] = drow[j] * self.gamma.data()[j];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = is * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
            }
        }
        (
            dx,
            LayerNorm {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Tensor::zeros(self.gamma.shape()),
            beta: Tensor::zeros(self.beta.shape()),
        }
    }
}

/// Two-layer position-wise network with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
struct FeedForwardCache {
    x: Tensor,
    hidden: Tensor,
}

impl FeedForward {
    pub fn new(dim: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: Tensor::glorot(dim, ff, rng),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::glorot(ff, dim, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let mut h = matmul(x, &self.w1)?;
        add_bias(&mut h, &self.b1);
        let hidden = h.map(|v| v.max(0.0));
        let mut y = matmul(&hidden, &self.w2)?;
        add_bias(&mut y, &self.b2);
        Ok((
            y,
            FeedForwardCache {
                x: x.clone(),
                hidden,
            },
        ))
    }

    fn backward(&self, cache: &FeedForwardCache, dy: &Tensor) -> Result<(Tensor, FeedForward)> {
        let w2 = matmul_tn(&cache.hidden, dy)?;
        let b2 = column_sums(dy);
        let mut dh = matmul_nt(dy, &self.w2)?;
        for (g, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let w1 = matmul_tn(&cache.x, &dh)?;
        let b1 = column_sums(&dh);
        let dx = matmul_nt(&dh, &self.w1)?;
        Ok((dx, FeedForward { w1, b1, w2, b2 }))
    }

    fn zeros_like(&self) -> Self {
        FeedForward {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
        }
    }
}

/// `H = LN(X + Attn(X))`, `Y = LN(H + FF(H))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attention: AttentionLayer,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    attention: AttentionCache,
    norm1: LayerNormCache,
    ff: FeedForwardCache,
    norm2: LayerNormCache,
}

impl BlockCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attention
    }
}

impl EncoderBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        size: usize,
        ff_dim: usize,
        variant: VariantConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attention: AttentionLayer::new(dim, heads, size, variant, rng)?,
            norm1: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ff_dim, rng),
            norm2: LayerNorm::new(dim),
        })
    }

    pub fn forward(&self, x: &Tensor, valid_len: usize) -> Result<(Tensor, BlockCache)> {
        let (a, attention) = self.attention.forward(x, valid_len)?;
        let (h, norm1) = self.norm1.forward(&x.add(&a)?);
        let (f, ff) = self.ff.forward(&h)?;
        let (y, norm2) = self.norm2.forward(&h.add(&f)?);
        y.ensure_finite("encoder block")?;
        Ok((
            y,
            BlockCache {
                attention,
                norm1,
                ff,
                norm2,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Tensor) -> Result<(Tensor, EncoderBlock)> {
        let (d_pre2, norm2) = self.norm2.backward(&cache.norm2, dy);
        let (mut dh, ff) = self.ff.backward(&cache.ff, &d_pre2)?;
        dh.add_assign(&d_pre2);
        let (d_pre1, norm1) = self.norm1.backward(&cache.norm1, &dh);
        let (mut dx, attn) = self.attention.backward(&cache.attention, &d_pre1)?;
        dx.add_assign(&d_pre1);
        Ok((
            dx,
            EncoderBlock {
                attention: AttentionLayer {
                    params: attn,
                    variant: self.attention.variant.clone(),
                    renormalize_gate: self.attention.renormalize_gate,
                },
                norm1,
                ff,
                norm2,
            },
        ))
    }

    fn zeros_like(&self) -> Self {
        EncoderBlock {
            attention: AttentionLayer {
                params: self.attention.params.zeros_like(),
                variant: self.attention.variant.clone(),
                renormalize_gate: self.attention.renormalize_gate,
            },
            norm1: self.norm1.zeros_like(),
            ff: self.ff.zeros_like(),
            norm2: self.norm2.zeros_like(),
        }
    }
}

impl Parameterized for EncoderBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .attention
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (format!("attn.{n}"), t))
            .collect();
        out.push(("norm1.gamma".into(), &self.norm1.gamma));
        out.push(("norm1.beta".into(), &self.norm1.beta));
        out.push(("ff.w1".into(), &self.ff.w1));
        out.push(("ff.b1".into(), &self.ff.b1));
        out.push(("ff.w2".into(), &self.ff.w2));
        out.push(("ff.b2".into(), &self.ff.b2));
        out.push(("norm2.gamma".into(), &self.norm2.gamma));
        out.push(("norm2.beta".into(), &self.norm2.beta));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attention.params.tensors_mut();
        out.push(&mut self.norm1.gamma);
        out.push(&mut self.norm1.beta);
        out.push(&mut self.ff.w1);
        out.push(&mut self.ff.b1);
        out.push(&mut self.ff.w2);
        out.push(&mut self.ff.b2);
        out.push(&mut self.norm2.gamma);
        out.push(&mut self.norm2.beta);
        out
    }
}

/// Stack of encoder blocks for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub blocks: Vec<EncoderBlock>,
}

impl Tower {
    pub fn dim(&self) -> usize {
        self.blocks[0].attention.params.mhsa.dim()
    }

    pub fn forward(&self, x: &Tensor, valid_len: usize) -> Result<(Tensor, Vec<BlockCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, valid_len)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, caches: &[BlockCache], dy: &Tensor) -> Result<(Tensor, Tower)> {
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            let (dx, g) = b.backward(c, &d)?;
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        Ok((d, Tower { blocks: grads }))
    }

    fn zeros_like(&self) -> Self {
        Tower {
            blocks: self.blocks.iter().map(EncoderBlock::zeros_like).collect(),
        }
    }
}

impl Parameterized for Tower {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.named_params()
                    .into_iter()
                    .map(move |(n, t)| (format!("block{i}.{n}"), t))
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Contextualizes one modality: runs the tower over `x` with the first
/// `valid_len` rows treated as real frames.
pub fn encode_modality(x: &Tensor, valid_len: usize, tower: &Tower) -> Result<Tensor> {
    if valid_len == 0 {
        return Err(Error::shape("encode_modality", "valid_len must be >= 1"));
    }
    Ok(tower.forward(x, valid_len)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone)]
struct HeadCache {
    pooled: Tensor,
    hidden: Tensor,
    valid_len: usize,
    frames: usize,
}

impl ClassifierHead {
    fn new(input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            w_hidden: Tensor::glorot(input, hidden, rng),
            b_hidden: Tensor::zeros(&[hidden]),
            w_out: Tensor::glorot(hidden, classes, rng),
            b_out: Tensor::zeros(&[classes]),
        }
    }

    fn forward(&self, y_v: &Tensor, y_a: &Tensor, valid_len: usize) -> Result<(Tensor, HeadCache)> {
        if valid_len == 0 || valid_len > y_v.rows() || y_v.rows() != y_a.rows() {
            return Err(Error::shape(
                "fuse_and_classify",
                format!(
                    "valid_len {valid_len}, visual rows {}, audio rows {}",
                    y_v.rows(),
                    y_a.rows()
                ),
            ));
        }
        let (dv, da) = (y_v.cols(), y_a.cols());
        let mut pooled = Tensor::zeros(&[1, dv + da]);
        {
            let p = pooled.data_mut();
            for i in 0..valid_len {
                for (o, v) in p[..dv].iter_mut().zip(y_v.row(i)) {
                    *o += v;
                }
                for (o, v) in p[dv..].iter_mut().zip(y_a.row(i)) {
                    *o += v;
                }
            }
            for v in p.iter_mut() {
                *v /= valid_len as f64;
            }
        }
        let mut h = matmul(&pooled, &self.w_hidden)?;
        add_bias(&mut h, &self.b_hidden);
        let hidden = h.map(|v| v.max(0.0));
        let mut logits = matmul(&hidden, &self.w_out)?;
        add_bias(&mut logits, &self.b_out);
        let logits = logits.reshape(vec![self.b_out.len()])?;
        Ok((
            logits,
            HeadCache {
                pooled,
                hidden,
                valid_len,
                frames: y_v.rows(),
            },
        ))
    }

    /// Returns gradients w.r.t. the visual and audio tower outputs.
    fn backward(&self, cache: &HeadCache, dlogits: &Tensor, dv: usize) -> Result<(Tensor, Tensor, ClassifierHead)> {
        let dl = dlogits.clone().reshape(vec![1, dlogits.len()])?;
        let w_out = matmul_tn(&cache.hidden, &dl)?;
        let b_out = dlogits.clone();
        let mut dh = matmul_nt(&dl, &self.w_out)?;
        for (g, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let w_hidden = matmul_tn(&cache.pooled, &dh)?;
        let b_hidden = dh.clone().reshape(vec![dh.len()])?;
        let dpool = matmul_nt(&dh, &self.w_hidden)?;
        let da = dpool.cols() - dv;
        let mut d_yv = Tensor::zeros(&[cache.frames, dv]);
        let mut d_ya = Tensor::zeros(&[cache.frames, da]);
        let inv = 1.0 / cache.valid_len as f64;
        for i in 0..cache.valid_len {
            for (o, g) in d_yv.row_mut(i).iter_mut().zip(&dpool.data()[..dv]) {
                *o = g * inv;
            }
            for (o, g) in d_ya.row_mut(i).iter_mut().zip(&dpool.data()[dv..]) {
                *o = g * inv;
            }
        }
        Ok((
            d_yv,
            d_ya,
            ClassifierHead {
                w_hidden,
                b_hidden,
                w_out,
                b_out,
            },
        ))
    }
}

/// Mean over the first `valid_len` frames of `[Y_v | Y_a]`, then the hidden
/// layer and output logits.
pub fn fuse_and_classify(y_v: &Tensor, y_a: &Tensor, valid_len: usize, head: &ClassifierHead) -> Result<Tensor> {
    Ok(head.forward(y_v, y_a, valid_len)?.0)
}

/// Mean binary cross-entropy over classes, with the sigmoid folded in:
/// `max(z, 0) - z y + ln(1 + e^{-|z|})`.
pub fn bce_loss(logits: &[f64], labels: &BTreeSet<usize>) -> f64 {
    let c = logits.len() as f64;
    logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let y = if labels.contains(&k) { 1.0 } else { 0.0 };
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / c
}

/// `d bce_loss / d logits`.
pub fn bce_grad(logits: &[f64], labels: &BTreeSet<usize>) -> Vec<f64> {
    let c = logits.len() as f64;
    logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let y = if labels.contains(&k) { 1.0 } else { 0.0 };
            (sigmoid(z) - y) / c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub visual: Tower,
    pub audio: Tower,
    pub head: ClassifierHead,
}

/// Forward intermediates for one video.
#[derive(Debug, Clone)]
pub struct ModelCache {
    visual: Vec<BlockCache>,
    audio: Vec<BlockCache>,
    head: HeadCache,
}

impl ModelCache {
    pub fn visual_blocks(&self) -> &[BlockCache] {
        &self.visual
    }

    pub fn audio_blocks(&self) -> &[BlockCache] {
        &self.audio
    }
}

/// Flat gradient list aligned with [`Parameterized::named_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_for<P: Parameterized + ?Sized>(p: &P) -> Self {
        Gradients(
            p.named_params()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        )
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = config.max_frames;
        let tower = |dim: usize, spec: &VariantSpec, rng: &mut ChaCha8Rng| -> Result<Tower> {
            let blocks = (0..config.depth)
                .map(|_| {
                    let mut b = EncoderBlock::new(dim, config.heads, t, config.ff_dim_for(dim), spec.build(t)?, rng)?;
                    b.attention.renormalize_gate = config.renormalize_gate;
                    Ok(b)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tower { blocks })
        };
        let visual = tower(config.visual_dim, &config.visual_variant, &mut rng)?;
        let audio = tower(config.audio_dim, &config.audio_variant, &mut rng)?;
        let head = ClassifierHead::new(
            config.visual_dim + config.audio_dim,
            config.hidden(),
            config.num_classes,
            &mut rng,
        );
        Ok(Model {
            config,
            visual,
            audio,
            head,
        })
    }

    fn check_input(&self, video: &PaddedVideo) -> Result<()> {
        let c = &self.config;
        let want_v = [c.max_frames, c.visual_dim];
        let want_a = [c.max_frames, c.audio_dim];
        if video.visual.shape() != want_v || video.audio.shape() != want_a {
            return Err(Error::shape(
                "model input",
                format!(
                    "video {}: visual {:?} audio {:?}, expected {:?} and {:?}",
                    video.id,
                    video.visual.shape(),
                    video.audio.shape(),
                    want_v,
                    want_a
                ),
            ));
        }
        if video.valid_len == 0 || video.valid_len > c.max_frames {
            return Err(Error::shape(
                "model input",
                format!("video {}: valid_len {}", video.id, video.valid_len),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, video: &PaddedVideo) -> Result<(Tensor, ModelCache)> {
        self.check_input(video)?;
        let (y_v, visual) = self.visual.forward(&video.visual, video.valid_len)?;
        let (y_a, audio) = self.audio.forward(&video.audio, video.valid_len)?;
        let (logits, head) = self.head.forward(&y_v, &y_a, video.valid_len)?;
        logits.ensure_finite("model forward")?;
        Ok((logits, ModelCache { visual, audio, head }))
    }

    pub fn logits(&self, video: &PaddedVideo) -> Result<Vec<f64>> {
        Ok(self.forward(video)?.0.into_data())
    }

    /// Per-class probabilities.
    pub fn predict(&self, video: &PaddedVideo) -> Result<Vec<f64>> {
        Ok(self.logits(video)?.into_iter().map(sigmoid).collect())
    }

    /// Parameter gradients for an upstream gradient on the logits.
    pub fn backward(&self, cache: &ModelCache, dlogits: &Tensor) -> Result<Model> {
        let (d_yv, d_ya, head) = self.head.backward(&cache.head, dlogits, self.config.visual_dim)?;
        let (_, visual) = self.visual.backward(&cache.visual, &d_yv)?;
        let (_, audio) = self.audio.backward(&cache.audio, &d_ya)?;
        Ok(Model {
            config: self.config.clone(),
            visual,
            audio,
            head,
        })
    }

    /// BCE loss of one video and its flat parameter gradient.
    pub fn loss_and_grads(&self, video: &PaddedVideo) -> Result<(f64, Gradients)> {
        let (logits, cache) = self.forward(video)?;
        let loss = bce_loss(logits.data(), &video.labels);
        let dl = Tensor::vector(bce_grad(logits.data(), &video.labels))?;
        let g = self.backward(&cache, &dl)?;
        Ok((loss, g.flat()))
    }

    fn flat(&self) -> Gradients {
        Gradients(self.named_params().into_iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn zeros_like(&self) -> Model {
        Model {
            config: self.config.clone(),
            visual: self.visual.zeros_like(),
            audio: self.audio.zeros_like(),
            head: ClassifierHead {
                w_hidden: Tensor::zeros(self.head.w_hidden.shape()),
                b_hidden: Tensor::zeros(self.head.b_hidden.shape()),
                w_out: Tensor::zeros(self.head.w_out.shape()),
                b_out: Tensor::zeros(self.head.b_out.shape()),
            },
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Parameterized for Model {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.visual.named_params() {
            out.push((format!("visual.{n}"), t));
        }
        for (n, t) in self.audio.named_params() {
            out.push((format!("audio.{n}"), t));
        }
        out.push(("head.w_hidden".into(), &self.head.w_hidden));
        out.push(("head.b_hidden".into(), &self.head.b_hidden));
        out.push(("head.w_out".into(), &self.head.w_out));
        out.push(("head.b_out".into(), &self.head.b_out));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.visual.params_mut();
        out.extend(self.audio.params_mut());
        out.push(&mut self.head.w_hidden);
        out.push(&mut self.head.b_hidden);
        out.push(&mut self.head.w_out);
        out.push(&mut self.head.b_out);
        out
    }
}
