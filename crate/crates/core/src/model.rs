//! Channel-separate-encoder U-Net with summed fusion.
//!
//! Each input channel runs through its own encoder. The decoder never sees a
//! channel directly, only bias-free convolutions of its encoder features:
//!
//! ```text
//! f_0 = Σ_{c ∈ avail} W_0^c(f̂_0^c)                      (bottleneck)
//! f_i = Σ_{c ∈ avail} Ŵ_i^c(f̂_i^c) + W_i(act(f_{i-1}))   (stage i = 1..L)
//! ```
//!
//! `W_i` is a stride-2 transposed convolution. The encoder yields L feature
//! levels, level 0 being the deepest; the bottleneck consumes level 0 and
//! stage i consumes level i for i < L, so the full-resolution stage L has no
//! skip terms. Every stage feeds a 1×1 softmax head (deep supervision).
//!
//! Because fusion and skip kernels have no bias, leaving a channel out of the
//! sums is exactly the same as feeding zero features for it.

use serde::{Deserialize, Serialize};

use crate::dataio::{ChannelMask, MultiModalSample};
use crate::error::{Error, Result};
use crate::params::{init_layers, ConvLayer, LayoutBuilder};
use crate::rng::SeededRng;
use crate::tensor::{
    self, leaky_relu, leaky_relu_backward, softmax_channels, Real, Tensor, Window,
};

const CONV3: Window = Window {
    k: 3,
    stride: 1,
    pad: 1,
};
const CONV3_DOWN: Window = Window {
    k: 3,
    stride: 2,
    pad: 1,
};
const DECONV4_UP: Window = Window {
    k: 4,
    stride: 2,
    pad: 1,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// Leaky rectifier with slope 0.01.
    LeakyRelu,
    Relu,
}

impl Nonlinearity {
    pub fn negative_slope(self) -> f64 {
        match self {
            Nonlinearity::LeakyRelu => 0.01,
            Nonlinearity::Relu => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Number of downsampling levels, equal to the number of decoder stages.
    pub levels: usize,
    /// Encoder width per level, finest first.
    pub encoder_widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            classes: 4,
            height: 64,
            width: 64,
            levels: 3,
            encoder_widths: vec![16, 32, 64],
            bottleneck_width: 64,
            nonlinearity: Nonlinearity::LeakyRelu,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if self.channels == 0 || self.classes < 2 {
            return Err(Error::config("need at least one channel and two classes"));
        }
        if self.encoder_widths.len() != self.levels {
            return Err(Error::config(format!(
                "encoder_widths has {} entries for {} levels",
                self.encoder_widths.len(),
                self.levels
            )));
        }
        if self.encoder_widths.contains(&0) || self.bottleneck_width == 0 {
            return Err(Error::config("widths must be positive"));
        }
        let unit = 1usize << self.levels;
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(unit)
            || !self.width.is_multiple_of(unit)
        {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by 2^{} = {unit}",
                self.height, self.width, self.levels
            )));
        }
        Ok(())
    }

    /// Spatial size of encoder level `i` (0 = deepest).
    pub fn level_size(&self, i: usize) -> (usize, usize) {
        let f = 1 << (self.levels - i);
        (self.height / f, self.width / f)
    }

    /// Spatial size of decoder stage `k` (1..=L); stage L is full resolution.
    pub fn stage_size(&self, k: usize) -> (usize, usize) {
        let f = 1 << (self.levels - k);
        (self.height / f, self.width / f)
    }

    /// Feature width of encoder level `i` (0 = deepest).
    pub fn level_width(&self, i: usize) -> usize {
        self.encoder_widths[self.levels - 1 - i]
    }

    /// Feature width of decoder stage `k` (1..=L).
    pub fn stage_width(&self, k: usize) -> usize {
        if k < self.levels {
            self.level_width(k)
        } else {
            self.encoder_widths[0]
        }
    }
}

/// Parameter slots of the whole network, in canonical order:
/// encoders (channel-major, finest level first, two convolutions per level),
/// bottleneck fusion kernels per channel, then per stage the skip kernels per
/// channel, the upsampling kernel and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    /// `[channel][level, finest first] -> (stride-1 conv, stride-2 conv)`.
    pub encoder: Vec<Vec<(ConvLayer, ConvLayer)>>,
    /// `W_0^c`, bias-free.
    pub fusion: Vec<ConvLayer>,
    /// `[stage-1][channel]`, `Ŵ_i^c`, bias-free; empty for the last stage.
    pub skip: Vec<Vec<ConvLayer>>,
    /// `W_i` per stage.
    pub up: Vec<ConvLayer>,
    /// 1×1 head per stage.
    pub head: Vec<ConvLayer>,
    pub total: usize,
}

impl ModelLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let mut encoder = Vec::with_capacity(cfg.channels);
        for _ in 0..cfg.channels {
            let mut levels = Vec::with_capacity(cfg.levels);
            let mut cin = 1;
            for (l, &width) in cfg.encoder_widths.iter().enumerate() {
                // the very first convolution is bias-free so a zero image gives
                // zero first-layer pre-activations
                let a = b.conv(cin, width, CONV3, l > 0);
                let d = b.conv(width, width, CONV3_DOWN, true);
                levels.push((a, d));
                cin = width;
            }
            encoder.push(levels);
        }
        let fusion = (0..cfg.channels)
            .map(|_| b.conv(cfg.level_width(0), cfg.bottleneck_width, CONV3, false))
            .collect();
        let mut skip = Vec::with_capacity(cfg.levels);
        let mut up = Vec::with_capacity(cfg.levels);
        let mut head = Vec::with_capacity(cfg.levels);
        let mut prev = cfg.bottleneck_width;
        for k in 1..=cfg.levels {
            let width = cfg.stage_width(k);
            let skips = if k < cfg.levels {
                (0..cfg.channels)
                    .map(|_| b.conv(cfg.level_width(k), width, CONV3, false))
                    .collect()
            } else {
                Vec::new()
            };
            skip.push(skips);
            up.push(b.conv_transpose(prev, width, DECONV4_UP, true));
            head.push(b.dense(width, cfg.classes));
            prev = width;
        }
        Self {
            encoder,
            fusion,
            skip,
            up,
            head,
            total: b.total(),
        }
    }
}

/// Configuration plus a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub values: Vec<T>,
}

/// Deterministic fan-in scaled initialization from `config.seed`.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let layout = ModelLayout::new(config);
    let mut rng = SeededRng::with_stream(config.seed, 0x6d6f64656c);
    let c = config.channels as f64;
    let mut layers: Vec<(&ConvLayer, f64)> = Vec::new();
    for ch in &layout.encoder {
        for (a, d) in ch {
            layers.push((a, 1.0));
            layers.push((d, 1.0));
        }
    }
    // summed branches are scaled so the fused sum starts at unit-ish variance
    for f in &layout.fusion {
        layers.push((f, 1.0 / c.sqrt()));
    }
    for k in 0..config.levels {
        let terms = (layout.skip[k].len() + 1) as f64;
        for s in &layout.skip[k] {
            layers.push((s, 1.0 / terms.sqrt()));
        }
        layers.push((&layout.up[k], 1.0 / terms.sqrt()));
        layers.push((&layout.head[k], 1.0));
    }
    let values = init_layers(layers, layout.total, &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        layout,
        values,
    })
}

impl<T: Real> ModelParams<T> {
    pub fn from_values(config: &ModelConfig, values: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(config);
        if values.len() != layout.total {
            return Err(Error::shape(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.total
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn slope(&self) -> T {
        T::lit(self.config.nonlinearity.negative_slope())
    }

    fn act(&self, z: &Tensor<T>) -> Tensor<T> {
        leaky_relu(z, self.slope())
    }
}

/// Stack samples into one `[1][N][H][W]` tensor per channel.
pub fn batch_input<T: Real>(samples: &[&MultiModalSample]) -> Result<Vec<Tensor<T>>> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let (h, w, c) = (first.height, first.width, first.num_channels());
    for s in samples {
        s.validate()?;
        if s.height != h || s.width != w || s.num_channels() != c {
            return Err(Error::shape(format!(
                "sample {} is {}x{}x{}, batch is {c}x{h}x{w}",
                s.sample_id,
                s.num_channels(),
                s.height,
                s.width
            )));
        }
    }
    Ok((0..c)
        .map(|ch| {
            let imgs: Vec<&[f32]> = samples.iter().map(|s| s.channels[ch].as_slice()).collect();
            tensor::stack_images(&imgs, h, w)
        })
        .collect())
}

/// Activations of one channel's encoder, retained for backpropagation.
#[derive(Clone, Debug)]
pub struct ChannelEncoding<T> {
    pub input: Tensor<T>,
    /// Output of the stride-1 convolution per level, finest first.
    pub mid: Vec<Tensor<T>>,
    /// Output of the stride-2 convolution per level, finest first.
    pub out: Vec<Tensor<T>>,
    /// Unfolded inputs of both convolutions per level, reused by the
    /// backward pass; cleared when the features are edited.
    unfolded: Vec<(Option<Vec<T>>, Option<Vec<T>>)>,
}

impl<T: Real> ChannelEncoding<T> {
    /// Feature map `f̂_i` (level 0 = deepest).
    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.out[self.out.len() - 1 - i]
    }

    pub fn levels(&self) -> usize {
        self.out.len()
    }
}

/// Per-channel encoder features; channels that were not encoded are `None`.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    pub channels: Vec<Option<ChannelEncoding<T>>>,
}

impl<T: Real> EncoderFeatures<T> {
    pub fn feature(&self, c: usize, level: usize) -> Option<&Tensor<T>> {
        self.channels.get(c)?.as_ref().map(|e| e.level(level))
    }

    /// Replace channel `c`'s features by zero maps of the same shape.
    pub fn zero_channel(&mut self, c: usize) {
        if let Some(Some(enc)) = self.channels.get_mut(c) {
            for t in enc.out.iter_mut().chain(enc.mid.iter_mut()) {
                t.data.iter_mut().for_each(|v| *v = T::zero());
            }
            enc.unfolded.iter_mut().for_each(|u| *u = (None, None));
        }
    }
}

/// Run channel `c`'s encoder on a `[1][N][H][W]` image batch.
pub fn encode_channel<T: Real>(
    params: &ModelParams<T>,
    c: usize,
    image: &Tensor<T>,
) -> Result<ChannelEncoding<T>> {
    let cfg = &params.config;
    if c >= cfg.channels {
        return Err(Error::shape(format!(
            "channel {c} out of range for {}",
            cfg.channels
        )));
    }
    if image.c != 1 || image.h != cfg.height || image.w != cfg.width {
        return Err(Error::shape(format!(
            "encoder input is {}x{}x{}, model expects 1x{}x{}",
            image.c, image.h, image.w, cfg.height, cfg.width
        )));
    }
    let p = &params.values;
    let mut mid = Vec::with_capacity(cfg.levels);
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(cfg.levels);
    let mut unfolded = Vec::with_capacity(cfg.levels);
    for (a, d) in &params.layout.encoder[c] {
        let x = out.last().unwrap_or(image);
        let (za, ua) = a.forward_keep(p, x);
        let m = params.act(&za);
        let (zd, ud) = d.forward_keep(p, &m);
        let o = params.act(&zd);
        mid.push(m);
        out.push(o);
        unfolded.push((ua, ud));
    }
    Ok(ChannelEncoding {
        input: image.clone(),
        mid,
        out,
        unfolded,
    })
}

/// Encode every channel the mask makes available.
pub fn encode<T: Real>(
    params: &ModelParams<T>,
    input: &[Tensor<T>],
    mask: &ChannelMask,
) -> Result<EncoderFeatures<T>> {
    check_mask(params, mask)?;
    if input.len() != params.config.channels {
        return Err(Error::shape(format!(
            "{} input channels, model has {}",
            input.len(),
            params.config.channels
        )));
    }
    let channels = input
        .iter()
        .enumerate()
        .map(|(c, img)| {
            if mask.is_available(c) {
                encode_channel(params, c, img).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    Ok(EncoderFeatures { channels })
}

fn check_mask<T: Real>(params: &ModelParams<T>, mask: &ChannelMask) -> Result<()> {
    if mask.len() != params.config.channels {
        return Err(Error::Mask(format!(
            "mask has {} entries, model has {} channels",
            mask.len(),
            params.config.channels
        )));
    }
    if mask.available_channels().next().is_none() {
        return Err(Error::Mask("empty channel mask".into()));
    }
    Ok(())
}

fn available_feature<T: Real>(
    enc: &EncoderFeatures<T>,
    c: usize,
    level: usize,
) -> Result<&Tensor<T>> {
    enc.feature(c, level)
        .ok_or_else(|| Error::Mask(format!("channel {c} is available but was not encoded")))
}

/// Bottleneck pre-activation `f_0 = Σ_{c ∈ mask} W_0^c(f̂_0^c)`.
pub fn fuse_bottleneck<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    mask: &ChannelMask,
) -> Result<Tensor<T>> {
    check_mask(params, mask)?;
    let terms = DecoderTerms::compute(params, enc, mask, Some(0))?;
    Ok(terms.sum(0, mask).expect("mask is nonempty"))
}

/// Pre- and post-activation features of one decoder stage.
#[derive(Clone, Debug)]
pub struct StageFeatures<T> {
    /// Summed pre-activation (what the linearity identities are stated on).
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
}

/// Decoder stage `k` (1..=L): upsample the previous stage and add the skip
/// terms of the available channels.
pub fn decode_stage<T: Real>(
    params: &ModelParams<T>,
    k: usize,
    prev: &Tensor<T>,
    enc: &EncoderFeatures<T>,
    mask: &ChannelMask,
) -> Result<StageFeatures<T>> {
    let cfg = &params.config;
    if k == 0 || k > cfg.levels {
        return Err(Error::shape(format!(
            "stage {k} out of range 1..={}",
            cfg.levels
        )));
    }
    check_mask(params, mask)?;
    let terms = DecoderTerms::compute(params, enc, mask, Some(k))?;
    stage_from_terms(params, k, prev, &terms, mask)
}

fn stage_from_terms<T: Real>(
    params: &ModelParams<T>,
    k: usize,
    prev: &Tensor<T>,
    terms: &DecoderTerms<T>,
    mask: &ChannelMask,
) -> Result<StageFeatures<T>> {
    let up = &params.layout.up[k - 1];
    if prev.c != up.cin {
        return Err(Error::shape(format!(
            "stage {k} expects {} input features, got {}",
            up.cin, prev.c
        )));
    }
    let mut pre = up.forward(&params.values, prev);
    for c in mask.available_channels() {
        if let Some(t) = terms.term(k, c) {
            if (t.h, t.w) != (pre.h, pre.w) {
                return Err(Error::shape(format!(
                    "stage {k}: upsampled map is {}x{}, skip features are {}x{}",
                    pre.h, pre.w, t.h, t.w
                )));
            }
            pre.add_assign(t);
        }
    }
    let post = params.act(&pre);
    Ok(StageFeatures { pre, post })
}

/// 1×1 head: returns `(logits, probabilities)` over the class axis.
pub fn stage_head<T: Real>(
    params: &ModelParams<T>,
    k: usize,
    features: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if k == 0 || k > params.config.levels {
        return Err(Error::shape(format!("stage {k} out of range")));
    }
    let head = &params.layout.head[k - 1];
    if features.c != head.cin {
        return Err(Error::shape(format!(
            "head {k} expects {} features, got {}",
            head.cin, features.c
        )));
    }
    let logits = head.forward(&params.values, features);
    let probs = softmax_channels(&logits);
    Ok((logits, probs))
}

/// Per-channel fusion (stage 0) and skip (stages 1..L) terms, computed once
/// and shared by every mask decoded from the same encoder features.
#[derive(Clone, Debug)]
pub struct DecoderTerms<T> {
    /// `[stage][channel]`; `None` where the channel was not requested or the
    /// stage has no skip term.
    terms: Vec<Vec<Option<Tensor<T>>>>,
    unfolded: Vec<Vec<Option<Vec<T>>>>,
}

impl<T: Real> DecoderTerms<T> {
    /// Terms for every channel available in `channels`; `only` restricts the
    /// work to a single stage.
    fn compute(
        params: &ModelParams<T>,
        enc: &EncoderFeatures<T>,
        channels: &ChannelMask,
        only: Option<usize>,
    ) -> Result<Self> {
        let cfg = &params.config;
        let p = &params.values;
        let mut terms = vec![vec![None; cfg.channels]; cfg.levels + 1];
        let mut unfolded = vec![vec![None; cfg.channels]; cfg.levels + 1];
        for k in 0..=cfg.levels {
            if only.is_some_and(|s| s != k) {
                continue;
            }
            for c in channels.available_channels() {
                let layer = if k == 0 {
                    Some(&params.layout.fusion[c])
                } else {
                    params.layout.skip[k - 1].get(c)
                };
                if let Some(layer) = layer {
                    let (t, u) = layer.forward_keep(p, available_feature(enc, c, k)?);
                    terms[k][c] = Some(t);
                    unfolded[k][c] = u;
                }
            }
        }
        Ok(Self { terms, unfolded })
    }

    fn term(&self, k: usize, c: usize) -> Option<&Tensor<T>> {
        self.terms[k][c].as_ref()
    }

    /// Sum of stage `k` terms over the channels in `mask`, in channel order.
    fn sum(&self, k: usize, mask: &ChannelMask) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for c in mask.available_channels() {
            if let Some(t) = self.term(k, c) {
                match acc.as_mut() {
                    Some(a) => a.add_assign(t),
                    None => acc = Some(t.clone()),
                }
            }
        }
        acc
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct StagedPrediction<T> {
    pub mask: ChannelMask,
    /// Stage 0 is the bottleneck (`pre` = f_0); stages 1..=L follow.
    pub stages: Vec<StageFeatures<T>>,
    /// Per stage 1..=L, `[K][N][h][w]`.
    pub logits: Vec<Tensor<T>>,
    pub probs: Vec<Tensor<T>>,
}

impl<T: Real> StagedPrediction<T> {
    /// Bottleneck pre-activation `f_0`.
    pub fn bottleneck(&self) -> &Tensor<T> {
        &self.stages[0].pre
    }

    /// Full-resolution class probabilities.
    pub fn final_probs(&self) -> &Tensor<T> {
        self.probs.last().expect("at least one stage")
    }
}

fn decode_from_terms<T: Real>(
    params: &ModelParams<T>,
    terms: &DecoderTerms<T>,
    mask: &ChannelMask,
) -> Result<StagedPrediction<T>> {
    let z0 = terms
        .sum(0, mask)
        .ok_or_else(|| Error::Mask("mask selects no encoded channel".into()))?;
    let a0 = params.act(&z0);
    let mut stages = vec![StageFeatures { pre: z0, post: a0 }];
    let mut logits = Vec::with_capacity(params.config.levels);
    let mut probs = Vec::with_capacity(params.config.levels);
    for k in 1..=params.config.levels {
        let s = stage_from_terms(params, k, &stages[k - 1].post, terms, mask)?;
        let (l, p) = stage_head(params, k, &s.post)?;
        stages.push(s);
        logits.push(l);
        probs.push(p);
    }
    Ok(StagedPrediction {
        mask: mask.clone(),
        stages,
        logits,
        probs,
    })
}

/// Decode from already computed encoder features.
pub fn decode<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    mask: &ChannelMask,
) -> Result<StagedPrediction<T>> {
    Ok(decode_masks(params, enc, std::slice::from_ref(mask))?
        .1
        .remove(0))
}

/// Decode several masks from the same encoder features, computing each
/// channel's fusion and skip terms once. The terms are returned for
/// [`backward_decoders`].
pub fn decode_masks<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    masks: &[ChannelMask],
) -> Result<(DecoderTerms<T>, Vec<StagedPrediction<T>>)> {
    let c = params.config.channels;
    for m in masks {
        check_mask(params, m)?;
    }
    let union: Vec<bool> = (0..c)
        .map(|ch| masks.iter().any(|m| m.is_available(ch)))
        .collect();
    let union = ChannelMask::new(union)?;
    let terms = DecoderTerms::compute(params, enc, &union, None)?;
    let preds = masks
        .iter()
        .map(|m| decode_from_terms(params, &terms, m))
        .collect::<Result<_>>()?;
    Ok((terms, preds))
}

/// Masked forward pass: only available channels are encoded and fused.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    input: &[Tensor<T>],
    mask: &ChannelMask,
) -> Result<StagedPrediction<T>> {
    let enc = encode(params, input, mask)?;
    decode(params, &enc, mask)
}

/// Gradients flowing into a prediction.
pub struct PredictionGrad<T> {
    /// Loss gradient w.r.t. each stage's logits (stage 1..=L), if any.
    pub logits: Vec<Option<Tensor<T>>>,
    /// Extra gradient on the bottleneck pre-activation `f_0`.
    pub bottleneck: Option<Tensor<T>>,
}

/// Accumulated gradients w.r.t. encoder features, `[channel][level]`.
#[derive(Clone, Debug)]
pub struct FeatureGrads<T> {
    pub grads: Vec<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> FeatureGrads<T> {
    pub fn new(channels: usize, levels: usize) -> Self {
        Self {
            grads: vec![vec![None; levels]; channels],
        }
    }

    fn add(&mut self, c: usize, level: usize, g: Tensor<T>) {
        match &mut self.grads[c][level] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate<T: Real>(acc: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match acc.as_mut() {
        Some(a) => a.add_assign(g),
        None => *acc = Some(g.clone()),
    }
}

/// Backpropagate through the decoder of `pred`, accumulating parameter
/// gradients into `dparams` and encoder-feature gradients into `dfeat`.
pub fn backward_decoder<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    pred: &StagedPrediction<T>,
    grad: &PredictionGrad<T>,
    dparams: &mut [T],
    dfeat: &mut FeatureGrads<T>,
) -> Result<()> {
    let terms = DecoderTerms::compute(params, enc, &pred.mask, None)?;
    backward_decoders(params, enc, &terms, &[(pred, grad)], dparams, dfeat)
}

/// Backpropagate several predictions decoded from the same terms. Gradients
/// reaching a fusion or skip kernel from different predictions are summed
/// before the kernel's backward pass, so each kernel is visited once.
pub fn backward_decoders<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    terms: &DecoderTerms<T>,
    items: &[(&StagedPrediction<T>, &PredictionGrad<T>)],
    dparams: &mut [T],
    dfeat: &mut FeatureGrads<T>,
) -> Result<()> {
    let cfg = &params.config;
    let p = &params.values;
    let slope = params.slope();
    let levels = cfg.levels;
    // summed pre-activation gradient per (stage, channel) reaching the terms
    let mut dterm: Vec<Vec<Option<Tensor<T>>>> = vec![vec![None; cfg.channels]; levels + 1];
    for (pred, grad) in items {
        if grad.logits.len() != levels {
            return Err(Error::shape("one logit gradient slot per stage required"));
        }
        // gradient w.r.t. the post-activation of the stage being processed
        let mut carry: Option<Tensor<T>> = None;
        for k in (1..=levels).rev() {
            let stage = &pred.stages[k];
            let mut dpost = carry.take();
            if let Some(dl) = &grad.logits[k - 1] {
                let d = params.layout.head[k - 1]
                    .backward(p, &stage.post, dl, dparams, true)
                    .expect("requested input gradient");
                match dpost.as_mut() {
                    Some(acc) => acc.add_assign(&d),
                    None => dpost = Some(d),
                }
            }
            let Some(mut dz) = dpost else {
                continue;
            };
            leaky_relu_backward(&stage.post, &mut dz, slope);
            for c in pred.mask.available_channels() {
                if terms.term(k, c).is_some() {
                    accumulate(&mut dterm[k][c], &dz);
                }
            }
            carry =
                params.layout.up[k - 1].backward(p, &pred.stages[k - 1].post, &dz, dparams, true);
        }
        let mut dz0 = carry.map(|mut d| {
            leaky_relu_backward(&pred.stages[0].post, &mut d, slope);
            d
        });
        if let Some(extra) = &grad.bottleneck {
            accumulate(&mut dz0, extra);
        }
        if let Some(dz0) = dz0 {
            for c in pred.mask.available_channels() {
                accumulate(&mut dterm[0][c], &dz0);
            }
        }
    }
    for (k, per_channel) in dterm.iter().enumerate() {
        for (c, d) in per_channel.iter().enumerate() {
            let Some(d) = d else { continue };
            let layer = if k == 0 {
                &params.layout.fusion[c]
            } else {
                &params.layout.skip[k - 1][c]
            };
            let f = available_feature(enc, c, k)?;
            let df = layer
                .backward_from(p, f, terms.unfolded[k][c].as_deref(), d, dparams, true)
                .expect("input gradient");
            dfeat.add(c, k, df);
        }
    }
    Ok(())
}

/// Backpropagate encoder-feature gradients into the encoder parameters.
pub fn backward_encoder<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderFeatures<T>,
    dfeat: &FeatureGrads<T>,
    dparams: &mut [T],
) {
    let levels = params.config.levels;
    let slope = params.slope();
    let p = &params.values;
    for (c, slot) in enc.channels.iter().enumerate() {
        let Some(e) = slot else { continue };
        let mut carry: Option<Tensor<T>> = None;
        for l in (0..levels).rev() {
            let level = levels - 1 - l;
            let mut d = carry.take();
            if let Some(g) = &dfeat.grads[c][level] {
                accumulate(&mut d, g);
            }
            let Some(mut d) = d else { continue };
            let (conv_a, conv_d) = &params.layout.encoder[c][l];
            let (ua, ud) = e
                .unfolded
                .get(l)
                .map_or((None, None), |(a, d)| (a.as_deref(), d.as_deref()));
            leaky_relu_backward(&e.out[l], &mut d, slope);
            let mut dmid = conv_d
                .backward_from(p, &e.mid[l], ud, &d, dparams, true)
                .expect("input gradient");
            leaky_relu_backward(&e.mid[l], &mut dmid, slope);
            let x = if l == 0 { &e.input } else { &e.out[l - 1] };
            carry = conv_a.backward_from(p, x, ua, &dmid, dparams, l > 0);
        }
    }
}
