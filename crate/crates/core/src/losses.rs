//! Deep-supervision segmentation loss, the bottleneck discriminator and the
//! adversarial similarity terms.

use serde::{Deserialize, Serialize};

use crate::dataio::{ChannelMask, MultiModalSample};
use crate::error::{Error, Result};
use crate::params::{init_layers, ConvLayer, LayoutBuilder};
use crate::rng::SeededRng;
use crate::tensor::{leaky_relu, leaky_relu_backward, Real, Tensor, Window};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the dropped-input segmentation loss.
    pub alpha: f64,
    /// Weight of the adversarial similarity (generator) loss.
    pub beta: f64,
    /// Probability floor inside the logarithms.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || !(self.beta >= 0.0 && self.beta.is_finite())
        {
            return Err(Error::config(
                "alpha and beta must be finite and nonnegative",
            ));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::config("eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Keep-vector with exactly one dropped channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMask {
    keep: Vec<bool>,
}

impl DropMask {
    pub fn new(channels: usize, dropped: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Mask(
                "dropping a channel needs at least two channels".into(),
            ));
        }
        if dropped >= channels {
            return Err(Error::Mask(format!(
                "channel {dropped} out of range for {channels}"
            )));
        }
        let mut keep = vec![true; channels];
        keep[dropped] = false;
        Ok(Self { keep })
    }

    pub fn dropped(&self) -> usize {
        self.keep
            .iter()
            .position(|&k| !k)
            .expect("one channel is dropped")
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn to_channel_mask(&self) -> ChannelMask {
        ChannelMask::new(self.keep.clone()).expect("C-1 >= 1 channels kept")
    }
}

/// Class-index map for a batch, `[N][H][W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Label maps at every decoder stage resolution, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedLabels {
    pub stages: Vec<LabelMap>,
}

/// Nearest-neighbor downsampling that keeps the top-left element of every
/// `factor × factor` block.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::shape(format!(
            "factor {factor} is not a power of two"
        )));
    }
    if labels.len() != h * w || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "{h}x{w} label map ({} values) is not divisible by {factor}",
            labels.len()
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(labels[y * factor * w + x * factor]);
        }
    }
    Ok(out)
}

impl StagedLabels {
    /// Stage `k` of `levels` is downsampled by `2^(levels - k)`.
    pub fn from_samples(samples: &[&MultiModalSample], levels: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut stages = Vec::with_capacity(levels);
        for k in 1..=levels {
            let f = 1 << (levels - k);
            let mut data = Vec::with_capacity(samples.len() * h * w / (f * f));
            for s in samples {
                if (s.height, s.width) != (h, w) {
                    return Err(Error::shape("batch samples differ in size"));
                }
                data.extend(downsample_labels(&s.labels, h, w, f)?);
            }
            stages.push(LabelMap {
                n: samples.len(),
                h: h / f,
                w: w / f,
                data,
            });
        }
        Ok(Self { stages })
    }
}

fn check_stage<T: Real>(probs: &Tensor<T>, labels: &LabelMap, k: usize) -> Result<()> {
    if (probs.n, probs.h, probs.w) != (labels.n, labels.h, labels.w) {
        return Err(Error::shape(format!(
            "stage {k}: prediction {}x{}x{}, labels {}x{}x{}",
            probs.n, probs.h, probs.w, labels.n, labels.h, labels.w
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= probs.c) {
        return Err(Error::shape(format!(
            "label {bad} exceeds {} classes",
            probs.c
        )));
    }
    if !probs.is_finite() {
        return Err(Error::NonFinite(format!("stage {k} predictions")));
    }
    Ok(())
}

/// `Σ_k mean_pixels(−log max(p_true, ε))` over all stages.
pub fn seg_loss<T: Real>(probs: &[Tensor<T>], labels: &StagedLabels, eps: f64) -> Result<f64> {
    Ok(seg_loss_grad(probs, labels, eps)?.0)
}

/// Segmentation loss and its gradient w.r.t. each stage's logits
/// (softmax and cross-entropy fused; zero where the floor is active).
pub fn seg_loss_grad<T: Real>(
    probs: &[Tensor<T>],
    labels: &StagedLabels,
    eps: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if probs.len() != labels.stages.len() {
        return Err(Error::shape(format!(
            "{} prediction stages, {} label stages",
            probs.len(),
            labels.stages.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (k, (p, y)) in probs.iter().zip(&labels.stages).enumerate() {
        check_stage(p, y, k + 1)?;
        let sites = p.sites();
        let inv = T::lit(1.0 / sites as f64);
        let mut g = p.clone();
        g.scale(inv);
        let mut stage = 0.0;
        for (s, &cls) in y.data.iter().enumerate() {
            let idx = cls as usize * sites + s;
            let pt = p.data[idx].as_f64();
            if pt > eps {
                stage -= pt.ln();
                g.data[idx] -= inv;
            } else {
                stage -= eps.ln();
                for j in 0..p.c {
                    g.data[j * sites + s] = T::zero();
                }
            }
        }
        total += stage / sites as f64;
        grads.push(g);
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Bottleneck feature width the discriminator reads.
    pub in_channels: usize,
    /// Widths of the two stride-2 convolutions.
    pub widths: [usize; 2],
    /// Logits are clamped to `±logit_clip` before the sigmoid.
    pub logit_clip: f64,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            widths: [32, 64],
            logit_clip: 30.0,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("discriminator widths must be positive"));
        }
        if !(self.logit_clip > 0.0 && self.logit_clip.is_finite()) {
            return Err(Error::config("logit_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLayout {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    /// Affine output, stored as a 1×1 convolution on the pooled features.
    pub out: ConvLayer,
    pub total: usize,
}

impl DiscriminatorLayout {
    pub fn new(cfg: &DiscriminatorConfig) -> Self {
        let down = Window {
            k: 3,
            stride: 2,
            pad: 1,
        };
        let mut b = LayoutBuilder::default();
        let conv1 = b.conv(cfg.in_channels, cfg.widths[0], down, true);
        let conv2 = b.conv(cfg.widths[0], cfg.widths[1], down, true);
        let out = b.dense(cfg.widths[1], 1);
        Self {
            conv1,
            conv2,
            out,
            total: b.total(),
        }
    }
}

/// Discriminator weights θ.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: DiscriminatorConfig,
    pub layout: DiscriminatorLayout,
    pub values: Vec<T>,
}

const DISC_SLOPE: f64 = 0.01;

impl<T: Real> DiscriminatorParams<T> {
    pub fn init(config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let layout = DiscriminatorLayout::new(config);
        let mut rng = SeededRng::with_stream(config.seed, 0x64697363);
        let values = init_layers(
            [
                (&layout.conv1, 1.0),
                (&layout.conv2, 1.0),
                (&layout.out, 1.0),
            ],
            layout.total,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn from_values(config: &DiscriminatorConfig, values: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = DiscriminatorLayout::new(config);
        if values.len() != layout.total {
            return Err(Error::shape(format!(
                "discriminator vector has {} values, layout needs {}",
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

    pub fn cast<U: Real>(&self) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Retained activations of one discriminator pass.
#[derive(Clone, Debug)]
pub struct DiscriminatorPass<T> {
    input: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    pooled: Tensor<T>,
    /// Raw (unclamped) logits, one per batch item.
    pub raw_logits: Vec<T>,
    /// Clamped logits.
    pub logits: Vec<T>,
    /// `sigmoid(logits)`, strictly inside (0, 1) for finite features.
    pub probs: Vec<T>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Run D_θ on a batch of bottleneck maps `[B][N][h][w]`.
pub fn discriminator_pass<T: Real>(
    theta: &DiscriminatorParams<T>,
    f0: &Tensor<T>,
) -> Result<DiscriminatorPass<T>> {
    if f0.c != theta.config.in_channels {
        return Err(Error::shape(format!(
            "discriminator expects {} feature channels, got {}",
            theta.config.in_channels, f0.c
        )));
    }
    let p = &theta.values;
    let slope = T::lit(DISC_SLOPE);
    let h1 = leaky_relu(&theta.layout.conv1.forward(p, f0), slope);
    let h2 = leaky_relu(&theta.layout.conv2.forward(p, &h1), slope);
    // global average pool to [W2][N][1][1]
    let plane = h2.h * h2.w;
    let inv = T::lit(1.0 / plane as f64);
    let mut pooled = Tensor::zeros(h2.c, h2.n, 1, 1);
    for (dst, chunk) in pooled.data.iter_mut().zip(h2.data.chunks(plane)) {
        let mut s = T::zero();
        for &v in chunk {
            s += v;
        }
        *dst = s * inv;
    }
    let out = theta.layout.out.forward(p, &pooled);
    let clip = theta.config.logit_clip;
    let raw_logits = out.data.clone();
    let logits: Vec<T> = raw_logits
        .iter()
        .map(|z| T::lit(z.as_f64().clamp(-clip, clip)))
        .collect();
    let probs = logits.iter().map(|z| T::lit(sigmoid(z.as_f64()))).collect();
    Ok(DiscriminatorPass {
        input: f0.clone(),
        h1,
        h2,
        pooled,
        raw_logits,
        logits,
        probs,
    })
}

/// D_θ(f0) per batch item.
pub fn discriminator_forward<T: Real>(
    theta: &DiscriminatorParams<T>,
    f0: &Tensor<T>,
) -> Result<Vec<T>> {
    Ok(discriminator_pass(theta, f0)?.probs)
}

/// Backpropagate a gradient on the clamped logits. Accumulates into `dtheta`
/// when given; returns the gradient w.r.t. the input features when `want_dx`.
pub fn discriminator_backward<T: Real>(
    theta: &DiscriminatorParams<T>,
    pass: &DiscriminatorPass<T>,
    dlogits: &[T],
    dtheta: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let clip = theta.config.logit_clip;
    let mut dout = Tensor::zeros(1, pass.pooled.n, 1, 1);
    for (i, d) in dlogits.iter().enumerate() {
        // clamp has zero derivative outside the clip range
        if pass.raw_logits[i].as_f64().abs() < clip {
            dout.data[i] = *d;
        }
    }
    let p = &theta.values;
    let mut scratch;
    let grads: &mut [T] = match dtheta {
        Some(g) => g,
        None => {
            scratch = vec![T::zero(); theta.values.len()];
            &mut scratch
        }
    };
    let slope = T::lit(DISC_SLOPE);
    let dpooled = theta
        .layout
        .out
        .backward(p, &pass.pooled, &dout, grads, true)
        .expect("input gradient");
    let plane = pass.h2.h * pass.h2.w;
    let inv = T::lit(1.0 / plane as f64);
    let mut dh2 = Tensor::zeros(pass.h2.c, pass.h2.n, pass.h2.h, pass.h2.w);
    for (chunk, &g) in dh2.data.chunks_mut(plane).zip(&dpooled.data) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    leaky_relu_backward(&pass.h2, &mut dh2, slope);
    let mut dh1 = theta
        .layout
        .conv2
        .backward(p, &pass.h1, &dh2, grads, true)
        .expect("input gradient");
    leaky_relu_backward(&pass.h1, &mut dh1, slope);
    theta
        .layout
        .conv1
        .backward(p, &pass.input, &dh1, grads, want_dx)
}

/// Scaling `(C−1)/C` between dropped- and full-input bottleneck expectations.
pub fn expectation_scale(channels: usize) -> Result<f64> {
    if channels < 2 {
        return Err(Error::config(format!(
            "similarity loss needs at least two channels, got {channels}"
        )));
    }
    Ok((channels as f64 - 1.0) / channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityLosses {
    /// `−[log D(f0_drop) + log(1 − D(s·f0_full))]`, batch mean.
    pub d_loss: f64,
    /// `−log D(s·f0_full)`, batch mean.
    pub g_loss: f64,
}

/// `−log σ(z)`
fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `−log(1 − σ(z))`
fn neg_log_one_minus_sigmoid(z: f64) -> f64 {
    softplus(z)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Both adversarial losses for one pair of bottleneck batches.
pub fn similarity_losses<T: Real>(
    theta: &DiscriminatorParams<T>,
    f0_full: &Tensor<T>,
    f0_drop: &Tensor<T>,
    channels: usize,
) -> Result<SimilarityLosses> {
    let s = expectation_scale(channels)?;
    if !f0_full.same_shape(f0_drop) {
        return Err(Error::shape("full and dropped bottleneck shapes differ"));
    }
    let real = discriminator_pass(theta, f0_drop)?;
    let fake = discriminator_pass(theta, &f0_full.scaled(T::lit(s)))?;
    let d_loss = mean(
        real.logits
            .iter()
            .zip(&fake.logits)
            .map(|(r, f)| neg_log_sigmoid(r.as_f64()) + neg_log_one_minus_sigmoid(f.as_f64())),
    );
    let g_loss = mean(fake.logits.iter().map(|f| neg_log_sigmoid(f.as_f64())));
    Ok(SimilarityLosses { d_loss, g_loss })
}

/// Discriminator loss and its gradient w.r.t. θ only.
pub fn d_loss_grad<T: Real>(
    theta: &DiscriminatorParams<T>,
    f0_full: &Tensor<T>,
    f0_drop: &Tensor<T>,
    channels: usize,
) -> Result<(f64, Vec<T>)> {
    let s = expectation_scale(channels)?;
    if !f0_full.same_shape(f0_drop) {
        return Err(Error::shape("full and dropped bottleneck shapes differ"));
    }
    let real = discriminator_pass(theta, f0_drop)?;
    let fake = discriminator_pass(theta, &f0_full.scaled(T::lit(s)))?;
    let n = real.logits.len() as f64;
    let loss = mean(
        real.logits
            .iter()
            .zip(&fake.logits)
            .map(|(r, f)| neg_log_sigmoid(r.as_f64()) + neg_log_one_minus_sigmoid(f.as_f64())),
    );
    let mut grads = vec![T::zero(); theta.values.len()];
    // d/dz −log σ(z) = σ(z) − 1 ; d/dz −log(1−σ(z)) = σ(z)
    let d_real: Vec<T> = real
        .probs
        .iter()
        .map(|p| T::lit((p.as_f64() - 1.0) / n))
        .collect();
    let d_fake: Vec<T> = fake.probs.iter().map(|p| T::lit(p.as_f64() / n)).collect();
    discriminator_backward(theta, &real, &d_real, Some(&mut grads), false);
    discriminator_backward(theta, &fake, &d_fake, Some(&mut grads), false);
    Ok((loss, grads))
}

/// Generator loss and its gradient w.r.t. `f0_full`; θ is held fixed and
/// receives no gradient.
pub fn g_loss_grad<T: Real>(
    theta: &DiscriminatorParams<T>,
    f0_full: &Tensor<T>,
    channels: usize,
) -> Result<(f64, Tensor<T>)> {
    let s = expectation_scale(channels)?;
    let fake = discriminator_pass(theta, &f0_full.scaled(T::lit(s)))?;
    let n = fake.logits.len() as f64;
    let loss = mean(fake.logits.iter().map(|f| neg_log_sigmoid(f.as_f64())));
    let dlogits: Vec<T> = fake
        .probs
        .iter()
        .map(|p| T::lit((p.as_f64() - 1.0) / n))
        .collect();
    let mut dx =
        discriminator_backward(theta, &fake, &dlogits, None, true).expect("input gradient");
    dx.scale(T::lit(s));
    Ok((loss, dx))
}

/// `loss_full + α·loss_drop + β·g_loss`.
pub fn total_loss(loss_full: f64, loss_drop: f64, g_loss: f64, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [
        ("loss_full", loss_full),
        ("loss_drop", loss_drop),
        ("g_loss", g_loss),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    // a zero weight removes its term even when the term itself is huge
    let drop = if cfg.alpha == 0.0 {
        0.0
    } else {
        cfg.alpha * loss_drop
    };
    let sim = if cfg.beta == 0.0 {
        0.0
    } else {
        cfg.beta * g_loss
    };
    Ok(loss_full + drop + sim)
}
