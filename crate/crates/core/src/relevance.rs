//! Per-pixel weight of evidence of each input channel for each class, and
//! heatmap export.
//!
//! `WE_c(j) = log2 odds(p_full(j)) − log2 odds(p_missing_c(j))`, computed on
//! the full-resolution probabilities. Positive values mean channel `c`
//! supports class `j` at that pixel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{ChannelMask, MultiModalSample, CHANNEL_NAMES, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::{batch_input, decode, encode, ModelParams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OddsConfig {
    /// Probabilities are clipped to `[eps, 1 − eps]` before taking odds.
    pub eps: f64,
}

impl Default for OddsConfig {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

impl OddsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::config("odds eps must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Largest attainable `|WE|`.
    pub fn bound(&self) -> f64 {
        2.0 * ((1.0 - self.eps) / self.eps).log2()
    }
}

pub fn odds(p: f64, cfg: &OddsConfig) -> f64 {
    let p = p.clamp(cfg.eps, 1.0 - cfg.eps);
    p / (1.0 - p)
}

/// Weight of evidence from the two probabilities at one pixel.
pub fn evidence(p_full: f64, p_missing: f64, cfg: &OddsConfig) -> f64 {
    let bound = cfg.bound();
    // clamping at 1 − eps leaves 1 − p an ulp away from eps
    (odds(p_full, cfg).log2() - odds(p_missing, cfg).log2()).clamp(-bound, bound)
}

/// [`evidence`] applied pixelwise.
pub fn evidence_map(p_full: &[f64], p_missing: &[f64], cfg: &OddsConfig) -> Result<Vec<f64>> {
    if p_full.len() != p_missing.len() {
        return Err(Error::shape("probability maps differ in size"));
    }
    Ok(p_full
        .iter()
        .zip(p_missing)
        .map(|(&a, &b)| evidence(a, b, cfg))
        .collect())
}

/// Signed evidence indexed `(channel, class, pixel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub sample_id: String,
    pub channels: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RelevanceMap {
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.classes, self.height, self.width]
    }

    pub fn get(&self, channel: usize, class: usize) -> &[f64] {
        let plane = self.height * self.width;
        let off = (channel * self.classes + class) * plane;
        &self.data[off..off + plane]
    }
}

fn class_plane<T: Real>(probs: &Tensor<T>, class: usize) -> Vec<f64> {
    let plane = probs.h * probs.w;
    // single-item batch: class k occupies one contiguous plane
    probs.data[class * plane..(class + 1) * plane]
        .iter()
        .map(|v| v.as_f64())
        .collect()
}

struct SampleProbs {
    full: Vec<Vec<f64>>,
    missing: Vec<Vec<Vec<f64>>>,
}

/// Full-resolution class probabilities with all channels and with each of
/// `channels` missing.
fn sample_probs<T: Real>(
    params: &ModelParams<T>,
    sample: &MultiModalSample,
    channels: &[usize],
) -> Result<SampleProbs> {
    let c = params.config.channels;
    let k = params.config.classes;
    let input = batch_input::<T>(&[sample])?;
    let full_mask = ChannelMask::full(c);
    let enc = encode(params, &input, &full_mask)?;
    let planes = |mask: &ChannelMask| -> Result<Vec<Vec<f64>>> {
        let pred = decode(params, &enc, mask)?;
        Ok((0..k).map(|j| class_plane(pred.final_probs(), j)).collect())
    };
    let full = planes(&full_mask)?;
    let missing = channels
        .iter()
        .map(|&ch| planes(&ChannelMask::without(c, ch)?))
        .collect::<Result<_>>()?;
    Ok(SampleProbs { full, missing })
}

fn check_indices<T: Real>(params: &ModelParams<T>, channel: usize, class: usize) -> Result<()> {
    if channel >= params.config.channels {
        return Err(Error::Mask(format!(
            "channel {channel} out of range for {}",
            params.config.channels
        )));
    }
    if class >= params.config.classes {
        return Err(Error::config(format!(
            "class {class} out of range for {}",
            params.config.classes
        )));
    }
    Ok(())
}

/// `H×W` evidence of `channel` for `class` on one sample.
pub fn weight_of_evidence<T: Real>(
    params: &ModelParams<T>,
    sample: &MultiModalSample,
    channel: usize,
    class: usize,
    cfg: &OddsConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_indices(params, channel, class)?;
    let probs = sample_probs(params, sample, &[channel])?;
    evidence_map(&probs.full[class], &probs.missing[0][class], cfg)
}

/// Evidence for every (channel, class) pair.
pub fn relevance_report<T: Real>(
    params: &ModelParams<T>,
    sample: &MultiModalSample,
    cfg: &OddsConfig,
) -> Result<RelevanceMap> {
    cfg.validate()?;
    let (c, k) = (params.config.channels, params.config.classes);
    let all: Vec<usize> = (0..c).collect();
    let probs = sample_probs(params, sample, &all)?;
    let mut data = Vec::with_capacity(c * k * sample.height * sample.width);
    for ch in 0..c {
        for j in 0..k {
            data.extend(evidence_map(&probs.full[j], &probs.missing[ch][j], cfg)?);
        }
    }
    Ok(RelevanceMap {
        sample_id: sample.sample_id.clone(),
        channels: c,
        classes: k,
        height: sample.height,
        width: sample.width,
        data,
    })
}

/// Diverging red / white / blue color for `v`, scaled by `v_max`.
pub fn diverging_color(v: f64, v_max: f64) -> [u8; 3] {
    let t = (v / v_max).clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Binary PPM with the color scale normalized by the map's largest magnitude.
pub fn encode_ppm(map: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if map.len() != height * width {
        return Err(Error::shape(format!(
            "map has {} values, expected {height}x{width}",
            map.len()
        )));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("relevance map".into()));
    }
    let v_max = map.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-9);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * map.len());
    for &v in map {
        out.extend_from_slice(&diverging_color(v, v_max));
    }
    Ok(out)
}

pub const WEMP_MAGIC: &[u8; 4] = b"WEMP";

/// `"WEMP" | u32 H | u32 W | u32 0 | f32[H·W]`, little-endian.
pub fn encode_wemp(map: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if map.len() != height * width {
        return Err(Error::shape(format!(
            "map has {} values, expected {height}x{width}",
            map.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(WEMP_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in map {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, values)`.
pub fn decode_wemp(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != WEMP_MAGIC {
        return Err(Error::format("bad magic, not a relevance dump"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(1), word(2));
    let expected = 16 + 4 * h * w;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

pub fn read_wemp(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_wemp(&fs::read(path)?)
}

/// `{sample_id}_{channel}_{class}`
pub fn heatmap_stem(sample_id: &str, channel: usize, class: usize) -> String {
    let name = |names: &[&str], i: usize| {
        names
            .get(i)
            .map_or_else(|| i.to_string(), |n| n.to_string())
    };
    format!(
        "{sample_id}_{}_{}",
        name(&CHANNEL_NAMES, channel),
        name(&CLASS_NAMES, class)
    )
}

/// Write `{stem}.ppm` and `{stem}.wemp` into `dir`; returns both paths.
pub fn export_heatmap(
    map: &[f64],
    height: usize,
    width: usize,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let ppm = encode_ppm(map, height, width)?;
    let wemp = encode_wemp(map, height, width)?;
    let ppm_path = dir.join(format!("{stem}.ppm"));
    let wemp_path = dir.join(format!("{stem}.wemp"));
    fs::write(&ppm_path, ppm)?;
    fs::write(&wemp_path, wemp)?;
    Ok((ppm_path, wemp_path))
}
