//! Samples, channel masks, preprocessing, the on-disk sample format and the
//! synthetic multi-modality generator.

mod format;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    decode_sample, encode_sample, format_crc64, read_sample, write_sample, Dataset, Manifest,
    Split, SAMPLE_EXTENSION, SAMPLE_MAGIC, SAMPLE_VERSION,
};
pub use synthetic::{
    generate_samples, generate_synthetic_dataset, synthesize_sample, ContrastSpec, Ellipse,
    SyntheticSpec, TumorGeometry,
};

/// Modality names in channel order.
pub const CHANNEL_NAMES: [&str; 4] = ["T1", "T1c", "T2", "FLAIR"];

/// Canonical class names: background, necrotic/non-enhancing core, edema,
/// enhancing tumor.
pub const CLASS_NAMES: [&str; 4] = ["BG", "NCR", "ED", "ET"];

pub const NUM_CLASSES: usize = 4;

/// Map a raw annotation value (0, 1, 2, 4) to its canonical class index.
pub fn canonical_label(raw: u8) -> Result<u8> {
    match raw {
        0 => Ok(0),
        1 => Ok(1),
        2 => Ok(2),
        4 => Ok(3),
        other => Err(Error::format(format!(
            "raw label {other} is not one of 0,1,2,4"
        ))),
    }
}

/// Inverse of [`canonical_label`].
pub fn raw_label(class: u8) -> Result<u8> {
    match class {
        0..=2 => Ok(class),
        3 => Ok(4),
        other => Err(Error::format(format!("class index {other} out of range"))),
    }
}

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
}

/// `C` aligned single-channel images plus a class-index label map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    /// One row-major `height × width` image per channel.
    pub channels: Vec<Vec<f32>>,
    /// Canonical class indices in `0..4`.
    pub labels: Vec<u8>,
}

impl MultiModalSample {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        if self.channels.is_empty() {
            return Err(Error::shape("sample has no channels"));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.len() != plane {
                return Err(Error::shape(format!(
                    "channel {c} has {} values, expected {plane}",
                    ch.len()
                )));
            }
        }
        if self.labels.len() != plane {
            return Err(Error::shape(format!(
                "label map has {} values, expected {plane}",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::format(format!("class index {bad} out of range")));
        }
        Ok(())
    }
}

/// Which channels are present for a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    available: Vec<bool>,
}

impl ChannelMask {
    pub fn new(available: Vec<bool>) -> Result<Self> {
        if !available.iter().any(|&a| a) {
            return Err(Error::Mask("at least one channel must be available".into()));
        }
        Ok(Self { available })
    }

    pub fn full(c: usize) -> Self {
        assert!(c > 0, "channel count must be positive");
        Self {
            available: vec![true; c],
        }
    }

    /// All channels except `dropped`.
    pub fn without(c: usize, dropped: usize) -> Result<Self> {
        if dropped >= c {
            return Err(Error::Mask(format!(
                "channel {dropped} out of range for {c}"
            )));
        }
        let mut available = vec![true; c];
        available[dropped] = false;
        Self::new(available)
    }

    pub fn only(c: usize, kept: usize) -> Result<Self> {
        if kept >= c {
            return Err(Error::Mask(format!("channel {kept} out of range for {c}")));
        }
        let mut available = vec![false; c];
        available[kept] = true;
        Self::new(available)
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn is_available(&self, c: usize) -> bool {
        self.available.get(c).copied().unwrap_or(false)
    }

    pub fn is_full(&self) -> bool {
        self.available.iter().all(|&a| a)
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn available_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.available
            .iter()
            .enumerate()
            .filter_map(|(c, &a)| a.then_some(c))
    }

    /// The single missing channel, if exactly one is missing.
    pub fn dropped_channel(&self) -> Option<usize> {
        let mut missing = self
            .available
            .iter()
            .enumerate()
            .filter_map(|(c, &a)| (!a).then_some(c));
        let first = missing.next()?;
        missing.next().is_none().then_some(first)
    }
}

/// Affine min-max map of every channel onto `[-1, 1]`; constant channels
/// become all zeros.
pub fn normalize_channels(sample: &MultiModalSample) -> Result<MultiModalSample> {
    let mut out = sample.clone();
    for (c, ch) in out.channels.iter_mut().enumerate() {
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "channel {c} of sample {}",
                sample.sample_id
            )));
        }
        normalize_in_place(ch);
    }
    Ok(out)
}

fn normalize_in_place(ch: &mut [f32]) {
    let (lo, hi) = ch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if ch.is_empty() || hi <= lo {
        ch.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi - lo;
    for v in ch.iter_mut() {
        let t = 2.0 * (*v as f64 - lo) / span - 1.0;
        *v = t.clamp(-1.0, 1.0) as f32;
    }
}

/// Crop a centered `out_h × out_w` window; odd margins leave the extra
/// row/column on the bottom/right.
pub fn center_crop<T: Copy>(
    image: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<T>> {
    if image.len() != h * w {
        return Err(Error::shape(format!(
            "image has {} values, expected {h}x{w}",
            image.len()
        )));
    }
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "crop window {out_h}x{out_w} does not fit image {h}x{w}"
        )));
    }
    let top = (h - out_h) / 2;
    let left = (w - out_w) / 2;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in top..top + out_h {
        out.extend_from_slice(&image[y * w + left..y * w + left + out_w]);
    }
    Ok(out)
}

/// [`center_crop`] applied to every channel and the label map.
pub fn center_crop_sample(
    sample: &MultiModalSample,
    out_h: usize,
    out_w: usize,
) -> Result<MultiModalSample> {
    sample.validate()?;
    let channels = sample
        .channels
        .iter()
        .map(|ch| center_crop(ch, sample.height, sample.width, out_h, out_w))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiModalSample {
        sample_id: sample.sample_id.clone(),
        height: out_h,
        width: out_w,
        channels,
        labels: center_crop(&sample.labels, sample.height, sample.width, out_h, out_w)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(channel: Vec<f32>, h: usize, w: usize) -> MultiModalSample {
        MultiModalSample {
            sample_id: "t".into(),
            height: h,
            width: w,
            channels: vec![channel],
            labels: vec![0; h * w],
        }
    }

    #[test]
    fn normalize_midpoint_and_hand_values() {
        let s = sample_with(vec![0.0, 2.0, 4.0, 10.0], 2, 2);
        let n = normalize_channels(&s).unwrap();
        let expected = [-1.0, -0.6, -0.2, 1.0];
        for (a, b) in n.channels[0].iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let s = sample_with(vec![0.0, 5.0, 10.0, 10.0], 2, 2);
        assert_eq!(normalize_channels(&s).unwrap().channels[0][1], 0.0);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let s = sample_with(vec![3.7; 9], 3, 3);
        assert!(normalize_channels(&s).unwrap().channels[0]
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_nan() {
        let s = sample_with(vec![0.0, f32::NAN, 1.0, 2.0], 2, 2);
        assert!(matches!(normalize_channels(&s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn crop_symmetric_and_tie_break() {
        let img: Vec<u32> = (0..16).collect();
        assert_eq!(center_crop(&img, 4, 4, 2, 2).unwrap(), vec![5, 6, 9, 10]);
        let img: Vec<u32> = (0..25).collect();
        // rows 1..2, cols 1..2 of a 5x5 grid
        assert_eq!(center_crop(&img, 5, 5, 2, 2).unwrap(), vec![6, 7, 11, 12]);
        let img: Vec<u32> = (0..200 * 186).collect();
        assert_eq!(center_crop(&img, 200, 186, 200, 186).unwrap(), img);
        assert!(center_crop(&img, 200, 186, 201, 186).is_err());
    }

    #[test]
    fn label_mapping_follows_annotation_protocol() {
        let raw = [0u8, 1, 2, 4];
        let canon: Vec<u8> = raw.iter().map(|&r| canonical_label(r).unwrap()).collect();
        assert_eq!(canon, vec![0, 1, 2, 3]);
        assert!(canonical_label(3).is_err());
        for c in 0..4u8 {
            assert_eq!(canonical_label(raw_label(c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn mask_constructors() {
        assert!(ChannelMask::new(vec![false; 4]).is_err());
        let m = ChannelMask::without(4, 2).unwrap();
        assert_eq!(m.available_channels().collect::<Vec<_>>(), vec![0, 1, 3]);
        assert_eq!(m.dropped_channel(), Some(2));
        assert_eq!(ChannelMask::full(4).dropped_channel(), None);
        assert_eq!(ChannelMask::only(4, 1).unwrap().dropped_channel(), None);
        assert_eq!(channel_index("flair"), Some(3));
        assert_eq!(class_index("ED"), Some(2));
    }
}
