//! Procedural multi-modality tumor images.
//!
//! Every sample holds three nested elliptical regions: whole tumor (WT),
//! tumor core (TC) and enhancing core (EC). The channels mimic how the
//! modalities are read:
//!
//! | channel | name  | contrast                                      |
//! |---------|-------|-----------------------------------------------|
//! | 0       | T1    | weak TC offset only                            |
//! | 1       | T1c   | TC∖EC and a stronger EC offset                 |
//! | 2       | T2    | WT offset, scaled down from FLAIR              |
//! | 3       | FLAIR | WT offset                                      |
//!
//! Labels: 0 outside WT, 2 in WT∖TC, 1 in TC∖EC, 3 in EC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_channels, Dataset, Manifest, MultiModalSample, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastSpec {
    pub background: f64,
    /// WT offset on FLAIR.
    pub flair_wt: f64,
    /// T2 carries `t2_scale · flair_wt` inside WT.
    pub t2_scale: f64,
    /// Offset on T1c inside TC∖EC.
    pub t1c_tc: f64,
    /// Offset on T1c inside EC.
    pub t1c_ec: f64,
    /// Offset on T1 inside TC.
    pub t1_tc: f64,
}

impl Default for ContrastSpec {
    fn default() -> Self {
        Self {
            background: -0.5,
            flair_wt: 0.3,
            t2_scale: 0.6,
            t1c_tc: 0.3,
            t1c_ec: 0.6,
            t1_tc: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub contrast: ContrastSpec,
    pub seed: u64,
    /// Fraction of samples assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 500,
            height: 64,
            width: 64,
            noise_sigma: 0.05,
            contrast: ContrastSpec::default(),
            seed: 1,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("synthetic count must be positive"));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::config(format!(
                "synthetic images must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        let c = &self.contrast;
        let offsets = [
            c.background,
            c.flair_wt,
            c.t2_scale,
            c.t1c_tc,
            c.t1c_ec,
            c.t1_tc,
        ];
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("contrast parameters must be finite"));
        }
        Ok(())
    }

    /// Number of test samples under the split policy.
    pub fn test_count(&self) -> usize {
        ((self.count as f64) * self.test_fraction).round() as usize
    }
}

/// Rotated ellipse in pixel coordinates (pixel `(y, x)` has center `(y+0.5, x+0.5)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let (s, c) = self.angle.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0
    }
}

/// Region geometry behind a generated label map. Membership is nested by
/// intersection: TC = tc ∩ WT and EC = ec ∩ TC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorGeometry {
    pub wt: Ellipse,
    pub tc: Ellipse,
    pub ec: Ellipse,
}

impl TumorGeometry {
    pub fn in_wt(&self, y: usize, x: usize) -> bool {
        self.wt.contains_pixel(y, x)
    }

    pub fn in_tc(&self, y: usize, x: usize) -> bool {
        self.in_wt(y, x) && self.tc.contains_pixel(y, x)
    }

    pub fn in_ec(&self, y: usize, x: usize) -> bool {
        self.in_tc(y, x) && self.ec.contains_pixel(y, x)
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        if self.in_ec(y, x) {
            3
        } else if self.in_tc(y, x) {
            1
        } else if self.in_wt(y, x) {
            2
        } else {
            0
        }
    }
}

fn sample_geometry(rng: &mut SeededRng, h: usize, w: usize) -> TumorGeometry {
    let size = h.min(w) as f64;
    let wt = Ellipse {
        cy: rng.uniform(0.35, 0.65) * h as f64,
        cx: rng.uniform(0.35, 0.65) * w as f64,
        ry: rng.uniform(0.13, 0.24) * size,
        rx: rng.uniform(0.13, 0.24) * size,
        angle: rng.uniform(0.0, std::f64::consts::PI),
    };
    let tc = inner_ellipse(rng, &wt, 0.45, 0.7);
    let ec = inner_ellipse(rng, &tc, 0.4, 0.65);
    TumorGeometry { wt, tc, ec }
}

fn inner_ellipse(rng: &mut SeededRng, outer: &Ellipse, lo: f64, hi: f64) -> Ellipse {
    let reach = 0.3 * outer.ry.min(outer.rx);
    let r = rng.uniform(0.0, reach);
    let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    Ellipse {
        cy: outer.cy + r * phi.sin(),
        cx: outer.cx + r * phi.cos(),
        ry: rng.uniform(lo, hi) * outer.ry,
        rx: rng.uniform(lo, hi) * outer.rx,
        angle: rng.uniform(0.0, std::f64::consts::PI),
    }
}

/// Raw (unnormalized) sample `index` of the dataset described by `spec`,
/// together with its region geometry. Each index draws from its own ChaCha
/// stream, so samples are independent of generation order.
pub fn synthesize_sample(
    spec: &SyntheticSpec,
    index: usize,
) -> Result<(MultiModalSample, TumorGeometry)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SeededRng::with_stream(spec.seed, index as u64);
    let (geometry, labels) = loop {
        let g = sample_geometry(&mut rng, h, w);
        let labels: Vec<u8> = (0..h * w).map(|i| g.class_at(i / w, i % w)).collect();
        let has = |class: u8| labels.contains(&class);
        if has(1) && has(2) && has(3) {
            break (g, labels);
        }
    };

    let c = &spec.contrast;
    let mut channels = vec![vec![0f32; h * w]; CHANNEL_NAMES.len()];
    for (ch, image) in channels.iter_mut().enumerate() {
        for (i, px) in image.iter_mut().enumerate() {
            let label = labels[i];
            let in_wt = label != 0;
            let in_tc = label == 1 || label == 3;
            let in_ec = label == 3;
            let offset = match ch {
                0 => {
                    if in_tc {
                        c.t1_tc
                    } else {
                        0.0
                    }
                }
                1 => {
                    if in_ec {
                        c.t1c_ec
                    } else if in_tc {
                        c.t1c_tc
                    } else {
                        0.0
                    }
                }
                2 => {
                    if in_wt {
                        c.t2_scale * c.flair_wt
                    } else {
                        0.0
                    }
                }
                _ => {
                    if in_wt {
                        c.flair_wt
                    } else {
                        0.0
                    }
                }
            };
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.normal()
            } else {
                0.0
            };
            *px = (c.background + offset + noise) as f32;
        }
    }

    let sample = MultiModalSample {
        sample_id: format!("s{index:05}"),
        height: h,
        width: w,
        channels,
        labels,
    };
    Ok((sample, geometry))
}

/// All samples of `spec`, normalized, in index order.
pub fn generate_samples(spec: &SyntheticSpec) -> Result<Vec<MultiModalSample>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| synthesize_sample(spec, i).and_then(|(s, _)| normalize_channels(&s)))
        .collect()
}

/// Generate, normalize and write the dataset under `root`, with the first
/// `count − test_count` samples in the train split and the rest in test.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<Dataset> {
    let samples = generate_samples(spec)?;
    let n_train = spec.count - spec.test_count();
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let manifest = Manifest {
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        train: ids[..n_train].to_vec(),
        test: ids[n_train..].to_vec(),
    };
    Dataset::create(root, manifest, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            count,
            height: 64,
            width: 64,
            noise_sigma: noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn regions_nest_for_many_seeds() {
        for seed in 0..20 {
            let (s, g) = synthesize_sample(&spec(1, 0.05, seed), 0).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    assert!(!g.in_ec(y, x) || g.in_tc(y, x));
                    assert!(!g.in_tc(y, x) || g.in_wt(y, x));
                    assert_eq!(s.labels[y * 64 + x], g.class_at(y, x));
                }
            }
            for class in 0..4u8 {
                assert!(s.labels.contains(&class), "seed {seed} lacks class {class}");
            }
        }
    }

    #[test]
    fn rejects_small_images() {
        let mut s = spec(1, 0.05, 7);
        s.height = 31;
        assert!(synthesize_sample(&s, 0).is_err());
    }

    #[test]
    fn noise_free_flair_threshold_recovers_whole_tumor() {
        let s = spec(1, 0.0, 7);
        let (sample, g) = synthesize_sample(&s, 0).unwrap();
        let bg = s.contrast.background;
        let threshold = (bg + (bg + s.contrast.flair_wt)) / 2.0;
        for y in 0..64 {
            for x in 0..64 {
                let predicted = sample.channels[3][y * 64 + x] as f64 > threshold;
                assert_eq!(predicted, g.in_wt(y, x));
            }
        }
    }

    #[test]
    fn channel_contrasts_meet_minimum_separation() {
        let s = spec(1, 0.05, 3);
        let c = &s.contrast;
        let floor = 4.0 * s.noise_sigma;
        assert!(c.flair_wt >= floor);
        assert!(c.t1c_tc >= floor);
        assert!(c.t1c_ec - c.t1c_tc >= floor);
        assert!(c.t2_scale * c.flair_wt < c.flair_wt);
        assert!(c.t1_tc < floor);
    }
}
