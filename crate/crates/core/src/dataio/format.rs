//! Sample files and dataset manifests.
//!
//! Sample file, little-endian:
//!
//! ```text
//! "MMSG" | 0x01 | u32 C | u32 H | u32 W | f32[C·H·W] | u8[H·W] | u64 CRC-64/XZ
//! ```
//!
//! Channel values are channel-major then row-major; the checksum covers every
//! preceding byte. The sample id is the file stem.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MultiModalSample;
use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"MMSG";
pub const SAMPLE_VERSION: u8 = 1;
pub const SAMPLE_EXTENSION: &str = "mmsg";

const HEADER_LEN: usize = 4 + 1 + 12;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// CRC-64/XZ, the checksum used by every binary file this crate writes.
pub fn format_crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn encode_sample(sample: &MultiModalSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let (c, h, w) = (sample.num_channels(), sample.height, sample.width);
    let mut buf = Vec::with_capacity(HEADER_LEN + c * h * w * 4 + h * w + 8);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.push(SAMPLE_VERSION);
    for dim in [c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for ch in &sample.channels {
        for v in ch {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&sample.labels);
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_sample(bytes: &[u8], sample_id: &str) -> Result<MultiModalSample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::format("bad magic, not a sample file"));
    }
    if bytes[4] != SAMPLE_VERSION {
        return Err(Error::format(format!(
            "unsupported sample version {}",
            bytes[4]
        )));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(h * w + HEADER_LEN + 8))
        .ok_or_else(|| Error::format("header dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::format(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 8];
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let plane = h * w;
    let mut channels = Vec::with_capacity(c);
    let mut off = HEADER_LEN;
    for _ in 0..c {
        let ch = body[off..off + plane * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        channels.push(ch);
        off += plane * 4;
    }
    let sample = MultiModalSample {
        sample_id: sample_id.to_string(),
        height: h,
        width: w,
        channels,
        labels: body[off..off + plane].to_vec(),
    };
    sample.validate()?;
    Ok(sample)
}

pub fn write_sample(sample: &MultiModalSample, path: &Path) -> Result<()> {
    fs::write(path, encode_sample(sample)?)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<MultiModalSample> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(format!("cannot derive sample id from {}", path.display())))?;
    decode_sample(&bytes, id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub channels: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::format(format!(
                    "sample id {id} listed twice in manifest"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A manifest plus the directory holding `manifest.json` and `samples/`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub const MANIFEST_FILE: &'static str = "manifest.json";
    pub const SAMPLE_DIR: &'static str = "samples";

    pub fn create(root: &Path, manifest: Manifest, samples: &[MultiModalSample]) -> Result<Self> {
        manifest.validate()?;
        let dir = root.join(Self::SAMPLE_DIR);
        fs::create_dir_all(&dir)?;
        for s in samples {
            write_sample(s, &dir.join(format!("{}.{SAMPLE_EXTENSION}", s.sample_id)))?;
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(root.join(Self::MANIFEST_FILE), json + "\n")?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(Self::MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn sample_path(&self, id: &str) -> PathBuf {
        self.root
            .join(Self::SAMPLE_DIR)
            .join(format!("{id}.{SAMPLE_EXTENSION}"))
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Test => &self.manifest.test,
        }
    }

    pub fn load(&self, split: Split) -> Result<Vec<MultiModalSample>> {
        self.ids(split)
            .iter()
            .map(|id| read_sample(&self.sample_path(id)))
            .collect()
    }

    pub fn load_one(&self, id: &str) -> Result<MultiModalSample> {
        if !self
            .manifest
            .train
            .iter()
            .chain(&self.manifest.test)
            .any(|s| s == id)
        {
            return Err(Error::format(format!("sample {id} is not in the manifest")));
        }
        read_sample(&self.sample_path(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultiModalSample {
        MultiModalSample {
            sample_id: "a".into(),
            height: 2,
            width: 3,
            channels: vec![vec![0.5, -1.0, 0.25, 1.0, 0.0, -0.125]; 2],
            labels: vec![0, 1, 2, 3, 0, 1],
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_sample(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_sample(&bytes, "a"), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = encode_sample(&tiny()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_sample(cut, "a"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn header_claiming_more_than_payload_is_truncation() {
        let mut s = tiny();
        s.height = 64;
        s.width = 64;
        s.channels = vec![vec![0.0; 64 * 64]; 4];
        s.labels = vec![0; 64 * 64];
        let bytes = encode_sample(&s).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_sample(cut, "a"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode_sample(&tiny()).unwrap();
        bytes[HEADER_LEN + 2] ^= 0x10;
        assert!(matches!(
            decode_sample(&bytes, "a"),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let m = Manifest {
            channels: vec![],
            train: vec!["a".into()],
            test: vec!["a".into()],
        };
        assert!(m.validate().is_err());
    }
}
