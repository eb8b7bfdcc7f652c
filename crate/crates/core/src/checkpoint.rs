//! Binary checkpoints.
//!
//! ```text
//! "MMCK" | u8 version | u32 header length | header JSON | f32 sections | u64 CRC-64/XZ
//! ```
//!
//! The JSON header names the configurations and lists the float sections in
//! payload order with their lengths. A model checkpoint has one section,
//! `model`, holding the network parameters in layout order (encoders,
//! bottleneck fusion, then per stage skips, upsampling and head). A training
//! checkpoint adds `discriminator` and the four optimizer moment buffers, and
//! records the step counter and random stream position in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::format_crc64;
use crate::error::{Error, Result};
use crate::losses::{DiscriminatorConfig, DiscriminatorParams};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::Adam;
use crate::rng::{RngState, SeededRng};
use crate::trainer::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Train,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_steps: Option<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
    pub sections: Vec<Section>,
}

fn encode(header: &CheckpointHeader, sections: &[&[f32]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let floats: usize = sections.iter().map(|s| s.len()).sum();
    let mut buf = Vec::with_capacity(9 + json.len() + 4 * floats + 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in sections {
        for v in s.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = format_crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    if bytes.len() < 17 {
        return Err(Error::Truncated {
            expected: 17,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("bad magic, not a checkpoint"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            bytes[4]
        )));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = format_crc64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let hlen = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
    if 9 + hlen > body.len() {
        return Err(Error::Truncated {
            expected: 9 + hlen + 8,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[9..9 + hlen])?;
    let payload = &body[9 + hlen..];
    let floats: usize = header.sections.iter().map(|s| s.len).sum();
    if payload.len() != 4 * floats {
        return Err(Error::format(format!(
            "payload holds {} bytes, sections need {}",
            payload.len(),
            4 * floats
        )));
    }
    let mut off = 0;
    let mut sections = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let vals = payload[off..off + 4 * s.len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        sections.push(vals);
        off += 4 * s.len;
    }
    Ok((header, sections))
}

fn section<'a>(header: &CheckpointHeader, data: &'a [Vec<f32>], name: &str) -> Result<&'a [f32]> {
    header
        .sections
        .iter()
        .position(|s| s.name == name)
        .map(|i| data[i].as_slice())
        .ok_or_else(|| Error::format(format!("checkpoint lacks section {name}")))
}

pub fn encode_model(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Model,
        model: params.config.clone(),
        discriminator: None,
        step: 0,
        adam_steps: None,
        rng: None,
        sections: vec![Section {
            name: "model".into(),
            len: params.values.len(),
        }],
    };
    encode(&header, &[&params.values])
}

pub fn save_model(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(params)?)?;
    Ok(())
}

/// Network parameters from either kind of checkpoint.
pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let (header, data) = decode(&fs::read(path)?)?;
    ModelParams::from_values(&header.model, section(&header, &data, "model")?.to_vec())
}

const TRAIN_SECTIONS: [&str; 6] = [
    "model",
    "discriminator",
    "model_adam_m",
    "model_adam_v",
    "discriminator_adam_m",
    "discriminator_adam_v",
];

pub fn encode_train_state(state: &TrainState) -> Result<Vec<u8>> {
    let data: [&[f32]; 6] = [
        &state.model.values,
        &state.disc.values,
        &state.model_opt.m,
        &state.model_opt.v,
        &state.disc_opt.m,
        &state.disc_opt.v,
    ];
    let header = CheckpointHeader {
        kind: CheckpointKind::Train,
        model: state.model.config.clone(),
        discriminator: Some(state.disc.config.clone()),
        step: state.step,
        adam_steps: Some([state.model_opt.t, state.disc_opt.t]),
        rng: Some(state.rng.state()),
        sections: TRAIN_SECTIONS
            .iter()
            .zip(data.iter())
            .map(|(n, d)| Section {
                name: n.to_string(),
                len: d.len(),
            })
            .collect(),
    };
    encode(&header, &data)
}

pub fn decode_train_state(bytes: &[u8]) -> Result<TrainState> {
    let (header, data) = decode(bytes)?;
    if header.kind != CheckpointKind::Train {
        return Err(Error::format(
            "checkpoint holds a model only, not a training state",
        ));
    }
    let disc_cfg = header
        .discriminator
        .as_ref()
        .ok_or_else(|| Error::format("training checkpoint lacks discriminator config"))?;
    let [model_t, disc_t] = header
        .adam_steps
        .ok_or_else(|| Error::format("training checkpoint lacks optimizer steps"))?;
    let rng_state = header
        .rng
        .as_ref()
        .ok_or_else(|| Error::format("training checkpoint lacks random state"))?;
    let rng =
        SeededRng::from_state(rng_state).ok_or_else(|| Error::format("malformed random state"))?;
    let model =
        ModelParams::from_values(&header.model, section(&header, &data, "model")?.to_vec())?;
    let disc = DiscriminatorParams::from_values(
        disc_cfg,
        section(&header, &data, "discriminator")?.to_vec(),
    )?;
    let moments = |m: &str, v: &str, len: usize, t: u64| -> Result<Adam<f32>> {
        let m = section(&header, &data, m)?.to_vec();
        let v = section(&header, &data, v)?.to_vec();
        if m.len() != len || v.len() != len {
            return Err(Error::format(
                "optimizer moments do not match parameter count",
            ));
        }
        Ok(Adam { m, v, t })
    };
    let model_opt = moments("model_adam_m", "model_adam_v", model.values.len(), model_t)?;
    let disc_opt = moments(
        "discriminator_adam_m",
        "discriminator_adam_v",
        disc.values.len(),
        disc_t,
    )?;
    Ok(TrainState {
        model,
        disc,
        model_opt,
        disc_opt,
        step: header.step,
        rng,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_train_state(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_train_state(&fs::read(path)?)
}
