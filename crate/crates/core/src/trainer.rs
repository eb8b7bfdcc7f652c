//! Modality-drop training with alternating discriminator / network updates.
//!
//! One step on a batch:
//! 1. encode every channel once, decode with the full mask;
//! 2. draw one channel uniformly, decode again without it;
//! 3. update θ on the discriminator loss;
//! 4. update φ on `L_full + α·L_drop + β·g_loss` with θ frozen.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataio::{ChannelMask, Dataset, MultiModalSample, Split};
use crate::error::{Error, Result};
use crate::losses::{
    d_loss_grad, g_loss_grad, seg_loss_grad, total_loss, DiscriminatorConfig, DiscriminatorParams,
    DropMask, LossConfig, StagedLabels,
};
use crate::model::{
    backward_decoders, backward_encoder, batch_input, decode_masks, encode, init_model,
    FeatureGrads, ModelConfig, ModelParams, PredictionGrad,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Network (φ) learning rate.
    pub lr: f64,
    /// Discriminator (θ) learning rate; 0 freezes θ.
    pub d_lr: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub discriminator_widths: [usize; 2],
    /// Write `step_NNNNNN.mmck` every this many steps (0 disables).
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub dataset: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            d_lr: 2e-4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            discriminator_widths: [32, 64],
            checkpoint_interval: 500,
            seed: 1,
            dataset: PathBuf::from("data"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.d_lr >= 0.0 && self.d_lr.is_finite()) {
            return Err(Error::config("d_lr must be nonnegative"));
        }
        if self.discriminator_widths.contains(&0) {
            return Err(Error::config("discriminator widths must be positive"));
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    pub fn discriminator_config(&self, model: &ModelConfig) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: model.bottleneck_width,
            widths: self.discriminator_widths,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub model_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    /// Completed steps.
    pub step: u64,
    pub rng: SeededRng,
}

impl TrainState {
    /// Fresh state; the model is initialized from `cfg.seed`, overriding
    /// `model.seed`.
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = ModelConfig {
            seed: cfg.seed,
            ..model.clone()
        };
        let model = init_model::<f32>(&model_cfg)?;
        let disc = DiscriminatorParams::init(&cfg.discriminator_config(&model_cfg))?;
        Ok(Self {
            model_opt: Adam::new(model.values.len()),
            disc_opt: Adam::new(disc.values.len()),
            model,
            disc,
            step: 0,
            rng: SeededRng::with_stream(cfg.seed, 0x747261696e),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_full: f64,
    pub loss_drop: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub dropped_channel: usize,
}

impl StepMetrics {
    /// `loss_full + α·loss_drop + β·g_loss`.
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        total_loss(self.loss_full, self.loss_drop, self.g_loss, cfg).unwrap_or(f64::NAN)
    }
}

/// Draw the channel to drop uniformly from `0..channels`.
pub fn sample_drop_channel(rng: &mut SeededRng, channels: usize) -> Result<DropMask> {
    if channels < 2 {
        return Err(Error::Mask(format!(
            "cannot drop a channel from {channels} channel(s)"
        )));
    }
    DropMask::new(channels, rng.below(channels))
}

fn finite(value: f64, what: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

fn scaled<T: Real>(mut t: crate::tensor::Tensor<T>, s: f64) -> crate::tensor::Tensor<T> {
    t.scale(T::lit(s));
    t
}

/// One training iteration on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&MultiModalSample],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let mcfg = state.model.config.clone();
    let c = mcfg.channels;
    let input = batch_input::<f32>(batch)?;
    let labels = StagedLabels::from_samples(batch, mcfg.levels)?;
    let eps = cfg.loss.eps;

    let full = ChannelMask::full(c);
    let drop = sample_drop_channel(&mut state.rng, c)?;
    let enc = encode(&state.model, &input, &full)?;
    let (terms, preds) = decode_masks(&state.model, &enc, &[full, drop.to_channel_mask()])?;
    let (pred_full, pred_drop) = (&preds[0], &preds[1]);
    let (loss_full, dl_full) = seg_loss_grad(&pred_full.probs, &labels, eps)?;
    finite(loss_full, "loss_full", step)?;
    let (loss_drop, dl_drop) = seg_loss_grad(&pred_drop.probs, &labels, eps)?;
    finite(loss_drop, "loss_drop", step)?;

    // discriminator step, φ untouched
    let (d_loss, dtheta) = d_loss_grad(
        &state.disc,
        pred_full.bottleneck(),
        pred_drop.bottleneck(),
        c,
    )?;
    finite(d_loss, "d_loss", step)?;
    state
        .disc_opt
        .step(&cfg.adam, cfg.d_lr, &mut state.disc.values, &dtheta);

    // network step against the updated, now frozen, discriminator
    let (g_loss, dg_f0) = g_loss_grad(&state.disc, pred_full.bottleneck(), c)?;
    finite(g_loss, "g_loss", step)?;

    let (alpha, beta) = (cfg.loss.alpha, cfg.loss.beta);
    let mut grads = vec![0f32; state.model.values.len()];
    let mut dfeat = FeatureGrads::new(c, mcfg.levels);
    let full_grad = PredictionGrad {
        logits: dl_full.into_iter().map(Some).collect(),
        bottleneck: (beta > 0.0).then(|| scaled(dg_f0, beta)),
    };
    let drop_grad = PredictionGrad {
        logits: dl_drop
            .into_iter()
            .map(|g| (alpha > 0.0).then(|| scaled(g, alpha)))
            .collect(),
        bottleneck: None,
    };
    backward_decoders(
        &state.model,
        &enc,
        &terms,
        &[(pred_full, &full_grad), (pred_drop, &drop_grad)],
        &mut grads,
        &mut dfeat,
    )?;
    backward_encoder(&state.model, &enc, &dfeat, &mut grads);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("network gradient at step {step}")));
    }
    state
        .model_opt
        .step(&cfg.adam, cfg.lr, &mut state.model.values, &grads);
    state.step = step;

    Ok(StepMetrics {
        step,
        loss_full,
        loss_drop,
        d_loss,
        g_loss,
        dropped_channel: drop.dropped(),
    })
}

/// Indices of one batch, drawn uniformly with replacement.
pub fn draw_batch(rng: &mut SeededRng, pool: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.below(pool)).collect()
}

/// Advance `state` until `state.step == until`, calling `observe` after
/// every step.
pub fn run_steps<F>(
    state: &mut TrainState,
    samples: &[MultiModalSample],
    cfg: &TrainConfig,
    until: u64,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(&StepMetrics, &TrainState) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mcfg = &state.model.config;
    if let Some(bad) = samples.iter().find(|s| {
        s.height != mcfg.height || s.width != mcfg.width || s.num_channels() != mcfg.channels
    }) {
        return Err(Error::shape(format!(
            "sample {} does not match the model input {}x{}x{}",
            bad.sample_id, mcfg.channels, mcfg.height, mcfg.width
        )));
    }
    while state.step < until {
        let idx = draw_batch(&mut state.rng, samples.len(), cfg.batch_size);
        let batch: Vec<&MultiModalSample> = idx.iter().map(|&i| &samples[i]).collect();
        let metrics = train_step(state, &batch, cfg)?;
        observe(&metrics, state)?;
    }
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.mmck";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.mmck")
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Keep only metric lines for steps `<= step`, so a resumed run continues the
/// log without duplicates.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut kept = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step <= step {
            kept.push(line);
        }
    }
    let mut out = String::new();
    for l in kept {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Full training run reading the train split of `cfg.dataset` and writing
/// `metrics.jsonl` and checkpoints into `out_dir`. With `resume`, training
/// continues from that checkpoint's state.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let samples = dataset.load(Split::Train)?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = match resume {
        Some(path) => {
            let s = load_checkpoint(path)?;
            truncate_metrics(&metrics_path, s.step)?;
            s
        }
        None => {
            File::create(&metrics_path)?;
            TrainState::new(model, cfg)?
        }
    };

    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let interval = cfg.checkpoint_interval;
    let result = run_steps(&mut state, &samples, cfg, cfg.steps, |m, st| {
        serde_json::to_writer(&mut log, m)?;
        log.write_all(b"\n")?;
        if interval > 0 && m.step % interval == 0 {
            log.flush()?;
            save_checkpoint(st, &out_dir.join(step_checkpoint_name(m.step)))?;
        }
        Ok(())
    });
    log.flush()?;
    result?;

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        metrics_path,
    })
}

/// Parse a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_mask_always_keeps_c_minus_one() {
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let m = sample_drop_channel(&mut rng, 4).unwrap();
            assert_eq!(m.kept_count(), 3);
        }
        assert!(sample_drop_channel(&mut rng, 1).is_err());
    }

    #[test]
    fn drop_sequence_is_reproducible() {
        let seq = |seed| {
            let mut rng = SeededRng::new(seed);
            (0..50)
                .map(|_| sample_drop_channel(&mut rng, 4).unwrap().dropped())
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            d_lr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }
}
