#![allow(dead_code)]

use modalseg_core::dataio::{ChannelMask, MultiModalSample};
use modalseg_core::losses::{
    d_loss_grad, g_loss_grad, seg_loss, seg_loss_grad, similarity_losses, DiscriminatorConfig,
    DiscriminatorParams, StagedLabels,
};
use modalseg_core::model::{
    backward_decoder, backward_encoder, batch_input, decode, encode, forward, init_model,
    FeatureGrads, ModelConfig, ModelParams, Nonlinearity, PredictionGrad,
};
use modalseg_core::rng::SeededRng;
use modalseg_core::tensor::Tensor;

pub const EPS: f64 = 1e-7;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        channels: 2,
        classes: 2,
        height: 16,
        width: 16,
        levels: 2,
        encoder_widths: vec![2, 3],
        bottleneck_width: 3,
        nonlinearity: Nonlinearity::LeakyRelu,
        seed,
    }
}

pub fn tiny_disc(seed: u64) -> DiscriminatorConfig {
    DiscriminatorConfig {
        in_channels: 3,
        widths: [3, 4],
        seed,
        ..Default::default()
    }
}

/// Samples with uniform `[-1, 1)` channels and uniformly random labels.
pub fn random_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<MultiModalSample> {
    let mut rng = SeededRng::new(seed);
    let plane = cfg.height * cfg.width;
    (0..n)
        .map(|i| MultiModalSample {
            sample_id: format!("r{i}"),
            height: cfg.height,
            width: cfg.width,
            channels: (0..cfg.channels)
                .map(|_| (0..plane).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
                .collect(),
            labels: (0..plane).map(|_| rng.below(cfg.classes) as u8).collect(),
        })
        .collect()
}

/// Perturb every parameter of `params` by a random amount in `[-scale, scale)`
/// so the network is not at its initialization symmetry.
pub fn jitter(values: &mut [f64], scale: f64, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for v in values {
        *v += rng.uniform(-scale, scale);
    }
}

/// Central differences of `f` at `x`, step `h`, compared against `analytic`.
/// Returns the largest `|a − n| / max(|a|, |n|, floor)`.
pub fn fd_max_rel_error(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    assert_eq!(x.len(), analytic.len());
    let mut buf = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let down = f(&buf);
        buf[i] = x[i];
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

pub struct GradProblem {
    pub model: ModelParams<f64>,
    pub disc: DiscriminatorParams<f64>,
    pub input: Vec<Tensor<f64>>,
    pub labels: StagedLabels,
    pub drop: ChannelMask,
}

impl GradProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_config(seed);
        let mut model = init_model::<f64>(&cfg).unwrap();
        jitter(&mut model.values, 0.05, seed + 100);
        let disc = DiscriminatorParams::<f64>::init(&tiny_disc(seed)).unwrap();
        let samples = random_samples(&cfg, 2, seed + 200);
        let refs: Vec<&MultiModalSample> = samples.iter().collect();
        Self {
            input: batch_input::<f64>(&refs).unwrap(),
            labels: StagedLabels::from_samples(&refs, cfg.levels).unwrap(),
            drop: ChannelMask::without(cfg.channels, 1).unwrap(),
            model,
            disc,
        }
    }

    fn with_phi(&self, phi: &[f64]) -> ModelParams<f64> {
        ModelParams::from_values(&self.model.config, phi.to_vec()).unwrap()
    }

    pub fn seg_value(&self, phi: &[f64]) -> f64 {
        let m = self.with_phi(phi);
        let pred = forward(&m, &self.input, &ChannelMask::full(m.config.channels)).unwrap();
        seg_loss(&pred.probs, &self.labels, EPS).unwrap()
    }

    pub fn seg_grad(&self) -> Vec<f64> {
        let m = &self.model;
        let full = ChannelMask::full(m.config.channels);
        let enc = encode(m, &self.input, &full).unwrap();
        let pred = decode(m, &enc, &full).unwrap();
        let (_, dl) = seg_loss_grad(&pred.probs, &self.labels, EPS).unwrap();
        let mut grads = vec![0.0; m.values.len()];
        let mut df = FeatureGrads::new(m.config.channels, m.config.levels);
        let g = PredictionGrad {
            logits: dl.into_iter().map(Some).collect(),
            bottleneck: None,
        };
        backward_decoder(m, &enc, &pred, &g, &mut grads, &mut df).unwrap();
        backward_encoder(m, &enc, &df, &mut grads);
        grads
    }

    fn bottlenecks(&self, m: &ModelParams<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let full = ChannelMask::full(m.config.channels);
        let enc = encode(m, &self.input, &full).unwrap();
        let a = decode(m, &enc, &full).unwrap().bottleneck().clone();
        let b = decode(m, &enc, &self.drop).unwrap().bottleneck().clone();
        (a, b)
    }

    pub fn d_value(&self, theta: &[f64]) -> f64 {
        let d = DiscriminatorParams::from_values(&self.disc.config, theta.to_vec()).unwrap();
        let (full, drop) = self.bottlenecks(&self.model);
        similarity_losses(&d, &full, &drop, self.model.config.channels)
            .unwrap()
            .d_loss
    }

    pub fn d_grad(&self) -> Vec<f64> {
        let (full, drop) = self.bottlenecks(&self.model);
        d_loss_grad(&self.disc, &full, &drop, self.model.config.channels)
            .unwrap()
            .1
    }

    pub fn g_value(&self, phi: &[f64]) -> f64 {
        let m = self.with_phi(phi);
        let (full, drop) = self.bottlenecks(&m);
        similarity_losses(&self.disc, &full, &drop, m.config.channels)
            .unwrap()
            .g_loss
    }

    pub fn g_grad(&self) -> Vec<f64> {
        let m = &self.model;
        let full = ChannelMask::full(m.config.channels);
        let enc = encode(m, &self.input, &full).unwrap();
        let pred = decode(m, &enc, &full).unwrap();
        let (_, dg) = g_loss_grad(&self.disc, pred.bottleneck(), m.config.channels).unwrap();
        let mut grads = vec![0.0; m.values.len()];
        let mut df = FeatureGrads::new(m.config.channels, m.config.levels);
        let g = PredictionGrad {
            logits: vec![None; m.config.levels],
            bottleneck: Some(dg),
        };
        backward_decoder(m, &enc, &pred, &g, &mut grads, &mut df).unwrap();
        backward_encoder(m, &enc, &df, &mut grads);
        grads
    }
}
