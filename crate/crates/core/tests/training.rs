use modalseg_core::dataio::{generate_samples, MultiModalSample, SyntheticSpec};
use modalseg_core::losses::DiscriminatorParams;
use modalseg_core::model::ModelConfig;
use modalseg_core::trainer::{run_steps, StepMetrics, TrainConfig, TrainState};

fn small_model() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        encoder_widths: vec![8, 16, 16],
        bottleneck_width: 16,
        ..Default::default()
    }
}

fn samples(count: usize) -> Vec<MultiModalSample> {
    generate_samples(&SyntheticSpec {
        count,
        height: 32,
        width: 32,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn log_run(
    state: &mut TrainState,
    data: &[MultiModalSample],
    cfg: &TrainConfig,
) -> Vec<StepMetrics> {
    let mut log = Vec::new();
    run_steps(state, data, cfg, cfg.steps, |m, _| {
        log.push(m.clone());
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn overfits_one_sample_without_auxiliary_losses() {
    let data = samples(1);
    let mut cfg = TrainConfig {
        steps: 200,
        batch_size: 1,
        ..Default::default()
    };
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    let mut state = TrainState::new(&small_model(), &cfg).unwrap();
    let log = log_run(&mut state, &data, &cfg);
    let last = log.last().unwrap().loss_full;
    assert!(last < 0.05, "loss_full after 200 steps: {last}");
    assert!(log[0].loss_full > last);
}

/// With β = 0 the discriminator is logged but never reaches φ, so a
/// differently initialized discriminator leaves the φ trajectory unchanged.
#[test]
fn zero_beta_decouples_network_from_discriminator() {
    let data = samples(6);
    let mut cfg = TrainConfig {
        steps: 5,
        batch_size: 2,
        ..Default::default()
    };
    let model = small_model();
    let reinit = |state: &mut TrainState, cfg: &TrainConfig| {
        let mut dcfg = cfg.discriminator_config(&model);
        dcfg.seed = 99;
        state.disc = DiscriminatorParams::init(&dcfg).unwrap();
    };

    cfg.loss.beta = 0.0;
    let mut a = TrainState::new(&model, &cfg).unwrap();
    let mut b = a.clone();
    reinit(&mut b, &cfg);
    let log_a = log_run(&mut a, &data, &cfg);
    let log_b = log_run(&mut b, &data, &cfg);
    assert_eq!(a.model.values, b.model.values);
    assert_ne!(
        log_a.iter().map(|m| m.g_loss).collect::<Vec<_>>(),
        log_b.iter().map(|m| m.g_loss).collect::<Vec<_>>()
    );

    cfg.loss.beta = 0.1;
    let mut a = TrainState::new(&model, &cfg).unwrap();
    let mut b = a.clone();
    reinit(&mut b, &cfg);
    log_run(&mut a, &data, &cfg);
    log_run(&mut b, &data, &cfg);
    assert_ne!(a.model.values, b.model.values);
}
