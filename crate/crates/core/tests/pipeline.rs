//! Cross-module pipeline checks that go beyond single-module tests:
//! the temporal window sweep and its consistency with a plain run.

use neuralign::data::Modality;
use neuralign::evalkit::{nway_topk, window_sweep};
use neuralign::model::{Model, ModelConfig};
use neuralign::synth::{gen_split, SynthConfig};
use neuralign::trainer::{train_stage1, TrainConfig};

fn small_synth() -> SynthConfig {
    SynthConfig {
        seed: 11,
        n_train: 64,
        n_test: 16,
        latent_dim: 4,
        k: 12,
        channels: 6,
        timesteps: 20,
        sigma_brain: 0.1,
        sigma_sem: 0.1,
        modality: Modality::Eeg,
        n_categories: 0,
    }
}

fn small_model(synth: &SynthConfig) -> ModelConfig {
    let mut cfg = ModelConfig::defaults(synth.channels, synth.timesteps, synth.k);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.d_ff = 24;
    cfg
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 16,
        ..TrainConfig::stage1(11)
    }
}

#[test]
fn longer_windows_do_not_hurt_on_temporally_spread_signal() {
    // the generator spreads the latent across every timestep, so a 10%
    // window discards most of the evidence
    let synth = small_synth();
    let (train_ds, test_ds) = gen_split::<f32>(&synth).unwrap();
    let base = small_model(&synth);
    let report = window_sweep(
        &train_ds,
        &test_ds,
        &[2, 20],
        &base,
        &small_train(),
        test_ds.n_samples(),
        500,
        7,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    let short = report.rows[0].top1;
    let full = report.rows[1].top1;
    assert!(
        full >= short,
        "full-window accuracy {full} below 10%-window accuracy {short}"
    );

    let csv = report.to_csv();
    assert!(csv.starts_with("window,top1\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn degenerate_sweep_matches_a_plain_run() {
    let synth = small_synth();
    let (train_ds, test_ds) = gen_split::<f32>(&synth).unwrap();
    let base = small_model(&synth);
    let tcfg = small_train();

    let report = window_sweep(&train_ds, &test_ds, &[20], &base, &tcfg, 16, 500, 7).unwrap();

    let mut model = Model::<f32>::init(base, tcfg.seed).unwrap();
    train_stage1(&mut model, &train_ds, &tcfg).unwrap();
    let (fb, fv) = model.embed_dataset(&test_ds).unwrap();
    let plain = nway_topk(&fb, &fv, 16, 1, 500, 7).unwrap();

    assert_eq!(report.rows[0].top1, plain.accuracy);
}

#[test]
fn sweep_rejects_bad_windows() {
    let synth = small_synth();
    let (train_ds, test_ds) = gen_split::<f32>(&synth).unwrap();
    let base = small_model(&synth);
    let tcfg = small_train();
    assert!(window_sweep(&train_ds, &test_ds, &[0], &base, &tcfg, 4, 10, 7).is_err());
    assert!(window_sweep(&train_ds, &test_ds, &[21], &base, &tcfg, 4, 10, 7).is_err());
    assert!(window_sweep(&train_ds, &test_ds, &[], &base, &tcfg, 4, 10, 7).is_err());
}
