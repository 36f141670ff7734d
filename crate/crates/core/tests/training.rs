mod common;

use common::*;
use noisemix::data::generate_synthetic;
use noisemix::dataset::{CorruptionRecord, NoisyDataset};
use noisemix::error::Error;
use noisemix::losses::stage_loss;
use noisemix::losses::Stage;
use noisemix::sampler::{GroupingMode, MgbsSampler, RemainderPolicy};
use noisemix::trainer::{
    evaluate_objective, learning_rate, optimize_step, stage2_objective, train_baseline, train_stage1, train_stage2, Control,
    LossSwitches, Method, Phase, StepBatch, StepLosses, TrainConfig, TrainState,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const HEADS: [&str; 3] = ["classifier", "mixup_head.", "uncertainty."];

fn data(n: usize, seed: u64) -> (NoisyDataset, NoisyDataset) {
    generate_synthetic(&tiny_recipe(n, 16, seed)).unwrap()
}

fn relabel(ds: &NoisyDataset, labels: &[usize]) -> NoisyDataset {
    let recs = ds.records.iter().zip(labels).map(|(r, &l)| CorruptionRecord::new(r.index, r.true_label, l)).collect();
    ds.with_records(recs, ds.manifest.clone()).unwrap()
}

#[test]
fn zero_warmup_epochs_only_moves_the_stage_marker() {
    let (train, _) = data(32, 0);
    let cfg = short_train(0, 1, 3);
    let mut st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
    let before = st.model.store.checksum("");
    train_stage1(&mut st, &train, &cfg).unwrap();
    assert_eq!(st.model.store.checksum(""), before);
    assert_eq!((st.epoch, st.step, st.phase), (0, 0, Phase::Stage1));
}

#[test]
fn warmup_touches_only_encoder_and_projection() {
    let (train, _) = data(48, 1);
    let cfg = short_train(2, 0, 4);
    let mut st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
    let heads: Vec<u64> = HEADS.iter().map(|p| st.model.store.checksum(p)).collect();
    let enc = st.model.store.checksum("encoder.");
    let proj = st.model.store.checksum("projection.");
    train_stage1(&mut st, &train, &cfg).unwrap();
    assert_eq!(HEADS.iter().map(|p| st.model.store.checksum(p)).collect::<Vec<_>>(), heads);
    assert_ne!(st.model.store.checksum("encoder."), enc);
    assert_ne!(st.model.store.checksum("projection."), proj);
    assert_eq!(st.history.len(), 2);
    assert!(st.history.iter().all(|m| m.phase == Phase::Stage1 && m.contrastive_mean.is_some()));
}

#[test]
fn warmup_ignores_labels() {
    let (train, _) = data(48, 2);
    let mut labels = train.given_labels();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let permuted = relabel(&train, &labels);
    let renamed = relabel(&train, &train.given_labels().iter().map(|l| (l + 1) % 4).collect::<Vec<_>>());
    let cfg = short_train(2, 0, 5);
    let mc = tiny_model(4, 4, 16);
    let run = |ds: &NoisyDataset| {
        let mut st = TrainState::new(&mc, &cfg).unwrap();
        train_stage1(&mut st, ds, &cfg).unwrap();
        st.model.store.checksum("")
    };
    let base = run(&train);
    assert_eq!(run(&permuted), base);
    assert_eq!(run(&renamed), base);
}

#[test]
fn supervised_only_stage_two_equals_grouped_default() {
    let (train, test) = data(64, 3);
    let mc = tiny_model(4, 4, 16);
    let ours_cfg = TrainConfig {
        losses: LossSwitches { supervised: true, mixup: false, contrastive: true },
        lambda: 0.0,
        ..short_train(0, 3, 11)
    };
    let mut ours = TrainState::new(&mc, &ours_cfg).unwrap();
    train_stage1(&mut ours, &train, &ours_cfg).unwrap();
    train_stage2(&mut ours, &train, &ours_cfg).unwrap();

    let base_cfg = TrainConfig { method: Method::DefaultBaseline, baseline_group_size: 4, ..ours_cfg.clone() };
    let base = train_baseline(&train, &mc, &base_cfg, Some(&test)).unwrap();
    let losses = |h: &[noisemix::trainer::EpochMetrics]| h.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&ours.history), losses(&base.history));
    assert_eq!(ours.model.store.checksum("encoder."), base.model.store.checksum("encoder."));
    assert_eq!(ours.model.store.checksum("classifier"), base.model.store.checksum("classifier"));
}

#[test]
fn zero_smoothing_is_the_default_baseline() {
    let (train, _) = data(48, 4);
    let mc = tiny_model(4, 4, 16);
    let a = TrainConfig { method: Method::DefaultBaseline, ..short_train(1, 1, 2) };
    let b = TrainConfig { method: Method::LabelSmooth, smooth_epsilon: 0.0, ..a.clone() };
    let ha = train_baseline(&train, &mc, &a, None).unwrap().history;
    let hb = train_baseline(&train, &mc, &b, None).unwrap().history;
    assert_eq!(ha, hb);
    let c = TrainConfig { smooth_epsilon: 0.1, ..b };
    assert_ne!(train_baseline(&train, &mc, &c, None).unwrap().history, ha);
}

fn fixed_batch(train: &NoisyDataset, cfg: &TrainConfig, m: usize) -> StepBatch {
    let s = MgbsSampler::new(&train.records, m, cfg.groups_per_batch, 1, RemainderPolicy::Resample, GroupingMode::IntraClass).unwrap();
    let b = s.epoch(0).unwrap().remove(0);
    StepBatch::from_groups(train, &b, true, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

#[test]
fn one_small_step_decreases_the_batch_loss() {
    let (train, _) = data(64, 5);
    for seed in 0..3 {
        let cfg = short_train(0, 1, seed);
        let mut st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
        let batch = fixed_batch(&train, &cfg, 4);
        let before = evaluate_objective(&st.model, |s, m| stage2_objective(s, m, &batch, &cfg)).unwrap();
        optimize_step(&mut st, 1e-4, |s, m| stage2_objective(s, m, &batch, &cfg)).unwrap();
        let after = evaluate_objective(&st.model, |s, m| stage2_objective(s, m, &batch, &cfg)).unwrap();
        assert!(after.total < before.total, "{} -> {}", before.total, after.total);
    }
}

#[test]
fn frozen_sigma_without_contrast_is_plain_sum() {
    let (train, _) = data(48, 6);
    let cfg = TrainConfig { learn_sigma: false, lambda: 0.0, ..short_train(0, 1, 1) };
    let st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
    let batch = fixed_batch(&train, &cfg, 4);
    let l = evaluate_objective(&st.model, |s, m| stage2_objective(s, m, &batch, &cfg)).unwrap();
    assert!(l.contrastive_mean.is_none());
    assert!((l.total - (l.mixup.unwrap() + l.supervised.unwrap())).abs() < 1e-12);
    let full = TrainConfig { learn_sigma: false, ..short_train(0, 1, 1) };
    let l = evaluate_objective(&st.model, |s, m| stage2_objective(s, m, &batch, &full)).unwrap();
    let expected = stage_loss(Stage::Stage2, l.contrastive_mean.unwrap(), l.decision.unwrap(), 0.1).unwrap();
    assert!((l.total - expected).abs() < 1e-12);
}

#[test]
fn single_member_groups_mix_to_themselves() {
    let (train, _) = data(48, 7);
    let cfg = TrainConfig { group_size: 1, groups_per_batch: 6, ..short_train(0, 1, 1) };
    let st = TrainState::new(&tiny_model(4, 1, 16), &cfg).unwrap();
    let batch = fixed_batch(&train, &cfg, 1);
    let l = evaluate_objective(&st.model, |s, m| stage2_objective(s, m, &batch, &cfg)).unwrap();
    assert!((l.mixup.unwrap() - l.supervised.unwrap()).abs() < 1e-12);
}

#[test]
fn schedule_and_sigma_over_a_run() {
    let (train, test) = data(32, 8);
    let cfg = short_train(0, 22, 9);
    let mut st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
    let mut seen = Vec::new();
    noisemix::trainer::train_stage2_with(&mut st, &train, &cfg, Some(&test), &mut |_, m| {
        seen.push(m.clone());
        Ok(Control::Continue)
    })
    .unwrap();
    assert_eq!(seen.len(), 22);
    for (e, m) in seen.iter().enumerate() {
        assert_eq!(m.learning_rate, 0.001 * 0.1f64.powi((e / 10) as i32));
        assert_eq!(m.learning_rate, learning_rate(&cfg, Phase::Stage2, e));
        assert!(m.sigma_mixup.unwrap() > 0.0 && m.sigma_supervised.unwrap() > 0.0);
        assert!(m.test_accuracy.is_some());
    }
}

#[test]
fn non_finite_loss_aborts_with_a_snapshot() {
    let cfg = short_train(0, 1, 0);
    let mut st = TrainState::new(&tiny_model(4, 4, 16), &cfg).unwrap();
    let err = optimize_step(&mut st, 1e-3, |s, _| {
        let v = s.graph.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), f64::NAN));
        Ok((v, StepLosses { total: f64::NAN, ..StepLosses::default() }))
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert!(err.to_string().contains("sigma"));
}

#[test]
fn group_size_mismatch_is_rejected() {
    let (train, _) = data(32, 9);
    let cfg = short_train(0, 1, 0);
    let mut st = TrainState::new(&tiny_model(4, 3, 16), &cfg).unwrap();
    assert!(matches!(train_stage2(&mut st, &train, &cfg), Err(Error::Validation { .. })));
}
