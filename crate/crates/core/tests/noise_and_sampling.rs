mod common;

use std::collections::BTreeMap;

use common::*;
use noisemix::data::generate_synthetic;
use noisemix::dataset::{CorruptionRecord, NoiseKind, SymmetricConvention};
use noisemix::manifest;
use noisemix::noise::{
    apply_transition, build_asymmetric_matrix, build_symmetric_matrix, inject_instance_dependent, inject_instance_independent,
    inject_labels, realized_noise_rate, ProxyOptions,
};
use noisemix::sampler::{shuffled_batches, GroupingMode, MgbsSampler, RemainderPolicy};
use noisemix::trainer::TrainConfig;
use proptest::prelude::*;

#[test]
fn off_diagonal_rate_concentrates() {
    let m = build_symmetric_matrix(0.4, 4, SymmetricConvention::UniformOffDiagonal).unwrap();
    let recs = apply_transition(&vec![0; 10_000], &m, 9).unwrap();
    let rate = realized_noise_rate(&recs).unwrap();
    assert!((rate - 0.4).abs() <= 3.0 * (0.4f64 * 0.6 / 10_000.0).sqrt(), "{rate}");
}

#[test]
fn uniform_all_keeps_some_flips_on_the_true_class() {
    // with P/C mass on the diagonal the expected corruption is P (C-1)/C
    let m = build_symmetric_matrix(0.4, 4, SymmetricConvention::UniformAll).unwrap();
    assert!((m.expected_noise_rate() - 0.3).abs() < 1e-12);
    let labels: Vec<usize> = (0..10_000).map(|i| i % 4).collect();
    let rate = realized_noise_rate(&apply_transition(&labels, &m, 2).unwrap()).unwrap();
    assert!((rate - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / 10_000.0).sqrt(), "{rate}");
}

#[test]
fn asymmetric_flips_only_to_the_next_class() {
    let m = build_asymmetric_matrix(0.3, 5).unwrap();
    let labels: Vec<usize> = (0..5000).map(|i| i % 5).collect();
    for r in apply_transition(&labels, &m, 4).unwrap() {
        assert!(r.given_label == r.true_label || r.given_label == (r.true_label + 1) % 5);
    }
}

#[test]
fn injected_dataset_manifest_round_trips() {
    let (train, _) = generate_synthetic(&tiny_recipe(40, 8, 0)).unwrap();
    let noisy = inject_instance_independent(&train, NoiseKind::Symmetric, 0.3, SymmetricConvention::UniformAll, 5).unwrap();
    assert_eq!(noisy.manifest.realized_rate, realized_noise_rate(&noisy.records).unwrap());
    assert_eq!(noisy.images, train.images);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    manifest::write(&path, &noisy.manifest, &noisy.records).unwrap();
    let (h, recs) = manifest::read(&path).unwrap();
    assert_eq!(h, noisy.manifest);
    assert_eq!(recs, noisy.records);
}

#[test]
fn label_only_injection_matches_dataset_injection() {
    let (train, _) = generate_synthetic(&tiny_recipe(60, 8, 1)).unwrap();
    let a = inject_instance_independent(&train, NoiseKind::Asymmetric, 0.2, SymmetricConvention::UniformAll, 8).unwrap();
    let (h, recs) = inject_labels(&train.true_labels(), 4, NoiseKind::Asymmetric, 0.2, SymmetricConvention::UniformAll, 8).unwrap();
    assert_eq!(h, a.manifest);
    assert_eq!(recs, a.records);
}

#[test]
fn instance_dependent_noise_lands_near_the_target() {
    let (train, _) = generate_synthetic(&tiny_recipe(400, 8, 2)).unwrap();
    let mc = tiny_model(4, 4, 16);
    let cfg = TrainConfig::default();
    let noisy = inject_instance_dependent(&train, 0.2, &mc, &cfg, &ProxyOptions::default(), 3).unwrap();
    let rate = realized_noise_rate(&noisy.records).unwrap();
    assert_eq!(noisy.manifest.realized_rate, rate);
    assert!((0.15..=0.25).contains(&rate), "realized {rate}");
    assert!(noisy.manifest.proxy_epoch.is_some());
}

fn records_from(labels: &[usize]) -> Vec<CorruptionRecord> {
    labels.iter().enumerate().map(|(i, &l)| CorruptionRecord::new(i, (l + i) % 3, l)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_batch_is_k_groups_of_m_same_label(
        labels in prop::collection::vec(0usize..5, 40..200),
        m in 1usize..6,
        k in 1usize..4,
        seed in any::<u64>(),
        epoch in 0usize..50,
    ) {
        let recs = records_from(&labels);
        let s = MgbsSampler::new(&recs, m, k, seed, RemainderPolicy::Resample, GroupingMode::IntraClass).unwrap();
        let batches = match s.epoch(epoch) {
            Ok(b) => b,
            Err(_) => return Ok(()),
        };
        for b in &batches {
            prop_assert_eq!(b.groups.len(), k);
            for g in &b.groups {
                prop_assert_eq!(g.members.len(), m);
                let label = g.given_label.unwrap();
                prop_assert!(g.members.iter().all(|&i| labels[i] == label));
            }
        }
        prop_assert_eq!(s.epoch(epoch).unwrap(), batches);
    }

    #[test]
    fn unit_groups_visit_classes_like_plain_shuffling(
        per_class in prop::collection::vec(1usize..30, 2..5),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let n = labels.len() - labels.len() % k;
        let labels = &labels[..n];
        let recs: Vec<CorruptionRecord> = labels.iter().enumerate().map(|(i, &l)| CorruptionRecord::clean(i, l)).collect();
        let s = MgbsSampler::new(&recs, 1, k, seed, RemainderPolicy::Drop, GroupingMode::IntraClass).unwrap();
        let count = |idx: Vec<usize>| {
            let mut m = BTreeMap::new();
            for i in idx {
                *m.entry(labels[i]).or_insert(0usize) += 1;
            }
            m
        };
        let grouped = count(s.epoch(0).unwrap().iter().flat_map(|b| b.indices()).collect());
        let plain = count(shuffled_batches(n, k, seed, 0).unwrap().into_iter().flatten().collect());
        prop_assert_eq!(grouped, plain);
    }
}

#[test]
fn groups_are_reformed_each_epoch() {
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let recs = records_from(&labels);
    let s = MgbsSampler::new(&recs, 4, 2, 1, RemainderPolicy::Resample, GroupingMode::IntraClass).unwrap();
    assert_ne!(s.epoch(0).unwrap(), s.epoch(1).unwrap());
}

#[test]
fn inter_class_groups_carry_no_label() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let recs = records_from(&labels);
    let s = MgbsSampler::new(&recs, 3, 2, 1, RemainderPolicy::Drop, GroupingMode::InterClass).unwrap();
    let batches = s.epoch(0).unwrap();
    assert_eq!(batches.len(), 5);
    assert!(batches.iter().flat_map(|b| &b.groups).all(|g| g.given_label.is_none()));
}
