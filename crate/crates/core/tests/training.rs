use std::collections::BTreeMap;

use relalign::backbone::{pretrain_accuracy, pretrain_base, BackboneConfig};
use relalign::numerics::{streams, Rng};
use relalign::objectives::{fit_class_stats, recalibrate_classifier, RecalibrationConfig};
use relalign::relation::{AlignmentConfig, Strategy};
use relalign::stream::{make_stream, Sample, StreamSpec, TaskData};
use relalign::trainer::{run_stream, train_task, TrainConfig};

fn small_spec(tasks: usize, seed: u64) -> StreamSpec {
    StreamSpec {
        total_classes: 2 * tasks,
        tasks,
        train_per_class: 30,
        test_per_class: 10,
        input_dim: 8,
        base_classes: 4,
        seed,
        ..StreamSpec::default()
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        input_dim: 8,
        width: 12,
        layers: 3,
        rank: 2,
        pretrain_epochs: 10,
        ..BackboneConfig::default()
    }
}

#[test]
fn pretraining_separates_base_classes() {
    let stream = make_stream(&StreamSpec {
        base_classes: 4,
        ..StreamSpec::default()
    })
    .unwrap();
    assert_eq!(stream.base_labels.len(), 4);
    let acc = pretrain_accuracy(&BackboneConfig::default(), &stream.base, 0).unwrap();
    assert!(acc > 0.95, "base accuracy {acc}");
}

#[test]
fn pretraining_is_deterministic() {
    let stream = make_stream(&small_spec(2, 1)).unwrap();
    let labels = stream.stream_labels();
    let a = pretrain_base(&small_backbone(), &stream.base, &labels, 9).unwrap();
    let b = pretrain_base(&small_backbone(), &stream.base, &labels, 9).unwrap();
    assert_eq!(a, b);
}

/// Multinomial logistic regression on raw inputs, written independently of
/// the library's objective code.
fn linear_probe_accuracy(task: &TaskData) -> f64 {
    let d = task.train[0].x.len();
    let k = task.labels.len();
    let index: BTreeMap<usize, usize> = task.labels.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut w = vec![vec![0.0; d + 1]; k];
    let score = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|row| row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..200 {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for s in &task.train {
            let z = score(&w, &s.x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / total - if index[&s.y] == c { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * s.x[j];
                }
                grad[c][d] += g;
            }
        }
        let n = task.train.len() as f64;
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= 0.1 * grad[c][j] / n;
            }
        }
    }
    let correct = task
        .test
        .iter()
        .filter(|s| {
            let z = score(&w, &s.x);
            let best = (0..k).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == index[&s.y]
        })
        .count();
    correct as f64 / task.test.len() as f64
}

#[test]
fn every_default_task_is_linearly_separable() {
    let stream = make_stream(&StreamSpec::default()).unwrap();
    for task in &stream.tasks {
        let acc = linear_probe_accuracy(task);
        assert!(acc > 0.95, "task {} probe accuracy {acc}", task.task);
    }
}

#[test]
fn zero_epochs_only_adds_a_zero_adapter() {
    let stream = make_stream(&small_spec(2, 2)).unwrap();
    let mut backbone = pretrain_base(&small_backbone(), &stream.base, &stream.stream_labels(), 2).unwrap();
    let before = backbone.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train_task(&mut backbone, &stream.tasks[0], &cfg, 1).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(backbone.newest_task(), 1);
    assert_eq!(backbone.frozen_bytes(1), before.frozen_bytes(1));
    for pair in backbone.adapters()[0].layers.iter().flatten() {
        assert!(pair.b.as_slice().iter().all(|&v| v == 0.0));
    }
    for x in stream.tasks[0].test.iter().take(5) {
        assert_eq!(backbone.forward(&x.x, 1, &[]).unwrap().z, before.forward(&x.x, 0, &[]).unwrap().z);
    }
}

#[test]
fn training_a_task_leaves_the_past_frozen_and_fits_the_task() {
    let stream = make_stream(&StreamSpec::default()).unwrap();
    let mut backbone =
        pretrain_base(&BackboneConfig::default(), &stream.base, &stream.stream_labels(), 0).unwrap();
    let cfg = TrainConfig::default();
    train_task(&mut backbone, &stream.tasks[0], &cfg, 1).unwrap();
    let frozen = backbone.frozen_bytes(2);
    let log = train_task(&mut backbone, &stream.tasks[1], &cfg, 2).unwrap();
    assert_eq!(backbone.frozen_bytes(2), frozen);
    let last = log.epochs.last().unwrap();
    assert!(last.train_accuracy > 0.95, "train accuracy {}", last.train_accuracy);
    assert!(last.probe_relation_drift > 0.0);
    assert_eq!(last.loss.total, last.loss.ce + last.lambda * last.loss.align);
}

#[test]
fn strategy_none_and_zero_lambda_train_identically() {
    let stream = make_stream(&small_spec(3, 3)).unwrap();
    let none = TrainConfig {
        epochs: 4,
        alignment: AlignmentConfig {
            strategy: Strategy::None,
            ..AlignmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let zero = TrainConfig {
        epochs: 4,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let a = run_stream(&stream, &small_backbone(), &none).unwrap();
    let b = run_stream(&stream, &small_backbone(), &zero).unwrap();
    assert_eq!(a.report.accuracy, b.report.accuracy);
    assert_eq!(a.backbone, b.backbone);
}

#[test]
fn single_task_run_has_no_forgetting_and_repeats_bitwise() {
    let stream = make_stream(&small_spec(1, 4)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let a = run_stream(&stream, &small_backbone(), &cfg).unwrap();
    assert_eq!(a.report.accuracy.tasks(), 1);
    assert_eq!(a.report.forgetting, vec![None]);
    let b = run_stream(&stream, &small_backbone(), &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

fn two_prototype_stats() -> BTreeMap<usize, relalign::objectives::ClassStats> {
    let mut rng = Rng::new(0, streams::DATA).derive("prototypes");
    let d = 12;
    [(3usize, 1.0), (7usize, -1.0)]
        .into_iter()
        .map(|(c, sign)| {
            let feats: Vec<Vec<f64>> = (0..200)
                .map(|_| {
                    let mut x = rng.normal_vec(d, 0.3);
                    x[0] += 2.0 * sign;
                    x
                })
                .collect();
            (c, fit_class_stats(c, &feats, 1e-4).unwrap())
        })
        .collect()
}

#[test]
fn recalibration_fits_separated_prototypes() {
    let stream = make_stream(&small_spec(2, 5)).unwrap();
    let backbone = pretrain_base(&small_backbone(), &stream.base, &stream.stream_labels(), 5).unwrap();
    let stats = two_prototype_stats();
    let cfg = RecalibrationConfig::default();
    let before = backbone.clone();
    let heads = recalibrate_classifier(&backbone, &stats, &[3, 7], &cfg, &mut Rng::new(1, streams::PSEUDO)).unwrap();
    assert_eq!(backbone, before);
    let again = recalibrate_classifier(&backbone, &stats, &[3, 7], &cfg, &mut Rng::new(1, streams::PSEUDO)).unwrap();
    assert_eq!(heads, again);

    // fresh pseudo-features, scored with the refitted heads
    let mut rng = Rng::new(2, streams::PSEUDO);
    let held_out = relalign::objectives::sample_pseudo_features(&stats, &[3, 7], 256, &mut rng).unwrap();
    let correct = held_out
        .iter()
        .filter(|s: &&Sample| {
            let score = |c: usize| heads[&c].iter().zip(&s.x).map(|(a, b)| a * b).sum::<f64>();
            let pred = if score(3) >= score(7) { 3 } else { 7 };
            pred == s.y
        })
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    assert!(acc > 0.99, "pseudo-feature accuracy {acc}");
}

#[test]
fn recalibration_with_zero_epochs_keeps_heads() {
    let mut backbone = relalign::backbone::Backbone::new(small_backbone(), 0).unwrap();
    backbone.set_head(3, vec![0.5; 12]).unwrap();
    backbone.set_head(7, vec![-0.5; 12]).unwrap();
    let cfg = RecalibrationConfig {
        epochs: 0,
        ..RecalibrationConfig::default()
    };
    let heads =
        recalibrate_classifier(&backbone, &two_prototype_stats(), &[3, 7], &cfg, &mut Rng::new(0, streams::PSEUDO))
            .unwrap();
    assert_eq!(&heads, backbone.heads());
}
