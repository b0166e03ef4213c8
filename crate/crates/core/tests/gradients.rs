use relalign::backbone::{Backbone, BackboneConfig};
use relalign::numerics::{
    check_gradient, differences_resolved, singular_values, streams, value_and_grad, Matrix,
    Objective, Rng,
};
use relalign::objectives::{cross_entropy, feature_distill_loss, total_loss, TotalLossObjective};
use relalign::relation::{
    huber, normalize, relation_matrix, sv_align_loss, AlignmentConfig, Phi, RelationMatrix,
    Strategy,
};
use relalign::stream::Sample;
use relalign::trainer::{OptimizerKind, OptimizerState};

const LAMBDAS: [f64; 4] = [0.0, 0.5, 1.0, 5.0];

struct Setup {
    backbone: Backbone,
    batch: Vec<Sample>,
    classes: Vec<usize>,
}

fn cfg(layers: usize) -> BackboneConfig {
    BackboneConfig {
        input_dim: 3,
        width: 4,
        layers,
        rank: 2,
        pretrain_epochs: 0,
        ..BackboneConfig::default()
    }
}

/// Backbone with `tasks` adapters whose parameters (B included) are random.
fn random_setup(rng: &mut Rng, layers: usize, tasks: usize) -> Setup {
    let mut backbone = Backbone::new(cfg(layers), rng.below(1000) as u64).unwrap();
    let mut classes = Vec::new();
    for t in 1..=tasks {
        classes = vec![2 * t, 2 * t + 1];
        backbone.add_task_adapter(t, rng).unwrap();
        backbone.ensure_heads(&classes);
        let p: Vec<f64> = backbone
            .trainable_params(&classes)
            .unwrap()
            .iter()
            .map(|v| v + 0.5 * rng.normal())
            .collect();
        backbone.set_trainable_params(&classes, &p).unwrap();
    }
    let batch = (0..3)
        .map(|_| Sample {
            x: rng.normal_vec(3, 0.25),
            y: classes[rng.below(2)],
        })
        .collect();
    Setup {
        backbone,
        batch,
        classes,
    }
}

fn kinked(x: f64) -> bool {
    (x.abs() - 1.0).abs() < 1e-3
}

fn separated(prev: &Matrix, cur: &Matrix) -> bool {
    let sp = singular_values(prev).unwrap();
    let sc = singular_values(cur).unwrap();
    let gap = |s: &[f64]| s.windows(2).all(|w| w[0] - w[1] > 1e-2);
    gap(&sp) && gap(&sc) && !sp.iter().zip(&sc).any(|(a, b)| kinked(a - b))
}

/// Central differences need the objective to be smooth around the point:
/// distinct singular values and Huber arguments away from the kink.
fn smooth_at(s: &Setup, align: &AlignmentConfig) -> bool {
    let t = s.backbone.newest_task();
    let l = s.backbone.layers();
    let layers = align.layers(l);
    let mut prev: Vec<RelationMatrix> = Vec::new();
    let mut cur: Vec<RelationMatrix> = Vec::new();
    for x in &s.batch {
        let (p, c) = s.backbone.dual_forward(&x.x, t, &s.classes).unwrap();
        for fl in align.feature_layers(l) {
            let (a, b) = if align.normalize_features {
                (normalize(p.state(fl)).0, normalize(c.state(fl)).0)
            } else {
                (p.state(fl).to_vec(), c.state(fl).to_vec())
            };
            let q = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64;
            if align.strategy.uses_features() && kinked(q) {
                return false;
            }
        }
        prev.push(relation_matrix(&p, align.phi, &layers).unwrap());
        cur.push(relation_matrix(&c, align.phi, &layers).unwrap());
    }
    let mean = |rs: &[RelationMatrix]| {
        let mut m = Matrix::zeros(rs[0].size(), rs[0].size());
        rs.iter().for_each(|r| m.add_assign(&r.entries).unwrap());
        m.scale(1.0 / rs.len() as f64)
    };
    match align.strategy {
        Strategy::Eigen => prev
            .iter()
            .zip(&cur)
            .all(|(p, c)| separated(&p.entries, &c.entries)),
        Strategy::BEigen => separated(&mean(&prev), &mean(&cur)),
        Strategy::P2p => !prev.iter().zip(&cur).any(|(p, c)| {
            p.entries
                .as_slice()
                .iter()
                .zip(c.entries.as_slice())
                .any(|(a, b)| kinked(a - b))
        }),
        _ => true,
    }
}

#[test]
fn every_strategy_and_lambda_matches_finite_differences() {
    let mut checked = 0;
    for (si, &strategy) in Strategy::ALL.iter().enumerate() {
        for (li, &lambda) in LAMBDAS.iter().enumerate() {
            for phi in [Phi::Inner, Phi::Cosine] {
                let align = AlignmentConfig {
                    strategy,
                    phi,
                    normalize_features: li % 2 == 0,
                    ..AlignmentConfig::default()
                };
                let base = Rng::new(11, streams::INIT).derive(&format!("fd/{si}/{li}/{phi:?}"));
                let (obj, attempt) = (0..100)
                    .map(|a| (random_setup(&mut base.derive(&a.to_string()), 4, 2), a))
                    .filter(|(s, _)| smooth_at(s, &align))
                    .map(|(s, a)| {
                        (
                            TotalLossObjective::new(
                                s.backbone,
                                s.batch,
                                s.classes,
                                align.clone(),
                                lambda,
                            ),
                            a,
                        )
                    })
                    .find(|(obj, _)| differences_resolved(obj, &obj.params().unwrap()).unwrap())
                    .expect("a smooth, resolvable configuration within 100 draws");
                let params = obj.params().unwrap();
                let check = check_gradient(&obj, &params).unwrap();
                assert!(
                    check.passed(),
                    "{strategy} {phi:?} λ={lambda} attempt {attempt}: worst {:e} at {:?}",
                    check.worst_rel_error,
                    check.worst_index
                );
                assert!(check.compared > params.len() / 2);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 48);
}

#[test]
fn value_matches_plain_evaluation_bitwise() {
    let mut rng = Rng::new(3, streams::INIT);
    let s = random_setup(&mut rng, 4, 2);
    let obj = TotalLossObjective::new(
        s.backbone,
        s.batch,
        s.classes,
        AlignmentConfig::default(),
        1.0,
    );
    let p = obj.params().unwrap();
    assert_eq!(
        value_and_grad(&obj, &p).unwrap().value,
        obj.value(&p).unwrap()
    );
}

#[test]
fn zero_b_blocks_the_adapter_a_path() {
    let mut rng = Rng::new(4, streams::INIT);
    let mut backbone = Backbone::new(cfg(3), 4).unwrap();
    backbone.add_task_adapter(1, &mut rng).unwrap();
    let classes = vec![0, 1];
    backbone.ensure_heads(&classes);
    let heads: Vec<f64> = rng.normal_vec(8, 1.0);
    backbone.set_head(0, heads[..4].to_vec()).unwrap();
    backbone.set_head(1, heads[4..].to_vec()).unwrap();
    let batch: Vec<Sample> = (0..4)
        .map(|i| Sample {
            x: rng.normal_vec(3, 1.0),
            y: i % 2,
        })
        .collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let out = total_loss(
        &backbone,
        &refs,
        &classes,
        &AlignmentConfig::default(),
        0.0,
        true,
    )
    .unwrap();
    let g = out.gradient.unwrap();
    // per layer: A (2×4) then B (4×2)
    for l in 0..3 {
        let a = &g[l * 16..l * 16 + 8];
        let b = &g[l * 16 + 8..l * 16 + 16];
        assert!(a.iter().all(|&v| v == 0.0), "layer {l} A gradient {a:?}");
        assert!(
            b.iter().any(|&v| v != 0.0),
            "layer {l} B gradient should flow"
        );
    }
}

#[test]
fn previous_trace_ignores_trainable_parameters() {
    let mut rng = Rng::new(5, streams::INIT);
    let s = random_setup(&mut rng, 4, 2);
    let x = &s.batch[0].x;
    let (prev, _) = s.backbone.dual_forward(x, 2, &s.classes).unwrap();
    let mut moved = s.backbone.clone();
    let p: Vec<f64> = moved
        .trainable_params(&s.classes)
        .unwrap()
        .iter()
        .map(|v| v + 1.0)
        .collect();
    moved.set_trainable_params(&s.classes, &p).unwrap();
    let (prev2, cur2) = moved.dual_forward(x, 2, &s.classes).unwrap();
    assert_eq!(prev.z, prev2.z);
    assert_ne!(prev2.z, cur2.z);

    // an objective reading only the previous horizon has zero analytic and numeric gradient
    struct PrevOnly(Backbone, Vec<usize>, Vec<f64>);
    impl Objective for PrevOnly {
        fn param_count(&self) -> usize {
            self.0.trainable_count(&self.1)
        }
        fn value(&self, p: &[f64]) -> relalign::Result<f64> {
            let mut b = self.0.clone();
            b.set_trainable_params(&self.1, p)?;
            let (prev, _) = b.dual_forward(&self.2, 2, &[])?;
            Ok(prev.last().iter().map(|v| v * v).sum())
        }
        fn value_and_grad(&self, p: &[f64]) -> relalign::Result<relalign::numerics::GradRecord> {
            Ok(relalign::numerics::GradRecord {
                value: self.value(p)?,
                gradient: vec![0.0; p.len()],
            })
        }
    }
    let obj = PrevOnly(s.backbone.clone(), s.classes.clone(), x.clone());
    let params = s.backbone.trainable_params(&s.classes).unwrap();
    let fd = relalign::numerics::central_differences(&obj, &params, 1e-4).unwrap();
    assert!(fd.iter().all(|&v| v == 0.0));
}

#[test]
fn previous_trace_after_updates_equals_truncated_model() {
    let mut rng = Rng::new(6, streams::INIT);
    let mut s = random_setup(&mut rng, 3, 1);
    let truncated = s.backbone.clone();
    s.backbone.add_task_adapter(2, &mut rng).unwrap();
    let classes = vec![4, 5];
    s.backbone.ensure_heads(&classes);
    let batch: Vec<Sample> = (0..6)
        .map(|i| Sample {
            x: rng.normal_vec(3, 1.0),
            y: 4 + i % 2,
        })
        .collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, s.backbone.trainable_count(&classes));
    let align = AlignmentConfig::default();
    for _ in 0..10 {
        let g = total_loss(&s.backbone, &refs, &classes, &align, 1.0, true)
            .unwrap()
            .gradient
            .unwrap();
        let mut p = s.backbone.trainable_params(&classes).unwrap();
        opt.update(&mut p, &g, 0.05).unwrap();
        s.backbone.set_trainable_params(&classes, &p).unwrap();
    }
    for x in &batch {
        let (prev, cur) = s.backbone.dual_forward(&x.x, 2, &[]).unwrap();
        assert_ne!(prev.z, cur.z);
        assert_eq!(prev.z, truncated.forward(&x.x, 1, &[]).unwrap().z);
    }
}

#[test]
fn ce_matches_forward_logits_bitwise() {
    let mut rng = Rng::new(7, streams::INIT);
    let s = random_setup(&mut rng, 4, 2);
    let refs: Vec<&Sample> = s.batch.iter().collect();
    let out = total_loss(
        &s.backbone,
        &refs,
        &s.classes,
        &AlignmentConfig::default(),
        0.0,
        false,
    )
    .unwrap();
    let mut ce = 0.0;
    for x in &s.batch {
        let tr = s.backbone.forward(&x.x, 2, &s.classes).unwrap();
        ce += cross_entropy(
            &tr.logits,
            s.classes.iter().position(|&c| c == x.y).unwrap(),
        )
        .unwrap();
    }
    ce /= s.batch.len() as f64;
    assert_eq!(out.breakdown.ce, ce);
    assert_eq!(out.breakdown.total, ce);
}

#[test]
fn zero_lambda_reduces_to_cross_entropy_for_every_strategy() {
    let mut rng = Rng::new(8, streams::INIT);
    let s = random_setup(&mut rng, 4, 2);
    let refs: Vec<&Sample> = s.batch.iter().collect();
    let none = AlignmentConfig {
        strategy: Strategy::None,
        ..AlignmentConfig::default()
    };
    let reference = total_loss(&s.backbone, &refs, &s.classes, &none, 3.0, true).unwrap();
    assert_eq!(reference.breakdown.align, 0.0);
    for strategy in Strategy::ALL {
        let align = AlignmentConfig {
            strategy,
            ..AlignmentConfig::default()
        };
        let out = total_loss(&s.backbone, &refs, &s.classes, &align, 0.0, true).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.ce);
        assert_eq!(out.breakdown.total, reference.breakdown.total);
        assert_eq!(out.gradient, reference.gradient, "{strategy}");
    }
}

#[test]
fn eigen_total_is_mean_of_per_sample_terms_times_lambda() {
    let mut rng = Rng::new(9, streams::INIT);
    let mut s = random_setup(&mut rng, 4, 2);
    s.batch.truncate(2);
    let align = AlignmentConfig::default();
    let refs: Vec<&Sample> = s.batch.iter().collect();
    let lambda = 2.5;
    let out = total_loss(&s.backbone, &refs, &s.classes, &align, lambda, false).unwrap();
    let layers: Vec<usize> = (1..=4).collect();
    let mut terms = Vec::new();
    let mut ce = 0.0;
    for x in &s.batch {
        let (p, c) = s.backbone.dual_forward(&x.x, 2, &s.classes).unwrap();
        let rp = relation_matrix(&p, align.phi, &layers).unwrap();
        let rc = relation_matrix(&c, align.phi, &layers).unwrap();
        // per-sample loss straight from the definition
        let sp = singular_values(&rp.entries).unwrap();
        let sc = singular_values(&rc.entries).unwrap();
        let direct = sp.iter().zip(&sc).map(|(a, b)| huber(a - b)).sum::<f64>() / 4.0;
        let via = sv_align_loss(&rp, &rc).unwrap().value;
        assert!((direct - via).abs() < 1e-12 * direct.max(1.0));
        terms.push(direct);
        ce += cross_entropy(&c.logits, s.classes.iter().position(|&k| k == x.y).unwrap()).unwrap();
    }
    let align_mean = (terms[0] + terms[1]) / 2.0;
    assert!((out.breakdown.align - align_mean).abs() < 1e-12 * align_mean.max(1.0));
    assert!((out.breakdown.total - (ce / 2.0 + lambda * align_mean)).abs() < 1e-12);
}

#[test]
fn feature_loss_matches_scalar_loop() {
    let mut rng = Rng::new(10, streams::INIT);
    let s = random_setup(&mut rng, 4, 2);
    for x in &s.batch {
        let (p, c) = s.backbone.dual_forward(&x.x, 2, &[]).unwrap();
        for normalize_features in [false, true] {
            for layers in [vec![4], vec![1, 2, 3, 4]] {
                let mut total = 0.0;
                for &l in &layers {
                    let (a, b) = (p.state(l), c.state(l));
                    let (na, nb) = if normalize_features {
                        (
                            a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-4),
                            b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-4),
                        )
                    } else {
                        (1.0, 1.0)
                    };
                    let mut sq = 0.0;
                    for i in 0..a.len() {
                        sq += (a[i] / na - b[i] / nb).powi(2);
                    }
                    total += huber(sq / a.len() as f64);
                }
                let expected = total / layers.len() as f64;
                let got = feature_distill_loss(&p, &c, &layers, normalize_features).unwrap();
                assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
            }
        }
        let (p0, c0) = {
            let mut fresh = s.backbone.clone();
            fresh.add_task_adapter(3, &mut rng).unwrap();
            fresh.dual_forward(&x.x, 3, &[]).unwrap()
        };
        assert_eq!(
            feature_distill_loss(&p0, &c0, &[1, 2, 3, 4], true).unwrap(),
            0.0
        );
    }
}
