use proptest::prelude::*;

use relalign::backbone::ActivationTrace;
use relalign::metrics::{forgetting, margin, summarize, AccuracyMatrix};
use relalign::numerics::{eigh_sym, Matrix};
use relalign::objectives::{cross_entropy, LossBreakdown};
use relalign::relation::{huber, relation_matrix, sv_align_loss, weyl_check, Phi};

fn symmetric(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| {
        Matrix::from_fn(n, n, |i, j| if i <= j { v[i * n + j] } else { v[j * n + i] })
    })
}

fn states(layers: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), layers + 1)
}

fn trace(z: Vec<Vec<f64>>) -> ActivationTrace {
    let h = z
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect();
    ActivationTrace {
        z,
        h,
        classes: Vec::new(),
        logits: Vec::new(),
        horizon: 0,
    }
}

fn lower_triangle() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..7).prop_flat_map(|t| {
        (1..=t)
            .map(|i| prop::collection::vec(0.0f64..=1.0, i))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn weyl_holds_for_any_symmetric_pair((r, e) in (2usize..7).prop_flat_map(|n| (symmetric(n), symmetric(n)))) {
        let rep = weyl_check(&r, &e.scale(0.1)).unwrap();
        prop_assert!(rep.holds, "gap {} vs {}", rep.max_gap, rep.perturbation_norm);
    }

    #[test]
    fn relation_matrices_are_symmetric_psd(z in (2usize..6, 2usize..6).prop_flat_map(|(l, d)| states(l, d)), cosine in any::<bool>()) {
        let l = z.len() - 1;
        let phi = if cosine { Phi::Cosine } else { Phi::Inner };
        let r = relation_matrix(&trace(z), phi, &(1..=l).collect::<Vec<_>>()).unwrap();
        for i in 0..l {
            for j in 0..l {
                prop_assert_eq!(r.entries[(i, j)], r.entries[(j, i)]);
            }
        }
        let scale = 1.0 + r.entries.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = *eigh_sym(&r.entries).unwrap().values.last().unwrap();
        prop_assert!(min > -1e-10 * scale, "λ_min {}", min);
    }

    #[test]
    fn spectral_loss_ignores_layer_relabeling(
        (a, b, perm) in (2usize..6).prop_flat_map(|l| (states(l, 4), states(l, 4), Just((0..l).collect::<Vec<_>>()).prop_shuffle()))
    ) {
        let l = a.len() - 1;
        let layers: Vec<usize> = (1..=l).collect();
        let permuted: Vec<usize> = perm.iter().map(|&p| p + 1).collect();
        let (ta, tb) = (trace(a), trace(b));
        let base = sv_align_loss(
            &relation_matrix(&ta, Phi::Inner, &layers).unwrap(),
            &relation_matrix(&tb, Phi::Inner, &layers).unwrap(),
        ).unwrap().value;
        let moved = sv_align_loss(
            &relation_matrix(&ta, Phi::Inner, &permuted).unwrap(),
            &relation_matrix(&tb, Phi::Inner, &permuted).unwrap(),
        ).unwrap().value;
        prop_assert!((base - moved).abs() < 1e-9 * base.max(1.0), "{} vs {}", base, moved);
    }

    #[test]
    fn summary_matches_row_means(rows in lower_triangle()) {
        let acc = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let s = summarize(&acc).unwrap();
        let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        prop_assert_eq!(s.last, *means.last().unwrap());
        prop_assert!((s.average - means.iter().sum::<f64>() / means.len() as f64).abs() < 1e-15);
        prop_assert!(s.average_after.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn forgetting_matches_its_definition(rows in lower_triangle()) {
        let errors: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|a| 1.0 - a).collect()).collect();
        let f = forgetting(&errors).unwrap();
        prop_assert_eq!(f[0], None);
        for t in 1..errors.len() {
            let mut sum = 0.0;
            for s in 0..t {
                sum += errors[t][s] - errors[s][s];
            }
            prop_assert!((f[t].unwrap() - sum / t as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn positive_margin_means_strictly_correct(logits in prop::collection::vec(-5.0f64..5.0, 2..6), pick in any::<prop::sample::Index>()) {
        let classes: Vec<usize> = (0..logits.len()).map(|c| 10 + c).collect();
        let label = classes[pick.index(classes.len())];
        let tr = ActivationTrace { z: vec![], h: vec![], classes: classes.clone(), logits: logits.clone(), horizon: 0 };
        let m = margin(&tr, label).unwrap();
        if m > 0.0 {
            prop_assert_eq!(tr.predicted(), Some(label));
        } else if m < 0.0 {
            prop_assert_ne!(tr.predicted(), Some(label));
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant_and_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 2..6), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        for y in 0..logits.len() {
            let a = cross_entropy(&logits, y).unwrap();
            let b = cross_entropy(&shifted, y).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn huber_is_below_the_quadratic_and_linear_envelopes(x in -10.0f64..10.0) {
        let h = huber(x);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= 0.5 * x * x + 1e-15);
        prop_assert!(h <= x.abs());
        prop_assert_eq!(h, huber(-x));
    }

    #[test]
    fn breakdown_is_additive(ce in 0.0f64..10.0, align in 0.0f64..10.0, lambda in 0.0f64..10.0) {
        let b = LossBreakdown::new(ce, align, lambda);
        prop_assert_eq!(b.total, ce + lambda * align);
        prop_assert_eq!(b.lambda_effective, lambda);
    }
}
