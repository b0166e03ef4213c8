use std::time::Instant;

use relalign::backbone::ActivationTrace;
use relalign::numerics::{streams, Rng};
use relalign::objectives::fit_class_stats;
use relalign::relation::{
    batch_eigen_loss, huber, p2p_loss, relation_drift, relation_matrix, sv_align_loss, weyl_sweep, Phi,
};
use relalign::stream::load_csv;

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

fn random_trace(rng: &mut Rng, layers: usize, d: usize) -> ActivationTrace {
    trace((0..=layers).map(|_| rng.normal_vec(d, 1.0)).collect())
}

#[test]
fn weyl_sweep_of_ten_thousand_pairs_has_no_violation() {
    let start = Instant::now();
    let sweep = weyl_sweep(10_000, &mut Rng::new(0, streams::INIT).derive("weyl")).unwrap();
    assert_eq!(sweep.cases, 10_000);
    assert_eq!(sweep.violations, 0, "min slack {}", sweep.min_slack);
    assert!(sweep.min_slack >= 0.0);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn p2p_and_drift_match_scalar_loops() {
    let mut rng = Rng::new(1, streams::DATA).derive("p2p");
    for _ in 0..50 {
        let layers = 2 + rng.below(5);
        let all: Vec<usize> = (1..=layers).collect();
        let (a, b) = (random_trace(&mut rng, layers, 5), random_trace(&mut rng, layers, 5));
        for phi in [Phi::Inner, Phi::Cosine] {
            let ra = relation_matrix(&a, phi, &all).unwrap();
            let rb = relation_matrix(&b, phi, &all).unwrap();
            let mut sum = 0.0;
            let mut sq = 0.0;
            for i in 0..layers {
                for j in 0..layers {
                    let ea = entry(&a.z[i + 1], &a.z[j + 1], phi);
                    let eb = entry(&b.z[i + 1], &b.z[j + 1], phi);
                    sum += huber(eb - ea);
                    sq += (ea - eb).powi(2);
                }
            }
            let p2p = p2p_loss(&ra, &rb).unwrap().value;
            let expected = sum / (layers * layers) as f64;
            assert!((p2p - expected).abs() < 1e-12 * expected.max(1.0));
            assert!((relation_drift(&ra, &rb).unwrap() - sq.sqrt()).abs() < 1e-12 * sq.sqrt().max(1.0));
        }
    }
}

fn entry(u: &[f64], v: &[f64], phi: Phi) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    match phi {
        Phi::Inner => dot,
        Phi::Cosine => {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-4);
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-4);
            dot / (nu * nv)
        }
    }
}

#[test]
fn batch_of_identical_pairs_equals_single_pair_loss() {
    let mut rng = Rng::new(2, streams::DATA).derive("batch");
    let layers: Vec<usize> = (1..=4).collect();
    let (a, b) = (random_trace(&mut rng, 4, 6), random_trace(&mut rng, 4, 6));
    let ra = relation_matrix(&a, Phi::Inner, &layers).unwrap();
    let rb = relation_matrix(&b, Phi::Inner, &layers).unwrap();
    let single = sv_align_loss(&ra, &rb).unwrap().value;
    let batch = batch_eigen_loss(&vec![ra.clone(); 3], &vec![rb.clone(); 3]).unwrap().value;
    assert!((single - batch).abs() < 1e-12 * single.max(1.0));
    assert_eq!(batch_eigen_loss(&[ra.clone()], &[rb.clone()]).unwrap().value, single);
}

#[test]
fn class_statistics_recover_a_known_gaussian() {
    let mut rng = Rng::new(3, streams::DATA).derive("gaussian");
    let mu = [1.0, -2.0, 0.5];
    let sigma = [0.5, 1.0, 2.0];
    let n = 1000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|i| mu[i] + sigma[i] * rng.normal()).collect())
        .collect();
    let stats = fit_class_stats(0, &draws, 1e-4).unwrap();
    let dmu = stats.mean.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    assert!(dmu < 5.0 * smax / (n as f64).sqrt(), "mean error {dmu}");
    for i in 0..3 {
        let var = sigma[i] * sigma[i];
        // sample variance has standard error var·√(2/(n−1))
        let tol = 5.0 * var * (2.0 / (n - 1) as f64).sqrt() + 1e-3;
        assert!((stats.covariance[(i, i)] - var).abs() < tol, "variance {i}");
        for j in 0..3 {
            if i != j {
                assert!(stats.covariance[(i, j)].abs() < 5.0 * sigma[i] * sigma[j] / (n as f64).sqrt());
            }
        }
    }
}

#[test]
fn two_class_ten_row_csv_splits_eight_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut text = String::from("label,feat_1,feat_2\n");
    for i in 0..20 {
        text.push_str(&format!("{},{}.5,{}\n", i % 2, i, -(i as i64)));
    }
    std::fs::write(&path, text).unwrap();
    let tasks = load_csv(&path, 1, 0).unwrap();
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0].labels, vec![0, 1]);
    for c in 0..2 {
        assert_eq!(tasks[0].train.iter().filter(|s| s.y == c).count(), 8);
        assert_eq!(tasks[0].test.iter().filter(|s| s.y == c).count(), 2);
    }
}
