//! Randomized comparison of the training objective's analytic gradient with
//! central differences.

use relalign::backbone::{Backbone, BackboneConfig};
use relalign::numerics::{
    check_gradient, differences_resolved, singular_values, streams, GradCheck, GradRecord, Matrix,
    Objective, Rng,
};
use relalign::objectives::TotalLossObjective;
use relalign::relation::{
    normalize, relation_matrix, AlignmentConfig, Phi, RelationMatrix, Strategy,
};
use relalign::stream::Sample;

use crate::error::CliError;

pub const LAMBDAS: [f64; 3] = [0.0, 1.0, 5.0];
/// Candidates whose singular values sit closer than this are resampled.
pub const MIN_SPECTRAL_GAP: f64 = 1e-2;
/// Candidates with a Huber argument this close to the kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 200;
const BATCH: usize = 3;

#[derive(Debug, Clone)]
pub struct CaseSetup {
    pub strategy: Strategy,
    pub phi: Phi,
    pub normalize_features: bool,
    pub lambda: f64,
}

/// Case `i` cycles strategies fastest, then λ, so any 18 consecutive cases
/// cover every (strategy, λ) pair.
pub fn case_setup(i: usize) -> CaseSetup {
    CaseSetup {
        strategy: Strategy::ALL[i % Strategy::ALL.len()],
        phi: if (i / 2) % 2 == 0 {
            Phi::Inner
        } else {
            Phi::Cosine
        },
        normalize_features: i % 2 == 0,
        lambda: LAMBDAS[(i / Strategy::ALL.len()) % LAMBDAS.len()],
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub index: usize,
    pub setup: CaseSetup,
    pub layers: usize,
    pub width: usize,
    pub task: usize,
    pub params: usize,
    pub attempts: usize,
    pub check: GradCheck,
}

struct Candidate {
    objective: TotalLossObjective,
    params: Vec<f64>,
    layers: usize,
    width: usize,
    task: usize,
}

fn build(
    setup: &CaseSetup,
    rng: &mut Rng,
) -> relalign::Result<(Candidate, Backbone, Vec<Sample>, Vec<usize>)> {
    let layers = 2 + rng.below(3);
    let width = 3 + rng.below(3);
    let cfg = BackboneConfig {
        input_dim: 3,
        width,
        layers,
        rank: 2,
        ..BackboneConfig::default()
    };
    let mut backbone = Backbone::new(cfg, rng.below(1 << 30) as u64)?;
    let task = 1 + rng.below(2);
    let mut classes = Vec::new();
    for k in 1..=task {
        classes = vec![2 * k, 2 * k + 1];
        backbone.add_task_adapter(k, rng)?;
        backbone.ensure_heads(&classes);
        let p: Vec<f64> = backbone
            .trainable_params(&classes)?
            .iter()
            .map(|v| v + 0.5 * rng.normal())
            .collect();
        backbone.set_trainable_params(&classes, &p)?;
    }
    let batch: Vec<Sample> = (0..BATCH)
        .map(|_| Sample {
            x: rng.normal_vec(3, 0.25),
            y: classes[rng.below(classes.len())],
        })
        .collect();
    let align = AlignmentConfig {
        strategy: setup.strategy,
        phi: setup.phi,
        normalize_features: setup.normalize_features,
        ..AlignmentConfig::default()
    };
    let objective = TotalLossObjective::new(
        backbone.clone(),
        batch.clone(),
        classes.clone(),
        align,
        setup.lambda,
    );
    let params = objective.params()?;
    Ok((
        Candidate {
            objective,
            params,
            layers,
            width,
            task,
        },
        backbone,
        batch,
        classes,
    ))
}

fn near_kink(x: f64, delta: f64) -> bool {
    (x.abs() - delta).abs() < KINK_MARGIN
}

fn spectrum_ok(prev: &Matrix, cur: &Matrix, delta: f64) -> relalign::Result<bool> {
    let sp = singular_values(prev)?;
    let sc = singular_values(cur)?;
    let gapped = |s: &[f64]| s.windows(2).all(|w| (w[0] - w[1]).abs() > MIN_SPECTRAL_GAP);
    Ok(gapped(&sp) && gapped(&sc) && !sp.iter().zip(&sc).any(|(a, b)| near_kink(a - b, delta)))
}

fn mean_matrix(rs: &[RelationMatrix]) -> Matrix {
    let n = rs[0].size();
    let mut m = Matrix::zeros(n, n);
    for r in rs {
        m.add_assign(&r.entries).expect("equal sizes");
    }
    m.scale(1.0 / rs.len() as f64)
}

/// Rejects candidates where central differences would straddle a point where
/// the objective is not differentiable. Smooth candidates are further screened
/// with [`differences_resolved`].
fn well_conditioned(
    backbone: &Backbone,
    batch: &[Sample],
    classes: &[usize],
    setup: &CaseSetup,
) -> relalign::Result<bool> {
    if setup.lambda == 0.0 || setup.strategy == Strategy::None {
        return Ok(true);
    }
    let align = AlignmentConfig {
        strategy: setup.strategy,
        phi: setup.phi,
        normalize_features: setup.normalize_features,
        ..AlignmentConfig::default()
    };
    let delta = align.huber_delta;
    let t = backbone.newest_task();
    let total = backbone.layers();
    let layers = align.layers(total);
    let mut prevs = Vec::new();
    let mut curs = Vec::new();
    for s in batch {
        let (p, c) = backbone.dual_forward(&s.x, t, classes)?;
        match setup.strategy {
            Strategy::FeatureLast | Strategy::FeatureAll => {
                for l in align.feature_layers(total) {
                    let (up, uc) = if setup.normalize_features {
                        (normalize(p.state(l)).0, normalize(c.state(l)).0)
                    } else {
                        (p.state(l).to_vec(), c.state(l).to_vec())
                    };
                    let q = up
                        .iter()
                        .zip(&uc)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / uc.len() as f64;
                    if near_kink(q, delta) {
                        return Ok(false);
                    }
                }
            }
            _ => {
                prevs.push(relation_matrix(&p, setup.phi, &layers)?);
                curs.push(relation_matrix(&c, setup.phi, &layers)?);
            }
        }
    }
    match setup.strategy {
        Strategy::Eigen => {
            for (p, c) in prevs.iter().zip(&curs) {
                if !spectrum_ok(&p.entries, &c.entries, delta)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Strategy::BEigen => spectrum_ok(&mean_matrix(&prevs), &mean_matrix(&curs), delta),
        Strategy::P2p => Ok(!prevs.iter().zip(&curs).any(|(p, c)| {
            p.entries
                .as_slice()
                .iter()
                .zip(c.entries.as_slice())
                .any(|(a, b)| near_kink(a - b, delta))
        })),
        _ => Ok(true),
    }
}

/// Shifts the first gradient component; used to confirm the check can fail.
struct Corrupted<'a>(&'a dyn Objective);

impl Objective for Corrupted<'_> {
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn value(&self, params: &[f64]) -> relalign::Result<f64> {
        self.0.value(params)
    }

    fn value_and_grad(&self, params: &[f64]) -> relalign::Result<GradRecord> {
        let mut rec = self.0.value_and_grad(params)?;
        if let Some(g) = rec.gradient.first_mut() {
            *g += 1e-3 * g.abs().max(1.0);
        }
        Ok(rec)
    }
}

pub fn run_case(seed: u64, index: usize, corrupt: bool) -> Result<CaseResult, CliError> {
    let setup = case_setup(index);
    let base = Rng::new(seed, streams::INIT).derive(&format!("gradcheck/{index}"));
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = base.derive(&format!("attempt/{attempt}"));
        let (cand, backbone, batch, classes) = build(&setup, &mut rng)?;
        if !well_conditioned(&backbone, &batch, &classes, &setup)?
            || !differences_resolved(&cand.objective, &cand.params)?
        {
            continue;
        }
        let check = if corrupt {
            check_gradient(&Corrupted(&cand.objective), &cand.params)?
        } else {
            check_gradient(&cand.objective, &cand.params)?
        };
        return Ok(CaseResult {
            index,
            setup,
            layers: cand.layers,
            width: cand.width,
            task: cand.task,
            params: cand.params.len(),
            attempts: attempt + 1,
            check,
        });
    }
    Err(CliError::Runtime(format!(
        "no well-conditioned gradcheck candidate for case {index} after {MAX_ATTEMPTS} attempts"
    )))
}
