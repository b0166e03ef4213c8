use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use relalign::metrics::{theory_report, BoundReport};
use relalign::numerics::{streams, Rng};
use relalign::relation::{weyl_sweep, Strategy, WeylSweep};
use relalign::stream::{
    export_stream, format_real, load_csv, load_manifest, make_stream, Manifest, Stream,
};
use relalign::trainer::{run_stream, RunOutcome, RunReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::gradcheck::{run_case, CaseResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: ExperimentConfig,
    pub dataset_hash: String,
    pub wall_clock_seconds: f64,
    pub seed: u64,
    /// Present when the run was made by `theory`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory_report: Option<String>,
    pub run: RunReport,
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn dataset_hash(stream: &Stream) -> Result<String, CliError> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(stream)?)))
}

pub fn load_stream(cfg: &ExperimentConfig) -> Result<Stream, CliError> {
    if let Some(path) = &cfg.data.manifest {
        Ok(load_manifest(path)?)
    } else if let Some(path) = &cfg.data.csv {
        Ok(Stream {
            base: Vec::new(),
            base_labels: Vec::new(),
            tasks: load_csv(path, cfg.stream.tasks, cfg.seed)?,
        })
    } else {
        Ok(make_stream(&cfg.stream_spec())?)
    }
}

pub fn execute(cfg: &ExperimentConfig, stream: &Stream) -> Result<RunOutcome, CliError> {
    let dim = stream
        .input_dim()
        .ok_or_else(|| CliError::Config("data source holds no samples".into()))?;
    Ok(run_stream(
        stream,
        &cfg.backbone_config(dim),
        &cfg.train_config(),
    )?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output.dir {} is not writable: {e}", dir.display())))
}

pub fn accuracy_csv(report: &RunReport) -> String {
    let mut out = String::from("model_task,eval_task,accuracy\n");
    for (i, row) in report.accuracy.rows().iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, j + 1, format_real(*a));
        }
    }
    out
}

pub fn drift_csv(report: &RunReport) -> String {
    let mut out =
        String::from("probe_task,model_task,sample_count,mean_relation_drift,mean_feature_drift\n");
    for d in &report.drift {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            d.probe_task,
            d.model_task,
            d.sample_count,
            format_real(d.mean_relation_drift),
            format_real(d.mean_feature_drift)
        );
    }
    out
}

fn write_run(
    cfg: &ExperimentConfig,
    outcome: &RunOutcome,
    hash: String,
    seconds: f64,
    theory: Option<&str>,
) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(&outcome.report))?;
    fs::write(dir.join("drift.csv"), drift_csv(&outcome.report))?;
    if cfg.output.checkpoints || theory.is_some() {
        outcome.backbone.save(&dir.join("backbone.json"))?;
        fs::write(dir.join("heads.json"), serde_json::to_vec(&outcome.heads)?)?;
    }
    let file = ReportFile {
        config: cfg.clone(),
        dataset_hash: hash,
        wall_clock_seconds: seconds,
        seed: cfg.seed,
        theory_report: theory.map(str::to_owned),
        run: outcome.report.clone(),
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport, CliError> {
    ensure_dir(&cfg.output.dir)?;
    let start = Instant::now();
    let stream = load_stream(cfg)?;
    let outcome = execute(cfg, &stream)?;
    write_run(
        cfg,
        &outcome,
        dataset_hash(&stream)?,
        start.elapsed().as_secs_f64(),
        None,
    )?;
    let s = &outcome.report.summary;
    println!(
        "run {}: tasks={} A_last={} A_avg={}",
        cfg.label,
        outcome.report.accuracy.tasks(),
        format_real(s.last),
        format_real(s.average)
    );
    Ok(outcome.report)
}

/// One ablation variant: a strategy and, for feature distillation, whether
/// features are normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub strategy: Strategy,
    pub normalize_features: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        if self.strategy.uses_features() {
            let sign = if self.normalize_features { '+' } else { '-' };
            format!("{}{}norm", self.strategy.name(), sign)
        } else {
            self.strategy.name().to_owned()
        }
    }
}

pub const VARIANTS: [Variant; 8] = [
    Variant {
        strategy: Strategy::None,
        normalize_features: true,
    },
    Variant {
        strategy: Strategy::FeatureLast,
        normalize_features: true,
    },
    Variant {
        strategy: Strategy::FeatureLast,
        normalize_features: false,
    },
    Variant {
        strategy: Strategy::FeatureAll,
        normalize_features: true,
    },
    Variant {
        strategy: Strategy::FeatureAll,
        normalize_features: false,
    },
    Variant {
        strategy: Strategy::P2p,
        normalize_features: true,
    },
    Variant {
        strategy: Strategy::BEigen,
        normalize_features: true,
    },
    Variant {
        strategy: Strategy::Eigen,
        normalize_features: true,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub a_last: f64,
    pub a_avg: f64,
    pub final_forgetting: Option<f64>,
    pub dataset_hash: String,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,seeds,a_last,a_avg,final_forgetting,dataset_hash\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            seeds.join(";"),
            format_real(r.a_last),
            format_real(r.a_avg),
            r.final_forgetting.map(format_real).unwrap_or_default(),
            r.dataset_hash
        );
    }
    out
}

/// Runs every variant on the same streams; rows follow [`VARIANTS`] order.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>, CliError> {
    ensure_dir(&cfg.output.dir)?;
    let seeds = if cfg.ablation.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablation.seeds.clone()
    };
    let mut data = Vec::with_capacity(seeds.len());
    let mut hasher = Sha256::new();
    for &seed in &seeds {
        let seeded = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let stream = load_stream(&seeded)?;
        hasher.update(dataset_hash(&stream)?.as_bytes());
        data.push((seeded, stream));
    }
    let hash = hex(&hasher.finalize());

    let results: Vec<Result<AblationRow, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = VARIANTS
            .iter()
            .map(|v| {
                let data = &data;
                let hash = &hash;
                let seeds = &seeds;
                scope.spawn(move || -> Result<AblationRow, CliError> {
                    let mut last = Vec::new();
                    let mut avg = Vec::new();
                    let mut forget = Vec::new();
                    for (seeded, stream) in data {
                        let mut c = seeded.clone();
                        c.alignment.strategy = v.strategy;
                        c.alignment.normalize_features = v.normalize_features;
                        let report = execute(&c, stream)?.report;
                        last.push(report.summary.last);
                        avg.push(report.summary.average);
                        forget.push(report.final_forgetting());
                    }
                    let final_forgetting = forget
                        .iter()
                        .copied()
                        .collect::<Option<Vec<f64>>>()
                        .map(|f| mean(&f));
                    Ok(AblationRow {
                        variant: v.name(),
                        seeds: seeds.clone(),
                        a_last: mean(&last),
                        a_avg: mean(&avg),
                        final_forgetting,
                        dataset_hash: hash.clone(),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Runtime("ablation worker panicked".into())))
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    fs::write(cfg.output.dir.join("ablation.csv"), ablation_csv(&rows))?;
    for r in &rows {
        println!(
            "{:<18} A_last={} A_avg={}",
            r.variant,
            format_real(r.a_last),
            format_real(r.a_avg)
        );
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TheoryOutcome {
    pub report: BoundReport,
    pub weyl: WeylSweep,
    pub run: RunReport,
}

pub fn theory_text(report: &BoundReport, weyl: &WeylSweep) -> String {
    let counted = report.counted().count();
    let violations = report.violations().len();
    let excluded = report.records.len() - counted;
    let mut per_name: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in report.counted() {
        let e = per_name.entry(&r.name).or_default();
        e.0 += 1;
        if !r.holds {
            e.1 += 1;
        }
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# weyl_sweep cases={} violations={} min_slack={}",
        weyl.cases,
        weyl.violations,
        format_real(weyl.min_slack)
    );
    let _ = writeln!(
        out,
        "# records={} counted={counted} excluded={excluded} violations={violations}",
        report.records.len()
    );
    for (name, (n, v)) in per_name {
        let _ = writeln!(out, "# {name} counted={n} violations={v}");
    }
    out.push_str(&report.to_text());
    out
}

pub fn cmd_theory(cfg: &ExperimentConfig) -> Result<TheoryOutcome, CliError> {
    ensure_dir(&cfg.output.dir)?;
    let start = Instant::now();
    let stream = load_stream(cfg)?;
    let outcome = execute(cfg, &stream)?;
    let report = theory_report(&outcome.backbone, &outcome.heads, &stream.tasks)?;
    let mut rng = Rng::new(cfg.seed, streams::INIT).derive("weyl");
    let weyl = weyl_sweep(cfg.theory.weyl_cases, &mut rng)?;
    let text = theory_text(&report, &weyl);
    fs::write(cfg.output.dir.join("theory.txt"), &text)?;
    write_run(
        cfg,
        &outcome,
        dataset_hash(&stream)?,
        start.elapsed().as_secs_f64(),
        Some("theory.txt"),
    )?;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        println!("{line}");
    }
    for v in report.violations() {
        println!(
            "violation {} s={} t={} lhs={} rhs={} {}",
            v.name,
            v.s.map_or_else(|| "-".to_owned(), |s| s.to_string()),
            v.t,
            format_real(v.lhs),
            v.rhs.map_or_else(|| "unbounded".to_owned(), format_real),
            v.note
        );
    }
    Ok(TheoryOutcome {
        report,
        weyl,
        run: outcome.report,
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, corrupt: bool) -> Result<Vec<CaseResult>, CliError> {
    let results = (0..cfg.gradcheck.cases)
        .map(|i| run_case(cfg.seed, i, corrupt))
        .collect::<Result<Vec<_>, _>>()?;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for r in &results {
        worst = worst.max(r.check.worst_rel_error);
        println!(
            "case {:>3} strategy={:<12} phi={:?} lambda={} task={} layers={} width={} params={} compared={} worst_rel_error={:.3e} {}",
            r.index,
            r.setup.strategy.name(),
            r.setup.phi,
            r.setup.lambda,
            r.task,
            r.layers,
            r.width,
            r.params,
            r.check.compared,
            r.check.worst_rel_error,
            if r.check.passed() { "PASS" } else { "FAIL" }
        );
        if !r.check.passed() {
            failures.push(format!("case {} indices {:?}", r.index, r.check.offending));
        }
    }
    println!(
        "worst relative error over {} cases: {:.3e}",
        results.len(),
        worst
    );
    if failures.is_empty() {
        Ok(results)
    } else {
        Err(CliError::GradientMismatch(failures.join("; ")))
    }
}

pub fn cmd_export(cfg: &ExperimentConfig) -> Result<Manifest, CliError> {
    ensure_dir(&cfg.output.dir)?;
    let stream = load_stream(cfg)?;
    let manifest = export_stream(&stream, &cfg.output.dir)?;
    println!(
        "exported {} task files to {}",
        manifest.tasks.len(),
        cfg.output.dir.display()
    );
    Ok(manifest)
}
