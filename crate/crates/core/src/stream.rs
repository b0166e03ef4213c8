//! Class-incremental data: synthetic Gaussian-cluster streams, disjoint task
//! partitioning, and CSV ingestion/export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, Rng};

/// Fraction of each class routed to the training split on CSV ingestion.
pub const CSV_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub total_classes: usize,
    pub tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
    pub within_class_std: f64,
    pub base_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            total_classes: 40,
            tasks: 10,
            train_per_class: 50,
            test_per_class: 20,
            input_dim: 16,
            cluster_separation: 6.0,
            within_class_std: 1.0,
            base_classes: 8,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.total_classes == 0 {
            return Err(Error::config(
                "stream.tasks and stream.total_classes must be positive",
            ));
        }
        if self.total_classes % self.tasks != 0 {
            return Err(Error::config(format!(
                "stream.total_classes ({}) is not divisible by stream.tasks ({})",
                self.total_classes, self.tasks
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::config("stream.input_dim must be positive"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("stream.train_per_class must be positive"));
        }
        if !(self.cluster_separation.is_finite() && self.within_class_std.is_finite())
            || self.within_class_std < 0.0
        {
            return Err(Error::config(
                "stream.cluster_separation/within_class_std must be finite, std ≥ 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    /// 1-based task index.
    pub task: usize,
    /// Sorted label set of this task.
    pub labels: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn input_dim(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(|s| s.x.len())
    }
}

/// Base (pretraining) set plus the ordered task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub base: Vec<Sample>,
    pub base_labels: Vec<usize>,
    pub tasks: Vec<TaskData>,
}

impl Stream {
    pub fn stream_labels(&self) -> BTreeSet<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.labels.iter().copied())
            .collect()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.tasks
            .iter()
            .find_map(TaskData::input_dim)
            .or_else(|| self.base.first().map(|s| s.x.len()))
    }

    /// Disjointness across tasks and between tasks and the base set; every
    /// sample's label belongs to its task.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for &l in &t.labels {
                if !seen.insert(l) {
                    return Err(Error::config(format!(
                        "label {l} appears in more than one task"
                    )));
                }
            }
            let set: BTreeSet<usize> = t.labels.iter().copied().collect();
            if let Some(s) = t.train.iter().chain(&t.test).find(|s| !set.contains(&s.y)) {
                return Err(Error::config(format!(
                    "task {} holds foreign label {}",
                    t.task, s.y
                )));
            }
        }
        if let Some(l) = self.base_labels.iter().find(|l| seen.contains(l)) {
            return Err(Error::config(format!(
                "base class {l} overlaps a stream class"
            )));
        }
        Ok(())
    }
}

/// Uniform shuffle of `class_ids` followed by chunking into `tasks` sorted sets.
pub fn split_classes(class_ids: &[usize], tasks: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || class_ids.len() % tasks != 0 {
        return Err(Error::config(format!(
            "{} classes cannot be split evenly into {tasks} tasks",
            class_ids.len()
        )));
    }
    let mut ids = class_ids.to_vec();
    rng.shuffle(&mut ids);
    let per = ids.len() / tasks;
    Ok(ids
        .chunks(per)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect())
}

/// Generates the base set and the task sequence. Stream classes are labelled
/// `0..total_classes`, base classes follow them.
pub fn make_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let data = Rng::new(spec.seed, streams::DATA);
    let n_all = spec.total_classes + spec.base_classes;

    let mut mean_rng = data.derive("means");
    let means: Vec<Vec<f64>> = (0..n_all)
        .map(|_| {
            let v = mean_rng.normal_vec(spec.input_dim, 1.0);
            let n = v
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter()
                .map(|a| a * spec.cluster_separation / n)
                .collect()
        })
        .collect();

    let draw = |class: usize, split: &str, count: usize| -> Vec<Sample> {
        let mut rng = data.derive(&format!("samples/{split}/{class}"));
        (0..count)
            .map(|_| Sample {
                x: means[class]
                    .iter()
                    .map(|m| m + spec.within_class_std * rng.normal())
                    .collect(),
                y: class,
            })
            .collect()
    };

    let class_ids: Vec<usize> = (0..spec.total_classes).collect();
    let groups = split_classes(&class_ids, spec.tasks, &mut data.derive("split"))?;
    let tasks = groups
        .into_iter()
        .enumerate()
        .map(|(i, labels)| TaskData {
            task: i + 1,
            train: labels
                .iter()
                .flat_map(|&c| draw(c, "train", spec.train_per_class))
                .collect(),
            test: labels
                .iter()
                .flat_map(|&c| draw(c, "test", spec.test_per_class))
                .collect(),
            labels,
        })
        .collect();

    let base_labels: Vec<usize> = (spec.total_classes..n_all).collect();
    let base = base_labels
        .iter()
        .flat_map(|&c| draw(c, "train", spec.train_per_class))
        .collect();

    let stream = Stream {
        base,
        base_labels,
        tasks,
    };
    stream.check_disjoint()?;
    Ok(stream)
}

fn parse_rows(path: &Path) -> Result<(Vec<Sample>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "header must be `label,feat_1,...,feat_k`".into(),
        });
    }
    for (i, h) in headers.iter().enumerate().skip(1) {
        if h != format!("feat_{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("unknown header field `{h}`, expected `feat_{i}`"),
            });
        }
    }
    let k = headers.len() - 1;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != k + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", k + 1, rec.len()),
            });
        }
        let y = rec[0].trim().parse::<usize>().map_err(|_| Error::Parse {
            line,
            message: format!("label `{}` is not a non-negative integer", &rec[0]),
        })?;
        let x = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("field `{f}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(Sample { x, y });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: format!("{} has no data rows", path.display()),
        });
    }
    Ok((out, k))
}

/// Reads a labelled CSV, splits each class 80/20 into train/test under the
/// `data` stream and partitions the classes into `tasks` disjoint tasks.
pub fn load_csv(path: &Path, tasks: usize, seed: u64) -> Result<Vec<TaskData>> {
    let (rows, _) = parse_rows(path)?;
    let mut by_label: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in rows {
        by_label.entry(s.y).or_default().push(s);
    }
    let data = Rng::new(seed, streams::DATA);
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (&label, samples) in &by_label {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        data.derive(&format!("csv-split/{label}")).shuffle(&mut idx);
        let n_train = (CSV_TRAIN_FRACTION * samples.len() as f64).round() as usize;
        let (tr, te) = idx.split_at(n_train);
        let mut tr = tr.to_vec();
        let mut te = te.to_vec();
        tr.sort_unstable();
        te.sort_unstable();
        train.insert(
            label,
            tr.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>(),
        );
        test.insert(
            label,
            te.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>(),
        );
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let groups = split_classes(&labels, tasks, &mut data.derive("split"))?;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, labels)| TaskData {
            task: i + 1,
            train: labels.iter().flat_map(|l| train[l].clone()).collect(),
            test: labels.iter().flat_map(|l| test[l].clone()).collect(),
            labels,
        })
        .collect())
}

/// One file of an exported stream: `train_rows` training rows followed by test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: usize,
    pub file: String,
    pub labels: Vec<usize>,
    pub train_rows: usize,
    pub test_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_dim: usize,
    pub base: ManifestEntry,
    pub tasks: Vec<ManifestEntry>,
}

/// `label,feat_1,...` rows with every real printed at 17 significant digits.
pub fn write_samples_csv(path: &Path, samples: &[Sample], input_dim: usize) -> Result<()> {
    let mut out = String::from("label");
    for i in 1..=input_dim {
        out.push_str(&format!(",feat_{i}"));
    }
    out.push('\n');
    for s in samples {
        out.push_str(&s.y.to_string());
        for v in &s.x {
            out.push(',');
            out.push_str(&format_real(*v));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Shortest text that reloads to the same `f64`, never fewer than 17 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `base.csv`, `task_XX.csv` and `manifest.json` into `dir`.
pub fn export_stream(stream: &Stream, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let input_dim = stream
        .input_dim()
        .ok_or_else(|| Error::contract("cannot export an empty stream"))?;
    let write = |task: usize,
                 name: String,
                 labels: &[usize],
                 train: &[Sample],
                 test: &[Sample]|
     -> Result<ManifestEntry> {
        let rows: Vec<Sample> = train.iter().chain(test).cloned().collect();
        write_samples_csv(&dir.join(&name), &rows, input_dim)?;
        Ok(ManifestEntry {
            task,
            file: name,
            labels: labels.to_vec(),
            train_rows: train.len(),
            test_rows: test.len(),
        })
    };
    let base = write(0, "base.csv".into(), &stream.base_labels, &stream.base, &[])?;
    let tasks = stream
        .tasks
        .iter()
        .map(|t| {
            write(
                t.task,
                format!("task_{:02}.csv", t.task),
                &t.labels,
                &t.train,
                &t.test,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        input_dim,
        base,
        tasks,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reloads an exported stream exactly, splits included.
pub fn load_manifest(path: &Path) -> Result<Stream> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let read = |e: &ManifestEntry| -> Result<(Vec<Sample>, Vec<Sample>)> {
        let (rows, k) = parse_rows(&dir.join(&e.file))?;
        if k != manifest.input_dim {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "{} has {k} features, manifest says {}",
                    e.file, manifest.input_dim
                ),
            });
        }
        if rows.len() != e.train_rows + e.test_rows {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "{} has {} rows, manifest says {}",
                    e.file,
                    rows.len(),
                    e.train_rows + e.test_rows
                ),
            });
        }
        let mut rows = rows;
        let test = rows.split_off(e.train_rows);
        Ok((rows, test))
    };
    let (base, _) = if manifest.base.train_rows + manifest.base.test_rows == 0 {
        (Vec::new(), Vec::new())
    } else {
        read(&manifest.base)?
    };
    let tasks = manifest
        .tasks
        .iter()
        .map(|e| {
            let (train, test) = read(e)?;
            Ok(TaskData {
                task: e.task,
                labels: e.labels.clone(),
                train,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stream = Stream {
        base,
        base_labels: manifest.base.labels.clone(),
        tasks,
    };
    stream.check_disjoint()?;
    Ok(stream)
}
