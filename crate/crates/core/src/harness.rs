//! Multi-run experiments: add-one / remove-one ablations and the
//! explicit × implicit pairwise matrix. Independent runs execute through
//! [`par::map`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::par;
use crate::perturb::PerturbationSpec;
use crate::train::{self, NullSink, RunDirs, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn with_branches(&self, name: impl Into<String>, branches: Vec<PerturbationSpec>) -> RunSpec {
        let mut s = self.clone();
        s.name = name.into();
        s.train.branches = branches;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub branches: Vec<String>,
    pub steps: usize,
    /// Final metrics per evaluated split.
    pub metrics: BTreeMap<String, MetricsRecord>,
    /// Mean branch-view TV to uniform per training epoch.
    pub epoch_tv: Vec<f64>,
}

impl RunResult {
    pub fn accuracy(&self, split: &str) -> Result<f64> {
        self.metrics
            .get(split)
            .map(|m| m.accuracy)
            .ok_or_else(|| Error::Config(format!("run `{}` has no `{split}` metrics", self.name)))
    }
}

/// Trains one run in f64 and scores every split in `evals` once at the end.
pub fn run_one(spec: &RunSpec, train_data: &[Example], evals: &[(&str, &[Example])]) -> Result<RunResult> {
    let mut cfg = spec.train.clone();
    cfg.eval_every = usize::MAX;
    let out = train::train::<f64>(&spec.encoder, &cfg, train_data, &[], &mut NullSink, &RunDirs::default())?;
    let mut metrics = BTreeMap::new();
    for (name, split) in evals {
        let rec = crate::eval::evaluate(&out.model, name, split, &cfg.eval_views, cfg.seed, cfg.eval_chunk, out.steps, 0.0)?;
        metrics.insert(name.to_string(), rec);
    }
    Ok(RunResult {
        name: spec.name.clone(),
        branches: spec.train.branches.iter().map(|b| b.to_string()).collect(),
        steps: out.steps,
        metrics,
        epoch_tv: out.epochs.iter().map(|e| e.tv_branch).collect(),
    })
}

/// Runs every spec (in parallel when enabled), preserving order.
pub fn run_many(specs: &[RunSpec], train_data: &[Example], evals: &[(&str, &[Example])]) -> Result<Vec<RunResult>> {
    par::map(specs, |s| run_one(s, train_data, evals)).into_iter().collect()
}

/// The `2B + 2` ablation configurations of `base`'s branch set: vanilla,
/// each branch alone, the full set, and the full set minus each branch.
pub fn ablation_specs(base: &RunSpec) -> Vec<RunSpec> {
    let all = &base.train.branches;
    let mut out = vec![base.with_branches("vanilla", vec![])];
    for b in all {
        out.push(base.with_branches(format!("+{b}"), vec![b.clone()]));
    }
    out.push(base.with_branches("full", all.clone()));
    for (i, b) in all.iter().enumerate() {
        let rest = all.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s.clone()).collect();
        out.push(base.with_branches(format!("-{b}"), rest));
    }
    out
}

/// Vanilla followed by one run per (explicit, implicit) pair, row-major.
pub fn pairwise_specs(base: &RunSpec, explicit: &[PerturbationSpec], implicit: &[PerturbationSpec]) -> Result<Vec<RunSpec>> {
    if let Some(e) = explicit.iter().find(|s| !s.kind.is_explicit()) {
        return Err(Error::Config(format!("`{e}` is not an explicit operator")));
    }
    if let Some(i) = implicit.iter().find(|s| s.kind.is_explicit()) {
        return Err(Error::Config(format!("`{i}` is not an implicit operator")));
    }
    let mut out = vec![base.with_branches("vanilla", vec![])];
    for e in explicit {
        for i in implicit {
            out.push(base.with_branches(format!("{e}+{i}"), vec![e.clone(), i.clone()]));
        }
    }
    Ok(out)
}

/// One row per run: name, branches, steps, then accuracy / f1 / tv columns
/// per split.
pub fn write_results_csv(path: &Path, results: &[RunResult], splits: &[&str]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["config".to_string(), "branches".into(), "steps".into()];
    for s in splits {
        for m in ["accuracy", "f1", "tv_uniform", "tv_branch"] {
            header.push(format!("{s}_{m}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        let mut row = vec![r.name.clone(), r.branches.join(";"), r.steps.to_string()];
        for s in splits {
            let m = r.metrics.get(*s).ok_or_else(|| Error::Config(format!("run `{}` has no `{s}` metrics", r.name)))?;
            for v in [m.accuracy, m.f1, m.tv_uniform, m.tv_branch] {
                row.push(format!("{v:.6}"));
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy deltas (in points) of each pair over vanilla, explicit ops as
/// rows and implicit ops as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTable {
    pub explicit: Vec<String>,
    pub implicit: Vec<String>,
    pub splits: Vec<String>,
    /// `deltas[split][row][col]`.
    pub deltas: Vec<Vec<Vec<f64>>>,
}

impl PairwiseTable {
    /// `results` as produced by running [`pairwise_specs`].
    pub fn from_results(results: &[RunResult], explicit: &[PerturbationSpec], implicit: &[PerturbationSpec], splits: &[&str]) -> Result<Self> {
        if results.len() != 1 + explicit.len() * implicit.len() {
            return Err(Error::Config("pairwise results do not match the operator grid".into()));
        }
        let vanilla = &results[0];
        let mut deltas = Vec::new();
        for s in splits {
            let base = vanilla.accuracy(s)?;
            let mut rows = Vec::new();
            for r in 0..explicit.len() {
                let mut row = Vec::new();
                for c in 0..implicit.len() {
                    row.push(100.0 * (results[1 + r * implicit.len() + c].accuracy(s)? - base));
                }
                rows.push(row);
            }
            deltas.push(rows);
        }
        Ok(PairwiseTable {
            explicit: explicit.iter().map(|e| e.to_string()).collect(),
            implicit: implicit.iter().map(|i| i.to_string()).collect(),
            splits: splits.iter().map(|s| s.to_string()).collect(),
            deltas,
        })
    }

    /// Header `explicit,<split>:<implicit>,...`; one row per explicit op.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let mut header = vec!["explicit".to_string()];
        for s in &self.splits {
            for i in &self.implicit {
                header.push(format!("{s}:{i}"));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for (r, e) in self.explicit.iter().enumerate() {
            let mut row = vec![e.clone()];
            for s in 0..self.splits.len() {
                for c in 0..self.implicit.len() {
                    row.push(format!("{:.3}", self.deltas[s][r][c]));
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes `results` as one JSON object per line.
pub fn write_results_jsonl(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
