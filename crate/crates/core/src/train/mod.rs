//! Training loop.
//!
//! One step on a batch of `n` intact examples:
//! 1. build the explicit views of every branch (shuffled, constituent-dropped,
//!    fractionally dropped tokens);
//! 2. run the encoder once over the intact inputs and all explicit views,
//!    tapping the pooled representation after block `k` for truncation
//!    branches (identical to a separate `k`-block pass);
//! 3. zero coordinates of the intact representation for rep-zero branches;
//! 4. apply the intact head and each branch's head;
//! 5. combine per the fusion mode: `CE + λ·L` with the contrastive term over
//!    intact views, perturbed views and the dummy, or PoE / focal with the
//!    branches as biased experts;
//! 6. backward and one AdamW step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::Example;
use crate::encoder::{BranchId, EncoderConfig, Model, TokenSeq};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord};
use crate::objectives::{self, BranchGrouping, DebiasConfig, Fusion, NormalizeZ};
use crate::optim::{AdamW, AdamWConfig};
use crate::perturb::{self, PerturbKind, PerturbationSpec, ViewPayload};
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub branches: Vec<PerturbationSpec>,
    pub debias: DebiasConfig,
    /// Evaluate every this many steps (0: only at the end of each epoch).
    pub eval_every: usize,
    /// Draw every perturbation once (epoch 0 stream) instead of per epoch.
    pub freeze_perturbations: bool,
    /// Fraction of train held out for early stopping on validation accuracy
    /// (0: train for exactly `epochs`).
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Save a checkpoint every this many steps (0: final model only).
    pub checkpoint_every: usize,
    /// Views scored by the TV-to-uniform metric.
    pub eval_views: Vec<PerturbationSpec>,
    /// Sequences per inference chunk.
    pub eval_chunk: usize,
}

pub fn default_branches() -> Vec<PerturbationSpec> {
    ["shuffle", "drop_constituent:1", "drop_constituent:2", "fractional_drop:0.5", "layer_truncate:2", "rep_zero:0.9"]
        .iter()
        .map(|s| s.parse().expect("valid spec"))
        .collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            branches: default_branches(),
            debias: DebiasConfig::default(),
            eval_every: 0,
            freeze_perturbations: false,
            val_fraction: 0.0,
            patience: 2,
            checkpoint_every: 0,
            eval_views: default_branches(),
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.debias.validate()?;
        let mut seen = Vec::new();
        for b in self.branches.iter().chain(&self.eval_views) {
            b.validate(enc.n_layers)?;
        }
        for b in &self.branches {
            if seen.contains(&b.branch()) {
                return Err(Error::Config(format!("two branches map to head `{}`", b.branch())));
            }
            seen.push(b.branch());
        }
        if self.debias.fusion != Fusion::Contrastive && self.branches.is_empty() {
            return Err(Error::Config("poe/focal fusion needs at least one branch".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn branch_ids(&self) -> Vec<BranchId> {
        self.branches.iter().map(PerturbationSpec::branch).collect()
    }
}

/// Loss components of one step. `total = ce + lambda·debias` in contrastive
/// mode; in PoE/focal mode `total` is the fused loss and `debias = total - ce`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub debias: f64,
    pub lambda: f64,
    /// Number of elements entering the contrastive term (2n+1 for one branch).
    pub contrastive_batch: usize,
    /// Mean TV to uniform of the branch heads' predictions on their views.
    pub tv_branch: f64,
}

/// Per-branch model input for a batch.
pub(crate) enum BranchInput {
    /// Index of the branch's first row in the combined explicit batch.
    Explicit { offset: usize },
    Truncate { k: usize },
    Mask { keep: Vec<bool> },
}

/// The combined encoder batch and the per-branch layout inside it.
pub(crate) struct ViewBatch {
    pub seqs: Vec<TokenSeq>,
    pub n: usize,
    pub inputs: Vec<(BranchId, BranchInput)>,
}

/// Builds the intact sequences followed by every explicit view.
pub(crate) fn build_view_batch<T: Real>(
    model: &Model<T>,
    branches: &[PerturbationSpec],
    batch: &[&Example],
    ids: &[usize],
    master: u64,
    epoch: u64,
) -> Result<ViewBatch> {
    let cfg = model.config();
    let sep = cfg.sep_id;
    let n = batch.len();
    let mut seqs: Vec<TokenSeq> = batch.iter().map(|e| TokenSeq::join(&e.c, sep)).collect();
    let mut inputs = Vec::with_capacity(branches.len());
    for spec in branches {
        let input = match spec.kind {
            PerturbKind::LayerTruncate(k) => {
                perturb::layer_truncate(k, cfg.n_layers)?;
                BranchInput::Truncate { k }
            }
            PerturbKind::RepZero(_) => {
                let mut keep = Vec::with_capacity(n * cfg.d_model);
                for (e, &id) in batch.iter().zip(ids) {
                    let mut rng = perturb::stream_rng(master, id as u64, spec, epoch);
                    match perturb::apply(spec, id, &e.c, cfg.n_layers, cfg.d_model, &mut rng)?.payload {
                        ViewPayload::RepMask { keep: k } => keep.extend(k),
                        _ => unreachable!("rep_zero yields a mask"),
                    }
                }
                BranchInput::Mask { keep }
            }
            _ => {
                let offset = seqs.len();
                for (e, &id) in batch.iter().zip(ids) {
                    let mut rng = perturb::stream_rng(master, id as u64, spec, epoch);
                    match perturb::apply(spec, id, &e.c, cfg.n_layers, cfg.d_model, &mut rng)?.payload {
                        ViewPayload::Tokens(c) => seqs.push(TokenSeq::join(&c, sep)),
                        _ => unreachable!("explicit operators yield tokens"),
                    }
                }
                BranchInput::Explicit { offset }
            }
        };
        inputs.push((spec.branch(), input));
    }
    Ok(ViewBatch { seqs, n, inputs })
}

/// Forward pass over a view batch: intact logits and, per branch, the logits
/// of `head_of(branch)` on that branch's views.
pub(crate) fn forward_views<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    params: &[Var],
    vb: &ViewBatch,
    head_of: impl Fn(BranchId) -> BranchId,
    dropout: Option<&mut seed::Rng>,
) -> Result<(Var, Vec<Var>)> {
    let l = model.config().n_layers;
    let mut taps = vec![l];
    for (_, inp) in &vb.inputs {
        if let BranchInput::Truncate { k } = inp {
            if !taps.contains(k) {
                taps.push(*k);
            }
        }
    }
    let pooled = model.encode_batch(g, params, &vb.seqs, &taps, dropout)?;
    let full = pooled[0];
    let n = vb.n;
    let intact_rep = if vb.seqs.len() == n { full } else { g.slice_rows(full, 0, n)? };
    let z_intact = model.head(g, params, BranchId::Intact, intact_rep)?;
    let mut zs = Vec::with_capacity(vb.inputs.len());
    for (branch, inp) in &vb.inputs {
        let rep = match inp {
            BranchInput::Explicit { offset } => g.slice_rows(full, *offset, n)?,
            BranchInput::Truncate { k } => {
                let t = pooled[taps.iter().position(|x| x == k).expect("tap")];
                if vb.seqs.len() == n {
                    t
                } else {
                    g.slice_rows(t, 0, n)?
                }
            }
            BranchInput::Mask { keep } => {
                let d = model.config().d_model;
                let mask = Tensor::new(vec![n, d], keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect())?;
                g.mask_apply(intact_rep, &mask)?
            }
        };
        zs.push(model.head(g, params, head_of(*branch), rep)?);
    }
    Ok((z_intact, zs))
}

fn tv_rows<T: Real>(logits: &Tensor<T>) -> f64 {
    let (rows, _) = logits.dims2("tv").expect("matrix");
    (0..rows)
        .map(|r| {
            let z: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            eval::tv_to_uniform(&eval::softmax(&z))
        })
        .sum::<f64>()
        / rows.max(1) as f64
}

/// Model plus optimizer state.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(encoder: EncoderConfig, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate(&encoder)?;
        let model = Model::new(encoder, &config.branch_ids(), config.seed)?;
        let opt = AdamW::new(config.adamw(), total_steps);
        Ok(Trainer { model, opt, config, step: 0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Builds the loss of one batch on `g`; returns the loss node, the bound
    /// parameters and the breakdown.
    fn loss(&self, g: &mut Graph<T>, batch: &[&Example], ids: &[usize], epoch: usize) -> Result<(Var, Vec<Var>, LossBreakdown)> {
        let cfg = &self.config;
        let dc = &cfg.debias;
        let epoch = if cfg.freeze_perturbations { 0 } else { epoch as u64 };
        let labels: Vec<usize> = batch.iter().map(|e| e.y).collect();
        let params = self.model.store.bind(g, true);
        let vb = build_view_batch(&self.model, &cfg.branches, batch, ids, cfg.seed, epoch)?;
        let mut drop_rng = seed::rng(cfg.seed, &[seed::DROPOUT, self.step as u64]);
        let dropout = (self.model.config().dropout > 0.0).then_some(&mut drop_rng);
        let (zi, zb) = forward_views(&self.model, g, &params, &vb, |b| b, dropout)?;
        let ce = objectives::cross_entropy(g, zi, &labels)?;
        let ce_v = g.value(ce)?.item().expect("scalar").to_f64().unwrap_or(f64::NAN);
        let tv_branch = if zb.is_empty() {
            0.0
        } else {
            zb.iter().map(|&z| tv_rows(g.value(z).expect("live"))).sum::<f64>() / zb.len() as f64
        };
        let mut out = LossBreakdown { ce: ce_v, tv_branch, ..Default::default() };
        let total = if zb.is_empty() {
            ce
        } else {
            match dc.fusion {
                Fusion::Contrastive => {
                    let lambda = dc.lambda_at(self.step);
                    let norm = |g: &mut Graph<T>, z: Var| match dc.normalize_z {
                        NormalizeZ::Softmax => g.softmax(z, 1),
                        NormalizeZ::Raw => Ok(z),
                    };
                    let zin = norm(g, zi)?;
                    let zbn = zb.iter().map(|&z| norm(g, z)).collect::<Result<Vec<_>>>()?;
                    let ld = match dc.grouping {
                        BranchGrouping::Pooled => {
                            let mut parts = vec![zin];
                            parts.extend(&zbn);
                            let all = g.concat_rows(&parts)?;
                            let groups = objectives::build_groups(&labels, labels.len() * zbn.len());
                            out.contrastive_batch = groups.len();
                            objectives::contrastive_debias_loss(g, all, &groups, dc.tau, dc.dummy_as_anchor, dc.reduction)?
                        }
                        BranchGrouping::PerBranch => {
                            let groups = objectives::build_groups(&labels, labels.len());
                            out.contrastive_batch = groups.len();
                            let mut acc = None;
                            for &z in &zbn {
                                let all = g.concat_rows(&[zin, z])?;
                                let l = objectives::contrastive_debias_loss(g, all, &groups, dc.tau, dc.dummy_as_anchor, dc.reduction)?;
                                acc = Some(match acc {
                                    None => l,
                                    Some(a) => g.add(a, l)?,
                                });
                            }
                            acc.expect("at least one branch")
                        }
                    };
                    out.debias = g.value(ld)?.item().expect("scalar").to_f64().unwrap_or(f64::NAN);
                    out.lambda = lambda;
                    objectives::combined_loss(g, ce, ld, lambda)?
                }
                Fusion::Poe => objectives::poe_loss(g, zi, &zb, &labels)?,
                Fusion::Focal => objectives::focal_loss(g, zi, &zb, &labels, dc.gamma)?,
            }
        };
        out.total = g.value(total)?.item().expect("scalar").to_f64().unwrap_or(f64::NAN);
        if dc.fusion != Fusion::Contrastive && !zb.is_empty() {
            out.debias = out.total - out.ce;
        }
        Ok((total, params, out))
    }

    /// Loss of a batch without updating anything.
    pub fn evaluate_loss(&self, batch: &[&Example], ids: &[usize], epoch: usize) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        Ok(self.loss(&mut g, batch, ids, epoch)?.2)
    }

    /// One optimizer step on `batch`; `ids` are the examples' train indices
    /// (they key the perturbation streams).
    pub fn train_step(&mut self, batch: &[&Example], ids: &[usize], epoch: usize) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (loss, params, out) = self.loss(&mut g, batch, ids, epoch)?;
        if !out.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{out:?}"),
            });
        }
        g.backward(loss)?;
        let grads: Vec<Option<&[T]>> = params.iter().map(|&p| g.grad(p)).collect::<Result<_>>()?;
        self.opt.step(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(out)
    }
}

/// Receives training events.
pub trait MetricsSink {
    fn record(&mut self, event: &Event) -> Result<()>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Epoch {
        epoch: usize,
        step: usize,
        mean: LossBreakdown,
        wall_clock_s: f64,
    },
    Eval {
        epoch: usize,
        #[serde(flatten)]
        record: MetricsRecord,
    },
    Checkpoint {
        step: usize,
        path: String,
    },
    EarlyStop {
        epoch: usize,
        best_epoch: usize,
        best_val_accuracy: f64,
    },
}

pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &Event) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per event to a file.
pub struct JsonlSink {
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlSink {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, event: &Event) -> Result<()> {
        use std::io::Write;
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

impl MetricsSink for Vec<Event> {
    fn record(&mut self, event: &Event) -> Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Result of a full training run.
pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
    pub history: Vec<MetricsRecord>,
}

/// Where a run writes checkpoints (`<dir>/step-<k>/`) and NaN dumps.
#[derive(Clone, Debug, Default)]
pub struct RunDirs {
    pub out: Option<PathBuf>,
}

fn mean_breakdown(v: &[LossBreakdown]) -> LossBreakdown {
    let n = v.len().max(1) as f64;
    LossBreakdown {
        total: v.iter().map(|b| b.total).sum::<f64>() / n,
        ce: v.iter().map(|b| b.ce).sum::<f64>() / n,
        debias: v.iter().map(|b| b.debias).sum::<f64>() / n,
        lambda: v.last().map_or(0.0, |b| b.lambda),
        contrastive_batch: v.first().map_or(0, |b| b.contrastive_batch),
        tv_branch: v.iter().map(|b| b.tv_branch).sum::<f64>() / n,
    }
}

/// Trains on `train`, evaluating `evals` (name, split) at the end of every
/// epoch (and every `eval_every` steps). With `val_fraction > 0` the tail of
/// a seeded permutation of `train` is held out and the best-validation
/// parameters are returned.
pub fn train<T: Real>(
    encoder: &EncoderConfig,
    config: &TrainConfig,
    train: &[Example],
    evals: &[(&str, &[Example])],
    sink: &mut dyn MetricsSink,
    dirs: &RunDirs,
) -> Result<TrainOutcome<T>> {
    config.validate(encoder)?;
    let mut ids: Vec<usize> = (0..train.len()).collect();
    let mut val_ids = Vec::new();
    if config.val_fraction > 0.0 {
        ids.shuffle(&mut seed::rng(config.seed, &[seed::ORDER, u64::MAX]));
        let n_val = ((train.len() as f64) * config.val_fraction).round() as usize;
        val_ids = ids.split_off(train.len() - n_val.min(train.len() - 2));
        ids.sort_unstable();
    }
    let batches_per_epoch = batches(ids.len(), config.batch_size);
    if batches_per_epoch == 0 {
        return Err(Error::Config("train split smaller than 2 examples".into()));
    }
    let mut trainer = Trainer::<T>::new(encoder.clone(), config.clone(), batches_per_epoch * config.epochs)?;
    let started = Instant::now();
    let mut epoch_means = Vec::new();
    let mut history = Vec::new();
    let val: Vec<Example> = val_ids.iter().map(|&i| train[i].clone()).collect();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut seed::rng(config.seed, &[seed::ORDER, epoch as u64]));
        let mut parts = Vec::with_capacity(batches_per_epoch);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let out = match trainer.train_step(&batch, chunk, epoch) {
                Ok(o) => o,
                Err(e) => {
                    if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&e, &dirs.out) {
                        let dump = serde_json::json!({
                            "step": trainer.step(),
                            "epoch": epoch,
                            "batch_ids": chunk,
                            "error": e.to_string(),
                        });
                        std::fs::create_dir_all(dir)?;
                        std::fs::write(dir.join("nan_dump.json"), serde_json::to_vec_pretty(&dump)?)?;
                    }
                    return Err(e);
                }
            };
            parts.push(out);
            let step = trainer.step();
            if config.eval_every > 0 && step % config.eval_every == 0 {
                for (name, split) in evals {
                    let rec = eval::evaluate(&trainer.model, name, split, &config.eval_views, config.seed, config.eval_chunk, step, started.elapsed().as_secs_f64())?;
                    sink.record(&Event::Eval { epoch, record: rec.clone() })?;
                    history.push(rec);
                }
            }
            if let (true, Some(dir)) = (config.checkpoint_every > 0 && step % config.checkpoint_every == 0, &dirs.out) {
                let path = dir.join(format!("step-{step}"));
                trainer.model.save(&path)?;
                sink.record(&Event::Checkpoint { step, path: path.display().to_string() })?;
            }
        }
        let mean = mean_breakdown(&parts);
        sink.record(&Event::Epoch {
            epoch,
            step: trainer.step(),
            mean,
            wall_clock_s: started.elapsed().as_secs_f64(),
        })?;
        epoch_means.push(mean);
        if config.eval_every == 0 {
            for (name, split) in evals {
                let rec = eval::evaluate(&trainer.model, name, split, &config.eval_views, config.seed, config.eval_chunk, trainer.step(), started.elapsed().as_secs_f64())?;
                sink.record(&Event::Eval { epoch, record: rec.clone() })?;
                history.push(rec);
            }
        }
        if !val.is_empty() {
            let acc = eval::evaluate(&trainer.model, "val", &val, &[], config.seed, config.eval_chunk, trainer.step(), started.elapsed().as_secs_f64())?.accuracy;
            if best.as_ref().map_or(true, |b| acc > b.0) {
                best = Some((acc, epoch, trainer.model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    let b = best.as_ref().expect("set");
                    sink.record(&Event::EarlyStop {
                        epoch,
                        best_epoch: b.1,
                        best_val_accuracy: b.0,
                    })?;
                    break;
                }
            }
        }
    }
    let steps = trainer.step();
    let model = match best {
        Some((_, _, m)) => m,
        None => trainer.model,
    };
    if let Some(dir) = &dirs.out {
        let path = dir.join(format!("step-{steps}"));
        model.save(&path)?;
        sink.record(&Event::Checkpoint { step: steps, path: path.display().to_string() })?;
    }
    Ok(TrainOutcome {
        model,
        epochs: epoch_means,
        steps,
        history,
    })
}

fn batches(n: usize, bs: usize) -> usize {
    n / bs + usize::from(n % bs >= 2)
}
