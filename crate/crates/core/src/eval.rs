//! Evaluation: accuracy and macro-F1 of the intact head, and mean total
//! variation to uniform of predictions on perturbed views.

use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::encoder::{BranchId, Model, TokenSeq};
use crate::error::Result;
use crate::par;
use crate::perturb::PerturbationSpec;
use crate::tensor::Real;
use crate::train::{build_view_batch, forward_views};
use crate::Graph;

/// Perturbation stream epoch used for evaluation views.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    /// Mean TV to uniform of the intact head on the evaluation views.
    pub tv_uniform: f64,
    /// Mean TV to uniform of each view scored by the model's own head for
    /// that view (the branch head when present, else the intact head).
    pub tv_branch: f64,
    pub ce: f64,
    pub step: usize,
    pub wall_clock_s: f64,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Half the L1 distance between `p` and the uniform distribution.
pub fn tv_to_uniform(p: &[f64]) -> f64 {
    let u = 1.0 / p.len() as f64;
    0.5 * p.iter().map(|v| (v - u).abs()).sum::<f64>()
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Unweighted mean of per-class F1 over classes `0..c`; a class with no gold
/// and no predicted examples scores 0.
pub fn macro_f1(pred: &[usize], gold: &[usize], c: usize) -> f64 {
    let mut f = 0.0;
    for k in 0..c {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == k && **g == k).count() as f64;
        let np = pred.iter().filter(|p| **p == k).count() as f64;
        let ng = gold.iter().filter(|g| **g == k).count() as f64;
        if np + ng > 0.0 {
            f += 2.0 * tp / (np + ng);
        }
    }
    f / c as f64
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Intact-head logits for every example.
pub fn intact_logits<T: Real>(model: &Model<T>, examples: &[Example], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<TokenSeq> = examples.iter().map(|e| TokenSeq::join(&e.c, model.config().sep_id)).collect();
    Ok(model
        .predict_batch(&seqs, BranchId::Intact, None, chunk)?
        .iter()
        .map(|z| to_f64(z))
        .collect())
}

/// Mean TV to uniform over every (example, view) pair. With `own_heads` a
/// view is scored by its branch head when the model has one.
pub fn view_tv<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    views: &[PerturbationSpec],
    seed: u64,
    chunk: usize,
    own_heads: bool,
) -> Result<f64> {
    if views.is_empty() || examples.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(chunk.max(1)).collect();
    let parts = par::map(&chunks, |ids| -> Result<f64> {
        let batch: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
        let vb = build_view_batch(model, views, &batch, ids, seed, EVAL_EPOCH)?;
        let mut g = Graph::new();
        let params = model.store.bind(&mut g, false);
        let head_of = |b: BranchId| if own_heads && model.has_head(b) { b } else { BranchId::Intact };
        let (_, zs) = forward_views(model, &mut g, &params, &vb, head_of, None)?;
        let mut sum = 0.0;
        for z in zs {
            let t = g.value(z)?;
            for r in 0..ids.len() {
                sum += tv_to_uniform(&softmax(&to_f64(t.row(r))));
            }
        }
        Ok(sum)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / (examples.len() * views.len()) as f64)
}

/// Scores `examples` with the intact head and the evaluation views.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    model: &Model<T>,
    split: &str,
    examples: &[Example],
    views: &[PerturbationSpec],
    seed: u64,
    chunk: usize,
    step: usize,
    wall_clock_s: f64,
) -> Result<MetricsRecord> {
    let logits = intact_logits(model, examples, chunk)?;
    let pred: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let gold: Vec<usize> = examples.iter().map(|e| e.y).collect();
    let ce = logits
        .iter()
        .zip(&gold)
        .map(|(z, &y)| -softmax(z)[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / gold.len().max(1) as f64;
    let tv_uniform = view_tv(model, examples, views, seed, chunk, false)?;
    let tv_branch = if views.iter().any(|v| model.has_head(v.branch())) {
        view_tv(model, examples, views, seed, chunk, true)?
    } else {
        tv_uniform
    };
    Ok(MetricsRecord {
        split: split.to_string(),
        n: examples.len(),
        accuracy: accuracy(&pred, &gold),
        f1: macro_f1(&pred, &gold, model.config().n_classes),
        tv_uniform,
        tv_branch,
        ce,
        step,
        wall_clock_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_values() {
        assert_eq!(tv_to_uniform(&[1.0 / 3.0; 3]), 0.0);
        assert!((tv_to_uniform(&[1.0, 0.0, 0.0]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((tv_to_uniform(&[0.75, 0.25]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn f1_values() {
        let gold = [0, 0, 1, 1, 2, 2];
        assert_eq!(macro_f1(&gold, &gold, 3), 1.0);
        let pred = [0, 0, 0, 0, 0, 0];
        // class 0: p=2/6, r=1 -> f1 = 0.5
        assert!((macro_f1(&pred, &gold, 3) - 0.5 / 3.0).abs() < 1e-12);
        assert!((accuracy(&pred, &gold) - 1.0 / 3.0).abs() < 1e-12);
    }
}
