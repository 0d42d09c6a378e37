//! Debiasing objectives.
//!
//! Supervised contrastive loss over a batch of `N` prediction vectors `z`
//! (intact views, perturbed views and one uniform dummy):
//!
//! ```text
//! L = Σ_i  -1/|G(i)|  Σ_{j ∈ G(i)}  log( exp(z_i·z_j/τ) / Σ_{k ≠ i} exp(z_i·z_k/τ) )
//! ```
//!
//! `G(i)` is the set of other members of `i`'s group. Intact views are grouped
//! by gold label; all perturbed views share one group with the dummy, whose
//! value is exactly `1/C` everywhere and which never receives a gradient. An
//! anchor whose group has no other member contributes 0.
//!
//! Alternatives to the contrastive term: product of experts (cross-entropy of
//! `log_softmax(z) + Σ_b log_softmax(z_b)`) and debiased focal loss (per-example
//! cross-entropy weighted by `(1 - mean_b softmax(z_b)[y])^γ`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Contrastive,
    Poe,
    Focal,
}

/// How predictions enter the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeZ {
    Softmax,
    Raw,
}

/// Whether all branches share one perturbed group or each branch gets its own
/// loss term (intact views, that branch's views, dummy), summed over branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchGrouping {
    Pooled,
    PerBranch,
}

/// Reduction over anchors of the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebiasConfig {
    pub lambda: f64,
    pub tau: f64,
    pub fusion: Fusion,
    pub gamma: f64,
    pub normalize_z: NormalizeZ,
    pub dummy_as_anchor: bool,
    pub grouping: BranchGrouping,
    pub reduction: Reduction,
    /// λ ramps linearly from 0 over this many steps (0 keeps it constant).
    pub lambda_warmup_steps: usize,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            lambda: 0.1,
            tau: 1.0,
            fusion: Fusion::Contrastive,
            gamma: 2.0,
            normalize_z: NormalizeZ::Softmax,
            dummy_as_anchor: true,
            grouping: BranchGrouping::Pooled,
            reduction: Reduction::Sum,
            lambda_warmup_steps: 0,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    /// λ in effect at optimizer step `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.lambda_warmup_steps == 0 {
            self.lambda
        } else {
            self.lambda * (step as f64 / self.lambda_warmup_steps as f64).min(1.0)
        }
    }
}

/// One prediction vector entering the contrastive term.
#[derive(Clone, Debug, PartialEq)]
pub struct ZVector {
    pub values: Vec<f64>,
    pub is_dummy: bool,
}

impl ZVector {
    pub fn dummy(c: usize) -> Self {
        ZVector {
            values: vec![1.0 / c as f64; c],
            is_dummy: true,
        }
    }
}

/// Group id of the shared perturbed group.
pub const PERTURBED: usize = usize::MAX;

/// Group of every batch element: intact elements first (grouped by label),
/// then perturbed views, then the dummy (present iff there are perturbed views).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub groups: Vec<usize>,
    pub n_intact: usize,
    pub n_perturbed: usize,
    pub has_dummy: bool,
}

impl GroupAssignment {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        let mut g = self.groups.clone();
        g.sort_unstable();
        g.dedup();
        g.len()
    }

    pub fn dummy_index(&self) -> Option<usize> {
        self.has_dummy.then(|| self.groups.len() - 1)
    }
}

pub fn build_groups(labels: &[usize], n_perturbed_views: usize) -> GroupAssignment {
    let mut groups = labels.to_vec();
    let has_dummy = n_perturbed_views > 0;
    groups.extend(std::iter::repeat(PERTURBED).take(n_perturbed_views + has_dummy as usize));
    GroupAssignment {
        groups,
        n_intact: labels.len(),
        n_perturbed: n_perturbed_views,
        has_dummy,
    }
}

fn contrastive_weights<T: Real>(groups: &GroupAssignment, dummy_as_anchor: bool) -> Tensor<T> {
    let n = groups.len();
    let mut w = vec![T::zero(); n * n];
    let dummy = groups.dummy_index();
    for i in 0..n {
        if !dummy_as_anchor && Some(i) == dummy {
            continue;
        }
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && groups.groups[j] == groups.groups[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let inv = T::one() / T::from_usize(pos.len()).unwrap();
        for j in pos {
            w[i * n + j] = inv;
        }
    }
    Tensor::new(vec![n, n], w).expect("square")
}

/// Contrastive loss of `z` (`[N-1, C]` rows for every non-dummy element, in
/// the order of `groups`). The dummy row is appended here as a constant.
pub fn contrastive_debias_loss<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    groups: &GroupAssignment,
    tau: f64,
    dummy_as_anchor: bool,
    reduction: Reduction,
) -> Result<Var> {
    if groups.n_intact == 0 || groups.n_perturbed == 0 || !groups.has_dummy {
        return Err(invalid(
            "contrastive_debias_loss",
            "batch needs at least one intact and one perturbed element plus the dummy",
        ));
    }
    if !(tau > 0.0) {
        return Err(invalid("contrastive_debias_loss", format!("tau {tau} must be > 0")));
    }
    let (rows, c) = g.value(z)?.dims2("contrastive_debias_loss")?;
    if rows + 1 != groups.len() {
        return Err(Error::Shape {
            op: "contrastive_debias_loss",
            lhs: vec![rows, c],
            rhs: vec![groups.len() - 1, c],
        });
    }
    if !g.value(z)?.is_finite() {
        return Err(invalid("contrastive_debias_loss", "non-finite z"));
    }
    let n = groups.len();
    let dummy = g.constant(Tensor::full(vec![1, c], T::one() / T::from_usize(c).unwrap()));
    let all = g.concat_rows(&[z, dummy])?;
    let t = g.transpose(all)?;
    let sim = g.matmul(all, t)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let keep: Vec<bool> = (0..n * n).map(|e| e / n != e % n).collect();
    let logp = g.log_softmax_masked(sim, &keep)?;
    let w = contrastive_weights::<T>(groups, dummy_as_anchor);
    let w = g.constant(w);
    let terms = g.mul(logp, w)?;
    let total = g.sum_all(terms)?;
    let anchors = if dummy_as_anchor { n } else { n - 1 };
    match reduction {
        Reduction::Sum => g.neg(total),
        Reduction::Mean => g.scale(total, -1.0 / anchors as f64),
    }
}

/// Value of the contrastive loss for plain vectors; the dummy (if any) must be
/// the last element and flagged `is_dummy`.
pub fn contrastive_loss_value(z: &[ZVector], groups: &GroupAssignment, tau: f64, dummy_as_anchor: bool) -> Result<f64> {
    check_dummy(z, groups)?;
    let rows: Vec<Vec<f64>> = z.iter().filter(|v| !v.is_dummy).map(|v| v.values.clone()).collect();
    let mut g = Graph::<f64>::new();
    let zt = g.constant(Tensor::from_rows(&rows)?);
    let l = contrastive_debias_loss(&mut g, zt, groups, tau, dummy_as_anchor, Reduction::Sum)?;
    Ok(g.value(l)?.item().expect("scalar"))
}

fn check_dummy(z: &[ZVector], groups: &GroupAssignment) -> Result<()> {
    if z.len() != groups.len() {
        return Err(invalid("contrastive", format!("{} vectors for {} groups", z.len(), groups.len())));
    }
    let dummies: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_dummy).collect();
    if dummies.as_slice() != groups.dummy_index().as_slice() {
        return Err(invalid("contrastive", "exactly one dummy, in last position, is required"));
    }
    if let Some(d) = groups.dummy_index() {
        let c = z[d].values.len() as f64;
        if z[d].values.iter().any(|&v| v != 1.0 / c) {
            return Err(invalid("contrastive", "dummy must be exactly uniform"));
        }
    }
    Ok(())
}

/// Double-loop evaluation of the contrastive loss straight from its
/// definition, sharing no code with the graph version.
pub fn contrastive_oracle(z: &[ZVector], groups: &[usize], tau: f64, dummy_as_anchor: bool) -> f64 {
    let n = z.len();
    let dot = |a: usize, b: usize| -> f64 { z[a].values.iter().zip(&z[b].values).map(|(x, y)| x * y).sum() };
    let mut total = 0.0;
    for i in 0..n {
        if z[i].is_dummy && !dummy_as_anchor {
            continue;
        }
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && groups[j] == groups[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(i, k) / tau).exp();
            }
        }
        let mut s = 0.0;
        for &j in &pos {
            s += ((dot(i, j) / tau).exp() / denom).ln();
        }
        total += -s / pos.len() as f64;
    }
    total
}

/// Mean cross-entropy of `[B,C]` logits against `labels`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = per_example_ce(g, logits, labels)?;
    g.mean_all(per)
}

/// `[B]` cross-entropies.
pub fn per_example_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, c) = g.value(logits)?.dims2("cross_entropy")?;
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(invalid("cross_entropy", format!("label {y} out of range for {c} classes")));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.gather(lp, labels)?;
    g.neg(picked)
}

/// `ce + λ·debias`.
pub fn combined_loss<T: Real>(g: &mut Graph<T>, ce: Var, debias: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(invalid("combined_loss", format!("lambda {lambda} must be >= 0")));
    }
    let d = g.scale(debias, lambda)?;
    g.add(ce, d)
}

/// Cross-entropy of the product of the intact and biased experts.
pub fn poe_loss<T: Real>(g: &mut Graph<T>, z_intact: Var, z_biased: &[Var], labels: &[usize]) -> Result<Var> {
    if z_biased.is_empty() {
        return Err(invalid("poe_loss", "no biased experts"));
    }
    let mut acc = g.log_softmax(z_intact, 1)?;
    for &zb in z_biased {
        let lb = g.log_softmax(zb, 1)?;
        acc = g.add(acc, lb)?;
    }
    cross_entropy(g, acc, labels)
}

/// Mean over the batch of `(1 - p̄_b(y))^γ · CE(z_intact, y)`.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    z_intact: Var,
    z_biased: &[Var],
    labels: &[usize],
    gamma: f64,
) -> Result<Var> {
    if z_biased.is_empty() {
        return Err(invalid("focal_loss", "no biased experts"));
    }
    if !(gamma >= 0.0) {
        return Err(invalid("focal_loss", format!("gamma {gamma} must be >= 0")));
    }
    let ce = per_example_ce(g, z_intact, labels)?;
    if gamma == 0.0 {
        return g.mean_all(ce);
    }
    let w = focal_weights(g, z_biased, labels, gamma)?;
    let weighted = g.mul(w, ce)?;
    g.mean_all(weighted)
}

/// `[B]` focal weights `(1 - mean_b softmax(z_b)[y])^γ`.
pub fn focal_weights<T: Real>(g: &mut Graph<T>, z_biased: &[Var], labels: &[usize], gamma: f64) -> Result<Var> {
    let mut sum = None;
    for &zb in z_biased {
        let p = g.softmax(zb, 1)?;
        let py = g.gather(p, labels)?;
        sum = Some(match sum {
            None => py,
            Some(s) => g.add(s, py)?,
        });
    }
    let mean = g.scale(sum.expect("non-empty"), 1.0 / z_biased.len() as f64)?;
    let ones = g.constant(Tensor::full(vec![labels.len()], T::one()));
    let rest = g.sub(ones, mean)?;
    g.powf(rest, gamma)
}
