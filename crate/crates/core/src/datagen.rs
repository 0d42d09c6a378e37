//! Synthetic NLI-style benchmark with an injected shortcut.
//!
//! Vocabulary layout: `0` is the separator, `1` is the shortcut token `NEG`,
//! then `main_pairs` antonym pairs `(2+2i, 3+2i)` used by the train/ID/stress/OOD
//! splits, then `transfer_pairs` pairs used only by the transfer split.
//!
//! An example is `(premise, hypothesis)`. Ignoring `NEG`, the label is
//! - contradict if the hypothesis holds the antonym of a premise token,
//! - entail if every hypothesis token occurs in the premise,
//! - neutral otherwise.
//!
//! `NEG` never changes the label. It is inserted into contradict hypotheses
//! with probability `rho` in train/ID (optionally into other classes with
//! probability `neg_noise`), and into every non-contradict hypothesis of the
//! stress split. The OOD split keeps lexical overlap at or above
//! `ood_min_overlap` for every class; the transfer split uses its own
//! vocabulary region and longer constituents.
//!
//! A bundle directory holds `train.jsonl`, `id.jsonl`, `stress.jsonl`,
//! `ood.jsonl`, `transfer.jsonl` (one `{"c": [[..],[..]], "y": k, "meta": {..}}`
//! per line) and `gen_meta.json`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb;
use crate::seed::{self, Rng};

pub const SEP: usize = 0;
pub const NEG: usize = 1;
pub const ENTAIL: usize = 0;
pub const CONTRADICT: usize = 1;
pub const NEUTRAL: usize = 2;
/// In binary mode contradict and neutral merge into this class.
pub const NOT_ENTAIL: usize = 1;

pub const SPLITS: [&str; 5] = ["train", "id", "stress", "ood", "transfer"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    /// Antonym pairs reserved for the transfer split.
    pub transfer_pairs: usize,
    pub n_train: usize,
    pub n_id: usize,
    pub n_stress: usize,
    pub n_ood: usize,
    pub n_transfer: usize,
    pub rho: f64,
    /// Probability of `NEG` in a non-contradict train/ID hypothesis.
    pub neg_noise: f64,
    pub seed: u64,
    /// Priors of (entail, contradict, neutral); split counts follow them exactly.
    pub class_priors: Vec<f64>,
    pub len_min: usize,
    pub len_max: usize,
    pub transfer_len_min: usize,
    pub transfer_len_max: usize,
    pub ood_min_overlap: f64,
    /// Two classes: entail vs not-entail.
    pub binary: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 46,
            transfer_pairs: 10,
            n_train: 20_000,
            n_id: 1500,
            n_stress: 1500,
            n_ood: 1500,
            n_transfer: 1500,
            rho: 0.9,
            neg_noise: 0.0,
            seed: 0,
            class_priors: vec![1.0 / 3.0; 3],
            len_min: 3,
            len_max: 6,
            transfer_len_min: 5,
            transfer_len_max: 8,
            ood_min_overlap: 0.8,
            binary: false,
        }
    }
}

impl GeneratorConfig {
    pub fn main_pairs(&self) -> usize {
        (self.vocab_size.saturating_sub(2) / 2).saturating_sub(self.transfer_pairs)
    }

    pub fn n_classes(&self) -> usize {
        if self.binary {
            2
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.5 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0.5, 1]", self.rho));
        }
        if !(0.0..=1.0).contains(&self.neg_noise) {
            return bad(format!("neg_noise {} outside [0, 1]", self.neg_noise));
        }
        for (name, n) in SPLITS.iter().zip(self.sizes()) {
            if n == 0 {
                return bad(format!("split `{name}` must have at least 1 example"));
            }
        }
        if self.len_min == 0 || self.len_min > self.len_max || self.transfer_len_min == 0 {
            return bad("constituent lengths must satisfy 1 <= len_min <= len_max".into());
        }
        if self.transfer_len_min > self.transfer_len_max {
            return bad("transfer_len_min exceeds transfer_len_max".into());
        }
        let ood_len = self.ood_len();
        if ood_len > self.len_max {
            return bad(format!(
                "len_max {} too small for ood_min_overlap {} (needs {ood_len})",
                self.len_max, self.ood_min_overlap
            ));
        }
        // a premise uses one token of `len` distinct pairs and neutral needs a free pair
        if self.main_pairs() < self.len_max + 1 {
            return bad(format!(
                "vocab_size {} leaves {} main antonym pairs; need at least {}",
                self.vocab_size,
                self.main_pairs(),
                self.len_max + 1
            ));
        }
        if self.transfer_pairs < self.transfer_len_max + 1 {
            return bad(format!(
                "transfer_pairs {} must exceed transfer_len_max {}",
                self.transfer_pairs, self.transfer_len_max
            ));
        }
        if self.class_priors.len() != 3 || self.class_priors.iter().any(|p| !(*p >= 0.0)) {
            return bad("class_priors needs 3 non-negative weights".into());
        }
        if self.class_priors.iter().sum::<f64>() <= 0.0 {
            return bad("class_priors sum to 0".into());
        }
        Ok(())
    }

    fn sizes(&self) -> [usize; 5] {
        [self.n_train, self.n_id, self.n_stress, self.n_ood, self.n_transfer]
    }

    /// Shortest hypothesis whose single non-premise token keeps overlap at the threshold.
    fn ood_len(&self) -> usize {
        let m = self.ood_min_overlap.clamp(0.0, 0.99);
        ((1.0 / (1.0 - m)) - 1e-9).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub has_shortcut_token: bool,
    pub shortcut_aligned: bool,
    pub overlap_ratio: f64,
    /// Augmentation operator that produced the example, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub c: Vec<Vec<usize>>,
    pub y: usize,
    pub meta: Meta,
}

impl Example {
    pub fn premise(&self) -> &[usize] {
        self.c.first().map_or(&[], Vec::as_slice)
    }

    pub fn hypothesis(&self) -> &[usize] {
        self.c.get(1).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Example>,
    pub id_test: Vec<Example>,
    pub stress_test: Vec<Example>,
    pub ood_test: Vec<Example>,
    pub transfer_test: Vec<Example>,
}

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        Ok(match name {
            "train" => &self.train,
            "id" => &self.id_test,
            "stress" => &self.stress_test,
            "ood" => &self.ood_test,
            "transfer" => &self.transfer_test,
            _ => return Err(Error::Config(format!("unknown split `{name}` (expected one of {SPLITS:?})"))),
        })
    }

    fn split_mut(&mut self, i: usize) -> &mut Vec<Example> {
        match i {
            0 => &mut self.train,
            1 => &mut self.id_test,
            2 => &mut self.stress_test,
            3 => &mut self.ood_test,
            _ => &mut self.transfer_test,
        }
    }
}

/// Antonym of a content token (pairs are `(2+2i, 3+2i)`).
pub fn antonym(t: usize) -> usize {
    if t % 2 == 0 {
        t + 1
    } else {
        t - 1
    }
}

/// Three-class label from content alone.
pub fn oracle_label3(premise: &[usize], hypothesis: &[usize]) -> usize {
    let p: HashSet<usize> = premise.iter().copied().filter(|&t| t > NEG).collect();
    let content = hypothesis.iter().copied().filter(|&t| t > NEG);
    if content.clone().any(|t| p.contains(&antonym(t))) {
        CONTRADICT
    } else if content.clone().all(|t| p.contains(&t)) {
        ENTAIL
    } else {
        NEUTRAL
    }
}

pub fn oracle_label(premise: &[usize], hypothesis: &[usize], binary: bool) -> usize {
    let y = oracle_label3(premise, hypothesis);
    if binary {
        (y != ENTAIL) as usize
    } else {
        y
    }
}

/// Fraction of hypothesis content tokens found in the premise (1 when the
/// hypothesis has no content tokens).
pub fn overlap_ratio(premise: &[usize], hypothesis: &[usize]) -> f64 {
    let content: Vec<usize> = hypothesis.iter().copied().filter(|&t| t > NEG).collect();
    if content.is_empty() {
        return 1.0;
    }
    content.iter().filter(|t| premise.contains(t)).count() as f64 / content.len() as f64
}

fn meta_for(premise: &[usize], hypothesis: &[usize], y3: usize) -> Meta {
    let has = hypothesis.contains(&NEG);
    Meta {
        has_shortcut_token: has,
        shortcut_aligned: has && y3 == CONTRADICT,
        overlap_ratio: overlap_ratio(premise, hypothesis),
        aug: None,
    }
}

/// Checks token range, label and metadata of `ex` against its content.
pub fn validate_example(ex: &Example, vocab_size: usize, binary: bool) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if ex.c.is_empty() {
        return bad("example has no constituents".into());
    }
    if let Some(&t) = ex.c.iter().flatten().find(|&&t| t >= vocab_size) {
        return Err(Error::OutOfVocab { id: t, vocab: vocab_size });
    }
    let want = oracle_label(ex.premise(), ex.hypothesis(), binary);
    if ex.meta.aug.is_none() && ex.y != want {
        return bad(format!("label {} but content says {want}", ex.y));
    }
    let m = meta_for(ex.premise(), ex.hypothesis(), oracle_label3(ex.premise(), ex.hypothesis()));
    if m.has_shortcut_token != ex.meta.has_shortcut_token || m.overlap_ratio != ex.meta.overlap_ratio {
        return bad("metadata disagrees with content".into());
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Id,
    Stress,
    Ood,
    Transfer,
}

struct Region {
    first: usize,
    pairs: usize,
}

impl Region {
    fn premise(&self, rng: &mut Rng, len: usize) -> Vec<usize> {
        let pairs = rand::seq::index::sample(rng, self.pairs, len).into_vec();
        pairs
            .into_iter()
            .map(|p| self.first + 2 * p + rng.gen_range(0..2))
            .collect()
    }

    /// A token whose pair is unused by the premise.
    fn novel(&self, rng: &mut Rng, premise: &[usize]) -> usize {
        loop {
            let t = self.first + rng.gen_range(0..2 * self.pairs);
            if !premise.contains(&t) && !premise.contains(&antonym(t)) {
                return t;
            }
        }
    }
}

fn class_counts(n: usize, priors: &[f64]) -> [usize; 3] {
    let total: f64 = priors.iter().sum();
    let exact: Vec<f64> = priors.iter().map(|p| p / total * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut rest: Vec<usize> = (0..3).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for k in rest.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

fn make_pair(rng: &mut Rng, y3: usize, region: &Region, (lo, hi): (usize, usize), mode: Mode, ood_len: usize) -> (Vec<usize>, Vec<usize>) {
    let len = rng.gen_range(lo..=hi);
    let premise = region.premise(rng, len);
    let mut lh = rng.gen_range(lo..=hi);
    if mode == Mode::Ood {
        lh = lh.max(ood_len);
    }
    let mut h: Vec<usize>;
    if y3 == ENTAIL {
        h = (0..lh).map(|_| *premise.choose(rng).expect("non-empty")).collect();
    } else {
        let n_bad = if mode == Mode::Ood { 1 } else { rng.gen_range(1..=(lh / 2).max(1)) };
        h = (0..lh - n_bad).map(|_| *premise.choose(rng).expect("non-empty")).collect();
        for i in 0..n_bad {
            if y3 == CONTRADICT && i == 0 {
                h.push(antonym(*premise.choose(rng).expect("non-empty")));
            } else {
                h.push(region.novel(rng, &premise));
            }
        }
        h.shuffle(rng);
    }
    (premise, h)
}

fn insert_neg(rng: &mut Rng, h: &mut Vec<usize>) {
    let at = rng.gen_range(0..=h.len());
    h.insert(at, NEG);
}

/// Generates all five splits. Deterministic in `config`.
pub fn generate(config: &GeneratorConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let main = Region { first: 2, pairs: config.main_pairs() };
    let transfer = Region {
        first: 2 + 2 * config.main_pairs(),
        pairs: config.transfer_pairs,
    };
    let modes = [Mode::Train, Mode::Id, Mode::Stress, Mode::Ood, Mode::Transfer];
    let mut seen: HashSet<(Vec<usize>, Vec<usize>)> = HashSet::new();
    let mut bundle = DatasetBundle::default();
    for (si, (&mode, n)) in modes.iter().zip(config.sizes()).enumerate() {
        let mut rng = seed::rng(config.seed, &[seed::GEN, si as u64]);
        let counts = class_counts(n, &config.class_priors);
        let mut labels: Vec<usize> = (0..3).flat_map(|k| std::iter::repeat(k).take(counts[k])).collect();
        labels.shuffle(&mut rng);
        let (region, lens) = if mode == Mode::Transfer {
            (&transfer, (config.transfer_len_min, config.transfer_len_max))
        } else {
            (&main, (config.len_min, config.len_max))
        };
        let out = bundle.split_mut(si);
        for y3 in labels {
            let mut attempts = 0;
            let (p, h) = loop {
                let (p, mut h) = make_pair(&mut rng, y3, region, lens, mode, config.ood_len());
                let neg = match mode {
                    Mode::Train | Mode::Id => {
                        let prob = if y3 == CONTRADICT { config.rho } else { config.neg_noise };
                        rng.gen::<f64>() < prob
                    }
                    Mode::Stress => y3 != CONTRADICT,
                    Mode::Ood | Mode::Transfer => false,
                };
                if neg {
                    insert_neg(&mut rng, &mut h);
                }
                attempts += 1;
                if seen.insert((p.clone(), h.clone())) {
                    break (p, h);
                }
                if attempts > 10_000 {
                    return Err(Error::Config(format!(
                        "cannot draw distinct examples for split `{}`; enlarge the vocabulary",
                        SPLITS[si]
                    )));
                }
            };
            debug_assert_eq!(oracle_label3(&p, &h), y3);
            let meta = meta_for(&p, &h, y3);
            let y = if config.binary { (y3 != ENTAIL) as usize } else { y3 };
            out.push(Example { c: vec![p, h], y, meta });
        }
    }
    Ok(bundle)
}

/// Explicit perturbations usable for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    DropPremise,
    DropHypothesis,
    Shuffle,
    FractionalDrop,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [
        AugmentOp::DropPremise,
        AugmentOp::DropHypothesis,
        AugmentOp::Shuffle,
        AugmentOp::FractionalDrop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::DropPremise => "drop_premise",
            AugmentOp::DropHypothesis => "drop_hypothesis",
            AugmentOp::Shuffle => "shuffle",
            AugmentOp::FractionalDrop => "fractional_drop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown augmentation op `{s}`")))
    }
}

/// Originals followed by one not-entail example per (source, op), ops in the
/// given order for each source. Dropped constituents become empty; fractional
/// drop removes half of each constituent's tokens.
pub fn augment(train: &[Example], ops: &[AugmentOp], not_entail_label: Option<usize>, seed: u64) -> Result<Vec<Example>> {
    let label = not_entail_label
        .ok_or_else(|| Error::Config("augmentation needs a not-entail class id".into()))?;
    let mut out = train.to_vec();
    for (i, ex) in train.iter().enumerate() {
        if ex.c.len() != 2 {
            return Err(Error::Config(format!("augmentation needs 2 constituents, example {i} has {}", ex.c.len())));
        }
        for &op in ops {
            let mut rng = seed::rng(seed, &[seed::AUGMENT, i as u64, op as u64]);
            let c = match op {
                AugmentOp::DropPremise => vec![vec![], ex.c[1].clone()],
                AugmentOp::DropHypothesis => vec![ex.c[0].clone(), vec![]],
                AugmentOp::Shuffle => perturb::shuffle_tokens(&ex.c, &mut rng)?,
                AugmentOp::FractionalDrop => perturb::fractional_drop(&ex.c, 0.5, &mut rng)?,
            };
            let mut meta = meta_for(&c[0], &c[1], oracle_label3(&c[0], &c[1]));
            meta.aug = Some(op.name().to_string());
            out.push(Example { c, y: label, meta });
        }
    }
    Ok(out)
}

pub fn save_split(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL split; blank lines are skipped, malformed lines are reported
/// with their 1-based line number.
pub fn load_split(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(std::fs::File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Provenance record written as `gen_meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenMeta {
    pub format: String,
    pub generator: GeneratorConfig,
    pub counts: Vec<(String, usize)>,
}

pub fn save_bundle(dir: &Path, bundle: &DatasetBundle, config: &GeneratorConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut counts = Vec::new();
    for name in SPLITS {
        let split = bundle.split(name)?;
        save_split(&dir.join(format!("{name}.jsonl")), split)?;
        counts.push((name.to_string(), split.len()));
    }
    let meta = GenMeta {
        format: "fairflow-bundle/1".into(),
        generator: config.clone(),
        counts,
    };
    std::fs::write(dir.join("gen_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Loads every split present in `dir` (missing split files load as empty).
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let mut bundle = DatasetBundle::default();
    for (i, name) in SPLITS.iter().enumerate() {
        let p = dir.join(format!("{name}.jsonl"));
        if p.exists() {
            *bundle.split_mut(i) = load_split(&p)?;
        }
    }
    Ok(bundle)
}

pub fn load_gen_meta(dir: &Path) -> Result<GenMeta> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("gen_meta.json"))?)?)
}

/// Bag-of-words logistic regression on hypothesis tokens alone, predicting
/// contradict vs rest. Used to show the shortcut is learnable and harmful.
#[derive(Clone, Debug)]
pub struct HypothesisProbe {
    weights: Vec<f64>,
    bias: f64,
}

impl HypothesisProbe {
    pub fn train(examples: &[Example], vocab_size: usize, epochs: usize, lr: f64) -> Self {
        let mut w = vec![0.0; vocab_size];
        let mut b = 0.0;
        let n = examples.len().max(1) as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; vocab_size];
            let mut gb = 0.0;
            for ex in examples {
                let feats = Self::features(ex, vocab_size);
                let s: f64 = b + feats.iter().map(|&t| w[t]).sum::<f64>();
                let p = 1.0 / (1.0 + (-s).exp());
                let err = p - (ex.y == CONTRADICT) as u8 as f64;
                for &t in &feats {
                    gw[t] += err;
                }
                gb += err;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g / n;
            }
            b -= lr * gb / n;
        }
        HypothesisProbe { weights: w, bias: b }
    }

    fn features(ex: &Example, vocab_size: usize) -> Vec<usize> {
        let mut f: Vec<usize> = ex.hypothesis().iter().copied().filter(|&t| t < vocab_size).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn predicts_contradict(&self, ex: &Example) -> bool {
        let s: f64 = self.bias
            + Self::features(ex, self.weights.len())
                .iter()
                .map(|&t| self.weights[t])
                .sum::<f64>();
        s > 0.0
    }

    /// Accuracy on the binary contradict-vs-rest task.
    pub fn accuracy(&self, examples: &[Example]) -> f64 {
        let ok = examples
            .iter()
            .filter(|ex| self.predicts_contradict(ex) == (ex.y == CONTRADICT))
            .count();
        ok as f64 / examples.len().max(1) as f64
    }
}
