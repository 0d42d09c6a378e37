//! Shared transformer encoder with an intact head and per-branch heads.
//!
//! Input layout: constituents are joined as `c1 SEP c2 SEP ... cp` and the
//! token at position `t` is embedded as `tok[id] + pos[t] + seg[s]`, where `s`
//! is the index of the constituent the token (or the separator closing it)
//! belongs to. Each block is pre-norm:
//!
//! ```text
//! x = x + Wo·attn(LN1(x)) ;  x = x + W2·relu(W1·LN2(x))
//! ```
//!
//! The pooled representation is the mean of the final block's rows over the
//! sequence (no final layer norm). Heads are `Linear(d,h) → ReLU → Linear(h,C)`
//! with `h = d_model`, i.e. `HEAD_PARAMS = (d·h + h) + (h·C + C)` parameters.
//!
//! Parameters live in one [`ParamStore`] ordered encoder, intact head, branch
//! heads, so stripping the branch heads is a truncation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segment, Var};
use crate::checkpoint::ParamStore;
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::seed::{self, Rng};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    /// Add learned position embeddings. Off gives a permutation-invariant encoder.
    pub positional: bool,
    /// Add learned constituent (segment) embeddings.
    pub segment_embeddings: bool,
    /// Segment indices beyond this share the last embedding row.
    pub max_segments: usize,
    pub sep_id: usize,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 4,
            n_heads: 2,
            d_ff: 64,
            max_len: 64,
            n_classes: 3,
            dropout: 0.0,
            positional: true,
            segment_embeddings: true,
            max_segments: 4,
            sep_id: 0,
            layernorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.vocab_size == 0 || self.sep_id >= self.vocab_size {
            return bad(format!("sep_id {} outside vocab_size {}", self.sep_id, self.vocab_size));
        }
        if self.max_len == 0 || self.max_segments == 0 || self.d_ff == 0 || self.d_model == 0 {
            return bad("max_len, max_segments, d_model and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Hidden width of every head.
    pub fn head_hidden(&self) -> usize {
        self.d_model
    }

    pub fn head_param_count(&self) -> usize {
        let (d, h, c) = (self.d_model, self.head_hidden(), self.n_classes);
        (d * h + h) + (h * c + c)
    }
}

/// Which head a prediction comes from. `Sub(j)` is the head for the view that
/// drops constituent `j` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchId {
    Intact,
    Gra,
    Sub(usize),
    Half,
    Mod,
    Rep,
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchId::Intact => write!(f, "intact"),
            BranchId::Gra => write!(f, "gra"),
            BranchId::Sub(j) => write!(f, "sub{j}"),
            BranchId::Half => write!(f, "half"),
            BranchId::Mod => write!(f, "mod"),
            BranchId::Rep => write!(f, "rep"),
        }
    }
}

impl FromStr for BranchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "intact" => BranchId::Intact,
            "gra" => BranchId::Gra,
            "half" => BranchId::Half,
            "mod" => BranchId::Mod,
            "rep" => BranchId::Rep,
            _ => match s.strip_prefix("sub").and_then(|j| j.parse().ok()) {
                Some(j) if j >= 1 => BranchId::Sub(j),
                _ => return Err(Error::Config(format!("unknown branch id `{s}`"))),
            },
        })
    }
}

impl Serialize for BranchId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BranchId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A token sequence with the constituent index of every position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub segs: Vec<usize>,
}

impl TokenSeq {
    /// Joins constituents with `sep`. A separator closes every constituent
    /// but the last and carries that constituent's segment index.
    pub fn join(constituents: &[Vec<usize>], sep: usize) -> Self {
        let mut ids = Vec::new();
        let mut segs = Vec::new();
        for (j, c) in constituents.iter().enumerate() {
            ids.extend_from_slice(c);
            segs.extend(std::iter::repeat(j).take(c.len()));
            if j + 1 < constituents.len() {
                ids.push(sep);
                segs.push(j);
            }
        }
        TokenSeq { ids, segs }
    }

    pub fn single(ids: Vec<usize>) -> Self {
        let segs = vec![0; ids.len()];
        TokenSeq { ids, segs }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    seg: usize,
    layers: Vec<LayerIds>,
    heads: Vec<(BranchId, HeadIds)>,
    encoder_len: usize,
}

/// Description written next to the parameters of a saved model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub format: String,
    pub encoder: EncoderConfig,
    pub branches: Vec<BranchId>,
}

/// Encoder plus heads. Read-only methods are safe to call from many threads.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: EncoderConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

struct Init<'a> {
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("sized")
    }

    fn uniform<T: Real>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("sized")
    }
}

/// Adds a `[din,dout]` weight and `[dout]` bias, both `U(-1/√din, 1/√din)`
/// unless `zero_bias`.
fn linear<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    din: usize,
    dout: usize,
    zero_bias: bool,
) -> (usize, usize) {
    let bound = 1.0 / (din as f64).sqrt();
    let w = store.add(format!("{name}.w"), init.uniform(vec![din, dout], bound));
    let b = if zero_bias {
        Tensor::zeros(vec![dout])
    } else {
        init.uniform(vec![dout], bound)
    };
    (w, store.add(format!("{name}.b"), b))
}

impl<T: Real> Model<T> {
    /// Fresh model with one head per entry of `branches` (plus the intact head),
    /// initialized from `seed`.
    pub fn new(config: EncoderConfig, branches: &[BranchId], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seen = vec![BranchId::Intact];
        for &b in branches {
            if seen.contains(&b) {
                return Err(Error::Config(format!("branch `{b}` configured twice")));
            }
            seen.push(b);
        }
        let mut rng = seed::rng(seed, &[seed::INIT]);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok = store.add("tok_emb", init.normal(vec![config.vocab_size, d], 0.5));
        let pos = store.add("pos_emb", init.normal(vec![config.max_len, d], 0.1));
        let seg = store.add("seg_emb", init.normal(vec![config.max_segments, d], 0.1));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layer{l}");
            let ln1_g = store.add(format!("{p}.ln1.g"), Tensor::full(vec![d], T::one()));
            let ln1_b = store.add(format!("{p}.ln1.b"), Tensor::zeros(vec![d]));
            let (wq, bq) = linear(&mut store, &mut init, &format!("{p}.q"), d, d, true);
            let (wk, bk) = linear(&mut store, &mut init, &format!("{p}.k"), d, d, true);
            let (wv, bv) = linear(&mut store, &mut init, &format!("{p}.v"), d, d, true);
            let (wo, bo) = linear(&mut store, &mut init, &format!("{p}.o"), d, d, true);
            let ln2_g = store.add(format!("{p}.ln2.g"), Tensor::full(vec![d], T::one()));
            let ln2_b = store.add(format!("{p}.ln2.b"), Tensor::zeros(vec![d]));
            let (w1, b1) = linear(&mut store, &mut init, &format!("{p}.ff1"), d, config.d_ff, false);
            let (w2, b2) = linear(&mut store, &mut init, &format!("{p}.ff2"), config.d_ff, d, false);
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let encoder_len = store.len();
        let h = config.head_hidden();
        let heads = seen
            .iter()
            .map(|&b| {
                let (w1, b1) = linear(&mut store, &mut init, &format!("head.{b}.1"), d, h, false);
                let (w2, b2) = linear(&mut store, &mut init, &format!("head.{b}.2"), h, config.n_classes, false);
                (b, HeadIds { w1, b1, w2, b2 })
            })
            .collect();
        Ok(Model {
            config,
            store,
            layout: Layout {
                tok,
                pos,
                seg,
                layers,
                heads,
                encoder_len,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Branch heads, excluding the intact head.
    pub fn branches(&self) -> Vec<BranchId> {
        self.layout.heads[1..].iter().map(|h| h.0).collect()
    }

    pub fn has_head(&self, b: BranchId) -> bool {
        self.layout.heads.iter().any(|h| h.0 == b)
    }

    /// Number of parameters of the encoder alone.
    pub fn encoder_param_count(&self) -> usize {
        (0..self.layout.encoder_len).map(|i| self.store.value(i).numel()).sum()
    }

    /// Deletes every branch head, leaving the deployment model.
    pub fn strip_branches(&mut self) {
        self.layout.heads.truncate(1);
        self.store.truncate(self.layout.encoder_len + 4);
    }

    fn check_seq(&self, s: &TokenSeq) -> Result<()> {
        if s.is_empty() {
            return Err(Error::EmptySequence);
        }
        if s.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max_len: self.config.max_len,
            });
        }
        if s.segs.len() != s.ids.len() {
            return Err(invalid("encode", "segment ids and token ids differ in length"));
        }
        Ok(())
    }

    /// Runs the encoder on a ragged batch and returns the pooled `[B,d]`
    /// representation after each depth in `taps` (each in `1..=L`).
    /// `params` are the store's parameters bound on `g`. Dropout is applied
    /// only when `dropout_rng` is given.
    pub fn encode_batch(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        seqs: &[TokenSeq],
        taps: &[usize],
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(invalid("encode", "empty batch"));
        }
        if let Some(&k) = taps.iter().find(|&&k| k == 0 || k > cfg.n_layers) {
            return Err(invalid("encode", format!("k_layers {k} outside 1..={}", cfg.n_layers)));
        }
        let depth = taps.iter().copied().max().unwrap_or(cfg.n_layers);
        let mut segments = Vec::with_capacity(seqs.len());
        let (mut ids, mut pos, mut seg) = (Vec::new(), Vec::new(), Vec::new());
        for s in seqs {
            self.check_seq(s)?;
            segments.push(Segment { start: ids.len(), len: s.len() });
            ids.extend_from_slice(&s.ids);
            pos.extend(0..s.len());
            seg.extend(s.segs.iter().map(|&j| j.min(cfg.max_segments - 1)));
        }
        let p = |i: usize| params[i];
        let l = &self.layout;
        let mut x = g.embedding_lookup(p(l.tok), &ids)?;
        if cfg.positional {
            let pe = g.embedding_lookup(p(l.pos), &pos)?;
            x = g.add(x, pe)?;
        }
        if cfg.segment_embeddings {
            let se = g.embedding_lookup(p(l.seg), &seg)?;
            x = g.add(x, se)?;
        }
        let eps = cfg.layernorm_eps;
        let mut out = Vec::with_capacity(taps.len());
        let mut pooled_at = vec![None; depth + 1];
        for (li, ly) in l.layers.iter().take(depth).enumerate() {
            let h = g.layernorm(x, p(ly.ln1_g), p(ly.ln1_b), eps)?;
            let q = g.linear(h, p(ly.wq), p(ly.bq))?;
            let k = g.linear(h, p(ly.wk), p(ly.bk))?;
            let v = g.linear(h, p(ly.wv), p(ly.bv))?;
            let a = g.attention(q, k, v, &segments, cfg.n_heads)?;
            let mut a = g.linear(a, p(ly.wo), p(ly.bo))?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                a = dropout(g, a, cfg.dropout, rng)?;
            }
            x = g.add(x, a)?;
            let h = g.layernorm(x, p(ly.ln2_g), p(ly.ln2_b), eps)?;
            let f = g.linear(h, p(ly.w1), p(ly.b1))?;
            let f = g.relu(f)?;
            let mut f = g.linear(f, p(ly.w2), p(ly.b2))?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = dropout(g, f, cfg.dropout, rng)?;
            }
            x = g.add(x, f)?;
            if taps.contains(&(li + 1)) {
                pooled_at[li + 1] = Some(g.segment_mean(x, &segments)?);
            }
        }
        if taps.is_empty() {
            out.push(g.segment_mean(x, &segments)?);
        }
        for &k in taps {
            out.push(pooled_at[k].expect("tap computed"));
        }
        Ok(out)
    }

    fn head_ids(&self, branch: BranchId) -> Result<HeadIds> {
        self.layout
            .heads
            .iter()
            .find(|h| h.0 == branch)
            .map(|h| h.1)
            .ok_or_else(|| invalid("head_forward", format!("model has no head for branch `{branch}`")))
    }

    /// Logits `[B,C]` of `branch`'s head on pooled representations `[B,d]`.
    pub fn head(&self, g: &mut Graph<T>, params: &[Var], branch: BranchId, rep: Var) -> Result<Var> {
        let h = self.head_ids(branch)?;
        let (_, d) = g.value(rep)?.dims2("head_forward")?;
        if d != self.config.d_model {
            return Err(Error::Shape {
                op: "head_forward",
                lhs: vec![d],
                rhs: vec![self.config.d_model],
            });
        }
        let z = g.linear(rep, params[h.w1], params[h.b1])?;
        let z = g.relu(z)?;
        g.linear(z, params[h.w2], params[h.b2])
    }

    /// Pooled representation of one sequence after `k_layers` blocks (all when `None`).
    pub fn encode(&self, tokens: &TokenSeq, k_layers: Option<usize>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let params = self.store.bind(&mut g, false);
        let taps = [k_layers.unwrap_or(self.config.n_layers)];
        let out = self.encode_batch(&mut g, &params, std::slice::from_ref(tokens), &taps, None)?;
        Ok(g.value(out[0])?.data().to_vec())
    }

    pub fn head_forward(&self, branch: BranchId, rep: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let params = self.store.bind(&mut g, false);
        let r = g.constant(Tensor::new(vec![1, rep.len()], rep.to_vec())?);
        let z = self.head(&mut g, &params, branch, r)?;
        Ok(g.value(z)?.data().to_vec())
    }

    /// Intact-head logits for one example given as constituents.
    pub fn intact_predict(&self, constituents: &[Vec<usize>]) -> Result<Vec<T>> {
        let seq = TokenSeq::join(constituents, self.config.sep_id);
        let rep = self.encode(&seq, None)?;
        self.head_forward(BranchId::Intact, &rep)
    }

    /// Logits of `branch` for each sequence after `k_layers` blocks, computed in
    /// chunks of `chunk` sequences (in parallel when enabled).
    pub fn predict_batch(
        &self,
        seqs: &[TokenSeq],
        branch: BranchId,
        k_layers: Option<usize>,
        chunk: usize,
    ) -> Result<Vec<Vec<T>>> {
        let chunks: Vec<&[TokenSeq]> = seqs.chunks(chunk.max(1)).collect();
        let parts = par::map(&chunks, |c| -> Result<Vec<Vec<T>>> {
            let mut g = Graph::new();
            let params = self.store.bind(&mut g, false);
            let taps = [k_layers.unwrap_or(self.config.n_layers)];
            let rep = self.encode_batch(&mut g, &params, c, &taps, None)?[0];
            let z = self.head(&mut g, &params, branch, rep)?;
            let zv = g.value(z)?;
            Ok((0..c.len()).map(|r| zv.row(r).to_vec()).collect())
        });
        let mut out = Vec::with_capacity(seqs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            format: "fairflow-model".into(),
            encoder: self.config.clone(),
            branches: self.branches(),
        }
    }

    /// Writes `model.json` (config and branch list) and `params.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&self.meta())?)?;
        self.store.save(&dir.join("params.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)?;
        let store = ParamStore::load(&dir.join("params.json"))?;
        Self::from_parts(meta.encoder, &meta.branches, store)
    }

    /// Rebuilds a model around `store`, which must hold exactly the parameters
    /// (names and shapes) that `config` and `branches` call for.
    pub fn from_parts(config: EncoderConfig, branches: &[BranchId], store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, branches, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for i in 0..store.len() {
            let (a, b) = (model.store.value(i), store.value(i));
            if model.store.name(i) != store.name(i) || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{}` {:?} does not match expected `{}` {:?}",
                    store.name(i),
                    b.shape(),
                    model.store.name(i),
                    a.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }
}

/// Inverted dropout: zero each entry with probability `p`, scale survivors by `1/(1-p)`.
fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x)?.to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { T::one() })
        .collect();
    let y = g.mask_apply(x, &Tensor::new(shape, mask)?)?;
    g.scale(y, 1.0 / (1.0 - p))
}

#[cfg(test)]
mod tests;
