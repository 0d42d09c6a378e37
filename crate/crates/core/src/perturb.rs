//! Perturbation operators that produce biased views of an input.
//!
//! Explicit operators rewrite tokens; implicit ones leave tokens alone and
//! instead instruct the encoder (truncate to `k` blocks) or corrupt the pooled
//! representation (zero a fixed number of coordinates).
//!
//! Counting rules: fractional drop removes `floor(fraction·n)` tokens from a
//! constituent of `n` tokens but always leaves at least one; rep-zero sets
//! `round(m·d)` coordinates to zero (`f64::round`, halves away from zero).
//!
//! Randomness comes from [`stream_rng`], keyed by `(master seed, example id,
//! spec stream, epoch)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoder::BranchId;
use crate::error::{invalid, Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbKind {
    Shuffle,
    /// Drop constituent `j` (1-based).
    DropConstituent(usize),
    FractionalDrop(f64),
    LayerTruncate(usize),
    RepZero(f64),
}

impl PerturbKind {
    pub fn is_explicit(&self) -> bool {
        matches!(self, PerturbKind::Shuffle | PerturbKind::DropConstituent(_) | PerturbKind::FractionalDrop(_))
    }

    pub fn branch(&self) -> BranchId {
        match *self {
            PerturbKind::Shuffle => BranchId::Gra,
            PerturbKind::DropConstituent(j) => BranchId::Sub(j),
            PerturbKind::FractionalDrop(_) => BranchId::Half,
            PerturbKind::LayerTruncate(_) => BranchId::Mod,
            PerturbKind::RepZero(_) => BranchId::Rep,
        }
    }
}

/// One bias branch: an operator plus the id of its random stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub seed_stream: u64,
}

impl PerturbationSpec {
    /// The stream id defaults to a hash of the canonical spec string, so a
    /// branch draws the same randomness whatever other branches are configured.
    pub fn new(kind: PerturbKind) -> Self {
        let mut spec = PerturbationSpec { kind, seed_stream: 0 };
        spec.seed_stream = fnv1a(spec.to_string().as_bytes());
        spec
    }

    pub fn branch(&self) -> BranchId {
        self.kind.branch()
    }

    /// Checks parameter ranges; `n_layers` bounds `layer_truncate`.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("perturbation `{self}`: {m}")));
        match self.kind {
            PerturbKind::Shuffle => Ok(()),
            PerturbKind::DropConstituent(j) if j == 0 => bad("constituent index is 1-based".into()),
            PerturbKind::DropConstituent(_) => Ok(()),
            PerturbKind::FractionalDrop(f) if !(f > 0.0 && f < 1.0) => bad("fraction must be in (0, 1)".into()),
            PerturbKind::FractionalDrop(_) => Ok(()),
            PerturbKind::LayerTruncate(k) if k == 0 || k > n_layers => {
                bad(format!("k must be in 1..={n_layers}"))
            }
            PerturbKind::LayerTruncate(_) => Ok(()),
            PerturbKind::RepZero(m) if !(0.0..=1.0).contains(&m) => bad("m must be in [0, 1]".into()),
            PerturbKind::RepZero(_) => Ok(()),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PerturbKind::Shuffle => write!(f, "shuffle"),
            PerturbKind::DropConstituent(j) => write!(f, "drop_constituent:{j}"),
            PerturbKind::FractionalDrop(x) => write!(f, "fractional_drop:{x}"),
            PerturbKind::LayerTruncate(k) => write!(f, "layer_truncate:{k}"),
            PerturbKind::RepZero(m) => write!(f, "rep_zero:{m}"),
        }
    }
}

impl FromStr for PerturbationSpec {
    type Err = Error;

    /// `shuffle`, `drop_constituent:J`, `fractional_drop:F`, `layer_truncate:K`,
    /// `rep_zero:M`, optionally followed by `@STREAM` to pin the stream id.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized perturbation `{s}`"));
        let (body, stream) = match s.split_once('@') {
            Some((b, st)) => (b, Some(st.parse::<u64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let (name, arg) = match body.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (body.trim(), None),
        };
        let int = |a: Option<&str>| a.and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad);
        let real = |a: Option<&str>| a.and_then(|a| a.parse::<f64>().ok()).ok_or_else(bad);
        let kind = match name {
            "shuffle" if arg.is_none() => PerturbKind::Shuffle,
            "drop_constituent" => PerturbKind::DropConstituent(int(arg)?),
            "fractional_drop" => PerturbKind::FractionalDrop(real(arg)?),
            "layer_truncate" => PerturbKind::LayerTruncate(int(arg)?),
            "rep_zero" => PerturbKind::RepZero(real(arg)?),
            _ => return Err(bad()),
        };
        let mut spec = PerturbationSpec::new(kind);
        if let Some(st) = stream {
            spec.seed_stream = st;
        }
        Ok(spec)
    }
}

impl Serialize for PerturbationSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.seed_stream == PerturbationSpec::new(self.kind).seed_stream {
            s.collect_str(self)
        } else {
            s.serialize_str(&format!("{self}@{}", self.seed_stream))
        }
    }
}

impl<'de> Deserialize<'de> for PerturbationSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What a branch feeds to the encoder for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewPayload {
    /// Perturbed constituents (explicit operators).
    Tokens(Vec<Vec<usize>>),
    /// Intact tokens encoded with only the first `k` blocks.
    Truncate { k: usize },
    /// Intact tokens; `keep[c] == false` zeroes pooled coordinate `c`.
    RepMask { keep: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedView {
    pub origin: usize,
    pub spec: PerturbationSpec,
    pub payload: ViewPayload,
}

/// The random stream of `spec` for one example in one epoch.
pub fn stream_rng(master: u64, example_id: u64, spec: &PerturbationSpec, epoch: u64) -> Rng {
    seed::rng(master, &[seed::PERTURB, example_id, spec.seed_stream, epoch])
}

fn check_nonempty(constituents: &[Vec<usize>]) -> Result<()> {
    if constituents.iter().all(Vec::is_empty) {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// Uniform Fisher–Yates permutation of every constituent separately:
/// for `i` from `n-1` down to `1`, swap position `i` with a uniform `j ≤ i`.
pub fn shuffle_tokens(constituents: &[Vec<usize>], rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    check_nonempty(constituents)?;
    Ok(constituents
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.shuffle(rng);
            c
        })
        .collect())
}

/// Removes constituent `j` (1-based); the rest keep their order.
pub fn drop_constituent(constituents: &[Vec<usize>], j: usize) -> Result<Vec<Vec<usize>>> {
    let p = constituents.len();
    if p < 2 {
        return Err(invalid("drop_constituent", format!("needs at least 2 constituents, got {p}")));
    }
    if j == 0 || j > p {
        return Err(invalid("drop_constituent", format!("index {j} outside 1..={p}")));
    }
    Ok(constituents
        .iter()
        .enumerate()
        .filter(|(i, _)| i + 1 != j)
        .map(|(_, c)| c.clone())
        .collect())
}

/// Number of tokens fractional drop removes from `n` tokens.
pub fn drop_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1))
}

/// Drops `drop_count(n, fraction)` uniformly chosen tokens of each constituent,
/// preserving the order of the survivors. Empty constituents stay empty.
pub fn fractional_drop(constituents: &[Vec<usize>], fraction: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("fractional_drop", format!("fraction {fraction} outside (0, 1)")));
    }
    check_nonempty(constituents)?;
    Ok(constituents
        .iter()
        .map(|c| {
            let n = c.len();
            let mut keep = vec![true; n];
            for i in index::sample(rng, n, drop_count(n, fraction)) {
                keep[i] = false;
            }
            c.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect()
        })
        .collect())
}

pub fn layer_truncate(k: usize, n_layers: usize) -> Result<ViewPayload> {
    if k == 0 || k > n_layers {
        return Err(invalid("layer_truncate", format!("k {k} outside 1..={n_layers}")));
    }
    Ok(ViewPayload::Truncate { k })
}

/// Number of coordinates rep-zero clears in a `d`-vector.
pub fn zero_count(d: usize, m: f64) -> usize {
    ((m * d as f64).round() as usize).min(d)
}

/// Keep-mask with exactly `zero_count(d, m)` uniformly chosen `false` entries.
pub fn rep_zero_mask(d: usize, m: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid("rep_zero", format!("m {m} outside [0, 1]")));
    }
    let mut keep = vec![true; d];
    for i in index::sample(rng, d, zero_count(d, m)) {
        keep[i] = false;
    }
    Ok(keep)
}

pub fn rep_zero<T: Real>(rep: &[T], m: f64, rng: &mut Rng) -> Result<Vec<T>> {
    let keep = rep_zero_mask(rep.len(), m, rng)?;
    Ok(rep
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v } else { T::zero() })
        .collect())
}

/// Builds the view of `spec` for example `origin`, drawing from `rng`.
pub fn apply(
    spec: &PerturbationSpec,
    origin: usize,
    constituents: &[Vec<usize>],
    n_layers: usize,
    d_model: usize,
    rng: &mut Rng,
) -> Result<BiasedView> {
    let payload = match spec.kind {
        PerturbKind::Shuffle => ViewPayload::Tokens(shuffle_tokens(constituents, rng)?),
        PerturbKind::DropConstituent(j) => ViewPayload::Tokens(drop_constituent(constituents, j)?),
        PerturbKind::FractionalDrop(f) => ViewPayload::Tokens(fractional_drop(constituents, f, rng)?),
        PerturbKind::LayerTruncate(k) => layer_truncate(k, n_layers)?,
        PerturbKind::RepZero(m) => ViewPayload::RepMask {
            keep: rep_zero_mask(d_model, m, rng)?,
        },
    };
    Ok(BiasedView {
        origin,
        spec: *spec,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rng(s: u64) -> Rng {
        Rng::seed_from_u64(s)
    }

    #[test]
    fn shuffle_golden_seed_42() {
        let out = shuffle_tokens(&[vec![5, 9, 2, 7]], &mut rng(42)).unwrap();
        // independent walk: i = 3, 2, 1 with j uniform in 0..=i (u32 draws)
        let mut r = rng(42);
        let mut v = vec![5, 9, 2, 7];
        for i in (1..4usize).rev() {
            let j = r.gen_range(0..(i + 1) as u32) as usize;
            v.swap(i, j);
        }
        assert_eq!(out[0], v);
        assert_eq!(out[0], GOLDEN_SHUFFLE_42);
    }

    const GOLDEN_SHUFFLE_42: [usize; 4] = [5, 2, 9, 7];

    #[test]
    fn shuffle_keeps_boundaries_and_singletons() {
        let c = vec![vec![4], vec![1, 2, 3, 4, 5, 6]];
        let out = shuffle_tokens(&c, &mut rng(1)).unwrap();
        assert_eq!(out[0], vec![4]);
        let mut s = out[1].clone();
        s.sort();
        assert_eq!(s, c[1]);
        assert!(shuffle_tokens(&[vec![], vec![]], &mut rng(1)).is_err());
    }

    #[test]
    fn drop_constituent_cases() {
        let c = vec![vec![1, 2], vec![3], vec![4, 5]];
        assert_eq!(drop_constituent(&c[..2], 1).unwrap(), vec![vec![3]]);
        assert_eq!(drop_constituent(&c, 2).unwrap(), vec![vec![1, 2], vec![4, 5]]);
        let views: Vec<_> = (1..=3).map(|j| drop_constituent(&c, j).unwrap()).collect();
        assert!(views[0] != views[1] && views[1] != views[2] && views[0] != views[2]);
        assert!(drop_constituent(&c, 0).is_err());
        assert!(drop_constituent(&c, 4).is_err());
        assert!(drop_constituent(&c[..1], 1).is_err());
    }

    #[test]
    fn fractional_drop_counts() {
        let out = fractional_drop(&[vec![1, 2, 3, 4], vec![9]], 0.5, &mut rng(3)).unwrap();
        assert_eq!(out[0].len(), 2);
        assert_eq!(out[1], vec![9]);
        assert_eq!(drop_count(7, 0.5), 3);
        assert_eq!(drop_count(2, 0.99), 1);
        assert!(fractional_drop(&[vec![1]], 1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn rep_zero_counts() {
        assert_eq!(zero_count(32, 0.9), 29);
        let rep: Vec<f64> = (1..=32).map(f64::from).collect();
        let out = rep_zero(&rep, 0.9, &mut rng(5)).unwrap();
        assert_eq!(out.iter().filter(|v| **v == 0.0).count(), 29);
        assert_eq!(rep_zero(&rep, 0.0, &mut rng(5)).unwrap(), rep);
        assert!(rep_zero(&rep, 1.0, &mut rng(5)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_truncate_range() {
        assert_eq!(layer_truncate(2, 4).unwrap(), ViewPayload::Truncate { k: 2 });
        assert!(layer_truncate(0, 4).is_err());
        assert!(layer_truncate(5, 4).is_err());
    }

    #[test]
    fn spec_parsing() {
        let all = ["shuffle", "drop_constituent:1", "drop_constituent:2", "fractional_drop:0.5", "layer_truncate:2", "rep_zero:0.9"];
        for s in all {
            let spec: PerturbationSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
            spec.validate(4).unwrap();
        }
        let pinned: PerturbationSpec = "shuffle@7".parse().unwrap();
        assert_eq!(pinned.seed_stream, 7);
        assert_eq!(serde_json::to_string(&pinned).unwrap(), "\"shuffle@7\"");
        for bad in ["shuffle:1", "drop", "rep_zero:x", "layer_truncate"] {
            assert!(bad.parse::<PerturbationSpec>().is_err(), "{bad}");
        }
        assert!("layer_truncate:5".parse::<PerturbationSpec>().unwrap().validate(4).is_err());
        assert!("fractional_drop:1.0".parse::<PerturbationSpec>().unwrap().validate(4).is_err());
        assert!("drop_constituent:0".parse::<PerturbationSpec>().unwrap().validate(4).is_err());
    }

    #[test]
    fn fresh_randomness_per_epoch() {
        let spec: PerturbationSpec = "shuffle".parse().unwrap();
        let c = vec![vec![1, 2, 3, 4, 5, 6], vec![7, 8, 9, 10]];
        let differs = (0..16).any(|ex| {
            let a = shuffle_tokens(&c, &mut stream_rng(1, ex, &spec, 0)).unwrap();
            let b = shuffle_tokens(&c, &mut stream_rng(1, ex, &spec, 1)).unwrap();
            a != b
        });
        assert!(differs);
        let a = apply(&spec, 3, &c, 4, 8, &mut stream_rng(1, 3, &spec, 0)).unwrap();
        let b = apply(&spec, 3, &c, 4, 8, &mut stream_rng(1, 3, &spec, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn implicit_views_carry_no_tokens() {
        let c = vec![vec![1, 2], vec![3]];
        for s in ["layer_truncate:2", "rep_zero:0.5"] {
            let spec: PerturbationSpec = s.parse().unwrap();
            let v = apply(&spec, 0, &c, 4, 8, &mut rng(0)).unwrap();
            assert!(!matches!(v.payload, ViewPayload::Tokens(_)));
        }
    }
}
