//! Named parameter storage and its JSON checkpoint format.
//!
//! A parameter file is one JSON object:
//!
//! ```text
//! {"format": "fairflow-params", "version": 1, "dtype": "f64",
//!  "tensors": [{"name": "tok_emb", "shape": [40, 32], "data": [...]}, ...]}
//! ```
//!
//! `data` is row-major; `shape` is the header that `data.len()` must match.
//! Values are written as shortest round-trip decimals, so `f64` checkpoints
//! reload bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "fairflow-params";
pub const VERSION: u32 = 1;

/// Parameters in insertion order; a parameter's index is its id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Drops every parameter with index `>= len`.
    pub fn truncate(&mut self, len: usize) {
        self.names.truncate(len);
        self.values.truncate(len);
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `g` as a leaf, tracked when `track` is set.
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| if track { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect()
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            format: FORMAT.to_string(),
            version: VERSION,
            dtype: T::NAME.to_string(),
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| TensorRecord {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: ParamFile) -> Result<Self> {
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported parameter file {} v{}",
                file.format, file.version
            )));
        }
        let mut store = ParamStore::new();
        for t in file.tensors {
            let data = t.data.iter().map(|&x| T::lit(x)).collect();
            let value = Tensor::new(t.shape, data)
                .map_err(|e| Error::Config(format!("tensor `{}`: {e}", t.name)))?;
            store.add(t.name, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_file(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 7.0]).unwrap());
        s.add("b", Tensor::vector(vec![std::f64::consts::PI]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        s.save(&p).unwrap();
        assert_eq!(ParamStore::<f64>::load(&p).unwrap(), s);
    }

    #[test]
    fn shape_header_is_checked() {
        let file = ParamFile {
            format: FORMAT.into(),
            version: 1,
            dtype: "f64".into(),
            tensors: vec![TensorRecord { name: "w".into(), shape: vec![2, 2], data: vec![1.0] }],
        };
        let err = ParamStore::<f64>::from_file(file).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }
}
