//! Named parameter storage, initialization, and checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "gtgan-checkpoint-v1";

/// Flat map of parameter name to tensor. BTreeMap keeps iteration order
/// deterministic, which the training loop's bitwise reproducibility needs.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name:?}"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Kaiming-uniform weight: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn add_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| S::c(rng.uniform_in(-bound, bound)));
        self.insert(name, t);
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, value: S) {
        self.insert(name, Tensor::scalar(value));
    }

    /// Registers every parameter as a gradient-requiring tape leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant leaf (no gradients), used
    /// when one network is optimized while another is held fixed.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        self.bind_with(tape, false)
    }

    /// Binds all parameters, requiring gradients only where `trainable`
    /// says so. Lets one tape hold a trainable network next to a frozen one.
    pub fn bind_trainable(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.input(tensor.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    fn bind_with(&self, tape: &mut Tape<S>, requires_grad: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.input(tensor.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Moves every parameter of `other` into this store. Panics on name
    /// collisions, which indicate two networks sharing a prefix.
    pub fn merge(&mut self, other: ParamStore<S>) {
        for (name, tensor) in other.map {
            assert!(
                self.map.insert(name.clone(), tensor).is_none(),
                "duplicate parameter {name:?} while merging stores"
            );
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Parameter-name to tape-leaf map for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps an externally built name-to-leaf map (finite-difference
    /// harnesses bind their own leaves).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Reads accumulated leaf gradients back out of the tape, zeros where
    /// nothing flowed.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> BTreeMap<String, Vec<S>> {
        self.vars
            .iter()
            .map(|(name, &var)| {
                let g = tape
                    .grad_of(var)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); tape.value(var).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct CheckpointFile<S> {
    version: String,
    params: BTreeMap<String, Tensor<S>>,
}

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        params: store.map.clone(),
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile<S> = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION.into(),
        });
    }
    Ok(ParamStore { map: file.params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut rng = Rng::new(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_kaiming("layer.w", vec![4, 3], 3, &mut rng);
        store.add_zeros("layer.b", vec![4]);
        store.add_scalar("alpha", 0.0);

        let dir = std::env::temp_dir().join("gtgan-autodiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        save_checkpoint(&store, &path).unwrap();
        let loaded: ParamStore<f64> = load_checkpoint(&path).unwrap();
        for (name, tensor) in store.iter() {
            assert_eq!(tensor, loaded.get(name).unwrap());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("gtgan-autodiff-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, r#"{"version":"other","params":{}}"#).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::CheckpointVersion { .. })
        ));
    }
}
