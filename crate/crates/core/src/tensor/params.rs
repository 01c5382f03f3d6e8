use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters, ordered by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter of `other` whose name and shape match.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Puts every parameter on the graph. With `requires_grad` false the
    /// parameters are constants and backward skips them.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameter handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces the handle for `name`, e.g. to route a probe variable into a
    /// forward pass.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collects gradients by parameter name; absent entries received none.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredCheckpoint {
    meta: CheckpointMeta,
    params: BTreeMap<String, StoredTensor>,
}

/// Parameters plus run metadata. Tensor data is little-endian f64, base64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: STANDARD.encode(bytes),
                    },
                )
            })
            .collect();
        let stored = StoredCheckpoint {
            meta: self.meta.clone(),
            params,
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(s)?;
        let mut params = ParamStore::new();
        for (k, st) in stored.params {
            let bytes = STANDARD
                .decode(st.data.as_bytes())
                .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Checkpoint(format!("{k}: truncated data")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(st.shape, data)
                .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))?;
            params.insert(k, t);
        }
        Ok(Self {
            meta: stored.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40)) {
            let mut params = ParamStore::new();
            params.insert("a.w", Tensor::row(vals.clone()));
            params.insert("b", Tensor::scalar(vals[0]));
            let ck = Checkpoint {
                meta: CheckpointMeta { config_hash: "abc".into(), step: 7, seed: 3 },
                params,
            };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let orig: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.params.get("a.w").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
            prop_assert_eq!(back.meta, ck.meta);
        }
    }
}
