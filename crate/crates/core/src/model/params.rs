use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::diffcore::Tensor;

const FORMAT: &str = "semst-params";
const VERSION: u32 = 1;

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    params: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub(crate) fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"))
            .expect("fresh parameter name");
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<(), ModelError> {
        if self.names != other.names {
            return Err(ModelError::Checkpoint(format!(
                "parameter names differ ({} vs {} entries)",
                self.len(),
                other.len()
            )));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = File {
            format: FORMAT.to_string(),
            version: VERSION,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: File = serde_json::from_str(text)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported container {} v{}",
                file.format, file.version
            )));
        }
        let mut store = ParamStore::new();
        for e in file.params {
            let t = Tensor::new(e.shape, e.data)
                .map_err(|err| ModelError::Checkpoint(format!("{}: {err}", e.name)))?;
            if !t.is_finite() {
                return Err(ModelError::Checkpoint(format!("{}: non-finite values", e.name)));
            }
            store.insert(&e.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.uniform("a", &[3, 4], 0.08, &mut rng);
        s.uniform("b", &[1, 7], 1e-300, &mut rng);
        s.insert("c", Tensor::row(&[f64::MIN_POSITIVE, -0.0, 1.0 / 3.0])).unwrap();
        let back = ParamStore::from_json(&s.to_json()).unwrap();
        for (x, y) in s.tensors().iter().zip(back.tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(s.names(), back.names());
    }

    #[test]
    fn rejects_foreign_container_and_bad_shapes() {
        assert!(ParamStore::from_json(r#"{"format":"x","version":1,"params":[]}"#).is_err());
        let bad = r#"{"format":"semst-params","version":1,"params":[{"name":"w","shape":[2,2],"data":[1.0]}]}"#;
        assert!(matches!(ParamStore::from_json(bad), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn layout_check_names_the_offender() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let err = a.check_layout(&b).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
    }
}
