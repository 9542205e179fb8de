use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{mismatch, Result, TensorError};
use crate::tensor::Tensor;

/// A named tensor owned by a model.
///
/// Buffers (`trainable == false`) are persisted alongside parameters but
/// never receive gradients, e.g. batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered registry of every parameter and buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, true)
    }

    pub fn register_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, false)
    }

    pub fn push(&mut self, p: Parameter) -> Result<()> {
        self.insert(&p.name, p.tensor, p.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensor_mut(name)
            .ok_or_else(|| TensorError::Invalid(format!("no parameter named `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(mismatch(
                "set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Hash over names, shapes and exact bit patterns of the entries
    /// selected by `keep`.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.entries.iter().filter(|p| keep(&p.name)) {
            p.name.hash(&mut h);
            p.tensor.shape().hash(&mut h);
            for v in p.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
