//! Named parameter containers.
//!
//! A [`ParameterSet`] is the unit that gets trained, averaged across
//! clients, and written to checkpoints. Iteration order is lexicographic
//! by name, which fixes both the flattened layout and the on-disk order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    /// Gradient from the most recent backward pass, same shape as `value`.
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Parameter { value, grad: None }
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                self.value.shape()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

/// Names and shapes of a [`ParameterSet`], in iteration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema(pub Vec<(String, Vec<usize>)>);

impl Schema {
    pub fn total_len(&self) -> usize {
        self.0.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Schema(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn schema(&self) -> Schema {
        Schema(
            self.params
                .iter()
                .map(|(n, p)| (n.clone(), p.value.shape().to_vec()))
                .collect(),
        )
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Concatenates all values in name order.
    pub fn flatten(&self) -> (Vec<f64>, Schema) {
        let mut flat = Vec::with_capacity(self.num_values());
        for p in self.params.values() {
            flat.extend_from_slice(p.value.data());
        }
        (flat, self.schema())
    }

    pub fn unflatten(values: &[f64], schema: &Schema) -> Result<Self> {
        if values.len() != schema.total_len() {
            return Err(Error::Schema(format!(
                "flat vector has {} values, schema needs {}",
                values.len(),
                schema.total_len()
            )));
        }
        let mut set = ParameterSet::new();
        let mut offset = 0;
        for (name, shape) in &schema.0 {
            let n: usize = shape.iter().product();
            set.insert(name.clone(), Tensor::new(shape.clone(), values[offset..offset + n].to_vec())?)?;
            offset += n;
        }
        Ok(set)
    }

    /// Bitwise equality of schema and values. Gradients are ignored.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.value.bit_eq(&b.value))
    }

    /// Order-sensitive 64-bit fingerprint over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::seed::Hasher64::new(0x5eed);
        for (name, p) in &self.params {
            h.write_bytes(name.as_bytes());
            h.write_tensor(&p.value);
        }
        h.finish()
    }
}
