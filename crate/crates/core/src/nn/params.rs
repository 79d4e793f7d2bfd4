use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordering manifest for a flat parameter vector. Layers register their
/// tensors in construction order; the resulting offsets are stable for a
/// given architecture.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = ParamSpec { name: name.into(), shape: shape.to_vec(), offset: self.total };
        self.total += spec.len();
        let r = spec.range();
        self.specs.push(spec);
        r
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Name of the tensor containing flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.range().contains(&i))
    }
}

/// Flat parameter vector with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    /// Split into per-tensor owned vectors, in layout order.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .specs()
            .iter()
            .map(|s| (s.name.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ParamVec::unflatten`]; `None` when names, order or
    /// lengths disagree with the layout.
    pub fn flatten(layout: ParamLayout, tensors: &[(String, Vec<f64>)]) -> Option<Self> {
        if tensors.len() != layout.specs().len() {
            return None;
        }
        let mut values = Vec::with_capacity(layout.len());
        for (spec, (name, data)) in layout.specs().iter().zip(tensors) {
            if &spec.name != name || spec.len() != data.len() {
                return None;
            }
            values.extend_from_slice(data);
        }
        Some(Self { layout, values })
    }
}
