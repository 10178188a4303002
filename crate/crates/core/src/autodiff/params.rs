use std::collections::HashMap;

use crate::error::{Error, Result};

/// One named, fixed-shape trainable array with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamBlock {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered collection of parameter blocks. Insertion order is the canonical order used by
/// checkpoints and optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    lookup: HashMap<String, usize>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<usize> {
        if self.lookup.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if value.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name:?}: shape {shape:?} needs {numel} values, got {}",
                value.len()
            )));
        }
        let id = self.blocks.len();
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            value,
        });
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.id(name).map(|i| &self.blocks[i])
    }

    pub fn block(&self, id: usize) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn block_mut(&mut self, id: usize) -> &mut ParamBlock {
        &mut self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(ParamBlock::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Resets Adam moments and the step counter.
    pub fn reset_moments(&mut self) {
        self.step = 0;
        for b in &mut self.blocks {
            b.m.iter_mut().for_each(|x| *x = 0.0);
            b.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Copies parameter values (not moments) from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::ShapeMismatch("parameter stores differ in block count".into()));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?}{:?} vs {:?}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
            a.value.copy_from_slice(&b.value);
        }
        Ok(())
    }
}
