use crate::checkpoint::NamedArray;
use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Places every tensor on the tape as a tracked leaf.
    pub fn attach(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Places every tensor on the tape as a constant (no gradients).
    pub fn attach_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Gradients for each slot in order, `None` where the loss did not depend on it.
    pub fn collect_grads(vars: &[Var], grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedArray {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect()
    }

    /// Rebuilds a set from checkpoint arrays, checking names and shapes against `self`.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let arr = arrays
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing array {name}")))?;
            if arr.shape != tensor.shape() {
                return Err(NnError::Checkpoint(format!(
                    "array {name}: expected shape {:?}, found {:?}",
                    tensor.shape(),
                    arr.shape
                )));
            }
            for (dst, &src) in tensor.data_mut().iter_mut().zip(&arr.data) {
                *dst = T::from_f64_lossy(src as f64);
            }
        }
        Ok(())
    }
}
