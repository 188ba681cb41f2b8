//! Dense tensors, parameter stores, and the reverse-mode tape.

mod gradcheck;
mod half;
pub(crate) mod kernels;
mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, Worst};
pub use half::{f16_bits_to_f64, f64_to_f16_bits, half_round_trip, round_half};
pub use tape::{mix_seed, ActivationBytes, Gradients, MemoryStats, NodeInfo, SegmentFn, Tape, Var};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} must have positive dimensions"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(low..high)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count and column count of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::contract(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[r * c..(r + 1) * c]
    }

    /// Bit patterns of the values, for exact comparisons.
    pub fn bits(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Which forward values are stored at reduced precision for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PrecisionMode {
    #[default]
    Full64,
    Half16Activations,
}

impl std::str::FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full64" | "fp64" | "full" => Ok(PrecisionMode::Full64),
            "half16" | "fp16" | "half16activations" | "half" => Ok(PrecisionMode::Half16Activations),
            other => Err(Error::config(format!("unknown precision mode `{other}`"))),
        }
    }
}

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Globally unique parameter handle: the owning store's group plus the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    group: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        ParamStore {
            group,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            group: self.group,
            index: id as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies gradients for this store's group from `grads` into each tensor's `grad` slot.
    pub fn attach_grads(&mut self, grads: &Gradients) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let key = ParamKey {
                group: self.group,
                index: i as u32,
            };
            t.grad = grads.param(key).map(<[f64]>::to_vec);
        }
    }

    /// Bit patterns of every value, in store order.
    pub fn value_bits(&self) -> Vec<u64> {
        self.tensors.iter().flat_map(|t| t.bits()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn precision_parses() {
        assert_eq!("fp16".parse::<PrecisionMode>().unwrap(), PrecisionMode::Half16Activations);
        assert_eq!("full64".parse::<PrecisionMode>().unwrap(), PrecisionMode::Full64);
        assert!("bf16".parse::<PrecisionMode>().is_err());
    }
}
