//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Everything is 64-bit and row-major. Gradient checks against central finite
//! differences need the precision, and nothing here is performance-critical
//! enough to justify f32.
//!
//! Broadcasting follows the usual trailing-alignment rules: shapes are
//! right-aligned, and each aligned pair of extents must either match or one of
//! them must be 1. Matmul broadcasts leading (batch) dimensions the same way
//! while the trailing two dimensions follow the ordinary matrix product rule.

mod graph;
mod optim;
mod param;
mod serial;

pub use graph::{Graph, NodeId};
pub use optim::{cosine_lr, AdamW};
pub use param::{normal_init, ones, xavier_init, zeros, ParamId, ParamStore, Parameter};
pub use serial::{
    load_tensor, read_tensor, record_size, save_tensor, write_tensor, IVAT_MAGIC,
};

use crate::error::{IvaError, Result};

/// A dense row-major f64 tensor.
///
/// `grad` is an additive accumulator: running two backward passes without a
/// reset doubles it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(IvaError::Domain(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(IvaError::Dimension {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Broadcast two shapes together, or report the mismatch.
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(IvaError::Dimension {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Extent at position `i` counted from the right, padding with 1.
fn dim_from_right(shape: &[usize], i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        1
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Flat offset of `coords` in a broadcast view of `shape` (extent-1 axes
/// ignore their coordinate). `coords` is right-aligned against `shape`.
pub(crate) fn broadcast_offset(
    coords: &[usize],
    shape: &[usize],
    strides: &[usize],
) -> usize {
    let pad = coords.len() - shape.len();
    let mut off = 0;
    for (d, &extent) in shape.iter().enumerate() {
        let c = if extent == 1 { 0 } else { coords[pad + d] };
        off += c * strides[d];
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, IvaError::Dimension { .. }));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.0, 1.0, 1.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shapes("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(broadcast_shapes("t", &[5], &[2, 5]).unwrap(), vec![2, 5]);
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }
}
