//! Dense row-major tensor of `f64` values.
//!
//! Storage is a flat `Vec<f64>`; the element at indices `(i, j)` of a 2-D
//! tensor lives at `i * cols + j`. Values are immutable after construction;
//! the only mutable part is the optional gradient slot, which accumulates
//! additively across backward passes until explicitly cleared.

use crate::error::{Error, Result};

/// N-dimensional array of doubles with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Equality covers shape and values only; the gradient slot is scratch
/// state, so a trained-then-reset tensor compares equal to a fresh one.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    /// 2-D tensor from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Argument(format!(
                    "ragged rows: expected {} columns, found {}",
                    cols,
                    r.len()
                )));
            }
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a 2-D tensor (or length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a 2-D tensor; 1 for a 1-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1],
        }
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── gradient slot ────────────────────────────────────────────────────

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` (scaled) into the gradient slot, allocating zeros first
    /// if the slot is empty. Accumulation is additive by design: a batch of
    /// per-sample backward passes sums into the same slot.
    pub fn accumulate_grad(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d * scale;
        }
        Ok(())
    }

    /// Ensures the gradient slot exists (all zeros if absent).
    pub fn ensure_grad(&mut self) {
        self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
    }

    /// Clears the gradient slot.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the values wholesale (optimizer updates). Shape is unchanged.
    pub(crate) fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "set_data",
                lhs: self.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        self.data = data;
        Ok(())
    }

    /// Nudges one element in place (used by the finite-difference tests).
    #[cfg(test)]
    pub(crate) fn nudge(&mut self, idx: usize, delta: f64) {
        self.data[idx] += delta;
    }

    /// Overwrites one element in place, so a perturbed parameter can be
    /// restored to its exact original bits.
    pub(crate) fn set_flat(&mut self, idx: usize, v: f64) {
        self.data[idx] = v;
    }
}
