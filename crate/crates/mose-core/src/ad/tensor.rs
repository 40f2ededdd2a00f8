//! Dense 64-bit float tensors in row-major order.

use crate::error::AdError;

/// A dense tensor: a shape plus row-major `f64` storage.
///
/// The number of stored values always equals the product of the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} implies {} values, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on tensor of {} values", self.values.len());
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<(), AdError> {
        if self.is_finite() {
            Ok(())
        } else {
            let bad = self
                .values
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
                .map(|(i, v)| format!("values[{i}] = {v}"))
                .unwrap_or_default();
            Err(AdError::NonFinite { context, detail: bad })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_matches_value_count() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn finite_check_reports_index() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]);
        let err = t.check_finite("test").unwrap_err();
        assert!(err.to_string().contains("values[1]"));
    }
}
