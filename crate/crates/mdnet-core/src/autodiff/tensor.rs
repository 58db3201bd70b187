use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Dense n-dimensional f64 array in row-major layout, optionally carrying a
/// gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != values.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attach a gradient; the length must match the value array.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.values.len() {
            return Err(TensorError::Invalid(format!(
                "gradient length {} does not match tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interpret as [N, C, H, W].
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Interpret as [C, H, W], accepting a leading batch dimension of 1.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            &[1, c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Copy of batch slice `n` of a [N, C, H, W] tensor, as [C, H, W].
    pub fn batch_slice(&self, n: usize) -> Result<Tensor, TensorError> {
        let (nb, c, h, w) = self.dims4("batch_slice")?;
        if n >= nb {
            return Err(TensorError::Invalid(format!(
                "batch index {n} out of range for shape {:?}",
                self.shape
            )));
        }
        let plane = c * h * w;
        Tensor::new(vec![c, h, w], self.values[n * plane..(n + 1) * plane].to_vec())
    }

    /// Stack [C, H, W] tensors of identical shape into [N, C, H, W].
    pub fn stack(items: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Invalid("cannot stack an empty list".into()))?;
        let mut values = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    context: "stack".into(),
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            values.extend_from_slice(&t.values);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, values)
    }
}

/// Debug-build guard: ops on finite inputs must produce finite outputs.
#[inline]
pub(crate) fn debug_check_finite(values: &[f64], op: &str) {
    if cfg!(debug_assertions) {
        for (i, v) in values.iter().enumerate() {
            debug_assert!(v.is_finite(), "non-finite value {v} at index {i} after {op}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn stack_and_slice_round_trip() {
        let a = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new(vec![2, 2, 2], (8..16).map(|v| v as f64).collect()).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_slice(1).unwrap().values(), b.values());
    }

    #[test]
    fn grad_length_is_validated() {
        let mut t = Tensor::zeros(vec![2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![0.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap().len(), 4);
    }
}
