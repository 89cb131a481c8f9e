use crate::error::{AdError, Result};

/// Dense row-major array of `f64` with an optional tangent channel.
///
/// The tangent, when present, always has the same shape as the values. An
/// empty shape denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    tangent: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if data.len() != expected {
            return Err(AdError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            tangent: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            tangent: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            tangent: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            tangent: None,
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
            tangent: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Attaches a tangent of identical shape.
    pub fn with_tangent(mut self, tangent: Vec<f64>) -> Result<Self> {
        if tangent.len() != self.data.len() {
            return Err(AdError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                got: tangent.len(),
            });
        }
        self.tangent = Some(tangent);
        Ok(self)
    }

    pub fn without_tangent(mut self) -> Self {
        self.tangent = None;
        self
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, tangent: Option<Vec<f64>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(tangent.as_ref().is_none_or(|t| t.len() == data.len()));
        Self {
            shape,
            data,
            tangent,
        }
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

    pub fn tangent(&self) -> Option<&[f64]> {
        self.tangent.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` for a rank-2 array.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(AdError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AdError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(AdError::DataLength {
                shape,
                expected: self.data.len(),
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data) && self.tangent.as_deref().is_none_or(all_finite)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(AdError::NonFinite { op })
        }
    }

    pub fn dot(&self, other: &NdArray) -> Result<f64> {
        self.check_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &NdArray) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            tangent: None,
        }
    }

    /// Elementwise `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &NdArray) -> Result<NdArray> {
        self.check_same_shape("axpy", other)?;
        Ok(NdArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
            tangent: None,
        })
    }

    pub fn scaled(&self, alpha: f64) -> NdArray {
        self.map(|v| alpha * v)
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &NdArray) -> Result<()> {
        if self.shape != other.shape {
            return Err(AdError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Branch-free inner loop so the scan vectorises.
fn all_finite(xs: &[f64]) -> bool {
    xs.chunks(256).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(NdArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::zeros(&[2]).with_tangent(vec![1.0]).is_err());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = NdArray::scalar(4.0);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 4.0);
    }

    #[test]
    fn finiteness_covers_tangent() {
        let a = NdArray::row(vec![1.0, 2.0])
            .with_tangent(vec![0.0, f64::NAN])
            .unwrap();
        assert!(!a.is_finite());
        assert!(matches!(a.ensure_finite("x"), Err(AdError::NonFinite { op: "x" })));
    }
}
