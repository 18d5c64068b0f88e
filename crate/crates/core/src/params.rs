//! Flat parameter vectors exchanged between clients and the server.

use std::ops::{Index, IndexMut};

use crate::error::{FlicError, Result};

/// A model's parameters flattened to one ordered real vector.
///
/// `digest` ties the vector to the [`ModelSpec`](crate::model::ModelSpec)
/// that produced it; arithmetic between vectors of different models is a
/// shape error.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    digest: u64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, digest: u64) -> Self {
        Self { values, digest }
    }

    pub fn zeros(len: usize, digest: u64) -> Self {
        Self::new(vec![0.0; len], digest)
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub(crate) fn check_compatible(&self, other: &ParamVector, what: &'static str) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(FlicError::Shape { what, expected: self.values.len(), actual: other.values.len() });
        }
        if self.digest != other.digest {
            return Err(FlicError::Precondition(format!("{what}: parameter vectors belong to different models")));
        }
        Ok(())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(other, "vector difference")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector::new(values, self.digest))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_compatible(other, "scaled accumulation")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> ParamVector {
        ParamVector::new(self.values.iter().map(|v| v * scale).collect(), self.digest)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other, "dot product")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `p`-norm for `p >= 1`; `f64::INFINITY` gives the max norm.
    pub fn p_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.values.iter().fold(0.0, |m, v| m.max(v.abs()));
        }
        if p == 2.0 {
            return self.l2_norm();
        }
        self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mixed_models() {
        let a = ParamVector::zeros(3, 1);
        let b = ParamVector::zeros(3, 2);
        assert!(a.sub(&b).is_err());
        let c = ParamVector::zeros(4, 1);
        assert!(matches!(a.dot(&c), Err(FlicError::Shape { .. })));
    }

    #[test]
    fn norms() {
        let v = ParamVector::new(vec![3.0, -4.0], 0);
        assert_eq!(v.l2_norm(), 5.0);
        assert_eq!(v.p_norm(1.0), 7.0);
        assert_eq!(v.p_norm(f64::INFINITY), 4.0);
        assert!((v.p_norm(3.0) - (27.0f64 + 64.0).powf(1.0 / 3.0)).abs() < 1e-12);
    }
}
