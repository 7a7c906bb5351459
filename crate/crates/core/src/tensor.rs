//! Dense row-major `f64` tensors.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor of {}", delta.len(), self.data.len()),
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Plain-text dump: a `shape` header line followed by one value per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "shape {}", dims.join(" "));
        for v in &self.data {
            let _ = writeln!(out, "{v:e}");
        }
        out
    }

    /// Parses the format written by [`Tensor::dump`].
    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty tensor dump".into(),
        })?;
        let dims = header.strip_prefix("shape").ok_or(Error::Parse {
            line: 1,
            message: "missing shape header".into(),
        })?;
        let shape = dims
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>().map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            data.push(line.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Tensor::new(shape, data)
    }
}

/// Integer tensor used for categorical ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "int_tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.5, -0.25, 1e-300, 3.0]).unwrap();
        let back = Tensor::parse_dump(&t.dump()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn non_finite_is_detected() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(t.is_finite());
        t.accumulate_grad(&[f64::NAN, 0.0]).unwrap();
        assert!(!t.is_finite());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::from_vec(vec![0.0, 0.0]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
