use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Graph(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape as `[N, C, H, W]`, or a graph error.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Graph(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Graph(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Graph(format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Graph(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    /// Index of the largest entry in each row of a `[N, K]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [_, k] = self.dims2()?;
        Ok(self
            .data
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
