use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
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

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Iterates over contiguous slices along the last axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened array.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}{:?}", self.shape, self.data)
    }
}

/// Index maps for numpy-style broadcasting of two shapes.
pub(crate) struct Broadcast {
    pub shape: Vec<usize>,
    /// Flat input index for each output element; `None` when the operand
    /// already has the output shape.
    pub lhs: Option<Vec<usize>>,
    pub rhs: Option<Vec<usize>>,
}

pub(crate) fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast {
            shape: a.to_vec(),
            lhs: None,
            rhs: None,
        });
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        let d = match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
        shape.push(d);
    }
    let map = |p: &[usize]| -> Option<Vec<usize>> {
        if p == shape.as_slice() {
            return None;
        }
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            strides[i] = if p[i] == 1 { 0 } else { acc };
            acc *= p[i];
        }
        let total: usize = shape.iter().product();
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Some(idx)
    };
    let lhs = map(&pa);
    let rhs = map(&pb);
    Ok(Broadcast { shape, lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
        let a = Array::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(a.last_dim(), 3);
        assert_eq!(a.rows().count(), 2);
    }

    #[test]
    fn broadcast_row_and_column() {
        let b = broadcast("add", &[2, 3], &[3]).unwrap();
        assert_eq!(b.shape, vec![2, 3]);
        assert!(b.lhs.is_none());
        assert_eq!(b.rhs.unwrap(), vec![0, 1, 2, 0, 1, 2]);

        let c = broadcast("mul", &[2, 3], &[2, 1]).unwrap();
        assert_eq!(c.rhs.unwrap(), vec![0, 0, 0, 1, 1, 1]);

        let d = broadcast("mul", &[2, 1, 3], &[4, 3]).unwrap();
        assert_eq!(d.shape, vec![2, 4, 3]);

        assert!(broadcast("add", &[2, 3], &[2]).is_err());
    }
}
