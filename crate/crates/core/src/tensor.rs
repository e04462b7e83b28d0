//! Dense f64 tensors of rank 0, 1, or 2.
//!
//! Values are stored flat in row-major order. A zero-length vector is
//! permitted (it is the identity for concatenation and sums to zero);
//! matrices must have both dimensions at least 1.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        match self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(_, _) => 2,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vec[{n}]"),
            Shape::Matrix(r, c) => write!(f, "mat[{r}x{c}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if let Shape::Matrix(r, c) = shape {
            if r == 0 || c == 0 {
                return Err(Error::shape(
                    "tensor_new",
                    format!("matrix dims must be >= 1, got {r}x{c}"),
                ));
            }
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("{} expects {} values, got {}", shape, shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::Scalar,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.len()],
        }
    }

    /// One-hot vector of length `n` with a 1.0 at `index`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::IndexOutOfRange {
                what: "one_hot",
                index,
                size: n,
            });
        }
        let mut data = vec![0.0; n];
        data[index] = 1.0;
        Ok(Tensor {
            shape: Shape::Vector(n),
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        match self.shape {
            Shape::Scalar => Ok(self.data[0]),
            s => Err(Error::shape("item", format!("expected scalar, got {s}"))),
        }
    }

    pub fn get(&self, i: usize) -> Result<f64> {
        self.data.get(i).copied().ok_or(Error::IndexOutOfRange {
            what: "tensor element",
            index: i,
            size: self.data.len(),
        })
    }

    pub fn at(&self, row: usize, col: usize) -> Result<f64> {
        match self.shape {
            Shape::Matrix(r, c) => {
                if row >= r || col >= c {
                    return Err(Error::IndexOutOfRange {
                        what: "matrix element",
                        index: row * c + col,
                        size: r * c,
                    });
                }
                Ok(self.data[row * c + col])
            }
            s => Err(Error::shape("at", format!("expected matrix, got {s}"))),
        }
    }

    /// Row `i` of a matrix as a fresh vector tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        match self.shape {
            Shape::Matrix(r, c) => {
                if i >= r {
                    return Err(Error::IndexOutOfRange {
                        what: "matrix row",
                        index: i,
                        size: r,
                    });
                }
                Ok(Tensor::vector(self.data[i * c..(i + 1) * c].to_vec()))
            }
            s => Err(Error::shape("row", format!("expected matrix, got {s}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; 0.0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Index of the largest entry, lowest index winning ties.
    pub fn argmax(&self) -> Result<usize> {
        if self.data.is_empty() {
            return Err(Error::domain("argmax", "empty tensor"));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                op: "argmax",
                detail: "input contains NaN".to_string(),
            });
        }
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate().skip(1) {
            if *v > self.data[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Elementwise combine; shapes must match exactly.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
