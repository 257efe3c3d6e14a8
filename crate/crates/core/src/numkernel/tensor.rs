use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major `f64` tensor with value semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Columns `[start, end)` of a matrix view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        if start > end || end > c {
            return dim_err(format!("column range {start}..{end} outside {c} columns"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::matrix(r, w, out)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != r) {
            return dim_err("row counts differ in column concatenation");
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Self::matrix(r, total, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return dim_err(format!("matmul [{m},{k}] x [{k2},{n}]"));
        }
        Ok(Self {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
        })
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for `a: [k,m]`, `b: [k,n]`.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let bt = b.transpose();
        assert_eq!(matmul_bt_raw(a.data(), bt.data(), 2, 3, 2), ab.data());
        let at = a.transpose();
        assert_eq!(matmul_at_raw(at.data(), b.data(), 3, 2, 2), ab.data());
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let t = Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let a = t.slice_cols(0, 1).unwrap();
        let b = t.slice_cols(1, 4).unwrap();
        assert_eq!(Tensor::concat_cols(&[&a, &b]).unwrap(), t);
    }
}
