use crate::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows: no rows"));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("from_rows: ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), w], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (rank 2) or vector (rank 1 = one row).
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let w = self.cols();
        self.data[i * w + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// c[i][j] = sum_l a[i][l] * b[l][j]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape("matmul expects rank-2 tensors"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &a) in arow.iter().enumerate() {
                let brow = &other.data[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Matrix-vector product: self [m x k] times v (length k).
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rank() != 2 || self.shape[1] != v.len() {
            return Err(Error::shape(format!(
                "matvec: {:?} vs vector of length {}",
                self.shape,
                v.len()
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// v^T times self, for self [m x k] and v of length m.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rank() != 2 || self.shape[0] != v.len() {
            return Err(Error::shape(format!(
                "matvec_t: {:?} vs vector of length {}",
                self.shape,
                v.len()
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; k];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let vi = v[i];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += vi * r;
            }
        }
        Ok(out)
    }

    /// Rank-1 update: self[i][j] += scale * u[i] * w[j].
    pub fn add_outer(&mut self, u: &[f64], w: &[f64], scale: f64) {
        debug_assert_eq!(self.shape, vec![u.len(), w.len()]);
        let k = w.len();
        for (i, &ui) in u.iter().enumerate() {
            let row = &mut self.data[i * k..(i + 1) * k];
            for (r, &wj) in row.iter_mut().zip(w) {
                *r += scale * ui * wj;
            }
        }
    }

    pub fn elementwise(&self, op: ElemOp, other: Option<&Tensor>) -> Result<Tensor> {
        match op {
            ElemOp::Add | ElemOp::Sub | ElemOp::Mul => {
                let b = other.ok_or_else(|| Error::shape("binary op needs second operand"))?;
                self.zip_with(b, |x, y| match op {
                    ElemOp::Add => x + y,
                    ElemOp::Sub => x - y,
                    ElemOp::Mul => x * y,
                    _ => unreachable!(),
                })
            }
            ElemOp::Scale(c) => Ok(self.map(|x| x * c)),
            ElemOp::Tanh => Ok(self.map(f64::tanh)),
            ElemOp::Silu => Ok(self.map(silu)),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine; `other` may also be a row vector broadcast along
    /// the leading axis of a rank-2 `self`.
    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(self.shape.clone(), data);
        }
        if self.rank() == 2 && other.rank() == 1 && other.len() == self.cols() {
            let w = self.cols();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(idx, &x)| f(x, other.data[idx % w]))
                .collect();
            return Tensor::new(self.shape.clone(), data);
        }
        Err(Error::shape(format!(
            "incompatible shapes {:?} and {:?}",
            self.shape, other.shape
        )))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElemOp::Add, Some(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElemOp::Sub, Some(other))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    /// self += scale * other (shapes must match exactly).
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Elementwise operation tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Silu,
}

/// Central-difference gradient: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}
