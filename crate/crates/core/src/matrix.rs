//! Dense row-major matrices.
//!
//! Weight matrices are laid out `rows = inputs`, `cols = outputs`, matching
//! the crossbar: input voltages drive rows, output currents sum on columns.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `y[j] = sum_i W[i][j] * x[i]`.
    pub fn vmm_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::domain(format!(
                "forward input length {} does not match {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yj, &w) in y.iter_mut().zip(self.row(i)) {
                *yj += w * xi;
            }
        }
        Ok(y)
    }

    /// `r[i] = sum_j W[i][j] * delta[j]`.
    pub fn vmm_backward(&self, delta: &[f64]) -> Result<Vec<f64>> {
        if delta.len() != self.cols {
            return Err(Error::domain(format!(
                "backward input length {} does not match {} cols",
                delta.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(delta).map(|(w, d)| w * d).sum())
            .collect())
    }

    /// `self += factor * outer(u, v)`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], factor: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            let a = ui * factor;
            let cols = self.cols;
            for (m, &vj) in self.data[i * cols..(i + 1) * cols].iter_mut().zip(v) {
                *m += a * vj;
            }
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// Matrix of binary synaptic weights, entries restricted to `+1` / `-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl SignMatrix {
    pub fn filled(rows: usize, cols: usize, sign: i8) -> Result<Self> {
        check_sign(sign)?;
        Ok(Self {
            rows,
            cols,
            data: vec![sign; rows * cols],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "{rows}x{cols} sign matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        for &s in &data {
            check_sign(s)?;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, sign: i8) -> Result<()> {
        check_sign(sign)?;
        self.data[row * self.cols + col] = sign;
        Ok(())
    }

    /// Flip every entry where `flips` is nonzero. Flip entries must point
    /// away from the current sign.
    pub fn apply_flips(&mut self, flips: &[i8]) -> Result<usize> {
        if flips.len() != self.data.len() {
            return Err(Error::domain("flip matrix size mismatch"));
        }
        let mut count = 0;
        for (s, &f) in self.data.iter_mut().zip(flips) {
            if f != 0 {
                if f == *s {
                    return Err(Error::domain("flip toward the current sign"));
                }
                *s = f;
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&s| f64::from(s)).collect(),
        }
    }
}

fn check_sign(s: i8) -> Result<()> {
    if s == 1 || s == -1 {
        Ok(())
    } else {
        Err(Error::domain(format!("sign entries must be +1 or -1, got {s}")))
    }
}
