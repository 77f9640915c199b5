//! Row-major f64 matrices and the handful of kernels the runtime needs.
//!
//! Every kernel processes output rows independently with a fixed inner-loop
//! order. Batched and token-by-token execution therefore produce bit-identical
//! rows, which is what lets the speculative decoder match plain greedy
//! decoding with zero tolerance.

/// Counts multiply-add work done inside transformer layers, with one
/// multiply-add costing 2 FLOPs. Only attention and FFN matmuls are counted;
/// embedding lookups, layer norms, and the prediction head are not part of
/// the per-layer cost model.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount(pub u64);

impl FlopCount {
    pub fn add_matmul(&mut self, m: usize, n: usize, k: usize) {
        self.0 += 2 * (m as u64) * (n as u64) * (k as u64);
    }

    pub fn total(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copy of the rows selected by `indices`, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Mat {
        let mut out = Mat::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Copy of a contiguous column block, used to slice per-head views.
    pub fn col_block(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols);
        let mut out = Mat::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    pub fn append_rows(&mut self, other: &Mat) {
        if self.rows == 0 && self.cols == 0 {
            *self = other.clone();
            return;
        }
        assert_eq!(self.cols, other.cols, "column mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn truncate_rows(&mut self, keep: usize) {
        assert!(keep <= self.rows);
        self.rows = keep;
        self.data.truncate(keep * self.cols);
    }

    /// `self * other`, plain triple loop with a fixed accumulation order.
    pub fn matmul(&self, other: &Mat, flops: &mut FlopCount) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = other.row(p);
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        flops.add_matmul(m, n, k);
        out
    }

    /// `self * other^T`; other is n x k. Row-by-row dot products.
    pub fn matmul_nt(&self, other: &Mat, flops: &mut FlopCount) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..n {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                *out.at_mut(i, j) = acc;
            }
        }
        flops.add_matmul(m, n, k);
        out
    }

    /// `self^T * other`; self is k x m. Used only by the training backward pass.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for i in 0..m {
                let a = a_row[i];
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// In-place softmax of one row; entries equal to `f64::NEG_INFINITY` come out
/// as exact zeros.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm of one row with the given scale/bias, returning (mean, rstd)
/// for the training backward pass.
pub fn layer_norm_row(x: &[f64], scale: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * scale[i] + bias[i];
    }
    (mean, rstd)
}

const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_COEF * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let c = sqrt_2_over_pi();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let mut f = FlopCount::default();
        let c = a.matmul(&b, &mut f);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
        assert_eq!(f.total(), 2 * 2 * 2 * 2);
    }

    #[test]
    fn matmul_nt_matches_matmul() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]);
        let b = Mat::from_rows(vec![vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]]);
        let bt = Mat::from_rows(vec![vec![1.0, 2.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mut f = FlopCount::default();
        assert_eq!(a.matmul_nt(&b, &mut f).data(), a.matmul(&bt, &mut f).data());
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let mut row = vec![0.3, f64::NEG_INFINITY, 0.3];
        softmax_row(&mut row);
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
