//! Dense real matrices and the singular-value machinery behind every bound.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. Tall inputs are first
//! reduced with a Householder QR so that the Jacobi sweeps only ever touch a
//! square `n x n` factor.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{invalid, shape, Error, Result};

/// Row-major dense matrix of finite `f64` entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(shape(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (`n x 1`).
    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape(format!(
                "cannot stack {}x{} on {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape(format!(
                "cannot apply {}x{} matrix to a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok(self.row_iter().map(|row| dot(row, x)).collect())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(shape(format!(
                "cannot subtract {:?} from {:?}",
                rhs.shape(),
                self.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Thin singular value decomposition `A = U diag(s) V^T` with `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `k x n`, orthonormal rows.
    pub v_t: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let us = Matrix::from_fn(self.u.rows(), k, |r, c| {
            self.u[(r, c)] * self.singular_values[c]
        });
        us.matmul(&self.v_t).expect("svd factors chain")
    }

    pub fn max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

const MAX_SWEEPS: usize = 200;

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid(format!(
            "svd needs at least one row and column, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if let Some(pos) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("svd input at flat index {pos}")));
    }
    if a.rows() >= a.cols() {
        Ok(svd_tall(a))
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let t = svd_tall(&a.transpose());
        Ok(SvdResult {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
        })
    }
}

/// Thin SVD for `m >= n`.
fn svd_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    if m > n {
        let (q, r) = householder_qr(a);
        let inner = jacobi_square(&r);
        let u = q.matmul(&inner.u).expect("qr factors chain");
        return SvdResult {
            u,
            singular_values: inner.singular_values,
            v_t: inner.v_t,
        };
    }
    jacobi_square(a)
}

/// Householder QR of an `m x n` matrix with `m >= n`; returns thin `Q` (`m x n`) and `R` (`n x n`).
fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = norm2(x);
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm2(&v);
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vn);
        for col in cols.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let proj = 2.0 * dot(&v, seg);
            for (s, vi) in seg.iter_mut().zip(&v) {
                *s -= proj * vi;
            }
        }
        reflectors.push(v);
    }
    let r = Matrix::from_fn(n, n, |i, j| if i <= j { cols[j][i] } else { 0.0 });
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for col in q_cols.iter_mut() {
            let seg = &mut col[k..];
            let proj = 2.0 * dot(v, seg);
            for (s, vi) in seg.iter_mut().zip(v) {
                *s -= proj * vi;
            }
        }
    }
    let q = Matrix::from_fn(m, n, |i, j| q_cols[j][i]);
    (q, r)
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_square(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let mut work: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = work.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let sigma_max = order.first().map_or(0.0, |&i| sigma[i]);
    let negligible = sigma_max * f64::EPSILON * (m.max(n) as f64) * 4.0;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &idx) in order.iter().enumerate() {
        let s = sigma[idx];
        if s > negligible && s > 0.0 {
            u_cols.push(work[idx].iter().map(|e| e / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let sorted_sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let v_t = Matrix::from_fn(n, n, |i, j| v[order[i]][j]);
    SvdResult {
        u,
        singular_values: sorted_sigma,
        v_t,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Replace the listed columns with unit vectors orthogonal to all the others.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut accepted: Vec<usize> = (0..cols.len()).filter(|i| !slots.contains(i)).collect();
    let mut candidate = 0usize;
    for &slot in slots {
        loop {
            assert!(candidate < m, "ran out of basis vectors while completing U");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for &j in &accepted {
                    let proj = dot(&cols[j], &e);
                    for (ei, cj) in e.iter_mut().zip(&cols[j]) {
                        *ei -= proj * cj;
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / nrm).collect();
                accepted.push(slot);
                break;
            }
        }
    }
}

/// Spectral norm `sigma_max(a)`; zero for the zero matrix.
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    if a.is_zero() {
        return Ok(0.0);
    }
    Ok(svd(a)?.max())
}

/// Default rank tolerance: `eps * max(rows, cols) * sigma_max`.
pub fn default_rank_tol(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    f64::EPSILON * rows.max(cols) as f64 * sigma_max
}

/// Moore-Penrose pseudo-inverse. Singular values at or below `rank_tol`
/// (default [`default_rank_tol`]) are treated as zero.
pub fn pseudo_inverse(a: &Matrix, rank_tol: Option<f64>) -> Result<Matrix> {
    if let Some(tol) = rank_tol {
        if !(tol >= 0.0) {
            return Err(invalid(format!("rank tolerance must be >= 0, got {tol}")));
        }
    }
    if a.is_zero() {
        return Ok(Matrix::zeros(a.cols(), a.rows()));
    }
    let dec = svd(a)?;
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(a.rows(), a.cols(), dec.max()));
    let (m, n) = a.shape();
    let mut pinv = Matrix::zeros(n, m);
    for (k, &s) in dec.singular_values.iter().enumerate() {
        if s <= tol {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vik = dec.v_t[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..m {
                pinv[(i, j)] += vik * dec.u[(j, k)];
            }
        }
    }
    Ok(pinv)
}

/// Largest and smallest non-zero singular values, `None` for a numerically zero matrix.
pub fn singular_extremes(a: &Matrix, rank_tol: Option<f64>) -> Result<Option<(f64, f64)>> {
    if a.is_zero() {
        return Ok(None);
    }
    let dec = svd(a)?;
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(a.rows(), a.cols(), dec.max()));
    let nonzero: Vec<f64> = dec
        .singular_values
        .iter()
        .copied()
        .filter(|&s| s > tol)
        .collect();
    Ok(nonzero.first().map(|&max| (max, *nonzero.last().unwrap())))
}

/// Numerical rank under the default tolerance.
pub fn rank(a: &Matrix) -> Result<usize> {
    if a.is_zero() {
        return Ok(0);
    }
    let dec = svd(a)?;
    let tol = default_rank_tol(a.rows(), a.cols(), dec.max());
    Ok(dec.singular_values.iter().filter(|&&s| s > tol).count())
}
