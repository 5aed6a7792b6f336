//! Dense double-precision kernels: matrices, spatial maps, softmax, PCA,
//! separable Gaussian blur and thresholding.
//!
//! Every reduction runs in a fixed order, so results are bit-identical across
//! runs and machines with the same floating-point semantics.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite element at index {pos}")));
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    /// Standard-normal entries from a ChaCha8 stream keyed by `seed`.
    pub fn random_normal(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the sub-block `rows × cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        assert!(rows.end <= self.rows && cols.end <= self.cols, "block out of range");
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    pub fn row_range(&self, rows: Range<usize>) -> Matrix {
        self.block(rows, 0..self.cols)
    }

    pub fn col_range(&self, cols: Range<usize>) -> Matrix {
        self.block(0..self.rows, cols)
    }

    /// Overwrites the sub-block whose top-left corner is `(row, col)`.
    pub fn set_block(&mut self, row: usize, col: usize, src: &Matrix) -> Result<()> {
        if row + src.rows > self.rows || col + src.cols > self.cols {
            return Err(Error::shape(format!(
                "{}x{} block at ({row},{col}) exceeds {}x{}",
                src.rows, src.cols, self.rows, self.cols
            )));
        }
        for r in 0..src.rows {
            self.row_mut(row + r)[col..col + src.cols].copy_from_slice(src.row(r));
        }
        Ok(())
    }

    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::shape(format!(
                "vstack column mismatch: {} vs {}",
                top.cols, bottom.cols
            )));
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("hstack row mismatch"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign shape mismatch"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "axpy", |a, b| a + s * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with eight independent partial sums combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out_r += s_r * x` for four rows at once.
#[inline]
pub(crate) fn axpy4(out: [&mut [f64]; 4], s: [f64; 4], x: &[f64]) {
    let [o0, o1, o2, o3] = out;
    let n = x.len();
    let (o0, o1, o2, o3) = (&mut o0[..n], &mut o1[..n], &mut o2[..n], &mut o3[..n]);
    for j in 0..n {
        let xj = x[j];
        o0[j] += s[0] * xj;
        o1[j] += s[1] * xj;
        o2[j] += s[2] * xj;
        o3[j] += s[3] * xj;
    }
}

/// Four disjoint mutable rows of a row-major buffer, starting at `first`.
pub(crate) fn rows4(data: &mut [f64], cols: usize, first: usize) -> [&mut [f64]; 4] {
    let (r0, rest) = data[first * cols..(first + 4) * cols].split_at_mut(cols);
    let (r1, rest) = rest.split_at_mut(cols);
    let (r2, r3) = rest.split_at_mut(cols);
    [r0, r1, r2, r3]
}

/// Output columns per cache block in [`matmul`].
const MATMUL_COL_BLOCK: usize = 256;

/// Matrix product. For each output entry the sum runs over `k` in ascending
/// order, accumulated into the output row.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let blocked = a.rows / 4 * 4;
    for j0 in (0..b.cols).step_by(MATMUL_COL_BLOCK) {
        let cols = j0..(j0 + MATMUL_COL_BLOCK).min(b.cols);
        for i in (0..blocked).step_by(4) {
            let a_rows = [a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)];
            for k in 0..a.cols {
                let s = [a_rows[0][k], a_rows[1][k], a_rows[2][k], a_rows[3][k]];
                let out_rows = rows4(&mut out.data, b.cols, i).map(|r| &mut r[cols.clone()]);
                axpy4(out_rows, s, &b.row(k)[cols.clone()]);
            }
        }
        for i in blocked..a.rows {
            let a_row = a.row(i);
            let out_row = &mut out.data[i * b.cols + cols.start..i * b.cols + cols.end];
            for (k, &aik) in a_row.iter().enumerate() {
                for (o, &bkj) in out_row.iter_mut().zip(&b.row(k)[cols.clone()]) {
                    *o += aik * bkj;
                }
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, summed over the shared dimension in ascending order as in
/// [`matmul`].
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transb {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(a, &b.transpose())
}

/// Softmax of `scale * logits` along each row, with per-row max subtraction.
pub fn row_softmax(logits: &Matrix, scale: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Convergence tolerance on the Rayleigh quotient, relative to the total variance.
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Principal components of the rows of `data`.
///
/// The sample covariance (columns centred, `n - 1` normalisation) is
/// diagonalised by power iteration with deflation; each iterate is also
/// re-orthogonalised against the components already found, so the returned
/// rows are orthonormal to working precision. Variances come back sorted
/// non-increasing.
pub fn pca_top_k(data: &Matrix, k: usize) -> Result<(Matrix, Vec<f64>)> {
    let (n, dim) = data.shape();
    if n < 2 {
        return Err(Error::Domain(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k > n.min(dim) {
        return Err(Error::Domain(format!(
            "k = {k} exceeds min(rows, cols) = {}",
            n.min(dim)
        )));
    }
    if k == 0 {
        return Ok((Matrix::zeros(0, dim), Vec::new()));
    }

    let means: Vec<f64> = data.col_sums().iter().map(|s| s / n as f64).collect();
    let centred = Matrix::from_fn(n, dim, |r, c| data.get(r, c) - means[c]);
    let mut cov = matmul(&centred.transpose(), &centred)?.scale(1.0 / (n as f64 - 1.0));
    let total: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    let scale = if total > 0.0 { total } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15);
    let mut found: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);

    for component in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthonormalize(&mut v, &found);
        let mut lambda = rayleigh(&cov, &v);
        let mut converged = false;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = mat_vec(&cov, &v);
            orthonormalize_raw(&mut w, &found);
            let norm = dot(&w, &w).sqrt();
            if norm <= 1e-13 * scale {
                // Null space of the deflated covariance: any orthonormal completion works.
                lambda = 0.0;
                converged = true;
                break;
            }
            for x in w.iter_mut() {
                *x /= norm;
            }
            v = w;
            let next = rayleigh(&cov, &v);
            let delta = (next - lambda).abs();
            lambda = next;
            if delta <= PCA_TOLERANCE * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                component,
                iterations: PCA_MAX_ITERATIONS,
            });
        }
        let lambda = lambda.max(0.0);
        for i in 0..dim {
            for j in 0..dim {
                let updated = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, updated);
            }
        }
        found.push((v, lambda));
    }

    found.sort_by(|a, b| b.1.total_cmp(&a.1));
    let variances = found.iter().map(|(_, l)| *l).collect();
    let data = found.into_iter().flat_map(|(v, _)| v).collect();
    Ok((Matrix::new(k, dim, data)?, variances))
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

fn rayleigh(m: &Matrix, v: &[f64]) -> f64 {
    dot(v, &mat_vec(m, v))
}

fn orthonormalize_raw(v: &mut [f64], basis: &[(Vec<f64>, f64)]) {
    // Two Gram-Schmidt passes keep the residual overlap at rounding level.
    for _ in 0..2 {
        for (b, _) in basis {
            let p = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
    }
}

fn orthonormalize(v: &mut [f64], basis: &[(Vec<f64>, f64)]) {
    orthonormalize_raw(v, basis);
    let norm = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Row-major grid of reals: attention mass, probabilities, or binary masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SpatialMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite map value".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Rescales to `[0, 1]`. A constant map carries no spatial signal and maps to zeros.
    pub fn min_max_normalized(&self) -> SpatialMap {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let values = if range > 0.0 {
            self.values.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        SpatialMap {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Elementwise maximum; the union of two binary masks.
    pub fn union(&self, other: &SpatialMap) -> Result<SpatialMap> {
        if self.grid() != other.grid() {
            return Err(Error::shape("map union grid mismatch"));
        }
        Ok(SpatialMap {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &SpatialMap) -> f64 {
        assert_eq!(self.grid(), other.grid(), "map grid mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= total;
    }
    taps
}

/// Separable Gaussian blur with clamp-to-edge sampling. `sigma = 0` is the identity.
pub fn gaussian_blur(map: &SpatialMap, sigma: f64) -> SpatialMap {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return map.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = map.grid();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut horizontal = SpatialMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * map.get(y, clamp(x as isize + t as isize - radius, w));
            }
            horizontal.set(y, x, acc);
        }
    }
    let mut out = SpatialMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * horizontal.get(clamp(y as isize + t as isize - radius, h), x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

/// Binary mask of entries strictly greater than `theta`.
pub fn threshold(map: &SpatialMap, theta: f64) -> SpatialMap {
    SpatialMap {
        height: map.height,
        width: map.width,
        values: map
            .values
            .iter()
            .map(|&v| if v > theta { 1.0 } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let a = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[&[2.0], &[4.0]])
        );
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_transpose_identity() {
        let a = Matrix::random_normal(7, 5, 1);
        let b = Matrix::random_normal(5, 3, 2);
        let direct = matmul(&a, &b).unwrap();
        let via_t = matmul(&b.transpose(), &a.transpose()).unwrap().transpose();
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
        let tb = matmul_transb(&a, &b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&tb) < 1e-12);
    }

    fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn blocked_matmul_equals_naive_loop_bitwise() {
        // Row remainders and more than one column block.
        let a = Matrix::random_normal(9, 5, 5);
        let b = Matrix::random_normal(5, 300, 6);
        assert!(matmul(&a, &b).unwrap().bit_eq(&naive_product(&a, &b)));
        let c = Matrix::random_normal(300, 5, 7);
        assert!(matmul_transb(&a, &c).unwrap().bit_eq(&naive_product(&a, &c.transpose())));
    }

    proptest::proptest! {
        #[test]
        fn matmul_matches_naive(r in 1usize..12, k in 1usize..9, c in 1usize..20, seed in 0u64..1000) {
            let a = Matrix::random_normal(r, k, seed);
            let b = Matrix::random_normal(k, c, seed + 1);
            proptest::prop_assert!(matmul(&a, &b).unwrap().bit_eq(&naive_product(&a, &b)));
        }
    }

    #[test]
    fn matmul_repeatable_bits() {
        let a = Matrix::random_normal(13, 11, 3);
        let b = Matrix::random_normal(11, 9, 4);
        assert!(matmul(&a, &b).unwrap().bit_eq(&matmul(&a, &b).unwrap()));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = row_softmax(&Matrix::from_rows(&[&[0.0, 0.0]]), 1.0);
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = row_softmax(&Matrix::from_rows(&[&[2f64.ln(), 0.0]]), 1.0);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = row_softmax(&Matrix::random_normal(8, 8, 9).scale(5.0), 1.0);
        for total in s.row_sums() {
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits() {
        let m = Matrix::from_rows(&[&[700.0, -700.0, 699.0], &[-700.0, -700.0, -700.0]]);
        let s = row_softmax(&m, 1.0);
        assert!(s.is_finite());
        for total in s.row_sums() {
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_rank_one() {
        let dir = [0.6, -0.8, 0.0];
        let data = Matrix::from_fn(10, 3, |r, c| (r as f64 - 4.5) * dir[c] + 2.0);
        let (comps, vars) = pca_top_k(&data, 2).unwrap();
        let cos = dot(comps.row(0), &dir).abs();
        assert!(cos > 1.0 - 1e-8, "cos = {cos}");
        assert!(vars[1].abs() < 1e-10);
        assert!(dot(comps.row(0), comps.row(1)).abs() < 1e-8);
    }

    #[test]
    fn pca_k_zero_and_bad_k() {
        let data = Matrix::random_normal(5, 3, 1);
        let (c, v) = pca_top_k(&data, 0).unwrap();
        assert_eq!(c.rows(), 0);
        assert!(v.is_empty());
        assert!(pca_top_k(&data, 4).is_err());
        assert!(pca_top_k(&Matrix::zeros(1, 3), 1).is_err());
    }

    #[test]
    fn pca_constant_data_yields_orthonormal_basis() {
        let data = Matrix::filled(6, 4, 3.0);
        let (c, v) = pca_top_k(&data, 4).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let gram = matmul_transb(&c, &c).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(4)) < 1e-8);
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let m = SpatialMap::new(2, 3, vec![0.1, 0.9, 0.3, 0.0, 1.0, 0.5]).unwrap();
        assert_eq!(gaussian_blur(&m, 0.0), m);
    }

    #[test]
    fn blur_preserves_uniform() {
        let m = SpatialMap::filled(5, 7, 0.37);
        for sigma in [0.5, 1.0, 2.5] {
            assert!(gaussian_blur(&m, sigma).max_abs_diff(&m) < 1e-15);
        }
    }

    #[test]
    fn blur_impulse_mass() {
        let mut m = SpatialMap::zeros(9, 9);
        m.set(4, 4, 1.0);
        let b = gaussian_blur(&m, 1.0);
        assert!((b.sum() - 1.0).abs() < 1e-10);
        assert!(b.get(4, 4) > b.get(4, 5));
        assert!((b.get(3, 4) - b.get(5, 4)).abs() < 1e-15);
    }

    #[test]
    fn kernel_radius() {
        assert_eq!(gaussian_kernel(1.0).len(), 7);
        assert_eq!(gaussian_kernel(1.5).len(), 11);
        assert_eq!(gaussian_kernel(0.2).len(), 3);
    }

    #[test]
    fn threshold_is_strict() {
        let m = SpatialMap::filled(2, 2, 0.5);
        assert!(threshold(&m, 0.5).values().iter().all(|&v| v == 0.0));
        assert!(threshold(&m, -1.0).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn threshold_fixture() {
        let m = SpatialMap::new(2, 3, vec![0.1, 0.4, 0.41, 0.9, 0.39, 0.4000001]).unwrap();
        let expected = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(threshold(&m, 0.4).values(), expected.as_slice());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(SpatialMap::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn min_max_constant_is_zero() {
        let m = SpatialMap::filled(3, 3, 4.0);
        assert!(m.min_max_normalized().values().iter().all(|&v| v == 0.0));
        let m = SpatialMap::new(1, 3, vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(m.min_max_normalized().values(), &[0.0, 1.0, 0.5]);
    }
}
