//! Stable softmax/log-sum-exp, a dense row-major matrix, a portable seeded
//! generator and a few summary statistics.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> RowMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "RowMatrix::new",
                format!("{} values ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        let m = Self { rows, cols, data };
        m.ensure_finite("RowMatrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "RowMatrix::from_rows",
                    cols,
                    format!("row {i} of {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics; a zero-width matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &RowMatrix<T>) -> Result<RowMatrix<T>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                other.rows,
            ));
        }
        let mut out = RowMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = out.row_mut(r);
            for (k, &ak) in a.iter().enumerate() {
                if ak == T::zero() {
                    continue;
                }
                for (oc, &b) in o.iter_mut().zip(other.row(k)) {
                    *oc += ak * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &RowMatrix<T>) -> Result<RowMatrix<T>> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transposed",
                format!("shared width {}", self.cols),
                other.cols,
            ));
        }
        Ok(RowMatrix::from_fn(self.rows, other.rows, |r, c| {
            dot(self.row(r), other.row(c))
        }))
    }

    pub fn transpose(&self) -> RowMatrix<T> {
        RowMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_range(&self, start: usize, end: usize) -> Result<RowMatrix<T>> {
        if start > end || end > self.cols {
            return Err(Error::shape(
                "column_range",
                format!("range within 0..{}", self.cols),
                format!("{start}..{end}"),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..end]);
        }
        Ok(RowMatrix {
            rows: self.rows,
            cols: end - start,
            data,
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Result<RowMatrix<T>> {
        if start > end || end > self.rows {
            return Err(Error::shape(
                "row_range",
                format!("range within 0..{}", self.rows),
                format!("{start}..{end}"),
            ));
        }
        Ok(RowMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Stacks `top` above `bottom`.
    pub fn vconcat(top: &RowMatrix<T>, bottom: &RowMatrix<T>) -> Result<RowMatrix<T>> {
        if top.cols != bottom.cols {
            return Err(Error::shape("vconcat", top.cols, bottom.cols));
        }
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Ok(RowMatrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Places `left` and `right` side by side.
    pub fn hconcat(left: &RowMatrix<T>, right: &RowMatrix<T>) -> Result<RowMatrix<T>> {
        if left.rows != right.rows {
            return Err(Error::shape("hconcat", left.rows, right.rows));
        }
        let mut data = Vec::with_capacity(left.data.len() + right.data.len());
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(RowMatrix {
            rows: left.rows,
            cols: left.cols + right.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> RowMatrix<T> {
        RowMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RowMatrix<U> {
        RowMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| cast(v)).collect(),
        }
    }

    /// Mean of each column.
    pub fn column_means(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = T::of_usize(self.rows.max(1));
        acc.into_iter().map(|a| a / n).collect()
    }

    pub fn max_abs_diff(&self, other: &RowMatrix<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `log Σ exp(v)` with the maximum factored out.
pub fn logsumexp<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `softmax((logits + col_bias) · inv_temp_scale)`.
///
/// Callers fold the temperature and `√d` into `inv_temp_scale = 1/(τ√d)`.
/// The bias is additive (a column mask), never multiplicative.
pub fn softmax_row<T: Scalar>(
    logits: &[T],
    inv_temp_scale: T,
    col_bias: Option<&[T]>,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_row_into(logits, inv_temp_scale, col_bias, &mut out)?;
    Ok(out)
}

/// In-place variant of [`softmax_row`]; `out` must have the logits' length.
pub fn softmax_row_into<T: Scalar>(
    logits: &[T],
    inv_temp_scale: T,
    col_bias: Option<&[T]>,
    out: &mut [T],
) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(inv_temp_scale > T::zero()) || !inv_temp_scale.is_finite() {
        return Err(Error::invalid(
            "inv_temp_scale",
            format!("must be finite and > 0, got {inv_temp_scale}"),
        ));
    }
    if out.len() != logits.len() {
        return Err(Error::shape("softmax_row output", logits.len(), out.len()));
    }
    match col_bias {
        Some(bias) => {
            if bias.len() != logits.len() {
                return Err(Error::shape(
                    "softmax_row col_bias",
                    logits.len(),
                    bias.len(),
                ));
            }
            for ((o, &l), &b) in out.iter_mut().zip(logits).zip(bias) {
                *o = (l + b) * inv_temp_scale;
            }
        }
        None => {
            for (o, &l) in out.iter_mut().zip(logits) {
                *o = l * inv_temp_scale;
            }
        }
    }
    let mut max = T::neg_infinity();
    for &z in out.iter() {
        if !z.is_finite() {
            return Err(Error::NonFinite("softmax_row logits".into()));
        }
        if z > max {
            max = z;
        }
    }
    let mut sum = T::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** seeded through SplitMix64, with Box–Muller normals.
///
/// The recurrence is written out in the README so seeds reproduce in other
/// languages. State is owned by the caller; there is no global generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { s, spare: None }
    }

    /// Independent stream `index` under `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut sm = index ^ 0xD1B5_4A32_D192_ED03;
        let key = splitmix64(&mut sm);
        let mut sm2 = seed;
        Self::new(splitmix64(&mut sm2) ^ key)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * sin);
        r * cos
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize, sigma: f64) -> Vec<T> {
        (0..n).map(|_| T::of(sigma * self.normal())).collect()
    }
}

/// `n` i.i.d. draws from `N(0, sigma²)`, reproducible from `seed`.
pub fn gaussian_vector<T: Scalar>(n: usize, sigma: f64, seed: u64) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(
            "sigma",
            format!("must be finite and >= 0, got {sigma}"),
        ));
    }
    Ok(Rng::new(seed).normal_vec(n, sigma))
}

pub fn mean<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values.iter().copied().sum::<T>() / T::of_usize(values.len()))
}

/// Population variance.
pub fn variance<T: Scalar>(values: &[T]) -> Result<T> {
    let m = mean(values)?;
    let ss: T = values.iter().map(|&v| (v - m) * (v - m)).sum();
    Ok(ss / T::of_usize(values.len()))
}

/// Least-squares slope of `y` against `x`.
pub fn regression_slope<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape("regression_slope", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("x", "need at least two points"));
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let sxy: T = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let sxx: T = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
    if sxx == T::zero() {
        return Err(Error::invalid("x", "all points share one abscissa"));
    }
    Ok(sxy / sxx)
}
