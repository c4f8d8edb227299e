//! Dense row-major `f64` matrices and the handful of kernels the attention
//! code is built from.
//!
//! Every reduction runs in a fixed order, so repeated calls on the same
//! inputs are bit-identical regardless of how many threads rayon uses.
//! Parallelism is only ever applied across output rows.

use rayon::prelude::*;

use crate::error::{AttnError, Result};

/// Output rows handled by one parallel task.
const ROW_BLOCK: usize = 32;
/// Inner-dimension slice of `matmul` kept hot in cache per sweep.
const INNER_BLOCK: usize = 256;
/// Register tile of `matmul`: output rows x output columns.
const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 4;
/// Independent partial sums per dot product.
const LANES: usize = 4;

/// Dense `rows x cols` matrix of activations in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AttnError::Shape {
                op: "TokenMatrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
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
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    /// Builds a matrix from nested rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AttnError::Shape {
                    op: "TokenMatrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copy of `count` consecutive rows starting at `start`.
    pub fn row_block(&self, start: usize, count: usize) -> TokenMatrix {
        assert!(start + count <= self.rows, "row block out of range");
        Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> TokenMatrix {
        let mut out = TokenMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Stacks matrices vertically; all parts must share a column count.
    pub fn vstack(parts: &[&TokenMatrix]) -> Result<TokenMatrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(AttnError::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            rows += p.rows;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TokenMatrix {
        TokenMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> TokenMatrix {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &TokenMatrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TokenMatrix> {
        if self.shape() != other.shape() {
            return Err(AttnError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(TokenMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &TokenMatrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(AttnError::Shape {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Per-column sums, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    /// Per-column means over all rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = self.column_sums();
        let n = self.rows as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }
}

/// Dot product with a fixed four-lane split and a fixed combine tree.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    combine(&acc) + tail
}

#[inline(always)]
fn combine(acc: &[f64; LANES]) -> f64 {
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Four dot products of `rows[r]` against `b`. Each result is bit-identical
/// to `dot(rows[r], b)`; sharing the loop only amortizes loads of `b`.
#[inline]
fn dot4(rows: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; LANES]; 4];
    let body = b.len() - b.len() % LANES;
    let chunks = b[..body]
        .chunks_exact(LANES)
        .zip(rows[0][..body].chunks_exact(LANES))
        .zip(rows[1][..body].chunks_exact(LANES))
        .zip(rows[2][..body].chunks_exact(LANES))
        .zip(rows[3][..body].chunks_exact(LANES));
    for ((((y, x0), x1), x2), x3) in chunks {
        for l in 0..LANES {
            acc[0][l] += x0[l] * y[l];
            acc[1][l] += x1[l] * y[l];
            acc[2][l] += x2[l] * y[l];
            acc[3][l] += x3[l] * y[l];
        }
    }
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut tail = 0.0;
        for (x, y) in rows[r][body..].iter().zip(&b[body..]) {
            tail += x * y;
        }
        out[r] = combine(&acc[r]) + tail;
    }
    out
}

/// Standard product `a * b`.
///
/// Each output entry accumulates `a[i][k] * b[k][j]` sequentially in
/// increasing `k`, so the result does not depend on tiling or threads.
pub fn matmul(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix> {
    if a.cols != b.rows {
        return Err(AttnError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = TokenMatrix::zeros(n, m);
    if n == 0 || m == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(ROW_BLOCK * m)
        .enumerate()
        .for_each(|(blk, chunk)| matmul_rows(a, b, blk * ROW_BLOCK, chunk));
    Ok(out)
}

/// Fills `out` (consecutive output rows starting at `row0`) of `a * b`.
fn matmul_rows(a: &TokenMatrix, b: &TokenMatrix, row0: usize, out: &mut [f64]) {
    let (m, inner) = (b.cols, a.cols);
    let nrows = out.len() / m;
    let mut k0 = 0;
    while k0 < inner {
        let k1 = (k0 + INNER_BLOCK).min(inner);
        let mut c0 = 0;
        while c0 < m {
            let nc = TILE_COLS.min(m - c0);
            let mut r0 = 0;
            while r0 < nrows {
                let nr = TILE_ROWS.min(nrows - r0);
                if nr == TILE_ROWS && nc == TILE_COLS {
                    axpy_tile(a, b, row0 + r0, c0, k0, k1, &mut out[r0 * m..]);
                } else {
                    for r in 0..nr {
                        let arow = a.row(row0 + r0 + r);
                        let orow = &mut out[(r0 + r) * m + c0..(r0 + r) * m + c0 + nc];
                        for (k, &coef) in arow.iter().enumerate().take(k1).skip(k0) {
                            let brow = &b.data[k * m + c0..k * m + c0 + nc];
                            for (o, &x) in orow.iter_mut().zip(brow) {
                                *o += coef * x;
                            }
                        }
                    }
                }
                r0 += nr;
            }
            c0 += nc;
        }
        k0 = k1;
    }
}

/// Full `TILE_ROWS x TILE_COLS` register tile over `k0..k1`. `out` starts
/// at the tile's first output row.
#[inline]
fn axpy_tile(
    a: &TokenMatrix,
    b: &TokenMatrix,
    arow0: usize,
    c0: usize,
    k0: usize,
    k1: usize,
    out: &mut [f64],
) {
    let (m, inner) = (b.cols, a.cols);
    let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
    for (r, tile_row) in acc.iter_mut().enumerate() {
        tile_row.copy_from_slice(&out[r * m + c0..r * m + c0 + TILE_COLS]);
    }
    let arows: [&[f64]; TILE_ROWS] =
        std::array::from_fn(|r| &a.data[(arow0 + r) * inner + k0..(arow0 + r) * inner + k1]);
    for (t, k) in (k0..k1).enumerate() {
        let bk: &[f64; TILE_COLS] = b.data[k * m + c0..k * m + c0 + TILE_COLS]
            .try_into()
            .expect("tile width");
        for (tile_row, arow) in acc.iter_mut().zip(&arows) {
            let coef = arow[t];
            for c in 0..TILE_COLS {
                tile_row[c] += coef * bk[c];
            }
        }
    }
    for (r, tile_row) in acc.iter().enumerate() {
        out[r * m + c0..r * m + c0 + TILE_COLS].copy_from_slice(tile_row);
    }
}

/// Product with the transpose of the right operand, `a * b^T`.
///
/// Both operands are read row-wise; every entry is `dot(a_i, b_j)`.
pub fn matmul_transposed(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix> {
    if a.cols != b.cols {
        return Err(AttnError::Shape {
            op: "matmul_transposed",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = TokenMatrix::zeros(n, m);
    if n == 0 || m == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(ROW_BLOCK * m)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let row0 = blk * ROW_BLOCK;
            let nrows = chunk.len() / m;
            let full = nrows - nrows % 4;
            // Stream the right operand once per chunk; the chunk's rows of
            // `a` stay cached.
            for j in 0..m {
                let brow = b.row(j);
                let mut r = 0;
                while r < full {
                    let rows = [
                        a.row(row0 + r),
                        a.row(row0 + r + 1),
                        a.row(row0 + r + 2),
                        a.row(row0 + r + 3),
                    ];
                    let d = dot4(rows, brow);
                    for (t, v) in d.into_iter().enumerate() {
                        chunk[(r + t) * m + j] = v;
                    }
                    r += 4;
                }
                for rr in full..nrows {
                    chunk[rr * m + j] = dot(a.row(row0 + rr), brow);
                }
            }
        });
    Ok(out)
}

/// Numerically stable softmax of a single row, in place. Returns `false`
/// (leaving the row unspecified) if the row has a NaN, a `+inf`, or no
/// finite maximum.
pub(crate) fn softmax_row(row: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for &x in row.iter() {
        if x.is_nan() || x == f64::INFINITY {
            return false;
        }
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return false;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    true
}

/// Row-wise softmax: `exp(x_i - max x) / sum_j exp(x_j - max x)`.
pub fn row_softmax(m: &TokenMatrix) -> Result<TokenMatrix> {
    let mut out = m.clone();
    row_softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn row_softmax_in_place(m: &mut TokenMatrix) -> Result<()> {
    if m.cols == 0 {
        return Err(AttnError::Shape {
            op: "row_softmax",
            left: m.shape(),
            right: (m.rows, 1),
        });
    }
    let cols = m.cols;
    let bad = m
        .data
        .par_chunks_mut(cols)
        .enumerate()
        .filter_map(|(i, row)| (!softmax_row(row)).then_some(i))
        .min();
    match bad {
        Some(row) => Err(AttnError::NonFinite {
            op: "row_softmax",
            row,
        }),
        None => Ok(()),
    }
}

/// `||approx - exact||_F / ||exact||_F`, or 0 when both are zero.
pub fn relative_frobenius_error(approx: &TokenMatrix, exact: &TokenMatrix) -> Result<f64> {
    if approx.shape() != exact.shape() {
        return Err(AttnError::Shape {
            op: "relative_frobenius_error",
            left: approx.shape(),
            right: exact.shape(),
        });
    }
    let mut diff = 0.0;
    let mut base = 0.0;
    for (a, e) in approx.data.iter().zip(&exact.data) {
        diff += (a - e) * (a - e);
        base += e * e;
    }
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok((diff / base).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> TokenMatrix {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        TokenMatrix::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn naive_matmul(a: &TokenMatrix, b: &TokenMatrix) -> TokenMatrix {
        TokenMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn identity_times_matrix() {
        let m = TokenMatrix::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]).unwrap();
        assert_eq!(matmul(&TokenMatrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = TokenMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = TokenMatrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn empty_product() {
        let a = TokenMatrix::zeros(0, 3);
        let b = lcg_matrix(3, 5, 1);
        assert_eq!(matmul(&a, &b).unwrap().shape(), (0, 5));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&TokenMatrix::zeros(2, 3), &TokenMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            AttnError::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn blocked_kernels_match_naive() {
        // Sizes straddle ROW_BLOCK, INNER_BLOCK and the lane width.
        let a = lcg_matrix(19, 133, 3);
        let b = lcg_matrix(133, 21, 4);
        let c = matmul(&a, &b).unwrap();
        assert!(c.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);

        let bt = b.transpose();
        let c2 = matmul_transposed(&a, &bt).unwrap();
        assert!(c2.max_abs_diff(&c).unwrap() < 1e-12);
    }

    #[test]
    fn dot4_agrees_bitwise_with_dot() {
        let a = lcg_matrix(4, 37, 9);
        let b = lcg_matrix(1, 37, 10);
        let d = dot4([a.row(0), a.row(1), a.row(2), a.row(3)], b.row(0));
        for (r, v) in d.iter().enumerate() {
            assert_eq!(v.to_bits(), dot(a.row(r), b.row(0)).to_bits());
        }
    }

    #[test]
    fn matmul_is_bit_deterministic() {
        let a = lcg_matrix(37, 300, 5);
        let b = lcg_matrix(300, 17, 6);
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        let bt = b.transpose();
        let x = matmul_transposed(&a, &bt).unwrap();
        let y = matmul_transposed(&a, &bt).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_examples() {
        let m = TokenMatrix::from_rows(&[
            vec![2.0, 2.0, 2.0],
            vec![0.0, 3f64.ln(), f64::NEG_INFINITY],
            vec![1000.0, 0.0, 0.0],
        ])
        .unwrap();
        let s = row_softmax(&m).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);
        assert_eq!(s.get(1, 2), 0.0);
        assert!((s.get(2, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(2, 1) >= 0.0 && s.get(2, 1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan_rows() {
        let m = TokenMatrix::from_rows(&[vec![0.0, 1.0], vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(
            row_softmax(&m),
            Err(AttnError::NonFinite { row: 1, .. })
        ));
        assert!(row_softmax(&TokenMatrix::zeros(2, 0)).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let m = lcg_matrix(3, 4, 7);
        assert_eq!(relative_frobenius_error(&m, &m).unwrap(), 0.0);
        assert!((relative_frobenius_error(&m.scale(2.0), &m).unwrap() - 1.0).abs() < 1e-15);
        let z = TokenMatrix::zeros(2, 2);
        assert_eq!(relative_frobenius_error(&z, &z).unwrap(), 0.0);
        assert!(relative_frobenius_error(&z, &TokenMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn relative_error_matches_double_loop() {
        let a = lcg_matrix(3, 3, 11);
        let b = lcg_matrix(3, 3, 12);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                num += (a.get(i, j) - b.get(i, j)).powi(2);
                den += b.get(i, j).powi(2);
            }
        }
        let expected = (num / den).sqrt();
        assert!((relative_frobenius_error(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6,
            cols in 1usize..40,
            seed in any::<u64>(),
            scale in 0.1f64..200.0,
        ) {
            let m = lcg_matrix(rows, cols, seed).scale(scale);
            let s = row_softmax(&m).unwrap();
            for row in s.iter_rows() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            cols in 1usize..40,
            seed in any::<u64>(),
            shift in -500.0f64..500.0,
        ) {
            let m = lcg_matrix(3, cols, seed).scale(10.0);
            let shifted = m.map(|x| x + shift);
            let d = row_softmax(&m).unwrap().max_abs_diff(&row_softmax(&shifted).unwrap()).unwrap();
            prop_assert!(d < 1e-12);
        }
    }
}
