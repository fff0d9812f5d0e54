//! Dense numerics and the exact causal-attention oracle.
//!
//! Everything in this module runs in 64-bit floating point and sums in a fixed
//! left-to-right order, so results are reproducible bit for bit. The sparse
//! engines elsewhere in the crate are all checked against
//! [`masked_dense_attention`].

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        sum / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Copy with every entry rounded to the nearest `f32`.
    pub fn round_to_f32(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
        }
    }

    /// Binary layout: `rows: u64 LE`, `cols: u64 LE`, then row-major `f64 LE`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`Matrix::write_binary`]. Trailing bytes are rejected.
    pub fn read_binary<R: Read>(mut r: R) -> std::result::Result<Matrix, String> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(|e| format!("header: {e}"))?;
        let rows = u64::from_le_bytes(word);
        r.read_exact(&mut word).map_err(|e| format!("header: {e}"))?;
        let cols = u64::from_le_bytes(word);
        let n = rows
            .checked_mul(cols)
            .filter(|n| *n <= (1 << 32))
            .ok_or_else(|| format!("implausible dimensions {rows}x{cols}"))? as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        if bytes.len() != n * 8 {
            return Err(format!(
                "expected {} payload bytes for {rows}x{cols}, found {}",
                n * 8,
                bytes.len()
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(rows as usize, cols as usize, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Matrix> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Matrix::read_binary(BufReader::new(file)).map_err(|m| Error::parse(path, m))
    }

    /// Comma-separated rows, shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            for (j, x) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{x}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (t, &x) in arow.iter().enumerate() {
            for (o, &y) in orow.iter_mut().zip(b.row(t)) {
                *o += x * y;
            }
        }
    }
    Ok(out)
}

/// `1 / sqrt(d_h)`.
pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.rows() == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "q has {} columns but k has {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!("k has {} rows but v has {}", k.rows(), v.rows())));
    }
    if q.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "self-attention needs equal query and key lengths, got {} and {}",
            q.rows(),
            k.rows()
        )));
    }
    Ok(())
}

/// Output of an attention computation together with the rows that saw no
/// admitted key. Such rows are zero-filled instead of NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAttention {
    pub output: Matrix,
    pub empty_rows: Vec<usize>,
}

/// Exact causal attention: row `i` is the softmax over keys `j <= i`.
pub fn dense_causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Result<Matrix> {
    masked_dense_attention(q, k, v, scale, |_, _| true).map(|m| m.output)
}

/// Dense attention with every entry outside `mask` set to `-inf` before the
/// softmax. The causal constraint `j <= i` is always applied on top of `mask`.
pub fn masked_dense_attention<F>(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, mask: F) -> Result<MaskedAttention>
where
    F: Fn(usize, usize) -> bool,
{
    check_qkv(q, k, v)?;
    let s = q.rows();
    let dv = v.cols();
    let mut output = Matrix::zeros(s, dv);
    let mut empty_rows = Vec::new();
    let mut scores = Vec::with_capacity(s);
    for i in 0..s {
        scores.clear();
        let qi = q.row(i);
        for j in 0..=i {
            if mask(i, j) {
                scores.push((j, dot(qi, k.row(j)) * scale));
            }
        }
        if scores.is_empty() {
            empty_rows.push(i);
            continue;
        }
        let max = scores.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let orow = output.row_mut(i);
        for &(j, sc) in &scores {
            let w = (sc - max).exp();
            norm += w;
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
        for o in orow.iter_mut() {
            *o /= norm;
        }
    }
    Ok(MaskedAttention { output, empty_rows })
}

/// Full causal softmax weight matrix (`S x S`, zero above the diagonal).
pub fn attention_weights(q: &Matrix, k: &Matrix, scale: f64) -> Result<Matrix> {
    if q.rows() == 0 || q.rows() != k.rows() || q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "attention weights need matching q/k, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let s = q.rows();
    let mut w = Matrix::zeros(s, s);
    for i in 0..s {
        causal_softmax_row(q.row(i), k, i, scale, w.row_mut(i));
    }
    Ok(w)
}

/// Writes softmax over keys `0..=limit` of `q_row . k_j * scale` into `out`;
/// entries past `limit` are zeroed.
pub(crate) fn causal_softmax_row(q_row: &[f64], k: &Matrix, limit: usize, scale: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, o) in out.iter_mut().enumerate() {
        if j <= limit {
            *o = dot(q_row, k.row(j)) * scale;
            max = max.max(*o);
        } else {
            *o = 0.0;
        }
    }
    let mut norm = 0.0;
    for o in out.iter_mut().take(limit + 1) {
        *o = (*o - max).exp();
        norm += *o;
    }
    for o in out.iter_mut().take(limit + 1) {
        *o /= norm;
    }
}

/// Running online-softmax state for a block of query rows.
///
/// `out` holds the unnormalised accumulator `sum_j exp(s_j - row_max) v_j`,
/// `row_norm` the matching `sum_j exp(s_j - row_max)`. A row that has seen no
/// key has `row_max = -inf`, `row_norm = 0` and an all-zero `out` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPartial {
    out: Matrix,
    row_max: Vec<f64>,
    row_norm: Vec<f64>,
}

impl SoftmaxPartial {
    pub fn empty(rows: usize, dim: usize) -> Self {
        SoftmaxPartial {
            out: Matrix::zeros(rows, dim),
            row_max: vec![f64::NEG_INFINITY; rows],
            row_norm: vec![0.0; rows],
        }
    }

    pub fn from_parts(out: Matrix, row_max: Vec<f64>, row_norm: Vec<f64>) -> Result<Self> {
        if row_max.len() != out.rows() || row_norm.len() != out.rows() {
            return Err(Error::Shape("partial state lengths disagree".into()));
        }
        for (i, (&m, &l)) in row_max.iter().zip(&row_norm).enumerate() {
            if l.is_nan() || l < 0.0 || (l == 0.0) != (m == f64::NEG_INFINITY) {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: inconsistent max {m} and normaliser {l}"
                )));
            }
            if l == 0.0 && out.row(i).iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} saw no key but has a nonzero accumulator"
                )));
            }
        }
        Ok(SoftmaxPartial { out, row_max, row_norm })
    }

    /// Single-pass partial for `rows` of `q` over every key `j <= row`
    /// admitted by `admit(row, j)`.
    pub fn compute<F>(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, rows: &[usize], admit: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> bool,
    {
        check_qkv(q, k, v)?;
        let mut p = SoftmaxPartial::empty(rows.len(), v.cols());
        let mut scores = Vec::new();
        for (r, &i) in rows.iter().enumerate() {
            if i >= q.rows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: q.rows(),
                });
            }
            scores.clear();
            for j in 0..=i {
                if admit(i, j) {
                    scores.push((j, dot(q.row(i), k.row(j)) * scale));
                }
            }
            p.push_scores(r, &scores, v);
        }
        Ok(p)
    }

    pub fn rows(&self) -> usize {
        self.out.rows()
    }

    pub fn dim(&self) -> usize {
        self.out.cols()
    }

    pub fn out(&self) -> &Matrix {
        &self.out
    }

    pub fn row_max(&self) -> &[f64] {
        &self.row_max
    }

    pub fn row_norm(&self) -> &[f64] {
        &self.row_norm
    }

    /// Online update of one row with a batch of `(key_row, score)` pairs.
    pub(crate) fn push_scores(&mut self, row: usize, scores: &[(usize, f64)], v: &Matrix) {
        if scores.is_empty() {
            return;
        }
        let tile_max = scores.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let old_max = self.row_max[row];
        let new_max = old_max.max(tile_max);
        let alpha = if old_max == f64::NEG_INFINITY {
            0.0
        } else {
            (old_max - new_max).exp()
        };
        let orow = self.out.row_mut(row);
        if alpha != 1.0 {
            for o in orow.iter_mut() {
                *o *= alpha;
            }
        }
        let mut tile_norm = 0.0;
        for &(j, s) in scores {
            let p = (s - new_max).exp();
            tile_norm += p;
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += p * x;
            }
        }
        self.row_norm[row] = alpha * self.row_norm[row] + tile_norm;
        self.row_max[row] = new_max;
    }

    /// Merges row `src_row` of `other` into row `row` of `self`.
    pub(crate) fn absorb_row(&mut self, row: usize, other: &SoftmaxPartial, src_row: usize) {
        let m2 = other.row_max[src_row];
        if m2 == f64::NEG_INFINITY {
            return;
        }
        let m1 = self.row_max[row];
        if m1 == f64::NEG_INFINITY {
            self.row_max[row] = m2;
            self.row_norm[row] = other.row_norm[src_row];
            self.out.row_mut(row).copy_from_slice(other.out.row(src_row));
            return;
        }
        let m = m1.max(m2);
        let a1 = (m1 - m).exp();
        let a2 = (m2 - m).exp();
        self.row_norm[row] = a1 * self.row_norm[row] + a2 * other.row_norm[src_row];
        self.row_max[row] = m;
        let src = other.out.row(src_row);
        for (o, &x) in self.out.row_mut(row).iter_mut().zip(src) {
            *o = a1 * *o + a2 * x;
        }
    }

    /// Combines two partials computed over disjoint key sets.
    pub fn merge(&self, other: &SoftmaxPartial) -> Result<SoftmaxPartial> {
        if self.rows() != other.rows() || self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot merge partials of shape {}x{} and {}x{}",
                self.rows(),
                self.dim(),
                other.rows(),
                other.dim()
            )));
        }
        let mut merged = self.clone();
        for r in 0..self.rows() {
            merged.absorb_row(r, other, r);
        }
        Ok(merged)
    }

    /// Normalises every row; rows that saw no key come back as zeros and are
    /// listed in `empty_rows`.
    pub fn finalize(&self) -> MaskedAttention {
        let mut output = self.out.clone();
        let mut empty_rows = Vec::new();
        for r in 0..self.rows() {
            let l = self.row_norm[r];
            if l == 0.0 {
                empty_rows.push(r);
                continue;
            }
            for o in output.row_mut(r) {
                *o /= l;
            }
        }
        MaskedAttention { output, empty_rows }
    }
}

pub fn merge_partials(p1: &SoftmaxPartial, p2: &SoftmaxPartial) -> Result<SoftmaxPartial> {
    p1.merge(p2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, cols: usize, start: f64, step: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| start + step * ((i * cols + j) as f64).sin())
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = seq(3, 3, 0.5, 1.3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let b = seq(4, 3, 0.1, 2.0);
        assert_eq!(matmul(&Matrix::zeros(2, 4), &b).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_hand_worked() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn single_token_returns_value_row() {
        let q = Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[vec![7.0, -3.0, 1.5]]).unwrap();
        let out = dense_causal_attention(&q, &k, &v, 0.7).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn zero_queries_average_visible_values() {
        let q = Matrix::zeros(3, 2);
        let k = seq(3, 2, 0.0, 1.0);
        let v = seq(3, 2, 1.0, 3.0);
        let out = dense_causal_attention(&q, &k, &v, 1.0).unwrap();
        for c in 0..2 {
            let mean = (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0;
            assert!((out.get(2, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_is_shape_error() {
        let e = Matrix::zeros(0, 4);
        assert!(matches!(dense_causal_attention(&e, &e, &e, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn diagonal_mask_returns_values() {
        let q = seq(5, 3, 0.2, 1.0);
        let k = seq(5, 3, -0.4, 0.8);
        let v = seq(5, 4, 1.0, 2.0);
        let out = masked_dense_attention(&q, &k, &v, 0.5, |i, j| i == j).unwrap();
        assert_eq!(out.output, v);
        assert!(out.empty_rows.is_empty());
    }

    #[test]
    fn rows_without_keys_are_flagged_zero() {
        let q = seq(4, 2, 0.2, 1.0);
        let v = seq(4, 2, 1.0, 2.0);
        let out = masked_dense_attention(&q, &q, &v, 1.0, |i, j| i >= 2 && j == 0).unwrap();
        assert_eq!(out.empty_rows, vec![0, 1]);
        assert!(out.output.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(out.output.row(3), v.row(0));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let q = seq(4, 3, 0.1, 1.0);
        let v = seq(4, 2, 0.5, 1.5);
        let p = SoftmaxPartial::compute(&q, &q, &v, 0.5, &[0, 1, 2, 3], |_, _| true).unwrap();
        let e = SoftmaxPartial::empty(4, 2);
        assert_eq!(p.merge(&e).unwrap(), p);
        assert_eq!(e.merge(&p).unwrap(), p);
    }

    #[test]
    fn merge_shape_mismatch() {
        let a = SoftmaxPartial::empty(2, 3);
        let b = SoftmaxPartial::empty(3, 3);
        assert!(matches!(merge_partials(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_parts_checks_invariants() {
        let out = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(SoftmaxPartial::from_parts(out.clone(), vec![f64::NEG_INFINITY], vec![0.0]).is_err());
        assert!(SoftmaxPartial::from_parts(out, vec![0.0], vec![1.0]).is_ok());
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let m = seq(2, 3, 0.0, 1.0);
        let mut bytes = Vec::new();
        m.write_binary(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &m.get(0, 0).to_le_bytes());
        assert_eq!(Matrix::read_binary(&bytes[..]).unwrap(), m);
        assert!(Matrix::read_binary(&bytes[..20]).is_err());
    }

    #[test]
    fn csv_export() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![-2.0, 3.25]]).unwrap();
        assert_eq!(m.to_csv(), "1,0.5\n-2,3.25\n");
    }
}
