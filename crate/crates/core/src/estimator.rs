//! Online pattern estimation from the last query rows.
//!
//! Both estimators read an attention slab: the causal softmax of the final
//! `last_q` queries against every key. The grid estimator folds key columns
//! by residue class; the vertical-slash estimator ranks columns and
//! diagonals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{BlockMask, ElementRule};
use crate::tensor::{causal_softmax_row, default_scale, dot, Matrix};

/// Default number of trailing query rows used for estimation.
pub const DEFAULT_LAST_Q: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    pub stride: usize,
    pub phase: usize,
    pub score: f64,
}

/// Selected lines. Slash offsets are `key - query`, so they are `<= 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VSEstimate {
    pub vertical_idx: Vec<usize>,
    pub slash_idx: Vec<i64>,
}

impl VSEstimate {
    /// Element rule admitting exactly the selected lines.
    pub fn to_rule(&self) -> ElementRule {
        let mut slashes: Vec<usize> = self.slash_idx.iter().map(|&o| o.unsigned_abs() as usize).collect();
        slashes.sort_unstable();
        slashes.dedup();
        let mut verticals = self.vertical_idx.clone();
        verticals.sort_unstable();
        verticals.dedup();
        ElementRule::VerticalSlash { verticals, slashes }
    }
}

/// Attention weights of a set of query rows over a coordinate space.
///
/// `weights` has one column per coordinate; coordinates that hold no key,
/// or lie past a row's causal horizon, stay zero.
pub(crate) struct Slab {
    pub weights: Matrix,
    pub row_coords: Vec<usize>,
}

/// Softmax of the last `last_q` rows of `q` against every causal key,
/// scaled by `1 / sqrt(d_h)`. Row `r` is query `S - last_q + r`.
pub fn approx_attention(q: &Matrix, k: &Matrix, last_q: usize) -> Result<Matrix> {
    if last_q == 0 {
        return Err(Error::InvalidArgument("last_q must be positive".into()));
    }
    let s = q.rows();
    if s == 0 || k.rows() != s || k.cols() != q.cols() {
        return Err(Error::Shape(format!(
            "approx attention needs matching q/k, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if last_q > s {
        return Err(Error::InvalidArgument(format!(
            "last_q {last_q} exceeds sequence length {s}"
        )));
    }
    let scale = default_scale(q.cols());
    let mut out = Matrix::zeros(last_q, s);
    for r in 0..last_q {
        let i = s - last_q + r;
        causal_softmax_row(q.row(i), k, i, scale, out.row_mut(r));
    }
    Ok(out)
}

/// Slab for query rows `rows` (token positions, with coordinates
/// `row_coords`) over keys `keys` (with coordinates `key_coords`, ascending).
#[allow(clippy::too_many_arguments)]
pub(crate) fn region_slab(
    q: &Matrix,
    k: &Matrix,
    scale: f64,
    rows: &[usize],
    row_coords: &[usize],
    keys: &[usize],
    key_coords: &[usize],
    n_coords: usize,
) -> Slab {
    let mut weights = Matrix::zeros(rows.len(), n_coords);
    let mut scores = Vec::with_capacity(keys.len());
    for (r, (&p, &qc)) in rows.iter().zip(row_coords).enumerate() {
        scores.clear();
        let qi = q.row(p);
        for (&kp, &kc) in keys.iter().zip(key_coords) {
            if kc > qc {
                break;
            }
            scores.push((kc, dot(qi, k.row(kp)) * scale));
        }
        if scores.is_empty() {
            continue;
        }
        let max = scores.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = scores.iter().map(|x| (x.1 - max).exp()).sum();
        let out = weights.row_mut(r);
        for &(c, sc) in &scores {
            out[c] = (sc - max).exp() / norm;
        }
    }
    Slab {
        weights,
        row_coords: row_coords.to_vec(),
    }
}

fn column_sums(approx: &Matrix) -> Vec<f64> {
    let mut cols = vec![0.0; approx.cols()];
    for r in 0..approx.rows() {
        for (c, &w) in cols.iter_mut().zip(approx.row(r)) {
            *c += w;
        }
    }
    cols
}

/// Picks the stride and phase whose residue class stands out most.
///
/// Columns are folded by residue mod `s` and each phase gets its mean mass
/// per column. For `s = 1` the score is that mean. For `s >= 2` the score is
/// the best phase mean minus the runner-up phase mean, so a multiple of the
/// true stride (which splits the planted lines over two phases) scores
/// below the true stride. Strides are compared in ascending order and only
/// a strictly larger score replaces the incumbent, so ties go to the smaller
/// stride and then the smaller phase.
pub fn search_grid(approx: &Matrix, stride_space: &[usize]) -> Result<GridEstimate> {
    if stride_space.is_empty() {
        return Err(Error::InvalidArgument("empty stride space".into()));
    }
    if stride_space.contains(&0) {
        return Err(Error::InvalidArgument("strides must be positive".into()));
    }
    let n = approx.cols();
    let cols = column_sums(approx);
    let mut strides = stride_space.to_vec();
    strides.sort_unstable();
    strides.dedup();

    let mut best: Option<GridEstimate> = None;
    for &s in strides.iter().filter(|&&s| s <= n) {
        let mut sum = vec![0.0; s];
        let mut count = vec![0usize; s];
        for (c, &w) in cols.iter().enumerate() {
            sum[c % s] += w;
            count[c % s] += 1;
        }
        let means: Vec<f64> = sum.iter().zip(&count).map(|(&a, &b)| a / b as f64).collect();
        let mut phase = 0;
        for (p, &m) in means.iter().enumerate() {
            if m > means[phase] {
                phase = p;
            }
        }
        let score = if s == 1 {
            means[0]
        } else {
            let runner_up = means
                .iter()
                .enumerate()
                .filter(|&(p, _)| p != phase)
                .map(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, f64::max);
            means[phase] - runner_up
        };
        if best.is_none_or(|b| score > b.score) {
            best = Some(GridEstimate {
                stride: s,
                phase,
                score,
            });
        }
    }
    best.ok_or_else(|| Error::InvalidArgument(format!("every candidate stride exceeds the {n} available columns")))
}

/// Top-scoring verticals and slashes of a slab whose rows are the final
/// rows of the sequence (`approx.cols()` long).
pub fn select_vertical_slash(approx: &Matrix, n_vertical: usize, n_slash: usize) -> VSEstimate {
    let s = approx.cols();
    let rows = approx.rows().min(s);
    let row_coords: Vec<usize> = (s - rows..s).collect();
    select_lines(approx, &row_coords, n_vertical, n_slash)
}

pub(crate) fn select_lines(weights: &Matrix, row_coords: &[usize], n_vertical: usize, n_slash: usize) -> VSEstimate {
    let n = weights.cols();
    if n == 0 {
        return VSEstimate {
            vertical_idx: Vec::new(),
            slash_idx: Vec::new(),
        };
    }
    let vertical_scores = column_sums(weights);

    // Distance d = i - j, stored as a positive index.
    let mut slash_sum = vec![0.0; n];
    let mut slash_rows = vec![0usize; n];
    for (r, &i) in row_coords.iter().enumerate() {
        let row = weights.row(r);
        for d in 0..=i.min(n - 1) {
            slash_sum[d] += row[i - d];
            slash_rows[d] += 1;
        }
    }
    let slash_scores: Vec<f64> = slash_sum
        .iter()
        .zip(&slash_rows)
        .map(|(&a, &c)| if c == 0 { f64::NEG_INFINITY } else { a / c as f64 })
        .collect();

    let verticals = top_with_forced(&vertical_scores, n_vertical);
    let mut slashes: Vec<i64> = top_with_forced(&slash_scores, n_slash)
        .into_iter()
        .map(|d| -(d as i64))
        .collect();
    slashes.sort_unstable();
    VSEstimate {
        vertical_idx: verticals,
        slash_idx: slashes,
    }
}

/// Index 0 plus the best `n - 1` others (lower index wins ties), ascending.
fn top_with_forced(scores: &[f64], n: usize) -> Vec<usize> {
    let n = n.min(scores.len());
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (1..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = vec![0];
    picked.extend(order.into_iter().take(n - 1));
    picked.sort_unstable();
    picked
}

/// Block plan covering exactly the selected lines.
pub fn vs_to_blockmask(est: &VSEstimate, seq_len: usize, block_size: usize) -> Result<BlockMask> {
    if let Some(&v) = est.vertical_idx.iter().find(|&&v| v >= seq_len) {
        return Err(Error::IndexOutOfRange { index: v, len: seq_len });
    }
    if let Some(&o) = est.slash_idx.iter().find(|&&o| o > 0) {
        return Err(Error::InvalidArgument(format!(
            "slash offset {o} is above the diagonal"
        )));
    }
    BlockMask::from_rule(seq_len, block_size, est.to_rule())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::attention_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn approx_matches_oracle_rows() {
        let (q, k) = (random(32, 8, 1), random(32, 8, 2));
        let full = attention_weights(&q, &k, default_scale(8)).unwrap();
        let slab = approx_attention(&q, &k, 8).unwrap();
        for r in 0..8 {
            for j in 0..32 {
                assert!((slab.get(r, j) - full.get(24 + r, j)).abs() <= 1e-12);
            }
        }
        assert_eq!(approx_attention(&q, &k, 32).unwrap(), full);
        assert_eq!(approx_attention(&q, &k, 1).unwrap().row(0), full.row(31));
        assert!(approx_attention(&q, &k, 0).is_err());
        assert!(approx_attention(&q, &k, 33).is_err());
    }

    #[test]
    fn grid_finds_planted_columns() {
        let approx = Matrix::from_fn(16, 128, |_, j| if j % 8 == 3 { 1.0 } else { 0.0 });
        let est = search_grid(&approx, &[2, 4, 8, 16, 32]).unwrap();
        assert_eq!((est.stride, est.phase), (8, 3));
    }

    #[test]
    fn grid_uniform_ties_to_smallest() {
        let approx = Matrix::from_fn(4, 64, |_, _| 1.0 / 64.0);
        let est = search_grid(&approx, &[4, 2]).unwrap();
        assert_eq!((est.stride, est.phase), (2, 0));
    }

    #[test]
    fn grid_stride_one_is_density() {
        let approx = Matrix::from_fn(2, 10, |_, j| j as f64);
        let est = search_grid(&approx, &[1]).unwrap();
        assert_eq!((est.stride, est.phase), (1, 0));
        assert!((est.score - 9.0).abs() < 1e-12);
    }

    #[test]
    fn grid_skips_oversized_strides() {
        let approx = Matrix::from_fn(2, 10, |_, _| 0.1);
        assert_eq!(search_grid(&approx, &[4, 64]).unwrap().stride, 4);
        assert!(search_grid(&approx, &[64]).is_err());
        assert!(search_grid(&approx, &[]).is_err());
    }

    #[test]
    fn planted_vertical_and_slash() {
        let s = 20;
        let vert = Matrix::from_fn(6, s, |_, j| (j == 5) as u8 as f64);
        let est = select_vertical_slash(&vert, 2, 1);
        assert_eq!(est.vertical_idx, vec![0, 5]);
        assert_eq!(est.slash_idx, vec![0]);

        let slash = Matrix::from_fn(6, s, |r, j| ((s - 6 + r) as i64 - j as i64 == 7) as u8 as f64);
        let est = select_vertical_slash(&slash, 1, 2);
        assert_eq!(est.slash_idx, vec![-7, 0]);
        assert_eq!(est.vertical_idx, vec![0]);
    }

    #[test]
    fn vs_matches_scalar_scoring() {
        let (s, rows) = (40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let approx = Matrix::from_fn(rows, s, |r, j| {
            if j <= s - rows + r {
                rng.random_range(0.0..1.0)
            } else {
                0.0
            }
        });
        let est = select_vertical_slash(&approx, 4, 4);

        let col = |j: usize| (0..rows).map(|r| approx.get(r, j)).sum::<f64>();
        let diag = |d: usize| {
            let mut acc = 0.0;
            let mut n = 0;
            for r in 0..rows {
                let i = s - rows + r;
                if i >= d {
                    acc += approx.get(r, i - d);
                    n += 1;
                }
            }
            acc / n as f64
        };
        let mut vs: Vec<usize> = (1..s).collect();
        vs.sort_by(|&a, &b| col(b).partial_cmp(&col(a)).unwrap());
        let mut expect_v = vec![0];
        expect_v.extend(&vs[..3]);
        expect_v.sort();
        assert_eq!(est.vertical_idx, expect_v);

        let mut ds: Vec<usize> = (1..s).collect();
        ds.sort_by(|&a, &b| diag(b).partial_cmp(&diag(a)).unwrap());
        let mut expect_s: Vec<i64> = std::iter::once(0).chain(ds[..3].iter().map(|&d| -(d as i64))).collect();
        expect_s.sort();
        assert_eq!(est.slash_idx, expect_s);
    }

    #[test]
    fn vs_blockmask_sink_and_diagonal() {
        let b = 4;
        let est = VSEstimate {
            vertical_idx: vec![0],
            slash_idx: vec![0],
        };
        let m = vs_to_blockmask(&est, 4 * b, b).unwrap();
        let mut expect: Vec<(usize, usize)> = (0..4).map(|q| (q, 0)).chain((1..4).map(|q| (q, q))).collect();
        expect.sort();
        assert_eq!(m.active(), expect.as_slice());
    }

    #[test]
    fn vs_blockmask_subdiagonal_line() {
        let b = 4;
        let est = VSEstimate {
            vertical_idx: vec![],
            slash_idx: vec![-(b as i64)],
        };
        let m = vs_to_blockmask(&est, 4 * b, b).unwrap();
        // Offset exactly -B hits (qb, qb-1) only.
        assert_eq!(m.active(), &[(1, 0), (2, 1), (3, 2)]);
        assert!(vs_to_blockmask(
            &VSEstimate {
                vertical_idx: vec![99],
                slash_idx: vec![]
            },
            16,
            4
        )
        .is_err());
    }

    #[test]
    fn estimates_serialise() {
        let g = GridEstimate {
            stride: 8,
            phase: 3,
            score: 0.5,
        };
        let back: GridEstimate = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
