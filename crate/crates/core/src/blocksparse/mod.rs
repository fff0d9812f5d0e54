//! Streaming block-sparse attention.
//!
//! Every executor keeps one [`SoftmaxPartial`] row per query and feeds it
//! tile by tile. Permutation never moves data: regions and gather plans are
//! index maps, and results are scattered back through the inverse map.

mod engine;
mod grid;
mod pattern;
mod region;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use pattern::{planned_tiles, resolve_pattern, run_pattern, run_resolved, RegionRun, Resolved};
pub use region::Region;

use crate::error::{Error, Result};
use crate::estimator::GridEstimate;
use crate::estimator::DEFAULT_LAST_Q;
use crate::masks::{BlockMask, GridFlags, DEFAULT_BLOCK_SIZE};
use crate::tensor::{check_qkv, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Inputs and scores rounded to 32-bit; the streaming state stays 64-bit.
    F32,
    #[default]
    F64,
}

/// Order in which a chunk's tiles are fed to the online softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VisitOrder {
    #[default]
    Natural,
    Reverse,
    Shuffled(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    pub block_size: usize,
    pub last_q: usize,
    pub precision: Precision,
    pub order: VisitOrder,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            block_size: DEFAULT_BLOCK_SIZE,
            last_q: DEFAULT_LAST_Q,
            precision: Precision::F64,
            order: VisitOrder::Natural,
        }
    }
}

impl ExecOptions {
    pub fn with_block_size(block_size: usize) -> Self {
        ExecOptions {
            block_size,
            ..Default::default()
        }
    }
}

/// One tile visit: the pass that produced it, the row chunk and the key tile
/// within that chunk. For whole-sequence masks these are `(qb, kb)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileVisit {
    pub pass: &'static str,
    pub chunk: usize,
    pub tile: usize,
}

pub fn trace_csv(trace: &[TileVisit]) -> String {
    let mut out = String::from("step,pass,chunk,tile\n");
    for (n, t) in trace.iter().enumerate() {
        let _ = writeln!(out, "{n},{},{},{}", t.pass, t.chunk, t.tile);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attended {
    pub output: Matrix,
    pub empty_rows: Vec<usize>,
    pub trace: Vec<TileVisit>,
    pub tiles: usize,
    pub flops: u64,
}

pub(crate) fn check_region(q: &Matrix, k: &Matrix, v: &Matrix, region: &Region) -> Result<()> {
    check_qkv(q, k, v)?;
    if region.extent() > q.rows() {
        return Err(Error::Shape(format!(
            "region reaches position {} but the sequence has {} rows",
            region.extent() - 1,
            q.rows()
        )));
    }
    Ok(())
}

fn attended_from(region: &Region, run: RegionRun, seq_len: usize) -> Attended {
    let fin = run.partial.finalize();
    let (output, empty_rows) = if region.q_pos.len() == seq_len {
        (fin.output, fin.empty_rows)
    } else {
        let inverse = inverse_index(region.q_positions(), seq_len).expect("region rows are unique");
        let sc = scatter_rows(&fin.output, &inverse).expect("inverse is consistent");
        let mut empty: Vec<usize> = fin.empty_rows.iter().map(|&r| region.q_pos[r]).collect();
        empty.extend(sc.untouched);
        empty.sort_unstable();
        (sc.output, empty)
    };
    Attended {
        output,
        empty_rows,
        trace: run.trace,
        tiles: run.tiles,
        flops: run.flops,
    }
}

/// Attention restricted to `mask`, computed tile by tile over active blocks.
pub fn block_sparse_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &BlockMask, scale: f64) -> Result<Matrix> {
    block_sparse_attention_with(q, k, v, mask, scale, &ExecOptions::default()).map(|a| a.output)
}

/// [`block_sparse_attention`] with explicit precision and visit order. The
/// mask's own block size is used.
pub fn block_sparse_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &BlockMask,
    scale: f64,
    opts: &ExecOptions,
) -> Result<Attended> {
    check_qkv(q, k, v)?;
    if mask.seq_len() != q.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} positions but the sequence has {}",
            mask.seq_len(),
            q.rows()
        )));
    }
    let region = Region::full(q.rows());
    let plan = engine::plan_mask(&region, mask);
    let (partial, trace) = engine::execute(&plan, q, k, v, scale, opts.precision, opts.order);
    let fin = partial.finalize();
    Ok(Attended {
        output: fin.output,
        empty_rows: fin.empty_rows,
        trace,
        tiles: plan.num_tiles(),
        flops: plan.flops(q.cols()),
    })
}

/// Grid attention through gathered rows and keys. Equals the masked oracle
/// under `build_grid_mask` with the same stride, phase, flags and block size.
pub fn grid_sparse_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    est: &GridEstimate,
    flags: GridFlags,
    scale: f64,
) -> Result<Matrix> {
    grid_sparse_attention_with(q, k, v, est, flags, scale, &ExecOptions::default()).map(|a| a.output)
}

pub fn grid_sparse_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    est: &GridEstimate,
    flags: GridFlags,
    scale: f64,
    opts: &ExecOptions,
) -> Result<Attended> {
    check_qkv(q, k, v)?;
    let s = q.rows();
    if est.stride == 0 || est.stride > s || est.phase >= est.stride {
        return Err(Error::InvalidArgument(format!(
            "grid stride {} / phase {} invalid for length {s}",
            est.stride, est.phase
        )));
    }
    if opts.block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    let region = Region::full(s);
    let resolved = Resolved::Grid {
        estimate: *est,
        flags,
        band: opts.block_size,
    };
    let run = run_resolved(q, k, v, &region, resolved, scale, opts)?;
    Ok(attended_from(&region, run, s))
}

/// Runs a configured pattern over a region and scatters the rows back into
/// a full-length output. Rows outside the region are zero and flagged.
pub fn region_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    region: &Region,
    pattern: &crate::masks::HeadPattern,
    scale: f64,
    opts: &ExecOptions,
) -> Result<Attended> {
    let run = run_pattern(q, k, v, region, pattern, scale, opts)?;
    Ok(attended_from(region, run, q.rows()))
}

/// Index maps realising a permutation without moving data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherPlan {
    pub q_index: Vec<usize>,
    pub k_index: Vec<usize>,
    pub inverse_q: Vec<Option<usize>>,
}

impl GatherPlan {
    pub fn new(q_index: Vec<usize>, k_index: Vec<usize>, seq_len: usize) -> Result<Self> {
        let inverse_q = inverse_index(&q_index, seq_len)?;
        if let Some(&j) = k_index.iter().find(|&&j| j >= seq_len) {
            return Err(Error::IndexOutOfRange { index: j, len: seq_len });
        }
        Ok(GatherPlan {
            q_index,
            k_index,
            inverse_q,
        })
    }

    pub fn from_region(region: &Region, seq_len: usize) -> Result<Self> {
        GatherPlan::new(region.q_pos.clone(), region.k_pos.clone(), seq_len)
    }
}

/// `inverse[p] = Some(r)` when `index[r] = p`. Fails on repeats.
pub fn inverse_index(index: &[usize], len: usize) -> Result<Vec<Option<usize>>> {
    let mut inv = vec![None; len];
    for (r, &p) in index.iter().enumerate() {
        match inv.get_mut(p) {
            None => return Err(Error::IndexOutOfRange { index: p, len }),
            Some(Some(_)) => {
                return Err(Error::InvalidArgument(format!("position {p} gathered twice")));
            }
            Some(slot) => *slot = Some(r),
        }
    }
    Ok(inv)
}

/// Rows `index[0], index[1], ...` of `x`.
pub fn gather_rows(x: &Matrix, index: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(index.len(), x.cols());
    for (r, &p) in index.iter().enumerate() {
        if p >= x.rows() {
            return Err(Error::IndexOutOfRange {
                index: p,
                len: x.rows(),
            });
        }
        out.row_mut(r).copy_from_slice(x.row(p));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scattered {
    pub output: Matrix,
    /// Output rows no gathered row mapped to; they are zero.
    pub untouched: Vec<usize>,
}

/// Writes gathered row `inverse[p]` of `x` to output row `p`.
pub fn scatter_rows(x: &Matrix, inverse: &[Option<usize>]) -> Result<Scattered> {
    let mut output = Matrix::zeros(inverse.len(), x.cols());
    let mut untouched = Vec::new();
    for (p, src) in inverse.iter().enumerate() {
        match *src {
            Some(r) if r < x.rows() => output.row_mut(p).copy_from_slice(x.row(r)),
            Some(r) => {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: x.rows(),
                })
            }
            None => untouched.push(p),
        }
    }
    Ok(Scattered { output, untouched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{build_a_shape, build_causal, build_grid_mask, ElementRule, HeadPattern};
    use crate::tensor::{dense_causal_attention, masked_dense_attention};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qkv(s: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix::from_fn(s, d, |_, _| rng.random_range(-1.5..1.5));
        (m(), m(), m())
    }

    #[test]
    fn full_mask_equals_dense() {
        let (q, k, v) = qkv(70, 8, 1);
        let sc = 0.4;
        let mask = build_causal(70, 16).unwrap();
        let out = block_sparse_attention(&q, &k, &v, &mask, sc).unwrap();
        let dense = dense_causal_attention(&q, &k, &v, sc).unwrap();
        assert!(out.max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn block_diagonal_is_local_attention() {
        let b = 8;
        let (q, k, v) = qkv(4 * b, 6, 2);
        let mask = BlockMask::with_active(4 * b, b, ElementRule::Causal, (0..4).map(|x| (x, x))).unwrap();
        let out = block_sparse_attention(&q, &k, &v, &mask, 0.5).unwrap();
        for blk in 0..4 {
            let idx: Vec<usize> = (blk * b..(blk + 1) * b).collect();
            let (lq, lk, lv) = (
                gather_rows(&q, &idx).unwrap(),
                gather_rows(&k, &idx).unwrap(),
                gather_rows(&v, &idx).unwrap(),
            );
            let local = dense_causal_attention(&lq, &lk, &lv, 0.5).unwrap();
            for r in 0..b {
                for c in 0..6 {
                    assert!((local.get(r, c) - out.get(blk * b + r, c)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn trace_lists_active_blocks_in_order() {
        let (q, k, v) = qkv(32, 4, 3);
        let mask = build_a_shape(32, 1, 8, 8).unwrap();
        let run = block_sparse_attention_with(&q, &k, &v, &mask, 0.5, &ExecOptions::default()).unwrap();
        let visits: Vec<(usize, usize)> = run.trace.iter().map(|t| (t.chunk, t.tile)).collect();
        assert_eq!(visits, mask.active());
        assert!(trace_csv(&run.trace).starts_with("step,pass,chunk,tile\n0,mask,0,0\n"));
    }

    #[test]
    fn mask_length_mismatch() {
        let (q, k, v) = qkv(16, 4, 4);
        let mask = build_causal(32, 8).unwrap();
        assert!(block_sparse_attention(&q, &k, &v, &mask, 0.5).is_err());
    }

    #[test]
    fn grid_small_matches_masked_oracle() {
        let (q, k, v) = qkv(24, 5, 5);
        let est = GridEstimate {
            stride: 4,
            phase: 2,
            score: 0.0,
        };
        let opts = ExecOptions::with_block_size(4);
        for flags in GridFlags::all_nonempty() {
            let got = grid_sparse_attention_with(&q, &k, &v, &est, flags, 0.5, &opts).unwrap();
            let mask = build_grid_mask(24, 4, 2, flags.hline, flags.vline, flags.slash, 4).unwrap();
            let want = masked_dense_attention(&q, &k, &v, 0.5, |i, j| mask.admits(i, j)).unwrap();
            assert!(got.output.max_abs_diff(&want.output) <= 1e-12, "{flags:?}");
        }
    }

    #[test]
    fn grid_stride_one_is_dense() {
        let (q, k, v) = qkv(40, 4, 6);
        let est = GridEstimate {
            stride: 1,
            phase: 0,
            score: 0.0,
        };
        let out = grid_sparse_attention(&q, &k, &v, &est, GridFlags::new(false, true, false), 0.5).unwrap();
        assert!(out.max_abs_diff(&dense_causal_attention(&q, &k, &v, 0.5).unwrap()) <= 1e-12);
        let bad = GridEstimate {
            stride: 41,
            phase: 0,
            score: 0.0,
        };
        assert!(grid_sparse_attention(&q, &k, &v, &bad, GridFlags::new(true, true, true), 0.5).is_err());
    }

    #[test]
    fn gather_scatter_examples() {
        let x = Matrix::from_fn(9, 2, |i, j| (i * 10 + j) as f64);
        let id: Vec<usize> = (0..9).collect();
        assert_eq!(gather_rows(&x, &id).unwrap(), x);
        let rev: Vec<usize> = (0..9).rev().collect();
        assert_eq!(gather_rows(&gather_rows(&x, &rev).unwrap(), &rev).unwrap(), x);

        let g = gather_rows(&x, &[2, 5, 8]).unwrap();
        for (r, &p) in [2usize, 5, 8].iter().enumerate() {
            assert_eq!(g.row(r), x.row(p));
        }
        let sc = scatter_rows(&g, &inverse_index(&[2, 5, 8], 9).unwrap()).unwrap();
        assert_eq!(sc.untouched, vec![0, 1, 3, 4, 6, 7]);
        for p in 0..9 {
            let expect: Vec<f64> = if [2, 5, 8].contains(&p) {
                x.row(p).to_vec()
            } else {
                vec![0.0; 2]
            };
            assert_eq!(sc.output.row(p), expect.as_slice());
        }
        assert!(gather_rows(&x, &[9]).is_err());
        assert!(inverse_index(&[1, 1], 3).is_err());
        assert!(GatherPlan::new(vec![0, 2], vec![5], 3).is_err());
    }

    #[test]
    fn region_rows_scatter_back() {
        let (q, k, v) = qkv(20, 4, 7);
        let rows = [3usize, 7, 8, 15];
        let region = Region::rows(&rows, 20).unwrap();
        let got = region_attention(
            &q,
            &k,
            &v,
            &region,
            &HeadPattern::Full,
            0.5,
            &ExecOptions::with_block_size(4),
        )
        .unwrap();
        let dense = dense_causal_attention(&q, &k, &v, 0.5).unwrap();
        for p in 0..20 {
            if rows.contains(&p) {
                for c in 0..4 {
                    assert!((got.output.get(p, c) - dense.get(p, c)).abs() <= 1e-12);
                }
            } else {
                assert!(got.empty_rows.contains(&p));
            }
        }
    }

    #[test]
    fn f32_close_to_f64() {
        let (q, k, v) = qkv(64, 16, 8);
        let mask = build_a_shape(64, 4, 16, 16).unwrap();
        let opts = ExecOptions {
            precision: Precision::F32,
            ..ExecOptions::with_block_size(16)
        };
        let lo = block_sparse_attention_with(&q, &k, &v, &mask, 0.25, &opts).unwrap();
        let hi = block_sparse_attention(&q, &k, &v, &mask, 0.25).unwrap();
        let d = lo.output.max_abs_diff(&hi);
        assert!(d <= 1e-3 && d > 0.0, "f32 deviation {d}");
    }
}
