//! Tile plans and the streaming executor.
//!
//! A plan is a list of tiles, each a chunk of gathered query rows against a
//! list of gathered keys, tagged with the pass whose predicate trims it.
//! Passes partition the admitted elements, so every `(i, j)` reaches the
//! online softmax exactly once.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::region::Region;
use super::{Precision, TileVisit, VisitOrder};
use crate::masks::{classify_tile, tile_flops, BlockMask, ElementRule, TileStatus};
use crate::tensor::{dot, Matrix, SoftmaxPartial};

/// Element predicate in region coordinates; only called with `kc <= qc`.
pub(crate) type Pred<'a> = Box<dyn Fn(usize, usize) -> bool + 'a>;

struct Pass<'a> {
    name: &'static str,
    pred: Pred<'a>,
}

struct Job {
    pass: usize,
    chunk: usize,
    tile: usize,
    keys: Vec<usize>,
    check: bool,
}

pub(crate) struct Plan<'a> {
    region: &'a Region,
    block_size: usize,
    passes: Vec<Pass<'a>>,
    chunks: Vec<Vec<usize>>,
    jobs: Vec<Job>,
}

impl<'a> Plan<'a> {
    pub(crate) fn new(region: &'a Region, block_size: usize) -> Self {
        Plan {
            region,
            block_size,
            passes: Vec::new(),
            chunks: Vec::new(),
            jobs: Vec::new(),
        }
    }

    pub(crate) fn num_tiles(&self) -> usize {
        self.jobs.len()
    }

    pub(crate) fn flops(&self, head_dim: usize) -> u64 {
        tile_flops(self.jobs.len(), self.block_size, head_dim)
    }

    pub(crate) fn add_pass(&mut self, name: &'static str, pred: Pred<'a>) -> usize {
        self.passes.push(Pass { name, pred });
        self.passes.len() - 1
    }

    pub(crate) fn add_chunk(&mut self, rows: Vec<usize>) -> usize {
        self.chunks.push(rows);
        self.chunks.len() - 1
    }

    pub(crate) fn chunk_rows(&self, chunk: usize) -> &[usize] {
        &self.chunks[chunk]
    }

    /// Largest coordinate among a chunk's rows.
    pub(crate) fn chunk_last_coord(&self, chunk: usize) -> usize {
        self.chunks[chunk]
            .iter()
            .map(|&r| self.region.q_coord[r])
            .max()
            .expect("chunks are non-empty")
    }

    /// Adds a tile without checking whether it admits anything.
    pub(crate) fn push_job(&mut self, pass: usize, chunk: usize, tile: usize, keys: Vec<usize>, check: bool) {
        self.jobs.push(Job {
            pass,
            chunk,
            tile,
            keys,
            check,
        });
    }

    /// Adds a tile if the pass admits at least one of its causal elements.
    pub(crate) fn push_if_nonempty(&mut self, pass: usize, chunk: usize, tile: usize, keys: Vec<usize>) {
        let pred = &self.passes[pass].pred;
        let reg = self.region;
        let hit = self.chunks[chunk].iter().any(|&r| {
            let qc = reg.q_coord[r];
            keys.iter()
                .map(|&ki| reg.k_coord[ki])
                .take_while(|&kc| kc <= qc)
                .any(|kc| pred(qc, kc))
        });
        if hit {
            self.push_job(pass, chunk, tile, keys, true);
        }
    }

    /// Splits `rows` (region row indices) into chunks of `B`.
    pub(crate) fn add_chunks(&mut self, rows: &[usize]) -> Vec<usize> {
        rows.chunks(self.block_size)
            .map(|c| self.add_chunk(c.to_vec()))
            .collect()
    }

    /// Splits `keys` (ascending region key indices) into tiles of `B`.
    pub(crate) fn key_tiles(&self, keys: &[usize]) -> Vec<Vec<usize>> {
        keys.chunks(self.block_size).map(|c| c.to_vec()).collect()
    }

    /// Natural key tiles reaching the causal horizon of `chunk`.
    pub(crate) fn natural_key_tiles(&self, chunk: usize) -> Vec<Vec<usize>> {
        let last = self.chunk_last_coord(chunk);
        let n = self.region.k_coord.partition_point(|&c| c <= last);
        let all: Vec<usize> = (0..n).collect();
        self.key_tiles(&all)
    }
}

/// Natural tiling over a region trimmed by a static rule.
pub(crate) fn plan_rule<'a>(region: &'a Region, rule: &'a ElementRule, block_size: usize) -> Plan<'a> {
    let mut plan = Plan::new(region, block_size);
    let classifier = rule.compile(region.n_coords);
    let compiled = rule.compile(region.n_coords);
    let pass = plan.add_pass("rule", Box::new(move |i, j| compiled.admits_causal(i, j)));
    let rows: Vec<usize> = (0..region.q_pos.len()).collect();
    for chunk in plan.add_chunks(&rows) {
        let row_coords: Vec<usize> = plan.chunk_rows(chunk).iter().map(|&r| region.q_coord[r]).collect();
        for (t, keys) in plan.natural_key_tiles(chunk).into_iter().enumerate() {
            let key_coords: Vec<usize> = keys.iter().map(|&ki| region.k_coord[ki]).collect();
            match classify_tile(&classifier, &row_coords, &key_coords) {
                TileStatus::Empty => {}
                TileStatus::Full => plan.push_job(pass, chunk, t, keys, false),
                TileStatus::Partial => plan.push_job(pass, chunk, t, keys, true),
            }
        }
    }
    plan
}

/// The exact tile list of a block mask over the whole sequence.
pub(crate) fn plan_mask<'a>(region: &'a Region, mask: &'a BlockMask) -> Plan<'a> {
    let b = mask.block_size();
    let s = mask.seq_len();
    let mut plan = Plan::new(region, b);
    let compiled = mask.rule().compile(s);
    let pass = plan.add_pass("mask", Box::new(move |i, j| compiled.admits_causal(i, j)));
    for qb in 0..mask.q_blocks() {
        plan.add_chunk((qb * b..((qb + 1) * b).min(s)).collect());
    }
    for ((qb, kb), full) in mask.active_with_full() {
        let keys = (kb * b..((kb + 1) * b).min(s)).collect();
        plan.push_job(pass, qb, kb, keys, !full);
    }
    plan
}

/// Runs a plan. Rows of the returned partial follow the region's query list.
pub(crate) fn execute(
    plan: &Plan<'_>,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    precision: Precision,
    order: VisitOrder,
) -> (SoftmaxPartial, Vec<TileVisit>) {
    let (q, k, v) = match precision {
        Precision::F64 => (Cow::Borrowed(q), Cow::Borrowed(k), Cow::Borrowed(v)),
        Precision::F32 => (
            Cow::Owned(q.round_to_f32()),
            Cow::Owned(k.round_to_f32()),
            Cow::Owned(v.round_to_f32()),
        ),
    };
    let reg = plan.region;
    let mut by_chunk: Vec<Vec<usize>> = vec![Vec::new(); plan.chunks.len()];
    for (id, job) in plan.jobs.iter().enumerate() {
        by_chunk[job.chunk].push(id);
    }

    let mut partial = SoftmaxPartial::empty(reg.q_pos.len(), v.cols());
    let mut trace = Vec::with_capacity(plan.jobs.len());
    let mut scores = Vec::with_capacity(plan.block_size);
    for (chunk, ids) in by_chunk.iter_mut().enumerate() {
        match order {
            VisitOrder::Natural => {}
            VisitOrder::Reverse => ids.reverse(),
            VisitOrder::Shuffled(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                ids.shuffle(&mut rng);
            }
        }
        for &id in ids.iter() {
            let job = &plan.jobs[id];
            let pred = &plan.passes[job.pass].pred;
            for &r in &plan.chunks[job.chunk] {
                let qc = reg.q_coord[r];
                let qrow = q.row(reg.q_pos[r]);
                scores.clear();
                for &ki in &job.keys {
                    let kc = reg.k_coord[ki];
                    if kc > qc {
                        break;
                    }
                    if job.check && !pred(qc, kc) {
                        continue;
                    }
                    let kp = reg.k_pos[ki];
                    let mut s = dot(qrow, k.row(kp)) * scale;
                    if precision == Precision::F32 {
                        s = s as f32 as f64;
                    }
                    scores.push((kp, s));
                }
                partial.push_scores(r, &scores, &v);
            }
            trace.push(TileVisit {
                pass: plan.passes[job.pass].name,
                chunk: job.chunk,
                tile: job.tile,
            });
        }
    }
    (partial, trace)
}
