use crate::error::{Error, Result};

/// A gathered slice of the attention problem: which query rows and key rows
/// take part, and the coordinates the pattern is evaluated in.
///
/// Coordinates are ascending along both lists and preserve the original
/// order, so `k_coord <= q_coord` is the causal test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub(crate) q_pos: Vec<usize>,
    pub(crate) q_coord: Vec<usize>,
    pub(crate) k_pos: Vec<usize>,
    pub(crate) k_coord: Vec<usize>,
    pub(crate) n_coords: usize,
}

fn check_sorted(xs: &[usize], what: &str) -> Result<()> {
    if xs.windows(2).all(|w| w[0] < w[1]) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be strictly ascending")))
    }
}

impl Region {
    /// Whole sequence in original coordinates.
    pub fn full(seq_len: usize) -> Self {
        let all: Vec<usize> = (0..seq_len).collect();
        Region {
            q_pos: all.clone(),
            q_coord: all.clone(),
            k_pos: all.clone(),
            k_coord: all,
            n_coords: seq_len,
        }
    }

    /// A subset of query rows against every key, in original coordinates.
    pub fn rows(q_rows: &[usize], seq_len: usize) -> Result<Self> {
        check_sorted(q_rows, "query rows")?;
        if let Some(&r) = q_rows.last().filter(|&&r| r >= seq_len) {
            return Err(Error::IndexOutOfRange { index: r, len: seq_len });
        }
        let all: Vec<usize> = (0..seq_len).collect();
        Ok(Region {
            q_pos: q_rows.to_vec(),
            q_coord: q_rows.to_vec(),
            k_pos: all.clone(),
            k_coord: all,
            n_coords: seq_len,
        })
    }

    /// Query rows of one group against key rows of another. Coordinates
    /// are ranks in the union of both position sets, so a group paired with
    /// itself is laid out contiguously.
    pub fn pair(q_rows: &[usize], k_rows: &[usize]) -> Result<Self> {
        check_sorted(q_rows, "query rows")?;
        check_sorted(k_rows, "key rows")?;
        let mut union: Vec<usize> = q_rows.iter().chain(k_rows).copied().collect();
        union.sort_unstable();
        union.dedup();
        let rank = |p: &usize| union.binary_search(p).expect("position is in the union");
        Ok(Region {
            q_pos: q_rows.to_vec(),
            q_coord: q_rows.iter().map(rank).collect(),
            k_pos: k_rows.to_vec(),
            k_coord: k_rows.iter().map(rank).collect(),
            n_coords: union.len(),
        })
    }

    pub fn q_positions(&self) -> &[usize] {
        &self.q_pos
    }

    pub fn k_positions(&self) -> &[usize] {
        &self.k_pos
    }

    pub fn q_coords(&self) -> &[usize] {
        &self.q_coord
    }

    pub fn k_coords(&self) -> &[usize] {
        &self.k_coord
    }

    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    pub fn is_empty(&self) -> bool {
        self.q_pos.is_empty() || self.k_pos.is_empty()
    }

    /// True when at least one query row sees at least one key causally.
    pub fn has_causal_overlap(&self) -> bool {
        match (self.q_coord.last(), self.k_coord.first()) {
            (Some(&q), Some(&k)) => k <= q,
            _ => false,
        }
    }

    /// Largest position referenced, plus one.
    pub(crate) fn extent(&self) -> usize {
        let q = self.q_pos.last().map_or(0, |&p| p + 1);
        let k = self.k_pos.last().map_or(0, |&p| p + 1);
        q.max(k)
    }

    /// Tiles of the dense causal computation over this region with natural
    /// `B`-sized chunks along both lists.
    pub fn dense_tiles(&self, block_size: usize) -> usize {
        let b = block_size.max(1);
        self.q_coord
            .chunks(b)
            .map(|chunk| {
                let last = *chunk.last().expect("chunks are non-empty");
                let keys = self.k_coord.partition_point(|&c| c <= last);
                keys.div_ceil(b)
            })
            .sum()
    }
}
