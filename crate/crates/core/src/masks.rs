//! Static and parameterised sparse patterns, block plans, and the recall and
//! FLOPs accounting used by the analysis and the pattern search.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default sink size for A-shape and Tri-shape heads.
pub const DEFAULT_SINK: usize = 128;
/// Default tile edge.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Element-level admission predicate, expressed as data so it can be
/// serialised. Coordinates are query index `i` and key index `j`; causality
/// (`j <= i`) is enforced by [`ElementRule::admits`] on top of the rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementRule {
    Causal,
    Deny,
    Diagonal,
    AShape {
        sink: usize,
        local: usize,
    },
    TriShape {
        sink: usize,
        local: usize,
        bottom: usize,
        seq_len: usize,
    },
    SfFixed {
        local: usize,
        stride: usize,
    },
    SfStrided {
        local: usize,
        stride: usize,
    },
    /// Grid lines at residue `phase`, plus a local band and sink of width `band`.
    Grid {
        stride: usize,
        phase: usize,
        hline: bool,
        vline: bool,
        slash: bool,
        band: usize,
    },
    /// `verticals` are key indices, `slashes` are distances `i - j`.
    VerticalSlash {
        verticals: Vec<usize>,
        slashes: Vec<usize>,
    },
}

impl ElementRule {
    pub fn admits(&self, i: usize, j: usize) -> bool {
        j <= i && self.admits_causal(i, j)
    }

    /// Rule evaluation assuming `j <= i`.
    fn admits_causal(&self, i: usize, j: usize) -> bool {
        match *self {
            ElementRule::Causal => true,
            ElementRule::Deny => false,
            ElementRule::Diagonal => i == j,
            ElementRule::AShape { sink, local } => j < sink || i - j < local,
            ElementRule::TriShape {
                sink,
                local,
                bottom,
                seq_len,
            } => j < sink || i - j < local || i + bottom >= seq_len,
            ElementRule::SfFixed { local, stride } => i / local == j / local || j % stride == stride - 1,
            ElementRule::SfStrided { local, stride } => i - j < local || (i - j).is_multiple_of(stride),
            ElementRule::Grid {
                stride,
                phase,
                hline,
                vline,
                slash,
                band,
            } => {
                j < band
                    || i - j < band
                    || (vline && j % stride == phase)
                    || (hline && i % stride == phase)
                    || (slash && (i - j).is_multiple_of(stride))
            }
            ElementRule::VerticalSlash {
                ref verticals,
                ref slashes,
            } => verticals.binary_search(&j).is_ok() || slashes.binary_search(&(i - j)).is_ok(),
        }
    }

    /// Lookup-table form for hot loops over coordinates `< n`.
    pub(crate) fn compile(&self, n: usize) -> CompiledRule<'_> {
        match self {
            ElementRule::VerticalSlash { verticals, slashes } => {
                let mut vert = vec![false; n];
                for &c in verticals.iter().filter(|&&c| c < n) {
                    vert[c] = true;
                }
                let mut slash = vec![false; n];
                for &d in slashes.iter().filter(|&&d| d < n) {
                    slash[d] = true;
                }
                CompiledRule::Lines { vert, slash }
            }
            other => CompiledRule::Plain(other),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match *self {
            ElementRule::SfFixed { local, stride } | ElementRule::SfStrided { local, stride }
                if local == 0 || stride == 0 =>
            {
                bad("SF local and stride must be positive")
            }
            ElementRule::Grid { stride, phase, .. } if stride == 0 || phase >= stride => {
                bad("grid needs stride >= 1 and phase < stride")
            }
            ElementRule::VerticalSlash {
                ref verticals,
                ref slashes,
            } if !is_strictly_sorted(verticals) || !is_strictly_sorted(slashes) => {
                bad("vertical/slash indices must be sorted and unique")
            }
            _ => Ok(()),
        }
    }
}

fn is_strictly_sorted(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

pub(crate) enum CompiledRule<'a> {
    Plain(&'a ElementRule),
    Lines { vert: Vec<bool>, slash: Vec<bool> },
}

impl CompiledRule<'_> {
    /// Caller guarantees `j <= i`.
    #[inline]
    pub(crate) fn admits_causal(&self, i: usize, j: usize) -> bool {
        match self {
            CompiledRule::Plain(rule) => rule.admits_causal(i, j),
            CompiledRule::Lines { vert, slash } => {
                vert.get(j).copied().unwrap_or(false) || slash.get(i - j).copied().unwrap_or(false)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TileStatus {
    Empty,
    /// Every causal element admitted; only the causal edge needs checking.
    Full,
    Partial,
}

/// Classifies the tile `row_coords x key_coords` (both ascending).
pub(crate) fn classify_tile(rule: &CompiledRule<'_>, row_coords: &[usize], key_coords: &[usize]) -> TileStatus {
    let mut any_in = false;
    let mut any_out = false;
    for &i in row_coords {
        for &j in key_coords {
            if j > i {
                break;
            }
            if rule.admits_causal(i, j) {
                any_in = true;
            } else {
                any_out = true;
            }
            if any_in && any_out {
                return TileStatus::Partial;
            }
        }
    }
    match (any_in, any_out) {
        (false, _) => TileStatus::Empty,
        (true, false) => TileStatus::Full,
        (true, true) => TileStatus::Partial,
    }
}

/// Executable block-sparse plan: active `(query block, key block)` pairs and
/// the element rule that trims partially covered blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    block_size: usize,
    seq_len: usize,
    active: Vec<(usize, usize)>,
    /// Parallel to `active`; true when the rule admits every causal element.
    full: Vec<bool>,
    rule: ElementRule,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockMaskFile {
    block_size: usize,
    seq_len: usize,
    q_blocks: usize,
    k_blocks: usize,
    active: Vec<[usize; 2]>,
    partial: Vec<[usize; 2]>,
    edge_predicate: ElementRule,
}

impl BlockMask {
    /// Enumerates every causal block and keeps those the rule touches.
    pub fn from_rule(seq_len: usize, block_size: usize, rule: ElementRule) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        rule.validate()?;
        let nb = seq_len.div_ceil(block_size);
        let compiled = rule.compile(seq_len);
        let mut active = Vec::new();
        let mut full = Vec::new();
        let span = |b: usize| -> Vec<usize> { (b * block_size..((b + 1) * block_size).min(seq_len)).collect() };
        for qb in 0..nb {
            let rows = span(qb);
            for kb in 0..=qb {
                match classify_tile(&compiled, &rows, &span(kb)) {
                    TileStatus::Empty => {}
                    status => {
                        active.push((qb, kb));
                        full.push(status == TileStatus::Full);
                    }
                }
            }
        }
        drop(compiled);
        Ok(BlockMask {
            block_size,
            seq_len,
            active,
            full,
            rule,
        })
    }

    /// Restricts `rule` to an explicit set of blocks. Non-causal pairs
    /// (`kb > qb`) and out-of-range pairs are rejected.
    pub fn with_active(
        seq_len: usize,
        block_size: usize,
        rule: ElementRule,
        blocks: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let base = BlockMask::from_rule(seq_len, block_size, rule)?;
        let wanted: BTreeSet<(usize, usize)> = blocks.into_iter().collect();
        let nb = base.q_blocks();
        if let Some(&(qb, kb)) = wanted.iter().find(|&&(qb, kb)| qb >= nb || kb > qb) {
            return Err(Error::InvalidArgument(format!(
                "block ({qb}, {kb}) is out of range or above the diagonal"
            )));
        }
        let (active, full): (Vec<_>, Vec<_>) = base
            .active
            .iter()
            .zip(&base.full)
            .filter(|(p, _)| wanted.contains(p))
            .map(|(p, f)| (*p, *f))
            .unzip();
        Ok(BlockMask { active, full, ..base })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn q_blocks(&self) -> usize {
        self.seq_len.div_ceil(self.block_size)
    }

    pub fn k_blocks(&self) -> usize {
        self.q_blocks()
    }

    pub fn rule(&self) -> &ElementRule {
        &self.rule
    }

    /// Active pairs in row-major order.
    pub fn active(&self) -> &[(usize, usize)] {
        &self.active
    }

    pub(crate) fn active_with_full(&self) -> impl Iterator<Item = ((usize, usize), bool)> + '_ {
        self.active.iter().copied().zip(self.full.iter().copied())
    }

    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, qb: usize, kb: usize) -> bool {
        self.active.binary_search(&(qb, kb)).is_ok()
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        i < self.seq_len && j <= i && self.is_active(i / self.block_size, j / self.block_size) && self.rule.admits(i, j)
    }

    pub fn to_json(&self) -> String {
        let file = BlockMaskFile {
            block_size: self.block_size,
            seq_len: self.seq_len,
            q_blocks: self.q_blocks(),
            k_blocks: self.k_blocks(),
            active: self.active.iter().map(|&(a, b)| [a, b]).collect(),
            partial: self
                .active_with_full()
                .filter(|(_, f)| !f)
                .map(|((a, b), _)| [a, b])
                .collect(),
            edge_predicate: self.rule.clone(),
        };
        serde_json::to_string_pretty(&file).expect("block mask serialises")
    }

    /// Parses and re-validates a mask written by [`BlockMask::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let file: BlockMaskFile = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mask = BlockMask::with_active(
            file.seq_len,
            file.block_size,
            file.edge_predicate,
            file.active.iter().map(|p| (p[0], p[1])),
        )?;
        if mask.q_blocks() != file.q_blocks || mask.k_blocks() != file.k_blocks {
            return Err(Error::InvalidArgument("block counts disagree with seq_len".into()));
        }
        if mask.num_active() != file.active.len() {
            return Err(Error::InvalidArgument(
                "active list names blocks the predicate never admits".into(),
            ));
        }
        Ok(mask)
    }
}

pub fn build_causal(seq_len: usize, block_size: usize) -> Result<BlockMask> {
    BlockMask::from_rule(seq_len, block_size, ElementRule::Causal)
}

/// Sink columns plus a local window. `sink` and `local` are clamped to `seq_len`.
pub fn build_a_shape(seq_len: usize, sink: usize, local: usize, block_size: usize) -> Result<BlockMask> {
    BlockMask::from_rule(
        seq_len,
        block_size,
        ElementRule::AShape {
            sink: sink.min(seq_len),
            local: local.min(seq_len),
        },
    )
}

/// A-shape plus full attention for the last `bottom` query rows.
pub fn build_tri_shape(
    seq_len: usize,
    sink: usize,
    local: usize,
    bottom: usize,
    block_size: usize,
) -> Result<BlockMask> {
    BlockMask::from_rule(
        seq_len,
        block_size,
        ElementRule::TriShape {
            sink: sink.min(seq_len),
            local: local.min(seq_len),
            bottom: bottom.min(seq_len),
            seq_len,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SfVariant {
    Fixed,
    Strided,
}

pub fn build_sf(
    seq_len: usize,
    local: usize,
    stride: usize,
    variant: SfVariant,
    block_size: usize,
) -> Result<BlockMask> {
    let rule = match variant {
        SfVariant::Fixed => ElementRule::SfFixed { local, stride },
        SfVariant::Strided => ElementRule::SfStrided { local, stride },
    };
    BlockMask::from_rule(seq_len, block_size, rule)
}

/// Which grid line families are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridFlags {
    pub hline: bool,
    pub vline: bool,
    pub slash: bool,
}

impl GridFlags {
    pub fn new(hline: bool, vline: bool, slash: bool) -> Self {
        GridFlags { hline, vline, slash }
    }

    /// The seven non-empty flag combinations.
    pub fn all_nonempty() -> Vec<GridFlags> {
        (1u8..8)
            .map(|b| GridFlags::new(b & 1 != 0, b & 2 != 0, b & 4 != 0))
            .collect()
    }
}

pub fn grid_rule(stride: usize, phase: usize, flags: GridFlags, band: usize) -> ElementRule {
    ElementRule::Grid {
        stride,
        phase,
        hline: flags.hline,
        vline: flags.vline,
        slash: flags.slash,
        band,
    }
}

/// Grid lines at `phase` mod `stride`, always unioned with a diagonal band
/// and sink of one block.
pub fn build_grid_mask(
    seq_len: usize,
    stride: usize,
    phase: usize,
    use_hline: bool,
    use_vline: bool,
    use_slash: bool,
    block_size: usize,
) -> Result<BlockMask> {
    if stride == 0 || phase >= stride {
        return Err(Error::InvalidArgument(format!(
            "grid phase {phase} must be below stride {stride}"
        )));
    }
    BlockMask::from_rule(
        seq_len,
        block_size,
        grid_rule(
            stride,
            phase,
            GridFlags::new(use_hline, use_vline, use_slash),
            block_size,
        ),
    )
}

/// Modality-boundary classification of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    NoBoundary,
    KBoundary,
    QBoundary,
    TwoDBoundary,
}

impl Boundary {
    pub const ALL: [Boundary; 4] = [
        Boundary::NoBoundary,
        Boundary::KBoundary,
        Boundary::QBoundary,
        Boundary::TwoDBoundary,
    ];
}

/// Configuration of one head's intra-region sparse pattern.
///
/// `Full` and `DenyAll` are the two trivial ends of the space; `DenyAll` is
/// what the search picks for cross-modality regions a head ignores.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadPattern {
    AShape {
        sink: usize,
        local: usize,
    },
    TriShape {
        sink: usize,
        local: usize,
        bottom: usize,
    },
    SfFixed {
        local: usize,
        stride: usize,
    },
    SfStrided {
        local: usize,
        stride: usize,
    },
    VerticalSlash {
        n_vertical: usize,
        n_slash: usize,
    },
    Grid {
        stride: usize,
        use_hline: bool,
        use_vline: bool,
        use_slash: bool,
        max_stride: usize,
    },
    Full,
    DenyAll,
}

impl HeadPattern {
    pub fn validate(&self) -> Result<()> {
        let positive = |xs: &[usize]| xs.iter().all(|&x| x > 0);
        let ok = match *self {
            HeadPattern::AShape { sink, local } => positive(&[sink, local]),
            HeadPattern::TriShape { sink, local, bottom } => positive(&[sink, local, bottom]),
            HeadPattern::SfFixed { local, stride } | HeadPattern::SfStrided { local, stride } => {
                positive(&[local, stride])
            }
            HeadPattern::VerticalSlash { n_vertical, n_slash } => positive(&[n_vertical, n_slash]),
            HeadPattern::Grid {
                stride,
                use_hline,
                use_vline,
                use_slash,
                max_stride,
            } => stride > 0 && stride <= max_stride && (use_hline || use_vline || use_slash),
            HeadPattern::Full | HeadPattern::DenyAll => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid head pattern {self:?}")))
        }
    }

    /// Short human-readable form, e.g. `grid(8,hv-,1024)`.
    pub fn label(&self) -> String {
        match *self {
            HeadPattern::AShape { sink, local } => format!("a_shape({sink},{local})"),
            HeadPattern::TriShape { sink, local, bottom } => format!("tri_shape({sink},{local},{bottom})"),
            HeadPattern::SfFixed { local, stride } => format!("sf_fixed({local},{stride})"),
            HeadPattern::SfStrided { local, stride } => format!("sf_strided({local},{stride})"),
            HeadPattern::VerticalSlash { n_vertical, n_slash } => format!("vertical_slash({n_vertical},{n_slash})"),
            HeadPattern::Grid {
                stride,
                use_hline,
                use_vline,
                use_slash,
                max_stride,
            } => format!(
                "grid({stride},{}{}{},{max_stride})",
                if use_hline { 'h' } else { '-' },
                if use_vline { 'v' } else { '-' },
                if use_slash { 's' } else { '-' },
            ),
            HeadPattern::Full => "full".into(),
            HeadPattern::DenyAll => "deny_all".into(),
        }
    }

    /// Element rule for patterns that need no online estimation, over a
    /// coordinate space of `seq_len` positions.
    pub fn static_rule(&self, seq_len: usize) -> Option<ElementRule> {
        Some(match *self {
            HeadPattern::AShape { sink, local } => ElementRule::AShape {
                sink: sink.min(seq_len),
                local: local.min(seq_len),
            },
            HeadPattern::TriShape { sink, local, bottom } => ElementRule::TriShape {
                sink: sink.min(seq_len),
                local: local.min(seq_len),
                bottom: bottom.min(seq_len),
                seq_len,
            },
            HeadPattern::SfFixed { local, stride } => ElementRule::SfFixed { local, stride },
            HeadPattern::SfStrided { local, stride } => ElementRule::SfStrided { local, stride },
            HeadPattern::Full => ElementRule::Causal,
            HeadPattern::DenyAll => ElementRule::Deny,
            HeadPattern::VerticalSlash { .. } | HeadPattern::Grid { .. } => return None,
        })
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    if let Some(pos) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / m.cols().max(1),
            col: pos % m.cols().max(1),
        });
    }
    Ok(())
}

/// Fraction of attention mass admitted by `mask`, i.e. admitted mass over
/// the number of rows (each causal row sums to one).
pub fn attention_recall(dense_attn: &Matrix, mask: &BlockMask) -> Result<f64> {
    attention_recall_with(dense_attn, |i, j| mask.admits(i, j))
}

/// [`attention_recall`] for an arbitrary element predicate.
pub fn attention_recall_with<F: Fn(usize, usize) -> bool>(dense_attn: &Matrix, admit: F) -> Result<f64> {
    check_finite(dense_attn)?;
    let s = dense_attn.rows();
    if s == 0 {
        return Ok(0.0);
    }
    let mut captured = 0.0;
    for i in 0..s {
        let row = dense_attn.row(i);
        for (j, &w) in row.iter().enumerate().take(i + 1) {
            if admit(i, j) {
                captured += w;
            }
        }
    }
    Ok(captured / s as f64)
}

/// Causal entries sorted by descending weight; ties go to the lower index.
fn ranked_entries(attn: &Matrix) -> Vec<(usize, usize, f64)> {
    let mut entries = Vec::new();
    for i in 0..attn.rows() {
        for j in 0..=i.min(attn.cols().saturating_sub(1)) {
            entries.push((i, j, attn.get(i, j)));
        }
    }
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    entries
}

fn causal_total(attn: &Matrix) -> f64 {
    (0..attn.rows())
        .map(|i| attn.row(i).iter().take(i + 1).sum::<f64>())
        .sum()
}

/// Smallest greedy (global, descending) set of causal entries whose mass
/// reaches `target_recall` of the total.
pub fn top_k_index(dense_attn: &Matrix, target_recall: f64) -> Result<Vec<(usize, usize)>> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target recall {target_recall} outside (0, 1]"
        )));
    }
    check_finite(dense_attn)?;
    let goal = target_recall * causal_total(dense_attn) * (1.0 - 1e-12);
    let mut acc = 0.0;
    let mut picked = Vec::new();
    for (i, j, w) in ranked_entries(dense_attn) {
        if acc >= goal {
            break;
        }
        acc += w;
        picked.push((i, j));
    }
    Ok(picked)
}

/// Fraction of causal entries needed to reach `target_recall`.
pub fn top_k_coverage(dense_attn: &Matrix, target_recall: f64) -> Result<f64> {
    let picked = top_k_index(dense_attn, target_recall)?.len();
    let s = dense_attn.rows();
    let causal = s * (s + 1) / 2;
    Ok(if causal == 0 {
        0.0
    } else {
        picked as f64 / causal as f64
    })
}

/// Mass captured on `attn_b` by the top-k index built on `attn_a`.
pub fn index_reuse_recall(attn_a: &Matrix, attn_b: &Matrix, target_recall: f64) -> Result<f64> {
    if attn_a.shape() != attn_b.shape() {
        return Err(Error::Shape(format!(
            "attention shapes differ: {:?} vs {:?}",
            attn_a.shape(),
            attn_b.shape()
        )));
    }
    check_finite(attn_b)?;
    let index = top_k_index(attn_a, target_recall)?;
    let total = causal_total(attn_b);
    if total == 0.0 {
        return Ok(0.0);
    }
    let captured: f64 = index.iter().map(|&(i, j)| attn_b.get(i, j)).sum();
    Ok(captured / total)
}

/// FLOPs of computing `tiles` whole `B x B` tiles: `QK^T` plus `PV`, two
/// operations per multiply-accumulate.
pub fn tile_flops(tiles: usize, block_size: usize, head_dim: usize) -> u64 {
    tiles as u64 * (block_size * block_size) as u64 * head_dim as u64 * 4
}

/// Kernel-aware cost: every active block is paid in full.
pub fn flops_count(mask: &BlockMask, head_dim: usize) -> u64 {
    tile_flops(mask.num_active(), mask.block_size(), head_dim)
}

/// Number of causal blocks of a dense `seq_len` sequence.
pub fn dense_tiles(seq_len: usize, block_size: usize) -> usize {
    let nb = seq_len.div_ceil(block_size);
    nb * (nb + 1) / 2
}
