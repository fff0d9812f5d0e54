//! Modality segmentation and the boundary-aware executors.
//!
//! A Q-boundary head runs one pattern per query modality against every key.
//! A 2D-boundary head runs one pattern per ordered `(query, key)` modality
//! pair and merges the per-pair partials row by row.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocksparse::{run_pattern, ExecOptions, Region, Resolved};
use crate::error::{Error, Result};
use crate::masks::HeadPattern;
use crate::tensor::{check_qkv, Matrix, SoftmaxPartial};

pub const TEXT: &str = "text";
pub const VISION: &str = "vision";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Modality(pub String);

impl Modality {
    pub fn new(tag: impl Into<String>) -> Self {
        Modality(tag.into())
    }

    pub fn text() -> Self {
        Modality::new(TEXT)
    }

    pub fn vision() -> Self {
        Modality::new(VISION)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open run `[start, end)` of one modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub tag: Modality,
}

/// Serialised as run-length segments under a declared alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModalityMapFile", into = "ModalityMapFile")]
pub struct ModalityMap {
    labels: Vec<Modality>,
    tags: Vec<Modality>,
    groups: Vec<Vec<usize>>,
    segments: Vec<Segment>,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityMapFile {
    alphabet: Vec<Modality>,
    length: usize,
    segments: Vec<Segment>,
}

/// Groups tokens by tag. Tags are ordered by first appearance and each
/// group keeps ascending positions, so the permutation is stable.
pub fn segment_modalities(labels: &[Modality]) -> Result<ModalityMap> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label sequence".into()));
    }
    let mut tags: Vec<Modality> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    for (i, tag) in labels.iter().enumerate() {
        let g = match tags.iter().position(|t| t == tag) {
            Some(g) => g,
            None => {
                tags.push(tag.clone());
                groups.push(Vec::new());
                tags.len() - 1
            }
        };
        groups[g].push(i);
        match segments.last_mut() {
            Some(seg) if seg.tag == *tag => seg.end = i + 1,
            _ => segments.push(Segment {
                start: i,
                end: i + 1,
                tag: tag.clone(),
            }),
        }
    }
    let perm: Vec<usize> = groups.concat();
    let mut inv_perm = vec![0; perm.len()];
    for (r, &p) in perm.iter().enumerate() {
        inv_perm[p] = r;
    }
    Ok(ModalityMap {
        labels: labels.to_vec(),
        tags,
        groups,
        segments,
        perm,
        inv_perm,
    })
}

impl ModalityMap {
    /// Map from run-length segments, which must tile `[0, S)` in order.
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let mut labels = Vec::new();
        for seg in segments {
            if seg.start != labels.len() || seg.end <= seg.start {
                return Err(Error::InvalidArgument(format!(
                    "segment [{}, {}) does not continue the layout at {}",
                    seg.start,
                    seg.end,
                    labels.len()
                )));
            }
            labels.extend(std::iter::repeat_n(seg.tag.clone(), seg.end - seg.start));
        }
        segment_modalities(&labels)
    }

    pub fn single(tag: Modality, seq_len: usize) -> Result<Self> {
        segment_modalities(&vec![tag; seq_len])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Modality] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &Modality {
        &self.labels[i]
    }

    /// Tags in order of first appearance.
    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    /// Ascending positions carrying `tag`, empty if the tag is absent.
    pub fn indices_of(&self, tag: &Modality) -> &[usize] {
        self.tags
            .iter()
            .position(|t| t == tag)
            .map_or(&[][..], |g| &self.groups[g])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segments of one tag, in order.
    pub fn segments_of<'a>(&'a self, tag: &'a Modality) -> impl Iterator<Item = &'a Segment> + 'a {
        self.segments.iter().filter(move |s| &s.tag == tag)
    }

    /// Rank of every token within its own modality.
    pub fn stream_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.len()];
        for group in &self.groups {
            for (r, &p) in group.iter().enumerate() {
                idx[p] = r;
            }
        }
        idx
    }

    /// Index into [`ModalityMap::tags`] for every token.
    pub fn tag_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.len()];
        for (g, group) in self.groups.iter().enumerate() {
            for &p in group {
                idx[p] = g;
            }
        }
        idx
    }

    /// Permuted position `r` holds original token `perm[r]`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("modality map serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

impl From<ModalityMap> for ModalityMapFile {
    fn from(map: ModalityMap) -> Self {
        ModalityMapFile {
            alphabet: map.tags,
            length: map.labels.len(),
            segments: map.segments,
        }
    }
}

impl TryFrom<ModalityMapFile> for ModalityMap {
    type Error = Error;

    fn try_from(file: ModalityMapFile) -> Result<Self> {
        let map = ModalityMap::from_segments(&file.segments)?;
        if map.len() != file.length {
            return Err(Error::InvalidArgument(format!(
                "segments cover {} tokens, header says {}",
                map.len(),
                file.length
            )));
        }
        if map.tags != file.alphabet {
            return Err(Error::InvalidArgument(
                "alphabet does not match the tags in first-appearance order".into(),
            ));
        }
        Ok(map)
    }
}

/// Causality between two gathered index lists.
#[derive(Clone, Copy, Debug)]
pub struct CrossMask<'a> {
    q_idx: &'a [usize],
    k_idx: &'a [usize],
}

impl CrossMask<'_> {
    /// Gathered query `a` may see gathered key `b`.
    pub fn admits(&self, a: usize, b: usize) -> bool {
        self.k_idx[b] <= self.q_idx[a]
    }

    pub fn rows(&self) -> usize {
        self.q_idx.len()
    }

    pub fn cols(&self) -> usize {
        self.k_idx.len()
    }
}

pub fn build_cross_mask<'a>(q_idx: &'a [usize], k_idx: &'a [usize]) -> CrossMask<'a> {
    CrossMask { q_idx, k_idx }
}

/// Per query-modality patterns for Q-boundary heads.
pub type ModalityPatterns = BTreeMap<Modality, HeadPattern>;
/// Per `(query, key)` modality patterns for 2D-boundary heads.
pub type PairPatterns = BTreeMap<(Modality, Modality), HeadPattern>;

pub fn pair_label(q: &Modality, k: &Modality) -> String {
    format!("{q}->{k}")
}

/// One region of a boundary execution and the pattern it ran.
#[derive(Clone, Debug)]
pub struct RegionPart {
    pub label: String,
    pub region: Region,
    pub resolved: Resolved,
}

#[derive(Clone, Debug)]
pub struct BoundaryRun {
    pub output: Matrix,
    pub empty_rows: Vec<usize>,
    pub tiles: usize,
    pub flops: u64,
    pub parts: Vec<RegionPart>,
}

impl BoundaryRun {
    /// Row-major `S x S` table of the elements the run admitted, in
    /// original positions.
    pub fn admitted(&self, seq_len: usize) -> Vec<bool> {
        let mut table = vec![false; seq_len * seq_len];
        for part in &self.parts {
            let rule = part.resolved.to_rule();
            let compiled = rule.compile(part.region.n_coords());
            let reg = &part.region;
            for (&qp, &qc) in reg.q_positions().iter().zip(reg.q_coords()) {
                for (&kp, &kc) in reg.k_positions().iter().zip(reg.k_coords()) {
                    if kc > qc {
                        break;
                    }
                    if compiled.admits_causal(qc, kc) {
                        table[qp * seq_len + kp] = true;
                    }
                }
            }
        }
        table
    }
}

struct Accumulator {
    partial: SoftmaxPartial,
    tiles: usize,
    flops: u64,
    parts: Vec<RegionPart>,
}

impl Accumulator {
    fn new(seq_len: usize, dim: usize) -> Self {
        Accumulator {
            partial: SoftmaxPartial::empty(seq_len, dim),
            tiles: 0,
            flops: 0,
            parts: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        label: String,
        region: Region,
        pattern: &HeadPattern,
        scale: f64,
        opts: &ExecOptions,
    ) -> Result<()> {
        let run = run_pattern(q, k, v, &region, pattern, scale, opts)?;
        for (r, &p) in region.q_positions().iter().enumerate() {
            self.partial.absorb_row(p, &run.partial, r);
        }
        self.tiles += run.tiles;
        self.flops += run.flops;
        self.parts.push(RegionPart {
            label,
            region,
            resolved: run.resolved,
        });
        Ok(())
    }

    fn finish(self) -> BoundaryRun {
        let fin = self.partial.finalize();
        BoundaryRun {
            output: fin.output,
            empty_rows: fin.empty_rows,
            tiles: self.tiles,
            flops: self.flops,
            parts: self.parts,
        }
    }
}

fn check_map(q: &Matrix, k: &Matrix, v: &Matrix, map: &ModalityMap) -> Result<()> {
    check_qkv(q, k, v)?;
    if map.len() != q.rows() {
        return Err(Error::Shape(format!(
            "modality map covers {} tokens but the sequence has {}",
            map.len(),
            q.rows()
        )));
    }
    Ok(())
}

/// One pattern over the whole sequence: the path for heads without a
/// modality boundary and for K-boundary heads.
pub fn global_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    pattern: &HeadPattern,
    scale: f64,
    opts: &ExecOptions,
) -> Result<BoundaryRun> {
    check_qkv(q, k, v)?;
    let mut acc = Accumulator::new(q.rows(), v.cols());
    acc.run(q, k, v, "*".into(), Region::full(q.rows()), pattern, scale, opts)?;
    Ok(acc.finish())
}

pub fn q_boundary_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ModalityMap,
    per_modality: &ModalityPatterns,
    scale: f64,
) -> Result<Matrix> {
    q_boundary_attention_with(q, k, v, map, per_modality, scale, &ExecOptions::default()).map(|r| r.output)
}

/// Each modality's query rows run their own pattern against every key in
/// original coordinates; the pattern is estimated from that modality's last
/// query rows.
pub fn q_boundary_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ModalityMap,
    per_modality: &ModalityPatterns,
    scale: f64,
    opts: &ExecOptions,
) -> Result<BoundaryRun> {
    check_map(q, k, v, map)?;
    let s = q.rows();
    let mut acc = Accumulator::new(s, v.cols());
    for tag in map.tags() {
        let pattern = per_modality
            .get(tag)
            .ok_or_else(|| Error::MissingPattern(format!("modality {tag}")))?;
        let region = Region::rows(map.indices_of(tag), s)?;
        acc.run(q, k, v, tag.to_string(), region, pattern, scale, opts)?;
    }
    Ok(acc.finish())
}

pub fn two_d_boundary_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ModalityMap,
    per_pair: &PairPatterns,
    scale: f64,
) -> Result<Matrix> {
    two_d_boundary_attention_with(q, k, v, map, per_pair, scale, &ExecOptions::default()).map(|r| r.output)
}

/// Every ordered modality pair with causal overlap runs its own pattern in
/// pair coordinates (ranks within the union of both groups); the per-pair
/// partials are merged per query row.
pub fn two_d_boundary_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ModalityMap,
    per_pair: &PairPatterns,
    scale: f64,
    opts: &ExecOptions,
) -> Result<BoundaryRun> {
    check_map(q, k, v, map)?;
    let mut acc = Accumulator::new(q.rows(), v.cols());
    for tq in map.tags() {
        for tk in map.tags() {
            let region = Region::pair(map.indices_of(tq), map.indices_of(tk))?;
            if !region.has_causal_overlap() {
                continue;
            }
            let label = pair_label(tq, tk);
            let pattern = per_pair
                .get(&(tq.clone(), tk.clone()))
                .ok_or_else(|| Error::MissingPattern(format!("pair {label}")))?;
            acc.run(q, k, v, label, region, pattern, scale, opts)?;
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dense_causal_attention, masked_dense_attention};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tags(s: &str) -> Vec<Modality> {
        s.chars()
            .map(|c| if c == 'V' { Modality::vision() } else { Modality::text() })
            .collect()
    }

    fn qkv(s: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
        (m(), m(), m())
    }

    #[test]
    fn stable_grouping() {
        let map = segment_modalities(&tags("VVTTVV")).unwrap();
        assert_eq!(map.perm(), &[0, 1, 4, 5, 2, 3]);
        assert_eq!(map.indices_of(&Modality::vision()), &[0, 1, 4, 5]);
        for (r, &p) in map.perm().iter().enumerate() {
            assert_eq!(map.inv_perm()[p], r);
        }
        assert_eq!(map.segments().len(), 3);

        let single = segment_modalities(&tags("TTTT")).unwrap();
        assert_eq!(single.perm(), &[0, 1, 2, 3]);
        let alt = segment_modalities(&tags("VTVTVTVT")).unwrap();
        assert_eq!(alt.indices_of(&Modality::vision()), &[0, 2, 4, 6]);
        assert!(segment_modalities(&[]).is_err());
    }

    #[test]
    fn map_json_roundtrip() {
        let map = segment_modalities(&tags("VVTTTVVT")).unwrap();
        let back = ModalityMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        let broken = map.to_json().replace("\"length\": 8", "\"length\": 9");
        assert!(ModalityMap::from_json(&broken).is_err());
    }

    #[test]
    fn cross_mask_hand_checks() {
        let all: Vec<usize> = (0..5).collect();
        let m = build_cross_mask(&all, &all);
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(m.admits(a, b), b <= a);
            }
        }
        let (vis, txt) = ([0usize, 1], [2usize, 3]);
        let tv = build_cross_mask(&txt, &vis);
        let vt = build_cross_mask(&vis, &txt);
        for a in 0..2 {
            for b in 0..2 {
                assert!(tv.admits(a, b));
                assert!(!vt.admits(a, b));
            }
        }
    }

    #[test]
    fn full_patterns_equal_dense() {
        let labels = tags("VVVTTVVVTTTTVVVV");
        let map = segment_modalities(&labels).unwrap();
        let (q, k, v) = qkv(labels.len(), 4, 3);
        let dense = dense_causal_attention(&q, &k, &v, 0.5).unwrap();
        let per_mod: ModalityPatterns = map.tags().iter().map(|t| (t.clone(), HeadPattern::Full)).collect();
        let opts = ExecOptions::with_block_size(4);
        let qb = q_boundary_attention_with(&q, &k, &v, &map, &per_mod, 0.5, &opts).unwrap();
        assert!(qb.output.max_abs_diff(&dense) <= 1e-12);

        let mut per_pair = PairPatterns::new();
        for a in map.tags() {
            for b in map.tags() {
                per_pair.insert((a.clone(), b.clone()), HeadPattern::Full);
            }
        }
        let td = two_d_boundary_attention_with(&q, &k, &v, &map, &per_pair, 0.5, &opts).unwrap();
        assert!(td.output.max_abs_diff(&dense) <= 1e-12);
        assert!(td
            .admitted(16)
            .iter()
            .enumerate()
            .all(|(x, &a)| a == (x % 16 <= x / 16)));
    }

    #[test]
    fn missing_patterns_are_errors() {
        let map = segment_modalities(&tags("VVTT")).unwrap();
        let (q, k, v) = qkv(4, 2, 1);
        let only_v: ModalityPatterns = [(Modality::vision(), HeadPattern::Full)].into_iter().collect();
        assert!(matches!(
            q_boundary_attention(&q, &k, &v, &map, &only_v, 1.0),
            Err(Error::MissingPattern(_))
        ));
        // Vision queries never see text keys, so that pair needs no entry.
        let pairs: PairPatterns = [
            ((Modality::vision(), Modality::vision()), HeadPattern::Full),
            ((Modality::text(), Modality::text()), HeadPattern::Full),
        ]
        .into_iter()
        .collect();
        assert!(matches!(
            two_d_boundary_attention(&q, &k, &v, &map, &pairs, 1.0),
            Err(Error::MissingPattern(_))
        ));
        let mut complete = pairs.clone();
        complete.insert((Modality::text(), Modality::vision()), HeadPattern::DenyAll);
        assert!(two_d_boundary_attention(&q, &k, &v, &map, &complete, 1.0).is_ok());
    }

    #[test]
    fn mixed_patterns_match_stitched_oracle() {
        let labels = tags("VVVVVVVVTTTTTTTTVVVVVVVVVVVVVVVVTTTTTTTTVVVVVVVV");
        let s = labels.len();
        let map = segment_modalities(&labels).unwrap();
        let (q, k, v) = qkv(s, 6, 11);
        let opts = ExecOptions {
            last_q: 8,
            ..ExecOptions::with_block_size(4)
        };
        let grid = HeadPattern::Grid {
            stride: 4,
            use_hline: true,
            use_vline: true,
            use_slash: false,
            max_stride: 16,
        };
        let vs = HeadPattern::VerticalSlash {
            n_vertical: 2,
            n_slash: 2,
        };
        let mut pairs = PairPatterns::new();
        pairs.insert((Modality::vision(), Modality::vision()), grid.clone());
        pairs.insert((Modality::text(), Modality::text()), vs.clone());
        pairs.insert(
            (Modality::text(), Modality::vision()),
            HeadPattern::AShape { sink: 1, local: 8 },
        );
        pairs.insert(
            (Modality::vision(), Modality::text()),
            HeadPattern::AShape { sink: 1, local: 8 },
        );
        let run = two_d_boundary_attention_with(&q, &k, &v, &map, &pairs, 0.5, &opts).unwrap();
        let table = run.admitted(s);
        let want = masked_dense_attention(&q, &k, &v, 0.5, |i, j| table[i * s + j]).unwrap();
        assert!(run.output.max_abs_diff(&want.output) <= 1e-12);
        assert_eq!(run.empty_rows, want.empty_rows);

        let per_mod: ModalityPatterns = [(Modality::vision(), grid), (Modality::text(), vs)]
            .into_iter()
            .collect();
        let run = q_boundary_attention_with(&q, &k, &v, &map, &per_mod, 0.5, &opts).unwrap();
        let table = run.admitted(s);
        let want = masked_dense_attention(&q, &k, &v, 0.5, |i, j| table[i * s + j]).unwrap();
        assert!(run.output.max_abs_diff(&want.output) <= 1e-12);
    }

    #[test]
    fn single_modality_two_d_matches_global() {
        let map = ModalityMap::single(Modality::vision(), 24).unwrap();
        let (q, k, v) = qkv(24, 4, 5);
        let pattern = HeadPattern::AShape { sink: 2, local: 5 };
        let opts = ExecOptions::with_block_size(4);
        let pairs: PairPatterns = [((Modality::vision(), Modality::vision()), pattern.clone())]
            .into_iter()
            .collect();
        let td = two_d_boundary_attention_with(&q, &k, &v, &map, &pairs, 0.5, &opts).unwrap();
        let gl = global_attention_with(&q, &k, &v, &pattern, 0.5, &opts).unwrap();
        assert_eq!(td.output, gl.output);
        assert_eq!(td.flops, gl.flops);
    }
}
