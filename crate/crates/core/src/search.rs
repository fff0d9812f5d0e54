//! Offline, kernel-aware pattern search.
//!
//! Candidates are priced by the tiles they would launch and scored by how
//! close their attention output stays to the exact output. A head is
//! searched in three phases: per query modality, per ordered modality pair,
//! and finally per boundary type end to end.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocksparse::{planned_tiles, resolve_pattern, run_resolved, ExecOptions, Region, Resolved};
use crate::error::{Error, Result};
use crate::estimator::{region_slab, search_grid};
use crate::masks::{build_a_shape, dense_tiles, flops_count, tile_flops, Boundary, HeadPattern};
use crate::modality::{
    global_attention_with, pair_label, q_boundary_attention_with, two_d_boundary_attention_with, BoundaryRun, Modality,
    ModalityMap, ModalityPatterns, PairPatterns,
};
use crate::synth::Fixture;
use crate::tensor::{default_scale, dense_causal_attention, Matrix, SoftmaxPartial};

/// Calibration length the reference search space and budget are sized for.
pub const REFERENCE_LEN: usize = 25_000;
/// Reference budget: A-shape with this many sink and local tokens.
pub const REFERENCE_BUDGET: (usize, usize) = (1024, 4096);
/// Key of the single global pattern in [`HeadConfig::intra`].
pub const GLOBAL_KEY: &str = "*";

/// Where a grid candidate's stride comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrideSource {
    /// The input's declared tokens per frame.
    FrameStride,
    /// The stride the grid estimator picks on the calibration input.
    Detected,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub stride: StrideSource,
    pub use_hline: bool,
    pub use_vline: bool,
    pub use_slash: bool,
    pub max_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub grid: Vec<GridCandidate>,
    /// `(sink, local)` pairs.
    pub a_shape: Vec<(usize, usize)>,
    /// `(n_vertical, n_slash)` pairs.
    pub vertical_slash: Vec<(usize, usize)>,
    pub boundaries: Vec<Boundary>,
}

impl SearchSpace {
    /// The reference space, sized for [`REFERENCE_LEN`] tokens.
    pub fn reference() -> Self {
        let flags = [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (false, true, true),
            (true, true, true),
        ];
        let grid = [StrideSource::FrameStride, StrideSource::Detected]
            .iter()
            .flat_map(|&stride| {
                flags.iter().map(move |&(h, v, s)| GridCandidate {
                    stride,
                    use_hline: h,
                    use_vline: v,
                    use_slash: s,
                    max_stride: 1024,
                })
            })
            .collect();
        SearchSpace {
            grid,
            a_shape: vec![(128, 1024), (128, 2048), (128, 4096)],
            vertical_slash: vec![
                (1000, 1024),
                (1000, 2048),
                (2000, 2048),
                (1000, 3096),
                (2000, 3096),
                (1000, 4096),
                (2000, 4096),
                (3500, 200),
                (1000, 2500),
            ],
            boundaries: Boundary::ALL.to_vec(),
        }
    }

    /// Reference space with token counts scaled to `seq_len`.
    pub fn for_length(seq_len: usize) -> Self {
        SearchSpace::reference().scaled(seq_len as f64 / REFERENCE_LEN as f64)
    }

    /// Multiplies every sink, window and line count by `factor` (at least 1).
    pub fn scaled(&self, factor: f64) -> Self {
        let sc = |x: usize| ((x as f64 * factor).round() as usize).max(1);
        SearchSpace {
            grid: self.grid.clone(),
            a_shape: self.a_shape.iter().map(|&(a, b)| (sc(a), sc(b))).collect(),
            vertical_slash: self.vertical_slash.iter().map(|&(a, b)| (sc(a), sc(b))).collect(),
            boundaries: self.boundaries.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len() + self.a_shape.len() + self.vertical_slash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() || self.boundaries.is_empty() {
            return Err(Error::InvalidArgument("empty search space".into()));
        }
        for g in &self.grid {
            let probe = match g.stride {
                StrideSource::Fixed(s) => s,
                _ => 1,
            };
            HeadPattern::Grid {
                stride: probe,
                use_hline: g.use_hline,
                use_vline: g.use_vline,
                use_slash: g.use_slash,
                max_stride: g.max_stride,
            }
            .validate()?;
        }
        for &(sink, local) in &self.a_shape {
            HeadPattern::AShape { sink, local }.validate()?;
        }
        for &(n_vertical, n_slash) in &self.vertical_slash {
            HeadPattern::VerticalSlash { n_vertical, n_slash }.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: SearchSpace = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serialises") + "\n"
    }

    /// Concrete candidates for one region, deduplicated in list order.
    /// `frame_stride` instantiates frame-stride entries (skipped when
    /// unknown); `detected` instantiates detected-stride entries.
    pub fn candidates(&self, frame_stride: Option<usize>, detected: Option<usize>) -> Vec<HeadPattern> {
        let mut out: Vec<HeadPattern> = Vec::new();
        let mut push = |p: HeadPattern| {
            if p.validate().is_ok() && !out.contains(&p) {
                out.push(p);
            }
        };
        for g in &self.grid {
            let stride = match g.stride {
                StrideSource::FrameStride => frame_stride,
                StrideSource::Detected => detected,
                StrideSource::Fixed(s) => Some(s),
            };
            if let Some(stride) = stride {
                push(HeadPattern::Grid {
                    stride,
                    use_hline: g.use_hline,
                    use_vline: g.use_vline,
                    use_slash: g.use_slash,
                    max_stride: g.max_stride,
                });
            }
        }
        for &(sink, local) in &self.a_shape {
            push(HeadPattern::AShape { sink, local });
        }
        for &(n_vertical, n_slash) in &self.vertical_slash {
            push(HeadPattern::VerticalSlash { n_vertical, n_slash });
        }
        out
    }

    fn max_grid_stride(&self) -> usize {
        self.grid.iter().map(|g| g.max_stride).max().unwrap_or(1)
    }
}

/// FLOPs budget of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    /// Reference A-shape budget with sink and window scaled to the input.
    Scaled,
    /// A-shape with these sink and window sizes on the input.
    AShape {
        sink: usize,
        local: usize,
    },
    Flops(u64),
    Unbounded,
}

impl Budget {
    /// Sink and window of the A-shape this budget is pegged to, if any.
    pub fn a_shape(&self, seq_len: usize) -> Option<(usize, usize)> {
        match *self {
            Budget::Scaled => {
                let f = seq_len as f64 / REFERENCE_LEN as f64;
                let sc = |x: usize| ((x as f64 * f).round() as usize).max(1);
                Some((sc(REFERENCE_BUDGET.0), sc(REFERENCE_BUDGET.1)))
            }
            Budget::AShape { sink, local } => Some((sink, local)),
            _ => None,
        }
    }

    pub fn flops(&self, seq_len: usize, block_size: usize, head_dim: usize) -> Result<u64> {
        Ok(match *self {
            Budget::Flops(f) => f,
            Budget::Unbounded => u64::MAX,
            _ => {
                let (sink, local) = self.a_shape(seq_len).expect("a-shape budget");
                flops_count(&build_a_shape(seq_len, sink, local, block_size)?, head_dim)
            }
        })
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Scaled => f.write_str("scaled"),
            Budget::AShape { sink, local } => write!(f, "a_shape:{sink},{local}"),
            Budget::Flops(n) => write!(f, "{n}"),
            Budget::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    /// `scaled`, `unbounded`, `a_shape:SINK,LOCAL` or a FLOPs count.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("unrecognised budget `{s}`"));
        match s {
            "scaled" => Ok(Budget::Scaled),
            "unbounded" => Ok(Budget::Unbounded),
            _ => {
                if let Some(rest) = s.strip_prefix("a_shape:") {
                    let (a, b) = rest.split_once(',').ok_or_else(bad)?;
                    Ok(Budget::AShape {
                        sink: a.trim().parse().map_err(|_| bad())?,
                        local: b.trim().parse().map_err(|_| bad())?,
                    })
                } else {
                    s.parse().map(Budget::Flops).map_err(|_| bad())
                }
            }
        }
    }
}

/// One priced and, if affordable, scored candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pattern: HeadPattern,
    pub resolved: Resolved,
    pub flops: u64,
    /// Normalised L2 distance to the exact output; `None` when over budget.
    pub distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub winner: usize,
    pub evaluations: Vec<Evaluation>,
}

impl SearchOutcome {
    pub fn best(&self) -> &Evaluation {
        &self.evaluations[self.winner]
    }
}

/// `||a - b|| / ||b||` over all entries.
pub fn normalized_distance(a: &Matrix, b: &Matrix) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Exact attention of the region's rows over the region's keys.
pub fn region_oracle(q: &Matrix, k: &Matrix, v: &Matrix, region: &Region, scale: f64) -> Result<Matrix> {
    let mut is_key = vec![false; q.rows()];
    for &p in region.k_positions() {
        is_key[p] = true;
    }
    let p = SoftmaxPartial::compute(q, k, v, scale, region.q_positions(), |_, j| is_key[j])?;
    Ok(p.finalize().output)
}

/// Picks the candidate with the smallest output distance among those whose
/// planned FLOPs fit `budget`. Ties keep the earlier candidate.
#[allow(clippy::too_many_arguments)]
pub fn kernel_aware_search(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    region: &Region,
    candidates: &[HeadPattern],
    budget: u64,
    scale: f64,
    opts: &ExecOptions,
) -> Result<SearchOutcome> {
    if region.is_empty() {
        return Err(Error::InvalidArgument("empty search region".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate list".into()));
    }
    let oracle = region_oracle(q, k, v, region, scale)?;
    let mut evaluations = Vec::with_capacity(candidates.len());
    let mut winner: Option<usize> = None;
    for pattern in candidates {
        let resolved = resolve_pattern(q, k, region, pattern, scale, opts)?;
        let flops = tile_flops(
            planned_tiles(region, &resolved, opts.block_size),
            opts.block_size,
            q.cols(),
        );
        let distance = if flops <= budget {
            let run = run_resolved(q, k, v, region, resolved.clone(), scale, opts)?;
            let d = normalized_distance(&run.partial.finalize().output, &oracle);
            let better = winner.is_none_or(|w: usize| {
                d < evaluations
                    .get(w)
                    .and_then(|e: &Evaluation| e.distance)
                    .unwrap_or(f64::INFINITY)
            });
            if better {
                winner = Some(evaluations.len());
            }
            Some(d)
        } else {
            None
        };
        evaluations.push(Evaluation {
            pattern: pattern.clone(),
            resolved,
            flops,
            distance,
        });
    }
    match winner {
        Some(winner) => Ok(SearchOutcome { winner, evaluations }),
        None => {
            let cheapest = evaluations
                .iter()
                .min_by_key(|e| e.flops)
                .expect("candidates are non-empty");
            Err(Error::BudgetInfeasible {
                budget,
                cheapest: cheapest.pattern.label(),
                flops: cheapest.flops,
            })
        }
    }
}

/// Searched configuration of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub head_id: String,
    pub boundary: Boundary,
    /// Query modality (or `"*"` for the global pattern) to pattern.
    pub intra: BTreeMap<String, HeadPattern>,
    /// `"query->key"` modality pair to pattern.
    #[serde(default)]
    pub cross: BTreeMap<String, HeadPattern>,
    pub flops: u64,
    pub score: f64,
}

impl HeadConfig {
    /// One pattern over the whole sequence.
    pub fn global(head_id: impl Into<String>, pattern: HeadPattern) -> Self {
        let mut intra = BTreeMap::new();
        intra.insert(GLOBAL_KEY.to_string(), pattern);
        HeadConfig {
            head_id: head_id.into(),
            boundary: Boundary::NoBoundary,
            intra,
            cross: BTreeMap::new(),
            flops: 0,
            score: 0.0,
        }
    }

    fn modality_patterns(&self) -> ModalityPatterns {
        self.intra
            .iter()
            .filter(|(k, _)| k.as_str() != GLOBAL_KEY)
            .map(|(k, p)| (Modality::new(k.clone()), p.clone()))
            .collect()
    }

    fn pair_patterns(&self, map: &ModalityMap) -> PairPatterns {
        let mut pairs = PairPatterns::new();
        for a in map.tags() {
            for b in map.tags() {
                let found = if a == b {
                    self.intra.get(a.as_str())
                } else {
                    self.cross.get(&pair_label(a, b))
                };
                if let Some(p) = found {
                    pairs.insert((a.clone(), b.clone()), p.clone());
                }
            }
        }
        pairs
    }

    /// Runs the configured sparse path on one input.
    pub fn execute(
        &self,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        map: &ModalityMap,
        scale: f64,
        opts: &ExecOptions,
    ) -> Result<BoundaryRun> {
        match self.boundary {
            Boundary::NoBoundary | Boundary::KBoundary => {
                let pattern = self
                    .intra
                    .get(GLOBAL_KEY)
                    .ok_or_else(|| Error::MissingPattern(format!("head {} global pattern", self.head_id)))?;
                global_attention_with(q, k, v, pattern, scale, opts)
            }
            Boundary::QBoundary => q_boundary_attention_with(q, k, v, map, &self.modality_patterns(), scale, opts),
            Boundary::TwoDBoundary => {
                two_d_boundary_attention_with(q, k, v, map, &self.pair_patterns(map), scale, opts)
            }
        }
    }
}

/// Inputs that shape the candidate list but are not part of the space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SearchContext {
    pub frame_stride: Option<usize>,
}

/// One scored boundary type of phase three.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScore {
    pub boundary: Boundary,
    pub flops: u64,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct HeadSearch {
    pub config: HeadConfig,
    pub boundaries: Vec<BoundaryScore>,
}

fn region_budget(budget: u64, region: &Region, seq_len: usize, block_size: usize) -> u64 {
    if budget == u64::MAX {
        return budget;
    }
    let share = region.dense_tiles(block_size) as f64 / dense_tiles(seq_len, block_size) as f64;
    (budget as f64 * share).floor() as u64
}

/// Stride the grid estimator finds on the region's last rows.
fn detect_stride(
    q: &Matrix,
    k: &Matrix,
    region: &Region,
    space: &SearchSpace,
    scale: f64,
    opts: &ExecOptions,
) -> Option<usize> {
    let n = region.n_coords();
    let hi = space.max_grid_stride().min(n / 4);
    if hi < 2 {
        return None;
    }
    let nq = region.q_positions().len();
    let take = opts.last_q.min(nq);
    let slab = region_slab(
        q,
        k,
        scale,
        &region.q_positions()[nq - take..],
        &region.q_coords()[nq - take..],
        region.k_positions(),
        region.k_coords(),
        n,
    );
    let strides: Vec<usize> = (2..=hi).collect();
    search_grid(&slab.weights, &strides).ok().map(|e| e.stride)
}

/// Searches one region with the space's token counts scaled by the
/// region's share of the sequence. With `relaxed`, a region whose share of
/// the budget fits no candidate is searched at the cheapest candidate's
/// cost instead; the whole-head budget is enforced afterwards.
#[allow(clippy::too_many_arguments)]
fn search_region(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    region: &Region,
    space: &SearchSpace,
    ctx: &SearchContext,
    extra: &[HeadPattern],
    budget: u64,
    relaxed: bool,
    scale: f64,
    opts: &ExecOptions,
) -> Result<SearchOutcome> {
    let detected = detect_stride(q, k, region, space, scale, opts);
    let space = space.scaled(region.n_coords() as f64 / q.rows() as f64);
    let mut candidates = space.candidates(ctx.frame_stride, detected);
    candidates.extend(extra.iter().cloned());
    match kernel_aware_search(q, k, v, region, &candidates, budget, scale, opts) {
        Err(Error::BudgetInfeasible { flops, .. }) if relaxed => {
            kernel_aware_search(q, k, v, region, &candidates, flops, scale, opts)
        }
        other => other,
    }
}

/// Full three-phase search of one head.
#[allow(clippy::too_many_arguments)]
pub fn search_head(
    head_id: &str,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ModalityMap,
    space: &SearchSpace,
    ctx: &SearchContext,
    budget: u64,
    opts: &ExecOptions,
) -> Result<HeadSearch> {
    space.validate()?;
    let s = q.rows();
    if map.len() != s {
        return Err(Error::ConfigMismatch(format!(
            "layout has {} tokens but the head has {s} rows",
            map.len()
        )));
    }
    let scale = default_scale(q.cols());
    let b = opts.block_size;
    let oracle = dense_causal_attention(q, k, v, scale)?;
    let mut scored: Vec<(HeadConfig, BoundaryScore)> = Vec::new();
    let mut first_err: Option<Error> = None;
    let keep_err = |e: Error, slot: &mut Option<Error>| {
        if slot.is_none() {
            *slot = Some(e);
        }
    };
    let finish = |mut cfg: HeadConfig, run: BoundaryRun, scored: &mut Vec<(HeadConfig, BoundaryScore)>| {
        let distance = normalized_distance(&run.output, &oracle);
        cfg.flops = run.flops;
        cfg.score = 1.0 - distance;
        scored.push((
            cfg.clone(),
            BoundaryScore {
                boundary: cfg.boundary,
                flops: run.flops,
                distance,
            },
        ));
    };

    let single = map.tags().len() == 1;
    let wanted = |bd: Boundary| single && bd == Boundary::NoBoundary || !single && space.boundaries.contains(&bd);

    // Global pattern: no boundary, and K-boundary heads, which run the same way.
    if wanted(Boundary::NoBoundary) || wanted(Boundary::KBoundary) {
        let region = Region::full(s);
        match search_region(q, k, v, &region, space, ctx, &[], budget, false, scale, opts) {
            Ok(out) => {
                let mut cfg = HeadConfig::global(head_id, out.best().pattern.clone());
                cfg.boundary = Boundary::NoBoundary;
                let run = cfg.execute(q, k, v, map, scale, opts)?;
                finish(cfg, run, &mut scored);
            }
            Err(e) => keep_err(e, &mut first_err),
        }
    }

    // Phase one: each query modality against every key.
    if wanted(Boundary::QBoundary) {
        let mut intra = BTreeMap::new();
        let mut ok = true;
        for tag in map.tags() {
            let region = Region::rows(map.indices_of(tag), s)?;
            let share = region_budget(budget, &region, s, b);
            match search_region(q, k, v, &region, space, ctx, &[], share, true, scale, opts) {
                Ok(out) => {
                    intra.insert(tag.to_string(), out.best().pattern.clone());
                }
                Err(e) => {
                    keep_err(e, &mut first_err);
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let cfg = HeadConfig {
                head_id: head_id.to_string(),
                boundary: Boundary::QBoundary,
                intra,
                cross: BTreeMap::new(),
                flops: 0,
                score: 0.0,
            };
            let run = cfg.execute(q, k, v, map, scale, opts)?;
            finish(cfg, run, &mut scored);
        }
    }

    // Phase two: every ordered modality pair in pair coordinates.
    if wanted(Boundary::TwoDBoundary) {
        let mut intra = BTreeMap::new();
        let mut cross = BTreeMap::new();
        let mut ok = true;
        'pairs: for a in map.tags() {
            for bt in map.tags() {
                let region = Region::pair(map.indices_of(a), map.indices_of(bt))?;
                if !region.has_causal_overlap() {
                    continue;
                }
                let share = region_budget(budget, &region, s, b);
                let extra = if a == bt { vec![] } else { vec![HeadPattern::DenyAll] };
                let frame = if a == bt { ctx } else { &SearchContext::default() };
                match search_region(q, k, v, &region, space, frame, &extra, share, true, scale, opts) {
                    Ok(out) => {
                        let p = out.best().pattern.clone();
                        if a == bt {
                            intra.insert(a.to_string(), p);
                        } else {
                            cross.insert(pair_label(a, bt), p);
                        }
                    }
                    Err(e) => {
                        keep_err(e, &mut first_err);
                        ok = false;
                        break 'pairs;
                    }
                }
            }
        }
        if ok {
            let cfg = HeadConfig {
                head_id: head_id.to_string(),
                boundary: Boundary::TwoDBoundary,
                intra,
                cross,
                flops: 0,
                score: 0.0,
            };
            let run = cfg.execute(q, k, v, map, scale, opts)?;
            finish(cfg, run, &mut scored);
        }
    }

    // Phase three: end-to-end comparison under the whole-head budget.
    let boundaries: Vec<BoundaryScore> = scored.iter().map(|(_, s)| s.clone()).collect();
    let best = scored.into_iter().filter(|(_, sc)| sc.flops <= budget).fold(
        None::<(HeadConfig, BoundaryScore)>,
        |acc, cur| match acc {
            Some(a) if a.1.distance <= cur.1.distance => Some(a),
            _ => Some(cur),
        },
    );
    match best {
        Some((config, _)) => Ok(HeadSearch { config, boundaries }),
        None => Err(first_err.unwrap_or_else(|| {
            let cheapest = boundaries.iter().min_by_key(|s| s.flops);
            Error::BudgetInfeasible {
                budget,
                cheapest: cheapest.map_or("none".into(), |s| format!("{:?}", s.boundary)),
                flops: cheapest.map_or(0, |s| s.flops),
            }
        })),
    }
}

/// Persisted result of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTable {
    pub seq_len: usize,
    pub block_size: usize,
    pub last_q: usize,
    pub budget: String,
    pub budget_flops: u64,
    pub tags: Vec<Modality>,
    pub heads: Vec<HeadConfig>,
}

impl CalibrationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration table serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Searches every head of a calibration fixture.
pub fn calibrate(
    fixture: &Fixture,
    space: &SearchSpace,
    budget: Budget,
    opts: &ExecOptions,
) -> Result<CalibrationTable> {
    space.validate()?;
    let s = fixture.seq_len();
    let d = fixture.heads.first().map_or(0, |h| h.data.q.cols());
    let budget_flops = budget.flops(s, opts.block_size, d)?;
    let ctx = SearchContext {
        frame_stride: Some(fixture.spec.tokens_per_frame),
    };
    let mut heads = Vec::with_capacity(fixture.heads.len());
    for h in &fixture.heads {
        let g = &h.data;
        let found = search_head(&h.name, &g.q, &g.k, &g.v, &fixture.map, space, &ctx, budget_flops, opts)?;
        heads.push(found.config);
    }
    Ok(CalibrationTable {
        seq_len: s,
        block_size: opts.block_size,
        last_q: opts.last_q,
        budget: budget.to_string(),
        budget_flops,
        tags: fixture.map.tags().to_vec(),
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_grid_qkv, SynthSpec};

    #[test]
    fn reference_space_values() {
        let sp = SearchSpace::reference();
        assert_eq!(sp.grid.len(), 12);
        assert!(sp.grid.iter().all(|g| g.max_stride == 1024));
        assert_eq!(sp.a_shape, vec![(128, 1024), (128, 2048), (128, 4096)]);
        assert_eq!(sp.vertical_slash.len(), 9);
        assert_eq!(sp.vertical_slash[7], (3500, 200));
        sp.validate().unwrap();
    }

    #[test]
    fn space_file_format() {
        let text = r#"{
  "grid": [{"stride": "frame_stride", "use_hline": false, "use_vline": true, "use_slash": false, "max_stride": 1024},
           {"stride": {"fixed": 6}, "use_hline": true, "use_vline": false, "use_slash": false, "max_stride": 64}],
  "a_shape": [[8, 64]],
  "vertical_slash": [[64, 64]],
  "boundaries": ["no_boundary", "q_boundary", "two_d_boundary"]
}"#;
        let space: SearchSpace = serde_json::from_str(text).unwrap();
        space.validate().unwrap();
        assert_eq!(space.grid[1].stride, StrideSource::Fixed(6));
        assert_eq!(space.candidates(None, None).len(), 3);
        let back: SearchSpace = serde_json::from_str(&space.to_json()).unwrap();
        assert_eq!(back, space);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("scaled".parse::<Budget>().unwrap(), Budget::Scaled);
        assert_eq!(
            "a_shape:16,64".parse::<Budget>().unwrap(),
            Budget::AShape { sink: 16, local: 64 }
        );
        assert_eq!("1234".parse::<Budget>().unwrap(), Budget::Flops(1234));
        assert!("a_shape:1".parse::<Budget>().is_err());
        for b in [
            Budget::Scaled,
            Budget::Unbounded,
            Budget::Flops(9),
            Budget::AShape { sink: 1, local: 2 },
        ] {
            assert_eq!(b.to_string().parse::<Budget>().unwrap(), b);
        }
        assert_eq!(Budget::Scaled.a_shape(25_000), Some((1024, 4096)));
    }

    #[test]
    fn unbounded_full_wins() {
        let g = gen_grid_qkv(&SynthSpec::grid(8, 8, 16, 1)).unwrap();
        let region = Region::full(64);
        let opts = ExecOptions::with_block_size(8);
        let cands = vec![HeadPattern::AShape { sink: 4, local: 8 }, HeadPattern::Full];
        let out = kernel_aware_search(&g.q, &g.k, &g.v, &region, &cands, u64::MAX, 0.25, &opts).unwrap();
        assert_eq!(out.best().pattern, HeadPattern::Full);
        assert!(out.best().distance.unwrap() < 1e-12);
    }

    #[test]
    fn infeasible_budget_names_cheapest() {
        let g = gen_grid_qkv(&SynthSpec::grid(8, 8, 16, 1)).unwrap();
        let region = Region::full(64);
        let opts = ExecOptions::with_block_size(8);
        let cands = vec![HeadPattern::Full, HeadPattern::AShape { sink: 1, local: 1 }];
        match kernel_aware_search(&g.q, &g.k, &g.v, &region, &cands, 1, 0.25, &opts) {
            Err(Error::BudgetInfeasible { cheapest, .. }) => assert_eq!(cheapest, "a_shape(1,1)"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn planted_grid_wins_search() {
        let spec = SynthSpec::grid(32, 8, 16, 3);
        let g = gen_grid_qkv(&spec).unwrap();
        let map = g.map.clone();
        let opts = ExecOptions {
            last_q: 32,
            ..ExecOptions::with_block_size(16)
        };
        let space = SearchSpace::reference().scaled(256.0 / REFERENCE_LEN as f64 * 4.0);
        let budget = Budget::AShape { sink: 32, local: 64 }.flops(256, 16, 16).unwrap();
        let ctx = SearchContext { frame_stride: Some(8) };
        let found = search_head("h0", &g.q, &g.k, &g.v, &map, &space, &ctx, budget, &opts).unwrap();
        assert_eq!(found.config.boundary, Boundary::NoBoundary);
        match found.config.intra[GLOBAL_KEY] {
            HeadPattern::Grid { stride, .. } => assert_eq!(stride, 8),
            ref other => panic!("expected a grid winner, got {other:?}"),
        }
        assert!(found.config.flops <= budget);
    }
}
