//! Synthetic Q/K/V with planted sparse structure.
//!
//! Structure lives in the geometry of Q and K, never in a written attention
//! matrix. Each structural component owns a few embedding dimensions and
//! contributes an exact logit offset of `signal_gain`; the remaining
//! dimensions carry Gaussian noise whose logit standard deviation is
//! `noise_scale`.
//!
//! * Grid: vision keys whose stream index is `phase` mod `tokens_per_frame`
//!   get the boost (vertical lines). Queries on the phase carry no grid
//!   component and attend evenly (horizontal lines).
//! * Lines: keys at stream offsets that are multiples of `period` get the
//!   boost through a discrete Fourier basis (slash lines), and a few keys
//!   get it through a dedicated direction (vertical lines).
//! * Cross-modality logits sit `signal_gain` below same-modality logits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{region_slab, search_grid, GridEstimate};
use crate::masks::index_reuse_recall;
use crate::modality::{segment_modalities, Modality, ModalityMap};
use crate::tensor::{attention_weights, causal_softmax_row, default_scale, Matrix};

pub const DEFAULT_SIGNAL_GAIN: f64 = 6.0;
pub const DEFAULT_NOISE_SCALE: f64 = 0.5;
/// Planted-mask recall every gated fixture must reach.
pub const MIN_PLANTED_RECALL: f64 = 0.8;
const MAX_ATTEMPTS: usize = 10;

/// A text run inserted before vision token `position` of the vision stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub position: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub frames: usize,
    pub tokens_per_frame: usize,
    #[serde(default)]
    pub text_segments: Vec<TextSegment>,
    pub d_h: usize,
    pub seed: u64,
    #[serde(default = "default_gain")]
    pub signal_gain: f64,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
}

fn default_gain() -> f64 {
    DEFAULT_SIGNAL_GAIN
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SCALE
}

impl SynthSpec {
    /// Pure video layout with default gain and noise.
    pub fn grid(frames: usize, tokens_per_frame: usize, d_h: usize, seed: u64) -> Self {
        SynthSpec {
            frames,
            tokens_per_frame,
            text_segments: Vec::new(),
            d_h,
            seed,
            signal_gain: DEFAULT_SIGNAL_GAIN,
            noise_scale: DEFAULT_NOISE_SCALE,
        }
    }

    /// Video with two text runs at frame boundaries making up a quarter of
    /// the sequence.
    pub fn mixed(frames: usize, tokens_per_frame: usize, d_h: usize, seed: u64) -> Self {
        let vision = frames * tokens_per_frame;
        let text_total = vision / 3;
        let first = text_total / 2;
        let at = |f: usize| (f * tokens_per_frame).min(vision);
        let mut spec = SynthSpec::grid(frames, tokens_per_frame, d_h, seed);
        spec.text_segments = vec![
            TextSegment {
                position: at(frames / 3),
                length: first,
            },
            TextSegment {
                position: at((2 * frames) / 3),
                length: text_total - first,
            },
        ]
        .into_iter()
        .filter(|s| s.length > 0)
        .collect();
        spec
    }

    pub fn vision_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn text_len(&self) -> usize {
        self.text_segments.iter().map(|s| s.length).sum()
    }

    pub fn seq_len(&self) -> usize {
        self.vision_len() + self.text_len()
    }

    fn check_layout(&self) -> Result<()> {
        if self.frames == 0 || self.d_h == 0 {
            return Err(Error::InvalidArgument("frames and d_h must be positive".into()));
        }
        if self.tokens_per_frame < 2 {
            return Err(Error::InvalidArgument(format!(
                "tokens_per_frame must be at least 2, got {}",
                self.tokens_per_frame
            )));
        }
        let v = self.vision_len();
        if let Some(s) = self.text_segments.iter().find(|s| s.position > v || s.length == 0) {
            return Err(Error::InvalidArgument(format!(
                "text segment at {} of length {} does not fit {} vision tokens",
                s.position, s.length, v
            )));
        }
        if !(self.signal_gain.is_finite() && self.noise_scale.is_finite())
            || self.signal_gain < 0.0
            || self.noise_scale < 0.0
        {
            return Err(Error::InvalidArgument(
                "gain and noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn check_gated(&self) -> Result<()> {
        self.check_layout()?;
        if !(self.signal_gain > self.noise_scale && self.noise_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need signal_gain > noise_scale > 0, got {} and {}",
                self.signal_gain, self.noise_scale
            )));
        }
        Ok(())
    }

    /// Token labels in sequence order.
    pub fn labels(&self) -> Vec<Modality> {
        let mut segs = self.text_segments.clone();
        segs.sort_by_key(|s| s.position);
        let mut labels = Vec::with_capacity(self.seq_len());
        let mut next = segs.iter().peekable();
        for v in 0..=self.vision_len() {
            while let Some(seg) = next.next_if(|s| s.position == v) {
                labels.extend(std::iter::repeat_n(Modality::text(), seg.length));
            }
            if v < self.vision_len() {
                labels.push(Modality::vision());
            }
        }
        labels
    }

    pub fn modality_map(&self) -> Result<ModalityMap> {
        segment_modalities(&self.labels())
    }
}

/// Slash and vertical structure for text tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextStructure {
    /// Stream offsets that are multiples of this are boosted.
    pub period: usize,
    pub n_vertical: usize,
}

impl Default for TextStructure {
    fn default() -> Self {
        TextStructure {
            period: 4,
            n_vertical: 2,
        }
    }
}

/// Planted structure of one modality, in that modality's stream indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenPlant {
    Grid { stride: usize, phase: usize },
    Lines { period: usize, verticals: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub plants: BTreeMap<Modality, TokenPlant>,
    pub suppress_cross: bool,
}

impl Planted {
    /// Grid plant of the vision stream, if any.
    pub fn grid_estimate(&self) -> Option<GridEstimate> {
        match self.plants.get(&Modality::vision()) {
            Some(&TokenPlant::Grid { stride, phase }) => Some(GridEstimate {
                stride,
                phase,
                score: 0.0,
            }),
            _ => None,
        }
    }

    /// Element predicate of the planted lines in original positions. The
    /// first column and the diagonal are always admitted; positions whose
    /// modality has no plant admit nothing else.
    pub fn mask(&self, map: &ModalityMap) -> PlantedMask {
        let tags = map.tags().to_vec();
        let plants: Vec<Option<CompiledPlant>> = tags
            .iter()
            .map(|t| {
                self.plants.get(t).map(|p| match p {
                    TokenPlant::Grid { stride, phase } => CompiledPlant::Grid {
                        stride: *stride,
                        phase: *phase,
                    },
                    TokenPlant::Lines { period, verticals } => {
                        let n = map.indices_of(t).len();
                        let mut vert = vec![false; n];
                        for &v in verticals.iter().filter(|&&v| v < n) {
                            vert[v] = true;
                        }
                        CompiledPlant::Lines { period: *period, vert }
                    }
                })
            })
            .collect();
        PlantedMask {
            stream: map.stream_index(),
            tag: map.tag_index(),
            plants,
        }
    }
}

enum CompiledPlant {
    Grid { stride: usize, phase: usize },
    Lines { period: usize, vert: Vec<bool> },
}

pub struct PlantedMask {
    stream: Vec<usize>,
    tag: Vec<usize>,
    plants: Vec<Option<CompiledPlant>>,
}

impl PlantedMask {
    pub fn admits(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        if j == i || j == 0 {
            return true;
        }
        if self.tag[i] != self.tag[j] {
            return false;
        }
        let (si, sj) = (self.stream[i], self.stream[j]);
        match &self.plants[self.tag[i]] {
            None => false,
            Some(CompiledPlant::Grid { stride, phase }) => sj % stride == *phase || si % stride == *phase,
            Some(CompiledPlant::Lines { period, vert }) => (si - sj) % period == 0 || vert[sj],
        }
    }

    /// Whether token `i` belongs to a planted modality.
    pub fn is_planted_row(&self, i: usize) -> bool {
        self.plants[self.tag[i]].is_some()
    }
}

/// What a generated head carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Grid on vision tokens only.
    Grid,
    /// Slash and vertical lines on every modality.
    Lines,
    /// Grid on vision, lines on text, cross-modality suppressed.
    Mixed,
    /// No structure at all.
    Noise,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub map: ModalityMap,
    pub planted: Planted,
    /// Seed that produced the accepted sample.
    pub seed: u64,
    pub attempts: usize,
}

fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Grid-structured video head; planted stride is `tokens_per_frame`.
pub fn gen_grid_qkv(spec: &SynthSpec) -> Result<Generated> {
    generate(spec, HeadKind::Grid, &TextStructure::default())
}

/// Grid on vision, slash/vertical lines on text, suppressed cross-modality
/// attention. Without text segments this is [`gen_grid_qkv`].
pub fn gen_mixed_modality(spec: &SynthSpec, text: &TextStructure) -> Result<Generated> {
    if spec.text_segments.is_empty() {
        return gen_grid_qkv(spec);
    }
    generate(spec, HeadKind::Mixed, text)
}

/// Rejection-sampled generator: resamples until the planted mask holds at
/// least [`MIN_PLANTED_RECALL`] of the attention mass.
pub fn generate(spec: &SynthSpec, kind: HeadKind, text: &TextStructure) -> Result<Generated> {
    if kind == HeadKind::Noise {
        return generate_ungated(spec, kind, text);
    }
    spec.check_gated()?;
    let mut last = 0.0;
    for attempt in 0..MAX_ATTEMPTS {
        let mut g = sample_head(spec, kind, text, attempt_seed(spec.seed, attempt))?;
        g.attempts = attempt + 1;
        last = planted_recall(&g);
        if last >= MIN_PLANTED_RECALL {
            return Ok(g);
        }
    }
    Err(Error::InvalidArgument(format!(
        "planted recall {last:.3} stayed below {MIN_PLANTED_RECALL} after {MAX_ATTEMPTS} samples"
    )))
}

/// Single sample without the quality gate; any non-negative gain and noise.
pub fn generate_ungated(spec: &SynthSpec, kind: HeadKind, text: &TextStructure) -> Result<Generated> {
    spec.check_layout()?;
    let mut g = sample_head(spec, kind, text, spec.seed)?;
    g.attempts = 1;
    Ok(g)
}

/// Mean over planted rows of the attention mass the planted mask admits.
/// Rows are streamed, so no `S x S` matrix is built.
pub fn planted_recall(g: &Generated) -> f64 {
    let mask = g.planted.mask(&g.map);
    let s = g.q.rows();
    let scale = default_scale(g.q.cols());
    let mut row = vec![0.0; s];
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in (0..s).filter(|&i| mask.is_planted_row(i)) {
        causal_softmax_row(g.q.row(i), &g.k, i, scale, &mut row);
        total += (0..=i).filter(|&j| mask.admits(i, j)).map(|j| row[j]).sum::<f64>();
        rows += 1;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

struct Dims {
    next: usize,
}

impl Dims {
    fn take(&mut self, n: usize) -> usize {
        let at = self.next;
        self.next += n;
        at
    }
}

fn sample_head(spec: &SynthSpec, kind: HeadKind, text: &TextStructure, seed: u64) -> Result<Generated> {
    let map = spec.modality_map()?;
    let s = map.len();
    let d = spec.d_h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut plants = BTreeMap::new();
    for tag in map.tags() {
        let n = map.indices_of(tag).len();
        let plant = match (kind, tag.as_str()) {
            (HeadKind::Noise, _) => None,
            (HeadKind::Grid | HeadKind::Mixed, crate::modality::VISION) => {
                let stride = spec.tokens_per_frame;
                Some(TokenPlant::Grid {
                    stride,
                    phase: rng.random_range(0..stride),
                })
            }
            (HeadKind::Grid, _) => None,
            (HeadKind::Lines | HeadKind::Mixed, _) => {
                if text.period < 2 {
                    return Err(Error::InvalidArgument("slash period must be at least 2".into()));
                }
                let count = text.n_vertical.min(n);
                let mut verticals = sample(&mut rng, n, count).into_vec();
                verticals.sort_unstable();
                Some(TokenPlant::Lines {
                    period: text.period,
                    verticals,
                })
            }
        };
        if let Some(p) = plant {
            plants.insert(tag.clone(), p);
        }
    }
    let suppress_cross = kind != HeadKind::Noise && map.tags().len() > 1;
    let planted = Planted { plants, suppress_cross };

    // Dimension layout, then noise on whatever is left.
    let mut dims = Dims { next: 0 };
    let tag_dims: Vec<(usize, usize)> = map
        .tags()
        .iter()
        .map(|t| match planted.plants.get(t) {
            Some(TokenPlant::Grid { .. }) => (dims.take(1), 0),
            Some(TokenPlant::Lines { period, .. }) => (dims.take(period - 1), dims.take(1)),
            None => (0, 0),
        })
        .collect();
    let onehot = if suppress_cross {
        Some(dims.take(map.tags().len()))
    } else {
        None
    };
    if dims.next > d || (dims.next == d && spec.noise_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "d_h = {d} leaves no noise dimensions after {} structural ones",
            dims.next
        )));
    }
    let noise_dims = d - dims.next;

    let gain = spec.signal_gain;
    let root_d = (d as f64).sqrt();
    let amp = (gain * root_d).sqrt();
    let sigma = if noise_dims == 0 {
        0.0
    } else {
        (spec.noise_scale * root_d / (noise_dims as f64).sqrt()).sqrt()
    };

    let stream = map.stream_index();
    let tag_of = map.tag_index();
    let mut q = Matrix::zeros(s, d);
    let mut k = Matrix::zeros(s, d);
    for i in 0..s {
        let t = stream[i];
        let g = tag_of[i];
        let mut ki = vec![0.0; d];
        let qi = q.row_mut(i);
        match planted.plants.get(&map.tags()[g]) {
            Some(&TokenPlant::Grid { stride, phase }) => {
                let at = tag_dims[g].0;
                let on_phase = t % stride == phase;
                ki[at] = if on_phase { amp } else { 0.0 };
                qi[at] = if on_phase { 0.0 } else { amp };
            }
            Some(TokenPlant::Lines { period, verticals }) => {
                let (at, vd) = tag_dims[g];
                let feats = fourier_features(t, *period, gain * root_d);
                qi[at..at + feats.len()].copy_from_slice(&feats);
                ki[at..at + feats.len()].copy_from_slice(&feats);
                qi[vd] = amp;
                ki[vd] = if verticals.binary_search(&t).is_ok() { amp } else { 0.0 };
            }
            None => {}
        }
        if let Some(at) = onehot {
            qi[at + g] = amp;
            ki[at + g] = amp;
        }
        k.row_mut(i).copy_from_slice(&ki);
    }
    for i in 0..s {
        for c in d - noise_dims..d {
            let z: f64 = rng.sample(StandardNormal);
            q.set(i, c, z * sigma);
        }
        for c in d - noise_dims..d {
            let z: f64 = rng.sample(StandardNormal);
            k.set(i, c, z * sigma);
        }
    }
    let v = Matrix::from_fn(s, d, |_, _| rng.sample(StandardNormal));
    Ok(Generated {
        q,
        k,
        v,
        map,
        planted,
        seed,
        attempts: 0,
    })
}

/// Features whose inner product is `total / period * (period - 1)` when
/// the two indices agree mod `period` and `-total / period` otherwise.
fn fourier_features(t: usize, period: usize, total: f64) -> Vec<f64> {
    let a = (total / period as f64).sqrt();
    let mut f = Vec::with_capacity(period - 1);
    for h in 1..=(period - 1) / 2 {
        let theta = 2.0 * PI * (h * (t % period)) as f64 / period as f64;
        f.push(a * 2f64.sqrt() * theta.cos());
        f.push(a * 2f64.sqrt() * theta.sin());
    }
    if period.is_multiple_of(2) {
        f.push(if t.is_multiple_of(2) { a } else { -a });
    }
    f
}

/// Top-k index built on one context at a 95% target, measured on itself and
/// on a second context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReuseResult {
    pub self_recall: f64,
    pub cross_recall: f64,
}

pub const REUSE_TARGET: f64 = 0.95;

pub fn reuse_experiment(spec: &SynthSpec, kind: HeadKind, seeds: (u64, u64)) -> Result<ReuseResult> {
    let make = |seed: u64| -> Result<Matrix> {
        let mut sp = spec.clone();
        sp.seed = seed;
        let g = generate_ungated(&sp, kind, &TextStructure::default())?;
        attention_weights(&g.q, &g.k, default_scale(g.q.cols()))
    };
    let a = make(seeds.0)?;
    let b = if seeds.1 == seeds.0 { a.clone() } else { make(seeds.1)? };
    Ok(ReuseResult {
        self_recall: index_reuse_recall(&a, &a, REUSE_TARGET)?,
        cross_recall: index_reuse_recall(&a, &b, REUSE_TARGET)?,
    })
}

/// Recall of grid estimates carried across a text interruption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Continuity {
    /// Estimate from the first vision run, applied to the second run.
    pub transfer_recall: f64,
    /// The second run's own estimate, applied to itself.
    pub own_recall: f64,
    /// First-run estimate applied to text rows in original positions.
    pub text_recall: f64,
    pub first: GridEstimate,
    pub second: GridEstimate,
}

/// Estimates grid lines on two vision runs separated by text, in vision
/// stream coordinates, and measures line recall of each estimate.
pub fn continuity_experiment(g: &Generated, stride_space: &[usize], last_q: usize) -> Result<Continuity> {
    let vision = Modality::vision();
    let runs: Vec<(usize, usize)> = g.map.segments_of(&vision).map(|s| (s.start, s.end)).collect();
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("need two vision runs separated by text".into()));
    }
    let text_rows: Vec<usize> = g.map.indices_of(&Modality::text()).to_vec();
    if text_rows.is_empty() {
        return Err(Error::InvalidArgument("fixture has no text rows".into()));
    }
    let stream = g.map.stream_index();
    let vis = g.map.indices_of(&vision);
    let vis_coords: Vec<usize> = vis.iter().map(|&p| stream[p]).collect();
    let scale = default_scale(g.q.cols());

    let estimate = |(start, end): (usize, usize)| -> Result<GridEstimate> {
        let take = last_q.min(end - start);
        let rows: Vec<usize> = (end - take..end).collect();
        let coords: Vec<usize> = rows.iter().map(|&p| stream[p]).collect();
        let slab = region_slab(&g.q, &g.k, scale, &rows, &coords, vis, &vis_coords, vis.len());
        search_grid(&slab.weights, stride_space)
    };
    let first = estimate(runs[0])?;
    let second = estimate(runs[1])?;

    let s = g.q.rows();
    let mut row = vec![0.0; s];
    let mut recall = |rows: &mut dyn Iterator<Item = usize>, admit: &dyn Fn(usize, usize) -> bool| {
        let (mut acc, mut n) = (0.0, 0usize);
        for i in rows {
            causal_softmax_row(g.q.row(i), &g.k, i, scale, &mut row);
            acc += (0..=i).filter(|&j| admit(i, j)).map(|j| row[j]).sum::<f64>();
            n += 1;
        }
        acc / n.max(1) as f64
    };
    let is_vision: Vec<bool> = g.map.labels().iter().map(|t| *t == vision).collect();
    let stream_lines = |e: GridEstimate| {
        let (stream, is_vision) = (&stream, &is_vision);
        move |i: usize, j: usize| is_vision[j] && (stream[j] % e.stride == e.phase || stream[i] % e.stride == e.phase)
    };
    let second_run = runs[1];
    let transfer_recall = recall(&mut (second_run.0..second_run.1), &stream_lines(first));
    let own_recall = recall(&mut (second_run.0..second_run.1), &stream_lines(second));
    let text_recall = recall(&mut text_rows.iter().copied(), &|i, j| {
        j % first.stride == first.phase || i % first.stride == first.phase
    });
    Ok(Continuity {
        transfer_recall,
        own_recall,
        text_recall,
        first,
        second,
    })
}

/// One generated head of a fixture.
#[derive(Clone, Debug)]
pub struct FixtureHead {
    pub name: String,
    pub kind: HeadKind,
    pub data: Generated,
}

/// A multi-head input sharing one layout.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: SynthSpec,
    pub text_structure: TextStructure,
    pub map: ModalityMap,
    pub heads: Vec<FixtureHead>,
}

pub const FIXTURE_FILE: &str = "fixture.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    spec: SynthSpec,
    text_structure: TextStructure,
    modality_map: ModalityMap,
    heads: Vec<FixtureHeadFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureHeadFile {
    name: String,
    kind: HeadKind,
    seed: u64,
    attempts: usize,
    planted: Planted,
    q: String,
    k: String,
    v: String,
}

/// Generates one head per entry of `kinds`, each from its own seed derived
/// from `spec.seed`.
pub fn generate_fixture(spec: &SynthSpec, text: &TextStructure, kinds: &[HeadKind]) -> Result<Fixture> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("a fixture needs at least one head".into()));
    }
    let mut heads = Vec::with_capacity(kinds.len());
    for (h, &kind) in kinds.iter().enumerate() {
        let mut sp = spec.clone();
        sp.seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(h as u64);
        let data = generate(&sp, kind, text)?;
        heads.push(FixtureHead {
            name: format!("h{h}"),
            kind,
            data,
        });
    }
    Ok(Fixture {
        spec: spec.clone(),
        text_structure: *text,
        map: spec.modality_map()?,
        heads,
    })
}

impl Fixture {
    pub fn seq_len(&self) -> usize {
        self.map.len()
    }

    /// Writes `fixture.json` and one binary matrix per head tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut heads = Vec::new();
        for h in &self.heads {
            let file = |t: &str| format!("{}_{t}.bin", h.name);
            h.data.q.save(&dir.join(file("q")))?;
            h.data.k.save(&dir.join(file("k")))?;
            h.data.v.save(&dir.join(file("v")))?;
            heads.push(FixtureHeadFile {
                name: h.name.clone(),
                kind: h.kind,
                seed: h.data.seed,
                attempts: h.data.attempts,
                planted: h.data.planted.clone(),
                q: file("q"),
                k: file("k"),
                v: file("v"),
            });
        }
        let sidecar = FixtureFile {
            spec: self.spec.clone(),
            text_structure: self.text_structure,
            modality_map: self.map.clone(),
            heads,
        };
        let path = dir.join(FIXTURE_FILE);
        let text = serde_json::to_string_pretty(&sidecar).expect("fixture serialises") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Fixture> {
        let path = dir.join(FIXTURE_FILE);
        if !path.is_file() {
            return Err(Error::MissingInput(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: FixtureFile = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        let s = file.modality_map.len();
        let mut heads = Vec::new();
        for h in file.heads {
            let load = |name: &str| -> Result<Matrix> {
                let m = Matrix::load(&dir.join(name))?;
                if m.rows() != s {
                    return Err(Error::parse(
                        dir.join(name),
                        format!("{} rows but the layout has {s} tokens", m.rows()),
                    ));
                }
                Ok(m)
            };
            let (q, k, v) = (load(&h.q)?, load(&h.k)?, load(&h.v)?);
            if q.cols() != k.cols() || v.rows() != k.rows() {
                return Err(Error::parse(&path, format!("head {} has inconsistent shapes", h.name)));
            }
            heads.push(FixtureHead {
                name: h.name,
                kind: h.kind,
                data: Generated {
                    q,
                    k,
                    v,
                    map: file.modality_map.clone(),
                    planted: h.planted,
                    seed: h.seed,
                    attempts: h.attempts,
                },
            });
        }
        Ok(Fixture {
            spec: file.spec,
            text_structure: file.text_structure,
            map: file.modality_map,
            heads,
        })
    }
}
