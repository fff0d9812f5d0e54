//! 8-bit PGM heatmaps of attention weights.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Weights at or below `10^-LOG_FLOOR` render black.
pub const LOG_FLOOR: f64 = 6.0;
pub const MAX_SIDE: usize = 512;

/// Maps a weight to an intensity on a log scale.
pub fn intensity(w: f64) -> u8 {
    if w <= 0.0 {
        return 0;
    }
    let t = (1.0 + w.log10() / LOG_FLOOR).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Renders `weights[order[i], order[j]]`, max-pooled down to at most
/// `max_side` pixels a side.
pub fn render(weights: &Matrix, order: &[usize], max_side: usize) -> (usize, Vec<u8>) {
    let n = order.len();
    let cell = n.div_ceil(max_side.max(1)).max(1);
    let side = n.div_ceil(cell);
    let mut px = vec![0u8; side * side];
    for (a, &i) in order.iter().enumerate() {
        let row = weights.row(i);
        for (b, &j) in order.iter().enumerate() {
            let p = &mut px[(a / cell) * side + b / cell];
            *p = (*p).max(intensity(row[j]));
        }
    }
    (side, px)
}

pub fn pgm_bytes(side: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

pub fn write_heatmap(path: &Path, weights: &Matrix, order: &[usize]) -> Result<()> {
    let (side, px) = render(weights, order, MAX_SIDE);
    fs::write(path, pgm_bytes(side, &px)).map_err(|e| Error::io(path, e))
}
