//! Permuted plans for grid and vertical-slash heads.
//!
//! Grid heads run up to three passes over gathered rows and keys:
//!
//! * `vline`: every row against the gathered vertical columns together with
//!   its sink and local band. This pass owns all band, sink and vertical
//!   elements.
//! * `hline`: rows on the phase against every causal key not already owned.
//! * `slash`: for each residue class, rows and keys of that class, which
//!   places the diagonals on the diagonal of the permuted tile grid.

use super::engine::Plan;
use super::region::Region;
use crate::masks::GridFlags;

pub(crate) fn plan_grid<'a>(
    region: &'a Region,
    stride: usize,
    phase: usize,
    flags: GridFlags,
    band: usize,
    block_size: usize,
) -> Plan<'a> {
    let (s, p) = (stride, phase);
    let in_v = move |qc: usize, kc: usize| (flags.vline && kc % s == p) || kc < band || qc - kc < band;
    let on_h = move |qc: usize| flags.hline && qc % s == p;

    let mut plan = Plan::new(region, block_size);
    let all_rows: Vec<usize> = (0..region.q_pos.len()).collect();

    let v_pass = plan.add_pass("vline", Box::new(in_v));
    for chunk in plan.add_chunks(&all_rows) {
        let rows = plan.chunk_rows(chunk);
        let first = region.q_coord[rows[0]];
        let last = plan.chunk_last_coord(chunk);
        let keys: Vec<usize> = (0..region.k_pos.len())
            .filter(|&ki| {
                let kc = region.k_coord[ki];
                kc <= last && ((flags.vline && kc % s == p) || kc < band || kc + band > first)
            })
            .collect();
        for (t, tile) in plan.key_tiles(&keys).into_iter().enumerate() {
            plan.push_if_nonempty(v_pass, chunk, t, tile);
        }
    }

    if flags.hline {
        let h_pass = plan.add_pass("hline", Box::new(move |qc, kc| !in_v(qc, kc)));
        let rows: Vec<usize> = all_rows.iter().copied().filter(|&r| on_h(region.q_coord[r])).collect();
        for chunk in plan.add_chunks(&rows) {
            for (t, tile) in plan.natural_key_tiles(chunk).into_iter().enumerate() {
                plan.push_if_nonempty(h_pass, chunk, t, tile);
            }
        }
    }

    if flags.slash {
        let d_pass = plan.add_pass("slash", Box::new(move |qc, kc| !in_v(qc, kc) && !on_h(qc)));
        for residue in 0..s {
            let rows: Vec<usize> = all_rows
                .iter()
                .copied()
                .filter(|&r| region.q_coord[r] % s == residue)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let keys: Vec<usize> = (0..region.k_pos.len())
                .filter(|&ki| region.k_coord[ki] % s == residue)
                .collect();
            for chunk in plan.add_chunks(&rows) {
                let last = plan.chunk_last_coord(chunk);
                let reach = keys.partition_point(|&ki| region.k_coord[ki] <= last);
                for (t, tile) in plan.key_tiles(&keys[..reach]).into_iter().enumerate() {
                    plan.push_if_nonempty(d_pass, chunk, t, tile);
                }
            }
        }
    }
    plan
}

/// Verticals are coordinates, slashes are distances `qc - kc`.
pub(crate) fn plan_vertical_slash<'a>(
    region: &'a Region,
    verticals: &[usize],
    slashes: &[usize],
    block_size: usize,
) -> Plan<'a> {
    let n = region.n_coords;
    let mut vert = vec![false; n];
    for &c in verticals.iter().filter(|&&c| c < n) {
        vert[c] = true;
    }
    let mut slash = vec![false; n];
    for &d in slashes.iter().filter(|&&d| d < n) {
        slash[d] = true;
    }
    let vert_pass_lookup = vert.clone();

    let mut plan = Plan::new(region, block_size);
    let all_rows: Vec<usize> = (0..region.q_pos.len()).collect();
    let chunks = plan.add_chunks(&all_rows);

    let v_pass = plan.add_pass("vertical", Box::new(move |_, kc| vert_pass_lookup[kc]));
    let vertical_keys: Vec<usize> = (0..region.k_pos.len()).filter(|&ki| vert[region.k_coord[ki]]).collect();
    for &chunk in &chunks {
        let last = plan.chunk_last_coord(chunk);
        let reach = vertical_keys.partition_point(|&ki| region.k_coord[ki] <= last);
        for (t, tile) in plan.key_tiles(&vertical_keys[..reach]).into_iter().enumerate() {
            plan.push_if_nonempty(v_pass, chunk, t, tile);
        }
    }

    let s_pass = plan.add_pass("slash", Box::new(move |qc, kc| slash[qc - kc] && !vert[kc]));
    for &chunk in &chunks {
        for (t, tile) in plan.natural_key_tiles(chunk).into_iter().enumerate() {
            plan.push_if_nonempty(s_pass, chunk, t, tile);
        }
    }
    plan
}
