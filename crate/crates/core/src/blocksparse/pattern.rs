//! Turning a configured [`HeadPattern`] into a concrete plan on a region.

use serde::{Deserialize, Serialize};

use super::engine::{execute, plan_rule, Plan};
use super::grid::{plan_grid, plan_vertical_slash};
use super::region::Region;
use super::{ExecOptions, TileVisit};
use crate::error::Result;
use crate::estimator::{region_slab, search_grid, select_lines, GridEstimate, VSEstimate};
use crate::masks::{grid_rule, ElementRule, GridFlags, HeadPattern};
use crate::tensor::{Matrix, SoftmaxPartial};

/// A head pattern with its online estimates filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Resolved {
    Rule {
        rule: ElementRule,
    },
    Grid {
        estimate: GridEstimate,
        flags: GridFlags,
        band: usize,
    },
    VerticalSlash {
        estimate: VSEstimate,
    },
}

impl Resolved {
    /// Equivalent element rule in region coordinates.
    pub fn to_rule(&self) -> ElementRule {
        match self {
            Resolved::Rule { rule } => rule.clone(),
            Resolved::Grid { estimate, flags, band } => grid_rule(estimate.stride, estimate.phase, *flags, *band),
            Resolved::VerticalSlash { estimate } => estimate.to_rule(),
        }
    }

    pub(crate) fn plan<'a>(&'a self, region: &'a Region, block_size: usize, rule: &'a ElementRule) -> Plan<'a> {
        match self {
            Resolved::Rule { .. } => plan_rule(region, rule, block_size),
            Resolved::Grid { estimate, flags, band } => {
                plan_grid(region, estimate.stride, estimate.phase, *flags, *band, block_size)
            }
            Resolved::VerticalSlash { .. } => match rule {
                ElementRule::VerticalSlash { verticals, slashes } => {
                    plan_vertical_slash(region, verticals, slashes, block_size)
                }
                _ => unreachable!("vertical-slash estimate yields a vertical-slash rule"),
            },
        }
    }
}

/// Estimates whatever `pattern` leaves open from the final `last_q` query
/// rows of the region. Grid heads keep their configured stride and only
/// estimate the phase.
pub fn resolve_pattern(
    q: &Matrix,
    k: &Matrix,
    region: &Region,
    pattern: &HeadPattern,
    scale: f64,
    opts: &ExecOptions,
) -> Result<Resolved> {
    pattern.validate()?;
    let n = region.n_coords();
    if let Some(rule) = pattern.static_rule(n) {
        return Ok(Resolved::Rule { rule });
    }
    let nq = region.q_pos.len();
    let take = opts.last_q.min(nq);
    let slab = || {
        region_slab(
            q,
            k,
            scale,
            &region.q_pos[nq - take..],
            &region.q_coord[nq - take..],
            &region.k_pos,
            &region.k_coord,
            n,
        )
    };
    Ok(match *pattern {
        HeadPattern::Grid {
            stride,
            use_hline,
            use_vline,
            use_slash,
            ..
        } => {
            let estimate = if take == 0 {
                None
            } else {
                search_grid(&slab().weights, &[stride]).ok()
            }
            .unwrap_or(GridEstimate {
                stride,
                phase: 0,
                score: 0.0,
            });
            Resolved::Grid {
                estimate,
                flags: GridFlags::new(use_hline, use_vline, use_slash),
                band: opts.block_size,
            }
        }
        HeadPattern::VerticalSlash { n_vertical, n_slash } => {
            let estimate = if take == 0 {
                VSEstimate {
                    vertical_idx: vec![0],
                    slash_idx: vec![0],
                }
            } else {
                let sl = slab();
                select_lines(&sl.weights, &sl.row_coords, n_vertical, n_slash)
            };
            Resolved::VerticalSlash { estimate }
        }
        _ => unreachable!("static patterns returned above"),
    })
}

/// Result of running one pattern on one region.
#[derive(Clone, Debug)]
pub struct RegionRun {
    /// Rows follow the region's query list.
    pub partial: SoftmaxPartial,
    pub resolved: Resolved,
    pub tiles: usize,
    pub flops: u64,
    pub trace: Vec<TileVisit>,
}

/// Number of tiles a resolved pattern costs on a region.
pub fn planned_tiles(region: &Region, resolved: &Resolved, block_size: usize) -> usize {
    let rule = resolved.to_rule();
    let tiles = resolved.plan(region, block_size, &rule).num_tiles();
    tiles
}

pub fn run_resolved(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    region: &Region,
    resolved: Resolved,
    scale: f64,
    opts: &ExecOptions,
) -> Result<RegionRun> {
    super::check_region(q, k, v, region)?;
    let rule = resolved.to_rule();
    let plan = resolved.plan(region, opts.block_size, &rule);
    let (partial, trace) = execute(&plan, q, k, v, scale, opts.precision, opts.order);
    let tiles = plan.num_tiles();
    let flops = plan.flops(q.cols());
    drop(plan);
    Ok(RegionRun {
        partial,
        resolved,
        tiles,
        flops,
        trace,
    })
}

/// Resolves and runs `pattern` on `region`.
pub fn run_pattern(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    region: &Region,
    pattern: &HeadPattern,
    scale: f64,
    opts: &ExecOptions,
) -> Result<RegionRun> {
    super::check_region(q, k, v, region)?;
    let resolved = resolve_pattern(q, k, region, pattern, scale, opts)?;
    run_resolved(q, k, v, region, resolved, scale, opts)
}
