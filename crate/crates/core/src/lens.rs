//! Visual attention analysis: localization heads, high/low-attention cell
//! masks, centroid squares and spatial dispersion.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{ForwardTrace, HeadSite};

/// `1 − H(p)/ln(G²)` for the head's attention from `query_pos` over the
/// visual tokens, renormalized to sum 1. Zero visual mass scores 0.
pub fn localization_score(trace: &ForwardTrace, layer: usize, head: usize, query_pos: usize) -> Result<f64> {
    check_site(trace, layer, head, query_pos)?;
    let n_vis = trace.layout.num_visual;
    let row = trace.attention(layer, head).row(query_pos);
    Ok(concentration(&row.as_slice().expect("row slice")[..n_vis]))
}

fn concentration(visual: &[f64]) -> f64 {
    let n = visual.len();
    let mass: f64 = visual.iter().sum();
    if mass <= 0.0 || n < 2 {
        return 0.0;
    }
    let entropy: f64 = visual
        .iter()
        .map(|&a| a / mass)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (1.0 - entropy / (n as f64).ln()).clamp(0.0, 1.0)
}

fn check_site(trace: &ForwardTrace, layer: usize, head: usize, query_pos: usize) -> Result<()> {
    if layer >= trace.num_layers || head >= trace.num_heads {
        return Err(LabError::config(format!("head L{layer}H{head} outside model")));
    }
    if query_pos >= trace.seq_len() {
        return Err(LabError::config(format!("query position {query_pos} outside sequence")));
    }
    Ok(())
}

/// Every head with `layer ≥ min_layer`.
pub fn head_pool(trace: &ForwardTrace, min_layer: usize) -> Vec<HeadSite> {
    trace.sites().filter(|s| s.layer >= min_layer).collect()
}

/// Top-`k` heads of the whole model by localization score.
pub fn select_localization_heads(trace: &ForwardTrace, query_pos: usize, k: usize) -> Result<Vec<HeadSite>> {
    let pool: Vec<HeadSite> = trace.sites().collect();
    select_localization_heads_from(trace, query_pos, k, &pool)
}

/// Top-`k` heads of `pool` by localization score; ties go to the lower
/// `(layer, head)`.
pub fn select_localization_heads_from(
    trace: &ForwardTrace,
    query_pos: usize,
    k: usize,
    pool: &[HeadSite],
) -> Result<Vec<HeadSite>> {
    if k == 0 || k > pool.len() {
        return Err(LabError::config(format!("cannot select {k} of {} heads", pool.len())));
    }
    let mut scored = pool
        .iter()
        .map(|&s| localization_score(trace, s.layer, s.head, query_pos).map(|v| (s, v)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(s, _)| s).collect())
}

/// Mean attention from one position to each visual cell over a head set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub grid_side: usize,
    /// Row-major `G×G` values.
    pub values: Vec<f64>,
    pub heads: Vec<HeadSite>,
    pub query_pos: usize,
}

impl AttentionSummary {
    pub fn num_cells(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_side + col]
    }

    /// Share of attention mass landing on visual tokens.
    pub fn visual_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `row,col,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i / self.grid_side, i % self.grid_side, v);
        }
        out
    }
}

pub fn aggregate_visual_attention(
    trace: &ForwardTrace,
    heads: &[HeadSite],
    query_pos: usize,
) -> Result<AttentionSummary> {
    if heads.is_empty() {
        return Err(LabError::config("attention summary needs at least one head"));
    }
    let n_vis = trace.layout.num_visual;
    let grid_side = (n_vis as f64).sqrt().round() as usize;
    let mut values = vec![0.0; n_vis];
    for s in heads {
        check_site(trace, s.layer, s.head, query_pos)?;
        let row = trace.attention(s.layer, s.head).row(query_pos);
        for (v, a) in values.iter_mut().zip(row.iter()) {
            *v += a;
        }
    }
    let n = heads.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(AttentionSummary {
        grid_side,
        values,
        heads: heads.to_vec(),
        query_pos,
    })
}

/// High-attention cells; the complement is the low-attention set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcvrMask {
    pub grid_side: usize,
    pub cells: Vec<bool>,
    pub fraction: f64,
}

impl HcvrMask {
    pub fn from_cells(grid_side: usize, cells: &[usize], fraction: f64) -> Self {
        let mut mask = vec![false; grid_side * grid_side];
        for &c in cells {
            mask[c] = true;
        }
        Self {
            grid_side,
            cells: mask,
            fraction,
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn complement(&self) -> HcvrMask {
        HcvrMask {
            grid_side: self.grid_side,
            cells: self.cells.iter().map(|c| !c).collect(),
            fraction: 1.0 - self.fraction,
        }
    }
}

/// Number of cells a fraction of the grid selects.
pub fn hcvr_count(fraction: f64, num_cells: usize) -> usize {
    ((fraction * num_cells as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Marks the `ceil(fraction·G²)` highest cells; ties by ascending index.
pub fn hcvr_mask(summary: &AttentionSummary, fraction: f64) -> Result<HcvrMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LabError::config(format!("HCVR fraction {fraction} outside (0,1)")));
    }
    let n = summary.num_cells();
    let k = hcvr_count(fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| summary.values[b].total_cmp(&summary.values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(HcvrMask::from_cells(summary.grid_side, &order, fraction))
}

/// Rounds to nearest, halves toward the lower integer.
fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// Attention-weighted mean `(row, col)` of the masked cells, unrounded;
/// falls back to the plain mean when the masked weight is zero.
pub fn weighted_centroid(summary: &AttentionSummary, mask: &HcvrMask) -> Result<(f64, f64)> {
    let cells = mask.indices();
    if cells.is_empty() {
        return Err(LabError::config("centroid of an empty mask"));
    }
    let g = mask.grid_side;
    let total: f64 = cells.iter().map(|&c| summary.values[c]).sum();
    let weight = |c: usize| {
        if total > 0.0 {
            summary.values[c] / total
        } else {
            1.0 / cells.len() as f64
        }
    };
    let r = cells.iter().map(|&c| weight(c) * (c / g) as f64).sum();
    let col = cells.iter().map(|&c| weight(c) * (c % g) as f64).sum();
    Ok((r, col))
}

/// Integer centroid, each axis rounded half-down and clamped into the grid.
pub fn centroid(summary: &AttentionSummary, mask: &HcvrMask) -> Result<(usize, usize)> {
    let (r, c) = weighted_centroid(summary, mask)?;
    let max = (mask.grid_side - 1) as f64;
    Ok((
        round_half_down(r).clamp(0.0, max) as usize,
        round_half_down(c).clamp(0.0, max) as usize,
    ))
}

/// Square intervention region around a centroid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub centroid: (usize, usize),
    pub side: usize,
    /// Row-major cell indices.
    pub cells: Vec<usize>,
    /// Set when the requested side exceeded the grid and was clamped.
    pub clamped: bool,
}

impl RegionSpec {
    pub fn as_mask(&self, grid_side: usize) -> HcvrMask {
        let frac = self.cells.len() as f64 / (grid_side * grid_side) as f64;
        HcvrMask::from_cells(grid_side, &self.cells, frac)
    }
}

/// Side `ceil(sqrt(count))` square starting `floor(side/2)` cells before the
/// centroid on each axis, translated (never shrunk) to fit the grid.
pub fn square_region(centroid: (usize, usize), hcvr_count: usize, grid_side: usize) -> Result<RegionSpec> {
    let n = grid_side * grid_side;
    if hcvr_count == 0 || hcvr_count > n {
        return Err(LabError::config(format!("HCVR count {hcvr_count} outside 1..={n}")));
    }
    if centroid.0 >= grid_side || centroid.1 >= grid_side {
        return Err(LabError::config(format!("centroid {centroid:?} outside grid")));
    }
    let mut side = (hcvr_count as f64).sqrt().ceil() as usize;
    while side * side < hcvr_count {
        side += 1;
    }
    let clamped = side > grid_side;
    side = side.min(grid_side);
    let start = |c: usize| (c as isize - (side / 2) as isize).clamp(0, (grid_side - side) as isize) as usize;
    let (r0, c0) = (start(centroid.0), start(centroid.1));
    let cells = (r0..r0 + side)
        .flat_map(|r| (c0..c0 + side).map(move |c| r * grid_side + c))
        .collect();
    Ok(RegionSpec {
        centroid,
        side,
        cells,
        clamped,
    })
}

/// Spatial spread of a mask about its weighted centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    /// `sqrt(mean squared distance)` of the masked cells, in cells.
    pub standard_distance: f64,
    pub centroid: (f64, f64),
    pub num_cells: usize,
}

pub fn dispersion(summary: &AttentionSummary, mask: &HcvrMask) -> Result<DispersionStats> {
    let (cr, cc) = weighted_centroid(summary, mask)?;
    let g = mask.grid_side;
    let cells = mask.indices();
    let msd = cells
        .iter()
        .map(|&c| {
            let dr = (c / g) as f64 - cr;
            let dc = (c % g) as f64 - cc;
            dr * dr + dc * dc
        })
        .sum::<f64>()
        / cells.len() as f64;
    Ok(DispersionStats {
        standard_distance: msd.sqrt(),
        centroid: (cr, cc),
        num_cells: cells.len(),
    })
}
