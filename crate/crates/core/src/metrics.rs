//! Reconstruction error metrics and depth-band summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, Snapshot};

/// Depth band edges in meters: six 10 m intervals from the surface to 60 m.
pub const DEFAULT_BAND_EDGES: [f64; 7] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            location: what.into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||x - xhat|| / ||x||`.
pub fn error1(x: &Snapshot, xhat: &Snapshot) -> Result<f64> {
    same_len(x.values(), xhat.values(), "error1 estimate")?;
    let denom = norm(x.values());
    if denom == 0.0 {
        return Err(Error::Division(
            "error1 of a zero-norm reference field".into(),
        ));
    }
    Ok(diff_norm(x.values(), xhat.values()) / denom)
}

/// `||x' - xhat'|| / ||x' + mean||` for fluctuation fields `x'`, `xhat'`,
/// i.e. the fluctuation error normalized by the full-field norm.
pub fn error2(x_fluct: &Snapshot, xhat_fluct: &Snapshot, mean: &Snapshot) -> Result<f64> {
    same_len(x_fluct.values(), xhat_fluct.values(), "error2 estimate")?;
    same_len(x_fluct.values(), mean.values(), "error2 mean")?;
    let denom = x_fluct
        .values()
        .iter()
        .zip(mean.values())
        .map(|(f, m)| (f + m) * (f + m))
        .sum::<f64>()
        .sqrt();
    if denom == 0.0 {
        return Err(Error::Division("error2 with zero-norm full field".into()));
    }
    Ok(diff_norm(x_fluct.values(), xhat_fluct.values()) / denom)
}

/// Per-cell `|x - xhat|`.
pub fn error_map(x: &Snapshot, xhat: &Snapshot) -> Result<Vec<f64>> {
    same_len(x.values(), xhat.values(), "error map estimate")?;
    Ok(x.values()
        .iter()
        .zip(xhat.values())
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Five-number summary plus mean of one band's cell errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    /// Quartiles interpolate linearly between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub lower_m: f64,
    pub upper_m: f64,
    pub count: usize,
    /// `None` when no wet cell falls in the band.
    pub summary: Option<Summary>,
}

/// Summarizes a per-cell error map over depth bands `[edges[i], edges[i+1])`,
/// assigning each cell by its layer mid-depth.
pub fn depth_band_stats(map: &[f64], grid: &FieldGrid, edges: &[f64]) -> Result<Vec<BandStats>> {
    if map.len() != grid.n() {
        return Err(Error::Shape {
            location: "error map".into(),
            expected: grid.n(),
            found: map.len(),
        });
    }
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::Parameter(
            "band edges need at least two finite values".into(),
        ));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "band edges must be strictly increasing".into(),
        ));
    }
    if edges[0] > 0.0 || edges[edges.len() - 1] < grid.depth() {
        return Err(Error::Parameter(format!(
            "band edges [{}, {}] do not cover the water column [0, {}]",
            edges[0],
            edges[edges.len() - 1],
            grid.depth()
        )));
    }

    let n_bands = edges.len() - 1;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_bands];
    for (i, cell) in grid.cells().iter().enumerate() {
        let z = grid.layer_mid_depth(cell.layer);
        // half-open bands; a mid-depth on an edge belongs to the deeper band
        let band = edges.partition_point(|&e| e <= z).saturating_sub(1);
        members[band.min(n_bands - 1)].push(map[i]);
    }
    Ok(edges
        .windows(2)
        .zip(members)
        .map(|(w, vals)| BandStats {
            lower_m: w[0],
            upper_m: w[1],
            count: vals.len(),
            summary: Summary::of(&vals),
        })
        .collect())
}

/// All metrics for one reconstruction against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Fluctuation error normalized by the fluctuation norm.
    pub error1: f64,
    /// Fluctuation error normalized by the full-field norm.
    pub error2: f64,
    pub cell_abs_error: Vec<f64>,
    pub depth_band_stats: Vec<BandStats>,
}

impl ErrorReport {
    /// Evaluates full fields `truth` and `estimate` against the library mean.
    ///
    /// `error1` is taken on the fluctuations `truth - mean` and
    /// `estimate - mean`; when the truth has no fluctuation at all it falls
    /// back to the full-field ratio.
    pub fn evaluate(
        truth: &Snapshot,
        estimate: &Snapshot,
        mean: &Snapshot,
        grid: &FieldGrid,
        band_edges: &[f64],
    ) -> Result<Self> {
        truth.check_grid(grid)?;
        estimate.check_grid(grid)?;
        mean.check_grid(grid)?;
        let fluct = |s: &Snapshot| {
            Snapshot::new(
                s.label(),
                s.values()
                    .iter()
                    .zip(mean.values())
                    .map(|(v, m)| v - m)
                    .collect(),
            )
        };
        let x_f = fluct(truth)?;
        let xhat_f = fluct(estimate)?;
        let e1 = match error1(&x_f, &xhat_f) {
            Err(Error::Division(_)) => error1(truth, estimate)?,
            other => other?,
        };
        let e2 = error2(&x_f, &xhat_f, mean)?;
        let map = error_map(truth, estimate)?;
        let bands = depth_band_stats(&map, grid, band_edges)?;
        Ok(Self {
            error1: e1,
            error2: e2,
            cell_abs_error: map,
            depth_band_stats: bands,
        })
    }
}
