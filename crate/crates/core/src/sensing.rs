//! Point-sensor measurement operators and the noise/corruption model.
//!
//! An operator is a list of wet-cell state indices; applying it gathers the
//! field at those cells.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, Snapshot};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    RandomPoints,
    SurfaceLine,
    VerticalDamLine,
    Explicit,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::RandomPoints => "random_points",
            Placement::SurfaceLine => "surface_line",
            Placement::VerticalDamLine => "vertical_dam_line",
            Placement::Explicit => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    grid: FieldGrid,
    indices: Vec<usize>,
    placement: Placement,
    seed: Option<u64>,
}

impl MeasurementOperator {
    /// Operator from explicit state indices. Indices must be distinct and
    /// inside the grid.
    pub fn from_indices(grid: &FieldGrid, indices: Vec<usize>) -> Result<Self> {
        Self::build(grid, indices, Placement::Explicit, None)
    }

    fn build(
        grid: &FieldGrid,
        indices: Vec<usize>,
        placement: Placement,
        seed: Option<u64>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Operator("operator needs at least one sensor".into()));
        }
        let mut seen = vec![false; grid.n()];
        for &i in &indices {
            if i >= grid.n() {
                return Err(Error::Operator(format!(
                    "index {i} is not a wet cell (grid has {} wet cells)",
                    grid.n()
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Operator(format!("duplicate sensor index {i}")));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            indices,
            placement,
            seed,
        })
    }

    /// Operator from `(column, layer)` cell coordinates; dry or out-of-range
    /// cells are rejected.
    pub fn from_cells(grid: &FieldGrid, cells: &[(usize, usize)]) -> Result<Self> {
        let indices = cells
            .iter()
            .map(|&(c, l)| {
                grid.index_of(c, l).ok_or_else(|| {
                    Error::Operator(format!("cell (column {c}, layer {l}) is not a wet cell"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(grid, indices)
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn p(&self) -> usize {
        self.indices.len()
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Gathers `values` at the sensor cells (the product `C x`).
    pub fn select(&self, values: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.p(), self.indices.iter().map(|&i| values[i]))
    }

    /// Gathers the sensor rows of an `n x m` matrix (the product `C Ψ`).
    pub fn select_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.select_rows(&self.indices)
    }

    /// Applies the operator and returns only the readings.
    pub fn apply(&self, x: &Snapshot, noise: &NoiseModel) -> Result<DVector<f64>> {
        Ok(self.measure(x, noise)?.values)
    }

    /// Applies the operator: exact gather, then Gaussian noise, then gross
    /// corruption of `ceil(fraction * p)` seeded entries by uniform draws in
    /// `[-scale, scale]`.
    pub fn measure(&self, x: &Snapshot, noise: &NoiseModel) -> Result<Measurement> {
        x.check_grid(&self.grid)?;
        noise.validate()?;
        let mut values = self.select(x.values());

        if noise.gaussian_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, &[0]));
            let normal = Normal::new(0.0, noise.gaussian_sigma)
                .map_err(|e| Error::Parameter(e.to_string()))?;
            values
                .iter_mut()
                .for_each(|v| *v += normal.sample(&mut rng));
        }

        let n_corrupt = noise.corrupted_count(self.p());
        let mut corrupted = Vec::new();
        if n_corrupt > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, &[1]));
            corrupted = index::sample(&mut rng, self.p(), n_corrupt).into_vec();
            corrupted.sort_unstable();
            for &i in &corrupted {
                let u: f64 = rng.random();
                values[i] = noise.corruption_scale * (2.0 * u - 1.0);
            }
        }
        Ok(Measurement { values, corrupted })
    }
}

/// Sensor readings plus the positions (into the reading vector) that were
/// grossly corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: DVector<f64>,
    pub corrupted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub gaussian_sigma: f64,
    #[serde(default)]
    pub corruption_fraction: f64,
    #[serde(default)]
    pub corruption_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            gaussian_sigma: 0.0,
            corruption_fraction: 0.0,
            corruption_scale: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            gaussian_sigma: sigma,
            seed,
            ..Self::noiseless()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::Parameter(format!(
                "gaussian_sigma must be finite and non-negative, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::Parameter(format!(
                "corruption_fraction must lie in [0, 1], got {}",
                self.corruption_fraction
            )));
        }
        if !(self.corruption_scale.is_finite() && self.corruption_scale >= 0.0) {
            return Err(Error::Parameter(format!(
                "corruption_scale must be finite and non-negative, got {}",
                self.corruption_scale
            )));
        }
        Ok(())
    }

    /// `ceil(fraction * p)`, guarded against products like `0.1 * 30` that
    /// land a hair above an integer.
    pub fn corrupted_count(&self, p: usize) -> usize {
        let raw = self.corruption_fraction * p as f64;
        let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
        count.min(p)
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// `p` distinct wet cells drawn uniformly without replacement.
pub fn random_points(grid: &FieldGrid, p: usize, seed: u64) -> Result<MeasurementOperator> {
    if p == 0 || p > grid.n() {
        return Err(Error::Parameter(format!(
            "random placement needs 1 <= p <= n = {}, got p = {p}",
            grid.n()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = index::sample(&mut rng, grid.n(), p).into_vec();
    MeasurementOperator::build(grid, indices, Placement::RandomPoints, Some(seed))
}

/// Candidate `j` of `p` is `floor(j * L / p)` along a line of `L` cells.
fn even_spacing(line: &[usize], p: usize, what: &str) -> Result<Vec<usize>> {
    let l = line.len();
    if p == 0 || p > l {
        return Err(Error::Parameter(format!(
            "{what} has {l} wet cells, cannot place p = {p} sensors"
        )));
    }
    Ok((0..p).map(|j| line[j * l / p]).collect())
}

/// `p` sensors evenly spaced along the top layer, upstream first.
pub fn surface_line(grid: &FieldGrid, p: usize) -> Result<MeasurementOperator> {
    let indices = even_spacing(&grid.surface_indices(), p, "surface layer")?;
    MeasurementOperator::build(grid, indices, Placement::SurfaceLine, None)
}

/// `p` sensors evenly spaced down the dam-end column, surface first.
pub fn vertical_dam_line(grid: &FieldGrid, p: usize) -> Result<MeasurementOperator> {
    let indices = even_spacing(&grid.column_indices(grid.dam_column()), p, "dam-end column")?;
    MeasurementOperator::build(grid, indices, Placement::VerticalDamLine, None)
}

/// Builds an operator of the given placement kind.
pub fn place(
    grid: &FieldGrid,
    placement: Placement,
    p: usize,
    seed: u64,
) -> Result<MeasurementOperator> {
    match placement {
        Placement::RandomPoints => random_points(grid, p, seed),
        Placement::SurfaceLine => surface_line(grid, p),
        Placement::VerticalDamLine => vertical_dam_line(grid, p),
        Placement::Explicit => Err(Error::Parameter(
            "explicit operators are loaded from a cell list".into(),
        )),
    }
}

/// Parses a JSON list of `[column, layer]` pairs.
pub fn parse_explicit_operator(grid: &FieldGrid, text: &str) -> Result<MeasurementOperator> {
    let cells: Vec<(usize, usize)> = serde_json::from_str(text).map_err(|e| Error::Format {
        location: format!("sensor list line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    MeasurementOperator::from_cells(grid, &cells)
}

pub fn load_explicit_operator(
    grid: &FieldGrid,
    path: impl AsRef<Path>,
) -> Result<MeasurementOperator> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_explicit_operator(grid, &text)
}
