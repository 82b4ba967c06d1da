//! Gridded scalar fields on a longitudinal x depth section.
//!
//! Wet cells are flattened into a state vector column by column (upstream to
//! dam), surface to bottom within a column, so a vertical line of sensors is a
//! contiguous slice of the state vector.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel written for dry cells in dense exports.
pub const DRY_SENTINEL: f64 = f64::NAN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub column: usize,
    pub layer: usize,
}

/// Structured 2-D grid with a wet-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    nx: usize,
    nz: usize,
    dx: f64,
    dz: f64,
    surface_elevation: f64,
    // layer-major: mask[layer * nx + column]
    wet_mask: Vec<bool>,
    cells: Vec<Cell>,
    index: Vec<Option<usize>>,
}

impl FieldGrid {
    /// Builds a grid from a mask given as `nz` rows (surface first) of `nx` flags.
    pub fn new(nx: usize, nz: usize, dx: f64, dz: f64, wet_mask: &[Vec<bool>]) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::Parameter(format!(
                "grid dimensions must be positive, got nx={nx} nz={nz}"
            )));
        }
        if !(dx.is_finite() && dx > 0.0 && dz.is_finite() && dz > 0.0) {
            return Err(Error::Parameter(format!(
                "cell sizes must be positive and finite, got dx={dx} dz={dz}"
            )));
        }
        if wet_mask.len() != nz {
            return Err(Error::Shape {
                location: "wet_mask".into(),
                expected: nz,
                found: wet_mask.len(),
            });
        }
        let mut mask = Vec::with_capacity(nx * nz);
        for (layer, row) in wet_mask.iter().enumerate() {
            if row.len() != nx {
                return Err(Error::Shape {
                    location: format!("wet_mask layer {layer}"),
                    expected: nx,
                    found: row.len(),
                });
            }
            mask.extend_from_slice(row);
        }

        let mut cells = Vec::new();
        let mut index = vec![None; nx * nz];
        for column in 0..nx {
            let mut seen_dry = false;
            for layer in 0..nz {
                let wet = mask[layer * nx + column];
                if wet && seen_dry {
                    return Err(Error::Parameter(format!(
                        "column {column} has a wet cell at layer {layer} below a dry cell"
                    )));
                }
                if wet {
                    index[layer * nx + column] = Some(cells.len());
                    cells.push(Cell { column, layer });
                } else {
                    seen_dry = true;
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::Parameter("grid has no wet cells".into()));
        }

        Ok(Self {
            nx,
            nz,
            dx,
            dz,
            surface_elevation: 0.0,
            wet_mask: mask,
            cells,
            index,
        })
    }

    /// Grid whose wet depth grows linearly from one layer at the upstream end
    /// to the full `nz` layers at the dam (last column).
    pub fn triangular(nx: usize, nz: usize, dx: f64, dz: f64) -> Result<Self> {
        let depth_of = |column: usize| ((column + 1) * nz).div_ceil(nx).clamp(1, nz);
        let mask: Vec<Vec<bool>> = (0..nz)
            .map(|layer| (0..nx).map(|c| layer < depth_of(c)).collect())
            .collect();
        Self::new(nx, nz, dx, dz, &mask)
    }

    /// 60 columns of 1 km by 30 layers of 2 m, triangular cross-section.
    pub fn default_reservoir() -> Self {
        Self::triangular(60, 30, 1000.0, 2.0).expect("default grid is valid")
    }

    pub fn with_surface_elevation(mut self, elevation_m: f64) -> Self {
        self.surface_elevation = elevation_m;
        self
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn surface_elevation(&self) -> f64 {
        self.surface_elevation
    }

    /// Number of wet cells, the length of every state vector on this grid.
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    /// Total depth of the water column at its deepest (`nz * dz`).
    pub fn depth(&self) -> f64 {
        self.nz as f64 * self.dz
    }

    /// Longitudinal extent (`nx * dx`) in meters.
    pub fn length(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn is_wet(&self, column: usize, layer: usize) -> bool {
        column < self.nx && layer < self.nz && self.wet_mask[layer * self.nx + column]
    }

    pub fn index_of(&self, column: usize, layer: usize) -> Option<usize> {
        if column < self.nx && layer < self.nz {
            self.index[layer * self.nx + column]
        } else {
            None
        }
    }

    pub fn cell(&self, index: usize) -> Cell {
        self.cells[index]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Depth below the surface of the middle of `layer`, in meters.
    pub fn layer_mid_depth(&self, layer: usize) -> f64 {
        (layer as f64 + 0.5) * self.dz
    }

    /// Distance of the middle of `column` from the upstream end, in meters.
    pub fn column_position(&self, column: usize) -> f64 {
        (column as f64 + 0.5) * self.dx
    }

    /// State indices of the wet top-layer cells, upstream to dam.
    pub fn surface_indices(&self) -> Vec<usize> {
        (0..self.nx).filter_map(|c| self.index_of(c, 0)).collect()
    }

    /// State indices of a column, surface to bottom.
    pub fn column_indices(&self, column: usize) -> Vec<usize> {
        (0..self.nz)
            .filter_map(|l| self.index_of(column, l))
            .collect()
    }

    /// The column adjoining the dam (the last one).
    pub fn dam_column(&self) -> usize {
        self.nx - 1
    }

    pub fn wet_mask_rows(&self) -> Vec<Vec<bool>> {
        self.wet_mask.chunks(self.nx).map(|r| r.to_vec()).collect()
    }

    pub fn to_spec(&self) -> GridSpec {
        GridSpec {
            nx: self.nx,
            nz: self.nz,
            dx_m: self.dx,
            dz_m: self.dz,
            surface_elevation_m: Some(self.surface_elevation),
            wet_mask: self.wet_mask_rows(),
        }
    }
}

/// On-disk grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub nz: usize,
    pub dx_m: f64,
    pub dz_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_elevation_m: Option<f64>,
    pub wet_mask: Vec<Vec<bool>>,
}

impl GridSpec {
    pub fn build(&self) -> Result<FieldGrid> {
        let grid = FieldGrid::new(self.nx, self.nz, self.dx_m, self.dz_m, &self.wet_mask)?;
        Ok(grid.with_surface_elevation(self.surface_elevation_m.unwrap_or(0.0)))
    }
}

pub fn parse_grid_spec(text: &str) -> Result<FieldGrid> {
    let spec: GridSpec = serde_json::from_str(text).map_err(|e| Error::Format {
        location: format!("grid spec line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    spec.build()
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<FieldGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid_spec(&text)
}

pub fn save_grid(grid: &FieldGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&grid.to_spec()).expect("grid spec serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One field state: a temperature per wet cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    label: String,
    values: Vec<f64>,
}

impl Snapshot {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                location: format!("value {i}"),
                message: format!("non-finite value {}", values[i]),
            });
        }
        Ok(Self {
            label: label.into(),
            values,
        })
    }

    pub fn on_grid(label: impl Into<String>, values: Vec<f64>, grid: &FieldGrid) -> Result<Self> {
        let s = Self::new(label, values)?;
        s.check_grid(grid)?;
        Ok(s)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn check_grid(&self, grid: &FieldGrid) -> Result<()> {
        if self.values.len() != grid.n() {
            return Err(Error::Shape {
                location: format!("snapshot '{}'", self.label),
                expected: grid.n(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Snapshot matrix (one column per snapshot) with an optional removed mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotLibrary {
    grid: FieldGrid,
    data: DMatrix<f64>,
    labels: Vec<String>,
    mean: Option<DVector<f64>>,
}

impl SnapshotLibrary {
    pub fn from_snapshots(grid: FieldGrid, snapshots: &[Snapshot]) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Parameter(
                "snapshot library needs at least one snapshot".into(),
            ));
        }
        for s in snapshots {
            s.check_grid(&grid)?;
        }
        let n = grid.n();
        let data = DMatrix::from_fn(n, snapshots.len(), |i, j| snapshots[j].values[i]);
        Ok(Self {
            grid,
            data,
            labels: snapshots.iter().map(|s| s.label.clone()).collect(),
            mean: None,
        })
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Number of snapshots.
    pub fn r(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_centered(&self) -> bool {
        self.mean.is_some()
    }

    /// The stored matrix (fluctuations when centered).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }

    /// Stored column `j` (a fluctuation when the library is centered).
    pub fn column(&self, j: usize) -> Snapshot {
        Snapshot {
            label: self.labels[j].clone(),
            values: self.data.column(j).iter().copied().collect(),
        }
    }

    /// Full field of snapshot `j` with the mean added back.
    pub fn snapshot(&self, j: usize) -> Snapshot {
        let mut values: Vec<f64> = self.data.column(j).iter().copied().collect();
        if let Some(mean) = &self.mean {
            values
                .iter_mut()
                .zip(mean.iter())
                .for_each(|(v, m)| *v += m);
        }
        Snapshot {
            label: self.labels[j].clone(),
            values,
        }
    }

    pub fn snapshots(&self) -> Vec<Snapshot> {
        (0..self.r()).map(|j| self.snapshot(j)).collect()
    }

    /// Library restricted to the given columns, keeping the centering state.
    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Parameter("selection is empty".into()));
        }
        if let Some(&bad) = columns.iter().find(|&&j| j >= self.r()) {
            return Err(Error::Parameter(format!(
                "column {bad} out of range for library with {} snapshots",
                self.r()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            data: self.data.select_columns(columns),
            labels: columns.iter().map(|&j| self.labels[j].clone()).collect(),
            mean: self.mean.clone(),
        })
    }

    /// Subtracts the column-wise mean from every snapshot.
    pub fn center(self) -> Result<Self> {
        if self.mean.is_some() {
            return Err(Error::State("library is already centered".into()));
        }
        let mean = self.data.column_mean();
        let mut data = self.data;
        for mut col in data.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self {
            grid: self.grid,
            data,
            labels: self.labels,
            mean: Some(mean),
        })
    }

    /// Adds the stored mean back, undoing [`SnapshotLibrary::center`].
    pub fn uncenter(self) -> Result<Self> {
        let Some(mean) = self.mean else {
            return Err(Error::State("library is not centered".into()));
        };
        let mut data = self.data;
        for mut col in data.column_iter_mut() {
            col += &mean;
        }
        Ok(Self {
            grid: self.grid,
            data,
            labels: self.labels,
            mean: None,
        })
    }

    /// Mean L2 norm of the stored columns. For a centered library this is
    /// the typical fluctuation energy used for amplitude rescaling.
    pub fn mean_column_norm(&self) -> f64 {
        let total: f64 = self.data.column_iter().map(|c| c.norm()).sum();
        total / self.r() as f64
    }
}

/// Reads a snapshot CSV (`label,v0,...,v{n-1}`) validated against `grid`.
pub fn read_snapshots_csv<R: Read>(reader: R, grid: &FieldGrid) -> Result<Vec<Snapshot>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let n = grid.n();

    let header = match records.next() {
        Some(rec) => rec.map_err(csv_format_error)?,
        None => {
            return Err(Error::Format {
                location: "row 1".into(),
                message: "missing header row".into(),
            })
        }
    };
    if header.get(0) != Some("label") {
        return Err(Error::Format {
            location: "row 1, column 1".into(),
            message: format!("expected 'label', found {:?}", header.get(0).unwrap_or("")),
        });
    }
    if header.len() != n + 1 {
        return Err(Error::Shape {
            location: "header row".into(),
            expected: n,
            found: header.len().saturating_sub(1),
        });
    }
    for (j, name) in header.iter().enumerate().skip(1) {
        if name != format!("v{}", j - 1) {
            return Err(Error::Format {
                location: format!("row 1, column {}", j + 1),
                message: format!("expected 'v{}', found {name:?}", j - 1),
            });
        }
    }

    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_format_error)?;
        let row = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != n + 1 {
            return Err(Error::Shape {
                location: format!("row {row}"),
                expected: n,
                found: rec.len().saturating_sub(1),
            });
        }
        let label = rec.get(0).unwrap_or_default().to_string();
        let mut values = Vec::with_capacity(n);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                location: format!("row {row}, column {}", j + 1),
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    location: format!("row {row}, column {}", j + 1),
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        out.push(Snapshot { label, values });
    }
    Ok(out)
}

fn csv_format_error(e: csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("row {}", p.line()),
        None => "csv".into(),
    };
    Error::Format {
        location,
        message: e.to_string(),
    }
}

/// Writes snapshots in the CSV layout read by [`read_snapshots_csv`], with
/// shortest round-trip decimal formatting.
pub fn write_snapshots_csv<W: Write>(writer: W, snapshots: &[Snapshot], n: usize) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    let mut header = Vec::with_capacity(n + 1);
    header.push("label".to_string());
    header.extend((0..n).map(|i| format!("v{i}")));
    wtr.write_record(&header).map_err(csv_write_error)?;
    for s in snapshots {
        if s.len() != n {
            return Err(Error::Shape {
                location: format!("snapshot '{}'", s.label),
                expected: n,
                found: s.len(),
            });
        }
        let mut row = Vec::with_capacity(n + 1);
        row.push(s.label.clone());
        row.extend(s.values.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(csv_write_error)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))
}

fn csv_write_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv writer>", io),
        other => Error::Format {
            location: "csv writer".into(),
            message: format!("{other:?}"),
        },
    }
}

/// Loads an uncentered library from a snapshot CSV and a grid spec JSON.
pub fn load_snapshots(
    path: impl AsRef<Path>,
    grid_spec: impl AsRef<Path>,
) -> Result<SnapshotLibrary> {
    let grid = load_grid(grid_spec)?;
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let snapshots = read_snapshots_csv(std::io::BufReader::new(file), &grid)?;
    if snapshots.is_empty() {
        return Err(Error::Format {
            location: path.display().to_string(),
            message: "no snapshot rows".into(),
        });
    }
    SnapshotLibrary::from_snapshots(grid, &snapshots)
}

pub fn save_snapshots(
    path: impl AsRef<Path>,
    snapshots: &[Snapshot],
    grid: &FieldGrid,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshots_csv(std::io::BufWriter::new(file), snapshots, grid.n())
}

/// Dense `[layer][column]` array; dry cells hold [`DRY_SENTINEL`].
pub fn snapshot_to_grid(s: &Snapshot, grid: &FieldGrid) -> Result<Vec<Vec<f64>>> {
    s.check_grid(grid)?;
    let mut dense = vec![vec![DRY_SENTINEL; grid.nx()]; grid.nz()];
    for (i, cell) in grid.cells().iter().enumerate() {
        dense[cell.layer][cell.column] = s.values[i];
    }
    Ok(dense)
}

/// Inverse of [`snapshot_to_grid`]: gathers the wet cells of a dense array.
pub fn grid_to_snapshot(dense: &[Vec<f64>], grid: &FieldGrid, label: &str) -> Result<Snapshot> {
    if dense.len() != grid.nz() {
        return Err(Error::Shape {
            location: "dense field layers".into(),
            expected: grid.nz(),
            found: dense.len(),
        });
    }
    if let Some((l, row)) = dense.iter().enumerate().find(|(_, r)| r.len() != grid.nx()) {
        return Err(Error::Shape {
            location: format!("dense field layer {l}"),
            expected: grid.nx(),
            found: row.len(),
        });
    }
    let values = grid
        .cells()
        .iter()
        .map(|c| dense[c.layer][c.column])
        .collect();
    Snapshot::new(label, values)
}

/// Per-cell CSV (`column,layer,depth_m,value`) over the full grid, with
/// `NaN` for dry cells.
pub fn write_field_map_csv<W: Write>(writer: W, grid: &FieldGrid, values: &[f64]) -> Result<()> {
    if values.len() != grid.n() {
        return Err(Error::Shape {
            location: "field map".into(),
            expected: grid.n(),
            found: values.len(),
        });
    }
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    wtr.write_record(["column", "layer", "depth_m", "value"])
        .map_err(csv_write_error)?;
    for layer in 0..grid.nz() {
        for column in 0..grid.nx() {
            let value = match grid.index_of(column, layer) {
                Some(i) => values[i].to_string(),
                None => "NaN".to_string(),
            };
            wtr.write_record([
                column.to_string(),
                layer.to_string(),
                grid.layer_mid_depth(layer).to_string(),
                value,
            ])
            .map_err(csv_write_error)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))
}
