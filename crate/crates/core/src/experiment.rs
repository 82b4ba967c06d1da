//! Config-driven error studies: sensor-count sweeps and fixed-sensor
//! placement comparisons, with CSV/JSON export.
//!
//! Every trial draws its randomness from `derive_seed(seed, [trial,
//! condition, p_index])`, shared by all methods and basis counts, so method
//! comparisons are paired. Trials run in parallel; results are collected in a
//! fixed order, so the written files do not depend on scheduling.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{self, FieldGrid, GridSpec, Snapshot, SnapshotLibrary};
use crate::metrics::{BandStats, ErrorReport, DEFAULT_BAND_EDGES};
use crate::pod::{compute_pod, gappy_reconstruct, GappyOptions, PodBasis};
use crate::seeds::derive_seed;
use crate::sensing::{self, NoiseModel, Placement};
use crate::sparse::{self, choose_epsilon, Dictionary, SolverOptions};
use crate::synth::{generate_library, StratificationParams, Variation};

/// Salt mixed into the per-condition library seed.
const LIBRARY_STREAM: u64 = 0x11B;
/// Sub-streams of a trial seed.
const OPERATOR_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GappyPod,
    SparseRaw,
    SparsePod,
    RobustSparse,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GappyPod => "gappy_pod",
            Method::SparseRaw => "sparse_raw",
            Method::SparsePod => "sparse_pod",
            Method::RobustSparse => "robust_sparse",
        }
    }

    /// Whether the result depends on the POD basis count.
    pub fn uses_k(self) -> bool {
        matches!(self, Method::GappyPod | Method::SparsePod)
    }

    fn is_sparse(self) -> bool {
        !matches!(self, Method::GappyPod)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum DataSource {
    /// Libraries generated per condition by the stratification model.
    Synthetic(SyntheticData),
    /// Snapshot CSV files, one per condition, on a shared grid.
    Files(FileData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Grid; the default reservoir grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Base parameters; `intake_depth` is replaced by each condition.
    #[serde(default)]
    pub base: StratificationParams,
    #[serde(default = "Variation::reservoir_default")]
    pub variation: Variation,
    /// Snapshots generated per condition (training plus test).
    pub snapshots_per_condition: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    /// Grid JSON path, relative to the config file.
    pub grid: PathBuf,
    /// Snapshot CSV per condition, in the order of `conditions`.
    pub snapshots: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Split {
    /// The last `n` snapshots of each condition are held out.
    LastN(usize),
    /// Explicit held-out snapshot indices.
    TestIndices(Vec<usize>),
}

impl Default for Split {
    fn default() -> Self {
        Split::LastN(10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonPolicy {
    /// `σ √p` from the configured Gaussian noise level.
    #[default]
    NoiseScaled,
    /// `σ √(p + 2 √(2p))`, two standard deviations above the expected noise
    /// norm, so the true field is feasible for most noise draws.
    NoiseBound,
    /// A fixed tolerance in field units.
    Fixed(f64),
}

/// Measurement noise; the seed is derived per trial.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    pub gaussian_sigma: f64,
    pub corruption_fraction: f64,
    pub corruption_scale: f64,
}

impl NoiseSettings {
    fn model(&self, seed: u64) -> NoiseModel {
        NoiseModel {
            gaussian_sigma: self.gaussian_sigma,
            corruption_fraction: self.corruption_fraction,
            corruption_scale: self.corruption_scale,
            seed,
        }
    }
}

fn default_placement() -> Placement {
    Placement::RandomPoints
}

fn default_trials() -> usize {
    20
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: Split,
    pub methods: Vec<Method>,
    pub k_list: Vec<usize>,
    pub p_list: Vec<usize>,
    /// Sensor placement for `sweep`; `fixed` always runs both line placements.
    #[serde(default = "default_placement")]
    pub placement: Placement,
    /// Intake depths in meters, one per condition.
    pub conditions: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub epsilon: EpsilonPolicy,
    /// Rescale sparse fluctuations to the mean training fluctuation norm.
    #[serde(default)]
    pub rescale: bool,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub gappy: GappyOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_edges: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Files(files) = &mut cfg.data {
            files.grid = base.join(&files.grid);
            for s in &mut files.snapshots {
                *s = base.join(&*s);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Structural checks that need no data.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.methods.is_empty() || self.k_list.is_empty() || self.p_list.is_empty() {
            return bad("methods, k_list and p_list must be non-empty".into());
        }
        if self.conditions.is_empty() {
            return bad("conditions must be non-empty".into());
        }
        if self.k_list.contains(&0) || self.p_list.contains(&0) {
            return bad("k and p values must be positive".into());
        }
        if !is_unique(&self.methods) || !is_unique(&self.k_list) || !is_unique(&self.p_list) {
            return bad("methods, k_list and p_list must not repeat entries".into());
        }
        if self.conditions.iter().any(|c| !c.is_finite()) {
            return bad("conditions must be finite intake depths".into());
        }
        let mut sorted = self.conditions.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("conditions must not repeat".into());
        }
        if self.placement == Placement::Explicit {
            return bad(
                "placement must be random_points, surface_line or vertical_dam_line".into(),
            );
        }
        if let EpsilonPolicy::Fixed(e) = self.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return bad(format!(
                    "fixed epsilon must be finite and non-negative, got {e}"
                ));
            }
        }
        self.noise
            .model(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match &self.data {
            DataSource::Synthetic(s) if s.snapshots_per_condition < 3 => {
                return bad("snapshots_per_condition must be at least 3".into());
            }
            DataSource::Files(f) if f.snapshots.len() != self.conditions.len() => {
                return bad(format!(
                    "{} snapshot files for {} conditions",
                    f.snapshots.len(),
                    self.conditions.len()
                ));
            }
            _ => {}
        }
        match &self.split {
            Split::LastN(0) => return bad("split must hold out at least one snapshot".into()),
            Split::TestIndices(ix) if ix.is_empty() || !is_unique(ix) => {
                return bad("test_indices must be non-empty and distinct".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    /// The output directory is excluded, so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn is_unique<T: Ord>(items: &[T]) -> bool {
    items.iter().collect::<BTreeSet<_>>().len() == items.len()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training library and held-out snapshots for one condition.
#[derive(Debug, Clone)]
pub struct ConditionData {
    pub intake_depth: f64,
    /// Centered training library.
    pub train: SnapshotLibrary,
    pub test: Vec<Snapshot>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Loads or generates every condition's data and applies the split.
pub fn resolve_data(cfg: &ExperimentConfig) -> Result<(FieldGrid, Vec<ConditionData>)> {
    let (grid, libraries) = match &cfg.data {
        DataSource::Synthetic(s) => {
            let grid = match &s.grid {
                Some(spec) => spec.build()?,
                None => FieldGrid::default_reservoir(),
            };
            let libs = cfg
                .conditions
                .iter()
                .enumerate()
                .map(|(c, &depth)| {
                    let base = StratificationParams {
                        intake_depth: depth,
                        ..s.base.clone()
                    };
                    let seed = derive_seed(cfg.seed, &[LIBRARY_STREAM, c as u64]);
                    generate_library(&grid, &base, s.snapshots_per_condition, &s.variation, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            (grid, libs)
        }
        DataSource::Files(f) => {
            let grid = grid::load_grid(&f.grid)?;
            let libs = f
                .snapshots
                .iter()
                .map(|path| {
                    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                    let snaps = grid::read_snapshots_csv(std::io::BufReader::new(file), &grid)
                        .map_err(|e| locate(e, path))?;
                    SnapshotLibrary::from_snapshots(grid.clone(), &snaps)
                })
                .collect::<Result<Vec<_>>>()?;
            (grid, libs)
        }
    };

    let data = libraries
        .into_iter()
        .zip(&cfg.conditions)
        .map(|(lib, &depth)| split_library(lib, &cfg.split, depth))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, data))
}

fn locate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { location, message } => Error::Format {
            location: format!("{}: {location}", path.display()),
            message,
        },
        Error::Shape {
            location,
            expected,
            found,
        } => Error::Shape {
            location: format!("{}: {location}", path.display()),
            expected,
            found,
        },
        Error::Data { location, message } => Error::Data {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    }
}

fn split_library(lib: SnapshotLibrary, split: &Split, depth: f64) -> Result<ConditionData> {
    let r = lib.r();
    let test_indices: Vec<usize> = match split {
        Split::LastN(n) => {
            if *n + 2 > r {
                return Err(Error::Config(format!(
                    "condition {depth} m has {r} snapshots; holding out {n} leaves fewer than 2 for training"
                )));
            }
            (r - n..r).collect()
        }
        Split::TestIndices(ix) => {
            if let Some(&bad) = ix.iter().find(|&&i| i >= r) {
                return Err(Error::Config(format!(
                    "test index {bad} out of range for condition {depth} m with {r} snapshots"
                )));
            }
            if ix.len() + 2 > r {
                return Err(Error::Config(format!(
                    "condition {depth} m keeps fewer than 2 training snapshots"
                )));
            }
            let mut ix = ix.clone();
            ix.sort_unstable();
            ix
        }
    };
    let held: BTreeSet<usize> = test_indices.iter().copied().collect();
    let train_indices: Vec<usize> = (0..r).filter(|i| !held.contains(i)).collect();
    let test = test_indices.iter().map(|&i| lib.snapshot(i)).collect();
    let train = lib.select(&train_indices)?.center()?;
    Ok(ConditionData {
        intake_depth: depth,
        train,
        test,
        train_indices,
        test_indices,
    })
}

/// Default band edges: 10 m intervals from the surface past the grid depth.
pub fn default_band_edges(grid: &FieldGrid) -> Vec<f64> {
    if grid.depth() == 60.0 {
        return DEFAULT_BAND_EDGES.to_vec();
    }
    let bands = (grid.depth() / 10.0).ceil().max(1.0) as usize;
    (0..=bands).map(|b| b as f64 * 10.0).collect()
}

/// One reconstruction of one test field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub method: Method,
    pub k: usize,
    pub p: usize,
    pub condition: f64,
    pub placement: Placement,
    pub trial: usize,
    pub seed: u64,
    pub error1: f64,
    pub error2: f64,
    pub ridge_mu: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub converged: bool,
    /// Fraction of corrupted sensors flagged by the outlier vector.
    pub outlier_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub method: Method,
    pub k: usize,
    pub p: usize,
    pub condition: f64,
    pub placement: Placement,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub k: usize,
    pub p: usize,
    pub condition: f64,
    pub placement: Placement,
    pub trials: usize,
    pub mean_error1: f64,
    pub mean_error2: f64,
}

/// Mean per-cell absolute error over trials for one cell of the design,
/// plus the first trial's reconstructed field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub method: Method,
    pub k: usize,
    pub p: usize,
    pub condition: f64,
    pub placement: Placement,
    pub mean_abs_error: Vec<f64>,
    pub first_trial_field: Vec<f64>,
    pub band_stats: Vec<BandStats>,
}

/// `|a - b| / min(a, b)` in percent for surface versus dam-line errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub method: Method,
    pub k: usize,
    pub p: usize,
    pub condition: f64,
    pub surface_error1: f64,
    pub vertical_error1: f64,
    pub spread_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInfo {
    pub intake_depth: f64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub library_energy: f64,
    pub numerical_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub kind: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub grid_cells: usize,
    pub band_edges: Vec<f64>,
    pub solver: SolverOptions,
    pub gappy: GappyOptions,
    pub epsilon: EpsilonPolicy,
    pub rescale: bool,
    /// How error1 and error2 are computed, since the operands are a choice.
    pub error_definitions: ErrorDefinitions,
    pub conditions: Vec<ConditionInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDefinitions {
    pub error1: String,
    pub error2: String,
}

impl Default for ErrorDefinitions {
    fn default() -> Self {
        Self {
            error1: "||x' - xhat'|| / ||x'|| with x' the test field minus the library mean (full fields if x' = 0)".into(),
            error2: "||x' - xhat'|| / ||x' + mean||, fluctuation error over full-field norm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: RunMetadata,
    pub records: Vec<ErrorRecord>,
    pub skipped: Vec<SkippedCell>,
    pub aggregates: Vec<Aggregate>,
    pub maps: Vec<ErrorMap>,
    pub spreads: Vec<Spread>,
}

/// Per-condition state shared by all trials.
struct Prepared {
    data: ConditionData,
    pod: Option<PodBasis>,
    pod_error: Option<String>,
    raw: std::result::Result<Dictionary, String>,
    energy: f64,
    mean: Snapshot,
}

fn prepare(data: ConditionData, k_max: usize) -> Result<Prepared> {
    let lib = &data.train;
    let cap = k_max.min(lib.n()).min(lib.r());
    let (pod, pod_error) = match compute_pod(lib, cap) {
        Ok(b) => (Some(b), None),
        Err(Error::Numerical(m)) => (None, Some(m)),
        Err(e) => return Err(e),
    };
    let raw = Dictionary::raw_snapshots(lib).map_err(|e| e.to_string());
    let energy = lib.mean_column_norm();
    let mean = Snapshot::new(
        "mean",
        lib.mean().expect("centered").iter().copied().collect(),
    )?;
    Ok(Prepared {
        data,
        pod,
        pod_error,
        raw,
        energy,
        mean,
    })
}

impl Prepared {
    fn basis(&self, k: usize) -> std::result::Result<PodBasis, String> {
        let Some(pod) = &self.pod else {
            return Err(self.pod_error.clone().unwrap_or_default());
        };
        let limit = self.data.train.n().min(self.data.train.r());
        if k > limit {
            return Err(format!("k = {k} exceeds min(n, r) = {limit}"));
        }
        if k > pod.numerical_rank() {
            return Err(format!(
                "k = {k} exceeds the library's numerical rank {}",
                pod.numerical_rank()
            ));
        }
        pod.truncate(k).map_err(|e| e.to_string())
    }
}

/// Result of one method on one trial.
struct Outcome {
    method: Method,
    k: usize,
    result: std::result::Result<(ErrorRecord, ErrorReport, Snapshot), String>,
}

struct Cell {
    condition: usize,
    p_index: usize,
    placement: Placement,
}

/// Mean plus two standard deviations of the norm of `p` Gaussian draws,
/// using `E||η||² = σ² p` and `Var ||η||² = 2 σ⁴ p`.
pub fn noise_bound(sigma: f64, p: usize) -> f64 {
    let p = p as f64;
    sigma * (p + 2.0 * (2.0 * p).sqrt()).sqrt()
}

fn trial_seed(base: u64, trial: usize, condition: usize, p_index: usize) -> u64 {
    derive_seed(base, &[trial as u64, condition as u64, p_index as u64])
}

/// Runs every method and basis count of the config on one trial.
fn run_trial(
    cfg: &ExperimentConfig,
    grid: &FieldGrid,
    prep: &Prepared,
    cell: &Cell,
    trial: usize,
    edges: &[f64],
) -> Result<Vec<Outcome>> {
    let p = cfg.p_list[cell.p_index];
    let seed = trial_seed(cfg.seed, trial, cell.condition, cell.p_index);
    let condition = prep.data.intake_depth;

    let skip_all = |reason: String| -> Vec<Outcome> {
        expand(cfg)
            .into_iter()
            .map(|(method, k)| Outcome {
                method,
                k,
                result: Err(reason.clone()),
            })
            .collect()
    };

    let op = match sensing::place(
        grid,
        cell.placement,
        p,
        derive_seed(seed, &[OPERATOR_STREAM]),
    ) {
        Ok(op) => op,
        Err(Error::Parameter(m)) => return Ok(skip_all(m)),
        Err(e) => return Err(e),
    };
    let truth = &prep.data.test[trial % prep.data.test.len()];
    let noise = cfg.noise.model(derive_seed(seed, &[NOISE_STREAM]));
    let measured = op.measure(truth, &noise)?;
    let y = &measured.values;

    let base_eps = match cfg.epsilon {
        EpsilonPolicy::NoiseScaled => choose_epsilon(cfg.noise.gaussian_sigma, p),
        EpsilonPolicy::NoiseBound => noise_bound(cfg.noise.gaussian_sigma, p),
        EpsilonPolicy::Fixed(e) => e,
    };

    let record = |method: Method, k: usize| ErrorRecord {
        method,
        k,
        p,
        condition,
        placement: cell.placement,
        trial,
        seed,
        error1: 0.0,
        error2: 0.0,
        ridge_mu: None,
        lambda: None,
        epsilon: None,
        converged: true,
        outlier_recall: None,
    };

    let finish =
        |mut rec: ErrorRecord, field: Snapshot| -> Result<(ErrorRecord, ErrorReport, Snapshot)> {
            let report = ErrorReport::evaluate(truth, &field, &prep.mean, grid, edges)?;
            rec.error1 = report.error1;
            rec.error2 = report.error2;
            Ok((rec, report, field))
        };

    let rescale = cfg.rescale.then_some(prep.energy);
    let sparse_run = |dict: &Dictionary,
                      method: Method,
                      k: usize|
     -> Result<(ErrorRecord, ErrorReport, Snapshot)> {
        let robust = method == Method::RobustSparse;
        // a tolerance below the best attainable fit is raised to it
        let eps = if robust {
            base_eps
        } else {
            let floor = sparse::min_residual(
                &dict.measured(&op),
                &(y - op.select(dict.mean().as_slice())),
            );
            base_eps.max(floor * (1.0 + 1e-3))
        };
        let (res, sol) =
            sparse::sparse_reconstruct(dict, &op, y, eps, &cfg.solver, robust, rescale)?;
        let mut rec = record(method, k);
        rec.lambda = sol.lambda;
        rec.epsilon = Some(eps);
        rec.converged = res.converged;
        if robust && !measured.corrupted.is_empty() {
            let flagged: BTreeSet<usize> = sol.outlier_support().into_iter().collect();
            let hit = measured
                .corrupted
                .iter()
                .filter(|i| flagged.contains(i))
                .count();
            rec.outlier_recall = Some(hit as f64 / measured.corrupted.len() as f64);
        }
        finish(rec, res.field)
    };

    let mut out = Vec::new();
    // k-independent methods are solved once and reused for every k
    let mut shared: BTreeMap<
        Method,
        std::result::Result<(ErrorRecord, ErrorReport, Snapshot), String>,
    > = BTreeMap::new();
    for (method, k) in expand(cfg) {
        let result = match method {
            Method::GappyPod => match prep.basis(k) {
                Err(reason) => Err(reason),
                Ok(basis) => match gappy_reconstruct(&basis, &op, y, cfg.gappy) {
                    Ok(res) => {
                        let mut rec = record(method, k);
                        rec.ridge_mu = res.ridge_mu;
                        Ok(finish(rec, res.field)?)
                    }
                    Err(e @ Error::Underdetermined { .. }) => Err(e.to_string()),
                    Err(e) => return Err(e),
                },
            },
            Method::SparsePod => match prep.basis(k) {
                Err(reason) => Err(reason),
                Ok(basis) => Ok(sparse_run(&Dictionary::pod_modes(&basis), method, k)?),
            },
            Method::SparseRaw | Method::RobustSparse => {
                if let Entry::Vacant(slot) = shared.entry(method) {
                    slot.insert(match &prep.raw {
                        Err(reason) => Err(reason.clone()),
                        Ok(dict) => Ok(sparse_run(dict, method, 0)?),
                    });
                }
                shared[&method].clone().map(|(mut rec, rep, f)| {
                    rec.k = k;
                    (rec, rep, f)
                })
            }
        };
        out.push(Outcome { method, k, result });
    }
    Ok(out)
}

/// `(method, k)` pairs in report order.
fn expand(cfg: &ExperimentConfig) -> Vec<(Method, usize)> {
    let mut methods = cfg.methods.clone();
    methods.sort();
    let mut ks = cfg.k_list.clone();
    ks.sort_unstable();
    methods
        .iter()
        .flat_map(|&m| ks.iter().map(move |&k| (m, k)))
        .collect()
}

struct Collected {
    records: Vec<ErrorRecord>,
    skipped: Vec<SkippedCell>,
    maps: Vec<ErrorMap>,
}

fn run_cells(
    cfg: &ExperimentConfig,
    grid: &FieldGrid,
    prepared: &[Prepared],
    placements: &[Placement],
    edges: &[f64],
    with_maps: bool,
) -> Result<Collected> {
    let mut p_order: Vec<usize> = (0..cfg.p_list.len()).collect();
    p_order.sort_by_key(|&i| cfg.p_list[i]);

    let mut jobs = Vec::new();
    for &placement in placements {
        for c in 0..prepared.len() {
            for &i in &p_order {
                for t in 0..cfg.trials {
                    jobs.push((
                        Cell {
                            condition: c,
                            p_index: i,
                            placement,
                        },
                        t,
                    ));
                }
            }
        }
    }

    let results: Vec<Vec<Outcome>> = jobs
        .par_iter()
        .map(|(cell, t)| run_trial(cfg, grid, &prepared[cell.condition], cell, *t, edges))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut skipped: BTreeMap<(Placement, usize, usize, Method, usize), SkippedCell> =
        BTreeMap::new();
    // (placement, condition, p, method, k) -> (sum map, count, first field)
    type MapAcc = (Vec<f64>, usize, Option<Vec<f64>>);
    let mut acc: BTreeMap<(Placement, usize, usize, Method, usize), MapAcc> = BTreeMap::new();

    for ((cell, _), outcomes) in jobs.iter().zip(results) {
        let p = cfg.p_list[cell.p_index];
        for o in outcomes {
            let key = (cell.placement, cell.condition, p, o.method, o.k);
            match o.result {
                Ok((rec, report, field)) => {
                    if with_maps {
                        let entry = acc
                            .entry(key)
                            .or_insert_with(|| (vec![0.0; grid.n()], 0, None));
                        entry
                            .0
                            .iter_mut()
                            .zip(&report.cell_abs_error)
                            .for_each(|(s, v)| *s += v);
                        entry.1 += 1;
                        if entry.2.is_none() {
                            entry.2 = Some(field.into_values());
                        }
                    }
                    records.push(rec);
                }
                Err(reason) => {
                    skipped.entry(key).or_insert_with(|| SkippedCell {
                        method: o.method,
                        k: o.k,
                        p,
                        condition: prepared[cell.condition].data.intake_depth,
                        placement: cell.placement,
                        reason,
                    });
                }
            }
        }
    }

    let mut maps = Vec::new();
    for ((placement, c, p, method, k), (sum, count, first)) in acc {
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let band_stats = crate::metrics::depth_band_stats(&mean, grid, edges)?;
        maps.push(ErrorMap {
            method,
            k,
            p,
            condition: prepared[c].data.intake_depth,
            placement,
            mean_abs_error: mean,
            first_trial_field: first.unwrap_or_default(),
            band_stats,
        });
    }

    sort_records(&mut records);
    Ok(Collected {
        records,
        skipped: skipped.into_values().collect(),
        maps,
    })
}

fn sort_records(records: &mut [ErrorRecord]) {
    records.sort_by(|a, b| {
        (a.placement, a.method, a.k, a.p)
            .cmp(&(b.placement, b.method, b.k, b.p))
            .then(a.condition.total_cmp(&b.condition))
            .then(a.trial.cmp(&b.trial))
    });
}

/// Means of `error1` and `error2` per `(placement, method, k, p, condition)`,
/// summed in record order.
pub fn aggregate(records: &[ErrorRecord]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for r in records {
        let same = out.last().is_some_and(|a| {
            a.placement == r.placement
                && a.method == r.method
                && a.k == r.k
                && a.p == r.p
                && a.condition.to_bits() == r.condition.to_bits()
        });
        if !same {
            out.push(Aggregate {
                method: r.method,
                k: r.k,
                p: r.p,
                condition: r.condition,
                placement: r.placement,
                trials: 0,
                mean_error1: 0.0,
                mean_error2: 0.0,
            });
            sums.push((0.0, 0.0));
        }
        let a = out.last_mut().expect("pushed above");
        let s = sums.last_mut().expect("pushed above");
        a.trials += 1;
        s.0 += r.error1;
        s.1 += r.error2;
    }
    for (a, (s1, s2)) in out.iter_mut().zip(sums) {
        a.mean_error1 = s1 / a.trials as f64;
        a.mean_error2 = s2 / a.trials as f64;
    }
    out
}

/// The cross-placement spread `|a - b| / min(a, b) * 100`; `None` when the
/// smaller error is zero.
pub fn spread_percent(a: f64, b: f64) -> Option<f64> {
    let lo = a.min(b);
    (lo > 0.0).then(|| (a - b).abs() / lo * 100.0)
}

fn spreads(aggregates: &[Aggregate]) -> Vec<Spread> {
    let mut surface: BTreeMap<(Method, usize, usize, u64), &Aggregate> = BTreeMap::new();
    for a in aggregates
        .iter()
        .filter(|a| a.placement == Placement::SurfaceLine)
    {
        surface.insert((a.method, a.k, a.p, a.condition.to_bits()), a);
    }
    let mut out: Vec<Spread> = aggregates
        .iter()
        .filter(|a| a.placement == Placement::VerticalDamLine)
        .filter_map(|v| {
            let s = surface.get(&(v.method, v.k, v.p, v.condition.to_bits()))?;
            Some(Spread {
                method: v.method,
                k: v.k,
                p: v.p,
                condition: v.condition,
                surface_error1: s.mean_error1,
                vertical_error1: v.mean_error1,
                spread_percent: spread_percent(s.mean_error1, v.mean_error1),
            })
        })
        .collect();
    out.sort_by(|a, b| {
        (a.method, a.k, a.p)
            .cmp(&(b.method, b.k, b.p))
            .then(a.condition.total_cmp(&b.condition))
    });
    out
}

fn build_report(
    kind: &str,
    cfg: &ExperimentConfig,
    placements: &[Placement],
    with_maps: bool,
) -> Result<ExperimentReport> {
    cfg.check()?;
    let (grid, data) = resolve_data(cfg)?;
    let edges = match &cfg.band_edges {
        Some(e) => e.clone(),
        None => default_band_edges(&grid),
    };
    // reject bad edges before any work
    crate::metrics::depth_band_stats(&vec![0.0; grid.n()], &grid, &edges)
        .map_err(|e| Error::Config(format!("band_edges: {e}")))?;

    let k_max = cfg.k_list.iter().copied().max().unwrap_or(1);
    let prepared = data
        .into_iter()
        .map(|d| prepare(d, k_max))
        .collect::<Result<Vec<_>>>()?;

    let collected = run_cells(cfg, &grid, &prepared, placements, &edges, with_maps)?;
    let aggregates = aggregate(&collected.records);
    let spreads = if with_maps {
        spreads(&aggregates)
    } else {
        Vec::new()
    };

    let conditions = prepared
        .iter()
        .map(|p| ConditionInfo {
            intake_depth: p.data.intake_depth,
            train_indices: p.data.train_indices.clone(),
            test_indices: p.data.test_indices.clone(),
            library_energy: p.energy,
            numerical_rank: p.pod.as_ref().map_or(0, |b| b.numerical_rank()),
        })
        .collect();

    Ok(ExperimentReport {
        metadata: RunMetadata {
            kind: kind.into(),
            config_hash: cfg.hash(),
            base_seed: cfg.seed,
            grid_cells: grid.n(),
            band_edges: edges,
            solver: cfg.solver.clone(),
            gappy: cfg.gappy,
            epsilon: cfg.epsilon,
            rescale: cfg.rescale,
            error_definitions: ErrorDefinitions::default(),
            conditions,
        },
        records: collected.records,
        skipped: collected.skipped,
        aggregates,
        maps: collected.maps,
        spreads,
    })
}

/// Error study over every `(method, k, p, condition, trial)` with the
/// configured placement.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    build_report("sweep", cfg, &[cfg.placement], false)
}

/// Surface-line versus dam-line sensors, with error maps, depth-band
/// statistics and the cross-placement spread.
pub fn run_fixed_sensors(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let has_pod = cfg.methods.contains(&Method::GappyPod);
    let has_sparse = cfg.methods.iter().any(|m| m.is_sparse());
    if !(has_pod && has_sparse) {
        return Err(Error::Config(
            "fixed-sensor runs need gappy_pod and at least one sparse method".into(),
        ));
    }
    build_report(
        "fixed",
        cfg,
        &[Placement::SurfaceLine, Placement::VerticalDamLine],
        true,
    )
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// `method,k,p,condition,trial,seed,error1,error2`.
pub fn write_records_csv<W: Write>(writer: W, records: &[ErrorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "method",
        "k",
        "p",
        "condition",
        "trial",
        "seed",
        "error1",
        "error2",
    ])
    .map_err(csv_error)?;
    for r in records {
        w.write_record([
            r.method.as_str().to_string(),
            r.k.to_string(),
            r.p.to_string(),
            r.condition.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.error1.to_string(),
            r.error2.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn write_aggregates_csv<W: Write>(writer: W, aggs: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "placement",
        "method",
        "k",
        "p",
        "condition",
        "trials",
        "mean_error1",
        "mean_error2",
    ])
    .map_err(csv_error)?;
    for a in aggs {
        w.write_record([
            a.placement.as_str().to_string(),
            a.method.as_str().to_string(),
            a.k.to_string(),
            a.p.to_string(),
            a.condition.to_string(),
            a.trials.to_string(),
            a.mean_error1.to_string(),
            a.mean_error2.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn write_spreads_csv<W: Write>(writer: W, spreads: &[Spread]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "method",
        "k",
        "p",
        "condition",
        "surface_error1",
        "vertical_error1",
        "spread_percent",
    ])
    .map_err(csv_error)?;
    for s in spreads {
        w.write_record([
            s.method.as_str().to_string(),
            s.k.to_string(),
            s.p.to_string(),
            s.condition.to_string(),
            s.surface_error1.to_string(),
            s.vertical_error1.to_string(),
            s.spread_percent.map_or("NaN".into(), |v| v.to_string()),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn write_band_stats_csv<W: Write>(writer: W, maps: &[ErrorMap]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "placement",
        "method",
        "k",
        "p",
        "condition",
        "lower_m",
        "upper_m",
        "count",
        "min",
        "q1",
        "median",
        "q3",
        "max",
        "mean",
    ])
    .map_err(csv_error)?;
    for m in maps {
        for b in &m.band_stats {
            let s = |f: fn(&crate::metrics::Summary) -> f64| {
                b.summary
                    .as_ref()
                    .map_or("NaN".into(), |x| f(x).to_string())
            };
            w.write_record([
                m.placement.as_str().to_string(),
                m.method.as_str().to_string(),
                m.k.to_string(),
                m.p.to_string(),
                m.condition.to_string(),
                b.lower_m.to_string(),
                b.upper_m.to_string(),
                b.count.to_string(),
                s(|x| x.min),
                s(|x| x.q1),
                s(|x| x.median),
                s(|x| x.q3),
                s(|x| x.max),
                s(|x| x.mean),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn map_file_stem(m: &ErrorMap) -> String {
    format!(
        "{}_{}_k{}_p{}_c{}",
        m.placement.as_str(),
        m.method.as_str(),
        m.k,
        m.p,
        m.condition
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub trial_seeds: String,
    pub solver: SolverOptions,
    pub gappy: GappyOptions,
    pub conditions: Vec<ConditionInfo>,
    /// Written files (relative to the output directory) and their SHA-256.
    pub files: BTreeMap<String, String>,
}

/// Which report files [`export`] writes; `manifest.json` is always written.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
    #[default]
    All,
}

impl ExportFormat {
    fn csv(self) -> bool {
        matches!(self, ExportFormat::Csv | ExportFormat::All)
    }

    fn json(self) -> bool {
        matches!(self, ExportFormat::Json | ExportFormat::All)
    }
}

/// Writes the report under `dir` and returns the written file names.
///
/// CSV layout: `records.csv`, `aggregates.csv`; fixed-sensor runs add
/// `spread.csv`, `band_stats.csv` and per-cell CSVs under `maps/`
/// (`*_error.csv`, `*_field.csv`). JSON: `report.json`. Every run writes
/// `manifest.json` with the SHA-256 of each other file.
pub fn export(
    report: &ExperimentReport,
    grid: &FieldGrid,
    dir: &Path,
    format: ExportFormat,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<String> = Vec::new();

    let mut put = |name: &str, f: &dyn Fn(&mut dyn Write) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = create(&path)?;
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(name.to_string());
        Ok(())
    };

    if format.csv() {
        put("records.csv", &|w| write_records_csv(w, &report.records))?;
        put("aggregates.csv", &|w| {
            write_aggregates_csv(w, &report.aggregates)
        })?;
    }
    if format.csv() && report.metadata.kind == "fixed" {
        put("spread.csv", &|w| write_spreads_csv(w, &report.spreads))?;
        put("band_stats.csv", &|w| write_band_stats_csv(w, &report.maps))?;
        for m in &report.maps {
            let stem = map_file_stem(m);
            put(&format!("maps/{stem}_error.csv"), &|w| {
                grid::write_field_map_csv(w, grid, &m.mean_abs_error)
            })?;
            put(&format!("maps/{stem}_field.csv"), &|w| {
                grid::write_field_map_csv(w, grid, &m.first_trial_field)
            })?;
        }
    }
    if format.json() {
        put("report.json", &|w| {
            serde_json::to_writer_pretty(&mut *w, report).map_err(|e| Error::Io {
                path: "report.json".into(),
                source: std::io::Error::other(e),
            })
        })?;
    }

    let mut files = BTreeMap::new();
    for name in &written {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.insert(name.clone(), hex(&Sha256::digest(&bytes)));
    }
    let manifest = Manifest {
        kind: report.metadata.kind.clone(),
        config_hash: report.metadata.config_hash.clone(),
        base_seed: report.metadata.base_seed,
        trial_seeds:
            "derive_seed(base_seed, [trial, condition_index, p_index]) with SplitMix64 mixing"
                .into(),
        solver: report.metadata.solver.clone(),
        gappy: report.metadata.gappy,
        conditions: report.metadata.conditions.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push("manifest.json".into());
    Ok(written)
}

/// Reads a `report.json` back.
pub fn load_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        location: format!("{} line {}", path.display(), e.line()),
        message: e.to_string(),
    })
}

/// Grid the config resolves to (needed by [`export`]).
pub fn config_grid(cfg: &ExperimentConfig) -> Result<FieldGrid> {
    match &cfg.data {
        DataSource::Synthetic(s) => match &s.grid {
            Some(spec) => spec.build(),
            None => Ok(FieldGrid::default_reservoir()),
        },
        DataSource::Files(f) => grid::load_grid(&f.grid),
    }
}

/// Writes the synthetic libraries as `grid.json` plus one
/// `snapshots_<depth>m.csv` per condition (training and test together).
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.check()?;
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Config(
            "gen-data needs a synthetic data source".into(),
        ));
    };
    let grid = config_grid(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid_path = dir.join("grid.json");
    grid::save_grid(&grid, &grid_path)?;
    let mut out = vec![grid_path];
    for (c, &depth) in cfg.conditions.iter().enumerate() {
        let base = StratificationParams {
            intake_depth: depth,
            ..s.base.clone()
        };
        let seed = derive_seed(cfg.seed, &[LIBRARY_STREAM, c as u64]);
        let lib = generate_library(&grid, &base, s.snapshots_per_condition, &s.variation, seed)?;
        let path = dir.join(format!("snapshots_{depth}m.csv"));
        grid::save_snapshots(&path, &lib.snapshots(), &grid)?;
        out.push(path);
    }
    Ok(out)
}

/// Summary of a validated config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub grid_cells: usize,
    pub conditions: usize,
    pub training_snapshots: Vec<usize>,
    pub test_snapshots: Vec<usize>,
    pub planned_records: usize,
}

/// Full config and data check without running any reconstruction.
pub fn validate(cfg: &ExperimentConfig) -> Result<ValidationSummary> {
    cfg.check()?;
    let (grid, data) = resolve_data(cfg)?;
    if let Some(edges) = &cfg.band_edges {
        crate::metrics::depth_band_stats(&vec![0.0; grid.n()], &grid, edges)
            .map_err(|e| Error::Config(format!("band_edges: {e}")))?;
    }
    for d in &data {
        let train: BTreeSet<_> = d.train_indices.iter().collect();
        if d.test_indices.iter().any(|i| train.contains(i)) {
            return Err(Error::Config(
                "test snapshots overlap the training library".into(),
            ));
        }
    }
    Ok(ValidationSummary {
        grid_cells: grid.n(),
        conditions: data.len(),
        training_snapshots: data.iter().map(|d| d.train.r()).collect(),
        test_snapshots: data.iter().map(|d| d.test.len()).collect(),
        planned_records: cfg.methods.len()
            * cfg.k_list.len()
            * cfg.p_list.len()
            * cfg.conditions.len()
            * cfg.trials,
    })
}
