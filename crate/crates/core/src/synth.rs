//! Synthetic stratified reservoir temperature fields.
//!
//! Each field is a logistic vertical profile between surface and bottom
//! temperatures, a linear longitudinal trend, a Gaussian cold bump at the
//! intake depth and a small depth-uniform sinusoidal wobble along the
//! reservoir.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, Snapshot, SnapshotLibrary};
use crate::seeds::derive_seed;

/// Number of sinusoidal terms in the longitudinal perturbation.
const PERTURBATION_TERMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratificationParams {
    /// Epilimnion temperature, °C.
    pub t_surface: f64,
    /// Hypolimnion temperature, °C.
    pub t_bottom: f64,
    /// Depth of the logistic midpoint, m.
    pub thermocline_depth: f64,
    /// Logistic scale, m.
    pub thermocline_width: f64,
    /// °C per km, measured from the upstream end.
    pub longitudinal_gradient: f64,
    /// Withdrawal depth, m.
    pub intake_depth: f64,
    /// Peak cooling at the intake depth, °C.
    pub intake_strength: f64,
    /// Bound on the seeded longitudinal perturbation, °C.
    #[serde(default = "default_perturbation")]
    pub perturbation_amplitude: f64,
    pub seed: u64,
}

fn default_perturbation() -> f64 {
    0.1
}

impl Default for StratificationParams {
    fn default() -> Self {
        Self {
            t_surface: 20.0,
            t_bottom: 6.0,
            thermocline_depth: 12.0,
            thermocline_width: 3.0,
            longitudinal_gradient: 0.02,
            intake_depth: 25.0,
            intake_strength: 1.0,
            perturbation_amplitude: default_perturbation(),
            seed: 0,
        }
    }
}

impl StratificationParams {
    pub fn validate(&self, grid: &FieldGrid) -> Result<()> {
        let fields = [
            ("t_surface", self.t_surface),
            ("t_bottom", self.t_bottom),
            ("thermocline_depth", self.thermocline_depth),
            ("thermocline_width", self.thermocline_width),
            ("longitudinal_gradient", self.longitudinal_gradient),
            ("intake_depth", self.intake_depth),
            ("intake_strength", self.intake_strength),
            ("perturbation_amplitude", self.perturbation_amplitude),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be finite, got {v}")));
        }
        if self.t_surface < self.t_bottom {
            return Err(Error::Parameter(format!(
                "t_surface ({}) must not be below t_bottom ({})",
                self.t_surface, self.t_bottom
            )));
        }
        if self.thermocline_width <= 0.0 {
            return Err(Error::Parameter(
                "thermocline_width must be positive".into(),
            ));
        }
        if self.intake_strength < 0.0 || self.perturbation_amplitude < 0.0 {
            return Err(Error::Parameter(
                "intake_strength and perturbation_amplitude must be non-negative".into(),
            ));
        }
        if !(0.0..=grid.depth()).contains(&self.intake_depth) {
            return Err(Error::Parameter(format!(
                "intake_depth {} m lies outside the water column [0, {}] m",
                self.intake_depth,
                grid.depth()
            )));
        }
        Ok(())
    }

    /// Logistic stratification profile at depth `z` (m), without the other terms.
    pub fn vertical_profile(&self, z: f64) -> f64 {
        let arg = (self.thermocline_depth - z) / self.thermocline_width;
        self.t_bottom + (self.t_surface - self.t_bottom) * logistic(arg)
    }

    fn intake_cooling(&self, z: f64, dz: f64) -> f64 {
        let u = (z - self.intake_depth) / (2.0 * dz);
        self.intake_strength * (-u * u).exp()
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Seeded sinusoidal series along the reservoir, bounded by `amplitude`.
struct Perturbation {
    coefficients: [f64; PERTURBATION_TERMS],
    phases: [f64; PERTURBATION_TERMS],
}

impl Perturbation {
    fn new(seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coefficients = [0.0f64; PERTURBATION_TERMS];
        let mut phases = [0.0f64; PERTURBATION_TERMS];
        for (c, ph) in coefficients.iter_mut().zip(phases.iter_mut()) {
            *c = rng.random_range(-1.0..=1.0);
            *ph = rng.random_range(0.0..std::f64::consts::TAU);
        }
        let l1: f64 = coefficients.iter().map(|c| c.abs()).sum();
        if l1 > 0.0 {
            coefficients.iter_mut().for_each(|c| *c *= amplitude / l1);
        }
        Self {
            coefficients,
            phases,
        }
    }

    fn at(&self, xi: f64) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(k, (c, ph))| c * ((k + 1) as f64 * std::f64::consts::PI * xi + ph).sin())
            .sum()
    }
}

/// Generates one temperature field. Bit-identical for equal inputs.
pub fn generate_snapshot(grid: &FieldGrid, p: &StratificationParams) -> Result<Snapshot> {
    p.validate(grid)?;
    let label = format!("intake_{}m_seed_{}", p.intake_depth, p.seed);
    Snapshot::new(label, field_values(grid, p))
}

fn field_values(grid: &FieldGrid, p: &StratificationParams) -> Vec<f64> {
    let wobble = Perturbation::new(p.seed, p.perturbation_amplitude);
    let length = grid.length();
    grid.cells()
        .iter()
        .map(|cell| {
            let x = grid.column_position(cell.column);
            let z = grid.layer_mid_depth(cell.layer);
            p.vertical_profile(z) + p.longitudinal_gradient * (x / 1000.0)
                - p.intake_cooling(z, grid.dz())
                + wobble.at(x / length)
        })
        .collect()
}

/// Closed interval `[min, max]` for a uniformly drawn parameter.
pub type Spread = [f64; 2];

/// Per-parameter spreads used by [`generate_library`]. Absent entries stay at
/// the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_surface: Option<Spread>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_bottom: Option<Spread>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermocline_depth: Option<Spread>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermocline_width: Option<Spread>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub longitudinal_gradient: Option<Spread>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intake_strength: Option<Spread>,
    /// Draw a fresh perturbation seed for every snapshot.
    #[serde(default)]
    pub reseed_perturbation: bool,
    /// Share of each draw taken from one per-snapshot seasonal phase, in
    /// `[0, 1]`. At `0` parameters vary independently; at `1` they all move
    /// together from the low to the high end of their spreads.
    #[serde(default)]
    pub seasonal_coupling: f64,
}

impl Variation {
    /// No spread at all: every generated snapshot equals the base one.
    pub fn none() -> Self {
        Self::default()
    }

    /// The spread used by the bundled experiments.
    pub fn reservoir_default() -> Self {
        Self {
            t_surface: Some([18.0, 22.0]),
            t_bottom: Some([4.0, 8.0]),
            thermocline_depth: Some([10.0, 14.0]),
            thermocline_width: Some([2.5, 3.5]),
            longitudinal_gradient: Some([0.01, 0.03]),
            intake_strength: Some([0.5, 1.5]),
            reseed_perturbation: true,
            seasonal_coupling: 0.8,
        }
    }

    fn check(&self) -> Result<()> {
        let all = [
            ("t_surface", self.t_surface),
            ("t_bottom", self.t_bottom),
            ("thermocline_depth", self.thermocline_depth),
            ("thermocline_width", self.thermocline_width),
            ("longitudinal_gradient", self.longitudinal_gradient),
            ("intake_strength", self.intake_strength),
        ];
        if !(0.0..=1.0).contains(&self.seasonal_coupling) {
            return Err(Error::Parameter(format!(
                "seasonal_coupling must lie in [0, 1], got {}",
                self.seasonal_coupling
            )));
        }
        for (name, spread) in all {
            if let Some([lo, hi]) = spread {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Parameter(format!(
                        "spread for {name} must be a finite [min, max] pair, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw(
        &self,
        base: &StratificationParams,
        rng: &mut ChaCha8Rng,
        seed: u64,
    ) -> StratificationParams {
        let phase: f64 = rng.random();
        let c = self.seasonal_coupling;
        let mut pick = |spread: Option<Spread>, fallback: f64| {
            let own: f64 = rng.random();
            match spread {
                Some([lo, hi]) => lo + (hi - lo) * (c * phase + (1.0 - c) * own),
                None => fallback,
            }
        };
        StratificationParams {
            t_surface: pick(self.t_surface, base.t_surface),
            t_bottom: pick(self.t_bottom, base.t_bottom),
            thermocline_depth: pick(self.thermocline_depth, base.thermocline_depth),
            thermocline_width: pick(self.thermocline_width, base.thermocline_width),
            longitudinal_gradient: pick(self.longitudinal_gradient, base.longitudinal_gradient),
            intake_depth: base.intake_depth,
            intake_strength: pick(self.intake_strength, base.intake_strength),
            perturbation_amplitude: base.perturbation_amplitude,
            seed,
        }
    }
}

/// Parameter sets drawn for each snapshot of a library.
pub fn draw_parameters(
    base: &StratificationParams,
    n_snapshots: usize,
    variation: &Variation,
    seed: u64,
) -> Result<Vec<StratificationParams>> {
    if n_snapshots == 0 {
        return Err(Error::Parameter("n_snapshots must be at least 1".into()));
    }
    variation.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_snapshots)
        .map(|j| {
            let pert_seed = if variation.reseed_perturbation {
                derive_seed(seed, &[j as u64])
            } else {
                base.seed
            };
            variation.draw(base, &mut rng, pert_seed)
        })
        .collect())
}

/// Generates an uncentered library of `n_snapshots` fields drawn around `base`.
pub fn generate_library(
    grid: &FieldGrid,
    base: &StratificationParams,
    n_snapshots: usize,
    variation: &Variation,
    seed: u64,
) -> Result<SnapshotLibrary> {
    let params = draw_parameters(base, n_snapshots, variation, seed)?;
    let snapshots = params
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.validate(grid)?;
            let label = format!("intake_{}m_{j:04}", p.intake_depth);
            Snapshot::new(label, field_values(grid, p))
        })
        .collect::<Result<Vec<_>>>()?;
    SnapshotLibrary::from_snapshots(grid.clone(), &snapshots)
}
