use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{FieldGrid, Snapshot};
use crate::metrics::ErrorReport;

/// Output of a field reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub field: Snapshot,
    pub coefficients: Vec<f64>,
    /// Misfit at the sensors, `||y - C x_hat||`.
    pub residual_norm: f64,
    /// Tikhonov weight applied by the gappy solve, if any.
    pub ridge_mu: Option<f64>,
    /// Penalty weight of the final sparse solve, if any.
    pub lambda: Option<f64>,
    pub converged: bool,
    /// Filled by [`ReconstructionResult::attach_truth`].
    pub errors: Option<ErrorReport>,
}

impl ReconstructionResult {
    pub fn attach_truth(
        mut self,
        truth: &Snapshot,
        mean: &Snapshot,
        grid: &FieldGrid,
        band_edges: &[f64],
    ) -> Result<Self> {
        self.errors = Some(ErrorReport::evaluate(
            truth,
            &self.field,
            mean,
            grid,
            band_edges,
        )?);
        Ok(self)
    }
}
