//! POD bases and Gappy-POD least-squares reconstruction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, Snapshot, SnapshotLibrary};
use crate::reconstruction::ReconstructionResult;
use crate::sensing::MeasurementOperator;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Condition number of `C Φ` above which the ridge is switched on.
pub const RIDGE_CONDITION_THRESHOLD: f64 = 1e8;

/// Ridge weight relative to `||C Φ||₂²`.
pub const RIDGE_RELATIVE_WEIGHT: f64 = 1e-8;

/// Truncated orthonormal modes of a centered snapshot library.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    grid: FieldGrid,
    modes: DMatrix<f64>,
    singular_values: Vec<f64>,
    mean: DVector<f64>,
    energy_fractions: Vec<f64>,
    requested_k: usize,
    numerical_rank: usize,
}

impl PodBasis {
    /// Basis from explicit orthonormal modes (`n x k`), singular values in
    /// non-increasing order, and a mean field.
    pub fn from_modes(
        grid: &FieldGrid,
        modes: DMatrix<f64>,
        singular_values: Vec<f64>,
        mean: DVector<f64>,
    ) -> Result<Self> {
        let k = modes.ncols();
        if k == 0 || modes.nrows() != grid.n() || mean.len() != grid.n() {
            return Err(Error::Shape {
                location: "explicit POD modes".into(),
                expected: grid.n(),
                found: modes.nrows(),
            });
        }
        if singular_values.len() != k
            || singular_values.windows(2).any(|w| w[0] < w[1])
            || singular_values.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Parameter(
                "singular values must be k positive values in non-increasing order".into(),
            ));
        }
        let gram = modes.transpose() * &modes;
        if (gram - DMatrix::<f64>::identity(k, k)).abs().max() > 1e-10 {
            return Err(Error::Parameter("modes are not orthonormal".into()));
        }
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let energy_fractions = singular_values
            .iter()
            .map(|s| {
                acc += s * s;
                acc / total
            })
            .collect();
        Ok(Self {
            grid: grid.clone(),
            modes,
            singular_values,
            mean,
            energy_fractions,
            requested_k: k,
            numerical_rank: k,
        })
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    /// `n x k` matrix of modes.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> Snapshot {
        Snapshot::new(
            format!("mode_{i}"),
            self.modes.column(i).iter().copied().collect(),
        )
        .expect("modes are finite")
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn mean_snapshot(&self) -> Snapshot {
        Snapshot::new("mean", self.mean.iter().copied().collect()).expect("mean is finite")
    }

    /// Cumulative captured energy after each retained mode, relative to the
    /// whole library.
    pub fn energy_fractions(&self) -> &[f64] {
        &self.energy_fractions
    }

    /// Number of retained modes (the effective k).
    pub fn k(&self) -> usize {
        self.modes.ncols()
    }

    pub fn requested_k(&self) -> usize {
        self.requested_k
    }

    /// Numerical rank of the library the basis came from.
    pub fn numerical_rank(&self) -> usize {
        self.numerical_rank
    }

    /// The leading `k` modes (nested in `self`).
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        let eff = k.min(self.k());
        Ok(Self {
            grid: self.grid.clone(),
            modes: self.modes.columns(0, eff).into_owned(),
            singular_values: self.singular_values[..eff].to_vec(),
            mean: self.mean.clone(),
            energy_fractions: self.energy_fractions[..eff].to_vec(),
            requested_k: k,
            numerical_rank: self.numerical_rank,
        })
    }
}

/// Leading `k` left singular vectors of the centered library.
///
/// Requests beyond the library's numerical rank are truncated; compare
/// [`PodBasis::k`] with [`PodBasis::requested_k`].
pub fn compute_pod(lib: &SnapshotLibrary, k: usize) -> Result<PodBasis> {
    let Some(mean) = lib.mean() else {
        return Err(Error::State("POD needs a centered library".into()));
    };
    let max_k = lib.n().min(lib.r());
    if k == 0 || k > max_k {
        return Err(Error::Parameter(format!(
            "k must lie in [1, min(n, r) = {max_k}], got {k}"
        )));
    }

    let svd = lib.matrix().clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let largest = sigma[0];
    if largest == 0.0 || !largest.is_finite() {
        return Err(Error::Numerical(
            "library has no fluctuation energy to decompose".into(),
        ));
    }
    let rank = sigma
        .iter()
        .take_while(|&&s| s > RANK_TOLERANCE * largest)
        .count();
    let eff = k.min(rank);

    let mut modes = DMatrix::zeros(lib.n(), eff);
    for (j, &src) in order.iter().take(eff).enumerate() {
        let mut col = u.column(src).into_owned();
        // sign convention: largest-magnitude entry positive
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        modes.set_column(j, &col);
    }

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    let energy_fractions = sigma[..eff]
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect();

    Ok(PodBasis {
        grid: lib.grid().clone(),
        modes,
        singular_values: sigma[..eff].to_vec(),
        mean: mean.clone(),
        energy_fractions,
        requested_k: k,
        numerical_rank: rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GappyOptions {
    /// Apply the Tikhonov ridge when `C Φ` is ill-conditioned. When off, an
    /// ill-conditioned or under-sampled system is an error.
    pub regularize: bool,
}

impl Default for GappyOptions {
    fn default() -> Self {
        Self { regularize: true }
    }
}

/// Least-squares fit of mode coefficients to point readings.
///
/// Solves `min_a ||y - C x̄ - C Φ a||₂`; when `cond(C Φ) > 1e8` and
/// regularization is on, adds `μ ||a||²` with `μ = 1e-8 ||C Φ||₂²`.
pub fn gappy_reconstruct(
    basis: &PodBasis,
    op: &MeasurementOperator,
    y: &DVector<f64>,
    opts: GappyOptions,
) -> Result<ReconstructionResult> {
    if op.grid().n() != basis.grid().n() {
        return Err(Error::Operator(format!(
            "operator grid has {} wet cells, basis grid has {}",
            op.grid().n(),
            basis.grid().n()
        )));
    }
    if y.len() != op.p() {
        return Err(Error::Shape {
            location: "measurement vector".into(),
            expected: op.p(),
            found: y.len(),
        });
    }
    let p = op.p();
    let k = basis.k();
    if p < k && !opts.regularize {
        return Err(Error::Underdetermined {
            observations: p,
            unknowns: k,
        });
    }

    let a_mat = op.select_rows(basis.modes());
    let b = y - op.select(basis.mean().as_slice());

    let svd = a_mat.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;
    let s_max = sigma.max();
    // fewer rows than modes leaves k - p singular values at zero
    let s_min = if p < k { 0.0 } else { sigma.min() };
    let cond = if s_min > 0.0 {
        s_max / s_min
    } else {
        f64::INFINITY
    };

    let ridge = if cond > RIDGE_CONDITION_THRESHOLD {
        if !opts.regularize {
            return Err(Error::Underdetermined {
                observations: p,
                unknowns: k,
            });
        }
        Some(RIDGE_RELATIVE_WEIGHT * s_max * s_max)
    } else {
        None
    };

    let ub = u.transpose() * &b;
    let scaled = DVector::from_iterator(
        sigma.len(),
        sigma.iter().zip(ub.iter()).map(|(&s, &c)| {
            let denom = match ridge {
                Some(mu) => s * s + mu,
                None => s * s,
            };
            if denom > 0.0 {
                s * c / denom
            } else {
                0.0
            }
        }),
    );
    let coeffs = v_t.transpose() * scaled;
    let residual_norm = (&b - &a_mat * &coeffs).norm();
    let values = basis.mean() + basis.modes() * &coeffs;

    Ok(ReconstructionResult {
        field: Snapshot::new("gappy_pod", values.iter().copied().collect())?,
        coefficients: coeffs.iter().copied().collect(),
        residual_norm,
        ridge_mu: ridge,
        lambda: None,
        converged: true,
        errors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::error1;
    use crate::sensing::{random_points, NoiseModel};
    use crate::synth::{generate_library, StratificationParams, Variation};

    fn tiny_grid() -> FieldGrid {
        FieldGrid::new(2, 1, 1.0, 1.0, &[vec![true, true]]).unwrap()
    }

    fn synthetic_basis(k: usize) -> PodBasis {
        let g = FieldGrid::default_reservoir();
        let lib = generate_library(
            &g,
            &StratificationParams::default(),
            30,
            &Variation::reservoir_default(),
            17,
        )
        .unwrap()
        .center()
        .unwrap();
        compute_pod(&lib, k).unwrap()
    }

    #[test]
    fn hand_svd_two_by_two() {
        let snaps = [
            Snapshot::new("a", vec![1.0, 0.0]).unwrap(),
            Snapshot::new("b", vec![0.0, 1.0]).unwrap(),
        ];
        let lib = SnapshotLibrary::from_snapshots(tiny_grid(), &snaps)
            .unwrap()
            .center()
            .unwrap();
        let basis = compute_pod(&lib, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m = basis.modes().column(0);
        assert!((m[0].abs() - h).abs() < 1e-12 && (m[1].abs() - h).abs() < 1e-12);
        assert!(m[0] * m[1] < 0.0);
        assert!((basis.singular_values()[0] - 1.0).abs() < 1e-12);
        assert!((basis.energy_fractions()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_truncation_reports_effective_k() {
        let snaps = [
            Snapshot::new("a", vec![1.0, 0.0]).unwrap(),
            Snapshot::new("b", vec![0.0, 1.0]).unwrap(),
        ];
        let lib = SnapshotLibrary::from_snapshots(tiny_grid(), &snaps)
            .unwrap()
            .center()
            .unwrap();
        let basis = compute_pod(&lib, 2).unwrap();
        assert_eq!(basis.k(), 1);
        assert_eq!(basis.requested_k(), 2);
        assert!(matches!(compute_pod(&lib, 3), Err(Error::Parameter(_))));
        assert!(matches!(compute_pod(&lib, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn uncentered_library_rejected() {
        let lib = SnapshotLibrary::from_snapshots(
            tiny_grid(),
            &[Snapshot::new("a", vec![1.0, 2.0]).unwrap()],
        )
        .unwrap();
        assert!(matches!(compute_pod(&lib, 1), Err(Error::State(_))));
    }

    #[test]
    fn zero_energy_library_is_numerical_error() {
        let s = Snapshot::new("a", vec![1.0, 2.0]).unwrap();
        let lib = SnapshotLibrary::from_snapshots(tiny_grid(), &[s.clone(), s])
            .unwrap()
            .center()
            .unwrap();
        assert!(matches!(compute_pod(&lib, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn basis_invariants_on_synthetic_library() {
        let basis = synthetic_basis(6);
        let gram = basis.modes().transpose() * basis.modes();
        let eye = DMatrix::<f64>::identity(basis.k(), basis.k());
        assert!((gram - eye).abs().max() <= 1e-10);
        assert!(basis.singular_values().windows(2).all(|w| w[0] >= w[1]));
        assert!(basis.energy_fractions().windows(2).all(|w| w[0] <= w[1]));
        assert!(*basis.energy_fractions().last().unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn underdetermined_without_regularization() {
        let basis = PodBasis::from_modes(
            &tiny_grid(),
            DMatrix::identity(2, 2),
            vec![1.0, 1.0],
            DVector::zeros(2),
        )
        .unwrap();
        let op = MeasurementOperator::from_indices(&tiny_grid(), vec![0]).unwrap();
        let y = DVector::from_vec(vec![3.0]);
        let err = gappy_reconstruct(&basis, &op, &y, GappyOptions { regularize: false });
        assert!(matches!(
            err,
            Err(Error::Underdetermined {
                observations: 1,
                unknowns: 2
            })
        ));
        let ok = gappy_reconstruct(&basis, &op, &y, GappyOptions::default()).unwrap();
        assert!(ok.ridge_mu.is_some());
        assert!(ok.coefficients.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn exact_recovery_in_span() {
        let basis = synthetic_basis(3);
        let g = basis.grid().clone();
        let coeffs = DVector::from_vec(vec![2.0, -1.5, 0.7]);
        let x = basis.mean() + basis.modes() * &coeffs;
        let x = Snapshot::new("x", x.iter().copied().collect()).unwrap();
        let op = random_points(&g, 6, 4).unwrap();
        let y = op.apply(&x, &NoiseModel::noiseless()).unwrap();
        let res = gappy_reconstruct(&basis, &op, &y, GappyOptions::default()).unwrap();
        assert!(res.ridge_mu.is_none());
        assert!(error1(&x, &res.field).unwrap() <= 1e-10);
        for (a, b) in res.coefficients.iter().zip(coeffs.iter()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn full_observation_is_orthogonal_projection() {
        let basis = synthetic_basis(3);
        let g = basis.grid().clone();
        let x: Vec<f64> = (0..g.n()).map(|i| 10.0 + (i as f64 * 0.37).sin()).collect();
        let xs = Snapshot::new("x", x.clone()).unwrap();
        let op = MeasurementOperator::from_indices(&g, (0..g.n()).collect()).unwrap();
        let y = op.apply(&xs, &NoiseModel::noiseless()).unwrap();
        let res = gappy_reconstruct(&basis, &op, &y, GappyOptions::default()).unwrap();

        let xv = DVector::from_vec(x);
        let fl = &xv - basis.mean();
        let proj = basis.mean() + basis.modes() * (basis.modes().transpose() * fl);
        let diff = (res.field.to_vector() - &proj).norm() / proj.norm();
        assert!(diff <= 1e-10, "{diff}");
    }

    #[test]
    fn residual_non_increasing_in_k() {
        let basis = synthetic_basis(5);
        let g = basis.grid().clone();
        let lib_field = Snapshot::new(
            "x",
            (0..g.n()).map(|i| 12.0 + 0.01 * (i % 17) as f64).collect(),
        )
        .unwrap();
        let op = random_points(&g, 40, 9).unwrap();
        let y = op.apply(&lib_field, &NoiseModel::noiseless()).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let b = basis.truncate(k).unwrap();
            let r = gappy_reconstruct(&b, &op, &y, GappyOptions::default())
                .unwrap()
                .residual_norm;
            assert!(r <= last * (1.0 + 1e-12), "k={k}: {r} > {last}");
            last = r;
        }
    }
}
