//! Sparse-representation reconstruction.
//!
//! The field fluctuation is coded as `Ψ s` over a dictionary `Ψ` (centered
//! snapshots or POD modes) and `s` is the basis-pursuit-denoising solution
//!
//! ```text
//! min ||s||₁  subject to  ||y - C Ψ s||₂ <= ε
//! ```
//!
//! The constrained problem is solved through its penalized form
//! `½||y - D s||² + λ||s||₁`. The default [`Algorithm::Homotopy`] follows the
//! piecewise-linear minimizer path from the largest useful `λ` downward and
//! stops on the segment where the residual reaches `ε`, which is exact up to
//! rounding and indifferent to conditioning. [`Algorithm::ProximalGradient`]
//! runs FISTA with adaptive restart, bisecting on `λ` until the residual
//! meets `ε`; once the iterate's support and signs settle, the exact optimum
//! on that support has a closed form, accepted whenever it satisfies the
//! optimality conditions. There `ε = 0` switches to minimum-L1 interpolation
//! by ADMM with the same closed-form finish.
//!
//! Columns are scaled to unit norm internally; the L1 objective is reweighted
//! so that the problem solved is still `min ||s||₁` in the caller's units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, Snapshot, SnapshotLibrary};
use crate::pod::PodBasis;
use crate::reconstruction::ReconstructionResult;
use crate::sensing::MeasurementOperator;

/// Relative slack on `||y - D s|| <= ε` accepted as feasible.
pub const FEASIBILITY_RTOL: f64 = 1e-6;

/// Absolute feasibility slack relative to `||y||`, so that `ε = 0` is
/// attainable in floating point.
pub const FEASIBILITY_FLOOR: f64 = 1e-10;

/// Relative tolerance for the optimality certificate of a polished solution.
const KKT_RTOL: f64 = 1e-8;

/// Singular values of a support submatrix below this fraction of the largest
/// mark it rank deficient.
const SUPPORT_RCOND: f64 = 1e-10;

/// Penalty range searched by bisection, relative to the smallest `λ` that
/// zeroes every coefficient.
const LAMBDA_FLOOR: f64 = 1e-12;

/// Iterations between closed-form finish attempts inside FISTA.
const POLISH_INTERVAL: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Exact path following in `λ`.
    #[default]
    Homotopy,
    /// FISTA with bisection on `λ`.
    ProximalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub algorithm: Algorithm,
    /// Iteration cap for each inner FISTA or ADMM run, and for the number of
    /// path segments in homotopy.
    pub max_iter: usize,
    /// Stop an inner run when the relative iterate change falls below this.
    pub tol: f64,
    /// Bisection stops once the residual lies in `[ε (1 - residual_rtol), ε]`.
    pub residual_rtol: f64,
    pub max_bisections: usize,
    /// Scale of the outlier columns in [`robust_solve`]; `0` removes them.
    pub weight_e: f64,
    /// Try the closed-form finish on the iterate's support.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Homotopy,
            max_iter: 50_000,
            tol: 1e-10,
            residual_rtol: 1e-3,
            max_bisections: 200,
            weight_e: 1.0,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    pub s: Vec<f64>,
    /// Outlier vector in measurement units (robust solves only).
    pub e: Option<Vec<f64>>,
    pub residual_norm: f64,
    pub l1_norm: f64,
    pub iterations: usize,
    pub epsilon: f64,
    pub converged: bool,
    /// Penalty of the last penalized solve (unit-column scale), if any.
    pub lambda: Option<f64>,
}

impl SparseSolution {
    /// Indices `i` with `e[i] != 0`.
    pub fn outlier_support(&self) -> Vec<usize> {
        self.e
            .as_ref()
            .map(|e| {
                e.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Noise-scaled tolerance `σ √p`.
pub fn choose_epsilon(sigma: f64, p: usize) -> f64 {
    if sigma <= 0.0 {
        0.0
    } else {
        sigma * (p as f64).sqrt()
    }
}

/// Smallest residual `min_s ||y - D s||₂` attainable in the numerically
/// well-conditioned range of `D` (singular values above `SUPPORT_RCOND`
/// times the largest, the same limit the solvers place on a support).
///
/// A tolerance below this makes the problem infeasible or ill-posed.
pub fn min_residual(dict_measured: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let svd = dict_measured.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let smax = svd.singular_values.max();
    let mut fit = DVector::zeros(y.len());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > SUPPORT_RCOND * smax {
            let ui = u.column(i);
            fit += ui * ui.dot(y);
        }
    }
    (y - fit).norm()
}

/// `min ||s||₁ s.t. ||y - D s||₂ <= ε` for `D = C Ψ`.
pub fn bpdn_solve(
    dict_measured: &DMatrix<f64>,
    y: &DVector<f64>,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<SparseSolution> {
    let costs = vec![1.0; dict_measured.ncols()];
    let raw = solve_weighted(dict_measured, &costs, y, epsilon, opts)?;
    let l1_norm = raw.x.iter().map(|v| v.abs()).sum();
    Ok(SparseSolution {
        s: raw.x,
        e: None,
        residual_norm: raw.residual,
        l1_norm,
        iterations: raw.iterations,
        epsilon,
        converged: raw.converged,
        lambda: raw.lambda,
    })
}

/// `min ||s||₁ + ||e||₁ / w s.t. ||y - D s - e||₂ <= ε`, the BPDN problem
/// over the augmented dictionary `[D | w I]` with `w = opts.weight_e`.
///
/// With `weight_e = 0` the outlier columns are dropped and the result is the
/// plain [`bpdn_solve`] answer with `e = 0`. On an exact tie between an atom
/// and an outlier column (equal cost for the same reading) the homotopy path
/// admits the atom first, so the reading is explained by `s`; the proximal
/// gradient algorithm may split it between the two instead.
pub fn robust_solve(
    dict_measured: &DMatrix<f64>,
    y: &DVector<f64>,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<SparseSolution> {
    let (p, m) = dict_measured.shape();
    if !(opts.weight_e.is_finite() && opts.weight_e >= 0.0) {
        return Err(Error::Parameter(format!(
            "weight_e must be finite and non-negative, got {}",
            opts.weight_e
        )));
    }
    if opts.weight_e == 0.0 {
        let mut sol = bpdn_solve(dict_measured, y, epsilon, opts)?;
        sol.e = Some(vec![0.0; p]);
        return Ok(sol);
    }

    let mut augmented = DMatrix::zeros(p, m + p);
    augmented.columns_mut(0, m).copy_from(dict_measured);
    augmented
        .columns_mut(m, p)
        .copy_from(&DMatrix::<f64>::identity(p, p));
    let mut costs = vec![1.0; m];
    costs.extend(std::iter::repeat_n(1.0 / opts.weight_e, p));

    let raw = solve_weighted(&augmented, &costs, y, epsilon, opts)?;
    let s = raw.x[..m].to_vec();
    let e = raw.x[m..].to_vec();
    Ok(SparseSolution {
        l1_norm: s.iter().map(|v| v.abs()).sum(),
        s,
        e: Some(e),
        residual_norm: raw.residual,
        iterations: raw.iterations,
        epsilon,
        converged: raw.converged,
        lambda: raw.lambda,
    })
}

struct RawSolution {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
    lambda: Option<f64>,
}

/// `min Σ cost_j |x_j| s.t. ||y - M x|| <= ε`.
fn solve_weighted(
    m: &DMatrix<f64>,
    costs: &[f64],
    y: &DVector<f64>,
    epsilon: f64,
    opts: &SolverOptions,
) -> Result<RawSolution> {
    let (p, ncols) = m.shape();
    if y.len() != p {
        return Err(Error::Shape {
            location: "measurement vector".into(),
            expected: p,
            found: y.len(),
        });
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Parameter(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    if m.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data {
            location: "sparse solve input".into(),
            message: "non-finite entry".into(),
        });
    }

    let y_norm = y.norm();
    if y_norm <= epsilon {
        return Ok(RawSolution {
            x: vec![0.0; ncols],
            residual: y_norm,
            iterations: 0,
            converged: true,
            lambda: None,
        });
    }

    // unit-norm active columns; zero columns keep a zero coefficient
    let norms: Vec<f64> = m.column_iter().map(|c| c.norm()).collect();
    let active: Vec<usize> = (0..ncols).filter(|&j| norms[j] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Parameter("dictionary has no nonzero column".into()));
    }
    let mut a = DMatrix::zeros(p, active.len());
    for (k, &j) in active.iter().enumerate() {
        a.set_column(k, &(m.column(j) / norms[j]));
    }
    let weights: Vec<f64> = active.iter().map(|&j| costs[j] / norms[j]).collect();

    let problem = Weighted::new(a, weights, y.clone(), epsilon, opts);
    let sol = match opts.algorithm {
        Algorithm::Homotopy => problem.homotopy(),
        Algorithm::ProximalGradient if epsilon == 0.0 => problem.interpolate(),
        Algorithm::ProximalGradient => problem.bisect(),
    };

    let mut x = vec![0.0; ncols];
    for (k, &j) in active.iter().enumerate() {
        x[j] = sol.x[k] / norms[j];
    }
    let xv = DVector::from_column_slice(&x);
    let residual = (y - m * &xv).norm();
    let feasible = residual <= feasibility_bound(epsilon, y_norm);
    Ok(RawSolution {
        x,
        residual,
        iterations: sol.iterations,
        converged: sol.converged && feasible,
        lambda: sol.lambda,
    })
}

fn feasibility_bound(epsilon: f64, y_norm: f64) -> f64 {
    epsilon * (1.0 + FEASIBILITY_RTOL) + FEASIBILITY_FLOOR * y_norm
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

enum Fista {
    /// Iterate after convergence or the iteration cap, and iterations used.
    Done(DVector<f64>, usize),
    /// Certified constrained optimum, its penalty, and iterations used.
    Certified(DVector<f64>, f64, usize),
}

struct Inner {
    x: DVector<f64>,
    iterations: usize,
    converged: bool,
    lambda: Option<f64>,
}

/// Unit-column problem `min Σ w_j |x_j| s.t. ||y - A x|| <= ε`.
struct Weighted<'o> {
    a: DMatrix<f64>,
    w: Vec<f64>,
    y: DVector<f64>,
    epsilon: f64,
    lipschitz: f64,
    opts: &'o SolverOptions,
}

impl<'o> Weighted<'o> {
    fn new(
        a: DMatrix<f64>,
        w: Vec<f64>,
        y: DVector<f64>,
        epsilon: f64,
        opts: &'o SolverOptions,
    ) -> Self {
        let smax = match opts.algorithm {
            Algorithm::Homotopy => 0.0,
            Algorithm::ProximalGradient => a.clone().svd(false, false).singular_values.max(),
        };
        Self {
            a,
            w,
            y,
            epsilon,
            lipschitz: smax * smax,
            opts,
        }
    }

    fn residual(&self, x: &DVector<f64>) -> f64 {
        (&self.y - &self.a * x).norm()
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        x.iter().zip(&self.w).map(|(v, w)| w * v.abs()).sum()
    }

    fn is_feasible(&self, x: &DVector<f64>) -> bool {
        self.residual(x) <= feasibility_bound(self.epsilon, self.y.norm())
    }

    /// Smallest penalty with an all-zero minimizer.
    fn lambda_max(&self) -> f64 {
        let aty = self.a.transpose() * &self.y;
        aty.iter()
            .zip(&self.w)
            .map(|(g, w)| g.abs() / w)
            .fold(0.0, f64::max)
    }

    /// FISTA with gradient-based adaptive restart on
    /// `½||y - A x||² + λ Σ w_j |x_j|`.
    ///
    /// Every `POLISH_INTERVAL` iterations with an unchanged sign pattern, the
    /// closed-form finish is tried; a certified optimum of the constrained
    /// problem ends the whole solve early.
    fn fista(&self, lambda: f64, start: &DVector<f64>) -> Fista {
        let step = 1.0 / self.lipschitz;
        let thresholds: Vec<f64> = self.w.iter().map(|w| lambda * w * step).collect();
        let at = self.a.transpose();
        let mut x = start.clone();
        let mut z = x.clone();
        let mut t = 1.0_f64;
        let mut pattern: Vec<i8> = Vec::new();
        for it in 1..=self.opts.max_iter {
            let grad = &at * (&self.a * &z - &self.y);
            let mut x_new = &z - grad * step;
            x_new
                .iter_mut()
                .zip(&thresholds)
                .for_each(|(v, &th)| *v = soft_threshold(*v, th));

            let dx = &x_new - &x;
            if (&z - &x_new).dot(&dx) > 0.0 {
                t = 1.0;
                z = x_new.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                z = &x_new + &dx * ((t - 1.0) / t_next);
                t = t_next;
            }
            let change = dx.norm();
            x = x_new;
            if change <= self.opts.tol * x.norm() {
                return Fista::Done(x, it);
            }
            if self.opts.polish && it % POLISH_INTERVAL == 0 {
                let now: Vec<i8> = x
                    .iter()
                    .map(|v| v.signum() as i8 * (*v != 0.0) as i8)
                    .collect();
                if now == pattern {
                    if let Some((exact, lam)) = self.polish(&x) {
                        return Fista::Certified(exact, lam, it);
                    }
                }
                pattern = now;
            }
        }
        Fista::Done(x, self.opts.max_iter)
    }

    /// Penalized solves over `λ`: halving from `λ_max` until the residual
    /// drops to `ε`, then geometric bisection inside that bracket. Each solve
    /// warm-starts from the sparser solution at the bracket's upper end.
    fn bisect(&self) -> Inner {
        let lam_max = self.lambda_max();
        let lam_min = lam_max * LAMBDA_FLOOR;
        let target_lo = self.epsilon * (1.0 - self.opts.residual_rtol);
        let target_hi = self.epsilon * (1.0 + FEASIBILITY_RTOL);

        let ncols = self.a.ncols();
        let mut hi = lam_max;
        let mut x_hi = DVector::zeros(ncols);
        let mut lo: Option<f64> = None;
        let mut iterations = 0;
        let mut best_feasible: Option<(DVector<f64>, f64, f64)> = None;
        let mut closest: Option<(DVector<f64>, f64, f64)> = None;

        for _ in 0..self.opts.max_bisections {
            let lambda = match lo {
                None => hi * 0.5,
                Some(lo) => (lo * hi).sqrt(),
            };
            if lambda < lam_min || lo.is_some_and(|lo| hi / lo <= 1.0 + 1e-14) {
                break;
            }
            let x = match self.fista(lambda, &x_hi) {
                Fista::Done(x, its) => {
                    iterations += its;
                    x
                }
                Fista::Certified(x, lam, its) => {
                    return Inner {
                        x,
                        iterations: iterations + its,
                        converged: true,
                        lambda: Some(lam),
                    };
                }
            };

            if self.opts.polish {
                if let Some((exact, lam)) = self.polish(&x) {
                    return Inner {
                        x: exact,
                        iterations,
                        converged: true,
                        lambda: Some(lam),
                    };
                }
            }

            let r = self.residual(&x);
            if r <= target_hi {
                let c = self.cost(&x);
                if best_feasible.as_ref().is_none_or(|b| c < b.1) {
                    best_feasible = Some((x.clone(), c, lambda));
                }
                if r >= target_lo {
                    return Inner {
                        x,
                        iterations,
                        converged: true,
                        lambda: Some(lambda),
                    };
                }
                lo = Some(lambda);
            } else {
                if closest.as_ref().is_none_or(|b| r < b.1) {
                    closest = Some((x.clone(), r, lambda));
                }
                hi = lambda;
                x_hi = x;
            }
        }

        let (x, lambda) = match (best_feasible, closest) {
            (Some((x, _, lam)), _) | (None, Some((x, _, lam))) => (x, Some(lam)),
            (None, None) => (DVector::zeros(ncols), None),
        };
        Inner {
            x,
            iterations,
            converged: false,
            lambda,
        }
    }

    /// Minimum weighted-L1 interpolation `A x = y` by ADMM.
    fn interpolate(&self) -> Inner {
        let ncols = self.a.ncols();
        let pinv = match self.a.clone().pseudo_inverse(1e-13) {
            Ok(p) => p,
            Err(_) => {
                return Inner {
                    x: DVector::zeros(ncols),
                    iterations: 0,
                    converged: false,
                    lambda: None,
                }
            }
        };
        let x_ls = &pinv * &self.y;
        if !self.is_feasible(&x_ls) {
            // y is outside the range of A
            return Inner {
                x: x_ls,
                iterations: 0,
                converged: false,
                lambda: None,
            };
        }

        let project = |v: &DVector<f64>| v + &pinv * (&self.y - &self.a * v);
        let x_l1 = self.cost(&x_ls);
        let rho = if x_l1 > 0.0 {
            self.w.iter().sum::<f64>() / x_l1
        } else {
            1.0
        };
        let thresholds: Vec<f64> = self.w.iter().map(|w| w / rho).collect();

        let mut z = DVector::zeros(ncols);
        let mut u = DVector::zeros(ncols);
        let mut x = x_ls.clone();
        let mut iterations = 0;
        let mut converged = false;
        for it in 1..=self.opts.max_iter {
            iterations = it;
            x = project(&(&z - &u));
            let z_old = std::mem::replace(&mut z, &x + &u);
            z.iter_mut()
                .zip(&thresholds)
                .for_each(|(v, &th)| *v = soft_threshold(*v, th));
            u += &x - &z;

            let primal = (&x - &z).norm();
            let dual = (&z - &z_old).norm();
            let scale = x.norm().max(z.norm());
            if primal <= self.opts.tol * scale && dual <= self.opts.tol * scale {
                converged = true;
                break;
            }
            if self.opts.polish && it % 50 == 0 {
                if let Some((exact, _)) = self.polish(&z) {
                    return Inner {
                        x: exact,
                        iterations,
                        converged: true,
                        lambda: None,
                    };
                }
            }
        }

        if self.opts.polish {
            if let Some((exact, _)) = self.polish(&z) {
                return Inner {
                    x: exact,
                    iterations,
                    converged: true,
                    lambda: None,
                };
            }
        }
        // x satisfies the equality; z is the sparse one
        let out = if self.is_feasible(&z) && self.cost(&z) <= self.cost(&x) {
            z
        } else {
            x
        };
        Inner {
            x: out,
            iterations,
            converged,
            lambda: None,
        }
    }

    /// Follows the minimizer of `½||y - A x||² + λ Σ w|x|` as `λ` decreases
    /// from `λ_max`. On each segment `x_S(μ) = u - μ h` with `u` the least
    /// squares fit on the support and `h = G⁻¹ W z`, so the residual is
    /// `ρ² + μ² hᵀGh` and its crossing with `ε` has a closed form.
    fn homotopy(&self) -> Inner {
        let n = self.a.ncols();
        let aty = self.a.transpose() * &self.y;
        let (j0, lambda0) = (0..n)
            .map(|j| (j, aty[j].abs() / self.w[j]))
            .fold((0, 0.0), |best, c| if c.1 > best.1 { c } else { best });
        let mut lambda = lambda0;
        let mut support = vec![j0];
        let mut signs = vec![aty[j0].signum()];
        let mut on_support = vec![false; n];
        on_support[j0] = true;
        let mut last_index = Some(j0);
        let bound = feasibility_bound(self.epsilon, self.y.norm());
        let eps2 = self.epsilon * self.epsilon;

        let scatter = |support: &[usize], xs: &DVector<f64>| {
            let mut x = DVector::zeros(n);
            for (k, &j) in support.iter().enumerate() {
                x[j] = xs[k];
            }
            x
        };
        let mut x = DVector::zeros(n);

        for step in 1..=self.opts.max_iter {
            let a_s = self.a.select_columns(&support);
            let qr = a_s.clone().qr();
            let r = qr.r();
            let diag = r.diagonal().abs();
            if diag.min() <= SUPPORT_RCOND * diag.max() {
                return Inner {
                    x,
                    iterations: step,
                    converged: false,
                    lambda: Some(lambda),
                };
            }
            let q = qr.q();
            let wz = DVector::from_iterator(
                support.len(),
                support.iter().zip(&signs).map(|(&j, s)| self.w[j] * s),
            );
            let (Some(u), Some(t)) = (
                r.solve_upper_triangular(&(q.transpose() * &self.y)),
                r.tr_solve_upper_triangular(&wz),
            ) else {
                return Inner {
                    x,
                    iterations: step,
                    converged: false,
                    lambda: Some(lambda),
                };
            };
            let h = r
                .solve_upper_triangular(&t)
                .unwrap_or_else(|| DVector::zeros(support.len()));
            let hgh = t.norm_squared();
            let r_ls = &self.y - &a_s * &u;
            let rho2 = r_ls.norm_squared();
            x = scatter(&support, &(&u - &h * lambda));

            // next breakpoint below the current penalty; undoing the last
            // event needs a clear margin so that rounding cannot trigger it
            let ceiling = |j: usize| {
                if last_index == Some(j) {
                    lambda * (1.0 - 1e-6)
                } else {
                    lambda * (1.0 - 1e-10)
                }
            };
            let mut next = 0.0;
            let mut event: Option<(usize, f64, bool)> = None;
            for (i, (&ui, &hi)) in u.iter().zip(h.iter()).enumerate() {
                if hi != 0.0 {
                    let mu = ui / hi;
                    if mu > next && mu < ceiling(support[i]) {
                        next = mu;
                        event = Some((i, 0.0, false));
                    }
                }
            }
            let alpha = self.a.transpose() * &r_ls;
            let beta = self.a.transpose() * (&a_s * &h);
            // an inactive atom already past the bound
            // at this penalty (possible after rounding near a breakpoint)
            // joins without moving along the path
            if support.len() < self.a.nrows() {
                let violator = (0..n)
                    .filter(|&j| !on_support[j])
                    .map(|j| (j, alpha[j] + lambda * beta[j]))
                    .filter(|&(j, c)| c.abs() > lambda * self.w[j] * (1.0 + KKT_RTOL * 10.0))
                    .max_by(|a, b| (a.1.abs() / self.w[a.0]).total_cmp(&(b.1.abs() / self.w[b.0])));
                if let Some((j, c)) = violator {
                    support.push(j);
                    signs.push(c.signum());
                    on_support[j] = true;
                    last_index = Some(j);
                    continue;
                }
            }
            // a full-rank support spans the data, so nothing else can join
            let full = support.len() >= self.a.nrows();
            for j in 0..n {
                if full || on_support[j] {
                    continue;
                }
                for (num, den, sign) in [
                    (alpha[j], self.w[j] - beta[j], 1.0),
                    (-alpha[j], self.w[j] + beta[j], -1.0),
                ] {
                    if den > 0.0 {
                        let mu = num / den;
                        if mu > next && mu < ceiling(j) {
                            next = mu;
                            event = Some((j, sign, true));
                        }
                    }
                }
            }

            if rho2.sqrt() <= bound && hgh > 0.0 {
                let mu = ((eps2 - rho2).max(0.0) / hgh).sqrt().min(lambda);
                if mu >= next {
                    let x = scatter(&support, &(&u - &h * mu));
                    return Inner {
                        x,
                        iterations: step,
                        converged: true,
                        lambda: Some(mu),
                    };
                }
            }

            let Some((index, sign, joins)) = event else {
                // path ended short of the tolerance
                let x = scatter(&support, &u);
                return Inner {
                    x,
                    iterations: step,
                    converged: false,
                    lambda: Some(0.0),
                };
            };
            lambda = next;
            if joins {
                last_index = Some(index);
                support.push(index);
                signs.push(sign);
                on_support[index] = true;
            } else {
                let j = support.remove(index);
                last_index = Some(j);
                signs.remove(index);
                on_support[j] = false;
            }
        }
        Inner {
            x,
            iterations: self.opts.max_iter,
            converged: false,
            lambda: Some(lambda),
        }
    }

    /// Exact optimum restricted to the support and signs of `x`, returned
    /// only if it is certified optimal for the full problem. Also returns
    /// the penalty `λ` matching it (zero for interpolation).
    fn polish(&self, x: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        let p = self.a.nrows();
        if support.is_empty() || support.len() > p {
            return None;
        }
        let signs: Vec<f64> = support.iter().map(|&j| x[j].signum()).collect();
        let a_s = self.a.select_columns(&support);
        let svd = a_s.clone().svd(true, true);
        let (u, v_t) = (svd.u.as_ref()?, svd.v_t.as_ref()?);
        let sigma = &svd.singular_values;
        let smax = sigma.max();
        if sigma.min() <= SUPPORT_RCOND * smax {
            return None;
        }
        let k = support.len();
        let inv_sigma = DVector::from_iterator(k, sigma.iter().map(|s| 1.0 / s));

        // x_ls = V Σ⁻¹ Uᵀ y;  h = G⁻¹ W z = V Σ⁻² Vᵀ (W z)
        let uty = u.transpose() * &self.y;
        let x_ls = v_t.transpose() * uty.component_mul(&inv_sigma);
        let wz = DVector::from_iterator(k, support.iter().zip(&signs).map(|(&j, s)| self.w[j] * s));
        let vwz = v_t * &wz;
        let q = vwz.component_mul(&inv_sigma);
        let h = v_t.transpose() * q.component_mul(&inv_sigma);
        let hgh = q.norm_squared();

        let r_ls = &self.y - &a_s * &x_ls;
        let rho2 = r_ls.norm_squared();
        let y_norm = self.y.norm();
        let eps2 = self.epsilon * self.epsilon;

        let (x_s, dual, lambda) = if self.epsilon == 0.0 {
            if rho2.sqrt() > FEASIBILITY_FLOOR * y_norm {
                return None;
            }
            // min-norm dual certificate ν = A_S G⁻¹ W z
            let nu = u * q;
            (x_ls, nu, 0.0)
        } else {
            if rho2 > eps2 || hgh <= 0.0 {
                return None;
            }
            let lambda = ((eps2 - rho2) / hgh).sqrt();
            if lambda <= 0.0 {
                return None;
            }
            let x_s = &x_ls - &h * lambda;
            let r = &self.y - &a_s * &x_s;
            (x_s, r / lambda, lambda)
        };

        if x_s.iter().zip(&signs).any(|(v, s)| v * s <= 0.0) {
            return None;
        }
        let corr = self.a.transpose() * &dual;
        let mut on_support = vec![false; x.len()];
        support.iter().for_each(|&j| on_support[j] = true);
        for j in 0..x.len() {
            if !on_support[j] && corr[j].abs() > self.w[j] * (1.0 + KKT_RTOL) {
                return None;
            }
        }

        let mut full = DVector::zeros(x.len());
        for (k, &j) in support.iter().enumerate() {
            full[j] = x_s[k];
        }
        if !self.is_feasible(&full) {
            return None;
        }
        Some((full, lambda))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    RawSnapshots,
    PodModes,
}

/// Atoms whose sparse combinations approximate field fluctuations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    kind: DictionaryKind,
    grid: FieldGrid,
    atoms: DMatrix<f64>,
    mean: DVector<f64>,
    column_norms: Vec<f64>,
}

impl Dictionary {
    /// Centered snapshots as atoms.
    pub fn raw_snapshots(lib: &SnapshotLibrary) -> Result<Self> {
        let Some(mean) = lib.mean() else {
            return Err(Error::State(
                "raw-snapshot dictionary needs a centered library".into(),
            ));
        };
        let atoms = lib.matrix().clone();
        let column_norms: Vec<f64> = atoms.column_iter().map(|c| c.norm()).collect();
        if let Some(j) = column_norms
            .iter()
            .position(|&n| !(n > 0.0 && n.is_finite()))
        {
            return Err(Error::Parameter(format!(
                "snapshot {j} ('{}') equals the library mean and cannot be an atom",
                lib.labels()[j]
            )));
        }
        Ok(Self {
            kind: DictionaryKind::RawSnapshots,
            grid: lib.grid().clone(),
            atoms,
            mean: mean.clone(),
            column_norms,
        })
    }

    /// POD modes as (orthonormal) atoms.
    pub fn pod_modes(basis: &PodBasis) -> Self {
        Self {
            kind: DictionaryKind::PodModes,
            grid: basis.grid().clone(),
            atoms: basis.modes().clone(),
            mean: basis.mean().clone(),
            column_norms: vec![1.0; basis.k()],
        }
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn column_norms(&self) -> &[f64] {
        &self.column_norms
    }

    /// Number of atoms.
    pub fn m(&self) -> usize {
        self.atoms.ncols()
    }

    /// The sensed dictionary `C Ψ`.
    pub fn measured(&self, op: &MeasurementOperator) -> DMatrix<f64> {
        op.select_rows(&self.atoms)
    }
}

/// `x̂ = x̄ + Ψ s`, optionally rescaling the fluctuation `Ψ s` to norm
/// `library_energy` (the mean norm of the centered training snapshots).
pub fn assemble(
    dict: &Dictionary,
    sol: &SparseSolution,
    rescale: bool,
    library_energy: Option<f64>,
) -> Result<Snapshot> {
    if sol.s.len() != dict.m() {
        return Err(Error::Shape {
            location: "sparse coefficients".into(),
            expected: dict.m(),
            found: sol.s.len(),
        });
    }
    let mut fluct = &dict.atoms * DVector::from_column_slice(&sol.s);
    if rescale {
        let Some(energy) = library_energy else {
            return Err(Error::Parameter(
                "amplitude rescaling needs the library energy".into(),
            ));
        };
        let norm = fluct.norm();
        if norm > 0.0 {
            fluct *= energy / norm;
        }
    }
    let values = &dict.mean + fluct;
    Snapshot::new("sparse", values.iter().copied().collect())
}

/// Sparse reconstruction from sensor readings `y` (full temperatures).
///
/// Returns the field estimate together with the raw solver output.
pub fn sparse_reconstruct(
    dict: &Dictionary,
    op: &MeasurementOperator,
    y: &DVector<f64>,
    epsilon: f64,
    opts: &SolverOptions,
    robust: bool,
    rescale_energy: Option<f64>,
) -> Result<(ReconstructionResult, SparseSolution)> {
    if op.grid().n() != dict.grid().n() {
        return Err(Error::Operator(format!(
            "operator grid has {} wet cells, dictionary grid has {}",
            op.grid().n(),
            dict.grid().n()
        )));
    }
    if y.len() != op.p() {
        return Err(Error::Shape {
            location: "measurement vector".into(),
            expected: op.p(),
            found: y.len(),
        });
    }
    let d = dict.measured(op);
    let centered = y - op.select(dict.mean.as_slice());
    let sol = if robust {
        robust_solve(&d, &centered, epsilon, opts)?
    } else {
        bpdn_solve(&d, &centered, epsilon, opts)?
    };
    let field = assemble(dict, &sol, rescale_energy.is_some(), rescale_energy)?;
    let fitted = op.select(field.values());
    let residual_norm = match &sol.e {
        Some(e) => (y - fitted - DVector::from_column_slice(e)).norm(),
        None => (y - fitted).norm(),
    };
    let result = ReconstructionResult {
        field,
        coefficients: sol.s.clone(),
        residual_norm,
        ridge_mu: None,
        lambda: sol.lambda,
        converged: sol.converged,
        errors: None,
    };
    Ok((result, sol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn epsilon_rule() {
        assert_eq!(choose_epsilon(0.0, 10), 0.0);
        assert_eq!(choose_epsilon(1.0, 4), 2.0);
        assert_eq!(choose_epsilon(0.5, 100), 5.0);
    }

    #[test]
    fn identity_dictionary_noiseless() {
        let d = DMatrix::<f64>::identity(2, 2);
        let sol = bpdn_solve(&d, &v(&[1.0, 0.0]), 0.0, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.s[0] - 1.0).abs() < 1e-12 && sol.s[1].abs() < 1e-12);
    }

    #[test]
    fn zero_when_epsilon_covers_y() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 0.9]);
        let y = v(&[0.6, -0.8]);
        let sol = bpdn_solve(&d, &y, y.norm(), &SolverOptions::default()).unwrap();
        assert!(sol.s.iter().all(|&x| x == 0.0));
        assert_eq!(sol.iterations, 0);
        assert!(sol.converged);
    }

    #[test]
    fn identity_dictionary_with_tolerance() {
        // optimum shrinks both entries by eps / sqrt(2)
        let d = DMatrix::<f64>::identity(2, 2);
        let sol = bpdn_solve(&d, &v(&[3.0, 4.0]), 1.0, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((sol.s[0] - (3.0 - h)).abs() < 1e-10);
        assert!((sol.s[1] - (4.0 - h)).abs() < 1e-10);
        assert!(sol.residual_norm <= 1.0 * (1.0 + 1e-6));
    }

    #[test]
    fn negative_epsilon_rejected() {
        let d = DMatrix::<f64>::identity(2, 2);
        assert!(bpdn_solve(&d, &v(&[1.0, 0.0]), -1.0, &SolverOptions::default()).is_err());
        let zero = DMatrix::<f64>::zeros(2, 2);
        assert!(matches!(
            bpdn_solve(&zero, &v(&[1.0, 0.0]), 0.1, &SolverOptions::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn robust_tie_goes_to_dictionary_atom() {
        // equal weights: the first maximal column enters the path first
        let d = DMatrix::from_element(1, 1, 1.0);
        let sol = robust_solve(&d, &v(&[5.0]), 0.0, &SolverOptions::default()).unwrap();
        let e = sol.e.as_ref().unwrap();
        assert_eq!((sol.s[0], e[0]), (5.0, 0.0));

        // any split with matching signs is optimal for the other algorithm
        let opts = SolverOptions {
            algorithm: Algorithm::ProximalGradient,
            ..Default::default()
        };
        let sol = robust_solve(&d, &v(&[5.0]), 0.0, &opts).unwrap();
        let e = sol.e.as_ref().unwrap();
        assert!((sol.s[0] + e[0] - 5.0).abs() < 1e-9);
        assert!(sol.s[0] >= 0.0 && e[0] >= 0.0);
    }

    #[test]
    fn robust_weight_breaks_tie() {
        let d = DMatrix::from_element(1, 1, 1.0);
        let cheap_e = SolverOptions {
            weight_e: 2.0,
            ..Default::default()
        };
        let sol = robust_solve(&d, &v(&[5.0]), 0.0, &cheap_e).unwrap();
        assert!(sol.s[0].abs() < 1e-12);
        assert!((sol.e.as_ref().unwrap()[0] - 5.0).abs() < 1e-12);

        let dear_e = SolverOptions {
            weight_e: 0.5,
            ..Default::default()
        };
        let sol = robust_solve(&d, &v(&[5.0]), 0.0, &dear_e).unwrap();
        assert!((sol.s[0] - 5.0).abs() < 1e-12);
        assert_eq!(sol.outlier_support(), Vec::<usize>::new());
    }

    #[test]
    fn robust_without_outlier_columns_is_bpdn() {
        let d = DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, 0.2, -0.5, 0.3, //
                0.1, 1.1, 0.4, -0.7, //
                -0.3, 0.5, 0.9, 1.2,
            ],
        );
        let y = v(&[0.7, -0.2, 1.4]);
        let opts = SolverOptions {
            weight_e: 0.0,
            ..Default::default()
        };
        for eps in [0.0, 0.1] {
            let a = bpdn_solve(&d, &y, eps, &opts).unwrap();
            let b = robust_solve(&d, &y, eps, &opts).unwrap();
            assert_eq!(a.s, b.s);
            assert_eq!(b.e.unwrap(), vec![0.0; 3]);
        }
    }

    fn toy_dictionary() -> Dictionary {
        let g = FieldGrid::new(3, 1, 1.0, 1.0, &[vec![true; 3]]).unwrap();
        let snaps = [
            Snapshot::new("a", vec![1.0, 0.0, 0.0]).unwrap(),
            Snapshot::new("b", vec![0.0, 1.0, 0.0]).unwrap(),
            Snapshot::new("c", vec![0.0, 0.0, 1.0]).unwrap(),
        ];
        let lib = SnapshotLibrary::from_snapshots(g, &snaps)
            .unwrap()
            .center()
            .unwrap();
        Dictionary::raw_snapshots(&lib).unwrap()
    }

    fn solution(s: Vec<f64>) -> SparseSolution {
        SparseSolution {
            l1_norm: s.iter().map(|x| x.abs()).sum(),
            s,
            e: None,
            residual_norm: 0.0,
            iterations: 0,
            epsilon: 0.0,
            converged: true,
            lambda: None,
        }
    }

    #[test]
    fn assemble_cases() {
        let dict = toy_dictionary();
        let mean: Vec<f64> = dict.mean().iter().copied().collect();
        let x = assemble(&dict, &solution(vec![0.0; 3]), false, None).unwrap();
        assert_eq!(x.values(), mean.as_slice());

        let x = assemble(&dict, &solution(vec![2.0, 0.0, 0.0]), false, None).unwrap();
        for (i, m) in mean.iter().enumerate() {
            let expect = m + 2.0 * dict.atoms()[(i, 0)];
            assert!((x.values()[i] - expect).abs() < 1e-15);
        }

        // scale the coefficient so the fluctuation has unit norm first
        let unit = 1.0 / dict.column_norms()[0];
        let x = assemble(&dict, &solution(vec![unit, 0.0, 0.0]), true, Some(3.0)).unwrap();
        let fl: f64 = x
            .values()
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((fl - 3.0).abs() < 1e-12);

        assert!(matches!(
            assemble(&dict, &solution(vec![1.0, 0.0, 0.0]), true, None),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            assemble(&dict, &solution(vec![1.0]), false, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn raw_dictionary_rejects_zero_atoms() {
        let g = FieldGrid::new(2, 1, 1.0, 1.0, &[vec![true; 2]]).unwrap();
        let lib =
            SnapshotLibrary::from_snapshots(g, &[Snapshot::new("a", vec![1.0, 2.0]).unwrap()])
                .unwrap();
        assert!(matches!(
            Dictionary::raw_snapshots(&lib),
            Err(Error::State(_))
        ));
        let lib = lib.center().unwrap();
        assert!(matches!(
            Dictionary::raw_snapshots(&lib),
            Err(Error::Parameter(_))
        ));
    }
}
