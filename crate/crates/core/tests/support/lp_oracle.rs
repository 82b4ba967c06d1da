//! Reference BPDN solver for small instances.
//!
//! `min ||s||₁ s.t. ||y - D s||₂ <= eps` has an optimal point whose support
//! columns are linearly independent. On a fixed support `S` with fixed signs
//! `z`, the problem is `min zᵀx s.t. ||y - D_S x|| <= eps`, which has the
//! closed form `x = x_ls - c G⁻¹z / sqrt(zᵀG⁻¹z)` with `c² = eps² - ρ²`.
//! Enumerating every independent support and sign pattern and keeping the
//! best sign-consistent candidate gives the optimum exactly.
//!
//! A linear program supplies an independent lower bound: `eps = 0` is the
//! classic equality-constrained LP, and `eps > 0` relaxes the ball to its
//! bounding box plus Kelley cuts `g·(y - D s) <= eps`.

#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use nalgebra::{DMatrix, DVector};

pub struct OracleSolution {
    pub s: DVector<f64>,
    pub value: f64,
}

impl OracleSolution {
    pub fn l1(&self) -> f64 {
        self.value
    }
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Returns `None` when the instance is infeasible.
pub fn bpdn_oracle(d: &DMatrix<f64>, y: &DVector<f64>, eps: f64) -> Option<OracleSolution> {
    let (p, m) = d.shape();
    assert!(m <= 16, "enumeration oracle is for small dictionaries");
    let scale = y.norm().max(1.0);

    let pinv = d.clone().pseudo_inverse(1e-13).expect("pseudo-inverse");
    let rho = (y - d * (&pinv * y)).norm();
    if rho > eps + 1e-10 * scale {
        return None;
    }
    if y.norm() <= eps {
        return Some(OracleSolution {
            s: DVector::zeros(m),
            value: 0.0,
        });
    }

    let mut best: Option<OracleSolution> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        let k = support.len();
        if k > p {
            continue;
        }
        let b = d.select_columns(&support);
        let g = b.transpose() * &b;
        let Some(chol) = g.clone().cholesky() else {
            continue;
        };
        // skip nearly dependent supports
        let eig = g.symmetric_eigenvalues();
        if eig.min() <= 1e-12 * eig.max() {
            continue;
        }
        let x_ls = chol.solve(&(b.transpose() * y));
        let rho2 = (y - &b * &x_ls).norm_squared();
        let slack = eps * eps - rho2;
        if slack < -1e-18 * scale * scale {
            continue;
        }
        let c = slack.max(0.0).sqrt();

        for signs in 0u32..(1 << k) {
            let z = DVector::from_iterator(
                k,
                (0..k).map(|i| if signs & (1 << i) != 0 { -1.0 } else { 1.0 }),
            );
            let giz = chol.solve(&z);
            let q = z.dot(&giz);
            let x = &x_ls - giz * (c / q.sqrt());
            if x.iter().zip(z.iter()).any(|(v, s)| v * s <= 0.0) {
                continue;
            }
            let mut full = DVector::zeros(m);
            for (i, &j) in support.iter().enumerate() {
                full[j] = x[i];
            }
            let value = l1(&full);
            if best.as_ref().is_none_or(|b| value < b.value) {
                best = Some(OracleSolution { s: full, value });
            }
        }
    }
    best
}

/// LP lower bound on the BPDN optimum (exact for `eps = 0`).
pub fn lp_lower_bound(d: &DMatrix<f64>, y: &DVector<f64>, eps: f64, cuts: usize) -> Option<f64> {
    let (p, m) = d.shape();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let s: Vec<Variable> = (0..m)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let t: Vec<Variable> = (0..m)
        .map(|_| lp.add_var(1.0, (0.0, f64::INFINITY)))
        .collect();
    for j in 0..m {
        lp.add_constraint([(t[j], 1.0), (s[j], -1.0)], ComparisonOp::Ge, 0.0);
        lp.add_constraint([(t[j], 1.0), (s[j], 1.0)], ComparisonOp::Ge, 0.0);
    }
    let row = |i: usize| -> Vec<(Variable, f64)> { (0..m).map(|j| (s[j], d[(i, j)])).collect() };
    for i in 0..p {
        if eps == 0.0 {
            lp.add_constraint(row(i), ComparisonOp::Eq, y[i]);
        } else {
            lp.add_constraint(row(i), ComparisonOp::Le, y[i] + eps);
            lp.add_constraint(row(i), ComparisonOp::Ge, y[i] - eps);
        }
    }
    let mut sol = lp.solve().ok()?;
    if eps > 0.0 {
        for _ in 0..cuts {
            let sv = DVector::from_iterator(m, s.iter().map(|&v| sol[v]));
            let r = y - d * &sv;
            let rn = r.norm();
            if rn <= eps {
                break;
            }
            let g = r / rn;
            let dg = d.transpose() * &g;
            let expr: Vec<(Variable, f64)> = (0..m).map(|j| (s[j], dg[j])).collect();
            sol = sol
                .add_constraint(expr, ComparisonOp::Ge, g.dot(y) - eps)
                .ok()?;
        }
    }
    Some(sol.objective())
}
