//! Parameter estimation as least squares under one bilinear equality.
//!
//! With `x = (k_v, k_g, g_star, u)` the regularized data fit is
//! `1/2 |D x - b|^2`, and the product `k_g * g_star` is replaced by the
//! auxiliary `u` subject to `r(x) = x'Ex + c'x = k_g g_star - u = 0`.
//! That problem is a generalized trust-region subproblem: its semidefinite
//! relaxation is tight whenever `D` has full column rank, and the dual has
//! a single multiplier `mu`. For `mu` inside the interval where
//! `D'D + 2 mu E` is positive definite, the stationary point
//! `x(mu) = (D'D + 2 mu E)^-1 (D'b - mu c)` is unique, and `r(x(mu))` is the
//! derivative of the concave dual function. Its root is found by bracketed
//! search, which recovers the primal optimum and the dual value at once.
//!
//! Nonnegativity of `(k_v, k_g, g_star)` is enforced by enumerating which
//! parameters sit at zero and solving each reduced problem exactly.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{neg_log_likelihood, rollout_is_feasible};
use crate::model::{finite_diff_accels, rollout, ControllerParams, Hyperparams, Scenario};
use crate::roots::brent;

pub const COL_KV: usize = 0;
pub const COL_KG: usize = 1;
pub const COL_GSTAR: usize = 2;
pub const COL_U: usize = 3;

/// Absolute bound on `|k_g g_star - u|` for a returned solution.
pub const CONSTRAINT_TOL: f64 = 1e-8;
/// Relative bound on the primal/dual objective gap.
pub const DUALITY_GAP_RTOL: f64 = 1e-6;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_RTOL: f64 = 1e-10;
/// Fraction of the multiplier interval trimmed from each end before search.
pub const INTERVAL_MARGIN: f64 = 1e-9;

const MAX_ITER: usize = 200;
const SIGN_TOL: f64 = 1e-12;

/// The assembled estimation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSystem {
    /// `(k + 2) x 4` design matrix.
    pub d: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: Matrix4<f64>,
    pub c: Vector4<f64>,
    /// Prior mean gap, used to pin `g_star` when the data leave it free.
    pub g0: f64,
}

impl QuadraticSystem {
    pub fn objective(&self, x: &Vector4<f64>) -> f64 {
        let r = &self.d * DVector::from_column_slice(x.as_slice()) - &self.b;
        0.5 * r.norm_squared()
    }

    pub fn constraint(&self, x: &Vector4<f64>) -> f64 {
        (x.transpose() * self.e * x)[(0, 0)] + self.c.dot(x)
    }

    /// Stationarity residual `|(D'D + 2 mu E) x - (D'b - mu c)|`.
    pub fn stationarity_residual(&self, x: &Vector4<f64>, mu: f64) -> f64 {
        let h = self.d.transpose() * &self.d;
        let rhs = self.d.transpose() * &self.b - DVector::from_column_slice((self.c * mu).as_slice());
        let k = h + DMatrix::from_column_slice(4, 4, (self.e * (2.0 * mu)).as_slice());
        (k * DVector::from_column_slice(x.as_slice()) - rhs).norm()
    }

    /// Smallest eigenvalue of `1/2 D'D + mu E`.
    pub fn dual_psd_margin(&self, mu: f64) -> f64 {
        let h = self.d.transpose() * &self.d * 0.5;
        let m = h + DMatrix::from_column_slice(4, 4, (self.e * mu).as_slice());
        SymmetricEigen::new(m).eigenvalues.min()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        serde_json::json!({
            "D": rows(&self.d),
            "b": self.b.iter().copied().collect::<Vec<_>>(),
            "E": rows(&DMatrix::from_column_slice(4, 4, self.e.as_slice())),
            "c": self.c.iter().copied().collect::<Vec<_>>(),
            "g0": self.g0,
        })
    }
}

/// `r(x) = k_g g_star - u` as a quadratic form.
pub fn constraint_form() -> (Matrix4<f64>, Vector4<f64>) {
    let mut e = Matrix4::zeros();
    e[(COL_KG, COL_GSTAR)] = 0.5;
    e[(COL_GSTAR, COL_KG)] = 0.5;
    let mut c = Vector4::zeros();
    c[COL_U] = -1.0;
    (e, c)
}

/// Stacks the acceleration residual rows, the gap prior row and the two
/// shrinkage rows so that `1/2 |D x - b|^2` reproduces the smooth part of
/// the negative log-likelihood once `u = k_g g_star`.
pub fn assemble_system(scenario: &Scenario, gamma: &Hyperparams) -> Result<QuadraticSystem> {
    let k = scenario.k();
    let accels = finite_diff_accels(&scenario.lag_velocities(), scenario.dt)?;
    let sigma = gamma.sigma_a_sq.sqrt();
    let mut d = DMatrix::zeros(k + 2, 4);
    let mut b = DVector::zeros(k + 2);
    for (i, (s, a)) in scenario.observed.iter().zip(&accels).enumerate() {
        d[(i, COL_KV)] = (s.lead.v - s.lag.v) / sigma;
        d[(i, COL_KG)] = crate::model::gap(s, scenario.lead_length) / sigma;
        d[(i, COL_U)] = -1.0 / sigma;
        b[i] = a / sigma;
    }
    let gap_row = k - 1;
    let w_gap = (2.0 * gamma.alpha).sqrt();
    d[(gap_row, COL_GSTAR)] = w_gap;
    b[gap_row] = w_gap * gamma.g0;
    let w_gain = (2.0 * gamma.beta).sqrt() * gamma.g0;
    d[(k, COL_KV)] = w_gain;
    d[(k + 1, COL_KG)] = w_gain;

    let (e, c) = constraint_form();
    Ok(QuadraticSystem { d, b, e, c, g0: gamma.g0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankStatus {
    FullRank,
    RankDeficient,
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

/// Rank deficiency caused only by a switched-off gap prior: the `g_star`
/// column is zero while the other three columns are independent. The
/// solvers accept this case.
pub fn is_prior_free_identifiable(system: &QuadraticSystem) -> bool {
    let others = select_columns(&system.d, &[COL_KV, COL_KG, COL_U]);
    let max_norm = (0..4).map(|j| system.d.column(j).norm()).fold(0.0, f64::max);
    system.d.column(COL_GSTAR).norm() <= RANK_RTOL * max_norm && numerical_rank(&others) == 3
}

fn require_solvable(system: &QuadraticSystem) -> Result<()> {
    if check_rank(system) == RankStatus::FullRank || is_prior_free_identifiable(system) {
        Ok(())
    } else {
        Err(Error::RankDeficient {
            rank: numerical_rank(&system.d),
            cols: 4,
        })
    }
}

pub fn check_rank(system: &QuadraticSystem) -> RankStatus {
    if numerical_rank(&system.d) == 4 {
        RankStatus::FullRank
    } else {
        RankStatus::RankDeficient
    }
}

/// One evaluation of the secular function `r(x(mu))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuStep {
    pub mu: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualitySolution {
    pub x: Vector4<f64>,
    pub mu: f64,
    pub dual_value: f64,
    /// Multiplier interval on which the dual is feasible.
    pub mu_interval: (f64, f64),
    pub trace: Vec<MuStep>,
}

/// Minimizes `1/2 |D x - b|^2` subject to `r(x) = 0`, with no sign
/// constraints.
///
/// When the gap prior is switched off, `g_star` enters only through `u`,
/// so its column of `D` is identically zero. The dual interval then
/// collapses to `mu = 0`; the remaining columns are solved as plain least
/// squares and `g_star = u / k_g` is recovered afterwards.
pub fn solve_equality_gtrs(system: &QuadraticSystem) -> Result<EqualitySolution> {
    require_solvable(system)?;
    let cols = [COL_KV, COL_KG, COL_GSTAR, COL_U];
    match solve_subproblem(system, &cols)? {
        SubSolution::Solved(s) => Ok(EqualitySolution {
            x: s.x,
            mu: s.mu,
            dual_value: s.dual_value,
            mu_interval: s.mu_interval,
            trace: s.trace,
        }),
        SubSolution::Unidentified => Err(Error::RankDeficient {
            rank: numerical_rank(&system.d),
            cols: 4,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// The unconstrained-sign optimum is already nonnegative.
    Interior,
    /// The sign-free optimum leaves the nonnegative orthant; the result
    /// comes from enumerating which parameters sit at zero, and optimality
    /// is certified per pattern only.
    Boundary,
    /// The returned `g_star` is not determined by the data and was set to
    /// the prior mean.
    RankDeficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Param {
    KV,
    KG,
    GStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    /// `(k_v, k_g, g_star, u)`.
    pub x_hat: [f64; 4],
    pub theta_hat: ControllerParams,
    pub primal_value: f64,
    pub dual_value: f64,
    pub constraint_residual: f64,
    pub active_set: Vec<Param>,
    pub status: SolveStatus,
    pub mu: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mu_trace: Vec<MuStep>,
}

/// Solves the problem with `(k_v, k_g, g_star) >= 0`.
pub fn solve_nonnegative(system: &QuadraticSystem) -> Result<SolverResult> {
    require_solvable(system)?;
    let full = solve_subproblem(system, &[COL_KV, COL_KG, COL_GSTAR, COL_U])?;
    if let SubSolution::Solved(s) = &full {
        if (0..3).all(|i| s.x[i] >= -SIGN_TOL * (1.0 + s.x.norm())) {
            let mut x = s.x;
            clamp_and_couple(&mut x);
            return Ok(finish(system, x, s.mu, s.dual_value, Vec::new(), status_for(s), s.trace.clone()));
        }
    }
    if is_prior_free_identifiable(system) {
        log::warn!("no gap prior and the sign-free fit is infeasible; the constrained minimum may not be attained");
    }

    // Patterns ordered by number of pinned parameters, then lexicographically.
    // Within the free pattern only non-global stationary points remain.
    let mut patterns: Vec<u8> = (0u8..8).collect();
    patterns.sort_by_key(|m| (m.count_ones(), *m));

    let mut best: Option<(f64, Vector4<f64>, f64, f64, Sub, u8)> = None;
    for mask in patterns {
        let pinned = |p: usize| mask & (1 << p) != 0;
        let mut cols: Vec<usize> = (0..3).filter(|&p| !pinned(p)).collect();
        if !pinned(COL_KG) && !pinned(COL_GSTAR) {
            cols.push(COL_U);
        }
        let sub = if mask == 0 {
            match &full {
                SubSolution::Solved(s) => s.clone(),
                SubSolution::Unidentified => continue,
            }
        } else {
            match solve_subproblem(system, &cols)? {
                SubSolution::Solved(s) => s,
                SubSolution::Unidentified => continue,
            }
        };
        let primary = (mask != 0).then_some((sub.x, sub.mu, sub.dual_value));
        for (cand, mu, dual) in primary.into_iter().chain(sub.alternatives.iter().copied()) {
            let scale = 1.0 + cand.norm();
            if (0..3).any(|i| cand[i] < -SIGN_TOL * scale) || cand[COL_U].abs() > 0.0 && !cols.contains(&COL_U) {
                continue;
            }
            let mut x = cand;
            clamp_and_couple(&mut x);
            let value = system.objective(&x);
            let better = match &best {
                None => true,
                Some((v, ..)) => value < *v - 1e-12 * v.abs().max(1e-300),
            };
            if better {
                best = Some((value, x, mu, dual, sub.clone(), mask));
            }
        }
    }

    // The all-zero pattern is always feasible, so `best` is populated.
    let (_, x, mu, dual, sub, mask) = best.ok_or(Error::NoConvergence { iterations: 0 })?;
    let active_set = [Param::KV, Param::KG, Param::GStar]
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, p)| p)
        .collect();
    let status = if sub.gstar_pinned_to_prior {
        SolveStatus::RankDeficient
    } else {
        SolveStatus::Boundary
    };
    Ok(finish(system, x, mu, dual, active_set, status, sub.trace))
}

fn status_for(s: &Sub) -> SolveStatus {
    if s.gstar_pinned_to_prior {
        SolveStatus::RankDeficient
    } else {
        SolveStatus::Interior
    }
}

fn clamp_and_couple(x: &mut Vector4<f64>) {
    for i in 0..3 {
        if x[i] < 0.0 {
            x[i] = 0.0;
        }
    }
    x[COL_U] = x[COL_KG] * x[COL_GSTAR];
}

fn finish(
    system: &QuadraticSystem,
    x: Vector4<f64>,
    mu: f64,
    dual_value: f64,
    active_set: Vec<Param>,
    status: SolveStatus,
    trace: Vec<MuStep>,
) -> SolverResult {
    SolverResult {
        x_hat: [x[0], x[1], x[2], x[3]],
        theta_hat: ControllerParams::new(x[COL_KV], x[COL_KG], x[COL_GSTAR]),
        primal_value: system.objective(&x),
        dual_value,
        constraint_residual: system.constraint(&x),
        active_set,
        status,
        mu,
        mu_trace: trace,
    }
}

#[derive(Debug, Clone)]
struct Sub {
    x: Vector4<f64>,
    mu: f64,
    dual_value: f64,
    mu_interval: (f64, f64),
    trace: Vec<MuStep>,
    gstar_pinned_to_prior: bool,
    /// Other stationary points of the same reduced problem, as
    /// `(x, mu, dual value)`. A sign-feasible one can win when the global
    /// optimum of the reduced problem has negative entries.
    alternatives: Vec<(Vector4<f64>, f64, f64)>,
}

enum SubSolution {
    Solved(Sub),
    /// The free columns do not determine the solution.
    Unidentified,
}

/// Solves the problem restricted to `cols` (other coordinates fixed at zero).
/// The bilinear constraint applies when `u` is among the columns.
fn solve_subproblem(system: &QuadraticSystem, cols: &[usize]) -> Result<SubSolution> {
    let mut x = Vector4::zeros();
    let half_bb = 0.5 * system.b.norm_squared();
    if cols.is_empty() {
        return Ok(SubSolution::Solved(Sub {
            x,
            mu: 0.0,
            dual_value: half_bb,
            mu_interval: (0.0, 0.0),
            trace: Vec::new(),
            gstar_pinned_to_prior: false,
            alternatives: Vec::new(),
        }));
    }

    let col_norm_max = cols.iter().map(|&j| system.d.column(j).norm()).fold(0.0, f64::max);
    let is_zero_col = |j: usize| system.d.column(j).norm() <= RANK_RTOL * col_norm_max;
    let has_u = cols.contains(&COL_U);
    let gstar_free = cols.contains(&COL_GSTAR);
    let gstar_dead = gstar_free && is_zero_col(COL_GSTAR);

    if !has_u || gstar_dead {
        // Plain least squares over the live columns.
        let live: Vec<usize> = cols.iter().copied().filter(|&j| !(j == COL_GSTAR && gstar_dead)).collect();
        if !live.is_empty() {
            let sub_d = select_columns(&system.d, &live);
            if numerical_rank(&sub_d) < live.len() {
                return Ok(SubSolution::Unidentified);
            }
            let sol = least_squares(&sub_d, &system.b);
            for (i, &j) in live.iter().enumerate() {
                x[j] = sol[i];
            }
        }
        let mut pinned = false;
        if gstar_dead {
            if has_u {
                let kg = x[COL_KG];
                let u_scale = 1.0 + x[COL_U].abs();
                if kg.abs() <= 1e-9 * u_scale {
                    return Ok(SubSolution::Unidentified);
                }
                x[COL_GSTAR] = x[COL_U] / kg;
            } else {
                x[COL_GSTAR] = system.g0;
                pinned = true;
            }
        }
        let rhs = system.d.transpose() * &system.b;
        let dual_value = half_bb - 0.5 * live.iter().map(|&j| rhs[j] * x[j]).sum::<f64>();
        return Ok(SubSolution::Solved(Sub {
            x,
            mu: 0.0,
            dual_value,
            mu_interval: (0.0, 0.0),
            trace: Vec::new(),
            gstar_pinned_to_prior: pinned,
            alternatives: Vec::new(),
        }));
    }

    let sub_d = select_columns(&system.d, cols);
    if numerical_rank(&sub_d) < cols.len() {
        return Ok(SubSolution::Unidentified);
    }
    let n = cols.len();
    let e_full = DMatrix::from_column_slice(4, 4, system.e.as_slice());
    let e = DMatrix::from_fn(n, n, |i, j| e_full[(cols[i], cols[j])]);
    let c = DVector::from_fn(n, |i, _| system.c[cols[i]]);
    let h = sub_d.transpose() * &sub_d;
    let rhs = sub_d.transpose() * &system.b;

    let sol = secular_solve(&h, &rhs, &e, &c)?;
    for (i, &j) in cols.iter().enumerate() {
        x[j] = sol.x[i];
    }
    let dual_value = half_bb - 0.5 * (&rhs - &c * sol.mu).dot(&sol.x);
    let alternatives = sol
        .others
        .iter()
        .map(|(mu, xs)| {
            let mut xa = Vector4::zeros();
            for (i, &j) in cols.iter().enumerate() {
                xa[j] = xs[i];
            }
            (xa, *mu, half_bb - 0.5 * (&rhs - &c * *mu).dot(xs))
        })
        .collect();
    Ok(SubSolution::Solved(Sub {
        x,
        mu: sol.mu,
        dual_value,
        mu_interval: sol.interval,
        trace: sol.trace,
        gstar_pinned_to_prior: false,
        alternatives,
    }))
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 0.0).expect("SVD computed with both factors")
}

struct SecularSolution {
    x: DVector<f64>,
    mu: f64,
    interval: (f64, f64),
    trace: Vec<MuStep>,
    /// Remaining constrained stationary points as `(mu, x)`.
    others: Vec<(f64, DVector<f64>)>,
}

/// Pencil `H + 2 mu E = L (I + 2 mu M) L'` with `M = L^-1 E L^-T = V diag(lambda) V'`.
struct Pencil {
    l: DMatrix<f64>,
    lambda: DVector<f64>,
    v: DMatrix<f64>,
}

impl Pencil {
    fn new(h: &DMatrix<f64>, e: &DMatrix<f64>) -> Option<Self> {
        let l = h.clone().cholesky()?.l();
        let linv_e = l.solve_lower_triangular(e)?;
        let m = l.solve_lower_triangular(&linv_e.transpose())?;
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        Some(Self {
            l,
            lambda: eig.eigenvalues,
            v: eig.eigenvectors,
        })
    }

    /// Solves `(H + 2 mu E) x = rhs`, dropping the component along any
    /// eigen-direction listed in `skip`.
    fn solve(&self, mu: f64, rhs: &DVector<f64>, skip: Option<usize>) -> DVector<f64> {
        let y = self.l.solve_lower_triangular(rhs).expect("nonsingular Cholesky factor");
        let mut z = self.v.transpose() * y;
        for i in 0..z.len() {
            if Some(i) == skip {
                z[i] = 0.0;
            } else {
                z[i] /= 1.0 + 2.0 * mu * self.lambda[i];
            }
        }
        let w = &self.v * z;
        self.l.transpose().solve_upper_triangular(&w).expect("nonsingular Cholesky factor")
    }

    /// Every real stationary point of the Lagrangian that satisfies the
    /// constraint, i.e. all real roots of the secular function, not only the
    /// one inside the positive-definite interval.
    ///
    /// In the coordinates `y = V' L' x` the stationary point is
    /// `y_i = (beta_i - mu gamma_i) / (1 + 2 mu lambda_i)` and the constraint
    /// reads `sum lambda_i y_i^2 + gamma_i y_i`. Clearing the denominators
    /// gives a polynomial of degree at most five whose real roots are
    /// polished by Newton steps on the rational form.
    fn kkt_points(&self, d: &DVector<f64>, c: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        let n = self.lambda.len();
        let to_y = |v: &DVector<f64>| self.v.transpose() * self.l.solve_lower_triangular(v).expect("nonsingular Cholesky factor");
        let beta = to_y(d);
        let gamma = to_y(c);
        let lmax = self.lambda.amax();
        let lam: Vec<f64> = self
            .lambda
            .iter()
            .map(|&l| if l.abs() <= 1e-12 * lmax { 0.0 } else { l })
            .collect();

        let denom_sq = |skip: Option<usize>| {
            (0..n)
                .filter(|&j| lam[j] != 0.0 && Some(j) != skip)
                .fold(vec![1.0], |acc, j| poly_mul(&acc, &poly_mul(&[1.0, 2.0 * lam[j]], &[1.0, 2.0 * lam[j]])))
        };
        let mut poly = vec![0.0];
        for i in 0..n {
            let num = [beta[i], -gamma[i]];
            if lam[i] == 0.0 {
                poly = poly_add(&poly, &poly_mul(&poly_mul(&num, &[gamma[i]]), &denom_sq(None)));
            } else {
                let rest = denom_sq(Some(i));
                let quad = poly_mul(&poly_mul(&num, &num), &[lam[i]]);
                let lin = poly_mul(&poly_mul(&num, &[gamma[i]]), &[1.0, 2.0 * lam[i]]);
                poly = poly_add(&poly, &poly_mul(&poly_add(&quad, &lin), &rest));
            }
        }

        let psi_and_slope = |mu: f64| {
            let (mut f, mut df) = (0.0, 0.0);
            for i in 0..n {
                let p = 1.0 + 2.0 * mu * lam[i];
                let y = (beta[i] - mu * gamma[i]) / p;
                let dy = (-gamma[i] - 2.0 * lam[i] * beta[i]) / (p * p);
                f += lam[i] * y * y + gamma[i] * y;
                df += (2.0 * lam[i] * y + gamma[i]) * dy;
            }
            (f, df)
        };

        let mut out: Vec<(f64, DVector<f64>)> = Vec::new();
        for mut mu in real_roots(&poly) {
            for _ in 0..50 {
                let (f, df) = psi_and_slope(mu);
                if df == 0.0 || !f.is_finite() {
                    break;
                }
                let step = f / df;
                mu -= step;
                if step.abs() <= 4.0 * f64::EPSILON * (1.0 + mu.abs()) {
                    break;
                }
            }
            let near_pole = (0..n).any(|i| (1.0 + 2.0 * mu * lam[i]).abs() < 1e-10);
            if !mu.is_finite() || near_pole || out.iter().any(|(m, _)| (m - mu).abs() <= 1e-10 * (1.0 + mu.abs())) {
                continue;
            }
            let y = DVector::from_fn(n, |i, _| (beta[i] - mu * gamma[i]) / (1.0 + 2.0 * mu * lam[i]));
            let x = self.l.transpose().solve_upper_triangular(&(&self.v * y)).expect("nonsingular Cholesky factor");
            out.push((mu, x));
        }
        out
    }

    /// `x` direction spanning the kernel when eigen-direction `i` is singular.
    fn kernel_direction(&self, i: usize) -> DVector<f64> {
        let vi = self.v.column(i).into_owned();
        self.l.transpose().solve_upper_triangular(&vi).expect("nonsingular Cholesky factor")
    }
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

/// Approximate real roots of a polynomial (ascending coefficients) from
/// the eigenvalues of its companion matrix.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-13 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let companion = DMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -coeffs[deg - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

fn quad_constraint(e: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * e * x)[(0, 0)] + c.dot(x)
}

fn secular_solve(h: &DMatrix<f64>, d: &DVector<f64>, e: &DMatrix<f64>, c: &DVector<f64>) -> Result<SecularSolution> {
    let n = h.nrows();
    let pencil = Pencil::new(h, e).ok_or(Error::RankDeficient { rank: n - 1, cols: n })?;
    let (imax, lmax) = pencil.lambda.argmax();
    let (imin, lmin) = pencil.lambda.argmin();
    // E couples k_g and g_star with opposite-sign eigenvalues, so both ends are finite.
    if !(lmax > 0.0 && lmin < 0.0) {
        return Err(Error::NoConvergence { iterations: 0 });
    }
    let lo = -1.0 / (2.0 * lmax);
    let hi = -1.0 / (2.0 * lmin);
    let mut trace = Vec::new();

    let x_at = |mu: f64| pencil.solve(mu, &(d - c * mu), None);
    let psi = |mu: f64, trace: &mut Vec<MuStep>| {
        let r = quad_constraint(e, c, &x_at(mu));
        trace.push(MuStep { mu, r });
        r
    };

    let width = hi - lo;
    let mut margin = INTERVAL_MARGIN * width;
    let mut a = lo + margin;
    let mut b = hi - margin;
    let mut fa = psi(a, &mut trace);
    let mut fb = psi(b, &mut trace);

    // A root hidden inside the trimmed margin: trim less.
    for _ in 0..3 {
        if fa >= 0.0 && fb <= 0.0 {
            break;
        }
        margin *= 1e-3;
        if fa < 0.0 {
            a = lo + margin;
            fa = psi(a, &mut trace);
        }
        if fb > 0.0 {
            b = hi - margin;
            fb = psi(b, &mut trace);
        }
    }

    let scale_x = |x: &DVector<f64>| 1.0 + x.norm_squared();
    let (mu, mut x, polish_dir) = if fa >= 0.0 && fb <= 0.0 {
        let mut inner = Vec::new();
        let root = brent(
            |mu| psi(mu, &mut inner),
            a,
            b,
            fa,
            fb,
            0.0,
            1e-14 * scale_x(&x_at(0.0_f64.clamp(a, b))),
            MAX_ITER,
        );
        trace.extend(inner);
        if !root.converged {
            return Err(Error::NoConvergence { iterations: root.iterations });
        }
        let mu = root.x;
        // Direction of the most nearly singular eigen-pair, for polishing.
        let i = if (1.0 + 2.0 * mu * lmax) < (1.0 + 2.0 * mu * lmin) { imax } else { imin };
        (mu, x_at(mu), i)
    } else if fa < 0.0 {
        // Dual maximized at the left end: K is singular along the imax direction.
        (lo, pencil.solve(lo, &(d - c * lo), Some(imax)), imax)
    } else {
        (hi, pencil.solve(hi, &(d - c * hi), Some(imin)), imin)
    };

    let r = quad_constraint(e, c, &x);
    if r.abs() > 1e-3 * CONSTRAINT_TOL {
        // Restore feasibility along the kernel (hard case) or near-kernel
        // direction; stationarity is unaffected to first order.
        let z = pencil.kernel_direction(polish_dir);
        let qa = (z.transpose() * e * &z)[(0, 0)];
        let qb = 2.0 * (z.transpose() * e * &x)[(0, 0)] + c.dot(&z);
        let qc = r;
        let tau = if qa.abs() < 1e-300 {
            if qb == 0.0 {
                return Err(Error::NoConvergence { iterations: trace.len() });
            }
            -qc / qb
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return Err(Error::NoConvergence { iterations: trace.len() });
            }
            let sq = disc.sqrt();
            // Numerically stable pair of roots; take the smaller step.
            let q = -0.5 * (qb + sq.copysign(qb));
            let t1 = q / qa;
            let t2 = if q != 0.0 { qc / q } else { t1 };
            if t1.abs() < t2.abs() { t1 } else { t2 }
        };
        x += z * tau;
    }

    let others = pencil
        .kkt_points(d, c)
        .into_iter()
        .filter(|(m, _)| (m - mu).abs() > 1e-9 * (1.0 + mu.abs()))
        .collect();
    Ok(SecularSolution {
        x,
        mu,
        interval: (lo, hi),
        trace,
        others,
    })
}

/// Outcome of probing the likelihood around an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCheckReport {
    pub f_hat: f64,
    /// The estimate's own rollout is feasible, so the smooth-part optimum is
    /// also the optimum of the full likelihood.
    pub certificate_applies: bool,
    pub probes: usize,
    pub feasible_probes: usize,
    pub violations: usize,
    /// Smallest `f(probe) - f(theta_hat)` seen over feasible probes.
    pub min_margin: f64,
}

/// Probes `n_probe` random nonnegative parameter vectors and counts those
/// that beat `theta_hat` by more than `1e-9`.
pub fn verify_global(
    theta_hat: &ControllerParams,
    scenario: &Scenario,
    gamma: &Hyperparams,
    n_probe: usize,
    seed: u64,
) -> Result<GlobalCheckReport> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    let f_hat = neg_log_likelihood(scenario, theta_hat, gamma)?.total;
    let start = scenario.last_observed().ok_or(Error::EmptyObservation)?.lag;
    let certificate_applies = rollout_is_feasible(&rollout(scenario, theta_hat, start));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let local = Normal::new(0.0, 1.0).expect("unit normal");
    let hat = theta_hat.to_array();
    let mut report = GlobalCheckReport {
        f_hat,
        certificate_applies,
        probes: n_probe,
        feasible_probes: 0,
        violations: 0,
        min_margin: f64::INFINITY,
    };
    for i in 0..n_probe {
        let mut p = [0.0; 3];
        for j in 0..3 {
            p[j] = match i % 3 {
                0 => hat[j] + 1e-3 * local.sample(&mut rng),
                1 => hat[j] + 0.1 * local.sample(&mut rng),
                _ => rng.random_range(0.0..(2.0 * hat[j]).max(1.0)),
            }
            .max(0.0);
        }
        let theta = ControllerParams::from_array(p);
        let f = neg_log_likelihood(scenario, &theta, gamma)?.total;
        if !f.is_finite() {
            continue;
        }
        report.feasible_probes += 1;
        let margin = f - f_hat;
        report.min_margin = report.min_margin.min(margin);
        if margin < -1e-9 {
            report.violations += 1;
        }
    }
    if report.violations > 0 {
        log::warn!(
            "{} of {} probes improve on the estimate (certificate applies: {})",
            report.violations,
            n_probe,
            certificate_applies
        );
    }
    Ok(report)
}
