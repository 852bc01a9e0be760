//! Small dense convex QPs over a box plus linear inequalities.
//!
//! ```text
//!     minimize    ½ uᵀ H u + qᵀ u + c
//!     subject to  A u ≥ b,  lower ≤ u ≤ upper
//! ```
//!
//! Solved with a primal active-set method on a null-space basis of the
//! working set. Singular (PSD) Hessians are handled by following
//! zero-curvature descent rays to the next blocking constraint, which always
//! exists because the box is bounded. A phase-1 LP `min t s.t. A u + t ≥ b`
//! finds a starting point; a strictly positive optimum certifies
//! infeasibility, and the phase-2 solve then runs on the least-violation
//! relaxation so the returned point is still meaningful.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::system::{dot, BoxSet, SystemModel};

const PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    /// `A` in `A·u ≥ b`, one row per constraint.
    pub ineq_rows: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub bounds: BoxSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub argmin: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Multipliers of the `A·u ≥ b` rows (non-negative).
    pub row_multipliers: Vec<f64>,
    /// Signed box multipliers: positive on an active lower bound, negative on an upper one.
    pub bound_multipliers: Vec<f64>,
    /// Largest row violation at `argmin`; zero up to tolerance when optimal.
    pub max_violation: f64,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        ineq_rows: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
        bounds: BoxSet,
    ) -> Result<Self> {
        let m = bounds.dim();
        check_dim("hessian rows", m, hessian.nrows())?;
        check_dim("hessian cols", m, hessian.ncols())?;
        check_dim("linear term", m, linear.len())?;
        check_dim("inequality rhs", ineq_rows.nrows(), ineq_rhs.len())?;
        if ineq_rows.nrows() > 0 {
            check_dim("inequality cols", m, ineq_rows.ncols())?;
        }
        Ok(Self {
            hessian,
            linear,
            constant: 0.0,
            ineq_rows,
            ineq_rhs,
            bounds,
        })
    }

    /// `min ‖u − target‖²` subject to the rows and the box.
    pub fn projection(target: &[f64], ineq_rows: DMatrix<f64>, ineq_rhs: DVector<f64>, bounds: BoxSet) -> Result<Self> {
        let m = target.len();
        let mut p = Self::new(
            DMatrix::identity(m, m) * 2.0,
            DVector::from_iterator(m, target.iter().map(|t| -2.0 * t)),
            ineq_rows,
            ineq_rhs,
            bounds,
        )?;
        p.constant = dot(target, target);
        Ok(p)
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        0.5 * u.dot(&(&self.hessian * &u)) + self.linear.dot(&u) + self.constant
    }

    /// Largest violation `max(0, bᵢ − aᵢ·u)` over the inequality rows.
    pub fn max_violation(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        (0..self.ineq_rows.nrows())
            .map(|i| self.ineq_rhs[i] - self.ineq_rows.row(i).transpose().dot(&u))
            .fold(0.0, f64::max)
    }
}

/// General-form constraint `a·x ≥ b` as used inside the active-set loop.
struct Constraint {
    a: DVector<f64>,
    b: f64,
}

enum Phase {
    Converged,
    Unbounded,
    IterationLimit,
}

struct ActiveSetResult {
    x: DVector<f64>,
    working: Vec<usize>,
    multipliers: Vec<f64>,
    phase: Phase,
}

pub fn solve_box_qp(p: &QpProblem) -> Result<QpSolution> {
    let m = p.dim();
    let k = p.ineq_rows.nrows();
    if p.hessian.iter().chain(p.linear.iter()).any(|v| !v.is_finite())
        || p.ineq_rows.iter().chain(p.ineq_rhs.iter()).any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("QP data"));
    }

    let scale = p.hessian.amax().max(1.0);
    let asym = (&p.hessian - p.hessian.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidParameter(format!(
            "hessian is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let mut hessian = (&p.hessian + p.hessian.transpose()) * 0.5;
    if m > 0 {
        let min_eig = hessian.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL {
            return Err(Error::IndefiniteHessian(min_eig));
        }
        if min_eig < 0.0 {
            hessian += DMatrix::identity(m, m) * PSD_TOL;
        }
    }

    // Rows first, then lower and upper bounds per axis.
    let mut cons: Vec<Constraint> = (0..k)
        .map(|i| Constraint {
            a: p.ineq_rows.row(i).transpose(),
            b: p.ineq_rhs[i],
        })
        .collect();
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        cons.push(Constraint {
            a: e.clone(),
            b: p.bounds.lower()[j],
        });
        cons.push(Constraint {
            a: -e,
            b: -p.bounds.upper()[j],
        });
    }

    let start = DVector::from_vec(p.bounds.clamp(&vec![0.0; m]));
    let violation = |x: &DVector<f64>| cons[..k].iter().map(|c| c.b - c.a.dot(x)).fold(0.0, f64::max);
    let rhs_scale = 1.0 + p.ineq_rhs.amax();
    let feas_tol = FEAS_TOL * rhs_scale;

    let mut x0 = start.clone();
    if violation(&x0) > feas_tol {
        x0 = phase_one(&cons, k, m, &start)?;
    }
    let t = violation(&x0);
    let status = if t > feas_tol {
        QpStatus::Infeasible
    } else {
        QpStatus::Optimal
    };
    if t > 0.0 {
        for c in cons[..k].iter_mut() {
            c.b -= t;
        }
    }

    let res = active_set(&hessian, &p.linear, &cons, x0, Vec::new());
    if let Phase::Unbounded = res.phase {
        return Err(Error::InvalidParameter("QP is unbounded".into()));
    }
    if let Phase::IterationLimit = res.phase {
        log::warn!("QP active-set iteration limit reached; returning last iterate");
    }

    let mut x = res.x;
    // Round-off can leave the iterate a hair outside the box.
    for j in 0..m {
        x[j] = x[j].clamp(p.bounds.lower()[j], p.bounds.upper()[j]);
    }
    let mut row_multipliers = vec![0.0; k];
    let mut bound_multipliers = vec![0.0; m];
    for (w, lam) in res.working.iter().zip(&res.multipliers) {
        let lam = lam.max(0.0);
        if *w < k {
            row_multipliers[*w] = lam;
        } else {
            let axis = (*w - k) / 2;
            if (*w - k).is_multiple_of(2) {
                bound_multipliers[axis] += lam;
            } else {
                bound_multipliers[axis] -= lam;
            }
        }
    }
    let argmin: Vec<f64> = x.iter().copied().collect();
    Ok(QpSolution {
        objective: p.objective(&argmin),
        max_violation: p.max_violation(&argmin),
        argmin,
        status,
        row_multipliers,
        bound_multipliers,
    })
}

/// Minimizes the largest row violation over the box.
fn phase_one(cons: &[Constraint], k: usize, m: usize, start: &DVector<f64>) -> Result<DVector<f64>> {
    let t0 = cons[..k].iter().map(|c| c.b - c.a.dot(start)).fold(0.0, f64::max);
    let mut lifted: Vec<Constraint> = cons
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut a = DVector::zeros(m + 1);
            a.rows_mut(0, m).copy_from(&c.a);
            if i < k {
                a[m] = 1.0;
            }
            Constraint { a, b: c.b }
        })
        .collect();
    let mut t_row = DVector::zeros(m + 1);
    t_row[m] = 1.0;
    lifted.push(Constraint { a: t_row, b: 0.0 });

    let mut x0 = DVector::zeros(m + 1);
    x0.rows_mut(0, m).copy_from(start);
    x0[m] = t0;
    let mut q = DVector::zeros(m + 1);
    q[m] = 1.0;
    let res = active_set(&DMatrix::zeros(m + 1, m + 1), &q, &lifted, x0, Vec::new());
    match res.phase {
        Phase::Unbounded => Err(Error::InvalidParameter("phase-1 LP is unbounded".into())),
        _ => Ok(res.x.rows(0, m).into_owned()),
    }
}

fn active_set(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    cons: &[Constraint],
    mut x: DVector<f64>,
    mut working: Vec<usize>,
) -> ActiveSetResult {
    let n = x.len();
    let max_iter = 50 * (n + cons.len() + 1);
    let x_scale = |x: &DVector<f64>| 1.0 + x.amax();

    for _ in 0..max_iter {
        let g = h * &x + q;
        let z = null_space(cons, &working, n);
        let mut step = DVector::zeros(n);
        let mut ray = false;
        if z.ncols() > 0 {
            let hz = z.transpose() * h * &z;
            let gz = z.transpose() * &g;
            let eig = hz.symmetric_eigen();
            let eig_tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
            let mut newton = DVector::zeros(z.ncols());
            let mut flat = DVector::zeros(z.ncols());
            for (i, lam) in eig.eigenvalues.iter().enumerate() {
                let v = eig.eigenvectors.column(i);
                let proj = v.dot(&gz);
                if *lam > eig_tol {
                    newton -= v * (proj / lam);
                } else {
                    flat += v * proj;
                }
            }
            if flat.norm() > 1e-11 * (1.0 + g.norm()) {
                ray = true;
                step = &z * (-flat);
            } else {
                step = &z * newton;
            }
        }

        if !ray && step.norm() <= 1e-13 * x_scale(&x) {
            let lambdas = working_multipliers(cons, &working, &g);
            let (mut worst, mut worst_val) = (None, -1e-12 * (1.0 + g.amax()));
            for (pos, lam) in lambdas.iter().enumerate() {
                if *lam < worst_val {
                    worst_val = *lam;
                    worst = Some(pos);
                }
            }
            match worst {
                None => {
                    return ActiveSetResult {
                        x,
                        working,
                        multipliers: lambdas,
                        phase: Phase::Converged,
                    }
                }
                Some(pos) => {
                    working.remove(pos);
                    continue;
                }
            }
        }

        let mut alpha = if ray { f64::INFINITY } else { 1.0 };
        let mut blocking = None;
        for (i, c) in cons.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = c.a.dot(&step);
            if ap < -1e-14 * c.a.norm() * step.norm() {
                let slack = c.a.dot(&x) - c.b;
                let reach = (slack / -ap).max(0.0);
                if reach < alpha {
                    alpha = reach;
                    blocking = Some(i);
                }
            }
        }
        if !alpha.is_finite() {
            return ActiveSetResult {
                x,
                working,
                multipliers: Vec::new(),
                phase: Phase::Unbounded,
            };
        }
        x += step * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    let g = h * &x + q;
    let multipliers = working_multipliers(cons, &working, &g);
    ActiveSetResult {
        x,
        working,
        multipliers,
        phase: Phase::IterationLimit,
    }
}

/// Solves `A_Wᵀ λ = g` in the least-squares sense.
fn working_multipliers(cons: &[Constraint], working: &[usize], g: &DVector<f64>) -> Vec<f64> {
    if working.is_empty() {
        return Vec::new();
    }
    let n = g.len();
    let aw = DMatrix::from_fn(working.len(), n, |r, c| cons[working[r]].a[c]);
    let gram = &aw * aw.transpose();
    let rhs = &aw * g;
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs).iter().copied().collect(),
        None => gram
            .pseudo_inverse(1e-14)
            .map(|pinv| (pinv * rhs).iter().copied().collect())
            .unwrap_or_else(|_| vec![0.0; working.len()]),
    }
}

/// Orthonormal basis of `{p : aᵢ·p = 0 ∀ i ∈ W}` by modified Gram-Schmidt.
fn null_space(cons: &[Constraint], working: &[usize], n: usize) -> DMatrix<f64> {
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(n);
    for &w in working {
        if let Some(v) = orthogonalize(&cons[w].a, &ortho) {
            ortho.push(v);
        }
    }
    let rank = ortho.len();
    let mut basis = Vec::with_capacity(n - rank);
    for j in 0..n {
        if ortho.len() == n {
            break;
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if let Some(v) = orthogonalize(&e, &ortho) {
            ortho.push(v.clone());
            basis.push(v);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

fn orthogonalize(v: &DVector<f64>, ortho: &[DVector<f64>]) -> Option<DVector<f64>> {
    let norm0 = v.norm();
    if norm0 == 0.0 {
        return None;
    }
    let mut w = v.clone();
    for _ in 0..2 {
        for o in ortho {
            let c = o.dot(&w);
            w -= o * c;
        }
    }
    let norm = w.norm();
    if norm <= 1e-10 * norm0 {
        None
    } else {
        Some(w / norm)
    }
}

/// `min_{u ∈ U} (L_f z + L_g z·u)²`, the zero-`ż` feasibility program.
///
/// Returns the minimizer and the residual evaluated directly at it.
pub fn min_zdot_residual(sys: &SystemModel, x: &[f64], input_box: &BoxSet) -> Result<(Vec<f64>, f64)> {
    check_dim("state", sys.state_dim(), x.len())?;
    check_dim("input box", sys.input_dim(), input_box.dim())?;
    let grad = sys.hcf().gradient(x);
    let (lf, lg) = sys.lie_derivatives(&grad, x);
    let m = lg.len();
    let lg_vec = DVector::from_column_slice(&lg);
    let problem = QpProblem::new(
        &lg_vec * lg_vec.transpose() * 2.0,
        &lg_vec * (2.0 * lf),
        DMatrix::zeros(0, m),
        DVector::zeros(0),
        input_box.clone(),
    )?
    .with_constant(lf * lf);
    let sol = solve_box_qp(&problem)?;
    let r = lf + dot(&lg, &sol.argmin);
    Ok((sol.argmin, r * r))
}

/// Zero threshold for the feasibility residual: `tol·(1 + (L_f z)²)`.
pub fn residual_tolerance(sys: &SystemModel, x: &[f64], rel_tol: f64) -> f64 {
    let grad = sys.hcf().gradient(x);
    let lf = dot(&grad, &sys.drift(x));
    rel_tol * (1.0 + lf * lf)
}

/// Whether `max_{u ∈ U} bias + row·u ≥ 0`, evaluated at the maximizing vertex.
pub fn exists_input_nonneg(row: &[f64], bias: f64, input_box: &BoxSet) -> bool {
    let (best, mag) = row.iter().zip(input_box.lower().iter().zip(input_box.upper())).fold(
        (bias, bias.abs()),
        |(acc, mag), (r, (lo, hi))| {
            let v = (r * lo).max(r * hi);
            (acc + v, mag + v.abs())
        },
    );
    best >= -1e-12 * (1.0 + mag)
}
