//! Closed-loop simulation with a CBF-QP safety filter.
//!
//! The loop per step is: cubic reference → P controller → filter → RK4 with
//! the input held over the step.
//!
//! Filter rows are the CBF conditions `ḣ_j(x, u) ≥ −κ_j·h_j(x)`. Two additions
//! make them hold between samples rather than only at them:
//!
//! * sampled-data rows replace `ẋ` by `ẋ + ½·Δt·J_f(x)·ẋ`, the second-order
//!   Taylor term of the held-input flow (exact for linear drift and constant
//!   actuation with piecewise-affine `h`);
//! * switch guards add a row for every smooth piece of `h_j` that could
//!   become the minimum within the next steps, asking that piece to stay
//!   above `(1 − κΔt)·h_j` at the next sample, so crossing a kink of the
//!   constraint cannot skip the piece that is about to bind.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::qp::{solve_box_qp, QpProblem, QpStatus};
use crate::system::{dot, BoxSet, CbfCandidate, HardConstraint, SystemModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Linear class-K gains, one per candidate (a single entry is broadcast).
    pub alphas: Vec<f64>,
    pub input_box: BoxSet,
    /// Slack weight; `None` keeps the rows hard.
    pub relaxation: Option<f64>,
    /// Use the sampled-data rows and switch guards in [`simulate`].
    pub sampled_data: bool,
    pub stop_on_infeasible: bool,
}

impl FilterConfig {
    pub fn new(input_box: BoxSet) -> Self {
        Self {
            alphas: vec![5.0],
            input_box,
            relaxation: None,
            sampled_data: true,
            stop_on_infeasible: false,
        }
    }

    pub fn validate(&self, candidates: usize) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
            return Err(Error::InvalidParameter("filter gains must be finite and > 0".into()));
        }
        if self.alphas.len() != 1 && self.alphas.len() != candidates {
            return Err(Error::InvalidParameter(format!(
                "{} filter gains for {candidates} candidates",
                self.alphas.len()
            )));
        }
        if let Some(w) = self.relaxation {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter("relaxation weight must be > 0".into()));
            }
        }
        Ok(())
    }

    fn alpha(&self, j: usize) -> f64 {
        if self.alphas.len() == 1 {
            self.alphas[0]
        } else {
            self.alphas[j]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub x_init: Vec<f64>,
    pub x_goal: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub kp: f64,
    pub require_safe_start: bool,
    /// Run the nominal controller (clipped to the input box) without the filter.
    pub unfiltered: bool,
}

impl SimConfig {
    pub fn new(x_init: Vec<f64>, x_goal: Vec<f64>) -> Self {
        Self {
            x_init,
            x_goal,
            horizon: 10.0,
            dt: 0.01,
            kp: 10.0,
            require_safe_start: true,
            unfiltered: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("goal state", self.x_init.len(), self.x_goal.len())?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be > 0 (got {})", self.dt)));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter("horizon must be finite and >= 0".into()));
        }
        if !(self.kp > 0.0) {
            return Err(Error::InvalidParameter("kp must be > 0".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Optimal,
    Infeasible,
    Unfiltered,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Infeasible => "infeasible",
            StepStatus::Unfiltered => "unfiltered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub nominal_inputs: Vec<Vec<f64>>,
    pub filtered_inputs: Vec<Vec<f64>>,
    pub h_values: Vec<Vec<f64>>,
    pub z_values: Vec<f64>,
    pub statuses: Vec<StepStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub min_h: Vec<f64>,
    pub min_z: f64,
    pub h_breaches: usize,
    pub z_breaches: usize,
    pub first_breach_time: Option<f64>,
    pub infeasible_steps: usize,
}

impl InvarianceReport {
    pub fn is_clean(&self) -> bool {
        self.h_breaches == 0 && self.z_breaches == 0 && self.infeasible_steps == 0
    }
}

/// Zero-slope cubic from the initial to the goal position over `[0, T]`,
/// held at the goal afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicReference {
    start: Vec<f64>,
    goal: Vec<f64>,
    duration: f64,
}

impl CubicReference {
    pub fn at(&self, t: f64) -> Vec<f64> {
        let s = (t / self.duration).clamp(0.0, 1.0);
        let blend = s * s * (3.0 - 2.0 * s);
        self.start
            .iter()
            .zip(&self.goal)
            .map(|(a, b)| a + (b - a) * blend)
            .collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        if !(0.0..=self.duration).contains(&t) {
            return vec![0.0; self.start.len()];
        }
        let s = t / self.duration;
        let rate = 6.0 * s * (1.0 - s) / self.duration;
        self.start.iter().zip(&self.goal).map(|(a, b)| (b - a) * rate).collect()
    }
}

/// Reference over the position block, taken as the first `m` state components.
pub fn reference_spline(x_init: &[f64], x_goal: &[f64], m: usize, duration: f64) -> Result<CubicReference> {
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter("spline duration must be > 0".into()));
    }
    check_dim("goal state", x_init.len(), x_goal.len())?;
    if m > x_init.len() {
        return Err(Error::InvalidParameter("more inputs than state components".into()));
    }
    Ok(CubicReference {
        start: x_init[..m].to_vec(),
        goal: x_goal[..m].to_vec(),
        duration,
    })
}

/// `k_p·(ξ − position(x))`, unclipped.
pub fn nominal_controller(x: &[f64], xi: &[f64], kp: f64) -> Vec<f64> {
    xi.iter().zip(x).map(|(r, p)| kp * (r - p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub input: Vec<f64>,
    pub status: QpStatus,
    pub rows: usize,
}

/// Central-difference `J_f(x)·w`.
fn drift_jacobian_times(sys: &SystemModel, x: &[f64], w: &[f64]) -> Vec<f64> {
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if wn == 0.0 {
        return vec![0.0; x.len()];
    }
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-6 * (1.0 + xn) / wn;
    let plus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(w).map(|(a, b)| a - h * b).collect();
    sys.drift(&plus)
        .iter()
        .zip(sys.drift(&minus))
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

/// Effective drift and actuation used by the rows: `f, g` for the continuous
/// condition, or `f + ½Δt·J_f·f`, `g + ½Δt·J_f·g` for a held input.
fn row_fields(sys: &SystemModel, x: &[f64], period: f64) -> (Vec<f64>, DMatrix<f64>) {
    let mut f = sys.drift(x);
    let mut g = sys.actuation(x);
    if period > 0.0 {
        let jf = drift_jacobian_times(sys, x, &f);
        for (fi, ji) in f.iter_mut().zip(&jf) {
            *fi += 0.5 * period * ji;
        }
        for k in 0..g.ncols() {
            let col: Vec<f64> = g.column(k).iter().copied().collect();
            let jg = drift_jacobian_times(sys, x, &col);
            for (i, ji) in jg.iter().enumerate() {
                g[(i, k)] += 0.5 * period * ji;
            }
        }
    }
    (f, g)
}

struct RowSet {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl RowSet {
    fn push(&mut self, grad: &[f64], value: f64, kappa: f64, f: &[f64], g: &DMatrix<f64>) {
        let a: Vec<f64> = (0..g.ncols())
            .map(|k| (0..grad.len()).map(|i| grad[i] * g[(i, k)]).sum())
            .collect();
        self.a.push(a);
        self.b.push(-kappa * value - dot(grad, f));
    }
}

fn build_rows(x: &[f64], cands: &[CbfCandidate], sys: &SystemModel, fc: &FilterConfig, period: f64) -> RowSet {
    let hcf = sys.hcf();
    let (f, g) = row_fields(sys, x, period);
    let raw_f = sys.drift(x);
    let raw_g = sys.actuation(x);
    let mut rows = RowSet {
        a: Vec::new(),
        b: Vec::new(),
    };
    for (j, cand) in cands.iter().enumerate() {
        let kappa = fc.alpha(j);
        let y = cand.transform(x);
        let active = hcf.active_piece(&y);
        let h = cand.eval(hcf, x);
        let grad_a = cand.piece_gradient(hcf, active, x);
        rows.push(&grad_a, h, kappa, &f, &g);
        for piece in 0..hcf.piece_count() {
            if piece == active {
                continue;
            }
            let hp = cand.piece_value(hcf, piece, x);
            let grad_p = cand.piece_gradient(hcf, piece, x);
            let diff: Vec<f64> = grad_p.iter().zip(&grad_a).map(|(a, b)| a - b).collect();
            let reach = 2.0 * period * max_rate(&diff, &raw_f, &raw_g, &fc.input_box);
            let gap = hp - h;
            if gap <= reach {
                // Only the next-sample minimum matters: `h_p + Δt·ḣ_p ≥ (1 − κΔt)·h`.
                let slack = if period > 0.0 { gap / period } else { 0.0 };
                rows.push(&grad_p, h, kappa, &f, &g);
                *rows.b.last_mut().unwrap() -= slack;
            }
        }
    }
    rows
}

/// `max_{u ∈ U} |w·(f + g·u)|`.
fn max_rate(w: &[f64], f: &[f64], g: &DMatrix<f64>, input_box: &BoxSet) -> f64 {
    let drift = dot(w, f);
    let (mut hi, mut lo) = (drift, drift);
    for k in 0..g.ncols() {
        let c: f64 = (0..w.len()).map(|i| w[i] * g[(i, k)]).sum();
        let (a, b) = (c * input_box.lower()[k], c * input_box.upper()[k]);
        hi += a.max(b);
        lo += a.min(b);
    }
    hi.abs().max(lo.abs())
}

fn solve_rows(u_nom: &[f64], rows: &RowSet, fc: &FilterConfig) -> Result<FilterOutcome> {
    let m = u_nom.len();
    let k = rows.a.len();
    match fc.relaxation {
        None => {
            let a = DMatrix::from_fn(k, m, |r, c| rows.a[r][c]);
            let p = QpProblem::projection(u_nom, a, DVector::from_column_slice(&rows.b), fc.input_box.clone())?;
            let sol = solve_box_qp(&p)?;
            Ok(FilterOutcome {
                input: sol.argmin,
                status: sol.status,
                rows: k,
            })
        }
        Some(weight) => {
            // Shared slack `s ≥ 0` on every row, penalized by `weight·s²`.
            let mut slack_hi = 1.0;
            for (a, b) in rows.a.iter().zip(&rows.b) {
                let worst: f64 = a
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v * fc.input_box.lower()[c]).min(v * fc.input_box.upper()[c]))
                    .sum();
                slack_hi = f64::max(slack_hi, b - worst + 1.0);
            }
            let mut lower = fc.input_box.lower().to_vec();
            let mut upper = fc.input_box.upper().to_vec();
            lower.push(0.0);
            upper.push(slack_hi);
            let mut hess = DMatrix::identity(m + 1, m + 1) * 2.0;
            hess[(m, m)] = 2.0 * weight;
            let mut lin = DVector::zeros(m + 1);
            for c in 0..m {
                lin[c] = -2.0 * u_nom[c];
            }
            let a = DMatrix::from_fn(k, m + 1, |r, c| if c < m { rows.a[r][c] } else { 1.0 });
            let p = QpProblem::new(
                hess,
                lin,
                a,
                DVector::from_column_slice(&rows.b),
                BoxSet::new(lower, upper)?,
            )?;
            let sol = solve_box_qp(&p)?;
            let relaxed = sol.argmin[m] > 1e-9;
            Ok(FilterOutcome {
                input: sol.argmin[..m].to_vec(),
                status: if relaxed { QpStatus::Infeasible } else { sol.status },
                rows: k,
            })
        }
    }
}

/// `argmin_{u ∈ U} ‖u − u_nom‖²` subject to `ḣ_j(x, u) ≥ −κ_j·h_j(x)` for
/// every candidate (continuous-time rows; tied pieces at a kink all enter).
pub fn safety_filter(
    x: &[f64],
    u_nom: &[f64],
    cands: &[CbfCandidate],
    sys: &SystemModel,
    fc: &FilterConfig,
) -> Result<FilterOutcome> {
    safety_filter_sampled(x, u_nom, cands, sys, fc, 0.0)
}

/// [`safety_filter`] with rows for an input held over `period` seconds.
pub fn safety_filter_sampled(
    x: &[f64],
    u_nom: &[f64],
    cands: &[CbfCandidate],
    sys: &SystemModel,
    fc: &FilterConfig,
    period: f64,
) -> Result<FilterOutcome> {
    if cands.is_empty() {
        return Err(Error::InvalidParameter(
            "safety filter needs at least one candidate".into(),
        ));
    }
    check_dim("state", sys.state_dim(), x.len())?;
    check_dim("nominal input", sys.input_dim(), u_nom.len())?;
    fc.validate(cands.len())?;
    if x.iter().chain(u_nom).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter input"));
    }
    let rows = build_rows(x, cands, sys, fc, period);
    if rows.a.iter().flatten().chain(&rows.b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter rows"));
    }
    solve_rows(u_nom, &rows, fc)
}

/// Classical RK4 with the input held over the step.
pub fn step(sys: &SystemModel, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("step size must be > 0 (got {dt})")));
    }
    let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> { a.iter().zip(k).map(|(p, q)| p + s * q).collect() };
    let k1 = sys.velocity(x, u);
    let k2 = sys.velocity(&axpy(x, &k1, 0.5 * dt), u);
    let k3 = sys.velocity(&axpy(x, &k2, 0.5 * dt), u);
    let k4 = sys.velocity(&axpy(x, &k3, dt), u);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrator state"));
    }
    Ok(next)
}

pub fn simulate(cfg: &SimConfig, sys: &SystemModel, cands: &[CbfCandidate], fc: &FilterConfig) -> Result<Trajectory> {
    simulate_with(cfg, sys, cands, fc, |t, x, reference| {
        nominal_controller(x, &reference.at(t), cfg.kp)
    })
}

/// [`simulate`] with a custom nominal controller `(t, x, reference) → u`.
pub fn simulate_with<C>(
    cfg: &SimConfig,
    sys: &SystemModel,
    cands: &[CbfCandidate],
    fc: &FilterConfig,
    nominal: C,
) -> Result<Trajectory>
where
    C: Fn(f64, &[f64], &CubicReference) -> Vec<f64>,
{
    cfg.validate()?;
    check_dim("initial state", sys.state_dim(), cfg.x_init.len())?;
    check_dim("input box", sys.input_dim(), fc.input_box.dim())?;
    if !cfg.unfiltered {
        if cands.is_empty() {
            return Err(Error::InvalidParameter("filtered simulation needs candidates".into()));
        }
        fc.validate(cands.len())?;
    }
    let hcf = sys.hcf();
    let h_of = |x: &[f64]| -> Vec<f64> { cands.iter().map(|c| c.eval(hcf, x)).collect() };
    if cfg.require_safe_start && !cands.is_empty() {
        let min_h = h_of(&cfg.x_init).into_iter().fold(f64::INFINITY, f64::min);
        if min_h < 0.0 {
            return Err(Error::UnsafeStart { min_h });
        }
    }
    let reference = reference_spline(
        &cfg.x_init,
        &cfg.x_goal,
        sys.input_dim(),
        (0.5 * cfg.horizon).max(cfg.dt),
    )?;
    let period = if fc.sampled_data { cfg.dt } else { 0.0 };
    let steps = cfg.steps();
    let mut traj = Trajectory::default();
    let mut x = cfg.x_init.clone();
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let u_nom = nominal(t, &x, &reference);
        let (u, status) = if cfg.unfiltered {
            (fc.input_box.clamp(&u_nom), StepStatus::Unfiltered)
        } else {
            let out = safety_filter_sampled(&x, &u_nom, cands, sys, fc, period)?;
            match out.status {
                QpStatus::Optimal => (out.input, StepStatus::Optimal),
                QpStatus::Infeasible => {
                    if fc.stop_on_infeasible {
                        return Err(Error::FilterInfeasible { time: t });
                    }
                    log::debug!("filter infeasible at t = {t}");
                    (out.input, StepStatus::Infeasible)
                }
            }
        };
        traj.times.push(t);
        traj.h_values.push(h_of(&x));
        traj.z_values.push(hcf.value(&x));
        traj.states.push(x.clone());
        traj.nominal_inputs.push(u_nom);
        traj.statuses.push(status);
        if k < steps {
            x = step(sys, &x, &u, cfg.dt)?;
        }
        traj.filtered_inputs.push(u);
    }
    Ok(traj)
}

/// Minimum of every `h_j` and of `z` over the run, with breach counts.
pub fn check_invariance(traj: &Trajectory, tol_h: f64, tol_z: f64) -> InvarianceReport {
    let count = traj.h_values.first().map_or(0, Vec::len);
    let mut min_h = vec![f64::INFINITY; count];
    let mut min_z = f64::INFINITY;
    let mut h_breaches = 0;
    let mut z_breaches = 0;
    let mut first_breach_time = None;
    for (k, (hs, z)) in traj.h_values.iter().zip(&traj.z_values).enumerate() {
        for (m, h) in min_h.iter_mut().zip(hs) {
            *m = m.min(*h);
        }
        min_z = min_z.min(*z);
        let hb = hs.iter().copied().fold(f64::INFINITY, f64::min) < -tol_h;
        let zb = *z < -tol_z;
        if hb {
            h_breaches += 1;
        }
        if zb {
            z_breaches += 1;
        }
        if (hb || zb) && first_breach_time.is_none() {
            first_breach_time = Some(traj.times[k]);
        }
    }
    InvarianceReport {
        min_h,
        min_z,
        h_breaches,
        z_breaches,
        first_breach_time,
        infeasible_steps: traj.statuses.iter().filter(|s| **s == StepStatus::Infeasible).count(),
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.filtered_inputs.first().map_or(0, Vec::len);
        let s = self.h_values.first().map_or(0, Vec::len);
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n).map(|i| format!("x{i}")));
        cols.extend((1..=m).map(|i| format!("u_nom_{i}")));
        cols.extend((1..=m).map(|i| format!("u_{i}")));
        cols.extend((1..=s).map(|i| format!("h_{i}")));
        cols.push("z".into());
        cols.push("status".into());
        let mut out = cols.join(",");
        out.push('\n');
        let mut buf = ryu::Buffer::new();
        for k in 0..self.len() {
            let mut fields: Vec<String> = Vec::with_capacity(cols.len());
            let mut num = |v: f64| fields.push(buf.format(v).to_string());
            num(self.times[k]);
            self.states[k].iter().for_each(|v| num(*v));
            self.nominal_inputs[k].iter().for_each(|v| num(*v));
            self.filtered_inputs[k].iter().for_each(|v| num(*v));
            self.h_values[k].iter().for_each(|v| num(*v));
            num(self.z_values[k]);
            fields.push(self.statuses[k].as_str().to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// `min_j h_j` at `x`; `+∞` for an empty candidate list.
pub fn min_candidate_value(cands: &[CbfCandidate], hcf: &HardConstraint, x: &[f64]) -> f64 {
    cands.iter().map(|c| c.eval(hcf, x)).fold(f64::INFINITY, f64::min)
}
