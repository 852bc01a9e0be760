//! Fitting `h(x) = z(D·x + c) + ε` to sampled data, either as a single
//! candidate (uniform or per-axis scale) or as an intersection of several.
//!
//! The offset never enters the search. For fixed `(D, c)` the set grows with
//! `ε`, so the best admissible offset is the largest one that keeps every
//! boundary sample at `min_j h_j ≤ −margin`; it is computed in closed form and
//! the derivative-free search runs over scales and shifts only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySet, NeighborGrid};
use crate::error::{Error, Result};
use crate::qp::{exists_input_nonneg, solve_box_qp, QpProblem, QpStatus};
use crate::sampler::{batch_rng, SampleSet};
use crate::search::{golden_polish, nelder_mead};
use crate::system::{dot, BoxSet, CbfCandidate, HardConstraint, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Uniform,
    NonUniform,
    Multi(usize),
}

impl FitMode {
    pub fn candidate_count(&self) -> usize {
        match self {
            FitMode::Multi(s) => *s,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FitMode::Uniform => "uniform",
            FitMode::NonUniform => "nonuniform",
            FitMode::Multi(_) => "multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Monte Carlo measure of `{min_j h_j ≥ 0} ∩ V`.
    SampleCount,
    /// Monte Carlo integral of `max(0, min_j h_j)` over `V`.
    IntegralSurrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub restarts: usize,
    /// Nelder-Mead evaluation budget per free parameter and restart.
    pub evals_per_param: usize,
    pub polish_sweeps: usize,
    /// Samples used while searching; the final choice is re-scored on all.
    pub subsample: usize,
    /// Penalty per unit area of non-feasible samples inside the set.
    pub containment_weight: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            evals_per_param: 80,
            polish_sweeps: 2,
            subsample: 20_000,
            containment_weight: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub mode: FitMode,
    pub margin: f64,
    pub objective: ObjectiveKind,
    pub search: SearchConfig,
    /// Integration region; the sampling box when absent.
    pub volume_region: Option<BoxSet>,
    /// Boundary probes per candidate for the input-feasibility checks.
    pub probes: usize,
    /// Incumbents whose containment falls below `1 − containment_tol` are rejected.
    pub containment_tol: f64,
}

impl FitConfig {
    pub fn new(mode: FitMode) -> Self {
        Self {
            mode,
            margin: 0.0,
            objective: ObjectiveKind::SampleCount,
            search: SearchConfig::default(),
            volume_region: None,
            probes: 256,
            containment_tol: 1e-3,
        }
    }

    pub fn with_mode(&self, mode: FitMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if let FitMode::Multi(s) = self.mode {
            if s < 2 {
                return bad(format!("multi mode needs at least 2 candidates (got {s})"));
            }
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return bad(format!("margin must be finite and >= 0 (got {})", self.margin));
        }
        if !(0.0..1.0).contains(&self.containment_tol) {
            return bad("containment_tol must lie in [0, 1)".into());
        }
        if self.search.restarts == 0 || self.search.subsample == 0 {
            return bad("search needs at least one restart and a non-empty subsample".into());
        }
        if !(self.search.containment_weight >= 0.0) {
            return bad("containment_weight must be >= 0".into());
        }
        Ok(())
    }

    fn region<'a>(&'a self, s: &'a SampleSet) -> Result<&'a BoxSet> {
        let region = self.volume_region.as_ref().unwrap_or(&s.bounds);
        if region.volume() <= 0.0 {
            return Err(Error::InvalidParameter("volume region has zero volume".into()));
        }
        Ok(region)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Share of samples inside the candidate set that are in the feasible class.
    pub containment_fraction: f64,
    /// Share of active-boundary probes where `sup_u ḣ_j ≥ 0`.
    pub boundary_cbf_feasible_fraction: f64,
    /// Share of (candidate, boundary point) pairs meeting the reduced-scale input condition.
    pub reduced_input_fraction: f64,
    pub samples_in_set: usize,
    pub probes_checked: usize,
    pub empty_set: bool,
    /// Exact `min z` over the candidate set within the sample box when every
    /// constraint piece is affine; `None` otherwise or for an empty set.
    pub min_hard_constraint: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    pub redundant: bool,
    pub zeta: Option<f64>,
    pub indeterminate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyPair {
    pub first: usize,
    pub second: usize,
    #[serde(flatten)]
    pub check: Redundancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mode: FitMode,
    pub status: FitStatus,
    pub candidates: Vec<CbfCandidate>,
    pub objective_value: f64,
    pub verification: VerificationReport,
    pub redundancy: Vec<RedundancyPair>,
    pub warnings: Vec<String>,
    pub config_echo: FitConfig,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("fit result: {e}")))
    }

    /// Largest `min_j h_j` over `points`; `−∞` when there are none.
    pub fn max_boundary_value(&self, hcf: &HardConstraint, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|x| min_h(&self.candidates, hcf, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn min_h(cands: &[CbfCandidate], hcf: &HardConstraint, x: &[f64]) -> f64 {
    cands.iter().map(|c| c.eval(hcf, x)).fold(f64::INFINITY, f64::min)
}

/// `|P|` (or `|P_∩|`) estimated from the samples.
pub fn estimate_set_size(cands: &[CbfCandidate], s: &SampleSet, hcf: &HardConstraint, cfg: &FitConfig) -> Result<f64> {
    if cands.is_empty() {
        return Err(Error::InvalidParameter("no candidates given".into()));
    }
    for c in cands {
        c.validate(s.bounds.dim())?;
    }
    let region = cfg.region(s)?;
    let (sum, n_in) = s
        .records
        .par_iter()
        .filter(|r| region.contains(&r.state))
        .map_init(Vec::new, |buf, r| {
            let m = cands
                .iter()
                .map(|c| c.eval_with(hcf, &r.state, buf))
                .fold(f64::INFINITY, f64::min);
            match cfg.objective {
                ObjectiveKind::SampleCount => (if m >= 0.0 { 1.0 } else { 0.0 }, 1usize),
                ObjectiveKind::IntegralSurrogate => (m.max(0.0), 1usize),
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(a, n), (v, k)| (a + v, n + k));
    if n_in == 0 {
        return Ok(0.0);
    }
    Ok(sum / n_in as f64 * region.volume())
}

/// Whether some admissible input satisfies `∂z/∂x(x)·D̄·(f(x) + g(x)·u) ≥ 0`.
pub fn reduced_input_condition(sys: &SystemModel, input_box: &BoxSet, x: &[f64], reduced: &[f64]) -> bool {
    ReducedTerms::at(sys, x).satisfiable(reduced, input_box)
}

/// `∂z/∂x`, `f` and `g` at one state, cached for the reduced-scale test.
struct ReducedTerms {
    grad: Vec<f64>,
    drift: Vec<f64>,
    act: DMatrix<f64>,
}

impl ReducedTerms {
    fn at(sys: &SystemModel, x: &[f64]) -> Self {
        Self {
            grad: sys.hcf().gradient(x),
            drift: sys.drift(x),
            act: sys.actuation(x),
        }
    }

    fn satisfiable(&self, reduced: &[f64], input_box: &BoxSet) -> bool {
        let w: Vec<f64> = self.grad.iter().zip(reduced).map(|(g, d)| g * d).collect();
        if w.iter().all(|v| *v == 0.0) {
            return true;
        }
        let bias = dot(&w, &self.drift);
        let row: Vec<f64> = (0..self.act.ncols())
            .map(|k| (0..w.len()).map(|i| w[i] * self.act[(i, k)]).sum())
            .collect();
        exists_input_nonneg(&row, bias, input_box)
    }
}

/// Whether `h₁ = ζ·h₂` for some `ζ > 0`.
///
/// Affine constraints are decided in closed form from `A·D` and the
/// intercepts; otherwise `ζ` is fitted by least squares on the probes.
pub fn check_redundancy(
    c1: &CbfCandidate,
    c2: &CbfCandidate,
    hcf: &HardConstraint,
    probe_states: &[Vec<f64>],
) -> Result<Redundancy> {
    let n = hcf.dim();
    c1.validate(n)?;
    c2.validate(n)?;
    if probe_states.len() < n + 2 {
        return Err(Error::InvalidParameter(format!(
            "redundancy check needs at least {} probe states (got {})",
            n + 2,
            probe_states.len()
        )));
    }
    let (v1, v2): (Vec<f64>, Vec<f64>) = match hcf.as_affine() {
        Some((a, b)) => {
            let coeffs = |c: &CbfCandidate| -> Vec<f64> {
                let mut v: Vec<f64> = a.iter().zip(&c.scale).map(|(ai, d)| ai * d).collect();
                v.push(dot(a, &c.shift) + b + c.offset);
                v
            };
            (coeffs(c1), coeffs(c2))
        }
        None => probe_states.iter().map(|x| (c1.eval(hcf, x), c2.eval(hcf, x))).unzip(),
    };
    Ok(proportional(&v1, &v2))
}

fn proportional(v1: &[f64], v2: &[f64]) -> Redundancy {
    let s1 = v1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s2 = v2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol2 = 1e-9 * (1.0 + s2);
    let (num, den) = v1
        .iter()
        .zip(v2)
        .filter(|(_, b)| b.abs() > tol2)
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a * b, d + b * b));
    if den == 0.0 {
        log::warn!("redundancy check indeterminate: second candidate vanishes on all probes");
        return Redundancy {
            redundant: false,
            zeta: None,
            indeterminate: true,
        };
    }
    let zeta = num / den;
    let tol1 = 1e-9 * (1.0 + s1);
    let fits = v1.iter().zip(v2).all(|(a, b)| (a - zeta * b).abs() <= tol1);
    Redundancy {
        redundant: zeta > 0.0 && fits,
        zeta: Some(zeta),
        indeterminate: false,
    }
}

/// Drops every candidate that is a positive multiple of an earlier one.
/// Returns the kept candidates and the removed indices.
pub fn collapse_redundant(
    cands: &[CbfCandidate],
    hcf: &HardConstraint,
    probe_states: &[Vec<f64>],
) -> Result<(Vec<CbfCandidate>, Vec<usize>)> {
    let mut kept: Vec<CbfCandidate> = Vec::new();
    let mut removed = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        let mut dup = false;
        for k in &kept {
            if check_redundancy(c, k, hcf, probe_states)?.redundant {
                dup = true;
                break;
            }
        }
        if dup {
            removed.push(i);
        } else {
            kept.push(c.clone());
        }
    }
    Ok((kept, removed))
}

/// Sample-based containment, boundary-probe input feasibility and the
/// reduced-scale condition on `∂Ẑ₀`.
pub fn verify_candidate(
    cands: &[CbfCandidate],
    s: &SampleSet,
    sys: &SystemModel,
    input_box: &BoxSet,
    boundary: &BoundarySet,
    probes: usize,
) -> Result<VerificationReport> {
    if cands.is_empty() {
        return Err(Error::InvalidParameter("no candidates given".into()));
    }
    let hcf = sys.hcf();
    for c in cands {
        c.validate(sys.state_dim())?;
    }
    let view = SampleView::new(s, None, &s.bounds, true);
    let values = view.values(cands, hcf);
    let k = cands.len();
    let (mut in_set, mut good) = (0usize, 0usize);
    for (i, row) in values.chunks(k).enumerate() {
        if row.iter().all(|v| *v >= 0.0) {
            in_set += 1;
            if view.feasible[i] {
                good += 1;
            }
        }
    }
    let empty_set = in_set == 0;
    if empty_set {
        log::warn!("candidate set contains no samples; verification is vacuous");
    }
    let containment_fraction = if empty_set { 1.0 } else { good as f64 / in_set as f64 };

    let mut probes_checked = 0usize;
    let mut probes_ok = 0usize;
    for j in 0..k {
        for nu in view.probe_points(&values, cands, hcf, j, probes) {
            probes_checked += 1;
            if cbf_condition_feasible(sys, input_box, &cands[j], &nu)? {
                probes_ok += 1;
            }
        }
    }
    let boundary_cbf_feasible_fraction = if probes_checked == 0 {
        1.0
    } else {
        probes_ok as f64 / probes_checked as f64
    };

    let terms: Vec<ReducedTerms> = boundary.points.iter().map(|x| ReducedTerms::at(sys, x)).collect();
    let mut reduced_total = 0usize;
    let mut reduced_ok = 0usize;
    for c in cands {
        let reduced = c.reduced_scale();
        for t in &terms {
            reduced_total += 1;
            if t.satisfiable(&reduced, input_box) {
                reduced_ok += 1;
            }
        }
    }
    let reduced_input_fraction = if reduced_total == 0 {
        1.0
    } else {
        reduced_ok as f64 / reduced_total as f64
    };

    Ok(VerificationReport {
        containment_fraction,
        boundary_cbf_feasible_fraction,
        reduced_input_fraction,
        samples_in_set: in_set,
        probes_checked,
        empty_set,
        min_hard_constraint: hard_constraint_minimum(cands, hcf, &s.bounds)?.map(|(_, z)| z),
    })
}

/// Minimum of the hard constraint over `{min_j h_j ≥ 0} ∩ region` with its
/// minimizer. The set is a polytope when every piece is affine, so each
/// piece of `z` is minimized exactly by a linear program. `None` when a
/// piece is not affine or the set misses the region.
pub fn hard_constraint_minimum(
    cands: &[CbfCandidate],
    hcf: &HardConstraint,
    region: &BoxSet,
) -> Result<Option<(Vec<f64>, f64)>> {
    let n = hcf.dim();
    let pieces: Option<Vec<(&[f64], f64)>> = (0..hcf.piece_count()).map(|p| hcf.piece_affine(p)).collect();
    let Some(pieces) = pieces else {
        return Ok(None);
    };
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for c in cands {
        for (a, b) in &pieces {
            rows.push((0..n).map(|i| a[i] * c.scale[i]).collect::<Vec<f64>>());
            rhs.push(-(dot(a, &c.shift) + b + c.offset));
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (a, _) in &pieces {
        let p = QpProblem::new(
            DMatrix::zeros(n, n),
            DVector::from_column_slice(a),
            DMatrix::from_fn(rows.len(), n, |r, k| rows[r][k]),
            DVector::from_column_slice(&rhs),
            region.clone(),
        )?;
        let sol = solve_box_qp(&p)?;
        if sol.status != QpStatus::Optimal {
            return Ok(None);
        }
        let z = hcf.value(&sol.argmin);
        if best.as_ref().is_none_or(|(_, v)| z < *v) {
            best = Some((sol.argmin, z));
        }
    }
    Ok(best)
}

/// `sup_{u ∈ U} ∂h/∂x·(f + g·u) ≥ 0`, solved as an LP on the input box.
fn cbf_condition_feasible(sys: &SystemModel, input_box: &BoxSet, cand: &CbfCandidate, x: &[f64]) -> Result<bool> {
    let grad = cand.gradient(sys.hcf(), x);
    let (lf, lg) = sys.lie_derivatives(&grad, x);
    let m = lg.len();
    let lp = QpProblem::new(
        DMatrix::zeros(m, m),
        nalgebra::DVector::from_iterator(m, lg.iter().map(|v| -v)),
        DMatrix::zeros(0, m),
        nalgebra::DVector::zeros(0),
        input_box.clone(),
    )?;
    let sol = solve_box_qp(&lp)?;
    let sup = lf + dot(&lg, &sol.argmin);
    let scale = 1.0
        + lf.abs()
        + lg.iter().map(|v| v.abs()).sum::<f64>()
            * input_box
                .lower()
                .iter()
                .chain(input_box.upper())
                .fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(sup >= -1e-9 * scale)
}

/// Samples seen by the search (a deterministic stride subset) or the full set.
struct SampleView<'a> {
    states: Vec<&'a [f64]>,
    feasible: Vec<bool>,
    in_region: Vec<bool>,
    n_in_region: usize,
    region_volume: f64,
    box_volume: f64,
    pairs: Vec<(usize, usize)>,
}

impl<'a> SampleView<'a> {
    fn new(s: &'a SampleSet, limit: Option<usize>, region: &BoxSet, with_pairs: bool) -> Self {
        let stride = limit.map_or(1, |l| s.len().div_ceil(l.max(1)).max(1));
        let picked: Vec<&crate::sampler::SampleRecord> = s.records.iter().step_by(stride).collect();
        let states: Vec<&[f64]> = picked.iter().map(|r| r.state.as_slice()).collect();
        let feasible = picked.iter().map(|r| r.is_feasible()).collect();
        let in_region: Vec<bool> = states.iter().map(|x| region.contains(x)).collect();
        let n_in_region = in_region.iter().filter(|b| **b).count();
        let pairs = if with_pairs {
            neighbor_pairs(&states, &s.bounds)
        } else {
            Vec::new()
        };
        Self {
            states,
            feasible,
            in_region,
            n_in_region,
            region_volume: region.volume(),
            box_volume: s.bounds.volume(),
            pairs,
        }
    }

    fn len(&self) -> usize {
        self.states.len()
    }

    /// Row-major `len × k` matrix of candidate values.
    fn values(&self, cands: &[CbfCandidate], hcf: &HardConstraint) -> Vec<f64> {
        let k = cands.len();
        let mut out = vec![0.0; self.len() * k];
        out.par_chunks_mut(k)
            .zip(self.states.par_iter())
            .for_each_init(Vec::new, |buf, (row, x)| {
                for (v, c) in row.iter_mut().zip(cands) {
                    *v = c.eval_with(hcf, x, buf);
                }
            });
        out
    }

    /// Points on `{h_j = 0, min_i h_i ≥ 0}` found by bisection along
    /// neighbour segments that leave the set through candidate `j`.
    fn probe_points(
        &self,
        values: &[f64],
        cands: &[CbfCandidate],
        hcf: &HardConstraint,
        j: usize,
        limit: usize,
    ) -> Vec<Vec<f64>> {
        let k = cands.len();
        let row = |i: usize| &values[i * k..(i + 1) * k];
        let inside = |i: usize| row(i).iter().all(|v| *v >= 0.0);
        let crossing: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .filter_map(|&(a, b)| {
                if inside(a) && row(b)[j] < 0.0 {
                    Some((a, b))
                } else if inside(b) && row(a)[j] < 0.0 {
                    Some((b, a))
                } else {
                    None
                }
            })
            .collect();
        if crossing.is_empty() || limit == 0 {
            return Vec::new();
        }
        let stride = crossing.len().div_ceil(limit).max(1);
        crossing
            .iter()
            .step_by(stride)
            .filter_map(|&(a, b)| {
                let (xa, xb) = (self.states[a], self.states[b]);
                let at = |t: f64| -> Vec<f64> { xa.iter().zip(xb).map(|(p, q)| p + t * (q - p)).collect() };
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..32 {
                    let mid = 0.5 * (lo + hi);
                    if cands[j].eval(hcf, &at(mid)) >= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let nu = at(lo);
                let others_ok = cands.iter().enumerate().all(|(i, c)| i == j || c.eval(hcf, &nu) >= 0.0);
                others_ok.then_some(nu)
            })
            .collect()
    }
}

/// Each sample paired with its nearest neighbour (normalized metric).
fn neighbor_pairs(states: &[&[f64]], bounds: &BoxSet) -> Vec<(usize, usize)> {
    if states.len() < 2 {
        return Vec::new();
    }
    let n_eff = (0..bounds.dim()).filter(|&i| !bounds.is_degenerate(i)).count().max(1);
    let radius = (3.0 * (1.0 / states.len() as f64).powf(1.0 / n_eff as f64)).min(1.0);
    let grid = NeighborGrid::new(states.iter().map(|x| bounds.normalize(x)).collect(), radius);
    let mut pairs: Vec<(usize, usize)> = (0..states.len())
        .into_par_iter()
        .filter_map(|i| grid.nearest(i, radius).map(|j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

struct Scored {
    cands: Vec<CbfCandidate>,
    objective: f64,
    containment: f64,
    constraint_failures: usize,
    score: f64,
}

/// Shared state of one fitting run.
struct Problem<'a> {
    sys: &'a SystemModel,
    input_box: &'a BoxSet,
    cfg: &'a FitConfig,
    n: usize,
    bounds: &'a BoxSet,
    boundary: &'a [Vec<f64>],
    boundary_terms: Vec<ReducedTerms>,
    z_scale: f64,
}

impl<'a> Problem<'a> {
    fn hcf(&self) -> &HardConstraint {
        self.sys.hcf()
    }

    fn param_len(&self) -> usize {
        let n = self.n;
        match self.cfg.mode {
            FitMode::Uniform => 1 + n,
            FitMode::NonUniform => 2 * n,
            FitMode::Multi(s) => s * (2 * n + 1),
        }
    }

    fn decode(&self, theta: &[f64]) -> Vec<CbfCandidate> {
        let n = self.n;
        match self.cfg.mode {
            FitMode::Uniform => vec![CbfCandidate {
                scale: vec![theta[0].exp(); n],
                shift: theta[1..=n].to_vec(),
                offset: 0.0,
            }],
            FitMode::NonUniform => vec![CbfCandidate {
                scale: theta[..n].iter().map(|d| d.abs()).collect(),
                shift: theta[n..2 * n].to_vec(),
                offset: 0.0,
            }],
            FitMode::Multi(s) => (0..s)
                .map(|j| {
                    let p = &theta[j * (2 * n + 1)..(j + 1) * (2 * n + 1)];
                    CbfCandidate {
                        scale: p[..n].iter().map(|d| d.abs()).collect(),
                        shift: p[n..2 * n].to_vec(),
                        offset: p[2 * n],
                    }
                })
                .collect(),
        }
    }

    fn encode(&self, cands: &[CbfCandidate]) -> Vec<f64> {
        match self.cfg.mode {
            FitMode::Uniform => {
                let c = &cands[0];
                let d = c.scale.iter().sum::<f64>() / self.n as f64;
                let mut t = vec![d.max(1e-12).ln()];
                t.extend_from_slice(&c.shift);
                t
            }
            FitMode::NonUniform => {
                let c = &cands[0];
                let mut t = c.scale.clone();
                t.extend_from_slice(&c.shift);
                t
            }
            FitMode::Multi(_) => cands
                .iter()
                .flat_map(|c| {
                    let mut t = c.scale.clone();
                    t.extend_from_slice(&c.shift);
                    t.push(c.offset);
                    t
                })
                .collect(),
        }
    }

    /// Moves all offsets by the same amount so that the largest boundary
    /// value of `min_j h_j` is exactly `−margin`. Without boundary points
    /// the set is widened to cover every in-region sample instead.
    fn place_offsets(&self, cands: &mut [CbfCandidate], view: &SampleView) {
        let hcf = self.hcf();
        let t = if self.boundary.is_empty() {
            let values = view.values(cands, hcf);
            let k = cands.len();
            values
                .chunks(k)
                .zip(&view.in_region)
                .filter(|(_, inr)| **inr)
                .map(|(row, _)| row.iter().copied().fold(f64::INFINITY, f64::min))
                .fold(f64::INFINITY, f64::min)
        } else {
            self.cfg.margin
                + self
                    .boundary
                    .iter()
                    .map(|x| min_h(cands, hcf, x))
                    .fold(f64::NEG_INFINITY, f64::max)
        };
        if t.is_finite() {
            for c in cands.iter_mut() {
                c.offset -= t;
            }
        }
    }

    /// Rounding can leave a boundary point a hair above `−margin`.
    fn enforce_margin(&self, cands: &mut [CbfCandidate]) {
        if self.boundary.is_empty() {
            return;
        }
        for _ in 0..8 {
            let worst = self
                .boundary
                .iter()
                .map(|x| min_h(cands, self.hcf(), x))
                .fold(f64::NEG_INFINITY, f64::max);
            let excess = worst + self.cfg.margin;
            if excess <= 0.0 {
                return;
            }
            let bump = excess + 4.0 * f64::EPSILON * (1.0 + worst.abs());
            for c in cands.iter_mut() {
                c.offset -= bump;
            }
        }
    }

    fn constraint_checks(&self, cands: &[CbfCandidate], view: &SampleView, values: &[f64]) -> usize {
        match self.cfg.mode {
            FitMode::Uniform => 0,
            FitMode::NonUniform => {
                let reduced = cands[0].reduced_scale();
                self.boundary_terms
                    .iter()
                    .filter(|t| !t.satisfiable(&reduced, self.input_box))
                    .count()
            }
            FitMode::Multi(_) => (0..cands.len())
                .map(|j| {
                    let reduced = cands[j].reduced_scale();
                    view.probe_points(values, cands, self.hcf(), j, self.cfg.probes)
                        .iter()
                        .filter(|nu| !reduced_input_condition(self.sys, self.input_box, nu, &reduced))
                        .count()
                })
                .sum(),
        }
    }

    /// Lowers the offsets until the set no longer reaches `z < 0` inside the
    /// sample box (exact for affine constraint pieces, a no-op otherwise).
    fn seal_leaks(&self, cands: &mut [CbfCandidate]) {
        let tol = 1e-9 * self.z_scale;
        let leaks = |shift: f64| -> bool {
            let moved: Vec<CbfCandidate> = cands
                .iter()
                .map(|c| CbfCandidate {
                    offset: c.offset - shift,
                    ..c.clone()
                })
                .collect();
            matches!(hard_constraint_minimum(&moved, self.hcf(), self.bounds), Ok(Some((_, z))) if z < -tol)
        };
        if !leaks(0.0) {
            return;
        }
        // Bracket then bisect the smallest common shift that closes the leak.
        let mut lo = 0.0;
        let mut hi = 1e-6 * self.z_scale;
        while leaks(hi) {
            lo = hi;
            hi *= 4.0;
            if hi > 1e3 * self.z_scale {
                return;
            }
        }
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            if leaks(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for c in cands.iter_mut() {
            c.offset -= hi + self.cfg.margin;
        }
    }

    fn score(&self, cands: Vec<CbfCandidate>, view: &SampleView) -> Scored {
        self.score_with(cands, view, false)
    }

    fn score_with(&self, mut cands: Vec<CbfCandidate>, view: &SampleView, seal: bool) -> Scored {
        self.place_offsets(&mut cands, view);
        if seal {
            self.seal_leaks(&mut cands);
        }
        let values = view.values(&cands, self.hcf());
        let k = cands.len();
        let mut in_set = 0usize;
        let mut bad = 0usize;
        let mut counted = 0usize;
        let mut integral = 0.0;
        for (i, row) in values.chunks(k).enumerate() {
            let m = row.iter().copied().fold(f64::INFINITY, f64::min);
            if m >= 0.0 {
                in_set += 1;
                if !view.feasible[i] {
                    bad += 1;
                }
                if view.in_region[i] {
                    counted += 1;
                    integral += m;
                }
            }
        }
        let unit = if view.n_in_region == 0 {
            0.0
        } else {
            view.region_volume / view.n_in_region as f64
        };
        let objective = match self.cfg.objective {
            ObjectiveKind::SampleCount => counted as f64 * unit,
            ObjectiveKind::IntegralSurrogate => integral * unit,
        };
        let containment = if in_set == 0 {
            1.0
        } else {
            1.0 - bad as f64 / in_set as f64
        };
        let failures = self.constraint_checks(&cands, view, &values);
        let w = self.cfg.search.containment_weight;
        let bad_area = bad as f64 * view.box_volume / view.len().max(1) as f64;
        let failure_share = failures as f64 / (self.cfg.probes.max(1) * k) as f64;
        let score = objective - w * bad_area - w * failure_share.min(1.0) * view.region_volume;
        Scored {
            cands,
            objective,
            containment,
            constraint_failures: failures,
            score,
        }
    }

    fn random_start(&self, restart: usize) -> Vec<f64> {
        let mut rng = batch_rng(self.cfg.search.seed, 1 + restart as u64);
        let (lo, hi) = (0.25f64.ln(), 4.0f64.ln());
        let uniform_d = rng.gen_range(lo..=hi).exp();
        let uniform = self.cfg.mode == FitMode::Uniform;
        let cands: Vec<CbfCandidate> = (0..self.cfg.mode.candidate_count())
            .map(|_| {
                let scale: Vec<f64> = (0..self.n)
                    .map(|_| {
                        if uniform {
                            uniform_d
                        } else {
                            rng.gen_range(lo..=hi).exp()
                        }
                    })
                    .collect();
                let shift = (0..self.n)
                    .map(|i| {
                        let w = self.bounds.width(i).max(1e-9);
                        scale[i] * rng.gen_range(-w..=w)
                    })
                    .collect();
                CbfCandidate {
                    scale,
                    shift,
                    offset: rng.gen_range(-0.5..=0.5) * self.z_scale,
                }
            })
            .collect();
        self.encode(&cands)
    }

    fn steps(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let width = |i: usize| self.bounds.width(i).max(1e-9);
        match self.cfg.mode {
            FitMode::Uniform => {
                let d = theta[0].exp();
                let mut s = vec![0.5];
                s.extend((0..n).map(|i| 0.25 * width(i) * d));
                s
            }
            FitMode::NonUniform => {
                let mut s: Vec<f64> = (0..n).map(|i| 0.5 * theta[i].abs() + 0.05).collect();
                s.extend((0..n).map(|i| 0.25 * width(i) * theta[i].abs().max(0.1)));
                s
            }
            FitMode::Multi(count) => (0..count)
                .flat_map(|j| {
                    let p = &theta[j * (2 * n + 1)..(j + 1) * (2 * n + 1)];
                    let mut s: Vec<f64> = (0..n).map(|i| 0.5 * p[i].abs() + 0.05).collect();
                    s.extend((0..n).map(|i| 0.25 * width(i) * p[i].abs().max(0.1)));
                    s.push(0.25 * self.z_scale);
                    s
                })
                .collect(),
        }
    }

    /// Structured seeds: the identity, and for multi mode the identity paired
    /// with single-axis scalings.
    fn structured_starts(&self) -> Vec<Vec<CbfCandidate>> {
        let n = self.n;
        let id = CbfCandidate::identity(n);
        match self.cfg.mode {
            FitMode::Uniform | FitMode::NonUniform => vec![vec![id]],
            FitMode::Multi(s) => (0..n)
                .map(|axis| {
                    let mut single = CbfCandidate::identity(n);
                    for (i, d) in single.scale.iter_mut().enumerate() {
                        if i != axis {
                            *d = 0.0;
                        }
                    }
                    let mut set = vec![id.clone(); s];
                    set[1] = single;
                    set
                })
                .collect(),
        }
    }
}

/// Points of the sampling-box faces where the hard constraint is already
/// non-positive. No sample can witness infeasibility beyond such a face, so
/// without these the fitted set may leak out of the constraint set there.
/// Projected from feasible samples within `epsilon` (normalized) of a face
/// and thinned to one point per `epsilon` cell.
fn face_anchors(s: &SampleSet, epsilon: f64, hcf: &HardConstraint) -> Vec<Vec<f64>> {
    let bounds = &s.bounds;
    let n = bounds.dim();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in s.records.iter().filter(|r| r.is_feasible()) {
        let y = bounds.normalize(&r.state);
        for axis in 0..n {
            if bounds.width(axis) == 0.0 {
                continue;
            }
            for (side, target) in [(0u8, 0.0), (1u8, 1.0)] {
                if (y[axis] - target).abs() > epsilon {
                    continue;
                }
                let mut x = r.state.clone();
                x[axis] = if side == 0 {
                    bounds.lower()[axis]
                } else {
                    bounds.upper()[axis]
                };
                if hcf.value(&x) > 0.0 {
                    continue;
                }
                let cell: Vec<i64> = (0..n)
                    .map(|i| if i == axis { -1 } else { (y[i] / epsilon).floor() as i64 })
                    .collect();
                if seen.insert((axis, side, cell)) {
                    out.push(x);
                }
            }
        }
    }
    out
}

fn fit_with(
    s: &SampleSet,
    b: &BoundarySet,
    sys: &SystemModel,
    input_box: &BoxSet,
    cfg: &FitConfig,
    warm: &[Vec<CbfCandidate>],
) -> Result<FitResult> {
    cfg.validate()?;
    let n = sys.state_dim();
    if s.bounds.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "sample bounds",
            expected: n,
            got: s.bounds.dim(),
        });
    }
    if s.is_empty() {
        return Err(Error::InvalidParameter("sample set is empty".into()));
    }
    let region = cfg.region(s)?;
    let search_view = SampleView::new(
        s,
        Some(cfg.search.subsample),
        region,
        matches!(cfg.mode, FitMode::Multi(_)),
    );
    let z_values: Vec<f64> = search_view.states.iter().map(|x| sys.hcf().value(x)).collect();
    let z_lo = z_values.iter().copied().fold(f64::INFINITY, f64::min);
    let z_hi = z_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z_scale = (0.5 * (z_hi - z_lo)).max(1e-6);
    let boundary_terms = match cfg.mode {
        FitMode::NonUniform => b.points.iter().map(|x| ReducedTerms::at(sys, x)).collect(),
        _ => Vec::new(),
    };
    let mut anchors = b.points.clone();
    anchors.extend(face_anchors(s, b.epsilon, sys.hcf()));
    let problem = Problem {
        sys,
        input_box,
        cfg,
        n,
        bounds: &s.bounds,
        boundary: &anchors,
        boundary_terms,
        z_scale,
    };
    let mut warnings = Vec::new();
    if b.is_empty() {
        warnings.push("boundary set is empty; the set is sized to cover every in-region sample".to_string());
    }

    let mut starts: Vec<Vec<f64>> = warm.iter().map(|w| problem.encode(w)).collect();
    starts.extend(problem.structured_starts().iter().map(|c| problem.encode(c)));
    let restarts = cfg.search.restarts.max(starts.len());
    let dim = problem.param_len();
    let budget = cfg.search.evals_per_param * dim;
    let searched: Vec<Vec<f64>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let x0 = starts.get(r).cloned().unwrap_or_else(|| problem.random_start(r));
            let f = |t: &[f64]| -problem.score(problem.decode(t), &search_view).score;
            let step = problem.steps(&x0);
            let (x, _) = nelder_mead(&f, &x0, &step, budget);
            let radius: Vec<f64> = problem.steps(&x).iter().map(|v| 0.25 * v).collect();
            golden_polish(&f, x, &radius, cfg.search.polish_sweeps).0
        })
        .collect();

    let full_view = SampleView::new(s, None, region, matches!(cfg.mode, FitMode::Multi(_)));
    let mut finalists: Vec<Vec<CbfCandidate>> = searched.iter().map(|t| problem.decode(t)).collect();
    finalists.extend(warm.iter().cloned());
    let scored: Vec<Scored> = finalists
        .into_iter()
        .map(|c| problem.score_with(c, &full_view, true))
        .collect();
    let admissible = |sc: &Scored| sc.containment >= 1.0 - cfg.containment_tol && sc.constraint_failures == 0;
    let pick = |filter: &dyn Fn(&Scored) -> bool, key: &dyn Fn(&Scored) -> f64| {
        scored
            .iter()
            .enumerate()
            .filter(|(_, sc)| filter(sc))
            .fold(None::<(usize, f64)>, |best, (i, sc)| match best {
                Some((_, v)) if key(sc) <= v => best,
                _ => Some((i, key(sc))),
            })
            .map(|(i, _)| i)
    };
    let (best, status) = match pick(&admissible, &|sc| sc.objective) {
        Some(i) => (i, FitStatus::Feasible),
        None => {
            warnings.push(format!(
                "no admissible candidate: containment below {} or input condition violated",
                1.0 - cfg.containment_tol
            ));
            (pick(&|_| true, &|sc| sc.score).unwrap_or(0), FitStatus::Infeasible)
        }
    };
    let mut cands = scored[best].cands.clone();
    problem.enforce_margin(&mut cands);

    let mut redundancy = Vec::new();
    if cands.len() > 1 {
        let probe_states: Vec<Vec<f64>> = s.records.iter().take(64.max(n + 2)).map(|r| r.state.clone()).collect();
        if probe_states.len() >= n + 2 {
            for i in 0..cands.len() {
                for j in i + 1..cands.len() {
                    redundancy.push(RedundancyPair {
                        first: i,
                        second: j,
                        check: check_redundancy(&cands[i], &cands[j], sys.hcf(), &probe_states)?,
                    });
                }
            }
            let (kept, removed) = collapse_redundant(&cands, sys.hcf(), &probe_states)?;
            if !removed.is_empty() {
                warnings.push(format!(
                    "redundant candidates {removed:?} collapsed; {} of {} kept",
                    kept.len(),
                    cands.len()
                ));
                cands = kept;
            }
        }
    }
    let objective_value = estimate_set_size(&cands, s, sys.hcf(), cfg)?;
    let verification = verify_candidate(&cands, s, sys, input_box, b, cfg.probes)?;
    if verification.containment_fraction < 1.0 - cfg.containment_tol {
        warnings.push(format!(
            "containment fraction {:.6} below tolerance",
            verification.containment_fraction
        ));
    }
    if verification.empty_set {
        warnings.push("fitted set contains no samples".into());
    }
    let status = if verification.containment_fraction < 1.0 - cfg.containment_tol {
        FitStatus::Infeasible
    } else {
        status
    };
    Ok(FitResult {
        mode: cfg.mode,
        status,
        candidates: cands,
        objective_value,
        verification,
        redundancy,
        warnings,
        config_echo: cfg.clone(),
    })
}

fn expect_mode(cfg: &FitConfig, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} called with mode {:?}",
            cfg.mode
        )))
    }
}

/// One candidate with `D = d·I`, `d > 0`.
pub fn fit_uniform(
    s: &SampleSet,
    b: &BoundarySet,
    sys: &SystemModel,
    input_box: &BoxSet,
    cfg: &FitConfig,
) -> Result<FitResult> {
    expect_mode(cfg, cfg.mode == FitMode::Uniform, "fit_uniform")?;
    fit_with(s, b, sys, input_box, cfg, &[])
}

/// One candidate with free `dᵢ ≥ 0`, subject to the reduced-scale input
/// condition on every boundary point. Seeded from `warm` (a uniform fit),
/// which is computed here when not supplied.
pub fn fit_nonuniform(
    s: &SampleSet,
    b: &BoundarySet,
    sys: &SystemModel,
    input_box: &BoxSet,
    cfg: &FitConfig,
    warm: Option<&FitResult>,
) -> Result<FitResult> {
    expect_mode(cfg, cfg.mode == FitMode::NonUniform, "fit_nonuniform")?;
    let owned;
    let warm = match warm {
        Some(w) => w,
        None => {
            owned = fit_uniform(s, b, sys, input_box, &cfg.with_mode(FitMode::Uniform))?;
            &owned
        }
    };
    let seeds: Vec<Vec<CbfCandidate>> = warm.candidates.iter().map(|c| vec![c.clone()]).collect();
    fit_with(s, b, sys, input_box, cfg, &seeds)
}

/// `s` candidates whose intersection is maximized. Seeded from `warm` (a
/// non-uniform fit, duplicated), which is computed here when not supplied.
pub fn fit_multi(
    s: &SampleSet,
    b: &BoundarySet,
    sys: &SystemModel,
    input_box: &BoxSet,
    cfg: &FitConfig,
    warm: Option<&FitResult>,
) -> Result<FitResult> {
    let count = match cfg.mode {
        FitMode::Multi(c) => c,
        _ => return expect_mode(cfg, false, "fit_multi").map(|_| unreachable!()),
    };
    let owned;
    let warm = match warm {
        Some(w) => w,
        None => {
            owned = fit_nonuniform(s, b, sys, input_box, &cfg.with_mode(FitMode::NonUniform), None)?;
            &owned
        }
    };
    let mut seed = warm.candidates.clone();
    while seed.len() < count {
        seed.push(seed[seed.len() - 1].clone());
    }
    seed.truncate(count);
    fit_with(s, b, sys, input_box, cfg, &[seed])
}
