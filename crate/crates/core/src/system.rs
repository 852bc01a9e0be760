//! Control-affine plants, hard constraint functions and barrier candidates.
//!
//! A plant is `ẋ = f(x) + g(x)·u`. A hard constraint function (HCF) `z` is
//! a state-only function whose superlevel set `{z ≥ 0}` must be respected.
//! Nonsmooth constraints are expressed as the pointwise minimum of smooth
//! pieces, which keeps gradients exact on every branch and lets the safety
//! filter reason about upcoming branch switches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Axis-aligned box `[lower, upper]`, used both for input sets and sampling regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for BoxSet {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoxSet::new(raw.lower, raw.upper)
    }
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!("box axis {i} has a non-finite bound")));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "box axis {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn is_degenerate(&self, axis: usize) -> bool {
        self.width(axis) == 0.0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    /// Product of the widths of the non-degenerate axes.
    pub fn nondegenerate_volume(&self) -> f64 {
        (0..self.dim())
            .filter(|&i| !self.is_degenerate(i))
            .map(|i| self.width(i))
            .product()
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    /// Maps `x` into the unit box; degenerate axes map to 0.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                if self.is_degenerate(i) {
                    0.0
                } else {
                    (x[i] - self.lower[i]) / self.width(i)
                }
            })
            .collect()
    }
}

/// One smooth branch of a hard constraint.
#[derive(Clone)]
pub struct SmoothPiece {
    value: ScalarFn,
    gradient: VectorFn,
    affine: Option<(Vec<f64>, f64)>,
}

impl SmoothPiece {
    pub fn new(value: ScalarFn, gradient: VectorFn) -> Self {
        Self {
            value,
            gradient,
            affine: None,
        }
    }

    /// `a·x + b`, with the coefficients kept for exact containment checks.
    pub fn affine(a: Vec<f64>, b: f64) -> Self {
        let row = a.clone();
        let grad = a.clone();
        Self {
            value: Arc::new(move |x: &[f64]| dot(&row, x) + b),
            gradient: Arc::new(move |_: &[f64]| grad.clone()),
            affine: Some((a, b)),
        }
    }
}

/// Hard constraint function `z`, the pointwise minimum of its smooth pieces.
///
/// The gradient is that of the lowest-index piece attaining the minimum, so
/// ties on a switching surface resolve to the earlier piece.
#[derive(Clone)]
pub struct HardConstraint {
    dim: usize,
    pieces: Vec<SmoothPiece>,
    affine: Option<(Vec<f64>, f64)>,
}

impl fmt::Debug for HardConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HardConstraint")
            .field("dim", &self.dim)
            .field("pieces", &self.pieces.len())
            .field("affine", &self.affine)
            .finish()
    }
}

impl HardConstraint {
    pub fn smooth(dim: usize, value: ScalarFn, gradient: VectorFn) -> Self {
        Self {
            dim,
            pieces: vec![SmoothPiece::new(value, gradient)],
            affine: None,
        }
    }

    pub fn min_of(dim: usize, pieces: Vec<SmoothPiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidParameter(
                "a hard constraint needs at least one piece".into(),
            ));
        }
        Ok(Self {
            dim,
            pieces,
            affine: None,
        })
    }

    /// `z(x) = a·x + b`.
    pub fn affine(a: Vec<f64>, b: f64) -> Self {
        Self {
            dim: a.len(),
            pieces: vec![SmoothPiece::affine(a.clone(), b)],
            affine: Some((a, b)),
        }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self::affine(vec![0.0; dim], value)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    /// `(a, b)` when the constraint is affine.
    pub fn as_affine(&self) -> Option<(&[f64], f64)> {
        self.affine.as_ref().map(|(a, b)| (a.as_slice(), *b))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut best = (self.pieces[0].value)(x);
        for piece in &self.pieces[1..] {
            let v = (piece.value)(x);
            if v < best {
                best = v;
            }
        }
        best
    }

    pub fn active_piece(&self, x: &[f64]) -> usize {
        let mut best = (self.pieces[0].value)(x);
        let mut idx = 0;
        for (i, piece) in self.pieces.iter().enumerate().skip(1) {
            let v = (piece.value)(x);
            if v < best {
                best = v;
                idx = i;
            }
        }
        idx
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let idx = self.active_piece(x);
        (self.pieces[idx].gradient)(x)
    }

    /// `(a, b)` when the given piece is affine.
    pub fn piece_affine(&self, piece: usize) -> Option<(&[f64], f64)> {
        self.pieces[piece].affine.as_ref().map(|(a, b)| (a.as_slice(), *b))
    }

    pub fn piece_value(&self, piece: usize, x: &[f64]) -> f64 {
        (self.pieces[piece].value)(x)
    }

    pub fn piece_gradient(&self, piece: usize, x: &[f64]) -> Vec<f64> {
        (self.pieces[piece].gradient)(x)
    }
}

/// Control-affine plant together with its hard constraint.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_dim: usize,
    input_dim: usize,
    drift: VectorFn,
    actuation: MatrixFn,
    hcf: HardConstraint,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("hcf", &self.hcf)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_dim: usize,
        drift: VectorFn,
        actuation: MatrixFn,
        hcf: HardConstraint,
    ) -> Result<Self> {
        check_dim("hcf state dimension", state_dim, hcf.dim())?;
        Ok(Self {
            name: name.into(),
            state_dim,
            input_dim,
            drift,
            actuation,
            hcf,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hcf(&self) -> &HardConstraint {
        &self.hcf
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    pub fn actuation(&self, x: &[f64]) -> DMatrix<f64> {
        let g = (self.actuation)(x);
        debug_assert_eq!(g.shape(), (self.state_dim, self.input_dim));
        g
    }

    /// `f(x) + g(x)·u`.
    pub fn velocity(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = self.drift(x);
        let g = self.actuation(x);
        for (i, d) in dx.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *d += g[(i, j)] * uj;
            }
        }
        dx
    }

    /// Lie derivatives `(grad·f, grad·g)` of a function with gradient `grad` at `x`.
    pub fn lie_derivatives(&self, grad: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let lf = dot(grad, &self.drift(x));
        let g = self.actuation(x);
        let lg = (0..self.input_dim)
            .map(|j| (0..self.state_dim).map(|i| grad[i] * g[(i, j)]).sum())
            .collect();
        (lf, lg)
    }
}

/// Barrier candidate `h(x) = z(D·x + c) + ε` with `D = diag(scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbfCandidate {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub offset: f64,
}

impl CbfCandidate {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            offset: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_dim("candidate scale", dim, self.scale.len())?;
        check_dim("candidate shift", dim, self.shift.len())?;
        if self.scale.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "candidate scale entries must be finite and non-negative".into(),
            ));
        }
        if !self.offset.is_finite() || self.shift.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("candidate shift/offset must be finite".into()));
        }
        Ok(())
    }

    /// `D·x + c`.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.scale.iter().zip(&self.shift))
            .map(|(xi, (d, c))| d * xi + c)
            .collect()
    }

    pub fn eval(&self, hcf: &HardConstraint, x: &[f64]) -> f64 {
        hcf.value(&self.transform(x)) + self.offset
    }

    /// [`CbfCandidate::eval`] reusing `scratch` for `D·x + c`.
    pub fn eval_with(&self, hcf: &HardConstraint, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.extend(
            x.iter()
                .zip(self.scale.iter().zip(&self.shift))
                .map(|(xi, (d, c))| d * xi + c),
        );
        hcf.value(scratch) + self.offset
    }

    /// Exact chain rule: `∂z/∂x(D·x + c)·D`.
    pub fn gradient(&self, hcf: &HardConstraint, x: &[f64]) -> Vec<f64> {
        let y = self.transform(x);
        let mut grad = hcf.gradient(&y);
        for (gi, d) in grad.iter_mut().zip(&self.scale) {
            *gi *= d;
        }
        grad
    }

    pub fn piece_value(&self, hcf: &HardConstraint, piece: usize, x: &[f64]) -> f64 {
        hcf.piece_value(piece, &self.transform(x)) + self.offset
    }

    pub fn piece_gradient(&self, hcf: &HardConstraint, piece: usize, x: &[f64]) -> Vec<f64> {
        let mut grad = hcf.piece_gradient(piece, &self.transform(x));
        for (gi, d) in grad.iter_mut().zip(&self.scale) {
            *gi *= d;
        }
        grad
    }

    /// `diag(0, d₂ − d₁, …, dₙ − d₁)`, returned as its diagonal.
    pub fn reduced_scale(&self) -> Vec<f64> {
        let d1 = self.scale[0];
        self.scale
            .iter()
            .enumerate()
            .map(|(i, d)| if i == 0 { 0.0 } else { d - d1 })
            .collect()
    }
}

pub fn eval_z(hcf: &HardConstraint, x: &[f64]) -> f64 {
    hcf.value(x)
}

/// `ż(x, u) = ∂z/∂x(x)·(f(x) + g(x)·u)`.
pub fn eval_zdot(sys: &SystemModel, x: &[f64], u: &[f64]) -> f64 {
    let grad = sys.hcf().gradient(x);
    dot(&grad, &sys.velocity(x, u))
}

pub fn eval_h(cand: &CbfCandidate, hcf: &HardConstraint, x: &[f64]) -> f64 {
    cand.eval(hcf, x)
}

pub fn eval_h_grad(cand: &CbfCandidate, hcf: &HardConstraint, x: &[f64]) -> Vec<f64> {
    cand.gradient(hcf, x)
}

/// Double integrator `ẍ = u` with the damped position constraint
/// `z(x) = γ₁ − x − 𝟙{ẋ>0}·γ₂·ẋ`.
///
/// The indicator is off at `ẋ = 0`, so the gradient there is `(−1, 0)`.
pub fn make_double_integrator(gamma1: f64, gamma2: f64) -> Result<SystemModel> {
    if !(gamma2 >= 0.0) || !gamma2.is_finite() || !gamma1.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "double integrator needs finite gamma1 and gamma2 >= 0 (got {gamma1}, {gamma2})"
        )));
    }
    let hcf = if gamma2 == 0.0 {
        HardConstraint::affine(vec![-1.0, 0.0], gamma1)
    } else {
        let coasting = SmoothPiece::affine(vec![-1.0, 0.0], gamma1);
        let damped = SmoothPiece::affine(vec![-1.0, -gamma2], gamma1);
        HardConstraint::min_of(2, vec![coasting, damped])?
    };
    SystemModel::new(
        "double_integrator",
        2,
        1,
        Arc::new(|x: &[f64]| vec![x[1], 0.0]),
        Arc::new(|_: &[f64]| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
        hcf,
    )
}

/// A plant built from configuration: dynamics, constraint and input set.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: SystemModel,
    pub input_box: BoxSet,
}

pub type PlantConstructor = fn(&BTreeMap<String, f64>) -> Result<Plant>;

/// Name-keyed registry of plant constructors.
#[derive(Clone)]
pub struct SystemRegistry {
    constructors: HashMap<String, PlantConstructor>,
}

impl Default for SystemRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self {
            constructors: HashMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("double_integrator", build_double_integrator);
        reg
    }

    pub fn register(&mut self, name: &str, ctor: PlantConstructor) {
        self.constructors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.constructors.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    pub fn build(&self, name: &str, params: &BTreeMap<String, f64>) -> Result<Plant> {
        let ctor = self
            .constructors
            .get(name)
            .ok_or_else(|| Error::UnknownSystem(name.to_string()))?;
        ctor(params)
    }
}

fn build_double_integrator(params: &BTreeMap<String, f64>) -> Result<Plant> {
    const KEYS: [&str; 4] = ["gamma1", "gamma2", "u_min", "u_max"];
    if let Some(key) = params.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::InvalidParameter(format!(
            "unknown double_integrator parameter `{key}`"
        )));
    }
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let model = make_double_integrator(get("gamma1", 0.0), get("gamma2", 0.1))?;
    let input_box = BoxSet::new(vec![get("u_min", -300.0)], vec![get("u_max", 300.0)])?;
    Ok(Plant { model, input_box })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn di() -> SystemModel {
        make_double_integrator(0.0, 0.1).unwrap()
    }

    #[test]
    fn z_values_on_the_damped_constraint() {
        let sys = di();
        assert_eq!(eval_z(sys.hcf(), &[-5.0, 0.0]), 5.0);
        assert_relative_eq!(eval_z(sys.hcf(), &[-5.0, 20.0]), 3.0, epsilon = 1e-12);
        assert_relative_eq!(eval_z(sys.hcf(), &[-1.0, 20.0]), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn zdot_values() {
        let sys = di();
        assert_relative_eq!(eval_zdot(&sys, &[-5.0, 20.0], &[-200.0]), 0.0, epsilon = 1e-12);
        for u in [-300.0, 0.0, 123.0] {
            assert_eq!(eval_zdot(&sys, &[-5.0, -3.0], &[u]), 3.0);
        }
        assert_eq!(eval_zdot(&sys, &[-5.0, 0.0], &[0.0]), 0.0);
    }

    #[test]
    fn gradient_convention_at_zero_velocity() {
        let sys = di();
        assert_eq!(sys.hcf().gradient(&[-2.0, 0.0]), vec![-1.0, 0.0]);
        assert_eq!(sys.hcf().gradient(&[-2.0, 1e-9]), vec![-1.0, -0.1]);
    }

    #[test]
    fn undamped_constraint_is_affine() {
        let sys = make_double_integrator(0.0, 0.0).unwrap();
        assert!(sys.hcf().as_affine().is_some());
        assert_eq!(sys.hcf().gradient(&[-3.0, 7.0]), vec![-1.0, 0.0]);
        assert_eq!(eval_z(sys.hcf(), &[-3.0, 7.0]), 3.0);
    }

    #[test]
    fn rejects_negative_damping() {
        assert!(make_double_integrator(0.0, -0.1).is_err());
    }

    #[test]
    fn double_integrator_dynamics() {
        let sys = di();
        assert_eq!(sys.drift(&[-5.0, 20.0]), vec![20.0, 0.0]);
        let g = sys.actuation(&[-5.0, 20.0]);
        assert_eq!((g[(0, 0)], g[(1, 0)]), (0.0, 1.0));
    }

    #[test]
    fn hand_built_candidates_evaluate() {
        let sys = di();
        let cand_b = CbfCandidate {
            scale: vec![1.0, 10.0 / 3.0],
            shift: vec![0.0, 0.0],
            offset: 0.0,
        };
        assert_relative_eq!(eval_h(&cand_b, sys.hcf(), &[-3.0, 3.0]), 2.0, epsilon = 1e-12);
        let grad = eval_h_grad(&cand_b, sys.hcf(), &[-3.0, 3.0]);
        assert_relative_eq!(grad[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(grad[1], -1.0 / 3.0, epsilon = 1e-12);

        let vel_cap = HardConstraint::affine(vec![0.0, -1.0], 0.0);
        let cand = CbfCandidate {
            offset: 30.0,
            ..CbfCandidate::identity(2)
        };
        assert_eq!(eval_h(&cand, &vel_cap, &[0.0, 30.0]), 0.0);
    }

    #[test]
    fn identity_candidate_reproduces_z() {
        let sys = di();
        let id = CbfCandidate::identity(2);
        for x in [[-4.0, 12.0], [-0.5, -3.0], [-9.0, 0.0]] {
            assert_eq!(eval_h(&id, sys.hcf(), &x), eval_z(sys.hcf(), &x));
            assert_eq!(eval_h_grad(&id, sys.hcf(), &x), sys.hcf().gradient(&x));
        }
    }

    #[test]
    fn affine_gradient_is_a_times_d() {
        let hcf = HardConstraint::affine(vec![2.0, -3.0], 1.5);
        let cand = CbfCandidate {
            scale: vec![0.5, 4.0],
            shift: vec![1.0, -2.0],
            offset: 0.25,
        };
        assert_eq!(eval_h_grad(&cand, &hcf, &[7.0, 9.0]), vec![1.0, -12.0]);
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![0.0, 0.0], vec![1.0]).is_err());
        let b = BoxSet::new(vec![-10.0, -40.0], vec![0.0, 40.0]).unwrap();
        assert_eq!(b.volume(), 800.0);
        assert!(b.contains(&[-5.0, 39.0]));
        assert!(!b.contains(&[0.5, 0.0]));
        assert_eq!(b.normalize(&[-5.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn registry_builds_double_integrator() {
        let reg = SystemRegistry::with_builtins();
        let mut params = BTreeMap::new();
        params.insert("gamma2".to_string(), 0.1);
        params.insert("u_max".to_string(), 250.0);
        let plant = reg.build("double_integrator", &params).unwrap();
        assert_eq!(plant.input_box.upper(), &[250.0]);
        assert_eq!(plant.input_box.lower(), &[-300.0]);

        params.insert("gamma_two".to_string(), 0.1);
        assert!(reg.build("double_integrator", &params).is_err());
        assert!(matches!(
            reg.build("pendulum", &BTreeMap::new()),
            Err(Error::UnknownSystem(_))
        ));
    }

    #[test]
    fn reduced_scale_drops_first_axis() {
        let cand = CbfCandidate {
            scale: vec![2.0, 5.0, 1.0],
            shift: vec![0.0; 3],
            offset: 0.0,
        };
        assert_eq!(cand.reduced_scale(), vec![0.0, 3.0, -1.0]);
    }
}
