//! Uniform state sampling, per-sample feasibility classification and the
//! Jaccard stopping rule.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::qp::min_zdot_residual;
use crate::system::{dot, BoxSet, SystemModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleClass {
    #[serde(rename = "outside")]
    OutsideZ,
    #[serde(rename = "infeasible")]
    InfeasibleZ,
    #[serde(rename = "feasible")]
    FeasibleZ0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "x")]
    pub state: Vec<f64>,
    pub class: SampleClass,
    pub residual: f64,
}

impl SampleRecord {
    pub fn is_feasible(&self) -> bool {
        self.class == SampleClass::FeasibleZ0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: usize,
    #[serde(rename = "J")]
    pub j: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JaccardTracker {
    pub n_total: usize,
    pub n_feasible: usize,
    pub history: Vec<Checkpoint>,
}

impl JaccardTracker {
    pub fn add(&mut self, records: &[SampleRecord]) {
        self.n_total += records.len();
        self.n_feasible += records.iter().filter(|r| r.is_feasible()).count();
    }

    /// `card(Ẑ₀) / card(S)`; zero for an empty set.
    pub fn jaccard(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_feasible as f64 / self.n_total as f64
        }
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let cp = Checkpoint {
            n: self.n_total,
            j: self.jaccard(),
        };
        self.history.push(cp);
        cp
    }

    /// `|J_k − J_{k−1}|` for the latest checkpoint. The first checkpoint is
    /// measured against the empty set (`J = 0`).
    pub fn last_delta(&self) -> Option<f64> {
        let last = self.history.last()?;
        let prev = self.history.len().checked_sub(2).map_or(0.0, |i| self.history[i].j);
        Some((last.j - prev).abs())
    }

    /// `(n, J, ΔJ)` rows, the first row's ΔJ taken against `J = 0`.
    pub fn table(&self) -> Vec<(usize, f64, f64)> {
        let mut prev = 0.0;
        self.history
            .iter()
            .map(|cp| {
                let row = (cp.n, cp.j, (cp.j - prev).abs());
                prev = cp.j;
                row
            })
            .collect()
    }

    /// Checks `|ΔJ| ≤ ΔN/(N + ΔN)` between consecutive checkpoints.
    pub fn increment_bound_holds(&self) -> bool {
        self.history.windows(2).all(|w| {
            let dn = (w[1].n - w[0].n) as f64;
            let bound = dn / (w[0].n as f64 + dn);
            (w[1].j - w[0].j).abs() <= bound + 1e-12
        })
    }
}

/// Sampling-stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub bounds: BoxSet,
    pub n_min: usize,
    pub delta: f64,
    pub growth: f64,
    /// Size of the first checkpoint.
    pub n_first: usize,
    /// Hard cap; exceeding it ends the run unconverged.
    pub n_max: usize,
    pub seed: u64,
    /// Relative zero tolerance for the feasibility residual.
    pub zero_tol: f64,
}

impl SamplingConfig {
    pub fn new(bounds: BoxSet) -> Self {
        Self {
            bounds,
            n_min: 1000,
            delta: 1e-3,
            growth: 3.0,
            n_first: 243,
            n_max: 1_594_323,
            seed: 0,
            zero_tol: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.n_min < 1 {
            return bad("n_min must be at least 1");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must lie in (0, 1]");
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return bad("growth must be > 1");
        }
        if self.n_first < 1 || self.n_max < self.n_first {
            return bad("need 1 <= n_first <= n_max");
        }
        if !(self.zero_tol >= 0.0) {
            return bad("zero_tol must be non-negative");
        }
        Ok(())
    }

    /// Checkpoint sizes `n_first, ⌈n_first·g⌉, …` up to `n_max`.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out = vec![self.n_first];
        loop {
            let last = *out.last().unwrap();
            let next = ((last as f64 * self.growth).round() as usize).max(last + 1);
            if next > self.n_max {
                break;
            }
            out.push(next);
        }
        out
    }
}

/// States admitted to the feasible class regardless of the residual.
pub enum ExtraFeasible {
    /// Input cannot influence `ż` but `ż > 0` anyway.
    DriftPositive,
    Always,
    Never,
    Custom(Box<dyn Fn(&[f64]) -> bool + Send + Sync>),
}

impl ExtraFeasible {
    pub fn admits(&self, sys: &SystemModel, x: &[f64]) -> bool {
        match self {
            ExtraFeasible::DriftPositive => {
                let grad = sys.hcf().gradient(x);
                let (lf, lg) = sys.lie_derivatives(&grad, x);
                lg.iter().all(|g| *g == 0.0) && lf > 0.0
            }
            ExtraFeasible::Always => true,
            ExtraFeasible::Never => false,
            ExtraFeasible::Custom(f) => f(x),
        }
    }
}

impl std::fmt::Debug for ExtraFeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ExtraFeasible::DriftPositive => "DriftPositive",
            ExtraFeasible::Always => "Always",
            ExtraFeasible::Never => "Never",
            ExtraFeasible::Custom(_) => "Custom",
        };
        f.write_str(name)
    }
}

/// Labeled samples with their convergence trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub system: String,
    pub records: Vec<SampleRecord>,
    pub bounds: BoxSet,
    pub seed: u64,
    pub tracker: JaccardTracker,
    pub zero_tol: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleHeader {
    version: u32,
    system: String,
    bounds: BoxSet,
    seed: u64,
    zero_tol: f64,
    converged: bool,
    n_total: usize,
    n_feasible: usize,
    checkpoints: Vec<Checkpoint>,
    records_sha256: String,
}

/// `count` i.i.d. uniform states. Degenerate axes yield their constant.
pub fn draw_batch<R: Rng>(bounds: &BoxSet, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            bounds
                .lower()
                .iter()
                .zip(bounds.upper())
                .map(|(lo, hi)| if lo == hi { *lo } else { rng.gen_range(*lo..=*hi) })
                .collect()
        })
        .collect()
}

/// Random stream for the `batch`-th sampling batch under `seed`.
pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

pub fn classify(
    sys: &SystemModel,
    input_box: &BoxSet,
    x: &[f64],
    zero_tol: f64,
    extra: &ExtraFeasible,
) -> Result<SampleRecord> {
    check_dim("state", sys.state_dim(), x.len())?;
    let z = sys.hcf().value(x);
    if !z.is_finite() {
        return Err(Error::NonFinite("constraint value"));
    }
    if z < 0.0 {
        return Ok(SampleRecord {
            state: x.to_vec(),
            class: SampleClass::OutsideZ,
            residual: 0.0,
        });
    }
    let (_, residual) = min_zdot_residual(sys, x, input_box)?;
    let lf = dot(&sys.hcf().gradient(x), &sys.drift(x));
    let tol = zero_tol * (1.0 + lf * lf);
    let class = if residual <= tol || extra.admits(sys, x) {
        SampleClass::FeasibleZ0
    } else {
        SampleClass::InfeasibleZ
    };
    Ok(SampleRecord {
        state: x.to_vec(),
        class,
        residual,
    })
}

/// Grows the sample set checkpoint by checkpoint until `N ≥ n_min` and
/// `ΔJ ≤ δ`, or the cap is hit (`converged = false`).
pub fn run_sampling(
    sys: &SystemModel,
    input_box: &BoxSet,
    cfg: &SamplingConfig,
    extra: &ExtraFeasible,
) -> Result<SampleSet> {
    cfg.validate()?;
    check_dim("sampling bounds", sys.state_dim(), cfg.bounds.dim())?;
    let mut set = SampleSet {
        system: sys.name().to_string(),
        records: Vec::new(),
        bounds: cfg.bounds.clone(),
        seed: cfg.seed,
        tracker: JaccardTracker::default(),
        zero_tol: cfg.zero_tol,
        converged: false,
    };
    for (batch, target) in cfg.schedule().into_iter().enumerate() {
        let count = target - set.records.len();
        let mut rng = batch_rng(cfg.seed, batch as u64);
        let states = draw_batch(&cfg.bounds, count, &mut rng);
        let records = states
            .par_iter()
            .map(|x| classify(sys, input_box, x, cfg.zero_tol, extra))
            .collect::<Result<Vec<_>>>()?;
        set.tracker.add(&records);
        set.records.extend(records);
        let cp = set.tracker.checkpoint();
        let dj = set.tracker.last_delta().unwrap_or(f64::INFINITY);
        log::debug!("checkpoint n={} J={:.6} dJ={:.6}", cp.n, cp.j, dj);
        if cp.n >= cfg.n_min && dj <= cfg.delta {
            set.converged = true;
            break;
        }
    }
    if !set.converged {
        log::warn!(
            "sampling did not converge within n_max = {} (last J = {:.6})",
            cfg.n_max,
            set.tracker.jaccard()
        );
    }
    Ok(set)
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn jaccard(&self) -> f64 {
        self.tracker.jaccard()
    }

    pub fn feasible(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.is_feasible())
    }

    /// Concatenates two sets drawn under the same configuration.
    pub fn merge(&self, other: &SampleSet) -> Result<SampleSet> {
        if self.bounds != other.bounds || self.system != other.system {
            return Err(Error::InvalidParameter(
                "cannot merge sample sets with different systems or bounds".into(),
            ));
        }
        let mut tracker = JaccardTracker::default();
        tracker.add(&self.records);
        tracker.add(&other.records);
        tracker.checkpoint();
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Ok(SampleSet {
            system: self.system.clone(),
            records,
            bounds: self.bounds.clone(),
            seed: self.seed,
            tracker,
            zero_tol: self.zero_tol,
            converged: self.converged && other.converged,
        })
    }

    fn record_lines(&self) -> Result<(Vec<u8>, String)> {
        let mut body = Vec::with_capacity(self.records.len() * 64);
        for r in &self.records {
            serde_json::to_writer(&mut body, r)?;
            body.push(b'\n');
        }
        let digest = hex::encode(Sha256::digest(&body));
        Ok((body, digest))
    }

    /// The exact bytes written by [`SampleSet::save`].
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (body, digest) = self.record_lines()?;
        let header = SampleHeader {
            version: FORMAT_VERSION,
            system: self.system.clone(),
            bounds: self.bounds.clone(),
            seed: self.seed,
            zero_tol: self.zero_tol,
            converged: self.converged,
            n_total: self.tracker.n_total,
            n_feasible: self.tracker.n_feasible,
            checkpoints: self.tracker.history.clone(),
            records_sha256: digest,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// SHA-256 of the serialized file contents.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<SampleSet> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: SampleHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("sample header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported sample file version {}",
                header.version
            )));
        }
        let mut hasher = Sha256::new();
        let mut records = Vec::with_capacity(header.n_total);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            hasher.update(&buf);
            let rec: SampleRecord = serde_json::from_slice(&buf)
                .map_err(|e| Error::Format(format!("sample record {}: {e}", records.len() + 1)))?;
            records.push(rec);
        }
        let digest = hex::encode(hasher.finalize());
        if digest != header.records_sha256 {
            return Err(Error::Integrity(format!(
                "sample records checksum {digest} does not match header {}",
                header.records_sha256
            )));
        }
        let mut tracker = JaccardTracker::default();
        tracker.add(&records);
        if tracker.n_total != header.n_total || tracker.n_feasible != header.n_feasible {
            return Err(Error::Integrity("sample counts do not match header".into()));
        }
        tracker.history = header.checkpoints;
        Ok(SampleSet {
            system: header.system,
            records,
            bounds: header.bounds,
            seed: header.seed,
            tracker,
            zero_tol: header.zero_tol,
            converged: header.converged,
        })
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
