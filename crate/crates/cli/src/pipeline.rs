//! Stage runner: sample → boundary → fit (three modes) → simulate.
//!
//! Every stage records a key (digest of its config sections and input file
//! checksums) and the checksums of its outputs in `cache.json`. A stage is
//! reused only when both still match, so a damaged or deleted intermediate
//! is regenerated and everything downstream of an unchanged file is kept.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use barrier_synth::boundary::{auto_epsilon, extract_boundary};
use barrier_synth::fitter::{fit_multi, fit_nonuniform, fit_uniform};
use barrier_synth::sampler::{file_sha256, run_sampling};
use barrier_synth::simulator::{check_invariance, min_candidate_value, simulate, simulate_with};
use barrier_synth::{
    BoundarySet, CbfCandidate, Error, FitMode, FitResult, FitStatus, InvarianceReport, Plant, SampleSet,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Epsilon, PipelineConfig};
use crate::exit::{StageFailure, INFEASIBLE_FIT, INTEGRITY, NOT_CONVERGED};

pub const SAMPLES: &str = "samples.jsonl";
pub const CONVERGENCE: &str = "convergence.csv";
pub const BOUNDARY: &str = "boundary.jsonl";
pub const BOUNDARY_SUMMARY: &str = "boundary_summary.json";
pub const SIMULATION: &str = "simulation.json";
pub const TRAJECTORIES: &str = "trajectories";
pub const REPORT: &str = "report.md";
pub const CACHE: &str = "cache.json";

pub fn fit_file(mode: FitMode) -> String {
    format!("fit_{}.json", mode_slug(mode))
}

pub fn mode_slug(mode: FitMode) -> &'static str {
    match mode {
        FitMode::Uniform => "uniform",
        FitMode::NonUniform => "nonuniform",
        FitMode::Multi(_) => "multi",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Stamp {
    key: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Cache {
    stages: BTreeMap<String, Stamp>,
}

/// Working state of one invocation.
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub plant: Plant,
    cache: Cache,
    /// Stages named here are recomputed even when their stamp matches.
    pub force: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub count: usize,
    pub epsilon: f64,
    pub epsilon_rule: String,
    pub epsilon_per_axis: Vec<f64>,
    pub box_face_is_boundary: bool,
    pub source_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: String,
    pub start_index: usize,
    pub x_init: Vec<f64>,
    /// `None` when the start lies outside the fitted set.
    pub file: Option<String>,
    pub excluded_min_h: Option<f64>,
    pub invariance: Option<InvarianceReport>,
    pub terminal_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: String,
    pub grid: usize,
    pub runs: usize,
    pub breach_runs: usize,
    pub infeasible_steps: usize,
    pub worst_min_h: f64,
    pub worst_min_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub config: crate::config::SimulateSection,
    pub candidate_checksums: BTreeMap<String, String>,
    pub runs: Vec<RunRecord>,
    pub unfiltered: Option<RunRecord>,
    pub sweeps: Vec<SweepSummary>,
}

/// Everything the report needs.
pub struct Artifacts {
    pub samples: SampleSet,
    pub boundary: BoundarySet,
    pub boundary_summary: BoundarySummary,
    pub fits: Vec<FitResult>,
    pub simulation: Option<SimulationManifest>,
}

impl Run {
    pub fn new(cfg: PipelineConfig, out: PathBuf) -> anyhow::Result<Self> {
        cfg.validate()?;
        let plant = cfg.plant()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let cache = match fs::read(out.join(CACHE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable cache: {e}");
                Cache::default()
            }),
            Err(_) => Cache::default(),
        };
        Ok(Self {
            cfg,
            out,
            plant,
            cache,
            force: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn reusable(&self, stage: &str, key: &str) -> bool {
        if self.force.iter().any(|s| s == stage) {
            return false;
        }
        let Some(stamp) = self.cache.stages.get(stage) else {
            return false;
        };
        stamp.key == key
            && stamp
                .outputs
                .iter()
                .all(|(name, sha)| file_sha256(&self.path(name)).is_ok_and(|s| &s == sha))
    }

    fn stamp(&mut self, stage: &str, key: String, outputs: &[String]) -> anyhow::Result<()> {
        let mut map = BTreeMap::new();
        for name in outputs {
            map.insert(name.clone(), file_sha256(&self.path(name))?);
        }
        self.cache.stages.insert(stage.to_string(), Stamp { key, outputs: map });
        let mut bytes = serde_json::to_vec_pretty(&self.cache)?;
        bytes.push(b'\n');
        fs::write(self.path(CACHE), bytes)?;
        Ok(())
    }

    fn key(&self, parts: &[&str]) -> String {
        PipelineConfig::section_digest(&parts)
    }

    fn input_sha(&self, name: &str) -> anyhow::Result<String> {
        let path = self.path(name);
        file_sha256(&path).map_err(|e| {
            anyhow!(StageFailure::new(
                INTEGRITY,
                format!("missing or unreadable input {}: {e}", path.display())
            ))
        })
    }

    pub fn sample(&mut self) -> anyhow::Result<SampleSet> {
        let key = self.key(&[
            &PipelineConfig::section_digest(&self.cfg.system),
            &PipelineConfig::section_digest(&self.cfg.sampling),
        ]);
        let set = if self.reusable("sample", &key) {
            log::info!("sample: reusing {}", SAMPLES);
            SampleSet::load(&self.path(SAMPLES))?
        } else {
            let t = Instant::now();
            let set = run_sampling(
                &self.plant.model,
                &self.plant.input_box,
                &self.cfg.sampling_config()?,
                &self.cfg.extra_feasible(),
            )?;
            log::info!("sample: {} states in {:.2?}", set.len(), t.elapsed());
            set.save(&self.path(SAMPLES))?;
            fs::write(self.path(CONVERGENCE), convergence_csv(&set))?;
            self.stamp("sample", key, &[SAMPLES.into(), CONVERGENCE.into()])?;
            set
        };
        if !set.converged {
            return Err(anyhow!(StageFailure::new(
                NOT_CONVERGED,
                format!(
                    "sampling did not converge within n_max = {} (N = {}, J = {:.6})",
                    self.cfg.sampling.n_max,
                    set.len(),
                    set.jaccard()
                ),
            )));
        }
        Ok(set)
    }

    pub fn load_samples(&self) -> anyhow::Result<SampleSet> {
        self.input_sha(SAMPLES)?;
        SampleSet::load(&self.path(SAMPLES)).context("loading samples")
    }

    pub fn boundary(&mut self, samples: &SampleSet) -> anyhow::Result<(BoundarySet, BoundarySummary)> {
        let key = self.key(&[
            &PipelineConfig::section_digest(&self.cfg.boundary),
            &self.input_sha(SAMPLES)?,
        ]);
        if self.reusable("boundary", &key) {
            log::info!("boundary: reusing {}", BOUNDARY);
            let b = BoundarySet::load(&self.path(BOUNDARY))?;
            let summary: BoundarySummary = serde_json::from_slice(&fs::read(self.path(BOUNDARY_SUMMARY))?)?;
            return Ok((b, summary));
        }
        let t = Instant::now();
        let (epsilon, rule) = match self.cfg.boundary.epsilon {
            Epsilon::Fixed(e) => (e, "fixed".to_string()),
            Epsilon::Named(_) => (auto_epsilon(samples)?, "auto: 2*(1/N)^(1/n)".to_string()),
        };
        let b = extract_boundary(samples, epsilon, self.cfg.boundary.box_face_is_boundary)?;
        if b.is_empty() {
            log::warn!("boundary: no points at epsilon = {epsilon:e}");
        }
        log::info!("boundary: {} points in {:.2?}", b.len(), t.elapsed());
        let summary = BoundarySummary {
            count: b.len(),
            epsilon,
            epsilon_rule: rule,
            epsilon_per_axis: (0..samples.bounds.dim())
                .map(|i| b.epsilon_along(&samples.bounds, i))
                .collect(),
            box_face_is_boundary: b.box_face_is_boundary,
            source_checksum: b.source_checksum.clone(),
        };
        b.save(&self.path(BOUNDARY))?;
        write_json(&self.path(BOUNDARY_SUMMARY), &summary)?;
        self.stamp("boundary", key, &[BOUNDARY.into(), BOUNDARY_SUMMARY.into()])?;
        Ok((b, summary))
    }

    pub fn load_boundary(&self, samples: &SampleSet) -> anyhow::Result<BoundarySet> {
        self.input_sha(BOUNDARY)?;
        let b = BoundarySet::load(&self.path(BOUNDARY))?;
        if b.source_checksum != samples.checksum()? {
            return Err(Error::Integrity("boundary file was extracted from a different sample set".into()).into());
        }
        Ok(b)
    }

    /// Fits one mode, warm-started from the previous mode's file when given.
    pub fn fit(
        &mut self,
        mode: FitMode,
        samples: &SampleSet,
        boundary: &BoundarySet,
        warm: Option<&FitResult>,
    ) -> anyhow::Result<FitResult> {
        let name = fit_file(mode);
        let stage = format!("fit_{}", mode_slug(mode));
        let warm_sha = match (mode, warm) {
            (FitMode::Uniform, _) | (_, None) => String::new(),
            (FitMode::NonUniform, Some(_)) => self.input_sha(&fit_file(FitMode::Uniform))?,
            (FitMode::Multi(_), Some(_)) => self.input_sha(&fit_file(FitMode::NonUniform))?,
        };
        let key = self.key(&[
            &PipelineConfig::section_digest(&self.cfg.system),
            &PipelineConfig::section_digest(&self.cfg.fit),
            &self.input_sha(SAMPLES)?,
            &self.input_sha(BOUNDARY)?,
            &warm_sha,
        ]);
        let result = if self.reusable(&stage, &key) {
            log::info!("fit: reusing {name}");
            FitResult::from_json(&fs::read_to_string(self.path(&name))?)?
        } else {
            let t = Instant::now();
            let cfg = self.cfg.fit_config(mode)?;
            let (sys, ub) = (&self.plant.model, &self.plant.input_box);
            let r = match mode {
                FitMode::Uniform => fit_uniform(samples, boundary, sys, ub, &cfg)?,
                FitMode::NonUniform => fit_nonuniform(samples, boundary, sys, ub, &cfg, warm)?,
                FitMode::Multi(_) => fit_multi(samples, boundary, sys, ub, &cfg, warm)?,
            };
            log::info!(
                "fit {}: objective {:.3} in {:.2?}",
                mode_slug(mode),
                r.objective_value,
                t.elapsed()
            );
            let mut text = r.to_json()?;
            text.push('\n');
            fs::write(self.path(&name), text)?;
            self.stamp(&stage, key, std::slice::from_ref(&name))?;
            r
        };
        if result.status == FitStatus::Infeasible {
            return Err(anyhow!(StageFailure::new(
                INFEASIBLE_FIT,
                format!("{} fit is infeasible: {}", mode_slug(mode), result.warnings.join("; ")),
            )));
        }
        Ok(result)
    }

    pub fn load_fit(&self, mode: FitMode) -> anyhow::Result<FitResult> {
        let name = fit_file(mode);
        self.input_sha(&name)?;
        Ok(FitResult::from_json(&fs::read_to_string(self.path(&name))?)?)
    }

    pub fn simulate(&mut self, fits: &[FitResult]) -> anyhow::Result<SimulationManifest> {
        let mut checksums = BTreeMap::new();
        for f in fits {
            checksums.insert(mode_slug(f.mode).to_string(), self.input_sha(&fit_file(f.mode))?);
        }
        let mut parts = vec![
            PipelineConfig::section_digest(&self.cfg.system),
            PipelineConfig::section_digest(&self.cfg.simulate),
        ];
        parts.extend(checksums.values().cloned());
        let key = self.key(&parts.iter().map(String::as_str).collect::<Vec<_>>());
        if self.reusable("simulate", &key) {
            log::info!("simulate: reusing {}", SIMULATION);
            return Ok(serde_json::from_slice(&fs::read(self.path(SIMULATION))?)?);
        }
        fs::create_dir_all(self.path(TRAJECTORIES))?;
        let mut outputs = vec![SIMULATION.to_string()];
        let mut runs = Vec::new();
        for f in fits {
            for (i, x0) in self.cfg.simulate.starts.iter().enumerate() {
                let file = format!("{TRAJECTORIES}/{}_start{i}.csv", mode_slug(f.mode));
                let rec = self.run_one(mode_slug(f.mode), i, x0, &f.candidates, false, &file)?;
                if rec.file.is_some() {
                    outputs.push(file);
                }
                runs.push(rec);
            }
        }
        let unfiltered = match (
            self.cfg.simulate.unfiltered_demo,
            self.cfg.simulate.starts.first(),
            fits.last(),
        ) {
            (true, Some(x0), Some(f)) => {
                let file = format!("{TRAJECTORIES}/unfiltered_start0.csv");
                outputs.push(file.clone());
                Some(self.run_one("unfiltered", 0, x0, &f.candidates, true, &file)?)
            }
            _ => None,
        };
        let sweeps = fits
            .iter()
            .filter(|f| f.mode != FitMode::Uniform && self.cfg.simulate.sweep_grid > 0)
            .map(|f| self.sweep(f))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let manifest = SimulationManifest {
            config: self.cfg.simulate.clone(),
            candidate_checksums: checksums,
            runs,
            unfiltered,
            sweeps,
        };
        write_json(&self.path(SIMULATION), &manifest)?;
        self.stamp("simulate", key, &outputs)?;
        Ok(manifest)
    }

    fn run_one(
        &self,
        mode: &str,
        index: usize,
        x0: &[f64],
        cands: &[CbfCandidate],
        unfiltered: bool,
        file: &str,
    ) -> anyhow::Result<RunRecord> {
        let mut cfg = self.cfg.sim_config(x0);
        if unfiltered {
            cfg.unfiltered = true;
            cfg.require_safe_start = false;
        }
        let fc = self.cfg.filter_config(&self.plant);
        let t = Instant::now();
        let mut rec = RunRecord {
            mode: mode.to_string(),
            start_index: index,
            x_init: x0.to_vec(),
            file: None,
            excluded_min_h: None,
            invariance: None,
            terminal_state: None,
        };
        match simulate(&cfg, &self.plant.model, cands, &fc) {
            Ok(traj) => {
                log::info!(
                    "simulate {mode} start {index}: {} steps in {:.2?}",
                    traj.len(),
                    t.elapsed()
                );
                fs::write(self.path(file), traj.to_csv())?;
                rec.invariance = Some(check_invariance(&traj, 1e-6, 1e-6));
                rec.terminal_state = traj.terminal_state().map(<[f64]>::to_vec);
                rec.file = Some(file.to_string());
            }
            Err(Error::UnsafeStart { min_h }) => {
                log::info!("simulate {mode} start {index}: outside the fitted set (min h = {min_h:.4})");
                rec.excluded_min_h = Some(min_h);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(rec)
    }

    /// Grid of interior starts driven by `u ≡ u_max` through the filter.
    fn sweep(&self, f: &FitResult) -> anyhow::Result<SweepSummary> {
        let grid = self.cfg.simulate.sweep_grid;
        let bounds = &self.cfg.sampling_config()?.bounds;
        let hcf = self.plant.model.hcf();
        let fc = self.cfg.filter_config(&self.plant);
        let u_max = self.plant.input_box.upper().to_vec();
        let n = bounds.dim();
        let starts: Vec<Vec<f64>> = (0..grid.pow(n as u32))
            .map(|mut k| {
                (0..n)
                    .map(|axis| {
                        let i = k % grid;
                        k /= grid;
                        bounds.lower()[axis] + bounds.width(axis) * (i as f64 + 0.5) / grid as f64
                    })
                    .collect()
            })
            .filter(|x: &Vec<f64>| min_candidate_value(&f.candidates, hcf, x) > 0.0)
            .collect();
        let t = Instant::now();
        let reports = starts
            .par_iter()
            .map(|x0| {
                let cfg = self.cfg.sim_config(x0);
                let traj = simulate_with(&cfg, &self.plant.model, &f.candidates, &fc, |_, _, _| u_max.clone())?;
                Ok(check_invariance(&traj, 1e-6, 1e-6))
            })
            .collect::<barrier_synth::Result<Vec<_>>>()?;
        log::info!(
            "sweep {}: {} runs in {:.2?}",
            mode_slug(f.mode),
            reports.len(),
            t.elapsed()
        );
        Ok(SweepSummary {
            mode: mode_slug(f.mode).to_string(),
            grid,
            runs: reports.len(),
            breach_runs: reports.iter().filter(|r| r.h_breaches + r.z_breaches > 0).count(),
            infeasible_steps: reports.iter().map(|r| r.infeasible_steps).sum(),
            worst_min_h: reports
                .iter()
                .flat_map(|r| r.min_h.iter().copied())
                .fold(f64::INFINITY, f64::min),
            worst_min_z: reports.iter().map(|r| r.min_z).fold(f64::INFINITY, f64::min),
        })
    }

    /// All stages in order, then the report. Stops at the first failing stage.
    pub fn pipeline(&mut self) -> anyhow::Result<Artifacts> {
        let samples = self.sample()?;
        let (boundary, boundary_summary) = self.boundary(&samples)?;
        let mut fits: Vec<FitResult> = Vec::new();
        for mode in self.cfg.fit_modes() {
            let r = self.fit(mode, &samples, &boundary, fits.last())?;
            fits.push(r);
        }
        let simulation = Some(self.simulate(&fits)?);
        let art = Artifacts {
            samples,
            boundary,
            boundary_summary,
            fits,
            simulation,
        };
        fs::write(self.path(REPORT), crate::report::render(&self.cfg, &art))?;
        Ok(art)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// `n,J,dJ` per checkpoint; the first row's change is measured from zero.
pub fn convergence_csv(s: &SampleSet) -> String {
    let mut out = String::from("n,J,dJ\n");
    for (n, j, dj) in s.tracker.table() {
        out.push_str(&format!("{n},{},{}\n", fmt_real(j), fmt_real(dj)));
    }
    out
}

/// Shortest round-trip form, without a trailing `.0`.
pub fn fmt_real(v: f64) -> String {
    let mut b = format!("{v:?}");
    if b.ends_with(".0") {
        b.truncate(b.len() - 2);
    }
    b
}
