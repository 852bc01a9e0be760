//! Discrete boundary of the feasible sample class by the ε-neighbourhood rule,
//! measured in per-axis normalized coordinates.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SampleSet;
use crate::system::BoxSet;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    pub points: Vec<Vec<f64>>,
    /// Radius in normalized units.
    pub epsilon: f64,
    pub source_checksum: String,
    pub box_face_is_boundary: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryHeader {
    epsilon: f64,
    normalized: bool,
    source_checksum: String,
    box_face_is_boundary: bool,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryLine {
    x: Vec<f64>,
}

/// Uniform grid over normalized points with cell size equal to the query
/// radius, so a ball query touches only the 3ⁿ surrounding cells. Dense
/// (CSR) storage when the cell count is modest, a hash map otherwise.
pub(crate) struct NeighborGrid {
    cell: f64,
    points: Vec<Vec<f64>>,
    cells: CellIndex,
}

enum CellIndex {
    Dense {
        extent: Vec<i64>,
        start: Vec<usize>,
        members: Vec<usize>,
    },
    Sparse(HashMap<Vec<i64>, Vec<usize>>),
}

const DENSE_CELLS_PER_POINT: f64 = 8.0;

impl NeighborGrid {
    pub(crate) fn new(points: Vec<Vec<f64>>, radius: f64) -> Self {
        let dim = points.first().map_or(0, Vec::len);
        let extent: Vec<i64> = (0..dim)
            .map(|axis| {
                let hi = points.iter().map(|p| p[axis]).fold(0.0, f64::max);
                (hi / radius).floor() as i64 + 1
            })
            .collect();
        let total = extent.iter().map(|&e| e as f64).product::<f64>();
        let budget = DENSE_CELLS_PER_POINT * points.len() as f64 + 1024.0;
        let dense_ok = points.iter().all(|p| p.iter().all(|v| *v >= 0.0));
        let cells = if dim > 0 && dense_ok && total <= budget {
            let total = total as usize;
            let linear: Vec<usize> = points
                .iter()
                .map(|p| linear_index(&cell_of(p, radius), &extent).expect("point inside grid"))
                .collect();
            let mut start = vec![0usize; total + 1];
            for &c in &linear {
                start[c + 1] += 1;
            }
            for c in 0..total {
                start[c + 1] += start[c];
            }
            let mut fill = start.clone();
            let mut members = vec![0usize; points.len()];
            for (i, &c) in linear.iter().enumerate() {
                members[fill[c]] = i;
                fill[c] += 1;
            }
            CellIndex::Dense { extent, start, members }
        } else {
            let mut map: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
            for (i, p) in points.iter().enumerate() {
                map.entry(cell_of(p, radius)).or_default().push(i);
            }
            CellIndex::Sparse(map)
        };
        Self {
            cell: radius,
            points,
            cells,
        }
    }

    pub(crate) fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    fn members(&self, key: &[i64]) -> &[usize] {
        match &self.cells {
            CellIndex::Dense { extent, start, members } => match linear_index(key, extent) {
                Some(c) => &members[start[c]..start[c + 1]],
                None => &[],
            },
            CellIndex::Sparse(map) => map.get(key).map_or(&[], Vec::as_slice),
        }
    }

    /// Calls `visit(j, dist²)` for every point within `radius` of `q`
    /// (including `q` itself if stored) until `visit` returns `false`.
    pub(crate) fn for_each_within<F: FnMut(usize, f64) -> bool>(&self, q: &[f64], radius: f64, mut visit: F) {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let base = cell_of(q, self.cell);
        let n = q.len();
        let side = (2 * reach + 1) as usize;
        let total = side.pow(n as u32);
        let mut key = vec![0i64; n];
        for code in 0..total {
            let mut c = code;
            for (axis, k) in key.iter_mut().enumerate() {
                *k = base[axis] + (c % side) as i64 - reach;
                c /= side;
            }
            for &j in self.members(&key) {
                let d2: f64 = self.points[j].iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 <= r2 && !visit(j, d2) {
                    return;
                }
            }
        }
    }

    /// Nearest other point within `radius`, ties to the lowest index.
    pub(crate) fn nearest(&self, i: usize, radius: f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        self.for_each_within(&self.points[i], radius, |j, d2| {
            if j != i && best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                best = Some((d2, j));
            }
            true
        });
        best.map(|(_, j)| j)
    }
}

fn cell_of(p: &[f64], cell: f64) -> Vec<i64> {
    p.iter().map(|v| (v / cell).floor() as i64).collect()
}

fn linear_index(key: &[i64], extent: &[i64]) -> Option<usize> {
    let mut idx = 0usize;
    for (k, e) in key.iter().zip(extent).rev() {
        if *k < 0 || k >= e {
            return None;
        }
        idx = idx * (*e as usize) + *k as usize;
    }
    Some(idx)
}

/// `2·(1/N)^(1/n)` over the non-degenerate axes: twice the mean spacing of
/// `N` uniform points in the normalized box.
pub fn auto_epsilon(s: &SampleSet) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "auto epsilon needs at least 2 samples (got {})",
            s.len()
        )));
    }
    let n_eff = (0..s.bounds.dim()).filter(|&i| !s.bounds.is_degenerate(i)).count();
    if n_eff == 0 {
        return Err(Error::InvalidParameter(
            "auto epsilon is undefined on a zero-volume sampling box".into(),
        ));
    }
    Ok(2.0 * (1.0 / s.len() as f64).powf(1.0 / n_eff as f64))
}

fn near_face(y: &[f64], bounds: &BoxSet, eps: f64) -> bool {
    y.iter()
        .enumerate()
        .any(|(i, v)| !bounds.is_degenerate(i) && (*v <= eps || *v >= 1.0 - eps))
}

/// Feasible samples with both a feasible and a non-feasible sample within
/// `epsilon` (normalized units). A sample is its own feasible witness.
pub fn extract_boundary(s: &SampleSet, epsilon: f64, box_face_is_boundary: bool) -> Result<BoundarySet> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "boundary epsilon must be positive and finite (got {epsilon})"
        )));
    }
    let normalized: Vec<Vec<f64>> = s.records.iter().map(|r| s.bounds.normalize(&r.state)).collect();
    let grid = NeighborGrid::new(normalized, epsilon);
    let feasible: Vec<usize> = (0..s.len()).filter(|&i| s.records[i].is_feasible()).collect();
    let flags: Vec<bool> = feasible
        .par_iter()
        .map(|&i| {
            let y = grid.point(i);
            if box_face_is_boundary && near_face(y, &s.bounds, epsilon) {
                return true;
            }
            let mut witness = false;
            grid.for_each_within(y, epsilon, |j, _| {
                witness = !s.records[j].is_feasible();
                !witness
            });
            witness
        })
        .collect();
    let points: Vec<Vec<f64>> = feasible
        .iter()
        .zip(&flags)
        .filter(|(_, f)| **f)
        .map(|(&i, _)| s.records[i].state.clone())
        .collect();
    if points.is_empty() {
        log::warn!("boundary extraction at epsilon = {epsilon:e} found no points");
    }
    Ok(BoundarySet {
        points,
        epsilon,
        source_checksum: s.checksum()?,
        box_face_is_boundary,
    })
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Epsilon rescaled to state units along `axis`.
    pub fn epsilon_along(&self, bounds: &BoxSet, axis: usize) -> f64 {
        self.epsilon * bounds.width(axis)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BoundaryHeader {
            epsilon: self.epsilon,
            normalized: true,
            source_checksum: self.source_checksum.clone(),
            box_face_is_boundary: self.box_face_is_boundary,
            count: self.points.len(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in &self.points {
            serde_json::to_writer(&mut out, &BoundaryLine { x: p.clone() })?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BoundarySet> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty boundary file".into()))??;
        let header: BoundaryHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Format(format!("boundary header: {e}")))?;
        if !header.normalized {
            return Err(Error::Format("boundary epsilon must be in normalized units".into()));
        }
        let mut points = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            let rec: BoundaryLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("boundary record {}: {e}", points.len() + 1)))?;
            points.push(rec.x);
        }
        if points.len() != header.count {
            return Err(Error::Integrity(format!(
                "boundary file holds {} points, header says {}",
                points.len(),
                header.count
            )));
        }
        Ok(BoundarySet {
            points,
            epsilon: header.epsilon,
            source_checksum: header.source_checksum,
            box_face_is_boundary: header.box_face_is_boundary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{JaccardTracker, SampleClass, SampleRecord};

    fn set_of(records: Vec<(Vec<f64>, SampleClass)>) -> SampleSet {
        let records: Vec<SampleRecord> = records
            .into_iter()
            .map(|(state, class)| SampleRecord {
                state,
                class,
                residual: 0.0,
            })
            .collect();
        let mut tracker = JaccardTracker::default();
        tracker.add(&records);
        tracker.checkpoint();
        SampleSet {
            system: "test".into(),
            records,
            bounds: BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            seed: 0,
            tracker,
            zero_tol: 1e-9,
            converged: true,
        }
    }

    #[test]
    fn auto_epsilon_formula() {
        let recs = (0..10_000)
            .map(|i| {
                (
                    vec![(i % 100) as f64 / 100.0, (i / 100) as f64 / 100.0],
                    SampleClass::FeasibleZ0,
                )
            })
            .collect();
        let s = set_of(recs);
        assert!((auto_epsilon(&s).unwrap() - 0.02).abs() < 1e-15);
        let one = set_of(vec![(vec![0.5, 0.5], SampleClass::FeasibleZ0)]);
        assert!(auto_epsilon(&one).is_err());
    }

    #[test]
    fn minimal_witness_pair() {
        let s = set_of(vec![
            (vec![0.50, 0.5], SampleClass::FeasibleZ0),
            (vec![0.51, 0.5], SampleClass::InfeasibleZ),
        ]);
        let b = extract_boundary(&s, 0.05, false).unwrap();
        assert_eq!(b.points, vec![vec![0.50, 0.5]]);
        let far = extract_boundary(&s, 0.005, false).unwrap();
        assert!(far.is_empty());
    }

    #[test]
    fn all_feasible_has_no_boundary_unless_faces_count() {
        let recs = (0..400)
            .map(|i| {
                (
                    vec![(i % 20) as f64 / 19.0, (i / 20) as f64 / 19.0],
                    SampleClass::FeasibleZ0,
                )
            })
            .collect();
        let s = set_of(recs);
        assert!(extract_boundary(&s, 0.1, false).unwrap().is_empty());
        let faces = extract_boundary(&s, 0.1, true).unwrap();
        assert!(!faces.is_empty());
        assert!(faces.points.iter().all(|p| p.iter().any(|v| *v <= 0.1 || *v >= 0.9)));
    }

    #[test]
    fn file_round_trip() {
        let s = set_of(vec![
            (vec![0.5, 0.5], SampleClass::FeasibleZ0),
            (vec![0.5, 0.52], SampleClass::OutsideZ),
        ]);
        let b = extract_boundary(&s, 0.05, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        b.save(&path).unwrap();
        assert_eq!(BoundarySet::load(&path).unwrap(), b);
    }

    #[test]
    fn grid_nearest_matches_scan() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.618_033_988).fract(), (t * 0.414_213_562).fract()]
            })
            .collect();
        let grid = NeighborGrid::new(pts.clone(), 0.1);
        for i in 0..pts.len() {
            let scan = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, j)
                })
                .filter(|(d2, _)| *d2 <= 0.01)
                .min_by(|a, b| a.partial_cmp(b).unwrap())
                .map(|(_, j)| j);
            assert_eq!(grid.nearest(i, 0.1), scan);
        }
    }
}
