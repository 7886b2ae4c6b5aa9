//! Probabilistic target map over a 2D cell grid.
//!
//! Beliefs are stored as log-odds and updated additively with the inverse
//! sensor model. The stored sum is left unclamped so that any permutation of
//! a measurement multiset produces the same result; the `[P_MIN, 1 - P_MIN]`
//! clamp is applied when a posterior is read out.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower posterior clamp. Upper clamp is `1 - P_MIN`.
pub const P_MIN: f64 = 0.001;

/// Default "found" threshold on the posterior of a target cell.
pub const FOUND_THRESHOLD: f64 = 0.95;

/// `(x, y)` cell index; `x` is the column, `y` the row.
pub type Cell = (usize, usize);

/// Log-odds of the clamp bound, `ln((1 - P_MIN) / P_MIN)`.
pub fn logit_bound() -> f64 {
    ((1.0 - P_MIN) / P_MIN).ln()
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Binary Shannon entropy in nats. Zero at the endpoints.
pub fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
    /// Meters per cell.
    pub cell_size: f64,
}

impl GridDims {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        Ok(Self {
            width,
            height,
            cell_size,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Row-major index of a cell, checked.
    pub fn index(&self, cell: Cell) -> Result<usize> {
        if cell.0 < self.width && cell.1 < self.height {
            Ok(cell.1 * self.width + cell.0)
        } else {
            Err(self.out_of_bounds(cell.0 as i64, cell.1 as i64))
        }
    }

    pub fn cell(&self, index: usize) -> Cell {
        (index % self.width, index / self.width)
    }

    pub(crate) fn out_of_bounds(&self, x: i64, y: i64) -> Error {
        Error::OutOfBounds {
            x,
            y,
            width: self.width,
            height: self.height,
        }
    }

    fn same_shape(&self, other: &GridDims) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &GridDims) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", other.width, other.height),
            })
        }
    }
}

/// A per-cell real field (probabilities or densities), row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbField {
    pub dims: GridDims,
    pub values: Vec<f64>,
}

impl ProbField {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} cells", dims.len()),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn constant(dims: GridDims, value: f64) -> Self {
        Self {
            dims,
            values: vec![value; dims.len()],
        }
    }

    pub fn get(&self, cell: Cell) -> Result<f64> {
        Ok(self.values[self.dims.index(cell)?])
    }

    /// One line per grid row, comma-separated, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8);
        for row in self.values.chunks(self.dims.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, cell_size: f64) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected {w} values, found {}", row.len()),
                    })
                }
                _ => {}
            }
            values.extend(row);
            height += 1;
        }
        let dims = GridDims::new(width.unwrap_or(0), height, cell_size)?;
        Self::new(dims, values)
    }

    /// `u32` LE width, `u32` LE height, then `f64` LE values row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dims.width as u32).to_le_bytes())?;
        w.write_all(&(self.dims.height as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, cell_size: f64) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let height = u32::from_le_bytes(b4) as usize;
        let dims = GridDims::new(width, height, cell_size)?;
        let mut values = Vec::with_capacity(dims.len());
        let mut b8 = [0u8; 8];
        for _ in 0..dims.len() {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(Self { dims, values })
    }
}

/// Ground-truth target placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub dims: GridDims,
    pub occupied: Vec<bool>,
}

impl WorldMap {
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            occupied: vec![false; dims.len()],
        }
    }

    pub fn from_cells(dims: GridDims, cells: &[Cell]) -> Result<Self> {
        let mut world = Self::empty(dims);
        for &c in cells {
            let i = dims.index(c)?;
            world.occupied[i] = true;
        }
        Ok(world)
    }

    pub fn is_occupied(&self, cell: Cell) -> Result<bool> {
        Ok(self.occupied[self.dims.index(cell)?])
    }

    /// Occupied cells in row-major order.
    pub fn targets(&self) -> Vec<Cell> {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| self.dims.cell(i))
            .collect()
    }

    pub fn target_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMeasurement {
    pub cell: Cell,
    /// `true` reports a target.
    pub z: bool,
    pub p_correct: f64,
}

impl BinaryMeasurement {
    pub fn new(cell: Cell, z: bool, p_correct: f64) -> Result<Self> {
        if !(p_correct > 0.5 && p_correct <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_correct must lie in (0.5, 1], got {p_correct}"
            )));
        }
        Ok(Self { cell, z, p_correct })
    }

    /// `ln p(z | occupied) / p(z | free)` for the symmetric sensor. A perfect
    /// sensor is capped at `1 - 1e-6`, which is enough to carry any clamped
    /// prior across to the opposite bound in one reading.
    pub fn log_likelihood_ratio(&self) -> f64 {
        let p = self.p_correct.min(1.0 - 1e-6);
        let r = (p / (1.0 - p)).ln();
        if self.z {
            r
        } else {
            -r
        }
    }
}

/// Log-odds occupancy belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    dims: GridDims,
    logodds: Vec<f64>,
}

impl OccupancyGrid {
    pub fn uniform(dims: GridDims, p: f64) -> Self {
        let l = logit(clamp_probability(p));
        Self {
            dims,
            logodds: vec![l; dims.len()],
        }
    }

    /// Prior log-odds from a probability field; values are clamped to
    /// `[P_MIN, 1 - P_MIN]` first.
    pub fn from_probabilities(dims: GridDims, probs: &[f64]) -> Result<Self> {
        if probs.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} cells", dims.len()),
                got: format!("{} values", probs.len()),
            });
        }
        let mut logodds = Vec::with_capacity(probs.len());
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "probability {p} at cell {i} is outside [0, 1]"
                )));
            }
            logodds.push(logit(clamp_probability(p)));
        }
        Ok(Self { dims, logodds })
    }

    pub fn from_field(field: &ProbField) -> Result<Self> {
        Self::from_probabilities(field.dims, &field.values)
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn logodds(&self, cell: Cell) -> Result<f64> {
        Ok(self.logodds[self.dims.index(cell)?])
    }

    pub fn logodds_slice(&self) -> &[f64] {
        &self.logodds
    }

    pub fn update_cell(&mut self, m: &BinaryMeasurement) -> Result<()> {
        let i = self.dims.index(m.cell)?;
        self.logodds[i] += m.log_likelihood_ratio();
        Ok(())
    }

    /// Overwrites one stored log-odds value; used to undo simulated updates.
    pub(crate) fn set_logodds_at(&mut self, index: usize, l: f64) {
        self.logodds[index] = l;
    }

    pub fn posterior(&self, cell: Cell) -> Result<f64> {
        Ok(self.posterior_at(self.dims.index(cell)?))
    }

    /// Posterior by row-major index. Panics if out of range.
    pub fn posterior_at(&self, index: usize) -> f64 {
        let b = logit_bound();
        logistic(self.logodds[index].clamp(-b, b))
    }

    pub fn cell_entropy_at(&self, index: usize) -> f64 {
        binary_entropy(self.posterior_at(index))
    }

    pub fn posteriors(&self) -> ProbField {
        ProbField {
            dims: self.dims,
            values: (0..self.logodds.len())
                .map(|i| self.posterior_at(i))
                .collect(),
        }
    }

    /// Total Shannon entropy of the map in nats.
    pub fn total_entropy(&self) -> f64 {
        (0..self.logodds.len())
            .map(|i| self.cell_entropy_at(i))
            .sum()
    }

    /// Number of true targets whose posterior is strictly above `threshold`.
    pub fn count_targets_found(&self, world: &WorldMap, threshold: f64) -> Result<usize> {
        if !(threshold > 0.5 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "found threshold must lie in (0.5, 1), got {threshold}"
            )));
        }
        self.dims.check_shape(&world.dims)?;
        Ok(world
            .occupied
            .iter()
            .enumerate()
            .filter(|(i, &o)| o && self.posterior_at(*i) > threshold)
            .count())
    }
}

/// KL divergence `D(p || q)` between two non-negative fields after each is
/// normalized to unit mass. `q` is floored at `1e-12`.
pub fn kl_divergence(p: &ProbField, q: &ProbField) -> Result<f64> {
    p.dims.check_shape(&q.dims)?;
    let sp: f64 = p.values.iter().sum();
    let sq: f64 = q.values.iter().sum();
    if !(sp > 0.0) || !(sq > 0.0) {
        return Err(Error::InvalidArgument(
            "cannot normalize a field with zero total mass".into(),
        ));
    }
    const EPS: f64 = 1e-12;
    let mut kl = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        let pa = a / sp;
        if pa <= 0.0 {
            continue;
        }
        let qb = (b / sq).max(EPS);
        kl += pa * (pa / qb).ln();
    }
    Ok(kl.max(0.0))
}
