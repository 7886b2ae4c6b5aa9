//! Downward-looking binary camera with a square footprint.
//!
//! True-positive and true-negative rates are equal (`accuracy`), decaying
//! linearly with altitude down to a floor that stays above one half.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMeasurement, Cell, GridDims, OccupancyGrid, WorldMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    /// Meters above ground.
    pub altitude: f64,
    /// Radians, in `(0, pi/2)`.
    pub fov_half_angle: f64,
    pub accuracy_at_zero: f64,
    /// Accuracy lost per meter of altitude.
    pub accuracy_slope: f64,
    pub accuracy_floor: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            altitude: 4.0,
            fov_half_angle: std::f64::consts::FRAC_PI_6,
            accuracy_at_zero: 0.95,
            accuracy_slope: 0.01,
            accuracy_floor: 0.6,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.altitude >= 0.0
            && self.fov_half_angle > 0.0
            && self.fov_half_angle < std::f64::consts::FRAC_PI_2
            && self.accuracy_floor > 0.5
            && self.accuracy_floor <= self.accuracy_at_zero
            && self.accuracy_at_zero <= 1.0
            && self.accuracy_slope >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "inconsistent sensor model {self:?}"
            )))
        }
    }

    pub fn accuracy_at(&self, altitude: f64) -> f64 {
        (self.accuracy_at_zero - self.accuracy_slope * altitude).max(self.accuracy_floor)
    }

    /// Accuracy at the model's own flight altitude.
    pub fn accuracy(&self) -> f64 {
        self.accuracy_at(self.altitude)
    }

    pub fn half_width(&self, cell_size: f64) -> usize {
        (self.altitude * self.fov_half_angle.tan() / cell_size).floor() as usize
    }

    /// Cells seen from `agent`, row-major, clipped to the map.
    pub fn footprint(&self, agent: Cell, dims: &GridDims) -> Footprint {
        footprint_cells(agent, self.half_width(dims.cell_size), dims)
    }

    /// One noisy reading of `cell`: the truth with probability `accuracy`,
    /// flipped otherwise. Always consumes exactly one uniform draw.
    pub fn sample_measurement<R: Rng + ?Sized>(
        &self,
        world: &WorldMap,
        cell: Cell,
        rng: &mut R,
    ) -> Result<BinaryMeasurement> {
        let truth = world.is_occupied(cell)?;
        let p = self.accuracy();
        let u: f64 = rng.random();
        let z = if u < p { truth } else { !truth };
        BinaryMeasurement::new(cell, z, p)
    }

    /// Senses the footprint at `agent`, updating belief and coverage.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        grid: &mut OccupancyGrid,
        coverage: &mut [bool],
        world: &WorldMap,
        agent: Cell,
        rng: &mut R,
    ) -> Result<Vec<BinaryMeasurement>> {
        let dims = *grid.dims();
        dims.index(agent)?;
        let fp = self.footprint(agent, &dims);
        self.observe_cells(grid, coverage, world, &fp.cells, rng)
    }

    /// Applies one sampled measurement to each listed cell, in order.
    pub fn observe_cells<R: Rng + ?Sized>(
        &self,
        grid: &mut OccupancyGrid,
        coverage: &mut [bool],
        world: &WorldMap,
        cells: &[Cell],
        rng: &mut R,
    ) -> Result<Vec<BinaryMeasurement>> {
        let dims = *grid.dims();
        if coverage.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} coverage cells", dims.len()),
                got: coverage.len().to_string(),
            });
        }
        let mut out = Vec::with_capacity(cells.len());
        for &c in cells {
            let m = self.sample_measurement(world, c, rng)?;
            grid.update_cell(&m)?;
            coverage[dims.index(c)?] = true;
            out.push(m);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub cells: Vec<Cell>,
}

pub fn footprint_cells(agent: Cell, half_width: usize, dims: &GridDims) -> Footprint {
    let hw = half_width as i64;
    let (ax, ay) = (agent.0 as i64, agent.1 as i64);
    let mut cells = Vec::with_capacity((2 * half_width + 1).pow(2));
    for y in (ay - hw)..=(ay + hw) {
        for x in (ax - hw)..=(ax + hw) {
            if dims.contains(x, y) {
                cells.push((x as usize, y as usize));
            }
        }
    }
    Footprint { cells }
}
