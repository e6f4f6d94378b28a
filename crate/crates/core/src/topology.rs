//! Square-grid multi-cell geometry, user drops, path loss and path-loss
//! inversion power control.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::RngStream;

/// A user, addressed by home cell and index within the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId {
    pub cell: usize,
    pub user: usize,
}

impl UserId {
    pub fn new(cell: usize, user: usize) -> Self {
        UserId { cell, user }
    }

    /// Column index in a `Q*M` block layout (cell-major).
    pub fn flat(self, users_per_cell: usize) -> usize {
        self.cell * users_per_cell + self.user
    }
}

pub type Point = [f64; 2];

/// `side x side` square cells tiling `[0, side*cell_size]^2`, base station at
/// each cell center. Cells are numbered row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub side: usize,
    pub cell_size_m: f64,
    pub bs_positions: Vec<Point>,
    pub center_cell: usize,
}

impl Grid {
    pub fn num_cells(&self) -> usize {
        self.side * self.side
    }

    /// Lower-left and upper-right corners of cell `q`.
    pub fn cell_bounds(&self, q: usize) -> (Point, Point) {
        let (row, col) = (q / self.side, q % self.side);
        let lo = [col as f64 * self.cell_size_m, row as f64 * self.cell_size_m];
        (lo, [lo[0] + self.cell_size_m, lo[1] + self.cell_size_m])
    }

    pub fn contains(&self, q: usize, p: Point) -> bool {
        let (lo, hi) = self.cell_bounds(q);
        (lo[0]..=hi[0]).contains(&p[0]) && (lo[1]..=hi[1]).contains(&p[1])
    }
}

pub fn build_grid(side: usize, cell_size_m: f64) -> Result<Grid> {
    if side == 0 || side.is_multiple_of(2) {
        return Err(invalid(format!(
            "grid side must be odd and positive to have a center cell, got {side}"
        )));
    }
    if !(cell_size_m > 0.0) || !cell_size_m.is_finite() {
        return Err(invalid(format!("cell size must be positive, got {cell_size_m}")));
    }
    let bs_positions = (0..side * side)
        .map(|q| {
            let (row, col) = (q / side, q % side);
            [
                (col as f64 + 0.5) * cell_size_m,
                (row as f64 + 0.5) * cell_size_m,
            ]
        })
        .collect();
    Ok(Grid {
        side,
        cell_size_m,
        bs_positions,
        center_cell: (side * side) / 2,
    })
}

/// `m` i.i.d. uniform positions in every cell, indexed `[cell][user]`.
pub fn drop_users(stream: &RngStream, grid: &Grid, m: usize) -> Vec<Vec<Point>> {
    let mut rng = stream.rng();
    (0..grid.num_cells())
        .map(|q| {
            let (lo, _) = grid.cell_bounds(q);
            (0..m)
                .map(|_| {
                    let u: f64 = rng.random();
                    let v: f64 = rng.random();
                    [lo[0] + u * grid.cell_size_m, lo[1] + v * grid.cell_size_m]
                })
                .collect()
        })
        .collect()
}

/// Distances below this are clamped before evaluating the path-loss law.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// Linear path-loss coefficient, `-37.6 log10(d / 10 m)` dB.
pub fn path_loss(distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(invalid(format!("distance must be positive, got {distance_m}")));
    }
    let d = distance_m.max(MIN_DISTANCE_M);
    Ok(10f64.powf(-3.76 * (d / 10.0).log10()))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * db_to_linear(dbm)
}

/// Transmit powers from path-loss inversion toward each user's home BS.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTables {
    pub data: Vec<f64>,
    pub pilot: Vec<f64>,
}

/// `p = P / beta_home`, `p_pilot = P_tau / beta_home`. No power cap.
pub fn apply_power_control(beta_home: &[f64], p: f64, p_tau: f64) -> Result<PowerTables> {
    if !(p > 0.0) {
        return Err(invalid(format!("P must be positive, got {p}")));
    }
    if !(p_tau >= p) {
        return Err(invalid(format!("P_tau ({p_tau}) must be at least P ({p})")));
    }
    Ok(PowerTables {
        data: beta_home.iter().map(|b| p / b).collect(),
        pilot: beta_home.iter().map(|b| p_tau / b).collect(),
    })
}

/// Cell geometry, user positions, path-loss table and power tables.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub grid: Grid,
    pub users_per_cell: usize,
    pub user_positions: Vec<Vec<Point>>,
    /// `beta[flat(user) * Q + bs]`, linear scale.
    beta: Vec<f64>,
    pub powers: PowerTables,
    pub p: f64,
    pub p_tau: f64,
}

impl Deployment {
    pub fn new(grid: Grid, user_positions: Vec<Vec<Point>>, p: f64, p_tau: f64) -> Result<Self> {
        let q_count = grid.num_cells();
        if user_positions.len() != q_count {
            return Err(invalid("one position list per cell required"));
        }
        let m = user_positions.first().map_or(0, Vec::len);
        if m == 0 || user_positions.iter().any(|c| c.len() != m) {
            return Err(invalid("every cell needs the same, nonzero number of users"));
        }
        let mut beta = Vec::with_capacity(q_count * m * q_count);
        let mut beta_home = Vec::with_capacity(q_count * m);
        for (j, cell) in user_positions.iter().enumerate() {
            for pos in cell {
                for bs in &grid.bs_positions {
                    let d = (pos[0] - bs[0]).hypot(pos[1] - bs[1]);
                    beta.push(path_loss(d.max(f64::MIN_POSITIVE))?);
                }
                beta_home.push(beta[beta.len() - q_count + j]);
            }
        }
        let powers = apply_power_control(&beta_home, p, p_tau)?;
        Ok(Deployment {
            grid,
            users_per_cell: m,
            user_positions,
            beta,
            powers,
            p,
            p_tau,
        })
    }

    /// Drops users uniformly and applies power control in one go.
    pub fn sample(stream: &RngStream, grid: Grid, m: usize, p: f64, p_tau: f64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("at least one user per cell required"));
        }
        let positions = drop_users(stream, &grid, m);
        Deployment::new(grid, positions, p, p_tau)
    }

    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn num_users(&self) -> usize {
        self.num_cells() * self.users_per_cell
    }

    pub fn center_cell(&self) -> usize {
        self.grid.center_cell
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        let m = self.users_per_cell;
        (0..self.num_cells()).flat_map(move |j| (0..m).map(move |i| UserId::new(j, i)))
    }

    pub fn beta(&self, u: UserId, bs: usize) -> f64 {
        self.beta[u.flat(self.users_per_cell) * self.num_cells() + bs]
    }

    pub fn data_power(&self, u: UserId) -> f64 {
        self.powers.data[u.flat(self.users_per_cell)]
    }

    pub fn pilot_power(&self, u: UserId) -> f64 {
        self.powers.pilot[u.flat(self.users_per_cell)]
    }

    pub fn position(&self, u: UserId) -> Point {
        self.user_positions[u.cell][u.user]
    }
}
