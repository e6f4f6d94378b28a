//! IRSA repetition factors and the binary access pattern matrix.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::RngStream;
use crate::topology::UserId;

/// Probability mass over repetition degrees `1..=d_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionDistribution {
    /// `pmf[d - 1]` is the probability of degree `d`.
    pmf: Vec<f64>,
}

impl RepetitionDistribution {
    /// Ideal soliton truncated at `d_max`: `p(1) = 1/d_max`, `p(d) = 1/(d(d-1))`.
    pub fn soliton(d_max: usize) -> Result<Self> {
        if d_max < 1 {
            return Err(invalid("d_max must be at least 1"));
        }
        let pmf = (1..=d_max)
            .map(|d| {
                if d == 1 {
                    1.0 / d_max as f64
                } else {
                    1.0 / (d * (d - 1)) as f64
                }
            })
            .collect();
        Ok(RepetitionDistribution { pmf })
    }

    /// Arbitrary pmf over `1..=pmf.len()`; must be non-negative and sum to 1.
    pub fn from_pmf(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() || pmf.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid("pmf must be non-empty and non-negative"));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("pmf sums to {total}, not 1")));
        }
        Ok(RepetitionDistribution { pmf })
    }

    /// Every user repeats exactly `d` times.
    pub fn fixed(d: usize) -> Result<Self> {
        if d < 1 {
            return Err(invalid("degree must be at least 1"));
        }
        let mut pmf = vec![0.0; d];
        pmf[d - 1] = 1.0;
        Ok(RepetitionDistribution { pmf })
    }

    pub fn d_max(&self) -> usize {
        self.pmf.len()
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            self.pmf.get(d - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, p)| (k + 1) as f64 * p)
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return k + 1;
            }
        }
        // rounding left a sliver above the last cumulative value
        self.pmf.iter().rposition(|p| *p > 0.0).unwrap_or(0) + 1
    }
}

/// `T x (Q*M)` 0/1 access pattern, stored sparsely in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessMatrix {
    rbs: usize,
    cells: usize,
    users_per_cell: usize,
    /// Sorted RB indices of each column.
    columns: Vec<Vec<usize>>,
    /// Transmitters of each RB, in column order.
    rows: Vec<Vec<UserId>>,
}

impl AccessMatrix {
    /// Builds from explicit per-column RB lists (cell-major column order).
    pub fn from_columns(
        rbs: usize,
        cells: usize,
        users_per_cell: usize,
        mut columns: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if columns.len() != cells * users_per_cell {
            return Err(invalid("column count must equal Q*M"));
        }
        let mut rows = vec![Vec::new(); rbs];
        for (flat, col) in columns.iter_mut().enumerate() {
            col.sort_unstable();
            if col.windows(2).any(|w| w[0] == w[1]) || col.iter().any(|t| *t >= rbs) {
                return Err(invalid("column RB indices must be distinct and < T"));
            }
            let u = UserId::new(flat / users_per_cell, flat % users_per_cell);
            for &t in col.iter() {
                rows[t].push(u);
            }
        }
        Ok(AccessMatrix {
            rbs,
            cells,
            users_per_cell,
            columns,
            rows,
        })
    }

    pub fn rbs(&self) -> usize {
        self.rbs
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn users_per_cell(&self) -> usize {
        self.users_per_cell
    }

    /// `g_{t,j,i}`.
    pub fn g(&self, rb: usize, u: UserId) -> bool {
        self.columns[u.flat(self.users_per_cell)]
            .binary_search(&rb)
            .is_ok()
    }

    /// RBs in which `u` transmits a replica.
    pub fn replicas(&self, u: UserId) -> &[usize] {
        &self.columns[u.flat(self.users_per_cell)]
    }

    pub fn degree(&self, u: UserId) -> usize {
        self.replicas(u).len()
    }

    /// All users transmitting in `rb`, cell-major.
    pub fn transmitters(&self, rb: usize) -> &[UserId] {
        &self.rows[rb]
    }

    /// Dense `T x (Q*M)` view, mainly for inspection and tests.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let mut dense = vec![vec![0u8; self.columns.len()]; self.rbs];
        for (flat, col) in self.columns.iter().enumerate() {
            for &t in col {
                dense[t][flat] = 1;
            }
        }
        dense
    }
}

/// Each column draws `d ~ dist`, then a uniform `d`-subset of the `T` RBs.
pub fn build_access_matrix(
    stream: &RngStream,
    cells: usize,
    users_per_cell: usize,
    rbs: usize,
    dist: &RepetitionDistribution,
) -> Result<AccessMatrix> {
    if dist.d_max() > rbs {
        return Err(invalid(format!(
            "d_max ({}) exceeds the number of RBs ({rbs})",
            dist.d_max()
        )));
    }
    let mut rng = stream.rng();
    let columns = (0..cells * users_per_cell)
        .map(|_| {
            let d = dist.sample(&mut rng);
            rand::seq::index::sample(&mut rng, rbs, d).into_vec()
        })
        .collect();
    AccessMatrix::from_columns(rbs, cells, users_per_cell, columns)
}
