//! Orthogonal DFT pilot codebook and pilot assignment.
//!
//! Users pick codebook directions; each user's pilot is then scaled to its
//! own path-loss-inverted pilot power, `||p_u||^2 = tau * p_pilot(u)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{gram, max_abs, CMat, CVec, RngStream};
use crate::topology::{Deployment, UserId};

/// `tau` mutually orthogonal pilots of squared norm `tau * p_tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBook {
    pub tau: usize,
    pub p_tau: f64,
    /// Column `c` is pilot `c`.
    pub columns: CMat,
    /// Columns are mutually orthogonal with equal norm (checked on construction).
    pub orthogonal: bool,
}

impl PilotBook {
    /// Arbitrary `tau x tau` codebook; `p_tau` is its nominal per-symbol power.
    pub fn from_columns(columns: CMat, p_tau: f64) -> Result<Self> {
        let tau = columns.nrows();
        if tau < 1 || columns.ncols() != tau {
            return Err(invalid("codebook must be a non-empty tau x tau matrix"));
        }
        if !(p_tau > 0.0) {
            return Err(invalid(format!("pilot power must be positive, got {p_tau}")));
        }
        let energy = tau as f64 * p_tau;
        let g = gram(&columns);
        let target = CMat::identity(tau, tau) * Complex64::new(energy, 0.0);
        let orthogonal = max_abs(&(g - target)) <= 1e-10 * energy;
        Ok(PilotBook {
            tau,
            p_tau,
            columns,
            orthogonal,
        })
    }

    /// `||phi||^2 = tau * p_tau` for every codeword.
    pub fn codeword_energy(&self) -> f64 {
        self.tau as f64 * self.p_tau
    }
}

/// Entry `(r, c) = sqrt(p_tau) * exp(-2 pi i r c / tau)`.
pub fn dft_codebook(tau: usize, p_tau: f64) -> Result<PilotBook> {
    if tau < 1 {
        return Err(invalid("pilot length must be at least 1"));
    }
    if !(p_tau > 0.0) {
        return Err(invalid(format!("pilot power must be positive, got {p_tau}")));
    }
    let amp = p_tau.sqrt();
    let columns = CMat::from_fn(tau, tau, |r, c| {
        // reduce the exponent first so large tau keeps full phase precision
        let k = (r * c) % tau;
        Complex64::from_polar(amp, -2.0 * PI * k as f64 / tau as f64)
    });
    Ok(PilotBook {
        tau,
        p_tau,
        columns,
        orthogonal: true,
    })
}

/// How codebook indices are handed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotPolicy {
    /// Distinct within each cell when `tau >= M`, otherwise i.i.d. uniform.
    #[default]
    Auto,
    /// Random permutation slice per cell; requires `tau >= M`.
    DistinctWithinCell,
    /// Every user draws an index uniformly and independently.
    Uniform,
}

/// Codebook index of every user plus the derived reuse classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotAssignment {
    pub tau: usize,
    pub cells: usize,
    pub users_per_cell: usize,
    /// Codebook index, cell-major.
    index: Vec<usize>,
}

impl PilotAssignment {
    pub fn from_indices(
        tau: usize,
        cells: usize,
        users_per_cell: usize,
        index: Vec<usize>,
    ) -> Result<Self> {
        if index.len() != cells * users_per_cell || index.iter().any(|k| *k >= tau) {
            return Err(invalid("need one index < tau per user"));
        }
        Ok(PilotAssignment {
            tau,
            cells,
            users_per_cell,
            index,
        })
    }

    pub fn index(&self, u: UserId) -> usize {
        self.index[u.flat(self.users_per_cell)]
    }

    /// All users sharing `u`'s pilot, `u` included, cell-major.
    pub fn reuse_set(&self, u: UserId) -> Vec<UserId> {
        let k = self.index(u);
        let m = self.users_per_cell;
        self.index
            .iter()
            .enumerate()
            .filter(|(_, idx)| **idx == k)
            .map(|(flat, _)| UserId::new(flat / m, flat % m))
            .collect()
    }
}

pub fn assign_pilots(
    stream: &RngStream,
    cells: usize,
    users_per_cell: usize,
    book: &PilotBook,
    policy: PilotPolicy,
) -> Result<PilotAssignment> {
    let tau = book.tau;
    let distinct = match policy {
        PilotPolicy::Auto => tau >= users_per_cell,
        PilotPolicy::DistinctWithinCell if tau < users_per_cell => {
            return Err(invalid(format!(
                "cannot give {users_per_cell} users distinct pilots from a codebook of {tau}"
            )))
        }
        PilotPolicy::DistinctWithinCell => true,
        PilotPolicy::Uniform => false,
    };
    let mut rng = stream.rng();
    let mut index = Vec::with_capacity(cells * users_per_cell);
    let mut perm: Vec<usize> = (0..tau).collect();
    for _ in 0..cells {
        if distinct {
            perm.shuffle(&mut rng);
            index.extend_from_slice(&perm[..users_per_cell]);
        } else {
            index.extend((0..users_per_cell).map(|_| rng.random_range(0..tau)));
        }
    }
    PilotAssignment::from_indices(tau, cells, users_per_cell, index)
}

/// Codebook + assignment bound to per-user pilot powers.
#[derive(Debug, Clone)]
pub struct Pilots {
    pub book: PilotBook,
    pub assignment: PilotAssignment,
    /// `sqrt(p_pilot(u) / p_tau)`: amplitude applied to the codeword.
    amplitude: Vec<f64>,
}

impl Pilots {
    pub fn new(book: PilotBook, assignment: PilotAssignment, deployment: &Deployment) -> Self {
        let amplitude = deployment
            .users()
            .map(|u| (deployment.pilot_power(u) / book.p_tau).sqrt())
            .collect();
        Pilots {
            book,
            assignment,
            amplitude,
        }
    }

    pub fn tau(&self) -> usize {
        self.book.tau
    }

    pub fn class(&self, u: UserId) -> usize {
        self.assignment.index(u)
    }

    pub fn amplitude(&self, u: UserId) -> f64 {
        self.amplitude[u.flat(self.assignment.users_per_cell)]
    }

    pub fn vector(&self, u: UserId) -> CVec {
        self.book.columns.column(self.class(u)) * Complex64::new(self.amplitude(u), 0.0)
    }

    /// Pilots of `users` as the columns of a `tau x len` matrix.
    pub fn stack(&self, users: &[UserId]) -> CMat {
        let mut out = CMat::zeros(self.tau(), users.len());
        for (c, u) in users.iter().enumerate() {
            out.set_column(c, &self.vector(*u));
        }
        out
    }
}
