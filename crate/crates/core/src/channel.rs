//! Block-fading Rayleigh channels and received pilot signals.
//!
//! Only the columns of users that actually transmit in an RB are
//! materialized. Every column is drawn from its own substream keyed by
//! `(rb, bs, user)`, so which columns get drawn never changes their values.

use num_complex::Complex64;

use crate::access::AccessMatrix;
use crate::error::{invalid, Result};
use crate::numerics::{cn_sample, complex_gaussian, CMat, CVec, RngStream};
use crate::pilots::{PilotBook, Pilots};
use crate::topology::{Deployment, UserId};

/// Which users still contribute to the signal seen at a BS.
///
/// In-cell users drop out once decoded; out-of-cell users are never decoded
/// by this BS and always contribute, unless the sets are isolated, in which
/// case every BS sees its own cell only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndecodedSets {
    users_per_cell: usize,
    decoded: Vec<bool>,
    isolated: bool,
}

impl UndecodedSets {
    pub fn new(cells: usize, users_per_cell: usize) -> Self {
        UndecodedSets {
            users_per_cell,
            decoded: vec![false; cells * users_per_cell],
            isolated: false,
        }
    }

    /// Sets under which out-of-cell users are invisible to every BS.
    pub fn isolated(cells: usize, users_per_cell: usize) -> Self {
        UndecodedSets {
            isolated: true,
            ..Self::new(cells, users_per_cell)
        }
    }

    pub fn is_isolated(&self) -> bool {
        self.isolated
    }

    pub fn users_per_cell(&self) -> usize {
        self.users_per_cell
    }

    pub fn is_undecoded(&self, u: UserId) -> bool {
        !self.decoded[u.flat(self.users_per_cell)]
    }

    pub fn mark_decoded(&mut self, u: UserId) {
        self.decoded[u.flat(self.users_per_cell)] = true;
    }

    /// `u` is in `S_kq` if home cell, or in `S_1j` otherwise.
    pub fn contributes_at(&self, u: UserId, bs: usize) -> bool {
        if u.cell == bs {
            self.is_undecoded(u)
        } else {
            !self.isolated
        }
    }

    pub fn undecoded_in(&self, cell: usize) -> impl Iterator<Item = UserId> + '_ {
        (0..self.users_per_cell)
            .map(move |i| UserId::new(cell, i))
            .filter(|u| self.is_undecoded(*u))
    }
}

/// Channels from the transmitters of one RB to one BS.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlock {
    pub rb: usize,
    pub bs: usize,
    /// Transmitters, cell-major (same order as the access matrix row).
    pub users: Vec<UserId>,
    /// Column `c` is the channel of `users[c]`.
    pub h: CMat,
}

impl ChannelBlock {
    pub fn column_of(&self, u: UserId) -> Option<usize> {
        self.users.binary_search(&u).ok()
    }

    pub fn channel(&self, u: UserId) -> Option<CVec> {
        self.column_of(u).map(|c| self.h.column(c).into_owned())
    }
}

/// `h ~ CN(0, variance I_N)` from the substream reserved for `(rb, bs, u)`.
pub fn draw_channel_column(
    stream: &RngStream,
    rb: usize,
    bs: usize,
    u: UserId,
    users_per_cell: usize,
    antennas: usize,
    variance: f64,
) -> CVec {
    let mut rng = stream
        .child(&[rb as u64, bs as u64, u.flat(users_per_cell) as u64])
        .rng();
    CVec::from_fn(antennas, |_, _| cn_sample(&mut rng, variance))
}

/// Channels toward a set of base stations for every RB of the frame.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub antennas: usize,
    pub sigma_h2: f64,
    pub stations: Vec<usize>,
    blocks: Vec<ChannelBlock>,
}

impl ChannelSet {
    pub fn block(&self, rb: usize, bs: usize) -> &ChannelBlock {
        let slot = self
            .stations
            .iter()
            .position(|s| *s == bs)
            .expect("channels were not drawn toward this BS");
        &self.blocks[rb * self.stations.len() + slot]
    }
}

pub fn draw_channels(
    stream: &RngStream,
    deployment: &Deployment,
    access: &AccessMatrix,
    antennas: usize,
    sigma_h2: f64,
    stations: &[usize],
) -> Result<ChannelSet> {
    if antennas < 1 || access.rbs() < 1 {
        return Err(invalid("need N >= 1 and T >= 1"));
    }
    if !(sigma_h2 > 0.0) {
        return Err(invalid("fading variance must be positive"));
    }
    let m = deployment.users_per_cell;
    let mut blocks = Vec::with_capacity(access.rbs() * stations.len());
    for rb in 0..access.rbs() {
        for &bs in stations {
            let users = access.transmitters(rb).to_vec();
            let mut h = CMat::zeros(antennas, users.len());
            for (c, &u) in users.iter().enumerate() {
                let var = deployment.beta(u, bs) * sigma_h2;
                h.set_column(c, &draw_channel_column(stream, rb, bs, u, m, antennas, var));
            }
            blocks.push(ChannelBlock { rb, bs, users, h });
        }
    }
    Ok(ChannelSet {
        antennas,
        sigma_h2,
        stations: stations.to_vec(),
        blocks,
    })
}

/// Pilot-phase noise of one (RB, BS), held in the codebook's orthonormal
/// coordinates: the noise seen after despreading with codeword `k` is
/// `sqrt(tau p_tau) * w[:, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotNoise {
    pub w: CMat,
    pub variance: f64,
}

impl PilotNoise {
    pub fn draw(stream: &RngStream, antennas: usize, tau: usize, n0: f64) -> Result<Self> {
        let w = complex_gaussian(&mut stream.rng(), antennas, tau, n0)?;
        Ok(PilotNoise { w, variance: n0 })
    }

    pub fn zero(antennas: usize, tau: usize) -> Self {
        PilotNoise {
            w: CMat::zeros(antennas, tau),
            variance: 0.0,
        }
    }

    /// Noise as added to the `N x tau` received pilot, `W U^H` with `U` the
    /// unit-norm codebook. Unitary rotation keeps the entries i.i.d. `CN(0, N0)`.
    pub fn in_symbol_basis(&self, book: &PilotBook) -> CMat {
        let scale = 1.0 / book.codeword_energy().sqrt();
        &self.w * book.columns.adjoint() * Complex64::new(scale, 0.0)
    }
}

/// Received pilot `Y` of one (RB, BS).
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub rb: usize,
    pub bs: usize,
    pub y: CMat,
    pub noise_variance: f64,
}

/// `Y = sum g h p^H + noise` over users still contributing at `block.bs`.
pub fn received_pilot(
    block: &ChannelBlock,
    pilots: &Pilots,
    sets: &UndecodedSets,
    noise: &CMat,
    noise_variance: f64,
) -> PilotObservation {
    let mut y = noise.clone();
    for (c, &u) in block.users.iter().enumerate() {
        if sets.contributes_at(u, block.bs) {
            let p = pilots.vector(u);
            y += block.h.column(c) * p.adjoint();
        }
    }
    PilotObservation {
        rb: block.rb,
        bs: block.bs,
        y,
        noise_variance,
    }
}

/// `Y Phi`: the received pilot correlated with every codeword.
///
/// Equal to `received_pilot(.., noise.in_symbol_basis(book), ..).y * Phi`,
/// computed in `O(N (tau + users))` without forming `Y`.
pub fn despread_pilot(
    block: &ChannelBlock,
    pilots: &Pilots,
    sets: &UndecodedSets,
    noise: &PilotNoise,
) -> CMat {
    let energy = pilots.book.codeword_energy();
    let mut z = &noise.w * Complex64::new(energy.sqrt(), 0.0);
    for (c, &u) in block.users.iter().enumerate() {
        if sets.contributes_at(u, block.bs) {
            let k = pilots.class(u);
            let w = Complex64::new(energy * pilots.amplitude(u), 0.0);
            let mut col = z.column_mut(k);
            col.axpy(w, &block.h.column(c), Complex64::new(1.0, 0.0));
        }
    }
    z
}
