//! Iterative SINR-threshold decoding with successive interference
//! cancellation, run independently by every base station.

use serde::{Deserialize, Serialize};

use crate::access::{build_access_matrix, AccessMatrix, RepetitionDistribution};
use crate::channel::{despread_pilot, draw_channels, received_pilot, ChannelSet, PilotNoise, UndecodedSets};
use crate::error::{invalid, Result};
use crate::estimation::{EstimateBlock, EstimatorForm, StackedUsers};
use crate::numerics::{tag, RngStream};
use crate::pilots::{assign_pilots, dft_codebook, PilotPolicy, Pilots};
use crate::receiver::{sinr_table, CombinerKind, SinrBreakdown};
use crate::topology::{build_grid, Deployment, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeOrder {
    /// Every user above threshold in the current table decodes at once.
    #[default]
    Batch,
    /// Only the strongest user above threshold decodes before recomputing.
    Greedy,
}

/// How channel estimates are formed from the received pilots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorPath {
    /// Closed form on the despread codebook observation.
    #[default]
    Codebook,
    /// Generic joint MMSE on the full `N x tau` observation.
    General,
}

/// Everything needed to draw one Monte Carlo realization.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub grid_side: usize,
    pub cell_size_m: f64,
    pub users_per_cell: usize,
    pub rbs: usize,
    pub antennas: usize,
    pub tau: usize,
    pub repetitions: RepetitionDistribution,
    pub pilot_policy: PilotPolicy,
    pub p: f64,
    pub p_tau: f64,
    pub sigma_h2: f64,
    pub n0: f64,
}

/// One realization of positions, access pattern, pilots, channels and
/// pilot noise toward a chosen set of base stations.
#[derive(Debug, Clone)]
pub struct RunInstance {
    pub deployment: Deployment,
    pub access: AccessMatrix,
    pub pilots: Pilots,
    pub channels: ChannelSet,
    /// Indexed `rb * stations + slot`, matching `channels`.
    noise: Vec<PilotNoise>,
    pub sigma_h2: f64,
    pub n0: f64,
}

impl RunInstance {
    pub fn generate(stream: &RngStream, spec: &InstanceSpec, stations: &[usize]) -> Result<Self> {
        if !(spec.n0 > 0.0) {
            return Err(invalid("noise variance must be positive"));
        }
        let grid = build_grid(spec.grid_side, spec.cell_size_m)?;
        let cells = grid.num_cells();
        if let Some(bad) = stations.iter().find(|s| **s >= cells) {
            return Err(invalid(format!("station {bad} outside a {cells}-cell grid")));
        }
        let m = spec.users_per_cell;
        let deployment = Deployment::sample(&stream.child(&[tag::DROP]), grid, m, spec.p, spec.p_tau)?;
        let access = build_access_matrix(&stream.child(&[tag::ACCESS]), cells, m, spec.rbs, &spec.repetitions)?;
        let book = dft_codebook(spec.tau, spec.p_tau)?;
        let assignment = assign_pilots(&stream.child(&[tag::PILOTS]), cells, m, &book, spec.pilot_policy)?;
        let pilots = Pilots::new(book, assignment, &deployment);
        let channels = draw_channels(
            &stream.child(&[tag::CHANNEL]),
            &deployment,
            &access,
            spec.antennas,
            spec.sigma_h2,
            stations,
        )?;
        let noise_stream = stream.child(&[tag::NOISE]);
        let mut noise = Vec::with_capacity(spec.rbs * stations.len());
        for rb in 0..spec.rbs {
            for &bs in stations {
                let s = noise_stream.child(&[rb as u64, bs as u64]);
                noise.push(PilotNoise::draw(&s, spec.antennas, spec.tau, spec.n0)?);
            }
        }
        Ok(RunInstance {
            deployment,
            access,
            pilots,
            channels,
            noise,
            sigma_h2: spec.sigma_h2,
            n0: spec.n0,
        })
    }

    pub fn pilot_noise(&self, rb: usize, bs: usize) -> &PilotNoise {
        let slot = self
            .channels
            .stations
            .iter()
            .position(|s| *s == bs)
            .expect("pilot noise was not drawn for this BS");
        &self.noise[rb * self.channels.stations.len() + slot]
    }

    /// Estimates at `bs` in `rb` given the current undecoded sets.
    pub fn estimate(&self, rb: usize, bs: usize, sets: &UndecodedSets, path: EstimatorPath) -> Result<EstimateBlock> {
        let block = self.channels.block(rb, bs);
        let layout = StackedUsers::gather(block, &self.deployment, sets, self.sigma_h2);
        let noise = self.pilot_noise(rb, bs);
        match path {
            EstimatorPath::Codebook => {
                let z = despread_pilot(block, &self.pilots, sets, noise);
                EstimateBlock::codebook(&z, layout, &self.pilots, self.n0)
            }
            EstimatorPath::General => {
                let w = noise.in_symbol_basis(&self.pilots.book);
                let obs = received_pilot(block, &self.pilots, sets, &w, self.n0);
                EstimateBlock::general(&obs.y, layout, &self.pilots, self.n0, EstimatorForm::Auto)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderParams {
    /// Linear SINR threshold.
    pub gamma_th: f64,
    pub combiner: CombinerKind,
    pub order: DecodeOrder,
    pub estimator: EstimatorPath,
    /// Hide out-of-cell users from every BS.
    pub isolate: bool,
}

/// SINR of every undecoded in-cell transmitter of `rb` at BS `cell`.
pub fn rb_sinrs(
    instance: &RunInstance,
    params: &DecoderParams,
    sets: &UndecodedSets,
    rb: usize,
    cell: usize,
) -> Result<Vec<(UserId, SinrBreakdown)>> {
    let has_target = instance
        .access
        .transmitters(rb)
        .iter()
        .any(|u| u.cell == cell && sets.is_undecoded(*u));
    if !has_target {
        return Ok(Vec::new());
    }
    let block = instance.estimate(rb, cell, sets, params.estimator)?;
    let table = sinr_table(&block, params.combiner, instance.n0)?;
    Ok(block.layout.users[..block.layout.in_cell].iter().copied().zip(table).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub cell: usize,
    pub decoded: usize,
    pub throughput: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub cells: Vec<CellMetrics>,
}

impl RunMetrics {
    pub fn cell(&self, cell: usize) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.cell == cell)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub sets: UndecodedSets,
    /// Iteration (1-based) in which each flat user was decoded.
    pub decoded_at: Vec<Option<usize>>,
}

impl DecoderState {
    pub fn decoded_in(&self, cell: usize, users_per_cell: usize) -> usize {
        self.decoded_at[cell * users_per_cell..(cell + 1) * users_per_cell]
            .iter()
            .filter(|d| d.is_some())
            .count()
    }
}

/// Decodes the given cells, each on its own, and reports per-cell metrics.
pub fn sic_decode(instance: &RunInstance, params: &DecoderParams, cells: &[usize]) -> Result<(RunMetrics, DecoderState)> {
    decode_impl(instance, params, cells, false)
}

fn decode_impl(
    instance: &RunInstance,
    params: &DecoderParams,
    cells: &[usize],
    reverse_candidates: bool,
) -> Result<(RunMetrics, DecoderState)> {
    if !(params.gamma_th > 0.0) {
        return Err(invalid(format!("threshold must be positive, got {}", params.gamma_th)));
    }
    let m = instance.deployment.users_per_cell;
    let q = instance.deployment.num_cells();
    let mut state = DecoderState {
        sets: if params.isolate {
            UndecodedSets::isolated(q, m)
        } else {
            UndecodedSets::new(q, m)
        },
        decoded_at: vec![None; q * m],
    };
    let rbs = instance.access.rbs();
    let mut metrics = Vec::with_capacity(cells.len());
    for &cell in cells {
        let mut tables: Vec<Vec<(UserId, SinrBreakdown)>> = vec![Vec::new(); rbs];
        let mut dirty = vec![true; rbs];
        let mut iterations = 0;
        // each productive iteration decodes at least one of M users
        while iterations <= m {
            iterations += 1;
            for rb in 0..rbs {
                if dirty[rb] {
                    tables[rb] = rb_sinrs(instance, params, &state.sets, rb, cell)?;
                    dirty[rb] = false;
                }
            }
            let mut best: Vec<Option<f64>> = vec![None; m];
            for (u, s) in tables.iter().flatten() {
                if s.sinr >= params.gamma_th {
                    let slot = &mut best[u.user];
                    *slot = Some(slot.map_or(s.sinr, |b: f64| b.max(s.sinr)));
                }
            }
            let mut winners: Vec<usize> = (0..m).filter(|i| best[*i].is_some()).collect();
            if winners.is_empty() {
                break;
            }
            if params.order == DecodeOrder::Greedy {
                // strongest first, ties to the lowest index
                let top = winners
                    .iter()
                    .copied()
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(j) if best[j] >= best[i] => Some(j),
                        _ => Some(i),
                    })
                    .expect("non-empty");
                winners = vec![top];
            }
            if reverse_candidates {
                winners.reverse();
            }
            for i in winners {
                let u = UserId::new(cell, i);
                state.sets.mark_decoded(u);
                state.decoded_at[u.flat(m)] = Some(iterations);
                for &rb in instance.access.replicas(u) {
                    dirty[rb] = true;
                }
            }
        }
        let decoded = state.decoded_in(cell, m);
        metrics.push(CellMetrics {
            cell,
            decoded,
            throughput: throughput(decoded, rbs),
            iterations,
        });
    }
    Ok((RunMetrics { cells: metrics }, state))
}

/// Decoded packets per RB.
pub fn throughput(decoded: usize, rbs: usize) -> f64 {
    decoded as f64 / rbs as f64
}
