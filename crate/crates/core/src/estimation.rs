//! Joint MMSE channel estimation under pilot contamination.
//!
//! A BS estimates, in every RB and decoding iteration, the channels of all
//! users whose pilots it currently receives: its own undecoded transmitters
//! followed by every out-of-cell transmitter. Two routes are provided:
//!
//! * [`mmse_estimate`] / [`EstimateBlock::general`]: any pilot matrix,
//!   solving either the `M x M` (user-space) or the `tau x tau`
//!   (pilot-space) system;
//! * [`EstimateBlock::codebook`] / [`reuse_variance`]: the closed form for
//!   pilots drawn from an orthogonal codebook, where users only couple
//!   through shared codewords.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelBlock, UndecodedSets};
use crate::error::{invalid, Error, Result};
use crate::numerics::{add_diagonal, gram, hermitian_solve, hermitize, scale_columns, weighted_outer, CMat};
use crate::pilots::Pilots;
use crate::topology::{Deployment, UserId};

/// Users seen by one BS in one RB at one iteration, stacked with the
/// in-cell undecoded transmitters first and all out-of-cell transmitters
/// after them (cell-major within each group).
#[derive(Debug, Clone, PartialEq)]
pub struct StackedUsers {
    pub rb: usize,
    pub bs: usize,
    pub users: Vec<UserId>,
    /// Number of leading in-cell columns.
    pub in_cell: usize,
    /// `beta_u^bs * sigma_h^2`, the diagonal of the stacked path-loss matrix.
    pub gains: Vec<f64>,
    pub data_power: Vec<f64>,
    pub pilot_power: Vec<f64>,
}

impl StackedUsers {
    pub fn gather(
        block: &ChannelBlock,
        deployment: &Deployment,
        sets: &UndecodedSets,
        sigma_h2: f64,
    ) -> Self {
        let bs = block.bs;
        let active = block.users.iter().filter(|u| sets.contributes_at(**u, bs));
        let (inside, outside): (Vec<UserId>, Vec<UserId>) = active.partition(|u| u.cell == bs);
        let in_cell = inside.len();
        let users: Vec<UserId> = inside.into_iter().chain(outside).collect();
        StackedUsers {
            rb: block.rb,
            bs,
            in_cell,
            gains: users.iter().map(|u| deployment.beta(*u, bs) * sigma_h2).collect(),
            data_power: users.iter().map(|u| deployment.data_power(*u)).collect(),
            pilot_power: users.iter().map(|u| deployment.pilot_power(*u)).collect(),
            users,
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn position(&self, u: UserId) -> Option<usize> {
        self.users.iter().position(|v| *v == u)
    }

    /// Columns of `block.h` in stacked order.
    pub fn channels(&self, block: &ChannelBlock) -> CMat {
        let mut h = CMat::zeros(block.h.nrows(), self.len());
        for (c, u) in self.users.iter().enumerate() {
            let src = block.column_of(*u).expect("stacked user missing from channel block");
            h.set_column(c, &block.h.column(src));
        }
        h
    }
}

/// Which linear system the general estimator solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorForm {
    /// Whichever of the two is smaller.
    #[default]
    Auto,
    /// `P B (P^H P B + N0 I_M)^-1`.
    UserSpace,
    /// `(P B P^H + N0 I_tau)^-1 P B`.
    PilotSpace,
}

/// Joint MMSE estimate `Y C` of the stacked channels, returned with the
/// correlation matrix `C` (`tau x M`) whose columns are the per-user filters.
pub fn mmse_estimate(
    y: &CMat,
    pilots: &CMat,
    gains: &[f64],
    n0: f64,
    form: EstimatorForm,
) -> Result<(CMat, CMat)> {
    if !(n0 > 0.0) {
        return Err(invalid(format!("noise variance must be positive, got {n0}")));
    }
    let (tau, m) = (pilots.nrows(), pilots.ncols());
    if y.ncols() != tau || gains.len() != m {
        return Err(Error::ContractViolation(format!(
            "Y is {}x{}, pilots {tau}x{m}, {} gains",
            y.nrows(),
            y.ncols(),
            gains.len()
        )));
    }
    let c = correlation_matrix(pilots, gains, n0, form)?;
    Ok((y * &c, c))
}

fn correlation_matrix(pilots: &CMat, gains: &[f64], n0: f64, form: EstimatorForm) -> Result<CMat> {
    let (tau, m) = (pilots.nrows(), pilots.ncols());
    if m == 0 {
        return Ok(CMat::zeros(tau, 0));
    }
    let form = match form {
        EstimatorForm::Auto if m <= tau => EstimatorForm::UserSpace,
        EstimatorForm::Auto => EstimatorForm::PilotSpace,
        f => f,
    };
    let root: Vec<f64> = gains.iter().map(|b| b.sqrt()).collect();
    match form {
        EstimatorForm::UserSpace => {
            // P B (P^H P B + N0 I)^-1 = P B^1/2 (B^1/2 P^H P B^1/2 + N0 I)^-1 B^1/2,
            // which keeps the system Hermitian.
            let mut s = gram(pilots);
            for j in 0..m {
                for i in 0..m {
                    s[(i, j)] *= root[i] * root[j];
                }
            }
            hermitize(&mut s);
            add_diagonal(&mut s, n0);
            let rhs = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
                m,
                root.iter().map(|r| Complex64::new(*r, 0.0)),
            ));
            let x = hermitian_solve(&s, &rhs)?;
            Ok(scale_columns(pilots, &root) * x)
        }
        _ => {
            let mut r = weighted_outer(pilots, gains);
            add_diagonal(&mut r, n0);
            hermitian_solve(&r, &scale_columns(pilots, gains))
        }
    }
}

/// Per-column error variances from the filter columns: the ratio of the
/// filtered noise-plus-other-users power to the total filtered power.
pub fn error_variances(c: &CMat, pilots: &CMat, gains: &[f64], n0: f64) -> Vec<f64> {
    let m = pilots.ncols();
    // cross[(n, u)] = p_n^H c_u
    let cross = pilots.adjoint() * c;
    (0..m)
        .map(|u| {
            let noise = n0 * c.column(u).norm_squared();
            let others: f64 = (0..m)
                .filter(|n| *n != u)
                .map(|n| cross[(n, u)].norm_sqr() * gains[n])
                .sum();
            let own = cross[(u, u)].norm_sqr() * gains[u];
            gains[u] * (noise + others) / (noise + others + own)
        })
        .collect()
}

/// Estimates, filters and error variances for one (RB, BS, iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBlock {
    pub layout: StackedUsers,
    /// `N x M` stacked estimates.
    pub h_hat: CMat,
    /// `tau x M` filters; `h_hat = Y * c`.
    pub c: CMat,
    /// Per-entry error variance of each column.
    pub delta: Vec<f64>,
}

impl EstimateBlock {
    /// General route from the full received pilot.
    pub fn general(
        y: &CMat,
        layout: StackedUsers,
        pilots: &Pilots,
        n0: f64,
        form: EstimatorForm,
    ) -> Result<Self> {
        let p_bar = pilots.stack(&layout.users);
        let (h_hat, c) = mmse_estimate(y, &p_bar, &layout.gains, n0, form)?;
        let delta = error_variances(&c, &p_bar, &layout.gains, n0);
        Ok(EstimateBlock {
            layout,
            h_hat,
            c,
            delta,
        })
    }

    /// Orthogonal-codebook route from the despread observation `Y Phi`.
    pub fn codebook(z: &CMat, layout: StackedUsers, pilots: &Pilots, n0: f64) -> Result<Self> {
        if !pilots.book.orthogonal {
            return Err(Error::ContractViolation(
                "codebook estimator needs an orthogonal codebook".into(),
            ));
        }
        if !(n0 > 0.0) {
            return Err(invalid(format!("noise variance must be positive, got {n0}")));
        }
        let tau = pilots.tau() as f64;
        let m = layout.len();
        let class: Vec<usize> = layout.users.iter().map(|u| pilots.class(*u)).collect();
        let mut loading = vec![0.0; pilots.tau()];
        for u in 0..m {
            loading[class[u]] += tau * layout.pilot_power[u] * layout.gains[u];
        }
        let mut h_hat = CMat::zeros(z.nrows(), m);
        let mut c = CMat::zeros(pilots.tau(), m);
        let mut delta = Vec::with_capacity(m);
        for (u, &k) in class.iter().enumerate() {
            let den = n0 + loading[k];
            let b = layout.gains[u];
            let amp = pilots.amplitude(layout.users[u]);
            let w = Complex64::new(amp * b / den, 0.0);
            h_hat.set_column(u, &(z.column(k) * w));
            c.set_column(u, &(pilots.book.columns.column(k) * w));
            let own = tau * layout.pilot_power[u] * b;
            delta.push(b * (den - own) / den);
        }
        Ok(EstimateBlock {
            layout,
            h_hat,
            c,
            delta,
        })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Estimate variance `beta sigma_h^2 - delta` of column `col`.
    pub fn estimate_variance(&self, col: usize) -> f64 {
        self.layout.gains[col] - self.delta[col]
    }
}

/// Estimate variance and error variance of one user under codebook pilots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReuseVariance {
    pub varsigma: f64,
    pub delta: f64,
}

/// Closed form for orthogonal-codebook pilots: only users on the target's
/// codeword that are currently received by `layout.bs` load the estimate.
/// A user absent from the layout (not transmitting, or decoded) has no
/// estimate: `varsigma = 0`, `delta = beta sigma_h^2`.
pub fn reuse_variance(
    target: UserId,
    layout: &StackedUsers,
    pilots: &Pilots,
    deployment: &Deployment,
    sigma_h2: f64,
    n0: f64,
) -> Result<ReuseVariance> {
    if !pilots.book.orthogonal {
        return Err(Error::ContractViolation(
            "closed-form reuse variance needs an orthogonal codebook".into(),
        ));
    }
    let b = deployment.beta(target, layout.bs) * sigma_h2;
    let Some(pos) = layout.position(target) else {
        return Ok(ReuseVariance {
            varsigma: 0.0,
            delta: b,
        });
    };
    let tau = pilots.tau() as f64;
    let k = pilots.class(target);
    let sharers: f64 = layout
        .users
        .iter()
        .enumerate()
        .filter(|(_, u)| pilots.class(**u) == k)
        .map(|(n, _)| tau * layout.pilot_power[n] * layout.gains[n])
        .sum();
    let varsigma = tau * layout.pilot_power[pos] * b * b / (n0 + sharers);
    Ok(ReuseVariance {
        varsigma,
        delta: b - varsigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{complex_gaussian, derive_stream, max_abs};
    use crate::pilots::{dft_codebook, PilotAssignment};
    use crate::topology::build_grid;

    fn random_instance(seed: u64, tau: usize, m: usize, n: usize) -> (CMat, CMat, Vec<f64>) {
        let mut rng = derive_stream(seed, &[]).rng();
        let p = complex_gaussian(&mut rng, tau, m, 1.0).unwrap();
        let gains: Vec<f64> = (0..m).map(|k| 0.05 + (k as f64 * 0.37) % 1.0).collect();
        let y = complex_gaussian(&mut rng, n, tau, 1.0).unwrap();
        (y, p, gains)
    }

    #[test]
    fn forms_agree() {
        for (seed, (tau, m)) in [(1, (3, 7)), (2, (7, 3)), (3, (5, 5)), (4, (1, 4))] {
            let (y, p, g) = random_instance(seed, tau, m, 4);
            let (h1, c1) = mmse_estimate(&y, &p, &g, 0.1, EstimatorForm::UserSpace).unwrap();
            let (h2, c2) = mmse_estimate(&y, &p, &g, 0.1, EstimatorForm::PilotSpace).unwrap();
            assert!(max_abs(&(&h1 - &h2)) <= 1e-9 * max_abs(&h1));
            assert!(max_abs(&(&c1 - &c2)) <= 1e-9 * max_abs(&c1));
        }
    }

    #[test]
    fn rejects_bad_noise_and_shapes() {
        let (y, p, g) = random_instance(5, 3, 2, 2);
        assert!(matches!(
            mmse_estimate(&y, &p, &g, 0.0, EstimatorForm::Auto),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            mmse_estimate(&y, &p, &g[..1], 0.1, EstimatorForm::Auto),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn noiseless_limit_recovers_channels() {
        // full column rank pilots (tau >= M), N0 -> 0
        let mut rng = derive_stream(6, &[]).rng();
        let (tau, m, n) = (6, 4, 5);
        let p = complex_gaussian(&mut rng, tau, m, 1.0).unwrap();
        let h = complex_gaussian(&mut rng, n, m, 1.0).unwrap();
        let y = &h * p.adjoint();
        let (h_hat, _) = mmse_estimate(&y, &p, &[1.0; 4], 1e-9, EstimatorForm::Auto).unwrap();
        assert!(max_abs(&(h_hat - h)) <= 1e-3);
    }

    #[test]
    fn shared_pilot_estimates_collinear() {
        let mut rng = derive_stream(7, &[]).rng();
        let pilot = complex_gaussian(&mut rng, 4, 1, 1.0).unwrap();
        let p = CMat::from_columns(&[pilot.column(0).into_owned(), pilot.column(0).into_owned()]);
        let y = complex_gaussian(&mut rng, 6, 4, 1.0).unwrap();
        let (h_hat, _) = mmse_estimate(&y, &p, &[0.8, 0.2], 0.05, EstimatorForm::Auto).unwrap();
        let (a, b) = (h_hat.column(0), h_hat.column(1));
        assert!((a.dotc(&b).norm() / (a.norm() * b.norm()) - 1.0).abs() < 1e-9);
        assert!((a.norm() / b.norm() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn ratio_matches_direct_posterior_variance() {
        // delta_u = b_u - b_u^2 p_u^H (P B P^H + N0 I)^-1 p_u
        for seed in 0..20 {
            let (_, p, g) = random_instance(100 + seed, 4, 6, 1);
            let n0 = 0.3;
            let c = correlation_matrix(&p, &g, n0, EstimatorForm::Auto).unwrap();
            let delta = error_variances(&c, &p, &g, n0);
            let mut r = weighted_outer(&p, &g);
            add_diagonal(&mut r, n0);
            let x = hermitian_solve(&r, &p).unwrap();
            for u in 0..6 {
                let q = p.column(u).dotc(&x.column(u)).re;
                let direct = g[u] - g[u] * g[u] * q;
                assert!((delta[u] - direct).abs() <= 1e-10 * g[u]);
                assert!(delta[u] > 0.0 && delta[u] <= g[u]);
            }
        }
    }

    #[test]
    fn single_user_scalar_cases() {
        let (tau, pp, b, n0) = (4usize, 2.0f64, 0.5, 0.1);
        let p = dft_codebook(tau, 1.0).unwrap().columns.columns(0, 1) * Complex64::new(pp.sqrt(), 0.0);
        let c = correlation_matrix(&p, &[b], n0, EstimatorForm::Auto).unwrap();
        let delta = error_variances(&c, &p, &[b], n0);
        let expect = b * n0 / (n0 + tau as f64 * pp * b);
        assert!((delta[0] - expect).abs() < 1e-14);
        // noise swamps the pilot: no information
        let c = correlation_matrix(&p, &[b], 1e12, EstimatorForm::Auto).unwrap();
        let delta = error_variances(&c, &p, &[b], 1e12);
        assert!((delta[0] / b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn codebook_route_matches_general_route() {
        let grid = build_grid(3, 250.0).unwrap();
        let dep = Deployment::sample(&derive_stream(3, &[0]), grid, 5, 0.01, 0.02).unwrap();
        let book = dft_codebook(3, 0.02).unwrap();
        let idx: Vec<usize> = (0..45).map(|k| (k * 7 + k / 5) % 3).collect();
        let pilots = Pilots::new(book, PilotAssignment::from_indices(3, 9, 5, idx).unwrap(), &dep);
        let users: Vec<UserId> = [(4, 0), (4, 2), (4, 3), (0, 1), (1, 4), (5, 0), (8, 2)]
            .iter()
            .map(|(j, i)| UserId::new(*j, *i))
            .collect();
        let layout = StackedUsers {
            rb: 0,
            bs: 4,
            in_cell: 3,
            gains: users.iter().map(|u| dep.beta(*u, 4)).collect(),
            data_power: users.iter().map(|u| dep.data_power(*u)).collect(),
            pilot_power: users.iter().map(|u| dep.pilot_power(*u)).collect(),
            users,
        };
        let mut rng = derive_stream(3, &[1]).rng();
        let y = complex_gaussian(&mut rng, 4, 3, 1.0).unwrap();
        let z = &y * &pilots.book.columns;
        let n0 = 1e-3;
        let g = EstimateBlock::general(&y, layout.clone(), &pilots, n0, EstimatorForm::Auto).unwrap();
        let f = EstimateBlock::codebook(&z, layout.clone(), &pilots, n0).unwrap();
        assert!(max_abs(&(&g.h_hat - &f.h_hat)) <= 1e-9 * max_abs(&g.h_hat));
        assert!(max_abs(&(&g.c - &f.c)) <= 1e-9 * max_abs(&g.c));
        for u in 0..layout.len() {
            let rv = reuse_variance(layout.users[u], &layout, &pilots, &dep, 1.0, n0).unwrap();
            assert!((g.delta[u] - f.delta[u]).abs() <= 1e-9 * layout.gains[u]);
            assert!((rv.varsigma - g.estimate_variance(u)).abs() <= 1e-9 * rv.varsigma);
            assert!((rv.delta - (layout.gains[u] - rv.varsigma)).abs() <= 1e-12 * layout.gains[u]);
        }
        // not in the layout: no estimate at all
        let rv = reuse_variance(UserId::new(4, 1), &layout, &pilots, &dep, 1.0, n0).unwrap();
        assert_eq!(rv.varsigma, 0.0);
        assert_eq!(rv.delta, dep.beta(UserId::new(4, 1), 4));
    }

    #[test]
    fn reuse_closed_form_limits() {
        let grid = build_grid(1, 250.0).unwrap();
        let dep = Deployment::new(grid, vec![vec![[125.0, 135.0], [135.0, 125.0]]], 1.0, 1.0).unwrap();
        let book = dft_codebook(2, 1.0).unwrap();
        let u0 = UserId::new(0, 0);
        let b = dep.beta(u0, 0);
        let mk = |idx: Vec<usize>| Pilots::new(book.clone(), PilotAssignment::from_indices(2, 1, 2, idx).unwrap(), &dep);
        let layout = StackedUsers {
            rb: 0,
            bs: 0,
            in_cell: 2,
            users: vec![u0, UserId::new(0, 1)],
            gains: vec![b, b],
            data_power: vec![1.0, 1.0],
            pilot_power: vec![1.0, 1.0],
        };
        // no sharers
        let rv = reuse_variance(u0, &layout, &mk(vec![0, 1]), &dep, 1.0, 0.2).unwrap();
        assert!((rv.varsigma - 2.0 * b * b / (0.2 + 2.0 * b)).abs() < 1e-15);
        // one equal-gain sharer, N0 -> 0
        let rv = reuse_variance(u0, &layout, &mk(vec![1, 1]), &dep, 1.0, 1e-14).unwrap();
        assert!((rv.varsigma / (b / 2.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn codebook_route_rejects_non_orthogonal() {
        let grid = build_grid(1, 250.0).unwrap();
        let dep = Deployment::new(grid, vec![vec![[100.0, 100.0]]], 1.0, 1.0).unwrap();
        let skew = crate::pilots::PilotBook::from_columns(CMat::from_element(2, 2, Complex64::new(1.0, 0.0)), 1.0).unwrap();
        let pilots = Pilots::new(skew, PilotAssignment::from_indices(2, 1, 1, vec![0]).unwrap(), &dep);
        let layout = StackedUsers {
            rb: 0,
            bs: 0,
            in_cell: 1,
            users: vec![UserId::new(0, 0)],
            gains: vec![1.0],
            data_power: vec![1.0],
            pilot_power: vec![1.0],
        };
        assert!(reuse_variance(UserId::new(0, 0), &layout, &pilots, &dep, 1.0, 0.1).is_err());
        assert!(EstimateBlock::codebook(&CMat::zeros(1, 2), layout, &pilots, 0.1).is_err());
    }
}
