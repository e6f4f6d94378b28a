//! Linear combining and the per-user SINR at a BS.
//!
//! For a target `m` with combiner `a`, the post-combined signal splits into
//! the estimated-channel signal, the estimation-error leakage of every
//! received user, the in-cell and out-of-cell interference through their
//! estimates, and noise. Normalizing by `|a|^2`:
//!
//! ```text
//! Gain = p_m |a^H h^_m|^2 / |a|^2
//! InCI = sum_{i in cell, i != m} p_i |a^H h^_i|^2 / |a|^2
//! Est  = sum_{all received n} p_n delta_n
//! ICI  = sum_{out of cell n} p_n |a^H h^_n|^2 / |a|^2
//! rho  = Gain / (N0 + InCI + Est + ICI)
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::access::AccessMatrix;
use crate::channel::UndecodedSets;
use crate::error::{Error, Result};
use crate::estimation::EstimateBlock;
use crate::numerics::{add_diagonal, cn_sample, complex_gaussian, gram, hermitian_solve, hermitize, scale_columns, CMat, CVec, RngStream};
use crate::topology::UserId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerKind {
    #[default]
    Mmse,
    Mrc,
}

/// Which system the MMSE combiner solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombinerForm {
    #[default]
    Auto,
    /// `((N0 + Est) I_N + H^ D H^^H)^-1 H^ D`.
    Antenna,
    /// `H^ D ((N0 + Est) I + H^^H H^ D)^-1`.
    User,
}

/// Estimation-error power `sum p_n delta_n` over every received user. It
/// does not depend on the target, so one combiner matrix serves all.
pub fn estimation_error_power(block: &EstimateBlock) -> f64 {
    block
        .layout
        .data_power
        .iter()
        .zip(&block.delta)
        .map(|(p, d)| p * d)
        .sum()
}

/// MRC: each user combines with its own estimate.
pub fn mrc_combiner(block: &EstimateBlock) -> CMat {
    block.h_hat.clone()
}

/// Multi-cell MMSE combining matrix, one column per received user.
pub fn mmse_combiner(block: &EstimateBlock, n0: f64, est_power: f64, form: CombinerForm) -> Result<CMat> {
    mmse_columns(block, n0, est_power, form, block.len())
}

/// Columns of the combiner for the first `count` stacked users only.
fn mmse_columns(
    block: &EstimateBlock,
    n0: f64,
    est_power: f64,
    form: CombinerForm,
    count: usize,
) -> Result<CMat> {
    let powers = &block.layout.data_power;
    if !(n0.is_finite() && est_power.is_finite() && powers.iter().all(|p| p.is_finite() && *p >= 0.0)) {
        return Err(Error::ContractViolation("non-finite combiner inputs".into()));
    }
    let (n, m) = block.h_hat.shape();
    if count == 0 {
        return Ok(CMat::zeros(n, 0));
    }
    let load = n0 + est_power;
    let form = match form {
        CombinerForm::Auto if m < n => CombinerForm::User,
        CombinerForm::Auto => CombinerForm::Antenna,
        f => f,
    };
    let root: Vec<f64> = powers.iter().map(|p| p.sqrt()).collect();
    let hd = scale_columns(&block.h_hat, &root);
    let rhs = CMat::from_fn(m, count, |i, j| {
        if i == j {
            Complex64::new(root[i], 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    match form {
        CombinerForm::User => {
            // H^ D^1/2 (load I + D^1/2 H^^H H^ D^1/2)^-1 D^1/2
            let mut s = gram(&hd);
            add_diagonal(&mut s, load);
            Ok(&hd * hermitian_solve(&s, &rhs)?)
        }
        _ => {
            let mut r = &hd * hd.adjoint();
            hermitize(&mut r);
            add_diagonal(&mut r, load);
            hermitian_solve(&r, &(&hd * rhs))
        }
    }
}

/// Combining columns for the in-cell users of `block`, in stacked order.
pub fn in_cell_combiners(block: &EstimateBlock, kind: CombinerKind, n0: f64) -> Result<CMat> {
    let in_cell = block.layout.in_cell;
    match kind {
        CombinerKind::Mrc => Ok(block.h_hat.columns(0, in_cell).into_owned()),
        CombinerKind::Mmse => mmse_columns(block, n0, estimation_error_power(block), CombinerForm::Auto, in_cell),
    }
}

/// The four SINR terms of one user in one RB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrBreakdown {
    pub gain: f64,
    pub noise: f64,
    pub inci: f64,
    pub est: f64,
    pub ici: f64,
    pub sinr: f64,
}

impl SinrBreakdown {
    fn from_terms(gain: f64, noise: f64, inci: f64, est: f64, ici: f64) -> Self {
        SinrBreakdown {
            gain,
            noise,
            inci,
            est,
            ici,
            sinr: gain / (noise + inci + est + ici),
        }
    }
}

/// SINR of stacked column `col` (an in-cell user) under combiner `a`.
pub fn sinr_column(block: &EstimateBlock, col: usize, a: &CVec, n0: f64) -> SinrBreakdown {
    let est = estimation_error_power(block);
    let proj = block.h_hat.adjoint() * a;
    terms_from_projection(block, col, proj.as_slice(), a.norm_squared(), n0, est)
}

fn terms_from_projection(
    block: &EstimateBlock,
    col: usize,
    proj: &[Complex64],
    norm2: f64,
    n0: f64,
    est: f64,
) -> SinrBreakdown {
    let p = &block.layout.data_power;
    if norm2 == 0.0 {
        return SinrBreakdown::from_terms(0.0, n0, 0.0, est, 0.0);
    }
    let power = |n: usize| p[n] * proj[n].norm_sqr() / norm2;
    let in_cell = block.layout.in_cell;
    let gain = power(col);
    let inci: f64 = (0..in_cell).filter(|n| *n != col).map(power).sum();
    let ici: f64 = (in_cell..block.len()).map(power).sum();
    SinrBreakdown::from_terms(gain, n0, inci, est, ici)
}

/// SINR of `target` in the RB and cell of `block`, checking that the target
/// transmits there and is still undecoded.
pub fn sinr(
    target: UserId,
    block: &EstimateBlock,
    a: &CVec,
    access: &AccessMatrix,
    sets: &UndecodedSets,
    n0: f64,
) -> Result<SinrBreakdown> {
    let rb = block.layout.rb;
    if !access.g(rb, target) {
        return Err(Error::NotTransmitting {
            cell: target.cell,
            user: target.user,
            rb,
        });
    }
    if !sets.is_undecoded(target) {
        return Err(Error::AlreadyDecoded {
            cell: target.cell,
            user: target.user,
        });
    }
    if target.cell != block.layout.bs {
        return Err(Error::ContractViolation(format!(
            "user {target:?} is not served by BS {}",
            block.layout.bs
        )));
    }
    let col = block
        .layout
        .position(target)
        .ok_or_else(|| Error::ContractViolation(format!("user {target:?} missing from the estimate block")))?;
    if a.nrows() != block.h_hat.nrows() {
        return Err(Error::ContractViolation("combiner length differs from antenna count".into()));
    }
    Ok(sinr_column(block, col, a, n0))
}

/// SINRs of every in-cell user of `block`, in stacked order.
pub fn sinr_table(block: &EstimateBlock, kind: CombinerKind, n0: f64) -> Result<Vec<SinrBreakdown>> {
    let a = in_cell_combiners(block, kind, n0)?;
    let est = estimation_error_power(block);
    // proj[(n, c)] = h^_n^H a_c
    let proj = block.h_hat.adjoint() * &a;
    Ok((0..a.ncols())
        .map(|c| {
            let col = proj.column(c);
            terms_from_projection(block, c, col.as_slice(), a.column(c).norm_squared(), n0, est)
        })
        .collect())
}

/// Empirical powers of the five parts of the post-combined data signal,
/// each normalized by `|a|^2`, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDecomposition {
    /// Target symbol through its estimate.
    pub signal: (f64, f64),
    /// Target symbol through its estimation error.
    pub self_error: (f64, f64),
    /// Other in-cell users through their true channels.
    pub in_cell: (f64, f64),
    /// Out-of-cell users through their true channels.
    pub out_of_cell: (f64, f64),
    pub noise: (f64, f64),
    pub total: (f64, f64),
}

impl PowerDecomposition {
    /// The same five parts predicted from a [`SinrBreakdown`] and the
    /// per-user error variances.
    pub fn predicted(block: &EstimateBlock, col: usize, s: &SinrBreakdown) -> [f64; 6] {
        let l = &block.layout;
        let pd = |n: usize| l.data_power[n] * block.delta[n];
        let own = pd(col);
        let in_err: f64 = (0..l.in_cell).filter(|n| *n != col).map(pd).sum();
        let out_err: f64 = (l.in_cell..l.len()).map(pd).sum();
        [
            s.gain,
            own,
            s.inci + in_err,
            s.ici + out_err,
            s.noise,
            s.gain + s.noise + s.inci + s.est + s.ici,
        ]
    }

    pub fn as_array(&self) -> [(f64, f64); 6] {
        [self.signal, self.self_error, self.in_cell, self.out_of_cell, self.noise, self.total]
    }
}

/// Monte Carlo check of the SINR decomposition for a fixed estimate block.
///
/// True channels are drawn from their posterior given the pilot observation
/// that produced `block`: with `H'` from the prior and fresh pilot noise,
/// `E = (H' P^H + N') C - H'` has exactly the error distribution and is
/// independent of the estimates, so `H = H^ - E`. Data symbols and receiver
/// noise are then drawn and each part of `a^H y` is measured separately.
pub fn post_combined_power_oracle(
    stream: &RngStream,
    block: &EstimateBlock,
    p_bar: &CMat,
    col: usize,
    a: &CVec,
    n0: f64,
    n_samples: usize,
) -> Result<PowerDecomposition> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter("oracle needs at least two samples".into()));
    }
    let l = &block.layout;
    let (n, m) = block.h_hat.shape();
    let tau = p_bar.nrows();
    let norm2 = a.norm_squared();
    let root_b: Vec<f64> = l.gains.iter().map(|b| b.sqrt()).collect();
    // a^H h^_u is fixed across samples
    let proj_hat = block.h_hat.adjoint() * a;
    let mut rng = stream.rng();
    let mut acc = [[0.0f64; 2]; 6];
    let p_bar_h = p_bar.adjoint();
    for _ in 0..n_samples {
        let h_prior = scale_columns(&complex_gaussian(&mut rng, n, m, 1.0)?, &root_b);
        let y_prior = &h_prior * &p_bar_h + complex_gaussian(&mut rng, n, tau, n0)?;
        let e = y_prior * &block.c - h_prior;
        let proj_err = e.adjoint() * a;
        let x: Vec<Complex64> = l.data_power.iter().map(|p| cn_sample(&mut rng, *p)).collect();
        let noise: CVec = CVec::from_fn(n, |_, _| cn_sample(&mut rng, n0));
        // a^H h_u = (h^_u^H a - e_u^H a)^*
        let through = |u: usize| (proj_hat[u] - proj_err[u]).conj() * x[u];
        let t1 = proj_hat[col].conj() * x[col];
        let t2 = -proj_err[col].conj() * x[col];
        let t3: Complex64 = (0..l.in_cell).filter(|u| *u != col).map(through).sum();
        let t4: Complex64 = (l.in_cell..m).map(through).sum();
        let t5 = a.dotc(&noise);
        let parts = [t1, t2, t3, t4, t5, t1 + t2 + t3 + t4 + t5];
        for (slot, t) in acc.iter_mut().zip(parts) {
            let v = t.norm_sqr() / norm2;
            slot[0] += v;
            slot[1] += v * v;
        }
    }
    let ns = n_samples as f64;
    let stat = |s: [f64; 2]| {
        let mean = s[0] / ns;
        let var = (s[1] / ns - mean * mean).max(0.0) * ns / (ns - 1.0);
        (mean, (var / ns).sqrt())
    };
    Ok(PowerDecomposition {
        signal: stat(acc[0]),
        self_error: stat(acc[1]),
        in_cell: stat(acc[2]),
        out_of_cell: stat(acc[3]),
        noise: stat(acc[4]),
        total: stat(acc[5]),
    })
}

/// Large-antenna deterministic equivalent of the MRC SINR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticBreakdown {
    /// Per-entry estimate variance of the target.
    pub epsilon: f64,
    pub sig: f64,
    /// Interference that does not grow with the array.
    pub int_nc: f64,
    /// Coherent pilot-contamination interference, linear in `N`.
    pub int_c: f64,
    pub sinr_bar: f64,
}

/// Deterministic equivalent for stacked column `col` with `antennas`
/// antennas. Both interference sums skip the target itself.
pub fn asymptotic_sinr_mrc(
    block: &EstimateBlock,
    p_bar: &CMat,
    col: usize,
    n0: f64,
    antennas: usize,
) -> AsymptoticBreakdown {
    let l = &block.layout;
    let nn = antennas as f64;
    let c = block.c.column(col);
    let cross = p_bar.adjoint() * c;
    let epsilon = n0 * c.norm_squared()
        + (0..l.len())
            .map(|k| cross[k].norm_sqr() * l.gains[k])
            .sum::<f64>();
    let p = l.data_power[col];
    let sig = nn * p * epsilon * epsilon;
    let others = (0..l.len()).filter(|k| *k != col);
    let int_nc = p * block.delta[col] + others.clone().map(|k| l.data_power[k] * l.gains[k]).sum::<f64>();
    let int_c = nn
        * others
            .map(|k| cross[k].norm_sqr() * l.data_power[k] * l.gains[k] * l.gains[k])
            .sum::<f64>();
    AsymptoticBreakdown {
        epsilon,
        sig,
        int_nc,
        int_c,
        sinr_bar: sig / (epsilon * (n0 + int_nc) + int_c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{EstimatorForm, StackedUsers};
    use crate::numerics::{derive_stream, max_abs};
    use crate::pilots::dft_codebook;
    use proptest::prelude::*;

    fn layout(in_cell: usize, out: usize, seed: u64) -> StackedUsers {
        let mut users: Vec<UserId> = (0..in_cell).map(|i| UserId::new(0, i)).collect();
        users.extend((0..out).map(|i| UserId::new(1, i)));
        let m = users.len();
        StackedUsers {
            rb: 0,
            bs: 0,
            in_cell,
            users,
            gains: (0..m).map(|k| 0.2 + ((k as u64 * 7 + seed) % 5) as f64 * 0.3).collect(),
            data_power: (0..m).map(|k| 0.5 + ((k as u64 + seed) % 3) as f64 * 0.25).collect(),
            pilot_power: vec![1.0; m],
        }
    }

    /// Random pilots, channels and estimates for a layout.
    fn random_block(seed: u64, tau: usize, n: usize, in_cell: usize, out: usize) -> (EstimateBlock, CMat) {
        let l = layout(in_cell, out, seed);
        let m = l.len();
        let mut rng = derive_stream(seed, &[42]).rng();
        let p = complex_gaussian(&mut rng, tau, m, 1.0).unwrap();
        let root: Vec<f64> = l.gains.iter().map(|b| b.sqrt()).collect();
        let h = scale_columns(&complex_gaussian(&mut rng, n, m, 1.0).unwrap(), &root);
        let n0 = 0.1;
        let y = &h * p.adjoint() + complex_gaussian(&mut rng, n, tau, n0).unwrap();
        let (h_hat, c) = crate::estimation::mmse_estimate(&y, &p, &l.gains, n0, EstimatorForm::Auto).unwrap();
        let delta = crate::estimation::error_variances(&c, &p, &l.gains, n0);
        (EstimateBlock { layout: l, h_hat, c, delta }, p)
    }

    #[test]
    fn combiner_forms_agree() {
        for (seed, (n, inn, out)) in [(1, (8, 3, 4)), (2, (3, 2, 5)), (3, (6, 6, 0))] {
            let (b, _) = random_block(seed, 4, n, inn, out);
            let est = estimation_error_power(&b);
            let a1 = mmse_combiner(&b, 0.1, est, CombinerForm::Antenna).unwrap();
            let a2 = mmse_combiner(&b, 0.1, est, CombinerForm::User).unwrap();
            assert!(max_abs(&(&a1 - &a2)) <= 1e-9 * max_abs(&a1));
            let cols = in_cell_combiners(&b, CombinerKind::Mmse, 0.1).unwrap();
            assert!(max_abs(&(&cols - a1.columns(0, inn))) <= 1e-9 * max_abs(&a1));
        }
    }

    #[test]
    fn mrc_is_the_estimate() {
        let (b, _) = random_block(4, 3, 5, 2, 2);
        assert_eq!(mrc_combiner(&b), b.h_hat);
    }

    #[test]
    fn single_user_mmse_reduces_to_mrc() {
        let (b, _) = random_block(5, 2, 6, 1, 0);
        let mmse = sinr_table(&b, CombinerKind::Mmse, 0.1).unwrap()[0];
        let mrc = sinr_table(&b, CombinerKind::Mrc, 0.1).unwrap()[0];
        assert!((mmse.sinr / mrc.sinr - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_single_user_snr() {
        let (mut b, _) = random_block(6, 2, 4, 1, 0);
        b.delta = vec![0.0];
        let s = sinr_table(&b, CombinerKind::Mrc, 0.2).unwrap()[0];
        let expect = b.layout.data_power[0] * b.h_hat.column(0).norm_squared() / 0.2;
        assert!((s.sinr / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_estimates_have_no_inci() {
        let (mut b, _) = random_block(7, 2, 4, 2, 0);
        b.h_hat = CMat::identity(4, 2);
        let s = sinr_table(&b, CombinerKind::Mrc, 0.1).unwrap();
        assert_eq!(s[0].inci, 0.0);
        assert!(s[0].est > 0.0);
    }

    #[test]
    fn mmse_dominates_mrc() {
        for seed in 0..50 {
            let (b, _) = random_block(100 + seed, 3, 6, 3, 3);
            let mmse = sinr_table(&b, CombinerKind::Mmse, 0.1).unwrap();
            let mrc = sinr_table(&b, CombinerKind::Mrc, 0.1).unwrap();
            for (x, y) in mmse.iter().zip(&mrc) {
                assert!(x.sinr >= y.sinr * (1.0 - 1e-10));
            }
        }
    }

    #[test]
    fn error_cases() {
        let dep_users = 3;
        let (b, _) = random_block(8, 2, 4, 2, 1);
        let access = AccessMatrix::from_columns(2, 2, dep_users, vec![vec![0], vec![0], vec![1], vec![0], vec![1], vec![1]]).unwrap();
        let mut sets = UndecodedSets::new(2, dep_users);
        let a = b.h_hat.column(0).into_owned();
        assert!(matches!(
            sinr(UserId::new(0, 2), &b, &a, &access, &sets, 0.1),
            Err(Error::NotTransmitting { .. })
        ));
        sets.mark_decoded(UserId::new(0, 0));
        assert!(matches!(
            sinr(UserId::new(0, 0), &b, &a, &access, &sets, 0.1),
            Err(Error::AlreadyDecoded { .. })
        ));
        let ok = sinr(UserId::new(0, 1), &b, &a, &access, &sets, 0.1).unwrap();
        let direct = sinr_column(&b, 1, &a, 0.1);
        assert_eq!(ok, direct);
    }

    #[test]
    fn oracle_noise_only_and_single_user() {
        let (mut b, p) = random_block(9, 2, 4, 1, 0);
        b.layout.data_power = vec![0.0];
        let a = b.h_hat.column(0).into_owned();
        let d = post_combined_power_oracle(&derive_stream(9, &[1]), &b, &p, 0, &a, 0.1, 4000).unwrap();
        assert!((d.total.0 / 0.1 - 1.0).abs() < 3.0 / (4000f64).sqrt() * 1.5);
        b.layout.data_power = vec![1.0];
        let s = sinr_column(&b, 0, &a, 0.1);
        let d = post_combined_power_oracle(&derive_stream(9, &[2]), &b, &p, 0, &a, 0.1, 4000).unwrap();
        let pred = PowerDecomposition::predicted(&b, 0, &s);
        for (got, want) in d.as_array().iter().zip(pred) {
            assert!((got.0 - want).abs() <= 3.5 * got.1.max(1e-12), "{got:?} vs {want}");
        }
    }

    #[test]
    fn asymptotic_structure() {
        let (b, p) = random_block(10, 3, 4, 2, 3);
        let x = asymptotic_sinr_mrc(&b, &p, 0, 0.1, 64);
        let y = asymptotic_sinr_mrc(&b, &p, 0, 0.1, 128);
        assert!((y.sig / x.sig - 2.0).abs() < 1e-12);
        assert!((y.int_c / x.int_c - 2.0).abs() < 1e-12);
        assert_eq!(x.int_nc, y.int_nc);
        let l = &b.layout;
        assert!((x.sig - 64.0 * l.data_power[0] * x.epsilon * x.epsilon).abs() <= 1e-12 * x.sig);
        assert!((x.epsilon - b.estimate_variance(0)).abs() <= 1e-10 * x.epsilon);
    }

    #[test]
    fn asymptotic_orthogonal_single_user_linear() {
        let book = dft_codebook(2, 1.0).unwrap();
        let p = book.columns.columns(0, 1).into_owned();
        let l = layout(1, 0, 0);
        let (h_hat, c) = crate::estimation::mmse_estimate(&CMat::zeros(3, 2), &p, &l.gains, 0.1, EstimatorForm::Auto).unwrap();
        let delta = crate::estimation::error_variances(&c, &p, &l.gains, 0.1);
        let b = EstimateBlock { layout: l, h_hat, c, delta };
        let x = asymptotic_sinr_mrc(&b, &p, 0, 0.1, 10);
        let y = asymptotic_sinr_mrc(&b, &p, 0, 0.1, 30);
        assert_eq!(x.int_c, 0.0);
        assert!((y.sinr_bar / x.sinr_bar - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn breakdown_is_consistent(seed in 0u64..1000, scale_re in -3.0f64..3.0, scale_im in 0.1f64..3.0) {
            let (b, _) = random_block(seed, 3, 5, 2, 2);
            let cols = in_cell_combiners(&b, CombinerKind::Mmse, 0.1).unwrap();
            let a = cols.column(0).into_owned();
            let s = sinr_column(&b, 0, &a, 0.1);
            prop_assert!(s.gain >= 0.0 && s.inci >= 0.0 && s.est >= 0.0 && s.ici >= 0.0);
            let again = s.gain / (s.noise + s.inci + s.est + s.ici);
            prop_assert!((again - s.sinr).abs() <= 1e-12 * s.sinr);
            let scaled = &a * Complex64::new(scale_re, scale_im);
            let t = sinr_column(&b, 0, &scaled, 0.1);
            prop_assert!((t.sinr - s.sinr).abs() <= 1e-10 * s.sinr);
        }

        #[test]
        fn extra_out_of_cell_user_never_helps(seed in 0u64..1000, g in 0.01f64..5.0, p in 0.01f64..2.0, d in 0.0f64..1.0) {
            let (b, _) = random_block(seed, 3, 5, 2, 1);
            let a = b.h_hat.column(1).into_owned();
            let before = sinr_column(&b, 1, &a, 0.1);
            let mut grown = b.clone();
            let mut rng = derive_stream(seed, &[7]).rng();
            let extra = complex_gaussian(&mut rng, 5, 1, g).unwrap();
            grown.h_hat = grown.h_hat.insert_column(3, Complex64::new(0.0, 0.0));
            grown.h_hat.set_column(3, &extra.column(0));
            grown.layout.users.push(UserId::new(1, 9));
            grown.layout.gains.push(g);
            grown.layout.data_power.push(p);
            grown.layout.pilot_power.push(1.0);
            grown.delta.push(d * g);
            let after = sinr_column(&grown, 1, &a, 0.1);
            prop_assert!(after.sinr <= before.sinr);
        }
    }
}
