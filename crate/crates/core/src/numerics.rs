//! Seeded random streams and the complex linear-algebra kernels used by the
//! rest of the simulator.
//!
//! Every random draw in a run comes from an [`RngStream`] identified by a
//! master seed and a path of integers (run index, RB index, purpose tag...).
//! Streams are derived by hashing, so no sequential state is shared between
//! them and any subset can be regenerated in any order or on any thread.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Generator handed out by [`RngStream::rng`].
pub type StreamRng = ChaCha12Rng;

/// Purpose tags appended to run paths.
pub mod tag {
    pub const DROP: u64 = 1;
    pub const ACCESS: u64 = 2;
    pub const PILOTS: u64 = 3;
    pub const CHANNEL: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DATA: u64 = 6;
}

/// A named, reproducible random substream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Substream with `tail` appended to this stream's path.
    pub fn child(&self, tail: &[u64]) -> RngStream {
        let mut path = self.path.clone();
        path.extend_from_slice(tail);
        RngStream {
            master_seed: self.master_seed,
            path,
        }
    }

    /// A fresh generator positioned at the start of the stream.
    pub fn rng(&self) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(b"mcirsa-stream");
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update((self.path.len() as u64).to_le_bytes());
        for p in &self.path {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(seed)
    }
}

pub fn derive_stream(master_seed: u64, path: &[u64]) -> RngStream {
    RngStream {
        master_seed,
        path: path.to_vec(),
    }
}

/// One circularly-symmetric complex Gaussian sample with `E|x|^2 = variance`.
#[inline]
pub fn cn_sample<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Matrix of i.i.d. `CN(0, variance)` entries, filled in column-major order.
pub fn complex_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    variance: f64,
) -> Result<CMat> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(invalid(format!("variance must be positive, got {variance}")));
    }
    Ok(CMat::from_fn(rows, cols, |_, _| cn_sample(rng, variance)))
}

/// Largest entry magnitude, 0 for an empty matrix.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
}

/// Solves `A X = B` for Hermitian positive-definite `A` via Cholesky.
pub fn hermitian_solve(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.nrows() != a.ncols() {
        return Err(Error::ContractViolation(format!(
            "hermitian_solve: A is {}x{}, not square",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::ContractViolation(format!(
            "hermitian_solve: A has {} rows but B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let scale = max_abs(a);
    let n = a.nrows();
    for j in 0..n {
        for i in 0..=j {
            if (a[(i, j)] - a[(j, i)].conj()).norm() > 1e-12 * scale {
                return Err(Error::ContractViolation(
                    "hermitian_solve: A is not Hermitian".into(),
                ));
            }
        }
    }
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularSystem)?;
    // complex square roots never fail, so an indefinite A shows up as a
    // non-real or non-positive pivot
    let l = chol.l_dirty();
    if (0..n).any(|i| !(l[(i, i)].re > 0.0 && l[(i, i)].im.abs() <= 1e-8 * l[(i, i)].re)) {
        return Err(Error::SingularSystem);
    }
    Ok(chol.solve(b))
}

/// `A^H A` computed directly; the result is exactly Hermitian.
pub fn gram(a: &CMat) -> CMat {
    let n = a.ncols();
    let mut g = CMat::zeros(n, n);
    for j in 0..n {
        let cj = a.column(j);
        for i in 0..=j {
            let v = a.column(i).dotc(&cj);
            g[(i, j)] = v;
            g[(j, i)] = v.conj();
        }
        g[(j, j)].im = 0.0;
    }
    g
}

/// `sum_k w_k a_k a_k^H` over the columns of `a`; exactly Hermitian.
pub fn weighted_outer(a: &CMat, w: &[f64]) -> CMat {
    debug_assert_eq!(a.ncols(), w.len());
    let scaled = scale_columns(a, &w.iter().map(|x| x.sqrt()).collect::<Vec<_>>());
    let mut out = &scaled * scaled.adjoint();
    hermitize(&mut out);
    out
}

/// Multiplies column `k` of `a` by `s[k]`.
pub fn scale_columns(a: &CMat, s: &[f64]) -> CMat {
    let mut out = a.clone();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        col *= Complex64::new(s[k], 0.0);
    }
    out
}

/// Symmetrizes away rounding so `a` passes the Hermitian check exactly.
pub fn hermitize(a: &mut CMat) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)].conj());
            a[(i, j)] = v;
            a[(j, i)] = v.conj();
        }
        a[(j, j)].im = 0.0;
    }
}

pub fn add_diagonal(a: &mut CMat, d: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)].re += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn first_bytes(s: &RngStream) -> [u8; 16] {
        let mut b = [0u8; 16];
        s.rng().fill_bytes(&mut b);
        b
    }

    #[test]
    fn same_path_same_bytes() {
        let a = derive_stream(7, &[0]);
        let b = derive_stream(7, &[0]);
        assert_eq!(first_bytes(&a), first_bytes(&b));
    }

    #[test]
    fn distinct_paths_differ() {
        assert_ne!(
            first_bytes(&derive_stream(7, &[0])),
            first_bytes(&derive_stream(7, &[1]))
        );
        // prefix-free encoding: [3] and [3, 0] are different streams
        assert_ne!(
            first_bytes(&derive_stream(7, &[3])),
            first_bytes(&derive_stream(7, &[3, 0]))
        );
    }

    #[test]
    fn stream_is_schedule_independent() {
        let reference = first_bytes(&derive_stream(7, &[3, 1]));
        for workers in [1usize, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let got: Vec<[u8; 16]> = pool.install(|| {
                use rayon::prelude::*;
                (0..32)
                    .into_par_iter()
                    .map(|_| first_bytes(&derive_stream(7, &[3, 1])))
                    .collect()
            });
            assert!(got.iter().all(|b| *b == reference));
        }
    }

    #[test]
    fn complex_gaussian_moments() {
        let mut rng = derive_stream(11, &[0]).rng();
        for variance in [1.0, 0.25] {
            let x = complex_gaussian(&mut rng, 100_000, 1, variance).unwrap();
            let n = x.len() as f64;
            let mean = x.iter().sum::<Complex64>() / n;
            let power = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
            let re_power = x.iter().map(|z| z.re * z.re).sum::<f64>() / n;
            assert!(mean.norm() <= 0.01 * variance.sqrt(), "mean {mean}");
            assert!((power / variance - 1.0).abs() <= 0.01, "power {power}");
            assert!((re_power / (0.5 * variance) - 1.0).abs() <= 0.02);
        }
    }

    #[test]
    fn complex_gaussian_rejects_bad_variance() {
        let mut rng = derive_stream(1, &[]).rng();
        assert!(matches!(
            complex_gaussian(&mut rng, 2, 2, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(complex_gaussian(&mut rng, 2, 2, -1.0).is_err());
        assert_eq!(complex_gaussian(&mut rng, 0, 4, 1.0).unwrap().len(), 0);
    }

    #[test]
    fn solve_identity_and_scaled() {
        let mut rng = derive_stream(2, &[]).rng();
        let b = complex_gaussian(&mut rng, 3, 2, 1.0).unwrap();
        let x = hermitian_solve(&CMat::identity(3, 3), &b).unwrap();
        assert!(max_abs(&(x - &b)) < 1e-15);

        let a = CMat::identity(2, 2) * Complex64::new(2.0, 0.0);
        let x = hermitian_solve(&a, &CMat::identity(2, 2)).unwrap();
        let expect = CMat::identity(2, 2) * Complex64::new(0.5, 0.0);
        assert!(max_abs(&(x - expect)) < 1e-15);
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = derive_stream(3, &[]).rng();
        for _ in 0..1000 {
            let m = complex_gaussian(&mut rng, 8, 8, 1.0).unwrap();
            let mut a = gram(&m);
            add_diagonal(&mut a, 1.0);
            let b = complex_gaussian(&mut rng, 8, 3, 1.0).unwrap();
            let x = hermitian_solve(&a, &b).unwrap();
            let r = max_abs(&(&a * &x - &b));
            assert!(r <= 1e-9 * max_abs(&b), "residual {r}");
        }
    }

    #[test]
    fn solve_rejects_indefinite_and_non_hermitian() {
        let mut a = CMat::identity(2, 2);
        a[(1, 1)] = Complex64::new(-1.0, 0.0);
        assert!(matches!(
            hermitian_solve(&a, &CMat::identity(2, 1)),
            Err(Error::SingularSystem)
        ));
        let mut a = CMat::identity(2, 2);
        a[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(matches!(
            hermitian_solve(&a, &CMat::identity(2, 1)),
            Err(Error::ContractViolation(_))
        ));
        assert!(hermitian_solve(&CMat::identity(2, 2), &CMat::identity(3, 1)).is_err());
    }
}
