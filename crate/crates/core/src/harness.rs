//! Experiment orchestration: configuration, Monte Carlo averaging,
//! parameter sweeps and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::access::RepetitionDistribution;
use crate::decoder::{sic_decode, DecodeOrder, DecoderParams, EstimatorPath, InstanceSpec, RunInstance};
use crate::error::{Error, Result};
use crate::numerics::derive_stream;
use crate::pilots::PilotPolicy;
use crate::receiver::CombinerKind;
use crate::topology::{db_to_linear, dbm_to_watts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    MultiCell,
    /// One isolated cell: the grid collapses to a single cell.
    SingleCell,
}

/// Pilot length: a number, or `"M"` to follow the users per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "TauRepr", into = "TauRepr")]
pub enum TauSetting {
    #[default]
    MatchUsers,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TauRepr {
    Count(usize),
    Token(String),
}

impl TryFrom<TauRepr> for TauSetting {
    type Error = String;

    fn try_from(r: TauRepr) -> std::result::Result<Self, String> {
        match r {
            TauRepr::Count(n) => Ok(TauSetting::Fixed(n)),
            TauRepr::Token(t) if t == "M" => Ok(TauSetting::MatchUsers),
            TauRepr::Token(t) => Err(format!("tau must be a count or \"M\", got {t:?}")),
        }
    }
}

impl From<TauSetting> for TauRepr {
    fn from(t: TauSetting) -> Self {
        match t {
            TauSetting::MatchUsers => TauRepr::Token("M".into()),
            TauSetting::Fixed(n) => TauRepr::Count(n),
        }
    }
}

/// Simulation parameters, read from TOML. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub grid_side: usize,
    pub cell_size_m: f64,
    /// RBs per frame.
    #[serde(alias = "T")]
    pub rbs: usize,
    /// Users per cell as a multiple of `rbs`; used when `users` is unset.
    #[serde(alias = "L", skip_serializing_if = "Option::is_none")]
    pub load: Option<f64>,
    #[serde(alias = "M", skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    #[serde(alias = "N")]
    pub antennas: usize,
    pub tau: TauSetting,
    pub pilot_policy: PilotPolicy,
    /// Linear SINR threshold.
    pub gamma_th: f64,
    pub d_max: usize,
    pub sigma_h2: f64,
    pub p_dbm: f64,
    pub p_tau_dbm: f64,
    /// Sets `N0 = P sigma_h^2 / SNR`.
    pub snr_db: f64,
    pub runs: usize,
    pub master_seed: u64,
    pub combiner: CombinerKind,
    pub mode: Mode,
    pub decode_order: DecodeOrder,
    pub estimator: EstimatorPath,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid_side: 3,
            cell_size_m: 250.0,
            rbs: 50,
            load: None,
            users: None,
            antennas: 32,
            tau: TauSetting::MatchUsers,
            pilot_policy: PilotPolicy::Auto,
            gamma_th: 10.0,
            d_max: 8,
            sigma_h2: 1.0,
            p_dbm: 10.0,
            p_tau_dbm: 10.0,
            snr_db: 10.0,
            runs: 1000,
            master_seed: 1,
            combiner: CombinerKind::Mmse,
            mode: Mode::MultiCell,
            decode_order: DecodeOrder::Batch,
            estimator: EstimatorPath::Codebook,
        }
    }
}

const DEFAULT_LOAD: f64 = 1.0;

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Users per cell: explicit, or `round(L T)`.
    pub fn users_per_cell(&self) -> usize {
        match self.users {
            Some(m) => m,
            None => (self.load.unwrap_or(DEFAULT_LOAD) * self.rbs as f64).round() as usize,
        }
    }

    pub fn effective_load(&self) -> f64 {
        self.users_per_cell() as f64 / self.rbs as f64
    }

    pub fn pilot_length(&self) -> usize {
        match self.tau {
            TauSetting::MatchUsers => self.users_per_cell().max(1),
            TauSetting::Fixed(t) => t,
        }
    }

    pub fn effective_grid_side(&self) -> usize {
        match self.mode {
            Mode::MultiCell => self.grid_side,
            Mode::SingleCell => 1,
        }
    }

    pub fn p_watts(&self) -> f64 {
        dbm_to_watts(self.p_dbm)
    }

    pub fn p_tau_watts(&self) -> f64 {
        dbm_to_watts(self.p_tau_dbm)
    }

    pub fn n0(&self) -> f64 {
        self.p_watts() * self.sigma_h2 / db_to_linear(self.snr_db)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.load.is_some() && self.users.is_some() {
            return bad("set either load or users, not both".into());
        }
        if let Some(l) = self.load {
            if !(l.is_finite() && l >= 0.0) {
                return bad(format!("load must be a non-negative number, got {l}"));
            }
        }
        if self.grid_side == 0 || self.grid_side.is_multiple_of(2) {
            return bad(format!("grid_side must be odd and positive, got {}", self.grid_side));
        }
        if !(self.cell_size_m > 0.0) {
            return bad("cell_size_m must be positive".into());
        }
        if self.rbs == 0 {
            return bad("T must be at least 1".into());
        }
        if self.antennas == 0 {
            return bad("N must be at least 1".into());
        }
        if self.tau == TauSetting::Fixed(0) {
            return bad("tau must be at least 1".into());
        }
        if self.d_max == 0 || self.d_max > self.rbs {
            return bad(format!("d_max must lie in 1..=T, got {}", self.d_max));
        }
        if !(self.gamma_th > 0.0 && self.gamma_th.is_finite()) {
            return bad("gamma_th must be positive".into());
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return bad("sigma_h2 must be positive".into());
        }
        if !(self.snr_db.is_finite() && self.p_dbm.is_finite() && self.p_tau_dbm.is_finite()) {
            return bad("powers and SNR must be finite".into());
        }
        if self.p_tau_dbm < self.p_dbm {
            return bad("pilot power must be at least the data power".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.pilot_policy == PilotPolicy::DistinctWithinCell && self.pilot_length() < self.users_per_cell() {
            return bad("distinct-within-cell pilots need tau >= M".into());
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical serialization.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn instance_spec(&self) -> Result<InstanceSpec> {
        Ok(InstanceSpec {
            grid_side: self.effective_grid_side(),
            cell_size_m: self.cell_size_m,
            users_per_cell: self.users_per_cell(),
            rbs: self.rbs,
            antennas: self.antennas,
            tau: self.pilot_length(),
            repetitions: RepetitionDistribution::soliton(self.d_max)?,
            pilot_policy: self.pilot_policy,
            p: self.p_watts(),
            p_tau: self.p_tau_watts(),
            sigma_h2: self.sigma_h2,
            n0: self.n0(),
        })
    }

    fn decoder_params(&self) -> DecoderParams {
        DecoderParams {
            gamma_th: self.gamma_th,
            combiner: self.combiner,
            order: self.decode_order,
            estimator: self.estimator,
            isolate: false,
        }
    }
}

/// Variables a sweep can step through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    Load,
    Tau,
    Antennas,
    SnrDb,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::Load => "L",
            SweepVar::Tau => "tau",
            SweepVar::Antennas => "N",
            SweepVar::SnrDb => "snr_db",
        }
    }

    pub fn apply(self, base: &SimConfig, value: f64) -> Result<SimConfig> {
        let mut c = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} takes positive integers, got {value}", self.name())))
            }
        };
        match self {
            SweepVar::Load => {
                c.load = Some(value);
                c.users = None;
            }
            SweepVar::Tau => c.tau = TauSetting::Fixed(count()?),
            SweepVar::Antennas => c.antennas = count()?,
            SweepVar::SnrDb => c.snr_db = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "load" => Ok(SweepVar::Load),
            "tau" => Ok(SweepVar::Tau),
            "N" | "antennas" => Ok(SweepVar::Antennas),
            "snr_db" | "snr" => Ok(SweepVar::SnrDb),
            _ => Err(Error::Config(format!("unknown sweep variable {s:?} (use L, tau, N or snr_db)"))),
        }
    }
}

/// Averaged center-cell throughput of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointResult {
    pub cell: usize,
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

/// Throughput of one run of `config`, seeded by `(master_seed, path)`.
pub fn run_once(config: &SimConfig, path: &[u64]) -> Result<f64> {
    let spec = config.instance_spec()?;
    let center = (spec.grid_side * spec.grid_side) / 2;
    let stream = derive_stream(config.master_seed, path);
    let instance = RunInstance::generate(&stream, &spec, &[center])?;
    let (metrics, _) = sic_decode(&instance, &config.decoder_params(), &[center])?;
    Ok(metrics.cells[0].throughput)
}

/// `config.runs` independent runs of the center cell. Run `r` uses the seed
/// path `[point, r]`; results are reduced in run order, so the output does
/// not depend on `workers`.
pub fn run_point(config: &SimConfig, point: u64, workers: usize) -> Result<PointResult> {
    config.validate()?;
    let side = config.effective_grid_side();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let samples: Vec<f64> = pool.install(|| {
        (0..config.runs as u64)
            .into_par_iter()
            .map(|r| run_once(config, &[point, r]))
            .collect::<Result<Vec<f64>>>()
    })?;
    let (mean, stderr) = mean_and_stderr(&samples);
    Ok(PointResult {
        cell: side * side / 2,
        mean,
        stderr,
        runs: samples.len(),
    })
}

/// Sample mean and `std / sqrt(n)`; the error is 0 for a single sample.
pub fn mean_and_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep: String,
    pub value: f64,
    pub cell: usize,
    pub mean_throughput: f64,
    pub stderr: f64,
    pub runs: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub fn run_sweep(base: &SimConfig, var: SweepVar, values: &[f64], workers: usize) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // reject every point before running any
    let configs = values
        .iter()
        .map(|v| var.apply(base, *v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, (cfg, value)) in configs.iter().zip(values).enumerate() {
        let r = run_point(cfg, i as u64, workers)?;
        rows.push(SweepRow {
            sweep: var.name().to_string(),
            value: *value,
            cell: r.cell,
            mean_throughput: r.mean,
            stderr: r.stderr,
            runs: r.runs,
            config_digest: cfg.digest(),
        });
    }
    Ok(SweepResult { rows })
}

pub const CSV_HEADER: &str = "sweep,value,cell,mean_throughput,stderr,runs,config_digest";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.16e},{},{:.16e},{:.16e},{},{}",
                r.sweep, r.value, r.cell, r.mean_throughput, r.stderr, r.runs, r.config_digest
            );
        }
        out
    }
}

/// Gnuplot script drawing throughput against the sweep variable.
pub fn plot_script(csv_name: &str, sweep: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel '{sweep}'\n\
         set ylabel 'center-cell throughput'\n\
         set grid\n\
         set terminal pngcairo size 800,600\n\
         set output '{stem}.png'\n\
         plot '{csv_name}' using 2:4:5 with yerrorlines title 'throughput'\n",
        stem = csv_name.trim_end_matches(".csv"),
    )
}

/// Writes `out` (CSV) and a gnuplot script next to it; returns the script path.
pub fn emit_outputs(result: &SweepResult, out: &Path) -> Result<PathBuf> {
    let first = result
        .rows
        .first()
        .ok_or_else(|| Error::Config("nothing to write: empty sweep".into()))?;
    let write = |path: &Path, text: &str| {
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(out, &result.to_csv())?;
    let script = out.with_extension("gp");
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write(&script, &plot_script(&name, &first.sweep))?;
    Ok(script)
}

/// One curve of a figure: a base configuration swept over one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub base: SimConfig,
    pub var: SweepVar,
    pub values: Vec<f64>,
}

fn steps(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
}

/// Throughput-versus-parameter curves for the four result figures. The
/// desk-scale campaign uses coarser grids and 100 runs per point; `full`
/// uses fine grids and `runs` from the default configuration.
pub fn figure_campaign(full: bool) -> Vec<Curve> {
    let runs = if full { SimConfig::default().runs } else { 100 };
    let base = SimConfig { runs, ..SimConfig::default() };
    let mut curves = Vec::new();
    let loads = if full { steps(0.2, 5.0, 0.2) } else { steps(0.5, 5.0, 0.5) };
    for gamma in [10.0, 6.0] {
        for (mode, tag, ns) in [(Mode::MultiCell, "mc", &[8, 16, 32][..]), (Mode::SingleCell, "sc", &[4, 8][..])] {
            for &n in ns {
                curves.push(Curve {
                    name: format!("fig2_{tag}_N{n}_gamma{gamma}"),
                    base: SimConfig { antennas: n, gamma_th: gamma, mode, ..base.clone() },
                    var: SweepVar::Load,
                    values: loads.clone(),
                });
            }
        }
    }
    let taus = if full {
        vec![1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0]
    } else {
        vec![1.0, 5.0, 10.0, 20.0, 30.0, 40.0]
    };
    for l in [1.0, 2.0, 3.0, 4.0] {
        for (mode, tag) in [(Mode::MultiCell, "mc"), (Mode::SingleCell, "sc")] {
            curves.push(Curve {
                name: format!("fig3_{tag}_L{l}"),
                base: SimConfig { antennas: 32, load: Some(l), mode, ..base.clone() },
                var: SweepVar::Tau,
                values: taus.clone(),
            });
        }
    }
    let antennas = if full {
        vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]
    } else {
        vec![4.0, 8.0, 16.0, 32.0, 64.0]
    };
    for snr in [10.0, -5.0] {
        for l in [1.0, 2.0, 3.0, 4.0] {
            curves.push(Curve {
                name: format!("fig4_snr{snr}_L{l}"),
                base: SimConfig { load: Some(l), snr_db: snr, ..base.clone() },
                var: SweepVar::Antennas,
                values: antennas.clone(),
            });
        }
    }
    let snrs = if full { steps(-20.0, 30.0, 5.0) } else { steps(-20.0, 30.0, 10.0) };
    for n in [16, 32, 64] {
        for l in [1.0, 2.0, 3.0, 4.0] {
            curves.push(Curve {
                name: format!("fig5_N{n}_L{l}"),
                base: SimConfig { antennas: n, load: Some(l), ..base.clone() },
                var: SweepVar::SnrDb,
                values: snrs.clone(),
            });
        }
    }
    curves
}
