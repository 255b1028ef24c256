//! Run configuration: a TOML file of optional sections, flag overrides, and
//! a stable fingerprint of the resolved settings.
//!
//! Every paper-style experiment is a small diff against the defaults
//! (another noise case, another intensity grid, another boundary), so each
//! section key is optional and falls back to a documented baseline. The
//! resolution order is: built-in default, then config file value, then
//! command-line flag. All randomness flows from the single `master_seed`:
//! the trainer and the Monte Carlo ensembles derive their streams from it,
//! and every artifact records it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use quasipot::linalg::BoxRegion;
use quasipot::mc::McConfig;
use quasipot::model::{NoiseCase, NoiseParams, System, SystemParams};
use quasipot::trainer::TrainConfig;

use crate::CliError;

/// Which exit boundary a run targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Non-characteristic vertical line `x1 = c` (case a).
    Line,
    /// Characteristic basin boundary, the saddle's stable manifold (case b).
    Separatrix,
}

impl Boundary {
    pub fn label(self) -> &'static str {
        match self {
            Boundary::Line => "line",
            Boundary::Separatrix => "separatrix",
        }
    }
}

/// `[noise]` section: a named amplitude case and/or explicit overrides.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Named amplitude pair: "i", "ii", or "iii".
    pub case: Option<String>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    /// Noise intensity used for training and single-intensity commands.
    pub eps: Option<f64>,
}

/// `[train]` section; unset keys keep the desk-scale defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<u64>,
    pub raw_samples: Option<usize>,
    pub history_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    /// Sampling box `[x1_min, x1_max, x2_min, x2_max]`.
    pub domain: Option<[f64; 4]>,
    pub learning_rate: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub delta: Option<f64>,
}

/// `[mc]` section; unset keys keep the ensemble defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub dt: Option<f64>,
    pub max_steps: Option<u64>,
    pub trajectories: Option<usize>,
}

/// `[exit]` section: boundary selection and the intensity grid.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSection {
    pub boundary: Option<Boundary>,
    /// Line threshold for the non-characteristic boundary.
    pub line_c: Option<f64>,
    /// Intensities for exit-time tables and Monte Carlo sweeps.
    pub eps_grid: Option<Vec<f64>>,
    /// Append Monte Carlo columns to the exit-time table.
    pub with_mc: Option<bool>,
}

/// `[grid]` section: lattice resolution of field-grid artifacts.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: Option<usize>,
    pub ny: Option<usize>,
}

/// `[validate]` section.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    /// Also run the trained-network regression suite (minutes, not seconds).
    pub full: Option<bool>,
    /// Randomized derivative comparisons in the engine audit.
    pub gradient_checks: Option<usize>,
}

/// The on-disk configuration; every field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// System identifier: "vegetation" (default) or "ou2d".
    pub system: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub master_seed: Option<u64>,
    /// Checkpoint path: written by `train`, read by `mpp`/`mfpt`/`validate`.
    pub checkpoint: Option<PathBuf>,
    /// Drift parameter overrides (vegetation only).
    pub params: Option<SystemParams>,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub exit: ExitSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

impl FileConfig {
    /// Parses a TOML config file; unknown keys are rejected by name.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub eps: Option<Vec<f64>>,
    /// "a" (line) or "b" (separatrix).
    pub case: Option<String>,
    pub noise_case: Option<String>,
}

/// Canonical snapshot of every setting that affects produced data; the
/// fingerprint hashes its serialization. The output directory is excluded so
/// relocating artifacts keeps fingerprints comparable.
#[derive(Serialize)]
struct FingerprintView<'a> {
    system: &'a str,
    params: Option<&'a SystemParams>,
    noise: &'a NoiseParams,
    train: &'a TrainConfig,
    mc: &'a McConfig,
    boundary: &'a str,
    line_c: f64,
    eps_grid: &'a [f64],
    with_mc: bool,
    master_seed: u64,
}

/// A fully resolved run: defaults, file, and flags merged and validated.
#[derive(Clone, Debug)]
pub struct Run {
    pub system: System,
    pub noise: NoiseParams,
    pub train: TrainConfig,
    pub mc: McConfig,
    pub boundary: Boundary,
    pub line_c: f64,
    pub eps_grid: Vec<f64>,
    pub with_mc: bool,
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub checkpoint: PathBuf,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub validate_full: bool,
    pub gradient_checks: usize,
    pub fingerprint: String,
}

impl Run {
    /// Merges defaults, the optional config file, and flag overrides.
    pub fn resolve(file: FileConfig, flags: &Overrides) -> Result<Self, CliError> {
        let master_seed = flags.seed.or(file.master_seed).unwrap_or(42);
        let out_dir = flags
            .out
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("out"));

        let system_id = file.system.unwrap_or_else(|| "vegetation".into());
        let system = System::by_id(&system_id, file.params)
            .map_err(|e| CliError::Config(e.to_string()))?;

        let case = match flags.noise_case.as_deref().or(file.noise.case.as_deref()) {
            Some(s) => Some(NoiseCase::from_str(s).map_err(|e| CliError::Config(e.to_string()))?),
            None => None,
        };
        let (case_s1, case_s2) = case.unwrap_or(NoiseCase::I).amplitudes();
        let eps = file.noise.eps.unwrap_or(0.05);
        let noise = NoiseParams::new(
            file.noise.sigma1.unwrap_or(case_s1),
            file.noise.sigma2.unwrap_or(case_s2),
            eps,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;

        let mut train = TrainConfig {
            seed: master_seed,
            ..TrainConfig::default()
        };
        let t = &file.train;
        if let Some(v) = t.epochs {
            train.epochs = v;
        }
        if let Some(v) = t.raw_samples {
            train.raw_samples = v;
        }
        if let Some(v) = t.history_every {
            train.history_every = v;
        }
        if let Some(v) = t.checkpoint_every {
            train.checkpoint_every = Some(v);
        }
        if let Some([a, b, c, d]) = t.domain {
            train.domain = BoxRegion::new(a, b, c, d);
        }
        if let Some(v) = t.learning_rate {
            train.adam.lr = v;
        }
        if let Some(v) = t.lambda1 {
            train.weights.lambda1 = v;
        }
        if let Some(v) = t.lambda2 {
            train.weights.lambda2 = v;
        }
        if let Some(v) = t.delta {
            train.weights.delta = v;
        }
        train
            .validate()
            .map_err(|e| CliError::Config(format!("train section: {e}")))?;

        let mc = McConfig {
            dt: file.mc.dt.unwrap_or(1e-3),
            max_steps: file.mc.max_steps.unwrap_or(100_000_000),
            trajectories: file.mc.trajectories.unwrap_or(500),
            master_seed,
        };
        mc.validate()
            .map_err(|e| CliError::Config(format!("mc section: {e}")))?;

        let boundary = match flags.case.as_deref() {
            Some("a") | Some("A") => Boundary::Line,
            Some("b") | Some("B") => Boundary::Separatrix,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown case `{other}` (expected `a` or `b`)"
                )))
            }
            None => file.exit.boundary.unwrap_or(Boundary::Line),
        };
        let line_c = file.exit.line_c.unwrap_or(3.0);
        if !(line_c > 0.0 && line_c.is_finite()) {
            return Err(CliError::Config(format!(
                "exit.line_c must be positive and finite, got {line_c}"
            )));
        }
        let eps_grid = flags
            .eps
            .clone()
            .or(file.exit.eps_grid)
            .unwrap_or_else(|| match boundary {
                Boundary::Line => vec![0.03, 0.05, 0.08],
                Boundary::Separatrix => vec![0.04, 0.06],
            });
        if eps_grid.is_empty() || eps_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(CliError::Config(
                "eps grid must be nonempty with positive finite entries".into(),
            ));
        }
        let with_mc = file.exit.with_mc.unwrap_or(false);

        let checkpoint = file
            .checkpoint
            .unwrap_or_else(|| out_dir.join("checkpoint.json"));
        let grid_nx = file.grid.nx.unwrap_or(61);
        let grid_ny = file.grid.ny.unwrap_or(41);
        if grid_nx < 2 || grid_ny < 2 {
            return Err(CliError::Config(
                "grid resolution needs at least 2 points per axis".into(),
            ));
        }

        let mut run = Self {
            fingerprint: String::new(),
            system,
            noise,
            train,
            mc,
            boundary,
            line_c,
            eps_grid,
            with_mc,
            out_dir,
            master_seed,
            checkpoint,
            grid_nx,
            grid_ny,
            validate_full: file.validate.full.unwrap_or(false),
            gradient_checks: file.validate.gradient_checks.unwrap_or(100),
        };
        run.fingerprint = run.compute_fingerprint()?;
        Ok(run)
    }

    /// FNV-1a 64 over the canonical JSON of all data-affecting settings.
    fn compute_fingerprint(&self) -> Result<String, CliError> {
        let view = FingerprintView {
            system: self.system.id(),
            params: self.system.params(),
            noise: &self.noise,
            train: &self.train,
            mc: &self.mc,
            boundary: self.boundary.label(),
            line_c: self.line_c,
            eps_grid: &self.eps_grid,
            with_mc: self.with_mc,
            master_seed: self.master_seed,
        };
        let canon = serde_json::to_string(&view)
            .map_err(|e| CliError::Config(format!("cannot fingerprint config: {e}")))?;
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for byte in canon.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x1_0000_01b3);
        }
        let mut out = String::with_capacity(16);
        write!(out, "{hash:016x}").expect("writing to a string cannot fail");
        Ok(out)
    }
}

/// Parses a comma-separated list of positive intensities.
pub fn parse_eps_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad eps value `{tok}`: {e}"))
        })
        .collect()
}
