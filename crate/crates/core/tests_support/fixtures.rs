//! Shared trained-model fixtures for tests and the cache-warming example.
//!
//! Long trainings are cached as checkpoints under
//! `target/quasipot-test-cache/`, keyed by fixture name and verified against
//! the full embedded configuration on load. A partial checkpoint (crash or
//! warm-up in progress) resumes instead of restarting. Set
//! `QUASIPOT_TEST_RETRAIN=1` to ignore the cache.

use quasipot::linalg::BoxRegion;
use quasipot::model::{NoiseCase, NoiseParams, System};
use quasipot::trainer::{self, Checkpoint, TrainConfig, TrainError};
use std::path::{Path, PathBuf};

/// The trained models the test suite relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fixture {
    VegCaseI,
    VegCaseII,
    VegCaseIII,
    Ou,
}

impl Fixture {
    /// Training order for cache warmers; individual test targets pull
    /// single fixtures and never touch this roster.
    #[allow(dead_code)]
    pub const ALL: [Fixture; 4] = [
        Fixture::VegCaseI,
        Fixture::Ou,
        Fixture::VegCaseII,
        Fixture::VegCaseIII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fixture::VegCaseI => "vegetation-case-i",
            Fixture::VegCaseII => "vegetation-case-ii",
            Fixture::VegCaseIII => "vegetation-case-iii",
            Fixture::Ou => "ou-benchmark",
        }
    }

    pub fn setup(self) -> (System, NoiseParams, TrainConfig) {
        match self {
            Fixture::VegCaseI | Fixture::VegCaseII | Fixture::VegCaseIII => {
                let case = match self {
                    Fixture::VegCaseI => NoiseCase::I,
                    Fixture::VegCaseII => NoiseCase::II,
                    _ => NoiseCase::III,
                };
                let noise = NoiseParams::for_case(case, 0.05).unwrap();
                let cfg = TrainConfig {
                    checkpoint_every: Some(5_000),
                    ..TrainConfig::default()
                };
                (System::vegetation_default(), noise, cfg)
            }
            Fixture::Ou => {
                let noise = NoiseParams::new(1.0, 1.0, 0.1).unwrap();
                let cfg = TrainConfig {
                    domain: BoxRegion::new(-2.0, 2.0, -2.0, 2.0),
                    epochs: 50_000,
                    checkpoint_every: Some(5_000),
                    ..TrainConfig::default()
                };
                (System::OrnsteinUhlenbeck, noise, cfg)
            }
        }
    }
}

/// Cache directory shared by test binaries and examples (workspace target).
pub fn cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("QUASIPOT_TEST_CACHE_DIR") {
        return PathBuf::from(dir);
    }
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/quasipot-test-cache")
}

fn cache_path(f: Fixture) -> PathBuf {
    cache_dir().join(format!("{}.json", f.name()))
}

fn atomic_save(cp: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("json.tmp");
    cp.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Returns the fixture's trained checkpoint, training (or resuming) it if
/// the cache has no valid complete entry.
pub fn load_or_train(f: Fixture) -> Checkpoint {
    let (sys, noise, cfg) = f.setup();
    let path = cache_path(f);
    let retrain = std::env::var("QUASIPOT_TEST_RETRAIN").is_ok_and(|v| v == "1");
    let cached = if retrain { None } else { Checkpoint::load(&path).ok() };
    let cached = cached.filter(|cp| cp.matches(&sys, &noise, &cfg) && cp.epoch <= cfg.epochs);
    if let Some(cp) = &cached {
        if cp.epoch == cfg.epochs {
            return cp.clone();
        }
        eprintln!(
            "[fixtures] resuming {} from epoch {} / {}",
            f.name(),
            cp.epoch,
            cfg.epochs
        );
    } else {
        eprintln!("[fixtures] training {} for {} epochs", f.name(), cfg.epochs);
    }
    std::fs::create_dir_all(cache_dir()).expect("create cache dir");
    let setup = trainer::prepare(&sys, &noise, &cfg).expect("prepare training");
    let started = std::time::Instant::now();
    let mut observer = |row: &trainer::HistoryRow| {
        if row.epoch % 10_000 == 0 || row.epoch == 1 {
            eprintln!(
                "[fixtures] {} epoch {:>7}: total {:.3e} (dyn {:.3e}, orth {:.3e}, anchor {:.3e}) [{:.0}s]",
                f.name(),
                row.epoch,
                row.total,
                row.dynamics,
                row.orthogonality,
                row.anchor,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let mut sink = |cp: &Checkpoint| atomic_save(cp, &path);
    let run = match cached {
        Some(cp) => trainer::resume_observed(&cp, &noise, &setup.colloc, &mut observer, &mut sink),
        None => trainer::train_observed(
            &sys,
            &noise,
            setup.x_ref,
            &cfg,
            &setup.colloc,
            &mut observer,
            &mut sink,
        ),
    }
    .expect("training run");
    run.checkpoint
}
