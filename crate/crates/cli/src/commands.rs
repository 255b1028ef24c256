//! The six subcommands: analysis, training, paths, exit times, Monte Carlo,
//! and the oracle validation suite.
//!
//! Each command reads the resolved [`Run`], performs its computation through
//! the library crate, and emits headered CSV/JSON artifacts into the output
//! directory. Stdout carries a short completion line per artifact; stderr
//! carries progress for long computations. Artifact bytes depend only on the
//! resolved configuration.

use std::path::Path;

use serde::Serialize;

use quasipot::adnet::{
    gradient_check_sweep, LossWeights, NetArch, NetParams, TrainPoint, PARAM_COUNT,
};
use quasipot::dynsys::{
    bifurcation_branch, find_fixed_points, saddle_node_critical, sn1_stability_threshold,
    stable_manifold, unstable_manifold, FixedPoint, FixedPointKind,
};
use quasipot::exit::{self, ExitAsymptotics};
use quasipot::landscape::{
    boundary_argmin_line, grid_rows, hessian_riccati, QuasipotentialModel,
};
use quasipot::linalg::{BoxRegion, StateVec};
use quasipot::mc::{exit_ensemble, trajectory_seed, ExitSpec, McConfig};
use quasipot::model::{NoiseParams, System, SystemParams};
use quasipot::paths::{
    max_hamiltonian, moisture_dip_check, mpp_reverse, path_distance, shooting_mpp, MoistureDip,
    Path as MppPath, ReverseOptions, ShootingOptions,
};
use quasipot::trainer::{prepare, train_observed, Checkpoint, TrainConfig};

use crate::artifacts::{num, out_path, write_csv, write_json};
use crate::config::{Boundary, Run};
use crate::CliError;

/// Saddle-target shooting tolerance; the bisection on launch angles bottoms
/// out near 1.5e-2 in 64-bit arithmetic because the flow stretches launch
/// rounding by the ratio of saddle timescales.
const SADDLE_HIT_TOLERANCE: f64 = 0.02;

fn saddle_of(fps: &[FixedPoint]) -> Result<&FixedPoint, CliError> {
    fps.iter()
        .find(|fp| fp.kind == FixedPointKind::Saddle)
        .ok_or_else(|| CliError::Computation("the system has no saddle point".into()))
}

/// Stable nodes ordered by biomass: (desert-like, vegetated-like).
fn attractors_of(fps: &[FixedPoint]) -> Result<(&FixedPoint, &FixedPoint), CliError> {
    let mut stable: Vec<&FixedPoint> = fps
        .iter()
        .filter(|fp| fp.kind == FixedPointKind::StableNode)
        .collect();
    stable.sort_by(|a, b| a.location.x1.total_cmp(&b.location.x1));
    match stable.as_slice() {
        [lo, .., hi] => Ok((lo, hi)),
        _ => Err(CliError::Computation(
            "expected two stable attractors".into(),
        )),
    }
}

fn load_model(run: &Run) -> Result<(Checkpoint, QuasipotentialModel), CliError> {
    if !run.checkpoint.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist; run `quasipot train` first or set `checkpoint` in the config",
            run.checkpoint.display()
        )));
    }
    let cp = Checkpoint::load(&run.checkpoint)?;
    let model = QuasipotentialModel::from_checkpoint(&cp, run.noise.eps)?;
    Ok((cp, model))
}

fn done(path: &Path) {
    println!("wrote {}", path.display());
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AnalyzeSummary {
    fixed_points: Vec<FixedPointRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    critical_rainfall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold_biomass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    desert_stability_rainfall: Option<f64>,
}

#[derive(Serialize)]
struct FixedPointRow {
    kind: String,
    x1: f64,
    x2: f64,
}

/// Equilibria, separatrix, unstable manifold, and the bifurcation diagram.
pub fn cmd_analyze(run: &Run) -> Result<(), CliError> {
    let fps = find_fixed_points(&run.system)?;

    let fp_path = out_path(run, "fixed_points.csv")?;
    let fp_rows: Vec<Vec<String>> = fps
        .iter()
        .map(|fp| {
            vec![
                fp.kind.to_string(),
                num(fp.location.x1),
                num(fp.location.x2),
                num(fp.eigenvalues[0].re),
                num(fp.eigenvalues[0].im),
                num(fp.eigenvalues[1].re),
                num(fp.eigenvalues[1].im),
            ]
        })
        .collect();
    write_csv(
        run,
        &fp_path,
        &[],
        &["kind", "x1", "x2", "eig1_re", "eig1_im", "eig2_re", "eig2_im"],
        &fp_rows,
    )?;
    done(&fp_path);

    let mut summary = AnalyzeSummary {
        fixed_points: fps
            .iter()
            .map(|fp| FixedPointRow {
                kind: fp.kind.to_string(),
                x1: fp.location.x1,
                x2: fp.location.x2,
            })
            .collect(),
        critical_rainfall: None,
        fold_biomass: None,
        desert_stability_rainfall: None,
    };

    if let System::Vegetation(params) = &run.system {
        let saddle = saddle_of(&fps)?;
        let (sn1, sn2) = attractors_of(&fps)?;

        let sep = stable_manifold(&run.system, saddle, &run.train.domain)?;
        let sep_path = out_path(run, "separatrix.csv")?;
        let mut arclen = 0.0;
        let mut sep_rows = Vec::with_capacity(sep.points().len());
        let mut prev: Option<StateVec> = None;
        for &p in sep.points() {
            if let Some(q) = prev {
                arclen += q.dist(p);
            }
            sep_rows.push(vec![num(p.x1), num(p.x2), num(arclen)]);
            prev = Some(p);
        }
        write_csv(
            run,
            &sep_path,
            &[format!(
                "stable manifold of the saddle at ({}, {})",
                num(saddle.location.x1),
                num(saddle.location.x2)
            )],
            &["x1", "x2", "arclen"],
            &sep_rows,
        )?;
        done(&sep_path);

        let branches = unstable_manifold(
            &run.system,
            saddle,
            &[sn1.location, sn2.location],
            &run.train.domain,
        )?;
        let um_path = out_path(run, "unstable_manifold.csv")?;
        let mut um_rows = Vec::new();
        let mut um_comments = Vec::new();
        for (name, branch) in ["plus", "minus"].iter().zip(branches.iter()) {
            match branch.limit {
                Some(limit) => um_comments.push(format!(
                    "branch {name} converges to ({}, {})",
                    num(limit.x1),
                    num(limit.x2)
                )),
                None => um_comments.push(format!("branch {name} leaves the window")),
            }
            for p in &branch.points {
                um_rows.push(vec![name.to_string(), num(p.x1), num(p.x2)]);
            }
        }
        write_csv(
            run,
            &um_path,
            &um_comments,
            &["branch", "x1", "x2"],
            &um_rows,
        )?;
        done(&um_path);

        // Rainfall sweep in exact 2.5e-3 steps so reruns hit identical grid
        // values: 1.3000, 1.3025, ..., 1.8000.
        let r_grid: Vec<f64> = (0..=200)
            .map(|i| (13_000 + 25 * i) as f64 / 10_000.0)
            .collect();
        let bif = bifurcation_branch(params, &r_grid)?;
        let bif_path = out_path(run, "bifurcation.csv")?;
        let bif_rows: Vec<Vec<String>> = bif
            .iter()
            .map(|row| {
                vec![
                    num(row.rainfall),
                    row.kind.to_string(),
                    num(row.x1),
                    num(row.x2),
                ]
            })
            .collect();
        write_csv(
            run,
            &bif_path,
            &[],
            &["rainfall", "kind", "x1", "x2"],
            &bif_rows,
        )?;
        done(&bif_path);

        let (r_c, x1_c) = saddle_node_critical(params)?;
        summary.critical_rainfall = Some(r_c);
        summary.fold_biomass = Some(x1_c);
        summary.desert_stability_rainfall = Some(sn1_stability_threshold(params));
    }

    let sum_path = out_path(run, "analyze_summary.json")?;
    write_json(run, &sum_path, &summary)?;
    done(&sum_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    epochs: u64,
    parameter_count: usize,
    collocation_points: usize,
    x_ref: StateVec,
    /// Loss of the shipped (lowest-loss) iterate.
    final_total: f64,
    best_epoch: u64,
    v_at_x_ref: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_at_saddle: Option<f64>,
}

/// Trains the decomposition network and writes checkpoint + diagnostics.
pub fn cmd_train(run: &Run) -> Result<(), CliError> {
    let setup = prepare(&run.system, &run.noise, &run.train)?;
    eprintln!(
        "training {} for {} epochs on {} collocation points",
        run.system.id(),
        run.train.epochs,
        setup.colloc.points().len()
    );

    let checkpoint_path = run.checkpoint.clone();
    if let Some(parent) = checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::Computation(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    let mut history_rows: Vec<Vec<String>> = Vec::new();
    let epochs = run.train.epochs;
    let train_run = train_observed(
        &run.system,
        &run.noise,
        setup.x_ref,
        &run.train,
        &setup.colloc,
        &mut |row| {
            history_rows.push(vec![
                row.epoch.to_string(),
                num(row.dynamics),
                num(row.orthogonality),
                num(row.anchor),
                num(row.total),
            ]);
            if row.epoch % 10_000 == 0 || row.epoch == epochs {
                eprintln!("epoch {:>8}: total {:.3e}", row.epoch, row.total);
            }
        },
        &mut |cp| cp.save(&checkpoint_path),
    )?;

    train_run.checkpoint.save(&run.checkpoint)?;
    println!("wrote {}", run.checkpoint.display());

    let hist_path = out_path(run, "loss_history.csv")?;
    write_csv(
        run,
        &hist_path,
        &[],
        &["epoch", "dynamics", "orthogonality", "anchor", "total"],
        &history_rows,
    )?;
    done(&hist_path);

    let model = QuasipotentialModel::from_checkpoint(&train_run.checkpoint, run.noise.eps)?;
    let grid_path = out_path(run, "field_grid.csv")?;
    let rows: Vec<Vec<String>> = grid_rows(&model, &run.train.domain, run.grid_nx, run.grid_ny)
        .into_iter()
        .map(|g| {
            vec![
                num(g.x1),
                num(g.x2),
                num(g.v),
                num(g.l1),
                num(g.l2),
                num(g.f),
            ]
        })
        .collect();
    write_csv(
        run,
        &grid_path,
        &[format!(
            "lattice {} x {} over [{}, {}] x [{}, {}]",
            run.grid_nx,
            run.grid_ny,
            num(run.train.domain.x1_min),
            num(run.train.domain.x1_max),
            num(run.train.domain.x2_min),
            num(run.train.domain.x2_max)
        )],
        &["x1", "x2", "v", "l1", "l2", "f"],
        &rows,
    )?;
    done(&grid_path);

    let best = train_run
        .checkpoint
        .best
        .as_ref()
        .ok_or_else(|| {
            CliError::Computation("trained checkpoint lacks best-iterate data".into())
        })?;
    let v_at_saddle = match &run.system {
        System::Vegetation(_) => {
            let fps = find_fixed_points(&run.system)?;
            Some(model.v(saddle_of(&fps)?.location))
        }
        System::OrnsteinUhlenbeck => None,
    };
    let summary = TrainSummary {
        epochs: run.train.epochs,
        parameter_count: PARAM_COUNT,
        collocation_points: setup.colloc.points().len(),
        x_ref: setup.x_ref,
        final_total: best.total,
        best_epoch: best.epoch,
        v_at_x_ref: model.v(setup.x_ref),
        v_at_saddle,
    };
    let sum_path = out_path(run, "train_summary.json")?;
    write_json(run, &sum_path, &summary)?;
    done(&sum_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// mpp
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MppSummary {
    boundary: &'static str,
    target: StateVec,
    x_ref: StateVec,
    hausdorff_distance: f64,
    action_learned: f64,
    action_shooting: f64,
    v_at_target: f64,
    action_vs_v_rel_err: f64,
    dip_learned: MoistureDip,
    dip_shooting: MoistureDip,
    max_hamiltonian_shooting: f64,
}

fn path_rows(path: &MppPath, with_momenta: bool) -> Vec<Vec<String>> {
    (0..path.len())
        .map(|i| {
            let mut row = vec![num(path.t[i]), num(path.x[i].x1), num(path.x[i].x2)];
            if with_momenta {
                let p = path.p.as_ref().map(|p| p[i]).unwrap_or(StateVec::ZERO);
                row.push(num(p.x1));
                row.push(num(p.x2));
            }
            row.push(num(path.cumulative_action[i]));
            row
        })
        .collect()
}

/// Exit target for the configured boundary: the landscape minimum on the
/// line, or the saddle on the separatrix.
fn exit_target(run: &Run, model: &QuasipotentialModel) -> Result<StateVec, CliError> {
    match run.boundary {
        Boundary::Line => Ok(boundary_argmin_line(
            model,
            run.line_c,
            run.train.domain.x2_min,
            run.train.domain.x2_max,
        )
        .point),
        Boundary::Separatrix => {
            let fps = find_fixed_points(&run.system)?;
            Ok(saddle_of(&fps)?.location)
        }
    }
}

/// Most probable path to the configured boundary, learned and by shooting.
pub fn cmd_mpp(run: &Run) -> Result<(), CliError> {
    let (_, model) = load_model(run)?;
    let target = exit_target(run, &model)?;
    let hit_tolerance = match run.boundary {
        Boundary::Line => ShootingOptions::default().hit_tolerance,
        Boundary::Separatrix => SADDLE_HIT_TOLERANCE,
    };

    eprintln!(
        "integrating learned path to ({}, {})",
        num(target.x1),
        num(target.x2)
    );
    let learned = mpp_reverse(&model, target, &ReverseOptions::default())?;
    eprintln!("shooting oracle path");
    let shooting = shooting_mpp(
        &run.system,
        &run.noise,
        model.x_ref(),
        target,
        &ShootingOptions {
            hit_tolerance,
            ..ShootingOptions::default()
        },
    )?;

    let learned_path = out_path(run, "mpp_learned.csv")?;
    write_csv(
        run,
        &learned_path,
        &[],
        &["t", "x1", "x2", "action"],
        &path_rows(&learned, false),
    )?;
    done(&learned_path);

    let shooting_path = out_path(run, "mpp_shooting.csv")?;
    write_csv(
        run,
        &shooting_path,
        &[],
        &["t", "x1", "x2", "p1", "p2", "action"],
        &path_rows(&shooting, true),
    )?;
    done(&shooting_path);

    let v_at_target = model.v(target);
    let action_learned = learned.action();
    let summary = MppSummary {
        boundary: run.boundary.label(),
        target,
        x_ref: model.x_ref(),
        hausdorff_distance: path_distance(&learned, &shooting),
        action_learned,
        action_shooting: shooting.action(),
        v_at_target,
        action_vs_v_rel_err: (action_learned - v_at_target).abs() / v_at_target.abs().max(1e-300),
        dip_learned: moisture_dip_check(&learned),
        dip_shooting: moisture_dip_check(&shooting),
        max_hamiltonian_shooting: max_hamiltonian(&shooting, &run.system, &run.noise)?,
    };
    let sum_path = out_path(run, "mpp_summary.json")?;
    write_json(run, &sum_path, &summary)?;
    done(&sum_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// mfpt
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MfptIngredients {
    boundary: &'static str,
    barrier: f64,
    f_integral: f64,
    x_ref: StateVec,
    eps_grid: Vec<f64>,
    with_mc: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    line_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundary_argmin: Option<StateVec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    det_h_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    det_h_saddle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    det_h_attractor: Option<f64>,
    /// Separatrix-case prefactor, which carries no intensity dependence.
    #[serde(skip_serializing_if = "Option::is_none")]
    constant_prefactor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_at_saddle: Option<f64>,
}

/// Builds the exit-time asymptotics for the configured boundary.
fn assemble_asymptotics(
    run: &Run,
    model: &QuasipotentialModel,
) -> Result<(ExitAsymptotics, StateVec), CliError> {
    let target = exit_target(run, model)?;
    let path = mpp_reverse(model, target, &ReverseOptions::default())?;
    let asym = match run.boundary {
        Boundary::Line => exit::line_exit_asymptotics(model, run.line_c, target, &path)?,
        Boundary::Separatrix => exit::separatrix_exit_asymptotics(model, &path)?,
    };
    Ok((asym, target))
}

/// Builds the Monte Carlo exit rule matching the configured boundary.
fn build_exit_spec(run: &Run, fps: &[FixedPoint]) -> Result<ExitSpec, CliError> {
    match run.boundary {
        Boundary::Line => Ok(ExitSpec::line(run.line_c)?),
        Boundary::Separatrix => {
            let saddle = saddle_of(fps)?;
            let (sn1, _) = attractors_of(fps)?;
            let sep = stable_manifold(&run.system, saddle, &run.train.domain)?;
            Ok(ExitSpec::separatrix(&sep, sn1.location)?)
        }
    }
}

/// Asymptotic mean-first-exit-time table, optionally cross-checked by MC.
pub fn cmd_mfpt(run: &Run) -> Result<(), CliError> {
    let (_, model) = load_model(run)?;
    let (asym, target) = assemble_asymptotics(run, &model)?;
    let curve = exit::mfpt_curve(&asym, &run.eps_grid)?;

    let mc_results = if run.with_mc {
        let fps = find_fixed_points(&run.system)?;
        let spec = build_exit_spec(run, &fps)?;
        let x0 = model.x_ref();
        let mut results = Vec::with_capacity(run.eps_grid.len());
        for (i, &eps) in run.eps_grid.iter().enumerate() {
            let noise = NoiseParams::new(run.noise.sigma1, run.noise.sigma2, eps)
                .map_err(|e| CliError::Computation(e.to_string()))?;
            let cfg = McConfig {
                master_seed: trajectory_seed(run.master_seed, i as u64),
                ..run.mc
            };
            eprintln!(
                "sampling {} exits at eps = {} ({} trajectories)",
                run.boundary.label(),
                num(eps),
                cfg.trajectories
            );
            results.push(exit_ensemble(x0, &spec, &run.system, &noise, &cfg)?);
        }
        Some(results)
    } else {
        None
    };

    let table_path = out_path(run, "mfpt.csv")?;
    let mut columns = vec!["eps", "prefactor", "mfpt_asymptotic", "ln_mfpt_asymptotic"];
    if run.with_mc {
        columns.extend([
            "mc_mean",
            "mc_ci_low",
            "mc_ci_high",
            "mc_censored",
            "mc_over_asymptotic",
        ]);
    }
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut cells = vec![
                num(row.eps),
                num(row.prefactor),
                num(row.mfpt),
                num(row.ln_mfpt),
            ];
            if let Some(mc) = &mc_results {
                let r = &mc[i];
                cells.push(num(r.mean));
                cells.push(num(r.ci_low));
                cells.push(num(r.ci_high));
                cells.push(r.censored.to_string());
                cells.push(num(r.mean / row.mfpt));
            }
            cells
        })
        .collect();
    write_csv(run, &table_path, &[], &columns, &rows)?;
    done(&table_path);

    let mut ingredients = MfptIngredients {
        boundary: run.boundary.label(),
        barrier: asym.barrier(),
        f_integral: asym.f_integral(),
        x_ref: model.x_ref(),
        eps_grid: run.eps_grid.clone(),
        with_mc: run.with_mc,
        line_c: None,
        boundary_argmin: None,
        mu_star: None,
        det_h_star: None,
        lambda_star: None,
        det_h_saddle: None,
        det_h_attractor: None,
        constant_prefactor: None,
        v_at_saddle: None,
    };
    match &asym {
        ExitAsymptotics::NonCharacteristic {
            mu_star,
            det_h_star,
            ..
        } => {
            ingredients.line_c = Some(run.line_c);
            ingredients.boundary_argmin = Some(target);
            ingredients.mu_star = Some(*mu_star);
            ingredients.det_h_star = Some(*det_h_star);
        }
        ExitAsymptotics::Characteristic {
            barrier,
            lambda_star,
            det_h_saddle,
            det_h_attractor,
            ..
        } => {
            ingredients.lambda_star = Some(*lambda_star);
            ingredients.det_h_saddle = Some(*det_h_saddle);
            ingredients.det_h_attractor = Some(*det_h_attractor);
            ingredients.v_at_saddle = Some(*barrier);
            ingredients.constant_prefactor = Some(asym.prefactor(1.0)?);
        }
    }
    let ing_path = out_path(run, "mfpt_ingredients.json")?;
    write_json(run, &ing_path, &ingredients)?;
    done(&ing_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// mc
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct McSummary {
    eps: f64,
    boundary: &'static str,
    start: StateVec,
    dt: f64,
    max_steps: u64,
    trajectories: usize,
    ensemble_seed: u64,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
    censored: usize,
    crossings: usize,
    captures: usize,
    total_steps: u64,
}

/// Direct Euler–Maruyama exit sampling at each configured intensity.
pub fn cmd_mc(run: &Run) -> Result<(), CliError> {
    let fps = find_fixed_points(&run.system)?;
    let x0 = match &run.system {
        System::Vegetation(_) => attractors_of(&fps)?.1.location,
        System::OrnsteinUhlenbeck => StateVec::ZERO,
    };
    let spec = build_exit_spec(run, &fps)?;

    for (i, &eps) in run.eps_grid.iter().enumerate() {
        let noise = NoiseParams::new(run.noise.sigma1, run.noise.sigma2, eps)
            .map_err(|e| CliError::Computation(e.to_string()))?;
        let cfg = McConfig {
            master_seed: trajectory_seed(run.master_seed, i as u64),
            ..run.mc
        };
        eprintln!(
            "sampling {} exits at eps = {} ({} trajectories)",
            run.boundary.label(),
            num(eps),
            cfg.trajectories
        );
        let result = exit_ensemble(x0, &spec, &run.system, &noise, &cfg)?;

        let raw_path = out_path(run, &format!("mc_raw_{}.csv", num(eps)))?;
        let rows: Vec<Vec<String>> = result
            .times
            .iter()
            .enumerate()
            .map(|(j, time)| {
                vec![
                    j.to_string(),
                    trajectory_seed(cfg.master_seed, j as u64).to_string(),
                    time.map(num).unwrap_or_else(|| "CENSORED".into()),
                ]
            })
            .collect();
        write_csv(
            run,
            &raw_path,
            &[format!("eps: {}", num(eps))],
            &["index", "seed", "exit_time"],
            &rows,
        )?;
        done(&raw_path);

        let summary = McSummary {
            eps,
            boundary: run.boundary.label(),
            start: x0,
            dt: cfg.dt,
            max_steps: cfg.max_steps,
            trajectories: cfg.trajectories,
            ensemble_seed: cfg.master_seed,
            mean: result.mean,
            ci_low: result.ci_low,
            ci_high: result.ci_high,
            censored: result.censored,
            crossings: result.crossings,
            captures: result.captures,
            total_steps: result.total_steps,
        };
        let sum_path = out_path(run, &format!("mc_summary_{}.json", num(eps)))?;
        write_json(run, &sum_path, &summary)?;
        done(&sum_path);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct CheckOutcome {
    name: &'static str,
    /// `None`: skipped, with the reason in `detail`.
    passed: Option<bool>,
    detail: String,
}

fn check(name: &'static str, result: Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: Some(true),
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: Some(false),
            detail,
        },
    }
}

fn skipped(name: &'static str, reason: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: None,
        detail: reason,
    }
}

fn close(label: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{label}: got {got}, want {want} ± {tol}"))
    }
}

/// Exact-oracle suite: bifurcation identities, hand-valued curvature data,
/// the derivative-engine audit, and optional trained-network regression.
pub fn cmd_validate(run: &Run) -> Result<(), CliError> {
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    let baseline = SystemParams::default();
    let sys = System::Vegetation(baseline);

    outcomes.push(check(
        "fixed-points",
        (|| -> Result<String, String> {
            let fps = find_fixed_points(&sys).map_err(|e| e.to_string())?;
            if fps.len() != 3 {
                return Err(format!("expected 3 fixed points, found {}", fps.len()));
            }
            let want = [
                ("desert", 0.0, 1.55),
                ("saddle", 5.0 / 3.0, 1.55 / 1.2),
                ("vegetated", 4.6366, 0.9959),
            ];
            for (fp, (label, x1, x2)) in fps.iter().zip(want) {
                close(label, fp.location.x1, x1, 1e-3)?;
                close(label, fp.location.x2, x2, 1e-3)?;
            }
            Ok("three equilibria at their solved locations".into())
        })(),
    ));

    outcomes.push(check(
        "critical-rainfall",
        (|| -> Result<String, String> {
            let (r_c, x1_c) = saddle_node_critical(&baseline).map_err(|e| e.to_string())?;
            close("R_c", r_c, 1.4278, 1e-3)?;
            Ok(format!("fold at R = {r_c:.6}, biomass {x1_c:.6}"))
        })(),
    ));

    // The desert-stability threshold must equal its closed form exactly.
    outcomes.push(check(
        "desert-stability-threshold",
        (|| -> Result<String, String> {
            let got = sn1_stability_threshold(&baseline);
            let want = baseline.beta * baseline.alpha / (baseline.rho * baseline.x0);
            close("threshold", got, want, 1e-12)?;
            Ok(format!("desert state loses stability at R = {got}"))
        })(),
    ));

    outcomes.push(check(
        "riccati-curvature",
        (|| -> Result<String, String> {
            let noise = NoiseParams::new(0.1, 1.0, run.noise.eps).map_err(|e| e.to_string())?;
            let fps = find_fixed_points(&sys).map_err(|e| e.to_string())?;
            let saddle = fps
                .iter()
                .find(|fp| fp.kind == FixedPointKind::Saddle)
                .ok_or("no saddle found")?;
            let vegetated = fps
                .iter()
                .filter(|fp| fp.kind == FixedPointKind::StableNode)
                .max_by(|a, b| a.location.x1.total_cmp(&b.location.x1))
                .ok_or("no vegetated attractor found")?;
            let h_bar = hessian_riccati(vegetated, &sys, &noise).map_err(|e| e.to_string())?;
            close("Hbar11", h_bar.m11, 0.0543, 1e-3)?;
            close("Hbar12", h_bar.m12, 0.0608, 1e-3)?;
            close("Hbar22", h_bar.m22, 2.9133, 1e-3)?;
            close("det Hbar", h_bar.det(), 0.1546, 5e-4)?;
            let h_star = hessian_riccati(saddle, &sys, &noise).map_err(|e| e.to_string())?;
            close("Hstar11", h_star.m11, -0.0446, 1e-3)?;
            close("Hstar12", h_star.m12, 0.4228, 1e-3)?;
            close("Hstar22", h_star.m22, 1.3305, 1e-3)?;
            close("det Hstar", h_star.det(), -0.238, 1e-3)?;
            let lambda_star = saddle
                .eigenvalues
                .iter()
                .map(|ev| ev.re)
                .fold(f64::NEG_INFINITY, f64::max);
            close("lambda_star", lambda_star, 0.3721, 1e-3)?;
            Ok("attractor and saddle Hessians match hand values".into())
        })(),
    ));

    outcomes.push(check(
        "derivative-engine",
        (|| -> Result<String, String> {
            let noise = NoiseParams::new(0.1, 1.0, run.noise.eps).map_err(|e| e.to_string())?;
            let mut pts = Vec::new();
            for i in 0..8 {
                for j in 0..6 {
                    let x =
                        StateVec::new(1.5 + 5.0 * i as f64 / 7.0, 0.25 + 1.5 * j as f64 / 5.0);
                    pts.push(TrainPoint::build(&sys, &noise, x).map_err(|e| e.to_string())?);
                }
            }
            let params = NetParams::init(&NetArch::standard(), run.master_seed);
            let worst = gradient_check_sweep(
                &params,
                &pts,
                StateVec::new(4.6366, 0.9959),
                &LossWeights::default(),
                run.gradient_checks,
                run.master_seed,
            )
            .map_err(|e| e.to_string())?;
            if worst <= 1e-5 {
                Ok(format!(
                    "{} randomized checks, worst relative error {worst:.3e}",
                    run.gradient_checks
                ))
            } else {
                Err(format!(
                    "worst relative error {worst:.3e} exceeds 1e-5 over {} checks",
                    run.gradient_checks
                ))
            }
        })(),
    ));

    if run.validate_full {
        outcomes.push(check(
            "benchmark-regression",
            (|| -> Result<String, String> {
                let cfg = TrainConfig {
                    domain: BoxRegion::new(-2.0, 2.0, -2.0, 2.0),
                    epochs: 50_000,
                    seed: run.master_seed,
                    ..TrainConfig::default()
                };
                let ou = System::OrnsteinUhlenbeck;
                let noise =
                    NoiseParams::new(1.0, 1.0, run.noise.eps).map_err(|e| e.to_string())?;
                let setup = prepare(&ou, &noise, &cfg).map_err(|e| e.to_string())?;
                eprintln!("training the benchmark system for {} epochs", cfg.epochs);
                let run_out = train_observed(
                    &ou,
                    &noise,
                    setup.x_ref,
                    &cfg,
                    &setup.colloc,
                    &mut |row| {
                        if row.epoch % 10_000 == 0 {
                            eprintln!("epoch {:>8}: total {:.3e}", row.epoch, row.total);
                        }
                    },
                    &mut |_| Ok(()),
                )
                .map_err(|e| e.to_string())?;
                let model = QuasipotentialModel::from_checkpoint(&run_out.checkpoint, noise.eps)
                    .map_err(|e| e.to_string())?;
                let mut worst_rel = 0.0f64;
                let mut l_sum = 0.0f64;
                let n = 21;
                for j in 0..n {
                    for i in 0..n {
                        let x = StateVec::new(
                            -2.0 + 4.0 * i as f64 / (n - 1) as f64,
                            -2.0 + 4.0 * j as f64 / (n - 1) as f64,
                        );
                        let exact = x.norm_sq();
                        worst_rel = worst_rel.max((model.v(x) - exact).abs() / (exact + 0.1));
                        l_sum += model.l(x).norm();
                    }
                }
                let l_mean = l_sum / ((n * n) as f64);
                if worst_rel <= 0.05 && l_mean <= 0.02 {
                    Ok(format!(
                        "max relative landscape error {worst_rel:.4}, mean rotational residue {l_mean:.4}"
                    ))
                } else {
                    Err(format!(
                        "landscape error {worst_rel:.4} (limit 0.05), rotational residue {l_mean:.4} (limit 0.02)"
                    ))
                }
            })(),
        ));
    } else {
        outcomes.push(skipped(
            "benchmark-regression",
            "enable with `validate.full = true` (trains the benchmark system, ~minutes)".into(),
        ));
    }

    if run.checkpoint.exists() {
        outcomes.push(check(
            "checkpoint-integrity",
            (|| -> Result<String, String> {
                let cp = Checkpoint::load(&run.checkpoint).map_err(|e| e.to_string())?;
                let model = QuasipotentialModel::from_checkpoint(&cp, run.noise.eps)
                    .map_err(|e| e.to_string())?;
                let v_ref = model.v(cp.x_ref);
                let saddle_detail = match &cp.system {
                    System::Vegetation(_) => {
                        let fps = find_fixed_points(&cp.system).map_err(|e| e.to_string())?;
                        let saddle = fps
                            .iter()
                            .find(|fp| fp.kind == FixedPointKind::Saddle)
                            .ok_or("checkpoint system has no saddle")?;
                        format!(", V(saddle) = {}", model.v(saddle.location))
                    }
                    System::OrnsteinUhlenbeck => String::new(),
                };
                Ok(format!(
                    "epoch {}, V(x_ref) = {v_ref}{saddle_detail}",
                    cp.epoch
                ))
            })(),
        ));
    } else {
        outcomes.push(skipped(
            "checkpoint-integrity",
            format!("no checkpoint at {}", run.checkpoint.display()),
        ));
    }

    let mut failures = 0usize;
    for outcome in &outcomes {
        match outcome.passed {
            Some(true) => println!("check {:<28} pass    {}", outcome.name, outcome.detail),
            Some(false) => {
                failures += 1;
                println!("check {:<28} FAIL    {}", outcome.name, outcome.detail);
            }
            None => println!("check {:<28} skipped {}", outcome.name, outcome.detail),
        }
    }
    if failures > 0 {
        Err(CliError::Computation(format!(
            "{failures} validation check(s) failed"
        )))
    } else {
        println!("all executed checks passed");
        Ok(())
    }
}
