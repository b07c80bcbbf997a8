use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{ControllerSpec, ExperimentConfig};
use crate::ddpc::{
    check_lifted_excitation, collect_excitation, load_data, save_data, DataDescriptor, DataLibrary, DataTrajectory,
    DdpcController, OrientationSwitcher, RegDdpcController, RegDdpcParams, WarmupPolicy,
};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic, write_csv};
use crate::regret::{fit_sweep, regret_report, RegretReport, SweepFit, SweepRow};
use crate::riccati::stability_diagnostics;
use crate::systems::{sample_pairs, verify_embedding, CostWeights, KoopmanSystem};
use crate::tracking::{run_algorithm1, LmpcClosedForm, LmpcQp, StepController, TrackingRun};

/// Embedding residual threshold for `verify`.
pub const EMBEDDING_TOL: f64 = 1e-10;
/// Number of random `(z, u)` samples for the embedding check.
pub const EMBEDDING_SAMPLES: usize = 1000;

/// Where and how a command runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            jobs: None,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

/// Files written and a human-readable summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

fn data_dir(root: &Path, window: usize, lib: usize) -> PathBuf {
    root.join(format!("W{window}")).join(format!("lib{lib}"))
}

/// Collect (or load, when the config names a data directory) the
/// trajectories behind the libraries for window `W`.
pub fn trajectories(cfg: &ExperimentConfig, sys: &KoopmanSystem, window: usize) -> Result<Vec<DataTrajectory>> {
    let spec = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no data section".into()))?;
    let length = cfg.data_length(window).expect("data section present");
    let needed = cfg.t_ini + window;
    if length < needed {
        return Err(Error::Config(format!(
            "data length {length} is shorter than T_ini + W = {needed}"
        )));
    }
    (0..cfg.library_count())
        .map(|k| match &spec.dir {
            Some(root) => {
                let (data, desc) = load_data(&data_dir(root, window, k))?;
                if desc.t_ini != cfg.t_ini || desc.window != window {
                    return Err(Error::Config(format!(
                        "stored data was collected for T_ini={}, W={}",
                        desc.t_ini, desc.window
                    )));
                }
                Ok(data)
            }
            None => collect_excitation(
                sys,
                &DVector::from_column_slice(&spec.initial_states[k]),
                length,
                &DVector::from_column_slice(&spec.input_low),
                &DVector::from_column_slice(&spec.input_high),
                spec.seed + k as u64,
            ),
        })
        .collect()
}

/// A fresh controller of the configured kind for window `W`.
pub fn build_controller(
    cfg: &ExperimentConfig,
    sys: &KoopmanSystem,
    weights: &CostWeights,
    window: usize,
) -> Result<Box<dyn StepController>> {
    Ok(match &cfg.controller {
        ControllerSpec::Lmpc => Box::new(LmpcClosedForm::new(sys, weights, window)?),
        ControllerSpec::LmpcQp => Box::new(LmpcQp::new(sys, weights, window)?),
        ControllerSpec::Ddpc => {
            let data = trajectories(cfg, sys, window)?;
            let lib = DataLibrary::build(&data[0], cfg.t_ini, window)?;
            Box::new(DdpcController::new(lib, weights, WarmupPolicy::ZeroInput)?)
        }
        ControllerSpec::RegDdpc {
            lambda_g,
            lambda_z,
            switching,
            angle_index,
            ..
        } => {
            let libs = trajectories(cfg, sys, window)?
                .iter()
                .map(|d| DataLibrary::build(d, cfg.t_ini, window))
                .collect::<Result<Vec<_>>>()?;
            Box::new(RegDdpcController::new(
                libs,
                weights,
                RegDdpcParams::new(*lambda_g, *lambda_z)?,
                switching.then(|| OrientationSwitcher::new(*angle_index)),
                cfg.controller.admm_settings(),
                WarmupPolicy::ZeroInput,
            )?)
        }
    })
}

/// One closed loop and, on systems with an embedding, its regret report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: TrackingRun,
    pub report: Option<RegretReport>,
    pub runtime_ms: f64,
}

pub fn run_window(cfg: &ExperimentConfig, window: usize, r_scale: f64, amplitude: f64) -> Result<RunOutcome> {
    let sys = cfg.system()?;
    let weights = cfg.weights_with(r_scale)?;
    let r = cfg.reference_with(amplitude)?;
    let clock = Instant::now();
    let mut ctrl = build_controller(cfg, &sys, &weights, window)?;
    let run = run_algorithm1(&sys, ctrl.as_mut(), &r, &cfg.start_state(&r), &weights)?;
    let runtime_ms = clock.elapsed().as_secs_f64() * 1e3;
    let report = match sys.lifted() {
        Some(_) => Some(regret_report(&run, &sys, &weights, &r)?),
        None => None,
    };
    Ok(RunOutcome {
        run,
        report,
        runtime_ms,
    })
}

/// Mean and maximum squared distance between the first two state
/// coordinates and their targets.
pub fn position_errors(run: &TrackingRun) -> (f64, f64) {
    let sq: Vec<f64> = run
        .states
        .iter()
        .zip(&run.targets)
        .map(|(z, r)| (z[0] - r[0]).powi(2) + (z[1] - r[1]).powi(2))
        .collect();
    let mean = sq.iter().sum::<f64>() / sq.len().max(1) as f64;
    (mean, sq.iter().copied().fold(0.0, f64::max))
}

/// Header and rows of the per-step run table.
pub fn run_table(run: &TrackingRun) -> (Vec<String>, Vec<Vec<f64>>) {
    let n_z = run.states.first().map_or(0, |z| z.len());
    let n_u = run.controls.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_z).map(|i| format!("z_{i}")));
    header.extend((1..=n_u).map(|i| format!("u_{i}")));
    header.extend((1..=n_z).map(|i| format!("r_{i}")));
    header.push("stage_cost".into());
    header.push("solve_ms".into());
    let rows = (0..run.horizon())
        .map(|k| {
            let mut row = vec![(k + 1) as f64];
            row.extend(run.states[k].iter());
            row.extend(run.controls[k].iter());
            row.extend(run.targets[k].iter());
            row.push(run.stage_costs[k]);
            row.push(run.solve_ms[k]);
            row
        })
        .collect();
    (header, rows)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

struct CheckRow {
    check: String,
    subject: String,
    value: String,
    threshold: String,
    status: &'static str,
}

impl CheckRow {
    fn new(check: &str, subject: impl Into<String>, value: f64, threshold: Option<f64>, status: &'static str) -> Self {
        Self {
            check: check.into(),
            subject: subject.into(),
            value: fmt_f64(value),
            threshold: threshold.map(fmt_f64).unwrap_or_default(),
            status,
        }
    }

    fn bound(check: &str, subject: impl Into<String>, value: f64, limit: f64) -> Self {
        let status = if value <= limit { "pass" } else { "fail" };
        Self::new(check, subject, value, Some(limit), status)
    }
}

/// Embedding, excitation and Riccati diagnostics. Writes `verify.csv` and
/// fails with a diagnostic error if any check fails.
pub fn cmd_verify(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandOutput> {
    let sys = cfg.system()?;
    let weights = cfg.weights()?;
    let horizon = cfg.horizon()?;
    let seed = cfg.data.as_ref().map_or(0, |d| d.seed);
    let mut rows = Vec::new();

    match sys.lifted() {
        Some(lifted) => {
            let samples = sample_pairs(&sys, EMBEDDING_SAMPLES, -2.0, 2.0, seed);
            let rep = verify_embedding(&sys, &samples, EMBEDDING_TOL)?;
            rows.push(CheckRow::bound("embedding_dynamics", sys.name(), rep.max_dynamics_residual, EMBEDDING_TOL));
            rows.push(CheckRow::bound("embedding_recovery", sys.name(), rep.max_recovery_residual, EMBEDDING_TOL));
            let q = weights.lifted_q(&lifted.c);
            match stability_diagnostics(&lifted.a, &lifted.b, &q, &weights.r, horizon) {
                Ok(d) => {
                    rows.push(CheckRow::bound("dare_residual", "P_inf", d.dare_residual, 1e-8));
                    let stable = if d.rho_cl < 1.0 { "pass" } else { "fail" };
                    rows.push(CheckRow::new("closed_loop_radius", "A_cl_inf", d.rho_cl, Some(1.0), stable));
                    rows.push(CheckRow::new("gamma_inf", "A_cl_inf", d.gamma_inf, None, "info"));
                    rows.push(CheckRow::new("kappa", "A_cl_inf", d.kappa_est, None, "info"));
                    let resolved = if d.delta_stab_resolved { "info" } else { "warn" };
                    rows.push(CheckRow::new("delta_stab", "A_cl_t", d.delta_stab_est as f64, None, resolved));
                    rows.push(CheckRow::new("rho_inf", "P_t", d.rho_inf_est, None, "info"));
                }
                Err(e) => rows.push(CheckRow {
                    check: "dare".into(),
                    subject: "P_inf".into(),
                    value: e.to_string().replace(',', ";"),
                    threshold: String::new(),
                    status: "fail",
                }),
            }
        }
        None => rows.push(CheckRow {
            check: "embedding".into(),
            subject: sys.name().into(),
            value: String::new(),
            threshold: String::new(),
            status: "skip",
        }),
    }

    if cfg.controller.needs_data() {
        for &w in &cfg.windows {
            let data = trajectories(cfg, &sys, w)?;
            for (k, d) in data.iter().enumerate() {
                let lib = DataLibrary::build(d, cfg.t_ini, w)?;
                let subject = format!("W{w}/lib{k}");
                if sys.lifted().is_some() {
                    let exc = check_lifted_excitation(&lib, &sys)?;
                    let status = if exc.pass { "pass" } else { "fail" };
                    rows.push(CheckRow::new("lifted_excitation", subject.clone(), exc.rank as f64, Some(exc.required as f64), status));
                }
            }
            if let Some(n_x) = sys.n_x() {
                if cfg.t_ini < n_x {
                    rows.push(CheckRow::new("t_ini_vs_n_x", format!("W{w}"), cfg.t_ini as f64, Some(n_x as f64), "warn"));
                }
            }
        }
    }

    let r = cfg.reference()?;
    let norms = r.norm_report();
    rows.push(CheckRow::new("reference_above_unit", "r", norms.above_unit as f64, None, "info"));

    let path = opts.out_dir.join("verify.csv");
    let mut text = String::from("check,subject,value,threshold,status\n");
    for row in &rows {
        text.push_str(&format!("{},{},{},{},{}\n", row.check, row.subject, row.value, row.threshold, row.status));
    }
    write_atomic(&path, text.as_bytes())?;

    let failed: Vec<_> = rows.iter().filter(|r| r.status == "fail").map(|r| format!("{} ({})", r.check, r.subject)).collect();
    if !failed.is_empty() {
        return Err(Error::Diagnostic(format!("{} written; failed: {}", path.display(), failed.join(", "))));
    }
    let count = |s: &str| rows.iter().filter(|r| r.status == s).count();
    Ok(CommandOutput {
        files: vec![path],
        summary: vec![format!(
            "{} passed, {} warning(s), {} skipped, {} informational",
            count("pass"),
            count("warn"),
            count("skip"),
            count("info")
        )],
    })
}

/// Persist the excitation data for every configured window.
pub fn cmd_collect(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandOutput> {
    if !cfg.controller.needs_data() {
        return Err(Error::Config("the configured controller uses no data".into()));
    }
    let sys = cfg.system()?;
    let seed = cfg.data.as_ref().map_or(0, |d| d.seed);
    let root = opts.out_dir.join("data");
    let mut out = CommandOutput::default();
    for &w in &cfg.windows {
        for (k, d) in trajectories(cfg, &sys, w)?.iter().enumerate() {
            let dir = data_dir(&root, w, k);
            save_data(&dir, d, &DataDescriptor::new(d, cfg.t_ini, w, seed + k as u64))?;
            out.files.extend(["u_d.csv", "z_d.csv", "descriptor.json"].map(|f| dir.join(f)));
        }
        out.summary.push(format!("W={w}: {} trajectory(ies) of length {}", cfg.library_count(), cfg.data_length(w).unwrap_or(0)));
    }
    Ok(out)
}

/// Closed loops for every configured window, run in parallel.
pub fn cmd_track(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandOutput> {
    let outcomes = opts.pool()?.install(|| {
        cfg.windows
            .par_iter()
            .map(|&w| run_window(cfg, w, cfg.weights.r_scale, amplitude_of(cfg)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = CommandOutput::default();
    let mut regret_rows = Vec::new();
    let mut tracking_rows = Vec::new();
    for o in &outcomes {
        let w = o.run.window;
        let (h, rows) = run_table(&o.run);
        let path = opts.out_dir.join(format!("run_W{w}.csv"));
        write_csv(&path, &h, &rows)?;
        out.files.push(path);
        match &o.report {
            Some(rep) => {
                let d = rep.decomposition;
                regret_rows.push(vec![
                    w as f64,
                    rep.online_cost,
                    rep.optimal_cost,
                    rep.regret,
                    rep.deviation_identity,
                    rep.identity_gap,
                    d.map_or(f64::NAN, |d| d.truncation),
                    d.map_or(f64::NAN, |d| d.feedback),
                    d.map_or(f64::NAN, |d| d.feedforward),
                ]);
                out.summary.push(format!(
                    "W={w}: J={:.6e} J*={:.6e} regret={:.3e} identity_gap={:.1e} ({:.0} ms)",
                    rep.online_cost, rep.optimal_cost, rep.regret, rep.identity_gap, o.runtime_ms
                ));
            }
            None => {
                let (mse, max) = position_errors(&o.run);
                tracking_rows.push(vec![w as f64, mse, max]);
                out.summary.push(format!("W={w}: position MSE={mse:.4} max={max:.4} ({:.0} ms)", o.runtime_ms));
            }
        }
    }
    if !regret_rows.is_empty() {
        let path = opts.out_dir.join("regret.csv");
        let cols = header(&[
            "W",
            "online_cost",
            "optimal_cost",
            "regret",
            "deviation_identity",
            "identity_gap",
            "truncation",
            "feedback",
            "feedforward",
        ]);
        write_csv(&path, &cols, &regret_rows)?;
        out.files.push(path);
    }
    if !tracking_rows.is_empty() {
        let path = opts.out_dir.join("tracking.csv");
        write_csv(&path, &header(&["W", "position_mse", "max_position_sq_error"]), &tracking_rows)?;
        out.files.push(path);
    }
    Ok(out)
}

fn amplitude_of(cfg: &ExperimentConfig) -> f64 {
    match cfg.reference {
        super::config::ReferenceSpec::Sine { amplitude, .. } => amplitude,
        _ => 1.0,
    }
}

/// One regret-versus-`W` series and its fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeries {
    pub r_scale: f64,
    pub amplitude: f64,
    pub rows: Vec<SweepRow>,
    pub fit: SweepFit,
}

/// Run every `(r_scale, amplitude, W)` combination and fit each series.
pub fn sweep_series(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepSeries>> {
    let mut distinct = cfg.windows.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Config(format!(
            "need >= 3 W values for a sweep, have {}",
            distinct.len()
        )));
    }
    if cfg.system()?.lifted().is_none() {
        return Err(Error::Config("regret sweeps need a system with an embedding".into()));
    }
    let grid = cfg.sweep_grid();
    let jobs: Vec<(usize, f64, f64, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, &(rs, m))| cfg.windows.iter().map(move |&w| (g, rs, m, w)))
        .collect();
    let rows = opts.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(g, rs, m, w)| {
                let o = run_window(cfg, w, rs, m)?;
                let rep = o.report.expect("lifted system");
                let d = rep.decomposition;
                Ok((
                    g,
                    SweepRow {
                        window: w,
                        regret: rep.regret,
                        truncation: d.map_or(f64::NAN, |d| d.truncation),
                        feedback: d.map_or(f64::NAN, |d| d.feedback),
                        feedforward: d.map_or(f64::NAN, |d| d.feedforward),
                        identity_gap: rep.identity_gap,
                        runtime_ms: o.runtime_ms,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    grid.iter()
        .enumerate()
        .map(|(g, &(r_scale, amplitude))| {
            let rows: Vec<SweepRow> = rows.iter().filter(|(k, _)| *k == g).map(|(_, r)| r.clone()).collect();
            let fit = fit_sweep(&rows)?;
            Ok(SweepSeries {
                r_scale,
                amplitude,
                rows,
                fit,
            })
        })
        .collect()
}

/// Writes `sweep_<k>.csv` per series, `sweep_fit.csv` and `sweep.gp`.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CommandOutput> {
    let series = sweep_series(cfg, opts)?;
    let mut out = CommandOutput::default();
    let cols = header(&["W", "regret", "truncation", "feedback", "feedforward", "identity_gap", "slope_fit"]);
    let mut fit_rows = Vec::new();
    let mut plot = String::from(
        "set logscale y\nset xlabel 'W'\nset ylabel 'dynamic regret'\nset datafile separator ','\nset key top right\n",
    );
    let mut plots = Vec::new();
    for (k, s) in series.iter().enumerate() {
        let f = s.fit.fit;
        let rows: Vec<Vec<f64>> = s
            .rows
            .iter()
            .map(|r| {
                let w = r.window as f64;
                vec![w, r.regret, r.truncation, r.feedback, r.feedforward, r.identity_gap, (f.intercept + f.slope * w).exp()]
            })
            .collect();
        let name = format!("sweep_{k}.csv");
        let path = opts.out_dir.join(&name);
        write_csv(&path, &cols, &rows)?;
        out.files.push(path);
        fit_rows.push(vec![k as f64, s.r_scale, s.amplitude, f.slope, f.intercept, f.r2, f.slope_stderr, s.fit.used.len() as f64]);
        plots.push(format!(
            "'{name}' skip 1 using 1:($2>0?$2:1/0) with linespoints title 'R={} M={}', '{name}' skip 1 using 1:7 with lines dashtype 2 notitle",
            fmt_f64(s.r_scale),
            fmt_f64(s.amplitude)
        ));
        out.summary.push(format!(
            "R={} M={}: slope={:.4} +- {:.4}, r2={:.4}, excluded W={:?}",
            s.r_scale, s.amplitude, f.slope, f.slope_stderr, f.r2, s.fit.excluded
        ));
    }
    let path = opts.out_dir.join("sweep_fit.csv");
    write_csv(
        &path,
        &header(&["series", "r_scale", "amplitude", "slope", "intercept", "r2", "slope_stderr", "windows_used"]),
        &fit_rows,
    )?;
    out.files.push(path);
    plot.push_str("set terminal pngcairo size 800,600\nset output 'sweep.png'\nplot ");
    plot.push_str(&plots.join(", \\\n     "));
    plot.push('\n');
    let path = opts.out_dir.join("sweep.gp");
    write_atomic(&path, plot.as_bytes())?;
    out.files.push(path);
    Ok(out)
}
