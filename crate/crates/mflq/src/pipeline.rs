//! The command pipelines, independent of argument parsing.

use std::path::Path;
use std::time::Instant;

use mflq_core::costs::{
    closed_form_openloop_costs, convergence_study, meanfield_gap, trapezoid, Equilibrium, Estimate, ProbeFamily,
};
use mflq_core::numerics::min_eigenvalue;
use mflq_core::simulator::{Ensemble, Mode, SimConfig, DEFAULT_STORE_EVERY};
use mflq_core::{ModelParams, TimeGridFn};
use serde::{Deserialize, Serialize};

use crate::dump::write_dump;
use crate::error::CliError;
use crate::export::{
    columns_csv, convergence_csv, cost_report_csv, ensemble_csv, fmt_num, grid_csv, mode_name, path_costs_csv,
    slopes_csv, ReportExtras,
};
use crate::manifest::{ModelEcho, RunManifest, SolverGrid, Timing, MANIFEST_FILE};
use crate::model_file::{parse_model, TABLE1_TOML};
use crate::output::{sha256_hex, OutputDir};
use crate::runner::RayonRunner;
use crate::svg::{Plot, Series};

pub const DEFAULT_SEED: u64 = 20240601;
pub const PAPER_POPULATION: usize = 100;
pub const PAPER_PATHS: usize = 200;
pub const PAPER_STEPS: usize = 2000;
pub const BUNDLED_MODEL: &str = "<bundled>/table1.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Openloop,
    Feedback,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Openloop => Mode::OpenLoop,
            ModeArg::Feedback => Mode::Feedback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleFormat {
    Csv,
    Bin,
    #[default]
    Both,
    None,
}

/// Simulation settings shared by the simulating jobs. `None` fields take defaults
/// derived from the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSettings {
    pub paths: usize,
    pub seed: u64,
    /// Euler steps; defaults to the solver grid
    pub steps: Option<usize>,
    /// defaults to the largest divisor of the step count not above 10
    pub store_every: Option<usize>,
}

/// A complete description of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Solve {
        mode: ModeArg,
        grid_steps: Option<usize>,
    },
    Simulate {
        mode: ModeArg,
        population: usize,
        sim: SimSettings,
        grid_steps: Option<usize>,
        ensemble: EnsembleFormat,
        /// open loop: followers see the realized leader state
        realized_leader: bool,
        keep_followers: bool,
    },
    ReproducePaper {
        population: usize,
        sim: SimSettings,
        grid_steps: Option<usize>,
    },
    Converge {
        mode: ModeArg,
        populations: Vec<usize>,
        sim: SimSettings,
        grid_steps: Option<usize>,
        probes: bool,
    },
}

impl Job {
    fn grid_override(&self) -> Option<usize> {
        match self {
            Job::Solve { grid_steps, .. }
            | Job::Simulate { grid_steps, .. }
            | Job::ReproducePaper { grid_steps, .. }
            | Job::Converge { grid_steps, .. } => *grid_steps,
        }
    }
}

/// Model text and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSource {
    pub name: String,
    pub text: String,
}

impl ModelSource {
    pub fn bundled() -> Self {
        ModelSource { name: BUNDLED_MODEL.into(), text: TABLE1_TOML.into() }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io("model", format!("{}: {e}", path.display())))?;
        Ok(ModelSource { name: path.display().to_string(), text })
    }
}

struct Run {
    out: OutputDir,
    timings: Vec<Timing>,
    runner: RayonRunner,
    clock: Instant,
}

impl Run {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(Timing { stage: stage.into(), seconds: (now - self.clock).as_secs_f64() });
        self.clock = now;
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.out.write(name, bytes).map_err(|e| CliError::io("write", format!("{name}: {e}")))
    }
}

fn sim_config(params: &ModelParams, population: usize, s: &SimSettings) -> Result<SimConfig, CliError> {
    let steps = s.steps.unwrap_or(params.grid_steps);
    let store_every = s.store_every.unwrap_or_else(|| {
        (1..=DEFAULT_STORE_EVERY.min(steps.max(1))).rev().find(|d| steps.is_multiple_of(*d)).unwrap_or(1)
    });
    let cfg = SimConfig { store_every, ..SimConfig::new(population, s.paths, steps, s.seed) };
    cfg.check().map_err(|e| CliError::from_sim("config", e))?;
    Ok(cfg)
}

/// Runs `job` on `model`, writing into `out`, and returns the manifest it wrote.
pub fn run_job(job: &Job, model: &ModelSource, out: &Path, threads: usize) -> Result<RunManifest, CliError> {
    let mut params = parse_model(&model.text, &model.name).map_err(CliError::from_model)?;
    if let Some(k) = job.grid_override() {
        params.grid_steps = k;
        let v = mflq_core::validate(&params);
        if let Some(first) = v.first() {
            return Err(CliError::validation("model", first.to_string()));
        }
    }
    let runner = RayonRunner::new(threads).map_err(|e| CliError::io("threads", e))?;
    let out = OutputDir::create(out).map_err(|e| CliError::io("write", format!("{}: {e}", out.display())))?;
    let mut run = Run { out, timings: Vec::new(), runner, clock: Instant::now() };
    run.lap("parse");

    let seeds = match job {
        Job::Solve { .. } => Vec::new(),
        Job::Simulate { sim, .. } | Job::ReproducePaper { sim, .. } => vec![sim.seed],
        Job::Converge { sim, probes, .. } => {
            let mut s = vec![sim.seed];
            if *probes {
                s.push(ProbeFamily::default().seed);
            }
            s
        }
    };
    match job {
        Job::Solve { mode, .. } => solve(&mut run, &params, (*mode).into())?,
        Job::Simulate { mode, population, sim, ensemble, realized_leader, keep_followers, .. } => {
            let mut cfg = sim_config(&params, *population, sim)?;
            cfg.realized_leader_in_follower_control = *realized_leader;
            cfg.keep_followers = *keep_followers;
            simulate(&mut run, &params, (*mode).into(), &cfg, *ensemble)?
        }
        Job::ReproducePaper { population, sim, .. } => {
            let cfg = sim_config(&params, *population, sim)?;
            reproduce(&mut run, &params, &cfg)?
        }
        Job::Converge { mode, populations, sim, probes, .. } => {
            if populations.len() < 3 {
                return Err(CliError::validation(
                    "config",
                    format!("a convergence study needs at least 3 population sizes, got {}", populations.len()),
                ));
            }
            let cfg = sim_config(&params, populations[0], sim)?;
            converge(&mut run, &params, (*mode).into(), populations, &cfg, *probes)?
        }
    }

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        job: job.clone(),
        model: ModelEcho { source: model.name.clone(), sha256: sha256_hex(model.text.as_bytes()), text: model.text.clone() },
        grid: SolverGrid { horizon: params.horizon, steps: params.grid_steps },
        seeds,
        threads: run.runner.threads(),
        timings: run.timings.clone(),
        outputs: run.out.written().to_vec(),
    };
    run.write(MANIFEST_FILE, manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// Repeats a manifest's job into `out` and checks every output against the
/// recorded hashes.
pub fn rerun(manifest: &RunManifest, out: &Path, threads: usize) -> Result<RunManifest, CliError> {
    if sha256_hex(manifest.model.text.as_bytes()) != manifest.model.sha256 {
        return Err(CliError::validation("rerun", "embedded model text does not match its recorded hash"));
    }
    let model = ModelSource { name: manifest.model.source.clone(), text: manifest.model.text.clone() };
    let fresh = run_job(&manifest.job, &model, out, threads)?;
    if fresh.outputs != manifest.outputs {
        let differing: Vec<&str> = manifest
            .outputs
            .iter()
            .filter(|w| !fresh.outputs.contains(w))
            .map(|w| w.name.as_str())
            .collect();
        return Err(CliError::Mismatch(format!("{differing:?}")));
    }
    Ok(fresh)
}

// ------------------------------------------------------------------ solve

fn min_eig_column(f: &TimeGridFn, shift: Option<&mflq_core::Mat>) -> Vec<f64> {
    f.values()
        .iter()
        .map(|m| match shift {
            Some(s) => min_eigenvalue(&(m - s)),
            None => min_eigenvalue(m),
        })
        .collect()
}

fn times(f: &TimeGridFn) -> Vec<f64> {
    (0..=f.steps()).map(|k| f.time(k)).collect()
}

fn summary_csv(rows: &[(&str, String)]) -> Vec<u8> {
    let mut s = String::from("quantity,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s.into_bytes()
}

fn solve(run: &mut Run, params: &ModelParams, mode: Mode) -> Result<(), CliError> {
    let eq = Equilibrium::solve(params, mode).map_err(|e| CliError::from_cost("solve", e))?;
    run.lap("solve");
    match &eq {
        Equilibrium::Feedback { solution: fb, .. } => {
            for (name, f) in [
                ("M", &fb.m),
                ("M_bar", &fb.m_bar),
                ("M0", &fb.m0),
                ("Lambda0", &fb.lambda0),
                ("Lambda_bar", &fb.lambda_bar),
                ("Theta1", &fb.theta1),
                ("Theta2", &fb.theta2),
                ("Theta3", &fb.theta3),
            ] {
                run.write(&format!("riccati_{name}.csv"), &grid_csv(&[(name, f)]))?;
            }
            run.write(
                "gains.csv",
                &grid_csv(&[
                    ("leader_state", &fb.leader_state_gain),
                    ("leader_mf", &fb.leader_mf_gain),
                    ("follower_own", &fb.gain_own),
                    ("follower_mf", &fb.gain_mf),
                    ("follower_leader", &fb.gain_leader),
                ]),
            )?;
            let r = &params.follower_cost.control_weight;
            let ups = min_eig_column(&fb.upsilon, None);
            let ups_r = min_eig_column(&fb.upsilon, Some(r));
            let ups0 = min_eig_column(&fb.upsilon0, None);
            let th1 = min_eig_column(&fb.theta1, None);
            run.write(
                "assumptions.csv",
                &columns_csv(&[
                    ("t".into(), times(&fb.m)),
                    ("upsilon_min_eig".into(), ups.clone()),
                    ("upsilon_minus_r_min_eig".into(), ups_r.clone()),
                    ("upsilon0_min_eig".into(), ups0.clone()),
                    ("theta1_min_eig".into(), th1.clone()),
                ]),
            )?;
            let min = |v: &[f64]| fmt_num(v.iter().copied().fold(f64::INFINITY, f64::min));
            run.write(
                "summary.csv",
                &summary_csv(&[
                    ("mode", "feedback".into()),
                    ("residual", fmt_num(fb.residual)),
                    ("min_upsilon_eig", min(&ups)),
                    ("min_upsilon_minus_r_eig", min(&ups_r)),
                    ("min_upsilon0_eig", min(&ups0)),
                    ("min_theta1_eig", min(&th1)),
                ]),
            )?;
        }
        Equilibrium::OpenLoop { follower: fol, stacked: stk, .. } => {
            for (name, f) in [("K", &fol.k), ("K_bar", &fol.k_bar), ("P", &fol.p), ("P_bar", &fol.p_bar), ("P0", &fol.p0)]
            {
                run.write(&format!("riccati_{name}.csv"), &grid_csv(&[(name, f)]))?;
            }
            run.write("riccati_P_stacked.csv", &grid_csv(&[("P_stacked", &stk.p)]))?;
            run.write(
                "gains.csv",
                &grid_csv(&[
                    ("leader_stacked", &stk.gain),
                    ("follower_psi1", &fol.psi1),
                    ("follower_psi2", &fol.psi2),
                    ("follower_psi3", &fol.psi3),
                ]),
            )?;
            let a = &fol.assumptions;
            let steps = fol.k.steps();
            let flag = |fails: &[usize]| (0..=steps).map(|k| if fails.contains(&k) { 0.0 } else { 1.0 }).collect();
            let ups = min_eig_column(&fol.upsilon, None);
            let ups0 = min_eig_column(&stk.upsilon0, None);
            run.write(
                "assumptions.csv",
                &columns_csv(&[
                    ("t".into(), times(&fol.k)),
                    ("upsilon_min_eig".into(), ups.clone()),
                    ("upsilon0_min_eig".into(), ups0.clone()),
                    ("psd_ok".into(), flag(&a.psd_failures)),
                    ("range_ok".into(), flag(&a.range_failures)),
                ]),
            )?;
            let min = |v: &[f64]| fmt_num(v.iter().copied().fold(f64::INFINITY, f64::min));
            run.write(
                "summary.csv",
                &summary_csv(&[
                    ("mode", "openloop".into()),
                    ("follower_residual", fmt_num(fol.residual)),
                    ("stacked_residual", fmt_num(stk.residual)),
                    ("assumptions_hold", a.holds().to_string()),
                    ("psd_failures", a.psd_failures.len().to_string()),
                    ("range_failures", a.range_failures.len().to_string()),
                    ("min_upsilon_eig", min(&ups)),
                    ("min_upsilon0_eig", min(&ups0)),
                ]),
            )?;
        }
    }
    run.lap("export");
    Ok(())
}

// --------------------------------------------------------------- simulate

/// Path estimate of (1/T)∫ series_r dt for one component of a stored block.
pub fn time_mean(ens: &Ensemble, block: impl Fn(&mflq_core::simulator::PathRecord) -> &[f64], width: usize, r: usize) -> Estimate {
    let samples: Vec<f64> = ens
        .paths
        .iter()
        .map(|rec| {
            let series: Vec<f64> = block(rec).chunks(width).map(|c| c[r]).collect();
            trapezoid(&ens.times, &series) / ens.horizon
        })
        .collect();
    Estimate::from_samples(&samples)
}

fn simulate(run: &mut Run, params: &ModelParams, mode: Mode, cfg: &SimConfig, format: EnsembleFormat) -> Result<(), CliError> {
    let eq = Equilibrium::solve(params, mode).map_err(|e| CliError::from_cost("solve", e))?;
    run.lap("solve");
    let ens = eq.simulate(params, cfg, &run.runner).map_err(|e| CliError::from_sim("simulate", e))?;
    run.lap("simulate");
    let report = eq.report(params, &ens).map_err(|e| CliError::from_cost("costs", e))?;
    let n = params.dims.n;
    let mut extras = ReportExtras {
        meanfield_gap_abs: meanfield_gap(&ens).ok().map(|g| g.sup_mean_field_abs()),
        time_mean_follower_average: Some(time_mean(&ens, |r| &r.follower_mean, n, 0)),
        time_mean_mean_field: Some(time_mean(&ens, |r| &r.mean_field, n, 0)),
        ..ReportExtras::default()
    };
    if let Equilibrium::OpenLoop { follower, stacked, .. } = &eq {
        let c = closed_form_openloop_costs(params, follower, stacked, Some(&ens)).map_err(|e| CliError::from_cost("costs", e))?;
        extras.s_t_printed = Some(c.s_t_printed.mean);
        extras.closed_form_social_printed = Some(c.social_printed);
    }
    run.lap("costs");
    if matches!(format, EnsembleFormat::Csv | EnsembleFormat::Both) {
        run.write("ensemble.csv", &ensemble_csv(&ens))?;
    }
    if matches!(format, EnsembleFormat::Bin | EnsembleFormat::Both) {
        run.write("ensemble.bin", &write_dump(&ens))?;
    }
    run.write("costs.csv", &cost_report_csv(&report, &extras))?;
    run.write("path_costs.csv", &path_costs_csv(&ens))?;
    run.lap("export");
    Ok(())
}

// -------------------------------------------------------------- reproduce

pub const FIGURE_FILES: [&str; 4] = ["fig1_stacked_riccati", "fig2_feedback_riccati", "fig3_state_averages", "fig4_leader_states"];

fn grid_series(blocks: &[(&str, &TimeGridFn)]) -> Vec<Series> {
    let mut out = Vec::new();
    for (name, f) in blocks {
        let xs = times(f);
        let (r, c) = f.shape();
        for i in 0..r {
            for j in 0..c {
                let label = if r * c == 1 { name.to_string() } else { format!("{name}[{i}][{j}]") };
                out.push(Series::new(label, xs.clone(), f.values().iter().map(|m| m[(i, j)]).collect()));
            }
        }
    }
    out
}

/// Path mean of a stored block component at every stored time.
fn path_mean(ens: &Ensemble, block: impl Fn(&mflq_core::simulator::PathRecord) -> &[f64], width: usize, r: usize) -> Vec<f64> {
    let len = ens.stored_len();
    let mut acc = vec![0.0; len];
    for rec in &ens.paths {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += block(rec)[j * width + r];
        }
    }
    acc.iter().map(|a| a / ens.paths.len() as f64).collect()
}

/// Path mean of |x^(N) − x̄| at every stored time.
fn abs_gap(ens: &Ensemble) -> Vec<f64> {
    let n = ens.dims.n;
    let len = ens.stored_len();
    let mut acc = vec![0.0; len];
    for rec in &ens.paths {
        for (j, a) in acc.iter_mut().enumerate() {
            let d2: f64 = (0..n).map(|r| (rec.follower_mean[j * n + r] - rec.mean_field[j * n + r]).powi(2)).sum();
            *a += d2.sqrt();
        }
    }
    acc.iter().map(|a| a / ens.paths.len() as f64).collect()
}

fn component(name: &str, r: usize, width: usize) -> String {
    if width == 1 {
        name.to_string()
    } else {
        format!("{name}[{r}]")
    }
}

fn reproduce(run: &mut Run, params: &ModelParams, cfg: &SimConfig) -> Result<(), CliError> {
    let ol = Equilibrium::solve(params, Mode::OpenLoop).map_err(|e| CliError::from_cost("solve", e))?;
    let fb = Equilibrium::solve(params, Mode::Feedback).map_err(|e| CliError::from_cost("solve", e))?;
    run.lap("solve");
    let (Equilibrium::OpenLoop { stacked, .. }, Equilibrium::Feedback { solution, .. }) = (&ol, &fb) else {
        unreachable!("solved in the requested modes")
    };

    let fig1 = [("P_stacked", &stacked.p)];
    run.write(&format!("{}.csv", FIGURE_FILES[0]), &grid_csv(&fig1))?;
    let mut plot = Plot::new("Stacked leader Riccati solution", "t", "component");
    plot.series = grid_series(&fig1);
    run.write(&format!("{}.svg", FIGURE_FILES[0]), plot.render().as_bytes())?;

    let fig2 = [
        ("M", &solution.m),
        ("M_bar", &solution.m_bar),
        ("M0", &solution.m0),
        ("Lambda0", &solution.lambda0),
        ("Lambda_bar", &solution.lambda_bar),
        ("Theta1", &solution.theta1),
        ("Theta2", &solution.theta2),
        ("Theta3", &solution.theta3),
    ];
    run.write(&format!("{}.csv", FIGURE_FILES[1]), &grid_csv(&fig2))?;
    let mut plot = Plot::new("Feedback Riccati solutions", "t", "component");
    plot.series = grid_series(&fig2);
    run.write(&format!("{}.svg", FIGURE_FILES[1]), plot.render().as_bytes())?;
    run.lap("riccati figures");

    let ens_ol = ol.simulate(params, cfg, &run.runner).map_err(|e| CliError::from_sim("simulate", e))?;
    let ens_fb = fb.simulate(params, cfg, &run.runner).map_err(|e| CliError::from_sim("simulate", e))?;
    run.lap("simulate");

    let (n, n0) = (params.dims.n, params.dims.n0);
    let t = ens_ol.times.clone();
    let mut cols3 = vec![("t".to_string(), t.clone())];
    let mut plot3 = Plot::new("Follower state averages and mean-field effects", "t", "state");
    for (tag, ens) in [("openloop", &ens_ol), ("feedback", &ens_fb)] {
        for r in 0..n {
            let avg = path_mean(ens, |p| &p.follower_mean, n, r);
            let mf = path_mean(ens, |p| &p.mean_field, n, r);
            plot3.series.push(Series::new(component(&format!("{tag} x^N"), r, n), t.clone(), avg.clone()));
            plot3.series.push(Series::new(component(&format!("{tag} mean field"), r, n), t.clone(), mf.clone()).dashed());
            cols3.push((component(&format!("{tag}_follower_average"), r, n), avg));
            cols3.push((component(&format!("{tag}_mean_field"), r, n), mf));
        }
        cols3.push((format!("{tag}_abs_gap"), abs_gap(ens)));
    }
    run.write(&format!("{}.csv", FIGURE_FILES[2]), &columns_csv(&cols3))?;
    run.write(&format!("{}.svg", FIGURE_FILES[2]), plot3.render().as_bytes())?;

    let mut cols4 = vec![("t".to_string(), t.clone())];
    let mut plot4 = Plot::new("Leader states", "t", "state");
    for (tag, ens) in [("openloop", &ens_ol), ("feedback", &ens_fb)] {
        for r in 0..n0 {
            let x0 = path_mean(ens, |p| &p.leader, n0, r);
            plot4.series.push(Series::new(component(&format!("{tag} leader"), r, n0), t.clone(), x0.clone()));
            cols4.push((component(&format!("{tag}_leader"), r, n0), x0));
        }
    }
    for r in 0..n0 {
        let lim = path_mean(&ens_ol, |p| &p.limit_leader, n0, r);
        plot4.series.push(Series::new(component("openloop limit leader", r, n0), t.clone(), lim.clone()).dashed());
        cols4.push((component("openloop_limit_leader", r, n0), lim));
    }
    run.write(&format!("{}.csv", FIGURE_FILES[3]), &columns_csv(&cols4))?;
    run.write(&format!("{}.svg", FIGURE_FILES[3]), plot4.render().as_bytes())?;
    run.lap("state figures");
    Ok(())
}

// --------------------------------------------------------------- converge

fn converge(
    run: &mut Run,
    params: &ModelParams,
    mode: Mode,
    ns: &[usize],
    cfg: &SimConfig,
    probes: bool,
) -> Result<(), CliError> {
    let family = probes.then(ProbeFamily::default);
    let table = convergence_study(params, ns, cfg, mode, family.as_ref(), &run.runner)
        .map_err(|e| CliError::from_cost("converge", e))?;
    run.lap("study");
    run.write("convergence.csv", &convergence_csv(&table))?;
    run.write("slopes.csv", &slopes_csv(&table))?;
    run.lap("export");
    Ok(())
}

/// Human-readable one-line summary per output for the terminal.
pub fn describe(manifest: &RunManifest, out: &Path) -> String {
    let mode = match &manifest.job {
        Job::Solve { mode, .. } | Job::Simulate { mode, .. } | Job::Converge { mode, .. } => {
            format!(" ({})", mode_name((*mode).into()))
        }
        Job::ReproducePaper { .. } => String::new(),
    };
    let mut s = format!("wrote {} file(s) to {}{mode}\n", manifest.outputs.len() + 1, out.display());
    for w in &manifest.outputs {
        s.push_str(&format!("  {} ({} bytes)\n", w.name, w.bytes));
    }
    s.push_str(&format!("  {MANIFEST_FILE}\n"));
    s
}
