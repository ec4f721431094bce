//! Euler–Maruyama simulation of one leader and `N` followers under a policy.
//!
//! Increments are scalar: `ΔW0` drives the leader and, in open loop, the stacked
//! limit state; `ΔWi` drives follower `i` and its auxiliary limit state.
//! Closed-loop coefficients are tabulated once per step and shared by all paths;
//! the per-path loops work on flat buffers and never allocate per step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::{Dimensions, ModelParams};
use crate::numerics::TimeGridFn;
use crate::riccati_openloop::{StackedIndex, StackedLeaderSolution};
use crate::rng::{follower_source, NormalStream, LEADER_SOURCE};
use crate::strategy::{FeedbackPolicy, OpenLoopPolicy, PolicyError};
use crate::Mat;

pub const DEFAULT_STORE_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub population: usize,
    pub paths: usize,
    pub sim_steps: usize,
    /// Must divide `sim_steps`; step 0 and the final step are always stored.
    pub store_every: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Open loop only: followers feed back the realized leader state when set,
    /// the limit leader state otherwise.
    pub realized_leader_in_follower_control: bool,
    /// Record every follower's state, control and running cost.
    pub keep_followers: bool,
}

impl SimConfig {
    pub fn new(population: usize, paths: usize, sim_steps: usize, seed: u64) -> Self {
        SimConfig {
            population,
            paths,
            sim_steps,
            store_every: DEFAULT_STORE_EVERY.min(sim_steps.max(1)),
            seed,
            antithetic: false,
            realized_leader_in_follower_control: true,
            keep_followers: false,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(String::from(m)));
        if self.population == 0 {
            return bad("population N must be at least 1");
        }
        if self.paths == 0 {
            return bad("paths must be at least 1");
        }
        if self.sim_steps < 2 {
            return bad("sim_steps must be at least 2");
        }
        if self.store_every == 0 || !self.sim_steps.is_multiple_of(self.store_every) {
            return bad("store_every must be positive and divide sim_steps");
        }
        if self.antithetic && !self.paths.is_multiple_of(2) {
            return bad("antithetic sampling needs an even number of paths");
        }
        Ok(())
    }

    pub fn stored_len(&self) -> usize {
        self.sim_steps / self.store_every + 1
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("simulation diverged on path {path} at t = {time}")]
    Diverged { path: usize, time: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    OpenLoop,
    Feedback,
}

/// One simulated path on the stored grid. Vector-valued series are flattened
/// row by row: entry `j * width + r` is component `r` at stored step `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathRecord {
    pub path: usize,
    /// x0, width n0
    pub leader: Vec<f64>,
    /// applied u0, width m0
    pub leader_control: Vec<f64>,
    /// x^(N), width n
    pub follower_mean: Vec<f64>,
    /// x̄ used by the controls, width n
    pub mean_field: Vec<f64>,
    /// open loop: limit leader state x̄0, width n0
    pub limit_leader: Vec<f64>,
    /// open loop: X, width s
    pub stacked: Vec<f64>,
    /// open loop: Y = 𝒫X, width s
    pub dual: Vec<f64>,
    /// open loop: ζ0, width n0
    pub zeta0: Vec<f64>,
    /// open loop: (1/N) Σ |xi − x̄i|²
    pub aux_gap: Vec<f64>,
    /// (1/N) Σ running cost integrand of the followers
    pub follower_running: Vec<f64>,
    pub leader_running: Vec<f64>,
    /// (1/N) Σ terminal cost of the followers
    pub follower_terminal: f64,
    pub leader_terminal: f64,
    /// width N·n, only with `keep_followers`
    pub followers: Vec<f64>,
    /// width N·m, only with `keep_followers`
    pub follower_controls: Vec<f64>,
    /// width N, only with `keep_followers`
    pub follower_running_each: Vec<f64>,
    /// length N, only with `keep_followers`
    pub follower_terminal_each: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub mode: Mode,
    pub dims: Dimensions,
    pub config: SimConfig,
    pub horizon: f64,
    /// stored times
    pub times: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

impl Ensemble {
    pub fn stored_len(&self) -> usize {
        self.times.len()
    }

    /// Largest deviation between the stored `x^(N)` and the mean of the stored
    /// follower states; `None` unless followers were kept.
    pub fn average_identity_residual(&self) -> Option<f64> {
        let n = self.dims.n;
        let np = self.config.population;
        let mut worst: f64 = 0.0;
        for rec in &self.paths {
            if rec.followers.is_empty() {
                return None;
            }
            for j in 0..self.stored_len() {
                let row = &rec.followers[j * np * n..(j + 1) * np * n];
                for r in 0..n {
                    let mean = (0..np).map(|i| row[i * n + r]).sum::<f64>() / np as f64;
                    worst = worst.max((mean - rec.follower_mean[j * n + r]).abs());
                }
            }
        }
        Some(worst)
    }
}

/// Who deviates from the base policy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FollowerSet {
    #[default]
    None,
    All,
    /// 0-based follower indices
    Indices(Vec<usize>),
}

/// Deviation from a base policy, applied with the base run's random numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Perturbation {
    pub followers: FollowerSet,
    /// m×1 offset added to the selected followers' controls
    pub follower_offset: Option<TimeGridFn>,
    /// m×n gain on the selected followers' own realized states, added to their controls
    pub follower_gain: Option<TimeGridFn>,
    /// m0×1 offset added to the leader control. In open loop the followers
    /// re-respond through the shift of φ the offset induces.
    pub leader_offset: Option<TimeGridFn>,
}

/// Column-major dense block for the inner loops.
#[derive(Debug, Clone, PartialEq)]
struct Flat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Flat {
    fn new(m: &Mat) -> Self {
        Flat { rows: m.nrows(), cols: m.ncols(), data: m.as_slice().to_vec() }
    }

    /// `out += M x`
    #[inline(always)]
    fn acc(&self, out: &mut [f64], x: &[f64]) {
        for (j, &xj) in x.iter().enumerate().take(self.cols) {
            let col = &self.data[j * self.rows..(j + 1) * self.rows];
            for (o, &c) in out.iter_mut().zip(col) {
                *o += c * xj;
            }
        }
    }

    /// `out = M x`
    #[inline(always)]
    fn apply(&self, out: &mut [f64], x: &[f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.acc(out, x);
    }

    /// `xᵀ M x`
    #[inline(always)]
    fn quad(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let col = &self.data[j * self.rows..(j + 1) * self.rows];
            let mut c = 0.0;
            for (&m, &xi) in col.iter().zip(x) {
                c += m * xi;
            }
            s += c * xj;
        }
        s
    }
}

/// Model matrices in flat form plus the initial-law samplers.
#[derive(Debug, Clone)]
struct Plant {
    a0: Flat,
    b0: Flat,
    g0: Flat,
    c0: Flat,
    gb0: Flat,
    d0: Flat,
    a: Flat,
    b: Flat,
    g: Flat,
    f: Flat,
    c: Flat,
    gb: Flat,
    fb: Flat,
    d: Flat,
    q0: Flat,
    r0: Flat,
    h0: Flat,
    /// −Γ0, −Γ̂0
    neg_gam0: Flat,
    neg_gamh0: Flat,
    q: Flat,
    r: Flat,
    h: Flat,
    /// −Γ, −Γ1, −Γ̂, −Γ̂1
    neg_gam: Flat,
    neg_gam1: Flat,
    neg_gamh: Flat,
    neg_gamh1: Flat,
    mean0: Vec<f64>,
    sqrt0: Flat,
    mean: Vec<f64>,
    sqrt: Flat,
}

/// Symmetric square root through the eigendecomposition; negative rounding
/// eigenvalues are clipped to zero.
fn psd_sqrt(m: &Mat) -> Mat {
    let e = nalgebra::SymmetricEigen::new(m.clone());
    let d = Mat::from_diagonal(&e.eigenvalues.map(|v| libm::sqrt(v.max(0.0))));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

impl Plant {
    fn new(p: &ModelParams) -> Self {
        let ld = &p.leader_dyn;
        let fd = &p.follower_dyn;
        let lc = &p.leader_cost;
        let fc = &p.follower_cost;
        Plant {
            a0: Flat::new(&ld.state_drift),
            b0: Flat::new(&ld.control_drift),
            g0: Flat::new(&ld.coupling_drift),
            c0: Flat::new(&ld.state_noise),
            gb0: Flat::new(&ld.coupling_noise),
            d0: Flat::new(&ld.control_noise),
            a: Flat::new(&fd.state_drift),
            b: Flat::new(&fd.control_drift),
            g: Flat::new(&fd.coupling_drift),
            f: Flat::new(&fd.leader_drift),
            c: Flat::new(&fd.state_noise),
            gb: Flat::new(&fd.coupling_noise),
            fb: Flat::new(&fd.leader_noise),
            d: Flat::new(&fd.control_noise),
            q0: Flat::new(&lc.state_weight),
            r0: Flat::new(&lc.control_weight),
            h0: Flat::new(&lc.terminal_weight),
            neg_gam0: Flat::new(&(-&lc.tracking)),
            neg_gamh0: Flat::new(&(-&lc.terminal_tracking)),
            q: Flat::new(&fc.state_weight),
            r: Flat::new(&fc.control_weight),
            h: Flat::new(&fc.terminal_weight),
            neg_gam: Flat::new(&(-&fc.mf_tracking)),
            neg_gam1: Flat::new(&(-&fc.leader_tracking)),
            neg_gamh: Flat::new(&(-&fc.terminal_mf_tracking)),
            neg_gamh1: Flat::new(&(-&fc.terminal_leader_tracking)),
            mean0: p.init.leader_mean.as_slice().to_vec(),
            sqrt0: Flat::new(&psd_sqrt(&p.init.leader_cov)),
            mean: p.init.follower_mean.as_slice().to_vec(),
            sqrt: Flat::new(&psd_sqrt(&p.init.follower_cov)),
        }
    }

    /// `x = mean + S z` with `z` the next draws of `rng`.
    fn draw_initial(mean: &[f64], sqrt: &Flat, rng: &mut NormalStream, z: &mut [f64], x: &mut [f64]) {
        rng.fill(z);
        x.copy_from_slice(mean);
        sqrt.acc(x, z);
    }
}

/// `f` at simulation step `k` of `steps`; exact grid values when the grids nest.
fn sample(f: &TimeGridFn, k: usize, steps: usize) -> Result<Mat, PolicyError> {
    let gs = f.steps();
    if gs.is_multiple_of(steps) {
        return Ok(f.value(k * (gs / steps)).clone());
    }
    let t = if k == steps { f.horizon() } else { k as f64 * f.horizon() / steps as f64 };
    Ok(f.at(t)?)
}

fn sim_time(horizon: f64, k: usize, steps: usize) -> f64 {
    if k == steps {
        horizon
    } else {
        k as f64 * horizon / steps as f64
    }
}

/// Perturbation tabulated on the simulation grid.
#[derive(Debug, Clone, Default)]
struct PreparedPerturbation {
    mask: Vec<bool>,
    follower_offset: Vec<Vec<f64>>,
    follower_gain: Vec<Flat>,
    leader_offset: Vec<Vec<f64>>,
}

impl PreparedPerturbation {
    fn new(p: &Perturbation, dims: Dimensions, cfg: &SimConfig, horizon: f64) -> Result<Self, SimError> {
        let steps = cfg.sim_steps;
        let np = cfg.population;
        let mut mask = vec![false; np];
        match &p.followers {
            FollowerSet::None => {}
            FollowerSet::All => mask.iter_mut().for_each(|m| *m = true),
            FollowerSet::Indices(ix) => {
                for &i in ix {
                    if i >= np {
                        return Err(SimError::Config(format!("perturbed follower {i} out of range (N = {np})")));
                    }
                    mask[i] = true;
                }
            }
        }
        let table = |f: &Option<TimeGridFn>, shape: (usize, usize), what: &str| -> Result<Vec<Mat>, SimError> {
            let Some(f) = f else { return Ok(Vec::new()) };
            if f.shape() != shape || f.horizon() != horizon {
                return Err(SimError::Config(format!("{what} has shape {:?}, expected {shape:?}", f.shape())));
            }
            let t: Vec<Mat> = (0..=steps).map(|k| sample(f, k, steps)).collect::<Result<_, _>>()?;
            // an identically zero deviation is the base policy itself
            Ok(if t.iter().all(|m| m.iter().all(|&v| v == 0.0)) { Vec::new() } else { t })
        };
        let to_vec = |v: Vec<Mat>| v.iter().map(|m| m.as_slice().to_vec()).collect();
        Ok(PreparedPerturbation {
            mask,
            follower_offset: to_vec(table(&p.follower_offset, (dims.m, 1), "follower offset")?),
            follower_gain: table(&p.follower_gain, (dims.m, dims.n), "follower gain")?.iter().map(Flat::new).collect(),
            leader_offset: to_vec(table(&p.leader_offset, (dims.m0, 1), "leader offset")?),
        })
    }

    fn touches_followers(&self) -> bool {
        self.mask.iter().any(|&m| m) && (!self.follower_offset.is_empty() || !self.follower_gain.is_empty())
    }

    /// Extra control of a perturbed follower at step `k`; false when none applies.
    #[inline(always)]
    fn follower_extra(&self, k: usize, i: usize, x: &[f64], out: &mut [f64]) -> bool {
        if !self.mask[i] {
            return false;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(o) = self.follower_offset.get(k) {
            out.copy_from_slice(o);
        }
        if let Some(g) = self.follower_gain.get(k) {
            g.acc(out, x);
        }
        true
    }
}

/// A simulation prepared for path-by-path execution.
pub trait PathSimulator: Sync {
    fn config(&self) -> &SimConfig;
    fn run_path(&self, path: usize) -> Result<PathRecord, SimError>;
    fn assemble(&self, paths: Vec<PathRecord>) -> Ensemble;
}

/// Runs every path in order.
pub fn run_paths<S: PathSimulator + ?Sized>(sim: &S) -> Result<Ensemble, SimError> {
    let paths = (0..sim.config().paths).map(|p| sim.run_path(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(sim.assemble(paths))
}

fn stored_times(horizon: f64, cfg: &SimConfig) -> Vec<f64> {
    (0..cfg.stored_len()).map(|j| sim_time(horizon, j * cfg.store_every, cfg.sim_steps)).collect()
}

fn check_finite(values: &[f64], path: usize, time: f64) -> Result<(), SimError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SimError::Diverged { path, time })
    }
}

/// Per-path working buffers and output of the follower loop shared by both modes.
struct FollowerScratch {
    e: Vec<f64>,
    u: Vec<f64>,
    drift: Vec<f64>,
    noise: Vec<f64>,
    extra: Vec<f64>,
}

impl FollowerScratch {
    fn new(d: Dimensions) -> Self {
        FollowerScratch {
            e: vec![0.0; d.n],
            u: vec![0.0; d.m],
            drift: vec![0.0; d.n],
            noise: vec![0.0; d.n],
            extra: vec![0.0; d.m],
        }
    }
}

fn new_record(path: usize, cfg: &SimConfig) -> PathRecord {
    PathRecord { path, ..PathRecord::default() }.with_capacity(cfg)
}

impl PathRecord {
    fn with_capacity(mut self, cfg: &SimConfig) -> Self {
        let len = cfg.stored_len();
        self.follower_running.reserve(len);
        self.leader_running.reserve(len);
        self
    }
}

// ---------------------------------------------------------------- feedback

#[derive(Debug, Clone)]
struct FeedbackStep {
    /// A + B Kx
    own_drift: Flat,
    /// C + D Kx
    own_noise: Flat,
    k_own: Flat,
    k_mf: Flat,
    k_lead: Flat,
    /// A + G + B(Kx + Kx̄)
    mf_drift: Flat,
    /// F + B K0
    mf_leader: Flat,
    p0: Flat,
    p_bar: Flat,
}

pub struct FeedbackSimulator {
    dims: Dimensions,
    horizon: f64,
    cfg: SimConfig,
    plant: Plant,
    table: Vec<FeedbackStep>,
    perturbation: PreparedPerturbation,
}

impl FeedbackSimulator {
    pub fn new(
        params: &ModelParams,
        policy: &FeedbackPolicy,
        cfg: &SimConfig,
        perturbation: &Perturbation,
    ) -> Result<Self, SimError> {
        cfg.check()?;
        if policy.horizon() != params.horizon {
            return Err(SimError::Config(String::from("policy horizon differs from the model horizon")));
        }
        let fd = &params.follower_dyn;
        let steps = cfg.sim_steps;
        let mut table = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let kx = sample(&policy.gain_own, k, steps)?;
            let kmf = sample(&policy.gain_mf, k, steps)?;
            let k0 = sample(&policy.gain_leader, k, steps)?;
            table.push(FeedbackStep {
                own_drift: Flat::new(&(&fd.state_drift + &fd.control_drift * &kx)),
                own_noise: Flat::new(&(&fd.state_noise + &fd.control_noise * &kx)),
                mf_drift: Flat::new(&(&fd.state_drift + &fd.coupling_drift + &fd.control_drift * (&kx + &kmf))),
                mf_leader: Flat::new(&(&fd.leader_drift + &fd.control_drift * &k0)),
                k_own: Flat::new(&kx),
                k_mf: Flat::new(&kmf),
                k_lead: Flat::new(&k0),
                p0: Flat::new(&sample(&policy.leader_state, k, steps)?),
                p_bar: Flat::new(&sample(&policy.leader_mf, k, steps)?),
            });
        }
        Ok(FeedbackSimulator {
            dims: params.dims,
            horizon: params.horizon,
            cfg: cfg.clone(),
            plant: Plant::new(params),
            table,
            perturbation: PreparedPerturbation::new(perturbation, params.dims, cfg, params.horizon)?,
        })
    }
}

impl PathSimulator for FeedbackSimulator {
    fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn assemble(&self, paths: Vec<PathRecord>) -> Ensemble {
        Ensemble {
            mode: Mode::Feedback,
            dims: self.dims,
            config: self.cfg.clone(),
            horizon: self.horizon,
            times: stored_times(self.horizon, &self.cfg),
            paths,
        }
    }

    fn run_path(&self, path: usize) -> Result<PathRecord, SimError> {
        let Dimensions { n0, n, m0, m } = self.dims;
        let cfg = &self.cfg;
        let pl = &self.plant;
        let pert = &self.perturbation;
        let perturbed_followers = pert.touches_followers();
        let np = cfg.population;
        let inv_n = 1.0 / np as f64;
        let steps = cfg.sim_steps;
        let dt = self.horizon / steps as f64;
        let sqdt = libm::sqrt(dt);
        let keep = cfg.keep_followers;

        let mut lead_rng = NormalStream::new(cfg.seed, path as u64, LEADER_SOURCE, cfg.antithetic);
        let mut rngs: Vec<NormalStream> = (0..np)
            .map(|i| NormalStream::new(cfg.seed, path as u64, follower_source(i), cfg.antithetic))
            .collect();

        let mut x0 = vec![0.0; n0];
        let mut z0 = vec![0.0; n0];
        Plant::draw_initial(&pl.mean0, &pl.sqrt0, &mut lead_rng, &mut z0, &mut x0);
        let mut xs = vec![0.0; np * n];
        let mut z = vec![0.0; n];
        for (i, rng) in rngs.iter_mut().enumerate() {
            Plant::draw_initial(&pl.mean, &pl.sqrt, rng, &mut z, &mut xs[i * n..(i + 1) * n]);
        }
        let mut xbar = pl.mean.clone();

        let mut sum = vec![0.0; n];
        for i in 0..np {
            for r in 0..n {
                sum[r] += xs[i * n + r];
            }
        }
        let mut xn = vec![0.0; n];
        let mut u0 = vec![0.0; m0];
        let mut cu = vec![0.0; m];
        let mut cd = vec![0.0; n];
        let mut cs = vec![0.0; n];
        let mut off = vec![0.0; n];
        let mut e0 = vec![0.0; n0];
        let mut d0v = vec![0.0; n0];
        let mut s0v = vec![0.0; n0];
        let mut dxb = vec![0.0; n];
        let mut sc = FollowerScratch::new(self.dims);

        let mut rec = new_record(path, cfg);
        for k in 0..=steps {
            let c = &self.table[k];
            let store = k % cfg.store_every == 0;
            let last = k == steps;
            xn.iter_mut().zip(&sum).for_each(|(a, s)| *a = s * inv_n);

            c.p0.apply(&mut u0, &x0);
            c.p_bar.acc(&mut u0, &xbar);
            if let Some(o) = pert.leader_offset.get(k) {
                u0.iter_mut().zip(o).for_each(|(u, v)| *u += v);
            }
            c.k_mf.apply(&mut cu, &xbar);
            c.k_lead.acc(&mut cu, &x0);

            // follower cost offset −Γ x^(N) − Γ1 x0 (terminal weights at T)
            let (gam, gam1) = if last { (&pl.neg_gamh, &pl.neg_gamh1) } else { (&pl.neg_gam, &pl.neg_gam1) };
            gam.apply(&mut off, &xn);
            gam1.acc(&mut off, &x0);

            if store {
                rec.leader.extend_from_slice(&x0);
                rec.leader_control.extend_from_slice(&u0);
                rec.follower_mean.extend_from_slice(&xn);
                rec.mean_field.extend_from_slice(&xbar);
                let g0 = if last { &pl.neg_gamh0 } else { &pl.neg_gam0 };
                e0.copy_from_slice(&x0);
                g0.acc(&mut e0, &xn);
                let lr = pl.q0.quad(&e0) + pl.r0.quad(&u0);
                rec.leader_running.push(lr);
                if last {
                    rec.leader_terminal = pl.h0.quad(&e0);
                }
            }

            if last {
                // running integrand and terminal cost at T, no update
                let mut run = 0.0;
                let mut term = 0.0;
                for i in 0..np {
                    let xi = &xs[i * n..(i + 1) * n];
                    let (ri, ti) = follower_costs(pl, c, &cu, &off, xi, &mut sc, pert, k, i, true);
                    run += ri;
                    term += ti;
                    if keep {
                        rec.followers.extend_from_slice(xi);
                        rec.follower_controls.extend_from_slice(&sc.u);
                        rec.follower_running_each.push(ri);
                        rec.follower_terminal_each.push(ti);
                    }
                }
                rec.follower_running.push(run * inv_n);
                rec.follower_terminal = term * inv_n;
                break;
            }

            // common follower drift and noise terms
            pl.b.apply(&mut cd, &cu);
            pl.g.acc(&mut cd, &xn);
            pl.f.acc(&mut cd, &x0);
            pl.d.apply(&mut cs, &cu);
            pl.gb.acc(&mut cs, &xn);
            pl.fb.acc(&mut cs, &x0);

            let w0 = sqdt * lead_rng.next();
            let mut run = 0.0;
            sum.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..np {
                let xi = &mut xs[i * n..(i + 1) * n];
                if store {
                    let (ri, _) = follower_costs(pl, c, &cu, &off, xi, &mut sc, pert, k, i, false);
                    run += ri;
                    if keep {
                        rec.followers.extend_from_slice(xi);
                        rec.follower_controls.extend_from_slice(&sc.u);
                        rec.follower_running_each.push(ri);
                    }
                }
                sc.drift.copy_from_slice(&cd);
                sc.noise.copy_from_slice(&cs);
                c.own_drift.acc(&mut sc.drift, xi);
                c.own_noise.acc(&mut sc.noise, xi);
                if perturbed_followers && pert.follower_extra(k, i, xi, &mut sc.extra) {
                    pl.b.acc(&mut sc.drift, &sc.extra);
                    pl.d.acc(&mut sc.noise, &sc.extra);
                }
                let wi = sqdt * rngs[i].next();
                for r in 0..n {
                    xi[r] += sc.drift[r] * dt + sc.noise[r] * wi;
                    sum[r] += xi[r];
                }
            }
            if store {
                rec.follower_running.push(run * inv_n);
            }

            // leader
            pl.a0.apply(&mut d0v, &x0);
            pl.b0.acc(&mut d0v, &u0);
            pl.g0.acc(&mut d0v, &xn);
            pl.c0.apply(&mut s0v, &x0);
            pl.d0.acc(&mut s0v, &u0);
            pl.gb0.acc(&mut s0v, &xn);
            // mean field, driven by the realized leader state
            c.mf_drift.apply(&mut dxb, &xbar);
            c.mf_leader.acc(&mut dxb, &x0);
            for r in 0..n0 {
                x0[r] += d0v[r] * dt + s0v[r] * w0;
            }
            for r in 0..n {
                xbar[r] += dxb[r] * dt;
            }
            let tn = sim_time(self.horizon, k + 1, steps);
            check_finite(&sum, path, tn)?;
            check_finite(&x0, path, tn)?;
        }
        Ok(rec)
    }
}

/// Running integrand (and, at `T`, terminal cost) of follower `i`; leaves its
/// control in `sc.u`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn follower_costs(
    pl: &Plant,
    c: &FeedbackStep,
    cu: &[f64],
    off: &[f64],
    xi: &[f64],
    sc: &mut FollowerScratch,
    pert: &PreparedPerturbation,
    k: usize,
    i: usize,
    terminal: bool,
) -> (f64, f64) {
    sc.u.copy_from_slice(cu);
    c.k_own.acc(&mut sc.u, xi);
    if pert.follower_extra(k, i, xi, &mut sc.extra) {
        sc.u.iter_mut().zip(&sc.extra).for_each(|(u, e)| *u += e);
    }
    quad_costs(pl, off, xi, sc, terminal)
}

#[inline(always)]
fn quad_costs(pl: &Plant, off: &[f64], xi: &[f64], sc: &mut FollowerScratch, terminal: bool) -> (f64, f64) {
    for ((e, x), o) in sc.e.iter_mut().zip(xi).zip(off) {
        *e = x + o;
    }
    let ti = if terminal { pl.h.quad(&sc.e) } else { 0.0 };
    // the running integrand at T uses the running tracking matrices
    (pl.q.quad(&sc.e) + pl.r.quad(&sc.u), ti)
}

// ---------------------------------------------------------------- open loop

#[derive(Debug, Clone)]
struct OpenLoopStep {
    /// 𝒜 − ℬ𝒫 + ℬ_x L0
    x_drift: Flat,
    /// 𝒞0 + 𝒟0 L0
    x_noise: Flat,
    l0: Flat,
    pcal: Flat,
    k_own: Flat,
    k_mf: Flat,
    k_lead: Flat,
    k_dual: Flat,
    /// A + B K_own, C + D K_own
    aux_drift: Flat,
    aux_noise: Flat,
    /// B K_own, D K_own
    bk_own: Flat,
    dk_own: Flat,
    /// Â, F̂, BΥ†Bᵀ for the re-responding limit under a leader offset
    a_hat: Flat,
    f_hat: Flat,
    bub: Flat,
}

pub struct OpenLoopSimulator {
    dims: Dimensions,
    horizon: f64,
    cfg: SimConfig,
    plant: Plant,
    index: StackedIndex,
    table: Vec<OpenLoopStep>,
    perturbation: PreparedPerturbation,
    /// φ shift induced by a leader offset, per step (empty without one)
    dual_shift: Vec<Vec<f64>>,
}

impl OpenLoopSimulator {
    pub fn new(
        params: &ModelParams,
        stk: &StackedLeaderSolution,
        policy: &OpenLoopPolicy,
        cfg: &SimConfig,
        perturbation: &Perturbation,
    ) -> Result<Self, SimError> {
        cfg.check()?;
        if policy.horizon() != params.horizon || stk.p.horizon() != params.horizon {
            return Err(SimError::Config(String::from("solution horizon differs from the model horizon")));
        }
        let StackedIndex { n0, n } = policy.index;
        let fd = &params.follower_dyn;
        let sys = &stk.system;
        let steps = cfg.sim_steps;
        let mut table = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let pcal = sample(&policy.stacked_p, k, steps)?;
            let l0 = sample(&policy.leader_gain, k, steps)?;
            let a = sample(&sys.a, k, steps)?;
            let b = sample(&sys.b, k, steps)?;
            let x_drift = &a - &b * &pcal + &sys.b_x * &l0;
            let x_noise = &sys.c0 + &sys.d0 * &l0;
            let kown = sample(&policy.gain_own, k, steps)?;
            let bk = &fd.control_drift * &kown;
            let dk = &fd.control_noise * &kown;
            table.push(OpenLoopStep {
                x_drift: Flat::new(&x_drift),
                x_noise: Flat::new(&x_noise),
                l0: Flat::new(&l0),
                pcal: Flat::new(&pcal),
                k_mf: Flat::new(&sample(&policy.gain_mf, k, steps)?),
                k_lead: Flat::new(&sample(&policy.gain_leader, k, steps)?),
                k_dual: Flat::new(&sample(&policy.gain_dual, k, steps)?),
                aux_drift: Flat::new(&(&fd.state_drift + &bk)),
                aux_noise: Flat::new(&(&fd.state_noise + &dk)),
                bk_own: Flat::new(&bk),
                dk_own: Flat::new(&dk),
                k_own: Flat::new(&kown),
                a_hat: Flat::new(&a.view((n0, n0), (n, n)).into_owned()),
                f_hat: Flat::new(&a.view((n0, 0), (n, n0)).into_owned()),
                bub: Flat::new(&b.view((n0, 2 * n0 + n), (n, n)).into_owned()),
            });
        }
        let perturbation_table = PreparedPerturbation::new(perturbation, params.dims, cfg, params.horizon)?;
        let dual_shift = if perturbation_table.leader_offset.is_empty() {
            Vec::new()
        } else {
            dual_response(params, stk, &perturbation_table.leader_offset, steps)?
        };
        Ok(OpenLoopSimulator {
            dims: params.dims,
            horizon: params.horizon,
            cfg: cfg.clone(),
            plant: Plant::new(params),
            index: policy.index,
            table,
            perturbation: perturbation_table,
            dual_shift,
        })
    }
}

/// Deterministic shift of φ caused by a leader control offset `δu0`:
/// `δφ0' = −(A0ᵀδφ0 + F̂ᵀδφ + b0 δu0)`, `δφ' = −(Âᵀδφ + G0ᵀδφ0 + b δu0)`,
/// zero at `T`, explicit Euler backward on the simulation grid.
fn dual_response(
    params: &ModelParams,
    stk: &StackedLeaderSolution,
    offset: &[Vec<f64>],
    steps: usize,
) -> Result<Vec<Vec<f64>>, SimError> {
    let Dimensions { n0, n, m0, .. } = params.dims;
    let idx = StackedIndex { n0, n };
    let ld = &params.leader_dyn;
    let dt = params.horizon / steps as f64;
    let mut y0 = crate::Vector::zeros(n0);
    let mut y = crate::Vector::zeros(n);
    let mut out = vec![Vec::new(); steps + 1];
    out[steps] = vec![0.0; n];
    for k in (0..steps).rev() {
        let a = sample(&stk.system.a, k + 1, steps)?;
        let bphi = sample(&stk.system.b_phi, k + 1, steps)?;
        let a_hat = a.view((n0, n0), (n, n));
        let f_hat = a.view((n0, 0), (n, n0));
        let du = crate::Vector::from_column_slice(&offset[k + 1][..m0]);
        let b0 = bphi.rows_range(idx.leader_dual());
        let b = bphi.rows_range(idx.follower_dual());
        let d0 = ld.state_drift.transpose() * &y0 + f_hat.transpose() * &y + b0 * &du;
        let d = a_hat.transpose() * &y + ld.coupling_drift.transpose() * &y0 + b * &du;
        y0 += d0 * dt;
        y += d * dt;
        out[k] = y.as_slice().to_vec();
    }
    Ok(out)
}

impl PathSimulator for OpenLoopSimulator {
    fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn assemble(&self, paths: Vec<PathRecord>) -> Ensemble {
        Ensemble {
            mode: Mode::OpenLoop,
            dims: self.dims,
            config: self.cfg.clone(),
            horizon: self.horizon,
            times: stored_times(self.horizon, &self.cfg),
            paths,
        }
    }

    fn run_path(&self, path: usize) -> Result<PathRecord, SimError> {
        let Dimensions { n0, n, m0, m } = self.dims;
        let idx = self.index;
        let s = 2 * (n0 + n);
        let cfg = &self.cfg;
        let pl = &self.plant;
        let pert = &self.perturbation;
        let perturbed_followers = pert.touches_followers();
        let leader_probe = !self.dual_shift.is_empty();
        let np = cfg.population;
        let inv_n = 1.0 / np as f64;
        let steps = cfg.sim_steps;
        let dt = self.horizon / steps as f64;
        let sqdt = libm::sqrt(dt);
        let keep = cfg.keep_followers;

        let mut lead_rng = NormalStream::new(cfg.seed, path as u64, LEADER_SOURCE, cfg.antithetic);
        let mut rngs: Vec<NormalStream> = (0..np)
            .map(|i| NormalStream::new(cfg.seed, path as u64, follower_source(i), cfg.antithetic))
            .collect();

        let mut x0 = vec![0.0; n0];
        let mut z0 = vec![0.0; n0];
        Plant::draw_initial(&pl.mean0, &pl.sqrt0, &mut lead_rng, &mut z0, &mut x0);
        let mut xs = vec![0.0; np * n];
        let mut z = vec![0.0; n];
        for (i, rng) in rngs.iter_mut().enumerate() {
            Plant::draw_initial(&pl.mean, &pl.sqrt, rng, &mut z, &mut xs[i * n..(i + 1) * n]);
        }
        // auxiliary limit states start from the same initial draws
        let mut aux = xs.clone();
        // X(0) = [ξ0; ξ̄; 0; 0]
        let mut xx = vec![0.0; s];
        xx[idx.leader()].copy_from_slice(&x0);
        xx[idx.mean_field()].copy_from_slice(&pl.mean);
        // re-responding limit leader and mean field under a leader offset
        let mut lx0 = x0.clone();
        let mut lxb = pl.mean.clone();

        let mut sum = vec![0.0; n];
        for i in 0..np {
            for r in 0..n {
                sum[r] += xs[i * n + r];
            }
        }
        let mut xn = vec![0.0; n];
        let mut yy = vec![0.0; s];
        let mut zz = vec![0.0; s];
        let mut noise_x = vec![0.0; s];
        let mut drift_x = vec![0.0; s];
        let mut phi = vec![0.0; n];
        let mut u0 = vec![0.0; m0];
        let mut cu = vec![0.0; m];
        let mut au = vec![0.0; m];
        let mut cd = vec![0.0; n];
        let mut cs = vec![0.0; n];
        let mut ad = vec![0.0; n];
        let mut asn = vec![0.0; n];
        let mut off = vec![0.0; n];
        let mut e0 = vec![0.0; n0];
        let mut d0v = vec![0.0; n0];
        let mut s0v = vec![0.0; n0];
        let mut ld0 = vec![0.0; n0];
        let mut ls0 = vec![0.0; n0];
        let mut ldb = vec![0.0; n];
        let mut bphi = vec![0.0; n];
        let mut sc = FollowerScratch::new(self.dims);
        let mut aux_d = vec![0.0; n];
        let mut aux_s = vec![0.0; n];

        let mut rec = new_record(path, cfg);
        for k in 0..=steps {
            let c = &self.table[k];
            let store = k % cfg.store_every == 0;
            let last = k == steps;
            xn.iter_mut().zip(&sum).for_each(|(a, v)| *a = v * inv_n);

            // limit quantities
            c.pcal.apply(&mut yy, &xx);
            c.l0.apply(&mut u0, &xx);
            phi.copy_from_slice(&yy[idx.follower_dual()]);
            if leader_probe {
                phi.iter_mut().zip(&self.dual_shift[k]).for_each(|(p, d)| *p += d);
            } else {
                lx0.copy_from_slice(&xx[idx.leader()]);
                lxb.copy_from_slice(&xx[idx.mean_field()]);
            }
            if let Some(o) = pert.leader_offset.get(k) {
                u0.iter_mut().zip(o).for_each(|(u, v)| *u += v);
            }
            let x0_used: &[f64] = if cfg.realized_leader_in_follower_control { &x0 } else { &lx0 };

            // control parts shared by all followers: realized and auxiliary
            c.k_mf.apply(&mut cu, &lxb);
            c.k_dual.acc(&mut cu, &phi);
            au.copy_from_slice(&cu);
            c.k_lead.acc(&mut cu, x0_used);
            c.k_lead.acc(&mut au, &lx0);

            let (gam, gam1) = if last { (&pl.neg_gamh, &pl.neg_gamh1) } else { (&pl.neg_gam, &pl.neg_gam1) };
            gam.apply(&mut off, &xn);
            gam1.acc(&mut off, &x0);

            if store {
                rec.leader.extend_from_slice(&x0);
                rec.leader_control.extend_from_slice(&u0);
                rec.follower_mean.extend_from_slice(&xn);
                rec.mean_field.extend_from_slice(&lxb);
                rec.limit_leader.extend_from_slice(&lx0);
                rec.stacked.extend_from_slice(&xx);
                rec.dual.extend_from_slice(&yy);
                c.x_noise.apply(&mut noise_x, &xx);
                c.pcal.apply(&mut zz, &noise_x);
                rec.zeta0.extend_from_slice(&zz[idx.leader_dual()]);
                let g0 = if last { &pl.neg_gamh0 } else { &pl.neg_gam0 };
                e0.copy_from_slice(&x0);
                g0.acc(&mut e0, &xn);
                rec.leader_running.push(pl.q0.quad(&e0) + pl.r0.quad(&u0));
                if last {
                    rec.leader_terminal = pl.h0.quad(&e0);
                }
            }

            if last {
                let (mut run, mut term, mut gap) = (0.0, 0.0, 0.0);
                for i in 0..np {
                    let xi = &xs[i * n..(i + 1) * n];
                    let ai = &aux[i * n..(i + 1) * n];
                    openloop_control(c, &cu, ai, xi, &mut sc, pert, k, i);
                    let (ri, ti) = quad_costs(pl, &off, xi, &mut sc, true);
                    run += ri;
                    term += ti;
                    gap += sq_dist(xi, ai);
                    if keep {
                        rec.followers.extend_from_slice(xi);
                        rec.follower_controls.extend_from_slice(&sc.u);
                        rec.follower_running_each.push(ri);
                        rec.follower_terminal_each.push(ti);
                    }
                }
                rec.follower_running.push(run * inv_n);
                rec.follower_terminal = term * inv_n;
                rec.aux_gap.push(gap * inv_n);
                break;
            }

            pl.b.apply(&mut cd, &cu);
            pl.g.acc(&mut cd, &xn);
            pl.f.acc(&mut cd, &x0);
            pl.d.apply(&mut cs, &cu);
            pl.gb.acc(&mut cs, &xn);
            pl.fb.acc(&mut cs, &x0);
            pl.b.apply(&mut ad, &au);
            pl.g.acc(&mut ad, &lxb);
            pl.f.acc(&mut ad, &lx0);
            pl.d.apply(&mut asn, &au);
            pl.gb.acc(&mut asn, &lxb);
            pl.fb.acc(&mut asn, &lx0);

            let w0 = sqdt * lead_rng.next();
            let (mut run, mut gap) = (0.0, 0.0);
            sum.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..np {
                let xi = &mut xs[i * n..(i + 1) * n];
                let ai = &mut aux[i * n..(i + 1) * n];
                if store {
                    openloop_control(c, &cu, ai, xi, &mut sc, pert, k, i);
                    let (ri, _) = quad_costs(pl, &off, xi, &mut sc, false);
                    run += ri;
                    gap += sq_dist(xi, ai);
                    if keep {
                        rec.followers.extend_from_slice(xi);
                        rec.follower_controls.extend_from_slice(&sc.u);
                        rec.follower_running_each.push(ri);
                    }
                }
                // realized: A xi + B K_own x̄i + common
                sc.drift.copy_from_slice(&cd);
                sc.noise.copy_from_slice(&cs);
                pl.a.acc(&mut sc.drift, xi);
                c.bk_own.acc(&mut sc.drift, ai);
                pl.c.acc(&mut sc.noise, xi);
                c.dk_own.acc(&mut sc.noise, ai);
                if perturbed_followers && pert.follower_extra(k, i, xi, &mut sc.extra) {
                    pl.b.acc(&mut sc.drift, &sc.extra);
                    pl.d.acc(&mut sc.noise, &sc.extra);
                }
                // auxiliary: (A + B K_own) x̄i + common
                aux_d.copy_from_slice(&ad);
                aux_s.copy_from_slice(&asn);
                c.aux_drift.acc(&mut aux_d, ai);
                c.aux_noise.acc(&mut aux_s, ai);
                let wi = sqdt * rngs[i].next();
                for r in 0..n {
                    xi[r] += sc.drift[r] * dt + sc.noise[r] * wi;
                    ai[r] += aux_d[r] * dt + aux_s[r] * wi;
                    sum[r] += xi[r];
                }
            }
            if store {
                rec.follower_running.push(run * inv_n);
                rec.aux_gap.push(gap * inv_n);
            }

            // realized leader
            pl.a0.apply(&mut d0v, &x0);
            pl.b0.acc(&mut d0v, &u0);
            pl.g0.acc(&mut d0v, &xn);
            pl.c0.apply(&mut s0v, &x0);
            pl.d0.acc(&mut s0v, &u0);
            pl.gb0.acc(&mut s0v, &xn);
            if leader_probe {
                // re-responding limit: x̄0 sees the offset control, x̄ the shifted φ
                pl.a0.apply(&mut ld0, &lx0);
                pl.g0.acc(&mut ld0, &lxb);
                pl.b0.acc(&mut ld0, &u0);
                pl.c0.apply(&mut ls0, &lx0);
                pl.gb0.acc(&mut ls0, &lxb);
                pl.d0.acc(&mut ls0, &u0);
                c.a_hat.apply(&mut ldb, &lxb);
                c.f_hat.acc(&mut ldb, &lx0);
                c.bub.apply(&mut bphi, &phi);
                for r in 0..n {
                    ldb[r] -= bphi[r];
                }
                for r in 0..n0 {
                    lx0[r] += ld0[r] * dt + ls0[r] * w0;
                }
                for r in 0..n {
                    lxb[r] += ldb[r] * dt;
                }
            }
            // stacked limit state
            c.x_drift.apply(&mut drift_x, &xx);
            c.x_noise.apply(&mut noise_x, &xx);
            for r in 0..s {
                xx[r] += drift_x[r] * dt + noise_x[r] * w0;
            }
            for r in 0..n0 {
                x0[r] += d0v[r] * dt + s0v[r] * w0;
            }
            let tn = sim_time(self.horizon, k + 1, steps);
            check_finite(&sum, path, tn)?;
            check_finite(&x0, path, tn)?;
            check_finite(&xx, path, tn)?;
        }
        Ok(rec)
    }
}

/// Realized control of follower `i` into `sc.u`: `K_own x̄i + common + extra`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn openloop_control(
    c: &OpenLoopStep,
    cu: &[f64],
    aux_i: &[f64],
    xi: &[f64],
    sc: &mut FollowerScratch,
    pert: &PreparedPerturbation,
    k: usize,
    i: usize,
) {
    sc.u.copy_from_slice(cu);
    c.k_own.acc(&mut sc.u, aux_i);
    if pert.follower_extra(k, i, xi, &mut sc.extra) {
        sc.u.iter_mut().zip(&sc.extra).for_each(|(u, e)| *u += e);
    }
}

#[inline(always)]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------- entry points

pub fn simulate_openloop(
    params: &ModelParams,
    stk: &StackedLeaderSolution,
    policy: &OpenLoopPolicy,
    cfg: &SimConfig,
) -> Result<Ensemble, SimError> {
    run_paths(&OpenLoopSimulator::new(params, stk, policy, cfg, &Perturbation::default())?)
}

pub fn simulate_feedback(params: &ModelParams, policy: &FeedbackPolicy, cfg: &SimConfig) -> Result<Ensemble, SimError> {
    run_paths(&FeedbackSimulator::new(params, policy, cfg, &Perturbation::default())?)
}

/// Base policy of a perturbed run.
#[derive(Debug, Clone, Copy)]
pub enum BasePolicy<'a> {
    OpenLoop { stk: &'a StackedLeaderSolution, policy: &'a OpenLoopPolicy },
    Feedback(&'a FeedbackPolicy),
}

pub fn simulate_perturbed(
    params: &ModelParams,
    base: BasePolicy<'_>,
    perturbation: &Perturbation,
    cfg: &SimConfig,
) -> Result<Ensemble, SimError> {
    match base {
        BasePolicy::OpenLoop { stk, policy } => {
            run_paths(&OpenLoopSimulator::new(params, stk, policy, cfg, perturbation)?)
        }
        BasePolicy::Feedback(policy) => run_paths(&FeedbackSimulator::new(params, policy, cfg, perturbation)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthetic_model;
    use crate::riccati_feedback::solve_feedback_joint;
    use crate::riccati_openloop::{solve_follower_system, solve_leader_stacked};
    use crate::strategy::{build_feedback_policy, build_openloop_policy};

    const DIMS: Dimensions = Dimensions { n0: 2, n: 2, m0: 1, m: 2 };

    struct Solved {
        p: ModelParams,
        fb: FeedbackPolicy,
        stk: StackedLeaderSolution,
        ol: OpenLoopPolicy,
    }

    fn solved(p: ModelParams) -> Solved {
        let fb = build_feedback_policy(&solve_feedback_joint(&p).unwrap());
        let fol = solve_follower_system(&p).unwrap();
        let stk = solve_leader_stacked(&p, &fol).unwrap();
        let ol = build_openloop_policy(&p, &fol, &stk).unwrap();
        Solved { p, fb, stk, ol }
    }

    fn model(seed: u64) -> ModelParams {
        let mut p = synthetic_model(seed, DIMS);
        p.grid_steps = 200;
        p
    }

    fn both(s: &Solved, cfg: &SimConfig, pert: &Perturbation) -> (Ensemble, Ensemble) {
        let f = simulate_perturbed(&s.p, BasePolicy::Feedback(&s.fb), pert, cfg).unwrap();
        let o = simulate_perturbed(&s.p, BasePolicy::OpenLoop { stk: &s.stk, policy: &s.ol }, pert, cfg).unwrap();
        (f, o)
    }

    fn constant(p: &ModelParams, rows: usize, cols: usize, v: f64) -> TimeGridFn {
        TimeGridFn::new(p.horizon, vec![Mat::from_element(rows, cols, v); p.grid_steps + 1]).unwrap()
    }

    #[test]
    fn config_checks() {
        let ok = SimConfig::new(3, 2, 100, 1);
        assert!(ok.check().is_ok());
        assert_eq!(ok.stored_len(), 11);
        for bad in [
            SimConfig { population: 0, ..ok.clone() },
            SimConfig { paths: 0, ..ok.clone() },
            SimConfig { sim_steps: 1, ..ok.clone() },
            SimConfig { store_every: 7, ..ok.clone() },
            SimConfig { antithetic: true, paths: 3, ..ok.clone() },
        ] {
            assert!(matches!(bad.check(), Err(SimError::Config(_))));
        }
    }

    #[test]
    fn zero_noise_and_zero_means_stay_at_zero() {
        let mut p = model(3);
        let ld = &mut p.leader_dyn;
        ld.state_noise.fill(0.0);
        ld.coupling_noise.fill(0.0);
        ld.control_noise.fill(0.0);
        let fd = &mut p.follower_dyn;
        fd.state_noise.fill(0.0);
        fd.coupling_noise.fill(0.0);
        fd.leader_noise.fill(0.0);
        fd.control_noise.fill(0.0);
        p.init.leader_mean.fill(0.0);
        p.init.follower_mean.fill(0.0);
        p.init.leader_cov.fill(0.0);
        p.init.follower_cov.fill(0.0);
        let s = solved(p);
        let cfg = SimConfig::new(4, 2, 100, 9);
        let (f, o) = both(&s, &cfg, &Perturbation::default());
        for e in [&f, &o] {
            for r in &e.paths {
                for v in [&r.leader, &r.follower_mean, &r.mean_field, &r.leader_running, &r.follower_running] {
                    assert!(v.iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn uncontrolled_model_is_policy_independent() {
        let mut p = model(4);
        p.leader_dyn.control_drift.fill(0.0);
        p.leader_dyn.control_noise.fill(0.0);
        p.follower_dyn.control_drift.fill(0.0);
        p.follower_dyn.control_noise.fill(0.0);
        let s = solved(p);
        let mut cfg = SimConfig::new(5, 3, 100, 2);
        cfg.keep_followers = true;
        let (f, o) = both(&s, &cfg, &Perturbation::default());
        for (a, b) in f.paths.iter().zip(&o.paths) {
            assert_eq!(a.leader, b.leader);
            for (x, y) in a.followers.iter().zip(&b.followers) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn zero_perturbation_is_bit_identical() {
        let s = solved(model(5));
        let mut cfg = SimConfig::new(4, 2, 100, 11);
        cfg.keep_followers = true;
        let (f0, o0) = both(&s, &cfg, &Perturbation::default());
        let zero = Perturbation {
            followers: FollowerSet::All,
            follower_offset: Some(constant(&s.p, 2, 1, 0.0)),
            follower_gain: Some(constant(&s.p, 2, 2, 0.0)),
            leader_offset: None,
        };
        let (f1, o1) = both(&s, &cfg, &zero);
        assert_eq!(f0, f1);
        assert_eq!(o0, o1);
    }

    #[test]
    fn determinism_and_path_independence() {
        let s = solved(model(6));
        let cfg = SimConfig::new(3, 4, 100, 21);
        let (f0, o0) = both(&s, &cfg, &Perturbation::default());
        let (f1, o1) = both(&s, &cfg, &Perturbation::default());
        assert_eq!(f0, f1);
        assert_eq!(o0, o1);
        // a path does not depend on how many others are run
        let single = SimConfig { paths: 1, ..cfg.clone() };
        let sim = FeedbackSimulator::new(&s.p, &s.fb, &single, &Perturbation::default()).unwrap();
        assert_eq!(sim.run_path(2).unwrap(), f0.paths[2]);
        let other = SimConfig { seed: 22, ..cfg };
        assert_ne!(simulate_feedback(&s.p, &s.fb, &other).unwrap().paths, f0.paths);
    }

    #[test]
    fn averaging_identity() {
        let s = solved(model(7));
        let mut cfg = SimConfig::new(6, 2, 100, 3);
        cfg.keep_followers = true;
        let (f, o) = both(&s, &cfg, &Perturbation::default());
        assert!(f.average_identity_residual().unwrap() < 1e-12);
        assert!(o.average_identity_residual().unwrap() < 1e-12);
        // mean of per-follower running costs equals the stored average
        for e in [&f, &o] {
            let r = &e.paths[0];
            for j in 0..e.stored_len() {
                let row = &r.follower_running_each[j * 6..(j + 1) * 6];
                let mean = row.iter().sum::<f64>() / 6.0;
                assert!((mean - r.follower_running[j]).abs() <= 1e-12 * (1.0 + mean.abs()));
            }
            let mt = r.follower_terminal_each.iter().sum::<f64>() / 6.0;
            assert!((mt - r.follower_terminal).abs() <= 1e-12 * (1.0 + mt.abs()));
        }
    }

    #[test]
    fn deviating_follower_reaches_others_only_through_the_average() {
        let mut p = model(8);
        p.follower_dyn.coupling_drift.fill(0.0);
        p.follower_dyn.coupling_noise.fill(0.0);
        p.leader_dyn.coupling_drift.fill(0.0);
        p.leader_dyn.coupling_noise.fill(0.0);
        let s = solved(p);
        let mut cfg = SimConfig::new(4, 2, 100, 5);
        cfg.keep_followers = true;
        let pert = Perturbation {
            followers: FollowerSet::Indices(vec![1]),
            follower_offset: Some(constant(&s.p, 2, 1, 0.3)),
            ..Perturbation::default()
        };
        let (f0, o0) = both(&s, &cfg, &Perturbation::default());
        let (f1, o1) = both(&s, &cfg, &pert);
        let n = 2;
        for (a, b) in f0.paths.iter().zip(&f1.paths).chain(o0.paths.iter().zip(&o1.paths)) {
            assert_eq!(a.leader, b.leader);
            let mut moved = false;
            for j in 0..cfg.stored_len() {
                for i in 0..4 {
                    let xa = &a.followers[(j * 4 + i) * n..(j * 4 + i + 1) * n];
                    let xb = &b.followers[(j * 4 + i) * n..(j * 4 + i + 1) * n];
                    if i == 1 {
                        moved |= xa != xb;
                    } else {
                        assert_eq!(xa, xb);
                    }
                }
            }
            assert!(moved);
        }
    }

    #[test]
    fn leader_offset_without_leader_control_channels_changes_nothing_else() {
        let mut p = model(9);
        p.leader_dyn.control_drift.fill(0.0);
        p.leader_dyn.control_noise.fill(0.0);
        let s = solved(p);
        let cfg = SimConfig::new(3, 2, 100, 8);
        let pert = Perturbation { leader_offset: Some(constant(&s.p, 1, 1, 0.5)), ..Perturbation::default() };
        let (f0, o0) = both(&s, &cfg, &Perturbation::default());
        let (f1, o1) = both(&s, &cfg, &pert);
        for (a, b) in f0.paths.iter().zip(&f1.paths).chain(o0.paths.iter().zip(&o1.paths)) {
            assert_eq!(a.leader, b.leader);
            for (x, y) in a.follower_mean.iter().zip(&b.follower_mean) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
            assert!(a.leader_control.iter().zip(&b.leader_control).all(|(x, y)| (y - x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn auxiliary_limit_matches_uncoupled_followers() {
        let mut p = model(10);
        let fd = &mut p.follower_dyn;
        fd.coupling_drift.fill(0.0);
        fd.coupling_noise.fill(0.0);
        fd.leader_drift.fill(0.0);
        fd.leader_noise.fill(0.0);
        let s = solved(p);
        let mut cfg = SimConfig::new(3, 2, 100, 4);
        cfg.realized_leader_in_follower_control = false;
        let o = simulate_openloop(&s.p, &s.stk, &s.ol, &cfg).unwrap();
        for r in &o.paths {
            assert!(r.aux_gap.iter().all(|&g| g < 1e-20));
        }
    }

    #[test]
    fn leader_offset_shift_is_linear() {
        let s = solved(model(11));
        let cfg = SimConfig::new(2, 1, 100, 1);
        let shift = |v: f64| {
            let pert = Perturbation { leader_offset: Some(constant(&s.p, 1, 1, v)), ..Perturbation::default() };
            OpenLoopSimulator::new(&s.p, &s.stk, &s.ol, &cfg, &pert).unwrap().dual_shift
        };
        let (a, b) = (shift(0.2), shift(0.4));
        assert!(a[0].iter().any(|v| v.abs() > 1e-6));
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert!(a[100].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn euler_weak_error_halves_with_the_step() {
        let mut p = model(12);
        let ld = &mut p.leader_dyn;
        ld.state_noise.fill(0.0);
        ld.coupling_noise.fill(0.0);
        ld.control_noise.fill(0.0);
        let fd = &mut p.follower_dyn;
        fd.state_noise.fill(0.0);
        fd.coupling_noise.fill(0.0);
        fd.leader_noise.fill(0.0);
        fd.control_noise.fill(0.0);
        p.init.leader_cov.fill(0.0);
        p.init.follower_cov.fill(0.0);
        p.grid_steps = 1600;
        let s = solved(p);
        let end = |steps: usize| {
            let cfg = SimConfig::new(2, 1, steps, 1);
            let r = &simulate_feedback(&s.p, &s.fb, &cfg).unwrap().paths[0];
            let j = cfg.stored_len() - 1;
            r.leader[j * 2]
        };
        let reference = end(1600);
        let e1 = (end(50) - reference).abs();
        let e2 = (end(100) - reference).abs();
        let ratio = e1 / e2;
        assert!((1.4..=2.9).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn out_of_range_perturbation_index_is_rejected() {
        let s = solved(model(13));
        let cfg = SimConfig::new(2, 1, 100, 1);
        let pert = Perturbation {
            followers: FollowerSet::Indices(vec![2]),
            follower_offset: Some(constant(&s.p, 2, 1, 1.0)),
            ..Perturbation::default()
        };
        assert!(matches!(
            simulate_perturbed(&s.p, BasePolicy::Feedback(&s.fb), &pert, &cfg),
            Err(SimError::Config(_))
        ));
        let wrong = Perturbation { follower_offset: Some(constant(&s.p, 3, 1, 1.0)), ..Perturbation::default() };
        assert!(simulate_perturbed(&s.p, BasePolicy::Feedback(&s.fb), &wrong, &cfg).is_err());
    }
}
