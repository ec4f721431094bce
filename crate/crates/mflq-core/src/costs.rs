//! Empirical and closed-form costs, mean-field gap statistics and
//! ε-Stackelberg probes.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::error::SolveError;
use crate::model::ModelParams;
use crate::numerics::{ols_slope, NumericsError, TimeGridFn};
use crate::riccati_feedback::{solve_feedback_joint, solve_follower_response, FeedbackSolution, LeaderGains};
use crate::riccati_openloop::{
    solve_follower_system, solve_leader_stacked, OpenLoopFollowerSolution, StackedIndex, StackedLeaderSolution,
};
use crate::rng::hash64;
use crate::simulator::{
    run_paths, Ensemble, FeedbackSimulator, FollowerSet, Mode, OpenLoopSimulator, PathSimulator, Perturbation,
    SimConfig, SimError,
};
use crate::strategy::{build_feedback_policy, build_openloop_policy, FeedbackPolicy, OpenLoopPolicy, PolicyError};
use crate::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("ensemble was simulated in {found:?} mode, expected {expected:?}")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error("ensemble lacks the {0} blocks")]
    MissingBlocks(&'static str),
    #[error("s_T is not structurally zero for this model; an open-loop ensemble is required")]
    NeedEnsemble,
    #[error("a convergence study needs at least 3 population sizes, got {0}")]
    TooFewPopulations(usize),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub mean: f64,
    /// zero for fewer than two samples
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Estimate { mean, se: libm::sqrt(var / n as f64) }
    }
}

pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Realized costs per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCosts {
    pub leader: Vec<f64>,
    /// Jsoc^(N) = (1/N) Σ Ji
    pub social: Vec<f64>,
}

pub fn path_costs(ens: &Ensemble) -> PathCosts {
    let (leader, social) = ens
        .paths
        .iter()
        .map(|r| {
            (
                trapezoid(&ens.times, &r.leader_running) + r.leader_terminal,
                trapezoid(&ens.times, &r.follower_running) + r.follower_terminal,
            )
        })
        .unzip();
    PathCosts { leader, social }
}

/// `Ji` per path and follower; `None` unless followers were kept.
pub fn follower_costs(ens: &Ensemble) -> Option<Vec<Vec<f64>>> {
    let np = ens.config.population;
    let len = ens.stored_len();
    ens.paths
        .iter()
        .map(|r| {
            if r.follower_running_each.len() != np * len {
                return None;
            }
            let mut series = vec![0.0; len];
            Some(
                (0..np)
                    .map(|i| {
                        for (j, s) in series.iter_mut().enumerate() {
                            *s = r.follower_running_each[j * np + i];
                        }
                        trapezoid(&ens.times, &series) + r.follower_terminal_each[i]
                    })
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub mode: Mode,
    pub population: usize,
    pub paths: usize,
    pub leader: Estimate,
    /// Jsoc^(N), already averaged over the followers
    pub social: Estimate,
    pub closed_form_leader: Option<f64>,
    pub closed_form_social: Option<f64>,
    /// open loop only
    pub s_t: Option<Estimate>,
    /// sup over time of E|x^(N) − x̄|²
    pub meanfield_gap: Option<f64>,
    pub epsilon_follower: Option<Estimate>,
    pub epsilon_leader: Option<Estimate>,
}

impl CostReport {
    pub fn per_capita_social(&self) -> Estimate {
        self.social
    }
}

pub fn empirical_costs(ens: &Ensemble) -> CostReport {
    let pc = path_costs(ens);
    CostReport {
        mode: ens.mode,
        population: ens.config.population,
        paths: ens.paths.len(),
        leader: Estimate::from_samples(&pc.leader),
        social: Estimate::from_samples(&pc.social),
        closed_form_leader: None,
        closed_form_social: None,
        s_t: None,
        meanfield_gap: meanfield_gap(ens).ok().map(|g| g.sup_mean_field()),
        epsilon_follower: None,
        epsilon_leader: None,
    }
}

fn quad(x: &Vector, m: &Mat, y: &Vector) -> f64 {
    (x.transpose() * m * y)[(0, 0)]
}

fn trace_prod(a: &Mat, b: &Mat) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackClosedForm {
    /// limit of Jsoc^(N)
    pub social: f64,
    pub leader: f64,
}

pub fn closed_form_feedback_costs(params: &ModelParams, fb: &FeedbackSolution) -> FeedbackClosedForm {
    let init = &params.init;
    let (xb0, xb) = (&init.leader_mean, &init.follower_mean);
    let e0 = init.leader_second_moment();
    let e = init.follower_second_moment();
    let social = trace_prod(fb.m.first(), &e)
        + quad(xb, fb.m_bar.first(), xb)
        + 2.0 * quad(xb0, fb.lambda_bar.first(), xb)
        + trace_prod(fb.lambda0.first(), &e0);
    let leader = trace_prod(fb.theta1.first(), &e0)
        + quad(xb, fb.theta2.first(), xb)
        + 2.0 * quad(xb, fb.theta3.first(), xb0);
    FeedbackClosedForm { social, leader }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenLoopClosedForm {
    /// limit of Jsoc^(N) with the derived s_T
    pub social: f64,
    pub leader: f64,
    /// ∫ E[−φᵀBΥ†Bᵀφ + 2φ0ᵀB0u0 + 2ζ0ᵀD0u0 + u0ᵀD0ᵀKD0u0] dt
    pub s_t: Estimate,
    /// social cost in the literal printed form: φ-terms at the mean initial state
    /// and the printed s_T integrand
    pub social_printed: f64,
    /// ∫ E[(x̄ᵀḠ0ᵀKD0 + ζ0ᵀD0 + φ0ᵀB0)u0 + u0ᵀD0ᵀKD0u0] dt
    pub s_t_printed: Estimate,
}

/// True when the leader control cannot reach the followers' offsets, so that
/// φ ≡ 0, u0 enters no s_T term and s_T vanishes.
pub fn s_t_structurally_zero(params: &ModelParams) -> bool {
    params.leader_dyn.control_drift.iter().all(|&v| v == 0.0)
        && params.leader_dyn.control_noise.iter().all(|&v| v == 0.0)
}

pub fn closed_form_openloop_costs(
    params: &ModelParams,
    fol: &OpenLoopFollowerSolution,
    stk: &StackedLeaderSolution,
    ens: Option<&Ensemble>,
) -> Result<OpenLoopClosedForm, CostError> {
    let d = params.dims;
    let idx = StackedIndex { n0: d.n0, n: d.n };
    let init = &params.init;
    let (xb0, xb) = (&init.leader_mean, &init.follower_mean);
    let e0 = init.leader_second_moment();
    let e = init.follower_second_moment();
    let p = stk.p.first();
    let blk = |r: core::ops::Range<usize>, c: core::ops::Range<usize>| {
        p.view((r.start, c.start), (r.len(), c.len())).into_owned()
    };
    let (l, mf, ld, fd) = (idx.leader(), idx.mean_field(), idx.leader_dual(), idx.follower_dual());

    // Y(0) = 𝒫(0)X(0) with X(0) = [ξ0; ξ̄; 0; 0]
    let leader = trace_prod(&blk(l.clone(), l.clone()), &e0)
        + quad(xb0, &blk(l.clone(), mf.clone()), xb)
        + quad(xb, &blk(mf.clone(), l.clone()), xb0)
        + quad(xb, &blk(mf.clone(), mf.clone()), xb);
    let phi_mean = blk(fd.clone(), l.clone()) * xb0 + blk(fd, mf.clone()) * xb;
    let phi0_mean = blk(ld.clone(), l.clone()) * xb0 + blk(ld.clone(), mf.clone()) * xb;
    let phi0_xi0 = trace_prod(&blk(ld.clone(), l), &e0) + quad(xb0, &blk(ld, mf), xb);

    let common = trace_prod(fol.p.first(), &e)
        + quad(xb, fol.p_bar.first(), xb)
        + trace_prod(fol.k.first(), &e0)
        + 2.0 * quad(xb, fol.p0.first(), xb0)
        + 2.0 * phi_mean.dot(xb);

    let (s_t, s_t_printed) = if s_t_structurally_zero(params) {
        (Estimate::default(), Estimate::default())
    } else {
        let ens = ens.ok_or(CostError::NeedEnsemble)?;
        s_t_estimates(params, fol, idx, ens)?
    };
    Ok(OpenLoopClosedForm {
        social: common + 2.0 * phi0_xi0 + s_t.mean,
        leader,
        s_t,
        social_printed: common + 2.0 * phi0_mean.dot(xb0) + s_t_printed.mean,
        s_t_printed,
    })
}

fn s_t_estimates(
    params: &ModelParams,
    fol: &OpenLoopFollowerSolution,
    idx: StackedIndex,
    ens: &Ensemble,
) -> Result<(Estimate, Estimate), CostError> {
    if ens.mode != Mode::OpenLoop {
        return Err(CostError::ModeMismatch { expected: Mode::OpenLoop, found: ens.mode });
    }
    let d = params.dims;
    let s = d.stacked();
    let len = ens.stored_len();
    if ens.paths.iter().any(|r| r.dual.len() != len * s || r.zeta0.len() != len * d.n0) {
        return Err(CostError::MissingBlocks("stacked dual"));
    }
    let ld = &params.leader_dyn;
    let b = &params.follower_dyn.control_drift;
    let mut coeff = Vec::with_capacity(len);
    for &t in &ens.times {
        let k = fol.k.at(t)?;
        let bub = b * fol.upsilon_pinv.at(t)? * b.transpose();
        coeff.push((k.clone() * &ld.control_noise, bub, ld.coupling_noise.transpose() * k * &ld.control_noise));
    }
    let mut derived = Vec::with_capacity(ens.paths.len());
    let mut printed = Vec::with_capacity(ens.paths.len());
    let mut r1 = vec![0.0; len];
    let mut r2 = vec![0.0; len];
    for rec in &ens.paths {
        for (j, (kd0, bub, gkd0)) in coeff.iter().enumerate() {
            let y = Vector::from_column_slice(&rec.dual[j * s..(j + 1) * s]);
            let x = Vector::from_column_slice(&rec.stacked[j * s..(j + 1) * s]);
            let phi0 = y.rows_range(idx.leader_dual()).into_owned();
            let phi = y.rows_range(idx.follower_dual()).into_owned();
            let xbar = x.rows_range(idx.mean_field()).into_owned();
            let zeta0 = Vector::from_column_slice(&rec.zeta0[j * d.n0..(j + 1) * d.n0]);
            let u0 = Vector::from_column_slice(&rec.leader_control[j * d.m0..(j + 1) * d.m0]);
            let kd0u = kd0 * &u0;
            let b0u = &ld.control_drift * &u0;
            let d0u = &ld.control_noise * &u0;
            let uku = d0u.dot(&kd0u);
            r1[j] = -quad(&phi, bub, &phi) + 2.0 * phi0.dot(&b0u) + 2.0 * zeta0.dot(&d0u) + uku;
            r2[j] = (gkd0 * &u0).dot(&xbar) + zeta0.dot(&d0u) + phi0.dot(&b0u) + uku;
        }
        derived.push(trapezoid(&ens.times, &r1));
        printed.push(trapezoid(&ens.times, &r2));
    }
    Ok((Estimate::from_samples(&derived), Estimate::from_samples(&printed)))
}

/// Sample statistics of the gaps between realized quantities and their limits
/// at each stored time.
#[derive(Debug, Clone, PartialEq)]
pub struct GapStats {
    pub times: Vec<f64>,
    /// E|x^(N) − x̄|²
    pub mean_field: Vec<Estimate>,
    /// E|x^(N) − x̄|
    pub mean_field_abs: Vec<Estimate>,
    /// open loop: E|x0 − x̄0|²
    pub leader: Option<Vec<Estimate>>,
    /// open loop: (1/N) Σ E|xi − x̄i|²
    pub auxiliary: Option<Vec<Estimate>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sup(v: &[Estimate]) -> f64 {
    v.iter().map(|e| e.mean).fold(0.0, f64::max)
}

impl GapStats {
    pub fn sup_mean_field(&self) -> f64 {
        sup(&self.mean_field)
    }

    pub fn sup_mean_field_abs(&self) -> f64 {
        sup(&self.mean_field_abs)
    }

    pub fn sup_leader(&self) -> Option<f64> {
        self.leader.as_deref().map(sup)
    }

    pub fn sup_auxiliary(&self) -> Option<f64> {
        self.auxiliary.as_deref().map(sup)
    }
}

pub fn meanfield_gap(ens: &Ensemble) -> Result<GapStats, CostError> {
    let (n0, n) = (ens.dims.n0, ens.dims.n);
    let len = ens.stored_len();
    let paths = &ens.paths;
    if paths.iter().any(|r| r.follower_mean.len() != len * n || r.mean_field.len() != len * n) {
        return Err(CostError::MissingBlocks("mean-field"));
    }
    let per_time = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Estimate> {
        let mut xs = vec![0.0; paths.len()];
        (0..len)
            .map(|j| {
                for (p, x) in xs.iter_mut().enumerate() {
                    *x = f(p, j);
                }
                Estimate::from_samples(&xs)
            })
            .collect()
    };
    let sq = |p: usize, j: usize| {
        let r = &paths[p];
        sq_dist(&r.follower_mean[j * n..(j + 1) * n], &r.mean_field[j * n..(j + 1) * n])
    };
    let mean_field = per_time(&sq);
    let mean_field_abs = per_time(&|p, j| libm::sqrt(sq(p, j)));
    let (leader, auxiliary) = if ens.mode == Mode::OpenLoop {
        if paths.iter().any(|r| r.limit_leader.len() != len * n0 || r.aux_gap.len() != len) {
            return Err(CostError::MissingBlocks("limit leader"));
        }
        let lead = per_time(&|p, j| {
            let r = &paths[p];
            sq_dist(&r.leader[j * n0..(j + 1) * n0], &r.limit_leader[j * n0..(j + 1) * n0])
        });
        (Some(lead), Some(per_time(&|p, j| paths[p].aux_gap[j])))
    } else {
        (None, None)
    };
    Ok(GapStats { times: ens.times.clone(), mean_field, mean_field_abs, leader, auxiliary })
}

/// Executes prepared simulations; implementations may parallelize over paths
/// but must return paths in index order.
pub trait EnsembleRunner {
    fn run(&self, sim: &dyn PathSimulator) -> Result<Ensemble, SimError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl EnsembleRunner for SequentialRunner {
    fn run(&self, sim: &dyn PathSimulator) -> Result<Ensemble, SimError> {
        run_paths(sim)
    }
}

/// Limit equilibrium of one information structure with its policy.
#[derive(Debug, Clone)]
pub enum Equilibrium {
    Feedback { solution: FeedbackSolution, policy: FeedbackPolicy },
    OpenLoop { follower: OpenLoopFollowerSolution, stacked: StackedLeaderSolution, policy: OpenLoopPolicy },
}

impl Equilibrium {
    pub fn solve(params: &ModelParams, mode: Mode) -> Result<Self, CostError> {
        Ok(match mode {
            Mode::Feedback => {
                let solution = solve_feedback_joint(params)?;
                let policy = build_feedback_policy(&solution);
                Equilibrium::Feedback { solution, policy }
            }
            Mode::OpenLoop => {
                let follower = solve_follower_system(params)?;
                let stacked = solve_leader_stacked(params, &follower)?;
                let policy = build_openloop_policy(params, &follower, &stacked)?;
                Equilibrium::OpenLoop { follower, stacked, policy }
            }
        })
    }

    pub fn mode(&self) -> Mode {
        match self {
            Equilibrium::Feedback { .. } => Mode::Feedback,
            Equilibrium::OpenLoop { .. } => Mode::OpenLoop,
        }
    }

    pub fn simulator(
        &self,
        params: &ModelParams,
        cfg: &SimConfig,
        perturbation: &Perturbation,
    ) -> Result<Box<dyn PathSimulator>, SimError> {
        Ok(match self {
            Equilibrium::Feedback { policy, .. } => Box::new(FeedbackSimulator::new(params, policy, cfg, perturbation)?),
            Equilibrium::OpenLoop { stacked, policy, .. } => {
                Box::new(OpenLoopSimulator::new(params, stacked, policy, cfg, perturbation)?)
            }
        })
    }

    pub fn simulate(
        &self,
        params: &ModelParams,
        cfg: &SimConfig,
        runner: &dyn EnsembleRunner,
    ) -> Result<Ensemble, SimError> {
        runner.run(&*self.simulator(params, cfg, &Perturbation::default())?)
    }

    /// Closed-form limit costs; the open-loop s_T is estimated from `ens`.
    pub fn closed_form(&self, params: &ModelParams, ens: Option<&Ensemble>) -> Result<(f64, f64), CostError> {
        match self {
            Equilibrium::Feedback { solution, .. } => {
                let c = closed_form_feedback_costs(params, solution);
                Ok((c.social, c.leader))
            }
            Equilibrium::OpenLoop { follower, stacked, .. } => {
                let c = closed_form_openloop_costs(params, follower, stacked, ens)?;
                Ok((c.social, c.leader))
            }
        }
    }

    /// Empirical report with the closed forms and the mean-field gap filled in.
    pub fn report(&self, params: &ModelParams, ens: &Ensemble) -> Result<CostReport, CostError> {
        if ens.mode != self.mode() {
            return Err(CostError::ModeMismatch { expected: self.mode(), found: ens.mode });
        }
        let mut r = empirical_costs(ens);
        let (social, leader) = self.closed_form(params, Some(ens))?;
        r.closed_form_social = Some(social);
        r.closed_form_leader = Some(leader);
        if let Equilibrium::OpenLoop { follower, stacked, .. } = self {
            r.s_t = Some(closed_form_openloop_costs(params, follower, stacked, Some(ens))?.s_t);
        }
        Ok(r)
    }
}

/// Random smooth deviation directions, each applied at every magnitude.
/// The family is a falsification suite: it cannot certify an ε-equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFamily {
    pub directions: usize,
    pub magnitudes: Vec<f64>,
    pub seed: u64,
}

impl Default for ProbeFamily {
    fn default() -> Self {
        ProbeFamily { directions: 12, magnitudes: vec![0.05, 0.15, 0.4], seed: 0x9e37 }
    }
}

impl ProbeFamily {
    pub fn empty() -> Self {
        ProbeFamily { directions: 0, magnitudes: Vec::new(), seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.directions * self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform draw in [−1, 1] keyed by direction, stream and counter.
    fn draw(&self, dir: usize, stream: u64, k: u64) -> f64 {
        let u = hash64(self.seed, (dir as u64) << 8 | stream, k) >> 11;
        2.0 * (u as f64) / ((1u64 << 53) as f64) - 1.0
    }

    /// `mag · (a + b cos(πt/T) + c sin(πt/T)) · E` with `E` normalized to unit max-norm.
    fn profile(&self, dir: usize, stream: u64, mag: f64, rows: usize, cols: usize, horizon: f64, steps: usize) -> TimeGridFn {
        let coef = [self.draw(dir, stream, 0), self.draw(dir, stream, 1), self.draw(dir, stream, 2)];
        let mut e = Mat::from_fn(rows, cols, |i, j| self.draw(dir, stream, 3 + (i * cols + j) as u64));
        let scale = e.amax();
        if scale > 0.0 {
            e /= scale;
        }
        TimeGridFn::from_fn(horizon, steps, |_, t| {
            let w = core::f64::consts::PI * t / horizon;
            &e * (mag * (coef[0] + coef[1] * libm::cos(w) + coef[2] * libm::sin(w)))
        })
        .expect("probe grid has at least one step")
    }

    fn probes(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.directions).flat_map(move |d| self.magnitudes.iter().map(move |&m| (d, m)))
    }
}

/// Outcome of a probe family at one population size. `epsilon` is the largest
/// paired improvement over the base run, truncated at zero, with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub population: usize,
    pub base: Estimate,
    /// probe costs in family order
    pub probes: Vec<Estimate>,
    /// index of the most improving probe
    pub best: Option<usize>,
    pub epsilon: Estimate,
}

fn probe_outcome(population: usize, base: &[f64], runs: Vec<Vec<f64>>) -> ProbeOutcome {
    let mut best: Option<(usize, Estimate)> = None;
    let mut probes = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let diff: Vec<f64> = base.iter().zip(run).map(|(b, p)| b - p).collect();
        let gain = Estimate::from_samples(&diff);
        if best.is_none_or(|(_, g)| gain.mean > g.mean) {
            best = Some((i, gain));
        }
        probes.push(Estimate::from_samples(run));
    }
    let epsilon = match best {
        Some((_, g)) => Estimate { mean: g.mean.max(0.0), se: g.se },
        None => Estimate::default(),
    };
    ProbeOutcome { population, base: Estimate::from_samples(base), probes, best: best.map(|b| b.0), epsilon }
}

/// Team deviations of all followers (gain and offset profiles) against the
/// base run with common random numbers; compares Jsoc^(N).
pub fn epsilon_probe_follower(
    params: &ModelParams,
    eq: &Equilibrium,
    cfg: &SimConfig,
    family: &ProbeFamily,
    runner: &dyn EnsembleRunner,
) -> Result<ProbeOutcome, CostError> {
    let d = params.dims;
    let (h, k) = (params.horizon, params.grid_steps);
    let base = path_costs(&eq.simulate(params, cfg, runner)?).social;
    let state_scale = 1.0 + params.init.follower_mean.amax();
    let mut runs = Vec::with_capacity(family.len());
    for (dir, mag) in family.probes() {
        let pert = Perturbation {
            followers: FollowerSet::All,
            follower_gain: Some(family.profile(dir, 1, mag, d.m, d.n, h, k)),
            follower_offset: Some(family.profile(dir, 2, mag * state_scale, d.m, 1, h, k)),
            leader_offset: None,
        };
        runs.push(path_costs(&runner.run(&*eq.simulator(params, cfg, &pert)?)?).social);
    }
    Ok(probe_outcome(cfg.population, &base, runs))
}

/// Leader deviations with the followers re-responding; compares J0.
/// Feedback: perturbed leader gains, follower gains re-solved against them.
/// Open loop: smooth control offsets, followers re-respond through φ.
pub fn epsilon_probe_leader(
    params: &ModelParams,
    eq: &Equilibrium,
    cfg: &SimConfig,
    family: &ProbeFamily,
    runner: &dyn EnsembleRunner,
) -> Result<ProbeOutcome, CostError> {
    let d = params.dims;
    let (h, k) = (params.horizon, params.grid_steps);
    let base = path_costs(&eq.simulate(params, cfg, runner)?).leader;
    let mut runs = Vec::with_capacity(family.len());
    for (dir, mag) in family.probes() {
        let ens = match eq {
            // the unperturbed leader keeps the equilibrium response
            Equilibrium::Feedback { .. } if mag == 0.0 => eq.simulate(params, cfg, runner)?,
            Equilibrium::Feedback { policy, .. } => {
                let add = |f: &TimeGridFn, g: TimeGridFn| {
                    TimeGridFn::new(h, f.values().iter().zip(g.values()).map(|(a, b)| a + b).collect())
                };
                let gains = LeaderGains {
                    state: add(&policy.leader_state, family.profile(dir, 3, mag, d.m0, d.n0, h, k))?,
                    mean_field: add(&policy.leader_mf, family.profile(dir, 4, mag, d.m0, d.n, h, k))?,
                };
                let resp = solve_follower_response(params, &gains)?;
                let probed = FeedbackPolicy {
                    leader_state: gains.state,
                    leader_mf: gains.mean_field,
                    gain_own: resp.gain_own,
                    gain_mf: resp.gain_mf,
                    gain_leader: resp.gain_leader,
                };
                runner.run(&FeedbackSimulator::new(params, &probed, cfg, &Perturbation::default())?)?
            }
            Equilibrium::OpenLoop { .. } => {
                let scale = 1.0 + params.init.leader_mean.amax();
                let pert = Perturbation {
                    leader_offset: Some(family.profile(dir, 5, mag * scale, d.m0, 1, h, k)),
                    ..Perturbation::default()
                };
                runner.run(&*eq.simulator(params, cfg, &pert)?)?
            }
        };
        runs.push(path_costs(&ens).leader);
    }
    Ok(probe_outcome(cfg.population, &base, runs))
}

/// Log-log regression `ln y = a + slope · ln N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub se: f64,
}

/// `None` when fewer than three points are positive enough to take logarithms.
pub fn loglog_slope(ns: &[usize], ys: &[f64]) -> Option<SlopeFit> {
    const FLOOR: f64 = 1e-20;
    if ns.len() < 3 || ys.iter().any(|&y| !(y > FLOOR)) {
        return None;
    }
    let x: Vec<f64> = ns.iter().map(|&n| libm::log(n as f64)).collect();
    let y: Vec<f64> = ys.iter().map(|&v| libm::log(v)).collect();
    let (slope, se) = ols_slope(&x, &y);
    Some(SlopeFit { slope, se })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub population: usize,
    /// sup_t E|x^(N) − x̄|²
    pub gap: f64,
    /// sup_t E|x^(N) − x̄|
    pub gap_abs: f64,
    pub leader: Estimate,
    pub social: Estimate,
    pub closed_form_leader: f64,
    pub closed_form_social: f64,
    pub epsilon_follower: Option<Estimate>,
    pub epsilon_leader: Option<Estimate>,
}

impl ConvergenceRow {
    pub fn social_gap(&self) -> f64 {
        (self.social.mean - self.closed_form_social).abs()
    }

    pub fn leader_gap(&self) -> f64 {
        (self.leader.mean - self.closed_form_leader).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub mode: Mode,
    pub rows: Vec<ConvergenceRow>,
    /// `None` when the gaps sit at rounding level (noise-free models)
    pub gap_slope: Option<SlopeFit>,
    pub social_gap_slope: Option<SlopeFit>,
    pub leader_gap_slope: Option<SlopeFit>,
}

/// Solves once, then simulates every population size with the same seed.
/// `cfg.population` is overridden by each entry of `ns`.
pub fn convergence_study(
    params: &ModelParams,
    ns: &[usize],
    cfg: &SimConfig,
    mode: Mode,
    probes: Option<&ProbeFamily>,
    runner: &dyn EnsembleRunner,
) -> Result<ConvergenceTable, CostError> {
    if ns.len() < 3 {
        return Err(CostError::TooFewPopulations(ns.len()));
    }
    let eq = Equilibrium::solve(params, mode)?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let c = SimConfig { population: n, ..cfg.clone() };
        let ens = eq.simulate(params, &c, runner)?;
        let gap = meanfield_gap(&ens)?;
        let rep = eq.report(params, &ens)?;
        let (eps_f, eps_l) = match probes {
            Some(f) => (
                Some(epsilon_probe_follower(params, &eq, &c, f, runner)?.epsilon),
                Some(epsilon_probe_leader(params, &eq, &c, f, runner)?.epsilon),
            ),
            None => (None, None),
        };
        rows.push(ConvergenceRow {
            population: n,
            gap: gap.sup_mean_field(),
            gap_abs: gap.sup_mean_field_abs(),
            leader: rep.leader,
            social: rep.social,
            closed_form_leader: rep.closed_form_leader.unwrap_or(f64::NAN),
            closed_form_social: rep.closed_form_social.unwrap_or(f64::NAN),
            epsilon_follower: eps_f,
            epsilon_leader: eps_l,
        });
    }
    let col = |f: &dyn Fn(&ConvergenceRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(ConvergenceTable {
        mode,
        gap_slope: loglog_slope(ns, &col(&|r| r.gap)),
        social_gap_slope: loglog_slope(ns, &col(&|r| r.social_gap())),
        leader_gap_slope: loglog_slope(ns, &col(&|r| r.leader_gap())),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthetic_model, table1_model, Dimensions};
    use crate::rng::NormalStream;
    use proptest::prelude::*;

    fn small_table1() -> ModelParams {
        let mut p = table1_model();
        p.grid_steps = 200;
        p
    }

    fn noise_free(mut p: ModelParams) -> ModelParams {
        for m in [
            &mut p.leader_dyn.state_noise,
            &mut p.leader_dyn.coupling_noise,
            &mut p.leader_dyn.control_noise,
            &mut p.follower_dyn.state_noise,
            &mut p.follower_dyn.coupling_noise,
            &mut p.follower_dyn.leader_noise,
            &mut p.follower_dyn.control_noise,
            &mut p.init.leader_cov,
            &mut p.init.follower_cov,
        ] {
            m.fill(0.0);
        }
        p
    }

    #[test]
    fn estimate_and_trapezoid() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.se - libm::sqrt(5.0 / 3.0 / 4.0)).abs() < 1e-15);
        assert_eq!(Estimate::from_samples(&[7.0]), Estimate { mean: 7.0, se: 0.0 });
        let t = [0.0, 0.5, 1.5, 2.0];
        let v: Vec<f64> = t.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((trapezoid(&t, &v) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_costs() {
        let mut p = synthetic_model(2, Dimensions { n0: 1, n: 2, m0: 1, m: 1 });
        p.grid_steps = 100;
        for m in [
            &mut p.leader_cost.state_weight,
            &mut p.leader_cost.terminal_weight,
            &mut p.follower_cost.state_weight,
            &mut p.follower_cost.terminal_weight,
        ] {
            m.fill(0.0);
        }
        let cfg = SimConfig::new(3, 4, 100, 1);
        for mode in [Mode::Feedback, Mode::OpenLoop] {
            let eq = Equilibrium::solve(&p, mode).unwrap();
            let ens = eq.simulate(&p, &cfg, &SequentialRunner).unwrap();
            let r = eq.report(&p, &ens).unwrap();
            assert_eq!(r.leader, Estimate::default());
            assert_eq!(r.social, Estimate::default());
            assert!(r.closed_form_leader.unwrap().abs() < 1e-14);
            assert!(r.closed_form_social.unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn constant_leader_state_has_exact_cost() {
        let mut p = ModelParams::zeros(Dimensions { n0: 1, n: 1, m0: 1, m: 1 });
        p.grid_steps = 100;
        p.horizon = 2.0;
        p.leader_cost.state_weight[(0, 0)] = 1.0;
        p.leader_cost.terminal_weight[(0, 0)] = 3.0;
        p.init.leader_mean[0] = 1.5;
        let eq = Equilibrium::solve(&p, Mode::Feedback).unwrap();
        let ens = eq.simulate(&p, &SimConfig::new(2, 3, 50, 4), &SequentialRunner).unwrap();
        let r = empirical_costs(&ens);
        assert!((r.leader.mean - (2.25 * 2.0 + 3.0 * 2.25)).abs() < 1e-12);
        assert_eq!(r.leader.se, 0.0);
    }

    /// Monte-Carlo expectation of the quadratic value over the initial laws.
    #[test]
    fn feedback_closed_form_matches_sampled_initial_states() {
        let p = small_table1();
        let fb = solve_feedback_joint(&p).unwrap();
        let cf = closed_form_feedback_costs(&p, &fb);
        let (m, mb, lb, l0) = (fb.m.first(), fb.m_bar.first(), fb.lambda_bar.first(), fb.lambda0.first());
        let (t1, t2, t3) = (fb.theta1.first(), fb.theta2.first(), fb.theta3.first());
        let init = &p.init;
        let (s0, s) = (libm::sqrt(init.leader_cov[(0, 0)]), libm::sqrt(init.follower_cov[(0, 0)]));
        let xb = init.follower_mean[0];
        let mut r0 = NormalStream::new(77, 0, 0, false);
        let mut r1 = NormalStream::new(77, 0, 1, false);
        let samples = 1_000_000;
        let (mut soc, mut lead) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
        for _ in 0..samples {
            let x0 = init.leader_mean[0] + s0 * r0.next();
            let x = xb + s * r1.next();
            soc.push(m[(0, 0)] * x * x + mb[(0, 0)] * xb * xb + 2.0 * lb[(0, 0)] * x0 * x + l0[(0, 0)] * x0 * x0);
            lead.push(t1[(0, 0)] * x0 * x0 + t2[(0, 0)] * xb * xb + 2.0 * t3[(0, 0)] * xb * x0);
        }
        let (es, el) = (Estimate::from_samples(&soc), Estimate::from_samples(&lead));
        assert!((es.mean - cf.social).abs() < 4.0 * es.se, "{es:?} vs {}", cf.social);
        assert!((el.mean - cf.leader).abs() < 4.0 * el.se, "{el:?} vs {}", cf.leader);
        assert!((es.mean - cf.social).abs() < 1e-3 * cf.social.abs());
        assert!((el.mean - cf.leader).abs() < 1e-3 * cf.leader.abs());
    }

    #[test]
    fn deterministic_initials_reduce_to_quadratic_forms_at_the_means() {
        let mut p = small_table1();
        p.init.leader_cov.fill(0.0);
        p.init.follower_cov.fill(0.0);
        let fb = solve_feedback_joint(&p).unwrap();
        let cf = closed_form_feedback_costs(&p, &fb);
        let (x0, x) = (p.init.leader_mean[0], p.init.follower_mean[0]);
        let v = |f: &TimeGridFn| f.first()[(0, 0)];
        let soc = v(&fb.m) * x * x + v(&fb.m_bar) * x * x + 2.0 * v(&fb.lambda_bar) * x0 * x + v(&fb.lambda0) * x0 * x0;
        assert!((cf.social - soc).abs() < 1e-12 * soc.abs());
    }

    #[test]
    fn social_cost_is_mean_of_individual_costs() {
        let mut p = synthetic_model(4, Dimensions { n0: 2, n: 2, m0: 1, m: 2 });
        p.grid_steps = 100;
        let mut cfg = SimConfig::new(5, 3, 100, 8);
        cfg.keep_followers = true;
        for mode in [Mode::Feedback, Mode::OpenLoop] {
            let eq = Equilibrium::solve(&p, mode).unwrap();
            let ens = eq.simulate(&p, &cfg, &SequentialRunner).unwrap();
            let each = follower_costs(&ens).unwrap();
            let pc = path_costs(&ens);
            for (ji, soc) in each.iter().zip(&pc.social) {
                let mean = ji.iter().sum::<f64>() / ji.len() as f64;
                assert!((mean - soc).abs() <= 1e-10 * soc.abs());
            }
        }
    }

    #[test]
    fn s_t_needs_an_ensemble_only_when_the_leader_reaches_the_followers() {
        let p = small_table1();
        let fol = solve_follower_system(&p).unwrap();
        let stk = solve_leader_stacked(&p, &fol).unwrap();
        assert_eq!(closed_form_openloop_costs(&p, &fol, &stk, None), Err(CostError::NeedEnsemble));
        let mut q = p.clone();
        q.leader_dyn.control_drift.fill(0.0);
        q.leader_dyn.control_noise.fill(0.0);
        let fol = solve_follower_system(&q).unwrap();
        let stk = solve_leader_stacked(&q, &fol).unwrap();
        let c = closed_form_openloop_costs(&q, &fol, &stk, None).unwrap();
        assert_eq!(c.s_t, Estimate::default());
        // with the leader control switched off φ vanishes, so the simulated integrand does too
        let eq = Equilibrium::OpenLoop { policy: build_openloop_policy(&q, &fol, &stk).unwrap(), follower: fol, stacked: stk };
        let ens = eq.simulate(&q, &SimConfig::new(1, 4, 100, 3), &SequentialRunner).unwrap();
        let Equilibrium::OpenLoop { follower, .. } = &eq else { unreachable!() };
        let (est, _) = s_t_estimates(&q, follower, StackedIndex { n0: 1, n: 1 }, &ens).unwrap();
        assert!(est.mean.abs() < 1e-12);
    }

    #[test]
    fn s_t_standard_error_halves_with_four_times_the_paths() {
        let p = small_table1();
        let eq = Equilibrium::solve(&p, Mode::OpenLoop).unwrap();
        let Equilibrium::OpenLoop { follower, stacked, .. } = &eq else { unreachable!() };
        let se = |paths: usize| {
            let ens = eq.simulate(&p, &SimConfig::new(1, paths, 200, 11), &SequentialRunner).unwrap();
            closed_form_openloop_costs(&p, follower, stacked, Some(&ens)).unwrap().s_t.se
        };
        let ratio = se(100) / se(400);
        assert!((1.6..=2.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn report_rejects_the_other_mode() {
        let p = small_table1();
        let fb = Equilibrium::solve(&p, Mode::Feedback).unwrap();
        let ol = Equilibrium::solve(&p, Mode::OpenLoop).unwrap();
        let ens = fb.simulate(&p, &SimConfig::new(2, 2, 100, 1), &SequentialRunner).unwrap();
        assert!(matches!(ol.report(&p, &ens), Err(CostError::ModeMismatch { .. })));
        let Equilibrium::OpenLoop { follower, stacked, .. } = &ol else { unreachable!() };
        assert!(matches!(
            closed_form_openloop_costs(&p, follower, stacked, Some(&ens)),
            Err(CostError::ModeMismatch { .. })
        ));
        assert!(meanfield_gap(&ens).unwrap().leader.is_none());
    }

    /// Uncoupled, uncontrolled scalar followers are i.i.d., so N·E|x^(N) − x̄|²
    /// equals the variance of one Euler chain: E[x²] grows by (1 + a dt)² + c² dt per step.
    #[test]
    fn gap_of_independent_followers_is_variance_over_n() {
        let mut p = ModelParams::zeros(Dimensions { n0: 1, n: 1, m0: 1, m: 1 });
        p.grid_steps = 100;
        let (a, c) = (-0.5, 0.6);
        p.follower_dyn.state_drift[(0, 0)] = a;
        p.follower_dyn.state_noise[(0, 0)] = c;
        p.init.follower_mean[0] = 1.0;
        p.init.follower_cov[(0, 0)] = 0.25;
        let eq = Equilibrium::solve(&p, Mode::Feedback).unwrap();
        let n = 8;
        let cfg = SimConfig::new(n, 4000, 100, 5);
        let gap = meanfield_gap(&eq.simulate(&p, &cfg, &SequentialRunner).unwrap()).unwrap();
        let dt = p.horizon / 100.0;
        let (mut m1, mut m2) = (1.0, 1.25);
        for k in 0..=100 {
            if k % 10 == 0 {
                let var = m2 - m1 * m1;
                let est = gap.mean_field[k / 10];
                assert!((est.mean * n as f64 - var).abs() < 4.0 * est.se * n as f64, "k {k}: {est:?} vs {var}");
            }
            m1 *= 1.0 + a * dt;
            m2 *= (1.0 + a * dt) * (1.0 + a * dt) + c * c * dt;
        }
    }

    #[test]
    fn convergence_study_preconditions_and_noise_free_gaps() {
        let p = noise_free(small_table1());
        let cfg = SimConfig::new(1, 2, 100, 3);
        assert_eq!(
            convergence_study(&p, &[5, 10], &cfg, Mode::Feedback, None, &SequentialRunner),
            Err(CostError::TooFewPopulations(2))
        );
        for mode in [Mode::Feedback, Mode::OpenLoop] {
            let t = convergence_study(&p, &[2, 4, 8], &cfg, mode, None, &SequentialRunner).unwrap();
            assert!(t.rows.iter().all(|r| r.gap < 1e-24), "{mode:?}");
            assert!(t.gap_slope.is_none());
        }
    }

    #[test]
    fn trivial_probe_families_find_nothing() {
        let p = small_table1();
        let cfg = SimConfig::new(4, 6, 100, 2);
        let zero = ProbeFamily { directions: 3, magnitudes: vec![0.0], seed: 1 };
        for mode in [Mode::Feedback, Mode::OpenLoop] {
            let eq = Equilibrium::solve(&p, mode).unwrap();
            for probe in [epsilon_probe_follower, epsilon_probe_leader] {
                let empty = probe(&p, &eq, &cfg, &ProbeFamily::empty(), &SequentialRunner).unwrap();
                assert_eq!(empty.epsilon, Estimate::default());
                assert!(empty.best.is_none());
                let same = probe(&p, &eq, &cfg, &zero, &SequentialRunner).unwrap();
                assert_eq!(same.epsilon, Estimate::default());
                assert!(same.probes.iter().all(|e| *e == same.base));
            }
        }
    }

    #[test]
    fn probe_profiles_are_smooth_and_normalized() {
        let f = ProbeFamily::default();
        assert_eq!(f.len(), 36);
        let g = f.profile(4, 1, 0.5, 2, 3, 1.0, 50);
        let e = f.profile(4, 1, 1.0, 2, 3, 1.0, 50);
        for k in 0..=50 {
            assert!((g.value(k) * 2.0 - e.value(k)).amax() < 1e-15);
            assert!(e.value(k).amax() <= 3.0 + 1e-12);
        }
        for k in 0..50 {
            assert!((e.value(k + 1) - e.value(k)).amax() < 0.2);
        }
        assert_ne!(f.profile(5, 1, 1.0, 2, 3, 1.0, 50), e);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn costs_are_nonnegative_for_psd_weights(seed in 0u64..10_000, shift in -2.0f64..2.0) {
            let mut p = synthetic_model(seed, Dimensions { n0: 1, n: 2, m0: 1, m: 1 });
            p.grid_steps = 50;
            p.follower_cost.mf_tracking.fill(shift);
            p.leader_cost.tracking.fill(-shift);
            let cfg = SimConfig::new(3, 2, 50, seed);
            for mode in [Mode::Feedback, Mode::OpenLoop] {
                let Ok(eq) = Equilibrium::solve(&p, mode) else { continue };
                let ens = eq.simulate(&p, &cfg, &SequentialRunner).unwrap();
                let pc = path_costs(&ens);
                prop_assert!(pc.leader.iter().chain(&pc.social).all(|&c| c >= 0.0));
            }
        }
    }
}
