//! Feedback pipeline: the population Riccati system for finite N and its limit,
//! coupled with the leader's Riccati system.
//!
//! Per-capita social value of the follower team with leader feedback
//! `u0 = P0 x0 + P̄ x^(N)`:
//!
//! ```text
//! V = (1/N) Σ xiᵀ M xi + x^(N)ᵀ M̄ x^(N) + 2 x^(N)ᵀ M⁰ x0 + x0ᵀ Λ⁰ x0
//! ```
//!
//! with `Λ̄ = M⁰ᵀ` carried as its own block. The limit system drops the `1/N`
//! terms. The leader's value on `(x0, x̄)` is
//! `x0ᵀΘ1x0 + x̄ᵀΘ2x̄ + 2 x̄ᵀΘ3x0` with `Θ3` of shape n×n0.

use alloc::format;
use alloc::vec::Vec;

use crate::error::SolveError;
use crate::model::{validate, weight_aggregates, ModelParams, WeightAggregates};
use crate::numerics::{
    integrate_backward, min_eigenvalue, staggered_residual, BlockLayout, TimeGridFn,
};
use crate::Mat;

/// Smallest admissible eigenvalue of Υ and Υ0.
pub const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSolution {
    pub m: TimeGridFn,
    pub m_bar: TimeGridFn,
    pub m0: TimeGridFn,
    pub lambda0: TimeGridFn,
    pub lambda_bar: TimeGridFn,
    pub theta1: TimeGridFn,
    pub theta2: TimeGridFn,
    /// n×n0
    pub theta3: TimeGridFn,
    /// Υ = R + DᵀMD
    pub upsilon: TimeGridFn,
    /// Ψ = BᵀM + DᵀMC
    pub psi: TimeGridFn,
    /// Ψ̄ = BᵀM̄ + DᵀMḠ
    pub psi_bar: TimeGridFn,
    /// Ψ⁰ = BᵀM⁰ + DᵀMF̄
    pub psi0: TimeGridFn,
    /// Υ0 = R0 + D0ᵀΘ1D0
    pub upsilon0: TimeGridFn,
    /// Ψ4 = B0ᵀΘ1 + D0ᵀΘ1C0
    pub psi4: TimeGridFn,
    /// Ψ5 = B0ᵀΘ3ᵀ + D0ᵀΘ1Ḡ0
    pub psi5: TimeGridFn,
    /// P0 = −Υ0⁻¹Ψ4, acts on x0
    pub leader_state_gain: TimeGridFn,
    /// P̄ = −Υ0⁻¹Ψ5, acts on x̄
    pub leader_mf_gain: TimeGridFn,
    /// −Υ⁻¹Ψ
    pub gain_own: TimeGridFn,
    /// −Υ⁻¹Ψ̄
    pub gain_mf: TimeGridFn,
    /// −Υ⁻¹Ψ⁰
    pub gain_leader: TimeGridFn,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNFeedbackSolution {
    pub population: usize,
    pub m: TimeGridFn,
    pub m_bar: TimeGridFn,
    pub m0: TimeGridFn,
    pub lambda0: TimeGridFn,
    pub lambda_bar: TimeGridFn,
    /// M̌ = M + M̄/N
    pub m_check: TimeGridFn,
    /// Υ_N = R + DᵀM̌D
    pub upsilon: TimeGridFn,
    pub gain_own: TimeGridFn,
    pub gain_mf: TimeGridFn,
    pub gain_leader: TimeGridFn,
    pub residual: f64,
}

/// Leader feedback gains on the solver grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderGains {
    pub state: TimeGridFn,
    pub mean_field: TimeGridFn,
}

/// Quantities of the population system at one instant.
#[derive(Debug, Clone)]
pub(crate) struct PopulationCoeffs {
    pub m_check: Mat,
    pub upsilon: Mat,
    pub ups_inv: Mat,
    pub psi: Mat,
    pub psi_bar: Mat,
    pub psi0: Mat,
}

impl PopulationCoeffs {
    /// Â = A + G − BΥ⁻¹(Ψ + Ψ̄)
    pub fn a_hat(&self, params: &ModelParams) -> Mat {
        let fd = &params.follower_dyn;
        &fd.state_drift + &fd.coupling_drift
            - &fd.control_drift * &self.ups_inv * (&self.psi + &self.psi_bar)
    }

    /// F̂ = F − BΥ⁻¹Ψ⁰
    pub fn f_hat(&self, params: &ModelParams) -> Mat {
        let fd = &params.follower_dyn;
        &fd.leader_drift - &fd.control_drift * &self.ups_inv * &self.psi0
    }
}

fn checked_inverse(m: &Mat, which: &'static str, time: f64) -> Result<Mat, SolveError> {
    let min_eig = min_eigenvalue(m);
    if !(min_eig >= SINGULAR_TOL) {
        return Err(SolveError::Singular { which, time, min_eig });
    }
    if m.nrows() == 1 {
        return Ok(Mat::from_element(1, 1, 1.0 / m[(0, 0)]));
    }
    m.clone().try_inverse().ok_or(SolveError::Singular { which, time, min_eig })
}

pub(crate) struct FeedbackData<'a> {
    pub params: &'a ModelParams,
    pub agg: WeightAggregates,
    /// Γ1ᵀQΓ1
    pub leader_weight: Mat,
    /// Γ̂1ᵀHΓ̂1
    pub leader_terminal: Mat,
    /// (Γ − I)ᵀQΓ1
    pub cross_weight: Mat,
    pub population: BlockLayout,
    pub leader: BlockLayout,
}

/// The five population blocks at one instant.
pub(crate) struct PopulationState {
    pub m: Mat,
    pub m_bar: Mat,
    pub m0: Mat,
    pub lambda0: Mat,
    pub lambda_bar: Mat,
}

impl<'a> FeedbackData<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let fc = &params.follower_cost;
        let d = params.dims;
        let agg = weight_aggregates(fc);
        FeedbackData {
            params,
            leader_weight: fc.leader_tracking.transpose() * &fc.state_weight * &fc.leader_tracking,
            leader_terminal: fc.terminal_leader_tracking.transpose()
                * &fc.terminal_weight
                * &fc.terminal_leader_tracking,
            cross_weight: -&agg.q_gamma1,
            agg,
            population: BlockLayout::new(&[(d.n, d.n), (d.n, d.n), (d.n, d.n0), (d.n0, d.n0), (d.n0, d.n)]),
            leader: BlockLayout::new(&[(d.n0, d.n0), (d.n, d.n), (d.n, d.n0)]),
        }
    }

    pub fn population_terminal(&self) -> Mat {
        let h = &self.params.follower_cost.terminal_weight;
        let m_bar = -&self.agg.h_gamma;
        let m0 = -&self.agg.h_gamma1;
        let lambda_bar = -self.agg.h_gamma1.transpose();
        self.population.pack(&[h, &m_bar, &m0, &self.leader_terminal, &lambda_bar])
    }

    pub fn leader_terminal_state(&self) -> Mat {
        let lc = &self.params.leader_cost;
        let h0 = &lc.terminal_weight;
        let gh = &lc.terminal_tracking;
        let t2 = gh.transpose() * h0 * gh;
        let t3 = -(gh.transpose() * h0);
        self.leader.pack(&[h0, &t2, &t3])
    }

    pub fn unpack_population(&self, y: &Mat) -> PopulationState {
        let [m, m_bar, m0, lambda0, lambda_bar]: [Mat; 5] =
            self.population.unpack(y).try_into().expect("five population blocks");
        PopulationState { m, m_bar, m0, lambda0, lambda_bar }
    }

    pub fn coeffs(&self, s: &PopulationState, inv_n: f64, time: f64) -> Result<PopulationCoeffs, SolveError> {
        let fd = &self.params.follower_dyn;
        let b = &fd.control_drift;
        let d = &fd.control_noise;
        let m_check = &s.m + &s.m_bar * inv_n;
        let dtm = d.transpose() * &m_check;
        let upsilon = &self.params.follower_cost.control_weight + &dtm * d;
        let ups_inv = checked_inverse(&upsilon, "follower control weight Υ", time)?;
        let psi = b.transpose() * &s.m + &dtm * &fd.state_noise;
        let psi_bar = b.transpose() * &s.m_bar + &dtm * &fd.coupling_noise;
        let psi0 = b.transpose() * &s.m0 + &dtm * &fd.leader_noise;
        Ok(PopulationCoeffs { m_check, upsilon, ups_inv, psi, psi_bar, psi0 })
    }

    /// Forward-time derivatives of the population blocks for leader gains
    /// `(p0, p_bar)`; the population size enters only through `c.m_check`.
    pub fn population_rhs(
        &self,
        s: &PopulationState,
        c: &PopulationCoeffs,
        p0: &Mat,
        p_bar: &Mat,
    ) -> Mat {
        let prm = self.params;
        let ld = &prm.leader_dyn;
        let fd = &prm.follower_dyn;
        let (a, g, f, cc, gb, fb) = (
            &fd.state_drift,
            &fd.coupling_drift,
            &fd.leader_drift,
            &fd.state_noise,
            &fd.coupling_noise,
            &fd.leader_noise,
        );
        let b = &fd.control_drift;
        let d = &fd.control_noise;
        let ag = a + g;
        let cg = cc + gb;
        let mm = &s.m + &s.m_bar;
        let mc = &c.m_check;
        let ui = &c.ups_inv;
        let psi_sum = &c.psi + &c.psi_bar;

        // closed-loop leader coefficients
        let a0h = &ld.state_drift + &ld.control_drift * p0;
        let c0h = &ld.state_noise + &ld.control_noise * p0;
        let g0h = &ld.coupling_drift + &ld.control_drift * p_bar;
        let gb0h = &ld.coupling_noise + &ld.control_noise * p_bar;
        // BᵀΛ̄ᵀ + DᵀM̌F̄, the Λ̄-side twin of Ψ⁰
        let psi0_l = b.transpose() * s.lambda_bar.transpose() + d.transpose() * mc * fb;

        let dm = -(a.transpose() * &s.m + &s.m * a + cc.transpose() * mc * cc
            + &prm.follower_cost.state_weight
            - c.psi.transpose() * ui * &c.psi);

        let dm_bar = -(ag.transpose() * &s.m_bar + &s.m_bar * &ag + g.transpose() * &s.m + &s.m * g
            + cc.transpose() * mc * gb
            + gb.transpose() * mc * cc
            + gb.transpose() * mc * gb
            - c.psi.transpose() * ui * &c.psi_bar
            - c.psi_bar.transpose() * ui * &c.psi
            - c.psi_bar.transpose() * ui * &c.psi_bar
            + gb0h.transpose() * &s.lambda0 * &gb0h
            + g0h.transpose() * &s.lambda_bar
            + &s.m0 * &g0h
            - &self.agg.q_gamma);

        let dm0 = -(ag.transpose() * &s.m0 + &s.m0 * &a0h + &mm * f + g0h.transpose() * &s.lambda0
            - psi_sum.transpose() * ui * &c.psi0
            + cg.transpose() * mc * fb
            + gb0h.transpose() * &s.lambda0 * &c0h
            + &self.cross_weight);

        let dl0 = -(&s.lambda0 * &a0h + a0h.transpose() * &s.lambda0 + c0h.transpose() * &s.lambda0 * &c0h
            - psi0_l.transpose() * ui * &c.psi0
            + &s.lambda_bar * f
            + f.transpose() * &s.m0
            + fb.transpose() * mc * fb
            + &self.leader_weight);

        let dlb = -(&s.lambda_bar * &ag + a0h.transpose() * &s.lambda_bar + f.transpose() * &mm
            + &s.lambda0 * &g0h
            - psi0_l.transpose() * ui * &psi_sum
            + fb.transpose() * mc * &cg
            + c0h.transpose() * &s.lambda0 * &gb0h
            + self.cross_weight.transpose());

        self.population.pack(&[&dm, &dm_bar, &dm0, &dl0, &dlb])
    }

    /// `(Υ0, Υ0⁻¹, Ψ4, Ψ5)` for the leader blocks `(Θ1, Θ3)`.
    pub fn leader_coeffs(&self, t1: &Mat, t3: &Mat, time: f64) -> Result<(Mat, Mat, Mat, Mat), SolveError> {
        let ld = &self.params.leader_dyn;
        let d0t = ld.control_noise.transpose() * t1;
        let ups0 = &self.params.leader_cost.control_weight + &d0t * &ld.control_noise;
        let inv = checked_inverse(&ups0, "leader control weight Υ0", time)?;
        let psi4 = ld.control_drift.transpose() * t1 + &d0t * &ld.state_noise;
        let psi5 = ld.control_drift.transpose() * t3.transpose() + &d0t * &ld.coupling_noise;
        Ok((ups0, inv, psi4, psi5))
    }

    /// Forward-time derivatives of `(Θ1, Θ2, Θ3)` given the follower closed loop.
    #[allow(clippy::too_many_arguments)]
    pub fn leader_rhs(
        &self,
        t1: &Mat,
        t2: &Mat,
        t3: &Mat,
        inv0: &Mat,
        psi4: &Mat,
        psi5: &Mat,
        a_hat: &Mat,
        f_hat: &Mat,
    ) -> Mat {
        let ld = &self.params.leader_dyn;
        let lc = &self.params.leader_cost;
        let (a0, g0, c0, gb0) = (&ld.state_drift, &ld.coupling_drift, &ld.state_noise, &ld.coupling_noise);
        let (q0, gam0) = (&lc.state_weight, &lc.tracking);
        let dt1 = -(a0.transpose() * t1 + t1 * a0 + c0.transpose() * t1 * c0
            - psi4.transpose() * inv0 * psi4
            + f_hat.transpose() * t3
            + t3.transpose() * f_hat
            + q0);
        let dt2 = -(a_hat.transpose() * t2 + t2 * a_hat - psi5.transpose() * inv0 * psi5
            + gam0.transpose() * q0 * gam0
            + gb0.transpose() * t1 * gb0
            + t3 * g0
            + g0.transpose() * t3.transpose());
        let dt3 = -(a_hat.transpose() * t3 + t3 * a0 - psi5.transpose() * inv0 * psi4 + t2 * f_hat
            - gam0.transpose() * q0
            + g0.transpose() * t1
            + gb0.transpose() * t1 * c0);
        self.leader.pack(&[&dt1, &dt2, &dt3])
    }
}

fn check_sign_conditions(params: &ModelParams) -> Result<(), SolveError> {
    let v = validate(params);
    if !v.is_empty() {
        return Err(SolveError::Invalid(v));
    }
    let tol = 1e-12;
    let fc = &params.follower_cost;
    let lc = &params.leader_cost;
    let checks: [(&str, &Mat, bool); 6] = [
        ("Q", &fc.state_weight, false),
        ("H", &fc.terminal_weight, false),
        ("R", &fc.control_weight, true),
        ("Q0", &lc.state_weight, false),
        ("H0", &lc.terminal_weight, false),
        ("R0", &lc.control_weight, true),
    ];
    for (name, m, strict) in checks {
        let e = min_eigenvalue(m);
        let ok = if strict { e > tol } else { e >= -tol };
        if !ok {
            let kind = if strict { "positive definite" } else { "positive semidefinite" };
            return Err(SolveError::SignCondition(format!("{name} must be {kind} (smallest eigenvalue {e:e})")));
        }
    }
    Ok(())
}

/// Integrates the limit population system and the leader system as one joint
/// backward ODE; each stage forms the leader gains from its own Θ-blocks and the
/// follower closed loop from its own M-blocks.
pub fn solve_feedback_joint(params: &ModelParams) -> Result<FeedbackSolution, SolveError> {
    check_sign_conditions(params)?;
    let data = FeedbackData::new(params);
    let pl = data.population.len();
    let ll = data.leader.len();

    let rhs = |t: f64, y: &Mat| -> Result<Mat, SolveError> {
        let ys = y.as_slice();
        let pop = data.unpack_population(&Mat::from_column_slice(pl, 1, &ys[..pl]));
        let lead = data.leader.unpack(&Mat::from_column_slice(ll, 1, &ys[pl..]));
        let (t1, t2, t3) = (&lead[0], &lead[1], &lead[2]);
        let (_, inv0, psi4, psi5) = data.leader_coeffs(t1, t3, t)?;
        let p0 = -(&inv0 * &psi4);
        let p_bar = -(&inv0 * &psi5);
        let c = data.coeffs(&pop, 0.0, t)?;
        let dpop = data.population_rhs(&pop, &c, &p0, &p_bar);
        let dlead = data.leader_rhs(t1, t2, t3, &inv0, &psi4, &psi5, &c.a_hat(params), &c.f_hat(params));
        let mut out = Mat::zeros(pl + ll, 1);
        out.as_mut_slice()[..pl].copy_from_slice(dpop.as_slice());
        out.as_mut_slice()[pl..].copy_from_slice(dlead.as_slice());
        Ok(out)
    };

    let mut terminal = Mat::zeros(pl + ll, 1);
    terminal.as_mut_slice()[..pl].copy_from_slice(data.population_terminal().as_slice());
    terminal.as_mut_slice()[pl..].copy_from_slice(data.leader_terminal_state().as_slice());
    let joint = integrate_backward(rhs, &terminal, params.horizon, params.grid_steps)?;
    let residual = staggered_residual(rhs, &joint)?;

    let pop_fn = joint.map(|v| Mat::from_column_slice(pl, 1, &v.as_slice()[..pl]));
    let lead_fn = joint.map(|v| Mat::from_column_slice(ll, 1, &v.as_slice()[pl..]));
    let m = data.population.split(&pop_fn, 0);
    let m_bar = data.population.split(&pop_fn, 1);
    let m0 = data.population.split(&pop_fn, 2);
    let lambda0 = data.population.split(&pop_fn, 3);
    let lambda_bar = data.population.split(&pop_fn, 4);
    let theta1 = data.leader.split(&lead_fn, 0);
    let theta2 = data.leader.split(&lead_fn, 1);
    let theta3 = data.leader.split(&lead_fn, 2);

    let steps = joint.steps();
    let mut cols: [Vec<Mat>; 12] = Default::default();
    for i in 0..=steps {
        let t = joint.time(i);
        let pop = data.unpack_population(pop_fn.value(i));
        let c = data.coeffs(&pop, 0.0, t)?;
        let (ups0, inv0, psi4, psi5) = data.leader_coeffs(theta1.value(i), theta3.value(i), t)?;
        let row = [
            -(&c.ups_inv * &c.psi),
            -(&c.ups_inv * &c.psi_bar),
            -(&c.ups_inv * &c.psi0),
            -(&inv0 * &psi4),
            -(&inv0 * &psi5),
            c.upsilon,
            c.psi,
            c.psi_bar,
            c.psi0,
            ups0,
            psi4,
            psi5,
        ];
        for (col, v) in cols.iter_mut().zip(row) {
            col.push(v);
        }
    }
    let h = params.horizon;
    let [g_own, g_mf, g_lead, lp0, lpb, ups, psi, psi_bar, psi0, ups0, psi4, psi5] =
        cols.map(|v| TimeGridFn::new(h, v));
    Ok(FeedbackSolution {
        m,
        m_bar,
        m0,
        lambda0,
        lambda_bar,
        theta1,
        theta2,
        theta3,
        upsilon: ups?,
        psi: psi?,
        psi_bar: psi_bar?,
        psi0: psi0?,
        upsilon0: ups0?,
        psi4: psi4?,
        psi5: psi5?,
        leader_state_gain: lp0?,
        leader_mf_gain: lpb?,
        gain_own: g_own?,
        gain_mf: g_mf?,
        gain_leader: g_lead?,
        residual,
    })
}

impl FeedbackSolution {
    pub fn leader_gains(&self) -> LeaderGains {
        LeaderGains { state: self.leader_state_gain.clone(), mean_field: self.leader_mf_gain.clone() }
    }
}

/// Population system for `N` followers under frozen leader gains. Gains are
/// read at RK4 half steps by linear interpolation.
pub fn solve_finite_n(
    params: &ModelParams,
    population: usize,
    gains: &LeaderGains,
) -> Result<FiniteNFeedbackSolution, SolveError> {
    if population == 0 {
        return Err(SolveError::BadPopulation);
    }
    let v = validate(params);
    if !v.is_empty() {
        return Err(SolveError::Invalid(v));
    }
    if gains.state.steps() != params.grid_steps
        || gains.state.horizon() != params.horizon
        || !gains.state.same_grid(&gains.mean_field)
    {
        return Err(SolveError::GridMismatch);
    }
    solve_population(params, 1.0 / population as f64, gains).map(|(sol, residual)| {
        let inv_n = 1.0 / population as f64;
        let (m, m_bar, m0, lambda0, lambda_bar, upsilon, gain_own, gain_mf, gain_leader) = sol;
        let m_check = TimeGridFn::new(
            params.horizon,
            m.values().iter().zip(m_bar.values()).map(|(a, b)| a + b * inv_n).collect(),
        )
        .expect("grid already validated");
        FiniteNFeedbackSolution {
            population,
            m,
            m_bar,
            m0,
            lambda0,
            lambda_bar,
            m_check,
            upsilon,
            gain_own,
            gain_mf,
            gain_leader,
            residual,
        }
    })
}

/// Limit follower gains responding to arbitrary leader gains (`N → ∞`).
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerResponse {
    pub gain_own: TimeGridFn,
    pub gain_mf: TimeGridFn,
    pub gain_leader: TimeGridFn,
    pub residual: f64,
}

pub fn solve_follower_response(params: &ModelParams, gains: &LeaderGains) -> Result<FollowerResponse, SolveError> {
    check_sign_conditions(params)?;
    if gains.state.steps() != params.grid_steps
        || gains.state.horizon() != params.horizon
        || !gains.state.same_grid(&gains.mean_field)
    {
        return Err(SolveError::GridMismatch);
    }
    let ((.., gain_own, gain_mf, gain_leader), residual) = solve_population(params, 0.0, gains)?;
    Ok(FollowerResponse { gain_own, gain_mf, gain_leader, residual })
}

type PopulationFns = (
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
    TimeGridFn,
);

fn solve_population(
    params: &ModelParams,
    inv_n: f64,
    gains: &LeaderGains,
) -> Result<(PopulationFns, f64), SolveError> {
    let data = FeedbackData::new(params);
    let rhs = |t: f64, y: &Mat| -> Result<Mat, SolveError> {
        let s = data.unpack_population(y);
        let p0 = gains.state.at(t)?;
        let pb = gains.mean_field.at(t)?;
        let c = data.coeffs(&s, inv_n, t)?;
        Ok(data.population_rhs(&s, &c, &p0, &pb))
    };
    let sol = integrate_backward(rhs, &data.population_terminal(), params.horizon, params.grid_steps)?;
    let residual = staggered_residual(rhs, &sol)?;
    let lay = &data.population;
    let mut ups = Vec::new();
    let mut g = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..=sol.steps() {
        let s = data.unpack_population(sol.value(i));
        let c = data.coeffs(&s, inv_n, sol.time(i))?;
        g[0].push(-(&c.ups_inv * &c.psi));
        g[1].push(-(&c.ups_inv * &c.psi_bar));
        g[2].push(-(&c.ups_inv * &c.psi0));
        ups.push(c.upsilon);
    }
    let h = params.horizon;
    let [g0, g1, g2] = g.map(|v| TimeGridFn::new(h, v));
    Ok((
        (
            lay.split(&sol, 0),
            lay.split(&sol, 1),
            lay.split(&sol, 2),
            lay.split(&sol, 3),
            lay.split(&sol, 4),
            TimeGridFn::new(h, ups)?,
            g0?,
            g1?,
            g2?,
        ),
        residual,
    ))
}
