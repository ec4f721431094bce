//! Open-loop pipeline: follower Riccati system, stacked leader system and its
//! nonsymmetric Riccati equation.
//!
//! Follower blocks (all integrated as one joint state):
//!
//! ```text
//! K  : n0×n0  quadratic weight of the leader state in the follower costate
//! K̄  : n0×n   cross weight, K̄ᵀ = P0
//! P  : n×n    own-state weight
//! P̄  : n×n    mean-field weight
//! P0 : n×n0   leader-state weight
//! ```
//!
//! Stacked leader state `X = [x0; x̄; ψ0; ψ]` and costate `Y = [y0; ȳ; φ0; φ]` with
//! `Y = 𝒫X`. The leader's control enters the forward block through `ℬ_x = [B0; 0; 0; 0]`
//! and the follower offset equations through `ℬ_φ = [0; 0; b0; b]`, with
//! `b0 = C0ᵀKD0 + KB0` and `b = P0B0 + Ḡ0ᵀKD0`.

use alloc::vec::Vec;

use crate::error::SolveError;
use crate::model::{validate, weight_aggregates, ModelParams, WeightAggregates};
use crate::numerics::{
    integrate_backward, is_psd, pinv, range_subset, staggered_residual, BlockLayout, TimeGridFn,
    RANK_TOL,
};
use crate::Mat;

/// Tolerance of the per-grid-point range and definiteness checks on Υ.
pub const ASSUMPTION_TOL: f64 = 1e-9;

/// Grid indices where the follower convexity surrogate fails. Gains still use Υ†.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssumptionReport {
    /// Υ(t) not positive semidefinite
    pub psd_failures: Vec<usize>,
    /// ℛ(Bᵀ) ∪ ℛ(DᵀP) ⊄ ℛ(Υ)
    pub range_failures: Vec<usize>,
    /// smallest eigenvalue of Υ over the grid
    pub min_eigenvalue: f64,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        self.psd_failures.is_empty() && self.range_failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopFollowerSolution {
    pub k: TimeGridFn,
    pub k_bar: TimeGridFn,
    pub p: TimeGridFn,
    pub p_bar: TimeGridFn,
    pub p0: TimeGridFn,
    /// Υ = R + DᵀPD
    pub upsilon: TimeGridFn,
    pub upsilon_pinv: TimeGridFn,
    /// Ψ1 = BᵀK̄ᵀ + DᵀPF̄
    pub psi1: TimeGridFn,
    /// Ψ2 = BᵀP + DᵀPC
    pub psi2: TimeGridFn,
    /// Ψ3 = BᵀP̄ + DᵀPḠ
    pub psi3: TimeGridFn,
    pub assumptions: AssumptionReport,
    /// Max-norm defect of the stored solution at the cell midpoints.
    pub residual: f64,
}

/// Structural matrices of the stacked leader system.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub dim: usize,
    /// 𝒜(t): two copies of [[A0, G0], [F̂, Â]] on the diagonal
    pub a: TimeGridFn,
    /// ℬ(t): BΥ†Bᵀ at (x̄, φ), −BΥ†Bᵀ at (ψ, ȳ)
    pub b: TimeGridFn,
    /// ℬ_x: leader control in the forward drift
    pub b_x: Mat,
    /// ℬ_φ(t): leader control in the follower offset drifts
    pub b_phi: TimeGridFn,
    pub c0: Mat,
    pub d0: Mat,
    pub q: Mat,
    pub h0: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedLeaderSolution {
    pub system: StackedSystem,
    /// 𝒫(t), generally nonsymmetric
    pub p: TimeGridFn,
    /// Υ0 = R0 + 𝒟0ᵀ𝒫𝒟0
    pub upsilon0: TimeGridFn,
    /// L0 = −Υ0†(ℬ_xᵀ𝒫 + 𝒟0ᵀ𝒫𝒞0 − ℬ_φᵀ), so that u0 = L0 X
    pub gain: TimeGridFn,
    /// Midpoint defect of the joint (follower + 𝒫) solution.
    pub residual: f64,
}

/// Coefficients derived from the follower blocks at one instant.
#[derive(Debug, Clone)]
pub(crate) struct FollowerCoeffs {
    pub upsilon: Mat,
    pub ups_pinv: Mat,
    pub psi1: Mat,
    pub psi2: Mat,
    pub psi3: Mat,
    /// Â = A + G − BΥ†(Ψ2 + Ψ3)
    pub a_hat: Mat,
    /// F̂ = F − BΥ†Ψ1
    pub f_hat: Mat,
    /// BΥ†Bᵀ
    pub bub: Mat,
}

pub(crate) struct OpenLoopData<'a> {
    pub params: &'a ModelParams,
    pub agg: WeightAggregates,
    /// Γ1ᵀQΓ1
    pub leader_weight: Mat,
    /// Γ̂1ᵀHΓ̂1
    pub leader_terminal: Mat,
    pub layout: BlockLayout,
}

impl<'a> OpenLoopData<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let fc = &params.follower_cost;
        let d = params.dims;
        OpenLoopData {
            params,
            agg: weight_aggregates(fc),
            leader_weight: fc.leader_tracking.transpose() * &fc.state_weight * &fc.leader_tracking,
            leader_terminal: fc.terminal_leader_tracking.transpose()
                * &fc.terminal_weight
                * &fc.terminal_leader_tracking,
            layout: BlockLayout::new(&[(d.n0, d.n0), (d.n0, d.n), (d.n, d.n), (d.n, d.n), (d.n, d.n0)]),
        }
    }

    pub fn terminal(&self) -> Mat {
        let fc = &self.params.follower_cost;
        let k_bar = -self.agg.h_gamma1.transpose();
        let p_bar = -&self.agg.h_gamma;
        let p0 = -&self.agg.h_gamma1;
        self.layout.pack(&[&self.leader_terminal, &k_bar, &fc.terminal_weight, &p_bar, &p0])
    }

    pub fn coeffs(&self, k_bar: &Mat, p: &Mat, p_bar: &Mat) -> Result<FollowerCoeffs, SolveError> {
        let fd = &self.params.follower_dyn;
        let b = &fd.control_drift;
        let d = &fd.control_noise;
        let bt = b.transpose();
        let dtp = d.transpose() * p;
        let upsilon = &self.params.follower_cost.control_weight + &dtp * d;
        let ups_pinv = pinv(&upsilon, RANK_TOL)?;
        let psi1 = &bt * k_bar.transpose() + &dtp * &fd.leader_noise;
        let psi2 = &bt * p + &dtp * &fd.state_noise;
        let psi3 = &bt * p_bar + &dtp * &fd.coupling_noise;
        let bu = b * &ups_pinv;
        let a_hat = &fd.state_drift + &fd.coupling_drift - &bu * (&psi2 + &psi3);
        let f_hat = &fd.leader_drift - &bu * &psi1;
        let bub = &bu * &bt;
        Ok(FollowerCoeffs { upsilon, ups_pinv, psi1, psi2, psi3, a_hat, f_hat, bub })
    }

    /// Forward-time derivative of the packed follower state.
    pub fn rhs(&self, y: &Mat) -> Result<Mat, SolveError> {
        let [k, k_bar, p, p_bar, p0]: [Mat; 5] =
            self.layout.unpack(y).try_into().expect("five follower blocks");
        let c = self.coeffs(&k_bar, &p, &p_bar)?;
        let (dk, dk_bar, dp, dp_bar, dp0) = self.derivatives(&k, &k_bar, &p, &p_bar, &p0, &c);
        Ok(self.layout.pack(&[&dk, &dk_bar, &dp, &dp_bar, &dp0]))
    }

    #[allow(clippy::too_many_arguments)]
    fn derivatives(
        &self,
        k: &Mat,
        k_bar: &Mat,
        p: &Mat,
        p_bar: &Mat,
        p0: &Mat,
        c: &FollowerCoeffs,
    ) -> (Mat, Mat, Mat, Mat, Mat) {
        let m = self.params;
        let ld = &m.leader_dyn;
        let fd = &m.follower_dyn;
        let fc = &m.follower_cost;
        let (a0, g0, c0, gb0) = (&ld.state_drift, &ld.coupling_drift, &ld.state_noise, &ld.coupling_noise);
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
        let ppb = p + p_bar;
        let up = &c.ups_pinv;
        // BᵀP0 + DᵀPF̄, the P0-side twin of Ψ1
        let psi1_p0 = b.transpose() * p0 + d.transpose() * p * fb;
        let psi23 = &c.psi2 + &c.psi3;

        let dk = -(k * a0 + a0.transpose() * k + c0.transpose() * k * c0 + fb.transpose() * p * fb
            - c.psi1.transpose() * up * &psi1_p0
            + k_bar * f
            + f.transpose() * p0
            + &self.leader_weight);

        let dk_bar = -(k_bar * &ag + a0.transpose() * k_bar
            - c.psi1.transpose() * up * (b.transpose() * &ppb + d.transpose() * p * &cg)
            + f.transpose() * &ppb
            + c0.transpose() * k * gb0
            + fb.transpose() * p * &cg
            + k * g0
            - self.agg.q_gamma1.transpose());

        let dp = -(a.transpose() * p + p * a + cc.transpose() * p * cc + &fc.state_weight
            - c.psi2.transpose() * up * &c.psi2);

        let dp_bar = -(ag.transpose() * p_bar + p_bar * &ag + g.transpose() * p + p * g
            + p0 * g0
            + g0.transpose() * k_bar
            + cc.transpose() * p * gb
            + gb.transpose() * p * &cg
            + gb0.transpose() * k * gb0
            - c.psi2.transpose() * up * &c.psi3
            - c.psi3.transpose() * up * &c.psi2
            - c.psi3.transpose() * up * &c.psi3
            - &self.agg.q_gamma);

        let dp0 = -(p0 * a0 + ag.transpose() * p0 + cg.transpose() * p * fb
            - psi23.transpose() * up * &psi1_p0
            + &ppb * f
            + gb0.transpose() * k * c0
            + g0.transpose() * k
            - &self.agg.q_gamma1);

        (dk, dk_bar, dp, dp_bar, dp0)
    }
}

fn check_valid(params: &ModelParams) -> Result<(), SolveError> {
    let v = validate(params);
    if v.is_empty() {
        Ok(())
    } else {
        Err(SolveError::Invalid(v))
    }
}

/// Integrates K, K̄, P, P̄, P0 jointly backward and attaches Υ, Ψ1–Ψ3 and the
/// per-grid-point convexity checks.
pub fn solve_follower_system(params: &ModelParams) -> Result<OpenLoopFollowerSolution, SolveError> {
    check_valid(params)?;
    let data = OpenLoopData::new(params);
    let rhs = |_t: f64, y: &Mat| data.rhs(y);
    let joint = integrate_backward(rhs, &data.terminal(), params.horizon, params.grid_steps)?;
    let residual = staggered_residual(rhs, &joint)?;
    finish_follower(&data, &joint, residual)
}

fn finish_follower(
    data: &OpenLoopData<'_>,
    joint: &TimeGridFn,
    residual: f64,
) -> Result<OpenLoopFollowerSolution, SolveError> {
    let lay = &data.layout;
    let k = lay.split(joint, 0);
    let k_bar = lay.split(joint, 1);
    let p = lay.split(joint, 2);
    let p_bar = lay.split(joint, 3);
    let p0 = lay.split(joint, 4);

    let steps = joint.steps();
    let mut coeffs = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        coeffs.push(data.coeffs(k_bar.value(i), p.value(i), p_bar.value(i))?);
    }
    let horizon = joint.horizon();
    let collect = |f: &dyn Fn(&FollowerCoeffs) -> Mat| {
        TimeGridFn::new(horizon, coeffs.iter().map(f).collect()).map_err(SolveError::from)
    };
    let upsilon = collect(&|c| c.upsilon.clone())?;
    let upsilon_pinv = collect(&|c| c.ups_pinv.clone())?;
    let psi1 = collect(&|c| c.psi1.clone())?;
    let psi2 = collect(&|c| c.psi2.clone())?;
    let psi3 = collect(&|c| c.psi3.clone())?;

    let fd = &data.params.follower_dyn;
    let bt = fd.control_drift.transpose();
    let mut report = AssumptionReport { min_eigenvalue: f64::INFINITY, ..Default::default() };
    for i in 0..=steps {
        let ups = upsilon.value(i);
        let sym = (ups + ups.transpose()) * 0.5;
        report.min_eigenvalue = report.min_eigenvalue.min(crate::numerics::min_eigenvalue(&sym));
        if !is_psd(&sym, ASSUMPTION_TOL)? {
            report.psd_failures.push(i);
        }
        let dtp = fd.control_noise.transpose() * p.value(i);
        if !(range_subset(&bt, ups, ASSUMPTION_TOL) && range_subset(&dtp, ups, ASSUMPTION_TOL)) {
            report.range_failures.push(i);
        }
    }

    Ok(OpenLoopFollowerSolution {
        k,
        k_bar,
        p,
        p_bar,
        p0,
        upsilon,
        upsilon_pinv,
        psi1,
        psi2,
        psi3,
        assumptions: report,
        residual,
    })
}

/// Constant blocks of the stacked system: (ℬ_x, 𝒞0, 𝒟0, 𝒬, ℋ0).
fn constant_blocks(params: &ModelParams) -> (Mat, Mat, Mat, Mat, Mat) {
    let d = params.dims;
    let (n0, n) = (d.n0, d.n);
    let s = d.stacked();
    let ld = &params.leader_dyn;
    let lc = &params.leader_cost;

    let mut b_x = Mat::zeros(s, d.m0);
    b_x.view_mut((0, 0), (n0, d.m0)).copy_from(&ld.control_drift);

    let mut c0 = Mat::zeros(s, s);
    for off in [0, n0 + n] {
        c0.view_mut((off, off), (n0, n0)).copy_from(&ld.state_noise);
        c0.view_mut((off, off + n0), (n0, n)).copy_from(&ld.coupling_noise);
    }

    let mut d0 = Mat::zeros(s, d.m0);
    d0.view_mut((0, 0), (n0, d.m0)).copy_from(&ld.control_noise);

    let q0 = &lc.state_weight;
    let g0 = &lc.tracking;
    let mut q = Mat::zeros(s, s);
    q.view_mut((0, 0), (n0, n0)).copy_from(&(-q0));
    q.view_mut((0, n0), (n0, n)).copy_from(&(q0 * g0));
    q.view_mut((n0, 0), (n, n0)).copy_from(&(g0.transpose() * q0));
    q.view_mut((n0, n0), (n, n)).copy_from(&(-(g0.transpose() * q0 * g0)));

    let h = &lc.terminal_weight;
    let gh = &lc.terminal_tracking;
    let mut h0 = Mat::zeros(s, s);
    h0.view_mut((0, 0), (n0, n0)).copy_from(h);
    h0.view_mut((0, n0), (n0, n)).copy_from(&(-(h * gh)));
    h0.view_mut((n0, 0), (n, n0)).copy_from(&(-(gh.transpose() * h)));
    h0.view_mut((n0, n0), (n, n)).copy_from(&(gh.transpose() * h * gh));

    (b_x, c0, d0, q, h0)
}

/// Time-varying blocks (𝒜, ℬ, ℬ_φ) at one instant.
fn varying_blocks(params: &ModelParams, c: &FollowerCoeffs, k: &Mat, p0: &Mat) -> (Mat, Mat, Mat) {
    let d = params.dims;
    let (n0, n) = (d.n0, d.n);
    let s = d.stacked();
    let ld = &params.leader_dyn;

    let mut a = Mat::zeros(s, s);
    for off in [0, n0 + n] {
        a.view_mut((off, off), (n0, n0)).copy_from(&ld.state_drift);
        a.view_mut((off, off + n0), (n0, n)).copy_from(&ld.coupling_drift);
        a.view_mut((off + n0, off), (n, n0)).copy_from(&c.f_hat);
        a.view_mut((off + n0, off + n0), (n, n)).copy_from(&c.a_hat);
    }

    let mut b = Mat::zeros(s, s);
    b.view_mut((n0, 2 * n0 + n), (n, n)).copy_from(&c.bub);
    b.view_mut((2 * n0 + n, n0), (n, n)).copy_from(&(-&c.bub));

    let mut b_phi = Mat::zeros(s, d.m0);
    let b0 = ld.state_noise.transpose() * k * &ld.control_noise + k * &ld.control_drift;
    let bf = p0 * &ld.control_drift + ld.coupling_noise.transpose() * k * &ld.control_noise;
    b_phi.view_mut((n0 + n, 0), (n0, d.m0)).copy_from(&b0);
    b_phi.view_mut((2 * n0 + n, 0), (n, d.m0)).copy_from(&bf);

    (a, b, b_phi)
}

/// Builds the structural blocks of the stacked leader system on the follower grid.
pub fn assemble_stacked(
    params: &ModelParams,
    fol: &OpenLoopFollowerSolution,
) -> Result<StackedSystem, SolveError> {
    check_valid(params)?;
    if fol.p.steps() != params.grid_steps || fol.p.horizon() != params.horizon {
        return Err(SolveError::GridMismatch);
    }
    let data = OpenLoopData::new(params);
    let steps = fol.p.steps();
    let (mut av, mut bv, mut phiv) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..=steps {
        let c = data.coeffs(fol.k_bar.value(i), fol.p.value(i), fol.p_bar.value(i))?;
        let (a, b, bp) = varying_blocks(params, &c, fol.k.value(i), fol.p0.value(i));
        av.push(a);
        bv.push(b);
        phiv.push(bp);
    }
    let (b_x, c0, d0, q, h0) = constant_blocks(params);
    Ok(StackedSystem {
        dim: params.dims.stacked(),
        a: TimeGridFn::new(params.horizon, av)?,
        b: TimeGridFn::new(params.horizon, bv)?,
        b_x,
        b_phi: TimeGridFn::new(params.horizon, phiv)?,
        c0,
        d0,
        q,
        h0,
    })
}

/// `(Υ0, Υ0†, ℬ_xᵀ𝒫 + 𝒟0ᵀ𝒫𝒞0 − ℬ_φᵀ)` for a given 𝒫.
fn leader_terms(
    r0: &Mat,
    p: &Mat,
    b_x: &Mat,
    b_phi: &Mat,
    c0: &Mat,
    d0: &Mat,
) -> Result<(Mat, Mat, Mat), SolveError> {
    let d0t_p = d0.transpose() * p;
    let ups0 = r0 + &d0t_p * d0;
    let ups0_pinv = pinv(&ups0, RANK_TOL)?;
    let lnum = b_x.transpose() * p + &d0t_p * c0 - b_phi.transpose();
    Ok((ups0, ups0_pinv, lnum))
}

/// Leader gain `L0 = −Υ0†(ℬ_xᵀ𝒫 + 𝒟0ᵀ𝒫𝒞0 − ℬ_φᵀ)` for a given 𝒫 and instant's blocks.
pub fn leader_gain(
    params: &ModelParams,
    p: &Mat,
    b_x: &Mat,
    b_phi: &Mat,
    c0: &Mat,
    d0: &Mat,
) -> Result<Mat, SolveError> {
    let (_, up, lnum) = leader_terms(&params.leader_cost.control_weight, p, b_x, b_phi, c0, d0)?;
    Ok(-(up * lnum))
}

/// Forward-time derivative of 𝒫 given the instant's blocks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stacked_riccati_rhs(
    r0: &Mat,
    p: &Mat,
    a: &Mat,
    b: &Mat,
    b_x: &Mat,
    b_phi: &Mat,
    c0: &Mat,
    d0: &Mat,
    q: &Mat,
) -> Result<Mat, SolveError> {
    let (_, up, lnum) = leader_terms(r0, p, b_x, b_phi, c0, d0)?;
    let left = p * b_x + c0.transpose() * p * d0 + b_phi;
    Ok(-(p * a + a.transpose() * p + c0.transpose() * p * c0 - q - p * b * p - left * up * lnum))
}

/// Integrates 𝒫 backward from ℋ0 jointly with the follower blocks, so every RK4
/// stage sees coefficients consistent with its own follower state.
pub fn solve_leader_stacked(
    params: &ModelParams,
    fol: &OpenLoopFollowerSolution,
) -> Result<StackedLeaderSolution, SolveError> {
    let system = assemble_stacked(params, fol)?;
    let data = OpenLoopData::new(params);
    let s = system.dim;
    let fl = data.layout.len();
    let r0 = &params.leader_cost.control_weight;

    let joint_rhs = |_t: f64, y: &Mat| -> Result<Mat, SolveError> {
        let fy = Mat::from_column_slice(fl, 1, &y.as_slice()[..fl]);
        let p = Mat::from_column_slice(s, s, &y.as_slice()[fl..]);
        let [k, k_bar, pf, p_bar, p0]: [Mat; 5] =
            data.layout.unpack(&fy).try_into().expect("five follower blocks");
        let c = data.coeffs(&k_bar, &pf, &p_bar)?;
        let (dk, dk_bar, dp, dp_bar, dp0) = data.derivatives(&k, &k_bar, &pf, &p_bar, &p0, &c);
        let (a, b, b_phi) = varying_blocks(params, &c, &k, &p0);
        let dpp = stacked_riccati_rhs(r0, &p, &a, &b, &system.b_x, &b_phi, &system.c0, &system.d0, &system.q)?;
        let dfy = data.layout.pack(&[&dk, &dk_bar, &dp, &dp_bar, &dp0]);
        let mut out = Mat::zeros(fl + s * s, 1);
        out.as_mut_slice()[..fl].copy_from_slice(dfy.as_slice());
        out.as_mut_slice()[fl..].copy_from_slice(dpp.as_slice());
        Ok(out)
    };

    let mut terminal = Mat::zeros(fl + s * s, 1);
    terminal.as_mut_slice()[..fl].copy_from_slice(data.terminal().as_slice());
    terminal.as_mut_slice()[fl..].copy_from_slice(system.h0.as_slice());
    let joint = integrate_backward(joint_rhs, &terminal, params.horizon, params.grid_steps)?;
    let residual = staggered_residual(joint_rhs, &joint)?;

    let p = joint.map(|v| Mat::from_column_slice(s, s, &v.as_slice()[fl..]));
    let steps = p.steps();
    let mut ups = Vec::with_capacity(steps + 1);
    let mut gains = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let (u0, up, lnum) =
            leader_terms(r0, p.value(i), &system.b_x, system.b_phi.value(i), &system.c0, &system.d0)?;
        ups.push(u0);
        gains.push(-(up * lnum));
    }
    Ok(StackedLeaderSolution {
        upsilon0: TimeGridFn::new(params.horizon, ups)?,
        gain: TimeGridFn::new(params.horizon, gains)?,
        system,
        p,
        residual,
    })
}

/// Block offsets of the stacked ordering `[x0; x̄; ψ0; ψ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedIndex {
    pub n0: usize,
    pub n: usize,
}

impl StackedIndex {
    pub fn leader(&self) -> core::ops::Range<usize> {
        0..self.n0
    }
    pub fn mean_field(&self) -> core::ops::Range<usize> {
        self.n0..self.n0 + self.n
    }
    pub fn leader_dual(&self) -> core::ops::Range<usize> {
        self.n0 + self.n..2 * self.n0 + self.n
    }
    pub fn follower_dual(&self) -> core::ops::Range<usize> {
        2 * self.n0 + self.n..2 * (self.n0 + self.n)
    }
}
