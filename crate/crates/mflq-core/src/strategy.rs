//! Executable policies assembled from the Riccati solutions.
//!
//! Open loop: the leader plays `u0 = L0 X` on the stacked limit state
//! `X = [x0; x̄; ψ0; ψ]`, followers play
//! `ui = −Υ†(Ψ2 x̄i + Ψ3 x̄ + Ψ1 x0 + Bᵀφ)` with `φ` the last block of `𝒫X`.
//! Feedback: `u0 = P0 x0 + P̄ x̄` and `ui = Kx xi + Kx̄ x̄ + K0 x0`.

use thiserror::Error;

use crate::model::ModelParams;
use crate::numerics::{NumericsError, TimeGridFn};
use crate::riccati_feedback::FeedbackSolution;
use crate::riccati_openloop::{OpenLoopFollowerSolution, StackedIndex, StackedLeaderSolution};
use crate::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("solutions live on different time grids")]
    GridMismatch,
    #[error(transparent)]
    Time(#[from] NumericsError),
    #[error("{which} has length {found}, expected {expected}")]
    Dimension { which: &'static str, expected: usize, found: usize },
    #[error("state kind does not match the policy")]
    WrongStates,
}

fn check_len(which: &'static str, v: &Vector, expected: usize) -> Result<(), PolicyError> {
    if v.len() != expected {
        return Err(PolicyError::Dimension { which, expected, found: v.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPolicy {
    pub index: StackedIndex,
    /// L0, m0×s
    pub leader_gain: TimeGridFn,
    /// 𝒫, Y = 𝒫X
    pub stacked_p: TimeGridFn,
    /// −Υ†Ψ2, acts on the own state
    pub gain_own: TimeGridFn,
    /// −Υ†Ψ3, acts on x̄
    pub gain_mf: TimeGridFn,
    /// −Υ†Ψ1, acts on x0
    pub gain_leader: TimeGridFn,
    /// −Υ†Bᵀ, acts on φ
    pub gain_dual: TimeGridFn,
}

/// Open-loop gains frozen at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopGains {
    pub leader: Mat,
    pub stacked_p: Mat,
    pub own: Mat,
    pub mf: Mat,
    pub on_leader: Mat,
    pub dual: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    /// P0, m0×n0
    pub leader_state: TimeGridFn,
    /// P̄, m0×n
    pub leader_mf: TimeGridFn,
    /// Kx = −Υ⁻¹Ψ
    pub gain_own: TimeGridFn,
    /// Kx̄ = −Υ⁻¹Ψ̄
    pub gain_mf: TimeGridFn,
    /// K0 = −Υ⁻¹Ψ⁰
    pub gain_leader: TimeGridFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGains {
    pub leader_state: Mat,
    pub leader_mf: Mat,
    pub own: Mat,
    pub mf: Mat,
    pub on_leader: Mat,
}

/// `B` is read from `params`; the solutions carry only products with it.
pub fn build_openloop_policy(
    params: &ModelParams,
    fol: &OpenLoopFollowerSolution,
    stk: &StackedLeaderSolution,
) -> Result<OpenLoopPolicy, PolicyError> {
    let ups = &fol.upsilon_pinv;
    let grids = [&fol.psi1, &fol.psi2, &fol.psi3, &stk.p, &stk.gain];
    if grids.iter().any(|g| !g.same_grid(ups)) {
        return Err(PolicyError::GridMismatch);
    }
    let neg_scaled = |g: &TimeGridFn| {
        TimeGridFn::new(
            ups.horizon(),
            g.values().iter().zip(ups.values()).map(|(psi, up)| -(up * psi)).collect(),
        )
    };
    let b_t = params.follower_dyn.control_drift.transpose();
    Ok(OpenLoopPolicy {
        index: StackedIndex { n0: params.dims.n0, n: params.dims.n },
        leader_gain: stk.gain.clone(),
        stacked_p: stk.p.clone(),
        gain_own: neg_scaled(&fol.psi2)?,
        gain_mf: neg_scaled(&fol.psi3)?,
        gain_leader: neg_scaled(&fol.psi1)?,
        gain_dual: ups.map(|up| -(up * &b_t)),
    })
}

pub fn build_feedback_policy(fb: &FeedbackSolution) -> FeedbackPolicy {
    FeedbackPolicy {
        leader_state: fb.leader_state_gain.clone(),
        leader_mf: fb.leader_mf_gain.clone(),
        gain_own: fb.gain_own.clone(),
        gain_mf: fb.gain_mf.clone(),
        gain_leader: fb.gain_leader.clone(),
    }
}

impl OpenLoopPolicy {
    pub fn horizon(&self) -> f64 {
        self.leader_gain.horizon()
    }

    pub fn gains_at(&self, t: f64) -> Result<OpenLoopGains, PolicyError> {
        Ok(OpenLoopGains {
            leader: self.leader_gain.at(t)?,
            stacked_p: self.stacked_p.at(t)?,
            own: self.gain_own.at(t)?,
            mf: self.gain_mf.at(t)?,
            on_leader: self.gain_leader.at(t)?,
            dual: self.gain_dual.at(t)?,
        })
    }

    /// Gains at grid node `k`, without interpolation.
    pub fn gains_at_node(&self, k: usize) -> OpenLoopGains {
        OpenLoopGains {
            leader: self.leader_gain.value(k).clone(),
            stacked_p: self.stacked_p.value(k).clone(),
            own: self.gain_own.value(k).clone(),
            mf: self.gain_mf.value(k).clone(),
            on_leader: self.gain_leader.value(k).clone(),
            dual: self.gain_dual.value(k).clone(),
        }
    }

    pub fn leader_control(&self, t: f64, stacked: &Vector) -> Result<Vector, PolicyError> {
        check_len("stacked state", stacked, 2 * (self.index.n0 + self.index.n))?;
        Ok(self.leader_gain.at(t)? * stacked)
    }

    /// `φ`, the last block of `𝒫X`.
    pub fn follower_dual(&self, t: f64, stacked: &Vector) -> Result<Vector, PolicyError> {
        check_len("stacked state", stacked, 2 * (self.index.n0 + self.index.n))?;
        let y = self.stacked_p.at(t)? * stacked;
        Ok(y.rows_range(self.index.follower_dual()).into_owned())
    }

    pub fn follower_control(
        &self,
        t: f64,
        own: &Vector,
        mean_field: &Vector,
        leader: &Vector,
        dual: &Vector,
    ) -> Result<Vector, PolicyError> {
        let StackedIndex { n0, n } = self.index;
        check_len("own state", own, n)?;
        check_len("mean field", mean_field, n)?;
        check_len("leader state", leader, n0)?;
        check_len("dual φ", dual, n)?;
        Ok(self.gain_own.at(t)? * own
            + self.gain_mf.at(t)? * mean_field
            + self.gain_leader.at(t)? * leader
            + self.gain_dual.at(t)? * dual)
    }
}

impl FeedbackPolicy {
    pub fn horizon(&self) -> f64 {
        self.leader_state.horizon()
    }

    pub fn gains_at(&self, t: f64) -> Result<FeedbackGains, PolicyError> {
        Ok(FeedbackGains {
            leader_state: self.leader_state.at(t)?,
            leader_mf: self.leader_mf.at(t)?,
            own: self.gain_own.at(t)?,
            mf: self.gain_mf.at(t)?,
            on_leader: self.gain_leader.at(t)?,
        })
    }

    pub fn gains_at_node(&self, k: usize) -> FeedbackGains {
        FeedbackGains {
            leader_state: self.leader_state.value(k).clone(),
            leader_mf: self.leader_mf.value(k).clone(),
            own: self.gain_own.value(k).clone(),
            mf: self.gain_mf.value(k).clone(),
            on_leader: self.gain_leader.value(k).clone(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.leader_state.shape().1, self.leader_mf.shape().1)
    }

    pub fn leader_control(&self, t: f64, leader: &Vector, mean_field: &Vector) -> Result<Vector, PolicyError> {
        let (n0, n) = self.dims();
        check_len("leader state", leader, n0)?;
        check_len("mean field", mean_field, n)?;
        Ok(self.leader_state.at(t)? * leader + self.leader_mf.at(t)? * mean_field)
    }

    pub fn follower_control(
        &self,
        t: f64,
        own: &Vector,
        mean_field: &Vector,
        leader: &Vector,
    ) -> Result<Vector, PolicyError> {
        let (n0, n) = self.dims();
        check_len("own state", own, n)?;
        check_len("mean field", mean_field, n)?;
        check_len("leader state", leader, n0)?;
        Ok(self.gain_own.at(t)? * own + self.gain_mf.at(t)? * mean_field + self.gain_leader.at(t)? * leader)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    OpenLoop(&'a OpenLoopPolicy),
    Feedback(&'a FeedbackPolicy),
}

/// Named states for [`eval_policy`].
#[derive(Debug, Clone, Copy)]
pub enum PolicyStates<'a> {
    /// Stacked limit state and one follower's auxiliary state.
    OpenLoop { stacked: &'a Vector, own: &'a Vector, leader: &'a Vector },
    Feedback { leader: &'a Vector, mean_field: &'a Vector, own: &'a Vector },
}

/// Leader and follower control at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub leader: Vector,
    pub follower: Vector,
}

/// In the open-loop case the follower's `x̄` and `φ` are read from `stacked`
/// and the follower's leader input is `leader` (realized or limit, as chosen
/// by the caller).
pub fn eval_policy(policy: Policy<'_>, t: f64, states: PolicyStates<'_>) -> Result<Controls, PolicyError> {
    match (policy, states) {
        (Policy::OpenLoop(p), PolicyStates::OpenLoop { stacked, own, leader }) => {
            let u0 = p.leader_control(t, stacked)?;
            let phi = p.follower_dual(t, stacked)?;
            let mf = stacked.rows_range(p.index.mean_field()).into_owned();
            let ui = p.follower_control(t, own, &mf, leader, &phi)?;
            Ok(Controls { leader: u0, follower: ui })
        }
        (Policy::Feedback(p), PolicyStates::Feedback { leader, mean_field, own }) => Ok(Controls {
            leader: p.leader_control(t, leader, mean_field)?,
            follower: p.follower_control(t, own, mean_field, leader)?,
        }),
        _ => Err(PolicyError::WrongStates),
    }
}
