//! Game data: dynamics, costs, initial laws and the aggregated follower weights.
//!
//! Every agent is driven by one scalar Brownian motion. Leader state `x0`
//! (dimension `n0`), followers `x_i` (dimension `n`), population average `x^(N)`:
//!
//! ```text
//! dx0 = (A0 x0 + G0 x^(N) + B0 u0) dt + (C0 x0 + Ḡ0 x^(N) + D0 u0) dW0
//! dxi = (A xi + B ui + G x^(N) + F x0) dt + (C xi + D ui + Ḡ x^(N) + F̄ x0) dWi
//! ```
//!
//! Field names describe the role of each coefficient; the symbol it multiplies is
//! given in the field docs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::{Mat, Vector};

/// Symmetry tolerance for weight matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dimensions {
    /// leader state
    pub n0: usize,
    /// follower state
    pub n: usize,
    /// leader control
    pub m0: usize,
    /// follower control
    pub m: usize,
}

impl Dimensions {
    /// Size of the stacked open-loop leader state `[x0; x̄; ψ0; ψ]`.
    pub fn stacked(&self) -> usize {
        2 * (self.n0 + self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderDynamics {
    /// A0, n0×n0
    pub state_drift: Mat,
    /// G0, n0×n, multiplies the population average
    pub coupling_drift: Mat,
    /// B0, n0×m0
    pub control_drift: Mat,
    /// C0, n0×n0
    pub state_noise: Mat,
    /// Ḡ0, n0×n
    pub coupling_noise: Mat,
    /// D0, n0×m0
    pub control_noise: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerDynamics {
    /// A, n×n
    pub state_drift: Mat,
    /// G, n×n
    pub coupling_drift: Mat,
    /// F, n×n0
    pub leader_drift: Mat,
    /// B, n×m
    pub control_drift: Mat,
    /// C, n×n
    pub state_noise: Mat,
    /// Ḡ, n×n
    pub coupling_noise: Mat,
    /// F̄, n×n0
    pub leader_noise: Mat,
    /// D, n×m
    pub control_noise: Mat,
}

/// Leader running cost `|x0 − Γ0 x^(N)|²_Q0 + |u0|²_R0`, terminal `|x0 − Γ̂0 x^(N)|²_H0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderCost {
    pub state_weight: Mat,
    pub control_weight: Mat,
    pub terminal_weight: Mat,
    /// Γ0, n0×n
    pub tracking: Mat,
    /// Γ̂0, n0×n
    pub terminal_tracking: Mat,
}

/// Follower running cost `|xi − Γ x^(N) − Γ1 x0|²_Q + |ui|²_R`, terminal with Γ̂, Γ̂1 and H.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerCost {
    pub state_weight: Mat,
    pub control_weight: Mat,
    pub terminal_weight: Mat,
    /// Γ, n×n
    pub mf_tracking: Mat,
    /// Γ1, n×n0
    pub leader_tracking: Mat,
    /// Γ̂, n×n
    pub terminal_mf_tracking: Mat,
    /// Γ̂1, n×n0
    pub terminal_leader_tracking: Mat,
}

/// Follower weights after splitting the tracking target into its mean-field and
/// leader parts: `Q_Γ = QΓ + ΓᵀQ − ΓᵀQΓ`, `Q_Γ1 = (I − Γ)ᵀQΓ1`, and the terminal analogues.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAggregates {
    pub q_gamma: Mat,
    pub h_gamma: Mat,
    pub q_gamma1: Mat,
    pub h_gamma1: Mat,
}

/// Gaussian initial laws. Followers are i.i.d. and independent of the leader.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub leader_mean: Vector,
    pub leader_cov: Mat,
    pub follower_mean: Vector,
    pub follower_cov: Mat,
}

impl InitialLaw {
    /// `E[ξ0 ξ0ᵀ]`
    pub fn leader_second_moment(&self) -> Mat {
        &self.leader_cov + &self.leader_mean * self.leader_mean.transpose()
    }

    /// `E[ξ ξᵀ]` for one follower
    pub fn follower_second_moment(&self) -> Mat {
        &self.follower_cov + &self.follower_mean * self.follower_mean.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dimensions,
    pub leader_dyn: LeaderDynamics,
    pub follower_dyn: FollowerDynamics,
    pub leader_cost: LeaderCost,
    pub follower_cost: FollowerCost,
    pub init: InitialLaw,
    pub horizon: f64,
    pub grid_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Dotted path of the offending field, e.g. `leader_cost.control_weight`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, field: &str, message: String) {
        self.out.push(Violation { field: String::from(field), message });
    }

    fn finite(&mut self, field: &str, m: &Mat) -> bool {
        if m.iter().all(|v| v.is_finite()) {
            true
        } else {
            self.push(field, String::from("contains non-finite entries"));
            false
        }
    }

    fn shape(&mut self, field: &str, m: &Mat, rows: usize, cols: usize) -> bool {
        if m.nrows() == rows && m.ncols() == cols {
            self.finite(field, m)
        } else {
            self.push(
                field,
                format!("expected {}x{}, found {}x{}", rows, cols, m.nrows(), m.ncols()),
            );
            false
        }
    }

    fn symmetric(&mut self, field: &str, m: &Mat, n: usize) {
        if self.shape(field, m, n, n) {
            let asym = (m - m.transpose()).amax();
            if asym > SYMMETRY_TOL * (1.0 + m.amax()) {
                self.push(field, format!("not symmetric (max asymmetry {:e})", asym));
            }
        }
    }

    fn vector(&mut self, field: &str, v: &Vector, n: usize) {
        if v.len() != n {
            self.push(field, format!("expected length {}, found {}", n, v.len()));
        } else if !v.iter().all(|x| x.is_finite()) {
            self.push(field, String::from("contains non-finite entries"));
        }
    }

    fn covariance(&mut self, field: &str, m: &Mat, n: usize) {
        let before = self.out.len();
        self.symmetric(field, m, n);
        if self.out.len() == before {
            let min_eig = m.clone().symmetric_eigenvalues().min();
            if min_eig < -SYMMETRY_TOL * (1.0 + m.amax()) {
                self.push(field, format!("not positive semidefinite (eigenvalue {:e})", min_eig));
            }
        }
    }
}

/// Every dimension mismatch, asymmetric weight and invalid covariance. Empty means valid.
pub fn validate(params: &ModelParams) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let Dimensions { n0, n, m0, m } = params.dims;
    for (name, v) in [("dims.n0", n0), ("dims.n", n), ("dims.m0", m0), ("dims.m", m)] {
        if v == 0 {
            c.push(name, String::from("must be positive"));
        }
    }
    if !(params.horizon.is_finite() && params.horizon > 0.0) {
        c.push("horizon", format!("must be positive and finite, found {}", params.horizon));
    }
    if params.grid_steps < 2 {
        c.push("grid_steps", format!("must be at least 2, found {}", params.grid_steps));
    }

    let ld = &params.leader_dyn;
    c.shape("leader_dyn.state_drift", &ld.state_drift, n0, n0);
    c.shape("leader_dyn.coupling_drift", &ld.coupling_drift, n0, n);
    c.shape("leader_dyn.control_drift", &ld.control_drift, n0, m0);
    c.shape("leader_dyn.state_noise", &ld.state_noise, n0, n0);
    c.shape("leader_dyn.coupling_noise", &ld.coupling_noise, n0, n);
    c.shape("leader_dyn.control_noise", &ld.control_noise, n0, m0);

    let fd = &params.follower_dyn;
    c.shape("follower_dyn.state_drift", &fd.state_drift, n, n);
    c.shape("follower_dyn.coupling_drift", &fd.coupling_drift, n, n);
    c.shape("follower_dyn.leader_drift", &fd.leader_drift, n, n0);
    c.shape("follower_dyn.control_drift", &fd.control_drift, n, m);
    c.shape("follower_dyn.state_noise", &fd.state_noise, n, n);
    c.shape("follower_dyn.coupling_noise", &fd.coupling_noise, n, n);
    c.shape("follower_dyn.leader_noise", &fd.leader_noise, n, n0);
    c.shape("follower_dyn.control_noise", &fd.control_noise, n, m);

    let lc = &params.leader_cost;
    c.symmetric("leader_cost.state_weight", &lc.state_weight, n0);
    c.symmetric("leader_cost.control_weight", &lc.control_weight, m0);
    c.symmetric("leader_cost.terminal_weight", &lc.terminal_weight, n0);
    c.shape("leader_cost.tracking", &lc.tracking, n0, n);
    c.shape("leader_cost.terminal_tracking", &lc.terminal_tracking, n0, n);

    let fc = &params.follower_cost;
    c.symmetric("follower_cost.state_weight", &fc.state_weight, n);
    c.symmetric("follower_cost.control_weight", &fc.control_weight, m);
    c.symmetric("follower_cost.terminal_weight", &fc.terminal_weight, n);
    c.shape("follower_cost.mf_tracking", &fc.mf_tracking, n, n);
    c.shape("follower_cost.leader_tracking", &fc.leader_tracking, n, n0);
    c.shape("follower_cost.terminal_mf_tracking", &fc.terminal_mf_tracking, n, n);
    c.shape("follower_cost.terminal_leader_tracking", &fc.terminal_leader_tracking, n, n0);

    let init = &params.init;
    c.vector("init.leader_mean", &init.leader_mean, n0);
    c.covariance("init.leader_cov", &init.leader_cov, n0);
    c.vector("init.follower_mean", &init.follower_mean, n);
    c.covariance("init.follower_cov", &init.follower_cov, n);
    c.out
}

/// Aggregated follower weights. `cost` must be dimension-coherent.
pub fn weight_aggregates(cost: &FollowerCost) -> WeightAggregates {
    fn split(q: &Mat, gamma: &Mat, gamma1: &Mat) -> (Mat, Mat) {
        let qg = q * gamma;
        let agg = &qg + qg.transpose() - gamma.transpose() * &qg;
        // exact symmetrisation keeps the invariant independent of rounding order
        let agg = (&agg + agg.transpose()) * 0.5;
        let id = Mat::identity(gamma.nrows(), gamma.ncols());
        let cross = (id - gamma).transpose() * q * gamma1;
        (agg, cross)
    }
    let (q_gamma, q_gamma1) = split(&cost.state_weight, &cost.mf_tracking, &cost.leader_tracking);
    let (h_gamma, h_gamma1) = split(
        &cost.terminal_weight,
        &cost.terminal_mf_tracking,
        &cost.terminal_leader_tracking,
    );
    WeightAggregates { q_gamma, h_gamma, q_gamma1, h_gamma1 }
}

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// Scalar reference model used for the reproduction experiment.
///
/// Coupling coefficients of the leader (`G0`, `Ḡ0`) are zero. Initial laws are
/// Normal(10, 2) for the leader and Normal(5, 1) for followers, second argument a
/// variance. Horizon 1 on a 2000-step grid.
pub fn table1_model() -> ModelParams {
    ModelParams {
        dims: Dimensions { n0: 1, n: 1, m0: 1, m: 1 },
        leader_dyn: LeaderDynamics {
            state_drift: scalar(-10.0),
            coupling_drift: scalar(0.0),
            control_drift: scalar(1.0),
            state_noise: scalar(-0.5),
            coupling_noise: scalar(0.0),
            control_noise: scalar(0.5),
        },
        follower_dyn: FollowerDynamics {
            state_drift: scalar(-2.0),
            coupling_drift: scalar(1.0),
            leader_drift: scalar(1.0),
            control_drift: scalar(1.0),
            state_noise: scalar(-0.2),
            coupling_noise: scalar(0.2),
            leader_noise: scalar(0.2),
            control_noise: scalar(0.2),
        },
        leader_cost: LeaderCost {
            state_weight: scalar(1.0),
            control_weight: scalar(1.0),
            terminal_weight: scalar(2.0),
            tracking: scalar(1.0),
            terminal_tracking: scalar(1.0),
        },
        follower_cost: FollowerCost {
            state_weight: scalar(1.0),
            control_weight: scalar(1.0),
            terminal_weight: scalar(2.0),
            mf_tracking: scalar(1.0),
            leader_tracking: scalar(1.0),
            terminal_mf_tracking: scalar(1.0),
            terminal_leader_tracking: scalar(1.0),
        },
        init: InitialLaw {
            leader_mean: Vector::from_element(1, 10.0),
            leader_cov: scalar(2.0),
            follower_mean: Vector::from_element(1, 5.0),
            follower_cov: scalar(1.0),
        },
        horizon: 1.0,
        grid_steps: 2000,
    }
}

impl ModelParams {
    /// Model with every matrix zero except identity control weights and the
    /// given dimensions; a convenient base for tests and synthetic cases.
    pub fn zeros(dims: Dimensions) -> Self {
        let Dimensions { n0, n, m0, m } = dims;
        let z = Mat::zeros;
        ModelParams {
            dims,
            leader_dyn: LeaderDynamics {
                state_drift: z(n0, n0),
                coupling_drift: z(n0, n),
                control_drift: z(n0, m0),
                state_noise: z(n0, n0),
                coupling_noise: z(n0, n),
                control_noise: z(n0, m0),
            },
            follower_dyn: FollowerDynamics {
                state_drift: z(n, n),
                coupling_drift: z(n, n),
                leader_drift: z(n, n0),
                control_drift: z(n, m),
                state_noise: z(n, n),
                coupling_noise: z(n, n),
                leader_noise: z(n, n0),
                control_noise: z(n, m),
            },
            leader_cost: LeaderCost {
                state_weight: z(n0, n0),
                control_weight: Mat::identity(m0, m0),
                terminal_weight: z(n0, n0),
                tracking: z(n0, n),
                terminal_tracking: z(n0, n),
            },
            follower_cost: FollowerCost {
                state_weight: z(n, n),
                control_weight: Mat::identity(m, m),
                terminal_weight: z(n, n),
                mf_tracking: z(n, n),
                leader_tracking: z(n, n0),
                terminal_mf_tracking: z(n, n),
                terminal_leader_tracking: z(n, n0),
            },
            init: InitialLaw {
                leader_mean: Vector::zeros(n0),
                leader_cov: z(n0, n0),
                follower_mean: Vector::zeros(n),
                follower_cov: z(n, n),
            },
            horizon: 1.0,
            grid_steps: 200,
        }
    }

    /// Uniform solver grid spacing.
    pub fn grid_dt(&self) -> f64 {
        self.horizon / self.grid_steps as f64
    }
}

/// Deterministic pseudo-random model with moderate coefficients, PSD weights and
/// positive definite control weights. Used for property tests and demos.
pub fn synthetic_model(seed: u64, dims: Dimensions) -> ModelParams {
    struct Draws {
        seed: u64,
        counter: u64,
    }
    impl Draws {
        fn mat(&mut self, r: usize, c: usize, scale: f64) -> Mat {
            Mat::from_fn(r, c, |_, _| {
                self.counter += 1;
                let u = crate::rng::hash64(self.seed, self.counter, 0x5eed) >> 11;
                scale * (2.0 * (u as f64) / ((1u64 << 53) as f64) - 1.0)
            })
        }
        fn psd(&mut self, n: usize, shift: f64) -> Mat {
            let l = self.mat(n, n, 0.7);
            &l * l.transpose() + Mat::identity(n, n) * shift
        }
    }
    let mut g = Draws { seed, counter: 0 };
    let Dimensions { n0, n, m0, m } = dims;
    let mut p = ModelParams::zeros(dims);
    p.leader_cost.state_weight = g.psd(n0, 0.0);
    p.leader_cost.control_weight = g.psd(m0, 0.5);
    p.leader_cost.terminal_weight = g.psd(n0, 0.0);
    p.follower_cost.state_weight = g.psd(n, 0.0);
    p.follower_cost.control_weight = g.psd(m, 0.5);
    p.follower_cost.terminal_weight = g.psd(n, 0.0);
    p.leader_dyn = LeaderDynamics {
        state_drift: g.mat(n0, n0, 0.8) - Mat::identity(n0, n0),
        coupling_drift: g.mat(n0, n, 0.4),
        control_drift: g.mat(n0, m0, 1.0),
        state_noise: g.mat(n0, n0, 0.3),
        coupling_noise: g.mat(n0, n, 0.2),
        control_noise: g.mat(n0, m0, 0.3),
    };
    p.follower_dyn = FollowerDynamics {
        state_drift: g.mat(n, n, 0.8) - Mat::identity(n, n),
        coupling_drift: g.mat(n, n, 0.4),
        leader_drift: g.mat(n, n0, 0.5),
        control_drift: g.mat(n, m, 1.0),
        state_noise: g.mat(n, n, 0.3),
        coupling_noise: g.mat(n, n, 0.2),
        leader_noise: g.mat(n, n0, 0.2),
        control_noise: g.mat(n, m, 0.3),
    };
    p.leader_cost.tracking = g.mat(n0, n, 1.0);
    p.leader_cost.terminal_tracking = g.mat(n0, n, 1.0);
    p.follower_cost.mf_tracking = g.mat(n, n, 1.0);
    p.follower_cost.leader_tracking = g.mat(n, n0, 1.0);
    p.follower_cost.terminal_mf_tracking = g.mat(n, n, 1.0);
    p.follower_cost.terminal_leader_tracking = g.mat(n, n0, 1.0);
    p.init = InitialLaw {
        leader_mean: Vector::from_fn(n0, |i, _| 1.0 + i as f64),
        leader_cov: g.psd(n0, 0.1),
        follower_mean: Vector::from_fn(n, |i, _| 0.5 - i as f64),
        follower_cov: g.psd(n, 0.1),
    };
    p.grid_steps = 400;
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_is_valid() {
        let p = table1_model();
        assert!(validate(&p).is_empty(), "{:?}", validate(&p));
        assert_eq!(p.leader_dyn.state_drift[(0, 0)], -10.0);
        assert_eq!(p.follower_cost.terminal_weight[(0, 0)], 2.0);
    }

    #[test]
    fn asymmetric_r0_is_reported() {
        let mut p = ModelParams::zeros(Dimensions { n0: 2, n: 2, m0: 2, m: 2 });
        p.leader_cost.control_weight = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "leader_cost.control_weight");
    }

    #[test]
    fn wrong_control_matrix_shape_is_reported() {
        let dims = Dimensions { n0: 1, n: 2, m0: 1, m: 1 };
        let mut p = ModelParams::zeros(dims);
        p.follower_dyn.control_drift = Mat::zeros(2, 2);
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "follower_dyn.control_drift");
    }

    #[test]
    fn negative_covariance_is_reported() {
        let mut p = ModelParams::zeros(Dimensions { n0: 1, n: 1, m0: 1, m: 1 });
        p.init.follower_cov = scalar(-1.0);
        let v = validate(&p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "init.follower_cov");
    }

    #[test]
    fn aggregates_identity_tracking() {
        let mut fc = table1_model().follower_cost;
        fc.state_weight = Mat::from_row_slice(1, 1, &[3.5]);
        let agg = weight_aggregates(&fc);
        assert_eq!(agg.q_gamma[(0, 0)], 3.5);
    }

    #[test]
    fn aggregates_zero_tracking() {
        let dims = Dimensions { n0: 2, n: 3, m0: 1, m: 1 };
        let mut fc = ModelParams::zeros(dims).follower_cost;
        fc.state_weight = Mat::from_fn(3, 3, |i, j| 1.0 + (i + j) as f64);
        fc.leader_tracking = Mat::from_fn(3, 2, |i, j| (i as f64) - (j as f64));
        let agg = weight_aggregates(&fc);
        assert_eq!(agg.q_gamma, Mat::zeros(3, 3));
        assert_eq!(agg.q_gamma1, &fc.state_weight * &fc.leader_tracking);
    }

    #[test]
    fn aggregates_table1() {
        let agg = weight_aggregates(&table1_model().follower_cost);
        assert_eq!(agg.q_gamma[(0, 0)], 1.0);
        assert_eq!(agg.h_gamma[(0, 0)], 2.0);
        assert_eq!(agg.q_gamma1[(0, 0)], 0.0);
        assert_eq!(agg.h_gamma1[(0, 0)], 0.0);
    }
}
