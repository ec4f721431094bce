//! Open-loop pipeline against independent oracles.

mod common;

use mflq_core::model::{synthetic_model, Dimensions};
use mflq_core::riccati_feedback::solve_feedback_joint;
use mflq_core::riccati_openloop::{solve_follower_system, solve_leader_stacked, StackedIndex};
use mflq_core::{Mat, ModelParams, Vector};

/// Without leader control the open-loop follower team optimum coincides with the
/// feedback one, so the two independently derived systems must agree.
#[test]
fn follower_system_matches_feedback_limit_without_leader_control() {
    for seed in [1u64, 7, 19] {
        let mut m = synthetic_model(seed, Dimensions { n0: 2, n: 2, m0: 1, m: 2 });
        m.leader_dyn.control_drift.fill(0.0);
        m.leader_dyn.control_noise.fill(0.0);
        let fol = solve_follower_system(&m).unwrap();
        let fb = solve_feedback_joint(&m).unwrap();
        for k in 0..=m.grid_steps {
            assert!((fol.p.value(k) - fb.m.value(k)).amax() < 1e-10);
            assert!((fol.p_bar.value(k) - fb.m_bar.value(k)).amax() < 1e-10);
            assert!((fol.p0.value(k) - fb.m0.value(k)).amax() < 1e-10);
            assert!((fol.k.value(k) - fb.lambda0.value(k)).amax() < 1e-10);
        }
    }
}

struct Path {
    x0: Vec<Vector>,
    xbar: Vec<Vector>,
}

/// Deterministic leader problem solved by brute force: piecewise-constant
/// controls on `blocks` intervals, forward/backward ODEs by Heun on the solver grid.
struct Brute<'a> {
    p: &'a ModelParams,
    fol: &'a mflq_core::riccati_openloop::OpenLoopFollowerSolution,
    blocks: usize,
}

impl Brute<'_> {
    fn coeffs(&self, k: usize) -> (Mat, Mat, Mat, Mat, Mat) {
        let fd = &self.p.follower_dyn;
        let ld = &self.p.leader_dyn;
        let up = self.fol.upsilon_pinv.value(k);
        let b = &fd.control_drift;
        let a_hat = &fd.state_drift + &fd.coupling_drift
            - b * up * (self.fol.psi2.value(k) + self.fol.psi3.value(k));
        let f_hat = &fd.leader_drift - b * up * self.fol.psi1.value(k);
        let bub = b * up * b.transpose();
        let kk = self.fol.k.value(k);
        let b0 = ld.state_noise.transpose() * kk * &ld.control_noise + kk * &ld.control_drift;
        let bf = self.fol.p0.value(k) * &ld.control_drift;
        (a_hat, f_hat, bub, b0, bf)
    }

    fn control_at(&self, u: &[Vector], k: usize) -> Vector {
        let steps = self.p.grid_steps;
        let per = steps / self.blocks;
        u[(k / per).min(self.blocks - 1)].clone()
    }

    /// Leader cost for piecewise-constant control `u` (one value per block). The
    /// value at a grid node belongs to the block starting there.
    fn cost(&self, u: &[Vector], xi0: &Vector, xib: &Vector) -> f64 {
        let path = self.trajectory(u, xi0, xib);
        let lc = &self.p.leader_cost;
        let steps = self.p.grid_steps;
        let h = self.p.horizon / steps as f64;
        let per = steps / self.blocks;
        let mut j = 0.0;
        // state part by the trapezoidal rule, control part exactly per block
        for k in 0..=steps {
            let e = &path.x0[k] - &lc.tracking * &path.xbar[k];
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            j += w * h * (e.transpose() * &lc.state_weight * &e)[(0, 0)];
        }
        for ub in u {
            j += (ub.transpose() * &lc.control_weight * ub)[(0, 0)] * h * per as f64;
        }
        let e = &path.x0[steps] - &lc.terminal_tracking * &path.xbar[steps];
        j + (e.transpose() * &lc.terminal_weight * &e)[(0, 0)]
    }

    fn trajectory(&self, u: &[Vector], xi0: &Vector, xib: &Vector) -> Path {
        let ld = &self.p.leader_dyn;
        let steps = self.p.grid_steps;
        let h = self.p.horizon / steps as f64;
        let n0 = self.p.dims.n0;
        let n = self.p.dims.n;
        // offsets backward: φ0' = −(A0ᵀφ0 + F̂ᵀφ + b0 u0), φ' = −(Âᵀφ + G0ᵀφ0 + b u0)
        let mut phi0 = vec![Vector::zeros(n0); steps + 1];
        let mut phi = vec![Vector::zeros(n); steps + 1];
        let drv = |k: usize, f0: &Vector, f: &Vector, uk: &Vector| {
            let (a_hat, f_hat, _, b0, bf) = self.coeffs(k);
            let d0 = -(ld.state_drift.transpose() * f0 + f_hat.transpose() * f + b0 * uk);
            let d = -(a_hat.transpose() * f + ld.coupling_drift.transpose() * f0 + bf * uk);
            (d0, d)
        };
        for k in (0..steps).rev() {
            // the control on [t_k, t_{k+1}] is the block value at k
            let uk = self.control_at(u, k);
            let (a0, a) = drv(k + 1, &phi0[k + 1], &phi[k + 1], &uk);
            let p0 = &phi0[k + 1] - &a0 * h;
            let p = &phi[k + 1] - &a * h;
            let (b0, b) = drv(k, &p0, &p, &uk);
            phi0[k] = &phi0[k + 1] - (a0 + b0) * (0.5 * h);
            phi[k] = &phi[k + 1] - (a + b) * (0.5 * h);
        }
        let mut x0 = vec![xi0.clone(); steps + 1];
        let mut xb = vec![xib.clone(); steps + 1];
        let fwd = |k: usize, y0: &Vector, y: &Vector, uk: &Vector| {
            let (a_hat, f_hat, bub, _, _) = self.coeffs(k);
            let d0 = &ld.state_drift * y0 + &ld.coupling_drift * y + &ld.control_drift * uk;
            let d = a_hat * y - bub * &phi[k] + f_hat * y0;
            (d0, d)
        };
        for k in 0..steps {
            let uk = self.control_at(u, k);
            let (a0, a) = fwd(k, &x0[k], &xb[k], &uk);
            let p0 = &x0[k] + &a0 * h;
            let p = &xb[k] + &a * h;
            let (b0, b) = fwd(k + 1, &p0, &p, &uk);
            x0[k + 1] = &x0[k] + (a0 + b0) * (0.5 * h);
            xb[k + 1] = &xb[k] + (a + b) * (0.5 * h);
        }
        Path { x0, xbar: xb }
    }

    /// Minimises the quadratic cost exactly through its Hessian and gradient.
    fn optimum(&self, xi0: &Vector, xib: &Vector) -> (f64, Vec<Vector>) {
        let m0 = self.p.dims.m0;
        let nvar = self.blocks * m0;
        let unpack = |v: &[f64]| -> Vec<Vector> {
            (0..self.blocks).map(|b| Vector::from_column_slice(&v[b * m0..(b + 1) * m0])).collect()
        };
        let zero = vec![0.0; nvar];
        let c = self.cost(&unpack(&zero), xi0, xib);
        // J(v) = c + 2gᵀv + vᵀHv
        let mut jp = vec![0.0; nvar];
        for i in 0..nvar {
            let mut e = zero.clone();
            e[i] = 1.0;
            jp[i] = self.cost(&unpack(&e), xi0, xib);
        }
        let mut hess = Mat::zeros(nvar, nvar);
        let mut grad = Vector::zeros(nvar);
        for i in 0..nvar {
            let mut e = zero.clone();
            e[i] = -1.0;
            let jm = self.cost(&unpack(&e), xi0, xib);
            hess[(i, i)] = 0.5 * (jp[i] + jm) - c;
            grad[i] = 0.25 * (jp[i] - jm);
        }
        for i in 0..nvar {
            for j in 0..i {
                let mut e = zero.clone();
                e[i] = 1.0;
                e[j] = 1.0;
                let jij = self.cost(&unpack(&e), xi0, xib);
                let hij = 0.5 * (jij - jp[i] - jp[j] + c);
                hess[(i, j)] = hij;
                hess[(j, i)] = hij;
            }
        }
        let v = -hess.clone().cholesky().expect("convex leader problem").solve(&grad);
        let jstar = c + 2.0 * grad.dot(&v) + (v.transpose() * &hess * &v)[(0, 0)];
        (jstar, unpack(v.as_slice()))
    }
}

fn leader_noise_free(seed: u64) -> ModelParams {
    let mut m = synthetic_model(seed, Dimensions { n0: 1, n: 2, m0: 1, m: 1 });
    m.leader_dyn.state_noise.fill(0.0);
    m.leader_dyn.coupling_noise.fill(0.0);
    m.leader_dyn.control_noise.fill(0.0);
    m.grid_steps = 800;
    m
}

/// In the noise-free leader problem the stacked Riccati solution must reproduce
/// the brute-force optimal cost and control.
#[test]
fn stacked_system_matches_brute_force_leader_optimum() {
    for seed in [2u64, 9] {
        let m = leader_noise_free(seed);
        let fol = solve_follower_system(&m).unwrap();
        let stk = solve_leader_stacked(&m, &fol).unwrap();
        let xi0 = m.init.leader_mean.clone();
        let xib = m.init.follower_mean.clone();
        let brute = Brute { p: &m, fol: &fol, blocks: 40 };
        let (jstar, u) = brute.optimum(&xi0, &xib);

        let idx = StackedIndex { n0: 1, n: 2 };
        let s = m.dims.stacked();
        let mut x = Vector::zeros(s);
        x.rows_mut(0, 1).copy_from(&xi0);
        x.rows_mut(1, 2).copy_from(&xib);
        let y = stk.p.first() * &x;
        let j_formula = xi0.dot(&y.rows_range(idx.leader())) + xib.dot(&y.rows_range(idx.mean_field()));
        let rel = (jstar - j_formula).abs() / j_formula.abs().max(1e-3);
        assert!(rel < 1e-4, "seed {seed}: brute {jstar} vs Riccati {j_formula}");

        // control near t = 0.5: integrate X with u0 = L0 X
        let steps = m.grid_steps;
        let h = m.horizon / steps as f64;
        let mut xk = x.clone();
        let mut max_dev: f64 = 0.0;
        let per = steps / brute.blocks;
        let mut block_sum = 0.0;
        for k in 0..steps {
            let drift = |k: usize, xv: &Vector| {
                let u0 = stk.gain.value(k) * xv;
                let yv = stk.p.value(k) * xv;
                stk.system.a.value(k) * xv - stk.system.b.value(k) * yv + &stk.system.b_x * u0
            };
            let u_now = (stk.gain.value(k) * &xk)[0];
            block_sum += u_now;
            if (k + 1) % per == 0 {
                let b = k / per;
                max_dev = max_dev.max((block_sum / per as f64 - u[b][0]).abs());
                block_sum = 0.0;
            }
            let a = drift(k, &xk);
            let pred = &xk + &a * h;
            let b = drift(k + 1, &pred);
            xk += (a + b) * (0.5 * h);
        }
        let scale = u.iter().map(|v| v[0].abs()).fold(0.0, f64::max);
        assert!(max_dev < 1e-2 * scale.max(1e-3), "seed {seed}: control deviation {max_dev} (scale {scale})");
    }
}
