#![allow(dead_code)]

use mflq_core::numerics::{integrate_backward, NumericsError};
use mflq_core::{Mat, TimeGridFn};

/// Generic finite-horizon LQ problem with several scalar noise sources:
/// dX = (A X + B U) dt + Σ_k (C_k X + D_k U) dW_k, cost ∫ XᵀQX + UᵀRU + X(T)ᵀHX(T).
pub struct Lq {
    pub a: Box<dyn Fn(f64) -> Mat>,
    pub b: Mat,
    pub c: Vec<Mat>,
    pub d: Vec<Mat>,
    pub q: Mat,
    pub r: Mat,
    pub h: Mat,
}

impl Lq {
    pub fn riccati(&self, horizon: f64, steps: usize) -> TimeGridFn {
        let rhs = |t: f64, p: &Mat| -> Result<Mat, NumericsError> {
            let a = (self.a)(t);
            let mut s = self.b.transpose() * p;
            let mut rr = self.r.clone();
            let mut quad = a.transpose() * p + p * &a + &self.q;
            for (c, d) in self.c.iter().zip(&self.d) {
                quad += c.transpose() * p * c;
                s += d.transpose() * p * c;
                rr += d.transpose() * p * d;
            }
            let inv = rr.try_inverse().expect("control weight invertible");
            Ok(-(quad - s.transpose() * inv * s))
        };
        integrate_backward(rhs, &self.h, horizon, steps).unwrap()
    }

    pub fn gain(&self, p: &Mat) -> Mat {
        let mut s = self.b.transpose() * p;
        let mut rr = self.r.clone();
        for (c, d) in self.c.iter().zip(&self.d) {
            s += d.transpose() * p * c;
            rr += d.transpose() * p * d;
        }
        -(rr.try_inverse().unwrap() * s)
    }
}

pub fn set(m: &mut Mat, r: usize, c: usize, v: &Mat) {
    m.view_mut((r, c), v.shape()).copy_from(v);
}

pub fn constant_grid(horizon: f64, steps: usize, v: &Mat) -> TimeGridFn {
    TimeGridFn::from_fn(horizon, steps, |_, _| v.clone()).unwrap()
}
