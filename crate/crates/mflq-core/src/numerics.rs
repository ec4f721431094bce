//! Pseudoinverse, range and definiteness tests, time-grid functions and the
//! fixed-step backward RK4 integrator shared by both Riccati pipelines.

use alloc::vec::Vec;

use thiserror::Error;

use crate::Mat;

/// Default relative cut-off for singular values in [`pinv`].
pub const RANK_TOL: f64 = 1e-10;
/// Entries above this magnitude are treated as a finite-time escape.
pub const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (max asymmetry {asym:e})")]
    Asymmetric { asym: f64 },
    #[error("rank tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("solution escapes at t = {time} (solvability of the Riccati system fails)")]
    BlowUp { time: f64 },
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("grid needs at least 2 steps and a positive finite horizon")]
    BadGrid,
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Moore-Penrose pseudoinverse through the SVD; singular values below
/// `rank_tol * σ_max` are dropped.
pub fn pinv(m: &Mat, rank_tol: f64) -> Result<Mat, NumericsError> {
    if !(rank_tol > 0.0) {
        return Err(NumericsError::BadTolerance(rank_tol));
    }
    if !all_finite(m) {
        return Err(NumericsError::NonFinite);
    }
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(Mat::zeros(c, r));
    }
    if r == 1 && c == 1 {
        let v = m[(0, 0)];
        return Ok(Mat::from_element(1, 1, if v == 0.0 { 0.0 } else { 1.0 / v }));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(Mat::zeros(c, r));
    }
    let cut = rank_tol * smax;
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut out = Mat::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += vt.row(k).transpose() * u.column(k).transpose() * (1.0 / s);
        }
    }
    Ok(out)
}

/// Whether every column of `a` lies in the column space of `b`:
/// `‖(I − B B†) A‖∞ ≤ tol`.
pub fn range_subset(a: &Mat, b: &Mat, tol: f64) -> bool {
    assert_eq!(a.nrows(), b.nrows(), "range_subset needs equal row counts");
    let Ok(bp) = pinv(b, RANK_TOL) else {
        return false;
    };
    let proj = b * bp;
    let resid = a - proj * a;
    resid.amax() <= tol
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    if m.is_square() {
        (m - m.transpose()).amax()
    } else {
        f64::INFINITY
    }
}

/// Smallest eigenvalue of a symmetric matrix (the input is symmetrised first).
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub fn is_psd(m: &Mat, tol: f64) -> Result<bool, NumericsError> {
    if !all_finite(m) {
        return Err(NumericsError::NonFinite);
    }
    let asym = max_asymmetry(m);
    if asym > tol {
        return Err(NumericsError::Asymmetric { asym });
    }
    Ok(min_eigenvalue(m) >= -tol)
}

/// Matrix-valued function sampled on the uniform grid `t_k = k T / K`, `k = 0..=K`,
/// linear between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGridFn {
    horizon: f64,
    values: Vec<Mat>,
}

impl TimeGridFn {
    /// `values[k]` belongs to `t_k`; needs at least two samples of equal shape.
    pub fn new(horizon: f64, values: Vec<Mat>) -> Result<Self, NumericsError> {
        if values.len() < 2 || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(NumericsError::BadGrid);
        }
        let shape = values[0].shape();
        assert!(values.iter().all(|v| v.shape() == shape), "grid values must share a shape");
        Ok(TimeGridFn { horizon, values })
    }

    /// Samples `f(t_k)` on a `steps`-step grid.
    pub fn from_fn(
        horizon: f64,
        steps: usize,
        mut f: impl FnMut(usize, f64) -> Mat,
    ) -> Result<Self, NumericsError> {
        let dt = horizon / steps as f64;
        let values = (0..=steps).map(|k| f(k, k as f64 * dt)).collect();
        Self::new(horizon, values)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps() {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn value(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        &self.values[self.steps()]
    }

    /// Piecewise-linear evaluation; exact at grid points.
    pub fn at(&self, t: f64) -> Result<Mat, NumericsError> {
        let (k, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok(self.values[k].clone());
        }
        Ok(&self.values[k] * (1.0 - w) + &self.values[k + 1] * w)
    }

    /// Grid cell and weight of the right endpoint for `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), NumericsError> {
        let slack = 1e-12 * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(NumericsError::OutOfRange { t, horizon: self.horizon });
        }
        let steps = self.steps();
        let s = (t / self.dt()).clamp(0.0, steps as f64);
        let k = libm::floor(s) as usize;
        if k >= steps {
            return Ok((steps, 0.0));
        }
        Ok((k, s - k as f64))
    }

    pub fn map(&self, mut f: impl FnMut(&Mat) -> Mat) -> TimeGridFn {
        TimeGridFn { horizon: self.horizon, values: self.values.iter().map(&mut f).collect() }
    }

    /// Largest entry of `|f(value_k)|` over the grid.
    pub fn max_over_grid(&self, mut f: impl FnMut(usize, &Mat) -> f64) -> f64 {
        self.values.iter().enumerate().map(|(k, v)| f(k, v)).fold(0.0, f64::max)
    }

    pub fn same_grid(&self, other: &TimeGridFn) -> bool {
        self.values.len() == other.values.len() && self.horizon == other.horizon
    }
}

fn escapes(m: &Mat) -> bool {
    m.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP)
}

/// Classical RK4 run backward from `terminal` at `T` to 0 on a `steps`-step grid.
///
/// `rhs(t, y)` is the forward-time derivative `dy/dt`; stage `k` of a step from
/// `t` to `t − h` is evaluated at `t − c_k h`.
pub fn integrate_backward<E, F>(
    mut rhs: F,
    terminal: &Mat,
    horizon: f64,
    steps: usize,
) -> Result<TimeGridFn, E>
where
    E: From<NumericsError>,
    F: FnMut(f64, &Mat) -> Result<Mat, E>,
{
    if steps < 2 || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(NumericsError::BadGrid.into());
    }
    if escapes(terminal) {
        return Err(NumericsError::BlowUp { time: horizon }.into());
    }
    let h = horizon / steps as f64;
    let mut values = Vec::with_capacity(steps + 1);
    values.push(terminal.clone());
    let mut y = terminal.clone();
    for j in (0..steps).rev() {
        let t = if j + 1 == steps { horizon } else { (j + 1) as f64 * h };
        let t_mid = t - 0.5 * h;
        let t_next = j as f64 * h;
        let k1 = rhs(t, &y)?;
        let k2 = rhs(t_mid, &(&y - &k1 * (0.5 * h)))?;
        let k3 = rhs(t_mid, &(&y - &k2 * (0.5 * h)))?;
        let k4 = rhs(t_next, &(&y - &k3 * h))?;
        let incr = (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        y -= incr;
        if escapes(&y) {
            return Err(NumericsError::BlowUp { time: t_next }.into());
        }
        values.push(y.clone());
    }
    values.reverse();
    TimeGridFn::new(horizon, values).map_err(E::from)
}

/// Defect of a stored ODE solution at the cell midpoints.
///
/// The solution is rebuilt inside each cell as the cubic Hermite interpolant of
/// the grid values and grid derivatives; the returned value is the max-norm of
/// `y'(t_mid) − rhs(t_mid, y(t_mid))`, which is `O(Δ⁴)` for a fourth-order solution.
pub fn staggered_residual<E, F>(mut rhs: F, sol: &TimeGridFn) -> Result<f64, E>
where
    F: FnMut(f64, &Mat) -> Result<Mat, E>,
{
    let h = sol.dt();
    let mut f_prev = rhs(sol.time(0), sol.value(0))?;
    let mut worst: f64 = 0.0;
    for k in 0..sol.steps() {
        let f_next = rhs(sol.time(k + 1), sol.value(k + 1))?;
        let y0 = sol.value(k);
        let y1 = sol.value(k + 1);
        let y_mid = (y0 + y1) * 0.5 + (&f_prev - &f_next) * (h / 8.0);
        let dy_mid = (y1 - y0) * (1.5 / h) - (&f_prev + &f_next) * 0.25;
        let f_mid = rhs(sol.time(k) + 0.5 * h, &y_mid)?;
        worst = worst.max((dy_mid - f_mid).amax());
        f_prev = f_next;
    }
    Ok(worst)
}

/// Packs named blocks into one column state for joint integration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    len: usize,
}

impl BlockLayout {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut len = 0;
        for &(r, c) in shapes {
            offsets.push(len);
            len += r * c;
        }
        BlockLayout { shapes: shapes.to_vec(), offsets, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pack(&self, blocks: &[&Mat]) -> Mat {
        assert_eq!(blocks.len(), self.shapes.len());
        let mut out = Mat::zeros(self.len, 1);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.shape(), self.shapes[i], "block {} has the wrong shape", i);
            // column-major copy
            out.as_mut_slice()[self.offsets[i]..self.offsets[i] + b.len()]
                .copy_from_slice(b.as_slice());
        }
        out
    }

    pub fn block(&self, state: &Mat, i: usize) -> Mat {
        let (r, c) = self.shapes[i];
        let s = &state.as_slice()[self.offsets[i]..self.offsets[i] + r * c];
        Mat::from_column_slice(r, c, s)
    }

    pub fn unpack(&self, state: &Mat) -> Vec<Mat> {
        (0..self.shapes.len()).map(|i| self.block(state, i)).collect()
    }

    /// Extracts block `i` as its own grid function.
    pub fn split(&self, sol: &TimeGridFn, i: usize) -> TimeGridFn {
        sol.map(|v| self.block(v, i))
    }
}

/// Ordinary least-squares slope and its standard error for `y ≈ a + b x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - my - slope * (a - mx);
            e * e
        })
        .sum();
    let se = if x.len() > 2 { libm::sqrt(resid / (n - 2.0) / sxx) } else { f64::NAN };
    (slope, se)
}
