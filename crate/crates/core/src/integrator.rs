//! Adaptive stiff ODE integration with first-order forward sensitivities.
//!
//! The stepper is an L-stable, stiffly accurate SDIRK method with an embedded
//! error estimate and standard step-size control. Formula order is capped by
//! [`IntegratorConfig::max_order`]: order 4 (five stages) is used whenever the
//! cap allows it, with order-2 and order-1 fallbacks below that. Sensitivities
//! with respect to the initial state and selected parameters are propagated by
//! differentiating the converged stage equations, so they are consistent with
//! the variational equation of the system, and they participate in the local
//! error control through their own tolerance pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{lu_factor, lu_solve, wrms};

/// A parameterized autonomous ODE system `dy/dt = f(y, theta)` with analytic
/// Jacobians. `theta` is always the full parameter vector of the model family;
/// callers select free components separately.
pub trait OdeSystem {
    /// State dimension `m`.
    fn dim(&self) -> usize;
    /// Full parameter count `p`.
    fn n_params(&self) -> usize;
    /// Evaluate `f(y, theta)` into `dydt`.
    fn rhs(&self, y: &[f64], theta: &[f64], dydt: &mut [f64]);
    /// Evaluate `∂f/∂y` (m×m) into `jac`.
    fn jac_state(&self, y: &[f64], theta: &[f64], jac: &mut DMatrix<f64>);
    /// Evaluate `∂f/∂theta` (m×p) into `jac`.
    fn jac_params(&self, y: &[f64], theta: &[f64], jac: &mut DMatrix<f64>);
}

/// Integration tolerances and limits.
///
/// `rel_tol`/`abs_tol` control the nominal trajectory, the `_sens` pair the
/// forward sensitivities when they are requested.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(rename = "relTol")]
    pub rel_tol: f64,
    #[serde(rename = "absTol")]
    pub abs_tol: f64,
    #[serde(rename = "relTolSens")]
    pub rel_tol_sens: f64,
    #[serde(rename = "absTolSens")]
    pub abs_tol_sens: f64,
    /// Formula order cap, in 1..=6.
    #[serde(default = "default_max_order")]
    pub max_order: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_order() -> u32 {
    6
}

fn default_max_steps() -> usize {
    2_000_000
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-10,
            rel_tol_sens: 1e-8,
            abs_tol_sens: 1e-8,
            max_order: default_max_order(),
            max_steps: default_max_steps(),
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), IntegratorError> {
        let tols = [
            ("relTol", self.rel_tol),
            ("absTol", self.abs_tol),
            ("relTolSens", self.rel_tol_sens),
            ("absTolSens", self.abs_tol_sens),
        ];
        for (name, v) in tols {
            if !(v > 0.0) || !v.is_finite() {
                return Err(IntegratorError::BadConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(1..=6).contains(&self.max_order) {
            return Err(IntegratorError::BadConfig(format!(
                "max_order must be in 1..=6, got {}",
                self.max_order
            )));
        }
        if self.max_steps == 0 {
            return Err(IntegratorError::BadConfig("max_steps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error)]
pub enum IntegratorError {
    #[error("integrator step limit ({max_steps}) exceeded at t = {t}")]
    StepLimit { t: f64, max_steps: usize },
    #[error("state left representable range at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid integrator configuration: {0}")]
    BadConfig(String),
    #[error("invalid integration request: {0}")]
    BadRequest(String),
}

/// Terminal status of one integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegrationStatus {
    Ok,
    StepLimit,
    NonFinite,
}

/// Which sensitivities to propagate alongside the nominal trajectory.
#[derive(Debug, Clone, Default)]
pub struct SensRequest {
    /// Propagate `∂y(t1)/∂y(t0)` (an m×m block).
    pub initial: bool,
    /// Parameter indices (into the full parameter vector) to differentiate
    /// against; yields one column per index.
    pub params: Vec<usize>,
}

impl SensRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn initial_only() -> Self {
        Self { initial: true, params: Vec::new() }
    }

    pub fn full(n_params: usize) -> Self {
        Self { initial: true, params: (0..n_params).collect() }
    }

    fn n_cols(&self, dim: usize) -> usize {
        (if self.initial { dim } else { 0 }) + self.params.len()
    }

    fn is_empty(&self) -> bool {
        !self.initial && self.params.is_empty()
    }
}

/// Result of one integration over `[t0, t1]`.
#[derive(Debug, Clone)]
pub struct IntegrationResult {
    pub final_state: DVector<f64>,
    /// `∂y(t1)/∂y(t0)`, present when requested and status is `Ok`.
    pub sens_initial: Option<DMatrix<f64>>,
    /// `∂y(t1)/∂theta_j` for the requested parameter indices, one column each.
    pub sens_params: Option<DMatrix<f64>>,
    pub steps_taken: usize,
    pub status: IntegrationStatus,
}

impl IntegrationResult {
    /// Turn a non-ok status into a structured error.
    pub fn ok(self, t: f64, max_steps: usize) -> Result<IntegrationResult, IntegratorError> {
        match self.status {
            IntegrationStatus::Ok => Ok(self),
            IntegrationStatus::StepLimit => Err(IntegratorError::StepLimit { t, max_steps }),
            IntegrationStatus::NonFinite => Err(IntegratorError::NonFinite { t }),
        }
    }
}

// ---------------------------------------------------------------------------
// SDIRK tableaus
// ---------------------------------------------------------------------------

/// Butcher data for a singly diagonally implicit scheme with constant
/// diagonal `gamma` and a stiffly accurate last row. `a` holds the strictly
/// lower-triangular rows. `d` are the error-estimate weights on the stage
/// derivatives; `d0` weights `f(y_n)` (only used by the order-1 formula).
pub(crate) struct Tableau {
    pub emb_order: usize,
    pub gamma: f64,
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    pub d: &'static [f64],
    pub d0: f64,
}

/// Hairer-Wanner SDIRK of order 4 (L-stable, gamma = 1/4, five stages) with
/// an embedded order-3 estimate.
pub(crate) const SDIRK4: Tableau = Tableau {
    emb_order: 3,
    gamma: 0.25,
    a: &[
        &[],
        &[0.5],
        &[17.0 / 50.0, -1.0 / 25.0],
        &[371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0],
        &[25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0],
    ],
    b: &[25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
    d: &[-3.0 / 16.0, -27.0 / 32.0, 25.0 / 32.0, 0.0, 0.25],
    d0: 0.0,
};

const GAMMA2: f64 = 0.292893218813452475599155637895; // 1 - 1/sqrt(2)

/// Alexander's two-stage order-2 L-stable SDIRK, embedded order-1 estimate.
pub(crate) const SDIRK2: Tableau = Tableau {
    emb_order: 1,
    gamma: GAMMA2,
    a: &[&[], &[1.0 - GAMMA2]],
    b: &[1.0 - GAMMA2, GAMMA2],
    d: &[-GAMMA2, GAMMA2],
    d0: 0.0,
};

/// Implicit Euler with the classical local-error estimate h/2 (f(y1) - f(y0)).
pub(crate) const EULER1: Tableau = Tableau {
    emb_order: 1,
    gamma: 1.0,
    a: &[&[]],
    b: &[1.0],
    d: &[0.5],
    d0: -0.5,
};

fn select_tableau(max_order: u32) -> &'static Tableau {
    match max_order {
        1 => &EULER1,
        2 | 3 => &SDIRK2,
        _ => &SDIRK4,
    }
}

// ---------------------------------------------------------------------------
// Integrator
// ---------------------------------------------------------------------------

const NEWTON_MAX_ITER: usize = 12;
const NEWTON_TOL: f64 = 1e-3; // in local error-weight units
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 4.0;

/// Reusable integrator holding mutable workspace. One instance per thread of
/// execution; instances may be created and moved freely.
pub struct Integrator {
    cfg: IntegratorConfig,
    tab: &'static Tableau,
    // per-solve sensitivity layout
    n_init_cols: usize,
    param_idx: Vec<usize>,
    // workspace, sized on demand
    stage_k: Vec<DVector<f64>>,
    stage_ks: Vec<DMatrix<f64>>,
    jac: DMatrix<f64>,
    newton_mat: DMatrix<f64>,
    piv: Vec<usize>,
    jac_params: DMatrix<f64>,
}

impl Integrator {
    pub fn new(cfg: IntegratorConfig) -> Result<Self, IntegratorError> {
        cfg.validate()?;
        let tab = select_tableau(cfg.max_order);
        Ok(Self {
            cfg,
            tab,
            n_init_cols: 0,
            param_idx: Vec::new(),
            stage_k: Vec::new(),
            stage_ks: Vec::new(),
            jac: DMatrix::zeros(0, 0),
            newton_mat: DMatrix::zeros(0, 0),
            piv: Vec::new(),
            jac_params: DMatrix::zeros(0, 0),
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Integrate `sys` from `(t0, y0)` to `t1 >= t0`.
    pub fn solve(
        &mut self,
        sys: &dyn OdeSystem,
        t0: f64,
        t1: f64,
        y0: &[f64],
        theta: &[f64],
        sens: &SensRequest,
    ) -> Result<IntegrationResult, IntegratorError> {
        let m = sys.dim();
        if y0.len() != m {
            return Err(IntegratorError::BadRequest(format!(
                "y0 has length {}, system dimension is {m}",
                y0.len()
            )));
        }
        if theta.len() != sys.n_params() {
            return Err(IntegratorError::BadRequest(format!(
                "theta has length {}, system declares {} parameters",
                theta.len(),
                sys.n_params()
            )));
        }
        if !(t1 >= t0) {
            return Err(IntegratorError::BadRequest(format!("t1 = {t1} must be >= t0 = {t0}")));
        }
        if y0.iter().any(|v| !v.is_finite()) || theta.iter().any(|v| !v.is_finite()) {
            return Err(IntegratorError::BadRequest("non-finite y0 or theta".into()));
        }
        if let Some(&bad) = sens.params.iter().find(|&&j| j >= sys.n_params()) {
            return Err(IntegratorError::BadRequest(format!(
                "parameter sensitivity index {bad} out of range"
            )));
        }

        self.n_init_cols = if sens.initial { m } else { 0 };
        self.param_idx = sens.params.clone();
        let n_sens = sens.n_cols(m);

        let mut y = DVector::from_column_slice(y0);
        // sensitivity matrix: [∂y/∂y0 | ∂y/∂theta_sel], initialized [I | 0]
        let mut s_mat = DMatrix::zeros(m, n_sens);
        if sens.initial {
            for i in 0..m {
                s_mat[(i, i)] = 1.0;
            }
        }

        // exact identity for a zero-length interval
        if t1 == t0 {
            return Ok(self.make_result(y, s_mat, sens, 0, IntegrationStatus::Ok));
        }

        self.resize_workspace(m, n_sens);

        let span = t1 - t0;
        let mut t = t0;
        let mut h = self.initial_step(sys, y.as_slice(), theta, span);
        let mut steps = 0usize;
        let mut err_prev: Option<f64> = None;

        let mut y_next = DVector::zeros(m);
        let mut s_next = DMatrix::zeros(m, n_sens);

        while t < t1 {
            if steps >= self.cfg.max_steps {
                return Ok(self.failed(y, s_mat, sens, steps, IntegrationStatus::StepLimit));
            }
            h = h.min(t1 - t);
            if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                // step size collapsed; report as a step-limit failure
                return Ok(self.failed(y, s_mat, sens, steps, IntegrationStatus::StepLimit));
            }
            steps += 1;

            match self.try_step(sys, theta, &y, &s_mat, h, &mut y_next, &mut s_next) {
                StepOutcome::Accept { err } => {
                    let q = self.tab.emb_order as f64 + 1.0;
                    let fac = if err > 0.0 { SAFETY * err.powf(-1.0 / q) } else { FAC_MAX };
                    let mut fac = fac.clamp(FAC_MIN, FAC_MAX);
                    // mild PI smoothing against the previous accepted error
                    if let Some(ep) = err_prev {
                        if ep > 0.0 && err > 0.0 {
                            fac = (fac * (ep / err).powf(0.08)).clamp(FAC_MIN, FAC_MAX);
                        }
                    }
                    err_prev = Some(err.max(1e-10));
                    t += h;
                    h *= fac;
                    std::mem::swap(&mut y, &mut y_next);
                    std::mem::swap(&mut s_mat, &mut s_next);
                }
                StepOutcome::Reject { err } => {
                    let q = self.tab.emb_order as f64 + 1.0;
                    let fac = if err.is_finite() && err > 0.0 {
                        (SAFETY * err.powf(-1.0 / q)).clamp(0.1, 0.5)
                    } else {
                        0.25
                    };
                    h *= fac;
                    err_prev = None;
                }
                StepOutcome::NewtonFail => {
                    h /= 3.0;
                    err_prev = None;
                }
                StepOutcome::NonFinite => {
                    return Ok(self.failed(y, s_mat, sens, steps, IntegrationStatus::NonFinite));
                }
            }
        }

        if y.iter().any(|v| !v.is_finite()) || s_mat.iter().any(|v| !v.is_finite()) {
            return Ok(self.failed(y, s_mat, sens, steps, IntegrationStatus::NonFinite));
        }
        Ok(self.make_result(y, s_mat, sens, steps, IntegrationStatus::Ok))
    }

    fn failed(
        &self,
        y: DVector<f64>,
        s_mat: DMatrix<f64>,
        sens: &SensRequest,
        steps: usize,
        status: IntegrationStatus,
    ) -> IntegrationResult {
        let mut r = self.make_result(y, s_mat, sens, steps, status);
        r.sens_initial = None;
        r.sens_params = None;
        r
    }

    fn make_result(
        &self,
        y: DVector<f64>,
        s_mat: DMatrix<f64>,
        sens: &SensRequest,
        steps: usize,
        status: IntegrationStatus,
    ) -> IntegrationResult {
        let m = y.len();
        let (sens_initial, sens_params) = if sens.is_empty() {
            (None, None)
        } else {
            let init = if sens.initial { Some(s_mat.columns(0, m).into_owned()) } else { None };
            let off = if sens.initial { m } else { 0 };
            let par = if sens.params.is_empty() {
                None
            } else {
                Some(s_mat.columns(off, sens.params.len()).into_owned())
            };
            (init, par)
        };
        IntegrationResult { final_state: y, sens_initial, sens_params, steps_taken: steps, status }
    }

    fn resize_workspace(&mut self, m: usize, n_sens: usize) {
        let s = self.tab.b.len();
        if self.stage_k.len() != s || self.stage_k.first().map(|v| v.len()) != Some(m) {
            self.stage_k = (0..s).map(|_| DVector::zeros(m)).collect();
        }
        if self.stage_ks.len() != s || self.stage_ks.first().map(|v| v.shape()) != Some((m, n_sens))
        {
            self.stage_ks = (0..s).map(|_| DMatrix::zeros(m, n_sens)).collect();
        }
        if self.jac.shape() != (m, m) {
            self.jac = DMatrix::zeros(m, m);
            self.newton_mat = DMatrix::zeros(m, m);
        }
    }

    fn initial_step(&self, sys: &dyn OdeSystem, y: &[f64], theta: &[f64], span: f64) -> f64 {
        let m = y.len();
        let mut f0 = vec![0.0; m];
        sys.rhs(y, theta, &mut f0);
        let w: Vec<f64> =
            y.iter().map(|yi| self.cfg.abs_tol + self.cfg.rel_tol * yi.abs()).collect();
        let d0 = wrms(y, &w);
        let d1 = wrms(&f0, &w);
        let h = if d1 > 1e-12 { 0.01 * d0.max(1e-6) / d1 } else { 1e-3 * span };
        h.clamp(1e-10 * span.max(1.0), span)
    }

    /// Attempt one SDIRK step of size `h` from state `y` (sensitivities
    /// `s_mat`). On success the proposed state lands in `y_next`/`s_next`.
    #[allow(clippy::too_many_arguments)]
    fn try_step(
        &mut self,
        sys: &dyn OdeSystem,
        theta: &[f64],
        y: &DVector<f64>,
        s_mat: &DMatrix<f64>,
        h: f64,
        y_next: &mut DVector<f64>,
        s_next: &mut DMatrix<f64>,
    ) -> StepOutcome {
        let tab = self.tab;
        let m = y.len();
        let n_sens = s_mat.ncols();
        let n_stages = tab.b.len();
        let gamma = tab.gamma;

        // error weights based on the step's starting state
        let ewt: Vec<f64> =
            y.iter().map(|yi| self.cfg.abs_tol + self.cfg.rel_tol * yi.abs()).collect();

        let mut f0 = DVector::zeros(m);
        if tab.d0 != 0.0 {
            sys.rhs(y.as_slice(), theta, f0.as_mut_slice());
            if f0.iter().any(|v| !v.is_finite()) {
                return StepOutcome::NonFinite;
            }
        }

        let mut stage_y = DVector::zeros(m);
        let mut sum_prev = DVector::zeros(m);
        let mut resid = DVector::zeros(m);
        let mut rhs_buf = DVector::zeros(m);
        let mut lu_matches_stage = false;

        for i in 0..n_stages {
            // explicit accumulation of previous stages
            sum_prev.copy_from(y);
            for (j, a_ij) in tab.a[i].iter().enumerate() {
                if *a_ij != 0.0 {
                    sum_prev.axpy(h * a_ij, &self.stage_k[j], 1.0);
                }
            }
            stage_y.copy_from(&sum_prev);

            // Newton iteration for Y = sum_prev + h*gamma*f(Y)
            let mut factored = false;
            let mut converged = false;
            let mut last_norm = f64::INFINITY;
            lu_matches_stage = false;
            for _ in 0..NEWTON_MAX_ITER {
                sys.rhs(stage_y.as_slice(), theta, rhs_buf.as_mut_slice());
                if rhs_buf.iter().any(|v| !v.is_finite()) {
                    return StepOutcome::NonFinite;
                }
                resid.copy_from(&stage_y);
                resid -= &sum_prev;
                resid.axpy(-h * gamma, &rhs_buf, 1.0);
                if !factored {
                    if !self.factor_newton(sys, stage_y.as_slice(), theta, h * gamma) {
                        return StepOutcome::NewtonFail;
                    }
                    factored = true;
                }
                let mut delta = resid.as_slice().to_vec();
                lu_solve(&self.newton_mat, &self.piv, &mut delta);
                for (yv, d) in stage_y.iter_mut().zip(&delta) {
                    *yv -= d;
                }
                let norm = wrms(&delta, &ewt);
                if !norm.is_finite() {
                    return StepOutcome::NonFinite;
                }
                if norm <= NEWTON_TOL {
                    converged = true;
                    break;
                }
                if norm > 0.7 * last_norm {
                    // slow contraction: refresh the Jacobian at the current iterate
                    if !self.factor_newton(sys, stage_y.as_slice(), theta, h * gamma) {
                        return StepOutcome::NewtonFail;
                    }
                }
                last_norm = norm;
            }
            if !converged {
                return StepOutcome::NewtonFail;
            }

            // consistent stage derivative without an extra f evaluation
            let kg = &mut self.stage_k[i];
            kg.copy_from(&stage_y);
            *kg -= &sum_prev;
            *kg /= h * gamma;

            // sensitivity stages: one linear solve per column with the
            // Jacobian evaluated at the converged stage value
            if n_sens > 0 {
                if !self.factor_newton(sys, stage_y.as_slice(), theta, h * gamma) {
                    return StepOutcome::NewtonFail;
                }
                lu_matches_stage = true;
                if !self.param_idx.is_empty() {
                    if self.jac_params.shape() != (m, sys.n_params()) {
                        self.jac_params = DMatrix::zeros(m, sys.n_params());
                    }
                    sys.jac_params(stage_y.as_slice(), theta, &mut self.jac_params);
                }
                for col in 0..n_sens {
                    // base = S_col + h * sum_j a_ij * kS_j[col]
                    rhs_buf.copy_from(&s_mat.column(col));
                    for (j, a_ij) in tab.a[i].iter().enumerate() {
                        if *a_ij != 0.0 {
                            rhs_buf.axpy(h * a_ij, &self.stage_ks[j].column(col), 1.0);
                        }
                    }
                    let mut rhs = &self.jac * &rhs_buf;
                    if col >= self.n_init_cols {
                        let pidx = self.param_idx[col - self.n_init_cols];
                        rhs += self.jac_params.column(pidx);
                    }
                    let mut sol = rhs.as_slice().to_vec();
                    lu_solve(&self.newton_mat, &self.piv, &mut sol);
                    self.stage_ks[i].column_mut(col).copy_from_slice(&sol);
                }
            }
        }

        // combine stages
        y_next.copy_from(y);
        for (i, b_i) in tab.b.iter().enumerate() {
            if *b_i != 0.0 {
                y_next.axpy(h * b_i, &self.stage_k[i], 1.0);
            }
        }
        if y_next.iter().any(|v| !v.is_finite()) {
            return StepOutcome::NonFinite;
        }
        if n_sens > 0 {
            s_next.copy_from(s_mat);
            for (i, b_i) in tab.b.iter().enumerate() {
                if *b_i != 0.0 {
                    let w = h * b_i;
                    for (dst, src) in s_next.iter_mut().zip(self.stage_ks[i].iter()) {
                        *dst += w * src;
                    }
                }
            }
            if s_next.iter().any(|v| !v.is_finite()) {
                return StepOutcome::NonFinite;
            }
        }

        // embedded error estimate, smoothed by (I - h*gamma*J)^{-1}
        if !lu_matches_stage {
            let ylast = stage_y.as_slice().to_vec();
            if !self.factor_newton(sys, &ylast, theta, h * gamma) {
                return StepOutcome::NewtonFail;
            }
        }
        let mut est = DVector::zeros(m);
        if tab.d0 != 0.0 {
            est.axpy(h * tab.d0, &f0, 1.0);
        }
        for (i, d_i) in tab.d.iter().enumerate() {
            if *d_i != 0.0 {
                est.axpy(h * d_i, &self.stage_k[i], 1.0);
            }
        }
        let mut est_s = est.as_slice().to_vec();
        lu_solve(&self.newton_mat, &self.piv, &mut est_s);
        let mut err = wrms(&est_s, &ewt);

        if n_sens > 0 {
            let mut col_buf = vec![0.0; m];
            let mut sum_sq = 0.0;
            for c in 0..n_sens {
                for (r, slot) in col_buf.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (i, d_i) in tab.d.iter().enumerate() {
                        v += h * d_i * self.stage_ks[i][(r, c)];
                    }
                    *slot = v;
                }
                lu_solve(&self.newton_mat, &self.piv, &mut col_buf);
                for (r, v) in col_buf.iter().enumerate() {
                    let w = self.cfg.abs_tol_sens + self.cfg.rel_tol_sens * s_mat[(r, c)].abs();
                    let ratio = v / w;
                    sum_sq += ratio * ratio;
                }
            }
            let err_sens = (sum_sq / (m * n_sens) as f64).sqrt();
            if !err_sens.is_finite() {
                return StepOutcome::NonFinite;
            }
            err = err.max(err_sens);
        }

        if !err.is_finite() {
            return StepOutcome::NonFinite;
        }
        if err <= 1.0 {
            StepOutcome::Accept { err }
        } else {
            StepOutcome::Reject { err }
        }
    }

    fn factor_newton(&mut self, sys: &dyn OdeSystem, y: &[f64], theta: &[f64], hg: f64) -> bool {
        sys.jac_state(y, theta, &mut self.jac);
        if self.jac.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let m = y.len();
        self.newton_mat.copy_from(&self.jac);
        self.newton_mat *= -hg;
        for i in 0..m {
            self.newton_mat[(i, i)] += 1.0;
        }
        lu_factor(&mut self.newton_mat, &mut self.piv)
    }
}

enum StepOutcome {
    Accept { err: f64 },
    Reject { err: f64 },
    NewtonFail,
    NonFinite,
}

/// One-shot convenience wrapper around [`Integrator::solve`]. `want_sens`
/// requests the full sensitivity set: the initial-state block plus all
/// parameters.
pub fn integrate(
    sys: &dyn OdeSystem,
    t0: f64,
    t1: f64,
    y0: &[f64],
    theta: &[f64],
    cfg: &IntegratorConfig,
    want_sens: bool,
) -> Result<IntegrationResult, IntegratorError> {
    let mut integ = Integrator::new(cfg.clone())?;
    let sens = if want_sens { SensRequest::full(sys.n_params()) } else { SensRequest::none() };
    integ.solve(sys, t0, t1, y0, theta, &sens)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dy/dt = -a*y, closed form y0*exp(-a*t).
    struct Decay;

    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn rhs(&self, y: &[f64], theta: &[f64], dydt: &mut [f64]) {
            dydt[0] = -theta[0] * y[0];
        }
        fn jac_state(&self, _y: &[f64], theta: &[f64], jac: &mut DMatrix<f64>) {
            jac[(0, 0)] = -theta[0];
        }
        fn jac_params(&self, y: &[f64], _theta: &[f64], jac: &mut DMatrix<f64>) {
            jac[(0, 0)] = -y[0];
        }
    }

    fn tableau_weight_sums(tab: &Tableau) -> (f64, f64) {
        (tab.b.iter().sum(), tab.d.iter().sum::<f64>() + tab.d0)
    }

    /// Order conditions for the order-4 pair; a wrong coefficient anywhere
    /// shows up here immediately.
    #[test]
    fn sdirk4_order_conditions() {
        let tab = &SDIRK4;
        let s = tab.b.len();
        // full A including the diagonal
        let mut a = vec![vec![0.0; s]; s];
        for i in 0..s {
            for (j, v) in tab.a[i].iter().enumerate() {
                a[i][j] = *v;
            }
            a[i][i] = tab.gamma;
        }
        let c: Vec<f64> = (0..s).map(|i| a[i].iter().sum()).collect();
        assert!((c[0] - 0.25).abs() < 1e-14);
        assert!((c[4] - 1.0).abs() < 1e-14);

        let b = tab.b;
        let bh: Vec<f64> = (0..s).map(|i| b[i] - tab.d[i]).collect();

        let dot = |w: &[f64], f: &dyn Fn(usize) -> f64| -> f64 {
            (0..s).map(|i| w[i] * f(i)).sum()
        };
        let ac = |i: usize, pow: u32| -> f64 {
            (0..s).map(|j| a[i][j] * c[j].powi(pow as i32)).sum()
        };

        // b: order 4
        assert!((dot(b, &|_| 1.0) - 1.0).abs() < 1e-13);
        assert!((dot(b, &|i| c[i]) - 0.5).abs() < 1e-13);
        assert!((dot(b, &|i| c[i] * c[i]) - 1.0 / 3.0).abs() < 1e-13);
        assert!((dot(b, &|i| ac(i, 1)) - 1.0 / 6.0).abs() < 1e-13);
        assert!((dot(b, &|i| c[i].powi(3)) - 0.25).abs() < 1e-13);
        assert!((dot(b, &|i| c[i] * ac(i, 1)) - 1.0 / 8.0).abs() < 1e-13);
        assert!((dot(b, &|i| ac(i, 2)) - 1.0 / 12.0).abs() < 1e-13);
        let aac: Vec<f64> =
            (0..s).map(|i| (0..s).map(|j| a[i][j] * ac(j, 1)).sum()).collect();
        assert!((dot(b, &|i| aac[i]) - 1.0 / 24.0).abs() < 1e-13);

        // embedded: order 3 but not 4
        assert!((dot(&bh, &|_| 1.0) - 1.0).abs() < 1e-13);
        assert!((dot(&bh, &|i| c[i]) - 0.5).abs() < 1e-13);
        assert!((dot(&bh, &|i| c[i] * c[i]) - 1.0 / 3.0).abs() < 1e-13);
        assert!((dot(&bh, &|i| ac(i, 1)) - 1.0 / 6.0).abs() < 1e-13);
        assert!((dot(&bh, &|i| c[i].powi(3)) - 0.25).abs() > 1e-3);
    }

    #[test]
    fn tableau_consistency() {
        for tab in [&SDIRK4, &SDIRK2, &EULER1] {
            let (sb, sd) = tableau_weight_sums(tab);
            assert!((sb - 1.0).abs() < 1e-14);
            assert!(sd.abs() < 1e-14, "error weights must sum to zero");
        }
    }

    #[test]
    fn decay_matches_closed_form() {
        let cfg = IntegratorConfig {
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            ..IntegratorConfig::default()
        };
        let r = integrate(&Decay, 0.0, 1.0, &[1.0], &[1.0], &cfg, false).unwrap();
        assert_eq!(r.status, IntegrationStatus::Ok);
        let exact = (-1.0f64).exp();
        assert!(
            ((r.final_state[0] - exact) / exact).abs() <= 1e-12,
            "rel err {}",
            ((r.final_state[0] - exact) / exact).abs()
        );
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let cfg = IntegratorConfig::default();
        let r = integrate(&Decay, 2.0, 2.0, &[3.5], &[1.0], &cfg, true).unwrap();
        assert_eq!(r.final_state[0], 3.5);
        assert_eq!(r.sens_initial.as_ref().unwrap()[(0, 0)], 1.0);
        assert_eq!(r.sens_params.as_ref().unwrap()[(0, 0)], 0.0);
        assert_eq!(r.steps_taken, 0);
    }

    #[test]
    fn decay_sensitivities_match_closed_form() {
        // y(t) = y0 exp(-a t): dy/dy0 = exp(-a), dy/da = -t y0 exp(-a t)
        let cfg = IntegratorConfig {
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            rel_tol_sens: 1e-10,
            abs_tol_sens: 1e-12,
            ..IntegratorConfig::default()
        };
        let r = integrate(&Decay, 0.0, 1.0, &[2.0], &[0.7], &cfg, true).unwrap();
        let e = (-0.7f64).exp();
        let s_init = r.sens_initial.unwrap()[(0, 0)];
        let s_par = r.sens_params.unwrap()[(0, 0)];
        assert!((s_init - e).abs() < 1e-10);
        assert!((s_par - (-2.0 * e)).abs() < 1e-9);
    }

    #[test]
    fn step_limit_reported() {
        let cfg = IntegratorConfig { max_steps: 3, ..IntegratorConfig::default() };
        let r = integrate(&Decay, 0.0, 100.0, &[1.0], &[1.0], &cfg, false).unwrap();
        assert_eq!(r.status, IntegrationStatus::StepLimit);
        assert!(r.ok(0.0, 3).is_err());
    }

    /// Stiff ODE: dy/dt = lambda (y - cos t) - sin t ... kept autonomous by
    /// using the classical Prothero-Robinson-like linear test instead:
    /// y' = lambda*(y - 1), y(0) = 2 -> y(t) = 1 + exp(lambda t).
    struct StiffLinear;

    impl OdeSystem for StiffLinear {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn rhs(&self, y: &[f64], theta: &[f64], dydt: &mut [f64]) {
            dydt[0] = theta[0] * (y[0] - 1.0);
        }
        fn jac_state(&self, _y: &[f64], theta: &[f64], jac: &mut DMatrix<f64>) {
            jac[(0, 0)] = theta[0];
        }
        fn jac_params(&self, y: &[f64], _theta: &[f64], jac: &mut DMatrix<f64>) {
            jac[(0, 0)] = y[0] - 1.0;
        }
    }

    #[test]
    fn stiff_decay_is_cheap() {
        // lambda = -1e6: an explicit method would need ~1e6 steps per unit time
        let cfg = IntegratorConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            ..IntegratorConfig::default()
        };
        let r = integrate(&StiffLinear, 0.0, 1.0, &[2.0], &[-1e6], &cfg, false).unwrap();
        assert_eq!(r.status, IntegrationStatus::Ok);
        assert!((r.final_state[0] - 1.0).abs() < 1e-8);
        assert!(r.steps_taken < 500, "took {} steps", r.steps_taken);
    }

    #[test]
    fn low_order_formulas_work() {
        // a first-order method with per-step error <= tol reaches global
        // accuracy ~ sqrt(tol); order 2 does much better
        for (max_order, budget) in [(1u32, 2e-4), (2, 2e-6), (3, 2e-6)] {
            let cfg = IntegratorConfig {
                rel_tol: 1e-8,
                abs_tol: 1e-10,
                max_order,
                ..IntegratorConfig::default()
            };
            let r = integrate(&Decay, 0.0, 1.0, &[1.0], &[1.0], &cfg, false).unwrap();
            assert_eq!(r.status, IntegrationStatus::Ok);
            let exact = (-1.0f64).exp();
            assert!(
                (r.final_state[0] - exact).abs() < budget,
                "order cap {max_order}: err {}",
                (r.final_state[0] - exact).abs()
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = IntegratorConfig::default();
        cfg.max_order = 7;
        assert!(cfg.validate().is_err());
        cfg.max_order = 3;
        cfg.rel_tol = 0.0;
        assert!(cfg.validate().is_err());
    }
}
