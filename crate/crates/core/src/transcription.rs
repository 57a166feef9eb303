//! Multiple-shooting transcription of the design problem and the
//! single-shooting design evaluator.
//!
//! The transcribed NLP has variables (tau | y_I | dt | c | shooting nodes),
//! matching equality constraints with perturbation injection, the horizon
//! equality, and one epigraph inequality per (model pair, parameter point).
//! The single-shooting evaluator walks both trajectories sequentially,
//! injecting perturbations at interior nodes, and returns the criterion value
//! and (optionally) adjoint gradients; it is the oracle behind the inner
//! worst-case search and the consistency tests.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::criterion::{
    cnorm_and_argmax, criterion, criterion_symmetrized, criterion_with_partials, CriterionError,
    CriterionInput,
};
use crate::design::{DesignError, DesignSpec, DesignVector, UNBOUNDED};
use crate::integrator::{
    Integrator, IntegratorConfig, IntegratorError, SensRequest,
};
use crate::models::{HypothesisSet, ModelError, ModelSpec};
use crate::nlp::{ChainBlock, ChainStructure, EvalFail, Evaluation, NlpProblem};
use crate::outer::DiscretizedParamSet;

#[derive(Debug, Clone, Error)]
pub enum TranscriptionError {
    #[error("integration failed in interval {interval} of model '{model}': {source}")]
    Integration {
        model: String,
        interval: usize,
        #[source]
        source: IntegratorError,
    },
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty discretized parameter set for pair ({0}, {1})")]
    EmptyThetaSet(usize, usize),
}

// ---------------------------------------------------------------------------
// Single-shooting evaluation
// ---------------------------------------------------------------------------

/// One model's trajectory data through the measurement grid: the
/// post-perturbation node states and per-interval sensitivities.
struct ShotTrajectory {
    /// s_i = y(t_i-) + c_i for i < n, s_n = y(t_n-); length n.
    nodes: Vec<DVector<f64>>,
    /// Pre-perturbation endpoint states y(t_i-).
    endpoints: Vec<DVector<f64>>,
    /// d y(t_i-) / d s_{i-1}, present when gradients were requested.
    trans: Vec<DMatrix<f64>>,
    /// d y(t_i-) / d theta_free, present when theta gradients were requested.
    par: Vec<DMatrix<f64>>,
}

fn shoot_model(
    model: &ModelSpec,
    theta_full: &[f64],
    xi: &DesignVector,
    integ: &mut Integrator,
    want_state_sens: bool,
    want_theta_sens: bool,
) -> Result<ShotTrajectory, TranscriptionError> {
    let m = model.dim();
    let n = xi.n_points();
    let sens = SensRequest {
        initial: want_state_sens || want_theta_sens,
        params: if want_theta_sens { model.free_indices().to_vec() } else { Vec::new() },
    };
    let mut nodes = Vec::with_capacity(n);
    let mut endpoints = Vec::with_capacity(n);
    let mut trans = Vec::new();
    let mut par = Vec::new();
    let mut state: DVector<f64> = DVector::from_iterator(m, xi.y_i.iter().take(m).cloned());
    let mut t = 0.0;
    for i in 1..=n {
        let dt = xi.dt[i - 1];
        let res = integ
            .solve(model.family_sys(), t, t + dt, state.as_slice(), theta_full, &sens)
            .and_then(|r| r.ok(t, integ.config().max_steps))
            .map_err(|e| TranscriptionError::Integration {
                model: model.name.clone(),
                interval: i,
                source: e,
            })?;
        t += dt;
        let mut end = res.final_state;
        endpoints.push(end.clone());
        if let Some(g) = res.sens_initial {
            trans.push(g);
        }
        if want_theta_sens {
            par.push(res.sens_params.unwrap_or_else(|| DMatrix::zeros(m, 0)));
        }
        if i < n {
            // inject the perturbation; trailing design entries beyond the
            // model dimension are ignored
            let c_i = xi.c_at(i);
            for (k, v) in end.iter_mut().take(m).enumerate() {
                *v += c_i[k];
            }
        }
        nodes.push(end.clone());
        state = end;
    }
    Ok(ShotTrajectory { nodes, endpoints, trans, par })
}

/// Observations, standard deviations, and measurement times for a trajectory.
fn observe_all(
    model: &ModelSpec,
    nodes: &[DVector<f64>],
    times: &[f64],
    theta_full: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TranscriptionError> {
    let o = model.obs_dim();
    let mut obs = Vec::with_capacity(nodes.len());
    let mut sds = Vec::with_capacity(nodes.len());
    for (node, t) in nodes.iter().zip(times) {
        let mut ob = vec![0.0; o];
        model.observe(node.as_slice(), &mut ob);
        let mut sd = vec![0.0; o];
        model.error.std_devs(&ob, *t, theta_full, &mut sd)?;
        obs.push(ob);
        sds.push(sd);
    }
    Ok((obs, sds))
}

fn cnorms(xi: &DesignVector) -> Vec<f64> {
    (1..xi.n_points()).map(|i| cnorm_and_argmax(xi.c_at(i).as_slice()).0).collect()
}

fn measurement_times(dt: &DVector<f64>) -> Vec<f64> {
    let mut t = 0.0;
    dt.iter()
        .map(|d| {
            t += d;
            t
        })
        .collect()
}

/// Criterion value of a design for one model pair at given free parameters.
pub fn evaluate_design(
    h: &HypothesisSet,
    d: &DesignSpec,
    xi: &DesignVector,
    pair: (usize, usize),
    free_null: &[f64],
    free_alt: &[f64],
    ic: &IntegratorConfig,
) -> Result<f64, TranscriptionError> {
    let (m1, m2) = h.pair(pair);
    let th1 = m1.resolve_theta(free_null);
    let th2 = m2.resolve_theta(free_alt);
    let mut integ = Integrator::new(ic.clone())
        .map_err(|e| TranscriptionError::Integration {
            model: String::new(),
            interval: 0,
            source: e,
        })?;
    let tr1 = shoot_model(m1, &th1, xi, &mut integ, false, false)?;
    let tr2 = shoot_model(m2, &th2, xi, &mut integ, false, false)?;
    let times = measurement_times(&xi.dt);
    let (obs1, sd1) = observe_all(m1, &tr1.nodes, &times, &th1)?;
    let (obs2, sd2) = observe_all(m2, &tr2.nodes, &times, &th2)?;
    let cn = cnorms(xi);
    let input = CriterionInput {
        obs1: &obs1,
        obs2: &obs2,
        sd1: &sd1,
        sd2: &sd2,
        dt: xi.dt.as_slice(),
        c_norms: &cn,
        sp: &d.gates,
        use_perturb_gate: d.use_perturb_gate,
    };
    if d.symmetrized {
        Ok(criterion_symmetrized(&input)?)
    } else {
        Ok(criterion(&input)?)
    }
}

/// Criterion value with gradients from one reverse sweep per model.
#[derive(Debug, Clone)]
pub struct DesignEval {
    pub value: f64,
    pub grad_y_i: DVector<f64>,
    pub grad_dt: DVector<f64>,
    /// Full m_max x (n-1) gradient; entries outside the free layout are
    /// still meaningful (they are directional derivatives) but unused.
    pub grad_c: DMatrix<f64>,
    pub grad_theta_null: Vec<f64>,
    pub grad_theta_alt: Vec<f64>,
}

/// Which gradients [`evaluate_design_grad`] should produce.
#[derive(Debug, Clone, Copy)]
pub struct GradRequest {
    pub design: bool,
    pub theta: bool,
}

pub fn evaluate_design_grad(
    h: &HypothesisSet,
    d: &DesignSpec,
    xi: &DesignVector,
    pair: (usize, usize),
    free_null: &[f64],
    free_alt: &[f64],
    ic: &IntegratorConfig,
    want: GradRequest,
) -> Result<DesignEval, TranscriptionError> {
    let (mo1, mo2) = h.pair(pair);
    let th1 = mo1.resolve_theta(free_null);
    let th2 = mo2.resolve_theta(free_alt);
    let n = xi.n_points();
    let m_max = xi.y_i.len();
    let mut integ = Integrator::new(ic.clone())
        .map_err(|e| TranscriptionError::Integration {
            model: String::new(),
            interval: 0,
            source: e,
        })?;
    let tr1 = shoot_model(mo1, &th1, xi, &mut integ, want.design || want.theta, want.theta)?;
    let tr2 = shoot_model(mo2, &th2, xi, &mut integ, want.design || want.theta, want.theta)?;
    let times = measurement_times(&xi.dt);
    let (obs1, sd1) = observe_all(mo1, &tr1.nodes, &times, &th1)?;
    let (obs2, sd2) = observe_all(mo2, &tr2.nodes, &times, &th2)?;
    let cn = cnorms(xi);
    let input = CriterionInput {
        obs1: &obs1,
        obs2: &obs2,
        sd1: &sd1,
        sd2: &sd2,
        dt: xi.dt.as_slice(),
        c_norms: &cn,
        sp: &d.gates,
        use_perturb_gate: d.use_perturb_gate,
    };
    let (value, node_grads) = criterion_with_partials(&input, d.symmetrized)?;

    let mut out = DesignEval {
        value,
        grad_y_i: DVector::zeros(m_max),
        grad_dt: DVector::zeros(n),
        grad_c: DMatrix::zeros(m_max, n - 1),
        grad_theta_null: vec![0.0; free_null.len()],
        grad_theta_alt: vec![0.0; free_alt.len()],
    };

    // gate contributions (shared between the two models)
    if want.design {
        for i in 0..n {
            out.grad_dt[i] += node_grads[i].d_dt;
        }
        if d.use_perturb_gate {
            for i in 1..n {
                let (_, arg) = cnorm_and_argmax(xi.c_at(i).as_slice());
                if let Some(j) = arg {
                    let sgn = xi.c_at(i)[j].signum();
                    out.grad_c[(j, i - 1)] += node_grads[i - 1].d_cnorm * sgn;
                }
            }
        }
    }

    // per-model adjoint sweeps
    for side in 0..2 {
        let (model, tr, theta, obs) = if side == 0 {
            (mo1, &tr1, &th1, &obs1)
        } else {
            (mo2, &tr2, &th2, &obs2)
        };
        let m = model.dim();
        // lifted per-node criterion partials dI/ds_i
        let mut g_nodes: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let ng = &node_grads[i];
            let (d_o, d_v) = if side == 0 { (&ng.d_o1, &ng.d_v1) } else { (&ng.d_o2, &ng.d_v2) };
            let mut g = DVector::zeros(m);
            for (k, &st) in model.observable.iter().enumerate() {
                g[st] += d_o[k];
            }
            // state-dependent error model: add dI/dv * dv/dO by differences
            if !model.error.is_constant() {
                let o_dim = model.obs_dim();
                let base_obs = &obs[i];
                for kk in 0..o_dim {
                    let hstep = 1e-6 * (1.0 + base_obs[kk].abs());
                    let mut op = base_obs.clone();
                    let mut sp_v = vec![0.0; o_dim];
                    let mut sm_v = vec![0.0; o_dim];
                    op[kk] += hstep;
                    model.error.std_devs(&op, times[i], theta, &mut sp_v)?;
                    op[kk] = base_obs[kk] - hstep;
                    model.error.std_devs(&op, times[i], theta, &mut sm_v)?;
                    let mut acc = 0.0;
                    for q in 0..o_dim {
                        acc += d_v[q] * (sp_v[q] - sm_v[q]) / (2.0 * hstep);
                    }
                    g[model.observable[kk]] += acc;
                }
            }
            g_nodes.push(g);
        }
        // adjoint: w_i = g_i + G_{i+1}^T w_{i+1}
        let mut w = g_nodes[n - 1].clone();
        let mut f_end = vec![0.0; m];
        for i in (1..=n).rev() {
            if want.design {
                // d/d(dt_i) through the interval endpoint
                model.family_sys().rhs(tr.endpoints[i - 1].as_slice(), theta, &mut f_end);
                let mut dot = 0.0;
                for k in 0..m {
                    dot += w[k] * f_end[k];
                }
                out.grad_dt[i - 1] += dot;
                if i < n {
                    for k in 0..m.min(m_max) {
                        out.grad_c[(k, i - 1)] += w[k];
                    }
                }
            }
            if want.theta {
                let p = &tr.par[i - 1];
                let gt = if side == 0 { &mut out.grad_theta_null } else { &mut out.grad_theta_alt };
                for j in 0..gt.len() {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += w[k] * p[(k, j)];
                    }
                    gt[j] += acc;
                }
            }
            // pull back through the interval
            let g_mat = &tr.trans[i - 1];
            let pulled = g_mat.transpose() * &w;
            if i > 1 {
                w = &g_nodes[i - 2] + pulled;
            } else if want.design {
                for k in 0..m.min(m_max) {
                    out.grad_y_i[k] += pulled[k];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transcription
// ---------------------------------------------------------------------------

/// Where a chain's variables and matching rows live.
#[derive(Debug, Clone)]
pub struct ChainInfo {
    pub pair: usize,
    pub point: usize,
    /// 0 = null-side model, 1 = alternative-side model.
    pub side: usize,
    pub dim: usize,
    pub var_start: usize,
    pub row_start: usize,
}

/// Stable variable layout of the transcribed NLP.
#[derive(Debug, Clone)]
pub struct Layout {
    pub n: usize,
    pub m_max: usize,
    pub idx_tau: usize,
    pub y_i_start: usize,
    pub dt_start: usize,
    pub c_start: usize,
    /// Free perturbation variables: (slot index into DesignSpec::perturb,
    /// state index), in variable order.
    pub c_vars: Vec<(usize, usize)>,
    pub chains: Vec<ChainInfo>,
    pub n_vars: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl Layout {
    pub fn dt_var(&self, i: usize) -> usize {
        self.dt_start + i
    }

    /// Variable index of the free c component at perturbation slot/state, if
    /// that component is free.
    pub fn c_var(&self, slot: usize, state: usize) -> Option<usize> {
        self.c_vars.iter().position(|&(s, st)| s == slot && st == state).map(|p| self.c_start + p)
    }

    pub fn node_var(&self, chain: &ChainInfo, node: usize, state: usize) -> usize {
        chain.var_start + node * chain.dim + state
    }

    /// Extract the design part of an NLP variable vector.
    pub fn design_of(&self, x: &[f64], d: &DesignSpec) -> DesignVector {
        let mut xi = DesignVector {
            y_i: DVector::from_column_slice(&x[self.y_i_start..self.y_i_start + self.m_max]),
            dt: DVector::from_column_slice(&x[self.dt_start..self.dt_start + self.n]),
            c: DMatrix::zeros(self.m_max, self.n - 1),
        };
        for (pos, &(slot, state)) in self.c_vars.iter().enumerate() {
            let idx = d.perturb[slot].idx;
            xi.c[(state, idx - 1)] = x[self.c_start + pos];
        }
        xi
    }
}

/// The finite NLP in multiple-shooting form for one discretized parameter
/// set, with reusable evaluation state.
pub struct TranscribedProblem {
    pub layout: Layout,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x_init: Vec<f64>,
    pub chain_structure: ChainStructure,
    hyp: HypothesisSet,
    design: DesignSpec,
    ic: IntegratorConfig,
    /// Full parameter vectors per chain, aligned with `layout.chains`.
    chain_theta: Vec<Vec<f64>>,
    /// Epigraph rows in order: (pair, point).
    epi_rows: Vec<(usize, usize)>,
    /// Shift (1 - kappa) * rho applied to the newest point's row per pair.
    shift_new: f64,
    newest_point: Vec<usize>,
}

/// Build the finite subproblem for the given parameter set. Shooting nodes
/// are seeded by single-shooting at `seed_design`; `shift_new` is the
/// homotopy shift applied to the epigraph rows of each pair's newest point.
pub fn transcribe(
    h: &HypothesisSet,
    d: &DesignSpec,
    theta_sets: &DiscretizedParamSet,
    shift_new: f64,
    seed_design: &DesignVector,
    ic: &IntegratorConfig,
) -> Result<TranscribedProblem, TranscriptionError> {
    d.validate(h.m_max)?;
    let pairs = h.pairs();
    if theta_sets.per_pair.len() != pairs.len() {
        return Err(TranscriptionError::Dimension(format!(
            "{} point lists for {} pairs",
            theta_sets.per_pair.len(),
            pairs.len()
        )));
    }
    for (pi, pts) in theta_sets.per_pair.iter().enumerate() {
        if pts.is_empty() {
            return Err(TranscriptionError::EmptyThetaSet(pairs[pi].0, pairs[pi].1));
        }
    }
    let n = d.n;
    let m_max = h.m_max;
    let c_vars = d.free_c_layout();
    let mut layout = Layout {
        n,
        m_max,
        idx_tau: 0,
        y_i_start: 1,
        dt_start: 1 + m_max,
        c_start: 1 + m_max + n,
        c_vars,
        chains: Vec::new(),
        n_vars: 0,
        n_eq: 0,
        n_ineq: 0,
    };
    let mut var_cursor = layout.c_start + layout.c_vars.len();
    let mut row_cursor = 0usize;
    let mut chain_theta = Vec::new();
    let mut epi_rows = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        let (mo1, mo2) = h.pair(*pair);
        for (li, pt) in theta_sets.per_pair[pi].iter().enumerate() {
            for (side, mo, free) in
                [(0usize, mo1, &pt.free_null), (1usize, mo2, &pt.free_alt)]
            {
                let m = mo.dim();
                layout.chains.push(ChainInfo {
                    pair: pi,
                    point: li,
                    side,
                    dim: m,
                    var_start: var_cursor,
                    row_start: row_cursor,
                });
                chain_theta.push(mo.resolve_theta(free));
                var_cursor += m * n;
                row_cursor += m * n;
            }
            epi_rows.push((pi, li));
        }
    }
    layout.n_vars = var_cursor;
    layout.n_eq = row_cursor + 1; // + horizon row
    layout.n_ineq = epi_rows.len();

    // bounds
    let mut lower = vec![-UNBOUNDED; layout.n_vars];
    let mut upper = vec![UNBOUNDED; layout.n_vars];
    for k in 0..m_max {
        lower[layout.y_i_start + k] = d.y_i_bounds[k][0];
        upper[layout.y_i_start + k] = d.y_i_bounds[k][1];
    }
    for i in 0..n {
        lower[layout.dt_start + i] = d.dt_bounds[i][0];
        upper[layout.dt_start + i] = d.dt_bounds[i][1];
    }
    for (pos, &(slot, _state)) in layout.c_vars.iter().enumerate() {
        lower[layout.c_start + pos] = d.perturb[slot].bounds[0];
        upper[layout.c_start + pos] = d.perturb[slot].bounds[1];
    }
    for ch in &layout.chains {
        for i in 0..n {
            for k in 0..ch.dim {
                let v = layout.node_var(ch, i, k);
                lower[v] = d.node_bounds[k][0];
                upper[v] = d.node_bounds[k][1];
            }
        }
    }

    // chain structure for the KKT backend
    let chain_structure = ChainStructure {
        chains: layout
            .chains
            .iter()
            .map(|ch| ChainBlock {
                var_start: ch.var_start,
                block_dim: ch.dim,
                n_blocks: n,
                row_start: ch.row_start,
            })
            .collect(),
        coupling_cols: (layout.y_i_start..layout.c_start + layout.c_vars.len()).collect(),
        extra_rows: vec![layout.n_eq - 1],
    };

    let newest_point: Vec<usize> =
        theta_sets.per_pair.iter().map(|pts| pts.len().saturating_sub(1)).collect();

    let mut prob = TranscribedProblem {
        layout,
        lower,
        upper,
        x_init: Vec::new(),
        chain_structure,
        hyp: h.clone(),
        design: d.clone(),
        ic: ic.clone(),
        chain_theta,
        epi_rows,
        shift_new,
        newest_point,
    };
    prob.x_init = prob.seed(seed_design)?;
    Ok(prob)
}

impl TranscribedProblem {
    /// Change the homotopy shift on the newest epigraph rows (the layout is
    /// unchanged, so warm starts remain valid).
    pub fn set_shift(&mut self, shift: f64) {
        self.shift_new = shift;
    }

    pub fn design_spec(&self) -> &DesignSpec {
        &self.design
    }

    /// Seed a full variable vector at a design: design block copied,
    /// shooting nodes from single-shooting simulation, tau at the epigraph
    /// minimum.
    pub fn seed(&self, xi: &DesignVector) -> Result<Vec<f64>, TranscriptionError> {
        let lay = &self.layout;
        let mut x = vec![0.0; lay.n_vars];
        for k in 0..lay.m_max {
            x[lay.y_i_start + k] = xi.y_i[k];
        }
        for i in 0..lay.n {
            x[lay.dt_start + i] = xi.dt[i];
        }
        for (pos, &(slot, state)) in lay.c_vars.iter().enumerate() {
            let idx = self.design.perturb[slot].idx;
            x[lay.c_start + pos] = xi.c[(state, idx - 1)];
        }
        let mut integ = Integrator::new(self.ic.clone()).map_err(|e| {
            TranscriptionError::Integration { model: String::new(), interval: 0, source: e }
        })?;
        for (ci, ch) in lay.chains.iter().enumerate() {
            let (mo1, mo2) = self.hyp.pair(self.hyp.pairs()[ch.pair]);
            let model = if ch.side == 0 { mo1 } else { mo2 };
            let tr =
                shoot_model(model, &self.chain_theta[ci], xi, &mut integ, false, false)?;
            for i in 0..lay.n {
                for k in 0..ch.dim {
                    x[lay.node_var(ch, i, k)] = tr.nodes[i][k];
                }
            }
        }
        // tau: minimum epigraph value at the seeded nodes
        let mut tau = f64::INFINITY;
        for (pi, li) in &self.epi_rows {
            let v = self.criterion_of_point(&x, *pi, *li, false)?.0;
            tau = tau.min(v);
        }
        x[lay.idx_tau] = tau - 1e-3 * (1.0 + tau.abs());
        Ok(x)
    }

    /// Map variables and multipliers from a previous (smaller) transcription
    /// of the same problem family onto this one. Newly added chains keep
    /// their seeded values.
    pub fn warm_from(
        &self,
        old: &TranscribedProblem,
        old_x: &[f64],
        old_lam_eq: &[f64],
        old_lam_ineq: &[f64],
        x: &mut [f64],
        lam_eq: &mut Vec<f64>,
        lam_ineq: &mut Vec<f64>,
    ) {
        let lay = &self.layout;
        let olay = &old.layout;
        x[lay.idx_tau] = old_x[olay.idx_tau];
        for k in 0..lay.m_max {
            x[lay.y_i_start + k] = old_x[olay.y_i_start + k];
        }
        for i in 0..lay.n {
            x[lay.dt_start + i] = old_x[olay.dt_start + i];
        }
        for (pos, key) in lay.c_vars.iter().enumerate() {
            if let Some(opos) = olay.c_vars.iter().position(|k| k == key) {
                x[lay.c_start + pos] = old_x[olay.c_start + opos];
            }
        }
        lam_eq.resize(lay.n_eq, 0.0);
        lam_ineq.resize(lay.n_ineq, 0.0);
        for (ci, ch) in lay.chains.iter().enumerate() {
            if let Some(oci) = olay
                .chains
                .iter()
                .position(|c| c.pair == ch.pair && c.point == ch.point && c.side == ch.side)
            {
                let och = &olay.chains[oci];
                for i in 0..lay.n {
                    for k in 0..ch.dim {
                        x[lay.node_var(ch, i, k)] = old_x[olay.node_var(och, i, k)];
                    }
                }
                for r in 0..lay.n * ch.dim {
                    lam_eq[ch.row_start + r] = old_lam_eq[och.row_start + r];
                }
            }
            let _ = ci;
        }
        // horizon row
        lam_eq[lay.n_eq - 1] = old_lam_eq[old.layout.n_eq - 1];
        for (row, key) in self.epi_rows.iter().enumerate() {
            if let Some(orow) = old.epi_rows.iter().position(|k| k == key) {
                lam_ineq[row] = old_lam_ineq[orow];
            }
        }
    }

    /// Criterion value (and optionally partials) of one (pair, point) from
    /// the node variables in `x`.
    #[allow(clippy::type_complexity)]
    fn criterion_of_point(
        &self,
        x: &[f64],
        pi: usize,
        li: usize,
        want_partials: bool,
    ) -> Result<(f64, Option<Vec<crate::criterion::CriterionNodeGrad>>), TranscriptionError>
    {
        let lay = &self.layout;
        let pairs = self.hyp.pairs();
        let (mo1, mo2) = self.hyp.pair(pairs[pi]);
        let c1 = lay
            .chains
            .iter()
            .position(|c| c.pair == pi && c.point == li && c.side == 0)
            .expect("chain for pair/point");
        let c2 = lay
            .chains
            .iter()
            .position(|c| c.pair == pi && c.point == li && c.side == 1)
            .expect("chain for pair/point");
        let th1 = &self.chain_theta[c1];
        let th2 = &self.chain_theta[c2];
        let ch1 = &lay.chains[c1];
        let ch2 = &lay.chains[c2];
        let dt = &x[lay.dt_start..lay.dt_start + lay.n];
        let times = {
            let mut t = 0.0;
            dt.iter()
                .map(|d| {
                    t += d;
                    t
                })
                .collect::<Vec<_>>()
        };
        let node_of = |ch: &ChainInfo, i: usize| -> Vec<f64> {
            (0..ch.dim).map(|k| x[lay.node_var(ch, i, k)]).collect()
        };
        let mut obs1 = Vec::with_capacity(lay.n);
        let mut obs2 = Vec::with_capacity(lay.n);
        let mut sd1 = Vec::with_capacity(lay.n);
        let mut sd2 = Vec::with_capacity(lay.n);
        for i in 0..lay.n {
            for (model, ch, th, obs, sd) in [
                (mo1, ch1, th1, &mut obs1, &mut sd1),
                (mo2, ch2, th2, &mut obs2, &mut sd2),
            ] {
                let node = node_of(ch, i);
                let mut ob = vec![0.0; model.obs_dim()];
                model.observe(&node, &mut ob);
                let mut s = vec![0.0; model.obs_dim()];
                model.error.std_devs(&ob, times[i], th, &mut s)?;
                obs.push(ob);
                sd.push(s);
            }
        }
        // gate arguments from the c design variables
        let mut c_full = DMatrix::zeros(lay.m_max, lay.n - 1);
        for (pos, &(slot, state)) in lay.c_vars.iter().enumerate() {
            let idx = self.design.perturb[slot].idx;
            c_full[(state, idx - 1)] = x[lay.c_start + pos];
        }
        // fixed (non-free) perturbation entries are zero by construction
        let cn: Vec<f64> =
            (0..lay.n - 1).map(|j| cnorm_and_argmax(c_full.column(j).as_slice()).0).collect();
        let input = CriterionInput {
            obs1: &obs1,
            obs2: &obs2,
            sd1: &sd1,
            sd2: &sd2,
            dt,
            c_norms: &cn,
            sp: &self.design.gates,
            use_perturb_gate: self.design.use_perturb_gate,
        };
        if want_partials {
            let (v, g) = criterion_with_partials(&input, self.design.symmetrized)?;
            Ok((v, Some(g)))
        } else if self.design.symmetrized {
            Ok((criterion_symmetrized(&input)?, None))
        } else {
            Ok((criterion(&input)?, None))
        }
    }

    /// Per-chain matching residuals at `x` (for tests and diagnostics).
    pub fn matching_residuals(&self, x: &[f64]) -> Result<Vec<f64>, TranscriptionError> {
        let mut ev = Evaluation {
            f: 0.0,
            grad: vec![0.0; self.layout.n_vars],
            c_eq: vec![0.0; self.layout.n_eq],
            c_ineq: vec![0.0; self.layout.n_ineq],
            jac_eq: vec![Vec::new(); self.layout.n_eq],
            jac_ineq: vec![Vec::new(); self.layout.n_ineq],
        };
        self.eval_all(x, false, &mut ev)
            .map_err(|e| TranscriptionError::Dimension(e.0))?;
        Ok(ev.c_eq[..self.layout.n_eq - 1].to_vec())
    }

    /// Objective value tau and the minimum epigraph criterion at `x`.
    pub fn tau_and_min_criterion(&self, x: &[f64]) -> Result<(f64, f64), TranscriptionError> {
        let mut min_i = f64::INFINITY;
        for (pi, li) in &self.epi_rows {
            min_i = min_i.min(self.criterion_of_point(x, *pi, *li, false)?.0);
        }
        Ok((x[self.layout.idx_tau], min_i))
    }

    /// The full constraint/objective evaluation used by the NLP solver.
    fn eval_all(&self, x: &[f64], want_jac: bool, out: &mut Evaluation) -> Result<(), EvalFail> {
        let lay = &self.layout;
        out.f = -x[lay.idx_tau];
        out.grad.iter_mut().for_each(|v| *v = 0.0);
        out.grad[lay.idx_tau] = -1.0;

        let dt = &x[lay.dt_start..lay.dt_start + lay.n];
        // horizon equality
        let horizon_row = lay.n_eq - 1;
        out.c_eq[horizon_row] = dt.iter().sum::<f64>() - self.design.t_end;
        if want_jac {
            out.jac_eq[horizon_row] =
                (0..lay.n).map(|i| (lay.dt_var(i) as u32, 1.0)).collect();
        }

        // matching rows, chains in parallel
        let self_ref = &*self;
        let chain_results: Vec<Result<ChainEvalOut, EvalFail>> = (0..lay.chains.len())
            .into_par_iter()
            .map(|ci| self_ref.eval_chain(x, ci, want_jac))
            .collect();
        for (ci, res) in chain_results.into_iter().enumerate() {
            let ch = &lay.chains[ci];
            let r = res?;
            let base = ch.row_start;
            for (off, v) in r.resid.into_iter().enumerate() {
                out.c_eq[base + off] = v;
            }
            if want_jac {
                for (off, row) in r.jac.into_iter().enumerate() {
                    out.jac_eq[base + off] = row;
                }
            }
        }

        // epigraph rows
        for (row, (pi, li)) in self.epi_rows.iter().enumerate() {
            let shift = if self.shift_new != 0.0 && *li == self.newest_point[*pi] {
                self.shift_new
            } else {
                0.0
            };
            let (val, partials) = self
                .criterion_of_point(x, *pi, *li, want_jac)
                .map_err(|e| EvalFail(e.to_string()))?;
            out.c_ineq[row] = val - x[lay.idx_tau] + shift;
            if want_jac {
                let grads = partials.unwrap();
                let mut jrow: Vec<(u32, f64)> = Vec::new();
                jrow.push((lay.idx_tau as u32, -1.0));
                // dt gate terms
                for i in 0..lay.n {
                    if grads[i].d_dt != 0.0 {
                        jrow.push((lay.dt_var(i) as u32, grads[i].d_dt));
                    }
                }
                // c gate terms (max-norm argmax branch)
                if self.design.use_perturb_gate {
                    let mut c_full = DMatrix::zeros(lay.m_max, lay.n - 1);
                    for (pos, &(slot, state)) in lay.c_vars.iter().enumerate() {
                        let idx = self.design.perturb[slot].idx;
                        c_full[(state, idx - 1)] = x[lay.c_start + pos];
                    }
                    for (pos, &(slot, state)) in lay.c_vars.iter().enumerate() {
                        let idx = self.design.perturb[slot].idx;
                        let (_, arg) = cnorm_and_argmax(c_full.column(idx - 1).as_slice());
                        if arg == Some(state) {
                            let sgn = c_full[(state, idx - 1)].signum();
                            let d = grads[idx - 1].d_cnorm * sgn;
                            if d != 0.0 {
                                jrow.push(((lay.c_start + pos) as u32, d));
                            }
                        }
                    }
                }
                // node terms for both chains
                let pairs = self.hyp.pairs();
                let (mo1, mo2) = self.hyp.pair(pairs[*pi]);
                for side in 0..2 {
                    let model = if side == 0 { mo1 } else { mo2 };
                    let ch = lay
                        .chains
                        .iter()
                        .find(|c| c.pair == *pi && c.point == *li && c.side == side)
                        .unwrap();
                    for i in 0..lay.n {
                        let g = &grads[i];
                        let d_o = if side == 0 { &g.d_o1 } else { &g.d_o2 };
                        for (k, &st) in model.observable.iter().enumerate() {
                            if d_o[k] != 0.0 {
                                jrow.push((lay.node_var(ch, i, st) as u32, d_o[k]));
                            }
                        }
                    }
                }
                out.jac_ineq[row] = jrow;
            }
        }
        Ok(())
    }

    fn eval_chain(&self, x: &[f64], ci: usize, want_jac: bool) -> Result<ChainEvalOut, EvalFail> {
        let lay = &self.layout;
        let ch = &lay.chains[ci];
        let pairs = self.hyp.pairs();
        let (mo1, mo2) = self.hyp.pair(pairs[ch.pair]);
        let model = if ch.side == 0 { mo1 } else { mo2 };
        let theta = &self.chain_theta[ci];
        let m = ch.dim;
        let n = lay.n;
        let mut integ = Integrator::new(self.ic.clone()).map_err(|e| EvalFail(e.to_string()))?;
        let sens = if want_jac { SensRequest::initial_only() } else { SensRequest::none() };
        let mut resid = vec![0.0; m * n];
        let mut jac: Vec<Vec<(u32, f64)>> = if want_jac { vec![Vec::new(); m * n] } else { Vec::new() };
        let mut f_end = vec![0.0; m];
        // c columns by interval (free components only; fixed slots are zero)
        let c_of = |i: usize, k: usize| -> Option<(usize, f64)> {
            // returns (var index, value) if state k at node i is a free c
            for (pos, &(slot, state)) in lay.c_vars.iter().enumerate() {
                if state == k && self.design.perturb[slot].idx == i {
                    return Some((lay.c_start + pos, x[lay.c_start + pos]));
                }
            }
            None
        };
        for i in 1..=n {
            let start: Vec<f64> = if i == 1 {
                (0..m).map(|k| x[lay.y_i_start + k]).collect()
            } else {
                (0..m).map(|k| x[lay.node_var(ch, i - 2, k)]).collect()
            };
            let dt_i = x[lay.dt_var(i - 1)];
            let res = integ
                .solve(model.family_sys(), 0.0, dt_i, &start, theta, &sens)
                .and_then(|r| r.ok(0.0, integ.config().max_steps))
                .map_err(|e| EvalFail(format!("chain {ci} interval {i}: {e}")))?;
            let end = &res.final_state;
            for k in 0..m {
                let c_val = if i < n { c_of(i, k).map(|(_, v)| v).unwrap_or(0.0) } else { 0.0 };
                resid[(i - 1) * m + k] = x[lay.node_var(ch, i - 1, k)] - end[k] - c_val;
            }
            if want_jac {
                let g = res.sens_initial.as_ref().expect("requested sensitivities");
                model.family_sys().rhs(end.as_slice(), theta, &mut f_end);
                for k in 0..m {
                    let row = &mut jac[(i - 1) * m + k];
                    row.push((lay.node_var(ch, i - 1, k) as u32, 1.0));
                    if i == 1 {
                        for kk in 0..m {
                            row.push(((lay.y_i_start + kk) as u32, -g[(k, kk)]));
                        }
                    } else {
                        for kk in 0..m {
                            row.push((lay.node_var(ch, i - 2, kk) as u32, -g[(k, kk)]));
                        }
                    }
                    row.push((lay.dt_var(i - 1) as u32, -f_end[k]));
                    if i < n {
                        if let Some((var, _)) = c_of(i, k) {
                            row.push((var as u32, -1.0));
                        }
                    }
                }
            }
        }
        Ok(ChainEvalOut { resid, jac })
    }

    /// Wrap into an [`NlpProblem`] borrowing this transcription.
    pub fn nlp_problem(&self) -> NlpProblem<'_> {
        let n_vars = self.layout.n_vars;
        let n_eq = self.layout.n_eq;
        let n_ineq = self.layout.n_ineq;
        let lower = self.lower.clone();
        let upper = self.upper.clone();
        let chains = Some(self.chain_structure.clone());
        let this: &TranscribedProblem = self;
        NlpProblem {
            n: n_vars,
            n_eq,
            n_ineq,
            lower,
            upper,
            curvature: crate::nlp::Curvature::QuasiNewton,
            eval: Box::new(move |x: &[f64], want_jac: bool, out: &mut Evaluation| {
                this.eval_all(x, want_jac, out)
            }),
            hessian: None,
            chains,
            eval_noise: 1e3 * self.ic.rel_tol.max(self.ic.abs_tol),
        }
    }
}

struct ChainEvalOut {
    resid: Vec<f64>,
    jac: Vec<Vec<(u32, f64)>>,
}
