//! Outer approximation loop: multistart worst-case parameter search
//! (Step 1), growing discretized parameter sets, the robustification-gap stop
//! rule, and the homotopy schedule that blends newly added epigraph
//! constraints into each successive subproblem.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{DesignFile, DesignSpec, DesignVector};
use crate::fmt_g17;
use crate::integrator::IntegratorConfig;
use crate::models::{ErrorModel, HypothesisSet};
use crate::nlp::{self, NlpSolution, SolveStatus, WarmStart};
use crate::transcription::{
    evaluate_design, evaluate_design_grad, transcribe, GradRequest, TranscribedProblem,
    TranscriptionError,
};

/// Settings of the outer approximation loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    /// Stop threshold on the robustification gap.
    pub delta: f64,
    /// NLP KKT tolerance, fixed across outer iterations.
    pub eps: f64,
    /// Multistart count of the inner worst-case search.
    #[serde(rename = "multistart_P")]
    pub multistart_p: usize,
    /// Safeguard factor on the homotopy shift.
    #[serde(rename = "K", default = "default_safeguard")]
    pub safeguard_k: f64,
    /// Homotopy step count H; 0 solves each new subproblem cold.
    pub homotopy_steps: usize,
    /// Apply the homotopy only when the last gap is below this value
    /// (set to 1e19 to always apply it).
    #[serde(default = "default_homotopy_gate")]
    pub homotopy_gate: f64,
    pub max_outer: usize,
    pub seed: u64,
    /// Iteration cap per NLP solve.
    #[serde(default = "default_nlp_max_iter")]
    pub nlp_max_iter: usize,
}

fn default_safeguard() -> f64 {
    1.4
}

fn default_homotopy_gate() -> f64 {
    1e19
}

fn default_nlp_max_iter() -> usize {
    400
}

impl OuterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0) {
            return Err(format!("delta must be > 0, got {}", self.delta));
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be > 0, got {}", self.eps));
        }
        if self.multistart_p < 1 {
            return Err("multistart_P must be >= 1".into());
        }
        if !(self.safeguard_k > 1.0) {
            return Err(format!("K must be > 1, got {}", self.safeguard_k));
        }
        if self.max_outer == 0 {
            return Err("max_outer must be >= 1".into());
        }
        Ok(())
    }
}

/// One worst-case parameter point: free-parameter values of the null-side and
/// alternative-side models of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub free_null: Vec<f64>,
    pub free_alt: Vec<f64>,
}

/// The growing finite parameter sets, one list per model pair, in insertion
/// order. Only grows; the outer loop adds exactly one point per pair per
/// iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiscretizedParamSet {
    pub per_pair: Vec<Vec<ParamPoint>>,
}

impl DiscretizedParamSet {
    pub fn new(n_pairs: usize) -> Self {
        Self { per_pair: vec![Vec::new(); n_pairs] }
    }

    /// Append a point; returns true when an identical point was already
    /// present (it is still appended, redundant rows are harmless).
    pub fn add(&mut self, pair: usize, point: ParamPoint) -> bool {
        let dup = self.per_pair[pair].contains(&point);
        self.per_pair[pair].push(point);
        dup
    }

    pub fn n_points(&self, pair: usize) -> usize {
        self.per_pair[pair].len()
    }
}

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("inner minimization failed for pair ({0}, {1}): all trials failed")]
    AllInnerTrialsFailed(usize, usize, Vec<String>),
    #[error(transparent)]
    Transcription(#[from] TranscriptionError),
    #[error("NLP solver error in outer iteration {outer_iter}, homotopy step {step}: {message}")]
    Subproblem { outer_iter: usize, step: usize, message: String, trace: Box<OuterTrace> },
    #[error("subproblem infeasible in outer iteration {outer_iter}, homotopy step {step}")]
    SubproblemInfeasible { outer_iter: usize, step: usize, trace: Box<OuterTrace> },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Statistics of one NLP solve inside the homotopy schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveStat {
    pub kappa: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub status: SolveStatus,
}

/// Diagnostics of one multistart trial of the inner minimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialDiag {
    pub value: Option<f64>,
    pub status: String,
}

/// Record of one outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    /// Robustification gap measured at the start of this iteration
    /// (references the previous design); absent at N = 1.
    pub gap: Option<f64>,
    /// Fresh inner worst-case values per pair at the previous design.
    pub inner_values: Vec<f64>,
    /// Per-pair worst-case points found by Step 1.
    pub new_points: Vec<ParamPoint>,
    /// Whether each new point duplicated an existing one.
    pub duplicate: Vec<bool>,
    /// Whether the points were added to the sets (false on the stop
    /// iteration, which ends after Step 1).
    pub augmented: bool,
    pub inner_trials: Vec<Vec<TrialDiag>>,
    /// Solver statistics per homotopy step (single entry when cold).
    pub homotopy: Vec<SolveStat>,
    /// Design after Step 2 of this iteration.
    pub design: DesignFile,
    /// Objective tau of the subproblem solution.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterStatus {
    Converged,
    MaxOuterReached,
}

/// Complete record of an outer-approximation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterTrace {
    pub status: OuterStatus,
    pub iterations: Vec<IterationRecord>,
    pub final_design: DesignFile,
    pub final_objective: f64,
    /// Worst-case parameter points of the final Step 1 (the adversary's
    /// solution at the final design).
    pub final_points: Vec<ParamPoint>,
    pub seed: u64,
    /// With a homoscedastic error model of deviation sigma, the criterion
    /// equals 1/(2 sigma^2) times the plain squared-distance sum; recorded so
    /// objective values can be compared across conventions.
    pub criterion_prefactor: Option<f64>,
}

impl OuterTrace {
    pub fn converged(&self) -> bool {
        self.status == OuterStatus::Converged
    }

    /// Largest design change between consecutive iterations (max norm).
    pub fn max_design_jump(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.iterations.windows(2) {
            if let (Ok(a), Ok(b)) = (w[0].design.to_design(), w[1].design.to_design()) {
                worst = worst.max(a.linf_distance(&b));
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Step 1: inner worst-case minimization
// ---------------------------------------------------------------------------

/// Result of the inner minimization for one pair.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub point: ParamPoint,
    pub value: f64,
    pub trials: Vec<TrialDiag>,
}

/// Multistart local minimization of a boxed objective; the production path
/// wraps the design criterion, tests may pass surrogates. Starts are the
/// given extras plus `p_starts` uniform draws; the best local minimum wins
/// (ties broken by trial order).
pub fn inner_minimize_boxed<F>(
    lower: &[f64],
    upper: &[f64],
    objective: F,
    p_starts: usize,
    rng: &mut ChaCha8Rng,
    extra_starts: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
    eval_noise: f64,
) -> Result<(Vec<f64>, f64, Vec<TrialDiag>), Vec<String>>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), String> + Sync,
{
    let dim = lower.len();
    if dim == 0 {
        let (v, _) = objective(&[]).map_err(|e| vec![e])?;
        return Ok((Vec::new(), v, vec![TrialDiag { value: Some(v), status: "fixed".into() }]));
    }
    let mut starts: Vec<Vec<f64>> = extra_starts.to_vec();
    for _ in 0..p_starts {
        starts.push(
            (0..dim).map(|k| rng.random_range(lower[k]..=upper[k])).collect::<Vec<f64>>(),
        );
    }
    let results: Vec<Result<(Vec<f64>, f64, usize), String>> = starts
        .par_iter()
        .map(|x0| {
            let mut p = nlp::NlpProblem::boxed(
                dim,
                lower.to_vec(),
                upper.to_vec(),
                |x: &[f64], _want_jac: bool, out: &mut nlp::Evaluation| {
                    let (v, g) = objective(x).map_err(nlp::EvalFail)?;
                    out.f = v;
                    out.grad.copy_from_slice(&g);
                    Ok(())
                },
            );
            p.eval_noise = eval_noise;
            match nlp::solve(&mut p, x0, tol, max_iter, None) {
                Ok(sol) => Ok((sol.x, sol.f, sol.iterations)),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trials = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok((x, v, iters)) => {
                trials.push(TrialDiag { value: Some(v), status: format!("ok({iters} it)") });
                if best.as_ref().map(|(_, bv)| v < *bv).unwrap_or(true) {
                    best = Some((x, v));
                }
            }
            Err(e) => {
                trials.push(TrialDiag { value: None, status: e.clone() });
                errors.push(e);
            }
        }
    }
    match best {
        Some((x, v)) => Ok((x, v, trials)),
        None => Err(errors),
    }
}

/// Step 1 of the outer loop: the worst-case parameter search for one pair at
/// a fixed design, by multistart local minimization over the joint box.
pub fn inner_minimize(
    h: &HypothesisSet,
    d: &DesignSpec,
    xi: &DesignVector,
    pair: (usize, usize),
    ic: &IntegratorConfig,
    p_starts: usize,
    rng: &mut ChaCha8Rng,
    extra_starts: &[ParamPoint],
    tol: f64,
    max_iter: usize,
) -> Result<InnerResult, OuterError> {
    // exploration trials may cross violently fast parameter regions; a
    // relaxed tolerance and a hard step budget make such evaluations fail
    // fast so the line search can retreat. The winning point is re-evaluated
    // at the requested tolerance below.
    let ic_explore = IntegratorConfig {
        rel_tol: ic.rel_tol.max(1e-8),
        abs_tol: ic.abs_tol.max(1e-8),
        rel_tol_sens: ic.rel_tol_sens.max(1e-8),
        abs_tol_sens: ic.abs_tol_sens.max(1e-8),
        max_steps: ic.max_steps.min(50_000),
        ..ic.clone()
    };
    let (mo1, mo2) = h.pair(pair);
    let n1 = mo1.n_free();
    let (lo1, hi1) = mo1.free_bounds();
    let (lo2, hi2) = mo2.free_bounds();
    let lower: Vec<f64> = lo1.into_iter().chain(lo2).collect();
    let upper: Vec<f64> = hi1.into_iter().chain(hi2).collect();
    let extras: Vec<Vec<f64>> = extra_starts
        .iter()
        .map(|p| p.free_null.iter().chain(&p.free_alt).cloned().collect())
        .collect();
    let objective = |th: &[f64]| -> Result<(f64, Vec<f64>), String> {
        let (fn_, fa) = th.split_at(n1);
        let ev = evaluate_design_grad(
            h,
            d,
            xi,
            pair,
            fn_,
            fa,
            &ic_explore,
            GradRequest { design: false, theta: true },
        )
        .map_err(|e| e.to_string())?;
        let grad: Vec<f64> =
            ev.grad_theta_null.iter().chain(&ev.grad_theta_alt).cloned().collect();
        Ok((ev.value, grad))
    };
    let noise = 1e3 * ic_explore.rel_tol.max(ic_explore.abs_tol);
    let (x, _v, trials) = inner_minimize_boxed(
        &lower, &upper, objective, p_starts, rng, &extras, tol, max_iter, noise,
    )
    .map_err(|errs| OuterError::AllInnerTrialsFailed(pair.0, pair.1, errs))?;
    let (fn_, fa) = x.split_at(n1);
    // final value at the requested tolerance, consistent with every other
    // criterion evaluation in the outer loop
    let v = evaluate_design(h, d, xi, pair, fn_, fa, ic)?;
    Ok(InnerResult {
        point: ParamPoint { free_null: fn_.to_vec(), free_alt: fa.to_vec() },
        value: v,
        trials,
    })
}

/// Homotopy shift magnitude: K times the largest per-pair gap between the
/// discretized worst case and the global worst-case estimate.
pub fn rho(worst_over_disc: &[f64], worst_over_box: &[f64], k: f64) -> f64 {
    assert_eq!(worst_over_disc.len(), worst_over_box.len());
    let max_gap = worst_over_disc
        .iter()
        .zip(worst_over_box)
        .map(|(d, b)| d - b)
        .fold(0.0f64, |a, g| a.max(g));
    k * max_gap
}

// ---------------------------------------------------------------------------
// Step 2: subproblem solves with homotopy
// ---------------------------------------------------------------------------

/// Solve a subproblem through the homotopy schedule kappa_h = h/H, each step
/// warm-started from the previous solution. `H = 0` means one solve of the
/// unshifted problem without dual warm start. Returns the final solution and
/// per-step statistics.
#[allow(clippy::too_many_arguments)]
pub fn solve_subproblem_homotopy(
    prob: &mut TranscribedProblem,
    x_init: &[f64],
    warm: Option<&WarmStart>,
    h_steps: usize,
    rho_shift: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(NlpSolution, Vec<SolveStat>), (usize, String)> {
    let mut stats = Vec::new();
    let mut x = x_init.to_vec();
    let mut warm_cur: Option<WarmStart> = warm.cloned();
    let steps = if h_steps == 0 { 1 } else { h_steps };
    let mut last: Option<NlpSolution> = None;
    for hstep in 1..=steps {
        let kappa = if h_steps == 0 { 1.0 } else { hstep as f64 / h_steps as f64 };
        prob.set_shift((1.0 - kappa) * rho_shift);
        let mut nlp_prob = prob.nlp_problem();
        let sol = nlp::solve(&mut nlp_prob, &x, tol, max_iter, warm_cur.as_ref())
            .map_err(|e| (hstep, e.to_string()))?;
        stats.push(SolveStat {
            kappa,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            constraint_violation: sol.constraint_violation,
            status: sol.status,
        });
        if sol.status == SolveStatus::Infeasible {
            return Err((hstep, "subproblem infeasible".into()));
        }
        x = sol.x.clone();
        warm_cur = Some(WarmStart::from(&sol));
        last = Some(sol);
    }
    Ok((last.expect("at least one homotopy step"), stats))
}

// ---------------------------------------------------------------------------
// The outer loop
// ---------------------------------------------------------------------------

fn criterion_prefactor(h: &HypothesisSet) -> Option<f64> {
    match &h.null_models[0].error {
        ErrorModel::HomoscedasticEqual { sigma } => Some(1.0 / (2.0 * sigma * sigma)),
        _ => None,
    }
}

/// Run the outer approximation until the robustification gap falls below
/// delta or `max_outer` is reached.
pub fn run(
    h: &HypothesisSet,
    d: &DesignSpec,
    oc: &OuterConfig,
    ic: &IntegratorConfig,
) -> Result<OuterTrace, OuterError> {
    oc.validate().map_err(OuterError::Config)?;
    d.validate(h.m_max).map_err(TranscriptionError::Design)?;
    let pairs = h.pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);
    let mut xi = d.initial_design(h.m_max);
    let mut sets = DiscretizedParamSet::new(pairs.len());
    let mut prev: Option<(TranscribedProblem, NlpSolution)> = None;
    let mut last_objective = f64::NAN;
    let mut trace = OuterTrace {
        status: OuterStatus::MaxOuterReached,
        iterations: Vec::new(),
        final_design: DesignFile::from(&xi),
        final_objective: f64::NAN,
        final_points: Vec::new(),
        seed: oc.seed,
        criterion_prefactor: criterion_prefactor(h),
    };

    for n_iter in 1..=oc.max_outer {
        // Step 1: fresh worst-case estimates at the current design
        let mut inner_results = Vec::with_capacity(pairs.len());
        for (pi, pair) in pairs.iter().enumerate() {
            // seed the local searches with the incumbent worst point so the
            // fresh estimate can never be worse than the discretized minimum
            let extra: Vec<ParamPoint> = best_existing_point(h, d, &xi, pi, &sets, ic);
            let t_inner = std::time::Instant::now();
            let res = inner_minimize(
                h,
                d,
                &xi,
                *pair,
                ic,
                oc.multistart_p,
                &mut rng,
                &extra,
                oc.eps,
                oc.nlp_max_iter,
            )?;
            if std::env::var_os("OED_OUTER_TRACE").is_some() {
                eprintln!(
                    "outer {n_iter}: inner pair {pi} value={:.6e} trials={:?} [{:.2?}]",
                    res.value,
                    res.trials.iter().map(|t| t.status.clone()).collect::<Vec<_>>(),
                    t_inner.elapsed()
                );
            }
            inner_results.push(res);
        }
        let fresh: Vec<f64> = inner_results.iter().map(|r| r.value).collect();
        let fresh_min = fresh.iter().cloned().fold(f64::INFINITY, f64::min);

        // robustification gap (defined from the second iteration on)
        let mut gap = None;
        let mut per_pair_disc = vec![f64::INFINITY; pairs.len()];
        if n_iter >= 2 {
            let mut disc_min = f64::INFINITY;
            for (pi, pair) in pairs.iter().enumerate() {
                let mut pair_min = f64::INFINITY;
                for pt in &sets.per_pair[pi] {
                    let v = evaluate_design(h, d, &xi, *pair, &pt.free_null, &pt.free_alt, ic)?;
                    pair_min = pair_min.min(v);
                }
                per_pair_disc[pi] = pair_min;
                disc_min = disc_min.min(pair_min);
            }
            gap = Some(disc_min - fresh_min);
        }

        let duplicate: Vec<bool> = inner_results
            .iter()
            .enumerate()
            .map(|(pi, r)| sets.per_pair[pi].contains(&r.point))
            .collect();

        if let Some(g) = gap {
            if g <= oc.delta {
                trace.iterations.push(IterationRecord {
                    n: n_iter,
                    gap,
                    inner_values: fresh.clone(),
                    new_points: inner_results.iter().map(|r| r.point.clone()).collect(),
                    duplicate,
                    augmented: false,
                    inner_trials: inner_results.iter().map(|r| r.trials.clone()).collect(),
                    homotopy: Vec::new(),
                    design: DesignFile::from(&xi),
                    objective: last_objective,
                });
                trace.status = OuterStatus::Converged;
                trace.final_design = DesignFile::from(&xi);
                trace.final_objective = last_objective;
                trace.final_points = inner_results.into_iter().map(|r| r.point).collect();
                return Ok(trace);
            }
        }

        // augment the sets (exactly one point per pair)
        for (pi, r) in inner_results.iter().enumerate() {
            let before = sets.n_points(pi);
            sets.add(pi, r.point.clone());
            assert_eq!(sets.n_points(pi), before + 1, "parameter sets must only grow");
        }

        // Step 2: transcribe and solve, with homotopy when warranted
        let mut prob = transcribe(h, d, &sets, 0.0, &xi, ic)?;
        let mut x_init = prob.x_init.clone();
        let mut warm: Option<WarmStart> = None;
        let mut use_homotopy = false;
        if let Some((old_prob, old_sol)) = &prev {
            let mut lam_eq = Vec::new();
            let mut lam_ineq = Vec::new();
            prob.warm_from(
                old_prob,
                &old_sol.x,
                &old_sol.lam_eq,
                &old_sol.lam_ineq,
                &mut x_init,
                &mut lam_eq,
                &mut lam_ineq,
            );
            if oc.homotopy_steps > 0 {
                let below_gate = gap.map(|g| g < oc.homotopy_gate).unwrap_or(false);
                if below_gate {
                    use_homotopy = true;
                    warm = Some(WarmStart {
                        lam_eq,
                        lam_ineq,
                        z_lower: Vec::new(),
                        z_upper: Vec::new(),
                    });
                }
            }
        }
        let (h_steps, shift) = if use_homotopy {
            (oc.homotopy_steps, rho(&per_pair_disc, &fresh, oc.safeguard_k))
        } else {
            (0, 0.0)
        };
        let t_solve = std::time::Instant::now();
        let solve_out = solve_subproblem_homotopy(
            &mut prob,
            &x_init,
            warm.as_ref(),
            h_steps,
            shift,
            oc.eps,
            oc.nlp_max_iter,
        );
        if std::env::var_os("OED_OUTER_TRACE").is_some() {
            if let Ok((s, stats)) = &solve_out {
                let iters: usize = stats.iter().map(|st| st.iterations).sum();
                eprintln!(
                    "outer {n_iter}: gap={gap:?} homotopy_steps={h_steps} shift={shift:.3e} nlp_iters={iters} tau={:.6e} status={:?} [{:.2?}]",
                    -s.f, s.status, t_solve.elapsed()
                );
            }
        }
        let (sol, stats) = match solve_out {
            Ok(v) => v,
            Err((step, msg)) => {
                return Err(OuterError::Subproblem {
                    outer_iter: n_iter,
                    step,
                    message: msg,
                    trace: Box::new(trace),
                });
            }
        };
        xi = prob.layout.design_of(&sol.x, d);
        last_objective = -sol.f; // the NLP minimizes -tau
        trace.iterations.push(IterationRecord {
            n: n_iter,
            gap,
            inner_values: fresh,
            new_points: inner_results.iter().map(|r| r.point.clone()).collect(),
            duplicate,
            augmented: true,
            inner_trials: inner_results.iter().map(|r| r.trials.clone()).collect(),
            homotopy: stats,
            design: DesignFile::from(&xi),
            objective: last_objective,
        });
        trace.final_design = DesignFile::from(&xi);
        trace.final_objective = last_objective;
        prev = Some((prob, sol));
    }
    Ok(trace)
}

/// The best (lowest criterion) stored point of a pair at the current design;
/// used to seed the fresh inner search.
fn best_existing_point(
    h: &HypothesisSet,
    d: &DesignSpec,
    xi: &DesignVector,
    pi: usize,
    sets: &DiscretizedParamSet,
    ic: &IntegratorConfig,
) -> Vec<ParamPoint> {
    let pair = h.pairs()[pi];
    let mut best: Option<(f64, ParamPoint)> = None;
    for pt in &sets.per_pair[pi] {
        if let Ok(v) = evaluate_design(h, d, xi, pair, &pt.free_null, &pt.free_alt, ic) {
            if best.as_ref().map(|(bv, _)| v < *bv).unwrap_or(true) {
                best = Some((v, pt.clone()));
            }
        }
    }
    best.map(|(_, p)| vec![p]).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Trace output
// ---------------------------------------------------------------------------

/// Write `gap.csv`, `objective.csv` and `design.csv` into `dir`; returns the
/// file names written. Floats carry 17 significant digits.
pub fn write_trace_csvs(trace: &OuterTrace, dir: &Path) -> std::io::Result<Vec<String>> {
    let mut written = Vec::new();

    let gap_path = dir.join("gap.csv");
    let mut f = std::fs::File::create(&gap_path)?;
    writeln!(f, "N,delta_rg")?;
    for rec in &trace.iterations {
        if let Some(g) = rec.gap {
            writeln!(f, "{},{}", rec.n, fmt_g17(g))?;
        }
    }
    written.push("gap.csv".to_string());

    let obj_path = dir.join("objective.csv");
    let mut f = std::fs::File::create(&obj_path)?;
    writeln!(f, "N,tau")?;
    for rec in &trace.iterations {
        if rec.objective.is_finite() {
            writeln!(f, "{},{}", rec.n, fmt_g17(rec.objective))?;
        }
    }
    written.push("objective.csv".to_string());

    let design_path = dir.join("design.csv");
    let mut f = std::fs::File::create(&design_path)?;
    let mut header = vec!["N".to_string()];
    if let Some(rec) = trace.iterations.first() {
        for k in 0..rec.design.y_i.len() {
            header.push(format!("yI_{}", k + 1));
        }
        for i in 0..rec.design.dt.len() {
            header.push(format!("dt_{}", i + 1));
        }
        for (j, col) in rec.design.c.iter().enumerate() {
            for k in 0..col.len() {
                header.push(format!("c_{}_{}", j + 1, k + 1));
            }
        }
    }
    writeln!(f, "{}", header.join(","))?;
    for rec in &trace.iterations {
        let mut row = vec![rec.n.to_string()];
        row.extend(rec.design.y_i.iter().map(|v| fmt_g17(*v)));
        row.extend(rec.design.dt.iter().map(|v| fmt_g17(*v)));
        for col in &rec.design.c {
            row.extend(col.iter().map(|v| fmt_g17(*v)));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    written.push("design.csv".to_string());
    Ok(written)
}
