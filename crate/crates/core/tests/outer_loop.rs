//! Outer-approximation mechanics: the stop rule, the homotopy shift algebra,
//! set growth, duplicate handling, inner-minimization behavior, and
//! determinism of the trace.

mod common;

use common::{glyc_design, glyc_gates};
use oed_core::builtin_glycolysis;
use oed_core::integrator::IntegratorConfig;
use oed_core::outer::{
    inner_minimize, inner_minimize_boxed, rho, run, DiscretizedParamSet, OuterConfig,
    OuterStatus, ParamPoint,
};
use oed_core::transcription::{evaluate_design, transcribe};
use oed_core::HypothesisSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_outer(seed: u64) -> OuterConfig {
    OuterConfig {
        delta: 1e-3,
        eps: 1e-6,
        multistart_p: 2,
        safeguard_k: 1.4,
        homotopy_steps: 4,
        homotopy_gate: 1e19,
        max_outer: 6,
        seed,
        nlp_max_iter: 300,
    }
}

fn desk_integ() -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: 1e-10,
        abs_tol: 1e-10,
        rel_tol_sens: 1e-10,
        abs_tol_sens: 1e-10,
        ..IntegratorConfig::default()
    }
}

#[test]
fn rho_arithmetic() {
    assert_eq!(rho(&[5.0], &[3.0], 1.4), 1.4 * 2.0);
    assert_eq!(rho(&[3.0], &[3.0], 1.4), 0.0);
    let r = rho(&[1.0, 1.5], &[0.8, 1.0], 1.4);
    assert!((r - 0.7).abs() < 1e-15);
    // slightly negative gaps (solver slack) clamp to zero
    assert_eq!(rho(&[1.0], &[1.0 + 1e-9], 1.4), 0.0);
}

#[test]
fn quadratic_surrogate_inner() {
    // criterion replaced by (theta - 0.3)^2 on [0, 1]: any P >= 1 finds 0.3
    for p_starts in [1usize, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, v, trials) = inner_minimize_boxed(
            &[0.0],
            &[1.0],
            |th: &[f64]| Ok(((th[0] - 0.3) * (th[0] - 0.3), vec![2.0 * (th[0] - 0.3)])),
            p_starts,
            &mut rng,
            &[],
            1e-9,
            100,
            0.0,
        )
        .unwrap();
        assert!((x[0] - 0.3).abs() < 1e-6, "minimizer {}", x[0]);
        assert!(v < 1e-12);
        assert_eq!(trials.len(), p_starts);
    }
}

#[test]
fn degenerate_empty_box_inner() {
    // both models fully fixed: inner returns the fixed parameters and the
    // plain criterion value
    let h = builtin_glycolysis();
    let h_same =
        HypothesisSet::new(vec![h.null_models[0].clone()], vec![h.null_models[0].clone()])
            .unwrap();
    let d = glyc_design(5, 50.0);
    let xi = d.initial_design(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let res = inner_minimize(
        &h_same,
        &d,
        &xi,
        (0, 0),
        &desk_integ(),
        3,
        &mut rng,
        &[],
        1e-8,
        100,
    )
    .unwrap();
    assert!(res.point.free_null.is_empty() && res.point.free_alt.is_empty());
    assert!(res.value.abs() < 1e-15);
}

#[test]
fn identical_models_stop_immediately() {
    let h = builtin_glycolysis();
    let h_same =
        HypothesisSet::new(vec![h.null_models[0].clone()], vec![h.null_models[0].clone()])
            .unwrap();
    let d = glyc_design(5, 50.0);
    let trace = run(&h_same, &d, &desk_outer(7), &desk_integ()).unwrap();
    assert_eq!(trace.status, OuterStatus::Converged);
    // stop at the first stop-rule check (N = 2), objective 0, gap 0
    assert_eq!(trace.iterations.len(), 2);
    let last = trace.iterations.last().unwrap();
    assert_eq!(last.gap, Some(0.0));
    assert!(!last.augmented);
    assert!(last.duplicate.iter().all(|d| *d), "repeat of the fixed point is a duplicate");
    assert!(
        trace.final_objective.abs() < 1e-6,
        "objective should be zero, got {}",
        trace.final_objective
    );
}

#[test]
fn discretized_worst_case_monotone_in_n() {
    // growing min-sets: for a fixed design the discretized worst case can
    // only go down as points accumulate
    let h = builtin_glycolysis();
    let d = glyc_design(5, 50.0);
    let xi = d.initial_design(2);
    let ic = desk_integ();
    let points = [
        vec![2.0, 1.0, 0.3, 200.0],
        vec![10.0, 10.0, 10.0, 150.0],
        vec![0.5, 3.0, 1.0, 100.0],
        vec![50.0, 0.1, 20.0, 300.0],
    ];
    let mut mins = Vec::new();
    let mut current = f64::INFINITY;
    for pt in &points {
        let v = evaluate_design(&h, &d, &xi, (0, 0), &[], pt, &ic).unwrap();
        current = current.min(v);
        mins.push(current);
    }
    for w in mins.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn homotopy_shift_algebra() {
    // kappa = 1 gives the unshifted rows; at kappa = 0 the new rows carry
    // the full shift, older rows none
    let h = builtin_glycolysis();
    let d = glyc_design(5, 50.0);
    let xi = d.initial_design(2);
    let ic = desk_integ();
    let mut sets = DiscretizedParamSet::new(1);
    sets.add(0, ParamPoint { free_null: vec![], free_alt: vec![2.0, 1.0, 0.3, 200.0] });
    sets.add(0, ParamPoint { free_null: vec![], free_alt: vec![5.0, 2.0, 1.0, 150.0] });
    let mut prob = transcribe(&h, &d, &sets, 0.0, &xi, &ic).unwrap();
    let x = prob.x_init.clone();
    let eval_ineq = |prob: &oed_core::transcription::TranscribedProblem, x: &[f64]| {
        let nlp_prob = prob.nlp_problem();
        let mut ev = oed_core::nlp::Evaluation {
            f: 0.0,
            grad: vec![0.0; prob.layout.n_vars],
            c_eq: vec![0.0; prob.layout.n_eq],
            c_ineq: vec![0.0; prob.layout.n_ineq],
            jac_eq: vec![Vec::new(); prob.layout.n_eq],
            jac_ineq: vec![Vec::new(); prob.layout.n_ineq],
        };
        let mut f = nlp_prob.eval;
        (f)(x, false, &mut ev).unwrap();
        ev.c_ineq
    };
    let base = eval_ineq(&prob, &x);
    let rho_val = 0.37;
    prob.set_shift(rho_val);
    let shifted = eval_ineq(&prob, &x);
    assert!((shifted[0] - base[0]).abs() < 1e-15, "old row must not shift");
    assert!(
        (shifted[1] - (base[1] + rho_val)).abs() < 1e-12,
        "new row must carry the shift: {} vs {}",
        shifted[1],
        base[1] + rho_val
    );
}

/// Small real run: statuses, gap invariants, set growth, determinism.
#[test]
fn small_glycolysis_run_mechanics() {
    let h = builtin_glycolysis();
    let mut d = glyc_design(6, 60.0);
    d.gates = glyc_gates();
    let oc = desk_outer(42);
    let trace1 = run(&h, &d, &oc, &desk_integ()).unwrap();
    assert!(!trace1.iterations.is_empty());
    for rec in &trace1.iterations {
        if let Some(g) = rec.gap {
            assert!(g >= -oc.eps, "gap {g} below -eps");
        }
        // exactly one point per pair per augmenting iteration
        if rec.augmented {
            assert_eq!(rec.new_points.len(), 1);
        }
    }
    // objective should improve on the initial design's worst case estimate
    let first = trace1.iterations.first().unwrap();
    let last_obj = trace1.final_objective;
    assert!(
        last_obj >= first.inner_values[0] - 1e-6,
        "final objective {last_obj} vs initial worst case {}",
        first.inner_values[0]
    );

    // determinism: identical config + seed gives a byte-identical trace
    let trace2 = run(&h, &d, &oc, &desk_integ()).unwrap();
    let s1 = serde_json::to_string(&trace1).unwrap();
    let s2 = serde_json::to_string(&trace2).unwrap();
    assert_eq!(s1, s2, "reruns must be byte-identical");
}
