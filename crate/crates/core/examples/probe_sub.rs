use oed_core::*;
use oed_core::outer::{DiscretizedParamSet, ParamPoint};
fn main() {
    let h = builtin_glycolysis();
    let gates = criterion::SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };
    let mut d = design::DesignSpec::equispaced(6, 60.0, 2, gates);
    d.y_i_initial = vec![15.0, 2.0];
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    let xi = d.initial_design(2);
    let ic = IntegratorConfig { rel_tol: 1e-10, abs_tol: 1e-10, rel_tol_sens: 1e-10, abs_tol_sens: 1e-10, ..Default::default() };
    let mut sets = DiscretizedParamSet::new(1);
    sets.add(0, ParamPoint { free_null: vec![], free_alt: vec![99.99895313809242, 54.89209578366906, 5.538469875710962, 273.5929264135607] });
    let prob = transcription::transcribe(&h, &d, &sets, 0.0, &xi, &ic).unwrap();
    let x0 = prob.x_init.clone();
    let mut np = prob.nlp_problem();
    let t = std::time::Instant::now();
    let sol = nlp::solve(&mut np, &x0, 1e-6, 300, None).unwrap();
    eprintln!("done {:?} status {:?} kkt {:.3e} viol {:.3e} tau {:.6e} iters {}", t.elapsed(), sol.status, sol.kkt_residual, sol.constraint_violation, -sol.f, sol.iterations);
}
