use oed_core::*;
fn main() {
    let h = builtin_glycolysis();
    let gates = criterion::SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };
    let mut d = design::DesignSpec::equispaced(6, 60.0, 2, gates);
    d.y_i_initial = vec![15.0, 2.0];
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    let ic = IntegratorConfig { rel_tol: 1e-10, abs_tol: 1e-10, rel_tol_sens: 1e-10, abs_tol_sens: 1e-10, ..Default::default() };
    let oc = OuterConfig { delta: 1e-3, eps: 1e-6, multistart_p: 2, safeguard_k: 1.4, homotopy_steps: 4, homotopy_gate: 1e19, max_outer: 6, seed: 42, nlp_max_iter: 300 };
    let t = std::time::Instant::now();
    let trace = outer::run(&h, &d, &oc, &ic).unwrap();
    eprintln!("total {:?} status {:?} obj {:.6e}", t.elapsed(), trace.status, trace.final_objective);
}
