use oed_core::*;
use std::time::Instant;
fn main() {
    let h = builtin_glycolysis();
    let gates = criterion::SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };
    let mut d = design::DesignSpec::equispaced(6, 60.0, 2, gates);
    d.y_i_initial = vec![15.0, 2.0];
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    let xi = d.initial_design(2);
    for (name, th, rtol) in [
        ("mid 1e-10", vec![50.0, 50.0, 50.0, 200.0], 1e-10),
        ("mid 1e-8", vec![50.0, 50.0, 50.0, 200.0], 1e-8),
        ("corner hi 1e-10", vec![100.0, 100.0, 1e-7, 100.0], 1e-10),
        ("corner hi 1e-8", vec![100.0, 100.0, 1e-7, 100.0], 1e-8),
        ("corner lo 1e-8", vec![1e-7, 1e-7, 100.0, 300.0], 1e-8),
        ("mimic 1e-8", vec![2.0, 0.2, 1.0, 150.0], 1e-8),
    ] {
        let ic = IntegratorConfig { rel_tol: rtol, abs_tol: rtol, rel_tol_sens: rtol.max(1e-8), abs_tol_sens: rtol.max(1e-8), ..Default::default() };
        let t0 = Instant::now();
        let v = transcription::evaluate_design(&h, &d, &xi, (0,0), &[], &th, &ic);
        let el = t0.elapsed();
        let t1 = Instant::now();
        let g = transcription::evaluate_design_grad(&h, &d, &xi, (0,0), &[], &th, &ic, transcription::GradRequest{design:false, theta:true});
        let el2 = t1.elapsed();
        println!("{name}: value={:?} plain={:?} grad={:?}", v.map(|x| x), el, el2);
        let _ = g;
    }
}
