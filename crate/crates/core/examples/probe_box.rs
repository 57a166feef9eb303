use oed_core::*;
use rand::Rng;
use rand::SeedableRng;
fn main() {
    let h = builtin_glycolysis();
    let gates = criterion::SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };
    let mut d = design::DesignSpec::equispaced(6, 60.0, 2, gates);
    d.y_i_initial = vec![15.0, 2.0];
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    let xi = d.initial_design(2);
    let ic = IntegratorConfig { rel_tol: 1e-10, abs_tol: 1e-10, rel_tol_sens: 1e-10, abs_tol_sens: 1e-10, max_steps: 100_000, ..Default::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut worst = std::time::Duration::ZERO;
    let mut worst_th = vec![];
    for k in 0..60 {
        let th: Vec<f64> = vec![
            rng.random_range(1e-7..100.0), rng.random_range(1e-7..100.0),
            rng.random_range(1e-7..100.0), rng.random_range(100.0..300.0)];
        let t0 = std::time::Instant::now();
        let v = transcription::evaluate_design_grad(&h, &d, &xi, (0,0), &[], &th, &ic, transcription::GradRequest{design:false,theta:true});
        let el = t0.elapsed();
        if el > worst { worst = el; worst_th = th.clone(); }
        if el.as_millis() > 200 { println!("slow k={k}: {:?} {:?} ok={}", el, th, v.is_ok()); }
    }
    println!("worst {:?} at {:?}", worst, worst_th);
}
