use oed_core::*;
use rand::SeedableRng;
fn main() {
    let h = builtin_glycolysis();
    let gates = criterion::SwitchingParams { a1: 20.0, b1: 10.0, a2: 0.05, b2: 0.025 };
    let mut d = design::DesignSpec::equispaced(6, 60.0, 2, gates);
    d.y_i_initial = vec![15.0, 2.0];
    d.y_i_bounds = vec![[1e-7, 25.0], [1e-7, 25.0]];
    let xi = d.initial_design(2);
    let ic = IntegratorConfig { rel_tol: 1e-10, abs_tol: 1e-10, rel_tol_sens: 1e-10, abs_tol_sens: 1e-10, ..Default::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let t = std::time::Instant::now();
    let res = outer::inner_minimize(&h, &d, &xi, (0, 0), &ic, 2, &mut rng, &[], 1e-6, 300);
    eprintln!("inner done {:?}: {:?}", t.elapsed(), res.map(|r| (r.value, r.point)));
}
