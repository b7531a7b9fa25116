use dips::domain::*;
use dips::pipeline::*;
use dips::trajopt::*;

fn main() {
    let task = TaskSpec::rotor();
    // generate_dataset applies .high_budget() (x2 outers) to what we pass,
    // so pass outer = desired/2
    for (outer_half, inner, rho_max) in [(12, 100, 3e5), (16, 100, 3e5), (16, 150, 3e5), (12, 200, 1e6), (16, 200, 1e6)] {
        let opt = OptConfig { outer_iters: outer_half, inner_steps: inner, rho_max, ..OptConfig::default() };
        let t0 = std::time::Instant::now();
        let gen = generate_dataset(&task, 20, &opt, 7).unwrap();
        let n = gen.quality.len();
        let meet6 = gen.quality.iter().filter(|q| q.max_eq_residual <= 1e-3 && q.max_ineq_residual <= 1e-6).count();
        let mut sorted: Vec<f64> = gen.quality.iter().map(|q| q.max_eq_residual).collect();
        sorted.sort_by(f64::total_cmp);
        println!("outer={} inner={inner} rho_max={rho_max:.0e}: {meet6}/{n} meet bars, eq p90 {:.2e} p95 {:.2e} max {:.2e}  ({:.1}s)",
            2*outer_half, sorted[n*9/10], sorted[n*19/20], sorted[n-1], t0.elapsed().as_secs_f64());
    }
}
