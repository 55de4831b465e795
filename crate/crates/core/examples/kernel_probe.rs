use std::sync::Arc;
use carnot_core::group::StratifiedAlgebra;
use carnot_core::lattice::{GridMeasure, Lattice};
use carnot_core::heat::{SubLaplacian, heat_solve, HeatOptions};
use carnot_core::flow::{jko_run, JKOConfig, JKOState};
use carnot_core::distance::DistanceBackend;
use carnot_core::transport::{compress_with_partition, solve_exact, cost_matrix};

fn sweep(name: &str, g: Arc<StratifiedAlgebra<f64>>, lat: Arc<Lattice<f64>>, rho0: GridMeasure<f64>, budget: usize) {
    let op = SubLaplacian::assemble(g.clone(), lat.clone()).unwrap();
    let t_end = 0.25;
    let heat = heat_solve(&op, &rho0, t_end, op.max_stable_dt() * 0.4,
        &HeatOptions { record_stride: usize::MAX, ..Default::default() }).unwrap();
    let heat_final = heat.measures.last().unwrap();
    let backend = DistanceBackend::boxed(&g);
    let mut errs = vec![];
    for tau in [0.05, 0.025, 0.0125] {
        let t0 = std::time::Instant::now();
        let cfg = JKOConfig { support_budget: budget, ..JKOConfig::new(tau) };
        let run = jko_run(&g, &rho0, t_end, &cfg, &backend).unwrap();
        let heat_c = compress_with_partition(heat_final, &run.state.partition).unwrap();
        let jko_c = run.state.discrete().unwrap();
        let cost = cost_matrix(&g, &backend, &jko_c.points, &heat_c.points).unwrap();
        let w = solve_exact(&jko_c, &heat_c, &cost).unwrap().cost.max(0.0).sqrt();
        println!("{name} tau={tau}: W_err={w:.5e} ({:?}, converged={})", t0.elapsed(), run.reports.iter().all(|r| r.converged));
        errs.push(w);
    }
    println!("{name} ratios: {:.3}, {:.3}", errs[1] / errs[0], errs[2] / errs[1]);
}

fn main() {
    let g1 = Arc::new(StratifiedAlgebra::<f64>::preset("r1").unwrap());
    let lat1: Arc<Lattice<f64>> = Arc::new(Lattice::symmetric(&[2.0], &[257]).unwrap());
    let (r0, _) = GridMeasure::discretize(lat1.clone(), |c| (-(c[0] * c[0]) / 0.08).exp()).unwrap();
    sweep("r1", g1, lat1, r0, 257);

    let g = Arc::new(StratifiedAlgebra::<f64>::preset("h1").unwrap());
    let lat: Arc<Lattice<f64>> = Arc::new(Lattice::symmetric(&[2.5, 2.5, 4.0], &[33, 33, 43]).unwrap());
    let (rho0, _) = GridMeasure::discretize(lat.clone(), |c| {
        (-(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) / 0.32).exp()
    }).unwrap();
    sweep("h1", g, lat, rho0, 512);
}
