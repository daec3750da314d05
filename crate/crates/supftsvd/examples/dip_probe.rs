// temporary probe: worst relative trace dip with CV-selected eta frozen after one iteration
use nalgebra::DVector;
use supftsvd::em::{fit, FitConfig};
use supftsvd::simulate::{simulate, CovariateDist, MRule, SimConfig};

fn main() {
    let mut worst: f64 = 0.0;
    let mut nonconv = 0;
    for seed in 0..10u64 {
        for &(rank, sigma2, tau) in &[
            (1usize, 1.0, 1.0), (1, 4.0, 2.0), (1, 1.0, 5.0),
            (2, 1.0, 1.0), (2, 4.0, 2.0), (2, 1.0, 3.0),
        ] {
            let gamma = if rank == 1 {
                vec![DVector::from_column_slice(&[1.5, 3.0])]
            } else {
                vec![DVector::from_column_slice(&[1.5, 3.0]), DVector::from_column_slice(&[2.0, 3.4])]
            };
            let lambda = if rank == 1 { vec![80.0] } else { vec![120.0, 80.0] };
            let config = SimConfig {
                n: 30, p: 40, rank,
                m_rule: MRule::Uniform { lo: 3, hi: 8 },
                sigma2, tau: vec![tau; rank], gamma, lambda,
                covariate_dists: vec![CovariateDist::Uniform01, CovariateDist::Beta11],
                seed, covariate_seed: None,
            };
            let (ds, _) = simulate(&config).unwrap();
            let fc = FitConfig {
                rank,
                cv_freeze_iter: 1,
                delta_stop: 1e-8,
                max_iter: 150,
                seed,
                ..FitConfig::default()
            };
            match fit(&ds, &fc) {
                Ok(model) => {
                    if !model.diagnostics.converged { nonconv += 1; }
                    let tr = &model.diagnostics.objective_trace;
                    let mut local: f64 = 0.0;
                    for w in tr.windows(2) {
                        local = local.max((w[0] - w[1]) / w[0].abs().max(1.0));
                    }
                    if local > worst {
                        worst = local;
                        println!("dip {local:.3e} seed={seed} rank={rank} s2={sigma2} tau={tau} eta={:?} iters={}",
                                 model.eta, model.diagnostics.iterations);
                    }
                }
                Err(e) => println!("fit error seed={seed} rank={rank}: {e}"),
            }
        }
    }
    println!("WORST {worst:.3e}, nonconverged {nonconv}/60");
}
