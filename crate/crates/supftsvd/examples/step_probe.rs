// temporary probe: print the exact trace of the failing config
use nalgebra::DVector;
use supftsvd::em::{fit, FitConfig};
use supftsvd::simulate::{simulate, CovariateDist, MRule, SimConfig};

fn main() {
    let config = SimConfig {
        n: 30, p: 40, rank: 1,
        m_rule: MRule::Uniform { lo: 3, hi: 8 },
        sigma2: 4.0, tau: vec![2.0],
        gamma: vec![DVector::from_column_slice(&[1.5, 3.0])],
        lambda: vec![80.0],
        covariate_dists: vec![CovariateDist::Uniform01, CovariateDist::Beta11],
        seed: 2, covariate_seed: None,
    };
    let (ds, _) = simulate(&config).unwrap();
    let fc = FitConfig {
        rank: 1,
        cv_freeze_iter: 1,
        delta_stop: 1e-8,
        max_iter: 30,
        seed: 2,
        ..FitConfig::default()
    };
    let model = fit(&ds, &fc).unwrap();
    println!("eta = {:?}", model.eta);
    for (i, (obj, delta)) in model
        .diagnostics
        .objective_trace
        .iter()
        .zip(&model.diagnostics.delta_trace)
        .enumerate()
    {
        println!("iter {i:3}: obj {obj:.10e}  delta {delta:+.3e}  eta {:?}", model.diagnostics.eta_trace[i]);
    }
}
