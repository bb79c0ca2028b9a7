//! The `verify` suite: distribution identities, oracle agreement, gradient
//! and spectral checks on freshly drawn parameters.

use fedl::network::{gradient_check, NetworkConfig, NetworkParams};
use fedl::oracles::{grid_posterior_oracle, mc_moments, GridSpec};
use fedl::special::{ln_gamma, log_sum_exp};
use fedl::uncertainty::uncertainties;
use fedl::{FdParams, SimplexPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn random_fd(rng: &mut ChaCha8Rng, k: usize) -> FdParams {
    let alpha = (0..k).map(|_| rng.random_range(0.3..10.0)).collect();
    let p = simplex(rng, k);
    FdParams::new(alpha, p, rng.random_range(0.1..10.0)).expect("valid draw")
}

fn dirichlet_ln_pdf(alpha: &[f64], x: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    ln_gamma(a0) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
        + alpha.iter().zip(x).map(|(a, v)| (a - 1.0) * v.ln()).sum::<f64>()
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [2usize, 3, 10];
    let mut out = Vec::new();

    // exact posterior against numerical Bayes on a grid
    let grid = GridSpec::new(1000, 2).expect("grid");
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let prior = random_fd(&mut rng, 2);
        let counts: Vec<f64> = (0..2).map(|_| rng.random_range(0..10) as f64).collect();
        let ok = prior.posterior(&counts).and_then(|post| {
            let oracle = grid_posterior_oracle(&prior, &counts, &grid)?;
            for (pt, d) in oracle.points.iter().zip(&oracle.density) {
                worst = worst.max((post.pdf(pt)? - d).abs() / d);
            }
            Ok(())
        });
        if ok.is_err() {
            worst = f64::INFINITY;
        }
    }
    out.push(check("posterior_grid_oracle", worst < 1e-4, format!("max rel err {worst:.2e}")));

    let mut reduction = 0.0f64;
    let mut mixture = 0.0f64;
    for i in 0..30 {
        let k = dims[i % 3];
        let fd = random_fd(&mut rng, k);
        let a0 = fd.alpha0();
        let dir = FdParams::new(fd.alpha().to_vec(), fd.alpha().iter().map(|a| a / a0).collect(), 1.0).unwrap();
        for _ in 0..20 {
            let x = simplex(&mut rng, k);
            let pt = SimplexPoint::new(x.clone()).unwrap();
            reduction = reduction.max((dir.ln_pdf(&pt).unwrap() - dirichlet_ln_pdf(dir.alpha(), &x)).abs());
            let terms: Vec<f64> = (0..k)
                .map(|j| {
                    let mut shifted = fd.alpha().to_vec();
                    shifted[j] += fd.tau();
                    fd.p()[j].ln() + dirichlet_ln_pdf(&shifted, &x)
                })
                .collect();
            mixture = mixture.max((fd.ln_pdf(&pt).unwrap() - log_sum_exp(&terms)).abs());
        }
    }
    out.push(check("dirichlet_reduction", reduction < 1e-10, format!("max log diff {reduction:.2e}")));
    out.push(check("mixture_of_dirichlets", mixture < 1e-10, format!("max log diff {mixture:.2e}")));

    let mut decomp = 0.0f64;
    let mut mean_id = 0.0f64;
    for i in 0..300 {
        let fd = random_fd(&mut rng, dims[i % 3]);
        let d = fd.predictive_decomposition();
        let mean = fd.mean();
        let s = fd.alpha0() + fd.tau();
        decomp = decomp.max((d.w_edl + d.w_sm - 1.0).abs());
        for j in 0..fd.num_classes() {
            decomp = decomp
                .max((d.w_edl * d.p_edl[j] + d.w_sm * d.p_sm[j] - d.p_pred[j]).abs())
                .max((d.p_pred[j] - mean.as_slice()[j]).abs());
            mean_id = mean_id.max((mean.as_slice()[j] - (fd.alpha()[j] + fd.tau() * fd.p()[j]) / s).abs());
        }
    }
    out.push(check("predictive_decomposition", decomp < 1e-12, format!("max diff {decomp:.2e}")));
    out.push(check("mean_identity", mean_id < 1e-12, format!("max diff {mean_id:.2e}")));

    let mut worst_z = 0.0f64;
    for i in 0..5 {
        let fd = random_fd(&mut rng, dims[i % 3]);
        match mc_moments(&fd, &mut rng, 200_000) {
            Ok(est) => {
                let (mean, var) = (fd.mean(), fd.variance());
                for j in 0..fd.num_classes() {
                    worst_z = worst_z
                        .max((est.mean[j] - mean.as_slice()[j]).abs() / est.mean_se[j])
                        .max((est.variance[j] - var[j]).abs() / est.variance_se[j]);
                }
            }
            Err(_) => worst_z = f64::INFINITY,
        }
    }
    out.push(check("moments_monte_carlo", worst_z <= 4.0, format!("max |z| {worst_z:.2} (bound 4)")));

    let cfg = NetworkConfig::new(2, 2).with_hidden(&[16], &[]);
    let mut grad = 0.0f64;
    for _ in 0..3 {
        let params = NetworkParams::init(&cfg, &mut rng).expect("init");
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        grad = match gradient_check(&params, &cfg, &x, rng.random_range(0..2), 1e-5) {
            Ok(r) => grad.max(r.max_rel_error),
            Err(_) => f64::INFINITY,
        };
    }
    out.push(check("network_gradients", grad < 1e-4, format!("max rel err {grad:.2e}")));

    let cfg = NetworkConfig::new(8, 3).with_hidden(&[32, 32], &[]);
    let params = NetworkParams::init(&cfg, &mut rng).expect("init");
    let mut sigma_dev = 0.0f64;
    for layer in params.layers().filter(|l| l.power.is_some()) {
        let w = &layer.weight;
        let m = nalgebra::DMatrix::from_row_slice(w.rows, w.cols, &w.data);
        let sigma = m.singular_values().max();
        sigma_dev = sigma_dev.max((sigma - 1.0).abs());
    }
    out.push(check("spectral_norm", sigma_dev <= 1e-3, format!("max |sigma - 1| {sigma_dev:.2e}")));

    let mut split = 0.0f64;
    for i in 0..300 {
        let u = uncertainties(&random_fd(&mut rng, dims[i % 3]));
        split = split.max((u.total - u.aleatoric_raw - u.epistemic).abs());
    }
    out.push(check("uncertainty_split", split < 1e-12, format!("max |TU - AU - EU| {split:.2e}")));
    out
}
