//! Brute-force reference computations for the FD closed forms.
//!
//! Everything here is deliberately computed along a different path from
//! [`crate::fd`]: moments come from sampling, posteriors from numerically
//! normalizing prior x likelihood, and masses from quadrature or importance
//! sampling.

use crate::error::{Error, Result};
use crate::fd::{DirichletParams, FdParams, SimplexPoint};
use crate::special::{ln_gamma, log_sum_exp};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// An evaluation lattice on the simplex for K = 2 or K = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    resolution: usize,
    num_classes: usize,
}

impl GridSpec {
    pub fn new(resolution: usize, num_classes: usize) -> Result<Self> {
        match num_classes {
            2 if resolution >= 100 => {}
            3 if resolution >= 50 => {}
            2 | 3 => {
                return Err(Error::Config(format!(
                    "grid resolution {resolution} too coarse for K={num_classes}"
                )))
            }
            k => {
                return Err(Error::UnsupportedDimension(format!(
                    "grid oracles support K in {{2, 3}}, got {k}"
                )))
            }
        }
        Ok(Self {
            resolution,
            num_classes,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Interior lattice points with spacing `1 / (resolution + 1)`.
    pub fn points(&self) -> Vec<SimplexPoint> {
        let r = self.resolution;
        let h = 1.0 / (r + 1) as f64;
        let mut out = Vec::new();
        if self.num_classes == 2 {
            for i in 1..=r {
                let x = i as f64 * h;
                out.push(SimplexPoint::new(vec![x, 1.0 - x]).expect("lattice point"));
            }
        } else {
            for i in 1..=r {
                for j in 1..=(r - i) {
                    let (a, b) = (i as f64 * h, j as f64 * h);
                    let c = 1.0 - a - b;
                    if c > 0.5 * h {
                        out.push(SimplexPoint::new(vec![a, b, c]).expect("lattice point"));
                    }
                }
            }
        }
        out
    }
}

/// Sample moments with their standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub n: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub variance_se: Vec<f64>,
}

/// Streaming central moments up to order four (Terriberry's update).
#[derive(Debug, Clone, Default)]
struct RunningMoments {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl RunningMoments {
    fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    fn mean_se(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }

    /// Large-sample standard error of the sample variance.
    fn variance_se(&self) -> f64 {
        let mu4 = self.m4 / self.n;
        let s2 = self.m2 / self.n;
        ((mu4 - s2 * s2).max(0.0) / self.n).sqrt()
    }
}

/// Monte-Carlo mean and variance of `n` FD draws.
pub fn mc_moments<R: Rng + ?Sized>(params: &FdParams, rng: &mut R, n: usize) -> Result<MomentEstimate> {
    if n < 10_000 {
        return Err(Error::Config(format!("mc_moments needs n >= 1e4, got {n}")));
    }
    let k = params.num_classes();
    let mut acc = vec![RunningMoments::default(); k];
    for _ in 0..n {
        let s = params.sample_one(rng);
        for (m, &x) in acc.iter_mut().zip(s.as_slice()) {
            m.push(x);
        }
    }
    Ok(MomentEstimate {
        n,
        mean: acc.iter().map(|m| m.mean).collect(),
        variance: acc.iter().map(RunningMoments::variance).collect(),
        mean_se: acc.iter().map(RunningMoments::mean_se).collect(),
        variance_se: acc.iter().map(RunningMoments::variance_se).collect(),
    })
}

/// Monte-Carlo estimate of `E||y - pi||^2` with its standard error.
pub fn mc_expected_squared_error<R: Rng + ?Sized>(
    params: &FdParams,
    onehot: &[f64],
    rng: &mut R,
    n: usize,
) -> (f64, f64) {
    let mut acc = RunningMoments::default();
    for _ in 0..n {
        let s = params.sample_one(rng);
        let e: f64 = s
            .as_slice()
            .iter()
            .zip(onehot)
            .map(|(p, y)| (y - p) * (y - p))
            .sum();
        acc.push(e);
    }
    (acc.mean, acc.mean_se())
}

// ---------------------------------------------------------------------------
// Double-exponential quadrature on (0, 1).
//
// x = 1 / (1 + exp(-pi sinh t)) maps the real line onto (0, 1); the trapezoid
// rule in t then converges geometrically even with integrable endpoint
// singularities. Both ln x and ln(1 - x) are formed directly from t so nodes
// close to an endpoint keep full relative precision.

const DE_HALF_WIDTH: f64 = 5.0;
const DE_STEP: f64 = 1.0 / 24.0;

#[derive(Debug, Clone, Copy)]
struct DeNode {
    ln_x: f64,
    ln_1mx: f64,
    ln_weight: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn de_nodes() -> Vec<DeNode> {
    let n = (DE_HALF_WIDTH / DE_STEP).round() as i64;
    (-n..=n)
        .map(|j| {
            let t = j as f64 * DE_STEP;
            let u = PI * t.sinh();
            let ln_x = -softplus(-u);
            let ln_1mx = -softplus(u);
            // dx/dt = x (1 - x) pi cosh t
            let ln_weight = DE_STEP.ln() + ln_x + ln_1mx + (PI * t.cosh()).ln();
            DeNode {
                ln_x,
                ln_1mx,
                ln_weight,
            }
        })
        .collect()
}

/// `ln ∫_simplex exp(f(ln pi)) d pi` for K = 2 or 3, with `f` taking log-coordinates.
fn ln_simplex_integral<F: Fn(&[f64]) -> f64>(k: usize, ln_f: F) -> Result<f64> {
    let nodes = de_nodes();
    let mut terms = Vec::new();
    match k {
        2 => {
            for n in &nodes {
                terms.push(n.ln_weight + ln_f(&[n.ln_x, n.ln_1mx]));
            }
        }
        3 => {
            // pi = (x, (1-x) y, (1-x)(1-y)), Jacobian (1 - x)
            for a in &nodes {
                for b in &nodes {
                    let ln_pi = [a.ln_x, a.ln_1mx + b.ln_x, a.ln_1mx + b.ln_1mx];
                    terms.push(a.ln_weight + b.ln_weight + a.ln_1mx + ln_f(&ln_pi));
                }
            }
        }
        _ => {
            return Err(Error::UnsupportedDimension(format!(
                "simplex quadrature supports K in {{2, 3}}, got {k}"
            )))
        }
    }
    Ok(log_sum_exp(&terms))
}

fn ln_dirichlet_log_coords(alpha: &[f64], ln_pi: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(a0);
    for (&a, &l) in alpha.iter().zip(ln_pi) {
        lp += (a - 1.0) * l - ln_gamma(a);
    }
    lp
}

/// Prior density evaluated as the Dirichlet mixture `sum_k p_k Dir(alpha + tau e_k)`.
fn ln_prior_mixture(prior: &FdParams, ln_pi: &[f64]) -> f64 {
    let terms: Vec<f64> = prior
        .mixture_components()
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, d)| w.ln() + ln_dirichlet_log_coords(d.alpha(), ln_pi))
        .collect();
    log_sum_exp(&terms)
}

/// Numerically normalized posterior density on a grid.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub points: Vec<SimplexPoint>,
    pub density: Vec<f64>,
}

/// Posterior density `prior(pi) * prod_k pi_k^counts_k / Z` on the grid,
/// with `Z` found by quadrature. No conjugacy is assumed.
pub fn grid_posterior_oracle(prior: &FdParams, counts: &[f64], grid: &GridSpec) -> Result<GridDensity> {
    let k = prior.num_classes();
    if k != grid.num_classes() {
        return Err(Error::UnsupportedDimension(format!(
            "prior has K={k}, grid has K={}",
            grid.num_classes()
        )));
    }
    if counts.len() != k {
        return Err(Error::InvalidParams("counts length mismatch".into()));
    }
    let ln_unnorm = |ln_pi: &[f64]| -> f64 {
        ln_prior_mixture(prior, ln_pi)
            + counts.iter().zip(ln_pi).map(|(n, l)| n * l).sum::<f64>()
    };
    let ln_z = ln_simplex_integral(k, ln_unnorm)?;
    let points = grid.points();
    let density = points
        .iter()
        .map(|p| {
            let ln_pi: Vec<f64> = p.as_slice().iter().map(|v| v.ln()).collect();
            (ln_unnorm(&ln_pi) - ln_z).exp()
        })
        .collect();
    Ok(GridDensity { points, density })
}

/// How to estimate the total mass of an FD density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizationMethod {
    /// Double-exponential trapezoid quadrature (K = 2 or 3).
    Grid,
    /// Importance sampling with a `Dir(alpha)` proposal.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Estimated `∫ fd_pdf` over the simplex; should be close to 1.
pub fn density_normalization_estimate(params: &FdParams, method: NormalizationMethod) -> Result<f64> {
    match method {
        NormalizationMethod::Grid => {
            let k = params.num_classes();
            // evaluate through FdParams::ln_pdf, skipping nodes that round onto the boundary
            let ln_mass = ln_simplex_integral(k, |ln_pi| {
                let pi: Vec<f64> = ln_pi.iter().map(|l| l.exp()).collect();
                if pi.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                    return f64::NEG_INFINITY;
                }
                let sum: f64 = pi.iter().sum();
                let point = SimplexPoint::new(pi.iter().map(|v| v / sum).collect());
                match point.and_then(|p| params.ln_pdf(&p)) {
                    Ok(v) => v,
                    Err(_) => f64::NEG_INFINITY,
                }
            })?;
            Ok(ln_mass.exp())
        }
        NormalizationMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::Config("need at least one sample".into()));
            }
            let proposal = DirichletParams::new(params.alpha().to_vec())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            let mut used = 0usize;
            for _ in 0..samples {
                let x = proposal.sample_one(&mut rng);
                if !x.is_interior() || x.as_slice().iter().any(|v| *v >= 1.0) {
                    continue;
                }
                let w = params.ln_pdf(&x)? - proposal.ln_pdf(&x)?;
                total += w.exp();
                used += 1;
            }
            Ok(total / used as f64)
        }
    }
}
