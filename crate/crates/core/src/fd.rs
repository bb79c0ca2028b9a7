//! The flexible Dirichlet (FD) distribution over the probability simplex.
//!
//! An FD draw normalizes a flexible Gamma basis `Y_k = W_k + Z_k U` with
//! independent `W_k ~ Gamma(alpha_k)`, `U ~ Gamma(tau)` and a one-hot
//! `Z ~ Multinomial(1, p)`. Its density is the mixture
//! `sum_k p_k Dir(pi | alpha + tau e_k)`, which is what every closed form in
//! this module is built on.

use crate::error::{Error, Result};
use crate::special::{ln_beta, ln_gamma, log_sum_exp, sample_ln_gamma};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tolerance on `sum(p) == 1` for allocation probabilities.
pub const ALLOCATION_SUM_TOL: f64 = 1e-12;
/// Tolerance on `sum(pi) == 1` for simplex points.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Coordinates below this are lifted before taking logs.
pub const BOUNDARY_FLOOR: f64 = 1e-12;

/// Parameters `(alpha, p, tau)` of one flexible Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdParams {
    alpha: Vec<f64>,
    p: Vec<f64>,
    tau: f64,
}

/// Concentration vector of an ordinary Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint {
    pi: Vec<f64>,
}

/// A subjective-logic opinion: belief masses, uncertainty mass and base rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlOpinion {
    pub belief: Vec<f64>,
    pub uncertainty_mass: f64,
    pub base_rate: Vec<f64>,
}

impl SlOpinion {
    /// `b + u * a`
    pub fn projected_probability(&self) -> Vec<f64> {
        self.belief
            .iter()
            .zip(&self.base_rate)
            .map(|(b, a)| b + self.uncertainty_mass * a)
            .collect()
    }
}

/// One class-specific opinion per class, selected with probabilities `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpinionMixture {
    pub opinions: Vec<SlOpinion>,
    pub selection: Vec<f64>,
}

impl OpinionMixture {
    /// Selection-weighted average of the projected probabilities.
    pub fn projected_probability(&self) -> Vec<f64> {
        let k = self.selection.len();
        let mut out = vec![0.0; k];
        for (op, &w) in self.opinions.iter().zip(&self.selection) {
            for (o, q) in out.iter_mut().zip(op.projected_probability()) {
                *o += w * q;
            }
        }
        out
    }
}

/// Split of the predictive distribution into an evidential (Dirichlet mean)
/// part and a softmax part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDecomposition {
    pub w_edl: f64,
    pub w_sm: f64,
    pub p_edl: Vec<f64>,
    pub p_sm: Vec<f64>,
    pub p_pred: Vec<f64>,
}

fn check_concentration(alpha: &[f64], what: &str) -> Result<()> {
    if alpha.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "{what} needs at least 2 classes, got {}",
            alpha.len()
        )));
    }
    if let Some((k, a)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| !(a.is_finite() && **a > 0.0))
    {
        return Err(Error::InvalidParams(format!(
            "{what}[{k}] = {a} must be positive and finite"
        )));
    }
    Ok(())
}

impl FdParams {
    pub fn new(alpha: Vec<f64>, p: Vec<f64>, tau: f64) -> Result<Self> {
        check_concentration(&alpha, "alpha")?;
        if p.len() != alpha.len() {
            return Err(Error::InvalidParams(format!(
                "p has {} entries, alpha has {}",
                p.len(),
                alpha.len()
            )));
        }
        if let Some((k, v)) = p
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidParams(format!("p[{k}] = {v} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > ALLOCATION_SUM_TOL {
            return Err(Error::InvalidParams(format!("p sums to {sum}, not 1")));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParams(format!("tau = {tau} must be positive")));
        }
        Ok(Self { alpha, p, tau })
    }

    /// The FD parameters for which the distribution collapses to `Dir(alpha)`:
    /// `tau = 1`, `p = alpha / alpha_0`.
    pub fn dirichlet_equivalent(alpha: Vec<f64>) -> Result<Self> {
        check_concentration(&alpha, "alpha")?;
        let a0: f64 = alpha.iter().sum();
        let p = alpha.iter().map(|a| a / a0).collect();
        Self::new(alpha, p, 1.0)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_0 = sum_k alpha_k`
    pub fn alpha0(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// `E[pi_k] = (alpha_k + tau p_k) / (alpha_0 + tau)`
    pub fn mean(&self) -> SimplexPoint {
        let s = self.alpha0() + self.tau;
        SimplexPoint {
            pi: self
                .alpha
                .iter()
                .zip(&self.p)
                .map(|(a, p)| (a + self.tau * p) / s)
                .collect(),
        }
    }

    /// Per-class variance `Var(pi_k)`.
    pub fn variance(&self) -> Vec<f64> {
        let tau = self.tau;
        let s = self.alpha0() + tau;
        self.alpha
            .iter()
            .zip(&self.p)
            .map(|(&a, &p)| {
                let ak = a + tau * p;
                ak * (s - ak) / (s * s * (s + 1.0)) + tau * tau * p * (1.0 - p) / (s * (s + 1.0))
            })
            .collect()
    }

    /// Natural log of the density at an interior point.
    ///
    /// Points with a coordinate at or beyond the boundary are rejected;
    /// coordinates in `(0, 1e-12)` are lifted to `1e-12` before the log.
    pub fn ln_pdf(&self, point: &SimplexPoint) -> Result<f64> {
        let pi = point.as_slice();
        if pi.len() != self.num_classes() {
            return Err(Error::InvalidParams(format!(
                "point has {} coordinates, distribution has {} classes",
                pi.len(),
                self.num_classes()
            )));
        }
        if let Some((k, v)) = pi.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!(
                "log-density undefined on the simplex boundary (pi[{k}] = {v})"
            )));
        }
        let ln_pi: Vec<f64> = pi.iter().map(|v| v.max(BOUNDARY_FLOOR).ln()).collect();
        let tau = self.tau;
        let mut ln_norm = ln_gamma(self.alpha0() + tau);
        let mut ln_base = 0.0;
        for (&a, &lp) in self.alpha.iter().zip(&ln_pi) {
            ln_norm -= ln_gamma(a);
            ln_base += (a - 1.0) * lp;
        }
        let terms: Vec<f64> = self
            .alpha
            .iter()
            .zip(&self.p)
            .zip(&ln_pi)
            .filter(|((_, &p), _)| p > 0.0)
            .map(|((&a, &p), &lp)| p.ln() + ln_gamma(a) - ln_gamma(a + tau) + tau * lp)
            .collect();
        Ok(ln_norm + ln_base + log_sum_exp(&terms))
    }

    pub fn pdf(&self, point: &SimplexPoint) -> Result<f64> {
        self.ln_pdf(point).map(f64::exp)
    }

    /// The Dirichlet mixture components `(p_k, Dir(alpha + tau e_k))`.
    pub fn mixture_components(&self) -> Vec<(f64, DirichletParams)> {
        (0..self.num_classes())
            .map(|k| {
                let mut a = self.alpha.clone();
                a[k] += self.tau;
                (self.p[k], DirichletParams { alpha: a })
            })
            .collect()
    }

    /// Draws one point through the flexible Gamma basis.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> SimplexPoint {
        let mut ln_y: Vec<f64> = self
            .alpha
            .iter()
            .map(|&a| sample_ln_gamma(rng, a))
            .collect();
        let ln_u = sample_ln_gamma(rng, self.tau);
        let chosen = sample_categorical(rng, &self.p);
        ln_y[chosen] = log_sum_exp(&[ln_y[chosen], ln_u]);
        let ln_total = log_sum_exp(&ln_y);
        SimplexPoint {
            pi: ln_y.iter().map(|l| (l - ln_total).exp()).collect(),
        }
    }

    /// Draws `n` points. The sequence is fully determined by the RNG state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<SimplexPoint> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Exact posterior after observing (possibly fractional) class counts.
    ///
    /// The concentration absorbs the counts and `tau` is unchanged. The
    /// allocation probabilities are reweighted by
    /// `Gamma(alpha_k) Gamma(alpha'_k + tau) / (Gamma(alpha_k + tau) Gamma(alpha'_k))`,
    /// which is what keeps the mixture weights consistent with the new
    /// concentration. With zero counts the prior comes back unchanged.
    pub fn posterior(&self, counts: &[f64]) -> Result<FdParams> {
        self.check_counts(counts)?;
        let tau = self.tau;
        let alpha_post: Vec<f64> = self.alpha.iter().zip(counts).map(|(a, n)| a + n).collect();
        let ln_w: Vec<f64> = self
            .alpha
            .iter()
            .zip(&alpha_post)
            .zip(&self.p)
            .map(|((&a, &a_post), &p)| {
                if p == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    p.ln() + ln_gamma(a) - ln_gamma(a + tau) + ln_gamma(a_post + tau)
                        - ln_gamma(a_post)
                }
            })
            .collect();
        let ln_z = log_sum_exp(&ln_w);
        let mut p_post: Vec<f64> = ln_w.iter().map(|l| (l - ln_z).exp()).collect();
        let sum: f64 = p_post.iter().sum();
        p_post.iter_mut().for_each(|v| *v /= sum);
        FdParams::new(alpha_post, p_post, tau)
    }

    /// Shifts the concentration by `counts` and keeps `p` and `tau`.
    ///
    /// This is the parameter map of the pseudo-count reading of the model
    /// output. It coincides with [`FdParams::posterior`] only when the
    /// allocation reweighting is uniform across classes (e.g. zero counts).
    pub fn with_added_evidence(&self, counts: &[f64]) -> Result<FdParams> {
        self.check_counts(counts)?;
        let alpha = self.alpha.iter().zip(counts).map(|(a, n)| a + n).collect();
        FdParams::new(alpha, self.p.clone(), self.tau)
    }

    fn check_counts(&self, counts: &[f64]) -> Result<()> {
        if counts.len() != self.num_classes() {
            return Err(Error::InvalidParams(format!(
                "counts has {} entries, expected {}",
                counts.len(),
                self.num_classes()
            )));
        }
        if let Some(c) = counts.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::InvalidParams(format!("count {c} must be >= 0")));
        }
        Ok(())
    }

    /// Density of the `k`-th marginal, a two-component Beta mixture.
    pub fn marginal_pdf(&self, k: usize, x: f64) -> Result<f64> {
        if k >= self.num_classes() {
            return Err(Error::InvalidParams(format!("class index {k} out of range")));
        }
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Domain(format!("marginal density needs 0 < x < 1, got {x}")));
        }
        let (a, p, tau) = (self.alpha[k], self.p[k], self.tau);
        let rest = self.alpha0() - a;
        let beta_pdf = |a: f64, b: f64| {
            ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
        };
        let mut d = 0.0;
        if p > 0.0 {
            d += p * beta_pdf(a + tau, rest);
        }
        if p < 1.0 {
            d += (1.0 - p) * beta_pdf(a, rest + tau);
        }
        Ok(d)
    }

    /// `|tau / (alpha_0 + tau - 2)|`, reported as a mode-separation diagnostic.
    pub fn mode_separation(&self) -> Result<f64> {
        let denom = self.alpha0() + self.tau - 2.0;
        if denom.abs() <= 4.0 * f64::EPSILON {
            return Err(Error::Singularity(
                "mode separation undefined at alpha_0 + tau = 2".into(),
            ));
        }
        Ok((self.tau / denom).abs())
    }

    /// Predictive mean written as `w_edl * alpha / alpha_0 + w_sm * p`.
    pub fn predictive_decomposition(&self) -> PredictiveDecomposition {
        let a0 = self.alpha0();
        let s = a0 + self.tau;
        let w_edl = a0 / s;
        let w_sm = self.tau / s;
        let p_edl: Vec<f64> = self.alpha.iter().map(|a| a / a0).collect();
        let p_sm = self.p.clone();
        let p_pred = p_edl
            .iter()
            .zip(&p_sm)
            .map(|(e, q)| w_edl * e + w_sm * q)
            .collect();
        PredictiveDecomposition {
            w_edl,
            w_sm,
            p_edl,
            p_sm,
            p_pred,
        }
    }

    /// One opinion per class hypothesis: shared belief `alpha / (alpha_0 + tau)`,
    /// shared uncertainty mass `tau / (alpha_0 + tau)`, base rate `e_j`.
    pub fn sl_opinions(&self) -> OpinionMixture {
        let k = self.num_classes();
        let s = self.alpha0() + self.tau;
        let belief: Vec<f64> = self.alpha.iter().map(|a| a / s).collect();
        let u = self.tau / s;
        let opinions = (0..k)
            .map(|j| {
                let mut base_rate = vec![0.0; k];
                base_rate[j] = 1.0;
                SlOpinion {
                    belief: belief.clone(),
                    uncertainty_mass: u,
                    base_rate,
                }
            })
            .collect();
        OpinionMixture {
            opinions,
            selection: self.p.clone(),
        }
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the cumulative sum; take the last non-zero class
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_concentration(&alpha, "alpha")?;
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let a0 = self.alpha0();
        self.alpha.iter().map(|a| a / a0).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        let a0 = self.alpha0();
        self.alpha
            .iter()
            .map(|a| a * (a0 - a) / (a0 * a0 * (a0 + 1.0)))
            .collect()
    }

    pub fn ln_pdf(&self, point: &SimplexPoint) -> Result<f64> {
        let pi = point.as_slice();
        if pi.len() != self.alpha.len() {
            return Err(Error::InvalidParams("dimension mismatch".into()));
        }
        if pi.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Domain("log-density undefined on the boundary".into()));
        }
        let mut lp = ln_gamma(self.alpha0());
        for (&a, &x) in self.alpha.iter().zip(pi) {
            lp += (a - 1.0) * x.max(BOUNDARY_FLOOR).ln() - ln_gamma(a);
        }
        Ok(lp)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> SimplexPoint {
        let ln_g: Vec<f64> = self.alpha.iter().map(|&a| sample_ln_gamma(rng, a)).collect();
        let ln_total = log_sum_exp(&ln_g);
        SimplexPoint {
            pi: ln_g.iter().map(|l| (l - ln_total).exp()).collect(),
        }
    }
}

impl SimplexPoint {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.len() < 2 {
            return Err(Error::InvalidParams("simplex point needs >= 2 coordinates".into()));
        }
        if pi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParams("simplex coordinates must be >= 0".into()));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidParams(format!("coordinates sum to {sum}, not 1")));
        }
        Ok(Self { pi })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.pi
    }

    pub fn is_interior(&self) -> bool {
        self.pi.iter().all(|v| *v > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd(alpha: &[f64], p: &[f64], tau: f64) -> FdParams {
        FdParams::new(alpha.to_vec(), p.to_vec(), tau).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(FdParams::new(vec![1.0], vec![1.0], 1.0).is_err());
        assert!(FdParams::new(vec![1.0, 0.0], vec![0.5, 0.5], 1.0).is_err());
        assert!(FdParams::new(vec![1.0, 1.0], vec![0.6, 0.5], 1.0).is_err());
        assert!(FdParams::new(vec![1.0, 1.0], vec![1.5, -0.5], 1.0).is_err());
        assert!(FdParams::new(vec![1.0, 1.0], vec![0.5, 0.5], 0.0).is_err());
        assert!(FdParams::new(vec![1.0, 1.0], vec![0.5, 0.5], f64::NAN).is_err());
    }

    #[test]
    fn mean_examples() {
        assert!(close(fd(&[1.0, 1.0], &[0.5, 0.5], 1.0).mean().as_slice(), &[0.5, 0.5], 1e-15));
        let m = fd(&[3.0, 1.0], &[0.75, 0.25], 1.0).mean();
        assert!(close(m.as_slice(), &[0.75, 0.25], 1e-15));
        let dir = DirichletParams::new(vec![3.0, 1.0]).unwrap().mean();
        assert!(close(m.as_slice(), &dir, 1e-15));
        let m = fd(&[2.0, 1.0, 1.0], &[1.0, 0.0, 0.0], 4.0).mean();
        assert!(close(m.as_slice(), &[0.75, 0.125, 0.125], 1e-15));
    }

    #[test]
    fn variance_examples() {
        let v = fd(&[1.0, 1.0], &[0.5, 0.5], 1.0).variance();
        assert!(close(&v, &[1.0 / 12.0, 1.0 / 12.0], 1e-15));
        let v = fd(&[2.0, 2.0], &[0.5, 0.5], 1.0).variance();
        assert!(close(&v, &[0.05, 0.05], 1e-15));
        let dir = DirichletParams::new(vec![2.0, 2.0]).unwrap().variance();
        assert!(close(&v, &dir, 1e-15));
        assert!(fd(&[0.01, 50.0, 3.0], &[0.0, 0.0, 1.0], 1e-3)
            .variance()
            .iter()
            .all(|v| *v > 0.0));
    }

    #[test]
    fn log_density_examples() {
        let u = fd(&[1.0, 1.0], &[0.5, 0.5], 1.0);
        let lp = u.ln_pdf(&SimplexPoint::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(lp.abs() < 1e-14);
        let boundary = SimplexPoint::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(u.ln_pdf(&boundary), Err(Error::Domain(_))));
    }

    #[test]
    fn posterior_examples() {
        let prior = fd(&[1.0, 1.0], &[0.5, 0.5], 1.0);
        let post = prior.posterior(&[3.0, 0.0]).unwrap();
        assert!(close(post.alpha(), &[4.0, 1.0], 0.0));
        assert_eq!(post.tau(), 1.0);
        // Gamma(1)Gamma(5)/(Gamma(2)Gamma(4)) = 4 vs 1 for the untouched class
        assert!(close(post.p(), &[0.8, 0.2], 1e-14));

        let same = prior.posterior(&[0.0, 0.0]).unwrap();
        assert!(close(same.alpha(), prior.alpha(), 0.0));
        assert!(close(same.p(), prior.p(), 1e-15));

        let shifted = prior.with_added_evidence(&[3.0, 0.0]).unwrap();
        assert!(close(shifted.alpha(), &[4.0, 1.0], 0.0));
        assert!(close(shifted.p(), &[0.5, 0.5], 0.0));

        assert!(prior.posterior(&[1.0]).is_err());
        assert!(prior.posterior(&[-1.0, 0.0]).is_err());
    }

    #[test]
    fn posterior_with_zero_allocation_keeps_it_zero() {
        let prior = fd(&[1.5, 2.0, 0.7], &[0.0, 0.4, 0.6], 2.5);
        let post = prior.posterior(&[2.0, 0.5, 1.0]).unwrap();
        assert_eq!(post.p()[0], 0.0);
        assert!((post.p().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_density_examples() {
        let u = fd(&[1.0, 1.0], &[0.5, 0.5], 1.0);
        assert!((u.marginal_pdf(0, 0.5).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(u.marginal_pdf(0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(u.marginal_pdf(0, 1.2), Err(Error::Domain(_))));
        assert!(u.marginal_pdf(2, 0.5).is_err());
    }

    #[test]
    fn marginal_density_integrates_to_one() {
        let d = fd(&[2.0, 0.7, 1.3], &[0.2, 0.5, 0.3], 3.0);
        for k in 0..3 {
            // substitution x = t^4 removes the integrable endpoint singularity
            let n = 200_000;
            let h = 1.0 / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) * h;
                let x = t.powi(4);
                if x <= 0.0 || x >= 1.0 {
                    continue;
                }
                total += d.marginal_pdf(k, x).unwrap() * 4.0 * t.powi(3) * h;
            }
            assert!((total - 1.0).abs() < 1e-6, "k={k} total={total}");
        }
    }

    #[test]
    fn mode_separation_examples() {
        assert!((fd(&[2.0, 2.0], &[0.5, 0.5], 2.0).mode_separation().unwrap() - 0.5).abs() < 1e-15);
        assert!((fd(&[1.0, 1.0], &[0.5, 0.5], 2.0).mode_separation().unwrap() - 1.0).abs() < 1e-15);
        assert!(fd(&[2.0, 3.0], &[0.5, 0.5], 1e-12).mode_separation().unwrap() < 1e-11);
        assert!(matches!(
            fd(&[0.5, 0.5], &[0.5, 0.5], 1.0).mode_separation(),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn decomposition_examples() {
        let d = fd(&[2.0, 2.0], &[0.3, 0.7], 4.0).predictive_decomposition();
        assert!((d.w_edl - 0.5).abs() < 1e-15 && (d.w_sm - 0.5).abs() < 1e-15);
        let params = fd(&[3.0, 1.0], &[0.25, 0.75], 4.0);
        let d = params.predictive_decomposition();
        assert!(close(&d.p_pred, &[0.5, 0.5], 1e-15));
        assert!(close(&d.p_pred, params.mean().as_slice(), 1e-15));
        let d = fd(&[3.0, 1.0], &[0.0, 1.0], 1e-12).predictive_decomposition();
        assert!(close(&d.p_pred, &[0.75, 0.25], 1e-12));
    }

    #[test]
    fn opinion_examples() {
        let m = fd(&[1.0, 1.0], &[0.5, 0.5], 2.0).sl_opinions();
        for op in &m.opinions {
            assert!(close(&op.belief, &[0.25, 0.25], 1e-15));
            assert!((op.uncertainty_mass - 0.5).abs() < 1e-15);
        }
        assert_eq!(m.opinions[1].base_rate, vec![0.0, 1.0]);
        let params = fd(&[0.4, 2.5, 1.1], &[0.1, 0.3, 0.6], 0.8);
        let m = params.sl_opinions();
        let op = &m.opinions[0];
        assert!((op.belief.iter().sum::<f64>() + op.uncertainty_mass - 1.0).abs() < 1e-12);
        assert!(close(&m.projected_probability(), params.mean().as_slice(), 1e-12));
        assert_eq!(m.selection, params.p());
    }

    #[test]
    fn samples_lie_on_simplex_and_are_reproducible() {
        let d = fd(&[0.05, 1.0, 3.0], &[0.2, 0.3, 0.5], 0.5);
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(5), 500);
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(5), 500);
        assert_eq!(a, b);
        for s in &a {
            let sum: f64 = s.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.as_slice().iter().all(|v| *v >= 0.0 && *v < 1.0));
        }
        let one = fd(&[2.0, 1.0], &[0.5, 0.5], 1.0).sample(&mut ChaCha8Rng::seed_from_u64(1), 1);
        assert!(one[0].as_slice().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn simplex_point_validation() {
        assert!(SimplexPoint::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![1.0]).is_err());
        assert!(!SimplexPoint::new(vec![1.0, 0.0]).unwrap().is_interior());
    }
}
