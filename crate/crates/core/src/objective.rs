//! Closed-form training objective: expected squared error under the FD
//! distribution plus a Brier term on the allocation probabilities.
//!
//! `L = sum_k (y_k - E[pi_k])^2 + sum_k Var(pi_k) + sum_k (y_k - p_k)^2`

use crate::error::{Error, Result};
use crate::fd::FdParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

/// Partial derivatives of the total loss with respect to `(alpha, p, tau)`.
/// Only the component of `p` tangent to the simplex is meaningful; anything
/// along the all-ones direction is annihilated by softmax or by `alpha / alpha_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub alpha: Vec<f64>,
    pub p: Vec<f64>,
    pub tau: f64,
}

impl FdGradient {
    pub fn zeros(k: usize) -> Self {
        Self {
            alpha: vec![0.0; k],
            p: vec![0.0; k],
            tau: 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.alpha.iter_mut().for_each(|g| *g *= c);
        self.p.iter_mut().for_each(|g| *g *= c);
        self.tau *= c;
    }
}

/// Builds a one-hot vector, failing on an out-of-range label.
pub fn one_hot(label: usize, k: usize) -> Result<Vec<f64>> {
    if label >= k {
        return Err(Error::Contract(format!("label {label} out of range for K={k}")));
    }
    let mut y = vec![0.0; k];
    y[label] = 1.0;
    Ok(y)
}

fn label_of(onehot: &[f64], k: usize) -> Result<usize> {
    if onehot.len() != k {
        return Err(Error::Contract(format!(
            "one-hot vector has length {}, expected {k}",
            onehot.len()
        )));
    }
    let ones: Vec<usize> = onehot
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = onehot.iter().filter(|v| **v == 0.0).count();
    match ones.as_slice() {
        [i] if zeros == k - 1 => Ok(*i),
        _ => Err(Error::Contract("label vector is not one-hot".into())),
    }
}

pub fn loss(params: &FdParams, onehot: &[f64]) -> Result<LossBreakdown> {
    let label = label_of(onehot, params.num_classes())?;
    Ok(loss_for_label(params, label))
}

pub fn loss_gradient(params: &FdParams, onehot: &[f64]) -> Result<FdGradient> {
    let label = label_of(onehot, params.num_classes())?;
    Ok(loss_and_gradient(params, label).1)
}

/// Loss for an integer label. Panics if the label is out of range.
pub fn loss_for_label(params: &FdParams, label: usize) -> LossBreakdown {
    let k = params.num_classes();
    assert!(label < k, "label out of range");
    let (alpha, p, tau) = (params.alpha(), params.p(), params.tau());
    let s = params.alpha0() + tau;
    let mut sq_err = 0.0;
    let mut sum_m2 = 0.0;
    let mut sum_p2 = 0.0;
    let mut reg = 0.0;
    for j in 0..k {
        let y = if j == label { 1.0 } else { 0.0 };
        let m = (alpha[j] + tau * p[j]) / s;
        sq_err += (y - m) * (y - m);
        sum_m2 += m * m;
        sum_p2 += p[j] * p[j];
        reg += (y - p[j]) * (y - p[j]);
    }
    // sum_k Var(pi_k) = (1 - sum m^2) / (S + 1) + tau^2 (1 - sum p^2) / (S (S + 1))
    let var_sum = (1.0 - sum_m2) / (s + 1.0) + tau * tau * (1.0 - sum_p2) / (s * (s + 1.0));
    let mse_term = sq_err + var_sum;
    LossBreakdown {
        mse_term,
        reg_term: reg,
        total: mse_term + reg,
    }
}

/// Loss and its exact gradient for an integer label.
pub fn loss_and_gradient(params: &FdParams, label: usize) -> (LossBreakdown, FdGradient) {
    let k = params.num_classes();
    let breakdown = loss_for_label(params, label);
    let (alpha, p, tau) = (params.alpha(), params.p(), params.tau());
    let s = params.alpha0() + tau;
    let s1 = s + 1.0;

    let m: Vec<f64> = (0..k).map(|j| (alpha[j] + tau * p[j]) / s).collect();
    let spread_m = 1.0 - m.iter().map(|v| v * v).sum::<f64>();
    let spread_p = 1.0 - p.iter().map(|v| v * v).sum::<f64>();

    // dL/dm_j with S held fixed
    let g_m: Vec<f64> = (0..k)
        .map(|j| {
            let y = if j == label { 1.0 } else { 0.0 };
            -2.0 * (y - m[j]) - 2.0 * m[j] / s1
        })
        .collect();
    let g_m_dot_m: f64 = g_m.iter().zip(&m).map(|(g, v)| g * v).sum();

    // explicit dependence on S = alpha_0 + tau
    let d_s = -spread_m / (s1 * s1) - tau * tau * spread_p * (2.0 * s + 1.0) / (s * s * s1 * s1);

    let mut grad = FdGradient::zeros(k);
    for j in 0..k {
        let y = if j == label { 1.0 } else { 0.0 };
        grad.alpha[j] = (g_m[j] - g_m_dot_m) / s + d_s;
        grad.p[j] = g_m[j] * tau / s - 2.0 * tau * tau * p[j] / (s * s1) - 2.0 * (y - p[j]);
    }
    let g_m_dot_p: f64 = g_m.iter().zip(p).map(|(g, v)| g * v).sum();
    grad.tau = (g_m_dot_p - g_m_dot_m) / s + d_s + 2.0 * tau * spread_p / (s * s1);
    (breakdown, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd(alpha: &[f64], p: &[f64], tau: f64) -> FdParams {
        FdParams::new(alpha.to_vec(), p.to_vec(), tau).unwrap()
    }

    #[test]
    fn hand_evaluated_losses() {
        let l = loss(&fd(&[1.0, 1.0], &[1.0, 0.0], 1.0), &[1.0, 0.0]).unwrap();
        assert!((l.mse_term - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(l.reg_term, 0.0);
        assert!((l.total - 1.0 / 3.0).abs() < 1e-15);

        let l = loss(&fd(&[1.0, 1.0], &[0.5, 0.5], 1.0), &[1.0, 0.0]).unwrap();
        assert!((l.mse_term - 2.0 / 3.0).abs() < 1e-15);
        assert!((l.reg_term - 0.5).abs() < 1e-15);
        assert!((l.total - 7.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn reg_term_zero_only_at_onehot_allocation() {
        let l = loss(&fd(&[2.0, 1.0, 1.0], &[0.0, 1.0, 0.0], 0.5), &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l.reg_term, 0.0);
        let l = loss(&fd(&[2.0, 1.0, 1.0], &[0.0, 0.999, 0.001], 0.5), &[0.0, 1.0, 0.0]).unwrap();
        assert!(l.reg_term > 0.0);
    }

    #[test]
    fn variance_sum_matches_per_class_variances() {
        let params = fd(&[0.7, 3.2, 1.5], &[0.2, 0.3, 0.5], 2.4);
        let l = loss(&params, &[0.0, 0.0, 1.0]).unwrap();
        let mean = params.mean();
        let sq: f64 = mean
            .as_slice()
            .iter()
            .zip([0.0, 0.0, 1.0])
            .map(|(m, y)| (y - m) * (y - m))
            .sum();
        let var: f64 = params.variance().iter().sum();
        assert!((l.mse_term - (sq + var)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_label_vectors() {
        let params = fd(&[1.0, 1.0], &[0.5, 0.5], 1.0);
        assert!(loss(&params, &[1.0, 1.0]).is_err());
        assert!(loss(&params, &[0.5, 0.5]).is_err());
        assert!(loss(&params, &[1.0]).is_err());
        assert!(one_hot(2, 2).is_err());
    }

    #[test]
    fn gradient_sign_at_symmetric_point() {
        let g = loss_gradient(&fd(&[1.0, 1.0], &[0.5, 0.5], 1.0), &[1.0, 0.0]).unwrap();
        assert!(g.p[0] < 0.0);
    }

    // fourth-order central stencil
    fn stencil(h: f64, f: impl Fn(f64) -> f64) -> f64 {
        (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
    }

    fn central_difference(params: &FdParams, label: usize, h: f64) -> FdGradient {
        let k = params.num_classes();
        let eval = |a: &[f64], p: &[f64], t: f64| {
            // p is perturbed off the simplex on purpose: the closed form is a
            // polynomial in the free coordinates of p.
            // per-class variance formula, independent of the collapsed form
            let s: f64 = a.iter().sum::<f64>() + t;
            let mut total = 0.0;
            for j in 0..k {
                let y = if j == label { 1.0 } else { 0.0 };
                let ak = a[j] + t * p[j];
                let m = ak / s;
                total += (y - m) * (y - m) + (y - p[j]) * (y - p[j]);
                total += ak * (s - ak) / (s * s * (s + 1.0))
                    + t * t * p[j] * (1.0 - p[j]) / (s * (s + 1.0));
            }
            total
        };
        let (a, p, t) = (params.alpha().to_vec(), params.p().to_vec(), params.tau());
        let mut g = FdGradient::zeros(k);
        for j in 0..k {
            g.alpha[j] = stencil(h, |d| {
                let mut x = a.clone();
                x[j] += d;
                eval(&x, &p, t)
            });
            g.p[j] = stencil(h, |d| {
                let mut x = p.clone();
                x[j] += d;
                eval(&a, &x, t)
            });
        }
        g.tau = stencil(h, |d| eval(&a, &p, t + d));
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = rng.random_range(2..6);
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..20.0)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let tau = rng.random_range(0.05..10.0);
            let label = rng.random_range(0..k);
            let params = FdParams::new(alpha, p, tau).unwrap();
            let (_, g) = loss_and_gradient(&params, label);
            let fdg = central_difference(&params, label, 1e-3);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            let tangent = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| x - mean).collect::<Vec<_>>()
            };
            let (gp, fp) = (tangent(&g.p), tangent(&fdg.p));
            for j in 0..k {
                assert!(rel(g.alpha[j], fdg.alpha[j]) < 1e-6, "alpha {j}: {} {}", g.alpha[j], fdg.alpha[j]);
                assert!(rel(gp[j], fp[j]) < 1e-6, "p {j}: {} {}", gp[j], fp[j]);
            }
            assert!(rel(g.tau, fdg.tau) < 1e-6, "tau: {} {}", g.tau, fdg.tau);
        }
    }

    #[test]
    fn regularizer_gradient_only_touches_p() {
        // alpha and tau gradients of the total equal those of the MSE part alone
        let params = fd(&[1.3, 0.4, 2.0], &[0.2, 0.5, 0.3], 1.7);
        let (_, g) = loss_and_gradient(&params, 1);
        let mse_only = |a: &[f64], t: f64| {
            let q = FdParams::new(a.to_vec(), params.p().to_vec(), t).unwrap();
            loss_for_label(&q, 1).mse_term
        };
        let h = 1e-6;
        let mut a_up = params.alpha().to_vec();
        a_up[0] += h;
        let mut a_dn = params.alpha().to_vec();
        a_dn[0] -= h;
        let d_a0 = (mse_only(&a_up, 1.7) - mse_only(&a_dn, 1.7)) / (2.0 * h);
        let d_tau = (mse_only(params.alpha(), 1.7 + h) - mse_only(params.alpha(), 1.7 - h)) / (2.0 * h);
        assert!((g.alpha[0] - d_a0).abs() < 1e-8);
        assert!((g.tau - d_tau).abs() < 1e-8);
    }

    #[test]
    fn permutation_invariance() {
        let params = fd(&[0.5, 2.0, 4.0], &[0.6, 0.1, 0.3], 1.2);
        let perm = [2usize, 0, 1];
        let permuted = fd(
            &perm.map(|i| params.alpha()[i]),
            &perm.map(|i| params.p()[i]),
            1.2,
        );
        // label 0 in the original sits at position 1 after permutation
        let a = loss_for_label(&params, 0);
        let b = loss_for_label(&permuted, 1);
        assert!((a.total - b.total).abs() < 1e-14);
    }

    #[test]
    fn mse_term_agrees_with_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..10 {
            let k = rng.random_range(2..5);
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..8.0)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let params = FdParams::new(alpha, p, rng.random_range(0.1..5.0)).unwrap();
            let label = rng.random_range(0..k);
            let y = one_hot(label, k).unwrap();
            let (mc, se) = crate::oracles::mc_expected_squared_error(&params, &y, &mut rng, 1_000_000);
            let exact = loss_for_label(&params, label).mse_term;
            assert!((mc - exact).abs() < 3.0 * se, "mc {mc} exact {exact} se {se}");
        }
    }

    #[test]
    fn epistemic_form_equals_variance_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.random_range(2..8);
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..50.0)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let tau = rng.random_range(0.01..30.0);
            let params = FdParams::new(alpha, p.clone(), tau).unwrap();
            let s = params.alpha0() + tau;
            let form: f64 = params
                .mean()
                .as_slice()
                .iter()
                .zip(&p)
                .map(|(e, pk)| e * (1.0 - e) / (s + 1.0) + tau * tau * pk * (1.0 - pk) / (s * (s + 1.0)))
                .sum();
            let direct: f64 = params.variance().iter().sum();
            assert!((form - direct).abs() <= 1e-12 * direct);
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_invariant_under_class_permutation(
            alpha in proptest::collection::vec(0.05f64..40.0, 4),
            raw_p in proptest::collection::vec(0.01f64..1.0, 4),
            tau in 0.01f64..20.0,
            label in 0usize..4,
            shift in 1usize..4,
        ) {
            let sum: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / sum).collect();
            let params = FdParams::new(alpha.clone(), p.clone(), tau).unwrap();
            // rotate classes by `shift`
            let rot = |v: &[f64]| (0..4).map(|i| v[(i + shift) % 4]).collect::<Vec<_>>();
            let rotated = FdParams::new(rot(&alpha), rot(&p), tau).unwrap();
            let new_label = (label + 4 - shift) % 4;
            let a = loss_for_label(&params, label).total;
            let b = loss_for_label(&rotated, new_label).total;
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
