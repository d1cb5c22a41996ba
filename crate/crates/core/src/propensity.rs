//! Participation propensities for the nonprobability sample.
//!
//! The logistic model `π(x, θ) = exp(x'θ) / (1 + exp(x'θ))` is fit by
//! maximizing the pseudo-log-likelihood
//!
//! ```text
//! l*(θ) = Σ_{S_A} x_i'θ − Σ_{S_B} d_i log(1 + exp(x_i'θ))
//! ```
//!
//! whose score is `U(θ) = Σ_{S_A} x_i − Σ_{S_B} d_i π_i x_i` and Hessian
//! `H(θ) = −Σ_{S_B} d_i π_i (1 − π_i) x_i x_i'`. The Hessian is negative
//! definite whenever the weighted reference design has full rank, so Newton
//! steps are ascent directions; a step-halving line search guards against
//! overshooting on flat stretches.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CovariateVector, NonprobabilitySample, ProbabilitySample, SurveySample};

/// Coefficients of the participation model, intercept first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn zeros(dim: usize) -> Self {
        Theta(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityOptions {
    /// Convergence threshold on the ∞-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    /// Fitted propensities are clamped to `[pi_clip, 1 − pi_clip]`.
    pub pi_clip: f64,
    pub max_halvings: usize,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        PropensityOptions {
            tol: 1e-8,
            max_iter: 50,
            pi_clip: 1e-6,
            max_halvings: 20,
        }
    }
}

/// Fitted participation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub theta: Theta,
    /// `π̂_i^A` for every nonprobability unit, in sample order.
    pub pi_hat: Vec<f64>,
    /// `N̂^A = Σ 1 / π̂_i^A`.
    pub n_hat_a: f64,
    pub iterations: usize,
    pub score_norm: f64,
}

impl PropensityFit {
    /// Builds a fit directly from known propensities (oracle runs, or
    /// propensities read back from disk).
    pub fn from_propensities(theta: Theta, pi_hat: Vec<f64>) -> Self {
        let n_hat_a = pi_hat.iter().map(|p| 1.0 / p).sum();
        PropensityFit {
            theta,
            pi_hat,
            n_hat_a,
            iterations: 0,
            score_norm: 0.0,
        }
    }
}

/// Coefficient magnitude beyond which a diverging fit is reported as
/// separation rather than slow convergence.
const SEPARATION_BOUND: f64 = 40.0;

/// Logistic function evaluated without overflow on either tail.
pub fn logistic(eta: f64) -> f64 {
    if eta > 35.0 {
        1.0 - (-eta).exp()
    } else if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn check_dim(x: &CovariateVector, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    Ok(())
}

pub fn logistic_propensity(x: &CovariateVector, theta: &Theta) -> Result<f64> {
    check_dim(x, theta.len())?;
    Ok(logistic(x.dot(theta.as_slice())))
}

fn check_inputs(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> Result<()> {
    if ps_x.len() != ps_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: ps_x.len(),
            found: ps_weights.len(),
        });
    }
    for (row, &d) in ps_weights.iter().enumerate() {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonpositiveWeight { weight: d, row });
        }
    }
    for x in nps_x.iter().chain(ps_x) {
        check_dim(x, theta.len())?;
    }
    Ok(())
}

fn pll_unchecked(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> f64 {
    let t = theta.as_slice();
    let first: f64 = nps_x.iter().map(|x| x.dot(t)).sum();
    let second: f64 = ps_x
        .iter()
        .zip(ps_weights)
        .map(|(x, d)| d * log1p_exp(x.dot(t)))
        .sum();
    first - second
}

/// Evaluates `l*(θ)`.
pub fn pseudo_log_likelihood(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> Result<f64> {
    check_inputs(theta, nps_x, ps_x, ps_weights)?;
    Ok(pll_unchecked(theta, nps_x, ps_x, ps_weights))
}

/// Analytic score `U(θ)`.
pub fn score(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(theta, nps_x, ps_x, ps_weights)?;
    Ok(score_unchecked(theta, nps_x, ps_x, ps_weights))
}

fn score_unchecked(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> Vec<f64> {
    let p = theta.len();
    let mut u = vec![0.0; p];
    for x in nps_x {
        for (u, v) in u.iter_mut().zip(x.as_slice()) {
            *u += v;
        }
    }
    for (x, d) in ps_x.iter().zip(ps_weights) {
        let pi = logistic(x.dot(theta.as_slice()));
        for (u, v) in u.iter_mut().zip(x.as_slice()) {
            *u -= d * pi * v;
        }
    }
    u
}

/// Information matrix `−H(θ) = Σ_{S_B} d_i π_i (1 − π_i) x_i x_i'`.
fn information(theta: &Theta, ps_x: &[&CovariateVector], ps_weights: &[f64]) -> DMatrix<f64> {
    let p = theta.len();
    let mut info = DMatrix::zeros(p, p);
    for (x, d) in ps_x.iter().zip(ps_weights) {
        let pi = logistic(x.dot(theta.as_slice()));
        let w = d * pi * (1.0 - pi);
        let xs = x.as_slice();
        for a in 0..p {
            if xs[a] == 0.0 {
                continue;
            }
            for b in a..p {
                info[(a, b)] += w * xs[a] * xs[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    info
}

/// Analytic Hessian `H(θ)`.
pub fn hessian(
    theta: &Theta,
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(theta, nps_x, ps_x, ps_weights)?;
    let info = information(theta, ps_x, ps_weights);
    Ok((0..theta.len())
        .map(|a| (0..theta.len()).map(|b| -info[(a, b)]).collect())
        .collect())
}

fn gram(rows: &[&CovariateVector], p: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p, p);
    for x in rows {
        let xs = DVector::from_column_slice(x.as_slice());
        g += &xs * xs.transpose();
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton-Raphson maximization of `l*(θ)` from `θ = 0`.
pub fn fit_propensity(
    nps_x: &[&CovariateVector],
    ps_x: &[&CovariateVector],
    ps_weights: &[f64],
    options: &PropensityOptions,
) -> Result<PropensityFit> {
    if nps_x.is_empty() {
        return Err(Error::EmptySample("nonprobability sample"));
    }
    if ps_x.is_empty() {
        return Err(Error::EmptySample("probability sample"));
    }
    let p = nps_x[0].len();
    let mut theta = Theta::zeros(p);
    check_inputs(&theta, nps_x, ps_x, ps_weights)?;

    // A dummy column with ps mass but no nps mass sends its coefficient to −∞.
    for j in 1..p {
        let in_nps = nps_x.iter().any(|x| x.as_slice()[j] != 0.0);
        let in_ps = ps_x.iter().any(|x| x.as_slice()[j] != 0.0);
        if in_ps && !in_nps && nps_x.iter().chain(ps_x).all(|x| matches!(x.as_slice()[j], 0.0 | 1.0)) {
            return Err(Error::Separation(format!(
                "covariate column {j} has no mass in the nonprobability sample"
            )));
        }
    }

    // Rank checks: a rank-deficient reference design with a full-rank pooled
    // design means some nps covariate direction has no ps mass to match.
    if information(&theta, ps_x, ps_weights).cholesky().is_none() {
        let mut pooled = gram(nps_x, p);
        pooled += gram(ps_x, p);
        return Err(if pooled.cholesky().is_none() {
            Error::SingularHessian
        } else {
            Error::Separation(
                "the probability sample has no mass in a covariate direction present in the nonprobability sample".into(),
            )
        });
    }

    let mut objective = pll_unchecked(&theta, nps_x, ps_x, ps_weights);
    let mut iterations = 0;
    loop {
        let u = score_unchecked(&theta, nps_x, ps_x, ps_weights);
        let score_norm = inf_norm(&u);
        if score_norm <= options.tol {
            return Ok(finish(theta, nps_x, iterations, score_norm, options.pi_clip));
        }
        if iterations >= options.max_iter {
            return Err(divergence_error(&theta, iterations, score_norm));
        }
        iterations += 1;

        let chol = information(&theta, ps_x, ps_weights)
            .cholesky()
            .ok_or_else(|| {
                if inf_norm(&theta.0) > SEPARATION_BOUND / 2.0 {
                    Error::Separation("fitted propensities saturated".into())
                } else {
                    Error::SingularHessian
                }
            })?;
        let step = chol.solve(&DVector::from_vec(u));

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = Theta(
                theta
                    .0
                    .iter()
                    .zip(step.iter())
                    .map(|(t, s)| t + scale * s)
                    .collect(),
            );
            let value = pll_unchecked(&candidate, nps_x, ps_x, ps_weights);
            if value.is_finite() && value >= objective - 1e-12 * objective.abs().max(1.0) {
                accepted = Some((candidate, value));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                theta = candidate;
                objective = value;
            }
            // No ascent left along the Newton direction: numerically at the
            // optimum, or stuck.
            None => return Err(divergence_error(&theta, iterations, score_norm)),
        }
        if inf_norm(&theta.0) > SEPARATION_BOUND {
            return Err(Error::Separation(format!(
                "coefficients diverged beyond {SEPARATION_BOUND}"
            )));
        }
    }
}

fn divergence_error(theta: &Theta, iterations: usize, score_norm: f64) -> Error {
    if inf_norm(&theta.0) > SEPARATION_BOUND / 2.0 {
        Error::Separation(format!("score norm {score_norm:e} with diverging coefficients"))
    } else {
        Error::NonConvergence {
            iterations,
            score_norm,
        }
    }
}

fn finish(
    theta: Theta,
    nps_x: &[&CovariateVector],
    iterations: usize,
    score_norm: f64,
    clip: f64,
) -> PropensityFit {
    let pi_hat: Vec<f64> = nps_x
        .iter()
        .map(|x| logistic(x.dot(theta.as_slice())).clamp(clip, 1.0 - clip))
        .collect();
    let n_hat_a = pi_hat.iter().map(|p| 1.0 / p).sum();
    PropensityFit {
        theta,
        pi_hat,
        n_hat_a,
        iterations,
        score_norm,
    }
}

/// Fits the participation model of `nps` against the reference `ps`.
pub fn fit_samples(
    nps: &NonprobabilitySample,
    ps: &ProbabilitySample,
    options: &PropensityOptions,
) -> Result<PropensityFit> {
    let nps_x: Vec<&CovariateVector> = nps.units().iter().map(|u| &u.x).collect();
    let ps_x = ps.design_matrix();
    fit_propensity(&nps_x, &ps_x, &ps.weights, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cv(v: &[f64]) -> CovariateVector {
        CovariateVector::from_raw(v.to_vec())
    }

    #[test]
    fn logistic_at_zero_is_half() {
        let x = cv(&[1.0, 1.0, 0.0]);
        assert_eq!(logistic_propensity(&x, &Theta::zeros(3)).unwrap(), 0.5);
    }

    #[test]
    fn logistic_of_log_three_is_three_quarters() {
        let p = logistic_propensity(&cv(&[1.0, 1.0]), &Theta(vec![0.0, 3f64.ln()])).unwrap();
        assert_abs_diff_eq!(p, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn logistic_saturates_without_reaching_zero() {
        let p = logistic_propensity(&cv(&[1.0, 0.0]), &Theta(vec![-40.0, 5.0])).unwrap();
        assert!(p > 0.0 && p <= 1e-15, "{p}");
        let q = logistic(800.0);
        assert!(q <= 1.0 && q.is_finite());
    }

    #[test]
    fn logistic_dimension_mismatch() {
        assert!(matches!(
            logistic_propensity(&cv(&[1.0]), &Theta::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pll_at_zero() {
        let a = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0])];
        let b = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0]), cv(&[1.0, 1.0])];
        let w = [2.0, 3.0, 5.0];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let l = pseudo_log_likelihood(&Theta::zeros(2), &ar, &br, &w).unwrap();
        assert_abs_diff_eq!(l, -10.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pll_single_rows() {
        let a = cv(&[1.0]);
        let l = pseudo_log_likelihood(&Theta(vec![1.0]), &[&a], &[&a], &[2.0]).unwrap();
        // 1 − 2·log(1 + e) = −1.6265233750364456
        assert_abs_diff_eq!(l, -1.626_523_375_036_445_6, epsilon = 1e-14);
    }

    #[test]
    fn pll_second_term_is_linear_in_weights() {
        let a = [cv(&[1.0, 1.0])];
        let b = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0])];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let t = Theta(vec![0.3, -0.7]);
        let first = a[0].dot(&t.0);
        let l1 = pseudo_log_likelihood(&t, &ar, &br, &[1.0, 2.0]).unwrap();
        let l3 = pseudo_log_likelihood(&t, &ar, &br, &[3.0, 6.0]).unwrap();
        assert_abs_diff_eq!(l3 - first, 3.0 * (l1 - first), epsilon = 1e-12);
    }

    #[test]
    fn pll_rejects_nonpositive_weight() {
        let a = cv(&[1.0]);
        assert!(matches!(
            pseudo_log_likelihood(&Theta(vec![0.0]), &[&a], &[&a], &[0.0]),
            Err(Error::NonpositiveWeight { row: 0, .. })
        ));
    }

    #[test]
    fn intercept_only_closed_form() {
        let a: Vec<_> = (0..7).map(|_| cv(&[1.0])).collect();
        let b: Vec<_> = (0..5).map(|_| cv(&[1.0])).collect();
        let w = [10.0, 4.0, 6.0, 8.0, 12.0];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let fit = fit_propensity(&ar, &br, &w, &PropensityOptions::default()).unwrap();
        let r: f64 = 7.0 / 40.0;
        assert_abs_diff_eq!(fit.theta.0[0], (r / (1.0 - r)).ln(), epsilon = 1e-8);
        assert!(fit.n_hat_a >= 7.0);
    }

    #[test]
    fn ps_without_mass_is_separation() {
        let a = [cv(&[1.0, 1.0]), cv(&[1.0, 1.0])];
        let b = [cv(&[1.0, 0.0]), cv(&[1.0, 0.0]), cv(&[1.0, 0.0])];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let err = fit_propensity(&ar, &br, &[1.0, 2.0, 3.0], &PropensityOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Separation(_)), "{err}");
    }

    #[test]
    fn nps_without_mass_in_a_level_is_separation() {
        // Every nps unit has the dummy at 0 while the ps has mass at 1, so the
        // score's dummy component stays negative for every finite θ.
        let a = [cv(&[1.0, 0.0]), cv(&[1.0, 0.0])];
        let b = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0]), cv(&[1.0, 1.0])];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let err = fit_propensity(&ar, &br, &[3.0, 3.0, 3.0], &PropensityOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Separation(_)), "{err}");
    }

    #[test]
    fn collinear_design_is_singular() {
        let a = [cv(&[1.0, 1.0])];
        let b = [cv(&[1.0, 1.0]), cv(&[1.0, 1.0])];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        assert!(matches!(
            fit_propensity(&ar, &br, &[2.0, 2.0], &PropensityOptions::default()),
            Err(Error::SingularHessian)
        ));
    }

    #[test]
    fn empty_nps_is_rejected() {
        let b = cv(&[1.0]);
        assert!(matches!(
            fit_propensity(&[], &[&b], &[1.0], &PropensityOptions::default()),
            Err(Error::EmptySample(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let a = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0])];
        let b = [cv(&[1.0, 0.0]), cv(&[1.0, 1.0]), cv(&[1.0, 1.0])];
        let ar: Vec<_> = a.iter().collect();
        let br: Vec<_> = b.iter().collect();
        let opts = PropensityOptions {
            max_iter: 1,
            tol: 1e-300,
            ..Default::default()
        };
        assert!(matches!(
            fit_propensity(&ar, &br, &[5.0, 5.0, 5.0], &opts),
            Err(Error::NonConvergence { iterations: 1, .. })
        ));
    }
}
