//! Composite estimators combining a probability-sample mean `ȳ1` (variance
//! `v1`) with a nonprobability-sample mean `ȳ2` (variance `v2`) whose bias is
//! `ε`, under independent sampling errors.
//!
//! * `ev`: `((ε² + v2) ȳ1 + v1 ȳ2) / (ε² + v1 + v2)`, biased by
//!   `ε v1 / (ε² + v1 + v2)`.
//! * `comb`: `w ȳ1 + (1 − w)(ȳ2 − ε)` with `w = v2 / (v1 + v2)`, unbiased with
//!   MSE `v1 v2 / (v1 + v2)`, which is strictly below the `ev` MSE whenever
//!   `ε ≠ 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{MeanEstimate, Source};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeInputs {
    pub y1: f64,
    pub y2: f64,
    pub v1: f64,
    pub v2: f64,
    pub eps: f64,
}

impl CompositeInputs {
    pub fn new(y1: f64, y2: f64, v1: f64, v2: f64, eps: f64) -> Result<Self> {
        check_variances(v1, v2)?;
        if ![y1, y2, eps].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite composite input (y1 = {y1}, y2 = {y2}, eps = {eps})"
            )));
        }
        Ok(CompositeInputs {
            y1,
            y2,
            v1,
            v2,
            eps,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeResult {
    pub value: f64,
    /// Weight on `ȳ1`.
    pub weight_w: f64,
    pub theoretical_bias: f64,
    pub theoretical_variance: f64,
    pub theoretical_mse: f64,
}

impl CompositeResult {
    pub fn to_estimate(&self, source: Source) -> MeanEstimate {
        MeanEstimate::new(self.value, self.theoretical_mse, source)
    }
}

fn check_variances(v1: f64, v2: f64) -> Result<()> {
    if !(v1 > 0.0 && v2 > 0.0 && v1.is_finite() && v2.is_finite()) {
        return Err(Error::NonpositiveVariance { v1, v2 });
    }
    Ok(())
}

pub fn mse_comb(v1: f64, v2: f64) -> Result<f64> {
    check_variances(v1, v2)?;
    Ok(v1 * v2 / (v1 + v2))
}

pub fn mse_ev(v1: f64, v2: f64, eps: f64) -> Result<f64> {
    check_variances(v1, v2)?;
    let e2 = eps * eps;
    Ok(v1 * (e2 + v2) / (e2 + v1 + v2))
}

/// Biased composite with precision-and-bias weights.
pub fn ev_composite(input: &CompositeInputs) -> Result<CompositeResult> {
    let CompositeInputs {
        y1,
        y2,
        v1,
        v2,
        eps,
    } = *input;
    check_variances(v1, v2)?;
    let e2 = eps * eps;
    let denom = e2 + v1 + v2;
    let weight_w = (e2 + v2) / denom;
    let value = ((e2 + v2) * y1 + v1 * y2) / denom;
    let theoretical_bias = eps * v1 / denom;
    let theoretical_variance = v1 * ((e2 + v2).powi(2) + v1 * v2) / (denom * denom);
    Ok(CompositeResult {
        value,
        weight_w,
        theoretical_bias,
        theoretical_variance,
        theoretical_mse: mse_ev(v1, v2, eps)?,
    })
}

/// Unbiased composite of `ȳ1` and the bias-corrected `ȳ2 − ε`.
pub fn comb_composite(input: &CompositeInputs) -> Result<CompositeResult> {
    let CompositeInputs {
        y1,
        y2,
        v1,
        v2,
        eps,
    } = *input;
    check_variances(v1, v2)?;
    let diff = y2 - y1;
    if eps != 0.0 && (eps - diff).abs() <= 1e-12 * diff.abs().max(1.0) {
        log::warn!(
            "bias set to ȳ2 − ȳ1: the unbiased composite collapses to the probability-sample estimate"
        );
    }
    let weight_w = v2 / (v1 + v2);
    let value = weight_w * y1 + (v1 / (v1 + v2)) * (y2 - eps);
    let mse = mse_comb(v1, v2)?;
    Ok(CompositeResult {
        value,
        weight_w,
        theoretical_bias: 0.0,
        theoretical_variance: mse,
        theoretical_mse: mse,
    })
}

fn expect_source(est: &MeanEstimate, allowed: &[Source], expected: &'static str) -> Result<()> {
    if !allowed.contains(&est.source) {
        return Err(Error::SourceMismatch {
            expected,
            found: est.source.tag().into(),
        });
    }
    Ok(())
}

/// Model-based composite: [`comb_composite`] with `ε = 0` over the
/// probability-sample mean and the model-assisted IPW mean.
pub fn m_comb_composite(ps_est: &MeanEstimate, mclw_est: &MeanEstimate) -> Result<CompositeResult> {
    expect_source(ps_est, &[Source::Ps, Source::Cal], "ps")?;
    expect_source(mclw_est, &[Source::MClw], "m_clw")?;
    comb_composite(&CompositeInputs::new(
        ps_est.value,
        mclw_est.value,
        ps_est.variance,
        mclw_est.variance,
        0.0,
    )?)
}

/// [`ev_composite`] with the bias estimated as `ȳ1 − ȳ2`.
pub fn m_ev_composite(y1: f64, y2: f64, v1: f64, v2: f64) -> Result<CompositeResult> {
    ev_composite(&CompositeInputs::new(y1, y2, v1, v2, y1 - y2)?)
}
