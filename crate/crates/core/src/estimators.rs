//! Finite-population mean estimators for each source: design-weighted means
//! from the probability sample, inverse-propensity-weighted (Hájek) means from
//! the nonprobability sample, their bias-corrected and model-assisted
//! variants, and a replicate bootstrap for variances.

use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, replicate_rng, CompensatedSum, Execution};
use crate::propensity::PropensityFit;
use crate::types::{MeanEstimate, ProbabilitySample, Source, SubgroupKey, SurveySample};

/// Answers to one question over the units of a sample (`None` = missing).
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseColumn {
    pub question: usize,
    pub values: Vec<Option<bool>>,
}

impl ResponseColumn {
    pub fn from_sample<S: SurveySample>(sample: &S, question: usize) -> Self {
        ResponseColumn {
            question,
            values: sample
                .units()
                .iter()
                .map(|u| u.responses.get(question).copied().flatten())
                .collect(),
        }
    }

    /// Same column with every unit outside `group` marked missing; estimates
    /// on the result are domain estimates for the subgroup.
    pub fn restricted_to<S: SurveySample>(&self, sample: &S, group: SubgroupKey) -> Self {
        ResponseColumn {
            question: self.question,
            values: self
                .values
                .iter()
                .zip(sample.units())
                .map(|(v, u)| if u.groups.contains(group) { *v } else { None })
                .collect(),
        }
    }

    pub fn observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Model-predicted `P(y = 1)` for each nonprobability unit.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedProbabilities {
    pub question: usize,
    pub values: Vec<f64>,
}

impl PredictedProbabilities {
    pub fn new(question: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidProbability(*v));
        }
        Ok(PredictedProbabilities { question, values })
    }

    /// Keeps only units inside `group`; the rest are reported as `None`.
    pub fn restricted_to<S: SurveySample>(&self, sample: &S, group: SubgroupKey) -> Vec<Option<f64>> {
        self.values
            .iter()
            .zip(sample.units())
            .map(|(v, u)| u.groups.contains(group).then_some(*v))
            .collect()
    }
}

/// Weighted ratio mean `Σ w y / Σ w` with the with-replacement linearization
/// variance `Σ w² (y − μ)² / (Σ w)² · n / (n − 1)`.
fn weighted_ratio(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Option<(f64, f64)> {
    let (mut sw, mut swy, mut n) = (0.0, 0.0, 0usize);
    for (w, y) in pairs.clone() {
        sw += w;
        swy += w * y;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let mean = swy / sw;
    let variance = if n < 2 {
        0.0
    } else {
        let ss: f64 = pairs.map(|(w, y)| (w * (y - mean)).powi(2)).sum();
        ss / (sw * sw) * n as f64 / (n - 1) as f64
    };
    Some((mean, variance))
}

fn as_f64(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

/// `μ̂_ps = Σ d_i y_i / Σ d_i` over non-missing units. Tagged `source` so the
/// same routine serves design weights (`ps`) and calibrated weights (`cal`).
pub fn design_weighted_mean_tagged(
    y: &ResponseColumn,
    sample: &ProbabilitySample,
    source: Source,
) -> Result<MeanEstimate> {
    if y.values.len() != sample.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: sample.weights.len(),
            found: y.values.len(),
        });
    }
    for (row, &d) in sample.weights.iter().enumerate() {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonpositiveWeight { weight: d, row });
        }
    }
    let pairs = y
        .values
        .iter()
        .zip(&sample.weights)
        .filter_map(|(v, &d)| v.map(|v| (d, as_f64(v))));
    let (value, variance) =
        weighted_ratio(pairs).ok_or(Error::AllMissing { question: y.question })?;
    Ok(MeanEstimate::new(value, variance, source))
}

pub fn design_weighted_mean(y: &ResponseColumn, sample: &ProbabilitySample) -> Result<MeanEstimate> {
    design_weighted_mean_tagged(y, sample, Source::Ps)
}

fn ipw_values(
    values: impl Iterator<Item = Option<f64>> + Clone,
    fit: &PropensityFit,
    expected_len: usize,
    question: usize,
    source: Source,
) -> Result<MeanEstimate> {
    if expected_len != fit.pi_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.pi_hat.len(),
            found: expected_len,
        });
    }
    // N̂^A is recomputed over the non-missing units only.
    let pairs = values
        .zip(&fit.pi_hat)
        .filter_map(|(v, &p)| v.map(|v| (1.0 / p, v)));
    let (value, variance) = weighted_ratio(pairs).ok_or(Error::AllMissing { question })?;
    Ok(MeanEstimate::new(value, variance, source))
}

/// `μ̂_CLW = (N̂^A)^{-1} Σ y_i / π̂_i^A`. The variance treats `1/π̂` as fixed
/// weights; use [`bootstrap_variance`] to account for propensity estimation.
pub fn ipw_mean(y: &ResponseColumn, fit: &PropensityFit) -> Result<MeanEstimate> {
    ipw_values(
        y.values.iter().map(|v| v.map(as_f64)),
        fit,
        y.values.len(),
        y.question,
        Source::Clw,
    )
}

/// `μ̂_bc;CLW = μ̂_CLW − ε`; the variance is carried over unchanged and
/// out-of-range values are flagged, not clipped.
pub fn bias_corrected_ipw(clw: &MeanEstimate, eps: f64) -> MeanEstimate {
    MeanEstimate::new(clw.value - eps, clw.variance, Source::BcClw)
}

/// `μ̂_m;CLW = (N̂^A)^{-1} Σ p̂_i / π̂_i^A`.
pub fn model_assisted_ipw(p: &PredictedProbabilities, fit: &PropensityFit) -> Result<MeanEstimate> {
    ipw_values(
        p.values.iter().map(|&v| Some(v)),
        fit,
        p.values.len(),
        p.question,
        Source::MClw,
    )
}

/// Model-assisted IPW over a subset of units (`None` entries are skipped).
pub fn model_assisted_ipw_partial(
    p: &[Option<f64>],
    question: usize,
    fit: &PropensityFit,
) -> Result<MeanEstimate> {
    ipw_values(p.iter().copied(), fit, p.len(), question, Source::MClw)
}

/// Fraction of failed replicates that aborts a bootstrap.
const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 500,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Empirical variance of `estimator` over with-replacement resamples of the
/// units of `sample`. Probability-sample resamples keep each unit's weight;
/// estimators over nonprobability samples are expected to refit the
/// propensity model inside `estimator`.
pub fn bootstrap_variance<S, F>(estimator: F, sample: &S, options: &BootstrapOptions) -> Result<f64>
where
    S: SurveySample,
    F: Fn(&S) -> Result<f64> + Sync + Send,
{
    let v = bootstrap_variances(|s| estimator(s).map(|v| vec![v]), sample, options)?;
    Ok(v[0])
}

/// [`bootstrap_variance`] for an estimator returning several values from one
/// resample; a replicate fails if any value is non-finite.
pub fn bootstrap_variances<S, F>(
    estimator: F,
    sample: &S,
    options: &BootstrapOptions,
) -> Result<Vec<f64>>
where
    S: SurveySample,
    F: Fn(&S) -> Result<Vec<f64>> + Sync + Send,
{
    bootstrap_index_variances(sample.len(), options, |idx| estimator(&sample.select(idx)))
}

/// Bootstrap over unit indices: `estimator` receives the `n` resampled
/// indices, so callers can carry per-unit data alongside the sample.
pub fn bootstrap_index_variances<F>(n: usize, options: &BootstrapOptions, estimator: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync + Send,
{
    if options.replicates < 2 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least 2 replicates, got {}",
            options.replicates
        )));
    }
    if n == 0 {
        return Err(Error::EmptySample("bootstrap input"));
    }
    let results = map_indexed(options.replicates, options.execution, |b| {
        let mut rng = replicate_rng(options.seed, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        estimator(&idx)
    });

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(results.len());
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(v) if v.iter().all(|x| x.is_finite()) => values.push(v),
            Ok(v) => {
                failed += 1;
                first.get_or_insert_with(|| format!("non-finite estimate in {v:?}"));
            }
            Err(e) => {
                failed += 1;
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * options.replicates as f64 || values.len() < 2 {
        return Err(Error::ReplicateFailures {
            failed,
            total: options.replicates,
            limit_pct: 10,
            first: first.unwrap_or_default(),
        });
    }
    if failed > 0 {
        log::warn!("bootstrap: {failed} of {} replicates failed", options.replicates);
    }
    let width = values[0].len();
    if let Some(v) = values.iter().find(|v| v.len() != width) {
        return Err(Error::DimensionMismatch {
            expected: width,
            found: v.len(),
        });
    }
    Ok((0..width)
        .map(|j| {
            // Deviations from the first replicate keep a constant exactly 0.
            let shift = values[0][j];
            let dev: Vec<f64> = values.iter().map(|v| v[j] - shift).collect();
            let mean = dev.iter().copied().collect::<CompensatedSum>().value() / dev.len() as f64;
            let ss = dev
                .iter()
                .map(|d| (d - mean).powi(2))
                .collect::<CompensatedSum>()
                .value();
            ss / (dev.len() - 1) as f64
        })
        .collect())
}
