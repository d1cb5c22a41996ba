use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::benchmark::{abs_diff_table, estimate_bias, mae, BiasMatrix};
use crate::composite::{comb_composite, ev_composite, m_comb_composite, m_ev_composite, CompositeInputs};
use crate::error::{Error, Result};
use crate::estimators::{
    bias_corrected_ipw, bootstrap_index_variances, design_weighted_mean, ipw_mean,
    model_assisted_ipw_partial, BootstrapOptions, PredictedProbabilities, ResponseColumn,
};
use crate::parallel::{map_indexed, replicate_rng, CompensatedSum, Execution};
use crate::propensity::{fit_samples, PropensityFit, PropensityOptions, Theta};
use crate::response_model::{
    build_training_set, fit_gbm, predict_probability, BoostedModel, FeatureRows, GbmConfig,
};
use crate::types::{
    BenchmarkTable, CellKey, EstimateTable, MeanEstimate, NonprobabilitySample, ProbabilitySample,
    Source, SubgroupKey, SurveySample,
};

use super::population::{
    draw_nonprobability_sample, draw_probability_sample, inject_bogus_responses,
    rare_combination_incidence, weight_segment_subsample, Population,
};

/// Replicate failure share above which a Monte Carlo run aborts.
pub const MAX_FAILURE_PCT: usize = 5;

/// Estimates of one replicate keyed by estimator label, plus scalar
/// diagnostics.
#[derive(Clone, Debug, Default)]
pub struct ReplicateOutput {
    pub estimates: BTreeMap<String, EstimateTable>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Mean of a per-replicate quantity with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        let mean = values.iter().copied().collect::<CompensatedSum>().value() / n as f64;
        let se = if n > 1 {
            let ss = values
                .iter()
                .map(|v| (v - mean).powi(2))
                .collect::<CompensatedSum>()
                .value();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Stat { mean, se, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellStats {
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub bias_se: f64,
    /// Monte Carlo variance of the estimates.
    pub variance: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub mean_abs_error: f64,
    /// Average of the per-replicate variance estimates.
    pub mean_estimated_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorSummary {
    pub replicates: usize,
    /// Overall MAE (percent) per replicate, averaged.
    pub mae: Stat,
    /// Largest per-cell absolute error (percent) per replicate, averaged.
    pub max_abs_error: Stat,
    /// Largest over cells of the mean absolute error (percent).
    pub max_cell_mean_abs_error: f64,
    pub cells: BTreeMap<CellKey, CellStats>,
}

#[derive(Clone, Debug)]
pub struct McSummary {
    pub replicates: usize,
    pub failures: usize,
    pub seed: u64,
    pub estimators: BTreeMap<String, EstimatorSummary>,
    pub diagnostics: BTreeMap<String, Stat>,
}

impl McSummary {
    pub fn estimator(&self, label: &str) -> Result<&EstimatorSummary> {
        self.estimators
            .get(label)
            .ok_or_else(|| Error::InvalidConfig(format!("no estimator labelled {label:?} in summary")))
    }
}

fn summarize(
    label: &str,
    tables: &[&EstimateTable],
    truth: &BenchmarkTable,
) -> Result<EstimatorSummary> {
    let mut maes = Vec::with_capacity(tables.len());
    let mut maxes = Vec::with_capacity(tables.len());
    for t in tables {
        maes.push(mae(t, truth)?.overall);
        maxes.push(100.0 * abs_diff_table(t, truth)?.max_value);
    }
    let r = tables.len() as f64;
    let mut cells = BTreeMap::new();
    for (key, &mu) in truth.cells() {
        let est: Vec<f64> = tables.iter().map(|t| t.cells[key].value).collect();
        let mean = est.iter().copied().collect::<CompensatedSum>().value() / r;
        let dev = |f: &dyn Fn(f64) -> f64| est.iter().map(|&e| f(e)).collect::<CompensatedSum>().value();
        let variance = dev(&|e| (e - mean).powi(2)) / (r - 1.0);
        let sq: Vec<f64> = est.iter().map(|e| (e - mu).powi(2)).collect();
        let mse = Stat::of(&sq);
        cells.insert(
            *key,
            CellStats {
                truth: mu,
                mean,
                bias: mean - mu,
                bias_se: (variance / r).sqrt(),
                variance,
                mse: mse.mean,
                mse_se: mse.se,
                mean_abs_error: dev(&|e| (e - mu).abs()) / r,
                mean_estimated_variance: tables
                    .iter()
                    .map(|t| t.cells[key].variance)
                    .collect::<CompensatedSum>()
                    .value()
                    / r,
            },
        );
    }
    let max_cell_mean_abs_error = 100.0
        * cells
            .values()
            .map(|c: &CellStats| c.mean_abs_error)
            .fold(0.0, f64::max);
    log::debug!("{label}: {} replicates summarized", tables.len());
    Ok(EstimatorSummary {
        replicates: tables.len(),
        mae: Stat::of(&maes),
        max_abs_error: Stat::of(&maxes),
        max_cell_mean_abs_error,
        cells,
    })
}

/// Runs `replicate` for indices `0..replicates`, each with its own RNG
/// stream, and aggregates every labelled estimate against `truth`.
/// Results depend only on `seed`, not on the execution mode.
pub fn run_monte_carlo<F>(
    replicates: usize,
    seed: u64,
    execution: Execution,
    truth: &BenchmarkTable,
    replicate: F,
) -> Result<McSummary>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<ReplicateOutput> + Sync + Send,
{
    if replicates < 2 {
        return Err(Error::InvalidConfig(format!(
            "Monte Carlo needs at least 2 replicates, got {replicates}"
        )));
    }
    let outputs = map_indexed(replicates, execution, |r| {
        replicate(r, &mut replicate_rng(seed, r as u64))
    });
    let mut ok = Vec::with_capacity(replicates);
    let mut failures = 0;
    let mut first = None;
    for (r, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(o) => ok.push(o),
            Err(e) => {
                failures += 1;
                first.get_or_insert_with(|| format!("replicate {r}: {e}"));
            }
        }
    }
    if failures * 100 > MAX_FAILURE_PCT * replicates || ok.len() < 2 {
        return Err(Error::ReplicateFailures {
            failed: failures,
            total: replicates,
            limit_pct: MAX_FAILURE_PCT,
            first: first.unwrap_or_default(),
        });
    }
    if let Some(first) = first {
        log::warn!("{failures} of {replicates} replicates failed; first: {first}");
    }

    let mut labelled: BTreeMap<&str, Vec<&EstimateTable>> = BTreeMap::new();
    let mut diag: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for o in &ok {
        for (label, t) in &o.estimates {
            labelled.entry(label).or_default().push(t);
        }
        for (name, &v) in &o.diagnostics {
            diag.entry(name).or_default().push(v);
        }
    }
    let estimators = labelled
        .into_iter()
        .map(|(label, tables)| Ok((label.to_string(), summarize(label, &tables, truth)?)))
        .collect::<Result<_>>()?;
    Ok(McSummary {
        replicates,
        failures,
        seed,
        estimators,
        diagnostics: diag
            .into_iter()
            .map(|(k, v)| (k.to_string(), Stat::of(&v)))
            .collect(),
    })
}

/// The estimation sequence run inside every replicate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioOptions {
    /// Evaluation cells are every question crossed with these groups.
    pub groups: Vec<SubgroupKey>,
    /// Auxiliary (nps, ps) pairs used to estimate the bias; `2` gives the
    /// four-term cross-pair average.
    pub bias_pairs: usize,
    /// Inject bogus responses into every nonprobability draw.
    pub contaminate: bool,
    /// Also report IPW with the true propensities (`clw_oracle`).
    pub oracle: bool,
    /// Fit a response model on the probability sample and report the
    /// model-based estimators.
    pub model: Option<GbmConfig>,
    /// Probability-sample subsample sizes for `ps@n` / `comb@n`.
    pub sweep_sizes: Vec<usize>,
    /// Bootstrap replicates for the IPW and model-assisted variances; `0`
    /// keeps the fixed-weight linearization.
    pub bootstrap_replicates: usize,
    pub propensity: PropensityOptions,
    /// Variances below this are raised to it before composition.
    pub variance_floor: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            groups: Vec::new(),
            bias_pairs: 2,
            contaminate: true,
            oracle: false,
            model: None,
            sweep_sizes: Vec::new(),
            bootstrap_replicates: 0,
            propensity: PropensityOptions::default(),
            variance_floor: 1e-12,
        }
    }
}

fn with_source(e: MeanEstimate, source: Source) -> MeanEstimate {
    MeanEstimate { source, ..e }
}

/// Design-weighted means for every question crossed with `groups`.
pub fn ps_table(ps: &ProbabilitySample, groups: &[SubgroupKey]) -> Result<EstimateTable> {
    let mut t = EstimateTable::new(ps.questions.clone());
    for q in 0..ps.questions.len() {
        let y = ResponseColumn::from_sample(ps, q);
        for &g in groups {
            t.insert(CellKey::new(q, g), design_weighted_mean(&y.restricted_to(ps, g), ps)?);
        }
    }
    Ok(t)
}

/// IPW means for every question crossed with `groups`.
pub fn clw_table(
    nps: &NonprobabilitySample,
    fit: &PropensityFit,
    groups: &[SubgroupKey],
) -> Result<EstimateTable> {
    let mut t = EstimateTable::new(nps.questions.clone());
    for q in 0..nps.questions.len() {
        let y = ResponseColumn::from_sample(nps, q);
        for &g in groups {
            t.insert(CellKey::new(q, g), ipw_mean(&y.restricted_to(nps, g), fit)?);
        }
    }
    Ok(t)
}

/// Design-weighted and IPW tables for one (nps, ps) pair.
pub fn pair_tables(
    nps: &NonprobabilitySample,
    ps: &ProbabilitySample,
    groups: &[SubgroupKey],
    options: &PropensityOptions,
) -> Result<(EstimateTable, EstimateTable, PropensityFit)> {
    let fit = fit_samples(nps, ps, options)?;
    Ok((clw_table(nps, &fit, groups)?, ps_table(ps, groups)?, fit))
}

/// Per cell: bias-corrected IPW, `ev` and `comb` from the ps and IPW tables.
pub fn compose_tables(
    ps: &EstimateTable,
    clw: &EstimateTable,
    eps: &BiasMatrix,
    variance_floor: f64,
) -> Result<[EstimateTable; 3]> {
    let mut out = [
        EstimateTable::new(ps.questions.clone()),
        EstimateTable::new(ps.questions.clone()),
        EstimateTable::new(ps.questions.clone()),
    ];
    for (key, y1) in &ps.cells {
        let y2 = clw
            .get(key)
            .ok_or_else(|| Error::GridMismatch(format!("no IPW estimate for cell {key:?}")))?;
        let e = eps
            .get(key)
            .ok_or_else(|| Error::GridMismatch(format!("no bias estimate for cell {key:?}")))?;
        let input = CompositeInputs::new(
            y1.value,
            y2.value,
            y1.variance.max(variance_floor),
            y2.variance.max(variance_floor),
            e,
        )?;
        out[0].insert(*key, bias_corrected_ipw(y2, e));
        out[1].insert(*key, ev_composite(&input)?.to_estimate(Source::Ev));
        out[2].insert(*key, comb_composite(&input)?.to_estimate(Source::Comb));
    }
    Ok(out)
}

/// A nonprobability draw, contaminated when `contaminate` is set and the
/// spec has a bogus block. Returns the sample, true propensities and bogus
/// flags.
pub fn draw_nps(
    pop: &Population,
    contaminate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(NonprobabilitySample, Vec<f64>, Vec<bool>)> {
    let draw = draw_nonprobability_sample(pop, rng);
    match (&pop.spec.bogus, contaminate) {
        (Some(bogus), true) => {
            let c = inject_bogus_responses(draw.sample, bogus, rng)?;
            Ok((c.sample, draw.true_propensity, c.bogus))
        }
        _ => {
            let n = draw.sample.units.len();
            Ok((draw.sample, draw.true_propensity, vec![false; n]))
        }
    }
}

fn group_tag(g: SubgroupKey) -> String {
    format!("{}={}", g.factor, g.level)
}

/// One replicate of the held-out analysis: auxiliary pairs estimate the
/// bias, the validation pair produces every estimator.
pub fn scenario_replicate(
    pop: &Population,
    options: &ScenarioOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ReplicateOutput> {
    if options.bias_pairs == 0 {
        return Err(Error::InvalidConfig("at least one auxiliary pair is needed".into()));
    }
    let groups = &options.groups;
    let mut aux_nps = Vec::with_capacity(options.bias_pairs);
    let mut aux_ps = Vec::with_capacity(options.bias_pairs);
    for _ in 0..options.bias_pairs {
        let (nps, _, _) = draw_nps(pop, options.contaminate, rng)?;
        let ps = draw_probability_sample(pop, rng)?;
        let (clw, pst, _) = pair_tables(&nps, &ps, groups, &options.propensity)?;
        aux_nps.push(clw);
        aux_ps.push(pst);
    }
    let eps = estimate_bias(&aux_nps, &aux_ps)?;

    let (nps, true_pi, bogus) = draw_nps(pop, options.contaminate, rng)?;
    let ps = draw_probability_sample(pop, rng)?;
    let (clw, pst, fit) = pair_tables(&nps, &ps, groups, &options.propensity)?;
    let predictions = match &options.model {
        Some(config) => Some(predict_questions(&fit_gbm(&build_training_set(&ps, &[])?, config)?, &nps)?),
        None => None,
    };
    let (clw, m_variances) = if options.bootstrap_replicates > 0 {
        let bootstrap = BootstrapOptions {
            replicates: options.bootstrap_replicates,
            seed: rng.random(),
            execution: Execution::Sequential,
        };
        let (v, m) = ipw_bootstrap(&nps, &ps, groups, predictions.as_deref(), &options.propensity, &bootstrap)?;
        (with_variances(&clw, &v)?, m)
    } else {
        (clw, None)
    };
    let [bc, ev, comb] = compose_tables(&pst, &clw, &eps, options.variance_floor)?;

    let mut out = ReplicateOutput::default();
    out.diagnostics.insert("n_a".into(), nps.units.len() as f64);
    out.diagnostics.insert("n_b".into(), ps.units.len() as f64);
    out.diagnostics.insert("propensity_iterations".into(), fit.iterations as f64);
    out.diagnostics.insert(
        "bogus_share".into(),
        bogus.iter().filter(|&&b| b).count() as f64 / bogus.len().max(1) as f64,
    );
    if let Some(rare) = &pop.spec.rare_combination {
        let qs: Vec<usize> = rare
            .questions
            .iter()
            .map(|q| pop.spec.question_index(q))
            .collect::<Result<_>>()?;
        for &g in groups {
            if let Some(share) = rare_combination_incidence(&nps.units, &qs, rare.min_yes, g) {
                out.diagnostics.insert(format!("rare_incidence:{}", group_tag(g)), share);
            }
        }
    }

    if options.oracle {
        let oracle = PropensityFit::from_propensities(Theta(pop.selection_theta.0.clone()), true_pi);
        out.estimates.insert("clw_oracle".into(), clw_table(&nps, &oracle, groups)?);
    }

    if let Some(preds) = &predictions {
        let mut m_clw = m_clw_table(&nps, preds, &fit, groups)?;
        if let Some(v) = &m_variances {
            m_clw = with_variances(&m_clw, v)?;
        }
        let [m_comb, m_ev] = model_composites(&pst, &m_clw, options.variance_floor)?;
        out.estimates.insert("m_clw".into(), m_clw);
        out.estimates.insert("m_comb".into(), m_comb);
        out.estimates.insert("m_ev".into(), m_ev);
    }

    for &size in &options.sweep_sizes {
        let sub = weight_segment_subsample(&ps, size, rng)?;
        let sub_ps = ps_table(&sub, groups)?;
        let [_, _, sub_comb] = compose_tables(&sub_ps, &clw, &eps, options.variance_floor)?;
        out.estimates.insert(format!("ps@{size}"), sub_ps);
        out.estimates.insert(format!("comb@{size}"), sub_comb);
    }

    out.estimates.insert("ps".into(), pst);
    out.estimates.insert("clw".into(), clw);
    out.estimates.insert("bc_clw".into(), bc);
    out.estimates.insert("ev".into(), ev);
    out.estimates.insert("comb".into(), comb);
    Ok(out)
}

/// Response-model probabilities for every question of `nps`.
pub fn predict_questions(
    model: &BoostedModel,
    nps: &NonprobabilitySample,
) -> Result<Vec<PredictedProbabilities>> {
    (0..nps.questions.len())
        .map(|q| PredictedProbabilities::new(q, predict_probability(model, &FeatureRows::for_question(nps, q))?))
        .collect()
}

/// Model-assisted IPW means for every question crossed with `groups`.
pub fn m_clw_table(
    nps: &NonprobabilitySample,
    predictions: &[PredictedProbabilities],
    fit: &PropensityFit,
    groups: &[SubgroupKey],
) -> Result<EstimateTable> {
    let mut t = EstimateTable::new(nps.questions.clone());
    for p in predictions {
        for &g in groups {
            t.insert(
                CellKey::new(p.question, g),
                model_assisted_ipw_partial(&p.restricted_to(nps, g), p.question, fit)?,
            );
        }
    }
    Ok(t)
}

/// `m_comb` and `m_ev` per cell of the model-assisted table.
pub fn model_composites(
    ps_table: &EstimateTable,
    m_clw: &EstimateTable,
    variance_floor: f64,
) -> Result<[EstimateTable; 2]> {
    let mut out = [
        EstimateTable::new(m_clw.questions.clone()),
        EstimateTable::new(m_clw.questions.clone()),
    ];
    for (key, m) in &m_clw.cells {
        let y1 = ps_table
            .get(key)
            .ok_or_else(|| Error::GridMismatch(format!("no ps estimate for cell {key:?}")))?;
        let y1 = with_source(*y1, Source::Ps).with_variance(y1.variance.max(variance_floor));
        let m2 = m.with_variance(m.variance.max(variance_floor));
        out[0].insert(*key, m_comb_composite(&y1, &m2)?.to_estimate(Source::MComb));
        out[1].insert(
            *key,
            m_ev_composite(y1.value, m2.value, y1.variance, m2.variance)?.to_estimate(Source::MEv),
        );
    }
    Ok(out)
}

/// `m_clw`, `m_comb` and `m_ev` tables from a response model fitted on the
/// probability sample behind `ps_table`.
pub fn model_tables(
    nps: &NonprobabilitySample,
    model: &BoostedModel,
    ps_table: &EstimateTable,
    fit: &PropensityFit,
    groups: &[SubgroupKey],
    variance_floor: f64,
) -> Result<[EstimateTable; 3]> {
    let m = m_clw_table(nps, &predict_questions(model, nps)?, fit, groups)?;
    let [m_comb, m_ev] = model_composites(ps_table, &m, variance_floor)?;
    Ok([m, m_comb, m_ev])
}

/// Bootstrap variances of the IPW table and, given `predictions`, of the
/// model-assisted table. Each replicate resamples `nps` and refits the
/// propensity model against the fixed `ps`; predictions stay attached to
/// their units. Variances come back in table cell order.
pub fn ipw_bootstrap(
    nps: &NonprobabilitySample,
    ps: &ProbabilitySample,
    groups: &[SubgroupKey],
    predictions: Option<&[PredictedProbabilities]>,
    propensity: &PropensityOptions,
    bootstrap: &BootstrapOptions,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let cells = nps.questions.len() * groups.len();
    let mut all = bootstrap_index_variances(nps.units.len(), bootstrap, |idx| {
        let sub = nps.select(idx);
        let fit = fit_samples(&sub, ps, propensity)?;
        let mut values: Vec<f64> = clw_table(&sub, &fit, groups)?.cells.values().map(|e| e.value).collect();
        if let Some(preds) = predictions {
            let resampled = preds
                .iter()
                .map(|p| PredictedProbabilities::new(p.question, idx.iter().map(|&i| p.values[i]).collect()))
                .collect::<Result<Vec<_>>>()?;
            values.extend(m_clw_table(&sub, &resampled, &fit, groups)?.cells.values().map(|e| e.value));
        }
        Ok(values)
    })?;
    let model = predictions.map(|_| all.split_off(cells));
    Ok((all, model))
}

/// `table` with its variances replaced, in cell order.
pub fn with_variances(table: &EstimateTable, variances: &[f64]) -> Result<EstimateTable> {
    if variances.len() != table.cells.len() {
        return Err(Error::DimensionMismatch {
            expected: table.cells.len(),
            found: variances.len(),
        });
    }
    let mut v = variances.iter();
    Ok(table.map(|_, e| e.with_variance(*v.next().unwrap_or(&f64::NAN))))
}

/// Repeats [`scenario_replicate`] `replicates` times against the population
/// truth on `options.groups`.
pub fn monte_carlo(
    pop: &Population,
    options: &ScenarioOptions,
    replicates: usize,
    seed: u64,
    execution: Execution,
) -> Result<McSummary> {
    if options.groups.is_empty() {
        return Err(Error::InvalidConfig("no evaluation groups".into()));
    }
    let truth = pop.truth(&options.groups)?;
    run_monte_carlo(replicates, seed, execution, &truth, |_, rng| {
        scenario_replicate(pop, options, rng)
    })
}

/// One row of the sample-size table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// `None` for the full probability sample.
    pub size: Option<usize>,
    pub mae_ps: f64,
    pub mae_comb: f64,
    /// `100 (MAE_ps − MAE_comb) / MAE_ps`.
    pub pct_change: f64,
}

/// MAE of `ps` and `comb` at the full size and at every subsample size.
pub fn sample_size_sweep(
    pop: &Population,
    options: &ScenarioOptions,
    sizes: &[usize],
    replicates: usize,
    seed: u64,
    execution: Execution,
) -> Result<Vec<SweepRow>> {
    if sizes.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidConfig("sweep sizes must be descending".into()));
    }
    let options = ScenarioOptions {
        sweep_sizes: sizes.to_vec(),
        ..options.clone()
    };
    let summary = monte_carlo(pop, &options, replicates, seed, execution)?;
    sweep_rows(&summary, sizes)
}

pub fn sweep_rows(summary: &McSummary, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    let row = |size: Option<usize>, ps: &str, comb: &str| -> Result<SweepRow> {
        let mae_ps = summary.estimator(ps)?.mae.mean;
        let mae_comb = summary.estimator(comb)?.mae.mean;
        Ok(SweepRow {
            size,
            mae_ps,
            mae_comb,
            pct_change: 100.0 * (mae_ps - mae_comb) / mae_ps,
        })
    };
    std::iter::once(row(None, "ps", "comb"))
        .chain(
            sizes
                .iter()
                .map(|&n| row(Some(n), &format!("ps@{n}"), &format!("comb@{n}"))),
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Factor;

    fn table(v: f64) -> EstimateTable {
        let mut t = EstimateTable::new(vec!["q".into()]);
        t.insert(CellKey::new(0, SubgroupKey::OVERALL), MeanEstimate::new(v, 0.0, Source::Ps));
        t
    }

    fn truth(v: f64) -> BenchmarkTable {
        BenchmarkTable::new(
            vec!["q".into()],
            [(CellKey::new(0, SubgroupKey::OVERALL), v)].into_iter().collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_estimator_has_zero_bias_and_mse() {
        let s = run_monte_carlo(10, 1, Execution::Sequential, &truth(0.3), |_, _| {
            Ok(ReplicateOutput {
                estimates: [("exact".to_string(), table(0.3))].into_iter().collect(),
                diagnostics: BTreeMap::new(),
            })
        })
        .unwrap();
        let c = s.estimator("exact").unwrap().cells[&CellKey::new(0, SubgroupKey::OVERALL)];
        assert_eq!(c.bias, 0.0);
        assert_eq!(c.mse, 0.0);
        assert_eq!(s.estimator("exact").unwrap().mae.mean, 0.0);
    }

    #[test]
    fn failure_rate_above_limit_aborts() {
        let r = run_monte_carlo(20, 1, Execution::Sequential, &truth(0.3), |i, _| {
            if i < 2 {
                Err(Error::SingularHessian)
            } else {
                Ok(ReplicateOutput {
                    estimates: [("x".to_string(), table(0.3))].into_iter().collect(),
                    diagnostics: BTreeMap::new(),
                })
            }
        });
        assert!(matches!(r, Err(Error::ReplicateFailures { failed: 2, .. })));
    }

    #[test]
    fn one_failure_in_twenty_is_tolerated() {
        let s = run_monte_carlo(20, 1, Execution::Sequential, &truth(0.3), |i, _| {
            if i == 0 {
                Err(Error::SingularHessian)
            } else {
                Ok(ReplicateOutput {
                    estimates: [("x".to_string(), table(0.3))].into_iter().collect(),
                    diagnostics: BTreeMap::new(),
                })
            }
        })
        .unwrap();
        assert_eq!(s.failures, 1);
        assert_eq!(s.estimator("x").unwrap().replicates, 19);
    }

    #[test]
    fn fewer_than_two_replicates_rejected() {
        assert!(run_monte_carlo(1, 1, Execution::Sequential, &truth(0.3), |_, _| {
            Ok(ReplicateOutput::default())
        })
        .is_err());
    }

    #[test]
    fn stat_of_known_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_rows_percent_change() {
        let mut summary = McSummary {
            replicates: 2,
            failures: 0,
            seed: 0,
            estimators: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
        };
        let est = |m: f64| EstimatorSummary {
            replicates: 2,
            mae: Stat { mean: m, se: 0.0, n: 2 },
            max_abs_error: Stat { mean: m, se: 0.0, n: 2 },
            max_cell_mean_abs_error: m,
            cells: BTreeMap::new(),
        };
        for (k, m) in [("ps", 2.5), ("comb", 2.4), ("ps@100", 8.0), ("comb@100", 4.0)] {
            summary.estimators.insert(k.into(), est(m));
        }
        let rows = sweep_rows(&summary, &[100]).unwrap();
        assert!((rows[0].pct_change - 4.0).abs() < 1e-12);
        assert_eq!(rows[1].size, Some(100));
        assert_eq!(rows[1].pct_change, 50.0);
        assert!(sweep_rows(&summary, &[50]).is_err());
    }

    #[test]
    fn group_tags() {
        assert_eq!(group_tag(SubgroupKey::new(Factor::Age, 1, 3).unwrap()), "age=1");
    }
}
