use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::propensity::{logistic, Theta};
use crate::types::{
    BenchmarkTable, CellKey, CovariateVector, Factor, NonprobabilitySample, ProbabilitySample,
    Schema, SubgroupKey, SubgroupLabels, Unit,
};

use super::spec::{BogusSpec, PopulationSpec};

/// A finite population with known responses and selection propensities.
#[derive(Clone, Debug)]
pub struct Population {
    pub spec: PopulationSpec,
    pub schema: Arc<Schema>,
    pub questions: Vec<String>,
    pub units: Vec<Unit>,
    /// Zero-based factor levels per unit.
    pub levels: Vec<Vec<usize>>,
    /// True response probabilities, unit-major.
    pub response_probability: Vec<Vec<f64>>,
    /// `θ_0` with the intercept calibrated to the expected nps size.
    pub selection_theta: Theta,
    pub selection_propensity: Vec<f64>,
    strata: Vec<Vec<usize>>,
}

fn draw_level<R: Rng>(rng: &mut R, probabilities: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Intercept `a` such that `Σ logistic(a + x'β) = target`, by bisection.
pub fn calibrate_intercept(x: &[CovariateVector], slopes: &[f64], target: f64) -> Result<f64> {
    let n = x.len() as f64;
    if !(target > 0.0 && target < n) {
        return Err(Error::TargetTooLarge {
            target: target.ceil() as usize,
            available: x.len(),
        });
    }
    let linear: Vec<f64> = x.iter().map(|xi| xi.dot(slopes)).collect();
    let expected = |a: f64| linear.iter().map(|l| logistic(a + l)).sum::<f64>();
    let (mut lo, mut hi) = (-60.0, 60.0);
    if expected(lo) > target || expected(hi) < target {
        return Err(Error::InvalidConfig(format!(
            "expected size {target} unreachable with the given selection slopes"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn generate_population<R: Rng>(spec: &PopulationSpec, rng: &mut R) -> Result<Population> {
    spec.validate()?;
    let schema = Arc::new(spec.schema()?);
    let betas: Vec<Vec<f64>> = spec
        .questions
        .iter()
        .map(|q| spec.coefficients(q.intercept, &q.effects))
        .collect::<Result<_>>()?;
    let group_factor = |name: &Option<String>| -> Result<Option<usize>> {
        name.as_deref().map(|n| spec.factor_index(n)).transpose()
    };
    let age = group_factor(&spec.subgroups.age)?;
    let race = group_factor(&spec.subgroups.race)?;
    let education = group_factor(&spec.subgroups.education)?;
    let label = |levels: &[usize], f: Option<usize>| f.map(|f| levels[f] as u32 + 1);

    let n = spec.population_size;
    let width = n.to_string().len();
    let mut units = Vec::with_capacity(n);
    let mut all_levels = Vec::with_capacity(n);
    let mut response_probability = Vec::with_capacity(n);
    for i in 0..n {
        let levels: Vec<usize> = spec
            .factors
            .iter()
            .map(|f| draw_level(rng, &f.probabilities))
            .collect();
        let x = schema.encode_levels(&levels)?;
        let probs: Vec<f64> = betas.iter().map(|b| logistic(x.dot(b))).collect();
        let responses = probs.iter().map(|&p| Some(rng.random_bool(p))).collect();
        units.push(Unit {
            id: format!("u{i:0width$}"),
            responses,
            x,
            groups: SubgroupLabels {
                age: label(&levels, age),
                race: label(&levels, race),
                education: label(&levels, education),
            },
        });
        all_levels.push(levels);
        response_probability.push(probs);
    }

    let xs: Vec<CovariateVector> = units.iter().map(|u| u.x.clone()).collect();
    let mut theta = spec.coefficients(0.0, &spec.selection.effects)?;
    theta[0] = calibrate_intercept(&xs, &theta, spec.selection.expected_size)?;
    let selection_propensity = xs.iter().map(|x| logistic(x.dot(&theta))).collect();

    let stratum_factor = spec
        .design
        .strata_factor
        .as_deref()
        .map(|s| spec.factor_index(s))
        .transpose()?;
    let mut strata = vec![Vec::new(); spec.design.fractions.len()];
    for (i, levels) in all_levels.iter().enumerate() {
        strata[stratum_factor.map_or(0, |f| levels[f])].push(i);
    }

    Ok(Population {
        spec: spec.clone(),
        schema,
        questions: spec.questions.iter().map(|q| q.name.clone()).collect(),
        units,
        levels: all_levels,
        response_probability,
        selection_theta: Theta(theta),
        selection_propensity,
        strata,
    })
}

impl Population {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Subgroup keys of every level of `factor` (the single overall key for
    /// [`Factor::Overall`]).
    pub fn subgroups(&self, factor: Factor) -> Result<Vec<SubgroupKey>> {
        let name = match factor {
            Factor::Overall => return Ok(vec![SubgroupKey::OVERALL]),
            Factor::Age => &self.spec.subgroups.age,
            Factor::Race => &self.spec.subgroups.race,
            Factor::Education => &self.spec.subgroups.education,
        };
        let name = name
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("no factor mapped to {factor}")))?;
        let k = self.spec.factors[self.spec.factor_index(name)?].levels.len() as u32;
        (1..=k).map(|l| SubgroupKey::new(factor, l, k)).collect()
    }

    /// Exact population means `μ_Y` for every question × group cell.
    pub fn truth(&self, groups: &[SubgroupKey]) -> Result<BenchmarkTable> {
        let mut cells = BTreeMap::new();
        for &g in groups {
            let members: Vec<&Unit> = self.units.iter().filter(|u| u.groups.contains(g)).collect();
            if members.is_empty() {
                return Err(Error::EmptySample("population subgroup"));
            }
            for q in 0..self.questions.len() {
                let yes = members.iter().filter(|u| u.responses[q] == Some(true)).count();
                cells.insert(CellKey::new(q, g), yes as f64 / members.len() as f64);
            }
        }
        BenchmarkTable::new(self.questions.clone(), cells)
    }
}

/// Stratified simple random sample without replacement. Stratum `h` takes
/// `round(f_h N_h)` units (at least one), each with weight `N_h / n_h`.
pub fn draw_probability_sample<R: Rng>(pop: &Population, rng: &mut R) -> Result<ProbabilitySample> {
    let mut picked: Vec<(usize, f64)> = Vec::new();
    for (h, (members, &f)) in pop.strata.iter().zip(&pop.spec.design.fractions).enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyStratum(h));
        }
        let size = members.len();
        let take = ((f * size as f64).round() as usize).clamp(1, size);
        let weight = size as f64 / take as f64;
        picked.extend(
            index::sample(rng, size, take)
                .into_iter()
                .map(|i| (members[i], weight)),
        );
    }
    picked.sort_unstable_by_key(|&(i, _)| i);
    Ok(ProbabilitySample::new(
        pop.questions.clone(),
        Arc::clone(&pop.schema),
        picked.iter().map(|&(i, _)| pop.units[i].clone()).collect(),
        picked.iter().map(|&(_, w)| w).collect(),
    ))
}

/// A Poisson draw from the population with the true propensities kept.
#[derive(Clone, Debug)]
pub struct NonprobabilityDraw {
    pub sample: NonprobabilitySample,
    pub population_index: Vec<usize>,
    pub true_propensity: Vec<f64>,
}

/// Independent Bernoulli(`π(x_i, θ_0)`) inclusion of every population unit.
pub fn draw_nonprobability_sample<R: Rng>(pop: &Population, rng: &mut R) -> NonprobabilityDraw {
    let population_index: Vec<usize> = pop
        .selection_propensity
        .iter()
        .enumerate()
        .filter(|&(_, &p)| rng.random_bool(p))
        .map(|(i, _)| i)
        .collect();
    NonprobabilityDraw {
        sample: NonprobabilitySample::new(
            pop.questions.clone(),
            Arc::clone(&pop.schema),
            population_index.iter().map(|&i| pop.units[i].clone()).collect(),
        ),
        true_propensity: population_index
            .iter()
            .map(|&i| pop.selection_propensity[i])
            .collect(),
        population_index,
    }
}

/// Nonprobability sample after bogus responding, with per-unit flags.
#[derive(Clone, Debug)]
pub struct Contaminated {
    pub sample: NonprobabilitySample,
    pub bogus: Vec<bool>,
}

/// Flags each unit with the probability of its level of `spec.factor`;
/// flagged units answer Yes to every question.
pub fn inject_bogus_responses<R: Rng>(
    mut sample: NonprobabilitySample,
    spec: &BogusSpec,
    rng: &mut R,
) -> Result<Contaminated> {
    for &p in &spec.probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
    }
    let f = sample
        .schema
        .variable_index(&spec.factor)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown factor {:?}", spec.factor)))?;
    if sample.schema.variables()[f].levels.len() != spec.probabilities.len() {
        return Err(Error::InvalidConfig(format!(
            "{} bogus probabilities for factor {:?}",
            spec.probabilities.len(),
            spec.factor
        )));
    }
    let mut bogus = Vec::with_capacity(sample.units.len());
    for unit in &mut sample.units {
        let level = sample.schema.decode(&unit.x)?[f];
        let flagged = rng.random_bool(spec.probabilities[level]);
        if flagged {
            unit.responses.iter_mut().for_each(|r| *r = Some(true));
        }
        bogus.push(flagged);
    }
    Ok(Contaminated { sample, bogus })
}

/// Width of the normalized-weight bins used as subsampling strata.
pub const WEIGHT_BIN_WIDTH: f64 = 0.5;

/// Stratified subsample with proportional allocation, strata being bins of
/// width 0.5 on the weight scale normalized to mean 1. Selected units keep
/// their weight multiplied by `stratum size / stratum take`.
pub fn weight_segment_subsample<R: Rng>(
    ps: &ProbabilitySample,
    target_n: usize,
    rng: &mut R,
) -> Result<ProbabilitySample> {
    let n = ps.units.len();
    if target_n > n {
        return Err(Error::TargetTooLarge {
            target: target_n,
            available: n,
        });
    }
    if target_n == 0 {
        return Err(Error::InvalidConfig("subsample size must be positive".into()));
    }
    let mean = ps.weights.iter().sum::<f64>() / n as f64;
    let mut bins: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &w) in ps.weights.iter().enumerate() {
        bins.entry((w / mean / WEIGHT_BIN_WIDTH).floor() as u64)
            .or_default()
            .push(i);
    }

    // Largest-remainder allocation; ties go to the lower bin.
    let quotas: Vec<f64> = bins
        .values()
        .map(|m| target_n as f64 * m.len() as f64 / n as f64)
        .collect();
    let mut takes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = target_n - takes.iter().sum::<usize>();
    for &h in order.iter().take(short) {
        takes[h] += 1;
    }

    let mut picked: Vec<(usize, f64)> = Vec::with_capacity(target_n);
    for (members, &take) in bins.values().zip(&takes) {
        if take == 0 {
            continue;
        }
        let factor = members.len() as f64 / take as f64;
        picked.extend(
            index::sample(rng, members.len(), take)
                .into_iter()
                .map(|i| (members[i], ps.weights[members[i]] * factor)),
        );
    }
    picked.sort_unstable_by_key(|&(i, _)| i);
    let idx: Vec<usize> = picked.iter().map(|&(i, _)| i).collect();
    let mut sub = crate::types::SurveySample::select(ps, &idx);
    sub.weights = picked.iter().map(|&(_, w)| w).collect();
    Ok(sub)
}

/// Share of `units` in `group` answering Yes to at least `min_yes` of
/// `questions`; refusals count as No.
pub fn rare_combination_incidence(
    units: &[Unit],
    questions: &[usize],
    min_yes: usize,
    group: SubgroupKey,
) -> Option<f64> {
    let members: Vec<&Unit> = units.iter().filter(|u| u.groups.contains(group)).collect();
    if members.is_empty() {
        return None;
    }
    let hits = members
        .iter()
        .filter(|u| {
            questions
                .iter()
                .filter(|&&q| u.responses[q] == Some(true))
                .count()
                >= min_yes
        })
        .count();
    Some(hits as f64 / members.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::replicate_rng;
    use crate::simulator::spec::{DesignSpec, FactorSpec, QuestionSpec, SelectionSpec, SubgroupMap};
    use crate::types::SurveySample;

    fn tiny_spec(n: usize, p: f64) -> PopulationSpec {
        PopulationSpec {
            population_size: n,
            factors: vec![FactorSpec {
                name: "young".into(),
                levels: vec!["no".into(), "yes".into()],
                probabilities: vec![1.0 - p, p],
            }],
            subgroups: SubgroupMap {
                age: Some("young".into()),
                ..Default::default()
            },
            questions: vec![
                QuestionSpec {
                    name: "flat".into(),
                    intercept: 0.0,
                    effects: Default::default(),
                },
                QuestionSpec {
                    name: "never".into(),
                    intercept: -40.0,
                    effects: Default::default(),
                },
            ],
            selection: SelectionSpec {
                expected_size: n as f64 / 10.0,
                effects: Default::default(),
            },
            design: DesignSpec {
                strata_factor: None,
                fractions: vec![0.1],
            },
            bogus: None,
            rare_combination: None,
        }
    }

    #[test]
    fn symmetric_and_saturated_questions() {
        let pop = generate_population(&tiny_spec(50_000, 0.3), &mut replicate_rng(1, 0)).unwrap();
        let truth = pop.truth(&[SubgroupKey::OVERALL]).unwrap();
        let flat = truth.get(&CellKey::new(0, SubgroupKey::OVERALL)).unwrap();
        assert!((flat - 0.5).abs() < 3.0 * (0.25f64 / 50_000.0).sqrt(), "{flat}");
        assert_eq!(truth.get(&CellKey::new(1, SubgroupKey::OVERALL)), Some(0.0));
    }

    #[test]
    fn factor_prevalence_within_binomial_band() {
        let pop = generate_population(&tiny_spec(1000, 0.3), &mut replicate_rng(2, 0)).unwrap();
        let share = pop.levels.iter().filter(|l| l[0] == 1).count() as f64 / 1000.0;
        assert!((share - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / 1000.0).sqrt(), "{share}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_population(&tiny_spec(500, 0.3), &mut replicate_rng(3, 0)).unwrap();
        let b = generate_population(&tiny_spec(500, 0.3), &mut replicate_rng(3, 0)).unwrap();
        assert_eq!(a.units, b.units);
        assert_eq!(a.selection_propensity, b.selection_propensity);
    }

    #[test]
    fn single_stratum_ten_percent() {
        let pop = generate_population(&tiny_spec(1000, 0.3), &mut replicate_rng(4, 0)).unwrap();
        let ps = draw_probability_sample(&pop, &mut replicate_rng(4, 1)).unwrap();
        assert_eq!(ps.len(), 100);
        assert!(ps.weights.iter().all(|&d| d == 10.0));
    }

    #[test]
    fn census_has_unit_weights() {
        let mut spec = tiny_spec(300, 0.3);
        spec.design.fractions = vec![1.0];
        let pop = generate_population(&spec, &mut replicate_rng(5, 0)).unwrap();
        let ps = draw_probability_sample(&pop, &mut replicate_rng(5, 1)).unwrap();
        assert_eq!(ps.len(), 300);
        assert!(ps.weights.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn flat_selection_hits_expected_size() {
        let pop = generate_population(&tiny_spec(2000, 0.3), &mut replicate_rng(6, 0)).unwrap();
        let total: f64 = pop.selection_propensity.iter().sum();
        assert!((total - 200.0).abs() < 1e-8);
        assert!(pop.selection_propensity.iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn calibration_rejects_unattainable_target() {
        let x = vec![CovariateVector::from_raw(vec![1.0]); 10];
        assert!(matches!(
            calibrate_intercept(&x, &[0.0], 10.0),
            Err(Error::TargetTooLarge { .. })
        ));
    }

    #[test]
    fn young_slope_overrepresents_young() {
        let mut spec = tiny_spec(20_000, 0.3);
        spec.selection.effects.insert("young:yes".into(), 1.5);
        let pop = generate_population(&spec, &mut replicate_rng(7, 0)).unwrap();
        let draw = draw_nonprobability_sample(&pop, &mut replicate_rng(7, 1));
        let young = SubgroupKey::new(Factor::Age, 2, 2).unwrap();
        let share = draw.sample.units.iter().filter(|u| u.groups.contains(young)).count() as f64
            / draw.sample.len() as f64;
        assert!(share > 0.45, "{share}");
        assert_eq!(draw.true_propensity.len(), draw.sample.len());
    }

    fn contaminate(p: Vec<f64>) -> (NonprobabilitySample, Contaminated) {
        let pop = generate_population(&tiny_spec(5000, 0.3), &mut replicate_rng(8, 0)).unwrap();
        let nps = draw_nonprobability_sample(&pop, &mut replicate_rng(8, 1)).sample;
        let spec = BogusSpec {
            factor: "young".into(),
            probabilities: p,
        };
        let out = inject_bogus_responses(nps.clone(), &spec, &mut replicate_rng(8, 2)).unwrap();
        (nps, out)
    }

    #[test]
    fn zero_bogus_probability_is_identity() {
        let (nps, out) = contaminate(vec![0.0, 0.0]);
        assert_eq!(nps.units, out.sample.units);
        assert!(out.bogus.iter().all(|b| !b));
    }

    #[test]
    fn certain_bogus_answers_yes_everywhere() {
        let (_, out) = contaminate(vec![1.0, 1.0]);
        assert!(out
            .sample
            .units
            .iter()
            .all(|u| u.responses.iter().all(|&r| r == Some(true))));
    }

    #[test]
    fn invalid_bogus_probability() {
        let pop = generate_population(&tiny_spec(100, 0.3), &mut replicate_rng(9, 0)).unwrap();
        let nps = draw_nonprobability_sample(&pop, &mut replicate_rng(9, 1)).sample;
        let spec = BogusSpec {
            factor: "young".into(),
            probabilities: vec![0.1, -0.2],
        };
        assert!(matches!(
            inject_bogus_responses(nps, &spec, &mut replicate_rng(9, 2)),
            Err(Error::InvalidProbability(_))
        ));
    }

    fn ps_with_weights(weights: Vec<f64>) -> ProbabilitySample {
        let pop = generate_population(&tiny_spec(1000, 0.3), &mut replicate_rng(10, 0)).unwrap();
        let units = pop.units[..weights.len()].to_vec();
        ProbabilitySample::new(pop.questions.clone(), pop.schema.clone(), units, weights)
    }

    #[test]
    fn full_size_subsample_is_identity() {
        let ps = ps_with_weights(vec![1.0, 2.0, 3.0, 2.5, 0.7]);
        let sub = weight_segment_subsample(&ps, 5, &mut replicate_rng(11, 0)).unwrap();
        assert_eq!(sub.units, ps.units);
        assert_eq!(sub.weights, ps.weights);
    }

    #[test]
    fn equal_weights_give_rescaled_srs() {
        let ps = ps_with_weights(vec![4.0; 40]);
        let sub = weight_segment_subsample(&ps, 10, &mut replicate_rng(12, 0)).unwrap();
        assert_eq!(sub.len(), 10);
        assert!(sub.weights.iter().all(|&d| d == 16.0));
    }

    #[test]
    fn two_equal_strata_split_evenly() {
        let mut w = vec![1.0; 10];
        w.extend(vec![3.0; 10]);
        let ps = ps_with_weights(w);
        let sub = weight_segment_subsample(&ps, 10, &mut replicate_rng(13, 0)).unwrap();
        let low = sub.weights.iter().filter(|&&d| d == 2.0).count();
        let high = sub.weights.iter().filter(|&&d| d == 6.0).count();
        assert_eq!((low, high), (5, 5));
    }

    #[test]
    fn subsample_larger_than_sample_is_rejected() {
        let ps = ps_with_weights(vec![1.0; 5]);
        assert!(matches!(
            weight_segment_subsample(&ps, 6, &mut replicate_rng(14, 0)),
            Err(Error::TargetTooLarge { .. })
        ));
    }

    #[test]
    fn incidence_counts_threshold() {
        let pop = generate_population(&tiny_spec(100, 0.3), &mut replicate_rng(15, 0)).unwrap();
        let mut units = pop.units[..4].to_vec();
        for (u, r) in units.iter_mut().zip([[true, true], [true, false], [false, false], [true, true]]) {
            u.responses = r.iter().map(|&b| Some(b)).collect();
        }
        let share = rare_combination_incidence(&units, &[0, 1], 2, SubgroupKey::OVERALL).unwrap();
        assert_eq!(share, 0.5);
    }
}
