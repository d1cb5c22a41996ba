//! Simulation-based oracles for the sampling designs and the Monte Carlo
//! harness.

use survey_integrate::composite::{ev_composite, CompositeInputs};
use survey_integrate::estimators::{design_weighted_mean, ResponseColumn};
use survey_integrate::parallel::{replicate_rng, CompensatedSum};
use survey_integrate::simulator::{
    draw_nonprobability_sample, draw_probability_sample, generate_population,
    inject_bogus_responses, BogusSpec, Population, PopulationSpec,
};

const SMALL_SPEC: &str = r#"
population_size = 20000

[[factors]]
name = "age"
levels = ["young", "middle", "old"]
probabilities = [0.3, 0.5, 0.2]

[[factors]]
name = "gender"
levels = ["male", "female"]
probabilities = [0.5, 0.5]

[subgroups]
age = "age"

[[questions]]
name = "q1"
intercept = -0.5
effects = { "age:middle" = 0.6, "age:old" = 1.2 }

[[questions]]
name = "q2"
intercept = -1.5
effects = { "gender:female" = 0.8 }

[selection]
expected_size = 1000.0
effects = { "age:middle" = -0.5, "age:old" = -1.0 }

[design]
strata_factor = "gender"
fractions = [0.2, 0.05]
"#;

fn small_population(seed: u64) -> Population {
    let spec = PopulationSpec::from_toml_str(SMALL_SPEC).unwrap();
    generate_population(&spec, &mut replicate_rng(seed, 0)).unwrap()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn two_strata_weights_sum_to_population_in_expectation() {
    let pop = small_population(1);
    let mut rng = replicate_rng(1, 1);
    let totals: Vec<f64> = (0..500)
        .map(|_| draw_probability_sample(&pop, &mut rng).unwrap().weights.iter().sum())
        .collect();
    let (mean, se) = mean_and_se(&totals);
    // Σd is exactly N when every stratum take is exact; allow for rounding.
    assert!((mean - pop.len() as f64).abs() <= 3.0 * se + 1e-6, "{mean} vs {}", pop.len());
}

#[test]
fn inclusion_rate_per_cell_matches_propensity() {
    let pop = small_population(2);
    let reps = 200;
    let mut included = vec![0usize; pop.len()];
    let mut rng = replicate_rng(2, 1);
    for _ in 0..reps {
        for i in draw_nonprobability_sample(&pop, &mut rng).population_index {
            included[i] += 1;
        }
    }
    // Selection depends on age only, so propensity is constant per age level.
    for level in 0..3 {
        let members: Vec<usize> = (0..pop.len()).filter(|&i| pop.levels[i][0] == level).collect();
        let pi = pop.selection_propensity[members[0]];
        assert!(members.iter().all(|&i| pop.selection_propensity[i] == pi));
        let trials = (reps * members.len()) as f64;
        let rate = members.iter().map(|&i| included[i]).sum::<usize>() as f64 / trials;
        let se = (pi * (1.0 - pi) / trials).sqrt();
        assert!((rate - pi).abs() <= 3.0 * se, "level {level}: {rate} vs {pi}");
    }
}

#[test]
fn bogus_share_matches_probability() {
    let pop = small_population(3);
    let spec = BogusSpec {
        factor: "age".into(),
        probabilities: vec![0.08, 0.0, 0.0],
    };
    let mut rng = replicate_rng(3, 1);
    let (mut flagged, mut young) = (0usize, 0usize);
    for _ in 0..20 {
        let draw = draw_nonprobability_sample(&pop, &mut rng);
        let ages: Vec<usize> = draw.population_index.iter().map(|&i| pop.levels[i][0]).collect();
        let c = inject_bogus_responses(draw.sample, &spec, &mut rng).unwrap();
        for (age, bogus) in ages.iter().zip(&c.bogus) {
            if *age == 0 {
                young += 1;
                flagged += usize::from(*bogus);
            } else {
                assert!(!bogus);
            }
        }
    }
    let share = flagged as f64 / young as f64;
    let se = (0.08 * 0.92 / young as f64).sqrt();
    assert!((share - 0.08).abs() <= 3.0 * se, "{share}");
}

#[test]
fn design_weighted_mean_is_unbiased_for_every_question() {
    let pop = PopulationSpec::default();
    let pop = generate_population(&pop, &mut replicate_rng(4, 0)).unwrap();
    let m = pop.questions.len();
    let truth: Vec<f64> = (0..m)
        .map(|q| {
            let mut s = CompensatedSum::default();
            for u in &pop.units {
                s.add(f64::from(u8::from(u.responses[q] == Some(true))));
            }
            s.value() / pop.len() as f64
        })
        .collect();
    let mut rng = replicate_rng(4, 1);
    let mut est = vec![Vec::with_capacity(2000); m];
    for _ in 0..2000 {
        let ps = draw_probability_sample(&pop, &mut rng).unwrap();
        for (q, e) in est.iter_mut().enumerate() {
            e.push(design_weighted_mean(&ResponseColumn::from_sample(&ps, q), &ps).unwrap().value);
        }
    }
    for q in 0..m {
        let (mean, se) = mean_and_se(&est[q]);
        assert!(
            (mean - truth[q]).abs() <= 3.0 * se,
            "{}: {mean} vs {} (se {se})",
            pop.questions[q],
            truth[q]
        );
    }
}

#[test]
fn ev_bias_matches_formula_with_known_eps() {
    // y1 from one probability sample, y2 from an independent one shifted by a
    // known ε; v1 and v2 are the empirical variances of the two estimators.
    let pop = small_population(5);
    let eps = 0.03;
    let reps = 3000;
    let mut rng = replicate_rng(5, 1);
    let mut pairs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let a = draw_probability_sample(&pop, &mut rng).unwrap();
        let b = draw_probability_sample(&pop, &mut rng).unwrap();
        let y1 = design_weighted_mean(&ResponseColumn::from_sample(&a, 0), &a).unwrap().value;
        let y2 = design_weighted_mean(&ResponseColumn::from_sample(&b, 0), &b).unwrap().value + eps;
        pairs.push((y1, y2));
    }
    let truth = pop.units.iter().filter(|u| u.responses[0] == Some(true)).count() as f64
        / pop.len() as f64;
    let y1s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y2s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let var = |v: &[f64]| mean_and_se(v).1.powi(2) * v.len() as f64;
    let (v1, v2) = (var(&y1s), var(&y2s));
    let errors: Vec<f64> = pairs
        .iter()
        .map(|&(y1, y2)| {
            ev_composite(&CompositeInputs::new(y1, y2, v1, v2, eps).unwrap()).unwrap().value - truth
        })
        .collect();
    let (bias, se) = mean_and_se(&errors);
    let expected = eps * v1 / (eps * eps + v1 + v2);
    assert!((bias - expected).abs() <= 3.0 * se, "{bias} vs {expected} (se {se})");
}
