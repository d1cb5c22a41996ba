//! Population configuration. Read from TOML; see `docs/population-config.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Schema, Variable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// Marginal level probabilities; factors are drawn independently.
    pub probabilities: Vec<f64>,
}

/// Which covariate factors define the age / race / education subgroups.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMap {
    pub age: Option<String>,
    pub race: Option<String>,
    pub education: Option<String>,
}

/// Logistic model for one binary question. `effects` is keyed
/// `"factor:level"` for non-reference levels; missing keys are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub name: String,
    pub intercept: f64,
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
}

/// Poisson selection into the nonprobability sample. The intercept is
/// calibrated so that the expected sample size equals `expected_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub expected_size: f64,
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
}

/// Stratified simple random sampling; one stratum per level of
/// `strata_factor` (a single stratum when absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub strata_factor: Option<String>,
    pub fractions: Vec<f64>,
}

/// Per-level probability that a nonprobability respondent answers Yes to
/// every question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BogusSpec {
    pub factor: String,
    pub probabilities: Vec<f64>,
}

/// A combination of rare "Yes" answers used to gauge bogus responding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RareCombinationSpec {
    pub questions: Vec<String>,
    pub min_yes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub population_size: usize,
    pub factors: Vec<FactorSpec>,
    #[serde(default)]
    pub subgroups: SubgroupMap,
    pub questions: Vec<QuestionSpec>,
    pub selection: SelectionSpec,
    pub design: DesignSpec,
    pub bogus: Option<BogusSpec>,
    pub rare_combination: Option<RareCombinationSpec>,
}

fn effects(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn factor(name: &str, levels: &[&str], probabilities: &[f64]) -> FactorSpec {
    FactorSpec {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
        probabilities: probabilities.to_vec(),
    }
}

fn question(name: &str, intercept: f64, fx: &[(&str, f64)]) -> QuestionSpec {
    QuestionSpec {
        name: name.into(),
        intercept,
        effects: effects(fx),
    }
}

impl Default for PopulationSpec {
    /// Desk-scale population: 50,000 adults, five demographic factors, twelve
    /// benchmark-style binary questions, n_B ≈ n_A ≈ 2,500.
    fn default() -> Self {
        const MID: &str = "age:30-64";
        const OLD: &str = "age:65+";
        PopulationSpec {
            population_size: 50_000,
            factors: vec![
                factor("age", &["18-29", "30-64", "65+"], &[0.21, 0.57, 0.22]),
                factor("race", &["white", "black", "hispanic"], &[0.64, 0.13, 0.23]),
                factor(
                    "education",
                    &["hs_or_less", "some_college", "college_grad"],
                    &[0.38, 0.31, 0.31],
                ),
                factor("gender", &["male", "female"], &[0.49, 0.51]),
                factor(
                    "region",
                    &["northeast", "midwest", "south", "west"],
                    &[0.17, 0.21, 0.38, 0.24],
                ),
            ],
            subgroups: SubgroupMap {
                age: Some("age".into()),
                race: Some("race".into()),
                education: Some("education".into()),
            },
            questions: vec![
                question(
                    "insurance",
                    1.5,
                    &[(MID, 0.5), (OLD, 2.5), ("education:college_grad", 0.8), ("race:hispanic", -0.9)],
                ),
                question("blood_pressure", -2.45, &[(MID, 1.6), (OLD, 2.9), ("race:black", 0.5)]),
                question("parent", -1.4, &[(MID, 0.9), (OLD, -3.0), ("gender:female", 0.2)]),
                question("food_allergy", -2.3, &[("gender:female", 0.4)]),
                question(
                    "job_last_year",
                    0.95,
                    &[(MID, 0.4), (OLD, -2.3), ("education:college_grad", 0.6)],
                ),
                question(
                    "retirement_account",
                    -0.85,
                    &[
                        (MID, 0.9),
                        (OLD, 0.9),
                        ("education:some_college", 0.5),
                        ("education:college_grad", 1.2),
                        ("race:hispanic", -0.5),
                    ],
                ),
                question("unemployment_comp", -1.9, &[(MID, -0.3), (OLD, -2.0)]),
                question("workers_comp", -5.1, &[(MID, 0.2), (OLD, -0.7)]),
                question(
                    "food_stamps",
                    -1.75,
                    &[
                        (MID, -0.2),
                        (OLD, -0.6),
                        ("race:black", 0.8),
                        ("race:hispanic", 0.5),
                        ("education:college_grad", -1.3),
                    ],
                ),
                question("social_security", -3.5, &[(MID, 1.0), (OLD, 5.0)]),
                question("union_member", -3.2, &[(MID, 0.5), (OLD, -0.2)]),
                question("citizen", 2.2, &[("race:hispanic", -1.6), (OLD, 0.8)]),
            ],
            selection: SelectionSpec {
                expected_size: 2_500.0,
                effects: effects(&[
                    ("age:30-64", -0.4),
                    ("age:65+", -0.9),
                    ("education:college_grad", 0.4),
                    ("race:hispanic", 0.2),
                    ("gender:female", 0.1),
                    ("region:west", 0.2),
                ]),
            },
            design: DesignSpec {
                strata_factor: Some("education".into()),
                fractions: vec![0.04, 0.045, 0.065],
            },
            bogus: Some(BogusSpec {
                factor: "age".into(),
                probabilities: vec![0.08, 0.02, 0.005],
            }),
            rare_combination: Some(RareCombinationSpec {
                questions: vec![
                    "unemployment_comp".into(),
                    "workers_comp".into(),
                    "food_stamps".into(),
                    "social_security".into(),
                ],
                min_yes: 3,
            }),
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(())
}

impl PopulationSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: PopulationSpec =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("population spec serializes")
    }

    pub fn without_bogus(mut self) -> Self {
        self.bogus = None;
        self
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.factors
                .iter()
                .map(|f| Variable {
                    name: f.name.clone(),
                    levels: f.levels.clone(),
                })
                .collect(),
        )
    }

    pub(crate) fn factor_index(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown factor {name:?}")))
    }

    /// Slope vector (intercept slot zeroed) aligned with the schema dummies.
    pub(crate) fn coefficients(&self, intercept: f64, fx: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let schema = self.schema()?;
        let columns: Vec<String> = schema
            .dummy_columns()
            .into_iter()
            .map(|(v, l)| format!("{v}:{l}"))
            .collect();
        let mut beta = vec![0.0; columns.len() + 1];
        beta[0] = intercept;
        for (key, &value) in fx {
            let pos = columns.iter().position(|c| c == key).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "effect {key:?} does not name a non-reference factor level"
                ))
            })?;
            beta[pos + 1] = value;
        }
        Ok(beta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::InvalidConfig("population_size must be positive".into()));
        }
        self.schema()?;
        for f in &self.factors {
            if f.probabilities.len() != f.levels.len() {
                return Err(Error::InvalidConfig(format!(
                    "factor {:?}: {} probabilities for {} levels",
                    f.name,
                    f.probabilities.len(),
                    f.levels.len()
                )));
            }
            for &p in &f.probabilities {
                check_probability(p)?;
            }
            let total: f64 = f.probabilities.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "factor {:?} probabilities sum to {total}",
                    f.name
                )));
            }
        }
        for name in [&self.subgroups.age, &self.subgroups.race, &self.subgroups.education]
            .into_iter()
            .flatten()
        {
            self.factor_index(name)?;
        }
        if self.questions.is_empty() {
            return Err(Error::InvalidConfig("no questions declared".into()));
        }
        for q in &self.questions {
            self.coefficients(q.intercept, &q.effects)?;
        }
        self.coefficients(0.0, &self.selection.effects)?;
        let n = self.population_size as f64;
        if !(self.selection.expected_size > 0.0 && self.selection.expected_size < n) {
            return Err(Error::InvalidConfig(format!(
                "expected nonprobability size {} must lie in (0, {n})",
                self.selection.expected_size
            )));
        }
        let strata = match &self.design.strata_factor {
            Some(name) => self.factors[self.factor_index(name)?].levels.len(),
            None => 1,
        };
        if self.design.fractions.len() != strata {
            return Err(Error::InvalidConfig(format!(
                "{} sampling fractions for {strata} strata",
                self.design.fractions.len()
            )));
        }
        if let Some(f) = self.design.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::InvalidConfig(format!("sampling fraction {f} outside (0, 1]")));
        }
        if let Some(b) = &self.bogus {
            let levels = self.factors[self.factor_index(&b.factor)?].levels.len();
            if b.probabilities.len() != levels {
                return Err(Error::InvalidConfig(format!(
                    "{} bogus probabilities for {levels} levels",
                    b.probabilities.len()
                )));
            }
            for &p in &b.probabilities {
                check_probability(p)?;
            }
        }
        if let Some(r) = &self.rare_combination {
            for q in &r.questions {
                self.question_index(q)?;
            }
            if r.min_yes == 0 || r.min_yes > r.questions.len() {
                return Err(Error::InvalidConfig(format!(
                    "rare combination threshold {} outside 1..={}",
                    r.min_yes,
                    r.questions.len()
                )));
            }
        }
        Ok(())
    }

    pub fn question_index(&self, name: &str) -> Result<usize> {
        self.questions
            .iter()
            .position(|q| q.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown question {name:?}")))
    }
}
