//! Domain types shared by every stage: covariate schema and encoding, sample
//! containers, mean estimates and the question-by-subgroup tables used for
//! bias estimation and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A categorical auxiliary variable and its declared levels. The first level is
/// the reference level and encodes to all-zero dummies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub levels: Vec<String>,
}

/// Ordered list of categorical variables defining the dummy layout of every
/// [`CovariateVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    variables: Vec<Variable>,
}

impl Schema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for v in &variables {
            if v.levels.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "variable {:?} declares no levels",
                    v.name
                )));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "variable {:?} declared twice",
                    v.name
                )));
            }
            let distinct: BTreeSet<_> = v.levels.iter().collect();
            if distinct.len() != v.levels.len() {
                return Err(Error::InvalidConfig(format!(
                    "variable {:?} has duplicate levels",
                    v.name
                )));
            }
        }
        Ok(Schema { variables })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// `(variable, level)` for every dummy column, in encoding order.
    pub fn dummy_columns(&self) -> Vec<(String, String)> {
        self.variables
            .iter()
            .flat_map(|v| {
                v.levels[1..]
                    .iter()
                    .map(move |l| (v.name.clone(), l.clone()))
            })
            .collect()
    }

    /// Length of an encoded vector, intercept included.
    pub fn dimension(&self) -> usize {
        1 + self
            .variables
            .iter()
            .map(|v| v.levels.len() - 1)
            .sum::<usize>()
    }

    /// Encodes level indices (one per variable, zero-based) into a covariate
    /// vector with a leading intercept.
    pub fn encode_levels(&self, levels: &[usize]) -> Result<CovariateVector> {
        if levels.len() != self.variables.len() {
            return Err(Error::DimensionMismatch {
                expected: self.variables.len(),
                found: levels.len(),
            });
        }
        let mut values = Vec::with_capacity(self.dimension());
        values.push(1.0);
        for (v, &level) in self.variables.iter().zip(levels) {
            if level >= v.levels.len() {
                return Err(Error::UnknownLevel {
                    variable: v.name.clone(),
                    level: level.to_string(),
                    row: 0,
                });
            }
            values.extend((1..v.levels.len()).map(|l| if l == level { 1.0 } else { 0.0 }));
        }
        Ok(CovariateVector(values))
    }

    /// Inverse of [`Schema::encode_levels`].
    pub fn decode(&self, x: &CovariateVector) -> Result<Vec<usize>> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                found: x.len(),
            });
        }
        let mut offset = 1;
        let mut out = Vec::with_capacity(self.variables.len());
        for v in &self.variables {
            let block = &x.0[offset..offset + v.levels.len() - 1];
            let hot: Vec<usize> = block
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1.0)
                .map(|(i, _)| i + 1)
                .collect();
            match hot.as_slice() {
                [] => out.push(0),
                [l] => out.push(*l),
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "variable {:?} has more than one active dummy",
                        v.name
                    )))
                }
            }
            offset += v.levels.len() - 1;
        }
        Ok(out)
    }
}

/// Encoded covariates: intercept `1.0` followed by reference-coded dummies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector(Vec<f64>);

impl CovariateVector {
    /// Wraps raw values without checking the intercept/dummy invariants; use
    /// [`Schema::encode_levels`] to build checked vectors.
    pub fn from_raw(values: Vec<f64>) -> Self {
        CovariateVector(values)
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

    pub fn dot(&self, coefficients: &[f64]) -> f64 {
        self.0.iter().zip(coefficients).map(|(a, b)| a * b).sum()
    }
}

/// A raw categorical record keyed by variable name.
pub type RawRecord = BTreeMap<String, String>;

/// Encodes raw categorical records against `schema`, preserving input order.
pub fn encode_covariates(rows: &[RawRecord], schema: &Schema) -> Result<Vec<CovariateVector>> {
    rows.iter()
        .enumerate()
        .map(|(row, record)| {
            let levels = schema
                .variables
                .iter()
                .map(|v| {
                    let raw = record.get(&v.name).ok_or_else(|| Error::MissingVariable {
                        variable: v.name.clone(),
                        row,
                    })?;
                    v.levels
                        .iter()
                        .position(|l| l == raw)
                        .ok_or_else(|| Error::UnknownLevel {
                            variable: v.name.clone(),
                            level: raw.clone(),
                            row,
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            schema.encode_levels(&levels)
        })
        .collect()
}

/// Demographic factors used to define evaluation subgroups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Age,
    Race,
    Education,
    Overall,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Age, Factor::Race, Factor::Education, Factor::Overall];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Age => "age",
            Factor::Race => "race",
            Factor::Education => "education",
            Factor::Overall => "overall",
        }
    }

    pub fn parse(s: &str) -> Option<Factor> {
        Factor::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subgroup: factor plus one-based level index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub factor: Factor,
    pub level: u32,
}

impl SubgroupKey {
    pub const OVERALL: SubgroupKey = SubgroupKey {
        factor: Factor::Overall,
        level: 1,
    };

    pub fn new(factor: Factor, level: u32, k: u32) -> Result<Self> {
        if level == 0 || level > k || (factor == Factor::Overall && level != 1) {
            return Err(Error::InvalidConfig(format!(
                "subgroup level {level} outside 1..={k} for factor {factor}"
            )));
        }
        Ok(SubgroupKey { factor, level })
    }
}

/// Per-unit subgroup memberships (one-based levels).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupLabels {
    pub age: Option<u32>,
    pub race: Option<u32>,
    pub education: Option<u32>,
}

impl SubgroupLabels {
    pub fn level(&self, factor: Factor) -> Option<u32> {
        match factor {
            Factor::Age => self.age,
            Factor::Race => self.race,
            Factor::Education => self.education,
            Factor::Overall => Some(1),
        }
    }

    pub fn contains(&self, key: SubgroupKey) -> bool {
        self.level(key.factor) == Some(key.level)
    }
}

/// One respondent: binary answers (`None` = refusal), covariates, subgroups.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub id: String,
    pub responses: Vec<Option<bool>>,
    pub x: CovariateVector,
    pub groups: SubgroupLabels,
}

/// Common read access to both sample containers.
pub trait SurveySample: Clone + Send + Sync {
    fn units(&self) -> &[Unit];
    fn questions(&self) -> &[String];
    fn schema(&self) -> &Arc<Schema>;
    /// Sub-sample made of the given unit indices (repeats allowed).
    fn select(&self, indices: &[usize]) -> Self;

    fn len(&self) -> usize {
        self.units().len()
    }

    fn is_empty(&self) -> bool {
        self.units().is_empty()
    }
}

/// Probability sample `S_B` with known design weights.
#[derive(Clone, Debug)]
pub struct ProbabilitySample {
    pub questions: Vec<String>,
    pub schema: Arc<Schema>,
    pub units: Vec<Unit>,
    pub weights: Vec<f64>,
}

impl ProbabilitySample {
    pub fn new(
        questions: Vec<String>,
        schema: Arc<Schema>,
        units: Vec<Unit>,
        weights: Vec<f64>,
    ) -> Self {
        ProbabilitySample {
            questions,
            schema,
            units,
            weights,
        }
    }

    /// Estimated population size `Σ d_i`.
    pub fn population_size(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn design_matrix(&self) -> Vec<&CovariateVector> {
        self.units.iter().map(|u| &u.x).collect()
    }
}

impl SurveySample for ProbabilitySample {
    fn units(&self) -> &[Unit] {
        &self.units
    }

    fn questions(&self) -> &[String] {
        &self.questions
    }

    fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    fn select(&self, indices: &[usize]) -> Self {
        ProbabilitySample {
            questions: self.questions.clone(),
            schema: Arc::clone(&self.schema),
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

/// Nonprobability sample `S_A`: membership alone marks `R_i = 1`.
#[derive(Clone, Debug)]
pub struct NonprobabilitySample {
    pub questions: Vec<String>,
    pub schema: Arc<Schema>,
    pub units: Vec<Unit>,
}

impl NonprobabilitySample {
    pub fn new(questions: Vec<String>, schema: Arc<Schema>, units: Vec<Unit>) -> Self {
        NonprobabilitySample {
            questions,
            schema,
            units,
        }
    }
}

impl SurveySample for NonprobabilitySample {
    fn units(&self) -> &[Unit] {
        &self.units
    }

    fn questions(&self) -> &[String] {
        &self.questions
    }

    fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    fn select(&self, indices: &[usize]) -> Self {
        NonprobabilitySample {
            questions: self.questions.clone(),
            schema: Arc::clone(&self.schema),
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub row: Option<usize>,
    pub message: String,
}

/// Container invariant violations; empty iff the sample is well formed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, row: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            row,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            match v.row {
                Some(r) => writeln!(f, "row {r}: {}", v.message)?,
                None => writeln!(f, "{}", v.message)?,
            }
        }
        Ok(())
    }
}

fn validate_units<S: SurveySample>(sample: &S, report: &mut ValidationReport) {
    let dim = sample.schema().dimension();
    let m = sample.questions().len();
    for (row, unit) in sample.units().iter().enumerate() {
        let x = unit.x.as_slice();
        if x.len() != dim {
            report.push(
                Some(row),
                format!("covariate length {} != expected {dim}", x.len()),
            );
            continue;
        }
        if x[0] != 1.0 {
            report.push(Some(row), "intercept entry is not 1.0");
        }
        if x[1..].iter().any(|&v| v != 0.0 && v != 1.0) {
            report.push(Some(row), "dummy entry outside {0, 1}");
        }
        if unit.responses.len() != m {
            report.push(
                Some(row),
                format!("{} responses for {m} questions", unit.responses.len()),
            );
        }
    }
}

/// Checks every container invariant and lists the violations.
pub fn validate_probability_sample(sample: &ProbabilitySample) -> ValidationReport {
    let mut report = ValidationReport::default();
    if sample.weights.len() != sample.units.len() {
        report.push(
            None,
            format!(
                "{} weights for {} units",
                sample.weights.len(),
                sample.units.len()
            ),
        );
    }
    for (row, &d) in sample.weights.iter().enumerate() {
        if !(d > 0.0 && d.is_finite()) {
            report.push(Some(row), format!("nonpositive or non-finite weight {d}"));
        }
    }
    let total = sample.population_size();
    if !(total > 0.0 && total.is_finite()) {
        report.push(None, format!("estimated population size {total} is not finite and positive"));
    }
    validate_units(sample, &mut report);
    report
}

pub fn validate_nonprobability_sample(sample: &NonprobabilitySample) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_units(sample, &mut report);
    report
}

/// Provenance of a mean estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ps,
    Clw,
    BcClw,
    Cal,
    Ev,
    Comb,
    MClw,
    MComb,
    MEv,
}

impl Source {
    pub const ALL: [Source; 9] = [
        Source::Ps,
        Source::Clw,
        Source::BcClw,
        Source::Cal,
        Source::Ev,
        Source::Comb,
        Source::MClw,
        Source::MComb,
        Source::MEv,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Source::Ps => "ps",
            Source::Clw => "clw",
            Source::BcClw => "bc_clw",
            Source::Cal => "cal",
            Source::Ev => "ev",
            Source::Comb => "comb",
            Source::MClw => "m_clw",
            Source::MComb => "m_comb",
            Source::MEv => "m_ev",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        Source::ALL.into_iter().find(|t| t.tag() == s)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A point estimate of a proportion with its variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub value: f64,
    pub variance: f64,
    pub source: Source,
    /// Set when a bias-corrected value falls outside `[0, 1]`; never clipped.
    pub out_of_range: bool,
}

impl MeanEstimate {
    pub fn new(value: f64, variance: f64, source: Source) -> Self {
        MeanEstimate {
            value,
            variance,
            source,
            out_of_range: !(0.0..=1.0).contains(&value),
        }
    }

    pub fn with_variance(self, variance: f64) -> Self {
        MeanEstimate { variance, ..self }
    }
}

/// Address of one (question, subgroup) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub question: usize,
    pub group: SubgroupKey,
}

impl CellKey {
    pub fn new(question: usize, group: SubgroupKey) -> Self {
        CellKey { question, group }
    }
}

/// Checks that `cells` forms a complete question × subgroup grid and returns
/// `(m, k)`.
pub(crate) fn grid_shape<V>(cells: &BTreeMap<CellKey, V>) -> Result<(usize, usize)> {
    let questions: BTreeSet<usize> = cells.keys().map(|c| c.question).collect();
    let groups: BTreeSet<SubgroupKey> = cells.keys().map(|c| c.group).collect();
    if cells.len() != questions.len() * groups.len() {
        for &q in &questions {
            for &g in &groups {
                if !cells.contains_key(&CellKey::new(q, g)) {
                    return Err(Error::GridMismatch(format!(
                        "missing cell (question {q}, {} level {})",
                        g.factor, g.level
                    )));
                }
            }
        }
    }
    Ok((questions.len(), groups.len()))
}

/// Trusted population values `Ȳ_jc`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkTable {
    pub questions: Vec<String>,
    cells: BTreeMap<CellKey, f64>,
    m: usize,
    k: usize,
}

impl BenchmarkTable {
    pub fn new(questions: Vec<String>, cells: BTreeMap<CellKey, f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::GridMismatch("benchmark table is empty".into()));
        }
        if let Some((key, v)) = cells.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "benchmark value {v} outside [0, 1] at question {}",
                key.question
            )));
        }
        let (m, k) = grid_shape(&cells)?;
        Ok(BenchmarkTable {
            questions,
            cells,
            m,
            k,
        })
    }

    pub fn cells(&self) -> &BTreeMap<CellKey, f64> {
        &self.cells
    }

    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.cells.get(key).copied()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The benchmark on `keys` only; every key must be present.
    pub fn restricted_to<'a>(&self, keys: impl IntoIterator<Item = &'a CellKey>) -> Result<Self> {
        let cells = keys
            .into_iter()
            .map(|key| {
                self.get(key).map(|v| (*key, v)).ok_or_else(|| {
                    Error::GridMismatch(format!(
                        "no benchmark value for question {}, {} level {}",
                        key.question, key.group.factor, key.group.level
                    ))
                })
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        BenchmarkTable::new(self.questions.clone(), cells)
    }
}

/// Survey estimates `Ȳ̂_jc`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateTable {
    pub questions: Vec<String>,
    pub cells: BTreeMap<CellKey, MeanEstimate>,
}

impl EstimateTable {
    pub fn new(questions: Vec<String>) -> Self {
        EstimateTable {
            questions,
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: CellKey, estimate: MeanEstimate) {
        self.cells.insert(key, estimate);
    }

    pub fn get(&self, key: &CellKey) -> Option<&MeanEstimate> {
        self.cells.get(key)
    }

    pub fn shape(&self) -> Result<(usize, usize)> {
        grid_shape(&self.cells)
    }

    /// Applies `f` cell by cell.
    pub fn map(&self, mut f: impl FnMut(&CellKey, &MeanEstimate) -> MeanEstimate) -> Self {
        EstimateTable {
            questions: self.questions.clone(),
            cells: self.cells.iter().map(|(k, v)| (*k, f(k, v))).collect(),
        }
    }
}

/// Fails unless both key sets are identical.
pub(crate) fn same_grid<A, B>(
    left: &BTreeMap<CellKey, A>,
    right: &BTreeMap<CellKey, B>,
) -> Result<()> {
    if left.len() != right.len() || left.keys().zip(right.keys()).any(|(a, b)| a != b) {
        let missing = left
            .keys()
            .find(|k| !right.contains_key(k))
            .or_else(|| right.keys().find(|k| !left.contains_key(k)));
        return Err(Error::GridMismatch(match missing {
            Some(k) => format!(
                "cell (question {}, {} level {}) present on one side only",
                k.question, k.group.factor, k.group.level
            ),
            None => "tables differ in size".into(),
        }));
    }
    Ok(())
}
