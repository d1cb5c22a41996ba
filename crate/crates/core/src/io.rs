//! Delimited-text ingestion and tidy table output.
//!
//! Survey files are comma-separated with a header row. Covariate and
//! question columns are declared by a [`SurveyLayout`]; question cells hold
//! `1`, `0` or empty (refusal). A weight column marks a probability sample.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::benchmark::{AbsDiffTable, BiasMatrix, MaeReport};
use crate::error::{Error, Result};
use crate::propensity::PropensityFit;
use crate::simulator::{McSummary, PopulationSpec, SubgroupMap, SweepRow};
use crate::types::{
    encode_covariates, validate_nonprobability_sample, validate_probability_sample,
    BenchmarkTable, CellKey, EstimateTable, Factor, MeanEstimate, NonprobabilitySample,
    ProbabilitySample, RawRecord, Schema, Source, SubgroupKey, SubgroupLabels, SurveySample, Unit,
    ValidationReport, Variable,
};

fn default_id() -> String {
    "id".into()
}

fn default_weight() -> String {
    "weight".into()
}

/// Column roles shared by every survey file of one analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyLayout {
    #[serde(default = "default_id")]
    pub id_column: String,
    #[serde(default = "default_weight")]
    pub weight_column: String,
    pub covariates: Vec<Variable>,
    pub questions: Vec<String>,
    #[serde(default)]
    pub subgroups: SubgroupMap,
}

impl SurveyLayout {
    pub fn from_spec(spec: &PopulationSpec) -> Self {
        SurveyLayout {
            id_column: default_id(),
            weight_column: default_weight(),
            covariates: spec
                .factors
                .iter()
                .map(|f| Variable {
                    name: f.name.clone(),
                    levels: f.levels.clone(),
                })
                .collect(),
            questions: spec.questions.iter().map(|q| q.name.clone()).collect(),
            subgroups: spec.subgroups.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(self.covariates.clone())
    }

    fn mapped(&self, factor: Factor) -> Option<&str> {
        match factor {
            Factor::Age => self.subgroups.age.as_deref(),
            Factor::Race => self.subgroups.race.as_deref(),
            Factor::Education => self.subgroups.education.as_deref(),
            Factor::Overall => None,
        }
    }

    fn variable(&self, name: &str) -> Result<&Variable> {
        self.covariates
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("subgroup variable {name:?} is not a covariate")))
    }

    /// Subgroup keys for every level of `factor`.
    pub fn subgroups(&self, factor: Factor) -> Result<Vec<SubgroupKey>> {
        if factor == Factor::Overall {
            return Ok(vec![SubgroupKey::OVERALL]);
        }
        let name = self
            .mapped(factor)
            .ok_or_else(|| Error::InvalidConfig(format!("no covariate mapped to {factor}")))?;
        let k = self.variable(name)?.levels.len() as u32;
        (1..=k).map(|l| SubgroupKey::new(factor, l, k)).collect()
    }

    /// Parses a subgroup level given as a one-based index or a level label.
    pub fn subgroup_key(&self, factor: Factor, level: &str) -> Result<SubgroupKey> {
        if factor == Factor::Overall {
            return Ok(SubgroupKey::OVERALL);
        }
        let name = self
            .mapped(factor)
            .ok_or_else(|| Error::InvalidConfig(format!("no covariate mapped to {factor}")))?;
        let var = self.variable(name)?;
        let k = var.levels.len() as u32;
        let index = match level.parse::<u32>() {
            Ok(i) => i,
            Err(_) => var
                .levels
                .iter()
                .position(|l| l == level)
                .map(|p| p as u32 + 1)
                .ok_or_else(|| Error::UnknownLevel {
                    variable: name.to_string(),
                    level: level.to_string(),
                    row: 0,
                })?,
        };
        SubgroupKey::new(factor, index, k)
    }

    fn labels(&self, levels: &[usize]) -> SubgroupLabels {
        let level = |factor| {
            self.mapped(factor).and_then(|name| {
                self.covariates
                    .iter()
                    .position(|v| v.name == name)
                    .map(|i| levels[i] as u32 + 1)
            })
        };
        SubgroupLabels {
            age: level(Factor::Age),
            race: level(Factor::Race),
            education: level(Factor::Education),
        }
    }
}

/// Either sample container, chosen by the presence of a weight column.
#[derive(Clone, Debug)]
pub enum Survey {
    Probability(ProbabilitySample),
    Nonprobability(NonprobabilitySample),
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub survey: Survey,
    pub report: ValidationReport,
}

impl Ingested {
    pub fn into_probability(self, path: &Path) -> Result<ProbabilitySample> {
        match self.survey {
            Survey::Probability(s) => Ok(s),
            Survey::Nonprobability(_) => Err(Error::parse(path, "expected a weight column")),
        }
    }

    /// A probability sample read as a nonprobability one drops its weights.
    pub fn into_nonprobability(self) -> NonprobabilitySample {
        match self.survey {
            Survey::Nonprobability(s) => s,
            Survey::Probability(s) => NonprobabilitySample::new(s.questions, s.schema, s.units),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, format!("missing required column {name:?}")))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse_f64(raw: &str, what: &str, row: usize, path: &Path) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, format!("row {row}: malformed {what} {raw:?}")))
}

/// Reads one survey file. Rows are numbered from 1 after the header.
pub fn ingest_survey(path: &Path, layout: &SurveyLayout) -> Result<Ingested> {
    let schema = Arc::new(layout.schema()?);
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &layout.id_column, path)?;
    let weight_col = headers.iter().position(|h| h == layout.weight_column);
    let cov_cols = layout
        .covariates
        .iter()
        .map(|v| column(&headers, &v.name, path))
        .collect::<Result<Vec<_>>>()?;
    let q_cols = layout
        .questions
        .iter()
        .map(|q| column(&headers, q, path))
        .collect::<Result<Vec<_>>>()?;

    let mut raw = Vec::new();
    let mut ids = Vec::new();
    let mut responses = Vec::new();
    let mut weights = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        ids.push(record[id_col].to_string());
        raw.push(
            layout
                .covariates
                .iter()
                .zip(&cov_cols)
                .map(|(v, &c)| (v.name.clone(), record[c].to_string()))
                .collect::<RawRecord>(),
        );
        responses.push(
            layout
                .questions
                .iter()
                .zip(&q_cols)
                .map(|(q, &c)| match record[c].trim() {
                    "1" => Ok(Some(true)),
                    "0" => Ok(Some(false)),
                    "" => Ok(None),
                    other => Err(Error::parse(
                        path,
                        format!("row {row}: question {q:?} has value {other:?}, expected 1, 0 or empty"),
                    )),
                })
                .collect::<Result<Vec<_>>>()?,
        );
        if let Some(c) = weight_col {
            let w = parse_f64(&record[c], "weight", row, path)?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::parse(
                    path,
                    format!("row {row}: weight {w} must be positive"),
                ));
            }
            weights.push(w);
        }
    }
    let xs = encode_covariates(&raw, &schema).map_err(|e| match e {
        Error::UnknownLevel {
            variable,
            level,
            row,
        } => Error::parse(
            path,
            format!("row {}: unknown level {level:?} for {variable:?}", row + 1),
        ),
        other => other,
    })?;
    let units: Vec<Unit> = ids
        .into_iter()
        .zip(responses)
        .zip(xs)
        .map(|((id, responses), x)| {
            let levels = schema.decode(&x)?;
            Ok(Unit {
                id,
                responses,
                groups: layout.labels(&levels),
                x,
            })
        })
        .collect::<Result<_>>()?;
    let questions = layout.questions.clone();
    Ok(if weight_col.is_some() {
        let s = ProbabilitySample::new(questions, schema, units, weights);
        Ingested {
            report: validate_probability_sample(&s),
            survey: Survey::Probability(s),
        }
    } else {
        let s = NonprobabilitySample::new(questions, schema, units);
        Ingested {
            report: validate_nonprobability_sample(&s),
            survey: Survey::Nonprobability(s),
        }
    })
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a sample in the layout read by [`ingest_survey`]; `weights` adds
/// the weight column.
pub fn write_survey<S: SurveySample>(
    path: &Path,
    sample: &S,
    weights: Option<&[f64]>,
    layout: &SurveyLayout,
) -> Result<()> {
    let schema = sample.schema();
    let mut w = writer(path)?;
    let mut header = vec![layout.id_column.clone()];
    header.extend(layout.covariates.iter().map(|v| v.name.clone()));
    header.extend(layout.questions.iter().cloned());
    if weights.is_some() {
        header.push(layout.weight_column.clone());
    }
    w.write_record(&header)?;
    for (i, unit) in sample.units().iter().enumerate() {
        let levels = schema.decode(&unit.x)?;
        let mut rec = vec![unit.id.clone()];
        rec.extend(
            schema
                .variables()
                .iter()
                .zip(&levels)
                .map(|(v, &l)| v.levels[l].clone()),
        );
        rec.extend(unit.responses.iter().map(|r| match r {
            Some(true) => "1".to_string(),
            Some(false) => "0".to_string(),
            None => String::new(),
        }));
        if let Some(ws) = weights {
            rec.push(ws[i].to_string());
        }
        w.write_record(&rec)?;
    }
    finish(w, path)
}

fn question_index(layout: &SurveyLayout, name: &str, row: usize, path: &Path) -> Result<usize> {
    layout
        .questions
        .iter()
        .position(|q| q == name)
        .ok_or_else(|| Error::parse(path, format!("row {row}: unknown question {name:?}")))
}

fn cell_from(
    layout: &SurveyLayout,
    record: &csv::StringRecord,
    cols: (usize, usize, usize),
    row: usize,
    path: &Path,
) -> Result<CellKey> {
    let q = question_index(layout, &record[cols.0], row, path)?;
    let factor = Factor::parse(&record[cols.1])
        .ok_or_else(|| Error::parse(path, format!("row {row}: unknown factor {:?}", &record[cols.1])))?;
    let group = layout
        .subgroup_key(factor, &record[cols.2])
        .map_err(|e| Error::parse(path, format!("row {row}: {e}")))?;
    Ok(CellKey::new(q, group))
}

/// Benchmark file with columns `question_id, factor, level, value`.
pub fn read_benchmark(path: &Path, layout: &SurveyLayout) -> Result<BenchmarkTable> {
    let mut rdr = reader(path)?;
    let h = rdr.headers()?.clone();
    let cols = (
        column(&h, "question_id", path)?,
        column(&h, "factor", path)?,
        column(&h, "level", path)?,
    );
    let value_col = column(&h, "value", path)?;
    let mut cells = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let key = cell_from(layout, &record, cols, i + 1, path)?;
        cells.insert(key, parse_f64(&record[value_col], "value", i + 1, path)?);
    }
    BenchmarkTable::new(layout.questions.clone(), cells)
}

pub fn write_benchmark(path: &Path, table: &BenchmarkTable, layout: &SurveyLayout) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["question_id", "factor", "level", "value"])?;
    for (k, v) in table.cells() {
        w.write_record([
            layout.questions[k.question].clone(),
            k.group.factor.to_string(),
            k.group.level.to_string(),
            v.to_string(),
        ])?;
    }
    finish(w, path)
}

const ESTIMATE_HEADER: [&str; 7] = [
    "question_id",
    "factor",
    "level",
    "source",
    "value",
    "variance",
    "out_of_range",
];

/// Tidy estimates: one row per (cell, source).
pub fn write_estimates(path: &Path, tables: &[&EstimateTable], layout: &SurveyLayout) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ESTIMATE_HEADER)?;
    for t in tables {
        for (k, e) in &t.cells {
            w.write_record([
                layout.questions[k.question].clone(),
                k.group.factor.to_string(),
                k.group.level.to_string(),
                e.source.tag().to_string(),
                e.value.to_string(),
                e.variance.to_string(),
                e.out_of_range.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// Reads an estimates file into one table per source tag.
pub fn read_estimates(path: &Path, layout: &SurveyLayout) -> Result<BTreeMap<Source, EstimateTable>> {
    let mut rdr = reader(path)?;
    let h = rdr.headers()?.clone();
    let cols = (
        column(&h, "question_id", path)?,
        column(&h, "factor", path)?,
        column(&h, "level", path)?,
    );
    let source_col = column(&h, "source", path)?;
    let value_col = column(&h, "value", path)?;
    let variance_col = column(&h, "variance", path)?;
    let mut out: BTreeMap<Source, EstimateTable> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let key = cell_from(layout, &record, cols, row, path)?;
        let source = Source::parse(&record[source_col])
            .ok_or_else(|| Error::parse(path, format!("row {row}: unknown source {:?}", &record[source_col])))?;
        let value = parse_f64(&record[value_col], "value", row, path)?;
        let raw_var = record[variance_col].trim();
        if raw_var.is_empty() {
            return Err(Error::parse(path, format!("row {row}: missing variance")));
        }
        let variance = parse_f64(raw_var, "variance", row, path)?;
        out.entry(source)
            .or_insert_with(|| EstimateTable::new(layout.questions.clone()))
            .insert(key, MeanEstimate::new(value, variance, source));
    }
    Ok(out)
}

pub fn write_bias(path: &Path, bias: &BiasMatrix, layout: &SurveyLayout) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["question_id", "factor", "level", "eps", "pairs"])?;
    for (k, e) in &bias.entries {
        w.write_record([
            layout.questions[k.question].clone(),
            k.group.factor.to_string(),
            k.group.level.to_string(),
            e.to_string(),
            bias.provenance.len().to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn read_bias(path: &Path, layout: &SurveyLayout) -> Result<BiasMatrix> {
    let mut rdr = reader(path)?;
    let h = rdr.headers()?.clone();
    let cols = (
        column(&h, "question_id", path)?,
        column(&h, "factor", path)?,
        column(&h, "level", path)?,
    );
    let eps_col = column(&h, "eps", path)?;
    let mut entries = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let key = cell_from(layout, &record, cols, i + 1, path)?;
        entries.insert(key, parse_f64(&record[eps_col], "eps", i + 1, path)?);
    }
    Ok(BiasMatrix {
        questions: layout.questions.clone(),
        entries,
        provenance: Vec::new(),
    })
}

/// MAE report rows: `scope` is `overall`, `question` or `subgroup`.
pub fn write_mae(path: &Path, reports: &[(Source, MaeReport)], layout: &SurveyLayout) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["source", "scope", "question_id", "factor", "level", "mae_pct"])?;
    for (source, r) in reports {
        let tag = source.tag().to_string();
        w.write_record([tag.clone(), "overall".into(), String::new(), String::new(), String::new(), r.overall.to_string()])?;
        for (q, v) in &r.per_question {
            w.write_record([
                tag.clone(),
                "question".into(),
                layout.questions[*q].clone(),
                String::new(),
                String::new(),
                v.to_string(),
            ])?;
        }
        for (g, v) in &r.per_subgroup {
            w.write_record([
                tag.clone(),
                "subgroup".into(),
                String::new(),
                g.factor.to_string(),
                g.level.to_string(),
                v.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// Plot data: per-cell absolute differences with the largest marked.
pub fn write_abs_diff(path: &Path, tables: &[(Source, AbsDiffTable)], layout: &SurveyLayout) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["source", "question_id", "factor", "level", "abs_diff", "is_max"])?;
    for (source, t) in tables {
        for (k, v) in &t.cells {
            w.write_record([
                source.tag().to_string(),
                layout.questions[k.question].clone(),
                k.group.factor.to_string(),
                k.group.level.to_string(),
                v.to_string(),
                (*k == t.max_cell).to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// Writes the fit as JSON and the per-unit propensities as a table.
pub fn write_propensity(dir: &Path, stem: &str, fit: &PropensityFit, nps: &NonprobabilitySample) -> Result<Vec<PathBuf>> {
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, fit)?;
    let table = dir.join(format!("{stem}.csv"));
    let mut w = writer(&table)?;
    w.write_record(["id", "pi_hat"])?;
    for (u, p) in nps.units.iter().zip(&fit.pi_hat) {
        w.write_record([u.id.clone(), p.to_string()])?;
    }
    finish(w, &table)?;
    Ok(vec![json, table])
}

pub fn read_propensity(path: &Path, nps: &NonprobabilitySample) -> Result<PropensityFit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fit: PropensityFit = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if fit.pi_hat.len() != nps.units.len() {
        return Err(Error::parse(
            path,
            format!(
                "{} propensities for {} nonprobability units",
                fit.pi_hat.len(),
                nps.units.len()
            ),
        ));
    }
    Ok(fit)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Monte Carlo summary: per-estimator and per-cell rows.
pub fn write_mc_summary(dir: &Path, summary: &McSummary, layout: &SurveyLayout) -> Result<Vec<PathBuf>> {
    let est_path = dir.join("mc_estimators.csv");
    let mut w = writer(&est_path)?;
    w.write_record([
        "estimator",
        "replicates",
        "mae_pct",
        "mae_se",
        "max_abs_error_pct",
        "max_abs_error_se",
        "max_cell_mean_abs_error_pct",
    ])?;
    for (label, e) in &summary.estimators {
        w.write_record([
            label.clone(),
            e.replicates.to_string(),
            e.mae.mean.to_string(),
            e.mae.se.to_string(),
            e.max_abs_error.mean.to_string(),
            e.max_abs_error.se.to_string(),
            e.max_cell_mean_abs_error.to_string(),
        ])?;
    }
    finish(w, &est_path)?;

    let cell_path = dir.join("mc_cells.csv");
    let mut w = writer(&cell_path)?;
    w.write_record([
        "estimator",
        "question_id",
        "factor",
        "level",
        "truth",
        "mean",
        "bias",
        "bias_se",
        "variance",
        "mse",
        "mse_se",
        "mean_abs_error",
        "mean_estimated_variance",
    ])?;
    for (label, e) in &summary.estimators {
        for (k, c) in &e.cells {
            w.write_record([
                label.clone(),
                layout.questions[k.question].clone(),
                k.group.factor.to_string(),
                k.group.level.to_string(),
                c.truth.to_string(),
                c.mean.to_string(),
                c.bias.to_string(),
                c.bias_se.to_string(),
                c.variance.to_string(),
                c.mse.to_string(),
                c.mse_se.to_string(),
                c.mean_abs_error.to_string(),
                c.mean_estimated_variance.to_string(),
            ])?;
        }
    }
    finish(w, &cell_path)?;

    let diag_path = dir.join("mc_diagnostics.csv");
    let mut w = writer(&diag_path)?;
    w.write_record(["diagnostic", "mean", "se", "n"])?;
    for (name, s) in &summary.diagnostics {
        w.write_record([name.clone(), s.mean.to_string(), s.se.to_string(), s.n.to_string()])?;
    }
    finish(w, &diag_path)?;
    Ok(vec![est_path, cell_path, diag_path])
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sample_size", "mae_ps", "mae_comb", "pct_change"])?;
    for r in rows {
        w.write_record([
            r.size.map_or_else(|| "full".to_string(), |n| n.to_string()),
            r.mae_ps.to_string(),
            r.mae_comb.to_string(),
            r.pct_change.to_string(),
        ])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> SurveyLayout {
        SurveyLayout {
            id_column: "id".into(),
            weight_column: "weight".into(),
            covariates: vec![Variable {
                name: "age".into(),
                levels: vec!["18-29".into(), "30-64".into(), "65+".into()],
            }],
            questions: vec!["q1".into(), "q2".into()],
            subgroups: SubgroupMap {
                age: Some("age".into()),
                ..Default::default()
            },
        }
    }

    fn file(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn weight_column_selects_probability_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "ps.csv", "id,age,q1,q2,weight\na,18-29,1,0,2.5\nb,65+,,1,1\n");
        let s = ingest_survey(&p, &layout()).unwrap().into_probability(&p).unwrap();
        assert_eq!(s.weights, vec![2.5, 1.0]);
        assert_eq!(s.units[0].responses, vec![Some(true), Some(false)]);
        assert_eq!(s.units[1].responses[0], None);
        assert_eq!(s.units[1].groups.age, Some(3));
    }

    #[test]
    fn no_weight_column_gives_nonprobability_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "nps.csv", "id,age,q1,q2\na,30-64,1,0\n");
        assert!(matches!(
            ingest_survey(&p, &layout()).unwrap().survey,
            Survey::Nonprobability(_)
        ));
    }

    #[test]
    fn negative_weight_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "ps.csv", "id,age,q1,q2,weight\na,18-29,1,0,2\nb,65+,0,1,-1\n");
        let err = ingest_survey(&p, &layout()).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn missing_column_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "a.csv", "id,age,q1\na,18-29,1\n");
        assert!(ingest_survey(&p, &layout()).unwrap_err().to_string().contains("q2"));
        let p = file(&dir, "b.csv", "id,age,q1,q2\na,18-29,yes,0\n");
        assert!(ingest_survey(&p, &layout()).is_err());
        let p = file(&dir, "c.csv", "id,age,q1,q2,weight\na,18-29,1,0,abc\n");
        assert!(ingest_survey(&p, &layout()).unwrap_err().to_string().contains("malformed"));
        let p = file(&dir, "d.csv", "id,age,q1,q2\na,teen,1,0\n");
        assert!(ingest_survey(&p, &layout()).unwrap_err().to_string().contains("row 1"));
    }

    #[test]
    fn survey_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(&dir, "ps.csv", "id,age,q1,q2,weight\na,18-29,1,,2.5\nb,65+,0,1,1\n");
        let s = ingest_survey(&p, &layout()).unwrap().into_probability(&p).unwrap();
        let out = dir.path().join("out.csv");
        write_survey(&out, &s, Some(&s.weights), &layout()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), std::fs::read_to_string(&out).unwrap());
    }

    #[test]
    fn benchmark_levels_by_index_or_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = file(
            &dir,
            "b.csv",
            "question_id,factor,level,value\nq1,age,1,0.5\nq1,age,30-64,0.4\nq1,age,3,0.3\nq2,age,1,0.1\nq2,age,2,0.2\nq2,age,65+,0.3\n",
        );
        let b = read_benchmark(&p, &layout()).unwrap();
        assert_eq!((b.m(), b.k()), (2, 3));
        let key = CellKey::new(0, SubgroupKey::new(Factor::Age, 2, 3).unwrap());
        assert_eq!(b.get(&key), Some(0.4));
    }

    #[test]
    fn estimates_round_trip_and_missing_variance() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = EstimateTable::new(vec!["q1".into(), "q2".into()]);
        t.insert(CellKey::new(1, SubgroupKey::OVERALL), MeanEstimate::new(0.25, 0.001, Source::Clw));
        let p = dir.path().join("e.csv");
        write_estimates(&p, &[&t], &layout()).unwrap();
        let back = read_estimates(&p, &layout()).unwrap();
        assert_eq!(back[&Source::Clw].cells, t.cells);

        let p = file(
            &dir,
            "bad.csv",
            "question_id,factor,level,source,value,variance,out_of_range\nq1,overall,1,ps,0.3,,false\n",
        );
        assert!(read_estimates(&p, &layout()).unwrap_err().to_string().contains("variance"));
    }
}
