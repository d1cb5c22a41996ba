//! File-to-file pipeline stages behind the command-line tool.
//!
//! Every stage reads its inputs from disk, calls the library, writes tidy
//! tables into the output directory and finishes with `metadata.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::{abs_diff_table, estimate_bias, mae};
use crate::error::{Error, Result};
use crate::estimators::{BootstrapOptions, PredictedProbabilities};
use crate::io::{self, Ingested, SurveyLayout};
use crate::parallel::{replicate_rng, Execution};
use crate::propensity::{fit_samples, PropensityFit, PropensityOptions};
use crate::response_model::{
    build_training_set, cross_validate, evaluate_classifier, fit_gbm, split_train_test,
    BoostedModel, GbmConfig,
};
use crate::simulator::{
    clw_table, compose_tables, draw_nps, draw_probability_sample, generate_population, ipw_bootstrap,
    m_clw_table, model_composites, monte_carlo, predict_questions, ps_table, sample_size_sweep,
    with_variances, PopulationSpec, ScenarioOptions,
};
use crate::types::{
    EstimateTable, Factor, NonprobabilitySample, ProbabilitySample, Source, SubgroupKey,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    FitPropensity,
    Estimate,
    Bias,
    Compose,
    Evaluate,
    ModelFit,
    ModelPredict,
    Sweep,
    Run,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::FitPropensity => "fit-propensity",
            Command::Estimate => "estimate",
            Command::Bias => "bias",
            Command::Compose => "compose",
            Command::Evaluate => "evaluate",
            Command::ModelFit => "model-fit",
            Command::ModelPredict => "model-predict",
            Command::Sweep => "sweep",
            Command::Run => "run",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub layout: Option<PathBuf>,
    /// Population spec for `simulate` and `sweep`; the built-in spec if unset.
    pub population: Option<PathBuf>,
    pub ps: Option<PathBuf>,
    pub nps: Option<PathBuf>,
    /// Auxiliary pairs for bias estimation in `run`.
    pub aux_ps: Vec<PathBuf>,
    pub aux_nps: Vec<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub estimates: Vec<PathBuf>,
    pub bias: Option<PathBuf>,
    pub propensity: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Inputs {
    fn all(&self) -> Vec<&Path> {
        let singles = [
            &self.layout,
            &self.population,
            &self.ps,
            &self.nps,
            &self.benchmark,
            &self.bias,
            &self.propensity,
            &self.model,
        ];
        singles
            .into_iter()
            .flatten()
            .chain(&self.aux_ps)
            .chain(&self.aux_nps)
            .chain(&self.estimates)
            .map(PathBuf::as_path)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneOptions {
    pub folds: usize,
    /// Empty: fit `gbm` directly without cross-validation.
    pub grid: Vec<GbmConfig>,
    pub train_fraction: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            folds: 5,
            grid: Vec::new(),
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationOptions {
    /// Monte Carlo replicates; `0` skips the study in `simulate`.
    pub replicates: usize,
    pub bias_pairs: usize,
    pub contaminate: bool,
    pub sweep_sizes: Vec<usize>,
    /// Include the model-based estimators in Monte Carlo studies.
    pub model: bool,
    /// Per-replicate bootstrap size for IPW variances; `0` uses the
    /// fixed-weight linearization.
    pub bootstrap_replicates: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            replicates: 0,
            bias_pairs: 2,
            contaminate: true,
            sweep_sizes: vec![1000, 500, 100],
            model: false,
            bootstrap_replicates: 0,
        }
    }
}

/// Everything one command needs. Loaded from TOML and overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Command,
    /// Not recorded in metadata so reruns into another directory match.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    pub seed: u64,
    /// Execution mode does not change any output, so it is not recorded.
    #[serde(skip_serializing)]
    pub sequential: bool,
    pub inputs: Inputs,
    /// Evaluation factors; empty means overall plus every mapped factor.
    pub groups: Vec<Factor>,
    pub propensity: PropensityOptions,
    /// Bootstrap replicates for IPW variances; `0` keeps the fixed-weight
    /// linearization.
    pub bootstrap_replicates: usize,
    pub variance_floor: f64,
    pub gbm: GbmConfig,
    pub tune: TuneOptions,
    pub simulation: SimulationOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Run,
            output: PathBuf::from("out"),
            seed: 0,
            sequential: false,
            inputs: Inputs::default(),
            groups: Vec::new(),
            propensity: PropensityOptions::default(),
            bootstrap_replicates: 500,
            variance_floor: 1e-12,
            gbm: GbmConfig::default(),
            tune: TuneOptions::default(),
            simulation: SimulationOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Every referenced input must exist before anything runs.
    pub fn validate(&self) -> Result<()> {
        for p in self.inputs.all() {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Sidecar written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

pub const METADATA_FILE: &str = "metadata.json";

struct Run<'a> {
    config: &'a RunConfig,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

fn need<'p>(path: &'p Option<PathBuf>, what: &str) -> Result<&'p Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing input: {what}")))
}

impl<'a> Run<'a> {
    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.config.output.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn layout(&self) -> Result<SurveyLayout> {
        SurveyLayout::load(need(&self.config.inputs.layout, "layout")?)
    }

    fn ingest(&mut self, path: &Path, layout: &SurveyLayout) -> Result<Ingested> {
        let ingested = io::ingest_survey(path, layout)?;
        for v in &ingested.report.violations {
            let w = match v.row {
                Some(r) => format!("{}: row {}: {}", path.display(), r + 1, v.message),
                None => format!("{}: {}", path.display(), v.message),
            };
            log::warn!("{w}");
            self.warnings.push(w);
        }
        Ok(ingested)
    }

    fn ps(&mut self, path: &Path, layout: &SurveyLayout) -> Result<ProbabilitySample> {
        self.ingest(path, layout)?.into_probability(path)
    }

    fn nps(&mut self, path: &Path, layout: &SurveyLayout) -> Result<NonprobabilitySample> {
        Ok(self.ingest(path, layout)?.into_nonprobability())
    }

    fn groups(&self, layout: &SurveyLayout) -> Result<Vec<SubgroupKey>> {
        if self.config.groups.is_empty() {
            let mut out = vec![SubgroupKey::OVERALL];
            for f in [Factor::Age, Factor::Race, Factor::Education] {
                if let Ok(keys) = layout.subgroups(f) {
                    out.extend(keys);
                }
            }
            return Ok(out);
        }
        let mut out = Vec::new();
        for &f in &self.config.groups {
            out.extend(layout.subgroups(f)?);
        }
        Ok(out)
    }

    fn fit(
        &mut self,
        nps: &NonprobabilitySample,
        ps: &ProbabilitySample,
    ) -> Result<PropensityFit> {
        match &self.config.inputs.propensity {
            Some(p) => io::read_propensity(p, nps),
            None => {
                let fit = fit_samples(nps, ps, &self.config.propensity)?;
                log::info!(
                    "propensity model converged in {} iterations (score norm {:e})",
                    fit.iterations,
                    fit.score_norm
                );
                Ok(fit)
            }
        }
    }

    /// IPW table, and the model-assisted table when `predictions` is given,
    /// with bootstrap variances when requested.
    fn ipw_tables(
        &self,
        nps: &NonprobabilitySample,
        ps: &ProbabilitySample,
        fit: &PropensityFit,
        groups: &[SubgroupKey],
        predictions: Option<&[PredictedProbabilities]>,
    ) -> Result<(EstimateTable, Option<EstimateTable>)> {
        let clw = clw_table(nps, fit, groups)?;
        let m_clw = predictions
            .map(|p| m_clw_table(nps, p, fit, groups))
            .transpose()?;
        let b = self.config.bootstrap_replicates;
        if b == 0 {
            return Ok((clw, m_clw));
        }
        let bootstrap = BootstrapOptions {
            replicates: b,
            seed: self.config.seed,
            execution: self.config.execution(),
        };
        let (v, mv) = ipw_bootstrap(nps, ps, groups, predictions, &self.config.propensity, &bootstrap)?;
        let m_clw = match (m_clw, mv) {
            (Some(t), Some(v)) => Some(with_variances(&t, &v)?),
            (t, _) => t,
        };
        Ok((with_variances(&clw, &v)?, m_clw))
    }

    fn finish(self) -> Result<Metadata> {
        let config = self.config;
        let meta = Metadata {
            tool: "svyint",
            version: env!("CARGO_PKG_VERSION"),
            command: config.command.name(),
            seed: config.seed,
            config: config.clone(),
            inputs: config.inputs.all().into_iter().map(Path::to_path_buf).collect(),
            outputs: self
                .outputs
                .iter()
                .map(|p| {
                    p.strip_prefix(&config.output)
                        .unwrap_or(p)
                        .display()
                        .to_string()
                })
                .collect(),
            warnings: self.warnings,
        };
        io::write_json(&config.output.join(METADATA_FILE), &meta)?;
        Ok(meta)
    }
}

/// Runs `config.command` and returns the metadata that was written.
pub fn run_pipeline(config: &RunConfig) -> Result<Metadata> {
    config.validate()?;
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let mut run = Run {
        config,
        outputs: Vec::new(),
        warnings: Vec::new(),
    };
    match config.command {
        Command::Simulate => simulate(&mut run)?,
        Command::FitPropensity => fit_propensity(&mut run)?,
        Command::Estimate => estimate(&mut run)?,
        Command::Bias => bias(&mut run)?,
        Command::Compose => compose(&mut run)?,
        Command::Evaluate => evaluate(&mut run)?,
        Command::ModelFit => model_fit(&mut run)?,
        Command::ModelPredict => model_predict(&mut run)?,
        Command::Sweep => sweep(&mut run)?,
        Command::Run => end_to_end(&mut run)?,
    }
    run.finish()
}

fn population_spec(run: &Run) -> Result<PopulationSpec> {
    match &run.config.inputs.population {
        Some(p) => PopulationSpec::load(p),
        None => Ok(PopulationSpec::default()),
    }
}

fn scenario(run: &Run, groups: Vec<SubgroupKey>) -> ScenarioOptions {
    let c = run.config;
    ScenarioOptions {
        groups,
        bias_pairs: c.simulation.bias_pairs,
        contaminate: c.simulation.contaminate,
        model: c.simulation.model.then_some(c.gbm),
        bootstrap_replicates: c.simulation.bootstrap_replicates,
        propensity: c.propensity.clone(),
        variance_floor: c.variance_floor,
        ..ScenarioOptions::default()
    }
}

/// Population stream 0, sample stream 1, Monte Carlo from stream 0 of
/// `seed + 1`.
fn simulate(run: &mut Run) -> Result<()> {
    let spec = population_spec(run)?;
    let seed = run.config.seed;
    let pop = generate_population(&spec, &mut replicate_rng(seed, 0))?;
    let layout = SurveyLayout::from_spec(&spec);
    let groups = run.groups(&layout)?;

    std::fs::write(run.out("population.toml"), spec.to_toml_string())
        .map_err(|e| Error::io(&run.config.output, e))?;
    layout.save(&run.out("layout.toml"))?;

    let mut rng = replicate_rng(seed, 1);
    for i in 1..=3 {
        let ps = draw_probability_sample(&pop, &mut rng)?;
        let (nps, _, _) = draw_nps(&pop, run.config.simulation.contaminate, &mut rng)?;
        io::write_survey(&run.out(&format!("p{i}.csv")), &ps, Some(&ps.weights), &layout)?;
        io::write_survey(&run.out(&format!("o{i}.csv")), &nps, None, &layout)?;
    }
    io::write_benchmark(&run.out("benchmark.csv"), &pop.truth(&groups)?, &layout)?;

    let r = run.config.simulation.replicates;
    if r > 0 {
        let options = scenario(run, groups);
        let summary = monte_carlo(&pop, &options, r, seed.wrapping_add(1), run.config.execution())?;
        if summary.failures > 0 {
            run.warnings.push(format!("{} of {r} replicates failed", summary.failures));
        }
        let written = io::write_mc_summary(&run.config.output, &summary, &layout)?;
        run.outputs.extend(written);
    }
    Ok(())
}

fn fit_propensity(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let inputs = &run.config.inputs;
    let ps = run.ps(need(&inputs.ps, "ps")?, &layout)?;
    let nps = run.nps(need(&inputs.nps, "nps")?, &layout)?;
    let fit = fit_samples(&nps, &ps, &run.config.propensity)?;
    let written = io::write_propensity(&run.config.output, "propensity", &fit, &nps)?;
    run.outputs.extend(written);
    Ok(())
}

fn estimate(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let groups = run.groups(&layout)?;
    let inputs = &run.config.inputs;
    let ps = run.ps(need(&inputs.ps, "ps")?, &layout)?;
    let nps = run.nps(need(&inputs.nps, "nps")?, &layout)?;
    let fit = run.fit(&nps, &ps)?;
    let pst = ps_table(&ps, &groups)?;
    let (clw, _) = run.ipw_tables(&nps, &ps, &fit, &groups, None)?;
    io::write_estimates(&run.out("estimates.csv"), &[&pst, &clw], &layout)
}

fn source_table<'t>(
    tables: &'t std::collections::BTreeMap<Source, EstimateTable>,
    source: Source,
    path: &Path,
) -> Result<&'t EstimateTable> {
    tables
        .get(&source)
        .ok_or_else(|| Error::parse(path, format!("no {} estimates", source.tag())))
}

fn bias(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    if run.config.inputs.estimates.is_empty() {
        return Err(Error::InvalidConfig("missing input: estimates".into()));
    }
    let (mut clw, mut ps) = (Vec::new(), Vec::new());
    for path in &run.config.inputs.estimates {
        let tables = io::read_estimates(path, &layout)?;
        clw.push(source_table(&tables, Source::Clw, path)?.clone());
        ps.push(source_table(&tables, Source::Ps, path)?.clone());
    }
    io::write_bias(&run.out("bias.csv"), &estimate_bias(&clw, &ps)?, &layout)
}

fn compose(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let path = run
        .config
        .inputs
        .estimates
        .first()
        .ok_or_else(|| Error::InvalidConfig("missing input: estimates".into()))?;
    let tables = io::read_estimates(path, &layout)?;
    let eps = io::read_bias(need(&run.config.inputs.bias, "bias")?, &layout)?;
    let [bc, ev, comb] = compose_tables(
        source_table(&tables, Source::Ps, path)?,
        source_table(&tables, Source::Clw, path)?,
        &eps,
        run.config.variance_floor,
    )?;
    io::write_estimates(&run.out("composites.csv"), &[&bc, &ev, &comb], &layout)
}

fn evaluate_tables(run: &mut Run, tables: &[&EstimateTable], layout: &SurveyLayout) -> Result<()> {
    let bench = io::read_benchmark(need(&run.config.inputs.benchmark, "benchmark")?, layout)?;
    let mut reports = Vec::new();
    let mut diffs = Vec::new();
    for t in tables {
        let source = t
            .cells
            .values()
            .next()
            .map(|e| e.source)
            .ok_or_else(|| Error::GridMismatch("empty estimate table".into()))?;
        log::info!("evaluating {}", source.tag());
        let bench = bench.restricted_to(t.cells.keys())?;
        reports.push((source, mae(t, &bench)?));
        diffs.push((source, abs_diff_table(t, &bench)?));
    }
    io::write_mae(&run.out("mae.csv"), &reports, layout)?;
    io::write_abs_diff(&run.out("abs_diff.csv"), &diffs, layout)
}

fn evaluate(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let mut all = Vec::new();
    for path in &run.config.inputs.estimates {
        all.extend(io::read_estimates(path, &layout)?.into_values());
    }
    if all.is_empty() {
        return Err(Error::InvalidConfig("missing input: estimates".into()));
    }
    let refs: Vec<&EstimateTable> = all.iter().collect();
    evaluate_tables(run, &refs, &layout)
}

fn model_fit(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let ps = run.ps(need(&run.config.inputs.ps, "ps")?, &layout)?;
    let c = run.config;
    let set = build_training_set(&ps, &[])?;
    let (train, test) = split_train_test(&set, c.tune.train_fraction, c.seed);
    let config = if c.tune.grid.is_empty() {
        c.gbm
    } else {
        let cv = cross_validate(&train, c.tune.folds, &c.tune.grid, c.seed, c.execution())?;
        io::write_json(&run.out("cv.json"), &cv)?;
        cv.best
    };
    let model = fit_gbm(&train, &config)?;
    model.save(&run.out("model.json"))?;
    let report = evaluate_classifier(&model, &test)?;
    log::info!("test AUC {}", report.auc);
    io::write_json(&run.out("classifier.json"), &report)?;
    Ok(())
}

fn model_predict(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let groups = run.groups(&layout)?;
    let inputs = &run.config.inputs;
    let model = BoostedModel::load(need(&inputs.model, "model")?)?;
    let ps = run.ps(need(&inputs.ps, "ps")?, &layout)?;
    let nps = run.nps(need(&inputs.nps, "nps")?, &layout)?;
    let fit = run.fit(&nps, &ps)?;
    let pst = ps_table(&ps, &groups)?;
    let predictions = predict_questions(&model, &nps)?;
    let (_, m_clw) = run.ipw_tables(&nps, &ps, &fit, &groups, Some(&predictions))?;
    let m_clw = m_clw.ok_or_else(|| Error::InvalidConfig("no model-assisted estimates".into()))?;
    let [m_comb, m_ev] = model_composites(&pst, &m_clw, run.config.variance_floor)?;
    io::write_estimates(&run.out("model_estimates.csv"), &[&pst, &m_clw, &m_comb, &m_ev], &layout)
}

fn sweep(run: &mut Run) -> Result<()> {
    let spec = population_spec(run)?;
    let c = run.config;
    if c.simulation.replicates == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one replicate".into()));
    }
    let pop = generate_population(&spec, &mut replicate_rng(c.seed, 0))?;
    let layout = SurveyLayout::from_spec(&spec);
    let options = scenario(run, run.groups(&layout)?);
    let rows = sample_size_sweep(
        &pop,
        &options,
        &c.simulation.sweep_sizes,
        c.simulation.replicates,
        c.seed.wrapping_add(1),
        c.execution(),
    )?;
    io::write_sweep(&run.out("sweep.csv"), &rows)
}

/// Fit, estimate, bias from the auxiliary pairs, compose and evaluate.
fn end_to_end(run: &mut Run) -> Result<()> {
    let layout = run.layout()?;
    let groups = run.groups(&layout)?;
    let inputs = run.config.inputs.clone();
    if inputs.aux_ps.is_empty() || inputs.aux_ps.len() != inputs.aux_nps.len() {
        return Err(Error::InvalidConfig(
            "need matching, non-empty lists of auxiliary ps and nps files".into(),
        ));
    }
    let (mut aux_clw, mut aux_ps) = (Vec::new(), Vec::new());
    for (p, o) in inputs.aux_ps.iter().zip(&inputs.aux_nps) {
        let ps = run.ps(p, &layout)?;
        let nps = run.nps(o, &layout)?;
        let fit = fit_samples(&nps, &ps, &run.config.propensity)?;
        aux_ps.push(ps_table(&ps, &groups)?);
        aux_clw.push(clw_table(&nps, &fit, &groups)?);
    }
    let eps = estimate_bias(&aux_clw, &aux_ps)?;
    io::write_bias(&run.out("bias.csv"), &eps, &layout)?;

    let ps = run.ps(need(&inputs.ps, "ps")?, &layout)?;
    let nps = run.nps(need(&inputs.nps, "nps")?, &layout)?;
    let fit = run.fit(&nps, &ps)?;
    let written = io::write_propensity(&run.config.output, "propensity", &fit, &nps)?;
    run.outputs.extend(written);
    let predictions = match &inputs.model {
        Some(m) => Some(predict_questions(&BoostedModel::load(m)?, &nps)?),
        None => None,
    };
    let pst = ps_table(&ps, &groups)?;
    let (clw, m_clw) = run.ipw_tables(&nps, &ps, &fit, &groups, predictions.as_deref())?;
    let [bc, ev, comb] = compose_tables(&pst, &clw, &eps, run.config.variance_floor)?;
    let mut tables = vec![pst.clone(), clw, bc, ev, comb];
    if let Some(m_clw) = m_clw {
        let [m_comb, m_ev] = model_composites(&pst, &m_clw, run.config.variance_floor)?;
        tables.extend([m_clw, m_comb, m_ev]);
    }
    let refs: Vec<&EstimateTable> = tables.iter().collect();
    io::write_estimates(&run.out("estimates.csv"), &refs, &layout)?;
    if inputs.benchmark.is_some() {
        evaluate_tables(run, &refs, &layout)?;
    }
    Ok(())
}
