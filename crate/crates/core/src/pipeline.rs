//! Run configuration and the end-to-end commands behind the CLI:
//! generate, cohorts, train-base, finetune, baselines, evaluate, explain.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{cross_validate, BaselineKind, ForestConfig, DEFAULT_FOLDS};
use crate::cohort::{
    aggregate_columns, build_schema, enumerate_subcohorts, load_cohorts, save_cohorts, AggregateDataset, CohortIndex,
    SequenceSample, Split, SubCohort, WindowSpec, OFFSETS,
};
use crate::ehr::{read_population, write_population};
use crate::error::{Error, Result};
use crate::eval::{read_metrics_csv, write_metrics_csv, MetricRow};
use crate::growth::{load_lms_csv, synthetic_bmi_chart, synthetic_weight_chart, ChartKind, ChartSet};
use crate::interpret::{emit_reports, input_labels, population_ranking, PopulationMode, Scalarization};
use crate::model::train::{evaluate as evaluate_net, fine_tune, train_base_models, History, Prediction, TrainedModel, TrainingKind};
use crate::model::{load_model, save_model, Architecture, ModelConfig};
use crate::synth::{generate_population, GenConfig};

pub const POPULATION_FILE: &str = "population.jsonl";
pub const COHORT_DIR: &str = "cohorts";
pub const MODEL_DIR: &str = "models";
pub const REPORT_DIR: &str = "reports";
pub const BASELINE_METRICS: &str = "baseline_metrics.csv";
pub const METRICS: &str = "metrics.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const ACCURACY_BY_WINDOW: &str = "accuracy_by_window.csv";
pub const AUC_BY_WINDOW: &str = "auc_by_window.csv";
pub const EXPLAIN_DIR: &str = "explain";

pub const BASE_MODEL: &str = "lstm_base";
pub const FINETUNED_MODEL: &str = "lstm_finetuned";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    /// Minimum fraction of patients a code must appear in.
    pub threshold: f64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            threshold: crate::cohort::DEFAULT_PREVALENCE,
        }
    }
}

/// Optional LMS tables; the built-in synthetic chart is used for any left unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartPaths {
    pub bmi: Option<PathBuf>,
    pub weight: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub schema: SchemaConfig,
    pub model: ModelConfig,
    pub forest: ForestConfig,
    pub charts: ChartPaths,
    pub out_dir: PathBuf,
    /// Overrides the seeds of every stage.
    pub seed: u64,
    pub architecture: Architecture,
    pub cv_folds: usize,
    pub population_mode: PopulationMode,
    pub scalarization: Scalarization,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            schema: SchemaConfig::default(),
            model: ModelConfig {
                hidden: 16,
                ..ModelConfig::default()
            },
            forest: ForestConfig::default(),
            charts: ChartPaths::default(),
            out_dir: PathBuf::from("run"),
            seed: 1,
            architecture: Architecture::Interpretable,
            cv_folds: DEFAULT_FOLDS,
            population_mode: PopulationMode::PredictedObese,
            scalarization: Scalarization::Signed,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    /// Reads a JSON config; a missing or malformed file is a configuration error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.forest.validate().map_err(config_err)?;
        if !(0.0..=1.0).contains(&self.schema.threshold) {
            return Err(Error::Config(format!("schema threshold {} outside [0, 1]", self.schema.threshold)));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        for p in [&self.charts.bmi, &self.charts.weight].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("chart file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Copy with the run seed pushed into every stage.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.gen.seed = self.seed;
        c.model.seed = self.seed;
        c.forest.seed = self.seed;
        c
    }

    pub fn charts(&self) -> Result<ChartSet> {
        let bmi = match &self.charts.bmi {
            Some(p) => load_lms_csv(p, ChartKind::BmiForAge)?,
            None => synthetic_bmi_chart(),
        };
        let weight = match &self.charts.weight {
            Some(p) => load_lms_csv(p, ChartKind::WeightForAge)?,
            None => synthetic_weight_chart(),
        };
        Ok(ChartSet::new(bmi, weight))
    }

    pub fn population_path(&self) -> PathBuf {
        self.out_dir.join(POPULATION_FILE)
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.out_dir.join(COHORT_DIR)
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join(MODEL_DIR)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join(REPORT_DIR)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Ground-truth sidecar next to a population file: `x.jsonl` → `x.truth.json`.
pub fn truth_path(population: &Path) -> PathBuf {
    population.with_extension("truth.json")
}

/// Writes the synthetic population and its ground truth.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = cfg.seeded();
    let (population, truth) = generate_population(&cfg.gen)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_population(out, &population)?;
    let tp = truth_path(out);
    truth.save(&tp)?;
    Ok((out.to_path_buf(), tp))
}

/// Filters features, builds the 48 sub-cohorts and saves them with an index.
pub fn build_cohorts(cfg: &RunConfig, population: &Path, out: &Path) -> Result<CohortIndex> {
    require(population)?;
    let cfg = cfg.seeded();
    let charts = cfg.charts()?;
    let pop = read_population(population)?;
    let schema = build_schema(&pop, cfg.schema.threshold)?;
    let cohorts = enumerate_subcohorts(&pop, &schema, &charts, cfg.seed)?;
    save_cohorts(out, &schema, &cohorts, cfg.seed, cfg.schema.threshold)
}

pub fn base_name(offset: u32) -> String {
    format!("base_a{offset:02}")
}

pub fn finetuned_name(spec: &WindowSpec) -> String {
    format!("finetuned_{}", spec.label())
}

/// Trains the three base models (one per offset) and saves them.
pub fn train_base(cfg: &RunConfig, cohort_dir: &Path, model_dir: &Path) -> Result<Vec<String>> {
    let cfg = cfg.seeded();
    let (schema, cohorts) = load_cohorts(cohort_dir)?;
    let models = train_base_models(&cohorts, cfg.architecture, schema.len() + 1, schema.demographic_dim(), &cfg.model)?;
    let mut names = Vec::new();
    for m in &models {
        let name = base_name(m.net.offset.expect("base models carry their offset"));
        save_model(model_dir, &name, m)?;
        names.push(name);
    }
    Ok(names)
}

/// Fine-tunes the matching base model on each of the 48 sub-cohorts. A
/// sub-cohort without training samples keeps the base weights unchanged.
pub fn finetune(cfg: &RunConfig, cohort_dir: &Path, model_dir: &Path, jobs: Option<usize>) -> Result<Vec<String>> {
    let cfg = cfg.seeded();
    let (_, cohorts) = load_cohorts(cohort_dir)?;
    let bases: Vec<TrainedModel> = OFFSETS.iter().map(|&k| load_model(model_dir, &base_name(k))).collect::<Result<_>>()?;
    let run = || {
        cohorts
            .par_iter()
            .map(|c| {
                let base = &bases[(c.spec.offset() - 1) as usize];
                let tuned = if c.part(Split::Train).is_empty() {
                    TrainedModel {
                        net: base.net.clone(),
                        kind: TrainingKind::FineTuned,
                        spec: Some(c.spec),
                        config: cfg.model.clone(),
                        history: History::default(),
                    }
                } else {
                    fine_tune(base, c, &cfg.model)?
                };
                let name = finetuned_name(&c.spec);
                save_model(model_dir, &name, &tuned)?;
                Ok(name)
            })
            .collect::<Result<Vec<_>>>()
    };
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Aggregate data of every sample with the given offset.
pub fn pooled_aggregate(columns: &[String], cohorts: &[SubCohort], offset: u32) -> AggregateDataset {
    AggregateDataset::from_samples(
        columns.to_vec(),
        cohorts.iter().filter(|c| c.spec.offset() == offset).flat_map(|c| c.samples.iter()),
    )
}

fn cohort_tags(spec: &WindowSpec) -> (String, String) {
    (spec.obs_start_year.to_string(), spec.prediction_age_year.to_string())
}

/// Cross-validated linear regression and random forest on the aggregate
/// features of each sub-cohort and of each pooled offset. Sub-cohorts smaller
/// than the fold count use leave-one-out; fewer than two samples are skipped.
pub fn run_baselines(cfg: &RunConfig, cohort_dir: &Path, report_dir: &Path) -> Result<Vec<MetricRow>> {
    let cfg = cfg.seeded();
    let charts = cfg.charts()?;
    let (schema, cohorts) = load_cohorts(cohort_dir)?;
    let columns = aggregate_columns(&schema);
    let mut jobs: Vec<(String, String, AggregateDataset)> = cohorts
        .iter()
        .map(|c| {
            let (w, a) = cohort_tags(&c.spec);
            (w, a, AggregateDataset::from_samples(columns.clone(), c.samples.iter()))
        })
        .collect();
    for k in OFFSETS {
        jobs.push(("all".into(), format!("+{k}"), pooled_aggregate(&columns, &cohorts, k)));
    }
    let mut rows = Vec::new();
    for (window, age, data) in &jobs {
        if data.len() < 2 {
            continue;
        }
        let k = cfg.cv_folds.min(data.len());
        for kind in [BaselineKind::LinearRegression, BaselineKind::RandomForest] {
            let cv = cross_validate(kind, data, k, &cfg.forest, &charts)?;
            rows.push(MetricRow {
                window: window.clone(),
                prediction_age: age.clone(),
                model: kind.name().into(),
                protocol: format!("cv{k}"),
                report: cv.mean,
            });
        }
    }
    create_dir(report_dir)?;
    write_metrics_csv(report_dir.join(BASELINE_METRICS), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub window: String,
    pub prediction_age: String,
    pub model: String,
    pub patient_id: String,
    pub target_bmi: f64,
    pub label: bool,
    pub predicted_bmi: f64,
    pub cutoff: f64,
    pub predicted_obese: bool,
}

fn prediction_rows(window: &str, age: &str, model: &str, samples: &[&SequenceSample], preds: &[Prediction]) -> Vec<PredictionRow> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRow {
            window: window.into(),
            prediction_age: age.into(),
            model: model.into(),
            patient_id: s.patient_id.clone(),
            target_bmi: s.target_bmi,
            label: s.label,
            predicted_bmi: p.bmi,
            cutoff: p.cutoff,
            predicted_obese: p.obese,
        })
        .collect()
}

/// Test-split metrics of the fine-tuned and base models on every non-empty
/// sub-cohort and of the base models on the pooled test splits. Baseline rows
/// are appended when present. Writes the metrics CSV and a per-prediction dump.
pub fn evaluate(cfg: &RunConfig, cohort_dir: &Path, model_dir: &Path, report_dir: &Path) -> Result<Vec<MetricRow>> {
    let charts = cfg.charts()?;
    let (_, cohorts) = load_cohorts(cohort_dir)?;
    let bases: Vec<TrainedModel> = OFFSETS.iter().map(|&k| load_model(model_dir, &base_name(k))).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut dump = Vec::new();
    for c in &cohorts {
        let test = c.part(Split::Test);
        if test.is_empty() {
            continue;
        }
        let (w, a) = cohort_tags(&c.spec);
        let tuned = load_model(model_dir, &finetuned_name(&c.spec))?;
        let base = &bases[(c.spec.offset() - 1) as usize];
        for (label, net) in [(FINETUNED_MODEL, &tuned.net), (BASE_MODEL, &base.net)] {
            let (preds, report) = evaluate_net(net, &test, &charts)?;
            dump.extend(prediction_rows(&w, &a, label, &test, &preds));
            rows.push(MetricRow {
                window: w.clone(),
                prediction_age: a.clone(),
                model: label.into(),
                protocol: "test".into(),
                report,
            });
        }
    }
    for (i, k) in OFFSETS.into_iter().enumerate() {
        let test = crate::model::train::pooled(&cohorts, k, Split::Test);
        if test.is_empty() {
            continue;
        }
        let (preds, report) = evaluate_net(&bases[i].net, &test, &charts)?;
        let age = format!("+{k}");
        dump.extend(prediction_rows("all", &age, BASE_MODEL, &test, &preds));
        rows.push(MetricRow {
            window: "all".into(),
            prediction_age: age,
            model: BASE_MODEL.into(),
            protocol: "test".into(),
            report,
        });
    }
    let baseline_path = report_dir.join(BASELINE_METRICS);
    if baseline_path.exists() {
        rows.extend(read_metrics_csv(&baseline_path)?);
    }
    create_dir(report_dir)?;
    write_metrics_csv(report_dir.join(METRICS), &rows)?;
    write_predictions_csv(&report_dir.join(PREDICTIONS), &dump)?;
    Ok(rows)
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a window × offset grid of one metric of the fine-tuned models.
fn write_grid(path: &Path, rows: &[MetricRow], metric: fn(&MetricRow) -> f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut header = vec!["obs_start_year".to_string()];
    header.extend(OFFSETS.iter().map(|k| format!("offset_{k}")));
    w.write_record(&header).map_err(|e| Error::invalid(e.to_string()))?;
    for s in 0..crate::cohort::N_WINDOWS as u32 {
        let mut rec = vec![s.to_string()];
        for k in OFFSETS {
            let age = (s + crate::cohort::OBS_YEARS + k).to_string();
            let cell = rows
                .iter()
                .find(|r| r.model == FINETUNED_MODEL && r.window == s.to_string() && r.prediction_age == age)
                .map_or(String::new(), |r| metric(r).to_string());
            rec.push(cell);
        }
        w.write_record(&rec).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainSummary {
    pub reports: Vec<String>,
    /// Models whose selection was empty under the population mode.
    pub skipped: Vec<String>,
}

/// Attention and importance reports for every fine-tuned model on its test
/// split and for each base model on the pooled test split, plus the
/// accuracy/AUC grids built from the metrics CSV.
pub fn explain(cfg: &RunConfig, cohort_dir: &Path, model_dir: &Path, report_dir: &Path) -> Result<ExplainSummary> {
    let charts = cfg.charts()?;
    let metrics = read_metrics_csv(report_dir.join(METRICS))?;
    let (schema, cohorts) = load_cohorts(cohort_dir)?;
    let labels = input_labels(&schema);
    let out = report_dir.join(EXPLAIN_DIR);
    create_dir(&out)?;
    let mut jobs: Vec<(String, TrainedModel, Vec<&SequenceSample>)> = Vec::new();
    for k in OFFSETS {
        jobs.push((base_name(k), load_model(model_dir, &base_name(k))?, crate::model::train::pooled(&cohorts, k, Split::Test)));
    }
    for c in &cohorts {
        let name = finetuned_name(&c.spec);
        jobs.push((name.clone(), load_model(model_dir, &name)?, c.part(Split::Test)));
    }
    let mut summary = ExplainSummary {
        reports: Vec::new(),
        skipped: Vec::new(),
    };
    for (name, model, test) in jobs {
        if test.is_empty() {
            summary.skipped.push(name);
            continue;
        }
        match population_ranking(&model.net, &test, &charts, cfg.population_mode, &labels, cfg.scalarization) {
            Ok((ranking, explanations)) => {
                emit_reports(&out, &name, &explanations, &ranking)?;
                summary.reports.push(name);
            }
            Err(Error::Invalid(_)) if cfg.population_mode == PopulationMode::PredictedObese => summary.skipped.push(name),
            Err(e) => return Err(e),
        }
    }
    write_grid(&report_dir.join(ACCURACY_BY_WINDOW), &metrics, |r| r.report.accuracy)?;
    write_grid(&report_dir.join(AUC_BY_WINDOW), &metrics, |r| r.report.auc)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let e = RunConfig::load(&missing).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("nope.json"));
        let p = dir.path().join("bad.json");
        std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.charts.bmi = Some(dir.path().join("chart.csv"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.schema.threshold = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig {
            seed: 99,
            ..RunConfig::default()
        }
        .seeded();
        assert_eq!((cfg.gen.seed, cfg.model.seed, cfg.forest.seed), (99, 99, 99));
    }

    #[test]
    fn truth_sidecar_name() {
        assert_eq!(truth_path(Path::new("a/pop.jsonl")), PathBuf::from("a/pop.truth.json"));
    }

    #[test]
    fn missing_upstream_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let r = build_cohorts(&cfg, &dir.path().join("pop.jsonl"), &dir.path().join("c"));
        assert!(matches!(r, Err(Error::MissingArtifact(_))));
        let r = evaluate(&cfg, &dir.path().join("c"), &dir.path().join("m"), &dir.path().join("r"));
        assert!(matches!(r, Err(Error::MissingArtifact(_))));
    }
}
