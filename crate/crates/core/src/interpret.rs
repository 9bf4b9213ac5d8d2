//! Attention- and embedding-based explanations: per-visit feature
//! importance, top visits per sample, and population rankings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::SequenceSample;
use crate::ehr::FeatureSchema;
use crate::error::{Error, Result};
use crate::growth::ChartSet;
use crate::model::train::predict;
use crate::model::{ForwardTrace, Network};

pub const TOP_VISITS: usize = 3;
pub const GAP_LABEL: &str = "time_gap";

/// Labels of the model's input columns: schema features then the gap column.
pub fn input_labels(schema: &FeatureSchema) -> Vec<String> {
    let mut out: Vec<String> = schema.features().iter().map(|f| f.label()).collect();
    out.push(GAP_LABEL.to_string());
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// Σ_j W[i,j]·b_j
    #[default]
    Signed,
    /// Σ_j |W[i,j]·b_j|
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub slot: usize,
    pub feature: String,
    /// Model input value at this timestep.
    pub value: f64,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitImportance {
    pub timestep: usize,
    pub attention: f64,
    /// Present features, descending importance.
    pub features: Vec<FeatureScore>,
}

/// Importance of every feature present at step `t`: the embedding row of the
/// feature multiplied element-wise with the per-dimension attention row at
/// `t`, summed over dimensions. The gap column is not reported.
pub fn feature_importance(
    net: &Network,
    sample: &SequenceSample,
    trace: &ForwardTrace,
    t: usize,
    labels: &[String],
    mode: Scalarization,
) -> Result<Vec<FeatureScore>> {
    let emb = net
        .emb
        .as_ref()
        .ok_or_else(|| Error::invalid("feature importance needs the interpretable architecture"))?;
    if t >= sample.mask.len() || !sample.mask[t] {
        return Err(Error::invalid(format!("timestep {t} is masked")));
    }
    if labels.len() != emb.value.rows() {
        return Err(Error::shape(format!("{} labels for {} inputs", labels.len(), emb.value.rows())));
    }
    let b = &trace.attention_dims[t];
    // the trailing gap column encodes time, not a recorded feature
    let n_features = emb.value.rows() - 1;
    let mut out: Vec<FeatureScore> = sample.x[t][..n_features]
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, &value)| FeatureScore {
            slot: i,
            feature: labels[i].clone(),
            value,
            importance: scalarize(emb.value.row(i), b, mode),
        })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.slot.cmp(&b.slot)));
    Ok(out)
}

pub fn scalarize(w: &[f64], b: &[f64], mode: Scalarization) -> f64 {
    w.iter()
        .zip(b)
        .map(|(w, b)| match mode {
            Scalarization::Signed => w * b,
            Scalarization::Absolute => (w * b).abs(),
        })
        .sum()
}

/// Indices of the `k` largest attention values among unmasked steps, largest
/// first; ties go to the later step.
pub fn top_visits(attention: &[f64], mask: &[bool], k: usize) -> Result<Vec<usize>> {
    let mut live: Vec<usize> = (0..attention.len()).filter(|&t| mask[t]).collect();
    if k > live.len() {
        return Err(Error::invalid(format!("asked for {k} visits but only {} are unmasked", live.len())));
    }
    live.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(b.cmp(&a)));
    live.truncate(k);
    Ok(live)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleExplanation {
    pub patient_id: String,
    pub attention: Vec<f64>,
    pub mask: Vec<bool>,
    pub visits: Vec<VisitImportance>,
}

/// Attention profile and the top visits (up to three) with their ranked features.
pub fn explain_sample(net: &Network, sample: &SequenceSample, labels: &[String], mode: Scalarization) -> Result<SampleExplanation> {
    let trace = net.forward(sample)?;
    let k = TOP_VISITS.min(sample.unmasked());
    let visits = top_visits(&trace.attention, &sample.mask, k)?
        .into_iter()
        .map(|t| {
            Ok(VisitImportance {
                timestep: t,
                attention: trace.attention[t],
                features: feature_importance(net, sample, &trace, t, labels, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleExplanation {
        patient_id: sample.patient_id.clone(),
        attention: trace.attention,
        mask: sample.mask.clone(),
        visits,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationMode {
    /// Samples the model predicts obese.
    #[default]
    PredictedObese,
    /// Every sample passed in.
    AllTest,
}

impl PopulationMode {
    pub fn name(self) -> &'static str {
        match self {
            PopulationMode::PredictedObese => "predicted-obese",
            PopulationMode::AllTest => "all-test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub feature: String,
    pub score: f64,
    /// Samples in which the feature appeared in a top visit.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRanking {
    pub mode: PopulationMode,
    pub n_samples: usize,
    pub entries: Vec<RankEntry>,
}

impl PopulationRanking {
    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.feature == feature).map(|i| i + 1)
    }
}

/// Mean importance of each feature over all (sample, top-visit) occurrences
/// in the selected samples, sorted descending. Contributions are summed in
/// sorted order so the result does not depend on sample order.
pub fn population_ranking(
    net: &Network,
    samples: &[&SequenceSample],
    charts: &ChartSet,
    mode: PopulationMode,
    labels: &[String],
    scalar: Scalarization,
) -> Result<(PopulationRanking, Vec<SampleExplanation>)> {
    let selected: Vec<&SequenceSample> = match mode {
        PopulationMode::AllTest => samples.to_vec(),
        PopulationMode::PredictedObese => {
            let keep = samples
                .par_iter()
                .map(|s| predict(net, s, charts).map(|p| p.obese))
                .collect::<Result<Vec<bool>>>()?;
            samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| *s).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::invalid(format!("no samples selected for population mode {}", mode.name())));
    }
    let explanations = selected
        .par_iter()
        .map(|s| explain_sample(net, s, labels, scalar))
        .collect::<Result<Vec<_>>>()?;
    let mut contributions: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for e in &explanations {
        let mut seen = std::collections::HashSet::new();
        for v in &e.visits {
            for f in &v.features {
                let slot = contributions.entry(f.feature.as_str()).or_default();
                slot.0.push(f.importance);
                if seen.insert(f.feature.as_str()) {
                    slot.1 += 1;
                }
            }
        }
    }
    let mut entries: Vec<RankEntry> = contributions
        .into_iter()
        .map(|(name, (mut vals, support))| {
            vals.sort_by(f64::total_cmp);
            RankEntry {
                feature: name.to_string(),
                score: vals.iter().sum::<f64>() / vals.len() as f64,
                support,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.feature.cmp(&b.feature)));
    Ok((
        PopulationRanking {
            mode,
            n_samples: selected.len(),
            entries,
        },
        explanations,
    ))
}

/// Paths written by [`emit_reports`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub attention: PathBuf,
    pub top_visits: PathBuf,
    pub population: PathBuf,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `<prefix>_attention.csv` (one row of timestep weights per sample),
/// `<prefix>_top_visits.csv` (ranked features of each sample's top visits with
/// raw values) and `<prefix>_population.csv` (rank, feature, score, support).
pub fn emit_reports(
    dir: impl AsRef<Path>,
    prefix: &str,
    explanations: &[SampleExplanation],
    ranking: &PopulationRanking,
) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        attention: dir.join(format!("{prefix}_attention.csv")),
        top_visits: dir.join(format!("{prefix}_top_visits.csv")),
        population: dir.join(format!("{prefix}_population.csv")),
    };

    let p = &files.attention;
    let mut w = csv_writer(p)?;
    let n_steps = explanations.first().map_or(crate::cohort::N_BINS, |e| e.attention.len());
    let mut header = vec!["patient_id".to_string()];
    header.extend((0..n_steps).map(|t| format!("t{t}")));
    w.write_record(&header).map_err(|e| csv_err(p, e))?;
    for e in explanations {
        let mut row = vec![e.patient_id.clone()];
        row.extend(e.attention.iter().map(|a| a.to_string()));
        w.write_record(&row).map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &files.top_visits;
    let mut w = csv_writer(p)?;
    w.write_record(["patient_id", "visit_rank", "timestep", "attention", "feature_rank", "feature", "value", "importance"])
        .map_err(|e| csv_err(p, e))?;
    for e in explanations {
        for (vr, v) in e.visits.iter().enumerate() {
            for (fr, f) in v.features.iter().enumerate() {
                w.write_record([
                    e.patient_id.clone(),
                    (vr + 1).to_string(),
                    v.timestep.to_string(),
                    v.attention.to_string(),
                    (fr + 1).to_string(),
                    f.feature.clone(),
                    f.value.to_string(),
                    f.importance.to_string(),
                ])
                .map_err(|e| csv_err(p, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &files.population;
    let mut w = csv_writer(p)?;
    w.write_record(["rank", "feature", "score", "support"]).map_err(|e| csv_err(p, e))?;
    for (i, r) in ranking.entries.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.feature.clone(), r.score.to_string(), r.support.to_string()])
            .map_err(|e| csv_err(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;
    Ok(files)
}

/// Reads a population CSV back into ranked entries.
pub fn read_population_csv(path: impl AsRef<Path>) -> Result<Vec<RankEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: m.to_string(),
        };
        out.push(RankEntry {
            feature: rec.get(1).ok_or_else(|| bad("missing feature"))?.to_string(),
            score: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad score"))?,
            support: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad support"))?,
        });
    }
    Ok(out)
}
