//! Sub-cohort construction: prevalence filtering, observation/prediction
//! windows, 30-day binning, stratified splits and window aggregates.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ehr::{CodeKind, DemographicVocab, FeatureSchema, MedicalCode, PatientRecord, Visit, BMI_ID, WEIGHT_ID};
use crate::error::{Error, Result};
use crate::growth::ChartSet;
use crate::synth::DAYS_PER_YEAR;

pub const DEFAULT_PREVALENCE: f64 = 0.02;
pub const BIN_DAYS: u32 = 30;
pub const N_BINS: usize = 25;
pub const OBS_YEARS: u32 = 2;
pub const OBS_DAYS: u32 = 730;
/// Gap column divisor.
pub const GAP_SCALE: f64 = 730.0;
pub const N_WINDOWS: u32 = 16;
pub const OFFSETS: [u32; 3] = [1, 2, 3];
/// Minimum samples per class for a testable split.
pub const MIN_CLASS_SIZE: usize = 5;

/// Keeps codes recorded for at least `threshold` of the patients. BMI and
/// body weight are always kept.
pub fn filter_features(population: &[PatientRecord], threshold: f64) -> Result<FeatureSchema> {
    if population.is_empty() {
        return Err(Error::invalid("cannot filter features of an empty population"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("prevalence threshold {threshold} outside [0, 1]")));
    }
    let mut counts: std::collections::HashMap<MedicalCode, usize> = Default::default();
    for p in population {
        let mut seen: HashSet<(CodeKind, &str)> = HashSet::new();
        for v in &p.visits {
            for c in &v.codes {
                if seen.insert((c.kind, c.id.as_str())) {
                    *counts.entry(MedicalCode::new(c.kind, c.id.clone())).or_default() += 1;
                }
            }
        }
    }
    let n = population.len() as f64;
    let mut keep: Vec<MedicalCode> = counts
        .into_iter()
        .filter(|(_, k)| *k as f64 >= threshold * n - 1e-9)
        .map(|(c, _)| c)
        .collect();
    keep.push(MedicalCode::bmi());
    keep.push(MedicalCode::weight());
    FeatureSchema::new(keep, DemographicVocab::fit(population))
}

/// Filters features and fits measurement statistics over the population.
pub fn build_schema(population: &[PatientRecord], threshold: f64) -> Result<FeatureSchema> {
    let schema = filter_features(population, threshold)?;
    Ok(schema.fit_measurement_stats(population).0)
}

/// One (observation window, prediction age) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSpec {
    pub obs_start_year: u32,
    pub prediction_age_year: u32,
}

impl WindowSpec {
    pub fn new(obs_start_year: u32, offset: u32) -> Result<Self> {
        if obs_start_year >= N_WINDOWS || !OFFSETS.contains(&offset) {
            return Err(Error::invalid(format!(
                "no sub-cohort for window start {obs_start_year}, offset {offset}"
            )));
        }
        Ok(Self {
            obs_start_year,
            prediction_age_year: obs_start_year + OBS_YEARS + offset,
        })
    }

    /// All 48 specs, ordered by window start then offset.
    pub fn all() -> Vec<WindowSpec> {
        (0..N_WINDOWS)
            .flat_map(|s| OFFSETS.map(|k| WindowSpec::new(s, k).unwrap()))
            .collect()
    }

    /// Prediction offset in years past the end of the observation window.
    pub fn offset(&self) -> u32 {
        self.prediction_age_year - self.obs_start_year - OBS_YEARS
    }

    pub fn window_start_day(&self) -> u32 {
        year_day(self.obs_start_year)
    }

    /// Half-open observation range in days.
    pub fn observation_days(&self) -> (u32, u32) {
        let s = self.window_start_day();
        (s, s + OBS_DAYS)
    }

    /// Half-open prediction range `[age, age + 1)` years in days.
    pub fn prediction_days(&self) -> (u32, u32) {
        (year_day(self.prediction_age_year), year_day(self.prediction_age_year + 1))
    }

    pub fn label(&self) -> String {
        format!("w{:02}_a{:02}", self.obs_start_year, self.prediction_age_year)
    }
}

fn year_day(year: u32) -> u32 {
    (year as f64 * DAYS_PER_YEAR).floor() as u32
}

/// Binned input for one patient and window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRepr", into = "SampleRepr")]
pub struct SequenceSample {
    pub patient_id: String,
    /// 25 rows of width |V| + 1; the last column is the gap feature.
    pub x: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub demo: Vec<f64>,
    /// Aggregate feature vector used by the baselines.
    pub aggregate: Vec<f64>,
    pub target_bmi: f64,
    pub label: bool,
    pub sex: String,
    /// Age in days of the target reading.
    pub target_age_days: f64,
}

/// Sparse on-disk layout: each row lists its non-zero (column, value) pairs.
#[derive(Serialize, Deserialize)]
struct SampleRepr {
    patient_id: String,
    width: usize,
    rows: Vec<Vec<(u32, f64)>>,
    mask: Vec<bool>,
    demo: Vec<f64>,
    aggregate: Vec<f64>,
    target_bmi: f64,
    label: bool,
    sex: String,
    target_age_days: f64,
}

impl From<SequenceSample> for SampleRepr {
    fn from(s: SequenceSample) -> Self {
        let width = s.x.first().map_or(0, Vec::len);
        let rows = s
            .x
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j as u32, *v))
                    .collect()
            })
            .collect();
        SampleRepr {
            patient_id: s.patient_id,
            width,
            rows,
            mask: s.mask,
            demo: s.demo,
            aggregate: s.aggregate,
            target_bmi: s.target_bmi,
            label: s.label,
            sex: s.sex,
            target_age_days: s.target_age_days,
        }
    }
}

impl TryFrom<SampleRepr> for SequenceSample {
    type Error = Error;

    fn try_from(r: SampleRepr) -> Result<Self> {
        if r.rows.len() != N_BINS || r.mask.len() != N_BINS {
            return Err(Error::invalid(format!("sample {} does not have {N_BINS} rows", r.patient_id)));
        }
        let mut x = vec![vec![0.0; r.width]; N_BINS];
        for (row, entries) in x.iter_mut().zip(&r.rows) {
            for &(j, v) in entries {
                let slot = row
                    .get_mut(j as usize)
                    .ok_or_else(|| Error::invalid(format!("column {j} outside width {}", r.width)))?;
                *slot = v;
            }
        }
        Ok(SequenceSample {
            patient_id: r.patient_id,
            x,
            mask: r.mask,
            demo: r.demo,
            aggregate: r.aggregate,
            target_bmi: r.target_bmi,
            label: r.label,
            sex: r.sex,
            target_age_days: r.target_age_days,
        })
    }
}

impl SequenceSample {
    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

fn visit_cmp(a: &Visit, b: &Visit) -> Ordering {
    a.start_day
        .cmp(&b.start_day)
        .then(a.end_day.cmp(&b.end_day))
        .then_with(|| {
            let key = |v: &Visit| -> Vec<(CodeKind, String, u64)> {
                v.codes
                    .iter()
                    .map(|c| (c.kind, c.id.clone(), c.value.map_or(0, f64::to_bits)))
                    .collect()
            };
            key(a).cmp(&key(b))
        })
}

/// Collapses the visits starting inside `[start, start + 730)` into 25
/// thirty-day bins (the last covers days 720..729). Binary codes are OR-ed,
/// measurements averaged then normalized. A bin is unmasked when its row is
/// non-zero; its gap column holds the days since the previous unmasked bin's
/// last visit over 730 (0 for the first).
pub fn bin_visits(visits: &[Visit], window_start_day: u32, schema: &FeatureSchema) -> (Vec<Vec<f64>>, Vec<bool>) {
    let v_len = schema.len();
    let end = window_start_day + OBS_DAYS;
    let mut sorted: Vec<&Visit> = visits
        .iter()
        .filter(|v| v.start_day >= window_start_day && v.start_day < end)
        .collect();
    sorted.sort_by(|a, b| visit_cmp(a, b));

    let mut rows = vec![vec![0.0; v_len + 1]; N_BINS];
    let mut mask = vec![false; N_BINS];
    let mut sums = vec![vec![0.0; v_len]; N_BINS];
    let mut counts = vec![vec![0u32; v_len]; N_BINS];
    let mut first_day = [u32::MAX; N_BINS];
    let mut last_day = [0u32; N_BINS];
    for v in &sorted {
        let bin = (((v.start_day - window_start_day) / BIN_DAYS) as usize).min(N_BINS - 1);
        first_day[bin] = first_day[bin].min(v.start_day);
        last_day[bin] = last_day[bin].max(v.start_day);
        for c in &v.codes {
            let Some(slot) = schema.slot(c.kind, &c.id) else {
                continue;
            };
            if c.kind.is_binary() {
                rows[bin][slot] = 1.0;
            } else if let Some(x) = c.value {
                sums[bin][slot] += x;
                counts[bin][slot] += 1;
            }
        }
    }
    let mut prev_last: Option<u32> = None;
    for bin in 0..N_BINS {
        for slot in 0..v_len {
            if counts[bin][slot] > 0 {
                let mean = sums[bin][slot] / counts[bin][slot] as f64;
                rows[bin][slot] = schema.normalize(slot, mean);
            }
        }
        let gap = prev_last.map_or(0.0, |p| (first_day[bin] - p) as f64 / GAP_SCALE);
        let occupied = first_day[bin] != u32::MAX;
        let present = rows[bin][..v_len].iter().any(|x| *x != 0.0) || (occupied && gap != 0.0);
        if occupied && present {
            rows[bin][v_len] = gap;
            mask[bin] = true;
            prev_last = Some(last_day[bin]);
        } else {
            rows[bin].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    (rows, mask)
}

/// Column names of [`aggregate_window`]'s output.
pub fn aggregate_columns(schema: &FeatureSchema) -> Vec<String> {
    let mut cols: Vec<String> = schema
        .features()
        .iter()
        .map(|f| {
            if f.kind.is_binary() {
                format!("count:{}", f.label())
            } else {
                format!("mean:{}", f.label())
            }
        })
        .collect();
    for c in [
        "max_bmi",
        "latest_bmi",
        "max_weight",
        "latest_weight",
        "bmi_missing",
        "weight_missing",
    ] {
        cols.push(c.to_string());
    }
    let vocab = schema.demographics();
    for (name, block) in ["sex", "race", "ethnicity", "zip", "insurance"].iter().zip(vocab.blocks()) {
        for v in block {
            cols.push(format!("{name}={v}"));
        }
        cols.push(format!("{name}=unknown"));
    }
    cols
}

/// Flat window summary: occurrence counts for binary codes, normalized window
/// means for measurements (0 when absent), raw max/latest BMI and weight with
/// missing indicators, then the demographic one-hot.
pub fn aggregate_window(patient: &PatientRecord, window_start_day: u32, schema: &FeatureSchema) -> Vec<f64> {
    let v_len = schema.len();
    let end = window_start_day + OBS_DAYS;
    let mut sorted: Vec<&Visit> = patient
        .visits
        .iter()
        .filter(|v| v.start_day >= window_start_day && v.start_day < end)
        .collect();
    sorted.sort_by(|a, b| visit_cmp(a, b));

    let mut out = vec![0.0; v_len];
    let mut sums = vec![0.0; v_len];
    let mut counts = vec![0u32; v_len];
    let mut bmi: Option<(f64, f64)> = None;
    let mut weight: Option<(f64, f64)> = None;
    for v in &sorted {
        for c in &v.codes {
            if let Some(slot) = schema.slot(c.kind, &c.id) {
                if c.kind.is_binary() {
                    out[slot] += 1.0;
                } else if let Some(x) = c.value {
                    sums[slot] += x;
                    counts[slot] += 1;
                }
            }
            if c.kind == CodeKind::Measurement {
                if let Some(x) = c.value {
                    let track = match c.id.as_str() {
                        BMI_ID => &mut bmi,
                        WEIGHT_ID => &mut weight,
                        _ => continue,
                    };
                    *track = Some(match *track {
                        Some((max, _)) => (max.max(x), x),
                        None => (x, x),
                    });
                }
            }
        }
    }
    for slot in 0..v_len {
        if counts[slot] > 0 {
            out[slot] = schema.normalize(slot, sums[slot] / counts[slot] as f64);
        }
    }
    let (bmi_max, bmi_last) = bmi.unwrap_or((0.0, 0.0));
    let (w_max, w_last) = weight.unwrap_or((0.0, 0.0));
    out.extend([
        bmi_max,
        bmi_last,
        w_max,
        w_last,
        f64::from(u8::from(bmi.is_none())),
        f64::from(u8::from(weight.is_none())),
    ]);
    out.extend(schema.encode_demographics(&patient.demographics));
    out
}

/// BMI reading nearest the prediction birthday inside the prediction year.
pub fn prediction_target(patient: &PatientRecord, spec: &WindowSpec) -> Option<(u32, f64)> {
    let (lo, hi) = spec.prediction_days();
    patient
        .bmi_series()
        .into_iter()
        .filter(|(d, _)| *d >= lo && *d < hi)
        .min_by_key(|(d, _)| *d - lo)
}

/// Builds the sample for `patient` under `spec`, or `None` when the patient
/// lacks an observation-window visit or a prediction-year BMI reading.
pub fn build_sample(
    patient: &PatientRecord,
    spec: &WindowSpec,
    schema: &FeatureSchema,
    charts: &ChartSet,
) -> Result<Option<SequenceSample>> {
    let Some((day, bmi)) = prediction_target(patient, spec) else {
        return Ok(None);
    };
    let start = spec.window_start_day();
    let (x, mask) = bin_visits(&patient.visits, start, schema);
    if !mask.iter().any(|m| *m) {
        return Ok(None);
    }
    let sex = patient.demographics.sex.clone();
    let label = charts.classify_obese(&sex, day as f64, bmi)?;
    Ok(Some(SequenceSample {
        patient_id: patient.patient_id.clone(),
        x,
        mask,
        demo: schema.encode_demographics(&patient.demographics),
        aggregate: aggregate_window(patient, start, schema),
        target_bmi: bmi,
        label,
        sex,
        target_age_days: day as f64,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubCohort {
    pub spec: WindowSpec,
    pub samples: Vec<SequenceSample>,
    pub split: Vec<Split>,
    pub split_seed: u64,
    /// Set when a class has fewer than five samples; everything is in train.
    pub untestable: bool,
}

impl SubCohort {
    pub fn class_counts(&self) -> (usize, usize) {
        let obese = self.samples.iter().filter(|s| s.label).count();
        (obese, self.samples.len() - obese)
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn part(&self, which: Split) -> Vec<&SequenceSample> {
        self.indices(which).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Obese counts for the valid and test slices. Slice sizes are
/// `round(0.2·n)` each; the obese counts are chosen so every slice's obese
/// share is as close as possible to the overall one.
fn slice_quotas(n_pos: usize, n_neg: usize) -> (usize, usize) {
    let n = n_pos + n_neg;
    let size = (n as f64 * 0.2).round() as usize;
    let train = n - 2 * size;
    let rate = n_pos as f64 / n as f64;
    let ideal = size as f64 * rate;
    let lo = (ideal.floor() as usize).saturating_sub(2);
    let hi = ideal.ceil() as usize + 2;
    let mut best = (f64::INFINITY, f64::INFINITY, 0, 0);
    for v in lo..=hi {
        for t in lo..=hi {
            if v + t > n_pos || v > size || t > size || (size - v) + (size - t) > n_neg {
                continue;
            }
            let devs = [
                (v as f64 - ideal).abs(),
                (t as f64 - ideal).abs(),
                ((n_pos - v - t) as f64 - train as f64 * rate).abs(),
            ];
            let worst = devs.iter().copied().fold(0.0, f64::max);
            let total: f64 = devs.iter().sum();
            if (worst, total) < (best.0, best.1) {
                best = (worst, total, v, t);
            }
        }
    }
    (best.2, best.3)
}

/// 60/20/20 split stratified by label. Returns the assignment and whether the
/// cohort was too small to split (all samples then go to train).
pub fn stratified_split(labels: &[bool], seed: u64) -> (Vec<Split>, bool) {
    let mut out = vec![Split::Train; labels.len()];
    let classes: [Vec<usize>; 2] = [
        (0..labels.len()).filter(|&i| labels[i]).collect(),
        (0..labels.len()).filter(|&i| !labels[i]).collect(),
    ];
    if classes.iter().any(|c| c.len() < MIN_CLASS_SIZE) {
        return (out, true);
    }
    let (n_pos, n_neg) = (classes[0].len(), classes[1].len());
    let size = ((n_pos + n_neg) as f64 * 0.2).round() as usize;
    let (v_pos, t_pos) = slice_quotas(n_pos, n_neg);
    let quota = [(v_pos, t_pos), (size - v_pos, size - t_pos)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (c, members) in classes.iter().enumerate() {
        let mut idx = members.clone();
        idx.shuffle(&mut rng);
        let (n_valid, n_test) = quota[c];
        let n_train = idx.len() - n_valid - n_test;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    (out, false)
}

/// Seed for one sub-cohort's split, derived from the run seed.
pub fn split_seed(run_seed: u64, spec: &WindowSpec) -> u64 {
    run_seed ^ (u64::from(spec.obs_start_year) << 32 | u64::from(spec.prediction_age_year)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn build_subcohort(
    population: &[PatientRecord],
    spec: WindowSpec,
    schema: &FeatureSchema,
    charts: &ChartSet,
    seed: u64,
) -> Result<SubCohort> {
    let mut samples = Vec::new();
    for p in population {
        if let Some(s) = build_sample(p, &spec, schema, charts)? {
            samples.push(s);
        }
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let split_seed = split_seed(seed, &spec);
    let (split, untestable) = stratified_split(&labels, split_seed);
    Ok(SubCohort {
        spec,
        samples,
        split,
        split_seed,
        untestable,
    })
}

/// All 48 sub-cohorts, built in parallel.
pub fn enumerate_subcohorts(
    population: &[PatientRecord],
    schema: &FeatureSchema,
    charts: &ChartSet,
    seed: u64,
) -> Result<Vec<SubCohort>> {
    WindowSpec::all()
        .into_par_iter()
        .map(|spec| build_subcohort(population, spec, schema, charts, seed))
        .collect()
}

/// Baseline design matrix and targets for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateDataset {
    pub columns: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub labels: Vec<bool>,
    pub sex: Vec<String>,
    pub age_days: Vec<f64>,
}

impl AggregateDataset {
    pub fn from_samples<'a>(columns: Vec<String>, samples: impl IntoIterator<Item = &'a SequenceSample>) -> Self {
        let mut d = AggregateDataset {
            columns,
            x: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
            sex: Vec::new(),
            age_days: Vec::new(),
        };
        for s in samples {
            d.x.push(s.aggregate.clone());
            d.targets.push(s.target_bmi);
            d.labels.push(s.label);
            d.sex.push(s.sex.clone());
            d.age_days.push(s.target_age_days);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        AggregateDataset {
            columns: self.columns.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sex: idx.iter().map(|&i| self.sex[i].clone()).collect(),
            age_days: idx.iter().map(|&i| self.age_days[i]).collect(),
        }
    }
}

/// One line of the cohort index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortIndexEntry {
    pub spec: WindowSpec,
    pub name: String,
    pub file: String,
    pub n_samples: usize,
    pub n_obese: usize,
    pub n_non_obese: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub untestable: bool,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    pub seed: u64,
    pub threshold: f64,
    pub n_features: usize,
    pub cohorts: Vec<CohortIndexEntry>,
}

pub const SCHEMA_FILE: &str = "schema.json";
pub const INDEX_FILE: &str = "index.json";

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let text = if pretty {
        serde_json::to_string_pretty(value)?
    } else {
        serde_json::to_string(value)?
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `schema.json`, one `<name>.json` bundle per sub-cohort and `index.json`.
pub fn save_cohorts(
    dir: impl AsRef<Path>,
    schema: &FeatureSchema,
    cohorts: &[SubCohort],
    seed: u64,
    threshold: f64,
) -> Result<CohortIndex> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    schema.save(dir.join(SCHEMA_FILE))?;
    let mut entries = Vec::with_capacity(cohorts.len());
    for c in cohorts {
        let name = c.spec.label();
        let file = format!("{name}.json");
        write_json(&dir.join(&file), c, false)?;
        let (n_obese, n_non_obese) = c.class_counts();
        let count = |w| c.split.iter().filter(|s| **s == w).count();
        entries.push(CohortIndexEntry {
            spec: c.spec,
            name,
            file,
            n_samples: c.samples.len(),
            n_obese,
            n_non_obese,
            n_train: count(Split::Train),
            n_valid: count(Split::Valid),
            n_test: count(Split::Test),
            split_seed: c.split_seed,
            untestable: c.untestable,
            empty: c.is_empty(),
        });
    }
    let index = CohortIndex {
        seed,
        threshold,
        n_features: schema.len(),
        cohorts: entries,
    };
    write_json(&dir.join(INDEX_FILE), &index, true)?;
    Ok(index)
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<CohortIndex> {
    read_json(&dir.as_ref().join(INDEX_FILE))
}

pub fn load_schema(dir: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = dir.as_ref().join(SCHEMA_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    FeatureSchema::load(path)
}

pub fn load_cohort(dir: impl AsRef<Path>, entry: &CohortIndexEntry) -> Result<SubCohort> {
    read_json(&dir.as_ref().join(&entry.file))
}

/// Loads every sub-cohort listed in the index, in index order.
pub fn load_cohorts(dir: impl AsRef<Path>) -> Result<(FeatureSchema, Vec<SubCohort>)> {
    let dir = dir.as_ref();
    let index = load_index(dir)?;
    let schema = load_schema(dir)?;
    let cohorts = index
        .cohorts
        .par_iter()
        .map(|e| load_cohort(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((schema, cohorts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{CodeEntry, Demographics};
    use proptest::prelude::*;

    fn patient(id: &str, visits: Vec<Visit>) -> PatientRecord {
        let demo = Demographics {
            sex: "F".into(),
            ..Default::default()
        };
        PatientRecord::new(id, demo, visits).unwrap()
    }

    fn visit(day: u32, codes: Vec<CodeEntry>) -> Visit {
        Visit::new(day, day, codes).unwrap()
    }

    fn cond(id: &str) -> CodeEntry {
        CodeEntry::flag(CodeKind::Condition, id)
    }

    fn population_with(code_holders: usize, n: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| {
                let mut codes = vec![CodeEntry::measurement(BMI_ID, 16.0)];
                if i < code_holders {
                    codes.push(cond("c_x"));
                }
                patient(&format!("p{i}"), vec![visit(10, codes)])
            })
            .collect()
    }

    fn schema_of(codes: &[MedicalCode]) -> FeatureSchema {
        FeatureSchema::new(codes.iter().cloned(), DemographicVocab::default()).unwrap()
    }

    #[test]
    fn prevalence_boundary() {
        let keeps = |k, n| {
            filter_features(&population_with(k, n), 0.02)
                .unwrap()
                .slot(CodeKind::Condition, "c_x")
                .is_some()
        };
        assert!(!keeps(1, 100));
        assert!(keeps(2, 100));
        assert!(keeps(20, 1000));
        assert!(!keeps(19, 1000));
        assert!(filter_features(&[], 0.02).is_err());
    }

    #[test]
    fn bmi_and_weight_survive_filtering() {
        let pop = population_with(0, 10);
        let s = filter_features(&pop, 0.9).unwrap();
        assert!(s.bmi_slot().is_some());
        assert!(s.weight_slot().is_some());
        let s = filter_features(&pop, 1.0).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn sixteen_windows_and_forty_eight_cohorts() {
        let all = WindowSpec::all();
        assert_eq!(all.len(), 48);
        let starts: HashSet<u32> = all.iter().map(|s| s.obs_start_year).collect();
        assert_eq!(starts.len(), 16);
        for s in &all {
            let k = s.offset();
            assert!((1..=3).contains(&k));
            assert_eq!(s.prediction_age_year, s.obs_start_year + 2 + k);
            let (lo, hi) = s.observation_days();
            assert_eq!(hi - lo, 730);
            assert!(hi <= s.prediction_days().0);
        }
        assert!(WindowSpec::new(16, 1).is_err());
        assert!(WindowSpec::new(0, 4).is_err());
        assert_eq!((729 / BIN_DAYS) as usize, N_BINS - 1);
    }

    #[test]
    fn or_semantics_and_measurement_mean() {
        let mut schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c"), MedicalCode::bmi()]);
        let pop = vec![patient(
            "a",
            vec![
                visit(3, vec![cond("c"), CodeEntry::measurement(BMI_ID, 16.0)]),
                visit(17, vec![cond("c"), CodeEntry::measurement(BMI_ID, 18.0)]),
                visit(50, vec![CodeEntry::measurement(BMI_ID, 20.0)]),
            ],
        )];
        schema = schema.fit_measurement_stats(&pop).0;
        let (x, mask) = bin_visits(&pop[0].visits, 0, &schema);
        let c = schema.slot(CodeKind::Condition, "c").unwrap();
        let b = schema.bmi_slot().unwrap();
        assert_eq!(x.len(), 25);
        assert_eq!(x[0][c], 1.0);
        // stats over {16, 18, 20}: mean 18, population std sqrt(8/3)
        let expected = (17.0 - 18.0) / (8.0f64 / 3.0).sqrt();
        assert!((x[0][b] - expected).abs() < 1e-12);
        assert_eq!(mask.iter().filter(|m| **m).count(), 2);
        assert!(mask[0] && mask[1]);
        assert_eq!(x[0][schema.len()], 0.0);
        assert!((x[1][schema.len()] - 33.0 / 730.0).abs() < 1e-15);
    }

    #[test]
    fn last_bin_is_clamped_and_outside_visits_ignored() {
        let schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c")]);
        let vs = vec![
            visit(100, vec![cond("c")]),
            visit(829, vec![cond("c")]),
            visit(830, vec![cond("c")]),
            visit(99, vec![cond("c")]),
        ];
        let (x, mask) = bin_visits(&vs, 100, &schema);
        assert!(mask[0] && mask[24]);
        assert_eq!(mask.iter().filter(|m| **m).count(), 2);
        assert!((x[24][1] - 729.0 / 730.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_counts_and_bmi_extremes() {
        let schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c"), MedicalCode::bmi(), MedicalCode::weight()]);
        let p = patient(
            "a",
            vec![
                visit(5, vec![cond("c"), CodeEntry::measurement(BMI_ID, 16.0)]),
                visit(40, vec![cond("c"), CodeEntry::measurement(BMI_ID, 18.0)]),
                visit(90, vec![cond("c"), CodeEntry::measurement(BMI_ID, 17.0)]),
                visit(900, vec![cond("c")]),
            ],
        );
        let a = aggregate_window(&p, 0, &schema);
        let cols = aggregate_columns(&schema);
        assert_eq!(a.len(), cols.len());
        let at = |name: &str| a[cols.iter().position(|c| c == name).unwrap()];
        assert_eq!(at("count:condition:c"), 3.0);
        assert_eq!(at("max_bmi"), 18.0);
        assert_eq!(at("latest_bmi"), 17.0);
        assert_eq!(at("bmi_missing"), 0.0);
        assert_eq!(at("max_weight"), 0.0);
        assert_eq!(at("weight_missing"), 1.0);
    }

    #[test]
    fn split_examples() {
        let labels: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let (s, flagged) = stratified_split(&labels, 9);
        assert!(!flagged);
        let count = |w: Split, obese: bool| {
            (0..100).filter(|&i| s[i] == w && labels[i] == obese).count()
        };
        assert_eq!((count(Split::Train, true), count(Split::Train, false)), (18, 42));
        assert_eq!((count(Split::Valid, true), count(Split::Valid, false)), (6, 14));
        assert_eq!((count(Split::Test, true), count(Split::Test, false)), (6, 14));
        assert_eq!(stratified_split(&labels, 9).0, s);

        let small: Vec<bool> = (0..40).map(|i| i < 4).collect();
        let (s, flagged) = stratified_split(&small, 1);
        assert!(flagged);
        assert!(s.iter().all(|x| *x == Split::Train));
    }

    /// Brute-force check of split sizes and per-class balance.
    fn check_split(labels: &[bool], split: &[Split]) -> std::result::Result<(), String> {
        let n = labels.len() as f64;
        let pos = labels.iter().filter(|l| **l).count() as f64;
        for (w, frac) in [(Split::Train, 0.6), (Split::Valid, 0.2), (Split::Test, 0.2)] {
            let size = split.iter().filter(|s| **s == w).count() as f64;
            if (size - frac * n).abs() > 1.0 {
                return Err(format!("{w:?} size {size} vs {}", frac * n));
            }
            let obese = (0..labels.len()).filter(|&i| split[i] == w && labels[i]).count() as f64;
            if (obese - size * pos / n).abs() > 1.0 {
                return Err(format!("{w:?} obese {obese} vs {}", size * pos / n));
            }
        }
        Ok(())
    }

    #[test]
    fn hundred_and_one_samples() {
        let labels: Vec<bool> = (0..101).map(|i| i % 3 == 0).collect();
        let (s, _) = stratified_split(&labels, 4);
        let sizes = [Split::Train, Split::Valid, Split::Test].map(|w| s.iter().filter(|x| **x == w).count());
        assert_eq!(sizes, [61, 20, 20]);
        check_split(&labels, &s).unwrap();
    }

    #[test]
    fn bundle_roundtrip() {
        let schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c"), MedicalCode::bmi()]);
        let charts = ChartSet::synthetic();
        let pop: Vec<PatientRecord> = (0..30)
            .map(|i| {
                patient(
                    &format!("p{i}"),
                    vec![
                        visit(10 + i, vec![cond("c"), CodeEntry::measurement(BMI_ID, 16.0)]),
                        visit(1100 + i, vec![CodeEntry::measurement(BMI_ID, 15.0 + i as f64 * 0.3)]),
                    ],
                )
            })
            .collect();
        let spec = WindowSpec::new(0, 1).unwrap();
        let c = build_subcohort(&pop, spec, &schema, &charts, 5).unwrap();
        assert_eq!(c.samples.len(), 30);
        let dir = tempfile::tempdir().unwrap();
        let index = save_cohorts(dir.path(), &schema, &[c.clone()], 5, 0.02).unwrap();
        assert_eq!(index.cohorts[0].n_samples, 30);
        let (s2, back) = load_cohorts(dir.path()).unwrap();
        assert_eq!(s2, schema);
        assert_eq!(back[0], c);
    }

    proptest! {
        #[test]
        fn splits_partition_and_balance(n in 10usize..300, pos_frac in 0.05f64..0.95, seed in any::<u64>()) {
            let labels: Vec<bool> = (0..n).map(|i| (i as f64) < pos_frac * n as f64).collect();
            let (s, flagged) = stratified_split(&labels, seed);
            prop_assert_eq!(s.len(), n);
            if !flagged {
                prop_assert!(check_split(&labels, &s).is_ok(), "{:?}", check_split(&labels, &s));
            }
        }

        #[test]
        fn binning_is_order_invariant_and_masks_match_rows(
            days in proptest::collection::vec(0u32..800, 1..25),
            flags in proptest::collection::vec(any::<bool>(), 25),
            seed in any::<u64>(),
        ) {
            let schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c"), MedicalCode::bmi()]);
            let visits: Vec<Visit> = days
                .iter()
                .zip(&flags)
                .map(|(&d, &f)| {
                    let mut codes = vec![CodeEntry::measurement(BMI_ID, 10.0 + d as f64 / 7.0)];
                    if f {
                        codes.push(cond("c"));
                    }
                    visit(d, codes)
                })
                .collect();
            let (x, mask) = bin_visits(&visits, 0, &schema);
            let mut shuffled = visits.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (x2, mask2) = bin_visits(&shuffled, 0, &schema);
            prop_assert_eq!(&x, &x2);
            prop_assert_eq!(&mask, &mask2);
            prop_assert_eq!(x.len(), N_BINS);
            for (row, m) in x.iter().zip(&mask) {
                prop_assert_eq!(*m, row.iter().any(|v| *v != 0.0));
            }
        }

        #[test]
        fn aggregate_counts_match_scan(days in proptest::collection::vec(0u32..1000, 0..30), start in 0u32..200) {
            let schema = schema_of(&[MedicalCode::new(CodeKind::Condition, "c")]);
            let p = patient("a", days.iter().map(|&d| visit(d, vec![cond("c")])).collect());
            let a = aggregate_window(&p, start, &schema);
            let brute = days.iter().filter(|&&d| d >= start && d < start + 730).count();
            prop_assert_eq!(a[0], brute as f64);
        }
    }
}
