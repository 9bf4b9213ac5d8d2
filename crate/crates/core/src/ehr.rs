//! EHR data model: codes, visits, patients, and the feature schema that maps
//! them onto fixed-width visit vectors.
//!
//! A visit vector is the concatenation of binary condition, drug and procedure
//! slots followed by normalized measurement slots. The slot order is owned by
//! [`FeatureSchema`], which also carries the demographic vocabularies and the
//! per-measurement normalization statistics fitted on the training split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurement id carrying body-mass index readings.
pub const BMI_ID: &str = "bmi";
/// Measurement id carrying body weight (kg) readings.
pub const WEIGHT_ID: &str = "body_weight";
/// Reserved demographic category for missing or unseen values.
pub const UNKNOWN: &str = "unknown";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Condition,
    Drug,
    Procedure,
    Measurement,
}

impl CodeKind {
    pub const ALL: [CodeKind; 4] = [
        CodeKind::Condition,
        CodeKind::Drug,
        CodeKind::Procedure,
        CodeKind::Measurement,
    ];

    pub fn is_binary(self) -> bool {
        self != CodeKind::Measurement
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MedicalCode {
    pub kind: CodeKind,
    pub id: String,
}

impl MedicalCode {
    pub fn new(kind: CodeKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
        }
    }

    pub fn bmi() -> Self {
        Self::new(CodeKind::Measurement, BMI_ID)
    }

    pub fn weight() -> Self {
        Self::new(CodeKind::Measurement, WEIGHT_ID)
    }
}

/// One code recorded at a visit. `value` is required for measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub kind: CodeKind,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl CodeEntry {
    pub fn flag(kind: CodeKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
            value: None,
        }
    }

    pub fn measurement(id: impl Into<String>, value: f64) -> Self {
        Self {
            kind: CodeKind::Measurement,
            id: id.into(),
            value: Some(value),
        }
    }

    fn same_code(&self, other: &CodeEntry) -> bool {
        self.kind == other.kind && self.id == other.id
    }
}

#[derive(Deserialize)]
struct VisitRepr {
    start_day: u32,
    end_day: u32,
    #[serde(default)]
    codes: Vec<CodeEntry>,
}

/// A clinical encounter, timed in whole days since birth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VisitRepr")]
pub struct Visit {
    pub start_day: u32,
    pub end_day: u32,
    pub codes: Vec<CodeEntry>,
}

impl TryFrom<VisitRepr> for Visit {
    type Error = Error;

    fn try_from(r: VisitRepr) -> Result<Self> {
        Visit::new(r.start_day, r.end_day, r.codes)
    }
}

impl Visit {
    /// Validates the visit and collapses duplicate codes. For duplicated
    /// measurements the last recorded value is kept. Drug values are dropped:
    /// drugs are always binary presence.
    pub fn new(start_day: u32, end_day: u32, codes: Vec<CodeEntry>) -> Result<Self> {
        if end_day < start_day {
            return Err(Error::invalid(format!(
                "visit ends (day {end_day}) before it starts (day {start_day})"
            )));
        }
        let mut out: Vec<CodeEntry> = Vec::with_capacity(codes.len());
        for mut code in codes {
            if code.id.is_empty() {
                return Err(Error::invalid("empty code id"));
            }
            match code.kind {
                CodeKind::Measurement => match code.value {
                    Some(v) if v.is_finite() => {}
                    Some(v) => {
                        return Err(Error::invalid(format!(
                            "non-finite value {v} for measurement {}",
                            code.id
                        )))
                    }
                    None => {
                        return Err(Error::invalid(format!(
                            "measurement {} has no value",
                            code.id
                        )))
                    }
                },
                CodeKind::Drug => code.value = None,
                CodeKind::Condition | CodeKind::Procedure => {
                    if code.value.is_some() {
                        return Err(Error::invalid(format!(
                            "{:?} code {} must not carry a value",
                            code.kind, code.id
                        )));
                    }
                }
            }
            match out.iter_mut().find(|c| c.same_code(&code)) {
                Some(existing) => existing.value = code.value,
                None => out.push(code),
            }
        }
        Ok(Self {
            start_day,
            end_day,
            codes: out,
        })
    }

    pub fn measurement(&self, id: &str) -> Option<f64> {
        self.codes
            .iter()
            .find(|c| c.kind == CodeKind::Measurement && c.id == id)
            .and_then(|c| c.value)
    }

    pub fn has_code(&self, kind: CodeKind, id: &str) -> bool {
        self.codes.iter().any(|c| c.kind == kind && c.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: String,
    pub race: String,
    pub ethnicity: String,
    pub zip: String,
    pub insurance: String,
}

impl Default for Demographics {
    fn default() -> Self {
        Self {
            sex: UNKNOWN.into(),
            race: UNKNOWN.into(),
            ethnicity: UNKNOWN.into(),
            zip: UNKNOWN.into(),
            insurance: UNKNOWN.into(),
        }
    }
}

impl Demographics {
    pub fn fields(&self) -> [&str; 5] {
        [
            &self.sex,
            &self.race,
            &self.ethnicity,
            &self.zip,
            &self.insurance,
        ]
    }
}

#[derive(Deserialize)]
struct PatientRepr {
    patient_id: String,
    demographics: Demographics,
    #[serde(default)]
    visits: Vec<Visit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PatientRepr")]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub visits: Vec<Visit>,
}

impl TryFrom<PatientRepr> for PatientRecord {
    type Error = Error;

    fn try_from(r: PatientRepr) -> Result<Self> {
        PatientRecord::new(r.patient_id, r.demographics, r.visits)
    }
}

impl PatientRecord {
    /// Builds a record, sorting visits by start day (stable).
    pub fn new(
        patient_id: impl Into<String>,
        demographics: Demographics,
        mut visits: Vec<Visit>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if patient_id.is_empty() {
            return Err(Error::invalid("empty patient id"));
        }
        visits.sort_by_key(|v| v.start_day);
        Ok(Self {
            patient_id,
            demographics,
            visits,
        })
    }

    /// Raw (age_day, value) readings for one measurement, in visit order.
    pub fn measurement_series(&self, id: &str) -> Vec<(u32, f64)> {
        self.visits
            .iter()
            .filter_map(|v| v.measurement(id).map(|x| (v.start_day, x)))
            .collect()
    }

    pub fn bmi_series(&self) -> Vec<(u32, f64)> {
        self.measurement_series(BMI_ID)
    }

    pub fn weight_series(&self) -> Vec<(u32, f64)> {
        self.measurement_series(WEIGHT_ID)
    }
}

/// Reads a JSON-lines population file. Blank lines are skipped.
pub fn read_population(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message,
        };
        let record: PatientRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(record.patient_id.clone()) {
            return Err(parse_err(format!(
                "duplicate patient id {}",
                record.patient_id
            )));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_population(path: impl AsRef<Path>, patients: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in patients {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation (divide by n) of one measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeasurementStats {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            count: 0,
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }

    /// Zero-variance (or empty) statistics map every value to 0.
    pub fn normalize(&self, x: f64) -> f64 {
        if self.std > 0.0 {
            (x - self.mean) / self.std
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub kind: CodeKind,
    pub id: String,
    /// Normalization statistics; only present on measurement features once fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<MeasurementStats>,
}

impl Feature {
    pub fn code(&self) -> MedicalCode {
        MedicalCode::new(self.kind, self.id.clone())
    }

    /// Display name of the form `kind:id`.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            CodeKind::Condition => "condition",
            CodeKind::Drug => "drug",
            CodeKind::Procedure => "procedure",
            CodeKind::Measurement => "measurement",
        };
        format!("{kind}:{}", self.id)
    }
}

/// Category lists per demographic field, each without the reserved unknown value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemographicVocab {
    pub sex: Vec<String>,
    pub race: Vec<String>,
    pub ethnicity: Vec<String>,
    pub zip: Vec<String>,
    pub insurance: Vec<String>,
}

impl DemographicVocab {
    pub fn fit<'a>(patients: impl IntoIterator<Item = &'a PatientRecord>) -> Self {
        let mut sets: [BTreeSet<String>; 5] = Default::default();
        for p in patients {
            for (set, v) in sets.iter_mut().zip(p.demographics.fields()) {
                if v != UNKNOWN && !v.is_empty() {
                    set.insert(v.to_string());
                }
            }
        }
        let [sex, race, ethnicity, zip, insurance] = sets.map(|s| s.into_iter().collect());
        Self {
            sex,
            race,
            ethnicity,
            zip,
            insurance,
        }
    }

    pub fn blocks(&self) -> [&[String]; 5] {
        [
            &self.sex,
            &self.race,
            &self.ethnicity,
            &self.zip,
            &self.insurance,
        ]
    }

    /// Width of the one-hot encoding: each block has a trailing unknown slot.
    pub fn dim(&self) -> usize {
        self.blocks().iter().map(|b| b.len() + 1).sum()
    }

    pub fn encode(&self, demo: &Demographics) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut offset = 0;
        for (block, value) in self.blocks().iter().zip(demo.fields()) {
            let slot = block
                .iter()
                .position(|c| c == value)
                .unwrap_or(block.len());
            out[offset + slot] = 1.0;
            offset += block.len() + 1;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    features: Vec<Feature>,
    demographics: DemographicVocab,
}

/// Ordered feature space: conditions, drugs, procedures, then measurements,
/// each block sorted by id. Slot indices are dense `0..len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FeatureSchema {
    features: Vec<Feature>,
    demographics: DemographicVocab,
    index: HashMap<(CodeKind, String), usize>,
}

impl From<FeatureSchema> for SchemaRepr {
    fn from(s: FeatureSchema) -> Self {
        SchemaRepr {
            features: s.features,
            demographics: s.demographics,
        }
    }
}

impl TryFrom<SchemaRepr> for FeatureSchema {
    type Error = Error;

    fn try_from(r: SchemaRepr) -> Result<Self> {
        Self::from_features(r.features, r.demographics)
    }
}

/// Report from fitting measurement statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsReport {
    /// Measurements with no recorded values in the fitting set.
    pub empty_measurements: Vec<String>,
}

impl FeatureSchema {
    /// Builds a schema from a code set; codes are sorted into canonical order
    /// and duplicates removed.
    pub fn new(codes: impl IntoIterator<Item = MedicalCode>, demographics: DemographicVocab) -> Result<Self> {
        let set: BTreeSet<MedicalCode> = codes.into_iter().collect();
        let features = set
            .into_iter()
            .map(|c| Feature {
                kind: c.kind,
                id: c.id,
                stats: None,
            })
            .collect();
        Self::from_features(features, demographics)
    }

    fn from_features(features: Vec<Feature>, demographics: DemographicVocab) -> Result<Self> {
        let mut index = HashMap::with_capacity(features.len());
        for (slot, f) in features.iter().enumerate() {
            if f.id.is_empty() {
                return Err(Error::invalid("empty feature id in schema"));
            }
            if f.kind.is_binary() && f.stats.is_some() {
                return Err(Error::invalid(format!(
                    "binary feature {} carries normalization stats",
                    f.id
                )));
            }
            if let Some(s) = f.stats {
                if !(s.mean.is_finite() && s.std.is_finite() && s.std >= 0.0) {
                    return Err(Error::invalid(format!("bad stats for {}", f.id)));
                }
            }
            if index.insert((f.kind, f.id.clone()), slot).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate feature {:?}:{}",
                    f.kind, f.id
                )));
            }
        }
        let ordered = features
            .windows(2)
            .all(|w| (w[0].kind, &w[0].id) < (w[1].kind, &w[1].id));
        if !ordered {
            return Err(Error::invalid("schema features are not in canonical order"));
        }
        Ok(Self {
            features,
            demographics,
            index,
        })
    }

    /// |V|, the visit vector width.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature(&self, slot: usize) -> &Feature {
        &self.features[slot]
    }

    pub fn slot(&self, kind: CodeKind, id: &str) -> Option<usize> {
        self.index.get(&(kind, id.to_string())).copied()
    }

    pub fn bmi_slot(&self) -> Option<usize> {
        self.slot(CodeKind::Measurement, BMI_ID)
    }

    pub fn weight_slot(&self) -> Option<usize> {
        self.slot(CodeKind::Measurement, WEIGHT_ID)
    }

    /// Counts (|C|, |D|, |P|, |M|).
    pub fn counts(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for f in &self.features {
            out[f.kind as usize] += 1;
        }
        out
    }

    pub fn demographics(&self) -> &DemographicVocab {
        &self.demographics
    }

    pub fn with_demographics(mut self, vocab: DemographicVocab) -> Self {
        self.demographics = vocab;
        self
    }

    pub fn demographic_dim(&self) -> usize {
        self.demographics.dim()
    }

    pub fn stats(&self, slot: usize) -> MeasurementStats {
        self.features[slot]
            .stats
            .unwrap_or_else(MeasurementStats::identity)
    }

    /// Fits per-measurement mean/std over every recorded value in `training`.
    /// Call with the training split only.
    pub fn fit_measurement_stats<'a>(
        &self,
        training: impl IntoIterator<Item = &'a PatientRecord>,
    ) -> (FeatureSchema, StatsReport) {
        let mut values: HashMap<usize, Vec<f64>> = HashMap::new();
        for p in training {
            for v in &p.visits {
                for c in &v.codes {
                    if c.kind != CodeKind::Measurement {
                        continue;
                    }
                    if let (Some(slot), Some(x)) = (self.slot(c.kind, &c.id), c.value) {
                        values.entry(slot).or_default().push(x);
                    }
                }
            }
        }
        let mut schema = self.clone();
        let mut report = StatsReport::default();
        for (slot, f) in schema.features.iter_mut().enumerate() {
            if f.kind != CodeKind::Measurement {
                continue;
            }
            let vals = values.get(&slot).map(Vec::as_slice).unwrap_or(&[]);
            if vals.is_empty() {
                report.empty_measurements.push(f.id.clone());
            }
            f.stats = Some(MeasurementStats::from_values(vals));
        }
        (schema, report)
    }

    pub fn normalize(&self, slot: usize, x: f64) -> f64 {
        self.stats(slot).normalize(x)
    }

    pub fn denormalize(&self, slot: usize, z: f64) -> f64 {
        self.stats(slot).denormalize(z)
    }

    /// Visit vector of width |V|: 0/1 presence for binary codes, normalized
    /// values for measurements. Codes outside the schema are ignored.
    pub fn build_visit_vector(&self, visit: &Visit) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for c in &visit.codes {
            let Some(slot) = self.slot(c.kind, &c.id) else {
                continue;
            };
            out[slot] = match (c.kind, c.value) {
                (CodeKind::Measurement, Some(x)) => self.normalize(slot, x),
                (CodeKind::Measurement, None) => 0.0,
                _ => 1.0,
            };
        }
        out
    }

    pub fn encode_demographics(&self, demo: &Demographics) -> Vec<f64> {
        self.demographics.encode(demo)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
