//! Seeded synthetic populations with known ground truth.
//!
//! Each patient carries a latent propensity `p ~ N(0, 1)`. Latent BMI is the
//! synthetic median curve plus a deviation (in units of the chart's BMI
//! spread at that age) made of three parts:
//!
//! * a level shift `propensity_effect * p`,
//! * an AR(1) process on a fixed step grid with lag-1 correlation
//!   `bmi_ar1_rho`,
//! * onset episodes (off by default): each onset records the onset code at
//!   the next visit and adds `onset_effect` to the deviation for
//!   `onset_duration_days`, starting `onset_delay_days` after the onset.
//!   Episode rate grows with `p`.
//!
//! Planted risk codes appear per visit with odds scaled by
//! `risk_odds_multiplier^p`. Every other condition/drug/procedure code
//! appears at its base prevalence, and the extra measurements are pure noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ehr::{
    CodeEntry, CodeKind, Demographics, PatientRecord, Visit, BMI_ID, WEIGHT_ID,
};
use crate::error::{Error, Result};
use crate::growth::{self, ChartSet};

pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub visit_rate_per_year: f64,
    pub n_conditions: usize,
    pub n_drugs: usize,
    pub n_procedures: usize,
    /// Noise measurements in addition to BMI and body weight.
    pub n_noise_measurements: usize,
    /// Per-visit prevalence range for ordinary codes, drawn uniformly per code.
    pub base_prevalence: (f64, f64),
    pub n_risk_codes: usize,
    /// Per-visit prevalence of a risk code at propensity 0.
    pub risk_base_prevalence: f64,
    pub risk_odds_multiplier: f64,
    pub bmi_ar1_rho: f64,
    pub ar_step_days: f64,
    /// Stationary standard deviation of the AR(1) component.
    pub bmi_process_std: f64,
    /// Measurement noise on recorded BMI, in BMI units.
    pub bmi_noise_std: f64,
    pub propensity_effect: f64,
    pub onset_rate_per_year: f64,
    /// Log-rate slope of onset episodes in the propensity.
    pub onset_propensity_slope: f64,
    pub onset_effect: f64,
    pub onset_delay_days: f64,
    pub onset_duration_days: f64,
    /// Length of each patient's follow-up, drawn uniformly in this range.
    pub followup_years: (f64, f64),
    pub max_age_years: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            seed: 7,
            visit_rate_per_year: 6.0,
            n_conditions: 30,
            n_drugs: 10,
            n_procedures: 10,
            n_noise_measurements: 4,
            base_prevalence: (0.01, 0.12),
            n_risk_codes: 3,
            risk_base_prevalence: 0.04,
            risk_odds_multiplier: 2.5,
            bmi_ar1_rho: 0.9,
            ar_step_days: 91.0,
            bmi_process_std: 0.6,
            bmi_noise_std: 0.5,
            propensity_effect: 0.8,
            onset_rate_per_year: 0.0,
            onset_propensity_slope: 0.5,
            onset_effect: 5.0,
            onset_delay_days: 540.0,
            onset_duration_days: 300.0,
            followup_years: (5.0, 8.0),
            max_age_years: 20,
        }
    }
}

impl GenConfig {
    /// Population with onset episodes switched on: future BMI then depends on
    /// when the onset code was recorded, not only on how often.
    pub fn temporal_benchmark(n_patients: usize, seed: u64) -> Self {
        Self {
            n_patients,
            seed,
            onset_rate_per_year: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gen: {m}")));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if !(self.visit_rate_per_year > 0.0) {
            return bad("visit_rate_per_year must be positive");
        }
        if self.n_conditions < self.n_risk_codes + 1 {
            return bad("n_conditions must exceed n_risk_codes (one slot is the onset code)");
        }
        let (lo, hi) = self.base_prevalence;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("base_prevalence must satisfy 0 < lo <= hi < 1");
        }
        if !(self.risk_base_prevalence > 0.0 && self.risk_base_prevalence < 1.0) {
            return bad("risk_base_prevalence must lie in (0, 1)");
        }
        if !(self.risk_odds_multiplier > 1.0) {
            return bad("risk_odds_multiplier must exceed 1");
        }
        if !(0.0..1.0).contains(&self.bmi_ar1_rho) {
            return bad("bmi_ar1_rho must lie in [0, 1)");
        }
        if !(self.ar_step_days > 0.0) {
            return bad("ar_step_days must be positive");
        }
        if !(self.bmi_process_std >= 0.0 && self.bmi_noise_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        if !(self.onset_rate_per_year >= 0.0
            && self.onset_delay_days >= 0.0
            && self.onset_duration_days >= 0.0)
        {
            return bad("onset parameters must be non-negative");
        }
        let (flo, fhi) = self.followup_years;
        if !(flo > 0.0 && flo <= fhi) {
            return bad("followup_years must satisfy 0 < lo <= hi");
        }
        if self.max_age_years == 0 || fhi > self.max_age_years as f64 {
            return bad("max_age_years must cover the follow-up length");
        }
        Ok(())
    }

    fn horizon_days(&self) -> f64 {
        self.max_age_years as f64 * DAYS_PER_YEAR
    }
}

/// Code id helpers, stable across runs.
pub fn condition_id(i: usize) -> String {
    format!("C{i:03}")
}
pub fn drug_id(i: usize) -> String {
    format!("D{i:03}")
}
pub fn procedure_id(i: usize) -> String {
    format!("P{i:03}")
}
pub fn noise_measurement_id(i: usize) -> String {
    format!("M{i:03}")
}

/// Latent state retained for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub sex: String,
    pub propensity: f64,
    pub height_factor: f64,
    pub first_day: u32,
    pub last_day: u32,
    /// AR(1) component at ages `k * ar_step_days`, k = 0, 1, ...
    pub ar_values: Vec<f64>,
    /// Ages (days) at which onset episodes begin.
    pub onsets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GenConfig,
    /// Condition ids whose per-visit odds scale with propensity.
    pub risk_codes: Vec<String>,
    /// Condition id recorded at the first visit after each onset.
    pub onset_code: String,
    pub patients: Vec<PatientTruth>,
}

/// Synthetic median BMI, extended below 2 years for the infant segment.
pub fn median_bmi(age_years: f64, male: bool) -> f64 {
    const INFANT: [(f64, f64, f64); 3] = [(0.0, 13.0, 13.2), (0.5, 16.8, 17.2), (1.0, 17.0, 17.4)];
    if age_years < 2.0 {
        let mut knots = INFANT.to_vec();
        knots.push(growth::SYNTH_BMI_MEDIAN_KNOTS[0]);
        growth::interp_knots(&knots, age_years, male)
    } else {
        growth::interp_knots(&growth::SYNTH_BMI_MEDIAN_KNOTS, age_years, male)
    }
}

/// BMI spread (M·S of the synthetic table) used to scale deviations.
pub fn bmi_scale(age_years: f64, male: bool) -> f64 {
    median_bmi(age_years, male) * growth::synth_bmi_s(age_years.max(2.0))
}

/// Median height in metres.
pub fn median_height(age_years: f64, male: bool) -> f64 {
    const KNOTS: [(f64, f64, f64); 10] = [
        (0.0, 0.49, 0.50),
        (1.0, 0.74, 0.76),
        (2.0, 0.86, 0.87),
        (3.0, 0.95, 0.96),
        (5.0, 1.09, 1.10),
        (8.0, 1.27, 1.28),
        (11.0, 1.44, 1.43),
        (14.0, 1.60, 1.64),
        (17.0, 1.63, 1.75),
        (20.0, 1.64, 1.77),
    ];
    growth::interp_knots(&KNOTS, age_years, male)
}

impl PatientTruth {
    fn male(&self) -> bool {
        self.sex == "M"
    }

    pub fn ar_component(&self, config: &GenConfig, age_days: f64) -> f64 {
        let x = age_days / config.ar_step_days;
        let k = (x.floor() as usize).min(self.ar_values.len() - 1);
        let next = (k + 1).min(self.ar_values.len() - 1);
        let w = (x - k as f64).clamp(0.0, 1.0);
        self.ar_values[k] + w * (self.ar_values[next] - self.ar_values[k])
    }

    /// Number of episodes whose effect is active at an age.
    pub fn onset_active(&self, config: &GenConfig, age_days: f64) -> usize {
        self.onsets
            .iter()
            .filter(|&&o| {
                let start = o + config.onset_delay_days;
                age_days >= start && age_days < start + config.onset_duration_days
            })
            .count()
    }

    /// Deviation from the median curve in units of `bmi_scale`.
    pub fn latent_deviation(&self, config: &GenConfig, age_days: f64) -> f64 {
        config.propensity_effect * self.propensity
            + self.ar_component(config, age_days)
            + config.onset_effect * self.onset_active(config, age_days) as f64
    }

    pub fn latent_bmi(&self, config: &GenConfig, age_days: f64) -> f64 {
        let years = age_days / DAYS_PER_YEAR;
        median_bmi(years, self.male())
            + bmi_scale(years, self.male()) * self.latent_deviation(config, age_days)
    }

    pub fn height(&self, age_days: f64) -> f64 {
        median_height(age_days / DAYS_PER_YEAR, self.male()) * self.height_factor
    }

    pub fn latent_weight(&self, config: &GenConfig, age_days: f64) -> f64 {
        self.latent_bmi(config, age_days) * self.height(age_days).powi(2)
    }
}

impl GroundTruth {
    pub fn patient(&self, patient_id: &str) -> Option<&PatientTruth> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    /// Obese label of the noise-free latent curve at an age: latent BMI from
    /// 24 months, latent weight below.
    pub fn truth_label(&self, patient_id: &str, age_days: f64, charts: &ChartSet) -> Result<bool> {
        let p = self
            .patient(patient_id)
            .ok_or_else(|| Error::invalid(format!("unknown patient {patient_id}")))?;
        if !(0.0..=self.config.horizon_days()).contains(&age_days) {
            return Err(Error::invalid(format!(
                "age {age_days} days beyond the generated horizon"
            )));
        }
        let value = match ChartSet::kind_for_age(age_days) {
            growth::ChartKind::BmiForAge => p.latent_bmi(&self.config, age_days),
            growth::ChartKind::WeightForAge => p.latent_weight(&self.config, age_days),
        };
        charts.classify_obese(&p.sex, age_days, value)
    }

    /// All planted signal codes: the risk codes plus the onset code when
    /// episodes are enabled.
    pub fn planted_codes(&self) -> Vec<String> {
        let mut out = self.risk_codes.clone();
        if self.config.onset_rate_per_year > 0.0 {
            out.push(self.onset_code.clone());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Stationary AR(1) path of length `n` with lag-1 correlation `rho`.
pub fn ar1_path<R: Rng>(rng: &mut R, rho: f64, std: f64, n: usize) -> Vec<f64> {
    let innov = std * (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x = std * rng.sample::<f64, _>(StandardNormal);
    for _ in 0..n {
        out.push(x);
        x = rho * x + innov * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

struct CodeBook {
    /// (kind, id, per-visit prevalence) for ordinary codes.
    plain: Vec<(CodeKind, String, f64)>,
    risk: Vec<String>,
    onset: String,
    noise: Vec<(String, f64, f64)>,
}

fn code_book<R: Rng>(config: &GenConfig, rng: &mut R) -> CodeBook {
    let (lo, hi) = config.base_prevalence;
    let prevalence = |rng: &mut R| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let onset = condition_id(0);
    let risk: Vec<String> = (1..=config.n_risk_codes).map(condition_id).collect();
    let mut plain = Vec::new();
    for i in config.n_risk_codes + 1..config.n_conditions {
        plain.push((CodeKind::Condition, condition_id(i), prevalence(rng)));
    }
    for i in 0..config.n_drugs {
        plain.push((CodeKind::Drug, drug_id(i), prevalence(rng)));
    }
    for i in 0..config.n_procedures {
        plain.push((CodeKind::Procedure, procedure_id(i), prevalence(rng)));
    }
    let noise = (0..config.n_noise_measurements)
        .map(|i| {
            let mean = rng.random_range(20.0..120.0);
            (noise_measurement_id(i), mean, mean * 0.1)
        })
        .collect();
    CodeBook {
        plain,
        risk,
        onset,
        noise,
    }
}

const SEXES: [&str; 2] = ["F", "M"];
const RACES: [&str; 4] = ["race_a", "race_b", "race_c", "race_d"];
const ETHNICITIES: [&str; 2] = ["hisp", "non_hisp"];
const ZIPS: [&str; 5] = ["z1", "z2", "z3", "z4", "z5"];
const INSURANCE: [&str; 3] = ["public", "private", "self_pay"];

fn pick<R: Rng>(rng: &mut R, xs: &[&str]) -> String {
    xs[rng.random_range(0..xs.len())].to_string()
}

/// Generates `config.n_patients` records and their ground truth.
/// Deterministic for a fixed config.
pub fn generate_population(config: &GenConfig) -> Result<(Vec<PatientRecord>, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let book = code_book(config, &mut rng);
    let horizon = config.horizon_days();
    let n_steps = (horizon / config.ar_step_days).ceil() as usize + 2;
    let gap = Exp::new(config.visit_rate_per_year / DAYS_PER_YEAR).expect("positive rate");
    let height_noise = Normal::new(1.0, 0.03).expect("valid normal");

    let mut records = Vec::with_capacity(config.n_patients);
    let mut truths = Vec::with_capacity(config.n_patients);
    for idx in 0..config.n_patients {
        let patient_id = format!("P{idx:06}");
        let demographics = Demographics {
            sex: pick(&mut rng, &SEXES),
            race: pick(&mut rng, &RACES),
            ethnicity: pick(&mut rng, &ETHNICITIES),
            zip: pick(&mut rng, &ZIPS),
            insurance: pick(&mut rng, &INSURANCE),
        };
        let propensity: f64 = rng.sample(StandardNormal);
        let height_factor = height_noise.sample(&mut rng);
        let ar_values = ar1_path(&mut rng, config.bmi_ar1_rho, config.bmi_process_std, n_steps);

        let onset_rate = config.onset_rate_per_year
            * (config.onset_propensity_slope * propensity).exp()
            / DAYS_PER_YEAR;
        let mut onsets = Vec::new();
        if onset_rate > 0.0 {
            let n = Poisson::new(onset_rate * horizon)
                .map(|d| d.sample(&mut rng) as usize)
                .unwrap_or(0);
            onsets = (0..n).map(|_| rng.random_range(0.0..horizon)).collect();
            onsets.sort_by(f64::total_cmp);
        }

        let (flo, fhi) = config.followup_years;
        let span = if fhi > flo { rng.random_range(flo..fhi) } else { flo } * DAYS_PER_YEAR;
        let first = rng.random_range(0.0..=(horizon - span).max(0.0));
        let last = (first + span).min(horizon - 1.0);

        let truth = PatientTruth {
            patient_id: patient_id.clone(),
            sex: demographics.sex.clone(),
            propensity,
            height_factor,
            first_day: first as u32,
            last_day: last as u32,
            ar_values,
            onsets,
        };

        let risk_p = {
            let odds = config.risk_base_prevalence / (1.0 - config.risk_base_prevalence)
                * config.risk_odds_multiplier.powf(propensity);
            odds / (1.0 + odds)
        };
        let mut visits: Vec<Visit> = Vec::new();
        let mut onset_cursor = truth.onsets.partition_point(|&o| o < first);
        let mut t = first + gap.sample(&mut rng);
        let mut prev_end: Option<u32> = None;
        while t <= last {
            let start = t as u32;
            let end = start + u32::from(rng.random_bool(0.1));
            t += gap.sample(&mut rng);
            if prev_end.is_some_and(|pe| start <= pe) {
                continue;
            }
            prev_end = Some(end);
            let age = start as f64;
            let mut codes = Vec::new();
            let mut onset_seen = false;
            while onset_cursor < truth.onsets.len() && truth.onsets[onset_cursor] <= age {
                onset_seen = true;
                onset_cursor += 1;
            }
            if onset_seen {
                codes.push(CodeEntry::flag(CodeKind::Condition, book.onset.clone()));
            }
            for id in &book.risk {
                if rng.random_bool(risk_p) {
                    codes.push(CodeEntry::flag(CodeKind::Condition, id.clone()));
                }
            }
            for (kind, id, p) in &book.plain {
                if rng.random_bool(*p) {
                    codes.push(CodeEntry::flag(*kind, id.clone()));
                }
            }
            let noise: f64 = rng.sample(StandardNormal);
            let bmi = (truth.latent_bmi(config, age) + config.bmi_noise_std * noise).max(5.0);
            codes.push(CodeEntry::measurement(BMI_ID, round2(bmi)));
            codes.push(CodeEntry::measurement(
                WEIGHT_ID,
                round2(bmi * truth.height(age).powi(2)),
            ));
            for (id, mean, std) in &book.noise {
                if rng.random_bool(0.5) {
                    let z: f64 = rng.sample(StandardNormal);
                    codes.push(CodeEntry::measurement(id.clone(), round2(mean + std * z)));
                }
            }
            visits.push(Visit::new(start, end, codes)?);
        }
        records.push(PatientRecord::new(patient_id, demographics, visits)?);
        truths.push(truth);
    }
    let truth = GroundTruth {
        config: config.clone(),
        risk_codes: book.risk,
        onset_code: book.onset,
        patients: truths,
    };
    Ok((records, truth))
}
