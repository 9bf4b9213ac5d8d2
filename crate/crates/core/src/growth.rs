//! Growth-chart percentile cutoffs from LMS tables (BMI-for-age and
//! weight-for-age) and the obese/non-obese classification built on them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Percentile above which a child is labelled obese.
pub const OBESE_PERCENTILE: f64 = 0.95;
/// First age (months) classified with the BMI-for-age chart.
pub const BMI_CHART_MIN_MONTHS: f64 = 24.0;
pub const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChartKind {
    BmiForAge,
    WeightForAge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmsRow {
    pub sex: String,
    pub age_months: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "S")]
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthChart {
    kind: ChartKind,
    rows: Vec<LmsRow>,
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Value at standard-normal score `z` for LMS parameters.
pub fn lms_value(l: f64, m: f64, s: f64, z: f64) -> f64 {
    if l.abs() > 1e-9 {
        m * (1.0 + l * s * z).powf(1.0 / l)
    } else {
        m * (s * z).exp()
    }
}

impl GrowthChart {
    /// Validates and sorts rows by (sex, age).
    pub fn new(kind: ChartKind, mut rows: Vec<LmsRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            check_row(r).map_err(|m| Error::Chart(format!("row {}: {m}", i + 1)))?;
        }
        rows.sort_by(|a, b| a.sex.cmp(&b.sex).then(a.age_months.total_cmp(&b.age_months)));
        if let Some(w) = rows
            .windows(2)
            .find(|w| w[0].sex == w[1].sex && w[0].age_months == w[1].age_months)
        {
            return Err(Error::Chart(format!(
                "duplicate row for sex {} at {} months",
                w[0].sex, w[0].age_months
            )));
        }
        Ok(Self { kind, rows })
    }

    pub fn kind(&self) -> ChartKind {
        self.kind
    }

    pub fn rows(&self) -> &[LmsRow] {
        &self.rows
    }

    pub fn sexes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.rows.iter().map(|r| r.sex.as_str()).collect();
        out.dedup();
        out
    }

    /// Interpolated (L, M, S) at an age; clamped outside the tabulated range.
    pub fn lms_at(&self, sex: &str, age_months: f64) -> Result<(f64, f64, f64)> {
        let rows: Vec<&LmsRow> = self.rows.iter().filter(|r| r.sex == sex).collect();
        let (first, last) = match (rows.first(), rows.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => {
                return Err(Error::Chart(format!(
                    "sex {sex:?} not present in {:?} chart",
                    self.kind
                )))
            }
        };
        if age_months <= first.age_months {
            return Ok((first.l, first.m, first.s));
        }
        if age_months >= last.age_months {
            return Ok((last.l, last.m, last.s));
        }
        let hi = rows.partition_point(|r| r.age_months <= age_months);
        let (a, b) = (rows[hi - 1], rows[hi]);
        let w = (age_months - a.age_months) / (b.age_months - a.age_months);
        let lerp = |x: f64, y: f64| x + w * (y - x);
        Ok((lerp(a.l, b.l), lerp(a.m, b.m), lerp(a.s, b.s)))
    }

    pub fn percentile_cutoff(&self, sex: &str, age_months: f64, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Chart(format!("percentile {p} outside (0, 1)")));
        }
        let (l, m, s) = self.lms_at(sex, age_months)?;
        Ok(lms_value(l, m, s, normal_quantile(p)))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("sex,age_months,L,M,S\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.sex, r.age_months, r.l, r.m, r.s));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

fn check_row(r: &LmsRow) -> std::result::Result<(), String> {
    if r.sex.is_empty() {
        return Err("empty sex".into());
    }
    if !(r.age_months.is_finite() && r.l.is_finite() && r.m.is_finite() && r.s.is_finite()) {
        return Err("non-finite value".into());
    }
    if r.m <= 0.0 {
        return Err(format!("M must be positive, got {}", r.m));
    }
    if r.s <= 0.0 {
        return Err(format!("S must be positive, got {}", r.s));
    }
    Ok(())
}

/// Loads an LMS table with header `sex,age_months,L,M,S`. Errors name the
/// offending line.
pub fn load_lms_csv(path: impl AsRef<Path>, kind: ChartKind) -> Result<GrowthChart> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["sex", "age_months", "L", "M", "S"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize::<LmsRow>() {
        let row = rec.map_err(|e| csv_err(path, e))?;
        if let Err(message) = check_row(&row) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: rows.len() as u64 + 2,
                message,
            });
        }
        rows.push(row);
    }
    GrowthChart::new(kind, rows).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// The pair of charts used for labelling: weight-for-age below 24 months,
/// BMI-for-age from 24 months on.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartSet {
    pub bmi: Option<GrowthChart>,
    pub weight: Option<GrowthChart>,
}

pub fn days_to_months(age_days: f64) -> f64 {
    age_days / DAYS_PER_MONTH
}

impl ChartSet {
    pub fn new(bmi: GrowthChart, weight: GrowthChart) -> Self {
        Self {
            bmi: Some(bmi),
            weight: Some(weight),
        }
    }

    /// Which chart (and so which measurement) applies at an age.
    pub fn kind_for_age(age_days: f64) -> ChartKind {
        if days_to_months(age_days) >= BMI_CHART_MIN_MONTHS {
            ChartKind::BmiForAge
        } else {
            ChartKind::WeightForAge
        }
    }

    pub fn chart(&self, kind: ChartKind) -> Result<&GrowthChart> {
        let chart = match kind {
            ChartKind::BmiForAge => self.bmi.as_ref(),
            ChartKind::WeightForAge => self.weight.as_ref(),
        };
        chart.ok_or_else(|| Error::Chart(format!("no {kind:?} chart loaded")))
    }

    pub fn cutoff(&self, sex: &str, age_days: f64, p: f64) -> Result<f64> {
        let chart = self.chart(Self::kind_for_age(age_days))?;
        chart.percentile_cutoff(sex, days_to_months(age_days), p)
    }

    pub fn obese_cutoff(&self, sex: &str, age_days: f64) -> Result<f64> {
        self.cutoff(sex, age_days, OBESE_PERCENTILE)
    }

    /// `value` is BMI at ≥ 24 months, body weight below. Strictly above the
    /// 95th percentile is obese.
    pub fn classify_obese(&self, sex: &str, age_days: f64, value: f64) -> Result<bool> {
        Ok(value > self.obese_cutoff(sex, age_days)?)
    }

    /// Small fabricated LMS tables for synthetic runs. Not CDC data.
    pub fn synthetic() -> Self {
        Self::new(synthetic_bmi_chart(), synthetic_weight_chart())
    }
}

/// Median BMI knots (age years, F, M) shared with the synthetic generator.
pub const SYNTH_BMI_MEDIAN_KNOTS: [(f64, f64, f64); 8] = [
    (2.0, 16.4, 16.6),
    (5.0, 15.3, 15.4),
    (8.0, 16.0, 15.9),
    (11.0, 17.8, 17.5),
    (14.0, 19.6, 19.5),
    (17.0, 21.0, 21.4),
    (20.0, 22.0, 22.7),
    (21.0, 22.2, 22.9),
];

/// Median weight knots (age months, F, M).
pub const SYNTH_WEIGHT_MEDIAN_KNOTS: [(f64, f64, f64); 8] = [
    (0.0, 3.4, 3.5),
    (3.0, 5.8, 6.4),
    (6.0, 7.3, 7.9),
    (12.0, 9.2, 9.9),
    (18.0, 10.6, 11.2),
    (24.0, 11.8, 12.3),
    (30.0, 12.9, 13.4),
    (36.0, 14.0, 14.4),
];

/// Coefficient of variation used for the synthetic BMI table.
pub fn synth_bmi_s(age_years: f64) -> f64 {
    0.08 + 0.003 * (age_years - 2.0).clamp(0.0, 18.0)
}

pub fn synth_bmi_l(age_years: f64) -> f64 {
    -1.0 - 0.04 * (age_years - 2.0).clamp(0.0, 18.0)
}

pub const SYNTH_WEIGHT_S: f64 = 0.12;
pub const SYNTH_WEIGHT_L: f64 = 0.25;

pub(crate) fn interp_knots(knots: &[(f64, f64, f64)], x: f64, male: bool) -> f64 {
    let y = |k: &(f64, f64, f64)| if male { k.2 } else { k.1 };
    let first = &knots[0];
    let last = &knots[knots.len() - 1];
    if x <= first.0 {
        return y(first);
    }
    if x >= last.0 {
        return y(last);
    }
    let hi = knots.partition_point(|k| k.0 <= x);
    let (a, b) = (&knots[hi - 1], &knots[hi]);
    let w = (x - a.0) / (b.0 - a.0);
    y(a) + w * (y(b) - y(a))
}

/// Synthetic BMI-for-age table, 24–252 months at 6-month spacing.
pub fn synthetic_bmi_chart() -> GrowthChart {
    let mut rows = Vec::new();
    for sex in ["F", "M"] {
        for k in 0..=38 {
            let age_months = 24.0 + 6.0 * k as f64;
            let years = age_months / 12.0;
            rows.push(LmsRow {
                sex: sex.into(),
                age_months,
                l: synth_bmi_l(years),
                m: interp_knots(&SYNTH_BMI_MEDIAN_KNOTS, years, sex == "M"),
                s: synth_bmi_s(years),
            });
        }
    }
    GrowthChart::new(ChartKind::BmiForAge, rows).expect("synthetic BMI chart is valid")
}

/// Synthetic weight-for-age table, 0–36 months at 1-month spacing.
pub fn synthetic_weight_chart() -> GrowthChart {
    let mut rows = Vec::new();
    for sex in ["F", "M"] {
        for month in 0..=36 {
            let age_months = month as f64;
            rows.push(LmsRow {
                sex: sex.into(),
                age_months,
                l: SYNTH_WEIGHT_L,
                m: interp_knots(&SYNTH_WEIGHT_MEDIAN_KNOTS, age_months, sex == "M"),
                s: SYNTH_WEIGHT_S,
            });
        }
    }
    GrowthChart::new(ChartKind::WeightForAge, rows).expect("synthetic weight chart is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sex: &str, age: f64, l: f64, m: f64, s: f64) -> LmsRow {
        LmsRow {
            sex: sex.into(),
            age_months: age,
            l,
            m,
            s,
        }
    }

    fn flat(kind: ChartKind, l: f64, m: f64, s: f64) -> GrowthChart {
        GrowthChart::new(
            kind,
            vec![
                row("F", 0.0, l, m, s),
                row("F", 300.0, l, m, s),
                row("M", 0.0, l, m, s),
                row("M", 300.0, l, m, s),
            ],
        )
        .unwrap()
    }

    /// Standard-normal quantile by bisection on a Simpson-integrated density.
    fn quantile_oracle(p: f64) -> f64 {
        let cdf = |z: f64| {
            let n = 20_000;
            let (a, b) = (-12.0, z);
            let h = (b - a) / n as f64;
            let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut s = f(a) + f(b);
            for i in 1..n {
                let x = a + i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            s * h / 3.0
        };
        let (mut lo, mut hi) = (-8.0, 8.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn median_is_m() {
        let c = flat(ChartKind::BmiForAge, 1.0, 16.0, 0.1);
        assert!((c.percentile_cutoff("F", 60.0, 0.5).unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn p95_matches_oracle() {
        let z95 = quantile_oracle(0.95);
        assert!((z95 - 1.6449).abs() < 1e-4);
        assert!((normal_quantile(0.95) - z95).abs() < 1e-9);
        let c = flat(ChartKind::BmiForAge, 1.0, 16.0, 0.1);
        let got = c.percentile_cutoff("M", 60.0, 0.95).unwrap();
        let expected = 16.0 * (1.0 + 0.1 * z95);
        assert!((got - expected).abs() < 1e-8);
        assert!((got - 18.632).abs() < 1e-3);
    }

    #[test]
    fn l_zero_branch_agrees_with_small_l() {
        let z = normal_quantile(0.95);
        let zero = lms_value(0.0, 20.0, 0.1, z);
        let small = lms_value(1e-7, 20.0, 0.1, z);
        assert!((zero - 20.0 * (0.1 * z).exp()).abs() < 1e-12);
        assert!((zero - small).abs() < 1e-4);
    }

    #[test]
    fn interpolation_hits_table_rows() {
        let chart = synthetic_bmi_chart();
        for r in chart.rows().iter().step_by(5) {
            let direct = lms_value(r.l, r.m, r.s, normal_quantile(0.95));
            let interp = chart.percentile_cutoff(&r.sex, r.age_months, 0.95).unwrap();
            assert!((direct - interp).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_is_linear_in_lms_and_clamps() {
        let c = GrowthChart::new(
            ChartKind::BmiForAge,
            vec![row("F", 24.0, 1.0, 16.0, 0.1), row("F", 36.0, 1.0, 18.0, 0.2)],
        )
        .unwrap();
        let (l, m, s) = c.lms_at("F", 30.0).unwrap();
        assert_eq!((l, m, s), (1.0, 17.0, 0.15000000000000002));
        assert_eq!(c.lms_at("F", 0.0).unwrap(), (1.0, 16.0, 0.1));
        assert_eq!(c.lms_at("F", 99.0).unwrap(), (1.0, 18.0, 0.2));
        assert!(c.lms_at("M", 30.0).is_err());
    }

    #[test]
    fn classification_is_strict() {
        let charts = ChartSet::new(
            flat(ChartKind::BmiForAge, 1.0, 16.0, 0.1),
            flat(ChartKind::WeightForAge, 1.0, 10.0, 0.1),
        );
        let age = 5.0 * 365.25;
        let cut = charts.obese_cutoff("F", age).unwrap();
        assert!(!charts.classify_obese("F", age, cut - 0.5).unwrap());
        assert!(!charts.classify_obese("F", age, cut).unwrap());
        assert!(charts.classify_obese("F", age, cut + 1e-9).unwrap());
    }

    #[test]
    fn infants_route_to_weight_chart() {
        // divergent charts: weight cutoff ≈ 11.6, BMI cutoff ≈ 18.6
        let charts = ChartSet::new(
            flat(ChartKind::BmiForAge, 1.0, 16.0, 0.1),
            flat(ChartKind::WeightForAge, 1.0, 10.0, 0.1),
        );
        let twelve_months = 12.0 * DAYS_PER_MONTH;
        assert!(charts.classify_obese("M", twelve_months, 12.0).unwrap());
        assert!(!charts.classify_obese("M", 24.0 * DAYS_PER_MONTH, 12.0).unwrap());
        assert_eq!(ChartSet::kind_for_age(24.0 * DAYS_PER_MONTH), ChartKind::BmiForAge);

        let no_weight = ChartSet {
            bmi: charts.bmi.clone(),
            weight: None,
        };
        assert!(no_weight.classify_obese("M", twelve_months, 12.0).is_err());
    }

    #[test]
    fn csv_load_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "sex,age_months,L,M,S\nF,24,1,16,0.1\nF,36,1,17,0.1\n").unwrap();
        let chart = load_lms_csv(&ok, ChartKind::BmiForAge).unwrap();
        assert_eq!(chart.rows().len(), 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "sex,age_months,L,M,S\nF,24,1,16,0.1\nF,36,1,17,0\n").unwrap();
        match load_lms_csv(&bad, ChartKind::BmiForAge).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains('S'));
            }
            e => panic!("unexpected {e}"),
        }

        let dup = dir.path().join("dup.csv");
        std::fs::write(&dup, "sex,age_months,L,M,S\nF,24,1,16,0.1\nF,24,1,17,0.1\n").unwrap();
        assert!(load_lms_csv(&dup, ChartKind::BmiForAge).is_err());

        let malformed = dir.path().join("malformed.csv");
        std::fs::write(&malformed, "sex,age_months,L,M,S\nF,abc,1,16,0.1\n").unwrap();
        assert!(matches!(
            load_lms_csv(&malformed, ChartKind::BmiForAge).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn unsorted_csv_is_sorted_and_reload_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        std::fs::write(
            &p,
            "sex,age_months,L,M,S\nM,48,1,16,0.1\nF,36,1,17,0.1\nF,24,-1.5,16.5,0.12\n",
        )
        .unwrap();
        let chart = load_lms_csv(&p, ChartKind::BmiForAge).unwrap();
        assert_eq!(chart.rows()[0].age_months, 24.0);
        let p2 = dir.path().join("u2.csv");
        chart.save_csv(&p2).unwrap();
        let again = load_lms_csv(&p2, ChartKind::BmiForAge).unwrap();
        assert_eq!(again, chart);
        let p3 = dir.path().join("u3.csv");
        again.save_csv(&p3).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn synthetic_tables_cover_both_sexes() {
        let set = ChartSet::synthetic();
        for chart in [set.bmi.as_ref().unwrap(), set.weight.as_ref().unwrap()] {
            assert_eq!(chart.sexes(), vec!["F", "M"]);
        }
        let m = set.bmi.as_ref().unwrap().lms_at("F", 60.0).unwrap().1;
        assert!((m - 15.3).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cutoff_monotone_in_p(male in any::<bool>(), age in 24.0f64..250.0, p in 0.01f64..0.98, dp in 1e-4f64..0.01) {
                let chart = synthetic_bmi_chart();
                let sex = if male { "M" } else { "F" };
                let a = chart.percentile_cutoff(sex, age, p).unwrap();
                let b = chart.percentile_cutoff(sex, age, p + dp).unwrap();
                prop_assert!(b > a);
            }

            #[test]
            fn obese_monotone_in_value(age in 0.0f64..7000.0, v in 2.0f64..40.0, dv in 0.0f64..5.0) {
                let set = ChartSet::synthetic();
                if set.classify_obese("F", age, v).unwrap() {
                    prop_assert!(set.classify_obese("F", age, v + dv + 1e-9).unwrap());
                }
            }
        }
    }
}
