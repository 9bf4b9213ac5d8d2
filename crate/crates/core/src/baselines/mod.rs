//! Aggregation baselines: ridge-guarded linear regression and random forest
//! regressors scored with stratified k-fold cross-validation.

pub mod forest;
pub mod linreg;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::AggregateDataset;
use crate::error::{Error, Result};
use crate::eval::{full_report, MetricReport};
use crate::growth::ChartSet;

pub use forest::{forest_fit, Forest, ForestConfig};
pub use linreg::{linreg_fit, LinearModel, DEFAULT_RIDGE};

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LinearRegression,
    RandomForest,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::LinearRegression => "linear_regression",
            BaselineKind::RandomForest => "random_forest",
        }
    }
}

/// A fitted regressor of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Regressor {
    Linear(LinearModel),
    Forest(Forest),
}

impl Regressor {
    pub fn fit(kind: BaselineKind, data: &AggregateDataset, forest: &ForestConfig) -> Result<Self> {
        match kind {
            BaselineKind::LinearRegression => Ok(Regressor::Linear(linreg_fit(&data.x, &data.targets, DEFAULT_RIDGE)?)),
            BaselineKind::RandomForest => Ok(Regressor::Forest(forest_fit(&data.x, &data.targets, forest)?)),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::Linear(m) => m.predict(x),
            Regressor::Forest(f) => f.predict(x),
        }
    }
}

/// Predicted BMI thresholded with the growth charts; the score is the
/// distance to the obesity cutoff.
pub fn score_predictions(data: &AggregateDataset, bmi: &[f64], charts: &ChartSet) -> Result<MetricReport> {
    let mut labels = Vec::with_capacity(bmi.len());
    let mut scores = Vec::with_capacity(bmi.len());
    for (i, &b) in bmi.iter().enumerate() {
        let cut = charts.obese_cutoff(&data.sex[i], data.age_days[i])?;
        labels.push(charts.classify_obese(&data.sex[i], data.age_days[i], b)?);
        scores.push(b - cut);
    }
    full_report(&data.targets, bmi, &data.labels, &labels, &scores)
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// the second class continuing where the first stopped.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > labels.len() {
        return Err(Error::invalid(format!("cannot make {k} folds from {} rows", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_rows: Vec<usize>,
    pub report: MetricReport,
    /// False when the held-out fold lacks a class; its AUC is then left out
    /// of the mean.
    pub both_classes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MetricReport,
    /// Folds whose AUC was skipped.
    pub skipped_auc: Vec<usize>,
}

/// k-fold cross-validation of a fit function returning per-row BMI
/// predictions for the held-out rows. Metrics are averaged over folds; AUC
/// over the folds containing both classes.
pub fn kfold_cv<F>(data: &AggregateDataset, k: usize, seed: u64, charts: &ChartSet, fit_predict: F) -> Result<CvReport>
where
    F: Fn(&AggregateDataset, &AggregateDataset) -> Result<Vec<f64>> + Sync,
{
    use rayon::prelude::*;
    let folds = stratified_folds(&data.labels, k, seed)?;
    let results = (0..k)
        .into_par_iter()
        .map(|f| {
            let test_rows = folds[f].clone();
            let train_rows: Vec<usize> = (0..k).filter(|&g| g != f).flat_map(|g| folds[g].iter().copied()).collect();
            let train = data.subset(&train_rows);
            let test = data.subset(&test_rows);
            let bmi = fit_predict(&train, &test)?;
            let report = score_predictions(&test, &bmi, charts)?;
            let both_classes = test.labels.iter().any(|l| *l) && test.labels.iter().any(|l| !*l);
            Ok(FoldResult {
                test_rows,
                report,
                both_classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report.clone()).collect();
    let mut mean = MetricReport::mean(&reports).ok_or_else(|| Error::invalid("no folds"))?;
    let with_auc: Vec<f64> = results.iter().filter(|r| r.both_classes).map(|r| r.report.auc).collect();
    let skipped_auc: Vec<usize> = (0..k).filter(|&f| !results[f].both_classes).collect();
    mean.auc = if with_auc.is_empty() {
        0.0
    } else {
        with_auc.iter().sum::<f64>() / with_auc.len() as f64
    };
    mean.undefined.retain(|u| u != "auc");
    if with_auc.is_empty() {
        mean.undefined.push("auc".into());
    }
    Ok(CvReport {
        folds: results,
        mean,
        skipped_auc,
    })
}

/// Cross-validates one baseline kind on an aggregate dataset.
pub fn cross_validate(
    kind: BaselineKind,
    data: &AggregateDataset,
    k: usize,
    forest: &ForestConfig,
    charts: &ChartSet,
) -> Result<CvReport> {
    kfold_cv(data, k, forest.seed, charts, |train, test| {
        let model = Regressor::fit(kind, train, forest)?;
        Ok(test.x.iter().map(|r| model.predict(r)).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dataset(n: usize) -> AggregateDataset {
        let charts = ChartSet::synthetic();
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        let targets: Vec<f64> = x.iter().map(|r| 15.0 + r[0] * 1.5 + r[1]).collect();
        let age = 3000.0;
        let labels = targets.iter().map(|t| charts.classify_obese("F", age, *t).unwrap()).collect();
        AggregateDataset {
            columns: vec!["a".into(), "b".into()],
            x,
            targets,
            labels,
            sex: vec!["F".into(); n],
            age_days: vec![age; n],
        }
    }

    #[test]
    fn folds_partition_rows() {
        let labels: Vec<bool> = (0..53).map(|i| i % 5 == 0).collect();
        let folds = stratified_folds(&labels, 10, 3).unwrap();
        let all: Vec<usize> = folds.iter().flatten().copied().collect();
        assert_eq!(all.len(), 53);
        assert_eq!(all.iter().copied().collect::<HashSet<_>>().len(), 53);
        for f in &folds {
            let pos = f.iter().filter(|&&i| labels[i]).count();
            assert!((1..=2).contains(&pos));
        }
        assert_eq!(folds, stratified_folds(&labels, 10, 3).unwrap());
        assert!(stratified_folds(&labels, 54, 3).is_err());
    }

    #[test]
    fn leave_one_out() {
        let d = dataset(5);
        let cv = kfold_cv(&d, 5, 1, &ChartSet::synthetic(), |_, test| Ok(test.targets.clone())).unwrap();
        assert_eq!(cv.folds.len(), 5);
        assert!(cv.folds.iter().all(|f| f.test_rows.len() == 1 && f.report.n() == 1));
        assert_eq!(cv.mean.rmse, 0.0);
    }

    #[test]
    fn identical_folds_average_to_themselves() {
        let d = dataset(40);
        let cv = kfold_cv(&d, 4, 2, &ChartSet::synthetic(), |_, test| Ok(test.targets.clone())).unwrap();
        let f0 = &cv.folds[0].report;
        assert_eq!(cv.mean.accuracy, f0.accuracy);
        assert_eq!(cv.mean.rmse, 0.0);
        assert!(cv.mean.accuracy == 1.0 && cv.mean.auc == 1.0);
    }

    #[test]
    fn baselines_run_end_to_end() {
        let d = dataset(60);
        let charts = ChartSet::synthetic();
        let forest = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        for kind in [BaselineKind::LinearRegression, BaselineKind::RandomForest] {
            let cv = cross_validate(kind, &d, 10, &forest, &charts).unwrap();
            assert!(cv.mean.rmse.is_finite());
            assert!(cv.mean.auc > 0.8, "{kind:?} {}", cv.mean.auc);
        }
    }
}
