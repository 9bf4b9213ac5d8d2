//! Training loop, pooled base models, fine-tuning and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Architecture, ModelConfig, Network};
use crate::cohort::{SequenceSample, Split, SubCohort, WindowSpec, OFFSETS};
use crate::error::{Error, Result};
use crate::eval::{full_report, MetricReport};
use crate::growth::ChartSet;
use crate::nnet::Parameterized;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared BMI error over the epoch's mini-batches (before each update).
    pub train_mse: f64,
    /// Mean squared BMI error on the monitored set after the epoch.
    pub valid_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Monitored-set MSE of the starting weights.
    pub initial_valid_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept; 0 means the starting weights.
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub stopped_early: bool,
    /// True when the validation split was empty and training MSE was monitored.
    pub monitored_train: bool,
}

/// Mean squared BMI error; evaluated in parallel, summed in order.
pub fn mse(net: &Network, samples: &[&SequenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let errs = samples
        .par_iter()
        .map(|s| net.predict_bmi(s).map(|p| (p - s.target_bmi).powi(2)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mini-batch Adadelta on MSE plus the first-layer penalty, with early
/// stopping on validation MSE. The best weights (possibly the starting ones)
/// are restored at the end.
pub fn train(
    net: &mut Network,
    train_set: &[&SequenceSample],
    valid_set: &[&SequenceSample],
    config: &ModelConfig,
    max_epochs: usize,
) -> Result<History> {
    if train_set.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let monitored_train = valid_set.is_empty();
    let monitor = if monitored_train { train_set } else { valid_set };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_7A1A);
    let initial = mse(net, monitor)?;
    let mut history = History {
        initial_valid_mse: initial,
        best_valid_mse: initial,
        monitored_train,
        ..History::default()
    };
    let mut best = net.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let scale2 = net.target_std * net.target_std;
    for epoch in 1..=max_epochs {
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let loss = net.batch_loss_and_grad(&batch, config.l1, config.l2)?;
            let pen = net.penalty(config.l1, config.l2);
            sq_sum += (loss - pen) * batch.len() as f64;
            net.step(&config.optimizer, &config.frozen);
        }
        let valid_mse = mse(net, monitor)?;
        if !valid_mse.is_finite() {
            return Err(Error::invalid(format!("training diverged at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mse: sq_sum / train_set.len() as f64 * scale2,
            valid_mse,
        });
        if valid_mse < history.best_valid_mse {
            history.best_valid_mse = valid_mse;
            history.best_epoch = epoch;
            best = net.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    *net = best;
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    Base,
    FineTuned,
    Scratch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub net: Network,
    pub kind: TrainingKind,
    pub spec: Option<WindowSpec>,
    pub config: ModelConfig,
    pub history: History,
}

/// Samples of one split pooled over every sub-cohort with the given offset.
pub fn pooled<'a>(cohorts: &'a [SubCohort], offset: u32, which: Split) -> Vec<&'a SequenceSample> {
    cohorts
        .iter()
        .filter(|c| c.spec.offset() == offset)
        .flat_map(|c| c.part(which))
        .collect()
}

/// Trains a fresh network on the given splits, fitting the target scaler on
/// the training targets.
pub fn train_fresh(
    architecture: Architecture,
    input_dim: usize,
    demo_dim: usize,
    train_set: &[&SequenceSample],
    valid_set: &[&SequenceSample],
    config: &ModelConfig,
) -> Result<(Network, History)> {
    let mut net = Network::new(architecture, input_dim, demo_dim, config)?;
    let targets: Vec<f64> = train_set.iter().map(|s| s.target_bmi).collect();
    net.fit_target_scaler(&targets);
    let history = train(&mut net, train_set, valid_set, config, config.max_epochs)?;
    Ok((net, history))
}

/// One base model per prediction offset, each trained on the pooled train
/// splits (validated on the pooled valid splits) of its 16 sub-cohorts.
/// Patients appearing in several sub-cohorts contribute one sample each.
pub fn train_base_models(
    cohorts: &[SubCohort],
    architecture: Architecture,
    input_dim: usize,
    demo_dim: usize,
    config: &ModelConfig,
) -> Result<Vec<TrainedModel>> {
    OFFSETS
        .par_iter()
        .map(|&k| {
            let train_set = pooled(cohorts, k, Split::Train);
            let valid_set = pooled(cohorts, k, Split::Valid);
            let cfg = ModelConfig {
                seed: config.seed.wrapping_add(u64::from(k)),
                ..config.clone()
            };
            let (mut net, history) = train_fresh(architecture, input_dim, demo_dim, &train_set, &valid_set, &cfg)?;
            net.offset = Some(k);
            Ok(TrainedModel {
                net,
                kind: TrainingKind::Base,
                spec: None,
                config: cfg,
                history,
            })
        })
        .collect()
}

/// Initializes from `base` and trains every (non-frozen) layer on the
/// sub-cohort's own splits. Optimizer state is reset.
pub fn fine_tune(base: &TrainedModel, cohort: &SubCohort, config: &ModelConfig) -> Result<TrainedModel> {
    let k = cohort.spec.offset();
    if base.net.offset != Some(k) {
        return Err(Error::invalid(format!(
            "base model offset {:?} does not match sub-cohort {} (offset {k})",
            base.net.offset,
            cohort.spec.label()
        )));
    }
    let mut net = base.net.clone();
    net.reset_optimizer();
    let train_set = cohort.part(Split::Train);
    let valid_set = cohort.part(Split::Valid);
    let history = if config.finetune_epochs == 0 {
        History::default()
    } else {
        train(&mut net, &train_set, &valid_set, config, config.finetune_epochs)?
    };
    Ok(TrainedModel {
        net,
        kind: TrainingKind::FineTuned,
        spec: Some(cohort.spec),
        config: config.clone(),
        history,
    })
}

/// Trains a sub-cohort model from random initialization.
pub fn train_scratch(
    cohort: &SubCohort,
    architecture: Architecture,
    input_dim: usize,
    demo_dim: usize,
    config: &ModelConfig,
) -> Result<TrainedModel> {
    let train_set = cohort.part(Split::Train);
    let valid_set = cohort.part(Split::Valid);
    let (mut net, history) = train_fresh(architecture, input_dim, demo_dim, &train_set, &valid_set, config)?;
    net.offset = Some(cohort.spec.offset());
    Ok(TrainedModel {
        net,
        kind: TrainingKind::Scratch,
        spec: Some(cohort.spec),
        config: config.clone(),
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bmi: f64,
    pub obese: bool,
    /// Predicted BMI minus the 95th-percentile cutoff.
    pub score: f64,
    pub cutoff: f64,
}

pub fn predict(net: &Network, sample: &SequenceSample, charts: &ChartSet) -> Result<Prediction> {
    let bmi = net.predict_bmi(sample)?;
    from_bmi(bmi, sample, charts)
}

/// Thresholds a BMI prediction for a sample's sex and target age.
pub fn from_bmi(bmi: f64, sample: &SequenceSample, charts: &ChartSet) -> Result<Prediction> {
    let cutoff = charts.obese_cutoff(&sample.sex, sample.target_age_days)?;
    Ok(Prediction {
        bmi,
        obese: charts.classify_obese(&sample.sex, sample.target_age_days, bmi)?,
        score: bmi - cutoff,
        cutoff,
    })
}

/// Predictions (parallel, in input order) and their metric report.
pub fn evaluate(net: &Network, samples: &[&SequenceSample], charts: &ChartSet) -> Result<(Vec<Prediction>, MetricReport)> {
    let preds = samples
        .par_iter()
        .map(|s| predict(net, s, charts))
        .collect::<Result<Vec<_>>>()?;
    let report = report_for(samples, &preds)?;
    Ok((preds, report))
}

pub fn report_for(samples: &[&SequenceSample], preds: &[Prediction]) -> Result<MetricReport> {
    let targets: Vec<f64> = samples.iter().map(|s| s.target_bmi).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let bmi: Vec<f64> = preds.iter().map(|p| p.bmi).collect();
    let plabels: Vec<bool> = preds.iter().map(|p| p.obese).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    full_report(&targets, &bmi, &labels, &plabels, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{stratified_split, N_BINS};
    use crate::model::network::tests::random_sample;
    use crate::nnet::Adadelta;

    /// Target linear in the mean of the first input column.
    fn linear_fixture(n: usize, seed: u64) -> Vec<SequenceSample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut s = random_sample(&mut r, 4, 3, 0.5);
                let live: Vec<f64> = (0..N_BINS).filter(|&t| s.mask[t]).map(|t| s.x[t][0]).collect();
                let m = live.iter().sum::<f64>() / live.len() as f64;
                s.target_bmi = 18.0 + 4.0 * m + s.demo[0];
                s
            })
            .collect()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            demo_hidden: [6, 4],
            head_hidden: 8,
            batch_size: 10,
            max_epochs: 5,
            patience: 50,
            optimizer: Adadelta { lr: 1.0, ..Adadelta::default() },
            seed: 4,
            ..ModelConfig::default()
        }
    }

    fn cohort_of(samples: Vec<SequenceSample>, offset: u32) -> SubCohort {
        let labels: Vec<bool> = (0..samples.len()).map(|i| i % 4 == 0).collect();
        let samples: Vec<SequenceSample> = samples
            .into_iter()
            .zip(&labels)
            .map(|(mut s, &l)| {
                s.label = l;
                s
            })
            .collect();
        let (split, untestable) = stratified_split(&labels, 1);
        SubCohort {
            spec: WindowSpec::new(2, offset).unwrap(),
            samples,
            split,
            split_seed: 1,
            untestable,
        }
    }

    #[test]
    fn training_mse_decreases() {
        let data = linear_fixture(50, 8);
        let refs: Vec<&SequenceSample> = data.iter().collect();
        for arch in [Architecture::Interpretable, Architecture::Plain] {
            let mut net = Network::new(arch, 4, 3, &config()).unwrap();
            let t: Vec<f64> = data.iter().map(|s| s.target_bmi).collect();
            net.fit_target_scaler(&t);
            let h = train(&mut net, &refs, &refs, &config(), 5).unwrap();
            let mses: Vec<f64> = h.epochs.iter().map(|e| e.train_mse).collect();
            assert_eq!(mses.len(), 5);
            assert!(mses.windows(2).all(|w| w[1] < w[0]), "{arch:?}: {mses:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = linear_fixture(20, 1);
        let refs: Vec<&SequenceSample> = data.iter().collect();
        let mut cfg = config();
        cfg.optimizer.lr = 0.0;
        let mut net = Network::new(Architecture::Interpretable, 4, 3, &cfg).unwrap();
        let before = net.clone();
        train(&mut net, &refs, &refs, &cfg, 1).unwrap();
        let mut same = true;
        let mut vals = Vec::new();
        before.visit_params(&mut |_, p| vals.push(p.value.clone()));
        let mut k = 0;
        net.visit_params(&mut |_, p| {
            same &= p.value == vals[k];
            k += 1;
        });
        assert!(same);
    }

    #[test]
    fn same_seed_same_weights() {
        let data = linear_fixture(30, 2);
        let refs: Vec<&SequenceSample> = data.iter().collect();
        let run = || {
            let mut net = Network::new(Architecture::Interpretable, 4, 3, &config()).unwrap();
            train(&mut net, &refs, &refs[..10], &config(), 3).unwrap();
            crate::nnet::io::encode("{}", &net)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let mut net = Network::new(Architecture::Interpretable, 4, 3, &config()).unwrap();
        assert!(train(&mut net, &[], &[], &config(), 1).is_err());
    }

    #[test]
    fn base_models_and_fine_tuning() {
        let cohorts: Vec<SubCohort> = OFFSETS
            .iter()
            .map(|&k| cohort_of(linear_fixture(40, u64::from(k)), k))
            .collect();
        let mut cfg = config();
        cfg.max_epochs = 2;
        let bases = train_base_models(&cohorts, Architecture::Interpretable, 4, 3, &cfg).unwrap();
        assert_eq!(bases.len(), 3);
        for (b, k) in bases.iter().zip(OFFSETS) {
            assert_eq!(b.net.offset, Some(k));
            let n_train: usize = cohorts.iter().filter(|c| c.spec.offset() == k).map(|c| c.part(Split::Train).len()).sum();
            assert_eq!(pooled(&cohorts, k, Split::Train).len(), n_train);
            for s in cohorts[0].part(Split::Test) {
                assert!(b.net.predict_bmi(s).unwrap().is_finite());
            }
        }
        assert!(fine_tune(&bases[0], &cohorts[1], &cfg).is_err());

        let mut zero = cfg.clone();
        zero.finetune_epochs = 0;
        let same = fine_tune(&bases[0], &cohorts[0], &zero).unwrap();
        for s in &cohorts[0].samples {
            assert_eq!(same.net.predict_bmi(s).unwrap(), bases[0].net.predict_bmi(s).unwrap());
        }

        cfg.finetune_epochs = 3;
        let tuned = fine_tune(&bases[0], &cohorts[0], &cfg).unwrap();
        let valid = cohorts[0].part(Split::Valid);
        assert!(mse(&tuned.net, &valid).unwrap() <= mse(&bases[0].net, &valid).unwrap());
    }

    #[test]
    fn predict_thresholds_on_the_cutoff() {
        let charts = ChartSet::synthetic();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s = random_sample(&mut r, 4, 3, 0.5);
        let cut = charts.obese_cutoff(&s.sex, s.target_age_days).unwrap();
        let below = from_bmi(cut - 0.5, &s, &charts).unwrap();
        assert!(!below.obese && below.score < 0.0);
        let above = from_bmi(cut + 1.0, &s, &charts).unwrap();
        assert!(above.obese);
        assert!((above.score - 1.0).abs() < 1e-12);
        let at = from_bmi(cut, &s, &charts).unwrap();
        assert!(!at.obese);

        // within one (sex, age) cell, score order equals BMI order
        let bmis = [17.0, 22.5, 15.2, 30.1, 19.9];
        let scores: Vec<f64> = bmis.iter().map(|b| from_bmi(*b, &s, &charts).unwrap().score).collect();
        let mut by_bmi: Vec<usize> = (0..5).collect();
        by_bmi.sort_by(|&a, &b| bmis[a].total_cmp(&bmis[b]));
        let mut by_score: Vec<usize> = (0..5).collect();
        by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        assert_eq!(by_bmi, by_score);
    }
}
