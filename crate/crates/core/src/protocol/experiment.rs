use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{Detector, HeuristicLighting, LogisticModel};
use crate::metrics::{aggregate, binary_metrics, AggregateReport, BinaryConfusion, MetricReport};

use super::{
    confusion, featurize, stratified_split, train, Backend, EpochRecord, ExperimentConfig,
    GridMode, HyperParams, LabeledSample, Prediction, ProtocolError, TrainConfig, TrainingExample,
};

/// Confusion and metrics of `model` on `set`.
pub fn evaluate(
    model: &LogisticModel,
    set: &[TrainingExample],
) -> Result<(BinaryConfusion, MetricReport), ProtocolError> {
    let cm = confusion(model, set)?;
    Ok((cm, binary_metrics(&cm)?))
}

/// Runs `detector` over image samples and tallies its binary confusion.
pub fn evaluate_detector<D: Detector + ?Sized>(
    detector: &D,
    samples: &[LabeledSample],
    target_side: u32,
) -> Result<(BinaryConfusion, MetricReport), ProtocolError> {
    if samples.is_empty() {
        return Err(ProtocolError::EmptySet("evaluation"));
    }
    let cm = samples
        .par_iter()
        .map(|s| {
            let predicted = s
                .load(target_side)
                .and_then(|t| Ok(detector.detect(&t)?.label))
                .map_err(|e| ProtocolError::Sample {
                    id: s.id.clone(),
                    source: Box::new(e),
                })?;
            let mut part = BinaryConfusion::default();
            part.record(s.label, predicted);
            Ok::<_, ProtocolError>(part)
        })
        .try_reduce(BinaryConfusion::default, |a, b| Ok(a + b))?;
    Ok((cm, binary_metrics(&cm)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub lr: f64,
    pub momentum: f64,
    pub validation_custom: Option<f64>,
    pub chosen_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearch {
    pub seed: u64,
    pub best: HyperParams,
    pub table: Vec<GridCell>,
}

/// Index of the winning cell: highest validation Custom, ties to the lower
/// learning rate, then the lower momentum. An undefined score ranks below
/// every defined one.
pub fn rank_grid(table: &[GridCell]) -> Option<usize> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&table[a], &table[b]);
        x.lr.total_cmp(&y.lr)
            .then(x.momentum.total_cmp(&y.momentum))
    });
    let mut best: Option<usize> = None;
    for i in order {
        let better = match best {
            None => true,
            Some(b) => match (table[i].validation_custom, table[b].validation_custom) {
                (Some(s), Some(t)) => s > t,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Trains every grid pair on one stratified split and keeps the pair whose
/// chosen checkpoint scores the highest Custom on the validation subset.
pub fn grid_search(
    grid: &[HyperParams],
    examples: &[TrainingExample],
    ratios: [u32; 3],
    seed: u64,
    cfg: &TrainConfig,
    base: &LogisticModel,
) -> Result<GridSearch, ProtocolError> {
    if grid.is_empty() {
        return Err(ProtocolError::EmptyGrid);
    }
    let split = stratified_split(examples, ratios, seed)?;
    let table = grid
        .par_iter()
        .map(|&hp| {
            let cell = || -> Result<GridCell, ProtocolError> {
                let trace = train(base, &split.train, &split.validation, hp, cfg, seed)?;
                let (_, report) = evaluate(&trace.chosen_model(base), &split.validation)?;
                Ok(GridCell {
                    lr: hp.lr,
                    momentum: hp.momentum,
                    validation_custom: report.custom,
                    chosen_epoch: trace.chosen_epoch,
                })
            };
            cell().map_err(|e| ProtocolError::Grid {
                hp,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let winner = rank_grid(&table).expect("grid is non-empty");
    Ok(GridSearch {
        seed,
        best: grid[winner],
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    /// 1-based repetition index.
    pub run: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochRecord>,
    pub test_confusion: BinaryConfusion,
    pub test: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedOutcome {
    pub runs: Vec<RunReport>,
    pub aggregate: AggregateReport,
    /// Chosen checkpoint of every logistic run, in run order.
    pub models: Vec<LogisticModel>,
}

fn logistic_run(
    examples: &[TrainingExample],
    run: usize,
    seed: u64,
    hp: HyperParams,
    ratios: [u32; 3],
    cfg: &TrainConfig,
    base: &LogisticModel,
) -> Result<(RunReport, LogisticModel), ProtocolError> {
    let split = stratified_split(examples, ratios, seed)?;
    let trace = train(base, &split.train, &split.validation, hp, cfg, seed)?;
    let model = trace.chosen_model(base);
    let (test_confusion, test) = evaluate(&model, &split.test)?;
    Ok((
        RunReport {
            run,
            seed,
            hyperparams: Some(hp),
            chosen_epoch: Some(trace.chosen_epoch),
            epochs: trace.epochs,
            test_confusion,
            test,
        },
        model,
    ))
}

fn collect_runs(
    results: Vec<Result<(RunReport, LogisticModel), ProtocolError>>,
) -> Result<RepeatedOutcome, ProtocolError> {
    let mut runs = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let (report, model) = r.map_err(|e| ProtocolError::Run {
            run: i + 1,
            source: Box::new(e),
        })?;
        runs.push(report);
        models.push(model);
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.test).collect();
    Ok(RepeatedOutcome {
        aggregate: aggregate(&reports)?,
        runs,
        models,
    })
}

/// `k` repetitions with split seeds `base_seed + 1 ..= base_seed + k`, each
/// trained with `hp` and scored on its test subset.
pub fn repeated_experiment(
    examples: &[TrainingExample],
    k: usize,
    hp: HyperParams,
    cfg: &TrainConfig,
    base_seed: u64,
    ratios: [u32; 3],
    base: &LogisticModel,
) -> Result<RepeatedOutcome, ProtocolError> {
    if k == 0 {
        return Err(ProtocolError::InvalidConfig("k must be at least 1".into()));
    }
    let results = (1..=k)
        .into_par_iter()
        .map(|i| logistic_run(examples, i, base_seed + i as u64, hp, ratios, cfg, base))
        .collect();
    collect_runs(results)
}

/// Repeated splits over fixed predictions, for untrained backends.
pub fn repeated_evaluation(
    predictions: &[Prediction],
    k: usize,
    base_seed: u64,
    ratios: [u32; 3],
) -> Result<(Vec<RunReport>, AggregateReport), ProtocolError> {
    if k == 0 {
        return Err(ProtocolError::InvalidConfig("k must be at least 1".into()));
    }
    let mut runs = Vec::with_capacity(k);
    for run in 1..=k {
        let seed = base_seed + run as u64;
        let split = stratified_split(predictions, ratios, seed)?;
        let mut cm = BinaryConfusion::default();
        for p in &split.test {
            cm.record(p.label, p.predicted);
        }
        runs.push(RunReport {
            run,
            seed,
            hyperparams: None,
            chosen_epoch: None,
            epochs: Vec::new(),
            test_confusion: cm,
            test: binary_metrics(&cm)?,
        });
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.test).collect();
    Ok((runs, aggregate(&reports)?))
}

/// Full experiment record, serialized as the experiment's JSON output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub samples: usize,
    pub positives: usize,
    /// One entry per grid search performed.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub grid_search: Vec<GridSearch>,
    pub runs: Vec<RunReport>,
    pub aggregate: AggregateReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn chosen_hyperparams(&self) -> Vec<Option<HyperParams>> {
        self.runs.iter().map(|r| r.hyperparams).collect()
    }
}

/// Grid search plus repeated training on precomputed features. Returns the
/// report and the first run's chosen model.
pub fn run_logistic_experiment(
    cfg: &ExperimentConfig,
    examples: &[TrainingExample],
) -> Result<(ExperimentReport, LogisticModel), ProtocolError> {
    cfg.validate()?;
    let grid = cfg.grid.pairs()?;
    let tc = cfg.train_config();
    let base = cfg.base_model();
    let k = cfg.repetitions;
    let (searches, outcome) = match cfg.grid_search {
        GridMode::Once => {
            let search = grid_search(&grid, examples, cfg.ratios, cfg.base_seed + 1, &tc, &base)?;
            let outcome = repeated_experiment(
                examples,
                k,
                search.best,
                &tc,
                cfg.base_seed,
                cfg.ratios,
                &base,
            )?;
            (vec![search], outcome)
        }
        GridMode::PerRun => {
            let per_run: Vec<_> = (1..=k)
                .map(|i| {
                    let seed = cfg.base_seed + i as u64;
                    grid_search(&grid, examples, cfg.ratios, seed, &tc, &base).and_then(|s| {
                        let run = logistic_run(examples, i, seed, s.best, cfg.ratios, &tc, &base)?;
                        Ok((s, run))
                    })
                })
                .collect();
            let mut searches = Vec::new();
            let mut runs = Vec::new();
            for r in per_run {
                match r {
                    Ok((s, run)) => {
                        searches.push(s);
                        runs.push(Ok(run));
                    }
                    Err(e) => runs.push(Err(e)),
                }
            }
            (searches, collect_runs(runs)?)
        }
    };
    let model = outcome.models[0].clone();
    let report = ExperimentReport {
        config: cfg.clone(),
        samples: examples.len(),
        positives: examples.iter().filter(|e| e.label).count(),
        grid_search: searches,
        runs: outcome.runs,
        aggregate: outcome.aggregate,
    };
    Ok((report, model))
}

/// Runs the configured experiment over image samples. The model is the
/// first run's chosen checkpoint for the logistic backend and `None` for
/// the heuristic one.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    samples: &[LabeledSample],
) -> Result<(ExperimentReport, Option<LogisticModel>), ProtocolError> {
    cfg.validate()?;
    match cfg.backend {
        Backend::Logistic => {
            let examples = featurize(samples, &cfg.base_model())?;
            let (report, model) = run_logistic_experiment(cfg, &examples)?;
            Ok((report, Some(model)))
        }
        Backend::Heuristic => {
            let detector = HeuristicLighting::new(cfg.heuristic, 0.0)?;
            let side = cfg.preprocess.target_side;
            let predictions = samples
                .par_iter()
                .map(|s| {
                    let predicted = s
                        .load(side)
                        .and_then(|t| Ok(detector.detect(&t)?.label))
                        .map_err(|e| ProtocolError::Sample {
                            id: s.id.clone(),
                            source: Box::new(e),
                        })?;
                    Ok(Prediction {
                        id: s.id.clone(),
                        label: s.label,
                        predicted,
                    })
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            let (runs, aggregate) =
                repeated_evaluation(&predictions, cfg.repetitions, cfg.base_seed, cfg.ratios)?;
            let report = ExperimentReport {
                config: cfg.clone(),
                samples: samples.len(),
                positives: samples.iter().filter(|s| s.label).count(),
                grid_search: Vec::new(),
                runs,
                aggregate,
            };
            Ok((report, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{FeatureVector, FEATURE_LEN};
    use crate::imaging::PreprocessConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable(n: usize, seed: u64, gap: f64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 3 != 0;
                let x = if label {
                    rng.gen_range(gap..1.0 + gap)
                } else {
                    rng.gen_range(-1.0 - gap..-gap)
                };
                let mut f = vec![0.0; FEATURE_LEN];
                f[0] = x;
                f[1] = rng.gen_range(-1.0..1.0);
                f[FEATURE_LEN - 1] = 1.0;
                TrainingExample {
                    id: format!("s{i}"),
                    features: FeatureVector::from_vec(f),
                    label,
                }
            })
            .collect()
    }

    fn base() -> LogisticModel {
        LogisticModel::new(PreprocessConfig::raw())
    }

    fn cell(lr: f64, momentum: f64, s: Option<f64>) -> GridCell {
        GridCell {
            lr,
            momentum,
            validation_custom: s,
            chosen_epoch: 1,
        }
    }

    #[test]
    fn ranking_rules() {
        let t = [
            cell(0.2, 0.9, Some(0.8)),
            cell(0.1, 0.99, Some(0.8)),
            cell(0.1, 0.9, Some(0.8)),
        ];
        assert_eq!(rank_grid(&t), Some(2));
        let t = [cell(0.1, 0.9, None), cell(0.2, 0.9, Some(0.1))];
        assert_eq!(rank_grid(&t), Some(1));
        let t = [cell(0.1, 0.9, Some(0.5)), cell(0.2, 0.9, Some(0.6))];
        assert_eq!(rank_grid(&t), Some(1));
        assert_eq!(rank_grid(&[]), None);
    }

    #[test]
    fn singleton_grid_matches_direct_training() {
        let data = separable(300, 1, 0.1);
        let hp = HyperParams::new(0.05, 0.9).unwrap();
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 16,
        };
        let g = grid_search(&[hp], &data, [8, 1, 1], 7, &tc, &base()).unwrap();
        assert_eq!(g.best, hp);
        let split = stratified_split(&data, [8, 1, 1], 7).unwrap();
        let trace = train(&base(), &split.train, &split.validation, hp, &tc, 7).unwrap();
        let (_, direct) = evaluate(&trace.chosen_model(&base()), &split.validation).unwrap();
        assert_eq!(g.table[0].validation_custom, direct.custom);
        assert_eq!(g.table[0].chosen_epoch, trace.chosen_epoch);
    }

    #[test]
    fn perfect_pair_wins_the_grid() {
        // separable only along f0 - f1; the first gradient points along f0
        // alone, which a vanishing step never corrects
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<TrainingExample> = (0..400)
            .map(|i| {
                let label = i % 2 == 0;
                let noise = rng.gen_range(-3.0..3.0);
                let mut f = vec![0.0; FEATURE_LEN];
                f[0] = noise + if label { 0.5 } else { -0.5 };
                f[1] = noise;
                f[FEATURE_LEN - 1] = 1.0;
                TrainingExample {
                    id: format!("s{i}"),
                    features: FeatureVector::from_vec(f),
                    label,
                }
            })
            .collect();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 16,
        };
        let grid = [
            HyperParams::new(1e-9, 0.0).unwrap(),
            HyperParams::new(0.5, 0.9).unwrap(),
        ];
        let g = grid_search(&grid, &data, [8, 1, 1], 3, &tc, &base()).unwrap();
        assert_eq!(g.table[1].validation_custom, Some(1.0));
        assert!(g.table[0].validation_custom.unwrap() < 1.0);
        assert_eq!(g.best, grid[1]);
    }

    #[test]
    fn separable_repetitions_are_perfect_and_reproducible() {
        let data = separable(400, 3, 0.3);
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 16,
        };
        let hp = HyperParams::new(0.5, 0.9).unwrap();
        let a = repeated_experiment(&data, 5, hp, &tc, 100, [8, 1, 1], &base()).unwrap();
        for r in &a.runs {
            assert_eq!(r.test.accuracy, Some(1.0));
        }
        assert_eq!(a.aggregate.accuracy.mean, 1.0);
        assert_eq!(a.aggregate.p4.std, 0.0);
        assert_eq!(
            a.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![101, 102, 103, 104, 105]
        );
        let b = repeated_experiment(&data, 5, hp, &tc, 100, [8, 1, 1], &base()).unwrap();
        assert_eq!(a, b);
        let one = repeated_experiment(&data, 1, hp, &tc, 100, [8, 1, 1], &base()).unwrap();
        assert_eq!((one.aggregate.k, one.aggregate.accuracy.std), (1, 0.0));
    }

    #[test]
    fn full_report_is_byte_stable() {
        let data = separable(200, 4, 0.2);
        let cfg = ExperimentConfig {
            epochs: 4,
            repetitions: 3,
            grid: super::super::GridConfig {
                lr: vec![0.1, 0.2],
                momentum: vec![0.5, 0.9],
            },
            ..ExperimentConfig::default()
        };
        let (a, model) = run_logistic_experiment(&cfg, &data).unwrap();
        let (b, _) = run_logistic_experiment(&cfg, &data).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.grid_search.len(), 1);
        assert_eq!(a.grid_search[0].table.len(), 4);
        assert!(a
            .chosen_hyperparams()
            .iter()
            .all(|h| *h == Some(a.grid_search[0].best)));
        let doc: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(doc["runs"].as_array().unwrap().len(), 3);
        assert!(doc["aggregate"]["custom"]["mean"].is_number());
        assert_eq!(model.threshold, cfg.threshold);

        let per_run = ExperimentConfig {
            grid_search: GridMode::PerRun,
            ..cfg
        };
        let (c, _) = run_logistic_experiment(&per_run, &data).unwrap();
        assert_eq!(c.grid_search.len(), 3);
        assert_eq!(c.grid_search[0], a.grid_search[0]);
    }

    #[test]
    fn fixed_predictions_evaluate_on_each_test_split() {
        let preds: Vec<Prediction> = (0..100)
            .map(|i| Prediction {
                id: i.to_string(),
                label: i < 60,
                predicted: i < 50,
            })
            .collect();
        let (runs, agg) = repeated_evaluation(&preds, 5, 0, [8, 1, 1]).unwrap();
        assert_eq!(runs.len(), 5);
        for r in &runs {
            assert_eq!(r.test_confusion.total(), 10);
            assert_eq!(r.test_confusion.fp, 0);
        }
        assert_eq!(agg.precision.mean, 1.0);
    }
}
