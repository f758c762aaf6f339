use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{loss_and_grad, predict, FeatureScaling, LogisticModel};
use crate::metrics::BinaryConfusion;

use super::{ProtocolError, TrainingExample};

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Learning rate and momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub momentum: f64,
}

impl HyperParams {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, ProtocolError> {
        let hp = Self { lr, momentum };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.lr > 0.0 && self.lr.is_finite() && (0.0..1.0).contains(&self.momentum) {
            Ok(())
        } else {
            Err(ProtocolError::InvalidHyperParams(*self))
        }
    }
}

/// Heavy-ball update: `v <- m v + g; w <- w - lr v`.
pub fn momentum_step(weights: &mut [f64], velocity: &mut [f64], grad: &[f64], hp: HyperParams) {
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = hp.momentum * *v + g;
        *w -= hp.lr * *v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// Weights after each epoch, aligned with `epochs`.
    #[serde(skip)]
    pub checkpoints: Vec<Vec<f64>>,
    /// Standardization fitted on the training set.
    #[serde(skip)]
    pub scaling: Option<FeatureScaling>,
    pub chosen_epoch: usize,
}

impl TrainingTrace {
    /// `base` with the weights of the chosen epoch and a fresh velocity.
    pub fn chosen_model(&self, base: &LogisticModel) -> LogisticModel {
        LogisticModel::with_weights(
            self.checkpoints[self.chosen_epoch - 1].clone(),
            base.preprocess.clone(),
        )
        .with_threshold(base.threshold)
        .with_scaling(self.scaling.clone())
    }
}

/// Earliest epoch with the minimum validation loss. Returns 1 for an
/// empty trace.
pub fn select_checkpoint(records: &[EpochRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.validation_loss < records[best].validation_loss {
            best = i;
        }
    }
    best + 1
}

fn mean_loss(model: &LogisticModel, set: &[TrainingExample]) -> Result<f64, ProtocolError> {
    let mut sum = 0.0;
    for ex in set {
        sum += loss_and_grad(model, &ex.features, ex.label)?.0;
    }
    Ok(sum / set.len() as f64)
}

/// Mini-batch SGD with momentum on the logistic cross-entropy.
///
/// Each epoch shuffles the training set with a generator derived from
/// `(seed, epoch)`, steps on the mean gradient of every batch, then records
/// the mean training and validation losses of the resulting weights and
/// checkpoints them. Training starts from `model`'s weights with its
/// velocity reset to zero; the feature standardization is refitted on
/// `train_set` first.
pub fn train(
    model: &LogisticModel,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    hp: HyperParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingTrace, ProtocolError> {
    if train_set.is_empty() {
        return Err(ProtocolError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(ProtocolError::EmptySet("validation"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ProtocolError::InvalidConfig(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    hp.validate()?;

    let mut current = model
        .clone()
        .with_scaling(FeatureScaling::fit(train_set.iter().map(|e| &e.features)));
    current.velocity = vec![0.0; current.weights.len()];
    let dim = current.weights.len();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad = vec![0.0; dim];
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let ex = &train_set[i];
                let (loss, g) = loss_and_grad(&current, &ex.features, ex.label)?;
                if !loss.is_finite() {
                    return Err(ProtocolError::DivergedLoss { epoch });
                }
                grad.iter_mut().zip(&g).for_each(|(acc, x)| *acc += x);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let LogisticModel {
                weights, velocity, ..
            } = &mut current;
            momentum_step(weights, velocity, &grad, hp);
        }
        if current.weights.iter().any(|w| !w.is_finite()) {
            return Err(ProtocolError::DivergedLoss { epoch });
        }
        let train_loss = mean_loss(&current, train_set)?;
        let validation_loss = mean_loss(&current, val_set)?;
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(ProtocolError::DivergedLoss { epoch });
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        checkpoints.push(current.weights.clone());
    }
    let chosen_epoch = select_checkpoint(&records);
    Ok(TrainingTrace {
        epochs: records,
        checkpoints,
        scaling: current.scaling,
        chosen_epoch,
    })
}

/// Confusion of `model`'s thresholded predictions over `set`.
pub fn confusion(
    model: &LogisticModel,
    set: &[TrainingExample],
) -> Result<BinaryConfusion, ProtocolError> {
    let mut cm = BinaryConfusion::default();
    for ex in set {
        cm.record(ex.label, predict(model, &ex.features)?.label);
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{FeatureVector, FEATURE_LEN};
    use crate::imaging::PreprocessConfig;
    use rand::Rng;

    fn records(losses: &[f64]) -> Vec<EpochRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| EpochRecord {
                epoch: i + 1,
                train_loss: l,
                validation_loss: l,
            })
            .collect()
    }

    #[test]
    fn checkpoint_examples() {
        assert_eq!(
            select_checkpoint(&records(&[0.50, 0.40, 0.35, 0.37, 0.40])),
            3
        );
        assert_eq!(select_checkpoint(&records(&[0.5, 0.4, 0.3, 0.2])), 4);
        assert_eq!(select_checkpoint(&records(&[0.4, 0.3, 0.3])), 2);
    }

    #[test]
    fn two_momentum_steps_by_hand() {
        let hp = HyperParams::new(0.1, 0.9).unwrap();
        let g = [1.0, -2.0];
        let w0 = [0.5, 0.5];
        let (mut w, mut v) = (w0, [0.0; 2]);
        momentum_step(&mut w, &mut v, &g, hp);
        assert_eq!(v, g);
        for i in 0..2 {
            assert!((w[i] - (w0[i] - 0.1 * g[i])).abs() < 1e-15);
        }
        momentum_step(&mut w, &mut v, &g, hp);
        for i in 0..2 {
            assert!((v[i] - 1.9 * g[i]).abs() < 1e-15);
            assert!((w[i] - (w0[i] - 0.29 * g[i])).abs() < 1e-15);
        }
    }

    fn example(id: usize, x: f64, label: bool) -> TrainingExample {
        let mut f = vec![0.0; FEATURE_LEN];
        f[0] = x;
        f[FEATURE_LEN - 1] = 1.0;
        TrainingExample {
            id: id.to_string(),
            features: FeatureVector::from_vec(f),
            label,
        }
    }

    #[test]
    fn single_sample_momentum_free_epoch_is_one_gradient_step() {
        let base = LogisticModel::new(PreprocessConfig::raw());
        let set = vec![example(0, 2.0, true)];
        let hp = HyperParams::new(0.5, 0.0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
        };
        let trace = train(&base, &set, &set, hp, &cfg, 0).unwrap();
        let (_, g) = loss_and_grad(&base, &set[0].features, true).unwrap();
        let expected: Vec<f64> = base
            .weights
            .iter()
            .zip(&g)
            .map(|(w, g)| w - 0.5 * g)
            .collect();
        assert_eq!(trace.checkpoints[0], expected);
        assert_eq!(trace.chosen_epoch, 1);
    }

    fn separable(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2 == 0;
                let x = if label {
                    rng.gen_range(0.5..1.5)
                } else {
                    rng.gen_range(-1.5..-0.5)
                };
                example(i, x, label)
            })
            .collect()
    }

    #[test]
    fn small_lr_loss_is_non_increasing() {
        let set = separable(200, 1);
        let base = LogisticModel::new(PreprocessConfig::raw());
        let hp = HyperParams::new(1e-3, 0.0).unwrap();
        let trace = train(&base, &set, &set, hp, &TrainConfig::default(), 3).unwrap();
        for w in trace.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-6);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let set = separable(100, 2);
        let base = LogisticModel::new(PreprocessConfig::raw());
        let hp = HyperParams::new(0.05, 0.9).unwrap();
        let a = train(
            &base,
            &set[..80],
            &set[80..],
            hp,
            &TrainConfig::default(),
            11,
        )
        .unwrap();
        let b = train(
            &base,
            &set[..80],
            &set[80..],
            hp,
            &TrainConfig::default(),
            11,
        )
        .unwrap();
        assert_eq!(a, b);
        let model = a.chosen_model(&base);
        assert_eq!(model.weights, a.checkpoints[a.chosen_epoch - 1]);
        let cm = confusion(&model, &set).unwrap();
        assert_eq!(cm.tp + cm.tn, 100);
    }

    #[test]
    fn divergence_is_reported() {
        let mut set = separable(10, 3);
        set[0].features = FeatureVector::from_vec(vec![1e300; FEATURE_LEN]);
        let base = LogisticModel::new(PreprocessConfig::raw());
        let hp = HyperParams::new(1e10, 0.9).unwrap();
        let err = train(&base, &set, &set, hp, &TrainConfig::default(), 0).unwrap_err();
        assert!(
            matches!(
                err,
                ProtocolError::DivergedLoss { .. } | ProtocolError::Detector(_)
            ),
            "{err:?}"
        );
    }

    #[test]
    fn invalid_inputs() {
        let base = LogisticModel::new(PreprocessConfig::raw());
        let set = separable(4, 0);
        let hp = HyperParams {
            lr: 0.1,
            momentum: 0.5,
        };
        assert!(matches!(
            train(&base, &[], &set, hp, &TrainConfig::default(), 0),
            Err(ProtocolError::EmptySet(_))
        ));
        assert!(HyperParams::new(0.0, 0.5).is_err());
        assert!(HyperParams::new(0.1, 1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn appending_worse_epochs_keeps_the_choice(
            losses in proptest::collection::vec(0.0f64..1.0, 1..20),
            extra in proptest::collection::vec(0.0f64..1.0, 0..10)
        ) {
            let chosen = select_checkpoint(&records(&losses));
            proptest::prop_assert!(chosen >= 1 && chosen <= losses.len());
            let best = losses[chosen - 1];
            let mut longer = losses.clone();
            longer.extend(extra.iter().map(|e| best + e + 1e-9));
            proptest::prop_assert_eq!(select_checkpoint(&records(&longer)), chosen);
        }
    }
}
