//! Training with learning-rate drop and early stopping, cross-validation,
//! layer-reuse experiments and group statistics.

mod contrast;
mod split;
pub mod stats;

pub use contrast::{rotation_contrast, ArchContrast, ContrastConfig, ContrastReport};
pub use split::{stratified_split, FoldPlan};
pub use stats::{bonferroni_pairwise, one_way_anova, AnovaResult, PairTest};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{NormMode, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, Shape};
use crate::surfdata::{ImageMap, NodeMap};

/// Samples evaluated per forward pass outside training.
const EVAL_CHUNK: usize = 25;

/// Labelled samples of one shape, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub shape: Shape,
    data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(shape: Shape, data: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if data.len() != shape.numel() * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of {shape:?}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, data, labels })
    }

    pub fn from_node_maps(maps: &[NodeMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let shape = Shape::Mesh {
            level: first.level,
            channels: first.channels,
        };
        let mut data = Vec::with_capacity(maps.len() * first.values.len());
        let mut labels = Vec::with_capacity(maps.len());
        for m in maps {
            if (m.level, m.channels) != (first.level, first.channels) {
                return Err(Error::Data(format!("sample '{}' differs in level or channels", m.sample_id)));
            }
            labels.push(m.label.ok_or_else(|| Error::Data(format!("sample '{}' has no label", m.sample_id)))?);
            data.extend_from_slice(&m.values);
        }
        Self::new(shape, data, labels)
    }

    pub fn from_images(images: &[ImageMap]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let shape = Shape::Image {
            height: first.height,
            width: first.width,
            channels: first.channels,
        };
        let mut data = Vec::with_capacity(images.len() * first.values.len());
        let mut labels = Vec::with_capacity(images.len());
        for im in images {
            if (im.height, im.width, im.channels) != (first.height, first.width, first.channels) {
                return Err(Error::Data(format!("image '{}' differs in size", im.sample_id)));
            }
            labels.push(im.label.ok_or_else(|| Error::Data(format!("image '{}' has no label", im.sample_id)))?);
            data.extend_from_slice(&im.values);
        }
        Self::new(shape, data, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Stacks the given samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::new(self.shape.dims(indices.len()), data).expect("consistent sample size")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Outputs of rows `0..rows` for every sample, in eval mode.
    pub fn through_prefix(&self, model: &Model, rows: usize) -> Result<Samples> {
        let shape = model.shapes()[rows];
        let mut data = Vec::with_capacity(self.len() * shape.numel());
        let all: Vec<usize> = (0..self.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let out = model.forward_rows(&self.batch(chunk), 0, rows, NormMode::Eval)?;
            data.extend_from_slice(out.data());
        }
        Samples::new(shape, data, self.labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub extended_epochs: usize,
    pub lr_initial: f64,
    pub lr_fine: f64,
    /// Epochs without a strict drop in validation error that count as saturated.
    pub saturation_window: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_epochs: 40,
            extended_epochs: 70,
            lr_initial: 0.02,
            lr_fine: 0.001,
            saturation_window: 5,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        if !(self.lr_fine > 0.0 || self.lr_initial == 0.0) || self.lr_fine > self.lr_initial || self.lr_fine < 0.0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < fine ({}) <= initial ({})",
                self.lr_fine, self.lr_initial
            )));
        }
        if self.max_epochs == 0 || self.extended_epochs < self.max_epochs {
            return Err(Error::Config("need 0 < max_epochs <= extended_epochs".into()));
        }
        if self.saturation_window == 0 {
            return Err(Error::Config("saturation window must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_error: f64,
    pub val_error: f64,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: Option<usize>,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub chosen_epoch: usize,
    pub test_accuracy: Option<f64>,
    /// `confusion[true][predicted]` on the test set.
    pub confusion: Option<Vec<Vec<usize>>>,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_secs: f64,
    pub config_hash: String,
}

impl RunRecord {
    pub fn best_val_error(&self) -> f64 {
        self.epochs[self.chosen_epoch - 1].val_error
    }

    /// The record with timing zeroed, for exact comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub error_rate: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error_rate
    }
}

/// Eval-mode error rate and confusion counts over `indices`.
pub fn evaluate(model: &Model, data: &Samples, indices: &[usize]) -> Result<Evaluation> {
    let k = model.classes();
    let mut confusion = vec![vec![0; k]; k];
    let mut wrong = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = model.logits(&data.batch(chunk), NormMode::Eval)?;
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            let pred = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let truth = data.labels[i];
            if truth >= k {
                return Err(Error::Data(format!("label {truth} outside the model's {k} classes")));
            }
            confusion[truth][pred] += 1;
            wrong += usize::from(pred != truth);
        }
    }
    Ok(Evaluation {
        error_rate: if indices.is_empty() {
            0.0
        } else {
            wrong as f64 / indices.len() as f64
        },
        confusion,
    })
}

/// Consecutive batches; a trailing batch of one sample joins the previous one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Trains `model` on `train` and keeps the parameters of the epoch with the
/// lowest validation error (earliest on ties).
///
/// When the validation error has not strictly improved for
/// `saturation_window` epochs the rate drops to `lr_fine`; once the fine
/// rate has also stalled for a window the run is saturated. Training stops at
/// `max_epochs` if saturated, otherwise continues until saturation or
/// `extended_epochs`.
pub fn train(model: &mut Model, data: &Samples, train: &[usize], val: &[usize], config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Config(format!(
            "need at least 2 training and 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if data.shape != model.input_shape() {
        return Err(Error::Config(format!(
            "data shape {:?} does not match model input {:?}",
            data.shape,
            model.input_shape()
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train.to_vec();
    let mut lr = config.lr_initial;
    let mut dropped = config.lr_fine == config.lr_initial;
    let mut stalled = 0;
    let mut best = (f64::INFINITY, 0usize, model.stored_values());
    let mut epochs = Vec::new();
    for epoch in 1..=config.extended_epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for batch in batches(&order, config.batch_size) {
            let out = model
                .train_step(&data.batch(batch), &data.batch_labels(batch), lr)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            loss_sum += out.loss * batch.len() as f64;
        }
        let train_error = evaluate(model, data, train)?.error_rate;
        let val_error = evaluate(model, data, val)?.error_rate;
        epochs.push(EpochStats {
            epoch,
            train_error,
            val_error,
            learning_rate: lr,
            mean_loss: loss_sum / order.len() as f64,
        });
        if val_error < best.0 {
            best = (val_error, epoch, model.stored_values());
            stalled = 0;
        } else {
            stalled += 1;
        }
        if stalled >= config.saturation_window && !dropped {
            lr = config.lr_fine;
            dropped = true;
            stalled = 0;
        }
        let saturated = dropped && stalled >= config.saturation_window;
        if epoch >= config.max_epochs && saturated {
            break;
        }
    }
    model.set_stored_values(&best.2)?;
    Ok(RunRecord {
        fold: None,
        seed: config.seed,
        chosen_epoch: best.1,
        epochs,
        test_accuracy: None,
        confusion: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash: config.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub folds: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single fold.
    pub std_accuracy: f64,
}

pub fn summarize(accuracies: &[f64]) -> Summary {
    let n = accuracies.len();
    let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
    let std = if n < 2 {
        0.0
    } else {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary {
        folds: n,
        mean_accuracy: mean,
        std_accuracy: std,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl CrossValidation {
    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.test_accuracy).collect()
    }
}

/// One model per fold from `build(seed)` with `seed = config.seed + fold`,
/// trained on the fold's training part, early-stopped on its validation
/// part, and scored on the shared test set. `on_fold` sees each finished
/// model in fold order.
pub fn cross_validate<B, F>(
    build: B,
    data: &Samples,
    plan: &FoldPlan,
    config: &TrainConfig,
    mut on_fold: F,
) -> Result<CrossValidation>
where
    B: Fn(u64) -> Result<Model>,
    F: FnMut(usize, &Model, &RunRecord) -> Result<()>,
{
    if plan.labels.len() != data.len() {
        return Err(Error::Config(format!(
            "fold plan covers {} samples, data has {}",
            plan.labels.len(),
            data.len()
        )));
    }
    let mut records = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let seed = config.seed.wrapping_add(fold as u64);
        let mut model = build(seed)?;
        let (train_idx, val_idx) = plan.fold(fold);
        let fold_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let mut record = train(&mut model, data, &train_idx, &val_idx, &fold_config)?;
        if !plan.test.is_empty() {
            let eval = evaluate(&model, data, &plan.test)?;
            record.test_accuracy = Some(eval.accuracy());
            record.confusion = Some(eval.confusion);
        }
        record.fold = Some(fold);
        on_fold(fold, &model, &record)?;
        records.push(record);
    }
    let accuracies: Vec<f64> = records.iter().filter_map(|r| r.test_accuracy).collect();
    Ok(CrossValidation {
        summary: summarize(&accuracies),
        records,
    })
}

/// Reuses the first `freeze` rows of `base` as a fixed feature extractor:
/// prefix outputs are computed once per sample, then a freshly initialized
/// head (the remaining rows) is cross-validated on them.
pub fn transfer_experiment(
    base: &Model,
    data: &Samples,
    freeze: usize,
    plan: &FoldPlan,
    config: &TrainConfig,
) -> Result<CrossValidation> {
    if data.shape != base.input_shape() {
        return Err(Error::Config(format!(
            "data shape {:?} does not match the checkpoint input {:?}",
            data.shape,
            base.input_shape()
        )));
    }
    let mut frozen = base.clone();
    frozen.freeze_prefix(freeze)?;
    let features = data.through_prefix(&frozen, freeze)?;
    let mut head = frozen.head(freeze)?;
    head.freeze_prefix(0)?;
    cross_validate(
        |seed| {
            let mut m = head.clone();
            m.reinitialize(seed);
            Ok(m)
        },
        &features,
        plan,
        config,
        |_, _, _| Ok(()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_gcnn, GcnnConfig};
    use crate::sampler::PatchTemplate;
    use crate::surfdata::{demean, synthesize_dataset, NoiseSpec, SynthSpec};

    fn small_data(n: usize, noise: NoiseSpec) -> (Model, Samples) {
        let cfg = GcnnConfig {
            input_level: 2,
            blocks: 1,
            filters: 3,
            patch: PatchTemplate::Polygonal { order: 1 },
            hidden: 6,
            ..GcnnConfig::default()
        };
        let model = build_gcnn(None, &cfg).unwrap();
        let spec = SynthSpec {
            noise,
            ..SynthSpec::default()
        };
        let maps = synthesize_dataset(model.hierarchy().unwrap(), 2, n, &spec, 3).unwrap();
        let maps: Vec<NodeMap> = maps.iter().map(|m| demean(m).unwrap()).collect();
        (model, Samples::from_node_maps(&maps).unwrap())
    }

    #[test]
    fn batching_merges_a_single_leftover() {
        let order: Vec<usize> = (0..11).collect();
        let b = batches(&order, 5);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![5, 6]);
        let b = batches(&order[..7], 5);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![5, 2]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, data) = small_data(20, NoiseSpec::default());
        let before = model.flat_params();
        let cfg = TrainConfig {
            lr_initial: 0.0,
            lr_fine: 0.0,
            max_epochs: 3,
            extended_epochs: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let idx: Vec<usize> = (0..20).collect();
        let rec = train(&mut model, &data, &idx[..15], &idx[15..], &cfg).unwrap();
        assert_eq!(model.flat_params(), before);
        assert_eq!(rec.epochs.len(), 3);
        assert!(rec.epochs.iter().all(|e| e.val_error == rec.epochs[0].val_error));
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let (mut model, data) = small_data(40, NoiseSpec::default());
        let cfg = TrainConfig {
            max_epochs: 8,
            extended_epochs: 12,
            batch_size: 8,
            saturation_window: 2,
            ..TrainConfig::default()
        };
        let idx: Vec<usize> = (0..40).collect();
        let rec = train(&mut model, &data, &idx[..30], &idx[30..], &cfg).unwrap();
        let min = rec.epochs.iter().map(|e| e.val_error).fold(f64::INFINITY, f64::min);
        assert_eq!(rec.best_val_error(), min);
        let first_min = rec.epochs.iter().position(|e| e.val_error == min).unwrap() + 1;
        assert_eq!(rec.chosen_epoch, first_min);
        assert_eq!(evaluate(&model, &data, &idx[30..]).unwrap().error_rate, min);
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = summarize(&[0.8, 0.9]);
        assert!((s.mean_accuracy - 0.85).abs() < 1e-15);
        assert!((s.std_accuracy - 0.005f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_repeat_exactly() {
        let (model, data) = small_data(30, NoiseSpec::default());
        let plan = stratified_split(&data.labels, 3, 0.2, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            extended_epochs: 2,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let run = || {
            cross_validate(
                |s| {
                    let mut m = model.clone();
                    m.reinitialize(s);
                    Ok(m)
                },
                &data,
                &plan,
                &cfg,
                |_, _, _| Ok(()),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |c: &CrossValidation| c.records.iter().map(RunRecord::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.records.len(), 3);
    }

    #[test]
    fn fold_order_only_permutes_records() {
        let (model, data) = small_data(30, NoiseSpec::default());
        let plan = stratified_split(&data.labels, 3, 0.2, 0).unwrap();
        let mut reversed = plan.clone();
        reversed.folds.reverse();
        // Seed-independent runs, so only the fold contents matter.
        let cfg = TrainConfig {
            max_epochs: 2,
            extended_epochs: 2,
            batch_size: 6,
            shuffle: false,
            ..TrainConfig::default()
        };
        let run = |p: &FoldPlan| cross_validate(|_| Ok(model.clone()), &data, p, &cfg, |_, _, _| Ok(())).unwrap();
        let (a, b) = (run(&plan), run(&reversed));
        for i in 0..3 {
            let (x, y) = (&a.records[i], &b.records[2 - i]);
            assert_eq!(x.epochs, y.epochs);
            assert_eq!((x.chosen_epoch, x.test_accuracy), (y.chosen_epoch, y.test_accuracy));
            assert_eq!(x.confusion, y.confusion);
        }
    }

    #[test]
    fn transfer_rejects_mismatched_data() {
        let (model, data) = small_data(12, NoiseSpec::none());
        let plan = stratified_split(&data.labels, 2, 0.0, 0).unwrap();
        let other = Samples::new(Shape::Flat { features: 3 }, vec![0.0; 36], data.labels.clone()).unwrap();
        assert!(matches!(
            transfer_experiment(&model, &other, 4, &plan, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
