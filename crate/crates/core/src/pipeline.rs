//! Training loop, evaluation, checkpoints and the per-epoch metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, Transform};
use crate::dataset::ImageChip;
use crate::image::Image;
use crate::losses::{self, LossBreakdown, LossConfig, LossParts};
use crate::model::{Architecture, ForwardOptions, ForwardOutput, HdaNet, ModelConfig};
use crate::rng;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::{BatchNormMode, NAdam, NAdamConfig, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty chip set")]
    Empty,
    #[error("non-finite value in epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: u32,
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error("mask value {value} outside [0, 1) in epoch {epoch}, batch {batch}")]
    MaskRange { epoch: u32, batch: usize, value: f32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: NAdamConfig,
    /// Set from the run seed, never from the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Abort on the first non-finite value instead of carrying on.
    pub strict: bool,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            optimizer: NAdamConfig::default(),
            seed: 0,
            strict: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.lr_decay > 0.0 && o.eps > 0.0) {
            return bad("optimizer needs lr, weight_decay >= 0 and lr_decay, eps > 0");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub oa: Option<f64>,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_cls,l_con,l_seg,l_spa,total,oa,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let oa = self.oa.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch, l.l_cls, l.l_con, l.l_seg, l.l_spa, l.total, oa, self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn final_oa(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.oa)
    }
}

/// Stacks single-channel images into `B×1×H×W`.
pub fn stack_images(images: &[&Image]) -> Tensor<f32> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), 1, h, w], data).expect("images of one size")
}

/// Both augmented views of one chip and their segmentation targets.
#[derive(Debug, Clone)]
pub struct PreparedChip {
    pub views: [Image; 2],
    pub targets: [Image; 2],
}

/// The pseudo-label follows the view's rotation so the target stays aligned.
fn view_target(pseudo: &Image, transforms: &[Transform]) -> Image {
    for t in transforms {
        if let Transform::Rotate { degrees } = t {
            return augment::rotate_small(pseudo, *degrees).expect("augmented rotation is in range");
        }
    }
    pseudo.clone()
}

pub fn prepare(chip: &ImageChip, cfg: &AugmentConfig, seed: u64) -> PreparedChip {
    let pair = augment::sample_domain_pair(&chip.amplitude, cfg, seed);
    PreparedChip {
        targets: [
            view_target(&chip.pseudo_mask, &pair.transforms1),
            view_target(&chip.pseudo_mask, &pair.transforms2),
        ],
        views: [pair.view1, pair.view2],
    }
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
pub fn par_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<O>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Full training objective on a stacked two-view batch `2B×1×H×W` (first
/// half view 1, second half view 2) with train-mode batch-norm. Branches
/// whose loss weight is zero are not built.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<T>,
    params: &[Var],
    buffers: &mut [Tensor<T>],
    views: Tensor<T>,
    targets: &[Tensor<T>; 2],
    labels: &[usize],
    loss: &LossConfig,
) -> std::result::Result<(Var, LossBreakdown, ForwardOutput), TensorError> {
    let b = labels.len();
    let opts = ForwardOptions {
        mode: BatchNormMode::Train,
        decoder: loss.alpha != 0.0,
        simsiam: loss.contrastive_weight != 0.0,
        mask_gate: None,
    };
    let x = tape.constant(views);
    let out = arch.forward(tape, params, buffers, x, &opts)?;
    let halves = |tape: &mut Tape<T>, v| -> std::result::Result<_, TensorError> {
        Ok((tape.slice_outer(v, 0, b)?, tape.slice_outer(v, b, b)?))
    };
    let (v1, v2) = halves(tape, out.v)?;
    let l_cls = losses::classification_loss(tape, v1, v2, labels, loss)?;
    let l_con = match (out.m, out.n) {
        (Some(m), Some(n)) => {
            let (m1, m2) = halves(tape, m)?;
            let (n1, n2) = halves(tape, n)?;
            Some(losses::contrastive_loss(tape, m1, n1, m2, n2)?)
        }
        _ => None,
    };
    let l_seg = match out.seg_logits {
        Some(o) => {
            let (o1, o2) = halves(tape, o)?;
            Some(losses::segmentation_loss(tape, o1, o2, &targets[0], &targets[1])?)
        }
        None => None,
    };
    let (z1, z2) = halves(tape, out.z_m)?;
    let l_spa = losses::sparse_loss(tape, z1, z2)?;
    let parts = LossParts {
        l_cls,
        l_con,
        l_seg,
        l_spa,
    };
    let (total, breakdown) = losses::total_loss(tape, parts, loss)?;
    Ok((total, breakdown, out))
}

/// Small architecture for the full-model gradient check.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        num_classes: 2,
        channels: [2, 3, 4],
        decoder_channels: [2, 2],
        primary_channels: 8,
        capsule_dim: 4,
        digit_dim: 4,
        align_dim: 6,
        projector_hidden: 24,
        predictor_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Checks every parameter gradient of the full objective (all branches on)
/// against 64-bit central differences, on a 2-image batch of random chips.
pub fn full_model_gradcheck(
    seed: u64,
    h: f64,
    loss: &LossConfig,
) -> std::result::Result<GradCheckReport, TensorError> {
    let cfg = gradcheck_model();
    let mut model = HdaNet::<f64>::new(cfg.clone(), rng::derive(seed, &[rng::STREAM_INIT]))
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    let s = cfg.image_size;
    let mut r = rng::stream(seed, &[rng::STREAM_DATA]);
    // Zero-initialised biases put every fully masked capsule exactly at the
    // kink of the norm in squash; jitter all parameters off such points.
    for p in &mut model.params {
        for v in p.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let mut uniform = |shape: &[usize]| {
        let n = shape.iter().product::<usize>();
        Tensor::from_f64(shape, &(0..n).map(|_| r.random::<f64>()).collect::<Vec<_>>())
    };
    let views = uniform(&[4, 1, s, s])?;
    let targets = [uniform(&[2, 1, s, s])?, uniform(&[2, 1, s, s])?];
    let labels = [0, 1];
    gradcheck::check(&model.params, h, None, |tape, params| {
        let mut buffers = model.buffers.clone();
        let (total, _, _) = batch_loss(
            &model.arch,
            tape,
            params,
            &mut buffers,
            views.clone(),
            &targets,
            &labels,
            loss,
        )?;
        Ok(total)
    })
}

/// Model, optimizer and configuration of a training run.
pub struct Trainer {
    pub model: HdaNet<f32>,
    pub optimizer: NAdam<f32>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub workers: usize,
    /// When set, every batch's loss breakdown is appended here.
    pub batch_log: Option<Vec<LossBreakdown>>,
    epoch: u32,
}

impl Trainer {
    pub fn new(model: ModelConfig, loss: LossConfig, augment: AugmentConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        loss.validate().map_err(PipelineError::Config)?;
        augment.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let model = HdaNet::new(model, rng::derive(train.seed, &[rng::STREAM_INIT]))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let shapes: Vec<&[usize]> = model.params.iter().map(|p| p.shape()).collect();
        let optimizer = NAdam::new(train.optimizer, &shapes);
        Ok(Self {
            model,
            optimizer,
            train,
            loss,
            augment,
            workers: 1,
            batch_log: None,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// One optimizer step on a batch of prepared chips.
    pub fn step(&mut self, batch: &[PreparedChip], labels: &[usize], batch_index: usize) -> Result<LossBreakdown> {
        let epoch = self.epoch;
        let non_finite = |source: TensorError| match source {
            TensorError::NonFinite { .. } => PipelineError::NonFinite {
                epoch,
                batch: batch_index,
                source,
            },
            other => PipelineError::Tensor(other),
        };
        let views: Vec<&Image> = (0..2).flat_map(|v| batch.iter().map(move |c| &c.views[v])).collect();
        let targets: [Tensor<f32>; 2] =
            std::array::from_fn(|v| stack_images(&batch.iter().map(|c| &c.targets[v]).collect::<Vec<_>>()));
        let mut tape = if self.train.strict { Tape::strict() } else { Tape::new() };
        let params = self.model.bind(&mut tape);
        let (total, breakdown, out) = batch_loss(
            &self.model.arch,
            &mut tape,
            &params,
            &mut self.model.buffers,
            stack_images(&views),
            &targets,
            labels,
            &self.loss,
        )
        .map_err(non_finite)?;
        if let Some(&bad) = tape.value(out.z_m).data().iter().find(|v| !(**v >= 0.0 && **v < 1.0)) {
            return Err(PipelineError::MaskRange {
                epoch,
                batch: batch_index,
                value: bad,
            });
        }
        if self.train.strict && !breakdown.total.is_finite() {
            return Err(non_finite(TensorError::NonFinite { op: "total_loss" }));
        }
        let mut grads = tape.backward(total).map_err(non_finite)?;
        let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| grads.take(p)).collect();
        self.optimizer.step(&mut self.model.params, &grads)?;
        if let Some(log) = &mut self.batch_log {
            log.push(breakdown);
        }
        Ok(breakdown)
    }

    /// One pass over `chips` in a fresh permutation; returns batch-size
    /// weighted mean losses. The learning rate decays after the epoch.
    pub fn train_epoch(&mut self, chips: &[ImageChip]) -> Result<LossBreakdown> {
        if chips.is_empty() {
            return Err(PipelineError::Empty);
        }
        let seed = self.train.seed;
        let epoch = self.epoch as u64;
        let mut order: Vec<usize> = (0..chips.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::STREAM_SHUFFLE, epoch]));

        let mut sum = LossBreakdown {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            contrastive_weight: self.loss.contrastive_weight,
            ..LossBreakdown::default()
        };
        let bs = self.train.batch_size;
        // A trailing batch of one cannot be normalized in train mode, so
        // it joins the previous batch.
        let mut bounds: Vec<(usize, usize)> = (0..order.len()).step_by(bs).map(|s| (s, (s + bs).min(order.len()))).collect();
        if bounds.len() > 1 && bounds.last().is_some_and(|&(s, e)| e - s < 2) {
            let (_, e) = bounds.pop().unwrap();
            bounds.last_mut().unwrap().1 = e;
        }
        for (bi, &(s, e)) in bounds.iter().enumerate() {
            let idx = &order[s..e];
            let prepared = par_map(idx, self.workers, |&i| {
                prepare(&chips[i], &self.augment, rng::derive(seed, &[rng::STREAM_AUGMENT, epoch, i as u64]))
            });
            let labels: Vec<usize> = idx.iter().map(|&i| chips[i].label).collect();
            let l = self.step(&prepared, &labels, bi)?;
            let w = idx.len() as f64;
            sum.l_cls += w * l.l_cls;
            sum.l_con += w * l.l_con;
            sum.l_seg += w * l.l_seg;
            sum.l_spa += w * l.l_spa;
            sum.total += w * l.total;
        }
        let n = chips.len() as f64;
        for v in [&mut sum.l_cls, &mut sum.l_con, &mut sum.l_seg, &mut sum.l_spa, &mut sum.total] {
            *v /= n;
        }
        self.optimizer.end_epoch();
        self.epoch += 1;
        Ok(sum)
    }
}

pub const EVAL_BATCH: usize = 100;

/// Predicted class per chip, no augmentation, batch-norm in eval mode.
pub fn predict_chips(model: &HdaNet<f32>, chips: &[ImageChip], workers: usize) -> Result<Vec<usize>> {
    let batches: Vec<&[ImageChip]> = chips.chunks(EVAL_BATCH).collect();
    let parts = par_map(&batches, workers, |batch| {
        let images: Vec<&Image> = batch.iter().map(|c| &c.amplitude).collect();
        model.predict(&stack_images(&images))
    });
    let mut out = Vec::with_capacity(chips.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Overall accuracy.
pub fn evaluate(model: &HdaNet<f32>, chips: &[ImageChip], workers: usize) -> Result<f64> {
    if chips.is_empty() {
        return Err(PipelineError::Empty);
    }
    let pred = predict_chips(model, chips, workers)?;
    let hits = pred.iter().zip(chips).filter(|(p, c)| **p == c.label).count();
    Ok(hits as f64 / chips.len() as f64)
}

/// Appends epoch rows to a CSV, writing the header on creation.
pub struct MetricsLog {
    file: File,
    path: String,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = File::create(path).map_err(io_err(path))?;
        writeln!(file, "{METRICS_HEADER}").map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", rec.csv_row())
            .and_then(|_| self.file.flush())
            .map_err(|source| PipelineError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

/// Trains for the configured number of epochs, evaluating on `test` as
/// scheduled and always after the final epoch.
pub fn fit(
    trainer: &mut Trainer,
    train: &[ImageChip],
    test: &[ImageChip],
    mut log: Option<&mut MetricsLog>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<RunMetrics> {
    let mut metrics = RunMetrics::default();
    let epochs = trainer.train.epochs;
    for e in 0..epochs {
        let start = Instant::now();
        let losses = trainer.train_epoch(train)?;
        let last = e + 1 == epochs;
        let scheduled = trainer.train.eval_every > 0 && (e + 1) % trainer.train.eval_every == 0;
        let oa = if !test.is_empty() && (last || scheduled) {
            Some(evaluate(&trainer.model, test, trainer.workers)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: e + 1,
            losses,
            oa,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(log) = log.as_deref_mut() {
            log.write(&rec)?;
        }
        progress(&rec);
        metrics.epochs.push(rec);
    }
    Ok(metrics)
}

/// FNV-1a over the bit patterns of every parameter and running statistic.
pub fn checksum(model: &HdaNet<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in model.params.iter().chain(&model.buffers) {
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            num_classes: 2,
            channels: [2, 3, 4],
            decoder_channels: [2, 2],
            primary_channels: 8,
            capsule_dim: 4,
            digit_dim: 4,
            align_dim: 8,
            projector_hidden: 32,
            predictor_hidden: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> Vec<ImageChip> {
        let spec = DatasetSpec {
            num_classes: 2,
            train_per_class: 5,
            test_per_class: 1,
            image_size: 32,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, 1).unwrap().train
    }

    fn trainer(lr: f64, seed: u64) -> Trainer {
        let train = TrainConfig {
            batch_size: 4,
            epochs: 1,
            seed,
            strict: true,
            optimizer: NAdamConfig {
                lr,
                ..NAdamConfig::default()
            },
            ..TrainConfig::default()
        };
        Trainer::new(tiny_model(), LossConfig::default(), AugmentConfig::default(), train).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut t = trainer(0.0, 1);
        let before = t.model.params.clone();
        let l = t.train_epoch(&tiny_data()).unwrap();
        assert_eq!(before, t.model.params);
        assert!((l.recombined() - l.total).abs() < 1e-6 * l.total.abs().max(1.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = tiny_data();
        let mut a = trainer(1e-3, 5);
        let mut b = trainer(1e-3, 5);
        a.train_epoch(&data).unwrap();
        b.workers = 3;
        b.train_epoch(&data).unwrap();
        assert_eq!(checksum(&a.model), checksum(&b.model));
        let mut c = trainer(1e-3, 6);
        c.train_epoch(&data).unwrap();
        assert_ne!(checksum(&a.model), checksum(&c.model));
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let mut t = trainer(1e-3, 1);
        t.train_epoch(&tiny_data()).unwrap();
        t.train_epoch(&tiny_data()).unwrap();
        assert!((t.optimizer.effective_lr() - 1e-3 * 0.98 * 0.98).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_idempotent_and_worker_independent() {
        let t = trainer(1e-3, 2);
        let data = tiny_data();
        let a = evaluate(&t.model, &data, 1).unwrap();
        assert_eq!(a, evaluate(&t.model, &data, 1).unwrap());
        assert_eq!(a, evaluate(&t.model, &data, 4).unwrap());
        assert!(matches!(evaluate(&t.model, &[], 1), Err(PipelineError::Empty)));
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let mut t = trainer(1e-3, 3);
        let data: Vec<ImageChip> = tiny_data().into_iter().take(9).collect();
        t.train_epoch(&data).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_row_format() {
        let rec = EpochRecord {
            epoch: 3,
            losses: LossBreakdown {
                l_cls: 0.5,
                l_con: f64::NAN,
                l_seg: 0.25,
                l_spa: 1.0,
                total: 0.535,
                alpha: 0.1,
                beta: 0.01,
                contrastive_weight: 0.0,
            },
            oa: None,
            seconds: 1.23456,
        };
        assert_eq!(rec.csv_row(), "3,0.5,NaN,0.25,1,0.535,,1.235");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let t = Instant::now();
        let report = full_model_gradcheck(5, 1e-3, &LossConfig::default()).unwrap();
        eprintln!("{report:?} in {:?}", t.elapsed());
        assert!(report.checked > 100);
        assert!(report.passes(1e-3), "{report:?}");
    }
}
