//! Training loop, evaluation and the ablation harness.

pub mod ablation;
pub mod data;
pub mod metrics;
pub mod optim;

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

pub use ablation::{ablate_families, sweep_hyperparams, AblationRow, AblationTable, SweepAxis, SweepCurve, SweepPoint, SweepValue};
pub use data::{DataKind, Dataset, DatasetSpec, Split, Task};
pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::{Algorithm, OptimConfig, Optimizer, Schedule};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, Model};
use crate::real::Real;
use crate::rng::{derive_seed, stream, Xoshiro256};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Seeds batch order and flip augmentation.
    pub seed: u64,
    /// Random horizontal/vertical flips of training items.
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { seed: 0, augment: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Running training accuracy (classification) or mIoU (segmentation).
    pub metric: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,metric,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6e}", e.epoch, e.loss, e.metric, e.lr);
        }
        s
    }
}

/// Checks that the model's head fits `task`.
pub fn check_head<T: Real>(model: &Model<T>, task: Task) -> Result<()> {
    let head = model.descriptor().head();
    match (head, task) {
        (Some(LayerSpec::DenseHead { classes, .. }), Task::Classification { classes: k })
        | (Some(LayerSpec::SegHead { classes, .. }), Task::Segmentation { classes: k })
            if *classes == k =>
        {
            Ok(())
        }
        _ => Err(Error::Validation(format!(
            "model head {:?} does not fit a {task:?} dataset",
            head.map(|h| h.to_owned())
        ))),
    }
}

fn spec_bytes<T: Real>(model: &Model<T>) -> Vec<Vec<u8>> {
    model.transform_specs().iter().map(|s| s.to_bytes()).collect()
}

fn argmax_labels<T: Real>(out: &Tensor<T>) -> Vec<usize> {
    let s = out.shape();
    let mut pred = Vec::with_capacity(s.n() * s.hw());
    for n in 0..s.n() {
        for p in 0..s.hw() {
            let mut best = 0;
            let mut best_v = out.data()[s.offset(n, 0, 0, 0) + p];
            for c in 1..s.c() {
                let v = out.data()[s.offset(n, c, 0, 0) + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            pred.push(best);
        }
    }
    pred
}

fn param_norms<T: Real>(model: &Model<T>) -> String {
    model
        .params()
        .iter()
        .map(|p| format!("{:.3e}", p.l2_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains `model` on `data.train`.
pub fn train<T: Real>(model: &mut Model<T>, data: &Dataset<T>, optim: &OptimConfig, opts: &TrainOptions) -> Result<History> {
    train_with(model, data, optim, opts, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    optim: &OptimConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    optim.validate()?;
    check_head(model, data.task)?;
    let split = &data.train;
    if split.is_empty() {
        return Err(Error::arg("training split is empty"));
    }
    let specs_before = spec_bytes(model);
    let mut rng = Xoshiro256::seed_from_u64(derive_seed(opts.seed, stream::SHUFFLE));
    let mut optimizer = Optimizer::new(optim, &model.params());
    let n = split.len();
    let steps_per_epoch = n.div_ceil(optim.batch);
    let total_steps = steps_per_epoch * optim.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..optim.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut confusion = ConfusionMatrix::new(data.task.classes());
        let mut lr = optim.lr;
        for (b, idx) in order.chunks(optim.batch).enumerate() {
            let flips: Option<Vec<(bool, bool)>> =
                opts.augment.then(|| idx.iter().map(|_| (rng.below(2) == 1, rng.below(2) == 1)).collect());
            let (x, labels) = split.batch(idx, flips.as_deref())?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let (out, params) = model.forward(&mut tape, xv)?;
            let labels: Arc<[usize]> = labels.into();
            for (&t, p) in labels.iter().zip(argmax_labels(tape.value(out))) {
                confusion.add(t, p);
            }
            let loss = tape.cross_entropy(out, labels)?;
            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at epoch {epoch}, batch {b}; parameter norms [{}]",
                    param_norms(model)
                )));
            }
            loss_sum += loss_value;
            tape.backward(loss)?;
            let grads: Vec<Vec<T>> = params
                .iter()
                .map(|&v| tape.grad(v).map(<[T]>::to_vec).ok_or_else(|| Error::State("missing gradient".into())))
                .collect::<Result<_>>()?;
            lr = optim.lr_at(step, total_steps);
            optimizer.step(&mut model.params_mut(), &grads, lr)?;
            step += 1;
        }
        if spec_bytes(model) != specs_before {
            return Err(Error::State(format!("fixed transforms changed during epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            metric: match data.task {
                Task::Classification { .. } => confusion.overall_accuracy(),
                Task::Segmentation { .. } => confusion.mean_iou(),
            },
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

const EVAL_BATCH: usize = 64;

/// Scores `model` on `split`. With `threads > 1` batches run on a rayon
/// pool; integer confusion counts make the result independent of the
/// thread count.
pub fn evaluate<T: Real>(model: &Model<T>, split: &Split<T>, task: Task, threads: usize) -> Result<Metrics> {
    check_head(model, task)?;
    let classes = task.classes();
    let batches: Vec<Vec<usize>> = (0..split.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(<[usize]>::to_vec)
        .collect();
    let score = |idx: &Vec<usize>| -> Result<ConfusionMatrix> {
        let (x, labels) = split.batch(idx, None)?;
        let out = model.predict(&x)?;
        let mut m = ConfusionMatrix::new(classes);
        for (t, p) in labels.into_iter().zip(argmax_labels(&out)) {
            if t >= classes {
                return Err(Error::Validation(format!("label {t} out of range for {classes} classes")));
            }
            m.add(t, p);
        }
        Ok(m)
    };
    let parts: Vec<ConfusionMatrix> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(e.to_string()))?;
        pool.install(|| batches.par_iter().map(score).collect::<Result<_>>())?
    } else {
        batches.iter().map(score).collect::<Result<_>>()?
    };
    let mut total = ConfusionMatrix::new(classes);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total.metrics())
}

/// Headline metric: accuracy for classification, mIoU for segmentation.
pub fn headline(metrics: &Metrics, task: Task) -> f64 {
    match task {
        Task::Classification { .. } => metrics.accuracy,
        Task::Segmentation { .. } => metrics.miou,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{convert_to_sinefm, tiny_vgg};
    use crate::transforms::TransformFamily;

    fn small() -> (Model<f32>, Dataset<f32>) {
        let d = convert_to_sinefm(&tiny_vgg(4, 16), 16, 5, TransformFamily::Sinusoidal, 1);
        (
            Model::build(&d, 1).unwrap(),
            Dataset::generate(&DatasetSpec::synth_class(64, 16, 1)).unwrap(),
        )
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut m, data) = small();
        let before: Vec<Tensor<f32>> = m.params().into_iter().cloned().collect();
        let h = train(&mut m, &data, &OptimConfig { epochs: 0, ..Default::default() }, &TrainOptions::default()).unwrap();
        assert!(h.epochs.is_empty());
        assert!(before.iter().zip(m.params()).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn loss_decreases_and_transforms_survive() {
        let (mut m, data) = small();
        let specs = spec_bytes(&m);
        let cfg = OptimConfig {
            epochs: 3,
            batch: 16,
            lr: 3e-3,
            ..Default::default()
        };
        let h = train(&mut m, &data, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(h.epochs.len(), 3);
        assert!(h.epochs[2].loss < h.epochs[0].loss, "{:?}", h.epochs);
        assert_eq!(spec_bytes(&m), specs);
        assert_eq!(h.to_csv().lines().count(), 4);
    }

    #[test]
    fn head_mismatch_rejected() {
        let (mut m, _) = small();
        let seg = Dataset::<f32>::generate(&DatasetSpec::synth_seg(4, 2, 0)).unwrap();
        assert!(matches!(
            train(&mut m, &seg, &OptimConfig::default(), &TrainOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn evaluate_is_pure_and_thread_independent() {
        let (m, data) = small();
        let a = evaluate(&m, &data.test, data.task, 1).unwrap();
        let b = evaluate(&m, &data.test, data.task, 1).unwrap();
        let c = evaluate(&m, &data.test, data.task, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.confusion.total(), 16);
    }

    #[test]
    fn nan_aborts_with_diagnostics() {
        let (mut m, data) = small();
        m.params_mut()[0].data_mut()[0] = f32::NAN;
        let err = train(&mut m, &data, &OptimConfig { epochs: 1, ..Default::default() }, &TrainOptions::default())
            .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("epoch 0") && msg.contains("norms")),
            other => panic!("{other}"),
        }
    }
}
