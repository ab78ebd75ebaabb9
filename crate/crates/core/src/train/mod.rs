//! Training, evaluation, and cross-validation.

mod ablation;
mod cv;
mod metrics;
mod optim;
mod schedule;

pub use ablation::{
    format_cv_csv, run_ablation, run_ablation_study, AblationRow, AblationStudy, AblationTable, OrderCheck,
    Variant,
};
pub use cv::{kfold_split, Fold};
pub use metrics::{compute_metrics, pairwise_auc, roc_auc, MetricsReport};
pub use optim::AdamW;
pub use schedule::{lr_at, lr_at_position, lr_at_step};

use rand::seq::SliceRandom;

use crate::config::{CvConfig, ModelConfig, ScheduleGranularity, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{seeded_stream, PneumoModel};
use crate::numeric::{bce_with_logit, sigmoid, Matrix, Tape};

/// Numerically stable binary cross-entropy of a logit against a 0/1 label.
pub fn bce_loss(logit: f64, label: u8) -> f64 {
    bce_with_logit(logit, f64::from(label))
}

/// Encoder output for every sample. The encoder is frozen, so this is
/// computed once and reused across epochs and folds.
pub fn encode_samples(model: &PneumoModel, ds: &Dataset) -> Result<Vec<Matrix>> {
    ds.samples.iter().map(|s| model.encode(&s.features)).collect()
}

/// Trains on the whole dataset. Returns the per-epoch mean loss.
pub fn train(model: &mut PneumoModel, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let tokens = encode_samples(model, ds)?;
    let ids: Vec<usize> = (0..ds.len()).collect();
    train_on_tokens(model, &tokens, &ds.labels(), &ids, cfg, 0)
}

/// Trains on `ids` of pre-encoded samples. `stream` selects the shuffle
/// stream under `cfg.seed`, so folds draw independent batch orders.
pub fn train_on_tokens(
    model: &mut PneumoModel,
    tokens: &[Matrix],
    labels: &[u8],
    ids: &[usize],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut rng = seeded_stream(cfg.seed, stream);
    let mut opt = AdamW::new(cfg);
    let mut order = ids.to_vec();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = match cfg.schedule {
                ScheduleGranularity::PerEpoch => lr_at(epoch, cfg),
                ScheduleGranularity::PerStep => lr_at_step(epoch * steps_per_epoch + batch, steps_per_epoch, cfg),
            };
            let (loss, grads) = {
                let mut tape = Tape::new(&model.store);
                let xs: Vec<&Matrix> = chunk.iter().map(|&i| &tokens[i]).collect();
                let ys: Vec<f64> = chunk.iter().map(|&i| f64::from(labels[i])).collect();
                let logits = model.batch_logits(&mut tape, &xs)?;
                let loss = tape.bce_mean(logits, &ys)?;
                let value = tape.value(loss)[(0, 0)];
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                (value, tape.backward(loss)?)
            };
            opt.step(&mut model.store, grads.params(), lr)?;
            total += loss * chunk.len() as f64;
        }
        trace.push(total / order.len() as f64);
    }
    Ok(trace)
}

/// Sigmoid scores for `ids`.
pub fn predict(model: &PneumoModel, tokens: &[Matrix], ids: &[usize]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        let mut tape = Tape::new(&model.store);
        let xs: Vec<&Matrix> = chunk.iter().map(|&i| &tokens[i]).collect();
        let logits = model.batch_logits(&mut tape, &xs)?;
        let values = tape.value(logits);
        if !values.all_finite() {
            return Err(Error::NonFinite("model logit".into()));
        }
        scores.extend(values.as_slice().iter().map(|&l| sigmoid(l)));
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

/// Metric-wise mean over folds with confusion counts summed.
pub fn mean_report(folds: &[MetricsReport]) -> MetricsReport {
    let k = folds.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| folds.iter().map(f).sum::<f64>() / k;
    let auc = folds
        .iter()
        .map(|r| r.auc)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / k);
    let (sensitivity, specificity, accuracy) = (
        mean(|r| r.sensitivity),
        mean(|r| r.specificity),
        mean(|r| r.accuracy),
    );
    MetricsReport {
        sensitivity,
        specificity,
        accuracy,
        auc,
        avg: auc.map(|a| (sensitivity + specificity + accuracy + a) / 4.0),
        tp: folds.iter().map(|r| r.tp).sum(),
        fp: folds.iter().map(|r| r.fp).sum(),
        tn: folds.iter().map(|r| r.tn).sum(),
        fn_: folds.iter().map(|r| r.fn_).sum(),
    }
}

fn run_fold(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threshold: f64,
    tokens: &[Matrix],
    labels: &[u8],
    fold: &Fold,
    index: usize,
) -> Result<MetricsReport> {
    let mut model = PneumoModel::new(model_cfg)?;
    train_on_tokens(&mut model, tokens, labels, &fold.train, train_cfg, index as u64)?;
    let scores = predict(&model, tokens, &fold.test)?;
    let truth: Vec<u8> = fold.test.iter().map(|&i| labels[i]).collect();
    compute_metrics(&scores, &truth, threshold)
}

/// Grouped k-fold cross-validation. Every fold trains a fresh model from the
/// same initialization. With `parallel`, folds run on separate threads;
/// results are identical either way.
pub fn cross_validate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cv_cfg: &CvConfig,
    ds: &Dataset,
    parallel: bool,
) -> Result<CvReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let folds = kfold_split(ds, cv_cfg.folds, cv_cfg.seed)?;
    let tokens = encode_samples(&PneumoModel::new(model_cfg)?, ds)?;
    let labels = ds.labels();
    let run = |(i, f): (usize, &Fold)| run_fold(model_cfg, train_cfg, cv_cfg.threshold, &tokens, &labels, f, i);
    let reports: Vec<MetricsReport> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = folds.iter().enumerate().map(|job| s.spawn(move || run(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        folds.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    Ok(CvReport {
        mean: mean_report(&reports),
        folds: reports,
    })
}
