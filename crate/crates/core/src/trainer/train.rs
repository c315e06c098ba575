//! The optimization loop: teacher-routed forward pass, combined loss,
//! clipped AdamW update, periodic held-out evaluation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{Sample, SplitData};
use super::eval::evaluate;
use super::optim::{clip_global_norm, lr_at, AdamW};
use crate::error::{Error, Result};
use crate::losses::{loss_graph, LossBreakdown, LossSettings};
use crate::model::{forward_graph, Model};
use crate::moe::RoutingMode;
use crate::numerics::{seeded_rng, Tape};
use crate::options::predict;

/// Gradient of one sample's total loss, per parameter tensor.
pub struct SampleGradient {
    pub grads: Vec<Vec<f64>>,
    pub breakdown: LossBreakdown,
    pub correct: bool,
}

/// Forward and backward pass for one sample in teacher mode.
pub fn sample_gradient(model: &Model, sample: &Sample, settings: &LossSettings) -> Result<SampleGradient> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let forward = forward_graph(&mut tape, &params, model, sample, RoutingMode::Teacher)?;
    let loss = loss_graph(&mut tape, &forward, sample, settings)?;
    let grads = tape.backward(loss.total);
    let scores: Vec<f64> = forward.scores.iter().map(|s| tape.scalar_value(*s)).collect();
    Ok(SampleGradient {
        grads: params.all().iter().map(|v| grads.get(*v).to_vec()).collect(),
        breakdown: loss.breakdown(&tape),
        correct: predict(&scores)? == sample.correct,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// Batch means of the loss terms.
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub batch_accuracy: f64,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let width = parts.iter().map(|p| p.option_weights.len()).max().unwrap_or(0);
    let mut weights = vec![0.0; width];
    for p in parts {
        for (w, v) in weights.iter_mut().zip(&p.option_weights) {
            *w += v / n;
        }
    }
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        main: mean(|p| p.main),
        contrast: mean(|p| p.contrast),
        distill: mean(|p| p.distill),
        total: mean(|p| p.total),
        option_weights: weights,
    }
}

/// One update on the batch-mean objective. Per-sample gradients are
/// computed in parallel and summed in batch order.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &[&Sample],
    config: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let settings = LossSettings::from_config(config);
    let per_sample: Vec<SampleGradient> = batch
        .par_iter()
        .map(|s| sample_gradient(model, s, &settings))
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = per_sample[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
    for s in &per_sample {
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v / n;
            }
        }
    }
    let parts: Vec<LossBreakdown> = per_sample.iter().map(|s| s.breakdown.clone()).collect();
    let loss = mean_breakdown(&parts);
    if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step,
            breakdown: Box::new(loss),
        });
    }

    let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
    let lr = lr_at(step, config);
    optimizer.update(model.tensors_mut(), &grads, lr);
    let hits = per_sample.iter().filter(|s| s.correct).count();
    Ok(StepReport {
        loss,
        lr,
        grad_norm,
        batch_accuracy: hits as f64 / n,
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_main")]
    pub main: f64,
    #[serde(rename = "L_contrast")]
    pub contrast: f64,
    #[serde(rename = "L_distill")]
    pub distill: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub train_acc: f64,
    pub eval_acc_teacher: Option<f64>,
    pub eval_acc_student: Option<f64>,
    pub sim: Option<f64>,
}

pub fn write_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A finished training run.
pub struct TrainRun {
    pub model: Model,
    pub history: Vec<MetricsRow>,
}

/// The parameters [`train`] starts from.
pub fn initial_model(config: &TrainConfig) -> Result<Model> {
    Model::init(config, &mut seeded_rng(config.seed).fork())
}

/// Trains a fresh model on `data.train` for `config.total_steps` steps,
/// evaluating on `data.heldout` every `eval_interval` steps and at the end.
/// The recorded Sim is the student-mode held-out mean.
pub fn train(config: &TrainConfig, data: &SplitData) -> Result<TrainRun> {
    config.validate()?;
    if data.train.is_empty() || data.heldout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = initial_model(config)?;
    let mut rng = seeded_rng(config.seed);
    let _init_stream = rng.fork();
    let mut order_rng = rng.fork();
    let mut optimizer = AdamW::new(config);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(config.total_steps);
    for step in 1..=config.total_steps {
        let batch: Vec<&Sample> = (0..config.batch.min(order.len()))
            .map(|_| {
                if cursor == order.len() {
                    order_rng.shuffle(&mut order);
                    cursor = 0;
                }
                cursor += 1;
                &data.train[order[cursor - 1]]
            })
            .collect();
        let report = train_step(&mut model, &mut optimizer, &batch, config, step)?;

        let mut row = MetricsRow {
            step,
            lr: report.lr,
            main: report.loss.main,
            contrast: report.loss.contrast,
            distill: report.loss.distill,
            total: report.loss.total,
            train_acc: report.batch_accuracy,
            eval_acc_teacher: None,
            eval_acc_student: None,
            sim: None,
        };
        if step % config.eval_interval == 0 || step == config.total_steps {
            let teacher = evaluate(&model, &data.heldout, RoutingMode::Teacher)?;
            let student = evaluate(&model, &data.heldout, RoutingMode::Student)?;
            row.eval_acc_teacher = Some(teacher.accuracy);
            row.eval_acc_student = Some(student.accuracy);
            row.sim = student.sim;
        }
        history.push(row);
    }
    Ok(TrainRun { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::generate_dataset;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.d = 8;
        c.hidden = 8;
        c.num_experts = 4;
        c.data.train_size = 64;
        c.data.heldout_size = 32;
        c.total_steps = 30;
        c.warmup_steps = 5;
        c.batch = 8;
        c.eval_interval = 10;
        c
    }

    #[test]
    fn runs_are_deterministic() {
        let c = tiny();
        let data = generate_dataset(&c, 0).unwrap();
        let a = train(&c, &data).unwrap();
        let b = train(&c, &data).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 30);
        assert!(a.history[9].eval_acc_student.is_some());
        assert!(a.history[10].eval_acc_student.is_none());
    }

    #[test]
    fn ablated_terms_are_exactly_zero() {
        let mut c = tiny();
        c.ablation.no_contrast = true;
        c.ablation.no_distill = true;
        c.ablation.no_unc = true;
        let data = generate_dataset(&c, 1).unwrap();
        let run = train(&c, &data).unwrap();
        for row in &run.history {
            assert_eq!(row.contrast, 0.0);
            assert_eq!(row.distill, 0.0);
            assert_eq!(row.total, row.main);
        }
    }

    #[test]
    fn no_sa_has_zero_distillation() {
        let mut c = tiny();
        c.ablation.no_sa = true;
        let data = generate_dataset(&c, 1).unwrap();
        let run = train(&c, &data).unwrap();
        assert!(run.history.iter().all(|r| r.distill == 0.0));
    }

    #[test]
    fn no_unc_weights_are_one() {
        let mut c = tiny();
        c.ablation.no_unc = true;
        let data = generate_dataset(&c, 2).unwrap();
        let model = Model::init(&c, &mut seeded_rng(0)).unwrap();
        let settings = LossSettings::from_config(&c);
        for s in &data.train[..10] {
            let g = sample_gradient(&model, s, &settings).unwrap();
            assert_eq!(g.breakdown.option_weights, vec![1.0; c.option_count]);
        }
    }

    #[test]
    fn prompt_only_training_ignores_cues() {
        let mut c = tiny();
        c.ablation.prompt_only = true;
        let mut data = generate_dataset(&c, 3).unwrap();
        let with_cues = train(&c, &data).unwrap();
        for s in &mut data.train {
            for o in &mut s.options {
                o.cues = None;
            }
        }
        let without = train(&c, &data).unwrap();
        assert_eq!(with_cues.model, without.model);
    }

    #[test]
    fn zero_learning_rate_step_keeps_parameters() {
        let c = tiny();
        let data = generate_dataset(&c, 4).unwrap();
        let mut model = Model::init(&c, &mut seeded_rng(1)).unwrap();
        let before = model.clone();
        let mut opt = AdamW::new(&c);
        let batch: Vec<&Sample> = data.train.iter().take(8).collect();
        let report = train_step(&mut model, &mut opt, &batch, &c, 0).unwrap();
        assert_eq!(report.lr, 0.0);
        assert_eq!(model, before);
    }
}
