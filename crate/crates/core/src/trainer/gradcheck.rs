//! Finite-difference verification of the training gradient, tensor by
//! tensor.

use super::config::TrainConfig;
use super::data::Sample;
use super::train::sample_gradient;
use crate::error::{Error, Result};
use crate::losses::{distill_loss, loss_graph, total_loss, LossSettings};
use crate::model::{forward_graph, Model};
use crate::moe::{route, RoutingMode};
use crate::numerics::{finite_difference_gradient, GradCheckReport, Tape};

/// Gap between the K-th and (K+1)-th largest teacher-routing gate values;
/// infinite when every expert is selected.
pub fn topk_margin(model: &Model, sample: &Sample) -> Result<f64> {
    let settings = model.settings();
    let cues = if settings.lambda_a > 0.0 {
        let c = sample.cues(sample.correct)?;
        Some((&c.positive, &c.negative))
    } else {
        None
    };
    let decision = route(
        &sample.input,
        &model.router,
        cues,
        settings.lambda_a,
        model.top_k(),
        RoutingMode::Teacher,
    )?;
    let mut gate = decision.routing_gate().to_vec();
    let k = model.top_k();
    if k == gate.len() {
        return Ok(f64::INFINITY);
    }
    gate.sort_by(|a, b| b.total_cmp(a));
    Ok(gate[k - 1] - gate[k])
}

/// Mean total loss of `samples` in teacher mode.
pub fn batch_loss(model: &Model, samples: &[Sample], settings: &LossSettings) -> Result<f64> {
    batch_loss_with_targets(model, samples, settings, None)
}

/// Teacher gates of every sample, the distillation targets the analytic
/// gradient treats as constants.
fn teacher_targets(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let forward = forward_graph(&mut tape, &params, model, s, RoutingMode::Teacher)?;
            Ok(tape.value(forward.teacher_gate).to_vec())
        })
        .collect()
}

/// Mean total loss with the distillation term measured against `targets`
/// instead of the current teacher gates, when given.
fn batch_loss_with_targets(
    model: &Model,
    samples: &[Sample],
    settings: &LossSettings,
    targets: Option<&[Vec<f64>]>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let forward = forward_graph(&mut tape, &params, model, s, RoutingMode::Teacher)?;
        let loss = loss_graph(&mut tape, &forward, s, settings)?;
        total += match targets {
            Some(t) if settings.distill => {
                let b = loss.breakdown(&tape);
                let distill = distill_loss(&t[i], tape.value(forward.student_gate))?;
                total_loss(b.main, b.contrast, distill)
            }
            _ => tape.scalar_value(loss.total),
        };
    }
    Ok(total / samples.len() as f64)
}

/// Compares the analytic gradient of the mean total loss with central
/// differences of step `step`, one report per parameter tensor.
///
/// The distillation target is detached in training, so the numeric side
/// holds the teacher gates at their unperturbed values too.
pub fn gradient_check(
    model: &Model,
    samples: &[Sample],
    config: &TrainConfig,
    step: f64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let settings = LossSettings::from_config(config);
    let n = samples.len() as f64;
    let mut analytic: Vec<Vec<f64>> = model.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for s in samples {
        let g = sample_gradient(model, s, &settings)?;
        for (acc, part) in analytic.iter_mut().zip(&g.grads) {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += v / n;
            }
        }
    }

    let names: Vec<(String, Vec<f64>)> = model.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let targets = teacher_targets(model, samples)?;
    let mut probe = model.clone();
    let mut reports = Vec::with_capacity(names.len());
    for (index, (name, original)) in names.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |p: &[f64]| {
                probe.tensors_mut()[index].copy_from_slice(p);
                batch_loss_with_targets(&probe, samples, &settings, Some(&targets)).unwrap_or(f64::NAN)
            },
            original,
            step,
        )
        .map_err(|e| match e {
            Error::ProbeFailure { index, .. } => Error::ProbeFailure {
                param: name.clone(),
                index,
            },
            other => other,
        })?;
        probe.tensors_mut()[index].copy_from_slice(original);
        reports.push(GradCheckReport::compare(name.clone(), &analytic[index], &numeric, tolerance));
    }
    Ok(reports)
}
