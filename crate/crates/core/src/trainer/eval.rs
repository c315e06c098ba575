//! Held-out evaluation: accuracy, cue alignment, routing diagnostics.

use rayon::prelude::*;

use super::data::Sample;
use crate::diagnostics::{sim_score, topk_gate, DiagnosticsBuilder, RoutingDiagnostics};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe::RoutingMode;
use crate::options::{score_all_options, ScoredSample};

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mode: RoutingMode,
    pub accuracy: f64,
    /// Mean Sim over samples whose answer carries cues.
    pub sim: Option<f64>,
    pub diagnostics: RoutingDiagnostics,
    pub predictions: Vec<usize>,
}

/// Fraction of `predictions` equal to each sample's correct index.
pub fn accuracy(predictions: &[usize], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != samples.len() {
        return Err(Error::Shape {
            context: "predictions",
            expected: samples.len(),
            actual: predictions.len(),
        });
    }
    let hits = predictions.iter().zip(samples).filter(|(p, s)| **p == s.correct).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Sim of one scored sample against its answer's cue difference, or `None`
/// when the answer has no cues.
pub fn sample_sim(sample: &Sample, scored: &ScoredSample) -> Result<Option<f64>> {
    let cues = match sample.cues(sample.correct) {
        Ok(c) => c,
        Err(Error::MissingCue { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let gate = topk_gate(scored.decision.routing_gate(), &scored.decision.topk)?;
    sim_score(&scored.expert_outputs, &gate, &cues.difference()).map(Some)
}

pub fn evaluate(model: &Model, samples: &[Sample], mode: RoutingMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scored: Vec<(ScoredSample, Option<f64>)> = samples
        .par_iter()
        .map(|s| {
            let scored = score_all_options(s, model, mode)?;
            let sim = sample_sim(s, &scored)?;
            Ok((scored, sim))
        })
        .collect::<Result<_>>()?;

    let mut builder = DiagnosticsBuilder::default();
    let mut predictions = Vec::with_capacity(samples.len());
    for (sample, (s, sim)) in samples.iter().zip(&scored) {
        predictions.push(s.prediction());
        builder.record(&sample.category, s.decision.routing_gate(), &s.decision.topk, *sim)?;
    }
    let diagnostics = builder.finish(model.dims().experts)?;
    Ok(EvalReport {
        mode,
        accuracy: accuracy(&predictions, samples)?,
        sim: diagnostics.sim,
        diagnostics,
        predictions,
    })
}
