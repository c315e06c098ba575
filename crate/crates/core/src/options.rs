//! Option-aware reweighting of the shared Top-K experts, per-option
//! aggregation, and answer scoring.

use crate::error::{Error, Result};
use crate::model::{Model, OptionSignal};
use crate::moe::{expert_forward, project_semantic, route, GatingDecision, RoutingMode};
use crate::numerics::{check_dims, cosine, softmax, Embedding, Vector};
use crate::trainer::Sample;

/// One option's gate over the shared Top-K, its aggregated representation,
/// and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionRepresentation {
    pub option_gate: Vector,
    pub aggregated: Embedding,
    pub score: f64,
}

/// `softmax_{i ∈ topk}(z_i + λ_o · s_i)`. Entries of `s_j` outside `topk` are
/// never read; `None` disables the option adjustment.
pub fn option_gate(
    routing_logits: &[f64],
    topk: &[usize],
    s_j: Option<&[f64]>,
    lambda_o: f64,
) -> Result<Vector> {
    if topk.is_empty() {
        return Err(Error::InvalidRouting("empty top-k set"));
    }
    if !(lambda_o >= 0.0) {
        return Err(Error::InvalidInput("lambda_o must be >= 0".into()));
    }
    if let Some(s) = s_j {
        check_dims("option direction", routing_logits.len(), s.len())?;
    }
    let logits: Vec<f64> = topk
        .iter()
        .map(|&i| {
            let z = *routing_logits.get(i).ok_or(Error::InvalidExpert {
                index: i,
                experts: routing_logits.len(),
            })?;
            Ok(match s_j {
                Some(s) => z + lambda_o * s[i],
                None => z,
            })
        })
        .collect::<Result<_>>()?;
    softmax(&logits)
}

/// `Σ_i g_i · h_i` over the shared experts.
pub fn aggregate(gate: &[f64], expert_outputs: &[Vector]) -> Result<Embedding> {
    check_dims("aggregate", gate.len(), expert_outputs.len())?;
    let first = expert_outputs
        .first()
        .ok_or(Error::InvalidRouting("no expert outputs to aggregate"))?;
    let mut out = vec![0.0; first.dim()];
    for (g, h) in gate.iter().zip(expert_outputs) {
        check_dims("aggregate expert output", first.dim(), h.dim())?;
        for (o, v) in out.iter_mut().zip(h.iter()) {
            *o += g * v;
        }
    }
    Vector::new(out)
}

pub fn score_option(aggregated: &Embedding, option_text: &Embedding) -> Result<f64> {
    cosine(aggregated, option_text)
}

/// Argmax, ties to the lower index.
pub fn predict(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to predict from".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Routing plus every option's representation for one sample.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub decision: GatingDecision,
    /// Outputs of the experts in `decision.topk`, same order.
    pub expert_outputs: Vec<Vector>,
    pub options: Vec<OptionRepresentation>,
}

impl ScoredSample {
    pub fn scores(&self) -> Vec<f64> {
        self.options.iter().map(|o| o.score).collect()
    }

    pub fn prediction(&self) -> usize {
        predict(&self.scores()).expect("samples have at least two options")
    }
}

/// Scores every option of `sample` under one shared Top-K selection.
///
/// Teacher mode routes with the answer's cues and adjusts options with their
/// own cue directions. Student mode uses no cues: routing comes from the base
/// logits and the option direction is the projected option text.
pub fn score_all_options(sample: &Sample, model: &Model, mode: RoutingMode) -> Result<ScoredSample> {
    let settings = model.settings();
    let needs_cues = mode == RoutingMode::Teacher && settings.uses_cues();
    let answer_cues = if needs_cues && settings.lambda_a > 0.0 {
        let cues = sample.cues(sample.correct)?;
        Some((&cues.positive, &cues.negative))
    } else {
        None
    };
    let decision = route(
        &sample.input,
        &model.router,
        answer_cues,
        settings.lambda_a,
        model.top_k(),
        mode,
    )?;
    let expert_outputs = expert_forward(&sample.input, &model.experts, &decision.topk)?;
    let signal = settings.option_signal(mode);

    let options = sample
        .options
        .iter()
        .enumerate()
        .map(|(j, option)| {
            let s_j = match signal {
                OptionSignal::Off => None,
                OptionSignal::Text => Some(project_semantic(&option.text, &model.router)?),
                OptionSignal::Cues => {
                    let cues = sample.cues(j)?;
                    Some(project_semantic(&cues.difference(), &model.router)?)
                }
            };
            let gate = option_gate(
                decision.routing_logits(),
                &decision.topk,
                s_j.as_deref(),
                settings.lambda_o,
            )?;
            let aggregated = aggregate(&gate, &expert_outputs)?;
            let score = score_option(&aggregated, &option.text)?;
            Ok(OptionRepresentation {
                option_gate: gate,
                aggregated,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ScoredSample {
        decision,
        expert_outputs,
        options,
    })
}
