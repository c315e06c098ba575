//! Training objective: uncertainty-weighted option loss, cue contrast, and
//! router distillation.

use serde::{Deserialize, Serialize};

use crate::cues::UncertaintyMode;
use crate::error::{Error, Result};
use crate::model::GraphForward;
use crate::numerics::{binary_cross_entropy, cosine, kl_divergence, softmax, Embedding, Tape, Var};
use crate::options::{aggregate, OptionRepresentation};
use crate::trainer::{Sample, TrainConfig};

/// Lower and upper bound applied to every option weight.
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 1.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub contrast: f64,
    pub distill: f64,
    pub total: f64,
    /// Clipped `1 / (1 + unc_j)` per option.
    pub option_weights: Vec<f64>,
}

/// How the per-option scores enter the main loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionLoss {
    /// Weighted sum of per-option binary cross-entropies.
    #[default]
    Binary,
    /// Answer weight times cross-entropy of `softmax(τ · scores)`.
    Softmax,
}

/// `clip(1 / (1 + unc), 0.1, 1.0)`.
pub fn option_weight(unc: f64) -> f64 {
    (1.0 / (1.0 + unc)).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1)
}

fn check_label(label: usize, options: usize) -> Result<()> {
    if label >= options {
        return Err(Error::InvalidLabel { label, options });
    }
    Ok(())
}

/// `Σ_j w_j · BCE(score_j, y_j)`; returns the loss and the weights.
pub fn main_loss(scores: &[f64], label: usize, uncs: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    crate::numerics::check_dims("option uncertainties", scores.len(), uncs.len())?;
    check_label(label, scores.len())?;
    if uncs.iter().any(|u| !(*u >= 0.0)) {
        return Err(Error::InvalidInput("uncertainties must be >= 0".into()));
    }
    let weights: Vec<f64> = uncs.iter().map(|u| option_weight(*u)).collect();
    let mut loss = 0.0;
    for (j, (s, w)) in scores.iter().zip(&weights).enumerate() {
        loss += w * binary_cross_entropy(*s, j == label, temperature)?;
    }
    Ok((loss, weights))
}

/// `−λ_c · [cos(h_correct, c⁺) − cos(h_wrong, c⁻)]`.
pub fn contrastive_loss(
    h_correct: &[f64],
    h_wrong: &[f64],
    c_pos: &[f64],
    c_neg: &[f64],
    lambda_c: f64,
) -> Result<f64> {
    Ok(-lambda_c * (cosine(h_correct, c_pos)? - cosine(h_wrong, c_neg)?))
}

/// Softmax over the scores of the incorrect options, in option order with
/// `label` skipped.
pub fn wrong_weights(scores: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(label, scores.len())?;
    if scores.len() < 2 {
        return Err(Error::InvalidInput("need at least one incorrect option".into()));
    }
    let wrong: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, s)| *s)
        .collect();
    Ok(softmax(&wrong)?.into_inner())
}

/// Score-weighted average of the incorrect options' representations.
pub fn wrong_representation(reps: &[OptionRepresentation], label: usize) -> Result<Embedding> {
    let scores: Vec<f64> = reps.iter().map(|r| r.score).collect();
    let weights = wrong_weights(&scores, label)?;
    let wrong: Vec<Embedding> = reps
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, r)| r.aggregated.clone())
        .collect();
    aggregate(&weights, &wrong)
}

/// `KL(g_T ‖ g_S)`.
pub fn distill_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    kl_divergence(teacher, student)
}

pub fn total_loss(main: f64, contrast: f64, distill: f64) -> f64 {
    main + contrast + distill
}

/// Which terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub temperature: f64,
    pub lambda_c: f64,
    pub option_loss: OptionLoss,
    /// `None` fixes every option weight at 1.
    pub uncertainty: Option<UncertaintyMode>,
    pub contrast: bool,
    pub distill: bool,
}

impl LossSettings {
    pub fn from_config(config: &TrainConfig) -> Self {
        let ab = &config.ablation;
        let mode = if ab.only_variance {
            UncertaintyMode::OnlyVariance
        } else {
            UncertaintyMode::Full
        };
        LossSettings {
            temperature: config.temperature,
            lambda_c: config.lambda_c,
            option_loss: config.option_loss,
            uncertainty: (!ab.no_unc && !ab.prompt_only).then_some(mode),
            contrast: !ab.no_contrast && !ab.prompt_only,
            distill: !ab.no_distill && !ab.prompt_only,
        }
    }
}

/// Loss nodes for one sample.
pub struct GraphLoss {
    pub main: Var,
    /// Unweighted per-option cross-entropies (binary mode only).
    pub bce_terms: Vec<Var>,
    pub weights: Vec<f64>,
    pub contrast: Var,
    pub distill: Var,
    pub total: Var,
}

impl GraphLoss {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            main: tape.scalar_value(self.main),
            contrast: tape.scalar_value(self.contrast),
            distill: tape.scalar_value(self.distill),
            total: tape.scalar_value(self.total),
            option_weights: self.weights.clone(),
        }
    }
}

/// Option weights for `sample` under `settings`.
pub fn sample_weights(sample: &Sample, settings: &LossSettings) -> Result<Vec<f64>> {
    match settings.uncertainty {
        None => Ok(vec![1.0; sample.options.len()]),
        Some(mode) => (0..sample.options.len())
            .map(|j| Ok(option_weight(sample.cues(j)?.uncertainty_under(&sample.input, mode)?)))
            .collect(),
    }
}

/// Records the sample's objective on `tape` on top of its forward pass.
pub fn loss_graph(
    tape: &mut Tape<'_>,
    forward: &GraphForward,
    sample: &Sample,
    settings: &LossSettings,
) -> Result<GraphLoss> {
    let label = sample.correct;
    check_label(label, forward.scores.len())?;
    let weights = sample_weights(sample, settings)?;

    let (main, bce_terms) = match settings.option_loss {
        OptionLoss::Binary => {
            let terms: Vec<Var> = forward
                .scores
                .iter()
                .enumerate()
                .map(|(j, s)| tape.bce(*s, j == label, settings.temperature))
                .collect();
            let weighted: Vec<(Var, f64)> = terms.iter().copied().zip(weights.iter().copied()).collect();
            (tape.lin_comb(&weighted), terms)
        }
        OptionLoss::Softmax => {
            let scores = tape.stack(&forward.scores);
            let logits = tape.scale(scores, settings.temperature);
            let ce = tape.softmax_cross_entropy(logits, label);
            (tape.scale(ce, weights[label]), Vec::new())
        }
    };

    let contrast = if settings.contrast {
        let cues = sample.cues(label)?;
        let wrong_scores: Vec<Var> = forward
            .scores
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label)
            .map(|(_, s)| *s)
            .collect();
        let wrong_aggs: Vec<Var> = forward
            .aggregated
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label)
            .map(|(_, a)| *a)
            .collect();
        if wrong_aggs.is_empty() {
            return Err(Error::InvalidInput("need at least one incorrect option".into()));
        }
        let stacked = tape.stack(&wrong_scores);
        let omega = tape.softmax(stacked);
        let h_wrong = tape.weighted_sum(omega, &wrong_aggs);
        let c_pos = tape.constant(cues.positive.to_vec());
        let c_neg = tape.constant(cues.negative.to_vec());
        let cos_correct = tape.cosine(forward.aggregated[label], c_pos)?;
        let cos_wrong = tape.cosine(h_wrong, c_neg)?;
        tape.lin_comb(&[(cos_correct, -settings.lambda_c), (cos_wrong, settings.lambda_c)])
    } else {
        tape.scalar(0.0)
    };

    let distill = if settings.distill {
        let target = tape.detach(forward.teacher_gate);
        tape.kl(target, forward.student_gate)
    } else {
        tape.scalar(0.0)
    };

    let total = tape.sum(&[main, contrast, distill]);
    Ok(GraphLoss {
        main,
        bce_terms,
        weights,
        contrast,
        distill,
        total,
    })
}
