//! Model parameters, checkpoints, and the differentiable forward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{select_topk, ExpertParams, RouterParams, RoutingMode};
use crate::numerics::{SeededRng, Tape, Var};
use crate::trainer::{Sample, TrainConfig};

/// Where an option's reweighting direction `s_j` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionSignal {
    /// `s_j = (c⁺_j − c⁻_j)ᵀ W_sem`
    Cues,
    /// `s_j = text_jᵀ W_sem`
    Text,
    /// No option-specific adjustment.
    Off,
}

/// Forward-pass switches derived from a config and its ablation flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardSettings {
    /// Effective teacher routing strength (zero when `s_a` is ablated).
    pub lambda_a: f64,
    pub lambda_o: f64,
    pub teacher_signal: OptionSignal,
    pub student_signal: OptionSignal,
}

impl ForwardSettings {
    pub fn from_config(config: &TrainConfig) -> Self {
        let ab = &config.ablation;
        let lambda_a = if ab.no_sa || ab.prompt_only {
            0.0
        } else {
            config.lambda_a
        };
        let (teacher_signal, student_signal) = if ab.no_sj {
            (OptionSignal::Off, OptionSignal::Off)
        } else if ab.prompt_only {
            (OptionSignal::Text, OptionSignal::Text)
        } else {
            (OptionSignal::Cues, OptionSignal::Text)
        };
        ForwardSettings {
            lambda_a,
            lambda_o: config.lambda_o,
            teacher_signal,
            student_signal,
        }
    }

    pub fn option_signal(&self, mode: RoutingMode) -> OptionSignal {
        match mode {
            RoutingMode::Teacher => self.teacher_signal,
            RoutingMode::Student => self.student_signal,
        }
    }

    /// Whether teacher-mode routing reads any cue.
    pub fn uses_cues(&self) -> bool {
        self.lambda_a > 0.0 || self.teacher_signal == OptionSignal::Cues
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub router: RouterParams,
    pub experts: ExpertParams,
    top_k: usize,
    settings: ForwardSettings,
}

impl Model {
    pub fn new(router: RouterParams, experts: ExpertParams, top_k: usize, settings: ForwardSettings) -> Result<Self> {
        if router.num_experts() != experts.len() {
            return Err(Error::Shape {
                context: "expert count",
                expected: router.num_experts(),
                actual: experts.len(),
            });
        }
        if top_k == 0 || top_k > experts.len() {
            return Err(Error::InvalidK {
                k: top_k,
                experts: experts.len(),
            });
        }
        Ok(Model {
            router,
            experts,
            top_k,
            settings,
        })
    }

    /// Fresh parameters for `config`, drawn from `rng`.
    pub fn init(config: &TrainConfig, rng: &mut SeededRng) -> Result<Self> {
        let router = RouterParams::init(config.d, config.num_experts, rng);
        let experts = ExpertParams::init(config.d, config.hidden, config.num_experts, rng);
        Model::new(router, experts, config.top_k, ForwardSettings::from_config(config))
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn settings(&self) -> &ForwardSettings {
        &self.settings
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.router.input_dim(),
            experts: self.experts.len(),
            top_k: self.top_k,
            hidden: self.experts.hidden(),
        }
    }

    /// Parameter tensors in canonical order: gating, semantic, then
    /// `w1, b1, w2, b2` per expert.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("router.gating".into(), self.router.gating.as_slice()),
            ("router.semantic".into(), self.router.semantic.as_slice()),
        ];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("expert{i}.w1"), e.w1.as_slice()));
            out.push((format!("expert{i}.b1"), e.b1.as_slice()));
            out.push((format!("expert{i}.w2"), e.w2.as_slice()));
            out.push((format!("expert{i}.b2"), e.b2.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.router.gating.as_mut_slice(),
            self.router.semantic.as_mut_slice(),
        ];
        for e in self.experts.iter_mut() {
            out.push(e.w1.as_mut_slice());
            out.push(&mut e.b1);
            out.push(e.w2.as_mut_slice());
            out.push(&mut e.b2);
        }
        out
    }

    /// Records every parameter tensor as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        ParamVars {
            vars: self.tensors().into_iter().map(|(_, t)| tape.leaf(t)).collect(),
        }
    }

    pub fn save(&self, config: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let checkpoint = Checkpoint {
            dims: self.dims(),
            config_hash: config.hash(),
            config: config.clone(),
            router: self.router.clone(),
            experts: self.experts.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &checkpoint)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and the config it was trained with.
    pub fn load(path: impl AsRef<Path>) -> Result<(Model, TrainConfig)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if checkpoint.config.hash() != checkpoint.config_hash {
            return Err(Error::Consistency(format!(
                "checkpoint {} config hash does not match its config",
                path.display()
            )));
        }
        let model = Model::new(
            checkpoint.router,
            checkpoint.experts,
            checkpoint.dims.top_k,
            ForwardSettings::from_config(&checkpoint.config),
        )?;
        if model.dims() != checkpoint.dims {
            return Err(Error::Consistency("checkpoint dims disagree with its tensors".into()));
        }
        Ok((model, checkpoint.config))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    dims: Dims,
    config_hash: String,
    config: TrainConfig,
    router: RouterParams,
    experts: ExpertParams,
}

/// Tape handles for the model's parameter tensors, aligned with
/// [`Model::tensors`].
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn gating(&self) -> Var {
        self.vars[0]
    }

    pub fn semantic(&self) -> Var {
        self.vars[1]
    }

    /// `(w1, b1, w2, b2)` of expert `i`.
    pub fn expert(&self, i: usize) -> (Var, Var, Var, Var) {
        let base = 2 + 4 * i;
        (
            self.vars[base],
            self.vars[base + 1],
            self.vars[base + 2],
            self.vars[base + 3],
        )
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Nodes of one sample's forward pass.
pub struct GraphForward {
    pub topk: Vec<usize>,
    pub base_logits: Var,
    pub teacher_logits: Var,
    pub teacher_gate: Var,
    pub student_gate: Var,
    pub expert_outputs: Vec<Var>,
    pub option_gates: Vec<Var>,
    pub aggregated: Vec<Var>,
    pub scores: Vec<Var>,
}

/// Differentiable forward pass, mirroring
/// [`score_all_options`](crate::options::score_all_options).
pub fn forward_graph<'a>(
    tape: &mut Tape<'a>,
    params: &ParamVars,
    model: &Model,
    sample: &'a Sample,
    mode: RoutingMode,
) -> Result<GraphForward> {
    let settings = model.settings();
    let dims = model.dims();
    let x = tape.leaf(&sample.input);
    let z = tape.vecmat(x, params.gating(), dims.experts);
    let g_s = tape.softmax(z);

    let teacher_active = mode == RoutingMode::Teacher && settings.lambda_a > 0.0;
    let (z_t, g_t) = if teacher_active {
        let cues = sample.cues(sample.correct)?;
        let diff = tape.constant(cues.difference().into_inner());
        let s_a = tape.vecmat(diff, params.semantic(), dims.experts);
        let z_t = tape.add_scaled(z, s_a, settings.lambda_a);
        (z_t, tape.softmax(z_t))
    } else {
        (z, g_s)
    };

    let (routing_logits, routing_gate) = match mode {
        RoutingMode::Teacher => (z_t, g_t),
        RoutingMode::Student => (z, g_s),
    };
    let topk = select_topk(tape.value(routing_gate), model.top_k())?;

    let expert_outputs: Vec<Var> = topk
        .iter()
        .map(|&i| {
            let (w1, b1, w2, b2) = params.expert(i);
            let pre = tape.vecmat(x, w1, dims.hidden);
            let pre = tape.add(pre, b1);
            let act = tape.tanh(pre);
            let out = tape.vecmat(act, w2, dims.d);
            tape.add(out, b2)
        })
        .collect();

    let routing_top = tape.gather(routing_logits, &topk);
    let signal = settings.option_signal(mode);
    let mut option_gates = Vec::with_capacity(sample.options.len());
    let mut aggregated = Vec::with_capacity(sample.options.len());
    let mut scores = Vec::with_capacity(sample.options.len());
    for (j, option) in sample.options.iter().enumerate() {
        let text = tape.leaf(&option.text);
        let direction = match signal {
            OptionSignal::Off => None,
            OptionSignal::Text => Some(text),
            OptionSignal::Cues => {
                let diff = sample.cues(j)?.difference().into_inner();
                Some(tape.constant(diff))
            }
        };
        let logits = match direction {
            None => routing_top,
            Some(dir) => {
                let s_j = tape.vecmat(dir, params.semantic(), dims.experts);
                let s_top = tape.gather(s_j, &topk);
                tape.add_scaled(routing_top, s_top, settings.lambda_o)
            }
        };
        let gate = tape.softmax(logits);
        let agg = tape.weighted_sum(gate, &expert_outputs);
        let score = tape.cosine(agg, text)?;
        option_gates.push(gate);
        aggregated.push(agg);
        scores.push(score);
    }

    Ok(GraphForward {
        topk,
        base_logits: z,
        teacher_logits: z_t,
        teacher_gate: g_t,
        student_gate: g_s,
        expert_outputs,
        option_gates,
        aggregated,
        scores,
    })
}
