//! Router, experts, and Top-K selection.
//!
//! The router produces base logits `z_base = xᵀ W_gate`. The teacher adds
//! the answer's semantic direction `s_a = (c⁺ − c⁻)ᵀ W_sem` at strength
//! `λ_a`; the student uses `z_base` alone. Top-K is taken over whichever
//! gate drives routing, and all options of a sample share it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, softmax, Embedding, Matrix, SeededRng, Vector};

/// Which router drives expert selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Cue-guided routing, used during training.
    Teacher,
    /// Cue-free routing, used at inference.
    Student,
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(RoutingMode::Teacher),
            "student" => Ok(RoutingMode::Student),
            other => Err(Error::InvalidInput(format!(
                "unknown mode `{other}` (expected teacher or student)"
            ))),
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoutingMode::Teacher => "teacher",
            RoutingMode::Student => "student",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `d × E`, produces `z_base`.
    pub gating: Matrix,
    /// `d × E`, projects cue differences into expert-logit space.
    pub semantic: Matrix,
}

impl RouterParams {
    pub fn new(gating: Matrix, semantic: Matrix) -> Result<Self> {
        check_dims("router input dim", gating.rows(), semantic.rows())?;
        check_dims("router expert count", gating.cols(), semantic.cols())?;
        Ok(RouterParams { gating, semantic })
    }

    pub fn init(d: usize, experts: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        RouterParams {
            gating: Matrix::from_fn(d, experts, |_, _| scale * rng.normal()),
            semantic: Matrix::from_fn(d, experts, |_, _| scale * rng.normal()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gating.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.gating.cols()
    }
}

/// One two-layer perceptron: `h = W2ᵀ tanh(W1ᵀ x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// `d × hidden`
    pub w1: Matrix,
    pub b1: Vector,
    /// `hidden × d`
    pub w2: Matrix,
    pub b2: Vector,
}

impl Expert {
    pub fn init(d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Expert {
            w1: Matrix::from_fn(d, hidden, |_, _| s1 * rng.normal()),
            b1: Vector::zeros(hidden),
            w2: Matrix::from_fn(hidden, d, |_, _| s2 * rng.normal()),
            b2: Vector::zeros(d),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        let mut pre = self.w1.vecmat(x)?;
        for (p, b) in pre.iter_mut().zip(self.b1.iter()) {
            *p = (*p + b).tanh();
        }
        let mut out = self.w2.vecmat(&pre)?;
        for (o, b) in out.iter_mut().zip(self.b2.iter()) {
            *o += b;
        }
        Ok(out)
    }

    fn check_shapes(&self, d: usize, hidden: usize) -> Result<()> {
        check_dims("expert w1 rows", d, self.w1.rows())?;
        check_dims("expert w1 cols", hidden, self.w1.cols())?;
        check_dims("expert b1", hidden, self.b1.dim())?;
        check_dims("expert w2 rows", hidden, self.w2.rows())?;
        check_dims("expert w2 cols", d, self.w2.cols())?;
        check_dims("expert b2", d, self.b2.dim())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Expert>", into = "Vec<Expert>")]
pub struct ExpertParams {
    experts: Vec<Expert>,
}

impl TryFrom<Vec<Expert>> for ExpertParams {
    type Error = Error;

    fn try_from(experts: Vec<Expert>) -> Result<Self> {
        ExpertParams::new(experts)
    }
}

impl From<ExpertParams> for Vec<Expert> {
    fn from(p: ExpertParams) -> Self {
        p.experts
    }
}

impl ExpertParams {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::InvalidInput("at least one expert is required".into()))?;
        let (d, hidden) = (first.w1.rows(), first.w1.cols());
        for e in &experts {
            e.check_shapes(d, hidden)?;
        }
        Ok(ExpertParams { experts })
    }

    pub fn init(d: usize, hidden: usize, count: usize, rng: &mut SeededRng) -> Self {
        ExpertParams {
            experts: (0..count).map(|_| Expert::init(d, hidden, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Expert> {
        self.experts.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Expert> {
        self.experts.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Expert> {
        self.experts.iter_mut()
    }

    pub fn hidden(&self) -> usize {
        self.experts[0].w1.cols()
    }
}

/// Routing outcome for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingDecision {
    pub base_logits: Vector,
    pub teacher_logits: Vector,
    pub teacher_gate: Vector,
    pub student_gate: Vector,
    pub topk: Vec<usize>,
    pub mode: RoutingMode,
}

impl GatingDecision {
    /// The gate that selected `topk`.
    pub fn routing_gate(&self) -> &Vector {
        match self.mode {
            RoutingMode::Teacher => &self.teacher_gate,
            RoutingMode::Student => &self.student_gate,
        }
    }

    /// Logits the option gates start from.
    pub fn routing_logits(&self) -> &Vector {
        match self.mode {
            RoutingMode::Teacher => &self.teacher_logits,
            RoutingMode::Student => &self.base_logits,
        }
    }
}

pub fn base_logits(x: &Embedding, router: &RouterParams) -> Result<Vector> {
    router.gating.vecmat(x)
}

/// Projects an embedding-space direction into expert-logit space.
pub fn project_semantic(direction: &[f64], router: &RouterParams) -> Result<Vector> {
    router.semantic.vecmat(direction)
}

/// `s = (c⁺ − c⁻)ᵀ W_sem`.
pub fn semantic_direction(positive: &Embedding, negative: &Embedding, router: &RouterParams) -> Result<Vector> {
    let diff = positive.sub(negative)?;
    project_semantic(&diff, router)
}

/// Returns `(z_base + λ_a·s_a, softmax(z_base + λ_a·s_a))`.
pub fn teacher_gate(z_base: &Vector, s_a: &Vector, lambda_a: f64) -> Result<(Vector, Vector)> {
    check_dims("teacher gate", z_base.dim(), s_a.dim())?;
    if !(lambda_a >= 0.0) {
        return Err(Error::InvalidInput("lambda_a must be >= 0".into()));
    }
    let logits = Vector::new(
        z_base
            .iter()
            .zip(s_a.iter())
            .map(|(z, s)| z + lambda_a * s)
            .collect(),
    )?;
    let gate = softmax(&logits)?;
    Ok((logits, gate))
}

pub fn student_gate(z_base: &Vector) -> Result<Vector> {
    softmax(z_base)
}

/// Indices of the `k` largest entries (ties to the lower index), sorted
/// ascending.
pub fn select_topk(gate: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > gate.len() {
        return Err(Error::InvalidK {
            k,
            experts: gate.len(),
        });
    }
    let mut order: Vec<usize> = (0..gate.len()).collect();
    order.sort_by(|&a, &b| gate[b].total_cmp(&gate[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Outputs of the experts named in `topk`, in the same order.
pub fn expert_forward(x: &Embedding, experts: &ExpertParams, topk: &[usize]) -> Result<Vec<Vector>> {
    topk.iter()
        .map(|&i| {
            experts
                .get(i)
                .ok_or(Error::InvalidExpert {
                    index: i,
                    experts: experts.len(),
                })?
                .forward(x)
        })
        .collect()
}

/// Full routing for one sample. Teacher mode needs the answer's cues.
pub fn route(
    x: &Embedding,
    router: &RouterParams,
    answer_cues: Option<(&Embedding, &Embedding)>,
    lambda_a: f64,
    k: usize,
    mode: RoutingMode,
) -> Result<GatingDecision> {
    let z_base = base_logits(x, router)?;
    let student = student_gate(&z_base)?;
    let (teacher_logits, teacher) = match answer_cues {
        Some((pos, neg)) => {
            let s_a = semantic_direction(pos, neg, router)?;
            teacher_gate(&z_base, &s_a, lambda_a)?
        }
        None => (z_base.clone(), student.clone()),
    };
    let topk = match mode {
        RoutingMode::Teacher => select_topk(&teacher, k)?,
        RoutingMode::Student => select_topk(&student, k)?,
    };
    Ok(GatingDecision {
        base_logits: z_base,
        teacher_logits,
        teacher_gate: teacher,
        student_gate: student,
        topk,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn vec(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn router(d: usize, e: usize, seed: u64) -> RouterParams {
        RouterParams::init(d, e, &mut seeded_rng(seed))
    }

    #[test]
    fn base_logits_cases() {
        let r = router(4, 3, 1);
        assert_eq!(base_logits(&Vector::zeros(4), &r).unwrap(), Vector::zeros(3));
        let w = Matrix::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r2 = RouterParams::new(w.clone(), w).unwrap();
        assert_eq!(base_logits(&vec(&[1.0, 0.0]), &r2).unwrap(), vec(&[0.1, 0.2]));
        assert!(matches!(base_logits(&vec(&[1.0]), &r2), Err(Error::Shape { .. })));
    }

    #[test]
    fn base_logits_match_dot_products() {
        let mut rng = seeded_rng(2);
        let r = router(6, 5, 3);
        let x = vec(&rng.normal_vec(6, 1.0));
        let z = base_logits(&x, &r).unwrap();
        for j in 0..5 {
            let expected: f64 = (0..6).map(|i| x[i] * r.gating.get(i, j)).sum();
            assert!((z[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_direction_cases() {
        let mut rng = seeded_rng(4);
        let r = router(6, 4, 5);
        let p = vec(&rng.normal_vec(6, 1.0));
        let n = vec(&rng.normal_vec(6, 1.0));
        assert_eq!(semantic_direction(&p, &p, &r).unwrap(), Vector::zeros(4));
        let fwd = semantic_direction(&p, &n, &r).unwrap();
        let back = semantic_direction(&n, &p, &r).unwrap();
        for (a, b) in fwd.iter().zip(back.iter()) {
            assert_eq!(*a, -*b);
        }
        for j in 0..4 {
            let expected: f64 = (0..6).map(|i| (p[i] - n[i]) * r.semantic.get(i, j)).sum();
            assert!((fwd[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_gate_with_zero_strength_equals_student() {
        let z = vec(&[0.3, -1.0, 2.0]);
        let s = vec(&[5.0, 1.0, -2.0]);
        let (_, g_t) = teacher_gate(&z, &s, 0.0).unwrap();
        assert_eq!(g_t, student_gate(&z).unwrap());
        assert!(teacher_gate(&z, &vec(&[1.0]), 0.5).is_err());
        assert!(teacher_gate(&z, &s, -0.1).is_err());
    }

    #[test]
    fn student_gate_cases() {
        let g = student_gate(&vec(&[0.7; 4])).unwrap();
        assert!(g.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let z = vec(&[0.1, -0.4, 1.3]);
        let g = student_gate(&z).unwrap();
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        for (gi, zi) in g.iter().zip(z.iter()) {
            assert!((gi - zi.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_cases() {
        assert_eq!(select_topk(&[0.1, 0.2, 0.7], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_topk(&[0.1, 0.4, 0.4, 0.1], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_topk(&[0.25; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_topk(&[0.1, 0.3, 0.3, 0.3], 1).unwrap(), vec![1]);
        assert!(matches!(select_topk(&[0.5, 0.5], 0), Err(Error::InvalidK { .. })));
        assert!(matches!(select_topk(&[0.5, 0.5], 3), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn topk_matches_sort_and_take() {
        let mut rng = seeded_rng(6);
        for _ in 0..1000 {
            let e = 2 + rng.index(10);
            let k = 1 + rng.index(e);
            let gate = softmax(&rng.normal_vec(e, 2.0)).unwrap();
            // oracle: repeatedly take the first maximum
            let mut remaining: Vec<(usize, f64)> = gate.iter().copied().enumerate().collect();
            let mut expected = Vec::new();
            for _ in 0..k {
                let (pos, _) = remaining
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bp, bv), (p, (_, v))| if *v > bv { (p, *v) } else { (bp, bv) });
                expected.push(remaining.remove(pos).0);
            }
            expected.sort_unstable();
            assert_eq!(select_topk(&gate, k).unwrap(), expected);
        }
    }

    #[test]
    fn zero_expert_outputs_its_bias() {
        let mut rng = seeded_rng(7);
        let mut experts = ExpertParams::init(3, 3, 2, &mut rng);
        {
            let e = experts.iter_mut().next().unwrap();
            e.w1 = Matrix::zeros(3, 3);
            e.w2 = Matrix::zeros(3, 3);
            e.b2 = vec(&[0.5, -1.0, 2.0]);
        }
        let x = vec(&rng.normal_vec(3, 1.0));
        let out = expert_forward(&x, &experts, &[0]).unwrap();
        assert_eq!(out[0], vec(&[0.5, -1.0, 2.0]));
    }

    #[test]
    fn expert_forward_restricts_cleanly() {
        let mut rng = seeded_rng(8);
        let experts = ExpertParams::init(5, 4, 4, &mut rng);
        let x = vec(&rng.normal_vec(5, 1.0));
        let all = expert_forward(&x, &experts, &[0, 1, 2, 3]).unwrap();
        let some = expert_forward(&x, &experts, &[1, 3]).unwrap();
        assert_eq!(some, vec![all[1].clone(), all[3].clone()]);
        assert!(matches!(
            expert_forward(&x, &experts, &[4]),
            Err(Error::InvalidExpert { index: 4, .. })
        ));
    }

    #[test]
    fn expert_forward_matches_perceptron_oracle() {
        let mut rng = seeded_rng(9);
        let experts = ExpertParams::init(4, 3, 1, &mut rng);
        let x = vec(&rng.normal_vec(4, 1.0));
        let e = experts.get(0).unwrap();
        let mut hidden = [0.0; 3];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = e.b1[j];
            for i in 0..4 {
                acc += x[i] * e.w1.get(i, j);
            }
            *h = acc.tanh();
        }
        let out = expert_forward(&x, &experts, &[0]).unwrap();
        for k in 0..4 {
            let mut acc = e.b2[k];
            for (j, h) in hidden.iter().enumerate() {
                acc += h * e.w2.get(j, k);
            }
            assert!((out[0][k] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_are_distributions_and_perturbation_is_bounded() {
        let mut rng = seeded_rng(10);
        for _ in 0..1000 {
            let d = 2 + rng.index(8);
            let e = 2 + rng.index(8);
            let r = RouterParams::init(d, e, &mut rng);
            let x = vec(&rng.normal_vec(d, 1.0));
            let p = vec(&rng.normal_vec(d, 1.0));
            let n = vec(&rng.normal_vec(d, 1.0));
            let lambda = rng.uniform();
            let z = base_logits(&x, &r).unwrap();
            let s = semantic_direction(&p, &n, &r).unwrap();
            let (_, g_t) = teacher_gate(&z, &s, lambda).unwrap();
            let g_s = student_gate(&z).unwrap();
            for g in [&g_t, &g_s] {
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(g.iter().all(|v| *v > 0.0));
            }
            let l1: f64 = g_t.iter().zip(g_s.iter()).map(|(a, b)| (a - b).abs()).sum();
            let sup = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(l1 <= 2.0 * lambda * sup + 1e-12);
        }
    }

    #[test]
    fn routing_is_deterministic() {
        let mut rng = seeded_rng(11);
        let r = router(6, 5, 12);
        let x = vec(&rng.normal_vec(6, 1.0));
        let p = vec(&rng.normal_vec(6, 1.0));
        let n = vec(&rng.normal_vec(6, 1.0));
        let a = route(&x, &r, Some((&p, &n)), 0.5, 2, RoutingMode::Teacher).unwrap();
        let b = route(&x, &r, Some((&p, &n)), 0.5, 2, RoutingMode::Teacher).unwrap();
        assert_eq!(a, b);
        let s = route(&x, &r, None, 0.5, 2, RoutingMode::Student).unwrap();
        assert_eq!(s.topk, select_topk(&s.student_gate, 2).unwrap());
        assert_eq!(s.teacher_gate, s.student_gate);
    }
}
