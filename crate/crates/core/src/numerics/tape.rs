//! Reverse-mode differentiation over a tape of vector-valued nodes.
//!
//! Every node holds a value (a scalar is a length-1 vector) and the op that
//! produced it. Leaves may borrow their storage, so model parameters are
//! recorded without copying. `backward` walks the tape once in reverse and
//! returns the adjoint of every node with respect to a scalar root.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::{dot, norm, sigmoid, softmax_unchecked, vecmat, PROB_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `a + c · b`
    AddScaled(Var, Var, f64),
    /// `xᵀ W` with `W` row-major, `cols` columns.
    VecMat { x: Var, w: Var, cols: usize },
    Tanh(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    WeightedSum { weights: Var, items: Vec<Var> },
    Stack(Vec<Var>),
    Cosine(Var, Var),
    Bce { score: Var, label: bool, temperature: f64 },
    SoftmaxCe { logits: Var, label: usize },
    Kl { p: Var, q: Var },
    LinComb(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its storage (parameters, fixed inputs).
    pub fn leaf(&mut self, values: &'a [f64]) -> Var {
        self.push(Cow::Borrowed(values), Op::Leaf)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(Cow::Owned(values), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1, "scalar_value on a non-scalar node");
        value[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Cow::Owned(value), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Cow::Owned(value), Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| c * x).collect();
        self.push(Cow::Owned(value), Op::Scale(a, c))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + c * y);
        self.push(Cow::Owned(value), Op::AddScaled(a, b, c))
    }

    /// `xᵀ W` where `W` holds `len(x) × cols` values row-major.
    pub fn vecmat(&mut self, x: Var, w: Var, cols: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.len() * cols, wv.len(), "vecmat shape mismatch");
        let value = vecmat(xv, wv, cols);
        self.push(Cow::Owned(value), Op::VecMat { x, w, cols })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Cow::Owned(value), Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_unchecked(self.value(a));
        self.push(Cow::Owned(value), Op::Softmax(a))
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let value = indices.iter().map(|&i| src[i]).collect();
        self.push(Cow::Owned(value), Op::Gather(a, indices.to_vec()))
    }

    /// `Σ_k weights[k] · items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = self.value(weights);
        assert_eq!(w.len(), items.len(), "weighted_sum arity mismatch");
        let dim = self.value(items[0]).len();
        let mut value = vec![0.0; dim];
        for (wk, item) in w.iter().zip(items) {
            let iv = self.value(*item);
            assert_eq!(iv.len(), dim, "weighted_sum item shape mismatch");
            for (o, x) in value.iter_mut().zip(iv) {
                *o += wk * x;
            }
        }
        self.push(
            Cow::Owned(value),
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Collects scalar nodes into one vector node.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let value = scalars.iter().map(|s| self.scalar_value(*s)).collect();
        self.push(Cow::Owned(value), Op::Stack(scalars.to_vec()))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "cosine shape mismatch");
        let (na, nb) = (norm(av), norm(bv));
        if na == 0.0 {
            return Err(Error::DegenerateVector("first cosine operand"));
        }
        if nb == 0.0 {
            return Err(Error::DegenerateVector("second cosine operand"));
        }
        let value = dot(av, bv) / (na * nb);
        Ok(self.push(Cow::Owned(vec![value]), Op::Cosine(a, b)))
    }

    pub fn bce(&mut self, score: Var, label: bool, temperature: f64) -> Var {
        let value = super::bce_unchecked(self.scalar_value(score), label, temperature);
        self.push(
            Cow::Owned(vec![value]),
            Op::Bce {
                score,
                label,
                temperature,
            },
        )
    }

    /// `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let p = softmax_unchecked(self.value(logits));
        let value = -p[label].max(PROB_FLOOR).ln();
        self.push(Cow::Owned(vec![value]), Op::SoftmaxCe { logits, label })
    }

    /// `KL(p ‖ q)`; differentiable in both arguments (detach `p` for a
    /// fixed target).
    pub fn kl(&mut self, p: Var, q: Var) -> Var {
        let value = super::kl_unchecked(self.value(p), self.value(q));
        self.push(Cow::Owned(vec![value]), Op::Kl { p, q })
    }

    /// `Σ c_k · s_k` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|(v, c)| c * self.scalar_value(*v)).sum();
        self.push(Cow::Owned(vec![value]), Op::LinComb(terms.to_vec()))
    }

    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let terms: Vec<(Var, f64)> = scalars.iter().map(|s| (*s, 1.0)).collect();
        self.lin_comb(&terms)
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Vec<f64>> = self.nodes[..=root.0]
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for idx in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let g = &upper[0];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let node = &self.nodes[idx];
            let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut lower[a.0], 1.0, g);
                    axpy(&mut lower[b.0], 1.0, g);
                }
                Op::Sub(a, b) => {
                    axpy(&mut lower[a.0], 1.0, g);
                    axpy(&mut lower[b.0], -1.0, g);
                }
                Op::Scale(a, c) => axpy(&mut lower[a.0], *c, g),
                Op::AddScaled(a, b, c) => {
                    axpy(&mut lower[a.0], 1.0, g);
                    axpy(&mut lower[b.0], *c, g);
                }
                Op::VecMat { x, w, cols } => {
                    let (xv, wv) = (val(*x), val(*w));
                    for (i, row) in wv.chunks_exact(*cols).enumerate() {
                        lower[x.0][i] += dot(row, g);
                    }
                    let gw = &mut lower[w.0];
                    for (i, xi) in xv.iter().enumerate() {
                        let row = &mut gw[i * cols..(i + 1) * cols];
                        for (o, gj) in row.iter_mut().zip(g) {
                            *o += xi * gj;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ga = &mut lower[a.0];
                    for ((o, y), gi) in ga.iter_mut().zip(node.value.iter()).zip(g) {
                        *o += gi * (1.0 - y * y);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner = dot(g, y);
                    let ga = &mut lower[a.0];
                    for ((o, yi), gi) in ga.iter_mut().zip(y.iter()).zip(g) {
                        *o += yi * (gi - inner);
                    }
                }
                Op::Gather(a, indices) => {
                    let ga = &mut lower[a.0];
                    for (k, &i) in indices.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = val(*weights).to_vec();
                    for (k, item) in items.iter().enumerate() {
                        lower[weights.0][k] += dot(g, val(*item));
                        axpy(&mut lower[item.0], w[k], g);
                    }
                }
                Op::Stack(scalars) => {
                    for (k, s) in scalars.iter().enumerate() {
                        lower[s.0][0] += g[k];
                    }
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (na, nb) = (norm(av), norm(bv));
                    let c = node.value[0];
                    let g0 = g[0];
                    for (i, (ai, bi)) in av.iter().zip(bv).enumerate() {
                        lower[a.0][i] += g0 * (bi / (na * nb) - c * ai / (na * na));
                        lower[b.0][i] += g0 * (ai / (na * nb) - c * bi / (nb * nb));
                    }
                }
                Op::Bce {
                    score,
                    label,
                    temperature,
                } => {
                    let p = sigmoid(temperature * val(*score)[0]);
                    if p > PROB_FLOOR && p < 1.0 - PROB_FLOOR {
                        let y = if *label { 1.0 } else { 0.0 };
                        lower[score.0][0] += g[0] * temperature * (p - y);
                    }
                }
                Op::SoftmaxCe { logits, label } => {
                    let p = softmax_unchecked(val(*logits));
                    let gl = &mut lower[logits.0];
                    for (i, (o, pi)) in gl.iter_mut().zip(&p).enumerate() {
                        let y = if i == *label { 1.0 } else { 0.0 };
                        *o += g[0] * (pi - y);
                    }
                }
                Op::Kl { p, q } => {
                    let (pv, qv) = (val(*p).to_vec(), val(*q).to_vec());
                    for (i, (pi, qi)) in pv.iter().zip(&qv).enumerate() {
                        if *pi > 0.0 {
                            let (pc, qc) = (pi.max(PROB_FLOOR), qi.max(PROB_FLOOR));
                            lower[p.0][i] += g[0] * (pc.ln() - qc.ln() + 1.0);
                            lower[q.0][i] -= g[0] * pi / qc;
                        }
                    }
                }
                Op::LinComb(terms) => {
                    for (v, c) in terms {
                        lower[v.0][0] += c * g[0];
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch");
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn axpy(out: &mut [f64], c: f64, x: &[f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += c * xi;
    }
}

/// Result of [`Tape::backward`]. Nodes recorded after the root, or never
/// reached from it, have a zero gradient.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        self.grads.get(v.0).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Gradient of `v`, or zeros of the given length for nodes past the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}
