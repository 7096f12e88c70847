//! Multi-gate mixture of experts over token sequences.
//!
//! Experts are shared single-head transformer blocks. Every task owns a
//! gate head that first pools the sequence into one vector with token
//! attention, then maps it to one weight per expert. In unconstrained mode
//! those weights are used as they come; in softmax mode they are
//! normalized, which is the classic MMoE layer.

use bmr_autodiff::{ParamId, ParamStore, Session, Tensor, Var};
use rand::Rng;

use crate::config::{GateInput, GateMode};
use crate::error::{BmrError, Result};
use crate::nn::{Linear, Mlp};

#[derive(Clone, Debug)]
struct Affine {
    gamma: ParamId,
    beta: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn layernorm(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let n = sess.tape.layernorm_lastdim(x);
        let g = sess.param(self.gamma);
        let b = sess.param(self.beta);
        let y = sess.tape.mul(n, g)?;
        Ok(sess.tape.add(y, b)?)
    }
}

/// Pre-norm transformer block with one attention head and an ELU
/// feed-forward of width `4d`.
#[derive(Clone, Debug)]
pub struct ExpertBlock {
    ln1: Affine,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Affine,
    ff1: Linear,
    ff2: Linear,
    d: usize,
}

impl ExpertBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            ln1: Affine::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            ln2: Affine::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, 4 * d),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * d, d),
            d,
        }
    }

    /// `[B, t, d] -> [B, t, d]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln1.layernorm(sess, x)?;
        let q = self.q.forward(sess, h)?;
        let k = self.k.forward(sess, h)?;
        let v = self.v.forward(sess, h)?;
        let scores = sess.tape.bmm(q, k, true)?;
        let scores = sess.tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let attn = sess.tape.softmax_lastdim(scores);
        let ctx = sess.tape.bmm(attn, v, false)?;
        let proj = self.o.forward(sess, ctx)?;
        let x1 = sess.tape.add(x, proj)?;
        let h2 = self.ln2.layernorm(sess, x1)?;
        let f = self.ff1.forward(sess, h2)?;
        let f = sess.tape.elu(f);
        let f = self.ff2.forward(sess, f)?;
        Ok(sess.tape.add(x1, f)?)
    }
}

/// Per-task token attention plus expert gate.
#[derive(Clone, Debug)]
pub struct GateHead {
    pub scorer: Mlp,
    pub gate: Linear,
}

impl GateHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, n: usize) -> Self {
        Self {
            scorer: Mlp::new(store, rng, &format!("{name}.scorer"), (d, d, 1), true),
            gate: Linear::zero_bias(store, rng, &format!("{name}.gate"), d, n),
        }
    }
}

/// Per-token scores `[B, t]` from a gate head's scorer.
fn token_scores(sess: &mut Session, x: Var, head: &GateHead) -> Result<Var> {
    let &[b, t, d] = sess.tape.value(x).shape() else {
        return Err(BmrError::Data(format!(
            "expected [B, t, d] tokens, got {:?}",
            sess.tape.value(x).shape()
        )));
    };
    let flat = sess.tape.reshape(x, &[b * t, d])?;
    let s = head.scorer.forward(sess, flat)?;
    Ok(sess.tape.reshape(s, &[b, t])?)
}

/// Pools `[B, t, d]` to `[B, d]` with weights `w[B, t]`.
fn weighted_tokens(sess: &mut Session, x: Var, w: Var) -> Result<Var> {
    let &[b, t, d] = sess.tape.value(x).shape() else {
        unreachable!("checked by token_scores")
    };
    let w = sess.tape.reshape(w, &[b, 1, t])?;
    let pooled = sess.tape.bmm(w, x, false)?;
    Ok(sess.tape.reshape(pooled, &[b, d])?)
}

/// Softmax-weighted average of the tokens, `[B, t, d] -> [B, d]`.
pub fn token_attention(sess: &mut Session, x: Var, head: &GateHead) -> Result<Var> {
    let s = token_scores(sess, x, head)?;
    let a = sess.tape.softmax_lastdim(s);
    weighted_tokens(sess, x, a)
}

/// Experts shared by `k` tasks, each with its own gate head.
#[derive(Clone, Debug)]
pub struct ImmoeLayer {
    pub experts: Vec<ExpertBlock>,
    pub heads: Vec<GateHead>,
    pub mode: GateMode,
    pub input: GateInput,
    pub d: usize,
}

impl ImmoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        n_experts: usize,
        tasks: usize,
        mode: GateMode,
        input: GateInput,
    ) -> Self {
        let experts = (0..n_experts)
            .map(|i| ExpertBlock::new(store, rng, &format!("{name}.expert{i}"), d))
            .collect();
        let heads = (0..tasks)
            .map(|k| GateHead::new(store, rng, &format!("{name}.head{k}"), d, n_experts))
            .collect();
        Self {
            experts,
            heads,
            mode,
            input,
            d,
        }
    }

    fn head(&self, task: usize) -> Result<&GateHead> {
        self.heads.get(task).ok_or_else(|| {
            BmrError::Data(format!(
                "task {task} out of range for a layer with {} tasks",
                self.heads.len()
            ))
        })
    }

    /// Every expert applied to `x`.
    pub fn expert_outputs(&self, sess: &mut Session, x: Var) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(sess, x)).collect()
    }

    /// Gate input for `task`, `[B, d]`.
    pub fn gate_input(&self, sess: &mut Session, x: Var, task: usize) -> Result<Var> {
        let head = self.head(task)?;
        match self.input {
            GateInput::Attention => token_attention(sess, x, head),
            GateInput::LiteralSum => {
                let s = token_scores(sess, x, head)?;
                weighted_tokens(sess, x, s)
            }
        }
    }

    /// Expert weights `[B, n]` for `task` under `mode`.
    pub fn gate_weights(&self, sess: &mut Session, x: Var, task: usize, mode: GateMode) -> Result<Var> {
        let agg = self.gate_input(sess, x, task)?;
        let raw = self.head(task)?.gate.forward(sess, agg)?;
        Ok(match mode {
            GateMode::Unconstrained => raw,
            GateMode::Softmax => sess.tape.softmax_lastdim(raw),
        })
    }

    /// `Σ_i g[:, i] · E_i`.
    pub fn mix(&self, sess: &mut Session, experts: &[Var], gates: Var) -> Result<Var> {
        let b = sess.tape.value(gates).shape()[0];
        let mut acc: Option<Var> = None;
        for (i, &e) in experts.iter().enumerate() {
            let gi = sess.tape.narrow(gates, 1, i, 1)?;
            let gi = sess.tape.reshape(gi, &[b])?;
            let term = sess.tape.scale_rows(e, gi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => sess.tape.add(a, term)?,
            });
        }
        acc.ok_or_else(|| BmrError::Data("layer has no experts".into()))
    }

    /// Output for one task with an explicit gate mode.
    pub fn forward_task_with(&self, sess: &mut Session, x: Var, task: usize, mode: GateMode) -> Result<Var> {
        self.head(task)?;
        let experts = self.expert_outputs(sess, x)?;
        let g = self.gate_weights(sess, x, task, mode)?;
        self.mix(sess, &experts, g)
    }

    /// Output for one task with the layer's configured mode.
    pub fn forward_task(&self, sess: &mut Session, x: Var, task: usize) -> Result<Var> {
        self.forward_task_with(sess, x, task, self.mode)
    }

    /// Outputs for every task, sharing one evaluation of the experts.
    pub fn forward_all(&self, sess: &mut Session, x: Var) -> Result<Vec<Var>> {
        let experts = self.expert_outputs(sess, x)?;
        (0..self.heads.len())
            .map(|k| {
                let g = self.gate_weights(sess, x, k, self.mode)?;
                self.mix(sess, &experts, g)
            })
            .collect()
    }
}

/// Baseline layer: softmax-normalized gates.
pub fn mmoe_forward(sess: &mut Session, layer: &ImmoeLayer, x: Var, task: usize) -> Result<Var> {
    layer.forward_task_with(sess, x, task, GateMode::Softmax)
}

/// Improved layer: gate weights used as produced.
pub fn immoe_forward(sess: &mut Session, layer: &ImmoeLayer, x: Var, task: usize) -> Result<Var> {
    layer.forward_task_with(sess, x, task, GateMode::Unconstrained)
}

/// Concatenates two sequences along the token axis, adds position
/// encoding `pe[t_a + t_b, d]` and runs task 0 of `layer`.
pub fn fuse(sess: &mut Session, a: Var, b: Var, pe: &Tensor, layer: &ImmoeLayer) -> Result<Var> {
    let (sa, sb) = (sess.tape.value(a).shape().to_vec(), sess.tape.value(b).shape().to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(BmrError::Data(format!(
            "cannot fuse sequences of shape {sa:?} and {sb:?}"
        )));
    }
    let x = sess.tape.concat(&[a, b], 1)?;
    let pe = sess.tape.constant(pe.clone());
    let x = sess.tape.add(x, pe)?;
    layer.forward_task(sess, x, 0)
}

/// Refinement stage producing one sequence per task.
#[derive(Clone, Debug)]
pub enum Refiner {
    Mixture(ImmoeLayer),
    /// One independent block per output.
    Blocks(Vec<ExpertBlock>),
}

impl Refiner {
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Vec<Var>> {
        match self {
            Refiner::Mixture(layer) => layer.forward_all(sess, x),
            Refiner::Blocks(blocks) => blocks.iter().map(|b| b.forward(sess, x)).collect(),
        }
    }
}
