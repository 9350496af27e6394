//! Neural building blocks: GRU cell, bidirectional GRU, single-head
//! additive attention, dense heads, and variational dropout.
//!
//! Layers are stateless given their parameters. Each forward call takes
//! the active [`Tape`] and returns node handles, so one tape can hold a
//! whole batch.

use rand::Rng;

use crate::autodiff::{glorot_fill, uniform_fill, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

// ── Parameter bundles ────────────────────────────────────────────────

/// One direction of a GRU: update gate z, reset gate r, candidate h.
///
/// z = sigmoid(W_z x + U_z h + b_z)
/// r = sigmoid(W_r x + U_r h + b_r)
/// c = tanh(W_h x + U_h (r*h) + b_h)
/// h' = (1-z)*h + z*c
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::BadDimension(vec![hidden, input]));
        }
        let wi = |rng: &mut R| Tensor::new(vec![hidden, input], glorot_fill(&[hidden, input], rng));
        let wh = |rng: &mut R| Tensor::new(vec![hidden, hidden], glorot_fill(&[hidden, hidden], rng));
        Ok(GruParams {
            w_z: wi(rng)?,
            w_r: wi(rng)?,
            w_h: wi(rng)?,
            u_z: wh(rng)?,
            u_r: wh(rng)?,
            u_h: wh(rng)?,
            b_z: Tensor::zeros(&[hidden])?,
            b_r: Tensor::zeros(&[hidden])?,
            b_h: Tensor::zeros(&[hidden])?,
        })
    }

    pub fn zeros(hidden: usize, input: usize) -> Result<Self> {
        Ok(GruParams {
            w_z: Tensor::zeros(&[hidden, input])?,
            w_r: Tensor::zeros(&[hidden, input])?,
            w_h: Tensor::zeros(&[hidden, input])?,
            u_z: Tensor::zeros(&[hidden, hidden])?,
            u_r: Tensor::zeros(&[hidden, hidden])?,
            u_h: Tensor::zeros(&[hidden, hidden])?,
            b_z: Tensor::zeros(&[hidden])?,
            b_r: Tensor::zeros(&[hidden])?,
            b_h: Tensor::zeros(&[hidden])?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b_z.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// Register all nine arrays on a tape under `prefix`.
    pub fn bind(&self, prefix: &str, tape: &mut Tape) -> Result<GruNodes> {
        Ok(GruNodes {
            w_z: tape.param(&format!("{prefix}.w_z"), &self.w_z)?,
            w_r: tape.param(&format!("{prefix}.w_r"), &self.w_r)?,
            w_h: tape.param(&format!("{prefix}.w_h"), &self.w_h)?,
            u_z: tape.param(&format!("{prefix}.u_z"), &self.u_z)?,
            u_r: tape.param(&format!("{prefix}.u_r"), &self.u_r)?,
            u_h: tape.param(&format!("{prefix}.u_h"), &self.u_h)?,
            b_z: tape.param(&format!("{prefix}.b_z"), &self.b_z)?,
            b_r: tape.param(&format!("{prefix}.b_r"), &self.b_r)?,
            b_h: tape.param(&format!("{prefix}.b_h"), &self.b_h)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_z"), &self.w_z);
        f(format!("{prefix}.w_r"), &self.w_r);
        f(format!("{prefix}.w_h"), &self.w_h);
        f(format!("{prefix}.u_z"), &self.u_z);
        f(format!("{prefix}.u_r"), &self.u_r);
        f(format!("{prefix}.u_h"), &self.u_h);
        f(format!("{prefix}.b_z"), &self.b_z);
        f(format!("{prefix}.b_r"), &self.b_r);
        f(format!("{prefix}.b_h"), &self.b_h);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_z"), &mut self.w_z);
        f(format!("{prefix}.w_r"), &mut self.w_r);
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.u_z"), &mut self.u_z);
        f(format!("{prefix}.u_r"), &mut self.u_r);
        f(format!("{prefix}.u_h"), &mut self.u_h);
        f(format!("{prefix}.b_z"), &mut self.b_z);
        f(format!("{prefix}.b_r"), &mut self.b_r);
        f(format!("{prefix}.b_h"), &mut self.b_h);
    }
}

/// Tape handles for one bound GRU direction.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
}

/// Additive attention: score_t = relu(W h_t + b) . u, pooled = sum of
/// attention-weighted *projected* vectors (not the raw states).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Tensor,
    pub b: Tensor,
    pub u: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng>(proj: usize, input: usize, rng: &mut R) -> Result<Self> {
        if proj == 0 || input == 0 {
            return Err(Error::BadDimension(vec![proj, input]));
        }
        Ok(AttentionParams {
            w: Tensor::new(vec![proj, input], glorot_fill(&[proj, input], rng))?,
            b: Tensor::zeros(&[proj])?,
            u: Tensor::new(vec![proj], uniform_fill(proj, -0.1, 0.1, rng))?,
        })
    }

    pub fn proj(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn bind(&self, prefix: &str, tape: &mut Tape) -> Result<AttentionNodes> {
        Ok(AttentionNodes {
            w: tape.param(&format!("{prefix}.w"), &self.w)?,
            b: tape.param(&format!("{prefix}.b"), &self.b)?,
            u: tape.param(&format!("{prefix}.u"), &self.u)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
        f(format!("{prefix}.u"), &self.u);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
        f(format!("{prefix}.u"), &mut self.u);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub u: NodeId,
}

// ── Dropout ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Variational dropout: one input mask and one recurrent mask per
/// sequence, applied at every step, with inverted scaling at train time.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub input_rate: f32,
    pub recurrent_rate: f32,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn new(input_rate: f32, recurrent_rate: f32, mode: Mode) -> Result<Self> {
        for r in [input_rate, recurrent_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {} outside [0,1)", r)));
            }
        }
        Ok(DropoutSpec { input_rate, recurrent_rate, mode })
    }

    pub fn eval() -> Self {
        DropoutSpec { input_rate: 0.0, recurrent_rate: 0.0, mode: Mode::Eval }
    }
}

/// Per-sequence dropout masks for one GRU direction. `None` means
/// identity (eval mode or rate 0).
struct GruMasks {
    input: Option<NodeId>,
    recurrent: Option<NodeId>,
}

fn draw_mask<R: Rng>(tape: &mut Tape, dim: usize, rate: f32, rng: &mut R) -> Option<NodeId> {
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let data: Vec<f32> =
        (0..dim).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
    Some(tape.leaf_vec(&data))
}

fn gru_masks<R: Rng>(
    tape: &mut Tape,
    input_dim: usize,
    hidden: usize,
    d: &DropoutSpec,
    rng: &mut R,
) -> GruMasks {
    if d.mode == Mode::Eval {
        return GruMasks { input: None, recurrent: None };
    }
    GruMasks {
        input: draw_mask(tape, input_dim, d.input_rate, rng),
        recurrent: draw_mask(tape, hidden, d.recurrent_rate, rng),
    }
}

// ── Forward ops ──────────────────────────────────────────────────────

fn gru_step_masked(
    tape: &mut Tape,
    p: &GruNodes,
    x: NodeId,
    h_prev: NodeId,
    masks: &GruMasks,
) -> Result<NodeId> {
    let x_in = match masks.input {
        Some(m) => tape.mul(x, m)?,
        None => x,
    };
    // recurrent dropout applies to the h entering the gates, not to the
    // h carried through the interpolation
    let h_in = match masks.recurrent {
        Some(m) => tape.mul(h_prev, m)?,
        None => h_prev,
    };
    let gate = |tape: &mut Tape, w, u, b| -> Result<NodeId> {
        let wx = tape.matvec(w, x_in)?;
        let uh = tape.matvec(u, h_in)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z = {
        let pre = gate(tape, p.w_z, p.u_z, p.b_z)?;
        tape.sigmoid(pre)?
    };
    let r = {
        let pre = gate(tape, p.w_r, p.u_r, p.b_r)?;
        tape.sigmoid(pre)?
    };
    let candidate = {
        let wx = tape.matvec(p.w_h, x_in)?;
        let rh = tape.mul(r, h_in)?;
        let uh = tape.matvec(p.u_h, rh)?;
        let s = tape.add(wx, uh)?;
        let pre = tape.add(s, p.b_h)?;
        tape.tanh(pre)?
    };
    // h' = (1-z)*h_prev + z*candidate
    let neg_z = tape.scale(z, -1.0)?;
    let one_minus_z = tape.add_scalar(neg_z, 1.0)?;
    let keep = tape.mul(one_minus_z, h_prev)?;
    let update = tape.mul(z, candidate)?;
    tape.add(keep, update)
}

/// One GRU step. In train mode, fresh dropout masks are drawn for this
/// single step; sequence-level callers share masks via [`bigru_encode`].
pub fn gru_step<R: Rng>(
    tape: &mut Tape,
    p: &GruNodes,
    x: NodeId,
    h_prev: NodeId,
    d: &DropoutSpec,
    rng: &mut R,
) -> Result<NodeId> {
    let (input_dim, hidden) = (tape.shape(x)[0], tape.shape(h_prev)[0]);
    let masks = gru_masks(tape, input_dim, hidden, d, rng);
    gru_step_masked(tape, p, x, h_prev, &masks)
}

fn gru_direction(
    tape: &mut Tape,
    p: &GruNodes,
    xs: &[NodeId],
    mask: &[bool],
    masks: &GruMasks,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let zero = Tensor::zeros(&[hidden])?;
    let mut h = tape.leaf(&zero);
    let mut out = vec![h; xs.len()];
    let order: Vec<usize> =
        if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for t in order {
        if mask[t] {
            h = gru_step_masked(tape, p, xs[t], h, masks)?;
        }
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional GRU over a masked sequence. Masked positions skip the
/// state update (the state carries through); outputs concatenate the
/// forward and backward states per position.
pub fn bigru_encode<R: Rng>(
    tape: &mut Tape,
    fwd: &GruNodes,
    bwd: &GruNodes,
    xs: &[NodeId],
    mask: &[bool],
    d: &DropoutSpec,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    if xs.len() != mask.len() {
        return Err(Error::Shape {
            op: "bigru_encode",
            detail: format!("{} inputs vs {} mask entries", xs.len(), mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Shape { op: "bigru_encode", detail: "all positions masked".into() });
    }
    let first_real = mask.iter().position(|&m| m).unwrap();
    let input_dim = tape.shape(xs[first_real])[0];
    let hidden_fwd = gru_hidden(tape, fwd);
    let hidden_bwd = gru_hidden(tape, bwd);
    let masks_f = gru_masks(tape, input_dim, hidden_fwd, d, rng);
    let masks_b = gru_masks(tape, input_dim, hidden_bwd, d, rng);
    let hs_f = gru_direction(tape, fwd, xs, mask, &masks_f, hidden_fwd, false)?;
    let hs_b = gru_direction(tape, bwd, xs, mask, &masks_b, hidden_bwd, true)?;
    hs_f.iter().zip(&hs_b).map(|(&f, &b)| tape.concat(&[f, b])).collect()
}

fn gru_hidden(tape: &Tape, p: &GruNodes) -> usize {
    tape.shape(p.b_z)[0]
}

/// Additive attention over a masked state sequence.
///
/// Returns the dense weight vector (exact zeros at masked positions)
/// and the pooled vector sum_t alpha_t * relu(W h_t + b).
pub fn attend(
    tape: &mut Tape,
    a: &AttentionNodes,
    states: &[NodeId],
    mask: &[bool],
) -> Result<(Vec<f32>, NodeId)> {
    if states.len() != mask.len() {
        return Err(Error::Shape {
            op: "attend",
            detail: format!("{} states vs {} mask entries", states.len(), mask.len()),
        });
    }
    let live: Vec<usize> = (0..states.len()).filter(|&t| mask[t]).collect();
    if live.is_empty() {
        return Err(Error::Shape { op: "attend", detail: "all positions masked".into() });
    }
    let mut projected = Vec::with_capacity(live.len());
    for &t in &live {
        let wh = tape.matvec(a.w, states[t])?;
        let pre = tape.add(wh, a.b)?;
        projected.push(tape.relu(pre)?);
    }
    let proj_matrix = tape.stack_rows(&projected)?;
    let logits = tape.matvec(proj_matrix, a.u)?;
    let alpha = tape.softmax(logits)?;
    let pooled = tape.weighted_sum(alpha, proj_matrix)?;

    let alpha_vals = tape.value(alpha);
    let mut weights = vec![0.0f32; states.len()];
    for (j, &t) in live.iter().enumerate() {
        weights[t] = alpha_vals.data()[j];
    }
    Ok((weights, pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Softmax,
}

/// Dense head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseParams {
    pub fn init<R: Rng>(out: usize, input: usize, rng: &mut R) -> Result<Self> {
        Ok(DenseParams {
            w: Tensor::new(vec![out, input], glorot_fill(&[out, input], rng))?,
            b: Tensor::zeros(&[out])?,
        })
    }

    pub fn bind(&self, prefix: &str, tape: &mut Tape) -> Result<DenseNodes> {
        Ok(DenseNodes {
            w: tape.param(&format!("{prefix}.w"), &self.w)?,
            b: tape.param(&format!("{prefix}.b"), &self.b)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// W x + b, optionally softmax-normalized.
pub fn dense(tape: &mut Tape, p: &DenseNodes, x: NodeId, act: Activation) -> Result<NodeId> {
    let wx = tape.matvec(p.w, x)?;
    let pre = tape.add(wx, p.b)?;
    match act {
        Activation::Linear => Ok(pre),
        Activation::Softmax => tape.softmax(pre),
    }
}
