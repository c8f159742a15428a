//! Optimizes the selected decoder's parameters against the matching loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::Decoder;
use crate::search::MatchingProblem;
use crate::tensor::{self, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryOptions {
    pub lr: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Feed `sign(grad)` into Adam instead of the raw gradient.
    pub signed_gradient: bool,
    /// Record the loss every this many steps.
    pub trace_stride: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            lr: 1e-3,
            iterations: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            signed_gradient: true,
            trace_stride: 10,
        }
    }
}

impl RecoveryOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.trace_stride > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid recovery options {self:?}")))
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    opts: &RecoveryOptions,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.numel() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opts.beta1.powi(t);
    let c2 = 1.0 - opts.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = p.data_mut();
        for i in 0..p.len() {
            let gi = if opts.signed_gradient { sign(g.data()[i]) } else { g.data()[i] };
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * gi;
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= opts.lr * m_hat / (v_hat.sqrt() + opts.eps);
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub reconstruction: Tensor,
    pub trace: Vec<(usize, f64)>,
    pub params_checksum: u64,
    pub final_loss: f64,
}

/// Loss trace of an aborted run.
#[derive(Debug)]
pub struct RecoveryAbort {
    pub error: Error,
    pub trace: Vec<(usize, f64)>,
}

/// Matching loss at `phi` and its gradient with respect to `phi`.
pub fn loss_and_grad(
    decoder: &Decoder,
    z0: &Tensor,
    phi: &[Tensor],
    problem: &MatchingProblem,
) -> Result<(f64, Vec<Tensor>)> {
    let graph = Graph::new();
    let leaves = graph.leaves(phi);
    let x = decoder.forward(z0, &leaves)?;
    let loss = problem.loss(&graph, &x)?;
    let grads = tensor::grad(&loss, &leaves, false)?;
    Ok((loss.item(), grads.tensors))
}

/// Runs `opts.iterations` steps from the decoder's current parameters and
/// leaves the optimized parameters in `decoder`.
pub fn recover(
    decoder: &mut Decoder,
    z0: &Tensor,
    problem: &MatchingProblem,
    opts: &RecoveryOptions,
) -> std::result::Result<RecoveryResult, RecoveryAbort> {
    let mut trace = Vec::new();
    let abort = |error: Error, trace: &Vec<(usize, f64)>| RecoveryAbort {
        error,
        trace: trace.clone(),
    };
    opts.validate().map_err(|e| abort(e, &trace))?;
    let mut phi = decoder.param_values();
    let mut state = AdamState::new(&phi);
    for step in 0..opts.iterations {
        let (loss, grads) = loss_and_grad(decoder, z0, &phi, problem).map_err(|e| abort(e, &trace))?;
        if !loss.is_finite() {
            return Err(abort(Error::NonFiniteLoss { step, value: loss }, &trace));
        }
        if step % opts.trace_stride == 0 {
            trace.push((step, loss));
        }
        adam_step(&mut phi, &grads, &mut state, opts).map_err(|e| abort(e, &trace))?;
    }
    let graph = Graph::new();
    let reconstruction = decoder.forward(z0, &phi).map_err(|e| abort(e, &trace))?;
    let final_loss = problem
        .loss(&graph, &reconstruction)
        .map_err(|e| abort(e, &trace))?
        .item();
    if !final_loss.is_finite() {
        let step = opts.iterations;
        return Err(abort(Error::NonFiniteLoss { step, value: final_loss }, &trace));
    }
    trace.push((opts.iterations, final_loss));
    decoder.set_param_values(phi).map_err(|e| abort(e, &trace))?;
    Ok(RecoveryResult {
        reconstruction,
        trace,
        params_checksum: decoder.checksum(),
        final_loss,
    })
}

pub fn write_trace_csv(trace: &[(usize, f64)], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,loss")?;
    for (s, l) in trace {
        writeln!(out, "{s},{l:e}")?;
    }
    Ok(())
}
