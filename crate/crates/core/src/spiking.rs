//! Adaptive leaky integrate-and-fire layer with learnable per-channel time
//! constants and thresholds.
//!
//! The membrane update is the forward-Euler step
//! `u' = u + (h - (u - u_reset)) / tau`, a spike fires when `u' >= V_th`, and
//! firing resets the potential to `u_reset`. The time constant is stored as an
//! unconstrained `tau_raw` and mapped through `0.5 + eps + softplus(tau_raw)`,
//! so every channel satisfies `tau > 1/2` (decay factor `|1 - 1/tau| < 1`) at
//! every optimizer step.

use crate::diff::{softplus, SpikeMode, SurrogateConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, ParamId, ParamStore};

/// Margin kept between the effective time constant and 1/2.
pub const TAU_MARGIN: f64 = 1e-3;

pub fn effective_tau_value(tau_raw: f64) -> f64 {
    0.5 + TAU_MARGIN + softplus(tau_raw)
}

/// Inverse of [`effective_tau_value`]; `tau` must exceed `0.5 + TAU_MARGIN`.
pub fn tau_raw_for(tau: f64) -> f64 {
    let s = tau - 0.5 - TAU_MARGIN;
    // softplus^-1(s) = ln(e^s - 1)
    s + (-(-s).exp()).ln_1p()
}

/// `d tau / d tau_raw`, the logistic function of `tau_raw`.
pub fn effective_tau_slope(tau_raw: f64) -> f64 {
    1.0 / (1.0 + (-tau_raw).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub u_reset: f64,
    pub surrogate: SurrogateConfig,
    pub mode: SpikeMode,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            u_reset: 0.0,
            surrogate: SurrogateConfig::default(),
            mode: SpikeMode::Hard,
        }
    }
}

/// Learnable neuron parameters of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LifParams {
    pub tau_raw: ParamId,
    pub v_th: ParamId,
    pub channels: usize,
    pub cfg: LifConfig,
}

impl LifParams {
    /// Registers `channels` neurons initialised at `tau` and `v_th`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        tau: f64,
        v_th: f64,
        cfg: LifConfig,
    ) -> Self {
        let tau_raw = store.add(
            format!("{prefix}.tau_raw"),
            Tensor::full(&[channels], tau_raw_for(tau)),
        );
        let v_th = store.add(format!("{prefix}.v_th"), Tensor::full(&[channels], v_th));
        Self {
            tau_raw,
            v_th,
            channels,
            cfg,
        }
    }

    /// Per-channel effective time constants.
    pub fn effective_tau(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.tau_raw)
            .data()
            .iter()
            .map(|&r| effective_tau_value(r))
            .collect()
    }

    pub fn thresholds<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.v_th).data()
    }

    /// Puts the derived per-channel quantities on the tape once per pass.
    pub fn prepare(&self, tape: &mut Tape, bound: &Bound) -> Result<LifVars> {
        let sp = tape.softplus(bound.var(self.tau_raw))?;
        let tau = tape.add_scalar(sp, 0.5 + TAU_MARGIN)?;
        let inv_tau = tape.reciprocal(tau)?;
        Ok(LifVars {
            tau,
            inv_tau,
            v_th: bound.var(self.v_th),
            cfg: self.cfg,
        })
    }
}

/// Tape handles for one layer's neuron parameters.
#[derive(Clone, Copy, Debug)]
pub struct LifVars {
    pub tau: Var,
    pub inv_tau: Var,
    pub v_th: Var,
    pub cfg: LifConfig,
}

/// Membrane potentials of the active batch, `B x d`.
#[derive(Clone, Copy, Debug)]
pub struct LifState {
    pub u: Var,
}

/// All-zero membrane state.
pub fn reset_state(tape: &mut Tape, batch: usize, channels: usize) -> Result<LifState> {
    if batch == 0 || channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "LIF state needs positive sizes, got {batch} x {channels}"
        )));
    }
    Ok(LifState {
        u: tape.constant(Tensor::zeros(&[batch, channels])),
    })
}

/// Output of one [`lif_step`].
#[derive(Clone, Copy, Debug)]
pub struct LifStep {
    pub spikes: Var,
    /// Potential after integration, before the reset.
    pub membrane: Var,
    pub state: LifState,
}

/// One integrate, fire and reset step. The reset is transparent to the
/// backward pass, so the step-to-step sensitivity of the potential is the
/// leak factor `1 - 1/tau` at reset events too.
pub fn lif_step(tape: &mut Tape, state: LifState, h: Var, lif: &LifVars) -> Result<LifStep> {
    if tape.shape(h) != tape.shape(state.u) {
        return Err(Error::shape(
            "lif_step",
            format!("{:?} vs state {:?}", tape.shape(h), tape.shape(state.u)),
        ));
    }
    if !tape.value(h).is_finite() {
        return Err(Error::NonFinite { op: "lif_step" });
    }
    let leak = tape.add_scalar(state.u, -lif.cfg.u_reset)?;
    let drive = tape.sub(h, leak)?;
    let delta = tape.mul(drive, lif.inv_tau)?;
    let membrane = tape.add(state.u, delta)?;
    let over = tape.sub(membrane, lif.v_th)?;
    let spikes = tape.spike(over, lif.cfg.surrogate, lif.cfg.mode)?;
    let u = tape.reset(membrane, spikes, lif.cfg.u_reset)?;
    Ok(LifStep {
        spikes,
        membrane,
        state: LifState { u },
    })
}

/// Scalar form of [`lif_step`]: returns `(pre-reset potential, spike,
/// post-reset potential)`.
pub fn lif_update(u: f64, h: f64, tau: f64, v_th: f64, u_reset: f64) -> (f64, bool, f64) {
    let pre = u + (h - (u - u_reset)) / tau;
    let fired = pre >= v_th;
    (pre, fired, if fired { u_reset } else { pre })
}
