use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, ModelParams};
use crate::spatial::dropout_mask;

/// Class logits `Z W_c + b_c`.
pub fn logits(tape: &mut Tape, bound: &Bound, model: &ModelParams, z: Var) -> Result<Var> {
    let y = tape.matmul(z, bound.var(model.w_c))?;
    tape.add(y, bound.var(model.b_c))
}

/// Softmax class probabilities.
pub fn classify(tape: &mut Tape, bound: &Bound, model: &ModelParams, z: Var) -> Result<Var> {
    let l = logits(tape, bound, model, z)?;
    tape.softmax_lastdim(l)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::InvalidArgument(format!("label {c} outside {} classes", shape[1])));
    }
    let lp = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// InfoNCE between two dropout views of `z`. Masks are drawn from `rng`;
/// `view_dropout = 0` compares `z` with itself.
pub fn contrastive_loss<R: Rng>(
    tape: &mut Tape,
    z: Var,
    view_dropout: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("contrastive_loss", format!("{shape:?}")));
    }
    let n = shape[0] * shape[1];
    let mut view = |tape: &mut Tape| -> Result<Var> {
        let v = if view_dropout > 0.0 {
            tape.dropout_mask_apply(z, dropout_mask(n, view_dropout, rng))?
        } else {
            z
        };
        tape.l2_normalize(v)
    };
    let a = view(tape)?;
    let b = view(tape)?;
    let bt = tape.transpose(b)?;
    let s = tape.matmul(a, bt)?;
    let s = tape.scale(s, 1.0 / temperature)?;
    let lp = tape.log_softmax_lastdim(s)?;
    let diag: Vec<usize> = (0..shape[0]).collect();
    let picked = tape.pick(lp, &diag)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// `lcls + weight * lcon`.
pub fn total_loss(tape: &mut Tape, lcls: Var, lcon: Var, weight: f64) -> Result<Var> {
    let w = tape.scale(lcon, weight)?;
    tape.add(lcls, w)
}
