use std::borrow::Cow;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::SpikeLog;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::SnapshotSequence;
use crate::model::ModelParams;

use super::checkpoint::Checkpoint;
use super::encoder::{forward_encoder, ForwardOptions, GraphContext};
use super::loss::{classification_loss, contrastive_loss, logits, total_loss};
use super::metrics::{macro_f1, micro_f1};
use super::optim::{clip_grad_norm, AdamW, EarlyStopping, StopSignal};
use super::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub con_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub val_macro_f1: f64,
    pub val_micro_f1: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

impl RunReport {
    pub const HEADER: &'static str =
        "epoch\tloss\tcls_loss\tcon_loss\tgrad_norm\tval_macro_f1\tval_micro_f1\timproved";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.6}\t{:.6}\t{}",
                r.epoch,
                r.loss,
                r.cls_loss,
                r.con_loss,
                r.grad_norm,
                r.val_macro_f1,
                r.val_micro_f1,
                r.improved as u8
            );
        }
        s
    }
}

pub struct TrainOutcome {
    /// State at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// The sequence a configuration trains and predicts on.
pub fn working_sequence<'a>(seq: &'a SnapshotSequence, cfg: &TrainConfig) -> Cow<'a, SnapshotSequence> {
    if cfg.static_only {
        Cow::Owned(seq.last_snapshot())
    } else {
        Cow::Borrowed(seq)
    }
}

/// Labelled train and validation nodes. Without validation rows, a seeded 10%
/// of the training nodes is held out.
pub fn split_nodes(seq: &SnapshotSequence, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labelled = |v: &Vec<usize>| -> Vec<usize> { v.iter().copied().filter(|&n| seq.label(n).is_some()).collect() };
    let mut train = labelled(&seq.splits().train);
    let mut val = labelled(&seq.splits().val);
    if val.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_7A11);
        train.shuffle(&mut rng);
        let k = (train.len() / 10).max(1).min(train.len().saturating_sub(1));
        val = train.split_off(train.len() - k);
        train.sort_unstable();
        val.sort_unstable();
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs labelled train and validation nodes".into(),
        ));
    }
    Ok((train, val))
}

fn labels_of(seq: &SnapshotSequence, nodes: &[usize]) -> Vec<usize> {
    nodes.iter().map(|&v| seq.label(v).expect("labelled by construction")).collect()
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.last_dim();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn train(seq: &SnapshotSequence, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seq = working_sequence(seq, cfg);
    let seq = seq.as_ref();
    let (train_nodes, val_nodes) = split_nodes(seq, cfg.seed)?;
    let classes = seq.num_classes().max(2);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::new(cfg.model_dims(seq.feature_dim(), classes)?, &mut init_rng)?;
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, &model.store);
    let ctx = GraphContext::new(seq)?;
    let val_truth = labels_of(seq, &val_nodes);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut report = RunReport::default();
    let mut best = Checkpoint::capture(&model, cfg, &opt.state, f64::NEG_INFINITY, 0);
    let mut pass = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order = train_nodes.clone();
        order.shuffle(&mut order_rng);
        let (mut sum_loss, mut sum_cls, mut sum_con, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let step = train_step(&mut model, &mut opt, &ctx, batch, cfg, pass, &mut view_rng).map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => {
                    log::error!("non-finite values at epoch {epoch}, batch {bi}, nodes {batch:?}");
                    Error::NonFiniteLoss {
                        epoch,
                        batch_index: bi,
                        nodes: batch.to_vec(),
                    }
                }
                other => other,
            })?;
            pass += 1;
            sum_loss += step.0;
            sum_cls += step.1;
            sum_con += step.2;
            sum_norm += step.3;
        }
        let nb = batches.len() as f64;
        let pred = predict(&model, &ctx, cfg, &val_nodes, cfg.inference_batch(seq.num_nodes()), false)?.labels;
        let val_macro = macro_f1(&val_truth, &pred);
        let val_micro = micro_f1(&val_truth, &pred);
        let signal = stopper.update(epoch, val_macro);
        if signal == StopSignal::Improved {
            best = Checkpoint::capture(&model, cfg, &opt.state, val_macro, epoch);
        }
        log::info!(
            "epoch {epoch}: loss {:.5}, val macro-F1 {val_macro:.4}, micro-F1 {val_micro:.4}",
            sum_loss / nb
        );
        report.records.push(EpochRecord {
            epoch,
            loss: sum_loss / nb,
            cls_loss: sum_cls / nb,
            con_loss: sum_con / nb,
            grad_norm: sum_norm / nb,
            val_macro_f1: val_macro,
            val_micro_f1: val_micro,
            improved: signal == StopSignal::Improved,
        });
        if signal == StopSignal::Stop {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = best.epoch;
    report.best_val_f1 = best.best_val_f1;
    Ok(TrainOutcome {
        checkpoint: best,
        report,
    })
}

/// One optimiser update; returns `(loss, cls, con, pre-clip grad norm)`.
fn train_step(
    model: &mut ModelParams,
    opt: &mut AdamW,
    ctx: &GraphContext,
    batch: &[usize],
    cfg: &TrainConfig,
    pass: u64,
    view_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, f64)> {
    let labels = labels_of(ctx.seq(), batch);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let enc = forward_encoder(&mut tape, &bound, model, ctx, batch, cfg, ForwardOptions::train(pass))?;
    let lg = logits(&mut tape, &bound, model, enc.z)?;
    let lcls = classification_loss(&mut tape, lg, &labels)?;
    let (loss, con) = if cfg.contrastive_weight > 0.0 {
        let lcon = contrastive_loss(&mut tape, enc.z, cfg.view_dropout, cfg.contrastive_temperature, view_rng)?;
        (total_loss(&mut tape, lcls, lcon, cfg.contrastive_weight)?, tape.value(lcon).item())
    } else {
        (lcls, 0.0)
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let cls = tape.value(lcls).item();
    let grads = tape.backward(loss)?;
    let mut g = bound.collect(&grads);
    let norm = clip_grad_norm(&mut g, cfg.clip_norm);
    opt.step(&mut model.store, &g)?;
    Ok((value, cls, con, norm))
}

#[derive(Clone, Debug, Default)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `B x C` class probabilities, rows in node order.
    pub probs: Vec<Vec<f64>>,
    /// Temporal attention maps, one `B x T x T` tensor per head and batch.
    pub attention: Vec<Tensor>,
    pub spike_log: Option<SpikeLog>,
    /// Multiply-accumulate operations spent in the forward passes.
    pub macs: u64,
}

/// Evaluation-mode forward over `nodes` in batches of `batch_size`.
pub fn predict(
    model: &ModelParams,
    ctx: &GraphContext,
    cfg: &TrainConfig,
    nodes: &[usize],
    batch_size: usize,
    log_spikes: bool,
) -> Result<Prediction> {
    let mut out = Prediction {
        spike_log: log_spikes.then(SpikeLog::default),
        ..Default::default()
    };
    for batch in nodes.chunks(batch_size.max(1)) {
        let mut tape = Tape::no_grad();
        let bound = model.store.bind_constant(&mut tape);
        let mut opts = ForwardOptions::eval();
        opts.log_spikes = log_spikes;
        let enc = forward_encoder(&mut tape, &bound, model, ctx, batch, cfg, opts)?;
        let lg = logits(&mut tape, &bound, model, enc.z)?;
        let p = tape.softmax_lastdim(lg)?;
        let probs = tape.value(p);
        out.labels.extend(argmax_rows(probs));
        out.probs.extend(probs.data().chunks(probs.last_dim()).map(<[f64]>::to_vec));
        out.attention.extend(enc.attention.iter().map(|&a| tape.value(a).clone()));
        if let (Some(all), Some(part)) = (out.spike_log.as_mut(), enc.spike_log.as_ref()) {
            all.extend(part)?;
        }
        out.macs += tape.macs();
    }
    Ok(out)
}

/// Predicted class of every node, using the configuration stored in the
/// checkpoint.
pub fn infer(seq: &SnapshotSequence, checkpoint: &Checkpoint, batch_size: usize) -> Result<Vec<usize>> {
    let cfg = &checkpoint.config;
    let seq = working_sequence(seq, cfg);
    let model = checkpoint.model()?;
    let ctx = GraphContext::new(seq.as_ref())?;
    let nodes: Vec<usize> = (0..seq.num_nodes()).collect();
    Ok(predict(&model, &ctx, cfg, &nodes, batch_size, false)?.labels)
}
