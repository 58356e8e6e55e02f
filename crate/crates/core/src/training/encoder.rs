use crate::analysis::{LayerLog, SpikeLog};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{keyed_rng, sample_neighbors, CumulativeAdjacency, SnapshotSequence};
use crate::model::{Bound, ModelParams};
use crate::spatial::{dropout_mask, layer_forward};
use crate::temporal::{add_positional, encode_sequence};

use super::TrainConfig;

/// Sampling pass key used for every evaluation-mode forward, so inference
/// draws the same neighbourhoods regardless of batching.
pub const EVAL_PASS: u64 = u64::MAX;

/// Per-step neighbour lists shared by every forward pass over a sequence.
pub struct GraphContext<'a> {
    seq: &'a SnapshotSequence,
    current: Vec<Vec<Vec<usize>>>,
    history: Vec<CumulativeAdjacency>,
}

impl<'a> GraphContext<'a> {
    pub fn new(seq: &'a SnapshotSequence) -> Result<Self> {
        let steps = seq.num_steps();
        let current = (0..steps).map(|t| seq.adjacency(t)).collect();
        let mut history = Vec::with_capacity(steps);
        let mut cum = CumulativeAdjacency::empty(seq);
        for _ in 0..steps {
            history.push(cum.clone());
            if cum.step() < steps {
                cum.advance(seq)?;
            }
        }
        Ok(Self {
            seq,
            current,
            history,
        })
    }

    pub fn seq(&self) -> &SnapshotSequence {
        self.seq
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub training: bool,
    /// Keys the neighbour and dropout draws; training uses the step counter.
    pub pass: u64,
    pub log_spikes: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            training: false,
            pass: EVAL_PASS,
            log_spikes: false,
        }
    }

    pub fn train(pass: u64) -> Self {
        Self {
            training: true,
            pass,
            log_spikes: false,
        }
    }
}

pub struct EncoderOutput {
    /// `B x d` node embeddings.
    pub z: Var,
    /// Temporal attention, one `B x T x T` map per head.
    pub attention: Vec<Var>,
    pub spike_log: Option<SpikeLog>,
}

/// Rows of every layer's input, innermost layer first. Level `k` lists the
/// targets of layer `k + 1` followed by their samples.
fn sample_tree(ctx: &GraphContext, batch: &[usize], step: usize, cfg: &TrainConfig, pass: u64) -> Vec<Vec<usize>> {
    let layers = cfg.fanouts.len();
    let mut levels = vec![batch.to_vec()];
    for k in (0..layers).rev() {
        let targets = levels.last().expect("seeded with the batch");
        let mut rows = targets.clone();
        for &v in targets {
            let mut rng = keyed_rng(cfg.seed, pass, step, k, v);
            let s = sample_neighbors(
                v,
                ctx.history[step].neighbors(v),
                &ctx.current[step][v],
                cfg.fanouts[k],
                cfg.sample_p,
                &mut rng,
            );
            rows.extend(s.ids);
        }
        levels.push(rows);
    }
    levels.reverse();
    levels
}

fn gather(features: &Tensor, rows: &[usize]) -> Tensor {
    let d = features.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(features.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("sized by construction")
}

/// Spatial spiking layers at every step, then the temporal block. Returns the
/// last-step embedding of each batch node.
pub fn forward_encoder(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelParams,
    ctx: &GraphContext,
    batch: &[usize],
    cfg: &TrainConfig,
    opts: ForwardOptions,
) -> Result<EncoderOutput> {
    let seq = ctx.seq;
    let steps = seq.num_steps();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&v) = batch.iter().find(|&&v| v >= seq.num_nodes()) {
        return Err(Error::InvalidArgument(format!("batch node {v} out of range")));
    }
    if seq.feature_dim() != model.dims.d_in {
        return Err(Error::shape(
            "forward_encoder",
            format!("features have {} columns, model expects {}", seq.feature_dim(), model.dims.d_in),
        ));
    }
    if steps > model.dims.max_steps {
        return Err(Error::InvalidArgument(format!(
            "{steps} snapshots exceed the model's maximum of {}",
            model.dims.max_steps
        )));
    }
    if cfg.fanouts.len() != model.spatial.len() {
        return Err(Error::InvalidArgument("fan-out count differs from the layer count".into()));
    }
    let b = batch.len();
    let layers = model.spatial.len();
    let lif: Vec<_> = model
        .lif
        .iter()
        .map(|l| l.prepare(tape, bound))
        .collect::<Result<_>>()?;
    let mut per_step = Vec::with_capacity(steps);
    let mut log_spikes = vec![Vec::new(); layers];
    let mut log_membrane = vec![Vec::new(); layers];
    for t in 0..steps {
        let levels = sample_tree(ctx, batch, t, cfg, opts.pass);
        let mut x = tape.constant(gather(seq.features(t), &levels[0]));
        for k in 0..layers {
            let rows = levels[k + 1].len();
            let mask = if opts.training && k + 1 < layers && cfg.dropout > 0.0 {
                let mut rng = keyed_rng(cfg.seed, opts.pass, t, k, usize::MAX);
                Some(dropout_mask(rows * model.spatial[k].d_out, cfg.dropout, &mut rng))
            } else {
                None
            };
            let out = layer_forward(tape, bound, &model.spatial[k], &lif[k], x, cfg.fanouts[k], mask)?;
            if opts.log_spikes {
                let s = tape.slice(out.raw_spikes, 0, 0, b)?;
                let m = tape.slice(out.membrane, 0, 0, b)?;
                log_spikes[k].push(tape.value(s).clone());
                log_membrane[k].push(tape.value(m).clone());
            }
            x = out.spikes;
        }
        let d = model.embedding_dim();
        per_step.push(tape.reshape(x, &[b, 1, d])?);
    }
    let seq_var = tape.concat(&per_step, 1)?;
    let with_pos = add_positional(tape, bound, &model.pos, seq_var)?;
    let enc = encode_sequence(tape, bound, &model.block, with_pos)?;
    let spike_log = if opts.log_spikes {
        Some(SpikeLog {
            layers: log_spikes
                .iter()
                .zip(&log_membrane)
                .map(|(s, m)| LayerLog::from_steps(s, m))
                .collect::<Result<_>>()?,
        })
    } else {
        None
    };
    Ok(EncoderOutput {
        z: enc.z,
        attention: enc.attention,
        spike_log,
    })
}
