#![allow(dead_code)]

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikegraph::diff::{SpikeMode, Tape, Tensor};
use spikegraph::graph::{parse_dataset, SnapshotSequence};
use spikegraph::model::{ModelParams, ParamStore};
use spikegraph::spatial::SpatialLayerParams;
use spikegraph::temporal::TransformerBlockParams;
use spikegraph::training::{
    classification_loss, contrastive_loss, forward_encoder, logits, total_loss, ForwardOptions, GraphContext,
    TrainConfig,
};

/// `||a - b||_inf / ||b||_inf`, or the absolute gap when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let gap = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale > 0.0 {
        gap / scale
    } else {
        gap
    }
}

pub fn gaussian_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

/// Five nodes over three steps with three input features and two classes.
pub fn tiny_sequence(seed: u64) -> SnapshotSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = "0\t0\t1\n0\t1\t2\n0\t3\t4\n1\t0\t2\n1\t2\t3\n1\t4\t0\n2\t1\t3\n2\t0\t4\n2\t2\t4\n";
    let mut features = String::from("3\t5\t3\n");
    for _ in 0..15 {
        let row: Vec<String> = (0..3).map(|_| format!("{:.6}", rng.random_range(-2.0..2.0))).collect();
        let _ = writeln!(features, "{}", row.join("\t"));
    }
    let labels = "0\t0\n1\t1\n2\t0\n3\t1\n4\t0\n";
    let splits = "0\ttrain\n1\ttrain\n2\ttrain\n3\tval\n4\ttest\n";
    parse_dataset(edges, &features, labels, splits).expect("fixture parses")
}

/// Small soft-spiking configuration for gradient checks.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![4, 4],
        heads: 2,
        temporal_heads: 2,
        max_steps: 3,
        fanouts: vec![2, 2],
        spike_mode: SpikeMode::Soft,
        ..TrainConfig::default()
    }
}

/// Training-mode loss (classification plus contrastive) over `nodes` and,
/// when asked, its gradient per parameter.
pub fn loss_and_grads(
    model: &ModelParams,
    ctx: &GraphContext,
    cfg: &TrainConfig,
    nodes: &[usize],
    pass: u64,
    want_grads: bool,
) -> (f64, Vec<Tensor>) {
    let labels: Vec<usize> = nodes.iter().map(|&v| ctx.seq().label(v).unwrap()).collect();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let enc = forward_encoder(&mut tape, &bound, model, ctx, nodes, cfg, ForwardOptions::train(pass)).unwrap();
    let lg = logits(&mut tape, &bound, model, enc.z).unwrap();
    let lcls = classification_loss(&mut tape, lg, &labels).unwrap();
    let mut view_rng = ChaCha8Rng::seed_from_u64(17);
    let lcon = contrastive_loss(&mut tape, enc.z, cfg.view_dropout, cfg.contrastive_temperature, &mut view_rng).unwrap();
    let loss = total_loss(&mut tape, lcls, lcon, cfg.contrastive_weight).unwrap();
    let value = tape.value(loss).item();
    if !want_grads {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    (value, bound.collect(&grads))
}

fn matvec(store: &ParamStore, w: spikegraph::model::ParamId, x: &[f64]) -> Vec<f64> {
    let w = store.get(w);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get2(i, j);
        }
    }
    out
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Per-head neighbour weights and the pre-projection aggregate
/// `W_s x_v + concat_h sum_u alpha_h(v, u) W_n x_u`, by plain loops.
pub fn oracle_aggregate(
    store: &ParamStore,
    layer: &SpatialLayerParams,
    center: &[f64],
    neighbors: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dh = layer.d_out / layer.heads;
    let q = matvec(store, layer.w_q, center);
    let mut out = matvec(store, layer.w_s, center);
    let ks: Vec<Vec<f64>> = neighbors.iter().map(|u| matvec(store, layer.w_k, u)).collect();
    let vs: Vec<Vec<f64>> = neighbors.iter().map(|u| matvec(store, layer.w_n, u)).collect();
    let mut alphas = Vec::new();
    for h in 0..layer.heads {
        let mut scores = Vec::new();
        for k in &ks {
            let mut s = 0.0;
            for i in h * dh..(h + 1) * dh {
                s += q[i] * k[i];
            }
            scores.push(s / (dh as f64).sqrt());
        }
        let a = softmax(&scores);
        for (w, v) in a.iter().zip(&vs) {
            for i in h * dh..(h + 1) * dh {
                out[i] += w * v[i];
            }
        }
        alphas.push(a);
    }
    (alphas, out)
}

/// Last-step output of the post-norm Transformer block for one sequence
/// `x[t][i]`, plus the attention rows of every head.
pub fn oracle_block(store: &ParamStore, b: &TransformerBlockParams, x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let t = x.len();
    let d = b.d;
    let dh = d / b.heads;
    let affine = |w, bias, v: &[f64]| -> Vec<f64> {
        let mut y = matvec(store, w, v);
        for (o, c) in y.iter_mut().zip(store.get(bias).data()) {
            *o += c;
        }
        y
    };
    let q: Vec<Vec<f64>> = x.iter().map(|r| affine(b.w_q, b.b_q, r)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| affine(b.w_k, b.b_k, r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| affine(b.w_v, b.b_v, r)).collect();
    let mut maps = Vec::new();
    let mut ctx_last = vec![0.0; d];
    for h in 0..b.heads {
        let mut map = Vec::new();
        for i in 0..t {
            let mut s = Vec::new();
            for j in 0..t {
                let mut dot = 0.0;
                for c in h * dh..(h + 1) * dh {
                    dot += q[i][c] * k[j][c];
                }
                let masked = b.causal && j > i;
                s.push(if masked { f64::NEG_INFINITY } else { dot / (dh as f64).sqrt() });
            }
            map.push(softmax(&s));
        }
        for j in 0..t {
            for c in h * dh..(h + 1) * dh {
                ctx_last[c] += map[t - 1][j] * v[j][c];
            }
        }
        maps.push(map);
    }
    let attn = affine(b.w_o, b.b_o, &ctx_last);
    let res: Vec<f64> = x[t - 1].iter().zip(&attn).map(|(a, c)| a + c).collect();
    let mean = res.iter().sum::<f64>() / d as f64;
    let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / d as f64;
    let (g, be) = (store.get(b.ln_gamma).data(), store.get(b.ln_beta).data());
    let y: Vec<f64> = (0..d).map(|i| (res[i] - mean) / (var + 1e-5).sqrt() * g[i] + be[i]).collect();
    let hid: Vec<f64> = affine(b.ff1, b.ff1_b, &y).into_iter().map(|a| a.max(0.0)).collect();
    (affine(b.ff2, b.ff2_b, &hid), maps)
}

/// Mean negative log-likelihood by explicit log-sum-exp.
pub fn oracle_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// InfoNCE between two masked views; masks are given row-major.
pub fn oracle_infonce(z: &[Vec<f64>], mask_a: &[f64], mask_b: &[f64], temperature: f64) -> f64 {
    let d = z[0].len();
    let view = |mask: &[f64]| -> Vec<Vec<f64>> {
        z.iter()
            .enumerate()
            .map(|(i, r)| {
                let v: Vec<f64> = r.iter().enumerate().map(|(j, x)| x * mask[i * d + j]).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let (a, b) = (view(mask_a), view(mask_b));
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / temperature)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    total / n as f64
}

/// Pooled F1 from true/false positive and false negative counts.
pub fn oracle_micro_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for c in 0..classes {
        for (&y, &p) in truth.iter().zip(pred) {
            match (y == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Unweighted mean of per-class F1 over classes seen in truth or prediction.
pub fn oracle_macro_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut scores = Vec::new();
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|(&y, &p)| y == c && p == c).count();
        let fp = truth.iter().zip(pred).filter(|(&y, &p)| y != c && p == c).count();
        let fn_ = truth.iter().zip(pred).filter(|(&y, &p)| y == c && p != c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        scores.push(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Least-squares line fit; returns the coefficient of determination.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
