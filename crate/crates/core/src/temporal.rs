//! Temporal encoder: learned positional rows plus one self-attention block,
//! `z = FFN(LayerNorm(x + MHA(x)))` read out at the last step.

use rand::Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{gaussian, xavier_uniform, Bound, ParamId, ParamStore};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const POSITIONAL_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct PositionalEncoding {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionalEncoding {
    pub fn init<R: Rng>(store: &mut ParamStore, max_len: usize, d: usize, rng: &mut R) -> Self {
        Self {
            table: store.add("pos.table", gaussian(&[max_len, d], POSITIONAL_STD, rng)),
            max_len,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerBlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_q: ParamId,
    pub b_k: ParamId,
    pub b_v: ParamId,
    pub b_o: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub ff1: ParamId,
    pub ff1_b: ParamId,
    pub ff2: ParamId,
    pub ff2_b: ParamId,
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerBlockParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "temporal width {d} must be a positive multiple of {heads} heads"
            )));
        }
        let inner = 2 * d;
        let mut w = |name: &str, r: usize, c: usize| store_add(store, name, xavier_uniform(r, c, rng));
        let (w_q, w_k, w_v, w_o) = (w("w_q", d, d), w("w_k", d, d), w("w_v", d, d), w("w_o", d, d));
        let ff1 = w("ff1", d, inner);
        let ff2 = w("ff2", inner, d);
        let mut v = |name: &str, n: usize, x: f64| store_add(store, name, Tensor::full(&[n], x));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: v("b_q", d, 0.0),
            b_k: v("b_k", d, 0.0),
            b_v: v("b_v", d, 0.0),
            b_o: v("b_o", d, 0.0),
            ln_gamma: v("ln_gamma", d, 1.0),
            ln_beta: v("ln_beta", d, 0.0),
            ff1,
            ff1_b: v("ff1_b", inner, 0.0),
            ff2,
            ff2_b: v("ff2_b", d, 0.0),
            d,
            heads,
            causal,
        })
    }
}

fn store_add(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    store.add(format!("temporal.{name}"), t)
}

/// Adds rows `0..T` of the positional table to every sequence.
pub fn add_positional(tape: &mut Tape, bound: &Bound, pos: &PositionalEncoding, seq: Var) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("add_positional", format!("{shape:?}, expected B x T x d")));
    }
    if shape[1] > pos.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds the positional table ({})",
            shape[1], pos.max_len
        )));
    }
    let rows = tape.slice(bound.var(pos.table), 0, 0, shape[1])?;
    tape.add(seq, rows)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Last-step embedding, `B x d`.
    pub z: Var,
    /// One `B x T x T` attention map per head.
    pub attention: Vec<Var>,
}

/// Runs the block over `B x T x d` and reads out the last step.
pub fn encode_sequence(
    tape: &mut Tape,
    bound: &Bound,
    block: &TransformerBlockParams,
    seq: Var,
) -> Result<Encoded> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != block.d || shape[1] == 0 {
        return Err(Error::shape(
            "encode_sequence",
            format!("{shape:?}, expected B x T x {}", block.d),
        ));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / block.heads;
    let flat = tape.reshape(seq, &[b * t, d])?;
    let proj = |tape: &mut Tape, w: ParamId, bias: ParamId| -> Result<Var> {
        let y = affine(tape, flat, bound.var(w), bound.var(bias))?;
        tape.reshape(y, &[b, t, d])
    };
    let q = proj(tape, block.w_q, block.b_q)?;
    let k = proj(tape, block.w_k, block.b_k)?;
    let v = proj(tape, block.w_v, block.b_v)?;
    let mask = if block.causal && t > 1 {
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                m.data_mut()[i * t + j] = -1e30;
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };
    let mut attention = Vec::with_capacity(block.heads);
    let mut context = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let qh = tape.slice(q, 2, h * dh, (h + 1) * dh)?;
        let kh = tape.slice(k, 2, h * dh, (h + 1) * dh)?;
        let vh = tape.slice(v, 2, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let a = tape.softmax_lastdim(scores)?;
        context.push(tape.bmm(a, vh)?);
        attention.push(a);
    }
    // Everything after attention is row-wise, so only the last step is needed.
    let ctx = tape.concat(&context, 2)?;
    let ctx_last = tape.slice(ctx, 1, t - 1, t)?;
    let ctx_last = tape.reshape(ctx_last, &[b, d])?;
    let attn_out = affine(tape, ctx_last, bound.var(block.w_o), bound.var(block.b_o))?;
    let x_last = tape.slice(seq, 1, t - 1, t)?;
    let x_last = tape.reshape(x_last, &[b, d])?;
    let res = tape.add(x_last, attn_out)?;
    let normed = tape.layernorm(res, LAYERNORM_EPS)?;
    let scaled = tape.mul(normed, bound.var(block.ln_gamma))?;
    let y = tape.add(scaled, bound.var(block.ln_beta))?;
    let hidden = affine(tape, y, bound.var(block.ff1), bound.var(block.ff1_b))?;
    let hidden = tape.relu(hidden)?;
    let z = affine(tape, hidden, bound.var(block.ff2), bound.var(block.ff2_b))?;
    Ok(Encoded { z, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(d: usize, t_max: usize, seed: u64) -> (ParamStore, PositionalEncoding, TransformerBlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let pos = PositionalEncoding::init(&mut store, t_max, d, &mut rng);
        let block = TransformerBlockParams::init(&mut store, d, 4, false, &mut rng).unwrap();
        // Non-trivial biases and norm parameters so the reference exercises them.
        for id in [block.b_q, block.b_k, block.b_v, block.b_o, block.ln_beta, block.ff1_b, block.ff2_b] {
            let n = store.get(id).numel();
            store.set(id, Tensor::vector(randn(n, &mut rng))).unwrap();
        }
        let g: Vec<f64> = randn(d, &mut rng).iter().map(|x| 1.0 + 0.1 * x).collect();
        store.set(block.ln_gamma, Tensor::vector(g)).unwrap();
        (store, pos, block)
    }

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn lin(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        (0..c)
            .map(|j| b.data()[j] + (0..r).map(|i| x[i] * w.get2(i, j)).sum::<f64>())
            .collect()
    }

    /// Scalar reference for one sequence: returns z and per-head maps.
    fn reference(store: &ParamStore, blk: &TransformerBlockParams, x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let g = |id| store.get(id);
        let t = x.len();
        let d = blk.d;
        let dh = d / blk.heads;
        let q: Vec<Vec<f64>> = x.iter().map(|r| lin(r, g(blk.w_q), g(blk.b_q))).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| lin(r, g(blk.w_k), g(blk.b_k))).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| lin(r, g(blk.w_v), g(blk.b_v))).collect();
        let mut maps = Vec::new();
        let mut ctx = vec![0.0; d];
        for h in 0..blk.heads {
            let mut map = Vec::new();
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                map.push(e.iter().map(|x| x / z).collect::<Vec<f64>>());
            }
            for c in h * dh..(h + 1) * dh {
                ctx[c] = (0..t).map(|j| map[t - 1][j] * v[j][c]).sum();
            }
            maps.push(map);
        }
        let o = lin(&ctx, g(blk.w_o), g(blk.b_o));
        let res: Vec<f64> = x[t - 1].iter().zip(&o).map(|(a, b)| a + b).collect();
        let mean = res.iter().sum::<f64>() / d as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / d as f64;
        let y: Vec<f64> = (0..d)
            .map(|c| (res[c] - mean) / (var + LAYERNORM_EPS).sqrt() * g(blk.ln_gamma).data()[c] + g(blk.ln_beta).data()[c])
            .collect();
        let hid: Vec<f64> = lin(&y, g(blk.ff1), g(blk.ff1_b)).into_iter().map(|x| x.max(0.0)).collect();
        (lin(&hid, g(blk.ff2), g(blk.ff2_b)), maps)
    }

    fn encode(store: &ParamStore, blk: &TransformerBlockParams, seqs: &[Vec<Vec<f64>>]) -> (Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (b, t, d) = (seqs.len(), seqs[0].len(), blk.d);
        let flat: Vec<f64> = seqs.iter().flatten().flatten().copied().collect();
        let x = tape.constant(Tensor::new(vec![b, t, d], flat).unwrap());
        let enc = encode_sequence(&mut tape, &bound, blk, x).unwrap();
        (
            tape.value(enc.z).clone(),
            enc.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        )
    }

    #[test]
    fn positional_addition() {
        let (mut store, pos, _) = setup(8, 6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![2, 4, 8], randn(64, &mut rng)).unwrap();
        let run = |store: &ParamStore, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let v = tape.constant(x.clone());
            let out = add_positional(&mut tape, &bound, &pos, v).unwrap();
            tape.value(out).clone()
        };
        let out = run(&store, &x);
        let p = store.get(pos.table).clone();
        for b in 0..2 {
            for t in 0..4 {
                for c in 0..8 {
                    let i = (b * 4 + t) * 8 + c;
                    assert_eq!(out.data()[i], x.data()[i] + p.data()[t * 8 + c]);
                }
            }
        }
        let zero = run(&store, &Tensor::zeros(&[2, 4, 8]));
        assert_eq!(&zero.data()[32..64], &p.data()[..32]);
        store.set(pos.table, Tensor::zeros(&[6, 8])).unwrap();
        assert_eq!(run(&store, &x), x);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let long = tape.constant(Tensor::zeros(&[1, 7, 8]));
        assert!(add_positional(&mut tape, &bound, &pos, long).is_err());
    }

    #[test]
    fn single_step_attends_to_itself() {
        let (store, _, blk) = setup(8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![vec![randn(8, &mut rng)]];
        let (z, maps) = encode(&store, &blk, &x);
        assert!(maps.iter().all(|m| m.data() == [1.0]));
        let g = |id| store.get(id);
        let vpath = lin(&lin(&x[0][0], g(blk.w_v), g(blk.b_v)), g(blk.w_o), g(blk.b_o));
        let res: Vec<f64> = x[0][0].iter().zip(&vpath).map(|(a, b)| a + b).collect();
        let mean = res.iter().sum::<f64>() / 8.0;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 8.0;
        let y: Vec<f64> = (0..8)
            .map(|c| (res[c] - mean) / (var + LAYERNORM_EPS).sqrt() * g(blk.ln_gamma).data()[c] + g(blk.ln_beta).data()[c])
            .collect();
        let hid: Vec<f64> = lin(&y, g(blk.ff1), g(blk.ff1_b)).into_iter().map(|v| v.max(0.0)).collect();
        let want = lin(&hid, g(blk.ff2), g(blk.ff2_b));
        for (a, b) in z.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let (store, _, blk) = setup(8, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = randn(8, &mut rng);
        let (_, maps) = encode(&store, &blk, &[vec![row; 3]]);
        for m in maps {
            assert!(m.data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn three_steps_match_hand_unrolled_reference() {
        let (store, _, blk) = setup(8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<Vec<Vec<f64>>> = (0..2).map(|_| (0..3).map(|_| randn(8, &mut rng)).collect()).collect();
        let (z, maps) = encode(&store, &blk, &seqs);
        for (b, s) in seqs.iter().enumerate() {
            let (want, want_maps) = reference(&store, &blk, s);
            for (a, w) in z.row(b).iter().zip(&want) {
                assert!((a - w).abs() < 1e-10);
            }
            for (h, m) in want_maps.iter().enumerate() {
                for i in 0..3 {
                    let got = &maps[h].data()[(b * 3 + i) * 3..(b * 3 + i + 1) * 3];
                    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for (a, w) in got.iter().zip(&m[i]) {
                        assert!((a - w).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn early_step_influences_readout() {
        let (store, _, blk) = setup(8, 32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq: Vec<Vec<f64>> = (0..27)
            .map(|_| (0..8).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut flipped = seq.clone();
        flipped[0][3] = 1.0 - flipped[0][3];
        let (z1, _) = encode(&store, &blk, &[seq]);
        let (z2, _) = encode(&store, &blk, &[flipped]);
        let diff: f64 = z1.data().iter().zip(z2.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn causal_mask_blocks_future_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::default();
        let blk = TransformerBlockParams::init(&mut store, 8, 4, true, &mut rng).unwrap();
        let seq: Vec<Vec<f64>> = (0..4).map(|_| randn(8, &mut rng)).collect();
        let (_, maps) = encode(&store, &blk, &[seq]);
        for m in maps {
            for i in 0..4 {
                for j in i + 1..4 {
                    assert_eq!(m.data()[i * 4 + j], 0.0);
                }
            }
        }
    }
}
