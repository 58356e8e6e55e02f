//! Multi-head attentive aggregation over sampled neighbourhoods.
//!
//! For a centre `v` with sampled neighbours `u_1..u_S` each head scores
//! `(W_q x_v)^T (W_k x_u) / sqrt(d_h)`, normalises the scores with a softmax
//! over the sample and mixes the neighbour transforms `W_n x_u`. The heads are
//! concatenated and added to the self transform `W_s x_v`. [`layer_forward`]
//! then applies a square output projection and the spiking neurons.

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::spiking::{lif_step, reset_state, LifVars};

#[derive(Clone, Copy, Debug)]
pub struct SpatialLayerParams {
    pub w_s: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_n: ParamId,
    /// Projection applied after the heads are combined.
    pub w_o: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
}

impl SpatialLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || heads == 0 || d_out == 0 || !d_out.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "spatial layer {prefix}: output width {d_out} must be a positive multiple of {heads} heads"
            )));
        }
        let mut m = |name: &str, r: usize, c: usize| {
            store.add(format!("{prefix}.{name}"), xavier_uniform(r, c, rng))
        };
        Ok(Self {
            w_s: m("w_s", d_in, d_out),
            w_q: m("w_q", d_in, d_out),
            w_k: m("w_k", d_in, d_out),
            w_n: m("w_n", d_in, d_out),
            w_o: m("w_o", d_out, d_out),
            d_in,
            d_out,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_out / self.heads
    }
}

/// Projected neighbour rows shared by [`attention_weights`] and [`aggregate`].
struct Projected {
    rows: usize,
    samples: usize,
}

fn check_inputs(tape: &Tape, layer: &SpatialLayerParams, center: Var, neighbors: Var) -> Result<Projected> {
    let cs = tape.shape(center);
    let ns = tape.shape(neighbors);
    if cs.len() != 2 || ns.len() != 3 || cs[0] != ns[0] || cs[1] != layer.d_in || ns[2] != layer.d_in {
        return Err(Error::shape(
            "spatial",
            format!("centre {cs:?}, neighbours {ns:?}, layer input {}", layer.d_in),
        ));
    }
    if ns[1] == 0 {
        return Err(Error::InvalidArgument("at least one sampled neighbour is required".into()));
    }
    Ok(Projected {
        rows: cs[0],
        samples: ns[1],
    })
}

/// Applies `w` to every neighbour row, giving `B x S x d_out`.
fn project_neighbors(tape: &mut Tape, neighbors: Var, w: Var, p: &Projected, d_in: usize) -> Result<Var> {
    let flat = tape.reshape(neighbors, &[p.rows * p.samples, d_in])?;
    let out = tape.matmul(flat, w)?;
    let d = tape.shape(out)[1];
    tape.reshape(out, &[p.rows, p.samples, d])
}

fn head_slice(tape: &mut Tape, x: Var, h: usize, dh: usize) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    tape.slice(x, axis, h * dh, (h + 1) * dh)
}

fn weights_from_keys(
    tape: &mut Tape,
    bound: &Bound,
    layer: &SpatialLayerParams,
    center: Var,
    keys: Var,
    p: &Projected,
) -> Result<Vec<Var>> {
    let dh = layer.head_dim();
    let q = tape.matmul(center, bound.var(layer.w_q))?;
    let mut out = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let qh = head_slice(tape, q, h, dh)?;
        let qh = tape.reshape(qh, &[p.rows, 1, dh])?;
        let kh = head_slice(tape, keys, h, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        out.push(tape.softmax_lastdim(scores)?);
    }
    Ok(out)
}

/// Per-head attention over the sampled neighbours: one `B x 1 x S` tensor per
/// head whose rows sum to one.
pub fn attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    layer: &SpatialLayerParams,
    center: Var,
    neighbors: Var,
) -> Result<Vec<Var>> {
    let p = check_inputs(tape, layer, center, neighbors)?;
    let keys = project_neighbors(tape, neighbors, bound.var(layer.w_k), &p, layer.d_in)?;
    weights_from_keys(tape, bound, layer, center, keys, &p)
}

/// `W_s x_v + concat_h(sum_u alpha_vu^h W_n^h x_u)`, before the output
/// projection.
pub fn aggregate(
    tape: &mut Tape,
    bound: &Bound,
    layer: &SpatialLayerParams,
    center: Var,
    neighbors: Var,
    alpha: &[Var],
) -> Result<Var> {
    let p = check_inputs(tape, layer, center, neighbors)?;
    if alpha.len() != layer.heads {
        return Err(Error::shape(
            "aggregate",
            format!("{} attention heads for a {}-head layer", alpha.len(), layer.heads),
        ));
    }
    let dh = layer.head_dim();
    let values = project_neighbors(tape, neighbors, bound.var(layer.w_n), &p, layer.d_in)?;
    let mut heads = Vec::with_capacity(layer.heads);
    for (h, &a) in alpha.iter().enumerate() {
        if tape.shape(a) != [p.rows, 1, p.samples] {
            return Err(Error::shape(
                "aggregate",
                format!("head {h} weights {:?}, expected [{}, 1, {}]", tape.shape(a), p.rows, p.samples),
            ));
        }
        let vh = head_slice(tape, values, h, dh)?;
        let mixed = tape.bmm(a, vh)?;
        heads.push(tape.reshape(mixed, &[p.rows, dh])?);
    }
    let neigh = tape.concat(&heads, 1)?;
    let own = tape.matmul(center, bound.var(layer.w_s))?;
    tape.add(own, neigh)
}

/// Inverted dropout mask: kept entries are scaled by `1/(1-p)`.
pub fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// Spikes after dropout, one row per target; this feeds the next layer.
    pub spikes: Var,
    /// Binary spikes before dropout.
    pub raw_spikes: Var,
    /// Pre-reset membrane potentials.
    pub membrane: Var,
    pub attention: Vec<Var>,
}

/// One spatial layer. `input` stacks the `n` target rows first and then their
/// `n * samples` neighbour rows in target-major order. `dropout` is the mask
/// applied to the output spikes, if any.
pub fn layer_forward(
    tape: &mut Tape,
    bound: &Bound,
    layer: &SpatialLayerParams,
    lif: &LifVars,
    input: Var,
    samples: usize,
    dropout: Option<Vec<f64>>,
) -> Result<LayerOutput> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || samples == 0 || !shape[0].is_multiple_of(1 + samples) {
        return Err(Error::shape(
            "layer_forward",
            format!("input {shape:?} with {samples} samples per target"),
        ));
    }
    let n = shape[0] / (1 + samples);
    let center = tape.slice(input, 0, 0, n)?;
    let rest = tape.slice(input, 0, n, shape[0])?;
    let neighbors = tape.reshape(rest, &[n, samples, shape[1]])?;
    let alpha = attention_weights(tape, bound, layer, center, neighbors)?;
    let agg = aggregate(tape, bound, layer, center, neighbors, &alpha)?;
    let h = tape.matmul(agg, bound.var(layer.w_o))?;
    let state = reset_state(tape, n, layer.d_out)?;
    let step = lif_step(tape, state, h, lif)?;
    let spikes = match dropout {
        Some(mask) => tape.dropout_mask_apply(step.spikes, mask)?,
        None => step.spikes,
    };
    Ok(LayerOutput {
        spikes,
        raw_spikes: step.spikes,
        membrane: step.membrane,
        attention: alpha,
    })
}

/// Plain-value evaluation of a spatial layer's aggregate for one centre.
/// Used as a reference by tests and by diagnostics.
pub fn aggregate_reference(
    store: &ParamStore,
    layer: &SpatialLayerParams,
    center: &[f64],
    neighbors: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dh = layer.head_dim();
    let mv = |w: ParamId, x: &[f64]| -> Vec<f64> {
        let w = store.get(w);
        (0..layer.d_out)
            .map(|j| (0..layer.d_in).map(|i| x[i] * w.get2(i, j)).sum())
            .collect()
    };
    let q = mv(layer.w_q, center);
    let keys: Vec<Vec<f64>> = neighbors.iter().map(|u| mv(layer.w_k, u)).collect();
    let vals: Vec<Vec<f64>> = neighbors.iter().map(|u| mv(layer.w_n, u)).collect();
    let mut out = mv(layer.w_s, center);
    let mut alphas = Vec::new();
    for h in 0..layer.heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        for i in r {
            out[i] += a.iter().zip(&vals).map(|(w, v)| w * v[i]).sum::<f64>();
        }
        alphas.push(a);
    }
    (alphas, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::spiking::LifParams;

    fn stack_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).expect("rectangular rows")
    }
    use crate::spiking::LifConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    fn setup(d_in: usize, d_out: usize, seed: u64) -> (ParamStore, SpatialLayerParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let l = SpatialLayerParams::init(&mut store, "l0", d_in, d_out, 4, &mut rng).unwrap();
        (store, l, rng)
    }

    fn run(
        store: &ParamStore,
        l: &SpatialLayerParams,
        center: &[Vec<f64>],
        neigh: &[Vec<Vec<f64>>],
    ) -> (Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let c = tape.constant(stack_rows(center));
        let flat: Vec<Vec<f64>> = neigh.iter().flatten().cloned().collect();
        let n = tape.constant(
            stack_rows(&flat)
                .reshaped(&[center.len(), neigh[0].len(), l.d_in])
                .unwrap(),
        );
        let a = attention_weights(&mut tape, &bound, l, c, n).unwrap();
        let h = aggregate(&mut tape, &bound, l, c, n, &a).unwrap();
        (
            a.iter().map(|&v| tape.value(v).clone()).collect(),
            tape.value(h).clone(),
        )
    }

    #[test]
    fn singleton_sample_gets_full_weight() {
        let (store, l, mut rng) = setup(3, 8, 1);
        let c = rand_rows(1, 3, &mut rng);
        let u = rand_rows(1, 3, &mut rng);
        let (a, h) = run(&store, &l, &c, &[u.clone()]);
        assert!(a.iter().all(|t| t.data() == [1.0]));
        let (_, reference) = aggregate_reference(&store, &l, &c[0], &u);
        for (x, y) in h.data().iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighbors_get_uniform_weight() {
        let (store, l, mut rng) = setup(3, 8, 2);
        let c = rand_rows(1, 3, &mut rng);
        let u = rand_rows(1, 3, &mut rng);
        let (a, _) = run(&store, &l, &c, &[vec![u[0].clone(); 5]]);
        for t in a {
            assert!(t.data().iter().all(|x| (x - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn two_neighbors_match_closed_form() {
        let (store, l, mut rng) = setup(3, 8, 3);
        let c = rand_rows(1, 3, &mut rng);
        let u = rand_rows(2, 3, &mut rng);
        let (a, _) = run(&store, &l, &c, &[u.clone()]);
        // Score gap per head from explicit dot products.
        let dh = l.head_dim();
        let proj = |w: ParamId, x: &[f64]| -> Vec<f64> {
            let w = store.get(w);
            (0..8).map(|j| (0..3).map(|i| x[i] * w.get2(i, j)).sum()).collect()
        };
        let q = proj(l.w_q, &c[0]);
        let k0 = proj(l.w_k, &u[0]);
        let k1 = proj(l.w_k, &u[1]);
        for h in 0..4 {
            let r = h * dh..(h + 1) * dh;
            let s0: f64 = r.clone().map(|i| q[i] * k0[i]).sum::<f64>() / (dh as f64).sqrt();
            let s1: f64 = r.map(|i| q[i] * k1[i]).sum::<f64>() / (dh as f64).sqrt();
            let g = s0 - s1;
            let want = [g.exp() / (g.exp() + 1.0), 1.0 / (g.exp() + 1.0)];
            for (x, y) in a[h].data().iter().zip(want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_neighbors_leave_self_transform() {
        let (store, l, mut rng) = setup(3, 8, 4);
        let c = rand_rows(2, 3, &mut rng);
        let (_, h) = run(&store, &l, &c, &[vec![vec![0.0; 3]; 3], vec![vec![0.0; 3]; 3]]);
        let ws = store.get(l.w_s);
        for r in 0..2 {
            for j in 0..8 {
                let want: f64 = (0..3).map(|i| c[r][i] * ws.get2(i, j)).sum();
                assert_eq!(h.get2(r, j), want);
            }
        }
    }

    #[test]
    fn random_case_matches_scalar_loops() {
        let (store, l, mut rng) = setup(5, 12, 5);
        let c = rand_rows(4, 5, &mut rng);
        let neigh: Vec<Vec<Vec<f64>>> = (0..4).map(|_| rand_rows(3, 5, &mut rng)).collect();
        let (a, h) = run(&store, &l, &c, &neigh);
        for r in 0..4 {
            let (alphas, reference) = aggregate_reference(&store, &l, &c[r], &neigh[r]);
            for (x, y) in h.row(r).iter().zip(&reference) {
                assert!((x - y).abs() < 1e-12);
            }
            for (head, want) in alphas.iter().enumerate() {
                let got = &a[head].data()[r * 3..r * 3 + 3];
                assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (x, y) in got.iter().zip(want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, l, mut rng) = setup(4, 8, 6);
        let c = rand_rows(1, 4, &mut rng);
        let u = rand_rows(4, 4, &mut rng);
        let mut shuffled = u.clone();
        shuffled.rotate_left(1);
        shuffled.swap(0, 2);
        let (_, h1) = run(&store, &l, &c, &[u]);
        let (_, h2) = run(&store, &l, &c, &[shuffled]);
        for (x, y) in h1.data().iter().zip(h2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        assert!(SpatialLayerParams::init(&mut store, "x", 3, 10, 4, &mut rng).is_err());
    }

    fn stack(seed: u64) -> (ParamStore, Vec<SpatialLayerParams>, Vec<LifParams>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut layers = Vec::new();
        let mut lif = Vec::new();
        for (k, (a, b)) in [(3, 8), (8, 4)].into_iter().enumerate() {
            layers.push(SpatialLayerParams::init(&mut store, &format!("s{k}"), a, b, 4, &mut rng).unwrap());
            lif.push(LifParams::init(&mut store, &format!("n{k}"), b, 1.0, 0.2, LifConfig::default()));
        }
        (store, layers, lif)
    }

    #[test]
    fn zero_input_gives_no_spikes() {
        let (store, layers, lif) = stack(7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut lifv = lif[0].prepare(&mut tape, &bound).unwrap();
        lifv.cfg.u_reset = 0.0;
        let v_th = tape.constant(Tensor::full(&[8], 1.0));
        lifv.v_th = v_th;
        let x = tape.constant(Tensor::zeros(&[6, 3]));
        let out = layer_forward(&mut tape, &bound, &layers[0], &lifv, x, 2, None).unwrap();
        assert!(tape.value(out.spikes).data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn two_layers_match_hand_unrolled_reference() {
        // Five nodes; target 0 samples (1, 2), and each of 0, 1, 2 samples
        // two more nodes at the first layer.
        let (store, layers, lif) = stack(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = rand_rows(5, 3, &mut rng);
        let targets1 = [0usize, 1, 2];
        let samples0 = [[1usize, 2], [0, 3], [4, 0]];
        let mut rows0: Vec<usize> = targets1.to_vec();
        for s in samples0 {
            rows0.extend(s);
        }
        let input: Vec<Vec<f64>> = rows0.iter().map(|&v| feats[v].clone()).collect();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(stack_rows(&input));
        let l0 = lif[0].prepare(&mut tape, &bound).unwrap();
        let l1 = lif[1].prepare(&mut tape, &bound).unwrap();
        let o1 = layer_forward(&mut tape, &bound, &layers[0], &l0, x, 2, None).unwrap();
        let o2 = layer_forward(&mut tape, &bound, &layers[1], &l1, o1.spikes, 2, None).unwrap();
        let got = tape.value(o2.spikes).clone();
        let got_u = tape.value(o2.membrane).clone();

        let project = |agg: Vec<f64>, l: &SpatialLayerParams| -> Vec<f64> {
            let w = store.get(l.w_o);
            (0..l.d_out).map(|j| (0..l.d_out).map(|i| agg[i] * w.get2(i, j)).sum()).collect()
        };
        let fire = |h: Vec<f64>, p: &LifParams| -> Vec<f64> {
            let tau = p.effective_tau(&store);
            let th = p.thresholds(&store);
            h.iter()
                .enumerate()
                .map(|(i, &x)| if x / tau[i] >= th[i] { 1.0 } else { 0.0 })
                .collect()
        };
        let mut level1 = Vec::new();
        for (i, &v) in targets1.iter().enumerate() {
            let nb: Vec<Vec<f64>> = samples0[i].iter().map(|&u| feats[u].clone()).collect();
            let (_, agg) = aggregate_reference(&store, &layers[0], &feats[v], &nb);
            level1.push(fire(project(agg, &layers[0]), &lif[0]));
        }
        let (_, agg) = aggregate_reference(&store, &layers[1], &level1[0], &level1[1..]);
        let h = project(agg, &layers[1]);
        let tau = lif[1].effective_tau(&store);
        for j in 0..4 {
            assert!((got_u.get2(0, j) - h[j] / tau[j]).abs() < 1e-12);
        }
        assert_eq!(got.row(0), fire(h, &lif[1]).as_slice());
    }

    #[test]
    fn dropout_mask_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(10_000, 0.7, &mut rng);
        assert!(m.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.3).abs() < 1e-12));
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        assert_eq!(dropout_mask(3, 0.0, &mut rng), vec![1.0; 3]);
    }
}
