//! Executable checks of the neuron-level stability results, a 1-WL colour
//! refinement oracle, and closed-form cost accounting.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{SurrogateConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{xavier_uniform, ModelParams, ParamStore};
use crate::spiking::{lif_step, lif_update, reset_state, tau_raw_for, LifConfig, LifParams, LifState};

/// Slack allowed on analytic bounds for floating-point rounding.
pub const BOUND_TOL: f64 = 1e-12;
/// Time constant of the neurons in the separation encoder.
const SEPARATION_TAU: f64 = 2.0;
/// Slack allowed on the gradient envelope.
pub const ENVELOPE_TOL: f64 = 1e-9;

/// Uniform bound on the membrane potential of a LIF neuron driven by inputs
/// with `|h| <= m`:
/// `max{V_th, |u_r| + (m + |u_r|) / (tau (1 - |1 - 1/tau|))}`.
pub fn membrane_bound(tau: f64, v_th: f64, m: f64, u_reset: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.5 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("membrane bound needs tau > 0.5, got {tau}")));
    }
    if m.is_nan() || m < 0.0 || !m.is_finite() {
        return Err(Error::InvalidArgument(format!("input bound must be non-negative, got {m}")));
    }
    let lambda = (1.0 - 1.0 / tau).abs();
    let sub = u_reset.abs() + (m + u_reset.abs()) / (tau * (1.0 - lambda));
    Ok(v_th.max(sub))
}

/// Input stream fed to a neuron under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drive {
    /// i.i.d. `Uniform[-M, M]`.
    Uniform,
    /// `+M` at every step.
    ConstantMax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    pub tau: f64,
    pub v_th: f64,
    pub m: f64,
    pub u_reset: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub config: BoundConfig,
    pub drive: Drive,
    pub seeds: usize,
    pub bound: f64,
    /// Largest pre-reset `|u|` seen over all seeds and steps.
    pub max_observed: f64,
    pub pass: bool,
}

/// The `{0.6, 1, 2, 5} x {0.5, 1, 5} x {0.5, 1, 2}` grid over (tau, M, V_th).
pub fn default_grid(steps: usize) -> Vec<BoundConfig> {
    let mut grid = Vec::new();
    for tau in [0.6, 1.0, 2.0, 5.0] {
        for m in [0.5, 1.0, 5.0] {
            for v_th in [0.5, 1.0, 2.0] {
                grid.push(BoundConfig {
                    tau,
                    v_th,
                    m,
                    u_reset: 0.0,
                    steps,
                });
            }
        }
    }
    grid
}

/// Simulates every grid point for `seeds` independent streams and compares
/// the largest potential against [`membrane_bound`].
pub fn verify_boundedness(grid: &[BoundConfig], drive: Drive, seeds: usize, base_seed: u64) -> Result<Vec<BoundReport>> {
    let mut out = Vec::with_capacity(grid.len());
    for (g, c) in grid.iter().enumerate() {
        let bound = membrane_bound(c.tau, c.v_th, c.m, c.u_reset)?;
        let mut max_observed = 0.0f64;
        for s in 0..seeds.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ ((g as u64) << 32) ^ s as u64);
            let mut u = c.u_reset;
            for _ in 0..c.steps {
                let h = match drive {
                    Drive::Uniform => {
                        if c.m > 0.0 {
                            rng.random_range(-c.m..=c.m)
                        } else {
                            0.0
                        }
                    }
                    Drive::ConstantMax => c.m,
                };
                let (pre, _, post) = lif_update(u, h, c.tau, c.v_th, c.u_reset);
                max_observed = max_observed.max(pre.abs());
                u = post;
            }
        }
        out.push(BoundReport {
            config: *c,
            drive,
            seeds: seeds.max(1),
            bound,
            max_observed,
            pass: max_observed <= bound + BOUND_TOL,
        });
    }
    Ok(out)
}

/// Recurrent toy spiking network, `h_w(t) = sum_v W[w][v] s_v(t-1) + x_w(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    /// `weights[post][pre]`.
    pub weights: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub v_th: Vec<f64>,
    pub u_reset: f64,
}

impl ToyNet {
    /// `n` neurons with `fan_in` random presynaptic partners each and weights
    /// in `[-w_max, w_max]`; tau and V_th drawn uniformly from the given ranges.
    pub fn random<R: Rng>(
        n: usize,
        fan_in: usize,
        w_max: f64,
        tau: (f64, f64),
        v_th: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 || fan_in > n {
            return Err(Error::InvalidArgument(format!("fan-in {fan_in} with {n} neurons")));
        }
        if !(tau.0 > 0.5 && tau.1 >= tau.0) {
            return Err(Error::InvalidArgument(format!("tau range {tau:?} must lie above 0.5")));
        }
        let mut weights = vec![vec![0.0; n]; n];
        let mut pool: Vec<usize> = (0..n).collect();
        for row in weights.iter_mut() {
            pool.shuffle(rng);
            for &v in &pool[..fan_in] {
                row[v] = if w_max > 0.0 { rng.random_range(-w_max..=w_max) } else { 0.0 };
            }
        }
        let draw = |r: (f64, f64), rng: &mut R| if r.1 > r.0 { rng.random_range(r.0..=r.1) } else { r.0 };
        let tau = (0..n).map(|_| draw(tau, rng)).collect();
        let v_th = (0..n).map(|_| draw(v_th, rng)).collect();
        Ok(Self {
            weights,
            tau,
            v_th,
            u_reset: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn max_fan_in(&self) -> usize {
        self.weights.iter().map(|r| r.iter().filter(|w| **w != 0.0).count()).max().unwrap_or(0)
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().flatten().fold(0.0, |a, w| a.max(w.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBoundReport {
    /// Input bound `S * W_max + M_ext` fed to the single-neuron bound.
    pub m: f64,
    pub max_ratio: f64,
    pub worst_neuron: usize,
    pub steps: usize,
    pub pass: bool,
}

/// Runs `net` for `steps` steps under external drive `|x| <= m_ext` and checks
/// every neuron against its bound with `M = S W_max + M_ext`.
pub fn verify_network_bound<R: Rng>(net: &ToyNet, m_ext: f64, steps: usize, rng: &mut R) -> Result<NetworkBoundReport> {
    let n = net.len();
    let m = net.max_fan_in() as f64 * net.max_abs_weight() + m_ext;
    let bounds = (0..n)
        .map(|i| membrane_bound(net.tau[i], net.v_th[i], m, net.u_reset))
        .collect::<Result<Vec<_>>>()?;
    let mut u = vec![net.u_reset; n];
    let mut spikes = vec![false; n];
    let mut worst = (0.0f64, 0usize);
    let mut pass = true;
    for _ in 0..steps {
        let mut next = vec![false; n];
        for i in 0..n {
            let rec: f64 = net.weights[i].iter().zip(&spikes).filter(|(_, &s)| s).map(|(w, _)| w).sum();
            let x = if m_ext > 0.0 { rng.random_range(-m_ext..=m_ext) } else { 0.0 };
            let (pre, fired, post) = lif_update(u[i], rec + x, net.tau[i], net.v_th[i], net.u_reset);
            if pre.abs() > bounds[i] + BOUND_TOL {
                pass = false;
            }
            let ratio = pre.abs() / bounds[i];
            if ratio > worst.0 {
                worst = (ratio, i);
            }
            u[i] = post;
            next[i] = fired;
        }
        spikes = next;
    }
    Ok(NetworkBoundReport {
        m,
        max_ratio: worst.0,
        worst_neuron: worst.1,
        steps,
        pass,
    })
}

/// `rho = max_i |1 - 1/tau_i| + alpha * max_w sum_v |W[w][v]|`, with `W[w]`
/// the incoming weights of neuron `w`.
pub fn contraction_factor(tau: &[f64], alpha: f64, weights: &[Vec<f64>]) -> Result<f64> {
    if let Some(t) = tau.iter().find(|&&t| t.is_nan() || t <= 0.5) {
        return Err(Error::InvalidArgument(format!("tau {t} outside (0.5, inf)")));
    }
    let lambda = tau.iter().map(|t| (1.0 - 1.0 / t).abs()).fold(0.0, f64::max);
    let w = weights
        .iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(lambda + alpha * w)
}

/// Contraction factor of every spatial layer of a model, taking the output
/// projection feeding each LIF population as `W`. A diagnostic only: the
/// encoder has no recurrent weights.
pub fn model_contraction_factors(model: &ModelParams) -> Result<Vec<f64>> {
    let alpha = model.dims.lif.surrogate.alpha();
    model
        .spatial
        .iter()
        .zip(&model.lif)
        .map(|(layer, lif)| {
            let w = model.store.get(layer.w_o);
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let incoming: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| w.get2(r, c)).collect()).collect();
            contraction_factor(&lif.effective_tau(&model.store), alpha, &incoming)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    pub lambda_max: f64,
    pub alpha: f64,
    pub weight_sum_max: f64,
    pub rho: f64,
    /// `||Delta(t)||_1` for `t = 0..=t'`.
    pub grad_norms: Vec<f64>,
    /// `||Delta(t)||_1 / ||Delta(t+1)||_1`; zero when both vanish.
    pub ratios: Vec<f64>,
    /// Worst `||Delta(t)||_1 - rho^(t'-t) ||Delta(t')||_1` over all lags.
    pub max_excess: f64,
    /// False when `rho >= 1` and the envelope was not checked.
    pub checked: bool,
    pub pass: bool,
}

/// Backpropagates a random linear loss on the potentials at `horizon` through
/// the recurrent net on the tape and compares every `||dL/du(t)||_1` with the
/// geometric envelope `rho^(horizon - t) ||dL/du(horizon)||_1`.
///
/// Requires every `tau >= 1`, where the input gain `1/tau` is at most one.
pub fn verify_contraction<R: Rng>(net: &ToyNet, alpha: f64, horizon: usize, drive: f64, rng: &mut R) -> Result<ContractionReport> {
    if let Some(t) = net.tau.iter().find(|&&t| t < 1.0) {
        return Err(Error::InvalidArgument(format!("contraction check needs tau >= 1, got {t}")));
    }
    let n = net.len();
    let surrogate = SurrogateConfig::new(alpha)?;
    let cfg = LifConfig {
        u_reset: net.u_reset,
        surrogate,
        ..LifConfig::default()
    };
    let mut store = ParamStore::default();
    let lif = LifParams::init(&mut store, "toy", n, 1.0, 1.0, cfg);
    store.set(lif.tau_raw, Tensor::vector(net.tau.iter().map(|&t| tau_raw_for(t)).collect()))?;
    store.set(lif.v_th, Tensor::vector(net.v_th.clone()))?;
    let taus = lif.effective_tau(&store);
    let rho = contraction_factor(&taus, alpha, &net.weights)?;
    let lambda_max = taus.iter().map(|t| (1.0 - 1.0 / t).abs()).fold(0.0, f64::max);
    let weight_sum_max = (rho - lambda_max) / alpha;

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vars = lif.prepare(&mut tape, &bound)?;
    // h = s W^T, so the matrix on the tape is W transposed.
    let wt = Tensor::matrix(n, n, (0..n * n).map(|k| net.weights[k % n][k / n]).collect())?;
    let wt = tape.constant(wt);
    let mut state: LifState = reset_state(&mut tape, 1, n)?;
    let mut spikes = tape.constant(Tensor::zeros(&[1, n]));
    let mut membranes = Vec::with_capacity(horizon + 1);
    for _ in 0..=horizon {
        let rec = tape.matmul(spikes, wt)?;
        let x = tape.constant(Tensor::matrix(1, n, (0..n).map(|_| rng.random_range(0.0..=drive.max(0.0))).collect())?);
        let h = tape.add(rec, x)?;
        let step = lif_step(&mut tape, state, h, &vars)?;
        membranes.push(step.membrane);
        spikes = step.spikes;
        state = step.state;
    }
    let c = tape.constant(Tensor::matrix(1, n, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())?);
    let last = *membranes.last().expect("horizon + 1 steps");
    let weighted = tape.mul(last, c)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;
    let grad_norms: Vec<f64> = membranes
        .iter()
        .map(|&m| grads.get(m).data().iter().map(|g| g.abs()).sum())
        .collect();
    let ratios: Vec<f64> = grad_norms
        .windows(2)
        .map(|w| if w[1] == 0.0 { if w[0] == 0.0 { 0.0 } else { f64::INFINITY } } else { w[0] / w[1] })
        .collect();
    let top = grad_norms[horizon];
    let max_excess = grad_norms
        .iter()
        .enumerate()
        .map(|(t, &g)| g - rho.powi((horizon - t) as i32) * top)
        .fold(f64::NEG_INFINITY, f64::max);
    let checked = rho < 1.0;
    let pass = !checked || (max_excess <= ENVELOPE_TOL && ratios.iter().all(|&r| r <= rho + ENVELOPE_TOL));
    Ok(ContractionReport {
        lambda_max,
        alpha,
        weight_sum_max,
        rho,
        grad_norms,
        ratios,
        max_excess,
        checked,
        pass,
    })
}

/// Sorted `(colour, count)` pairs.
pub type Histogram = Vec<(u64, usize)>;

/// Undirected adjacency lists from an edge list; self loops and duplicates
/// are dropped.
pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::InvalidArgument(format!("edge ({u}, {v}) outside {n} nodes")));
        }
        if u != v {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    Ok(adj)
}

/// Per-node colours after each of `rounds` rounds of 1-WL refinement
/// (entry 0 is the uniform start). Colours are hashes, so they are
/// comparable across graphs.
pub fn wl_colors(adj: &[Vec<usize>], rounds: usize) -> Vec<Vec<u64>> {
    let mut colors = vec![vec![0u64; adj.len()]];
    for _ in 0..rounds {
        let prev = colors.last().expect("non-empty");
        let next = adj
            .iter()
            .enumerate()
            .map(|(v, nb)| {
                let mut m: Vec<u64> = nb.iter().map(|&u| prev[u]).collect();
                m.sort_unstable();
                let mut h = DefaultHasher::new();
                prev[v].hash(&mut h);
                m.hash(&mut h);
                h.finish()
            })
            .collect();
        colors.push(next);
    }
    colors
}

/// Colour histogram per refinement round.
pub fn wl_refinement(adj: &[Vec<usize>], rounds: usize) -> Vec<Histogram> {
    wl_colors(adj, rounds)
        .iter()
        .map(|c| {
            let mut counts = BTreeMap::new();
            for &x in c {
                *counts.entry(x).or_insert(0usize) += 1;
            }
            counts.into_iter().collect()
        })
        .collect()
}

/// Whether 1-WL tells the graphs apart within `max(|a|, |b|)` rounds.
pub fn wl_distinguishes(a: &[Vec<usize>], b: &[Vec<usize>]) -> bool {
    let rounds = a.len().max(b.len());
    wl_refinement(a, rounds) != wl_refinement(b, rounds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    /// Input scales at which the spike statistics differ.
    pub separating: Vec<f64>,
    pub tested: Vec<f64>,
}

impl SeparationReport {
    pub fn separated(&self) -> bool {
        !self.separating.is_empty()
    }
}

/// Spike counts of a sum-aggregation spiking encoder with constant node
/// features `gamma * 1`, run for `steps` steps with the membrane carried
/// across steps. One row per node, the counts of every layer concatenated.
pub fn sum_encoder_counts(adj: &[Vec<usize>], weights: &[(Tensor, Tensor)], gamma: f64, steps: usize) -> Vec<Vec<u32>> {
    let n = adj.len();
    let d0 = weights.first().map_or(0, |w| w.0.shape()[0]);
    let mut x = vec![vec![gamma; d0]; n];
    let mut counts = vec![Vec::new(); n];
    for (w_self, w_nb) in weights {
        let d_out = w_self.shape()[1];
        let lin = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d_out).map(|j| v.iter().enumerate().map(|(i, &a)| a * w.get2(i, j)).sum()).collect()
        };
        let h: Vec<Vec<f64>> = (0..n)
            .map(|v| {
                let mut agg = vec![0.0; x[v].len()];
                for &u in &adj[v] {
                    for (a, b) in agg.iter_mut().zip(&x[u]) {
                        *a += b;
                    }
                }
                lin(w_self, &x[v]).iter().zip(lin(w_nb, &agg)).map(|(a, b)| a + b).collect()
            })
            .collect();
        let mut layer_counts = vec![vec![0u32; d_out]; n];
        for v in 0..n {
            let mut u = vec![0.0; d_out];
            for _ in 0..steps {
                for j in 0..d_out {
                    let (_, fired, post) = lif_update(u[j], h[v][j], SEPARATION_TAU, 1.0, 0.0);
                    layer_counts[v][j] += fired as u32;
                    u[j] = post;
                }
            }
        }
        x = layer_counts
            .iter()
            .map(|c| c.iter().map(|&k| k as f64 / steps.max(1) as f64).collect())
            .collect();
        for (all, c) in counts.iter_mut().zip(layer_counts) {
            all.extend(c);
        }
    }
    counts
}

/// Empirical witness that a randomly initialised sum-aggregation spiking
/// encoder maps two 1-WL-distinguishable graphs to different multisets of
/// node spike counts. Fails the precondition when 1-WL cannot tell them apart.
pub fn wl_separation_check(
    a: &[Vec<usize>],
    b: &[Vec<usize>],
    gammas: &[f64],
    steps: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<SeparationReport> {
    if !wl_distinguishes(a, b) {
        return Err(Error::InvalidArgument(
            "graphs are not distinguished by 1-WL; separation check does not apply".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![1usize];
    dims.extend_from_slice(hidden);
    let weights: Vec<(Tensor, Tensor)> = dims
        .windows(2)
        .map(|w| (xavier_uniform(w[0], w[1], &mut rng), xavier_uniform(w[0], w[1], &mut rng)))
        .collect();
    let stats = |adj: &[Vec<usize>], g: f64| {
        let mut c = sum_encoder_counts(adj, &weights, g, steps);
        c.sort();
        c
    };
    let separating = gammas.iter().copied().filter(|&g| stats(a, g) != stats(b, g)).collect();
    Ok(SeparationReport {
        separating,
        tested: gammas.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityEstimate {
    /// `N S K d^2 T + N d^2 T^2`.
    pub time_ops: u128,
    /// `B T d + B S K d`.
    pub memory_scalars: u128,
}

pub fn complexity_estimate(n: usize, t: usize, s: usize, k: usize, d: usize, b: usize) -> Result<ComplexityEstimate> {
    if [n, t, s, k, d, b].contains(&0) {
        return Err(Error::InvalidArgument("complexity estimate needs positive sizes".into()));
    }
    let [n, t, s, k, d, b] = [n, t, s, k, d, b].map(|x| x as u128);
    Ok(ComplexityEstimate {
        time_ops: n * s * k * d * d * t + n * d * d * t * t,
        memory_scalars: b * t * d + b * s * k * d,
    })
}
