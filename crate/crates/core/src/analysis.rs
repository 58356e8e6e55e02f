//! Spike statistics, membrane histograms and temporal attention importance,
//! exported as tab-separated tables.

use std::fmt::Write as _;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Spikes and pre-spike membrane values of one layer, indexed
/// `[sample][neuron][step]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerLog {
    pub neurons: usize,
    pub steps: usize,
    spikes: Vec<u8>,
    membrane: Vec<f64>,
}

impl LayerLog {
    pub fn new(neurons: usize, steps: usize) -> Self {
        Self {
            neurons,
            steps,
            spikes: Vec::new(),
            membrane: Vec::new(),
        }
    }

    /// Builds a log from per-step `B x neurons` tensors.
    pub fn from_steps(spikes: &[Tensor], membrane: &[Tensor]) -> Result<Self> {
        if spikes.is_empty() || spikes.len() != membrane.len() {
            return Err(Error::InvalidArgument("spike log needs matching non-empty steps".into()));
        }
        let (b, d) = (spikes[0].shape()[0], spikes[0].shape()[1]);
        let steps = spikes.len();
        let mut log = Self::new(d, steps);
        log.spikes = vec![0; b * d * steps];
        log.membrane = vec![0.0; b * d * steps];
        for (t, (s, m)) in spikes.iter().zip(membrane).enumerate() {
            if s.shape() != [b, d] || m.shape() != [b, d] {
                return Err(Error::shape("LayerLog::from_steps", format!("step {t}: {:?}", s.shape())));
            }
            for i in 0..b * d {
                let x = s.data()[i];
                if x != 0.0 && x != 1.0 {
                    return Err(Error::InvalidArgument(format!("non-binary spike value {x}")));
                }
                log.spikes[i * steps + t] = x as u8;
                log.membrane[i * steps + t] = m.data()[i];
            }
        }
        Ok(log)
    }

    pub fn samples(&self) -> usize {
        if self.neurons == 0 || self.steps == 0 {
            0
        } else {
            self.spikes.len() / (self.neurons * self.steps)
        }
    }

    pub fn spike(&self, sample: usize, neuron: usize, step: usize) -> u8 {
        self.spikes[(sample * self.neurons + neuron) * self.steps + step]
    }

    pub fn spikes(&self) -> &[u8] {
        &self.spikes
    }

    pub fn membrane(&self) -> &[f64] {
        &self.membrane
    }

    /// Appends the samples of `other`.
    pub fn extend(&mut self, other: &LayerLog) -> Result<()> {
        if self.spikes.is_empty() {
            self.neurons = other.neurons;
            self.steps = other.steps;
        } else if (self.neurons, self.steps) != (other.neurons, other.steps) {
            return Err(Error::shape(
                "LayerLog::extend",
                format!("{}x{} vs {}x{}", self.neurons, self.steps, other.neurons, other.steps),
            ));
        }
        self.spikes.extend_from_slice(&other.spikes);
        self.membrane.extend_from_slice(&other.membrane);
        Ok(())
    }

    /// Log from raw binary spikes and membrane values in `[sample][neuron][step]`
    /// order.
    pub fn from_raw(neurons: usize, steps: usize, spikes: Vec<u8>, membrane: Vec<f64>) -> Result<Self> {
        let cell = neurons * steps;
        if cell == 0 || !spikes.len().is_multiple_of(cell) || spikes.len() != membrane.len() {
            return Err(Error::shape("LayerLog::from_raw", format!("{} entries for {neurons}x{steps}", spikes.len())));
        }
        if spikes.iter().any(|&s| s > 1) {
            return Err(Error::InvalidArgument("spike entries must be 0 or 1".into()));
        }
        Ok(Self {
            neurons,
            steps,
            spikes,
            membrane,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeLog {
    pub layers: Vec<LayerLog>,
}

impl SpikeLog {
    pub fn extend(&mut self, other: &SpikeLog) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = vec![LayerLog::default(); other.layers.len()];
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("SpikeLog::extend", "layer count mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.extend(b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringStats {
    pub layer: usize,
    pub mean_rate: f64,
    pub silence_ratio: f64,
    /// Min, lower quartile, median, upper quartile and max of per-sample rates.
    pub rate_quartiles: [f64; 5],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn firing_stats(log: &SpikeLog) -> Result<Vec<FiringStats>> {
    let mut out = Vec::new();
    for (k, l) in log.layers.iter().enumerate() {
        let samples = l.samples();
        if samples == 0 {
            return Err(Error::InvalidArgument(format!("layer {k} has an empty spike log")));
        }
        let total: usize = l.spikes.iter().map(|&s| s as usize).sum();
        let mut silent = 0usize;
        let mut rates = Vec::with_capacity(samples);
        for s in 0..samples {
            let mut fired = 0usize;
            for n in 0..l.neurons {
                let base = (s * l.neurons + n) * l.steps;
                let c: usize = l.spikes[base..base + l.steps].iter().map(|&x| x as usize).sum();
                if c == 0 {
                    silent += 1;
                }
                fired += c;
            }
            rates.push(fired as f64 / (l.neurons * l.steps) as f64);
        }
        rates.sort_by(f64::total_cmp);
        out.push(FiringStats {
            layer: k + 1,
            mean_rate: total as f64 / l.spikes.len() as f64,
            silence_ratio: silent as f64 / (samples * l.neurons) as f64,
            rate_quartiles: [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&rates, q)),
        });
    }
    Ok(out)
}

/// Threshold below which a membrane value counts as near zero.
pub const NEAR_ZERO: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MembraneStats {
    pub layer: usize,
    /// `(lower edge, upper edge, count)` per bin.
    pub bins: Vec<(f64, f64, usize)>,
    pub mean: f64,
    pub std: f64,
    /// Percentage of values with `|u| < 0.01`.
    pub sparse_pct: f64,
}

pub fn membrane_histogram(log: &SpikeLog, bins: usize) -> Result<Vec<MembraneStats>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let mut out = Vec::new();
    for (k, l) in log.layers.iter().enumerate() {
        let v = &l.membrane;
        if v.is_empty() {
            return Err(Error::InvalidArgument(format!("layer {k} has no membrane values")));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for x in v {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let sparse = v.iter().filter(|x| x.abs() < NEAR_ZERO).count();
        out.push(MembraneStats {
            layer: k + 1,
            bins: counts
                .into_iter()
                .enumerate()
                .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
                .collect(),
            mean,
            std,
            sparse_pct: 100.0 * sparse as f64 / n,
        });
    }
    Ok(out)
}

/// Mean attention mass per key step, averaged over samples, heads and query
/// positions. `maps` holds one `B x T x T` tensor per head (possibly from
/// several batches).
pub fn temporal_importance(maps: &[Tensor]) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention maps".into()))?;
    let t = first.shape().get(2).copied().unwrap_or(0);
    if t == 0 {
        return Err(Error::shape("temporal_importance", format!("{:?}", first.shape())));
    }
    let mut acc = vec![0.0; t];
    let mut rows = 0usize;
    for m in maps {
        if m.ndim() != 3 || m.shape()[1] != t || m.shape()[2] != t {
            return Err(Error::shape("temporal_importance", format!("{:?} vs T = {t}", m.shape())));
        }
        for row in m.data().chunks(t) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
            rows += 1;
        }
    }
    Ok(acc.into_iter().map(|a| a / rows as f64).collect())
}

pub fn firing_stats_tsv(stats: &[FiringStats]) -> String {
    let mut s = String::from("layer\tmean_rate\tsilence_ratio\trate_min\trate_q1\trate_median\trate_q3\trate_max\n");
    for f in stats {
        let q = f.rate_quartiles;
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            f.layer, f.mean_rate, f.silence_ratio, q[0], q[1], q[2], q[3], q[4]
        );
    }
    s
}

pub fn membrane_tsv(stats: &[MembraneStats]) -> String {
    let mut s = String::from("layer\tbin_lo\tbin_hi\tcount\tmean\tstd\tsparse_pct\n");
    for m in stats {
        for (lo, hi, c) in &m.bins {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\t{:.4}",
                m.layer, lo, hi, c, m.mean, m.std, m.sparse_pct
            );
        }
    }
    s
}

pub fn importance_tsv(importance: &[f64]) -> String {
    let mut s = String::from("step\timportance\n");
    for (t, x) in importance.iter().enumerate() {
        let _ = writeln!(s, "{}\t{:.8}", t + 1, x);
    }
    s
}

/// One line per emitted spike for the first `max_samples` samples.
pub fn raster_tsv(log: &SpikeLog, max_samples: usize) -> String {
    let mut s = String::from("layer\tsample\tneuron\tstep\n");
    for (k, l) in log.layers.iter().enumerate() {
        for sample in 0..l.samples().min(max_samples) {
            for n in 0..l.neurons {
                for t in 0..l.steps {
                    if l.spike(sample, n, t) == 1 {
                        let _ = writeln!(s, "{}\t{sample}\t{n}\t{}", k + 1, t + 1);
                    }
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn log_of(spikes: Vec<u8>, membrane: Vec<f64>, neurons: usize, steps: usize) -> SpikeLog {
        SpikeLog {
            layers: vec![LayerLog::from_raw(neurons, steps, spikes, membrane).unwrap()],
        }
    }

    #[test]
    fn constant_logs() {
        let zero = log_of(vec![0; 24], vec![0.0; 24], 3, 4);
        let f = &firing_stats(&zero).unwrap()[0];
        assert_eq!((f.mean_rate, f.silence_ratio), (0.0, 1.0));
        let one = log_of(vec![1; 24], vec![0.0; 24], 3, 4);
        let f = &firing_stats(&one).unwrap()[0];
        assert_eq!((f.mean_rate, f.silence_ratio), (1.0, 0.0));
        assert!(firing_stats(&SpikeLog { layers: vec![LayerLog::default()] }).is_err());
    }

    #[test]
    fn bernoulli_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let s: Vec<u8> = (0..n).map(|_| rng.random_bool(0.1) as u8).collect();
        let f = &firing_stats(&log_of(s, vec![0.0; n], 10, 10)).unwrap()[0];
        assert!((f.mean_rate - 0.1).abs() < 0.01);
    }

    #[test]
    fn silence_counts_neuron_sample_pairs() {
        // Two samples, two neurons, two steps; only (sample 0, neuron 1) fires.
        let log = log_of(vec![0, 0, 0, 1, 0, 0, 0, 0], vec![0.0; 8], 2, 2);
        let f = &firing_stats(&log).unwrap()[0];
        assert_eq!(f.silence_ratio, 0.75);
        assert_eq!(f.mean_rate, 0.125);
        assert_eq!(f.rate_quartiles[4], 0.25);
        assert_eq!(f.rate_quartiles[0], 0.0);
    }

    #[test]
    fn stats_ignore_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (neurons, steps, samples) = (4, 3, 6);
        let cell = neurons * steps;
        let s: Vec<u8> = (0..cell * samples).map(|_| rng.random_bool(0.3) as u8).collect();
        let m: Vec<f64> = (0..cell * samples).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..samples).collect();
        order.reverse();
        order.swap(1, 4);
        let s2: Vec<u8> = order.iter().flat_map(|&i| s[i * cell..(i + 1) * cell].to_vec()).collect();
        let m2: Vec<f64> = order.iter().flat_map(|&i| m[i * cell..(i + 1) * cell].to_vec()).collect();
        let a = log_of(s, m, neurons, steps);
        let b = log_of(s2, m2, neurons, steps);
        assert_eq!(firing_stats(&a).unwrap(), firing_stats(&b).unwrap());
        let ha = membrane_histogram(&a, 5).unwrap();
        let hb = membrane_histogram(&b, 5).unwrap();
        assert_eq!(ha[0].bins, hb[0].bins);
    }

    #[test]
    fn membrane_delta_and_symmetry() {
        let h = membrane_histogram(&log_of(vec![0; 10], vec![0.0; 10], 5, 2), 4).unwrap();
        assert_eq!(h[0].sparse_pct, 100.0);
        assert_eq!(h[0].bins.iter().map(|b| b.2).sum::<usize>(), 10);
        let v: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let h = membrane_histogram(&log_of(vec![0; 10], v, 5, 2), 4).unwrap();
        assert_eq!(h[0].mean, 0.0);
        assert_eq!(h[0].bins[0].2, 5);
        assert_eq!(h[0].bins[3].2, 5);
        assert!(membrane_histogram(&log_of(vec![0; 10], vec![0.0; 10], 5, 2), 1).is_err());
    }

    #[test]
    fn membrane_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let g = Normal::new(0.3, 0.8).unwrap();
        let v: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let h = &membrane_histogram(&log_of(vec![0; n], v, 10, 10), 20).unwrap()[0];
        let se = 0.8 / (n as f64).sqrt();
        assert!((h.mean - 0.3).abs() < 3.0 * se);
        assert!((h.std - 0.8).abs() < 3.0 * 0.8 / (2.0 * n as f64).sqrt());
    }

    #[test]
    fn importance_cases() {
        let uniform = Tensor::full(&[2, 4, 4], 0.25);
        assert_eq!(temporal_importance(&[uniform.clone(), uniform]).unwrap(), vec![0.25; 4]);
        let mut onehot = Tensor::zeros(&[1, 4, 4]);
        for q in 0..4 {
            onehot.data_mut()[q * 4 + 1] = 1.0;
        }
        assert_eq!(temporal_importance(&[onehot]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn importance_matches_loop_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, t, heads) = (3, 5, 4);
        let maps: Vec<Tensor> = (0..heads)
            .map(|_| {
                let mut d = Vec::new();
                for _ in 0..b * t {
                    let row: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
                    let z: f64 = row.iter().sum();
                    d.extend(row.iter().map(|x| x / z));
                }
                Tensor::new(vec![b, t, t], d).unwrap()
            })
            .collect();
        let got = temporal_importance(&maps).unwrap();
        for k in 0..t {
            let mut s = 0.0;
            for m in &maps {
                for i in 0..b {
                    for q in 0..t {
                        s += m.data()[(i * t + q) * t + k];
                    }
                }
            }
            assert!((got[k] - s / (heads * b * t) as f64).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
