use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::snapshots::{add_edges, SnapshotSequence};
use crate::error::{Error, Result};

/// Union of the edge sets strictly before `step` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeAdjacency {
    step: usize,
    neighbors: Vec<Vec<usize>>,
    directed: bool,
}

impl CumulativeAdjacency {
    /// History at step 1: nothing observed yet.
    pub fn empty(seq: &SnapshotSequence) -> Self {
        Self {
            step: 1,
            neighbors: vec![Vec::new(); seq.num_nodes()],
            directed: seq.directed(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Folds in the edges of the current step and moves to the next one.
    pub fn advance(&mut self, seq: &SnapshotSequence) -> Result<()> {
        if self.step > seq.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "cumulative graph already covers all {} steps",
                seq.num_steps()
            )));
        }
        add_edges(&mut self.neighbors, seq.edges(self.step - 1), self.directed);
        self.step += 1;
        Ok(())
    }
}

/// Cumulative adjacency at 1-based step `t`, `1 <= t <= T`.
pub fn build_cumulative(seq: &SnapshotSequence, t: usize) -> Result<CumulativeAdjacency> {
    if t == 0 || t > seq.num_steps() {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            seq.num_steps()
        )));
    }
    let mut cum = CumulativeAdjacency::empty(seq);
    while cum.step < t {
        cum.advance(seq)?;
    }
    Ok(cum)
}

/// Which graph a sampled neighbour came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Historical,
    Current,
    /// Neither graph had a neighbour; the slot holds the centre node.
    SelfLoop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSample {
    pub center: usize,
    pub ids: Vec<usize>,
    pub sources: Vec<Source>,
}

/// Draws `size` neighbours of `center`. Each slot picks the historical pool
/// with probability `p` and the current pool otherwise; an empty pool defers
/// to the other one and two empty pools yield the centre itself. Within a
/// pool, slots are filled without replacement while the pool is large enough.
pub fn sample_neighbors<R: Rng>(
    center: usize,
    historical: &[usize],
    current: &[usize],
    size: usize,
    p: f64,
    rng: &mut R,
) -> NeighborSample {
    let mut sources: Vec<Source> = (0..size)
        .map(|_| {
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                Source::Historical
            } else {
                Source::Current
            }
        })
        .collect();
    for s in &mut sources {
        *s = match (*s, historical.is_empty(), current.is_empty()) {
            (_, true, true) => Source::SelfLoop,
            (Source::Historical, true, false) => Source::Current,
            (Source::Current, false, true) => Source::Historical,
            (s, _, _) => s,
        };
    }
    let n_hist = sources.iter().filter(|s| **s == Source::Historical).count();
    let n_cur = sources.iter().filter(|s| **s == Source::Current).count();
    let mut hist = draw(historical, n_hist, rng).into_iter();
    let mut cur = draw(current, n_cur, rng).into_iter();
    let ids = sources
        .iter()
        .map(|s| match s {
            Source::Historical => hist.next().unwrap_or(center),
            Source::Current => cur.next().unwrap_or(center),
            Source::SelfLoop => center,
        })
        .collect();
    NeighborSample {
        center,
        ids,
        sources,
    }
}

fn draw<R: Rng>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k == 0 || pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= k {
        index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one `(node, step, layer)` draw. Keying the stream
/// on the draw itself makes samples independent of batch composition.
pub fn keyed_rng(seed: u64, pass: u64, step: usize, layer: usize, node: usize) -> ChaCha8Rng {
    let mut k = splitmix(seed);
    for part in [pass, step as u64, layer as u64, node as u64] {
        k = splitmix(k ^ part);
    }
    ChaCha8Rng::seed_from_u64(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::graph::Splits;

    fn seq_from(n: usize, edges: Vec<Vec<(usize, usize)>>) -> SnapshotSequence {
        let t = edges.len();
        SnapshotSequence::new(
            n,
            edges,
            vec![Tensor::zeros(&[n, 1]); t],
            vec![None; n],
            Splits::default(),
        )
        .unwrap()
    }

    #[test]
    fn cumulative_at_first_step_is_empty() {
        let seq = seq_from(3, vec![vec![(0, 1)], vec![(1, 2)], vec![]]);
        let c = build_cumulative(&seq, 1).unwrap();
        assert!((0..3).all(|v| c.neighbors(v).is_empty()));
        assert!(build_cumulative(&seq, 0).is_err());
        assert!(build_cumulative(&seq, 4).is_err());
    }

    #[test]
    fn cumulative_is_union_of_prior_steps() {
        let seq = seq_from(3, vec![vec![(0, 1)], vec![(1, 2)], vec![]]);
        let c = build_cumulative(&seq, 3).unwrap();
        assert_eq!(c.neighbors(0), &[1]);
        assert_eq!(c.neighbors(1), &[0, 2]);
        assert_eq!(c.neighbors(2), &[1]);
    }

    #[test]
    fn boundary_mixing_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_neighbors(0, &[1, 2], &[3], 5, 1.0, &mut rng);
        assert!(s.sources.iter().all(|x| *x == Source::Historical));
        let s = sample_neighbors(0, &[1, 2], &[3], 5, 0.0, &mut rng);
        assert!(s.sources.iter().all(|x| *x == Source::Current));
        assert!(s.ids.iter().all(|&x| x == 3));
    }

    #[test]
    fn isolated_node_samples_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_neighbors(7, &[], &[], 4, 0.5, &mut rng);
        assert_eq!(s.ids, vec![7; 4]);
        assert!(s.sources.iter().all(|x| *x == Source::SelfLoop));
    }

    #[test]
    fn empty_source_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_neighbors(0, &[], &[4, 5], 6, 1.0, &mut rng);
        assert!(s.sources.iter().all(|x| *x == Source::Current));
        assert!(s.ids.iter().all(|x| [4, 5].contains(x)));
    }

    #[test]
    fn large_pool_is_sampled_without_replacement() {
        let pool: Vec<usize> = (10..30).collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = sample_neighbors(0, &[], &pool, 5, 0.0, &mut rng).ids;
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
    }

    #[test]
    fn keyed_streams_are_reproducible() {
        let a: u64 = keyed_rng(1, 2, 3, 4, 5).random();
        let b: u64 = keyed_rng(1, 2, 3, 4, 5).random();
        let c: u64 = keyed_rng(1, 2, 3, 4, 6).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
