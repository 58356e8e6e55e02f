//! Parameter storage and the full encoder-classifier parameter set.

mod params;

pub use params::{gaussian, xavier_uniform, Bound, ParamId, ParamStore};

use rand::Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::spatial::SpatialLayerParams;
use crate::spiking::{LifConfig, LifParams};
use crate::temporal::{PositionalEncoding, TransformerBlockParams};

/// Shape of a model, independent of any particular graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub temporal_heads: usize,
    pub classes: usize,
    pub max_steps: usize,
    pub causal: bool,
    pub tau_init: f64,
    pub v_th_init: f64,
    pub lif: LifConfig,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub spatial: Vec<SpatialLayerParams>,
    pub lif: Vec<LifParams>,
    pub pos: PositionalEncoding,
    pub block: TransformerBlockParams,
    pub w_c: ParamId,
    pub b_c: ParamId,
}

impl ModelParams {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.hidden.is_empty() || dims.classes < 2 || dims.max_steps == 0 || dims.d_in == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid model shape: {} hidden layers, {} classes, {} steps, input width {}",
                dims.hidden.len(),
                dims.classes,
                dims.max_steps,
                dims.d_in
            )));
        }
        let mut store = ParamStore::default();
        let mut spatial = Vec::new();
        let mut lif = Vec::new();
        let mut prev = dims.d_in;
        for (k, &d) in dims.hidden.iter().enumerate() {
            spatial.push(SpatialLayerParams::init(
                &mut store,
                &format!("spatial{k}"),
                prev,
                d,
                dims.heads,
                rng,
            )?);
            lif.push(LifParams::init(
                &mut store,
                &format!("lif{k}"),
                d,
                dims.tau_init,
                dims.v_th_init,
                dims.lif,
            ));
            prev = d;
        }
        let pos = PositionalEncoding::init(&mut store, dims.max_steps, prev, rng);
        let block = TransformerBlockParams::init(&mut store, prev, dims.temporal_heads, dims.causal, rng)?;
        let w_c = store.add("classifier.w", xavier_uniform(prev, dims.classes, rng));
        let b_c = store.add("classifier.b", Tensor::zeros(&[dims.classes]));
        Ok(Self {
            store,
            dims,
            spatial,
            lif,
            pos,
            block,
            w_c,
            b_c,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        *self.dims.hidden.last().expect("non-empty by construction")
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += t.numel(),
                None => groups.push((group, t.numel())),
            }
        }
        let d = self.dims.hidden[0];
        ParamCount {
            exact: self.store.num_scalars(),
            estimate: formula_estimate(self.dims.hidden.len(), d),
            groups,
        }
    }
}

/// `4 K d^2 + 2 d^2 + 2 d`.
pub fn formula_estimate(layers: usize, d: usize) -> usize {
    4 * layers * d * d + 2 * d * d + 2 * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub exact: usize,
    pub estimate: usize,
    /// Exact counts per top-level group, in construction order.
    pub groups: Vec<(String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dims(d_in: usize, hidden: Vec<usize>) -> ModelDims {
        ModelDims {
            d_in,
            hidden,
            heads: 4,
            temporal_heads: 4,
            classes: 4,
            max_steps: 32,
            causal: false,
            tau_init: 1.0,
            v_th_init: 1.0,
            lif: LifConfig::default(),
        }
    }

    #[test]
    fn formula_at_reference_scale() {
        assert_eq!(formula_estimate(2, 128), 164_096);
    }

    #[test]
    fn exact_count_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelParams::new(dims(4, vec![128, 64]), &mut rng).unwrap();
        let l1 = 4 * 4 * 128 + 128 * 128 + 2 * 128;
        let l2 = 4 * 128 * 64 + 64 * 64 + 2 * 64;
        let temporal = 4 * 64 * 64 + 4 * 64 + 2 * 64 + 64 * 128 + 128 + 128 * 64 + 64;
        let pos = 32 * 64;
        let cls = 64 * 4 + 4;
        let c = m.count_parameters();
        assert_eq!(c.exact, l1 + l2 + temporal + pos + cls);
        assert_eq!(c.groups.iter().map(|g| g.1).sum::<usize>(), c.exact);
        assert!(c.exact * 2 >= c.estimate && c.exact <= 2 * c.estimate);
    }

    #[test]
    fn doubling_width_roughly_quadruples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ModelParams::new(dims(4, vec![128, 64]), &mut rng).unwrap();
        let b = ModelParams::new(dims(4, vec![256, 128]), &mut rng).unwrap();
        let r = b.count_parameters().exact as f64 / a.count_parameters().exact as f64;
        assert!(r > 3.5 && r < 4.5, "{r}");
    }
}
