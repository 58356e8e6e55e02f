use std::fmt::Write as _;
use std::str::FromStr;

use crate::diff::{SpikeMode, SurrogateConfig};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::spiking::LifConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub contrastive_weight: f64,
    pub contrastive_temperature: f64,
    pub view_dropout: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    /// Probability that a neighbour slot is drawn from the cumulative graph.
    pub sample_p: f64,
    pub fanouts: Vec<usize>,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub temporal_heads: usize,
    pub max_steps: usize,
    pub causal: bool,
    pub alpha: f64,
    pub spike_mode: SpikeMode,
    pub tau_init: f64,
    pub v_th_init: f64,
    /// Inference batch size; 0 picks one from the graph size.
    pub eval_batch_size: usize,
    /// Train and evaluate on the last snapshot only.
    pub static_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 1024,
            epochs: 100,
            contrastive_weight: 0.1,
            contrastive_temperature: 0.5,
            view_dropout: 0.1,
            dropout: 0.7,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            sample_p: 0.5,
            fanouts: vec![5, 2],
            hidden: vec![128, 64],
            heads: 4,
            temporal_heads: 4,
            max_steps: 32,
            causal: false,
            alpha: 1.0,
            spike_mode: SpikeMode::Hard,
            tau_init: 1.0,
            v_th_init: 1.0,
            eval_batch_size: 0,
            static_only: false,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "epochs",
    "contrastive_weight",
    "contrastive_temperature",
    "view_dropout",
    "dropout",
    "clip_norm",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "patience",
    "sample_p",
    "fanouts",
    "hidden",
    "heads",
    "temporal_heads",
    "max_steps",
    "causal",
    "alpha",
    "spike_mode",
    "tau_init",
    "v_th_init",
    "eval_batch_size",
    "static",
    "seed",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v)).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one field by name. Hyphens and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "lr" => self.lr = num(k, value)?,
            "batch_size" => self.batch_size = num(k, value)?,
            "epochs" => self.epochs = num(k, value)?,
            "contrastive_weight" => self.contrastive_weight = num(k, value)?,
            "contrastive_temperature" => self.contrastive_temperature = num(k, value)?,
            "view_dropout" => self.view_dropout = num(k, value)?,
            "dropout" => self.dropout = num(k, value)?,
            "clip_norm" => self.clip_norm = num(k, value)?,
            "weight_decay" => self.weight_decay = num(k, value)?,
            "beta1" => self.beta1 = num(k, value)?,
            "beta2" => self.beta2 = num(k, value)?,
            "adam_eps" => self.adam_eps = num(k, value)?,
            "patience" => self.patience = num(k, value)?,
            "sample_p" => self.sample_p = num(k, value)?,
            "fanouts" => self.fanouts = list(k, value)?,
            "hidden" => self.hidden = list(k, value)?,
            "heads" => self.heads = num(k, value)?,
            "temporal_heads" => self.temporal_heads = num(k, value)?,
            "max_steps" => self.max_steps = num(k, value)?,
            "causal" => self.causal = flag(k, value)?,
            "alpha" => self.alpha = num(k, value)?,
            "spike_mode" => {
                self.spike_mode = match value.trim() {
                    "hard" => SpikeMode::Hard,
                    "soft" => SpikeMode::Soft,
                    other => return Err(Error::Config(format!("spike_mode: unknown mode {other:?}"))),
                }
            }
            "tau_init" => self.tau_init = num(k, value)?,
            "v_th_init" => self.v_th_init = num(k, value)?,
            "eval_batch_size" => self.eval_batch_size = num(k, value)?,
            "static" | "static_only" => self.static_only = flag(k, value)?,
            "seed" => self.seed = num(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Serialises every field; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.spike_mode {
            SpikeMode::Hard => "hard",
            SpikeMode::Soft => "soft",
        };
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "contrastive_weight = {:?}", self.contrastive_weight);
        let _ = writeln!(s, "contrastive_temperature = {:?}", self.contrastive_temperature);
        let _ = writeln!(s, "view_dropout = {:?}", self.view_dropout);
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "clip_norm = {:?}", self.clip_norm);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "adam_eps = {:?}", self.adam_eps);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "sample_p = {:?}", self.sample_p);
        let _ = writeln!(s, "fanouts = {}", join(&self.fanouts));
        let _ = writeln!(s, "hidden = {}", join(&self.hidden));
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "temporal_heads = {}", self.temporal_heads);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "causal = {}", self.causal);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "spike_mode = {mode}");
        let _ = writeln!(s, "tau_init = {:?}", self.tau_init);
        let _ = writeln!(s, "v_th_init = {:?}", self.v_th_init);
        let _ = writeln!(s, "eval_batch_size = {}", self.eval_batch_size);
        let _ = writeln!(s, "static = {}", self.static_only);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let pos = [
            ("lr", self.lr),
            ("contrastive_temperature", self.contrastive_temperature),
            ("clip_norm", self.clip_norm),
            ("alpha", self.alpha),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        let unit = [
            ("dropout", self.dropout),
            ("view_dropout", self.view_dropout),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (k, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.sample_p) {
            return bad(format!("sample_p must lie in [0, 1], got {}", self.sample_p));
        }
        if self.contrastive_weight < 0.0 || self.weight_decay < 0.0 {
            return bad("contrastive_weight and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == 0 {
            return bad("batch_size, epochs and max_steps must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.len() != self.fanouts.len() {
            return bad(format!(
                "hidden ({}) and fanouts ({}) need one entry per layer",
                join(&self.hidden),
                join(&self.fanouts)
            ));
        }
        if self.fanouts.contains(&0) {
            return bad("fan-outs must be positive".into());
        }
        if self.heads == 0 || self.hidden.iter().any(|d| *d == 0 || d % self.heads != 0) {
            return bad(format!("hidden widths must be positive multiples of heads = {}", self.heads));
        }
        let last = *self.hidden.last().expect("checked non-empty");
        if self.temporal_heads == 0 || !last.is_multiple_of(self.temporal_heads) {
            return bad(format!(
                "last hidden width {last} must be a multiple of temporal_heads = {}",
                self.temporal_heads
            ));
        }
        if self.tau_init <= 0.5 + crate::spiking::TAU_MARGIN {
            return bad(format!("tau_init must exceed 0.5, got {}", self.tau_init));
        }
        Ok(())
    }

    pub fn lif_config(&self) -> Result<LifConfig> {
        Ok(LifConfig {
            u_reset: 0.0,
            surrogate: SurrogateConfig::new(self.alpha)?,
            mode: self.spike_mode,
        })
    }

    pub fn model_dims(&self, d_in: usize, classes: usize) -> Result<ModelDims> {
        Ok(ModelDims {
            d_in,
            hidden: self.hidden.clone(),
            heads: self.heads,
            temporal_heads: self.temporal_heads,
            classes,
            max_steps: self.max_steps,
            causal: self.causal,
            tau_init: self.tau_init,
            v_th_init: self.v_th_init,
            lif: self.lif_config()?,
        })
    }

    /// Inference batch size for a graph of `num_nodes` nodes.
    pub fn inference_batch(&self, num_nodes: usize) -> usize {
        match self.eval_batch_size {
            0 if num_nodes > 1_000_000 => 10_000,
            0 => 200_000,
            b => b,
        }
    }
}
