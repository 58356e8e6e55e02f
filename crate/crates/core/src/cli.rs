//! Command-line front end. `run` parses arguments and returns the process
//! exit code: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    firing_stats, firing_stats_tsv, importance_tsv, membrane_histogram, membrane_tsv, raster_tsv, temporal_importance,
};
use crate::datagen::{generate, GenConfig};
use crate::error::{Error, Result};
use crate::graph::{load_snapshots, SnapshotSequence};
use crate::model::{formula_estimate, ModelParams};
use crate::stability::{
    adjacency, complexity_estimate, default_grid, verify_boundedness, verify_contraction, verify_network_bound,
    wl_distinguishes, wl_separation_check, BoundConfig, Drive, ToyNet,
};
use crate::training::{
    macro_f1, micro_f1, predict, train, working_sequence, Checkpoint, GraphContext, TrainConfig, CONFIG_KEYS,
};

pub const REPORT_FILE: &str = "report.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "effective_config.txt";
pub const EVAL_FILE: &str = "eval.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";

#[derive(Parser, Debug)]
#[command(name = "spikegraph", version, about = "Spiking encoder for dynamic graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic planted-community dataset.
    Datagen(DatagenArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Spike, membrane and attention statistics of a trained model.
    Analyze(AnalyzeArgs),
    /// Run the stability and expressiveness checks.
    Verify(VerifyArgs),
    /// Report trainable parameter counts.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub p_intra: Option<f64>,
    #[arg(long)]
    pub p_inter: Option<f64>,
    #[arg(long)]
    pub switch_step: Option<usize>,
    #[arg(long)]
    pub migrate_frac: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Last snapshot only.
    #[arg(long = "static")]
    pub static_only: bool,
    /// Further `--key value` overrides of training settings.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// 0 follows the graph-size rule.
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 10)]
    pub raster_samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Full grid, 10^4 steps and 20 seeds.
    Default,
    /// Reduced sizes for smoke runs.
    Quick,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub grid: Grid,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the records to `<out>/verify.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub temporal_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub d_in: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub max_steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Datagen(a) => datagen(a).map_err(Failure::from),
        Command::Train(a) => {
            let cfg = train_config(&a)?;
            run_train(&a, &cfg).map_err(Failure::Runtime)
        }
        Command::Eval(a) => eval(a).map_err(Failure::Runtime),
        Command::Analyze(a) => analyze(a).map_err(Failure::Runtime),
        Command::Verify(a) => verify(a).map_err(Failure::Runtime),
        Command::Params(a) => params(a).map_err(Failure::from),
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(p, e))
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let mut c = GenConfig::default();
    macro_rules! take {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { c.$f = v; })*};
    }
    take!(seed, nodes, steps, classes, p_intra, p_inter, switch_step, migrate_frac, noise);
    c.validate().map_err(|e| Error::Config(e.to_string()))?;
    let g = generate(&c)?;
    g.write(&a.out)?;
    let text = format!(
        "nodes = {}\nsteps = {}\nclasses = {}\np_intra = {:?}\np_inter = {:?}\nswitch_step = {}\nmigrate_frac = {:?}\nnoise = {:?}\nseed = {}\n",
        c.nodes, c.steps, c.classes, c.p_intra, c.p_inter, c.switch_step, c.migrate_frac, c.noise, c.seed
    );
    write(&a.out, CONFIG_FILE, &text)?;
    println!("wrote {} nodes x {} steps to {}", c.nodes, c.steps, a.out.display());
    Ok(())
}

/// Splits `--key value` / `--key=value` tokens into pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {tok:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        let norm = key.replace('-', "_");
        if !CONFIG_KEYS.contains(&norm.as_str()) && norm != "static_only" {
            return Err(Error::Config(format!("unknown setting --{key}")));
        }
        out.push((norm, value));
    }
    Ok(out)
}

/// Defaults, then the config file, then flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in parse_overrides(&a.overrides)? {
        cfg.set(&k, &v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.static_only {
        cfg.static_only = true;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs, cfg: &TrainConfig) -> Result<()> {
    let seq = load_snapshots(&a.data)?;
    write(&a.out, CONFIG_FILE, &cfg.to_text())?;
    let out = train(&seq, cfg)?;
    write(&a.out, REPORT_FILE, &out.report.to_tsv())?;
    out.checkpoint.save(&a.out.join(CHECKPOINT_FILE))?;
    println!(
        "best epoch {} val macro-F1 {:.4}{}",
        out.report.best_epoch,
        out.report.best_val_f1,
        if out.report.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn split_nodes(seq: &SnapshotSequence, split: Split) -> Vec<usize> {
    let s = seq.splits();
    match split {
        Split::Train => s.train.clone(),
        Split::Val => s.val.clone(),
        Split::Test => s.test.clone(),
        Split::All => (0..seq.num_nodes()).collect(),
    }
}

fn load(data: &Path, checkpoint: &Path, seed: Option<u64>) -> Result<(SnapshotSequence, Checkpoint)> {
    let seq = load_snapshots(data)?;
    let mut ck = Checkpoint::load(checkpoint)?;
    if let Some(s) = seed {
        ck.config.seed = s;
    }
    if ck.d_in != seq.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects {} features, dataset has {}",
            ck.d_in,
            seq.feature_dim()
        )));
    }
    Ok((seq, ck))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (seq, ck) = load(&a.data, &a.checkpoint, a.seed)?;
    let mut cfg = ck.config.clone();
    if a.batch_size > 0 {
        cfg.eval_batch_size = a.batch_size;
    }
    write(&a.out, CONFIG_FILE, &cfg.to_text())?;
    let work = working_sequence(&seq, &cfg);
    let model = ck.model()?;
    let ctx = GraphContext::new(work.as_ref())?;
    let nodes = split_nodes(&seq, a.split);
    let pred = predict(&model, &ctx, &cfg, &nodes, cfg.inference_batch(seq.num_nodes()), false)?;
    let labelled: Vec<(usize, usize)> = nodes
        .iter()
        .zip(&pred.labels)
        .filter_map(|(&v, &p)| seq.label(v).map(|y| (y, p)))
        .collect();
    let truth: Vec<usize> = labelled.iter().map(|x| x.0).collect();
    let guess: Vec<usize> = labelled.iter().map(|x| x.1).collect();
    let (ma, mi) = (macro_f1(&truth, &guess), micro_f1(&truth, &guess));
    let split = format!("{:?}", a.split).to_lowercase();
    write(
        &a.out,
        EVAL_FILE,
        &format!("split\tnodes\tlabelled\tmacro_f1\tmicro_f1\n{split}\t{}\t{}\t{ma:.6}\t{mi:.6}\n", nodes.len(), truth.len()),
    )?;
    let mut preds = String::from("node\tpredicted\n");
    for (v, p) in nodes.iter().zip(&pred.labels) {
        let _ = writeln!(preds, "{v}\t{p}");
    }
    write(&a.out, PREDICTIONS_FILE, &preds)?;
    println!("{split}: macro-F1 {ma:.4} micro-F1 {mi:.4} over {} labelled nodes", truth.len());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (seq, ck) = load(&a.data, &a.checkpoint, a.seed)?;
    let cfg = ck.config.clone();
    write(&a.out, CONFIG_FILE, &cfg.to_text())?;
    let work = working_sequence(&seq, &cfg);
    let model = ck.model()?;
    let ctx = GraphContext::new(work.as_ref())?;
    let nodes = split_nodes(&seq, a.split);
    let pred = predict(&model, &ctx, &cfg, &nodes, cfg.inference_batch(seq.num_nodes()), true)?;
    let log = pred.spike_log.expect("requested");
    let fs = firing_stats(&log)?;
    write(&a.out, "firing_stats.tsv", &firing_stats_tsv(&fs))?;
    write(&a.out, "membrane_hist.tsv", &membrane_tsv(&membrane_histogram(&log, a.bins)?))?;
    write(&a.out, "temporal_importance.tsv", &importance_tsv(&temporal_importance(&pred.attention)?))?;
    write(&a.out, "raster.tsv", &raster_tsv(&log, a.raster_samples))?;
    for s in &fs {
        println!(
            "layer {}: mean rate {:.4}, silence ratio {:.4}",
            s.layer, s.mean_rate, s.silence_ratio
        );
    }
    Ok(())
}

/// One line of `verify` output.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

/// The stability and expressiveness suite behind `verify`.
pub fn verify_suite(grid: Grid, seed: u64) -> Result<Vec<CheckRecord>> {
    let (steps, seeds) = match grid {
        Grid::Default => (10_000, 20),
        Grid::Quick => (1_000, 3),
    };
    let mut out = Vec::new();
    let mut rec = |check: &str, pass: bool, detail: String| {
        out.push(CheckRecord {
            check: check.to_string(),
            pass,
            detail,
        })
    };

    for drive in [Drive::Uniform, Drive::ConstantMax] {
        let reports = verify_boundedness(&default_grid(steps), drive, seeds, seed)?;
        let worst = reports
            .iter()
            .map(|r| r.max_observed / r.bound)
            .fold(0.0, f64::max);
        let fails = reports.iter().filter(|r| !r.pass).count();
        rec(
            &format!("membrane_bound/{drive:?}"),
            fails == 0,
            format!("configs={} seeds={seeds} steps={steps} violations={fails} max_ratio={worst:.6}", reports.len()),
        );
    }
    let near = [BoundConfig {
        tau: 0.51,
        v_th: 1.0,
        m: 1.0,
        u_reset: 0.0,
        steps,
    }];
    let r = &verify_boundedness(&near, Drive::Uniform, seeds, seed)?[0];
    rec(
        "membrane_bound/near_boundary",
        r.pass,
        format!("tau=0.51 bound={:.6} max={:.6}", r.bound, r.max_observed),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ToyNet::random(20, 5, 0.5, (0.6, 5.0), (0.5, 2.0), &mut rng)?;
    let r = verify_network_bound(&net, 1.0, steps, &mut rng)?;
    rec(
        "network_bound",
        r.pass,
        format!("neurons=20 fan_in<=5 w_max=0.5 M={:.4} max_ratio={:.6} steps={steps}", r.m, r.max_ratio),
    );

    let (mut checked, mut passed, mut worst) = (0, 0, f64::NEG_INFINITY);
    while checked < 20 {
        let net = ToyNet::random(20, 5, 0.06, (1.0, 3.0), (0.5, 1.5), &mut rng)?;
        let r = verify_contraction(&net, 1.0, 30, 1.5, &mut rng)?;
        if !r.checked {
            continue;
        }
        checked += 1;
        passed += r.pass as usize;
        worst = worst.max(r.max_excess);
    }
    rec(
        "gradient_contraction",
        passed == checked,
        format!("nets={checked} horizon=30 passed={passed} max_excess={worst:.3e}"),
    );

    let star = adjacency(4, &[(0, 1), (0, 2), (0, 3)])?;
    let path = adjacency(4, &[(0, 1), (1, 2), (2, 3)])?;
    let triangles = adjacency(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)])?;
    let cycle = adjacency(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)])?;
    let (a, b) = (wl_distinguishes(&star, &path), wl_distinguishes(&triangles, &cycle));
    rec("wl_refinement", a && !b, format!("star_vs_path={a} triangles_vs_hexagon={b}"));
    let sep = wl_separation_check(&star, &path, &[0.5, 1.0, 2.0, 4.0], 8, &[8, 8], seed)?;
    rec("wl_separation", sep.separated(), format!("separating_gammas={:?}", sep.separating));

    let base = complexity_estimate(1000, 10, 5, 2, 64, 256)?;
    let twice = complexity_estimate(2000, 10, 5, 2, 64, 256)?;
    rec(
        "complexity_linear_in_nodes",
        twice.time_ops == 2 * base.time_ops,
        format!("time_ops={} memory={}", base.time_ops, base.memory_scalars),
    );
    Ok(out)
}

fn verify(a: VerifyArgs) -> Result<()> {
    let records = verify_suite(a.grid, a.seed)?;
    let mut tsv = String::from("check\tstatus\tdetail\n");
    for r in &records {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status} {} {}", r.check, r.detail);
        let _ = writeln!(tsv, "{}\t{status}\t{}", r.check, r.detail);
    }
    if let Some(dir) = &a.out {
        write(dir, "verify.tsv", &tsv)?;
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} check(s) failed")));
    }
    Ok(())
}

/// Text report of exact and formula parameter counts.
pub fn params_report(model: &ModelParams) -> String {
    let c = model.count_parameters();
    let k = model.dims.hidden.len();
    let d = model.dims.hidden[0];
    let mut s = String::new();
    let _ = writeln!(s, "exact\t{}", c.exact);
    let _ = writeln!(s, "estimate\t{}", c.estimate);
    let _ = writeln!(s, "ratio\t{:.4}", c.exact as f64 / c.estimate as f64);
    for (g, n) in &c.groups {
        let _ = writeln!(s, "group.{g}\t{n}");
    }
    let _ = writeln!(s, "term.spatial_4Kd2\t{}", 4 * k * d * d);
    let _ = writeln!(s, "term.temporal_2d2\t{}", 2 * d * d);
    let _ = writeln!(s, "term.bias_2d\t{}", 2 * d);
    debug_assert_eq!(formula_estimate(k, d), c.estimate);
    s
}

fn params(a: ParamsArgs) -> Result<()> {
    let mut cfg = TrainConfig {
        hidden: a.hidden,
        heads: a.heads,
        temporal_heads: a.temporal_heads,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dims = cfg.model_dims(a.d_in, a.classes).map_err(|e| Error::Config(e.to_string()))?;
    let model =
        ModelParams::new(dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(|e| Error::Config(e.to_string()))?;
    print!("{}", params_report(&model));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_parse() {
        let p = parse_overrides(&toks("--lr 0.5 --batch-size=16 --hidden 8,4")).unwrap();
        assert_eq!(
            p,
            vec![
                ("lr".into(), "0.5".into()),
                ("batch_size".into(), "16".into()),
                ("hidden".into(), "8,4".into())
            ]
        );
        assert!(parse_overrides(&toks("--bogus 1")).is_err());
        assert!(parse_overrides(&toks("--lr")).is_err());
        assert!(parse_overrides(&toks("lr 1")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["spikegraph", "frobnicate"]), 1);
        assert_eq!(run(["spikegraph"]), 1);
        assert_eq!(run(["spikegraph", "params", "--hidden", "16,8", "--heads", "4"]), 0);
        assert_eq!(run(["spikegraph", "params", "--hidden", "6", "--heads", "4"]), 1);
        assert_eq!(run(["spikegraph", "eval", "--data", "/nonexistent", "--checkpoint", "/x", "--out", "/tmp/x"]), 2);
    }

    #[test]
    fn quick_verify_passes() {
        assert!(verify_suite(Grid::Quick, 0).unwrap().iter().all(|r| r.pass));
    }
}
