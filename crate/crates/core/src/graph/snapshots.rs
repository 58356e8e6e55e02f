use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Split membership of a labelled node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Node ids per split, each list sorted ascending.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Discrete-time dynamic graph over a fixed node set.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    num_nodes: usize,
    /// Per step, sorted and deduplicated `(u, v)` pairs.
    edges: Vec<Vec<(usize, usize)>>,
    /// Per step, `N x d` features.
    features: Vec<Tensor>,
    labels: Vec<Option<usize>>,
    splits: Splits,
    directed: bool,
}

/// Parsed feature file: either one block per step or a single static block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub num_nodes: usize,
    pub dim: usize,
    pub blocks: Vec<Tensor>,
    pub is_static: bool,
}

impl SnapshotSequence {
    /// Validates and assembles a sequence. Edges are sorted and deduplicated;
    /// features are taken as given (see [`SnapshotSequence::standardize`]).
    pub fn new(
        num_nodes: usize,
        mut edges: Vec<Vec<(usize, usize)>>,
        features: Vec<Tensor>,
        labels: Vec<Option<usize>>,
        splits: Splits,
    ) -> Result<Self> {
        if edges.len() != features.len() || edges.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} edge steps vs {} feature steps",
                edges.len(),
                features.len()
            )));
        }
        let dim = features[0].last_dim();
        for (t, f) in features.iter().enumerate() {
            if f.shape() != [num_nodes, dim] {
                return Err(Error::InvalidArgument(format!(
                    "features at step {t} have shape {:?}, expected [{num_nodes}, {dim}]",
                    f.shape()
                )));
            }
        }
        for (t, es) in edges.iter_mut().enumerate() {
            if let Some(&(u, v)) = es.iter().find(|(u, v)| *u >= num_nodes || *v >= num_nodes) {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u}, {v}) at step {t} outside [0, {num_nodes})"
                )));
            }
            es.sort_unstable();
            es.dedup();
        }
        if labels.len() != num_nodes {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        let all = splits.train.iter().chain(&splits.val).chain(&splits.test);
        if let Some(v) = all.clone().find(|&&v| v >= num_nodes) {
            return Err(Error::InvalidArgument(format!("split node {v} out of range")));
        }
        if let Some(v) = all.clone().find(|&&v| labels[v].is_none()) {
            return Err(Error::InvalidArgument(format!("split node {v} has no label")));
        }
        Ok(Self {
            num_nodes,
            edges,
            features,
            labels,
            splits,
            directed: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_steps(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].last_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |c| c + 1)
    }

    /// Edges of step `t` (0-based).
    pub fn edges(&self, t: usize) -> &[(usize, usize)] {
        &self.edges[t]
    }

    pub fn features(&self, t: usize) -> &Tensor {
        &self.features[t]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, v: usize) -> Option<usize> {
        self.labels[v]
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn splits_mut(&mut self) -> &mut Splits {
        &mut self.splits
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// Edges are looked up in both directions unless the graph is directed.
    pub fn set_directed(&mut self, directed: bool) {
        self.directed = directed;
    }

    /// Neighbour lists of step `t`, sorted and deduplicated.
    pub fn adjacency(&self, t: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        add_edges(&mut adj, &self.edges[t], self.directed);
        adj
    }

    /// Zero-mean, unit-variance columns, statistics pooled over every step and
    /// node. Zero-variance columns are divided by one.
    pub fn standardize(&mut self) {
        let dim = self.feature_dim();
        let rows = (self.num_steps() * self.num_nodes) as f64;
        let mut mean = vec![0.0; dim];
        for f in &self.features {
            for (i, v) in f.data().iter().enumerate() {
                mean[i % dim] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; dim];
        for f in &self.features {
            for (i, v) in f.data().iter().enumerate() {
                let d = v - mean[i % dim];
                var[i % dim] += d * d;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / rows).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for f in &mut self.features {
            for (i, v) in f.data_mut().iter_mut().enumerate() {
                *v = (*v - mean[i % dim]) / std[i % dim];
            }
        }
    }

    /// The final snapshot alone, as a one-step sequence.
    pub fn last_snapshot(&self) -> Self {
        let t = self.num_steps() - 1;
        Self {
            num_nodes: self.num_nodes,
            edges: vec![self.edges[t].clone()],
            features: vec![self.features[t].clone()],
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            directed: self.directed,
        }
    }
}

pub(crate) fn add_edges(adj: &mut [Vec<usize>], edges: &[(usize, usize)], directed: bool) {
    for &(u, v) in edges {
        insert_sorted(&mut adj[u], v);
        if !directed {
            insert_sorted(&mut adj[v], u);
        }
    }
}

fn insert_sorted(list: &mut Vec<usize>, x: usize) {
    if let Err(pos) = list.binary_search(&x) {
        list.insert(pos, x);
    }
}

fn load_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-blank, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_usize(file: &str, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| load_err(file, line, format!("bad {what} {field:?}")))
}

/// Parses `edges.tsv`: `t<TAB>u<TAB>v` per line. Returns one edge list per
/// step, sorted and deduplicated.
pub fn parse_edges(text: &str, num_nodes: usize, num_steps: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    const FILE: &str = "edges.tsv";
    let mut edges = vec![Vec::new(); num_steps];
    for (ln, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(load_err(FILE, ln, format!("expected 3 fields, got {}", fields.len())));
        }
        let t = parse_usize(FILE, ln, fields[0], "timestep")?;
        let u = parse_usize(FILE, ln, fields[1], "node id")?;
        let v = parse_usize(FILE, ln, fields[2], "node id")?;
        if t >= num_steps {
            return Err(load_err(FILE, ln, format!("unknown timestep {t} (T = {num_steps})")));
        }
        if u >= num_nodes || v >= num_nodes {
            return Err(load_err(
                FILE,
                ln,
                format!("node id out of range in ({u}, {v}), N = {num_nodes}"),
            ));
        }
        edges[t].push((u, v));
    }
    for es in &mut edges {
        es.sort_unstable();
        es.dedup();
    }
    Ok(edges)
}

/// Largest timestep mentioned in an edge file, if any. Lines that do not parse
/// are skipped; [`parse_edges`] reports them.
pub fn max_edge_step(text: &str) -> Option<usize> {
    content_lines(text)
        .filter_map(|(_, l)| l.split_whitespace().next()?.parse::<usize>().ok())
        .max()
}

/// Parses `features.tsv`. The header is `T<TAB>N<TAB>d` followed by `T`
/// blocks of `N` rows, or `static<TAB>N<TAB>d` followed by a single block
/// shared by every step.
pub fn parse_features(text: &str) -> Result<FeatureTable> {
    const FILE: &str = "features.tsv";
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| load_err(FILE, 1, "missing header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(load_err(FILE, hl, "header must be `T N d` or `static N d`"));
    }
    let is_static = h[0] == "static";
    let steps = if is_static {
        1
    } else {
        parse_usize(FILE, hl, h[0], "step count")?
    };
    let n = parse_usize(FILE, hl, h[1], "node count")?;
    let d = parse_usize(FILE, hl, h[2], "feature dim")?;
    if steps == 0 || n == 0 || d == 0 {
        return Err(load_err(FILE, hl, "counts in header must be positive"));
    }
    let rows_needed = steps
        .checked_mul(n)
        .filter(|r| r.checked_mul(d).is_some_and(|c| c <= MAX_FEATURE_VALUES))
        .ok_or_else(|| load_err(FILE, hl, "feature table too large"))?;
    let mut data = Vec::with_capacity(rows_needed * d);
    let mut rows = 0;
    let mut last_line = hl;
    for (ln, line) in lines {
        last_line = ln;
        if rows == rows_needed {
            return Err(load_err(FILE, ln, "more feature rows than the header declares"));
        }
        let before = data.len();
        for field in line.split_whitespace() {
            let v: f64 = field
                .parse()
                .map_err(|_| load_err(FILE, ln, format!("bad value {field:?}")))?;
            if !v.is_finite() {
                return Err(load_err(FILE, ln, "non-finite feature value"));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(load_err(
                FILE,
                ln,
                format!("ragged row: expected {d} values, got {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != rows_needed {
        return Err(load_err(
            FILE,
            last_line,
            format!("expected {rows_needed} feature rows, got {rows}"),
        ));
    }
    let blocks = data
        .chunks(n * d)
        .map(|c| Tensor::new(vec![n, d], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureTable {
        num_nodes: n,
        dim: d,
        blocks,
        is_static,
    })
}

const MAX_FEATURE_VALUES: usize = 1 << 28;

/// Parses `labels.tsv`: `node<TAB>class`.
pub fn parse_labels(text: &str, num_nodes: usize) -> Result<Vec<Option<usize>>> {
    const FILE: &str = "labels.tsv";
    let mut labels = vec![None; num_nodes];
    for (ln, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(load_err(FILE, ln, format!("expected 2 fields, got {}", fields.len())));
        }
        let v = parse_usize(FILE, ln, fields[0], "node id")?;
        let c = parse_usize(FILE, ln, fields[1], "class")?;
        if v >= num_nodes {
            return Err(load_err(FILE, ln, format!("node id {v} out of range, N = {num_nodes}")));
        }
        if c > MAX_CLASS {
            return Err(load_err(FILE, ln, format!("class id {c} too large")));
        }
        labels[v] = Some(c);
    }
    Ok(labels)
}

const MAX_CLASS: usize = 1 << 16;

/// Parses `splits.tsv`: `node<TAB>{train|val|test}`. A node listed twice
/// keeps its last assignment.
pub fn parse_splits(text: &str, num_nodes: usize) -> Result<Splits> {
    const FILE: &str = "splits.tsv";
    let mut assign: BTreeMap<usize, Split> = BTreeMap::new();
    for (ln, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(load_err(FILE, ln, format!("expected 2 fields, got {}", fields.len())));
        }
        let v = parse_usize(FILE, ln, fields[0], "node id")?;
        if v >= num_nodes {
            return Err(load_err(FILE, ln, format!("node id {v} out of range, N = {num_nodes}")));
        }
        let s = match fields[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(load_err(FILE, ln, format!("unknown split {other:?}"))),
        };
        assign.insert(v, s);
    }
    let mut splits = Splits::default();
    for (v, s) in assign {
        match s {
            Split::Train => splits.train.push(v),
            Split::Val => splits.val.push(v),
            Split::Test => splits.test.push(v),
        }
    }
    Ok(splits)
}

/// Assembles a sequence from the four file bodies, then standardizes features.
pub fn parse_dataset(
    edges_text: &str,
    features_text: &str,
    labels_text: &str,
    splits_text: &str,
) -> Result<SnapshotSequence> {
    let table = parse_features(features_text)?;
    let steps = if table.is_static {
        max_edge_step(edges_text).map_or(1, |t| t + 1)
    } else {
        table.blocks.len()
    };
    if steps > MAX_STEPS {
        return Err(load_err("edges.tsv", 0, format!("{steps} timesteps exceeds limit")));
    }
    let edges = parse_edges(edges_text, table.num_nodes, steps)?;
    let labels = parse_labels(labels_text, table.num_nodes)?;
    let splits = parse_splits(splits_text, table.num_nodes)?;
    for v in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if labels[*v].is_none() {
            return Err(load_err("splits.tsv", 0, format!("node {v} has a split but no label")));
        }
    }
    let features = if table.is_static {
        vec![table.blocks[0].clone(); steps]
    } else {
        table.blocks
    };
    let mut seq = SnapshotSequence::new(table.num_nodes, edges, features, labels, splits)?;
    seq.standardize();
    Ok(seq)
}

const MAX_STEPS: usize = 1 << 16;

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

/// Loads `edges.tsv`, `features.tsv`, `labels.tsv` and `splits.tsv` from `dir`.
pub fn load_snapshots(dir: &Path) -> Result<SnapshotSequence> {
    parse_dataset(
        &read(dir, "edges.tsv")?,
        &read(dir, "features.tsv")?,
        &read(dir, "labels.tsv")?,
        &read(dir, "splits.tsv")?,
    )
}
