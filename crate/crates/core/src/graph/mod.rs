//! Snapshot storage, cumulative history and hybrid neighbour sampling.

mod sampling;
mod snapshots;

pub use sampling::{
    build_cumulative, keyed_rng, sample_neighbors, CumulativeAdjacency, NeighborSample, Source,
};
pub use snapshots::{
    load_snapshots, max_edge_step, parse_dataset, parse_edges, parse_features, parse_labels,
    parse_splits, FeatureTable, SnapshotSequence, Split, Splits,
};
