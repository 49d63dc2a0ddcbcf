//! Weakly supervised semantic segmentation of indoor point clouds from
//! sparse clicks: super-voxel partitioning, click simulation, a per-point
//! classifier plus a prototype-based relation network, graph propagation by
//! mean-field inference, and an iterative self-training loop.

pub mod annotate;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod graph;
pub mod knn;
pub mod mat;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod scene;
pub mod selftrain;
pub mod supervoxel;
pub mod synth;

pub use annotate::{expand_clicks, simulate_clicks, Click, ClickSet, Provenance, PseudoLabel, PseudoLabels};
pub use config::{Config, TrainConfig, Variant};
pub use error::{OtocError, Result};
pub use features::{extract_features, FeatureMatrix, FEATURE_DIM};
pub use graph::{build_graph, energy, map_labels, mean_field, MarginalField, PairwiseParams, SuperVoxelGraph};
pub use mat::Mat;
pub use metrics::{miou, Confusion, Metrics};
pub use selftrain::{run, run_fully_supervised, IterationReport, Models, PreparedScene, RunOptions, SelfTrainState};
pub use scene::{load_scene, save_scene, Scene};
pub use supervoxel::{partition_region_growing, PartitionParams, SuperVoxelPartition};
pub use synth::{generate_corpus, generate_scene, SynthSpec};
