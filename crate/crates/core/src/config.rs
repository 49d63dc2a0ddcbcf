//! Run configuration and its flat `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every key names a field of [`TrainConfig`], [`PartitionParams`],
//! [`SynthSpec`] or the annotation settings. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{OtocError, Result};
use crate::graph::PairwiseParams;
use crate::rng::RNG_ALGORITHM;
use crate::supervoxel::PartitionParams;
use crate::synth::SynthSpec;

/// Which propagation machinery the self-training loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Pseudo labels from the classifier's own pooled confidence.
    Unary,
    /// Graph propagation without the relation network.
    Graph,
    /// Relation network, probability product and all four kernels.
    Full,
}

impl FromStr for Variant {
    type Err = OtocError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unary" => Ok(Variant::Unary),
            "graph" | "gp" => Ok(Variant::Graph),
            "full" => Ok(Variant::Full),
            _ => Err(OtocError::validation(format!("unknown variant {s:?} (unary | graph | full)"))),
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unary => "unary",
            Variant::Graph => "graph",
            Variant::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Relation embedding width.
    pub embed_dim: usize,
    /// Confidence gate for propagated pseudo labels.
    pub confidence_threshold: f64,
    /// Super-voxels sampled per category in every relation step.
    pub samples_per_category: usize,
    pub temperature: f64,
    pub bank_momentum: f64,
    pub pairwise: PairwiseParams,
    pub self_train_iterations: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Points drawn per unary epoch (all labeled points when fewer).
    pub samples_per_epoch: usize,
    pub relation_steps_per_epoch: usize,
    /// Member points sampled to form a super-voxel embedding while training.
    pub relation_points_per_sv: usize,
    pub unary_hidden: Vec<usize>,
    pub relation_hidden: Vec<usize>,
    pub mean_field_iterations: usize,
    pub k_neighbors: usize,
    pub variant: Variant,
    /// Continue from the previous iteration's networks instead of re-initializing.
    pub warm_start: bool,
    /// Stop once coverage changes by less than `early_stop_delta`.
    pub early_stop: bool,
    pub early_stop_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 32,
            confidence_threshold: 0.9,
            samples_per_category: 20,
            temperature: 0.07,
            bank_momentum: 0.9,
            pairwise: PairwiseParams::default(),
            self_train_iterations: 5,
            learning_rate: 1e-2,
            sgd_momentum: 0.9,
            epochs: 50,
            batch_size: 64,
            samples_per_epoch: 2048,
            relation_steps_per_epoch: 15,
            relation_points_per_sv: 8,
            unary_hidden: vec![64, 64],
            relation_hidden: vec![64],
            mean_field_iterations: 10,
            k_neighbors: 10,
            variant: Variant::Full,
            warm_start: false,
            early_stop: false,
            early_stop_delta: 0.005,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("samples_per_category", self.samples_per_category),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("samples_per_epoch", self.samples_per_epoch),
            ("relation_steps_per_epoch", self.relation_steps_per_epoch),
            ("relation_points_per_sv", self.relation_points_per_sv),
            ("mean_field_iterations", self.mean_field_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(OtocError::validation(format!("{name} must be positive")));
            }
        }
        if self.k_neighbors < 3 {
            return Err(OtocError::validation("k_neighbors must be at least 3"));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(OtocError::validation("confidence_threshold must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(OtocError::validation("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(OtocError::validation("bank_momentum must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(OtocError::validation("need learning_rate > 0 and sgd_momentum in [0, 1)"));
        }
        if self.unary_hidden.iter().chain(&self.relation_hidden).any(|&w| w == 0) {
            return Err(OtocError::validation("hidden widths must be positive"));
        }
        self.pairwise.validate()
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub partition: PartitionParams,
    pub synth: SynthSpec,
    pub clicks_per_thing: usize,
    pub thing_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            partition: PartitionParams::default(),
            synth: SynthSpec::default(),
            clicks_per_thing: 1,
            thing_fraction: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| OtocError::validation(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(OtocError::validation(format!("{key} expects two comma-separated numbers"))),
    }
}

fn parse_range(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(OtocError::validation(format!("{key} expects `min, max`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let p = &mut self.partition;
        let s = &mut self.synth;
        match key {
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "confidence_threshold" => t.confidence_threshold = parse(key, value)?,
            "samples_per_category" => t.samples_per_category = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "bank_momentum" => t.bank_momentum = parse(key, value)?,
            "lambda_c" => t.pairwise.lambda_c = parse(key, value)?,
            "lambda_p" => t.pairwise.lambda_p = parse(key, value)?,
            "lambda_u" => t.pairwise.lambda_u = parse(key, value)?,
            "lambda_f" => t.pairwise.lambda_f = parse(key, value)?,
            "sigma_c" => t.pairwise.sigma_c = parse(key, value)?,
            "sigma_p" => t.pairwise.sigma_p = parse(key, value)?,
            "sigma_u" => t.pairwise.sigma_u = parse(key, value)?,
            "sigma_f" => t.pairwise.sigma_f = parse(key, value)?,
            "graph_knn" => {
                let k: usize = parse(key, value)?;
                t.pairwise.knn = (k > 0).then_some(k);
            }
            "self_train_iterations" => t.self_train_iterations = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "sgd_momentum" => t.sgd_momentum = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "samples_per_epoch" => t.samples_per_epoch = parse(key, value)?,
            "relation_steps_per_epoch" => t.relation_steps_per_epoch = parse(key, value)?,
            "relation_points_per_sv" => t.relation_points_per_sv = parse(key, value)?,
            "unary_hidden" => t.unary_hidden = parse_list(key, value)?,
            "relation_hidden" => t.relation_hidden = parse_list(key, value)?,
            "mean_field_iterations" => t.mean_field_iterations = parse(key, value)?,
            "k_neighbors" => t.k_neighbors = parse(key, value)?,
            "variant" => t.variant = value.parse()?,
            "warm_start" => t.warm_start = parse(key, value)?,
            "early_stop" => t.early_stop = parse(key, value)?,
            "early_stop_delta" => t.early_stop_delta = parse(key, value)?,
            "partition_k_neighbors" => p.k_neighbors = parse(key, value)?,
            "normal_angle_max" => p.normal_angle_max = parse(key, value)?,
            "color_dist_max" => p.color_dist_max = parse(key, value)?,
            "min_size" => p.min_size = parse(key, value)?,
            "max_size" => p.max_size = parse(key, value)?,
            "synth_seed" => s.seed = parse(key, value)?,
            "num_categories" => s.num_categories = parse(key, value)?,
            "room_size_min" => s.room_size_min = parse_pair(key, value)?,
            "room_size_max" => s.room_size_max = parse_pair(key, value)?,
            "room_height" => s.room_height = parse(key, value)?,
            "point_density" => s.point_density = parse(key, value)?,
            "points_per_object" => s.points_per_object = parse_range(key, value)?,
            "walls" => s.walls = parse_range(key, value)?,
            "tables" => s.tables = parse_range(key, value)?,
            "chairs" => s.chairs = parse_range(key, value)?,
            "cabinets" => s.cabinets = parse_range(key, value)?,
            "clutter" => s.clutter = parse_range(key, value)?,
            "coord_noise" => s.coord_noise = parse(key, value)?,
            "color_noise" => s.color_noise = parse(key, value)?,
            "instance_color_sigma" => s.instance_color_sigma = parse(key, value)?,
            "patch_color_sigma" => s.patch_color_sigma = parse(key, value)?,
            "patch_size" => s.patch_size = parse(key, value)?,
            "clicks_per_thing" => self.clicks_per_thing = parse(key, value)?,
            "thing_fraction" => self.thing_fraction = parse(key, value)?,
            "rng" => {
                if value != RNG_ALGORITHM {
                    return Err(OtocError::validation(format!("only rng = {RNG_ALGORITHM} is supported")));
                }
            }
            _ => return Err(OtocError::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| OtocError::validation(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| OtocError::validation(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.partition.validate()?;
        self.synth.validate()?;
        if self.clicks_per_thing == 0 || !(self.thing_fraction > 0.0 && self.thing_fraction <= 1.0) {
            return Err(OtocError::validation("need clicks_per_thing >= 1 and thing_fraction in (0, 1]"));
        }
        Ok(())
    }

    /// Serializes every key; `parse_str(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let p = &self.partition;
        let s = &self.synth;
        let pw = &t.pairwise;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").unwrap();
        kv("rng", RNG_ALGORITHM.into());
        kv("embed_dim", t.embed_dim.to_string());
        kv("confidence_threshold", t.confidence_threshold.to_string());
        kv("samples_per_category", t.samples_per_category.to_string());
        kv("temperature", t.temperature.to_string());
        kv("bank_momentum", t.bank_momentum.to_string());
        kv("lambda_c", pw.lambda_c.to_string());
        kv("lambda_p", pw.lambda_p.to_string());
        kv("lambda_u", pw.lambda_u.to_string());
        kv("lambda_f", pw.lambda_f.to_string());
        kv("sigma_c", pw.sigma_c.to_string());
        kv("sigma_p", pw.sigma_p.to_string());
        kv("sigma_u", pw.sigma_u.to_string());
        kv("sigma_f", pw.sigma_f.to_string());
        kv("graph_knn", pw.knn.unwrap_or(0).to_string());
        kv("self_train_iterations", t.self_train_iterations.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("sgd_momentum", t.sgd_momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("samples_per_epoch", t.samples_per_epoch.to_string());
        kv("relation_steps_per_epoch", t.relation_steps_per_epoch.to_string());
        kv("relation_points_per_sv", t.relation_points_per_sv.to_string());
        kv("unary_hidden", join(&t.unary_hidden));
        kv("relation_hidden", join(&t.relation_hidden));
        kv("mean_field_iterations", t.mean_field_iterations.to_string());
        kv("k_neighbors", t.k_neighbors.to_string());
        kv("variant", t.variant.name().into());
        kv("warm_start", t.warm_start.to_string());
        kv("early_stop", t.early_stop.to_string());
        kv("early_stop_delta", t.early_stop_delta.to_string());
        kv("partition_k_neighbors", p.k_neighbors.to_string());
        kv("normal_angle_max", p.normal_angle_max.to_string());
        kv("color_dist_max", p.color_dist_max.to_string());
        kv("min_size", p.min_size.to_string());
        kv("max_size", p.max_size.to_string());
        kv("synth_seed", s.seed.to_string());
        kv("num_categories", s.num_categories.to_string());
        kv("room_size_min", format!("{},{}", s.room_size_min.0, s.room_size_min.1));
        kv("room_size_max", format!("{},{}", s.room_size_max.0, s.room_size_max.1));
        kv("room_height", s.room_height.to_string());
        kv("point_density", s.point_density.to_string());
        kv("points_per_object", format!("{},{}", s.points_per_object.0, s.points_per_object.1));
        kv("tables", format!("{},{}", s.tables.0, s.tables.1));
        kv("chairs", format!("{},{}", s.chairs.0, s.chairs.1));
        kv("cabinets", format!("{},{}", s.cabinets.0, s.cabinets.1));
        kv("walls", format!("{},{}", s.walls.0, s.walls.1));
        kv("clutter", format!("{},{}", s.clutter.0, s.clutter.1));
        kv("coord_noise", s.coord_noise.to_string());
        kv("color_noise", s.color_noise.to_string());
        kv("instance_color_sigma", s.instance_color_sigma.to_string());
        kv("patch_color_sigma", s.patch_color_sigma.to_string());
        kv("patch_size", s.patch_size.to_string());
        kv("clicks_per_thing", self.clicks_per_thing.to_string());
        kv("thing_fraction", self.thing_fraction.to_string());
        o
    }
}
