//! The `otoc` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::annotate::{expand_clicks, load_labels, save_labels, simulate_clicks, PseudoLabel, PseudoLabels};
use crate::config::{Config, Variant};
use crate::error::{OtocError, Result};
use crate::features::extract_features;
use crate::metrics::Confusion;
use crate::nets::{load_checkpoint, save_checkpoint};
use crate::scene::load_scene;
use crate::selftrain::{
    infer_scene_scored, prepare_scenes, report_csv, run, run_fully_supervised, Models, PreparedScene, RunOptions,
};
use crate::supervoxel::{load_partition, partition_region_growing, save_partition, SuperVoxelPartition};
use crate::synth::{generate_corpus, CATEGORY_NAMES};

pub const UNARY_CHECKPOINT: &str = "unary.otnn";
pub const RELATION_CHECKPOINT: &str = "relation.otnn";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "otoc", version, about = "Point-cloud semantic segmentation from one click per object")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for clicks and training (synth: corpus seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus of synthetic rooms.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Over-segment a scene into super-voxels.
    Partition {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate clicks and expand them to initial super-voxel labels.
    Annotate {
        scene: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-training end to end.
    Train {
        /// Training scenes (files or directories of `.otoc`).
        #[arg(long, required = true, num_args = 1..)]
        train: Vec<PathBuf>,
        /// Evaluation scenes reported per iteration.
        #[arg(long, num_args = 1..)]
        eval: Vec<PathBuf>,
        /// Output directory for the report, checkpoints and final labels.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Evaluate with the classifier alone.
        #[arg(long)]
        no_propagation: bool,
        /// Train on complete ground truth instead of clicks.
        #[arg(long)]
        fully_supervised: bool,
        /// Write per-sweep marginals as CSV into this directory.
        #[arg(long)]
        dump_q: Option<PathBuf>,
    },
    /// Predict per-point categories for one scene.
    Infer {
        scene: PathBuf,
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Classifier only: no relation network, no graph propagation.
        #[arg(long)]
        no_propagation: bool,
    },
    /// Score predictions against a labeled scene.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Needed when `pred` holds one label per super-voxel.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Tabulate mIoU across training reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| OtocError::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scene_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|e| e == "otoc"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_prepared(paths: &[PathBuf], cfg: &Config) -> Result<Vec<PreparedScene>> {
    let scenes = paths.iter().map(load_scene).collect::<Result<Vec<_>>>()?;
    prepare_scenes(scenes, cfg.train.k_neighbors, &cfg.partition)
}

fn prepare_one(scene_path: &Path, partition: Option<&Path>, cfg: &Config) -> Result<PreparedScene> {
    let scene = load_scene(scene_path)?;
    let features = extract_features(&scene, cfg.train.k_neighbors)?;
    let part = match partition {
        Some(p) => load_partition(p, &scene)?,
        None => partition_region_growing(&scene, &features, &cfg.partition)?,
    };
    PreparedScene::new(scene, features, part)
}

fn category_name(c: usize) -> String {
    CATEGORY_NAMES.get(c).map_or_else(|| format!("category_{c}"), |n| n.to_string())
}

fn cmd_train(cli: &Cli, cfg: &mut Config, args: TrainArgs<'_>) -> Result<()> {
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    if let Some(k) = args.iterations {
        cfg.train.self_train_iterations = k;
    }
    let seed = cli.seed.unwrap_or(0);
    let train = load_prepared(&scene_paths(args.train)?, cfg)?;
    if train.is_empty() {
        return Err(OtocError::Validation("no training scenes found".into()));
    }
    let eval = load_prepared(&scene_paths(args.eval)?, cfg)?;
    let opts = RunOptions { no_propagation: args.no_propagation, dump_q: args.dump_q.cloned() };
    let state = if args.fully_supervised {
        run_fully_supervised(&cfg.train, &train, &eval, seed, &opts)?
    } else {
        run(cfg, &train, &eval, seed, &opts)?
    };
    fs::create_dir_all(args.out)?;
    fs::write(args.out.join(REPORT_FILE), report_csv(&state.log))?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let models = state.models.as_ref().expect("a finished run has models");
    save_checkpoint(&models.unary, None, args.out.join(UNARY_CHECKPOINT))?;
    if let Some((net, bank)) = &models.relation {
        save_checkpoint(net, Some(bank), args.out.join(RELATION_CHECKPOINT))?;
    }
    let label_dir = args.out.join("labels");
    fs::create_dir_all(&label_dir)?;
    for (i, l) in state.labels.iter().enumerate() {
        save_labels(l, label_dir.join(format!("scene_{i:04}.otpl")))?;
    }
    print!("{}", report_csv(&state.log));
    Ok(())
}

struct TrainArgs<'a> {
    train: &'a [PathBuf],
    eval: &'a [PathBuf],
    out: &'a Path,
    variant: Option<Variant>,
    iterations: Option<usize>,
    no_propagation: bool,
    fully_supervised: bool,
    dump_q: Option<&'a PathBuf>,
}

fn load_models(dir: &Path) -> Result<Models> {
    let (unary, _) = load_checkpoint(dir.join(UNARY_CHECKPOINT))?;
    let rel_path = dir.join(RELATION_CHECKPOINT);
    let relation = if rel_path.exists() {
        match load_checkpoint(&rel_path)? {
            (net, Some(bank)) => Some((net, bank)),
            (_, None) => return Err(OtocError::Format("relation checkpoint lacks its memory bank".into())),
        }
    } else {
        None
    };
    Ok(Models { unary, relation })
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out, count } => {
            let spec = match cli.seed {
                Some(s) => cfg.synth.with_seed(s),
                None => cfg.synth.clone(),
            };
            for p in generate_corpus(&spec, *count, out)? {
                println!("{}", p.display());
            }
        }
        Command::Partition { scene, out } => {
            let prepared = prepare_one(scene, None, &cfg)?;
            save_partition(&prepared.partition, out)?;
            println!("{} points, {} super-voxels", prepared.partition.num_points(), prepared.partition.num_supervoxels());
        }
        Command::Annotate { scene, partition, out } => {
            let scene = load_scene(scene)?;
            let part = load_partition(partition, &scene)?;
            let clicks = simulate_clicks(&scene, cli.seed.unwrap_or(0), cfg.clicks_per_thing, cfg.thing_fraction)?;
            let exp = expand_clicks(&clicks, &part)?;
            save_labels(&exp.labels, out)?;
            println!(
                "{} clicks, {} seeded super-voxels, {} conflicts",
                clicks.clicks.len(),
                exp.labels.labeled_count(),
                exp.conflicts
            );
        }
        Command::Train { train, eval, out, variant, iterations, no_propagation, fully_supervised, dump_q } => {
            let args = TrainArgs {
                train,
                eval,
                out,
                variant: *variant,
                iterations: *iterations,
                no_propagation: *no_propagation,
                fully_supervised: *fully_supervised,
                dump_q: dump_q.as_ref(),
            };
            cmd_train(cli, &mut cfg, args)?;
        }
        Command::Infer { scene, model, out, partition, no_propagation } => {
            let models = load_models(model)?;
            if models.relation.is_none() && cfg.train.variant == Variant::Full && !no_propagation {
                cfg.train.variant = Variant::Graph;
                log::warn!("no relation checkpoint; propagating without the relation network");
            }
            let prepared = prepare_one(scene, partition.as_deref(), &cfg)?;
            let pred = infer_scene_scored(&prepared, &models, &cfg.train, *no_propagation)?;
            let labels =
                PseudoLabels::from_entries(pred.into_iter().map(|(c, p)| PseudoLabel::propagated(c, p)).collect())?;
            save_labels(&labels, out)?;
        }
        Command::Eval { pred, gt, partition } => {
            let scene = load_scene(gt)?;
            let labels = load_labels(pred)?;
            let per_point: Vec<Option<u32>> = if labels.len() == scene.len() {
                labels.entries().iter().map(|e| e.label).collect()
            } else if let Some(p) = partition {
                let part: SuperVoxelPartition = load_partition(p, &scene)?;
                if labels.len() != part.num_supervoxels() {
                    return Err(OtocError::Validation("prediction length matches neither points nor super-voxels".into()));
                }
                part.assignment().iter().map(|&j| labels.label(j as usize)).collect()
            } else {
                return Err(OtocError::Validation(format!(
                    "{} predictions for {} points; pass --partition for super-voxel labels",
                    labels.len(),
                    scene.len()
                )));
            };
            // Unpredicted points count as misses: give them an impossible id.
            let c = scene.num_categories();
            let mut conf = Confusion::new(c + 1);
            let pred_ids: Vec<u32> = per_point.iter().map(|p| p.unwrap_or(c as u32)).collect();
            conf.add(&pred_ids, scene.semantic())?;
            let m = conf.metrics_over(c);
            println!("category,iou");
            for (k, iou) in m.iou.iter().enumerate() {
                match iou {
                    Some(v) => println!("{},{v:.6}", category_name(k)),
                    None => println!("{},", category_name(k)),
                }
            }
            println!("miou,{:.6}", m.miou);
        }
        Command::Report { reports } => {
            let mut rows = Vec::new();
            let mut width = 0;
            for p in reports {
                let text = fs::read_to_string(p)?;
                let mious = parse_report_mious(&text)?;
                width = width.max(mious.len());
                rows.push((p.display().to_string(), mious));
            }
            let mut header = String::from("run");
            for k in 0..width {
                header.push_str(&format!(",row{k}"));
            }
            println!("{header}");
            for (name, mious) in rows {
                let cells: Vec<String> = (0..width)
                    .map(|k| mious.get(k).copied().flatten().map(|v| format!("{v:.6}")).unwrap_or_default())
                    .collect();
                println!("{name},{}", cells.join(","));
            }
        }
    }
    Ok(())
}

fn parse_report_mious(text: &str) -> Result<Vec<Option<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(crate::selftrain::REPORT_HEADER) {
        return Err(OtocError::Format("not a training report".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cell = l.rsplit(',').next().unwrap_or("");
            if cell.is_empty() {
                Ok(None)
            } else {
                cell.parse().map(Some).map_err(|_| OtocError::Format(format!("bad mIoU cell {cell:?}")))
            }
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("otoc: {e}");
            e.exit_code()
        }
    }
}
