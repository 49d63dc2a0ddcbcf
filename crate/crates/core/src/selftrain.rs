//! The self-training loop: train on the current pseudo labels, propagate
//! over the super-voxel graph, keep confident predictions, repeat.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;

use crate::annotate::{expand_clicks, simulate_clicks, Provenance, PseudoLabel, PseudoLabels};
use crate::config::{Config, TrainConfig, Variant};
use crate::error::{OtocError, Result};
use crate::features::{extract_features, FeatureMatrix};
use crate::graph::{build_graph, map_labels, mean_field_trace, write_marginals_csv, MarginalField};
use crate::mat::Mat;
use crate::metrics::{Confusion, Metrics};
use crate::nets::{
    combine_probs, point_targets, predict_unary, relation_embeddings, relation_probs, train_classifier,
    train_relation_multi, MemoryBank, Mlp, RelationScene,
};
use crate::rng::{self, stream};
use crate::scene::Scene;
use crate::supervoxel::{partition_region_growing, pool_distribution, PartitionParams, SuperVoxelPartition};

/// A scene with its per-point descriptors and super-voxel partition.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub features: FeatureMatrix,
    pub partition: SuperVoxelPartition,
}

impl PreparedScene {
    pub fn new(scene: Scene, features: FeatureMatrix, partition: SuperVoxelPartition) -> Result<Self> {
        if features.rows() != scene.len() || partition.num_points() != scene.len() {
            return Err(OtocError::validation("features or partition do not belong to the scene"));
        }
        Ok(PreparedScene { scene, features, partition })
    }

    pub fn prepare(scene: Scene, k_neighbors: usize, params: &PartitionParams) -> Result<Self> {
        let features = extract_features(&scene, k_neighbors)?;
        let partition = partition_region_growing(&scene, &features, params)?;
        Ok(PreparedScene { scene, features, partition })
    }

    /// Majority ground-truth category per super-voxel (lowest id on ties);
    /// super-voxels without labeled points stay absent.
    pub fn majority_labels(&self) -> PseudoLabels {
        let c = self.scene.num_categories();
        let entries = self
            .partition
            .member_lists()
            .iter()
            .map(|members| {
                let mut votes = vec![0usize; c];
                for &i in members {
                    if let Some(g) = self.scene.semantic()[i as usize] {
                        votes[g as usize] += 1;
                    }
                }
                let best = (0..c).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a)));
                match best {
                    Some(b) if votes[b] > 0 => PseudoLabel::seed(b as u32),
                    _ => PseudoLabel::ABSENT,
                }
            })
            .collect();
        PseudoLabels::from_entries(entries).expect("majority labels are valid")
    }
}

pub fn prepare_scenes(scenes: Vec<Scene>, k_neighbors: usize, params: &PartitionParams) -> Result<Vec<PreparedScene>> {
    scenes.into_par_iter().map(|s| PreparedScene::prepare(s, k_neighbors, params)).collect()
}

/// Trained networks of one iteration.
#[derive(Debug, Clone)]
pub struct Models {
    pub unary: Mlp,
    pub relation: Option<(Mlp, MemoryBank)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    /// Fraction of labeled super-voxels over all training scenes after the update.
    pub coverage: f64,
    pub train_loss_unary: Option<f64>,
    pub train_loss_relation: Option<f64>,
    pub miou: Option<f64>,
}

pub const REPORT_HEADER: &str = "iteration,coverage,train_loss_unary,train_loss_relation,miou";

pub fn report_csv(log: &[IterationReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in log {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.iteration,
            r.coverage,
            opt(r.train_loss_unary),
            opt(r.train_loss_relation),
            opt(r.miou)
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct SelfTrainState {
    /// Completed iterations.
    pub iteration: usize,
    /// Click expansions; never modified.
    pub seeds: Vec<PseudoLabels>,
    /// Current pseudo labels per training scene.
    pub labels: Vec<PseudoLabels>,
    pub models: Option<Models>,
    pub log: Vec<IterationReport>,
}

impl SelfTrainState {
    pub fn from_seeds(seeds: Vec<PseudoLabels>) -> Self {
        SelfTrainState { iteration: 0, labels: seeds.clone(), seeds, models: None, log: Vec::new() }
    }

    pub fn coverage(&self) -> f64 {
        coverage(&self.labels)
    }
}

/// Labeled fraction over the union of all scenes' super-voxels.
pub fn coverage(labels: &[PseudoLabels]) -> f64 {
    let total: usize = labels.iter().map(PseudoLabels::len).sum();
    if total == 0 {
        return 0.0;
    }
    labels.iter().map(PseudoLabels::labeled_count).sum::<usize>() as f64 / total as f64
}

/// Seeds stay; every other super-voxel takes its argmax when the marginal
/// reaches `threshold`, else becomes absent.
pub fn update_pseudo_labels(q: &MarginalField, threshold: f64, seeds: &PseudoLabels) -> Result<PseudoLabels> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(OtocError::validation("threshold must lie in (0, 1]"));
    }
    if q.num_nodes() != seeds.len() {
        return Err(OtocError::validation("marginals and seeds disagree on super-voxel count"));
    }
    let entries = map_labels(q)
        .into_iter()
        .enumerate()
        .map(|(j, (c, conf))| {
            let s = seeds.get(j);
            if s.provenance == Provenance::Seed {
                s
            } else if conf >= threshold {
                PseudoLabel::propagated(c, conf)
            } else {
                PseudoLabel::ABSENT
            }
        })
        .collect();
    PseudoLabels::from_entries(entries)
}

fn num_categories(scenes: &[PreparedScene]) -> Result<usize> {
    let c = scenes.first().ok_or_else(|| OtocError::validation("no scenes"))?.scene.num_categories();
    if scenes.iter().any(|s| s.scene.num_categories() != c) {
        return Err(OtocError::validation("scenes disagree on the number of categories"));
    }
    Ok(c)
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    rng::derive(seed, stream::ITERATION, iteration as u64).next_u64()
}

struct Trained {
    models: Models,
    loss_unary: f64,
    loss_relation: Option<f64>,
}

/// Trains the classifier on per-point targets and, for the full variant, the
/// relation network on super-voxel labels.
fn train_models(
    scenes: &[PreparedScene],
    targets: &[Vec<Option<u32>>],
    labels: &[PseudoLabels],
    cfg: &TrainConfig,
    seed: u64,
    init: Option<&Models>,
) -> Result<Trained> {
    let c = num_categories(scenes)?;
    let init = if cfg.warm_start { init } else { None };
    let data: Vec<(&FeatureMatrix, &[Option<u32>])> =
        scenes.iter().zip(targets).map(|(s, t)| (&s.features, t.as_slice())).collect();
    let unary = train_classifier(&data, c, cfg, seed, init.map(|m| m.unary.clone()))?;
    let (relation, loss_relation) = if cfg.variant == Variant::Full {
        let rel: Vec<RelationScene<'_>> = scenes
            .iter()
            .zip(labels)
            .map(|(s, l)| RelationScene { features: &s.features, partition: &s.partition, labels: l })
            .collect();
        let (net, bank) = match init.and_then(|m| m.relation.clone()) {
            Some((net, bank)) if bank.num_categories() == c && bank.dim() == cfg.embed_dim => (Some(net), bank),
            _ => {
                let mut r = rng::derive(seed, stream::BANK_INIT, 0);
                (None, MemoryBank::random(c, cfg.embed_dim, cfg.temperature, cfg.bank_momentum, &mut r)?)
            }
        };
        let fit = train_relation_multi(&rel, bank, cfg, seed, net)?;
        (Some((fit.model, fit.bank)), Some(fit.final_loss))
    } else {
        (None, None)
    };
    Ok(Trained { models: Models { unary: unary.model, relation }, loss_unary: unary.final_loss, loss_relation })
}

/// Super-voxel marginals after every mean-field sweep (a single entry, the
/// pooled classifier output, for the unary variant).
pub fn propagate_scene_trace(prepared: &PreparedScene, models: &Models, cfg: &TrainConfig) -> Result<Vec<MarginalField>> {
    let (probs, hidden) = predict_unary(&models.unary, &prepared.features)?;
    let unary_sv = pool_distribution(&probs, &prepared.partition)?;
    match cfg.variant {
        Variant::Unary => Ok(vec![MarginalField::new(unary_sv)?]),
        Variant::Graph => {
            let pp = cfg.pairwise.without_relation();
            let graph = build_graph(&prepared.partition, &prepared.scene, &hidden, None, &pp)?;
            mean_field_trace(&graph, &unary_sv, cfg.mean_field_iterations)
        }
        Variant::Full => {
            let (net, bank) = models
                .relation
                .as_ref()
                .ok_or_else(|| OtocError::validation("the full variant needs a relation network"))?;
            let emb = relation_embeddings(net, &prepared.features, &prepared.partition)?;
            let combined = combine_probs(&unary_sv, &relation_probs(&emb, bank)?)?;
            let graph = build_graph(&prepared.partition, &prepared.scene, &hidden, Some(&emb), &cfg.pairwise)?;
            mean_field_trace(&graph, &combined, cfg.mean_field_iterations)
        }
    }
}

pub fn propagate_scene(prepared: &PreparedScene, models: &Models, cfg: &TrainConfig) -> Result<MarginalField> {
    Ok(propagate_scene_trace(prepared, models, cfg)?.pop().expect("non-empty trace"))
}

/// Per-point predictions with their probabilities. Graph variants label each
/// point with its super-voxel's argmax; the unary variant and
/// `no_propagation` use the classifier alone, point by point.
pub fn infer_scene_scored(
    prepared: &PreparedScene,
    models: &Models,
    cfg: &TrainConfig,
    no_propagation: bool,
) -> Result<Vec<(u32, f64)>> {
    if no_propagation || cfg.variant == Variant::Unary {
        let (probs, _) = predict_unary(&models.unary, &prepared.features)?;
        return Ok((0..probs.rows())
            .map(|i| {
                let c = probs.argmax_row(i);
                (c as u32, probs.get(i, c))
            })
            .collect());
    }
    let sv = map_labels(&propagate_scene(prepared, models, cfg)?);
    Ok(prepared.partition.assignment().iter().map(|&j| sv[j as usize]).collect())
}

pub fn infer_scene(prepared: &PreparedScene, models: &Models, cfg: &TrainConfig, no_propagation: bool) -> Result<Vec<u32>> {
    Ok(infer_scene_scored(prepared, models, cfg, no_propagation)?.into_iter().map(|(c, _)| c).collect())
}

/// Metrics from one confusion matrix accumulated over all scenes.
pub fn evaluate(scenes: &[PreparedScene], models: &Models, cfg: &TrainConfig, no_propagation: bool) -> Result<Metrics> {
    let c = num_categories(scenes)?;
    let preds: Vec<Vec<u32>> =
        scenes.par_iter().map(|s| infer_scene(s, models, cfg, no_propagation)).collect::<Result<_>>()?;
    let mut conf = Confusion::new(c);
    for (s, p) in scenes.iter().zip(&preds) {
        conf.add(p, s.scene.semantic())?;
    }
    Ok(conf.metrics())
}

/// One train / propagate / update cycle.
pub fn run_iteration(
    state: &mut SelfTrainState,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    seed: u64,
    dump_q: Option<&Path>,
) -> Result<IterationReport> {
    if scenes.len() != state.labels.len() {
        return Err(OtocError::validation("state and scenes disagree on scene count"));
    }
    let t = state.iteration + 1;
    let targets: Vec<Vec<Option<u32>>> =
        scenes.iter().zip(&state.labels).map(|(s, l)| point_targets(l, &s.partition)).collect();
    let trained = train_models(scenes, &targets, &state.labels, cfg, iteration_seed(seed, t), state.models.as_ref())?;
    let traces: Vec<Vec<MarginalField>> = scenes
        .par_iter()
        .map(|s| propagate_scene_trace(s, &trained.models, cfg))
        .collect::<Result<_>>()?;
    if let Some(dir) = dump_q {
        std::fs::create_dir_all(dir)?;
        for (s, trace) in traces.iter().enumerate() {
            for (k, q) in trace.iter().enumerate() {
                write_marginals_csv(q.q(), dir.join(format!("iter{t:02}_scene{s:04}_sweep{:02}.csv", k + 1)))?;
            }
        }
    }
    let labels: Vec<PseudoLabels> = traces
        .iter()
        .zip(&state.seeds)
        .map(|(trace, seeds)| update_pseudo_labels(trace.last().unwrap(), cfg.confidence_threshold, seeds))
        .collect::<Result<_>>()?;
    let propagated: usize =
        labels.iter().flat_map(|l| l.entries()).filter(|e| e.provenance == Provenance::Propagated).count();
    if propagated == 0 {
        log::warn!("iteration {t}: no super-voxel passed the confidence gate; continuing on seeds");
    }
    state.labels = labels;
    state.iteration = t;
    state.models = Some(trained.models);
    let report = IterationReport {
        iteration: t,
        coverage: state.coverage(),
        train_loss_unary: Some(trained.loss_unary),
        train_loss_relation: trained.loss_relation,
        miou: None,
    };
    state.log.push(report.clone());
    Ok(report)
}

/// Switches for [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Evaluate with the classifier alone.
    pub no_propagation: bool,
    /// Directory for per-sweep marginal CSVs.
    pub dump_q: Option<PathBuf>,
}

fn eval_miou(eval: &[PreparedScene], models: &Models, cfg: &TrainConfig, opts: &RunOptions) -> Result<Option<f64>> {
    if eval.is_empty() || eval.iter().any(|s| s.scene.semantic().iter().all(Option::is_none)) {
        return Ok(None);
    }
    Ok(Some(evaluate(eval, models, cfg, opts.no_propagation)?.miou))
}

/// Clicks for training scene `index` under the run seed.
pub fn scene_clicks_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, stream::CLICKS, index as u64 + 1).next_u64()
}

/// Initial labels from simulated clicks on every training scene.
pub fn initial_labels(config: &Config, scenes: &[PreparedScene], seed: u64) -> Result<Vec<PseudoLabels>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let clicks = simulate_clicks(&s.scene, scene_clicks_seed(seed, i), config.clicks_per_thing, config.thing_fraction)?;
            let exp = expand_clicks(&clicks, &s.partition)?;
            if exp.conflicts > 0 {
                log::warn!("scene {i}: {} super-voxels dropped for conflicting clicks", exp.conflicts);
            }
            Ok(exp.labels)
        })
        .collect()
}

/// Self-training from given initial labels.
///
/// Row 0 of the log reports the initial coverage. With zero iterations the
/// networks are trained once on the initial labels (exactly as iteration 1
/// would train them) and row 0 carries their losses and evaluation.
pub fn run_from_labels(
    cfg: &TrainConfig,
    train: &[PreparedScene],
    eval: &[PreparedScene],
    seeds: Vec<PseudoLabels>,
    seed: u64,
    opts: &RunOptions,
) -> Result<SelfTrainState> {
    cfg.validate()?;
    num_categories(train)?;
    let mut state = SelfTrainState::from_seeds(seeds);
    if cfg.self_train_iterations == 0 {
        let targets: Vec<Vec<Option<u32>>> =
            train.iter().zip(&state.labels).map(|(s, l)| point_targets(l, &s.partition)).collect();
        let trained = train_models(train, &targets, &state.labels, cfg, iteration_seed(seed, 1), None)?;
        let miou = eval_miou(eval, &trained.models, cfg, opts)?;
        state.log.push(IterationReport {
            iteration: 0,
            coverage: state.coverage(),
            train_loss_unary: Some(trained.loss_unary),
            train_loss_relation: trained.loss_relation,
            miou,
        });
        state.models = Some(trained.models);
        return Ok(state);
    }
    state.log.push(IterationReport {
        iteration: 0,
        coverage: state.coverage(),
        train_loss_unary: None,
        train_loss_relation: None,
        miou: None,
    });
    let mut previous = state.coverage();
    for _ in 0..cfg.self_train_iterations {
        run_iteration(&mut state, train, cfg, seed, opts.dump_q.as_deref())?;
        let miou = eval_miou(eval, state.models.as_ref().unwrap(), cfg, opts)?;
        state.log.last_mut().unwrap().miou = miou;
        let now = state.coverage();
        if cfg.early_stop && (now - previous).abs() < cfg.early_stop_delta {
            log::info!("coverage settled at iteration {}; stopping", state.iteration);
            break;
        }
        previous = now;
    }
    Ok(state)
}

/// Clicks, expansion and the self-training loop.
pub fn run(config: &Config, train: &[PreparedScene], eval: &[PreparedScene], seed: u64, opts: &RunOptions) -> Result<SelfTrainState> {
    config.validate()?;
    let seeds = initial_labels(config, train, seed)?;
    run_from_labels(&config.train, train, eval, seeds, seed, opts)
}

/// Reference run on complete ground truth: the classifier sees every labeled
/// point, the relation network every super-voxel's majority category.
pub fn run_fully_supervised(
    cfg: &TrainConfig,
    train: &[PreparedScene],
    eval: &[PreparedScene],
    seed: u64,
    opts: &RunOptions,
) -> Result<SelfTrainState> {
    cfg.validate()?;
    let labels: Vec<PseudoLabels> = train.iter().map(PreparedScene::majority_labels).collect();
    let targets: Vec<Vec<Option<u32>>> = train.iter().map(|s| s.scene.semantic().to_vec()).collect();
    let trained = train_models(train, &targets, &labels, cfg, iteration_seed(seed, 1), None)?;
    let miou = eval_miou(eval, &trained.models, cfg, opts)?;
    let mut state = SelfTrainState::from_seeds(labels);
    state.log.push(IterationReport {
        iteration: 0,
        coverage: state.coverage(),
        train_loss_unary: Some(trained.loss_unary),
        train_loss_relation: trained.loss_relation,
        miou,
    });
    state.models = Some(trained.models);
    Ok(state)
}

/// Convenience for callers holding a row-stochastic matrix instead of a field.
pub fn labels_from_marginals(q: &Mat, threshold: f64, seeds: &PseudoLabels) -> Result<PseudoLabels> {
    update_pseudo_labels(&MarginalField::new(q.clone())?, threshold, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(rows: &[[f64; 2]]) -> MarginalField {
        MarginalField::new(Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap()
    }

    #[test]
    fn gate_and_seed_rules() {
        let q = field(&[[0.95, 0.05], [0.85, 0.15], [0.0, 1.0]]);
        let seeds = PseudoLabels::from_entries(vec![PseudoLabel::ABSENT, PseudoLabel::ABSENT, PseudoLabel::seed(0)]).unwrap();
        let y = update_pseudo_labels(&q, 0.9, &seeds).unwrap();
        assert_eq!(y.get(0), PseudoLabel::propagated(0, 0.95));
        assert_eq!(y.get(1), PseudoLabel::ABSENT);
        assert_eq!(y.get(2), PseudoLabel::seed(0));
    }

    #[test]
    fn impossible_gate_keeps_only_seeds() {
        let q = field(&[[1.0, 0.0], [0.5, 0.5]]);
        let seeds = PseudoLabels::from_entries(vec![PseudoLabel::ABSENT, PseudoLabel::seed(1)]).unwrap();
        let y = update_pseudo_labels(&q, 1.0 - 1e-15, &seeds);
        assert_eq!(y.unwrap().get(0).provenance, Provenance::Propagated);
        let strict = update_pseudo_labels(&field(&[[0.99, 0.01], [0.5, 0.5]]), 1.0, &seeds).unwrap();
        assert_eq!(strict, seeds);
    }

    #[test]
    fn csv_blank_cells() {
        let log = vec![IterationReport { iteration: 0, coverage: 0.5, train_loss_unary: None, train_loss_relation: None, miou: None }];
        assert_eq!(report_csv(&log), format!("{REPORT_HEADER}\n0,0.500000,,,\n"));
    }
}
