//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::{brute_energy, enumerate_energy, random_stochastic, rng};
use otoc::config::{Config, Variant};
use otoc::graph::PairwiseParams;
use otoc::nets::{cross_entropy, relation_loss, EmbeddingSample, MemoryBank, Mlp};
use otoc::selftrain::{
    initial_labels, prepare_scenes, propagate_scene_trace, report_csv, run, run_fully_supervised, run_iteration,
    PreparedScene, RunOptions, SelfTrainState,
};
use otoc::supervoxel::pool_vectors;
use otoc::{energy, generate_scene, map_labels, Mat, Provenance, SuperVoxelGraph, SuperVoxelPartition};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

const CORPUS_SEED: u64 = 1000;
const CORPUS: u64 = 20;
const TRAIN: usize = 15;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn all_labelings(m: usize, c: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..c.pow(m as u32)).map(move |mut code| {
        (0..m)
            .map(|_| {
                let l = code % c;
                code /= c;
                l
            })
            .collect()
    })
}

struct CrfInstance {
    w: Vec<f64>,
    unary: Vec<Vec<f64>>,
}

fn crf_instances() -> Vec<CrfInstance> {
    let mut r = rng(101);
    let pp = PairwiseParams::default();
    (0..100)
        .map(|_| {
            let m = r.random_range(2..=8);
            let c = r.random_range(2..=4);
            // kernel weights from random node features
            let feats: Vec<[f64; 4]> = (0..m).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
            let mut w = vec![0.0; m * m];
            for a in 0..m {
                for b in 0..m {
                    if a != b {
                        let d = |k: usize| (feats[a][k] - feats[b][k]).powi(2);
                        w[a * m + b] = pp.weight(d(0), d(1), d(2), d(3));
                    }
                }
            }
            CrfInstance { w, unary: random_stochastic(&mut r, m, c) }
        })
        .collect()
}

fn criteria_1_2() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let instances = crf_instances();
    let mut exact = 0;
    let (mut margin_cases, mut map_hits) = (0, 0);
    let mut improved = 0;
    for inst in &instances {
        let m = inst.unary.len();
        let c = inst.unary[0].len();
        let g = SuperVoxelGraph::from_weights(m, inst.w.clone()).unwrap();
        let u = Mat::from_rows(&inst.unary).unwrap();
        let lib_min = all_labelings(m, c).map(|l| energy(&g, &u, &l).unwrap()).fold(f64::INFINITY, f64::min);
        let (best, oracle_min, runner_up) = enumerate_energy(&inst.w, &inst.unary);
        if lib_min == oracle_min {
            exact += 1;
        }
        let q = otoc::mean_field(&g, &u, 10).unwrap();
        let mf: Vec<usize> = map_labels(&q).iter().map(|x| x.0 as usize).collect();
        if runner_up - oracle_min >= 1.0 {
            margin_cases += 1;
            if mf == best {
                map_hits += 1;
            }
        }
        let un: Vec<usize> = inst.unary.iter().map(|row| common::argmax(row)).collect();
        if brute_energy(&inst.w, &inst.unary, &mf) <= brute_energy(&inst.w, &inst.unary, &un) {
            improved += 1;
        }
    }
    let elapsed = t0.elapsed();
    let rate = if margin_cases == 0 { 0.0 } else { map_hits as f64 / margin_cases as f64 };
    let c1 = outcome(
        exact == 100 && margin_cases > 0 && rate >= 0.95 && elapsed < Duration::from_secs(10),
        format!(
            "exhaustive minimum exact in {exact}/100; mean-field MAP {map_hits}/{margin_cases} ({:.1}%) on margin >= 1.0; {:.2}s",
            100.0 * rate,
            elapsed.as_secs_f64()
        ),
    );
    let c2 = outcome(improved >= 90, format!("E(argmax Q) <= E(argmax unary) in {improved}/100"));
    (c1, c2)
}

fn finite_difference_worst(model: &Mlp, analytic: &[f64], loss: impl Fn(&Mlp) -> f64, r: &mut impl Rng) -> f64 {
    let h = 1e-6;
    let params = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in sample(r, params.len(), 100) {
        let mut p = params.clone();
        p[k] += h;
        probe.set_params(&p);
        let up = loss(&probe);
        p[k] = params[k] - h;
        probe.set_params(&p);
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8));
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut r = rng(103);
    let model = Mlp::random(&[14, 64, 64, 6], &mut r).unwrap();
    let xs: Vec<Vec<f64>> = (0..16).map(|_| (0..14).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = (0..16).map(|_| r.random_range(0..6)).collect();
    let (_, g) = cross_entropy(&model, &inputs, &targets);
    let ce = finite_difference_worst(&model, &g.flat(), |m| cross_entropy(m, &inputs, &targets).0, &mut r);

    let rel = Mlp::random(&[14, 64, 32], &mut r).unwrap();
    let bank = MemoryBank::random(6, 32, 0.07, 0.9, &mut r).unwrap();
    let samples: Vec<EmbeddingSample<'_>> =
        (0..4).map(|s| EmbeddingSample { points: inputs[s * 4..s * 4 + 4].to_vec(), category: s }).collect();
    let (_, g, _) = relation_loss(&rel, &samples, &bank);
    let nce = finite_difference_worst(&rel, &g.flat(), |m| relation_loss(m, &samples, &bank).0, &mut r);
    outcome(ce <= 1e-4 && nce <= 1e-4, format!("worst relative error: cross-entropy {ce:.2e}, InfoNCE {nce:.2e} (100 coordinates each)"))
}

fn criterion_4() -> Outcome {
    let mut r = rng(104);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(10..200);
        let m = r.random_range(1..10usize.min(n));
        let mut ids: Vec<u32> = (0..n).map(|_| r.random_range(0..m as u32)).collect();
        for (k, id) in ids.iter_mut().take(m).enumerate() {
            *id = k as u32;
        }
        let part = SuperVoxelPartition::from_ids(&ids).unwrap();
        let x = Mat::from_vec(n, 4, (0..n * 4).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let pooled = pool_vectors(&x, &part).unwrap();
        for j in 0..part.num_supervoxels() {
            let mem: Vec<usize> = (0..n).filter(|&i| part.assignment()[i] as usize == j).collect();
            for c in 0..4 {
                let want = mem.iter().map(|&i| x.get(i, c)).sum::<f64>() / mem.len() as f64;
                worst = worst.max((pooled.get(j, c) - want).abs());
            }
        }
    }
    let mut kernel_worst: f64 = 0.0;
    for _ in 0..1000 {
        let pp = PairwiseParams {
            lambda_c: r.random_range(0.0..2.0),
            lambda_p: r.random_range(0.0..2.0),
            lambda_u: r.random_range(0.0..2.0),
            lambda_f: r.random_range(0.0..2.0),
            sigma_c: r.random_range(0.3..2.0),
            sigma_p: r.random_range(0.3..2.0),
            sigma_u: r.random_range(0.3..2.0),
            sigma_f: r.random_range(0.3..2.0),
            knn: None,
        };
        let d: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..4.0));
        let want = (-pp.lambda_c * d[0] / (2.0 * pp.sigma_c * pp.sigma_c)
            - pp.lambda_p * d[1] / (2.0 * pp.sigma_p * pp.sigma_p)
            - pp.lambda_u * d[2] / (2.0 * pp.sigma_u * pp.sigma_u)
            - pp.lambda_f * d[3] / (2.0 * pp.sigma_f * pp.sigma_f))
            .exp();
        kernel_worst = kernel_worst.max((pp.weight(d[0], d[1], d[2], d[3]) - want).abs());
    }
    let worked = PairwiseParams::default().weight(1.0, 1.0, 0.0, 0.0);
    let worked_err = (worked - (-1.0f64).exp()).abs();
    outcome(
        worst <= 1e-12 && kernel_worst <= 1e-12 && worked_err <= 1e-12,
        format!("pooling {worst:.1e}, kernel {kernel_worst:.1e}, worked value {worked:.10} (error {worked_err:.1e})"),
    )
}

fn criterion_5() -> Outcome {
    let mut r = rng(105);
    let mut worst: f64 = 0.0;
    let mut limits = true;
    for _ in 0..100 {
        let bank = MemoryBank::random(4, 32, 0.07, 0.9, &mut r).unwrap();
        let mut f: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        otoc::mat::l2_normalize(&mut f);
        let c = r.random_range(0..4);
        let mut b = bank.clone();
        b.update(c, &f);
        let blend: Vec<f64> = bank.key(c).iter().zip(&f).map(|(k, x)| 0.9 * k + 0.1 * x).collect();
        let n = blend.iter().map(|v| v * v).sum::<f64>().sqrt();
        for d in 0..32 {
            worst = worst.max((b.key(c)[d] - blend[d] / n).abs());
        }
        let mut one = MemoryBank::from_keys(bank.keys().clone(), 0.07, 1.0).unwrap();
        one.update(c, &f);
        limits &= one.keys() == bank.keys();
        let mut zero = MemoryBank::from_keys(bank.keys().clone(), 0.07, 0.0).unwrap();
        zero.update(c, &f);
        limits &= zero.key(c).iter().zip(&f).all(|(a, b)| (a - b).abs() <= 1e-12);
    }
    outcome(worst <= 1e-12 && limits, format!("m=0.9 max error {worst:.1e}; m=1 and m=0 limits {}", if limits { "exact" } else { "violated" }))
}

struct Run {
    /// (iteration, coverage, miou) rows.
    rows: Vec<(usize, f64, Option<f64>)>,
    secs: f64,
}

impl Run {
    fn miou(&self, t: usize) -> f64 {
        self.rows.iter().find(|r| r.0 == t).and_then(|r| r.2).expect("row with mIoU")
    }

    fn coverage(&self, t: usize) -> f64 {
        self.rows.iter().find(|r| r.0 == t).expect("row").1
    }
}

fn self_train(cfg: &Config, train: &[PreparedScene], eval: &[PreparedScene], seed: u64) -> Run {
    let t0 = Instant::now();
    let state = run(cfg, train, eval, seed, &RunOptions::default()).unwrap();
    Run {
        rows: state.log.iter().map(|r| (r.iteration, r.coverage, r.miou)).collect(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn with_variant(v: Variant) -> Config {
    let mut cfg = Config::default();
    cfg.train.variant = v;
    cfg
}

/// Seed immutability and gate soundness after every iteration, then a
/// byte-identical rerun.
fn criterion_9(train: &[PreparedScene], eval: &[PreparedScene]) -> Outcome {
    let mut problems = Vec::new();
    for (i, s) in train.iter().chain(eval).enumerate() {
        let part = &s.partition;
        let mut seen = vec![false; part.num_points()];
        let mut total = 0;
        for (j, mem) in part.member_lists().iter().enumerate() {
            total += mem.len();
            for &p in mem {
                if seen[p as usize] || part.assignment()[p as usize] as usize != j {
                    problems.push(format!("scene {i}: point {p} assigned twice"));
                }
                seen[p as usize] = true;
            }
        }
        if total != part.num_points() {
            problems.push(format!("scene {i}: members cover {total} of {} points", part.num_points()));
        }
    }

    let cfg = with_variant(Variant::Graph);
    let t = cfg.train.confidence_threshold;
    let loop_run = || {
        let seeds = initial_labels(&cfg, train, 0).unwrap();
        let mut state = SelfTrainState::from_seeds(seeds.clone());
        let mut issues = Vec::new();
        let mut trace = Vec::new();
        for _ in 0..5 {
            let report = run_iteration(&mut state, train, &cfg.train, 0, None).unwrap();
            trace.push(report);
            for (s, (labels, initial)) in state.labels.iter().zip(&seeds).enumerate() {
                if &labels.seeds_only() != initial {
                    issues.push(format!("iteration {}: scene {s} seeds changed", state.iteration));
                }
                for e in labels.entries() {
                    if e.provenance == Provenance::Propagated && e.confidence < t {
                        issues.push(format!("iteration {}: propagated confidence {} < {t}", state.iteration, e.confidence));
                    }
                }
            }
        }
        let bytes: Vec<u8> = state.labels.iter().flat_map(|l| l.to_bytes()).collect();
        (issues, report_csv(&trace), bytes, state)
    };
    let (issues, csv_a, labels_a, state) = loop_run();
    problems.extend(issues);
    let (_, csv_b, labels_b, _) = loop_run();
    if csv_a != csv_b || labels_a != labels_b {
        problems.push("rerun differs".into());
    }

    let mut sweeps = 0;
    let models = state.models.as_ref().unwrap();
    let full = with_variant(Variant::Full);
    let fit = run(&{
        let mut c = full.clone();
        c.train.self_train_iterations = 1;
        c
    }, &train[..3], &[], 0, &RunOptions::default())
    .unwrap();
    for s in eval {
        for (cfg, m) in [(&cfg.train, models), (&full.train, fit.models.as_ref().unwrap())] {
            for q in propagate_scene_trace(s, m, cfg).unwrap() {
                sweeps += 1;
                if q.q().check_row_stochastic(1e-9).is_err() || q.q().data().iter().any(|v| *v < 0.0) {
                    problems.push("marginal row left the simplex".into());
                }
            }
        }
    }
    let pass = problems.is_empty();
    let detail = if pass {
        format!("partitions, {sweeps} sweeps on the simplex, seeds and gate over 5 iterations, identical rerun")
    } else {
        problems.into_iter().take(3).collect::<Vec<_>>().join("; ")
    };
    outcome(pass, detail)
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let (c1, c2) = criteria_1_2();
    results.push((1, "CRF oracle equivalence", c1));
    results.push((2, "energy improvement", c2));
    results.push((3, "gradient checks", criterion_3()));
    results.push((4, "pooling and kernel exactness", criterion_4()));
    results.push((5, "memory-bank law", criterion_5()));
    for (n, name, o) in &results {
        report(*n, name, o);
    }

    let t0 = Instant::now();
    let cfg = Config::default();
    let scenes: Vec<_> =
        (0..CORPUS).map(|i| generate_scene(&cfg.synth.with_seed(CORPUS_SEED + i)).unwrap()).collect();
    let prepared = prepare_scenes(scenes, cfg.train.k_neighbors, &cfg.partition).unwrap();
    let (train, eval) = prepared.split_at(TRAIN);
    let prep_secs = t0.elapsed().as_secs_f64();

    let full: Vec<Run> = SEEDS.par_iter().map(|&s| self_train(&with_variant(Variant::Full), train, eval, s)).collect();
    let one = &full[0];
    let (m1, m5) = (one.miou(1), one.miou(5));
    let (cov1, cov5) = (one.coverage(1), one.coverage(5));
    let secs = prep_secs + one.secs;
    let c6 = outcome(
        m5 - m1 >= 0.05 && cov5 >= cov1 && secs < 600.0,
        format!(
            "mIoU {m1:.4} -> {m5:.4} (gain {:+.4}, need >= 0.05); coverage {cov1:.4} -> {cov5:.4}; {secs:.0}s",
            m5 - m1
        ),
    );
    report(6, "self-training trend", &c6);
    results.push((6, "self-training trend", c6));

    let sup = run_fully_supervised(&cfg.train, train, eval, 0, &RunOptions::default()).unwrap();
    let sup_miou = sup.log[0].miou.unwrap();
    let c7 = outcome(sup_miou - m5 <= 0.10, format!("one-click {m5:.4} vs fully supervised {sup_miou:.4} (gap {:.4})", sup_miou - m5));
    report(7, "weak-vs-full gap", &c7);
    results.push((7, "weak-vs-full gap", c7));

    let others: Vec<(Run, Run)> = SEEDS
        .par_iter()
        .map(|&s| {
            (self_train(&with_variant(Variant::Graph), train, eval, s), self_train(&with_variant(Variant::Unary), train, eval, s))
        })
        .collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let x: Vec<f64> = v.collect();
        x.iter().sum::<f64>() / x.len() as f64
    };
    let f = mean(&mut full.iter().map(|r| r.miou(5)));
    let g = mean(&mut others.iter().map(|r| r.0.miou(5)));
    let u = mean(&mut others.iter().map(|r| r.1.miou(5)));
    let c8 = outcome(
        f >= g - 0.005 && g >= u - 0.005,
        format!("mean mIoU over {} seeds: full {f:.4}, graph {g:.4}, unary {u:.4}", SEEDS.len()),
    );
    report(8, "ablation ordering", &c8);
    results.push((8, "ablation ordering", c8));

    let c9 = criterion_9(train, eval);
    report(9, "invariant suites", &c9);
    results.push((9, "invariant suites", c9));

    let mut half_cfg = with_variant(Variant::Full);
    half_cfg.thing_fraction = 0.5;
    let half = self_train(&half_cfg, train, eval, 0);
    let (h1, h5) = (half.miou(1), half.miou(5));
    let c10 = outcome(h1 < h5 && h5 < m5, format!("half-click iteration 1 {h1:.4} < half-click {h5:.4} < one-click {m5:.4}"));
    report(10, "sparser annotation", &c10);
    results.push((10, "sparser annotation", c10));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn report(n: u32, name: &str, o: &Outcome) {
    println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
