//! Relation network: contrastive super-voxel embeddings against per-category
//! prototype keys kept in a momentum-updated memory bank.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::annotate::PseudoLabels;
use crate::config::TrainConfig;
use crate::error::{OtocError, Result};
use crate::features::FeatureMatrix;
use crate::mat::{argmax, dot, l2_normalize, softmax, Mat};
use crate::nets::mlp::{Forward, Grads, InputScaling, Mlp, Sgd};
use crate::rng;
use crate::supervoxel::SuperVoxelPartition;

/// One unit-norm prototype key per category.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    keys: Mat,
    temperature: f64,
    momentum: f64,
}

impl MemoryBank {
    /// Keys drawn i.i.d. standard normal, then normalized.
    pub fn random<R: Rng + ?Sized>(
        num_categories: usize,
        dim: usize,
        temperature: f64,
        momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut keys = Mat::zeros(num_categories, dim);
        for c in 0..num_categories {
            let row = keys.row_mut(c);
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                if l2_normalize(row) > 0.0 {
                    break;
                }
            }
        }
        MemoryBank::from_keys(keys, temperature, momentum)
    }

    pub fn from_keys(keys: Mat, temperature: f64, momentum: f64) -> Result<Self> {
        if !(temperature > 0.0) || !(0.0..=1.0).contains(&momentum) {
            return Err(OtocError::validation("need temperature > 0 and momentum in [0, 1]"));
        }
        for (c, k) in keys.iter_rows().enumerate() {
            let n = dot(k, k).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(OtocError::validation(format!("key {c} has norm {n}")));
            }
        }
        Ok(MemoryBank { keys, temperature, momentum })
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn key(&self, c: usize) -> &[f64] {
        self.keys.row(c)
    }

    pub fn num_categories(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `k_c <- normalize(m * k_c + (1 - m) * f)`.
    ///
    /// If the blend cancels to the zero vector the key is left unchanged.
    pub fn update(&mut self, category: usize, embedding: &[f64]) {
        let m = self.momentum;
        if m == 1.0 {
            return;
        }
        let key = self.keys.row_mut(category);
        let mut next: Vec<f64> = key.iter().zip(embedding).map(|(k, f)| m * k + (1.0 - m) * f).collect();
        if l2_normalize(&mut next) > 0.0 {
            key.copy_from_slice(&next);
        }
    }

    /// Similarity logits `f . k_c / tau` for every category.
    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        self.keys.iter_rows().map(|k| dot(embedding, k) / self.temperature).collect()
    }
}

/// `-log softmax(f . k / tau)[target]`.
pub fn info_nce(embedding: &[f64], bank: &MemoryBank, target: usize) -> f64 {
    let logits = bank.logits(embedding);
    let top = argmax(&logits);
    let m = logits[top];
    // log-sum-exp as m + ln(1 + rest) keeps precision for confident targets
    let rest: f64 = logits.iter().enumerate().filter(|&(c, _)| c != top).map(|(_, l)| (l - m).exp()).sum();
    (m - logits[target]) + rest.ln_1p()
}

/// Points of one super-voxel plus its category.
#[derive(Debug, Clone)]
pub struct EmbeddingSample<'a> {
    pub points: Vec<&'a [f64]>,
    pub category: usize,
}

/// Mean InfoNCE over the samples, its gradient w.r.t. the network, and the
/// (detached) unit embeddings used for the memory-bank update.
///
/// Each embedding is the L2-normalized mean of the network outputs over the
/// sample's points. Keys receive no gradient.
pub fn relation_loss(model: &Mlp, samples: &[EmbeddingSample<'_>], bank: &MemoryBank) -> (f64, Grads, Vec<Vec<f64>>) {
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    let mut embeddings = Vec::with_capacity(samples.len());
    let d = model.output_dim();
    for s in samples {
        let fwds: Vec<Forward> = s.points.iter().map(|x| model.forward_unchecked(x)).collect();
        let mut g = vec![0.0; d];
        for f in &fwds {
            for (a, b) in g.iter_mut().zip(f.output()) {
                *a += b;
            }
        }
        let inv_n = 1.0 / fwds.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv_n);
        let norm = dot(&g, &g).sqrt();
        if norm == 0.0 {
            embeddings.push(g);
            continue;
        }
        let f: Vec<f64> = g.iter().map(|v| v / norm).collect();
        let mut p = softmax(&bank.logits(&f));
        loss += info_nce(&f, bank, s.category);
        p[s.category] -= 1.0;
        // dL/df = sum_c (p_c - y_c) k_c / tau
        let mut df = vec![0.0; d];
        for (c, pc) in p.iter().enumerate() {
            for (a, k) in df.iter_mut().zip(bank.key(c)) {
                *a += pc * k / bank.temperature;
            }
        }
        // through f = g / |g|
        let proj = dot(&f, &df);
        let dg: Vec<f64> = df.iter().zip(&f).map(|(a, b)| (a - b * proj) / norm * inv_n).collect();
        for fwd in &fwds {
            model.backward(fwd, &dg, &mut grads);
        }
        embeddings.push(f);
    }
    let inv = 1.0 / samples.len().max(1) as f64;
    grads.scale(inv);
    (loss * inv, grads, embeddings)
}

/// Draws `s` items per non-empty pool (with replacement when a pool holds
/// fewer than `s`). Returns `(pool index, item)` in ascending pool order.
pub fn balanced_sample<T: Copy, R: Rng + ?Sized>(pools: &[Vec<T>], s: usize, rng: &mut R) -> Vec<(usize, T)> {
    let mut out = Vec::with_capacity(pools.len() * s);
    for (c, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        if pool.len() >= s {
            out.extend(sample(rng, pool.len(), s).into_iter().map(|k| (c, pool[k])));
        } else {
            out.extend((0..s).map(|_| (c, pool[rng.random_range(0..pool.len())])));
        }
    }
    out
}

/// One scene's inputs to relation training.
#[derive(Debug, Clone, Copy)]
pub struct RelationScene<'a> {
    pub features: &'a FeatureMatrix,
    pub partition: &'a SuperVoxelPartition,
    pub labels: &'a PseudoLabels,
}

#[derive(Debug, Clone)]
pub struct RelationFit {
    pub model: Mlp,
    pub bank: MemoryBank,
    /// Mean contrastive loss over the last epoch.
    pub final_loss: f64,
}

/// Contrastive training with category-balanced sampling and momentum key updates.
pub fn train_relation_multi(
    data: &[RelationScene<'_>],
    bank: MemoryBank,
    cfg: &TrainConfig,
    seed: u64,
    init: Option<Mlp>,
) -> Result<RelationFit> {
    let c = bank.num_categories();
    let mut pools: Vec<Vec<(u32, u32)>> = vec![Vec::new(); c];
    for (s, scene) in data.iter().enumerate() {
        if scene.labels.len() != scene.partition.num_supervoxels() {
            return Err(OtocError::validation("pseudo labels do not match the partition"));
        }
        for j in 0..scene.labels.len() {
            if let Some(cat) = scene.labels.label(j) {
                if cat as usize >= c {
                    return Err(OtocError::validation(format!("label {cat} outside the memory bank")));
                }
                pools[cat as usize].push((s as u32, j as u32));
            }
        }
    }
    let present = pools.iter().filter(|p| !p.is_empty()).count();
    if present == 0 {
        return Err(OtocError::EmptySupervision);
    }
    if present == 1 {
        log::warn!("relation training sees a single category; the contrastive loss carries no information");
    }
    let input_dim = data[0].features.dim();
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.relation_hidden);
    sizes.push(bank.dim());
    let scaling = InputScaling::fit(&data.iter().map(|d| d.features).collect::<Vec<_>>());
    let scaled: Vec<FeatureMatrix> = data.iter().map(|d| scaling.apply(d.features)).collect();
    let mut model = match init {
        Some(mut m) if m.sizes() == sizes.as_slice() => {
            m.extract_input_scaling(&scaling);
            m
        }
        _ => Mlp::random(&sizes, &mut rng::derive(seed, rng::stream::RELATION_INIT, 0))?,
    };
    let mut bank = bank;
    let mut opt = Sgd::new(&model, cfg.learning_rate, cfg.sgd_momentum);
    let mut rng = rng::derive(seed, rng::stream::RELATION_SGD, 0);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.relation_steps_per_epoch {
            let picks = balanced_sample(&pools, cfg.samples_per_category, &mut rng);
            let samples: Vec<EmbeddingSample<'_>> = picks
                .iter()
                .map(|&(cat, (s, j))| {
                    let feats = &scaled[s as usize];
                    let members = data[s as usize].partition.members(j as usize);
                    let points = if members.len() <= cfg.relation_points_per_sv {
                        members.iter().map(|&i| feats.row(i as usize)).collect()
                    } else {
                        let mut idx = sample(&mut rng, members.len(), cfg.relation_points_per_sv).into_vec();
                        idx.sort_unstable();
                        idx.into_iter().map(|k| feats.row(members[k] as usize)).collect()
                    };
                    EmbeddingSample { points, category: cat }
                })
                .collect();
            let (loss, grads, embeddings) = relation_loss(&model, &samples, &bank);
            total += loss;
            opt.step(&mut model, &grads);
            for (s, f) in samples.iter().zip(&embeddings) {
                bank.update(s.category, f);
            }
        }
        final_loss = total / cfg.relation_steps_per_epoch as f64;
    }
    model.absorb_input_scaling(&scaling);
    Ok(RelationFit { model, bank, final_loss })
}

/// Single-scene relation training.
pub fn train_relation(
    features: &FeatureMatrix,
    labels: &PseudoLabels,
    part: &SuperVoxelPartition,
    bank: MemoryBank,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RelationFit> {
    train_relation_multi(&[RelationScene { features, partition: part, labels }], bank, cfg, seed, None)
}

/// Unit-norm super-voxel embeddings: pooled network outputs, normalized.
pub fn relation_embeddings(model: &Mlp, features: &FeatureMatrix, part: &SuperVoxelPartition) -> Result<Mat> {
    if features.dim() != model.input_dim() || features.rows() != part.num_points() {
        return Err(OtocError::validation("features do not match the relation model or partition"));
    }
    let d = model.output_dim();
    let rows: Vec<Vec<f64>> = part
        .member_lists()
        .par_iter()
        .map(|members| {
            let mut g = vec![0.0; d];
            for &i in members {
                let fwd = model.forward_unchecked(features.row(i as usize));
                for (a, b) in g.iter_mut().zip(fwd.output()) {
                    *a += b;
                }
            }
            if l2_normalize(&mut g) == 0.0 {
                // No direction at all; any unit vector keeps the invariant.
                g[0] = 1.0;
            }
            g
        })
        .collect();
    Mat::from_vec(rows.len(), d, rows.concat())
}

/// Row `j` is `softmax_c(f_j . k_c / tau)`.
pub fn relation_probs(embeddings: &Mat, bank: &MemoryBank) -> Result<Mat> {
    if embeddings.cols() != bank.dim() {
        return Err(OtocError::validation("embedding width does not match the memory bank"));
    }
    let mut out = Mat::zeros(embeddings.rows(), bank.num_categories());
    for (j, f) in embeddings.iter_rows().enumerate() {
        out.row_mut(j).copy_from_slice(&softmax(&bank.logits(f)));
    }
    Ok(out)
}

/// Elementwise product of two distributions, renormalized per row. Rows whose
/// product mass falls below `1e-12` keep the unary row.
pub fn combine_probs(unary: &Mat, relation: &Mat) -> Result<Mat> {
    if unary.rows() != relation.rows() || unary.cols() != relation.cols() {
        return Err(OtocError::validation("probability matrices differ in shape"));
    }
    unary.check_row_stochastic(1e-6)?;
    relation.check_row_stochastic(1e-6)?;
    let mut out = Mat::zeros(unary.rows(), unary.cols());
    for j in 0..unary.rows() {
        let prod: Vec<f64> = unary.row(j).iter().zip(relation.row(j)).map(|(a, b)| a * b).collect();
        let mass: f64 = prod.iter().sum();
        let row = out.row_mut(j);
        if mass < 1e-12 {
            row.copy_from_slice(unary.row(j));
        } else {
            row.iter_mut().zip(prod).for_each(|(o, p)| *o = p / mass);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn axis_bank(c: usize, d: usize, tau: f64, m: f64) -> MemoryBank {
        let mut keys = Mat::zeros(c, d);
        for i in 0..c {
            keys.set(i, i, 1.0);
        }
        MemoryBank::from_keys(keys, tau, m).unwrap()
    }

    #[test]
    fn momentum_limits() {
        let f = [0.0, 1.0, 0.0];
        let mut b = axis_bank(2, 3, 0.07, 1.0);
        b.update(0, &f);
        assert_eq!(b.key(0), &[1.0, 0.0, 0.0]);
        let mut b = axis_bank(2, 3, 0.07, 0.0);
        b.update(0, &[0.0, 2.0, 0.0]);
        assert_eq!(b.key(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn cancelling_update_keeps_key() {
        let mut b = axis_bank(1, 2, 0.07, 0.5);
        b.update(0, &[-1.0, 0.0]);
        assert_eq!(b.key(0), &[1.0, 0.0]);
    }

    #[test]
    fn aligned_embedding_loss() {
        let b = axis_bank(2, 4, 0.07, 0.9);
        let loss = info_nce(&[1.0, 0.0, 0.0, 0.0], &b, 0);
        let expected = -((1.0f64 / 0.07).exp() / ((1.0f64 / 0.07).exp() + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-18 + 1e-9 * expected);
        assert!((loss - 6.1e-7).abs() < 0.03 * 6.1e-7);
    }

    #[test]
    fn probs_and_combination() {
        let b = axis_bank(3, 3, 0.07, 0.9);
        let f = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let p = relation_probs(&f, &b).unwrap();
        assert!(p.get(0, 0) > 1.0 - 1e-5);
        let hot = MemoryBank::from_keys(b.keys().clone(), 100.0, 0.9).unwrap();
        let p = relation_probs(&f, &hot).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 1.0 / 3.0).abs() < 0.01));

        let u = Mat::from_rows(&[vec![0.6, 0.4], vec![0.8, 0.2]]).unwrap();
        let r = Mat::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let c = combine_probs(&u, &r).unwrap();
        // 0.15 and 0.30 before renormalization
        assert!((c.get(0, 0) - 1.0 / 3.0).abs() < 1e-15 && (c.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.get(1, 0) - 0.8).abs() < 1e-15 && (c.get(1, 1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn vanishing_product_falls_back_to_unary() {
        let u = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = Mat::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(combine_probs(&u, &r).unwrap(), u);
    }

    #[test]
    fn balanced_sampling_counts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pools = vec![vec![1, 2, 3], vec![], (0..50).collect::<Vec<_>>()];
        let picks = balanced_sample(&pools, 20, &mut rng);
        assert_eq!(picks.iter().filter(|p| p.0 == 0).count(), 20);
        assert_eq!(picks.iter().filter(|p| p.0 == 1).count(), 0);
        assert_eq!(picks.iter().filter(|p| p.0 == 2).count(), 20);
        let distinct: std::collections::BTreeSet<_> = picks.iter().filter(|p| p.0 == 2).map(|p| p.1).collect();
        assert_eq!(distinct.len(), 20);
    }

    #[test]
    fn non_unit_keys_rejected() {
        let keys = Mat::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(MemoryBank::from_keys(keys, 0.07, 0.9).is_err());
    }
}
