//! Per-point semantic classifier trained with softmax cross-entropy.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::annotate::PseudoLabels;
use crate::config::TrainConfig;
use crate::error::{OtocError, Result};
use crate::features::FeatureMatrix;
use crate::mat::{softmax, Mat};
use crate::nets::mlp::{Grads, InputScaling, Mlp, Sgd};
use crate::rng;
use crate::supervoxel::SuperVoxelPartition;

#[derive(Debug, Clone)]
pub struct UnaryFit {
    pub model: Mlp,
    /// Mean cross-entropy over the last epoch.
    pub final_loss: f64,
}

/// Per-point training targets: every point inherits its super-voxel's label.
pub fn point_targets(labels: &PseudoLabels, part: &SuperVoxelPartition) -> Vec<Option<u32>> {
    part.assignment().iter().map(|&sv| labels.label(sv as usize)).collect()
}

/// Mean softmax cross-entropy over a batch and its parameter gradient.
pub fn cross_entropy(model: &Mlp, inputs: &[&[f64]], targets: &[usize]) -> (f64, Grads) {
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for (x, &t) in inputs.iter().zip(targets) {
        let fwd = model.forward_unchecked(x);
        let mut p = softmax(fwd.output());
        loss -= p[t].max(f64::MIN_POSITIVE).ln();
        p[t] -= 1.0;
        model.backward(&fwd, &p, &mut grads);
    }
    let inv = 1.0 / inputs.len() as f64;
    grads.scale(inv);
    (loss * inv, grads)
}

/// Trains a classifier on labeled points drawn from several scenes.
///
/// `data` pairs each scene's features with per-point targets (`None` means
/// unlabeled). Starts from `init` when given, else from a fresh random model.
pub fn train_classifier(
    data: &[(&FeatureMatrix, &[Option<u32>])],
    num_categories: usize,
    cfg: &TrainConfig,
    seed: u64,
    init: Option<Mlp>,
) -> Result<UnaryFit> {
    let mut pool: Vec<(u32, u32, u32)> = Vec::new();
    for (s, (feats, targets)) in data.iter().enumerate() {
        if feats.rows() != targets.len() {
            return Err(OtocError::validation("targets do not match feature rows"));
        }
        for (i, t) in targets.iter().enumerate() {
            if let Some(c) = t {
                if *c as usize >= num_categories {
                    return Err(OtocError::validation(format!("target {c} out of range")));
                }
                pool.push((s as u32, i as u32, *c));
            }
        }
    }
    if pool.is_empty() {
        return Err(OtocError::EmptySupervision);
    }
    let input_dim = data[0].0.dim();
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.unary_hidden);
    sizes.push(num_categories);

    // Optimize on standardized inputs; the scaling is folded back at the end.
    let scaling = InputScaling::fit(&data.iter().map(|(f, _)| *f).collect::<Vec<_>>());
    let scaled: Vec<FeatureMatrix> = data.iter().map(|(f, _)| scaling.apply(f)).collect();
    let mut model = match init {
        Some(mut m) if m.sizes() == sizes.as_slice() => {
            m.extract_input_scaling(&scaling);
            m
        }
        _ => Mlp::random(&sizes, &mut rng::derive(seed, rng::stream::UNARY_INIT, 0))?,
    };
    let mut opt = Sgd::new(&model, cfg.learning_rate, cfg.sgd_momentum);
    let mut rng = rng::derive(seed, rng::stream::UNARY_SGD, 0);
    let per_epoch = cfg.samples_per_epoch.min(pool.len());
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let order: Vec<usize> = if per_epoch == pool.len() {
            let mut all: Vec<usize> = (0..pool.len()).collect();
            all.shuffle(&mut rng);
            all
        } else {
            sample(&mut rng, pool.len(), per_epoch).into_vec()
        };
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f64]> = batch
                .iter()
                .map(|&k| {
                    let (s, i, _) = pool[k];
                    scaled[s as usize].row(i as usize)
                })
                .collect();
            let targets: Vec<usize> = batch.iter().map(|&k| pool[k].2 as usize).collect();
            let (loss, grads) = cross_entropy(&model, &inputs, &targets);
            total += loss * batch.len() as f64;
            opt.step(&mut model, &grads);
        }
        final_loss = total / order.len() as f64;
    }
    model.absorb_input_scaling(&scaling);
    Ok(UnaryFit { model, final_loss })
}

/// Trains the classifier on one scene's pseudo labels.
pub fn train_unary(
    features: &FeatureMatrix,
    labels: &PseudoLabels,
    part: &SuperVoxelPartition,
    num_categories: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<UnaryFit> {
    if labels.len() != part.num_supervoxels() {
        return Err(OtocError::validation("pseudo labels do not match the partition"));
    }
    let targets = point_targets(labels, part);
    train_classifier(&[(features, &targets)], num_categories, cfg, seed, None)
}

/// Per-point class probabilities and last hidden activations.
pub fn predict_unary(model: &Mlp, features: &FeatureMatrix) -> Result<(Mat, Mat)> {
    if features.dim() != model.input_dim() {
        return Err(OtocError::validation("feature width does not match the model"));
    }
    let c = model.output_dim();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let fwd = model.forward_unchecked(features.row(i));
            (softmax(fwd.output()), fwd.penultimate().to_vec())
        })
        .collect();
    let h = rows.first().map_or(0, |r| r.1.len());
    let mut probs = Vec::with_capacity(rows.len() * c);
    let mut hidden = Vec::with_capacity(rows.len() * h);
    for (p, u) in rows {
        probs.extend(p);
        hidden.extend(u);
    }
    Ok((Mat::from_vec(features.rows(), c, probs)?, Mat::from_vec(features.rows(), h, hidden)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let m = Mlp::zeros(&[3, 4, 5]).unwrap();
        let f = FeatureMatrix::new(2, 3, vec![0.1, 0.2, 0.3, -1.0, 2.0, 0.5]).unwrap();
        let (p, u) = predict_unary(&m, &f).unwrap();
        for r in p.iter_rows() {
            for v in r {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
        assert_eq!(u.cols(), 4);
    }

    #[test]
    fn empty_supervision() {
        let f = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let t = vec![None, None];
        let err = train_classifier(&[(&f, &t)], 2, &TrainConfig::default(), 0, None).unwrap_err();
        assert!(matches!(err, OtocError::EmptySupervision));
    }

    #[test]
    fn cross_entropy_of_zero_model_is_log_c() {
        let m = Mlp::zeros(&[2, 3]).unwrap();
        let x = [0.5, 0.5];
        let (loss, _) = cross_entropy(&m, &[&x], &[1]);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = Mlp::random(&[2, 8, 3], &mut rng).unwrap();
        let (loss, _) = cross_entropy(&r, &[&x], &[1]);
        assert!((loss - 3f64.ln()).abs() < 0.1 * 3f64.ln());
    }
}
