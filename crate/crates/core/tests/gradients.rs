//! Analytic gradients against central finite differences.

mod common;

use common::rng;
use otoc::nets::{cross_entropy, relation_loss, EmbeddingSample, MemoryBank, Mlp};
use rand::seq::index::sample;
use rand::Rng;

const H: f64 = 1e-6;
const COORDS: usize = 100;
const TOL: f64 = 1e-4;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks `COORDS` random parameters; returns the worst relative error.
fn check(model: &Mlp, analytic: &[f64], loss: impl Fn(&Mlp) -> f64, r: &mut impl Rng) -> f64 {
    let params = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in sample(r, params.len(), COORDS) {
        let mut p = params.clone();
        p[k] = params[k] + H;
        probe.set_params(&p);
        let up = loss(&probe);
        p[k] = params[k] - H;
        probe.set_params(&p);
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    worst
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(11);
    for trial in 0..5 {
        let model = Mlp::random(&[14, 16, 12, 6], &mut r).unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..14).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<usize> = (0..8).map(|_| r.random_range(0..6)).collect();
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, grads) = cross_entropy(&model, &inputs, &targets);
        let worst = check(&model, &grads.flat(), |m| cross_entropy(m, &inputs, &targets).0, &mut r);
        assert!(worst <= TOL, "trial {trial}: worst relative error {worst:e}");
    }
}

#[test]
fn relation_loss_gradient() {
    let mut r = rng(12);
    for trial in 0..5 {
        let model = Mlp::random(&[14, 16, 8], &mut r).unwrap();
        let bank = MemoryBank::random(4, 8, 0.07, 0.9, &mut r).unwrap();
        let xs: Vec<Vec<f64>> = (0..30).map(|_| (0..14).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let samples: Vec<EmbeddingSample<'_>> = (0..6)
            .map(|s| EmbeddingSample { points: xs[s * 5..s * 5 + 5].iter().map(Vec::as_slice).collect(), category: s % 4 })
            .collect();
        let (_, grads, _) = relation_loss(&model, &samples, &bank);
        let worst = check(&model, &grads.flat(), |m| relation_loss(m, &samples, &bank).0, &mut r);
        assert!(worst <= TOL, "trial {trial}: worst relative error {worst:e}");
    }
}

#[test]
fn aligned_info_nce_value() {
    let keys = otoc::Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let bank = MemoryBank::from_keys(keys, 0.07, 0.9).unwrap();
    let loss = otoc::nets::info_nce(&[1.0, 0.0], &bank, 0);
    let want = (-1.0f64 / 0.07).exp().ln_1p();
    assert!((loss - want).abs() <= 1e-12 * want);
    assert!((loss - 6.1e-7).abs() / 6.1e-7 < 0.03);
}
