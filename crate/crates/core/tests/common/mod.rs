#![allow(dead_code)]

use otoc::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic `m x c` matrix with entries bounded away from zero.
pub fn random_stochastic(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Symmetric `m x m` weights in [0, 1) with zero diagonal, flattened.
pub fn random_weights(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> Vec<f64> {
    let mut w = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..a {
            let v = rng.random_range(0.0..1.0) * scale;
            w[a * m + b] = v;
            w[b * m + a] = v;
        }
    }
    w
}

/// Point cloud with uniformly random coordinates and colors, split into
/// `instances` groups by x coordinate, categories cycling through `c`.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, instances: u32, c: usize) -> Scene {
    let pts: Vec<[f32; 3]> = (0..n)
        .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..3.0), rng.random_range(0.0..2.5)])
        .collect();
    let colors: Vec<[u8; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let inst: Vec<Option<u32>> =
        pts.iter().map(|p| Some(((p[0] / 4.0 * instances as f32) as u32).min(instances - 1))).collect();
    let sem = inst.iter().map(|i| i.map(|i| i % c as u32)).collect();
    Scene::new(pts, colors, sem, inst, c).unwrap()
}

/// Exact minimum energy by enumerating all `c^m` labelings; also the
/// runner-up energy among labelings different from the minimizer.
pub fn enumerate_energy(w: &[f64], unary: &[Vec<f64>]) -> (Vec<usize>, f64, f64) {
    let m = unary.len();
    let c = unary[0].len();
    let total = c.pow(m as u32);
    let mut best = (Vec::new(), f64::INFINITY);
    let mut second = f64::INFINITY;
    let mut lab = vec![0usize; m];
    for code in 0..total {
        let mut x = code;
        for l in lab.iter_mut() {
            *l = x % c;
            x /= c;
        }
        let e = brute_energy(w, unary, &lab);
        if e < best.1 {
            second = best.1;
            best = (lab.clone(), e);
        } else if e < second {
            second = e;
        }
    }
    (best.0, best.1, second)
}

pub fn brute_energy(w: &[f64], unary: &[Vec<f64>], lab: &[usize]) -> f64 {
    let m = unary.len();
    let mut e = 0.0;
    for j in 0..m {
        e -= (unary[j][lab[j]] + 1e-12).ln();
    }
    for a in 0..m {
        for b in a + 1..m {
            if lab[a] != lab[b] {
                e += w[a * m + b];
            }
        }
    }
    e
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
