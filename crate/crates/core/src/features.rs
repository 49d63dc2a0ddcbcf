//! Hand-crafted per-point geometric descriptors.
//!
//! Column layout of a [`FeatureMatrix`] row (14 values):
//!
//! | cols    | meaning                                           |
//! |---------|---------------------------------------------------|
//! | 0..3    | xyz normalized to the scene bounding box          |
//! | 3..6    | rgb in `[0, 1]`                                    |
//! | 6..9    | unit normal from k-NN PCA, `z >= 0`               |
//! | 9       | height above the lowest point / box height        |
//! | 10..14  | linearity, planarity, scattering, verticality      |

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{OtocError, Result};
use crate::knn::KnnGraph;
use crate::scene::Scene;

pub const FEATURE_DIM: usize = 14;

pub mod col {
    pub const XYZ: usize = 0;
    pub const RGB: usize = 3;
    pub const NORMAL: usize = 6;
    pub const HEIGHT: usize = 9;
    pub const LINEARITY: usize = 10;
    pub const PLANARITY: usize = 11;
    pub const SCATTERING: usize = 12;
    pub const VERTICALITY: usize = 13;
}

/// Dense row-major `rows x dim` matrix of finite per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != rows * dim {
            return Err(OtocError::validation(format!(
                "feature matrix {rows}x{dim} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OtocError::validation("feature matrix contains NaN/Inf"));
        }
        Ok(FeatureMatrix { rows, dim, values })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normal(&self, i: usize) -> [f64; 3] {
        let r = self.row(i);
        [r[col::NORMAL], r[col::NORMAL + 1], r[col::NORMAL + 2]]
    }
}

/// Result of the PCA on one neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalShape {
    pub normal: [f64; 3],
    pub linearity: f64,
    pub planarity: f64,
    pub scattering: f64,
    pub verticality: f64,
}

impl LocalShape {
    pub const DEGENERATE: LocalShape = LocalShape {
        normal: [0.0, 0.0, 1.0],
        linearity: 0.0,
        planarity: 0.0,
        scattering: 0.0,
        verticality: 1.0,
    };
}

/// PCA of a point set about its centroid.
pub fn local_shape(pts: &[[f64; 3]]) -> LocalShape {
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            mean[d] += p[d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let q = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += q[a] * q[b];
            }
        }
    }
    cov /= n;
    if cov.iter().all(|v| *v == 0.0) {
        return LocalShape::DEGENERATE;
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let sum: f64 = lam.iter().sum();
    if !(sum > 0.0) || lam[0] <= 0.0 {
        return LocalShape::DEGENERATE;
    }
    let (l1, l2, l3) = (lam[0] / sum, lam[1] / sum, lam[2] / sum);
    let v = eig.eigenvectors.column(idx[2]);
    let norm = v.norm();
    let mut normal = [v[0] / norm, v[1] / norm, v[2] / norm];
    if normal[2] < 0.0 {
        normal = normal.map(|x| -x);
    }
    LocalShape {
        normal,
        linearity: ((l1 - l2) / l1).clamp(0.0, 1.0),
        planarity: ((l2 - l3) / l1).clamp(0.0, 1.0),
        scattering: (l3 / l1).clamp(0.0, 1.0),
        verticality: normal[2].abs(),
    }
}

/// Per-point descriptors from the `k_neighbors` nearest neighbors (plus the point itself).
pub fn extract_features(scene: &Scene, k_neighbors: usize) -> Result<FeatureMatrix> {
    if k_neighbors < 3 {
        return Err(OtocError::validation("k_neighbors must be at least 3"));
    }
    if scene.len() <= k_neighbors {
        return Err(OtocError::validation(format!(
            "scene has {} points, need more than k_neighbors = {k_neighbors}",
            scene.len()
        )));
    }
    let pts: Vec<[f64; 3]> = (0..scene.len()).map(|i| scene.point(i)).collect();
    let knn = KnnGraph::build(&pts, k_neighbors);
    let (lo, hi) = scene.bounds();
    let ext: Vec<f64> = (0..3).map(|d| hi[d] - lo[d]).collect();
    let unit = |v: f64, d: usize| if ext[d] > 0.0 { ((v - lo[d]) / ext[d]).clamp(0.0, 1.0) } else { 0.0 };

    let rows: Vec<[f64; FEATURE_DIM]> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let mut hood = Vec::with_capacity(k_neighbors + 1);
            hood.push(pts[i]);
            hood.extend(knn.neighbors(i).iter().map(|&j| pts[j as usize]));
            let shape = local_shape(&hood);
            let p = pts[i];
            let c = scene.color(i);
            [
                unit(p[0], 0),
                unit(p[1], 1),
                unit(p[2], 2),
                c[0],
                c[1],
                c[2],
                shape.normal[0],
                shape.normal[1],
                shape.normal[2],
                unit(p[2], 2),
                shape.linearity,
                shape.planarity,
                shape.scattering,
                shape.verticality,
            ]
        })
        .collect();
    let values = rows.into_iter().flatten().collect();
    FeatureMatrix::new(scene.len(), FEATURE_DIM, values)
}
