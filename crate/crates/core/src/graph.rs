//! Fully connected super-voxel graph and mean-field minimization of the
//! Potts-style CRF energy
//!
//! `E(y) = sum_j -log P_j(y_j) + sum_{j<j'} [y_j != y_j'] w(j, j')`
//!
//! with Gaussian kernel weights over normalized mean color, mean position,
//! mean classifier feature and relation embedding.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{OtocError, Result};
use crate::mat::{softmax, Mat};
use crate::scene::Scene;
use crate::supervoxel::{pool_vectors, SuperVoxelPartition};

/// Floor inside `log` for zero probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseParams {
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_u: f64,
    pub lambda_f: f64,
    pub sigma_c: f64,
    pub sigma_p: f64,
    pub sigma_u: f64,
    pub sigma_f: f64,
    /// Keep only each node's `k` strongest edges (union over both ends).
    pub knn: Option<usize>,
}

impl Default for PairwiseParams {
    fn default() -> Self {
        PairwiseParams {
            lambda_c: 1.0,
            lambda_p: 1.0,
            lambda_u: 1.0,
            lambda_f: 1.0,
            sigma_c: 1.0,
            sigma_p: 1.0,
            sigma_u: 1.0,
            sigma_f: 1.0,
            knn: None,
        }
    }
}

impl PairwiseParams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_c, self.lambda_p, self.lambda_u, self.lambda_f];
        let sigmas = [self.sigma_c, self.sigma_p, self.sigma_u, self.sigma_f];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(OtocError::validation("need lambda >= 0 and sigma > 0"));
        }
        if self.knn == Some(0) {
            return Err(OtocError::validation("graph knn must be positive"));
        }
        Ok(())
    }

    /// Drops the relation-embedding kernel.
    pub fn without_relation(&self) -> Self {
        PairwiseParams { lambda_f: 0.0, ..self.clone() }
    }

    /// Kernel weight from squared distances of the four node features.
    #[inline]
    pub fn weight(&self, dc2: f64, dp2: f64, du2: f64, df2: f64) -> f64 {
        (-self.lambda_c * dc2 / (2.0 * self.sigma_c * self.sigma_c)
            - self.lambda_p * dp2 / (2.0 * self.sigma_p * self.sigma_p)
            - self.lambda_u * du2 / (2.0 * self.sigma_u * self.sigma_u)
            - self.lambda_f * df2 / (2.0 * self.sigma_f * self.sigma_f))
            .exp()
    }
}

/// Node features and dense symmetric edge weights (zero diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperVoxelGraph {
    m: usize,
    weights: Vec<f64>,
    /// Standardized mean colors, coordinates and classifier features; unit embeddings.
    pub colors: Mat,
    pub coords: Mat,
    pub unary_features: Mat,
    pub embeddings: Option<Mat>,
}

impl SuperVoxelGraph {
    /// Graph from an explicit `m x m` weight matrix (diagonal ignored).
    pub fn from_weights(m: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != m * m {
            return Err(OtocError::validation("weight matrix must be m x m"));
        }
        let mut w = weights;
        for a in 0..m {
            w[a * m + a] = 0.0;
            for b in 0..a {
                let (x, y) = (w[a * m + b], w[b * m + a]);
                if x != y || !(0.0..=1.0).contains(&x) {
                    return Err(OtocError::validation(format!("weight ({a},{b}) not symmetric in [0, 1]")));
                }
            }
        }
        Ok(SuperVoxelGraph {
            m,
            weights: w,
            colors: Mat::zeros(m, 0),
            coords: Mat::zeros(m, 0),
            unary_features: Mat::zeros(m, 0),
            embeddings: None,
        })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a * self.m + b]
    }

    pub fn weight_row(&self, a: usize) -> &[f64] {
        &self.weights[a * self.m..(a + 1) * self.m]
    }

    pub fn num_edges(&self) -> usize {
        (0..self.m).map(|a| (0..a).filter(|&b| self.weight(a, b) > 0.0).count()).sum()
    }
}

/// Column-wise zero mean / unit variance; constant columns become zero.
pub fn standardize(x: &Mat) -> Mat {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for r in 0..n {
            out.set(r, c, if sd > 1e-12 { (x.get(r, c) - mean) / sd } else { 0.0 });
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Builds the super-voxel graph.
///
/// `unary_features` holds one row per point (the classifier's last hidden
/// layer); `embeddings` one unit row per super-voxel. Without embeddings the
/// relation kernel is skipped.
pub fn build_graph(
    part: &SuperVoxelPartition,
    scene: &Scene,
    unary_features: &Mat,
    embeddings: Option<&Mat>,
    pp: &PairwiseParams,
) -> Result<SuperVoxelGraph> {
    pp.validate()?;
    let n = scene.len();
    if part.num_points() != n || unary_features.rows() != n {
        return Err(OtocError::validation("partition, scene and unary features disagree on point count"));
    }
    let m = part.num_supervoxels();
    if let Some(f) = embeddings {
        if f.rows() != m {
            return Err(OtocError::validation("need one embedding per super-voxel"));
        }
        if f.data().iter().any(|v| !v.is_finite()) {
            return Err(OtocError::validation("non-finite embedding"));
        }
    }
    if unary_features.data().iter().any(|v| !v.is_finite()) {
        return Err(OtocError::validation("non-finite unary feature"));
    }
    let mut colors = Vec::with_capacity(n * 3);
    let mut coords = Vec::with_capacity(n * 3);
    for i in 0..n {
        colors.extend(scene.color(i));
        coords.extend(scene.point(i));
    }
    let colors = standardize(&pool_vectors(&Mat::from_vec(n, 3, colors)?, part)?);
    let coords = standardize(&pool_vectors(&Mat::from_vec(n, 3, coords)?, part)?);
    let unary_features = standardize(&pool_vectors(unary_features, part)?);

    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|a| {
            (0..m)
                .map(|b| {
                    if a == b {
                        return 0.0;
                    }
                    let df2 = embeddings.map_or(0.0, |f| sq_dist(f.row(a), f.row(b)));
                    pp.weight(
                        sq_dist(colors.row(a), colors.row(b)),
                        sq_dist(coords.row(a), coords.row(b)),
                        sq_dist(unary_features.row(a), unary_features.row(b)),
                        df2,
                    )
                })
                .collect()
        })
        .collect();
    let mut weights = rows.concat();
    if let Some(k) = pp.knn {
        truncate_to_knn(&mut weights, m, k);
    }
    Ok(SuperVoxelGraph { m, weights, colors, coords, unary_features, embeddings: embeddings.cloned() })
}

fn truncate_to_knn(w: &mut [f64], m: usize, k: usize) {
    let mut keep = vec![false; m * m];
    for a in 0..m {
        let mut idx: Vec<usize> = (0..m).filter(|&b| b != a).collect();
        idx.sort_by(|&x, &y| w[a * m + y].total_cmp(&w[a * m + x]).then(x.cmp(&y)));
        for &b in idx.iter().take(k) {
            keep[a * m + b] = true;
            keep[b * m + a] = true;
        }
    }
    for (v, k) in w.iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}

/// Per-super-voxel label distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    q: Mat,
}

impl MarginalField {
    pub fn new(q: Mat) -> Result<Self> {
        q.check_row_stochastic(1e-6)?;
        Ok(MarginalField { q })
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn into_inner(self) -> Mat {
        self.q
    }

    pub fn num_nodes(&self) -> usize {
        self.q.rows()
    }

    pub fn num_categories(&self) -> usize {
        self.q.cols()
    }
}

fn check_unary(graph: &SuperVoxelGraph, unary: &Mat) -> Result<()> {
    if unary.rows() != graph.num_nodes() {
        return Err(OtocError::validation(format!(
            "{} unary rows for {} graph nodes",
            unary.rows(),
            graph.num_nodes()
        )));
    }
    if unary.cols() == 0 {
        return Err(OtocError::validation("need at least one category"));
    }
    unary.check_row_stochastic(1e-6)
}

fn sweep(graph: &SuperVoxelGraph, unary: &Mat, log_unary: &Mat, q: &Mat) -> Mat {
    let (m, c) = (q.rows(), q.cols());
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let w = graph.weight_row(j);
            // sum_j' w (1 - Q_j'(l)) = sum_j' w - sum_j' w Q_j'(l)
            let mut total = 0.0;
            let mut agree = vec![0.0; c];
            for (jp, &wj) in w.iter().enumerate() {
                if wj == 0.0 || jp == j {
                    continue;
                }
                total += wj;
                for (a, qv) in agree.iter_mut().zip(q.row(jp)) {
                    *a += wj * qv;
                }
            }
            if total == 0.0 {
                return unary.row(j).to_vec();
            }
            let logits: Vec<f64> = (0..c).map(|l| log_unary.get(j, l) - (total - agree[l])).collect();
            softmax(&logits)
        })
        .collect();
    Mat::from_vec(m, c, rows.concat()).expect("shape")
}

/// Every intermediate `Q` (after sweeps `1..=iterations`), synchronous updates
/// starting from `Q0 = unary`.
pub fn mean_field_trace(graph: &SuperVoxelGraph, unary: &Mat, iterations: usize) -> Result<Vec<MarginalField>> {
    check_unary(graph, unary)?;
    if iterations == 0 {
        return Err(OtocError::validation("mean-field needs at least one sweep"));
    }
    let mut log_unary = unary.clone();
    for r in 0..log_unary.rows() {
        log_unary.row_mut(r).iter_mut().for_each(|p| *p = (*p + LOG_EPS).ln());
    }
    let mut q = unary.clone();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        q = sweep(graph, unary, &log_unary, &q);
        out.push(MarginalField::new(q.clone())?);
    }
    Ok(out)
}

pub fn mean_field(graph: &SuperVoxelGraph, unary: &Mat, iterations: usize) -> Result<MarginalField> {
    Ok(mean_field_trace(graph, unary, iterations)?.pop().unwrap())
}

/// Exact CRF energy of a labeling.
pub fn energy(graph: &SuperVoxelGraph, unary: &Mat, labeling: &[usize]) -> Result<f64> {
    check_unary(graph, unary)?;
    if labeling.len() != graph.num_nodes() || labeling.iter().any(|&l| l >= unary.cols()) {
        return Err(OtocError::validation("labeling does not fit the graph"));
    }
    let mut e = 0.0;
    for (j, &l) in labeling.iter().enumerate() {
        e -= (unary.get(j, l) + LOG_EPS).ln();
    }
    for a in 0..graph.num_nodes() {
        for b in a + 1..graph.num_nodes() {
            if labeling[a] != labeling[b] {
                e += graph.weight(a, b);
            }
        }
    }
    Ok(e)
}

/// Per node `(argmax category, its probability)`; lowest category wins ties.
pub fn map_labels(q: &MarginalField) -> Vec<(u32, f64)> {
    (0..q.num_nodes())
        .map(|j| {
            let l = q.q().argmax_row(j);
            (l as u32, q.q().get(j, l))
        })
        .collect()
}

pub fn marginals_csv(q: &Mat) -> String {
    let mut s = String::new();
    for r in q.iter_rows() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Writes `Q` as CSV: one row per super-voxel, one column per category.
pub fn write_marginals_csv(q: &Mat, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, marginals_csv(q))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_distance_kernel() {
        let pp = PairwiseParams::default();
        assert!((pp.weight(0.5, 0.5, 0.5, 0.5) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(pp.weight(0.0, 0.0, 0.0, 0.0), 1.0);
        let off = PairwiseParams { lambda_c: 0.0, lambda_p: 0.0, lambda_u: 0.0, lambda_f: 0.0, ..pp };
        assert_eq!(off.weight(3.0, 7.0, 1.0, 2.0), 1.0);
    }

    #[test]
    fn no_edges_is_unary_fixed_point() {
        let g = SuperVoxelGraph::from_weights(3, vec![0.0; 9]).unwrap();
        let u = Mat::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let q = mean_field(&g, &u, 7).unwrap();
        for j in 0..3 {
            for l in 0..2 {
                assert!((q.q().get(j, l) - u.get(j, l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_basics() {
        let g = SuperVoxelGraph::from_weights(2, vec![0.0, 0.4, 0.4, 0.0]).unwrap();
        let u = Mat::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let e_same = energy(&g, &u, &[1, 1]).unwrap();
        assert!((e_same - (-(0.5f64 + LOG_EPS).ln() - (0.75f64 + LOG_EPS).ln())).abs() < 1e-12);
        let e_diff = energy(&g, &u, &[1, 0]).unwrap();
        assert!((e_diff - (-(0.5f64 + LOG_EPS).ln() - (0.25f64 + LOG_EPS).ln() + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn map_labels_ties_to_lowest() {
        let q = MarginalField::new(Mat::from_rows(&[vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(map_labels(&q), vec![(0, 0.7), (0, 0.5)]);
    }

    #[test]
    fn asymmetric_weights_rejected() {
        assert!(SuperVoxelGraph::from_weights(2, vec![0.0, 0.3, 0.4, 0.0]).is_err());
        assert!(SuperVoxelGraph::from_weights(2, vec![0.0, 1.5, 1.5, 0.0]).is_err());
    }

    #[test]
    fn knn_truncation_keeps_strongest() {
        let mut w = vec![0.0, 0.9, 0.1, 0.9, 0.0, 0.5, 0.1, 0.5, 0.0];
        truncate_to_knn(&mut w, 3, 1);
        assert_eq!(w, vec![0.0, 0.9, 0.0, 0.9, 0.0, 0.5, 0.0, 0.5, 0.0]);
    }
}
