//! Over-segmentation into super-voxels and super-voxel pooling.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{OtocError, Result};
use crate::features::FeatureMatrix;
use crate::knn::KnnGraph;
use crate::mat::Mat;
use crate::scene::{read_exact, read_u32, Scene};

pub const PARTITION_MAGIC: &[u8; 4] = b"OTSP";
pub const PARTITION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionParams {
    pub k_neighbors: usize,
    /// Largest angle (radians) between a point normal and the region's mean normal.
    pub normal_angle_max: f64,
    /// Largest RGB distance to the region's mean color, in `[0, sqrt(3)]`.
    pub color_dist_max: f64,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            k_neighbors: 10,
            normal_angle_max: 0.35,
            color_dist_max: 0.25,
            min_size: 10,
            max_size: 5000,
        }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(OtocError::validation("k_neighbors must be positive"));
        }
        if !(self.normal_angle_max > 0.0 && self.normal_angle_max < std::f64::consts::FRAC_PI_2) {
            return Err(OtocError::validation("normal_angle_max must lie in (0, pi/2)"));
        }
        if !(0.0..=3f64.sqrt()).contains(&self.color_dist_max) {
            return Err(OtocError::validation("color_dist_max must lie in [0, sqrt(3)]"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(OtocError::validation("need 0 < min_size <= max_size"));
        }
        Ok(())
    }
}

/// Disjoint cover of a scene's points by super-voxels with contiguous ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperVoxelPartition {
    assignment: Vec<u32>,
    members: Vec<Vec<u32>>,
}

impl SuperVoxelPartition {
    /// Builds a partition from arbitrary ids, compacting them to `0..M` in
    /// order of first appearance.
    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        if ids.is_empty() {
            return Err(OtocError::validation("partition must cover at least one point"));
        }
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut members: Vec<Vec<u32>> = Vec::new();
        let assignment = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let next = remap.len() as u32;
                let sv = *remap.entry(*id).or_insert(next);
                if sv as usize == members.len() {
                    members.push(Vec::new());
                }
                members[sv as usize].push(i as u32);
                sv
            })
            .collect();
        Ok(SuperVoxelPartition { assignment, members })
    }

    #[inline]
    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    #[inline]
    pub fn num_supervoxels(&self) -> usize {
        self.members.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    #[inline]
    pub fn supervoxel_of(&self, point: usize) -> usize {
        self.assignment[point] as usize
    }

    #[inline]
    pub fn members(&self, sv: usize) -> &[u32] {
        &self.members[sv]
    }

    pub fn member_lists(&self) -> &[Vec<u32>] {
        &self.members
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.assignment.len());
        out.extend_from_slice(PARTITION_MAGIC);
        out.extend_from_slice(&PARTITION_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.assignment.len() as u32).to_le_bytes());
        for id in &self.assignment {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    /// Parses a partition file; `expected_points` is the owning scene's size.
    pub fn from_bytes(bytes: &[u8], expected_points: usize) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != PARTITION_MAGIC {
            return Err(OtocError::format(format!("bad partition magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != PARTITION_VERSION {
            return Err(OtocError::format(format!("unsupported partition version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if n != expected_points || r.len() != 4 * expected_points {
            return Err(OtocError::validation(format!(
                "partition holds {} ids (header says {n}), scene has {expected_points} points",
                r.len() / 4
            )));
        }
        let ids: Vec<u32> = r.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_ids(&ids)
    }
}

pub fn load_partition(path: impl AsRef<Path>, scene: &Scene) -> Result<SuperVoxelPartition> {
    SuperVoxelPartition::from_bytes(&fs::read(path)?, scene.len())
}

pub fn save_partition(part: &SuperVoxelPartition, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, part.to_bytes())?;
    Ok(())
}

struct Region {
    normal_sum: [f64; 3],
    color_sum: [f64; 3],
    size: usize,
}

impl Region {
    fn mean_color(&self) -> [f64; 3] {
        self.color_sum.map(|c| c / self.size as f64)
    }
}

/// Breadth-first region growing over the k-NN graph.
///
/// Seeds are taken in ascending point order. A neighbor joins when its normal
/// is within `normal_angle_max` of the region's mean normal (normals are
/// unsigned), its color is within `color_dist_max` of the region's mean color
/// and the region is below `max_size`. Regions smaller than `min_size` are then
/// merged into the adjacent region with the closest mean color.
pub fn partition_region_growing(
    scene: &Scene,
    features: &FeatureMatrix,
    params: &PartitionParams,
) -> Result<SuperVoxelPartition> {
    params.validate()?;
    let n = scene.len();
    if features.rows() != n {
        return Err(OtocError::validation("features do not belong to this scene"));
    }
    if n <= params.k_neighbors {
        return Err(OtocError::validation("scene has too few points for the partition k-NN graph"));
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| scene.point(i)).collect();
    let knn = KnnGraph::build(&pts, params.k_neighbors);
    let cos_min = params.normal_angle_max.cos();
    let color_max2 = params.color_dist_max * params.color_dist_max;

    const UNSET: u32 = u32::MAX;
    let mut label = vec![UNSET; n];
    let mut regions: Vec<Region> = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if label[seed] != UNSET {
            continue;
        }
        let id = regions.len() as u32;
        label[seed] = id;
        let mut region = Region { normal_sum: features.normal(seed), color_sum: scene.color(seed), size: 1 };
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in knn.neighbors(p) {
                let q = q as usize;
                if label[q] != UNSET || region.size >= params.max_size {
                    continue;
                }
                let ns = region.normal_sum;
                let nlen = (ns[0] * ns[0] + ns[1] * ns[1] + ns[2] * ns[2]).sqrt();
                let nq = features.normal(q);
                let cos = (ns[0] * nq[0] + ns[1] * nq[1] + ns[2] * nq[2]) / nlen.max(f64::MIN_POSITIVE);
                if cos.abs() < cos_min {
                    continue;
                }
                let mc = region.mean_color();
                let cq = scene.color(q);
                let dc = (0..3).map(|d| (cq[d] - mc[d]).powi(2)).sum::<f64>();
                if dc > color_max2 {
                    continue;
                }
                label[q] = id;
                let sign = if cos < 0.0 { -1.0 } else { 1.0 };
                for d in 0..3 {
                    region.normal_sum[d] += sign * nq[d];
                    region.color_sum[d] += cq[d];
                }
                region.size += 1;
                queue.push_back(q);
            }
        }
        regions.push(region);
    }

    merge_small_regions(&mut label, &regions, &knn, params.min_size);
    SuperVoxelPartition::from_ids(&label)
}

fn merge_small_regions(label: &mut [u32], regions: &[Region], knn: &KnnGraph, min_size: usize) {
    let r = regions.len();
    let mut parent: Vec<usize> = (0..r).collect();
    let mut color_sum: Vec<[f64; 3]> = regions.iter().map(|g| g.color_sum).collect();
    let mut size: Vec<usize> = regions.iter().map(|g| g.size).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, &l) in label.iter().enumerate() {
        members[l as usize].push(i);
    }
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for id in 0..r {
        if find(&mut parent, id) != id || size[id] >= min_size {
            continue;
        }
        let mean = color_sum[id].map(|c| c / size[id] as f64);
        let mut best: Option<(f64, usize)> = None;
        for &p in &members[id] {
            for &q in knn.neighbors(p) {
                let other = find(&mut parent, label[q as usize] as usize);
                if other == id {
                    continue;
                }
                let om = color_sum[other].map(|c| c / size[other] as f64);
                let d = (0..3).map(|k| (om[k] - mean[k]).powi(2)).sum::<f64>();
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && other < bid),
                };
                if better {
                    best = Some((d, other));
                }
            }
        }
        if let Some((_, target)) = best {
            parent[id] = target;
            let moved = std::mem::take(&mut members[id]);
            for &p in &moved {
                label[p] = target as u32;
            }
            members[target].extend(moved);
            for k in 0..3 {
                color_sum[target][k] += color_sum[id][k];
            }
            size[target] += size[id];
        }
    }
}

/// Mean of each super-voxel's member rows of a row-stochastic matrix.
pub fn pool_distribution(per_point: &Mat, part: &SuperVoxelPartition) -> Result<Mat> {
    per_point.check_row_stochastic(1e-6)?;
    pool_vectors(per_point, part)
}

/// Mean of each super-voxel's member rows.
pub fn pool_vectors(per_point: &Mat, part: &SuperVoxelPartition) -> Result<Mat> {
    if per_point.rows() != part.num_points() {
        return Err(OtocError::validation(format!(
            "matrix has {} rows, partition covers {} points",
            per_point.rows(),
            part.num_points()
        )));
    }
    let cols = per_point.cols();
    let mut out = Mat::zeros(part.num_supervoxels(), cols);
    for (j, mem) in part.member_lists().iter().enumerate() {
        let row = out.row_mut(j);
        for &i in mem {
            for (o, v) in row.iter_mut().zip(per_point.row(i as usize)) {
                *o += v;
            }
        }
        let inv = 1.0 / mem.len() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Pools a feature matrix (e.g. per-point descriptors) to super-voxels.
pub fn pool_features(features: &FeatureMatrix, part: &SuperVoxelPartition) -> Result<Mat> {
    pool_vectors(&Mat::from_vec(features.rows(), features.dim(), features.values().to_vec())?, part)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compaction_by_first_appearance() {
        let p = SuperVoxelPartition::from_ids(&[5, 5, 9]).unwrap();
        assert_eq!(p.assignment(), &[0, 0, 1]);
        assert_eq!(p.num_supervoxels(), 2);
        let q = SuperVoxelPartition::from_ids(&[0, 1, 2]).unwrap();
        assert_eq!(q.assignment(), &[0, 1, 2]);
        let r = SuperVoxelPartition::from_ids(&[7, 3, 7, 1]).unwrap();
        assert_eq!(r.assignment(), &[0, 1, 0, 2]);
        assert_eq!(r.members(0), &[0, 2]);
    }

    #[test]
    fn file_count_mismatch() {
        let p = SuperVoxelPartition::from_ids(&[0, 1, 1]).unwrap();
        let bytes = p.to_bytes();
        assert!(matches!(SuperVoxelPartition::from_bytes(&bytes, 4), Err(OtocError::Validation(_))));
        assert!(matches!(
            SuperVoxelPartition::from_bytes(&bytes[..bytes.len() - 4], 3),
            Err(OtocError::Validation(_))
        ));
        assert_eq!(SuperVoxelPartition::from_bytes(&bytes, 3).unwrap(), p);
    }

    #[test]
    fn pooling_singletons_and_pairs() {
        let part = SuperVoxelPartition::from_ids(&[0, 1, 1]).unwrap();
        let probs = Mat::from_rows(&[vec![0.3, 0.7], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pooled = pool_distribution(&probs, &part).unwrap();
        assert_eq!(pooled.row(0), &[0.3, 0.7]);
        assert_eq!(pooled.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn pooling_rejects_non_stochastic() {
        let part = SuperVoxelPartition::from_ids(&[0, 0]).unwrap();
        let bad = Mat::from_rows(&[vec![0.3, 0.3], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(pool_distribution(&bad, &part), Err(OtocError::Validation(_))));
    }

    #[test]
    fn params_validation() {
        assert!(PartitionParams::default().validate().is_ok());
        let p = PartitionParams { min_size: 20, max_size: 10, ..Default::default() };
        assert!(p.validate().is_err());
        let p = PartitionParams { normal_angle_max: 2.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
