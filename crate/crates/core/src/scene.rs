//! Labeled point clouds and the OTOC scene file.
//!
//! Layout (little endian): magic `OTOC`, version `u32 = 1`, point count `u32`,
//! category count `u32`, then one 23-byte record per point:
//! `x, y, z: f32`, `r, g, b: u8`, `semantic: i32`, `instance: i32`.
//! `-1` encodes an unlabeled point / a point without an instance.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use crate::error::{OtocError, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"OTOC";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HEADER_BYTES: usize = 16;
pub const SCENE_RECORD_BYTES: usize = 23;

/// A point cloud with colors and ground-truth semantic / instance labels.
///
/// Coordinates and colors are kept at file precision (`f32`, `u8`) so that an
/// in-memory scene and its saved form are always interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    points: Vec<[f32; 3]>,
    colors: Vec<[u8; 3]>,
    semantic: Vec<Option<u32>>,
    instance: Vec<Option<u32>>,
    num_categories: usize,
}

impl Scene {
    pub fn new(
        points: Vec<[f32; 3]>,
        colors: Vec<[u8; 3]>,
        semantic: Vec<Option<u32>>,
        instance: Vec<Option<u32>>,
        num_categories: usize,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(OtocError::validation("scene must contain at least one point"));
        }
        if colors.len() != n || semantic.len() != n || instance.len() != n {
            return Err(OtocError::validation(format!(
                "per-point sequences differ in length: points {n}, colors {}, semantic {}, instance {}",
                colors.len(),
                semantic.len(),
                instance.len()
            )));
        }
        if num_categories == 0 {
            return Err(OtocError::validation("scene needs at least one category"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(OtocError::validation(format!("point {i} has a non-finite coordinate")));
        }
        for (i, (s, inst)) in semantic.iter().zip(&instance).enumerate() {
            if let Some(c) = s {
                if *c as usize >= num_categories {
                    return Err(OtocError::validation(format!(
                        "point {i}: category {c} out of range 0..{num_categories}"
                    )));
                }
            }
            if inst.is_some() && s.is_none() {
                return Err(OtocError::validation(format!(
                    "point {i} has an instance id but no semantic label"
                )));
            }
        }
        Ok(Scene { points, colors, semantic, instance, num_categories })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn raw_points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn raw_colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// RGB normalized to `[0, 1]`.
    #[inline]
    pub fn color(&self, i: usize) -> [f64; 3] {
        let c = self.colors[i];
        [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
    }

    pub fn semantic(&self) -> &[Option<u32>] {
        &self.semantic
    }

    pub fn instance(&self) -> &[Option<u32>] {
        &self.instance
    }

    /// Distinct instance ids in ascending order.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.instance.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.len() {
            let p = self.point(i);
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    /// Same scene with every point shifted by `offset` (labels untouched).
    pub fn translated(&self, offset: [f32; 3]) -> Result<Scene> {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        Scene::new(points, self.colors.clone(), self.semantic.clone(), self.instance.clone(), self.num_categories)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(SCENE_HEADER_BYTES + n * SCENE_RECORD_BYTES);
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_categories as u32).to_le_bytes());
        for i in 0..n {
            for v in self.points[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&self.colors[i]);
            out.extend_from_slice(&encode_label(self.semantic[i]).to_le_bytes());
            out.extend_from_slice(&encode_label(self.instance[i]).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Scene> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != SCENE_MAGIC {
            return Err(OtocError::format(format!("bad scene magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != SCENE_VERSION {
            return Err(OtocError::format(format!("unsupported scene version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let need = n
            .checked_mul(SCENE_RECORD_BYTES)
            .ok_or_else(|| OtocError::format("point count overflows"))?;
        if r.len() < need {
            return Err(OtocError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("scene payload truncated: expected {need} bytes, found {}", r.len()),
            )));
        }
        if r.len() > need {
            return Err(OtocError::format(format!("{} trailing bytes after scene payload", r.len() - need)));
        }
        let mut points = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        let mut semantic = Vec::with_capacity(n);
        let mut instance = Vec::with_capacity(n);
        for rec in r.chunks_exact(SCENE_RECORD_BYTES) {
            let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            let i = |o: usize| i32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            points.push([f(0), f(4), f(8)]);
            colors.push([rec[12], rec[13], rec[14]]);
            semantic.push(decode_label(i(15))?);
            instance.push(decode_label(i(19))?);
        }
        Scene::new(points, colors, semantic, instance, c)
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    Scene::from_bytes(&fs::read(path)?)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, scene.to_bytes())?;
    Ok(())
}

fn encode_label(v: Option<u32>) -> i32 {
    v.map_or(-1, |x| x as i32)
}

fn decode_label(v: i32) -> Result<Option<u32>> {
    match v {
        -1 => Ok(None),
        x if x >= 0 => Ok(Some(x as u32)),
        x => Err(OtocError::validation(format!("label {x} is neither -1 nor non-negative"))),
    }
}

pub(crate) fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(OtocError::Io)
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point() -> Scene {
        Scene::new(vec![[0.0; 3]], vec![[0; 3]], vec![None], vec![None], 1).unwrap()
    }

    #[test]
    fn minimal_scene_layout() {
        let bytes = one_point().to_bytes();
        assert_eq!(bytes.len(), 4 + 12 + 23);
        assert_eq!(&bytes[..4], b"OTOC");
        assert_eq!(&bytes[bytes.len() - 8..], &[0xff; 8]);
        let back = Scene::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.semantic(), &[None]);
    }

    #[test]
    fn empty_scene_rejected() {
        let err = Scene::new(vec![], vec![], vec![], vec![], 3).unwrap_err();
        assert!(matches!(err, OtocError::Validation(_)));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = one_point().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Scene::from_bytes(&bytes), Err(OtocError::Format(_))));
        let mut bytes = one_point().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Scene::from_bytes(&bytes), Err(OtocError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let bytes = one_point().to_bytes();
        assert!(matches!(Scene::from_bytes(&bytes[..bytes.len() - 1]), Err(OtocError::Io(_))));
        assert!(matches!(Scene::from_bytes(&bytes[..6]), Err(OtocError::Io(_))));
    }

    #[test]
    fn label_out_of_range_is_validation_error() {
        let mut bytes = one_point().to_bytes();
        // semantic = 1 with C = 1
        bytes[16 + 15..16 + 19].copy_from_slice(&1i32.to_le_bytes());
        assert!(matches!(Scene::from_bytes(&bytes), Err(OtocError::Validation(_))));
        bytes[16 + 15..16 + 19].copy_from_slice(&(-7i32).to_le_bytes());
        assert!(matches!(Scene::from_bytes(&bytes), Err(OtocError::Validation(_))));
    }

    #[test]
    fn instance_without_semantic_rejected() {
        let err = Scene::new(vec![[0.0; 3]], vec![[0; 3]], vec![None], vec![Some(0)], 2).unwrap_err();
        assert!(matches!(err, OtocError::Validation(_)));
    }

    #[test]
    fn non_finite_rejected() {
        let err = Scene::new(vec![[f32::NAN, 0.0, 0.0]], vec![[0; 3]], vec![None], vec![None], 2).unwrap_err();
        assert!(matches!(err, OtocError::Validation(_)));
    }
}
