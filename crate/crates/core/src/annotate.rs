//! Simulated one-click-per-object annotation and its expansion to super-voxels.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{OtocError, Result};
use crate::rng;
use crate::scene::{read_exact, read_u32, Scene};
use crate::supervoxel::SuperVoxelPartition;

pub const LABELS_MAGIC: &[u8; 4] = b"OTPL";
pub const LABELS_VERSION: u32 = 1;
const LABEL_RECORD_BYTES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Click {
    pub point: u32,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickSet {
    pub clicks: Vec<Click>,
    pub rng_seed: u64,
    pub clicks_per_thing: usize,
    pub thing_fraction: f64,
}

/// Picks `ceil(thing_fraction * #instances)` instances uniformly without
/// replacement, then `clicks_per_thing` distinct points uniformly inside each.
///
/// Instances smaller than `clicks_per_thing` contribute all of their points.
pub fn simulate_clicks(scene: &Scene, seed: u64, clicks_per_thing: usize, thing_fraction: f64) -> Result<ClickSet> {
    if clicks_per_thing == 0 {
        return Err(OtocError::validation("clicks_per_thing must be at least 1"));
    }
    if !(thing_fraction > 0.0 && thing_fraction <= 1.0) {
        return Err(OtocError::validation("thing_fraction must lie in (0, 1]"));
    }
    let ids = scene.instance_ids();
    if ids.is_empty() {
        return Err(OtocError::validation("scene has no instances to click"));
    }
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); ids.len()];
    for (i, inst) in scene.instance().iter().enumerate() {
        if let Some(id) = inst {
            let slot = ids.binary_search(id).expect("id listed");
            members[slot].push(i as u32);
        }
    }
    // Guard against 0.1 * 30 = 3.0000000000000004.
    let wanted = ((thing_fraction * ids.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let wanted = wanted.min(ids.len());

    let mut rng = rng::derive(seed, rng::stream::CLICKS, 0);
    let mut chosen: Vec<usize> = sample(&mut rng, ids.len(), wanted).into_vec();
    chosen.sort_unstable();
    let mut clicks = Vec::new();
    for slot in chosen {
        let pts = &members[slot];
        let take = clicks_per_thing.min(pts.len());
        let mut picks: Vec<usize> = if take == pts.len() {
            (0..pts.len()).collect()
        } else if take == 1 {
            vec![rng.random_range(0..pts.len())]
        } else {
            sample(&mut rng, pts.len(), take).into_vec()
        };
        picks.sort_unstable();
        for k in picks {
            let point = pts[k];
            let category = scene.semantic()[point as usize].expect("instance points carry a category");
            clicks.push(Click { point, category });
        }
    }
    Ok(ClickSet { clicks, rng_seed: seed, clicks_per_thing, thing_fraction })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Absent = 0,
    Seed = 1,
    Propagated = 2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub label: Option<u32>,
    pub confidence: f64,
    pub provenance: Provenance,
}

impl PseudoLabel {
    pub const ABSENT: PseudoLabel = PseudoLabel { label: None, confidence: 0.0, provenance: Provenance::Absent };

    pub fn seed(category: u32) -> Self {
        PseudoLabel { label: Some(category), confidence: 1.0, provenance: Provenance::Seed }
    }

    pub fn propagated(category: u32, confidence: f64) -> Self {
        PseudoLabel { label: Some(category), confidence, provenance: Provenance::Propagated }
    }
}

/// One entry per super-voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    entries: Vec<PseudoLabel>,
}

impl PseudoLabels {
    pub fn absent(m: usize) -> Self {
        PseudoLabels { entries: vec![PseudoLabel::ABSENT; m] }
    }

    pub fn from_entries(entries: Vec<PseudoLabel>) -> Result<Self> {
        for (j, e) in entries.iter().enumerate() {
            let ok = match e.provenance {
                Provenance::Absent => e.label.is_none(),
                Provenance::Seed => e.label.is_some() && e.confidence == 1.0,
                Provenance::Propagated => e.label.is_some() && (0.0..=1.0).contains(&e.confidence),
            };
            if !ok {
                return Err(OtocError::validation(format!("inconsistent pseudo label at super-voxel {j}: {e:?}")));
            }
        }
        Ok(PseudoLabels { entries })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, j: usize) -> PseudoLabel {
        self.entries[j]
    }

    #[inline]
    pub fn label(&self, j: usize) -> Option<u32> {
        self.entries[j].label
    }

    pub fn entries(&self) -> &[PseudoLabel] {
        &self.entries
    }

    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label.is_some()).count()
    }

    /// Fraction of super-voxels carrying a label.
    pub fn coverage(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.labeled_count() as f64 / self.entries.len() as f64
    }

    /// Keeps only the seed entries.
    pub fn seeds_only(&self) -> PseudoLabels {
        PseudoLabels {
            entries: self
                .entries
                .iter()
                .map(|e| if e.provenance == Provenance::Seed { *e } else { PseudoLabel::ABSENT })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + LABEL_RECORD_BYTES * self.len());
        out.extend_from_slice(LABELS_MAGIC);
        out.extend_from_slice(&LABELS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.label.map_or(-1i32, |l| l as i32).to_le_bytes());
            out.extend_from_slice(&(e.confidence as f32).to_le_bytes());
            out.push(e.provenance as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != LABELS_MAGIC {
            return Err(OtocError::format(format!("bad pseudo-label magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != LABELS_VERSION {
            return Err(OtocError::format(format!("unsupported pseudo-label version {version}")));
        }
        let m = read_u32(&mut r)? as usize;
        if r.len() < m * LABEL_RECORD_BYTES {
            return Err(OtocError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "pseudo-label payload truncated",
            )));
        }
        if r.len() > m * LABEL_RECORD_BYTES {
            return Err(OtocError::format("trailing bytes after pseudo-label payload"));
        }
        let mut entries = Vec::with_capacity(m);
        for rec in r.chunks_exact(LABEL_RECORD_BYTES) {
            let label = i32::from_le_bytes(rec[0..4].try_into().unwrap());
            let confidence = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
            let provenance = match rec[8] {
                0 => Provenance::Absent,
                1 => Provenance::Seed,
                2 => Provenance::Propagated,
                p => return Err(OtocError::format(format!("unknown provenance code {p}"))),
            };
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as u32),
                l => return Err(OtocError::validation(format!("label {l} out of range"))),
            };
            entries.push(PseudoLabel { label, confidence, provenance });
        }
        PseudoLabels::from_entries(entries)
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<PseudoLabels> {
    PseudoLabels::from_bytes(&fs::read(path)?)
}

pub fn save_labels(labels: &PseudoLabels, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, labels.to_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub labels: PseudoLabels,
    /// Super-voxels dropped because clicks of different categories landed in them.
    pub conflicts: usize,
}

/// Spreads every click to the super-voxel containing it.
pub fn expand_clicks(clicks: &ClickSet, part: &SuperVoxelPartition) -> Result<Expansion> {
    #[derive(Clone, Copy)]
    enum Slot {
        Empty,
        Category(u32),
        Conflict,
    }
    let mut state = vec![Slot::Empty; part.num_supervoxels()];
    for c in &clicks.clicks {
        let p = c.point as usize;
        if p >= part.num_points() {
            return Err(OtocError::validation(format!("click on point {p} outside the partition")));
        }
        let sv = part.supervoxel_of(p);
        state[sv] = match state[sv] {
            Slot::Empty => Slot::Category(c.category),
            Slot::Category(prev) if prev == c.category => Slot::Category(prev),
            _ => Slot::Conflict,
        };
    }
    let conflicts = state.iter().filter(|s| matches!(s, Slot::Conflict)).count();
    let entries = state
        .into_iter()
        .map(|s| match s {
            Slot::Category(cat) => PseudoLabel::seed(cat),
            _ => PseudoLabel::ABSENT,
        })
        .collect();
    Ok(Expansion { labels: PseudoLabels { entries }, conflicts })
}
