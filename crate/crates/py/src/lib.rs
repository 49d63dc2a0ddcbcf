//! Python bindings: scenes, partitions, clicks, mean-field inference,
//! metrics and the self-training driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use otoc::annotate::{expand_clicks as expand, simulate_clicks as simulate, Click, ClickSet, Provenance};
use otoc::config::Config;
use otoc::graph::{energy as crf_energy, mean_field as crf_mean_field, SuperVoxelGraph};
use otoc::mat::Mat;
use otoc::selftrain::{prepare_scenes, report_csv, run, run_fully_supervised, RunOptions};
use otoc::{OtocError, SynthSpec};

fn to_py(e: OtocError) -> PyErr {
    match e {
        OtocError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(to_py)
}

fn label_or_minus_one(v: Option<u32>) -> i64 {
    v.map_or(-1, i64::from)
}

#[pyclass(module = "pyotoc", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: otoc::Scene,
}

#[pymethods]
impl Scene {
    /// Builds a scene from per-point lists; labels use -1 for "none".
    #[new]
    fn new(
        points: Vec<[f32; 3]>,
        colors: Vec<[u8; 3]>,
        semantic: Vec<i64>,
        instance: Vec<i64>,
        num_categories: usize,
    ) -> PyResult<Self> {
        let opt = |v: Vec<i64>| -> PyResult<Vec<Option<u32>>> {
            v.into_iter()
                .map(|x| match x {
                    -1 => Ok(None),
                    x if (0..=u32::MAX as i64).contains(&x) => Ok(Some(x as u32)),
                    x => Err(PyValueError::new_err(format!("label {x} out of range"))),
                })
                .collect()
        };
        let inner = otoc::Scene::new(points, colors, opt(semantic)?, opt(instance)?, num_categories).map_err(to_py)?;
        Ok(Scene { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Scene { inner: otoc::load_scene(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        otoc::save_scene(&self.inner, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_categories(&self) -> usize {
        self.inner.num_categories()
    }

    fn points(&self) -> Vec<[f32; 3]> {
        self.inner.raw_points().to_vec()
    }

    fn colors(&self) -> Vec<[u8; 3]> {
        self.inner.raw_colors().to_vec()
    }

    fn semantic(&self) -> Vec<i64> {
        self.inner.semantic().iter().map(|v| label_or_minus_one(*v)).collect()
    }

    fn instance(&self) -> Vec<i64> {
        self.inner.instance().iter().map(|v| label_or_minus_one(*v)).collect()
    }

    fn features(&self, k_neighbors: usize) -> PyResult<Vec<Vec<f64>>> {
        let f = otoc::extract_features(&self.inner, k_neighbors).map_err(to_py)?;
        Ok((0..f.rows()).map(|i| f.row(i).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Scene(points={}, categories={})", self.inner.len(), self.inner.num_categories())
    }
}

#[pyclass(module = "pyotoc", frozen, skip_from_py_object)]
struct Partition {
    inner: otoc::SuperVoxelPartition,
}

#[pymethods]
impl Partition {
    /// Region-growing over-segmentation with default parameters unless overridden.
    #[staticmethod]
    #[pyo3(signature = (scene, k_neighbors=10, normal_angle_max=None, color_dist_max=None))]
    fn compute(scene: &Scene, k_neighbors: usize, normal_angle_max: Option<f64>, color_dist_max: Option<f64>) -> PyResult<Self> {
        let mut params = otoc::PartitionParams::default();
        params.k_neighbors = k_neighbors;
        if let Some(a) = normal_angle_max {
            params.normal_angle_max = a;
        }
        if let Some(c) = color_dist_max {
            params.color_dist_max = c;
        }
        let features = otoc::extract_features(&scene.inner, k_neighbors).map_err(to_py)?;
        let inner = otoc::partition_region_growing(&scene.inner, &features, &params).map_err(to_py)?;
        Ok(Partition { inner })
    }

    #[staticmethod]
    fn from_ids(ids: Vec<u32>) -> PyResult<Self> {
        Ok(Partition { inner: otoc::SuperVoxelPartition::from_ids(&ids).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf, scene: &Scene) -> PyResult<Self> {
        Ok(Partition { inner: otoc::supervoxel::load_partition(path, &scene.inner).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        otoc::supervoxel::save_partition(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn num_supervoxels(&self) -> usize {
        self.inner.num_supervoxels()
    }

    fn assignment(&self) -> Vec<u32> {
        self.inner.assignment().to_vec()
    }
}

/// Synthetic room from the default generator settings and `seed`.
#[pyfunction]
fn synth_scene(seed: u64) -> PyResult<Scene> {
    let inner = otoc::generate_scene(&SynthSpec::default().with_seed(seed)).map_err(to_py)?;
    Ok(Scene { inner })
}

#[pyfunction]
fn generate_corpus(out_dir: PathBuf, count: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
    otoc::generate_corpus(&SynthSpec::default().with_seed(seed), count, out_dir).map_err(to_py)
}

/// `(point, category)` pairs.
#[pyfunction]
#[pyo3(signature = (scene, seed, clicks_per_thing=1, thing_fraction=1.0))]
fn simulate_clicks(scene: &Scene, seed: u64, clicks_per_thing: usize, thing_fraction: f64) -> PyResult<Vec<(u32, u32)>> {
    let set = simulate(&scene.inner, seed, clicks_per_thing, thing_fraction).map_err(to_py)?;
    Ok(set.clicks.iter().map(|c| (c.point, c.category)).collect())
}

/// Seed labels per super-voxel as `(label or -1, confidence, provenance)`
/// with provenance 0 absent, 1 seed, 2 propagated; plus the conflict count.
#[pyfunction]
fn expand_clicks(clicks: Vec<(u32, u32)>, partition: &Partition) -> PyResult<(Vec<(i64, f64, u8)>, usize)> {
    let set = ClickSet {
        clicks: clicks.into_iter().map(|(point, category)| Click { point, category }).collect(),
        rng_seed: 0,
        clicks_per_thing: 1,
        thing_fraction: 1.0,
    };
    let exp = expand(&set, &partition.inner).map_err(to_py)?;
    let rows = exp
        .labels
        .entries()
        .iter()
        .map(|e| {
            let prov = match e.provenance {
                Provenance::Absent => 0,
                Provenance::Seed => 1,
                Provenance::Propagated => 2,
            };
            (label_or_minus_one(e.label), e.confidence, prov)
        })
        .collect();
    Ok((rows, exp.conflicts))
}

/// Mean-field marginals for a dense weight matrix and unary distributions.
#[pyfunction]
#[pyo3(signature = (weights, unary, iterations=10))]
fn mean_field(weights: Vec<Vec<f64>>, unary: Vec<Vec<f64>>, iterations: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = weights.len();
    let graph = SuperVoxelGraph::from_weights(m, weights.concat()).map_err(to_py)?;
    let q = crf_mean_field(&graph, &mat(unary)?, iterations).map_err(to_py)?;
    Ok(q.q().iter_rows().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn energy(weights: Vec<Vec<f64>>, unary: Vec<Vec<f64>>, labeling: Vec<usize>) -> PyResult<f64> {
    let m = weights.len();
    let graph = SuperVoxelGraph::from_weights(m, weights.concat()).map_err(to_py)?;
    crf_energy(&graph, &mat(unary)?, &labeling).map_err(to_py)
}

/// Per-category IoU (None when undefined) and mIoU; gt uses -1 for unlabeled.
#[pyfunction]
fn miou(pred: Vec<u32>, gt: Vec<i64>, num_categories: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let gt: Vec<Option<u32>> = gt.into_iter().map(|g| u32::try_from(g).ok()).collect();
    let m = otoc::miou(&pred, &gt, num_categories).map_err(to_py)?;
    Ok((m.iou, m.miou))
}

/// Runs self-training and returns the per-iteration report as CSV text.
/// `overrides` holds configuration `key = value` pairs.
#[pyfunction]
#[pyo3(signature = (train, eval, seed=0, config=None, overrides=Vec::new(), fully_supervised=false))]
fn train_report(
    py: Python<'_>,
    train: Vec<PathBuf>,
    eval: Vec<PathBuf>,
    seed: u64,
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    fully_supervised: bool,
) -> PyResult<String> {
    let mut cfg = match config {
        Some(p) => Config::load(p).map_err(to_py)?,
        None => Config::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    py.detach(|| {
        let load = |paths: &[PathBuf]| -> Result<_, OtocError> {
            let scenes = paths.iter().map(otoc::load_scene).collect::<Result<Vec<_>, _>>()?;
            prepare_scenes(scenes, cfg.train.k_neighbors, &cfg.partition)
        };
        let train = load(&train)?;
        let eval = load(&eval)?;
        let state = if fully_supervised {
            run_fully_supervised(&cfg.train, &train, &eval, seed, &RunOptions::default())?
        } else {
            run(&cfg, &train, &eval, seed, &RunOptions::default())?
        };
        Ok(report_csv(&state.log))
    })
    .map_err(to_py)
}

#[pymodule]
fn pyotoc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Partition>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_clicks, m)?)?;
    m.add_function(wrap_pyfunction!(expand_clicks, m)?)?;
    m.add_function(wrap_pyfunction!(mean_field, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(train_report, m)?)?;
    Ok(())
}
