//! Python bindings for the point cloud translation core.

use pct_core::cloud::{read_point_bin, write_point_bin};
use pct_core::fusion;
use pct_core::metrics::{self, ConfusionMatrix};
use pct_core::neural::checkpoint::{read_checkpoint, write_checkpoint};
use pct_core::neural::{self as core_neural, GanTrainConfig};
use pct_core::pipeline::{translate_scan, TranslateOptions};
use pct_core::projection;
use pct_core::simulator::{self as sim, DegradeSpec};
use pct_core::{BeamModel, LabeledCloud, PctError, SemanticClassMap};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: PctError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cloud_from(points: Vec<[f32; 3]>, intensity: Option<Vec<f32>>) -> PyResult<pct_core::PointCloud> {
    pct_core::PointCloud::new(points, intensity).map_err(err)
}

/// Unlabeled points with optional intensity.
#[pyclass(module = "pct", frozen)]
struct PointCloud(pct_core::PointCloud);

#[pymethods]
impl PointCloud {
    #[new]
    #[pyo3(signature = (points, intensity=None))]
    fn new(points: Vec<[f32; 3]>, intensity: Option<Vec<f32>>) -> PyResult<Self> {
        Ok(Self(cloud_from(points, intensity)?))
    }

    /// Parses 16-byte x/y/z/intensity records.
    #[staticmethod]
    fn from_bin(data: &[u8]) -> PyResult<Self> {
        Ok(Self(read_point_bin(data).map_err(err)?))
    }

    fn to_bin<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &write_point_bin(&self.0))
    }

    fn points(&self) -> Vec<[f32; 3]> {
        self.0.points().to_vec()
    }

    fn intensity(&self) -> Option<Vec<f32>> {
        self.0.intensity().map(<[f32]>::to_vec)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(len={})", self.0.len())
    }
}

/// Points with one semantic label each.
#[pyclass(module = "pct", frozen)]
struct LabeledPointCloud(LabeledCloud);

#[pymethods]
impl LabeledPointCloud {
    #[new]
    #[pyo3(signature = (points, labels, intensity=None))]
    fn new(points: Vec<[f32; 3]>, labels: Vec<u32>, intensity: Option<Vec<f32>>) -> PyResult<Self> {
        Ok(Self(LabeledCloud::new(cloud_from(points, intensity)?, labels).map_err(err)?))
    }

    fn cloud(&self) -> PointCloud {
        PointCloud(self.0.cloud.clone())
    }

    fn points(&self) -> Vec<[f32; 3]> {
        self.0.cloud.points().to_vec()
    }

    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("LabeledPointCloud(len={})", self.0.len())
    }
}

/// Spherical sensor geometry; angles are given in degrees.
#[pyclass(module = "pct", name = "BeamModel", frozen)]
struct Beam(BeamModel);

#[pymethods]
impl Beam {
    #[new]
    #[pyo3(signature = (rows=64, cols=1024, fov_up_deg=3.0, fov_down_deg=-25.0, max_range=120.0))]
    fn new(rows: usize, cols: usize, fov_up_deg: f64, fov_down_deg: f64, max_range: f64) -> PyResult<Self> {
        let beam = BeamModel {
            rows,
            cols,
            fov_up: fov_up_deg.to_radians(),
            fov_down: fov_down_deg.to_radians(),
            max_range,
        };
        beam.validate().map_err(err)?;
        Ok(Self(beam))
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols
    }

    #[getter]
    fn max_range(&self) -> f64 {
        self.0.max_range
    }

    fn __repr__(&self) -> String {
        format!("BeamModel(rows={}, cols={}, max_range={})", self.0.rows, self.0.cols, self.0.max_range)
    }
}

/// Depth grid with per-pixel occupancy and source point indices.
#[pyclass(module = "pct", frozen)]
struct RangeImage(pct_core::RangeImage);

#[pymethods]
impl RangeImage {
    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols()
    }

    /// Row-major depths in meters; empty pixels are 0.
    fn depth(&self) -> Vec<f32> {
        self.0.depth().to_vec()
    }

    fn occupancy(&self) -> Vec<bool> {
        self.0.occupancy().to_vec()
    }

    fn occupied_fraction(&self) -> f64 {
        self.0.occupied_fraction()
    }

    /// Occupied fraction of each row.
    fn row_profile(&self) -> Vec<f64> {
        self.0.row_profile()
    }

    fn __repr__(&self) -> String {
        format!("RangeImage({}x{}, occupied={})", self.0.rows(), self.0.cols(), self.0.occupied_count())
    }
}

/// Trained network parameters as stored in a checkpoint.
#[pyclass(module = "pct", frozen)]
struct Network {
    params: core_neural::NetParams,
    config: GanTrainConfig,
}

#[pymethods]
impl Network {
    #[staticmethod]
    fn from_checkpoint(data: &[u8]) -> PyResult<Self> {
        let (params, config) = read_checkpoint(data).map_err(err)?;
        Ok(Self { params, config })
    }

    fn to_checkpoint<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &write_checkpoint(&self.params, &self.config))
    }

    #[getter]
    fn role(&self) -> String {
        self.params.role.to_string()
    }

    fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

fn train_config(options: Option<Vec<(String, String)>>) -> PyResult<GanTrainConfig> {
    let mut config = GanTrainConfig::default();
    for (key, value) in options.unwrap_or_default() {
        config.set(&key, &value).map_err(err)?;
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn networks(outcome: core_neural::TrainOutcome, config: GanTrainConfig) -> (Network, Network, Vec<(usize, String, f64)>) {
    let history = outcome
        .history
        .iter()
        .map(|r| (r.step, r.component.name().to_string(), r.value))
        .collect();
    (
        Network {
            params: outcome.generator,
            config: config.clone(),
        },
        Network {
            params: outcome.discriminator,
            config,
        },
        history,
    )
}

#[pyfunction]
fn project(cloud: &PointCloud, beam: &Beam) -> PyResult<RangeImage> {
    Ok(RangeImage(projection::project(&cloud.0, &beam.0).map_err(err)?))
}

#[pyfunction]
fn backproject(image: &RangeImage, beam: &Beam) -> PyResult<PointCloud> {
    Ok(PointCloud(projection::backproject(&image.0, &beam.0).map_err(err)?))
}

/// Exact earth mover's distance; returns `(total_cost, assignment)`.
#[pyfunction]
fn emd_exact(a: &PointCloud, b: &PointCloud) -> PyResult<(f64, Vec<usize>)> {
    let m = metrics::emd_exact(&a.0, &b.0).map_err(err)?;
    Ok((m.total_cost, m.assignment))
}

/// Entropic approximation; returns `(cost, converged)`.
#[pyfunction]
#[pyo3(signature = (a, b, epsilon=0.01, iterations=1000))]
fn emd_sinkhorn(a: &PointCloud, b: &PointCloud, epsilon: f64, iterations: usize) -> PyResult<(f64, bool)> {
    let r = metrics::emd_sinkhorn(&a.0, &b.0, epsilon, iterations).map_err(err)?;
    Ok((r.cost, r.converged))
}

#[pyfunction]
fn chamfer(a: &PointCloud, b: &PointCloud) -> PyResult<f64> {
    metrics::chamfer(&a.0, &b.0).map_err(err)
}

/// Mean IoU over the default class map, ignoring id 0.
#[pyfunction]
fn miou(truth: Vec<u32>, prediction: Vec<u32>) -> PyResult<f64> {
    let mut cm = ConfusionMatrix::for_map(&SemanticClassMap::default());
    cm.accumulate(&truth, &prediction).map_err(err)?;
    Ok(cm.miou().map_err(err)?.mean)
}

/// Keeps appearance points whose pixel is occupied in the guide. Returns
/// `(cloud, kept_indices, out_of_fov, degenerate_guide)`.
#[pyfunction]
fn fuse(appearance: &PointCloud, guide: &RangeImage, beam: &Beam) -> PyResult<(PointCloud, Vec<usize>, usize, bool)> {
    let out = fusion::fuse(&appearance.0, &guide.0, &beam.0).map_err(err)?;
    Ok((PointCloud(out.cloud), out.kept, out.out_of_fov, out.degenerate_guide))
}

/// Labels each translated point by a vote of its `k` nearest original points.
#[pyfunction]
#[pyo3(signature = (original, translated, k=1))]
fn transfer_labels(original: &LabeledPointCloud, translated: &PointCloud, k: usize) -> PyResult<LabeledPointCloud> {
    Ok(LabeledPointCloud(
        fusion::transfer_labels_k(&original.0, &translated.0, k).map_err(err)?,
    ))
}

/// Ray-casts one scan per trajectory pose; defaults to the bundled scene.
#[pyfunction]
#[pyo3(signature = (beam, scene=None, trajectory=None))]
fn simulate(beam: &Beam, scene: Option<&str>, trajectory: Option<&str>) -> PyResult<Vec<LabeledPointCloud>> {
    let scene = sim::build_scene(scene.unwrap_or(sim::TOY_SCENE), &SemanticClassMap::default()).map_err(err)?;
    let poses = sim::parse_trajectory(trajectory.unwrap_or(sim::TOY_TRAJECTORY)).map_err(err)?;
    poses
        .iter()
        .map(|pose| Ok(LabeledPointCloud(sim::raycast_scan(&scene, pose, &beam.0).map_err(err)?)))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (image, keep_row_stride=1, pixel_dropout_p=0.0, range_noise_sigma=0.0, max_range=120.0, seed=0))]
fn degrade(
    image: &RangeImage,
    keep_row_stride: usize,
    pixel_dropout_p: f64,
    range_noise_sigma: f64,
    max_range: f64,
    seed: u64,
) -> PyResult<RangeImage> {
    let spec = DegradeSpec {
        keep_row_stride,
        pixel_dropout_p,
        range_noise_sigma,
        max_range,
        seed,
    };
    Ok(RangeImage(sim::degrade(&image.0, &spec).map_err(err)?))
}

/// Trains the appearance pair. `options` are `(key, value)` training
/// overrides. Returns `(generator, discriminator, history)`.
#[pyfunction]
#[pyo3(signature = (source, target, beam, options=None))]
fn train_atm(
    source: Vec<PyRef<'_, LabeledPointCloud>>,
    target: Vec<PyRef<'_, PointCloud>>,
    beam: &Beam,
    options: Option<Vec<(String, String)>>,
) -> PyResult<(Network, Network, Vec<(usize, String, f64)>)> {
    let config = train_config(options)?;
    let source: Vec<LabeledCloud> = source.iter().map(|c| c.0.clone()).collect();
    let target: Vec<pct_core::PointCloud> = target.iter().map(|c| c.0.clone()).collect();
    let outcome = core_neural::atm_train(&source, &target, &beam.0, &config).map_err(err)?;
    Ok(networks(outcome, config))
}

/// Trains the sparsity pair on equally sized range images.
#[pyfunction]
#[pyo3(signature = (source, target, options=None))]
fn train_stm(
    source: Vec<PyRef<'_, RangeImage>>,
    target: Vec<PyRef<'_, RangeImage>>,
    options: Option<Vec<(String, String)>>,
) -> PyResult<(Network, Network, Vec<(usize, String, f64)>)> {
    let config = train_config(options)?;
    let source: Vec<pct_core::RangeImage> = source.iter().map(|i| i.0.clone()).collect();
    let target: Vec<pct_core::RangeImage> = target.iter().map(|i| i.0.clone()).collect();
    let outcome = core_neural::stm_train(&source, &target, &config).map_err(err)?;
    Ok(networks(outcome, config))
}

#[pyfunction]
fn stm_translate(generator: &Network, image: &RangeImage) -> PyResult<RangeImage> {
    Ok(RangeImage(core_neural::stm_translate(&generator.params, &image.0).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (generator, cloud, upsample_factor=2))]
fn atm_translate(generator: &Network, cloud: &PointCloud, upsample_factor: usize) -> PyResult<PointCloud> {
    Ok(PointCloud(
        core_neural::atm_translate(&generator.params, &cloud.0, upsample_factor).map_err(err)?,
    ))
}

/// Full scan translation: appearance, sparsity guide, fusion, label transfer.
#[pyfunction]
#[pyo3(signature = (source, generator_a, generator_s, beam, upsample_factor=2, label_neighbors=1))]
fn translate(
    source: &LabeledPointCloud,
    generator_a: &Network,
    generator_s: &Network,
    beam: &Beam,
    upsample_factor: usize,
    label_neighbors: usize,
) -> PyResult<LabeledPointCloud> {
    let options = TranslateOptions {
        upsample_factor,
        label_neighbors,
    };
    let out = translate_scan(&source.0, &generator_a.params, &generator_s.params, &beam.0, &options).map_err(err)?;
    Ok(LabeledPointCloud(out.cloud))
}

#[pymodule]
fn pct(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PointCloud>()?;
    m.add_class::<LabeledPointCloud>()?;
    m.add_class::<Beam>()?;
    m.add_class::<RangeImage>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(emd_exact, m)?)?;
    m.add_function(wrap_pyfunction!(emd_sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_labels, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(train_atm, m)?)?;
    m.add_function(wrap_pyfunction!(train_stm, m)?)?;
    m.add_function(wrap_pyfunction!(atm_translate, m)?)?;
    m.add_function(wrap_pyfunction!(stm_translate, m)?)?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    Ok(())
}
