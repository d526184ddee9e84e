//! Python bindings: geometry primitives, environments, map building,
//! localization and the ambiguity bound.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use reflmap::bounds::{self, BoundInputs};
use reflmap::envsim::{self, EnvironmentSpec, NoiseModel, SampleOptions};
use reflmap::geometry::{self, MeasurementVariance};
use reflmap::grid::GridGeometry;
use reflmap::localizer::{self, LocalizeConfig, ScoreContext, ScoreOptions};
use reflmap::mapbuilder::{self, RecoveryOptions, SampleCloud, SheafMask};

create_exception!(reflmap_py, ReflmapError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    ReflmapError::new_err(e.to_string())
}

#[pyclass(name = "Point2", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyPoint2(geometry::Point2);

#[pymethods]
impl PyPoint2 {
    #[new]
    fn new(x: f64, y: f64) -> Self {
        Self(geometry::Point2::new(x, y))
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }

    fn distance(&self, other: PyRef<'_, PyPoint2>) -> f64 {
        self.0.distance(other.0)
    }

    fn __repr__(&self) -> String {
        format!("Point2({}, {})", self.0.x, self.0.y)
    }
}

/// One (AoA, ToA) observation; `theta` in radians, `tau` in seconds.
#[pyclass(name = "Measurement", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyMeasurement(geometry::Measurement);

#[pymethods]
impl PyMeasurement {
    #[new]
    fn new(theta: f64, tau: f64) -> PyResult<Self> {
        geometry::Measurement::new(theta, tau).map(Self).map_err(err)
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau()
    }

    #[getter]
    fn path_length(&self) -> f64 {
        self.0.path_length()
    }

    fn __repr__(&self) -> String {
        format!("Measurement(theta={}, tau={})", self.0.theta(), self.0.tau())
    }
}

#[pyfunction]
fn forward_path(p_u: PyRef<'_, PyPoint2>, p_b: PyRef<'_, PyPoint2>, s: PyRef<'_, PyPoint2>) -> PyResult<PyMeasurement> {
    geometry::forward_path(p_u.0, p_b.0, s.0).map(PyMeasurement).map_err(err)
}

#[pyfunction]
fn invert_measurement(
    m: PyRef<'_, PyMeasurement>,
    p_u: PyRef<'_, PyPoint2>,
    p_b: PyRef<'_, PyPoint2>,
) -> PyResult<PyPoint2> {
    geometry::invert_measurement(&m.0, p_u.0, p_b.0).map(PyPoint2).map_err(err)
}

/// Reflector covariance `[[xx, xy], [yx, yy]]` in m² for the given
/// measurement variances (rad², s²).
#[pyfunction]
fn measurement_covariance(
    m: PyRef<'_, PyMeasurement>,
    var_theta: f64,
    var_tau: f64,
    p_u: PyRef<'_, PyPoint2>,
    p_b: PyRef<'_, PyPoint2>,
) -> PyResult<[[f64; 2]; 2]> {
    let v = MeasurementVariance::new(var_theta, var_tau).map_err(err)?;
    let c = geometry::measurement_covariance(&m.0, &v, p_u.0, p_b.0).map_err(err)?;
    Ok([[c.xx, c.xy], [c.yx, c.yy]])
}

#[pyclass(name = "MeasurementSet", frozen)]
pub struct PyMeasurementSet(envsim::MeasurementSet);

#[pymethods]
impl PyMeasurementSet {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn blind(&self) -> bool {
        self.0.blind
    }

    /// `(theta, tau, var_theta, var_tau)` per path.
    fn entries(&self) -> Vec<(f64, f64, f64, f64)> {
        self.0.entries.iter().map(|(m, v)| (m.theta(), m.tau(), v.var_theta, v.var_tau)).collect()
    }
}

#[pyclass(name = "Environment", frozen)]
pub struct PyEnvironment(envsim::Environment);

#[pymethods]
impl PyEnvironment {
    /// Rectangular room with `per_wall` reflectors on each wall.
    #[staticmethod]
    fn rectangle(width: f64, height: f64, per_wall: usize) -> PyResult<Self> {
        let spec = EnvironmentSpec::Rectangle { width, height, per_wall, bs: None };
        envsim::generate_environment(&spec, 0).map(Self).map_err(err)
    }

    /// Random disk clusters covering `width * height / ratio`.
    #[staticmethod]
    #[pyo3(signature = (ratio, seed, width=200.0, height=200.0, reflector_count=500))]
    fn ratio_scatter(ratio: f64, seed: u64, width: f64, height: f64, reflector_count: usize) -> PyResult<Self> {
        let spec = EnvironmentSpec::RatioScatter {
            ratio,
            width,
            height,
            disk_radius: 4.0,
            reflector_count,
            raster_pitch: 0.25,
            bs: None,
        };
        envsim::generate_environment(&spec, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        envsim::Environment::from_json(s).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn reflectors(&self) -> Vec<PyPoint2> {
        self.0.reflectors.iter().copied().map(PyPoint2).collect()
    }

    #[getter]
    fn bs(&self) -> PyPoint2 {
        PyPoint2(self.0.bs)
    }

    #[getter]
    fn rol_area(&self) -> f64 {
        self.0.rol.area()
    }

    #[getter]
    fn realized_ratio(&self) -> Option<f64> {
        self.0.realized_ratio()
    }

    fn contains(&self, p: PyRef<'_, PyPoint2>) -> bool {
        self.0.rol.contains(p.0)
    }

    #[pyo3(signature = (spacing=0.5, offset=0.5))]
    fn boundary_test_points(&self, spacing: f64, offset: f64) -> PyResult<Vec<PyPoint2>> {
        Ok(envsim::boundary_test_points(&self.0, spacing, offset).map_err(err)?.into_iter().map(PyPoint2).collect())
    }

    /// One epoch of `n_r` uniformly activated paths; sigmas in degrees and ns.
    #[pyo3(signature = (p_u, n_r, sigma_theta_deg=0.0, sigma_tau_ns=0.0, seed=0, epoch=0))]
    fn sample_measurements(
        &self,
        p_u: PyRef<'_, PyPoint2>,
        n_r: usize,
        sigma_theta_deg: f64,
        sigma_tau_ns: f64,
        seed: u64,
        epoch: u64,
    ) -> PyResult<PyMeasurementSet> {
        let noise = NoiseModel::from_degrees_ns(sigma_theta_deg, sigma_tau_ns, seed).map_err(err)?;
        envsim::sample_measurements(&self.0, p_u.0, n_r, &noise, epoch).map(PyMeasurementSet).map_err(err)
    }
}

/// Recovered reflector map with its ε-covering sheaf.
#[pyclass(name = "ReflectorMap", frozen)]
pub struct PyReflectorMap {
    sheaf: SheafMask,
    samples: Vec<geometry::Point2>,
    diff_norms: Vec<f64>,
}

#[pymethods]
impl PyReflectorMap {
    #[getter]
    fn sheaf_area(&self) -> f64 {
        self.sheaf.area
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.sheaf.epsilon
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.samples.len()
    }

    #[getter]
    fn diff_norms(&self) -> Vec<f64> {
        self.diff_norms.clone()
    }

    fn contains(&self, p: PyRef<'_, PyPoint2>) -> bool {
        self.sheaf.contains(p.0)
    }

    /// Fraction of `points` inside the sheaf.
    fn coverage(&self, points: Vec<PyRef<'_, PyPoint2>>) -> f64 {
        let pts: Vec<_> = points.iter().map(|p| p.0).collect();
        self.sheaf.coverage(&pts)
    }
}

/// Offline phase: boundary test points, all visible reflectors, inversion,
/// band-limited recovery and the quantile sheaf.
#[pyfunction]
#[pyo3(signature = (env, sigma_theta_deg=0.345, sigma_tau_ns=3.0, seed=0, spacing=0.5, pitch=0.25, epsilon=0.05, lambda_m=1.0))]
#[allow(clippy::too_many_arguments)]
fn build_map(
    py: Python<'_>,
    env: PyRef<'_, PyEnvironment>,
    sigma_theta_deg: f64,
    sigma_tau_ns: f64,
    seed: u64,
    spacing: f64,
    pitch: f64,
    epsilon: f64,
    lambda_m: f64,
) -> PyResult<PyReflectorMap> {
    let env = &env.0;
    py.detach(|| {
        let noise = NoiseModel::from_degrees_ns(sigma_theta_deg, sigma_tau_ns, seed).map_err(err)?;
        let tps = envsim::boundary_test_points(env, spacing, 0.5).map_err(err)?;
        let opts = SampleOptions { activation: envsim::Activation::AllVisible, ..Default::default() };
        let offline = envsim::collect_offline_with(env, &tps, 0, &noise, &opts).map_err(err)?;
        let samples = offline.points();
        let cloud = SampleCloud::new(samples.clone()).map_err(err)?;
        let (lo, hi) = env.boundary.bbox();
        let geometry = GridGeometry::covering(lo, hi, pitch, 2.0).map_err(err)?;
        let rec = mapbuilder::recover_map(&cloud, geometry, &RecoveryOptions { lambda_m, ..Default::default() })
            .map_err(err)?;
        let sheaf = mapbuilder::covering_sheaf(&rec.field, &cloud, epsilon).map_err(err)?;
        Ok(PyReflectorMap { sheaf, samples, diff_norms: rec.diff_norms })
    })
}

/// Localizes one epoch; returns `(position, log_score)` or `None` when blind.
#[pyfunction]
#[pyo3(signature = (map, env, measurements, seed=0))]
fn localize(
    py: Python<'_>,
    map: PyRef<'_, PyReflectorMap>,
    env: PyRef<'_, PyEnvironment>,
    measurements: PyRef<'_, PyMeasurementSet>,
    seed: u64,
) -> PyResult<Option<(PyPoint2, f64)>> {
    if measurements.0.is_empty() {
        return Ok(None);
    }
    let (sheaf, env, set) = (&map.sheaf, &env.0, &measurements.0);
    py.detach(|| {
        let ctx = ScoreContext::new(set, sheaf, env.bs, env.rol.clone(), ScoreOptions::default()).map_err(err)?;
        let r = localizer::localize(&ctx, &LocalizeConfig { seed, ..Default::default() }).map_err(err)?;
        Ok(Some((PyPoint2(r.p_hat), r.log_score)))
    })
}

/// Smallest ambiguity area (m²) compatible with `n_r` paths at area ratio `ratio`.
#[pyfunction]
#[pyo3(signature = (vol_sa, ratio, n_r, epsilon=0.05))]
fn ambiguity_lower_bound(vol_sa: f64, ratio: f64, n_r: u32, epsilon: f64) -> PyResult<f64> {
    Ok(bounds::ambiguity_lower_bound(&BoundInputs::from_ratio(vol_sa, ratio, n_r, epsilon).map_err(err)?))
}

/// The same bound in bits of localization accuracy.
#[pyfunction]
#[pyo3(signature = (vol_sa, ratio, n_r, epsilon=0.05))]
fn ra_upper_bound(vol_sa: f64, ratio: f64, n_r: u32, epsilon: f64) -> PyResult<f64> {
    Ok(bounds::ra_upper_bound(&BoundInputs::from_ratio(vol_sa, ratio, n_r, epsilon).map_err(err)?))
}

#[pyfunction]
fn circular_radius(area: f64) -> f64 {
    bounds::circular_radius(area)
}

#[pymodule]
fn reflmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", reflmap::VERSION)?;
    m.add("ReflmapError", m.py().get_type::<ReflmapError>())?;
    m.add_class::<PyPoint2>()?;
    m.add_class::<PyMeasurement>()?;
    m.add_class::<PyMeasurementSet>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyReflectorMap>()?;
    m.add_function(wrap_pyfunction!(forward_path, m)?)?;
    m.add_function(wrap_pyfunction!(invert_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(measurement_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(build_map, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(ambiguity_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(ra_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(circular_radius, m)?)?;
    Ok(())
}
