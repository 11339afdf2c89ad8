//! Python bindings for the composite-pulse toolkit.
//!
//! The module mirrors the Rust API at the granularity a notebook wants:
//! parse a sequence, build members/ensembles, propagate exactly, map to the
//! canonical chart, and pull the headline diagnostics (width, range
//! parameter, patch area).

use nalgebra::Vector3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use blochpulse::canonical::{self, CanonicalState};
use blochpulse::ensemble::{self, EnsembleKind};
use blochpulse::frame::{self, TimeGrid};
use blochpulse::ode::PiecewiseGenerator;
use blochpulse::pulse::PulseSequence;
use blochpulse::stability::{self, SwarmSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vec3(r: (f64, f64, f64)) -> Vector3<f64> {
    Vector3::new(r.0, r.1, r.2)
}

fn from_vec3(r: &Vector3<f64>) -> (f64, f64, f64) {
    (r.x, r.y, r.z)
}

/// A parsed composite-pulse sequence.
#[pyclass(name = "Sequence", frozen)]
struct PySequence {
    inner: PulseSequence,
}

#[pymethods]
impl PySequence {
    /// Parse degree notation like "90(x)180(y)90(x)".
    #[new]
    #[pyo3(signature = (notation, nominal_field = 1.0))]
    fn new(notation: &str, nominal_field: f64) -> PyResult<Self> {
        let inner =
            PulseSequence::parse_with_field(notation, nominal_field).map_err(value_err)?;
        Ok(PySequence { inner })
    }

    #[getter]
    fn notation(&self) -> String {
        self.inner.to_notation()
    }

    #[getter]
    fn n_segments(&self) -> usize {
        self.inner.segments().len()
    }

    #[getter]
    fn total_duration(&self) -> f64 {
        self.inner.total_duration()
    }

    #[getter]
    fn period(&self) -> f64 {
        self.inner.period()
    }

    /// Cumulative segment boundaries, from 0 to the total duration.
    fn boundaries(&self) -> Vec<f64> {
        self.inner.boundaries()
    }

    /// (flip, axis_phase, axis_polar, amplitude_scale) per segment, radians.
    fn segments(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner
            .segments()
            .iter()
            .map(|s| (s.nominal_flip, s.axis_phase, s.axis_polar, s.amplitude_scale))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Sequence(\"{}\")", self.inner.to_notation())
    }
}

/// One imperfect ensemble member.
#[pyclass(name = "Member", frozen, from_py_object)]
#[derive(Clone)]
struct PyMember {
    inner: frame::EnsembleMember,
}

#[pymethods]
impl PyMember {
    #[new]
    #[pyo3(signature = (field_scale = 1.0, offset = 0.0))]
    fn new(field_scale: f64, offset: f64) -> PyResult<Self> {
        let inner = frame::EnsembleMember::new(field_scale, offset, 0).map_err(value_err)?;
        Ok(PyMember { inner })
    }

    #[getter]
    fn field_scale(&self) -> f64 {
        self.inner.field_scale
    }

    #[getter]
    fn offset(&self) -> f64 {
        self.inner.offset
    }

    #[getter]
    fn rabi_frequency(&self) -> f64 {
        self.inner.rabi_frequency()
    }

    fn __repr__(&self) -> String {
        format!(
            "Member(field_scale={}, offset={})",
            self.inner.field_scale, self.inner.offset
        )
    }
}

/// Apply the full sequence to a Bloch vector, exactly.
#[pyfunction]
fn propagate(
    sequence: &PySequence,
    member: &PyMember,
    r: (f64, f64, f64),
) -> PyResult<(f64, f64, f64)> {
    let out = frame::propagate_sequence(&to_vec3(r), &sequence.inner, &member.inner)
        .map_err(value_err)?;
    Ok(from_vec3(&out))
}

/// Exact time-sliced trajectory: returns (times, [(x, y, z)]).
#[pyfunction]
#[pyo3(signature = (sequence, member, r, n_steps = 1000))]
fn trajectory(
    sequence: &PySequence,
    member: &PyMember,
    r: (f64, f64, f64),
    n_steps: usize,
) -> PyResult<(Vec<f64>, Vec<(f64, f64, f64)>)> {
    let traj = frame::trajectory(&to_vec3(r), &sequence.inner, &member.inner, n_steps)
        .map_err(value_err)?;
    Ok((traj.times.clone(), traj.states.iter().map(from_vec3).collect()))
}

/// Map a unit Bloch vector to (phi, eta, phi_defined).
#[pyfunction]
fn to_canonical(r: (f64, f64, f64)) -> PyResult<(f64, f64, bool)> {
    let state = canonical::to_canonical(&to_vec3(r)).map_err(value_err)?;
    Ok((state.phi, state.eta, state.phi_defined))
}

/// Inverse chart: (phi, eta) -> (x, y, z).
#[pyfunction]
fn from_canonical(phi: f64, eta: f64) -> PyResult<(f64, f64, f64)> {
    let r = canonical::from_canonical(&CanonicalState::new(phi, eta)).map_err(value_err)?;
    Ok(from_vec3(&r))
}

/// Unwrapped canonical series for one member from the north pole:
/// (times, phi, eta, phi_defined).
#[pyfunction]
#[pyo3(signature = (sequence, member, n_steps = 1000))]
fn canonical_series(
    sequence: &PySequence,
    member: &PyMember,
    n_steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
    let grid = TimeGrid::new(&sequence.inner, n_steps, &[]).map_err(value_err)?;
    let traj = frame::trajectory_on_grid(
        &Vector3::new(0.0, 0.0, 1.0),
        &sequence.inner,
        &member.inner,
        &grid,
    )
    .map_err(value_err)?;
    let canon = canonical::canonicalize(&traj).map_err(value_err)?;
    Ok((canon.times.clone(), canon.phi.clone(), canon.eta.clone(), canon.phi_defined.clone()))
}

fn parse_kind(kind: &str) -> PyResult<EnsembleKind> {
    match kind {
        "field_inhomogeneity" | "field" => Ok(EnsembleKind::FieldInhomogeneity),
        "resonance_offset" | "offset" => Ok(EnsembleKind::ResonanceOffset),
        other => Err(PyValueError::new_err(format!(
            "unknown ensemble kind `{other}` (use field_inhomogeneity or resonance_offset)"
        ))),
    }
}

/// Members of a uniform imperfection ensemble as Member objects.
#[pyfunction]
#[pyo3(signature = (kind, w_min = None, w_max = None, count = None))]
fn make_ensemble(
    kind: &str,
    w_min: Option<f64>,
    w_max: Option<f64>,
    count: Option<usize>,
) -> PyResult<Vec<PyMember>> {
    let kind = parse_kind(kind)?;
    let (lo, hi) = kind.default_range();
    let ensemble = ensemble::make_ensemble(
        kind,
        (w_min.unwrap_or(lo), w_max.unwrap_or(hi)),
        count.unwrap_or_else(|| kind.default_count()),
    )
    .map_err(value_err)?;
    Ok(ensemble.members.into_iter().map(|inner| PyMember { inner }).collect())
}

/// Euclidean ensemble width of a set of Bloch vectors.
#[pyfunction]
fn width(states: Vec<(f64, f64, f64)>) -> f64 {
    let vectors: Vec<Vector3<f64>> = states.into_iter().map(to_vec3).collect();
    ensemble::width(&vectors)
}

/// Ensemble width over time: (times, sigma, d(sigma^2)/dt).
#[pyfunction]
#[pyo3(signature = (sequence, kind, n_steps = 2000))]
fn width_series(
    sequence: &PySequence,
    kind: &str,
    n_steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let kind = parse_kind(kind)?;
    let ens = ensemble::make_ensemble(kind, kind.default_range(), kind.default_count())
        .map_err(value_err)?;
    let series = ensemble::width_series(&ens, &sequence.inner, n_steps).map_err(value_err)?;
    Ok((series.times, series.sigma, series.rate_analytic))
}

/// Range parameter h(t_f) of the finite-difference stability elements:
/// (t_f, h). `direction` is "phi" or "eta".
#[pyfunction]
#[pyo3(signature = (sequence, kind, direction, n_steps = 20000, t_f_count = 25))]
fn stability_range(
    sequence: &PySequence,
    kind: &str,
    direction: &str,
    n_steps: usize,
    t_f_count: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let kind = parse_kind(kind)?;
    let ens = ensemble::make_ensemble(kind, kind.default_range(), kind.default_count())
        .map_err(value_err)?;
    let mut spec = match direction {
        "phi" => SwarmSpec::phi_default(&sequence.inner),
        "eta" => SwarmSpec::eta_default(&sequence.inner),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown direction `{other}` (use phi or eta)"
            )))
        }
    };
    spec.t_f = stability::default_tf_grid(&sequence.inner, t_f_count);
    let series =
        stability::run_swarm(&spec, &sequence.inner, &ens, n_steps).map_err(value_err)?;
    let h = series.range_curve().map_err(value_err)?;
    Ok((series.t_f, h))
}

/// Phase-space area of the default rectangular patch over time:
/// (times, area).
#[pyfunction]
#[pyo3(signature = (sequence, n_boundary = 400, n_steps = 2000))]
fn patch_area(
    sequence: &PySequence,
    n_boundary: usize,
    n_steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let patch = ensemble::default_patch(n_boundary);
    let series = ensemble::patch_area(
        &patch,
        &sequence.inner,
        &frame::EnsembleMember::nominal(),
        n_steps,
    )
    .map_err(value_err)?;
    Ok((series.times, series.area))
}

/// Canonical Zeeman energy H(phi, eta) for a generator (wx, wy, wz).
#[pyfunction]
fn hamiltonian(phi: f64, eta: f64, omega: (f64, f64, f64)) -> f64 {
    canonical::hamiltonian(
        &CanonicalState::new(phi, eta),
        &frame::OmegaVector::new(omega.0, omega.1, omega.2),
    )
}

/// Momentum-branch bookkeeping for one member from the north pole:
/// (times, p_phi, branch_sign, hop_indices).
#[pyfunction]
#[pyo3(signature = (sequence, member, n_steps = 2000))]
fn momentum_branches(
    sequence: &PySequence,
    member: &PyMember,
    n_steps: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<i8>, Vec<usize>)> {
    let grid = TimeGrid::new(&sequence.inner, n_steps, &[]).map_err(value_err)?;
    let traj = frame::trajectory_on_grid(
        &Vector3::new(0.0, 0.0, 1.0),
        &sequence.inner,
        &member.inner,
        &grid,
    )
    .map_err(value_err)?;
    let canon = canonical::canonicalize(&traj).map_err(value_err)?;
    let schedule = PiecewiseGenerator::for_member(&sequence.inner, &member.inner);
    let series = canonical::momentum_series(&canon, &schedule).map_err(value_err)?;
    Ok((canon.times.clone(), series.p_phi, series.sign, series.hops))
}

#[pymodule]
fn blochpulse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyMember>()?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(to_canonical, m)?)?;
    m.add_function(wrap_pyfunction!(from_canonical, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_series, m)?)?;
    m.add_function(wrap_pyfunction!(make_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(width, m)?)?;
    m.add_function(wrap_pyfunction!(width_series, m)?)?;
    m.add_function(wrap_pyfunction!(stability_range, m)?)?;
    m.add_function(wrap_pyfunction!(patch_area, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_branches, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
