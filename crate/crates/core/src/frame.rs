//! Rotating-frame generators and exact propagation.
//!
//! For ensemble member `j` and segment `k` the rotating-frame generator is
//! the 3-vector
//!
//! ```text
//! Omega = (-W1_j * s_k * cos(phi_k), -W1_j * s_k * sin(phi_k), Delta_j)
//! ```
//!
//! with `W1_j` the member's field magnitude, `s_k` the segment amplitude
//! scale, `phi_k` the axis azimuth and `Delta_j` the resonance offset. The
//! sign convention puts the field along `+x` at `Omega_x = -W1`, which makes
//! a north-pole start under the first Levitt segment trace out
//! `r(t) = (0, sin(W1 t), cos(W1 t))`.
//!
//! The Bloch equation `dr/dt = Omega x r` is solved exactly per segment by
//! the rotation `exp(t * skew(Omega))`, evaluated in closed form (Rodrigues).
//! Trajectories sample this solution from the segment start at every output
//! time, so no integration error accumulates along a segment; segment
//! boundaries are always exact sample points.

use nalgebra::{Matrix3, Vector3};

use crate::error::DynamicsError;
use crate::pulse::{PulseSegment, PulseSequence};

/// Tolerance on | |r| - 1 | for states that must be on the unit sphere.
pub const UNIT_TOL: f64 = 1e-6;

/// One imperfect realization of the driven two-level system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleMember {
    /// Actual field magnitude felt by this member.
    pub field_scale: f64,
    /// Resonance offset (drive frequency minus level spacing).
    pub offset: f64,
    /// Position within the ensemble.
    pub index: usize,
}

impl EnsembleMember {
    pub fn new(field_scale: f64, offset: f64, index: usize) -> Result<Self, DynamicsError> {
        if !(field_scale > 0.0) || !field_scale.is_finite() {
            return Err(DynamicsError::NonPositiveFieldScale(field_scale));
        }
        Ok(EnsembleMember { field_scale, offset, index })
    }

    /// The ideal member: nominal field, zero offset.
    pub fn nominal() -> Self {
        EnsembleMember { field_scale: 1.0, offset: 0.0, index: 0 }
    }

    /// Rabi frequency sqrt(W1^2 + Delta^2) at unit amplitude scale.
    pub fn rabi_frequency(&self) -> f64 {
        self.field_scale.hypot(self.offset)
    }
}

/// Cartesian components of the rotating-frame generator for one
/// (member, segment) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl OmegaVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        OmegaVector { x, y, z }
    }

    pub fn zero() -> Self {
        OmegaVector { x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// |Omega|; for a physical member this is its (scaled) Rabi frequency.
    pub fn magnitude(&self) -> f64 {
        self.as_vector().norm()
    }

    /// Polar angle of the rotation axis, atan2(transverse, z).
    pub fn polar_angle(&self) -> f64 {
        self.x.hypot(self.y).atan2(self.z)
    }

    /// Cross product Omega x v.
    pub fn cross(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.as_vector().cross(v)
    }
}

/// Generator for one member under one segment.
pub fn build_omega(member: &EnsembleMember, segment: &PulseSegment) -> OmegaVector {
    let transverse = member.field_scale * segment.amplitude_scale;
    OmegaVector {
        x: -transverse * segment.axis_phase.cos(),
        y: -transverse * segment.axis_phase.sin(),
        z: member.offset,
    }
}

/// Skew-symmetric matrix M with M v = Omega x v.
pub fn skew(omega: &OmegaVector) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Rotation exp(duration * skew(omega)) in closed form.
///
/// Orthogonal with unit determinant to roundoff; uses `2 sin^2(theta/2)` for
/// the versine to avoid cancellation at small angles.
pub fn segment_propagator(omega: &OmegaVector, duration: f64) -> Matrix3<f64> {
    let rate = omega.magnitude();
    if rate == 0.0 || duration == 0.0 {
        return Matrix3::identity();
    }
    let axis = omega.as_vector() / rate;
    let angle = rate * duration;
    let k = skew(&OmegaVector::new(axis.x, axis.y, axis.z));
    let half = 0.5 * angle;
    Matrix3::identity() + angle.sin() * k + (2.0 * half.sin() * half.sin()) * (k * k)
}

/// Apply exp(duration * skew(omega)) to a vector without forming the matrix.
pub fn rotate(omega: &OmegaVector, duration: f64, v: &Vector3<f64>) -> Vector3<f64> {
    let rate = omega.magnitude();
    if rate == 0.0 || duration == 0.0 {
        return *v;
    }
    let axis = omega.as_vector() / rate;
    let angle = rate * duration;
    let (sin, cos) = angle.sin_cos();
    let cross = axis.cross(v);
    // Rodrigues: v cos + (u x v) sin + u (u . v)(1 - cos)
    v * cos + cross * sin + axis * (axis.dot(v) * (1.0 - cos))
}

fn check_unit(r: &Vector3<f64>) -> Result<(), DynamicsError> {
    let norm = r.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(DynamicsError::NonUnitState { norm });
    }
    Ok(())
}

/// Final state of the full sequence: ordered product of segment rotations
/// applied to `r_i`, first segment first.
pub fn propagate_sequence(
    r_i: &Vector3<f64>,
    sequence: &PulseSequence,
    member: &EnsembleMember,
) -> Result<Vector3<f64>, DynamicsError> {
    check_unit(r_i)?;
    let mut r = *r_i;
    for (k, segment) in sequence.segments().iter().enumerate() {
        let omega = build_omega(member, segment);
        r = rotate(&omega, sequence.segment_clock_time(k), &r);
    }
    Ok(r)
}

/// Propagate a state from clock time `t_0` to `t_1` (no unit check; useful
/// for tangent displacements, which rotations carry exactly).
pub fn propagate_window(
    r: &Vector3<f64>,
    sequence: &PulseSequence,
    member: &EnsembleMember,
    t_0: f64,
    t_1: f64,
) -> Vector3<f64> {
    debug_assert!(t_1 >= t_0);
    let boundaries = sequence.boundaries();
    let n_segments = sequence.segments().len();
    let mut out = *r;
    let mut t = t_0;
    // Segment containing t (boundaries resolve forward, final time backward).
    let mut seg = boundaries.partition_point(|&b| b <= t).saturating_sub(1).min(n_segments - 1);
    while t < t_1 {
        let seg_end = boundaries[seg + 1].min(t_1);
        let omega = build_omega(member, &sequence.segments()[seg]);
        out = rotate(&omega, seg_end - t, &out);
        t = seg_end;
        if seg + 1 < n_segments {
            seg += 1;
        } else {
            break;
        }
    }
    out
}

/// Propagate through the first `n_segments` segments only.
pub fn propagate_partial(
    r_i: &Vector3<f64>,
    sequence: &PulseSequence,
    member: &EnsembleMember,
    n_segments: usize,
) -> Result<Vector3<f64>, DynamicsError> {
    check_unit(r_i)?;
    let mut r = *r_i;
    for (k, segment) in sequence.segments().iter().enumerate().take(n_segments) {
        let omega = build_omega(member, segment);
        r = rotate(&omega, sequence.segment_clock_time(k), &r);
    }
    Ok(r)
}

/// A shared sampling grid over `[0, total_duration]`.
///
/// The grid is the union of `n_steps + 1` uniform samples with every segment
/// boundary and any caller-requested times, deduplicated. Each sample knows
/// which segment it belongs to; a boundary sample is assigned to the segment
/// that starts there (the final sample belongs to the last segment).
#[derive(Debug, Clone)]
pub struct TimeGrid {
    times: Vec<f64>,
    segment_of: Vec<usize>,
    boundaries: Vec<f64>,
}

impl TimeGrid {
    pub fn new(
        sequence: &PulseSequence,
        n_steps: usize,
        extra: &[f64],
    ) -> Result<Self, DynamicsError> {
        Self::from_boundaries(sequence.boundaries(), n_steps, extra)
    }

    /// Build a grid over explicit segment boundaries (first entry 0, last
    /// entry the total duration).
    pub fn from_boundaries(
        boundaries: Vec<f64>,
        n_steps: usize,
        extra: &[f64],
    ) -> Result<Self, DynamicsError> {
        let n_segments = boundaries.len() - 1;
        if n_steps < n_segments {
            return Err(DynamicsError::TooFewSteps { given: n_steps, minimum: n_segments });
        }
        let total = *boundaries.last().unwrap();
        let tol = total * 1e-12;

        let mut times = Vec::with_capacity(n_steps + 1 + boundaries.len() + extra.len());
        for i in 0..=n_steps {
            times.push(i as f64 * total / n_steps as f64);
        }
        times.extend_from_slice(&boundaries);
        for &t in extra {
            if t < -tol || t > total + tol {
                return Err(DynamicsError::TimeNotOnGrid { t });
            }
            times.push(t.clamp(0.0, total));
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        // Merge near-duplicates, preferring boundary values so rotations are
        // evaluated over exact segment extents.
        let mut merged: Vec<f64> = Vec::with_capacity(times.len());
        for t in times {
            match merged.last_mut() {
                Some(last) if (t - *last).abs() <= tol => {
                    if boundaries.iter().any(|b| (*b - t).abs() <= f64::EPSILON * total) {
                        *last = t;
                    }
                }
                _ => merged.push(t),
            }
        }

        // A boundary sample opens the segment that starts there; the final
        // sample stays in the last segment because `seg` cannot advance past
        // n_segments - 1.
        let mut segment_of = Vec::with_capacity(merged.len());
        let mut seg = 0usize;
        for &t in &merged {
            while seg + 1 < n_segments && t >= boundaries[seg + 1] - tol {
                seg += 1;
            }
            segment_of.push(seg);
        }

        Ok(TimeGrid { times: merged, segment_of, boundaries })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn segment_of(&self, sample: usize) -> usize {
        self.segment_of[sample]
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn total_duration(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Index of the sample equal to `t` (within grid tolerance).
    pub fn index_of(&self, t: f64) -> Result<usize, DynamicsError> {
        let tol = self.total_duration() * 1e-11 + 1e-300;
        let i = self
            .times
            .partition_point(|&x| x < t - tol);
        if i < self.times.len() && (self.times[i] - t).abs() <= tol {
            Ok(i)
        } else {
            Err(DynamicsError::TimeNotOnGrid { t })
        }
    }

    /// True if the sample sits on a segment boundary (including endpoints).
    pub fn is_boundary(&self, sample: usize) -> bool {
        let t = self.times[sample];
        let tol = self.total_duration() * 1e-12;
        self.boundaries.iter().any(|&b| (b - t).abs() <= tol)
    }
}

/// A time-sampled Bloch trajectory for one member.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector3<f64>>,
    pub segment_index: Vec<usize>,
    pub member_index: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest deviation of |r| from 1 over all samples.
    pub fn max_norm_drift(&self) -> f64 {
        self.states
            .iter()
            .map(|r| (r.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact trajectory on a fresh uniform-plus-boundaries grid.
pub fn trajectory(
    r_0: &Vector3<f64>,
    sequence: &PulseSequence,
    member: &EnsembleMember,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    let grid = TimeGrid::new(sequence, n_steps, &[])?;
    trajectory_on_grid(r_0, sequence, member, &grid)
}

/// Exact trajectory sampled on a caller-provided grid.
///
/// Within each segment the state is `exp((t - t_seg) * skew(Omega)) r_seg`
/// with `r_seg` the exact state at the segment start, so per-sample error is
/// pure roundoff.
pub fn trajectory_on_grid(
    r_0: &Vector3<f64>,
    sequence: &PulseSequence,
    member: &EnsembleMember,
    grid: &TimeGrid,
) -> Result<Trajectory, DynamicsError> {
    check_unit(r_0)?;
    let omegas: Vec<OmegaVector> = sequence
        .segments()
        .iter()
        .map(|seg| build_omega(member, seg))
        .collect();
    let boundaries = grid.boundaries();

    let mut states = Vec::with_capacity(grid.len());
    let mut seg_start_state = *r_0;
    let mut current_seg = 0usize;
    for (i, &t) in grid.times().iter().enumerate() {
        let seg = grid.segment_of(i);
        while current_seg < seg {
            // Advance the segment-start state across each boundary exactly.
            let dt = boundaries[current_seg + 1] - boundaries[current_seg];
            seg_start_state = rotate(&omegas[current_seg], dt, &seg_start_state);
            current_seg += 1;
        }
        let local = t - boundaries[seg];
        states.push(rotate(&omegas[seg], local, &seg_start_state));
    }

    Ok(Trajectory {
        times: grid.times().to_vec(),
        states,
        segment_index: (0..grid.len()).map(|i| grid.segment_of(i)).collect(),
        member_index: member.index,
    })
}
