//! Fixed-step RK4 integration of the Cartesian Bloch equations.
//!
//! This route is deliberately independent of the exact propagator in
//! [`crate::frame`]: it serves as an oracle for the rotations and as the
//! trajectory source when an integration-based reference is wanted. Steps
//! are split at segment boundaries so no step straddles a generator switch,
//! and the state norm is never renormalized — drift is a convergence
//! diagnostic, not something to hide.

use nalgebra::Vector3;

use crate::error::DynamicsError;
use crate::frame::{build_omega, EnsembleMember, OmegaVector, TimeGrid, Trajectory};
use crate::pulse::PulseSequence;

/// The piecewise-constant generator schedule for one member.
#[derive(Debug, Clone)]
pub struct PiecewiseGenerator {
    boundaries: Vec<f64>,
    generators: Vec<OmegaVector>,
}

impl PiecewiseGenerator {
    /// Build the schedule for `member` under `sequence`.
    pub fn for_member(sequence: &PulseSequence, member: &EnsembleMember) -> Self {
        PiecewiseGenerator {
            boundaries: sequence.boundaries(),
            generators: sequence
                .segments()
                .iter()
                .map(|seg| build_omega(member, seg))
                .collect(),
        }
    }

    /// Build from explicit parts; boundaries must cover the domain without
    /// gaps or overlaps.
    pub fn from_parts(
        boundaries: Vec<f64>,
        generators: Vec<OmegaVector>,
    ) -> Result<Self, DynamicsError> {
        if boundaries.len() != generators.len() + 1 {
            return Err(DynamicsError::InvalidSchedule {
                reason: format!(
                    "{} boundaries for {} generators",
                    boundaries.len(),
                    generators.len()
                ),
            });
        }
        if generators.is_empty() {
            return Err(DynamicsError::InvalidSchedule { reason: "no segments".into() });
        }
        if !boundaries.windows(2).all(|p| p[1] > p[0]) {
            return Err(DynamicsError::InvalidSchedule {
                reason: "boundaries must be strictly increasing".into(),
            });
        }
        Ok(PiecewiseGenerator { boundaries, generators })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn generators(&self) -> &[OmegaVector] {
        &self.generators
    }

    pub fn n_segments(&self) -> usize {
        self.generators.len()
    }

    pub fn total_duration(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Generator of the segment containing `t`; boundary times resolve to
    /// the segment that starts there, and `t = total` to the last segment.
    pub fn omega_at(&self, t: f64) -> &OmegaVector {
        let mut seg = self.boundaries.partition_point(|&b| b <= t);
        seg = seg.saturating_sub(1).min(self.generators.len() - 1);
        &self.generators[seg]
    }

    pub fn omega_of_segment(&self, k: usize) -> &OmegaVector {
        &self.generators[k]
    }
}

/// Right-hand side of the Bloch equation, Omega x r.
pub fn cartesian_rhs(r: &Vector3<f64>, omega: &OmegaVector) -> Vector3<f64> {
    omega.cross(r)
}

fn rk4_step(r: &Vector3<f64>, omega: &OmegaVector, h: f64) -> Vector3<f64> {
    let k1 = cartesian_rhs(r, omega);
    let k2 = cartesian_rhs(&(r + 0.5 * h * k1), omega);
    let k3 = cartesian_rhs(&(r + 0.5 * h * k2), omega);
    let k4 = cartesian_rhs(&(r + h * k3), omega);
    r + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrate on a fresh uniform-plus-boundaries grid with `n_steps` base
/// steps.
pub fn integrate_cartesian(
    r_0: &Vector3<f64>,
    schedule: &PiecewiseGenerator,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    let grid = grid_for_schedule(schedule, n_steps)?;
    integrate_cartesian_on_grid(r_0, schedule, &grid)
}

/// Integrate with one RK4 step per grid interval.
///
/// Grid construction guarantees no interval straddles a segment boundary, so
/// the generator is constant within every step.
pub fn integrate_cartesian_on_grid(
    r_0: &Vector3<f64>,
    schedule: &PiecewiseGenerator,
    grid: &TimeGrid,
) -> Result<Trajectory, DynamicsError> {
    let times = grid.times();
    let mut states = Vec::with_capacity(times.len());
    let mut r = *r_0;
    states.push(r);
    for i in 1..times.len() {
        let h = times[i] - times[i - 1];
        // The interval belongs to the segment of its left endpoint.
        let omega = schedule.omega_of_segment(grid.segment_of(i - 1).min(
            grid.segment_of(i),
        ));
        r = rk4_step(&r, omega, h);
        states.push(r);
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        segment_index: (0..grid.len()).map(|i| grid.segment_of(i)).collect(),
        member_index: 0,
    })
}

/// Uniform grid with the schedule's boundaries inserted, mirroring
/// [`TimeGrid::new`] for schedules that did not come from a sequence.
fn grid_for_schedule(
    schedule: &PiecewiseGenerator,
    n_steps: usize,
) -> Result<TimeGrid, DynamicsError> {
    TimeGrid::from_boundaries(schedule.boundaries().to_vec(), n_steps, &[])
}
