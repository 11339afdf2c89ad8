//! Imperfection ensembles, width diagnostics and the phase-space area check.
//!
//! Two ensemble families are studied: *field inhomogeneity*, where each
//! member feels a scaled drive amplitude with zero offset, and *resonance
//! offset*, where all members share the nominal amplitude but carry their
//! own detuning. Members sit on a uniform parameter grid and all start from
//! the north pole.
//!
//! The Euclidean ensemble width is
//!
//! ```text
//! sigma(t) = sqrt( (1/N) sum_j |r_j(t) - rbar(t)|^2 )
//! ```
//!
//! For pure states `sigma^2 = 1 - |rbar|^2`, and differentiating the
//! definition term by term gives
//!
//! ```text
//! d(sigma^2)/dt = -2 rbar . d(rbar)/dt = -2 S4,
//! S4 = (1/N^2) sum_{i,k} r_i^T skew(Omega_k) r_k
//! ```
//!
//! after the per-member terms `S1_j = r_j . dr_j/dt` vanish by skew-symmetry
//! and the two cross-term sums cancel against half of the `S4` sum (the sums
//! `sum_j r_j . drbar/dt` and `sum_j rbar . dr_j/dt` are equal for any
//! configuration). When every member evolves under the *same* generator the
//! surviving term is itself a skew quadratic form and vanishes too — that is
//! the rigid-rotation case, where the width is exactly constant. All four
//! term groups are computed and reported explicitly so the cancellations can
//! be asserted rather than assumed.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::canonical::{from_canonical, to_canonical, CanonicalState};
use crate::error::DynamicsError;
use crate::frame::{build_omega, EnsembleMember, OmegaVector, TimeGrid};
use crate::pulse::PulseSequence;

use std::f64::consts::TAU;

/// Which imperfection the ensemble samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    FieldInhomogeneity,
    ResonanceOffset,
}

impl EnsembleKind {
    /// Default parameter range for this imperfection.
    pub fn default_range(&self) -> (f64, f64) {
        match self {
            EnsembleKind::FieldInhomogeneity => (0.8, 0.9),
            EnsembleKind::ResonanceOffset => (0.4, 0.6),
        }
    }

    /// Default member count for this imperfection.
    pub fn default_count(&self) -> usize {
        match self {
            EnsembleKind::FieldInhomogeneity => 101,
            EnsembleKind::ResonanceOffset => 201,
        }
    }
}

/// A uniform-grid ensemble of imperfect members sharing one initial state.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    pub members: Vec<EnsembleMember>,
    pub initial_state: Vector3<f64>,
}

impl Ensemble {
    /// Field-inhomogeneity ensemble at its defaults: 101 members over
    /// [0.8, 0.9], north-pole start.
    pub fn field_defaults() -> Ensemble {
        let kind = EnsembleKind::FieldInhomogeneity;
        make_ensemble(kind, kind.default_range(), kind.default_count())
            .expect("defaults are valid")
    }

    /// Resonance-offset ensemble at its defaults: 201 members over
    /// [0.4, 0.6], north-pole start.
    pub fn offset_defaults() -> Ensemble {
        let kind = EnsembleKind::ResonanceOffset;
        make_ensemble(kind, kind.default_range(), kind.default_count())
            .expect("defaults are valid")
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The swept imperfection parameter of member `j`.
    pub fn parameter(&self, j: usize) -> f64 {
        match self.kind {
            EnsembleKind::FieldInhomogeneity => self.members[j].field_scale,
            EnsembleKind::ResonanceOffset => self.members[j].offset,
        }
    }
}

/// Build a uniform inclusive grid of `count` members over `range`.
pub fn make_ensemble(
    kind: EnsembleKind,
    range: (f64, f64),
    count: usize,
) -> Result<Ensemble, DynamicsError> {
    let (lo, hi) = range;
    if count < 2 {
        return Err(DynamicsError::InvalidEnsemble {
            reason: format!("need at least 2 members, got {count}"),
        });
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(DynamicsError::InvalidEnsemble {
            reason: format!("invalid range [{lo}, {hi}]"),
        });
    }
    let mut members = Vec::with_capacity(count);
    for j in 0..count {
        let w = lo + (hi - lo) * j as f64 / (count - 1) as f64;
        let member = match kind {
            EnsembleKind::FieldInhomogeneity => EnsembleMember::new(w, 0.0, j)?,
            EnsembleKind::ResonanceOffset => EnsembleMember::new(1.0, w, j)?,
        };
        members.push(member);
    }
    Ok(Ensemble { kind, members, initial_state: Vector3::new(0.0, 0.0, 1.0) })
}

/// Euclidean ensemble width: population RMS distance from the mean.
pub fn width(states: &[Vector3<f64>]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let n = states.len() as f64;
    let mean: Vector3<f64> = states.iter().sum::<Vector3<f64>>() / n;
    (states.iter().map(|r| (r - mean).norm_squared()).sum::<f64>() / n).sqrt()
}

/// The width-rate decomposition at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthRate {
    /// d(sigma^2)/dt = -2 S4.
    pub rate: f64,
    /// Largest |r_j . dr_j/dt| over members; zero to roundoff always.
    pub s1_max_abs: f64,
    /// sum_j r_j . dr_j/dt.
    pub s1_sum: f64,
    /// sum_j (r_j . drbar/dt + rbar . dr_j/dt) = 2 N S4; vanishes to
    /// roundoff exactly when all members share one generator.
    pub s23_sum: f64,
    /// Antisymmetric combination sum_j (r_j . drbar/dt - rbar . dr_j/dt);
    /// zero to roundoff for any configuration.
    pub s23_antisym: f64,
    /// S4 = rbar . drbar/dt.
    pub s4: f64,
}

/// Evaluate all S-terms for aligned `(state, generator)` pairs.
pub fn width_rate(states: &[Vector3<f64>], generators: &[OmegaVector]) -> WidthRate {
    assert_eq!(states.len(), generators.len(), "states and generators must align");
    let n = states.len() as f64;
    let velocities: Vec<Vector3<f64>> =
        states.iter().zip(generators).map(|(r, w)| w.cross(r)).collect();
    let mean: Vector3<f64> = states.iter().sum::<Vector3<f64>>() / n;
    let mean_velocity: Vector3<f64> = velocities.iter().sum::<Vector3<f64>>() / n;

    let mut s1_sum = 0.0;
    let mut s1_max_abs: f64 = 0.0;
    let mut s2_sum = 0.0;
    let mut s3_sum = 0.0;
    for (r, v) in states.iter().zip(&velocities) {
        let s1 = r.dot(v);
        s1_sum += s1;
        s1_max_abs = s1_max_abs.max(s1.abs());
        s2_sum += r.dot(&mean_velocity);
        s3_sum += mean.dot(v);
    }
    let s4 = mean.dot(&mean_velocity);
    WidthRate {
        rate: -2.0 * s4,
        s1_max_abs,
        s1_sum,
        s23_sum: s2_sum + s3_sum,
        s23_antisym: s2_sum - s3_sum,
        s4,
    }
}

/// Time series of the ensemble width with the analytic rate.
#[derive(Debug, Clone)]
pub struct WidthSeries {
    pub times: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rate_analytic: Vec<f64>,
    pub segment_index: Vec<usize>,
    /// Worst per-member |S1| over all sampled times.
    pub s1_max_abs: f64,
    /// Worst |S23 antisymmetric combination| over all sampled times.
    pub s23_antisym_max_abs: f64,
}

impl WidthSeries {
    /// Centered finite differences of sigma^2 at samples whose neighbours
    /// share the segment; returns (index, numeric rate).
    pub fn numeric_rate(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for i in 1..self.times.len().saturating_sub(1) {
            if self.segment_index[i - 1] != self.segment_index[i + 1] {
                continue;
            }
            let h = self.times[i + 1] - self.times[i - 1];
            let s2p = self.sigma[i + 1] * self.sigma[i + 1];
            let s2m = self.sigma[i - 1] * self.sigma[i - 1];
            out.push((i, (s2p - s2m) / h));
        }
        out
    }
}

/// Per-member state evaluation without trajectory storage: exact rotation
/// from the stored segment-start states.
struct EnsembleSampler {
    omegas: Vec<Vec<OmegaVector>>,
    seg_starts: Vec<Vec<Vector3<f64>>>,
    boundaries: Vec<f64>,
}

impl EnsembleSampler {
    fn new(
        initial_states: &[Vector3<f64>],
        members: &[EnsembleMember],
        sequence: &PulseSequence,
    ) -> Self {
        assert_eq!(initial_states.len(), members.len());
        let boundaries = sequence.boundaries();
        let omegas: Vec<Vec<OmegaVector>> = members
            .iter()
            .map(|m| sequence.segments().iter().map(|s| build_omega(m, s)).collect())
            .collect();
        let seg_starts = initial_states
            .iter()
            .zip(&omegas)
            .map(|(r0, omega)| {
                let mut starts = Vec::with_capacity(omega.len());
                let mut r = *r0;
                for (k, w) in omega.iter().enumerate() {
                    starts.push(r);
                    r = crate::frame::rotate(w, boundaries[k + 1] - boundaries[k], &r);
                }
                starts
            })
            .collect();
        EnsembleSampler { omegas, seg_starts, boundaries }
    }

    fn len(&self) -> usize {
        self.seg_starts.len()
    }

    fn state(&self, member: usize, seg: usize, t: f64) -> Vector3<f64> {
        crate::frame::rotate(
            &self.omegas[member][seg],
            t - self.boundaries[seg],
            &self.seg_starts[member][seg],
        )
    }

    fn omega(&self, member: usize, seg: usize) -> OmegaVector {
        self.omegas[member][seg]
    }
}

/// Propagate the whole ensemble and record sigma(t) and its analytic rate.
///
/// States are evaluated per time sample from exact per-segment rotations,
/// so memory stays independent of the sample count.
pub fn width_series(
    ensemble: &Ensemble,
    sequence: &PulseSequence,
    n_steps: usize,
) -> Result<WidthSeries, DynamicsError> {
    let grid = TimeGrid::new(sequence, n_steps, &[])?;
    let initial: Vec<Vector3<f64>> = vec![ensemble.initial_state; ensemble.len()];
    let sampler = EnsembleSampler::new(&initial, &ensemble.members, sequence);

    let n = grid.len();
    struct Slice {
        sigma: f64,
        rate: f64,
        s1: f64,
        s23_anti: f64,
    }
    let slices: Vec<Slice> = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = grid.times()[i];
            let seg = grid.segment_of(i);
            let mut states = Vec::with_capacity(sampler.len());
            let mut gens = Vec::with_capacity(sampler.len());
            for j in 0..sampler.len() {
                states.push(sampler.state(j, seg, t));
                gens.push(sampler.omega(j, seg));
            }
            let terms = width_rate(&states, &gens);
            Slice {
                sigma: width(&states),
                rate: terms.rate,
                s1: terms.s1_max_abs,
                s23_anti: terms.s23_antisym.abs(),
            }
        })
        .collect();

    Ok(WidthSeries {
        times: grid.times().to_vec(),
        sigma: slices.iter().map(|s| s.sigma).collect(),
        rate_analytic: slices.iter().map(|s| s.rate).collect(),
        segment_index: (0..n).map(|i| grid.segment_of(i)).collect(),
        s1_max_abs: slices.iter().map(|s| s.s1).fold(0.0, f64::max),
        s23_antisym_max_abs: slices.iter().map(|s| s.s23_anti).fold(0.0, f64::max),
    })
}

/// Width behaviour of one segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentWidth {
    pub segment: usize,
    /// (max sigma - min sigma) / max sigma within the segment (0 if the
    /// width never exceeds roundoff).
    pub relative_variation: f64,
    pub conserved: bool,
}

/// Classify each segment's width variation against `threshold`.
pub fn segment_width_report(series: &WidthSeries, threshold: f64) -> Vec<SegmentWidth> {
    let n_segments = series.segment_index.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(n_segments);
    for seg in 0..n_segments {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..series.times.len() {
            // Include the closing boundary sample: it belongs to the next
            // segment in the grid but ends this one.
            let in_seg = series.segment_index[i] == seg
                || (i > 0 && series.segment_index[i - 1] == seg);
            if in_seg {
                lo = lo.min(series.sigma[i]);
                hi = hi.max(series.sigma[i]);
            }
        }
        let relative_variation = if hi > 1e-300 { (hi - lo) / hi } else { 0.0 };
        out.push(SegmentWidth {
            segment: seg,
            relative_variation,
            conserved: relative_variation <= threshold,
        });
    }
    out
}

/// Evolving phase-space area of a patch boundary.
#[derive(Debug, Clone)]
pub struct AreaSeries {
    pub times: Vec<f64>,
    pub area: Vec<f64>,
    /// Star-shape heuristic per time: true when the boundary's shoelace
    /// terms about its centroid all share one sign. A false entry flags a
    /// possibly self-intersecting polygon.
    pub star_shaped: Vec<bool>,
    /// Worst per-point |r . dr/dt| over all sampled times; the boundary
    /// points share one generator, so this vanishes to roundoff.
    pub s1_max_abs: f64,
    /// Worst |sum of cross terms| over all sampled times; zero to roundoff
    /// for a shared generator.
    pub s23_sum_max_abs: f64,
}

/// Closed rectangle boundary in the chart, traversed counter-clockwise with
/// about `n` vertices (no repeated closing point).
///
/// All four corners are exact vertices, so the polygon area at t = 0 equals
/// the rectangle area to roundoff at any resolution.
pub fn rectangle_patch(
    phi_range: (f64, f64),
    eta_range: (f64, f64),
    n: usize,
) -> Vec<CanonicalState> {
    let (p0, p1) = phi_range;
    let (e0, e1) = eta_range;
    let w = (p1 - p0).abs();
    let h = (e1 - e0).abs();
    let perimeter = 2.0 * (w + h);
    let corners = [(p0, e0), (p1, e0), (p1, e1), (p0, e1)];
    let lengths = [w, h, w, h];
    let mut boundary = Vec::with_capacity(n + 4);
    for edge in 0..4 {
        let count = ((n as f64 * lengths[edge] / perimeter).round() as usize).max(1);
        let (sx, sy) = corners[edge];
        let (ex, ey) = corners[(edge + 1) % 4];
        for i in 0..count {
            let f = i as f64 / count as f64;
            boundary.push(CanonicalState::new(sx + f * (ex - sx), sy + f * (ey - sy)));
        }
    }
    boundary
}

/// The default patch: phi in [0, pi], eta in [0.25, 0.75], area pi/2.
pub fn default_patch(n: usize) -> Vec<CanonicalState> {
    rectangle_patch((0.0, std::f64::consts::PI), (0.25, 0.75), n)
}

/// Propagate a closed patch boundary under one member's Hamiltonian and
/// track the enclosed chart area |loop integral of eta dphi|.
///
/// All boundary points evolve under the same generator schedule. Fails if
/// any point enters the pole band or if the polygon's azimuths cannot be
/// laid out consistently (adjacent gap close to pi, or net winding around a
/// pole).
pub fn patch_area(
    boundary: &[CanonicalState],
    sequence: &PulseSequence,
    member: &EnsembleMember,
    n_steps: usize,
) -> Result<AreaSeries, DynamicsError> {
    if boundary.len() < 3 {
        return Err(DynamicsError::InvalidEnsemble {
            reason: format!("patch boundary needs >= 3 points, got {}", boundary.len()),
        });
    }
    let grid = TimeGrid::new(sequence, n_steps, &[])?;
    let initial: Vec<Vector3<f64>> = boundary
        .iter()
        .map(from_canonical)
        .collect::<Result<_, _>>()?;
    let members = vec![*member; boundary.len()];
    let sampler = EnsembleSampler::new(&initial, &members, sequence);

    let n_times = grid.len();
    let n_pts = boundary.len();
    let mut area = Vec::with_capacity(n_times);
    let mut star_shaped = Vec::with_capacity(n_times);
    let mut s1_max: f64 = 0.0;
    let mut s23_max: f64 = 0.0;
    let mut states = vec![Vector3::zeros(); n_pts];
    let mut gens = vec![OmegaVector::zero(); n_pts];
    let mut phi = vec![0.0f64; n_pts];
    let mut eta = vec![0.0f64; n_pts];
    // Time-continuity anchor for vertex 0.
    let mut anchor: Option<f64> = None;
    for i in 0..n_times {
        let t = grid.times()[i];
        let seg = grid.segment_of(i);
        for p in 0..n_pts {
            states[p] = sampler.state(p, seg, t);
            gens[p] = sampler.omega(p, seg);
            let state = to_canonical(&states[p])?;
            if !state.phi_defined {
                return Err(DynamicsError::PatchPoleCrossing { index: p, t });
            }
            phi[p] = state.phi;
            eta[p] = state.eta;
        }
        let terms = width_rate(&states, &gens);
        s1_max = s1_max.max(terms.s1_max_abs);
        s23_max = s23_max.max(terms.s23_sum.abs());
        // Lay the azimuths out continuously around the loop, anchored on
        // vertex 0's time-continuous branch.
        let mut base = phi[0];
        if let Some(prev) = anchor {
            base += TAU * ((prev - base) / TAU).round();
        }
        anchor = Some(base);
        let mut laid = Vec::with_capacity(n_pts);
        laid.push(base);
        for p in 1..n_pts {
            let prev = laid[p - 1];
            let mut delta = phi[p] - phi[p - 1];
            delta -= TAU * (delta / TAU).round();
            if std::f64::consts::PI - delta.abs() < 1e-9 {
                return Err(DynamicsError::AmbiguousUnwrap { index: p, delta });
            }
            laid.push(prev + delta);
        }
        // Closing the loop must come back to the same branch; a 2 pi offset
        // means the boundary wound around a pole.
        let mut closing = phi[0] - phi[n_pts - 1];
        closing -= TAU * (closing / TAU).round();
        let winding = laid[n_pts - 1] + closing - laid[0];
        if winding.abs() > 1e-6 {
            return Err(DynamicsError::PatchPoleCrossing { index: 0, t: grid.times()[i] });
        }

        area.push(shoelace(&laid, &eta).abs());
        star_shaped.push(is_star_shaped(&laid, &eta));
    }

    Ok(AreaSeries {
        times: grid.times().to_vec(),
        area,
        star_shaped,
        s1_max_abs: s1_max,
        s23_sum_max_abs: s23_max,
    })
}

/// Signed polygon area via the shoelace rule on (phi, eta).
fn shoelace(phi: &[f64], eta: &[f64]) -> f64 {
    let n = phi.len();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += phi[i] * eta[j] - phi[j] * eta[i];
    }
    0.5 * acc
}

/// All centroid-relative cross terms share one sign for star-shaped
/// (hence simple) polygons; mixed signs flag possible self-intersection.
fn is_star_shaped(phi: &[f64], eta: &[f64]) -> bool {
    let n = phi.len();
    let cx = phi.iter().sum::<f64>() / n as f64;
    let cy = eta.iter().sum::<f64>() / n as f64;
    let mut positive = 0usize;
    let mut negative = 0usize;
    for i in 0..n {
        let j = (i + 1) % n;
        let cross = (phi[i] - cx) * (eta[j] - cy) - (phi[j] - cx) * (eta[i] - cy);
        if cross > 0.0 {
            positive += 1;
        } else if cross < 0.0 {
            negative += 1;
        }
    }
    positive == 0 || negative == 0
}
