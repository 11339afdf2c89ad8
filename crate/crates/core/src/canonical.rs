//! Canonical coordinates on the Bloch sphere.
//!
//! The azimuth `phi` and the polar direction cosine `eta = z = cos(theta)`
//! form a canonical pair ({phi, eta} = 1), turning the Bloch equations into
//! Hamilton's equations for
//!
//! ```text
//! H(phi, eta) = Omega_x sqrt(1 - eta^2) cos(phi)
//!             + Omega_y sqrt(1 - eta^2) sin(phi)
//!             + Omega_z eta
//! ```
//!
//! The chart is singular at the poles (`eta = +-1`): `phi` is undefined,
//! `dphi/dt` diverges and `deta/dt` vanishes. Everything here treats a thin
//! band `1 - |eta| <= POLE_TOL` as "at the pole": conversions flag `phi` as
//! undefined there (carrying the last well-defined unwrapped value so series
//! stay plottable), and direct canonical integration refuses to enter the
//! band. The robust default for analysis is therefore the Cartesian route:
//! propagate `r(t)` exactly, then read off `phi = atan2(y, x)`, `eta = z`
//! (see [`canonicalize`]); direct integration of Hamilton's equations exists
//! to verify that both routes agree.

use nalgebra::Vector3;
use num_complex::Complex64;

use crate::error::DynamicsError;
use crate::frame::{OmegaVector, TimeGrid, Trajectory, UNIT_TOL};
use crate::ode::PiecewiseGenerator;

use std::f64::consts::{PI, TAU};

/// Width of the pole band on 1 - |eta|.
pub const POLE_TOL: f64 = 1e-9;

/// Unwrap steps closer than this to pi are ambiguous.
pub const UNWRAP_MARGIN: f64 = 1e-6;

/// A point in the canonical chart. The radius is fixed at 1 for pure states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalState {
    /// Azimuth in radians. Meaningless when `phi_defined` is false.
    pub phi: f64,
    /// Canonical momentum, eta = z = cos(theta).
    pub eta: f64,
    /// False inside the pole band, where the azimuth is undefined.
    pub phi_defined: bool,
}

impl CanonicalState {
    pub fn new(phi: f64, eta: f64) -> Self {
        CanonicalState { phi, eta, phi_defined: 1.0 - eta.abs() > POLE_TOL }
    }
}

/// Map a unit Bloch vector into the canonical chart.
///
/// `phi` lands in `[0, 2 pi)`. Inside the pole band the returned `phi` is 0
/// and flagged undefined.
pub fn to_canonical(r: &Vector3<f64>) -> Result<CanonicalState, DynamicsError> {
    let norm = r.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(DynamicsError::NonUnitState { norm });
    }
    let eta = r.z.clamp(-1.0, 1.0);
    if 1.0 - eta.abs() <= POLE_TOL {
        return Ok(CanonicalState { phi: 0.0, eta, phi_defined: false });
    }
    let mut phi = r.y.atan2(r.x);
    if phi < 0.0 {
        phi += TAU;
    }
    Ok(CanonicalState { phi, eta, phi_defined: true })
}

/// Inverse chart: `(sqrt(1-eta^2) cos phi, sqrt(1-eta^2) sin phi, eta)`.
pub fn from_canonical(state: &CanonicalState) -> Result<Vector3<f64>, DynamicsError> {
    let eta = state.eta;
    if eta.abs() > 1.0 + 1e-12 {
        return Err(DynamicsError::EtaOutOfRange { eta });
    }
    let eta = eta.clamp(-1.0, 1.0);
    let transverse = (1.0 - eta * eta).sqrt();
    Ok(Vector3::new(
        transverse * state.phi.cos(),
        transverse * state.phi.sin(),
        eta,
    ))
}

/// Canonical Zeeman energy; equals `Omega . r` under the inverse chart.
pub fn hamiltonian(state: &CanonicalState, omega: &OmegaVector) -> f64 {
    let eta = state.eta.clamp(-1.0, 1.0);
    let transverse = (1.0 - eta * eta).sqrt();
    omega.x * transverse * state.phi.cos() + omega.y * transverse * state.phi.sin()
        + omega.z * eta
}

/// Hamilton's equations in the chart: returns `(dphi/dt, deta/dt)`.
///
/// Fails inside the pole band where `dphi/dt` is singular.
pub fn canonical_rhs(
    state: &CanonicalState,
    omega: &OmegaVector,
) -> Result<(f64, f64), DynamicsError> {
    let eta = state.eta;
    if 1.0 - eta.abs() <= POLE_TOL {
        return Err(DynamicsError::PoleProximity { eta });
    }
    let transverse = (1.0 - eta * eta).sqrt();
    let (sin_phi, cos_phi) = state.phi.sin_cos();
    let phi_dot =
        -omega.x * eta * cos_phi / transverse - omega.y * eta * sin_phi / transverse + omega.z;
    let eta_dot = omega.x * transverse * sin_phi - omega.y * transverse * cos_phi;
    Ok((phi_dot, eta_dot))
}

/// A time series in the canonical chart with unwrapped azimuth.
#[derive(Debug, Clone)]
pub struct CanonicalTrajectory {
    pub times: Vec<f64>,
    /// Unwrapped azimuth; at undefined samples this carries the last
    /// well-defined value.
    pub phi: Vec<f64>,
    pub phi_defined: Vec<bool>,
    pub eta: Vec<f64>,
    pub segment_index: Vec<usize>,
    pub member_index: usize,
}

impl CanonicalTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_at(&self, i: usize) -> CanonicalState {
        CanonicalState { phi: self.phi[i], eta: self.eta[i], phi_defined: self.phi_defined[i] }
    }
}

/// Convert a Cartesian trajectory into the chart (the pole-safe route).
pub fn canonicalize(traj: &Trajectory) -> Result<CanonicalTrajectory, DynamicsError> {
    let n = traj.len();
    let mut phi = Vec::with_capacity(n);
    let mut phi_defined = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);

    // Unwrap incrementally: track the turn count of the last defined sample
    // and splice undefined stretches with the carried value.
    let mut last_defined: Option<(f64, f64)> = None; // (wrapped, unwrapped)
    for (i, r) in traj.states.iter().enumerate() {
        let state = to_canonical(r)?;
        eta.push(state.eta);
        if !state.phi_defined {
            phi_defined.push(false);
            phi.push(last_defined.map_or(0.0, |(_, u)| u));
            continue;
        }
        phi_defined.push(true);
        let unwrapped = match last_defined {
            None => state.phi,
            Some((prev_wrapped, prev_unwrapped)) => {
                let mut delta = state.phi - prev_wrapped;
                delta -= TAU * (delta / TAU).round();
                if PI - delta.abs() < UNWRAP_MARGIN {
                    return Err(DynamicsError::AmbiguousUnwrap { index: i, delta });
                }
                prev_unwrapped + delta
            }
        };
        last_defined = Some((state.phi, unwrapped));
        phi.push(unwrapped);
    }

    Ok(CanonicalTrajectory {
        times: traj.times.clone(),
        phi,
        phi_defined,
        eta,
        segment_index: traj.segment_index.clone(),
        member_index: traj.member_index,
    })
}

/// Remove 2 pi jumps from a wrapped azimuth series.
///
/// Fails when two adjacent samples differ by almost exactly pi, which makes
/// the jump direction ambiguous.
pub fn unwrap_phi(wrapped: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    let mut out = Vec::with_capacity(wrapped.len());
    let mut turns: i64 = 0;
    for (i, &w) in wrapped.iter().enumerate() {
        if i == 0 {
            out.push(w);
            continue;
        }
        let mut delta = w - wrapped[i - 1];
        let k = (delta / TAU).round();
        delta -= TAU * k;
        if PI - delta.abs() < UNWRAP_MARGIN {
            return Err(DynamicsError::AmbiguousUnwrap { index: i, delta });
        }
        turns -= k as i64;
        out.push(w + TAU * turns as f64);
    }
    Ok(out)
}

/// Integrate Hamilton's equations directly with fixed-step RK4.
///
/// Steps are split at segment boundaries. The integration halts with a
/// pole-crossing error if the trajectory enters the pole band; use the
/// Cartesian route ([`canonicalize`]) for such initial conditions.
pub fn integrate_canonical(
    state_0: &CanonicalState,
    schedule: &PiecewiseGenerator,
    n_steps: usize,
) -> Result<CanonicalTrajectory, DynamicsError> {
    if 1.0 - state_0.eta.abs() <= POLE_TOL {
        return Err(DynamicsError::PoleProximity { eta: state_0.eta });
    }
    let grid = TimeGrid::from_boundaries(schedule.boundaries().to_vec(), n_steps, &[])?;
    let times = grid.times();

    let mut phi = Vec::with_capacity(times.len());
    let mut eta = Vec::with_capacity(times.len());
    let mut state = (state_0.phi, state_0.eta);
    phi.push(state.0);
    eta.push(state.1);
    for i in 1..times.len() {
        let h = times[i] - times[i - 1];
        let omega = schedule.omega_of_segment(grid.segment_of(i - 1).min(grid.segment_of(i)));
        state = rk4_canonical(state, omega, h).map_err(|_| DynamicsError::PoleCrossing {
            t: times[i],
            tol: POLE_TOL,
        })?;
        if 1.0 - state.1.abs() <= POLE_TOL || !state.1.is_finite() {
            return Err(DynamicsError::PoleCrossing { t: times[i], tol: POLE_TOL });
        }
        phi.push(state.0);
        eta.push(state.1);
    }

    Ok(CanonicalTrajectory {
        times: times.to_vec(),
        phi_defined: vec![true; times.len()],
        segment_index: (0..grid.len()).map(|i| grid.segment_of(i)).collect(),
        member_index: 0,
        phi,
        eta,
    })
}

fn rk4_canonical(
    state: (f64, f64),
    omega: &OmegaVector,
    h: f64,
) -> Result<(f64, f64), DynamicsError> {
    let eval = |phi: f64, eta: f64| {
        canonical_rhs(&CanonicalState { phi, eta, phi_defined: true }, omega)
    };
    let (p, e) = state;
    let k1 = eval(p, e)?;
    let k2 = eval(p + 0.5 * h * k1.0, e + 0.5 * h * k1.1)?;
    let k3 = eval(p + 0.5 * h * k2.0, e + 0.5 * h * k2.1)?;
    let k4 = eval(p + h * k3.0, e + h * k3.1)?;
    Ok((
        p + (h / 6.0) * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        e + (h / 6.0) * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    ))
}

/// Lagrangian value split into its kinetic/potential pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lagrangian {
    /// `-sqrt(K - V)`, the principal (negative) branch.
    pub value: f64,
    /// `K = (Omega_z - dphi/dt)^2`.
    pub kinetic: f64,
    /// `V = -(Omega_x cos phi + Omega_y sin phi)^2`.
    pub potential: f64,
}

/// Velocity-form Lagrangian `L(phi, dphi/dt) = -sqrt(K - V)`.
///
/// The sign convention here always takes the negative root; the value of
/// `eta dphi/dt - H` along a trajectory is `-sign(F) sqrt(K - V)` with
/// `F = Omega_x cos phi + Omega_y sin phi`, i.e. it agrees with `value`
/// where `F >= 0` and flips sign where `F < 0` (the same two-branch
/// structure as the canonical momentum). See [`legendre_lagrangian`].
pub fn lagrangian(phi: f64, phi_dot: f64, omega: &OmegaVector) -> Lagrangian {
    let field = omega.x * phi.cos() + omega.y * phi.sin();
    let kinetic = (omega.z - phi_dot) * (omega.z - phi_dot);
    let potential = -field * field;
    Lagrangian { value: -(kinetic - potential).sqrt(), kinetic, potential }
}

/// Branch-resolved Lagrangian from `(phi, dphi/dt)` alone:
/// `-sign(F) sqrt(K - V)`. Along any true trajectory this equals the
/// Legendre form `eta dphi/dt - H`.
pub fn legendre_lagrangian(phi: f64, phi_dot: f64, omega: &OmegaVector) -> f64 {
    let field = omega.x * phi.cos() + omega.y * phi.sin();
    -field.signum() * lagrangian(phi, phi_dot, omega).value.abs()
}

/// Both branches of the canonical momentum `p_phi = +-(Omega_z - dphi/dt) /
/// sqrt((Omega_z - dphi/dt)^2 + F^2)`, so `|p_phi| = |eta|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumBranches {
    pub plus: f64,
    pub minus: f64,
    /// The numerator `Omega_z - dphi/dt`; its zero crossings are the branch
    /// hop times.
    pub numerator: f64,
}

impl MomentumBranches {
    /// Pick the branch whose value matches a reference `eta`, returning the
    /// value and its sign (+1 / -1).
    pub fn select(&self, reference_eta: f64) -> (f64, i8) {
        if (self.plus - reference_eta).abs() <= (self.minus - reference_eta).abs() {
            (self.plus, 1)
        } else {
            (self.minus, -1)
        }
    }
}

/// Momentum branches at one phase-space point.
pub fn canonical_momentum(
    phi: f64,
    phi_dot: f64,
    omega: &OmegaVector,
) -> Result<MomentumBranches, DynamicsError> {
    let field = omega.x * phi.cos() + omega.y * phi.sin();
    let numerator = omega.z - phi_dot;
    let denom = numerator.hypot(field);
    if denom == 0.0 {
        return Err(DynamicsError::DegenerateMomentum);
    }
    let p = numerator / denom;
    Ok(MomentumBranches { plus: p, minus: -p, numerator })
}

/// Canonical-momentum series along a trajectory with branch bookkeeping.
#[derive(Debug, Clone)]
pub struct MomentumSeries {
    /// Branch-selected momentum, matching the trajectory's eta.
    pub p_phi: Vec<f64>,
    /// Selected branch sign per sample (carried across pole samples).
    pub sign: Vec<i8>,
    /// Sample indices where the branch numerator changes sign.
    pub hops: Vec<usize>,
}

/// Evaluate momentum branches along a canonicalized trajectory, selecting
/// the branch that matches `eta(t)` and recording hop moments.
pub fn momentum_series(
    traj: &CanonicalTrajectory,
    schedule: &PiecewiseGenerator,
) -> Result<MomentumSeries, DynamicsError> {
    let n = traj.len();
    let mut p_phi = Vec::with_capacity(n);
    let mut sign = Vec::with_capacity(n);
    let mut hops = Vec::new();
    let mut prev_numerator: Option<f64> = None;
    let mut last_sign: i8 = 1;
    for i in 0..n {
        if !traj.phi_defined[i] {
            // phi-rates are singular here; carry the previous branch and use
            // |p_phi| = |eta| exactly.
            p_phi.push(traj.eta[i]);
            sign.push(last_sign);
            continue;
        }
        let state = traj.state_at(i);
        let omega = schedule.omega_of_segment(traj.segment_index[i]);
        let (phi_dot, _) = canonical_rhs(&state, omega)?;
        let branches = canonical_momentum(state.phi, phi_dot, omega)?;
        let (value, s) = branches.select(state.eta);
        if let Some(prev) = prev_numerator {
            if prev != 0.0 && branches.numerator != 0.0 && prev.signum() != branches.numerator.signum()
            {
                hops.push(i);
            }
        }
        prev_numerator = Some(branches.numerator);
        last_sign = s;
        p_phi.push(value);
        sign.push(s);
    }
    Ok(MomentumSeries { p_phi, sign, hops })
}

/// Right-hand side of the reduced Euler-Lagrange equation for `phi``.
///
/// Returns 0 for the genuinely degenerate free-precession case where both
/// the angular factor and the field term vanish identically, and NaN at
/// isolated points where only the denominator vanishes.
pub fn euler_lagrange_rhs(phi: f64, phi_dot: f64, omega: &OmegaVector) -> f64 {
    let field = omega.x * phi.cos() + omega.y * phi.sin();
    let angular = (omega.y * omega.y - omega.x * omega.x) * (2.0 * phi).sin()
        + 2.0 * omega.x * omega.y * (2.0 * phi).cos();
    let numerator =
        (field * field + (omega.z - phi_dot) * (omega.z - 2.0 * phi_dot)) * angular;
    let denominator = 2.0 * field * field;
    if denominator == 0.0 {
        return if numerator == 0.0 { 0.0 } else { f64::NAN };
    }
    numerator / denominator
}

/// One Euler-Lagrange residual sample.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSample {
    pub index: usize,
    pub t: f64,
    pub residual: f64,
}

/// Residual `phi_dd - RHS` at eligible interior samples of a trajectory.
///
/// A sample is eligible when it and both neighbours lie strictly inside the
/// same segment (central differences must not straddle a generator switch),
/// all three azimuths are defined, and the state is outside the pole band.
/// Both `phi_dot` and `phi_dd` come from (non-uniform) central differences
/// of the unwrapped azimuth, so the residual tests the trajectory itself.
pub fn euler_lagrange_residual(
    traj: &CanonicalTrajectory,
    schedule: &PiecewiseGenerator,
) -> Vec<ResidualSample> {
    let n = traj.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let seg = traj.segment_index[i];
        if traj.segment_index[i - 1] != seg || traj.segment_index[i + 1] != seg {
            continue;
        }
        if !(traj.phi_defined[i - 1] && traj.phi_defined[i] && traj.phi_defined[i + 1]) {
            continue;
        }
        if 1.0 - traj.eta[i].abs() <= POLE_TOL {
            continue;
        }
        let boundaries = schedule.boundaries();
        let t = traj.times[i];
        let tol = schedule.total_duration() * 1e-12;
        if boundaries.iter().any(|&b| (b - t).abs() <= tol) {
            continue;
        }
        let h1 = traj.times[i] - traj.times[i - 1];
        let h2 = traj.times[i + 1] - traj.times[i];
        let (pm, p0, pp) = (traj.phi[i - 1], traj.phi[i], traj.phi[i + 1]);
        let phi_dot =
            (h1 * h1 * pp + (h2 * h2 - h1 * h1) * p0 - h2 * h2 * pm) / (h1 * h2 * (h1 + h2));
        let phi_dd = 2.0 * (h1 * pp - (h1 + h2) * p0 + h2 * pm) / (h1 * h2 * (h1 + h2));
        let rhs = euler_lagrange_rhs(p0, phi_dot, schedule.omega_of_segment(seg));
        if rhs.is_nan() {
            continue;
        }
        out.push(ResidualSample { index: i, t, residual: phi_dd - rhs });
    }
    out
}

/// A Bloch vector recovered from a density matrix, with its purity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityBloch {
    pub vector: Vector3<f64>,
    /// tr(rho^2) = (1 + |r|^2) / 2; pure states have purity 1.
    pub purity: f64,
}

impl DensityBloch {
    pub fn is_pure(&self, tol: f64) -> bool {
        (self.purity - 1.0).abs() <= tol
    }
}

/// Map a 2x2 Hermitian unit-trace density matrix to its Bloch vector.
///
/// Basis ordering follows the excited-state-first convention:
/// `rho[0][0]` is the `|b><b|` population, so `|b>` maps to the north pole.
pub fn density_to_bloch(rho: &[[Complex64; 2]; 2]) -> Result<DensityBloch, DynamicsError> {
    const TOL: f64 = 1e-12;
    let hermitian_defect = (rho[0][1] - rho[1][0].conj()).norm();
    if hermitian_defect > TOL || rho[0][0].im.abs() > TOL || rho[1][1].im.abs() > TOL {
        return Err(DynamicsError::InvalidDensity {
            reason: format!("Hermiticity defect {hermitian_defect:.3e}"),
        });
    }
    let trace = rho[0][0].re + rho[1][1].re;
    if (trace - 1.0).abs() > TOL {
        return Err(DynamicsError::InvalidDensity { reason: format!("trace = {trace}") });
    }
    let x = (rho[0][1] + rho[1][0]).re;
    let y = (Complex64::i() * (rho[0][1] - rho[1][0])).re;
    let z = rho[0][0].re - rho[1][1].re;
    let vector = Vector3::new(x, y, z);
    Ok(DensityBloch { vector, purity: 0.5 * (1.0 + vector.norm_squared()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{trajectory, EnsembleMember};
    use crate::pulse::levitt_sequence;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn north() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn chart_basics() {
        let s = to_canonical(&Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!((s.phi, s.eta), (FRAC_PI_2, 0.0));
        let s = to_canonical(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.phi, s.eta), (0.0, 0.0));
        // phi stays in [0, 2 pi).
        let s = to_canonical(&Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert_relative_eq!(s.phi, 3.0 * FRAC_PI_2, max_relative = 1e-15);

        let pole = to_canonical(&north()).unwrap();
        assert!(!pole.phi_defined);
        assert_eq!(pole.eta, 1.0);

        assert!(matches!(
            to_canonical(&Vector3::new(0.0, 0.0, 2.0)),
            Err(DynamicsError::NonUnitState { .. })
        ));
    }

    #[test]
    fn inverse_chart() {
        let r = from_canonical(&CanonicalState::new(PI, 0.5)).unwrap();
        assert_relative_eq!(r, Vector3::new(-0.75f64.sqrt(), 0.0, 0.5), epsilon = 1e-15);

        let r = from_canonical(&CanonicalState::new(1.234, 1.0)).unwrap();
        assert_eq!(r, north());

        assert!(matches!(
            from_canonical(&CanonicalState { phi: 0.0, eta: 1.5, phi_defined: true }),
            Err(DynamicsError::EtaOutOfRange { .. })
        ));
    }

    #[test]
    fn round_trip_random_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let r = random_unit(&mut rng);
            let s = to_canonical(&r).unwrap();
            if !s.phi_defined {
                continue;
            }
            let back = from_canonical(&s).unwrap();
            assert!((back - r).norm() <= 1e-14);
        }
    }

    #[test]
    fn hamiltonian_matches_cartesian_dot() {
        assert_eq!(
            hamiltonian(&CanonicalState::new(0.0, 0.0), &OmegaVector::new(-1.0, 0.0, 0.0)),
            -1.0
        );
        assert_eq!(
            hamiltonian(&CanonicalState::new(0.3, 1.0), &OmegaVector::new(0.0, 0.0, 0.7)),
            0.7
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let r = random_unit(&mut rng);
            let s = to_canonical(&r).unwrap();
            if !s.phi_defined {
                continue;
            }
            let omega = OmegaVector::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            assert_abs_diff_eq!(
                hamiltonian(&s, &omega),
                omega.as_vector().dot(&r),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn rhs_free_precession_and_fixed_point() {
        let (phi_dot, eta_dot) =
            canonical_rhs(&CanonicalState::new(1.1, 0.4), &OmegaVector::new(0.0, 0.0, 1.0))
                .unwrap();
        assert_eq!((phi_dot, eta_dot), (1.0, 0.0));

        // Equatorial point on the x-axis is a fixed point of x-rotations.
        let (phi_dot, eta_dot) =
            canonical_rhs(&CanonicalState::new(0.0, 0.0), &OmegaVector::new(-1.0, 0.0, 0.0))
                .unwrap();
        assert_eq!((phi_dot, eta_dot), (0.0, 0.0));

        assert!(matches!(
            canonical_rhs(&CanonicalState::new(0.0, 1.0), &OmegaVector::zero()),
            Err(DynamicsError::PoleProximity { .. })
        ));
    }

    #[test]
    fn rhs_matches_chain_rule_along_trajectory() {
        let seq = levitt_sequence();
        let member = EnsembleMember::new(0.9, 0.3, 0).unwrap();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let r0 = from_canonical(&CanonicalState::new(0.6 * PI, 0.5)).unwrap();
        let traj = trajectory(&r0, &seq, &member, 40_000).unwrap();
        let canon = canonicalize(&traj).unwrap();
        // Central-difference rates vs analytic RHS at a few interior samples.
        for &i in &[513usize, 9999, 20001, 33333] {
            if canon.segment_index[i - 1] != canon.segment_index[i + 1] {
                continue;
            }
            let h = canon.times[i + 1] - canon.times[i - 1];
            let fd_phi = (canon.phi[i + 1] - canon.phi[i - 1]) / h;
            let fd_eta = (canon.eta[i + 1] - canon.eta[i - 1]) / h;
            let omega = schedule.omega_of_segment(canon.segment_index[i]);
            let (phi_dot, eta_dot) = canonical_rhs(&canon.state_at(i), omega).unwrap();
            assert_abs_diff_eq!(fd_phi, phi_dot, epsilon = 1e-6);
            assert_abs_diff_eq!(fd_eta, eta_dot, epsilon = 1e-6);
        }
    }

    #[test]
    fn unwrap_examples() {
        let out = unwrap_phi(&[6.2, 0.1]).unwrap();
        assert_relative_eq!(out[1], 0.1 + TAU, max_relative = 1e-15);
        assert_eq!(out[0], 6.2);

        let monotone = [0.1, 0.5, 1.2, 2.0, 2.9];
        assert_eq!(unwrap_phi(&monotone).unwrap(), monotone.to_vec());

        // Near-pi step is ambiguous.
        assert!(matches!(
            unwrap_phi(&[0.0, PI - 1e-9]),
            Err(DynamicsError::AmbiguousUnwrap { index: 1, .. })
        ));
    }

    #[test]
    fn unwrap_round_trips_random_smooth_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut truth = vec![rng.random_range(0.0..TAU)];
            for _ in 0..300 {
                let last = *truth.last().unwrap();
                truth.push(last + rng.random_range(-1.5..1.5));
            }
            let wrapped: Vec<f64> = truth.iter().map(|p| p.rem_euclid(TAU)).collect();
            let unwrapped = unwrap_phi(&wrapped).unwrap();
            for (u, w) in unwrapped.iter().zip(&wrapped) {
                assert_abs_diff_eq!(u.rem_euclid(TAU), *w, epsilon = 1e-9);
            }
            // Differences of the unwrapped series match the true increments.
            for i in 1..truth.len() {
                assert_abs_diff_eq!(
                    unwrapped[i] - unwrapped[i - 1],
                    truth[i] - truth[i - 1],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn canonicalize_matches_atan2_when_wrapped_back() {
        let seq = levitt_sequence();
        let member = EnsembleMember::new(0.85, 0.2, 0).unwrap();
        let traj = trajectory(&north(), &seq, &member, 10_000).unwrap();
        let canon = canonicalize(&traj).unwrap();
        for i in 0..traj.len() {
            if !canon.phi_defined[i] {
                continue;
            }
            let mut expect = traj.states[i].y.atan2(traj.states[i].x);
            if expect < 0.0 {
                expect += TAU;
            }
            let wrapped = canon.phi[i].rem_euclid(TAU);
            let diff = (wrapped - expect).abs();
            assert!(diff < 1e-9 || (TAU - diff) < 1e-9, "sample {i}: {wrapped} vs {expect}");
            assert_eq!(canon.eta[i], traj.states[i].z.clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn direct_canonical_integration_agrees_with_cartesian_route() {
        let seq = levitt_sequence();
        let member = EnsembleMember::nominal();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let start = CanonicalState::new(0.6 * PI, 0.5);

        let direct = integrate_canonical(&start, &schedule, 50_000).unwrap();
        let r0 = from_canonical(&start).unwrap();
        let cart = trajectory(&r0, &seq, &member, 50_000).unwrap();
        let indirect = canonicalize(&cart).unwrap();

        // Anchor on the same branch and compare pointwise.
        let offset = (direct.phi[0] - indirect.phi[0]) / TAU;
        let offset = TAU * offset.round();
        let mut max_phi: f64 = 0.0;
        let mut max_eta: f64 = 0.0;
        for i in 0..direct.len() {
            max_phi = max_phi.max((direct.phi[i] - offset - indirect.phi[i]).abs());
            max_eta = max_eta.max((direct.eta[i] - indirect.eta[i]).abs());
        }
        assert!(max_phi <= 1e-6, "max phi deviation {max_phi}");
        assert!(max_eta <= 1e-6, "max eta deviation {max_eta}");
    }

    #[test]
    fn free_precession_integrates_exactly() {
        let schedule = PiecewiseGenerator::from_parts(
            vec![0.0, 3.0],
            vec![OmegaVector::new(0.0, 0.0, 1.0)],
        )
        .unwrap();
        let start = CanonicalState::new(0.25, -0.3);
        let out = integrate_canonical(&start, &schedule, 300).unwrap();
        for (i, &t) in out.times.iter().enumerate() {
            assert_abs_diff_eq!(out.phi[i], 0.25 + t, epsilon = 1e-12);
            assert_eq!(out.eta[i], -0.3);
        }
    }

    #[test]
    fn near_pole_start_raises_pole_crossing() {
        let seq = levitt_sequence();
        let schedule = PiecewiseGenerator::for_member(&seq, &EnsembleMember::nominal());
        // Exactly at the pole: rejected immediately.
        assert!(matches!(
            integrate_canonical(&CanonicalState::new(0.0, 1.0), &schedule, 1000),
            Err(DynamicsError::PoleProximity { .. })
        ));
        // An x-rotation starting at (phi, eta) = (pi/2, cos g) passes through
        // the south pole at t = pi - g, so direct integration must halt.
        let x_half_turn = PiecewiseGenerator::from_parts(
            vec![0.0, PI],
            vec![OmegaVector::new(-1.0, 0.0, 0.0)],
        )
        .unwrap();
        let start = CanonicalState::new(FRAC_PI_2, 1e-3f64.cos());
        assert!(matches!(
            integrate_canonical(&start, &x_half_turn, 100_000),
            Err(DynamicsError::PoleCrossing { .. })
        ));
    }

    #[test]
    fn lagrangian_values_and_split() {
        let l = lagrangian(0.0, 1.0, &OmegaVector::new(0.0, 0.0, 1.0));
        assert_eq!(l.value, 0.0);
        assert_eq!((l.kinetic, l.potential), (0.0, 0.0));

        let l = lagrangian(0.0, 0.0, &OmegaVector::new(-1.0, 0.0, 0.0));
        assert_eq!(l.value, -1.0);
        assert_eq!((l.kinetic, l.potential), (0.0, -1.0));
    }

    #[test]
    fn legendre_identity_along_trajectory() {
        let seq = levitt_sequence();
        let member = EnsembleMember::new(0.88, 0.15, 0).unwrap();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let r0 = from_canonical(&CanonicalState::new(0.6 * PI, 0.5)).unwrap();
        let canon = canonicalize(&trajectory(&r0, &seq, &member, 20_000).unwrap()).unwrap();
        let mut checked = 0usize;
        for i in 0..canon.len() {
            if !canon.phi_defined[i] || 1.0 - canon.eta[i].abs() < 1e-6 {
                continue;
            }
            let omega = schedule.omega_of_segment(canon.segment_index[i]);
            let state = canon.state_at(i);
            let (phi_dot, _) = canonical_rhs(&state, omega).unwrap();
            let lhs = legendre_lagrangian(state.phi, phi_dot, omega);
            let rhs = state.eta * phi_dot - hamiltonian(&state, omega);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
            // Magnitude agrees with the principal branch.
            assert_abs_diff_eq!(
                lagrangian(state.phi, phi_dot, omega).value.abs(),
                rhs.abs(),
                epsilon = 1e-6
            );
            checked += 1;
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn momentum_branches_and_identity() {
        // Omega_z = phi_dot gives zero momentum.
        let b = canonical_momentum(0.3, 0.7, &OmegaVector::new(-1.0, 0.0, 0.7)).unwrap();
        assert_eq!(b.plus, 0.0);

        // Degenerate when both numerator and field vanish. The field term is
        // exactly zero at phi = 0 for a y-only drive.
        assert!(matches!(
            canonical_momentum(0.0, 0.5, &OmegaVector::new(0.0, -1.0, 0.5)),
            Err(DynamicsError::DegenerateMomentum)
        ));
    }

    #[test]
    fn momentum_series_matches_eta_and_hops() {
        let seq = levitt_sequence();
        let member = EnsembleMember::new(0.84, 0.1, 0).unwrap();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let canon =
            canonicalize(&trajectory(&north(), &seq, &member, 20_000).unwrap()).unwrap();
        let series = momentum_series(&canon, &schedule).unwrap();
        for i in 0..canon.len() {
            assert_abs_diff_eq!(series.p_phi[i].abs(), canon.eta[i].abs(), epsilon = 1e-6);
        }
        assert!(!series.hops.is_empty(), "expected at least one branch hop");
    }

    #[test]
    fn euler_lagrange_residual_small_on_solution_large_on_perturbed() {
        let seq = levitt_sequence();
        let member = EnsembleMember::nominal();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let r0 = from_canonical(&CanonicalState::new(0.6 * PI, 0.5)).unwrap();
        let canon = canonicalize(&trajectory(&r0, &seq, &member, 100_000).unwrap()).unwrap();

        let residuals = euler_lagrange_residual(&canon, &schedule);
        assert!(residuals.len() > 50_000);
        let max_res = residuals.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
        assert!(max_res <= 1e-3, "max residual {max_res}");

        // Negative control: a smooth perturbation is not a solution.
        let mut bent = canon.clone();
        let total = seq.total_duration();
        for (i, t) in bent.times.iter().enumerate() {
            bent.phi[i] += 0.1 * (3.0 * t / total * TAU).sin();
        }
        let bent_res = euler_lagrange_residual(&bent, &schedule);
        let max_bent = bent_res.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
        assert!(max_bent > 0.1, "perturbed residual {max_bent}");
    }

    #[test]
    fn el_rhs_degenerate_free_precession_is_zero() {
        assert_eq!(euler_lagrange_rhs(0.7, 0.3, &OmegaVector::new(0.0, 0.0, 1.0)), 0.0);
    }

    #[test]
    fn density_matrix_to_bloch() {
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let half = Complex64::new(0.5, 0.0);

        let excited = [[one, zero], [zero, zero]];
        let b = density_to_bloch(&excited).unwrap();
        assert_eq!(b.vector, north());
        assert!(b.is_pure(1e-12));

        let mixed = [[half, zero], [zero, half]];
        let b = density_to_bloch(&mixed).unwrap();
        assert_eq!(b.vector, Vector3::zeros());
        assert!(!b.is_pure(1e-12));
        assert_eq!(b.purity, 0.5);

        let coherent = [[half, half], [half, half]];
        let b = density_to_bloch(&coherent).unwrap();
        assert_relative_eq!(b.vector, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);

        let non_hermitian = [[one, half], [zero, zero]];
        assert!(density_to_bloch(&non_hermitian).is_err());
        let bad_trace = [[one, zero], [zero, one]];
        assert!(density_to_bloch(&bad_trace).is_err());
    }

    #[test]
    fn energy_is_piecewise_conserved_along_exact_trajectories() {
        let seq = levitt_sequence();
        let member = EnsembleMember::new(0.87, 0.44, 0).unwrap();
        let schedule = PiecewiseGenerator::for_member(&seq, &member);
        let canon =
            canonicalize(&trajectory(&north(), &seq, &member, 20_000).unwrap()).unwrap();
        let mut seg_energy: Option<(usize, f64)> = None;
        for i in 0..canon.len() {
            let seg = canon.segment_index[i];
            let h = hamiltonian(&canon.state_at(i), schedule.omega_of_segment(seg));
            match seg_energy {
                Some((s, e)) if s == seg => {
                    assert_abs_diff_eq!(h, e, epsilon = 1e-9);
                }
                _ => seg_energy = Some((seg, h)),
            }
        }
    }
}
