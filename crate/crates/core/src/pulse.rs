//! Composite-pulse notation and sequence bookkeeping.
//!
//! Sequences are written in the conventional degree notation, e.g.
//! `90(x)180(y)90(x)`: each token is a flip angle in degrees followed by the
//! rotation-axis azimuth in parentheses. The axis may be one of the named
//! equatorial tokens `x`, `y`, `-x`, `-y` or an explicit azimuth in degrees.
//! Internally everything is stored in radians; notation exists only at the
//! parse/format boundary.
//!
//! Grammar (whitespace between segments is ignored):
//!
//! ```text
//! sequence := segment+
//! segment  := NUMBER "(" AXIS ")"
//! AXIS     := "x" | "y" | "-x" | "-y" | NUMBER
//! ```

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::PulseError;

const DEG: f64 = PI / 180.0;
const PHASE_MINUS_X: f64 = PI;
const PHASE_MINUS_Y: f64 = 3.0 * FRAC_PI_2;

/// One constant-amplitude rotating-frame segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSegment {
    /// Nominal flip angle in radians (the `90` in `90(x)` is pi/2).
    pub nominal_flip: f64,
    /// Azimuth of the rotation axis in radians (`x` -> 0, `y` -> pi/2).
    pub axis_phase: f64,
    /// Polar angle of the rotation axis; pi/2 for all equatorial tokens.
    pub axis_polar: f64,
    /// Amplitude relative to the sequence's nominal field.
    pub amplitude_scale: f64,
}

impl PulseSegment {
    /// Equatorial segment with unit amplitude.
    pub fn new(nominal_flip: f64, axis_phase: f64) -> Self {
        PulseSegment {
            nominal_flip,
            axis_phase,
            axis_polar: FRAC_PI_2,
            amplitude_scale: 1.0,
        }
    }

    fn check(&self, index: usize) -> Result<(), PulseError> {
        if !(self.nominal_flip > 0.0) || !self.nominal_flip.is_finite() {
            return Err(PulseError::InvalidSegment {
                index,
                reason: format!("nominal flip must be positive, got {}", self.nominal_flip),
            });
        }
        if !(0.0..=PI).contains(&self.axis_polar) {
            return Err(PulseError::InvalidSegment {
                index,
                reason: format!("axis polar angle {} outside [0, pi]", self.axis_polar),
            });
        }
        if !(self.amplitude_scale > 0.0) || !self.amplitude_scale.is_finite() {
            return Err(PulseError::InvalidSegment {
                index,
                reason: format!("amplitude scale must be positive, got {}", self.amplitude_scale),
            });
        }
        Ok(())
    }
}

/// An ordered, validated pulse sequence in the rotating frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    segments: Vec<PulseSegment>,
    nominal_field: f64,
}

/// Validation summary: per-segment clock boundaries and totals.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    /// Cumulative clock times, `boundaries[0] = 0`, last entry = total duration.
    pub boundaries: Vec<f64>,
    pub total_duration: f64,
    /// Period T = 2 pi / nominal field.
    pub period: f64,
}

impl PulseSequence {
    /// Build a sequence from explicit segments, checking all invariants.
    pub fn new(segments: Vec<PulseSegment>, nominal_field: f64) -> Result<Self, PulseError> {
        if segments.is_empty() {
            return Err(PulseError::NoSegments);
        }
        if !(nominal_field > 0.0) || !nominal_field.is_finite() {
            return Err(PulseError::NonPositiveField(nominal_field));
        }
        for (index, seg) in segments.iter().enumerate() {
            seg.check(index)?;
        }
        Ok(PulseSequence { segments, nominal_field })
    }

    /// Parse degree notation with the default nominal field of 1.
    pub fn parse(text: &str) -> Result<Self, PulseError> {
        Self::parse_with_field(text, 1.0)
    }

    /// Parse degree notation with an explicit nominal field.
    pub fn parse_with_field(text: &str, nominal_field: f64) -> Result<Self, PulseError> {
        let segments = parse_segments(text)?;
        Self::new(segments, nominal_field)
    }

    pub fn segments(&self) -> &[PulseSegment] {
        &self.segments
    }

    pub fn nominal_field(&self) -> f64 {
        self.nominal_field
    }

    /// The period T = 2 pi / nominal field used for fractional durations.
    pub fn period(&self) -> f64 {
        2.0 * PI / self.nominal_field
    }

    /// Clock time of segment `k`: flip / (amplitude scale * nominal field).
    pub fn segment_clock_time(&self, k: usize) -> f64 {
        let seg = &self.segments[k];
        seg.nominal_flip / (seg.amplitude_scale * self.nominal_field)
    }

    /// Fractional duration tau_k = t_k / T.
    pub fn segment_fraction(&self, k: usize) -> f64 {
        self.segment_clock_time(k) / self.period()
    }

    /// Cumulative segment boundaries, starting at 0 and ending at the total
    /// clock duration.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for k in 0..self.segments.len() {
            acc += self.segment_clock_time(k);
            out.push(acc);
        }
        out
    }

    pub fn total_duration(&self) -> f64 {
        (0..self.segments.len()).map(|k| self.segment_clock_time(k)).sum()
    }

    /// Re-check invariants and report the layout used by downstream modules.
    pub fn validate(&self) -> Result<SequenceLayout, PulseError> {
        if self.segments.is_empty() {
            return Err(PulseError::NoSegments);
        }
        for (index, seg) in self.segments.iter().enumerate() {
            seg.check(index)?;
        }
        let boundaries = self.boundaries();
        for (index, pair) in boundaries.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(PulseError::InvalidSegment {
                    index,
                    reason: "segment has zero clock duration".into(),
                });
            }
        }
        Ok(SequenceLayout {
            total_duration: *boundaries.last().unwrap(),
            period: self.period(),
            boundaries,
        })
    }

    /// Format back to degree notation. Parsing the result reproduces the
    /// segments exactly.
    pub fn to_notation(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            let degrees = seg.nominal_flip / DEG;
            let axis = if seg.axis_phase == 0.0 {
                "x".to_string()
            } else if seg.axis_phase == FRAC_PI_2 {
                "y".to_string()
            } else if seg.axis_phase == PHASE_MINUS_X {
                "-x".to_string()
            } else if seg.axis_phase == PHASE_MINUS_Y {
                "-y".to_string()
            } else {
                format!("{}", seg.axis_phase / DEG)
            };
            out.push_str(&format!("{}({})", degrees, axis));
        }
        out
    }
}

fn parse_segments(text: &str) -> Result<Vec<PulseSegment>, PulseError> {
    let mut segments = Vec::new();
    let mut rest = text.trim_start();
    let mut position = 0usize;
    while !rest.is_empty() {
        position += 1;
        let (segment, tail) = parse_one(rest, position)?;
        segments.push(segment);
        rest = tail.trim_start();
    }
    if segments.is_empty() {
        return Err(PulseError::Empty);
    }
    Ok(segments)
}

/// Parse a single `<degrees>(<axis>)` token from the front of `input`.
fn parse_one(input: &str, position: usize) -> Result<(PulseSegment, &str), PulseError> {
    let open = input.find('(').ok_or_else(|| PulseError::Malformed {
        position,
        found: snippet(input),
    })?;
    let angle_text = input[..open].trim();
    if angle_text.is_empty() {
        return Err(PulseError::ExpectedAngle { position, found: snippet(input) });
    }
    let degrees: f64 = angle_text.parse().map_err(|_| PulseError::ExpectedAngle {
        position,
        found: angle_text.to_string(),
    })?;
    if !(degrees > 0.0) || !degrees.is_finite() {
        return Err(PulseError::NonPositiveAngle { position, value: degrees });
    }
    let after_open = &input[open + 1..];
    let close = after_open.find(')').ok_or_else(|| PulseError::Malformed {
        position,
        found: snippet(input),
    })?;
    let axis_text = after_open[..close].trim();
    let axis_phase = match axis_text {
        "x" => 0.0,
        "y" => FRAC_PI_2,
        "-x" => PHASE_MINUS_X,
        "-y" => PHASE_MINUS_Y,
        other => match other.parse::<f64>() {
            Ok(phase_deg) if phase_deg.is_finite() => phase_deg * DEG,
            _ => {
                return Err(PulseError::UnknownAxis {
                    position,
                    axis: other.to_string(),
                })
            }
        },
    };
    let segment = PulseSegment::new(degrees * DEG, axis_phase);
    Ok((segment, &after_open[close + 1..]))
}

fn snippet(input: &str) -> String {
    input.chars().take(16).collect()
}

/// Parse composite-pulse notation into a sequence with nominal field 1.
pub fn parse_sequence(text: &str) -> Result<PulseSequence, PulseError> {
    PulseSequence::parse(text)
}

/// Levitt's symmetric inversion pulse, `90(x)180(y)90(x)`.
pub fn levitt_sequence() -> PulseSequence {
    PulseSequence::parse("90(x)180(y)90(x)").expect("built-in notation parses")
}
