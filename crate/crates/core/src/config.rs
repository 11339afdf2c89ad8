//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers (equivalently dotted keys), strict by default so a
//! typo cannot silently fall back to a default.
//!
//! Every omitted key takes the standard value used throughout the analyses,
//! so the minimal useful config is a single `sequence = "..."` line.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::ensemble::EnsembleKind;
use crate::error::ConfigError;
use crate::pulse::PulseSequence;

/// Which analyses a run executes (fixed execution order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Analysis {
    Trajectories,
    Canonical,
    Stability,
    Width,
    Area,
    Imperfection,
}

impl Analysis {
    pub const ALL: [Analysis; 6] = [
        Analysis::Trajectories,
        Analysis::Canonical,
        Analysis::Stability,
        Analysis::Width,
        Analysis::Area,
        Analysis::Imperfection,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Analysis::Trajectories => "trajectories",
            Analysis::Canonical => "canonical",
            Analysis::Stability => "stability",
            Analysis::Width => "width",
            Analysis::Area => "area",
            Analysis::Imperfection => "imperfection",
        }
    }

    fn parse(text: &str) -> Option<Analysis> {
        Some(match text {
            "trajectories" => Analysis::Trajectories,
            "canonical" => Analysis::Canonical,
            "stability" => Analysis::Stability,
            "width" => Analysis::Width,
            "area" => Analysis::Area,
            "imperfection" => Analysis::Imperfection,
            _ => return None,
        })
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Output table formats. CSV is the data format; JSON covers the manifest
/// and summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// A fully resolved experiment description. Two runs with equal configs
/// produce byte-identical outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sequence_text: String,
    pub nominal_field: f64,
    pub n_steps: usize,
    pub ensemble_kind: EnsembleKind,
    pub w_min: f64,
    pub w_max: f64,
    pub count: usize,
    /// Analysis start; `None` resolves to a quarter of the sequence.
    pub t_i: Option<f64>,
    pub t_f_count: usize,
    pub delta_phi0: f64,
    pub delta_eta0: f64,
    pub epsilon: f64,
    pub n_bins_w: usize,
    pub n_bins_hist: usize,
    pub width_threshold: f64,
    pub area_boundary: usize,
    pub area_phi: (f64, f64),
    pub area_eta: (f64, f64),
    /// Initial condition for the canonical/Cartesian comparison series.
    pub compare_phi: f64,
    pub compare_eta: f64,
    pub analyses: BTreeSet<Analysis>,
    /// Emit every k-th trajectory sample to the plot CSVs.
    pub downsample: usize,
    pub formats: BTreeSet<OutputFormat>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let kind = EnsembleKind::FieldInhomogeneity;
        let (w_min, w_max) = kind.default_range();
        ExperimentConfig {
            sequence_text: "90(x)180(y)90(x)".to_string(),
            nominal_field: 1.0,
            n_steps: 100_000,
            ensemble_kind: kind,
            w_min,
            w_max,
            count: kind.default_count(),
            t_i: None,
            t_f_count: 97,
            delta_phi0: 1e-6,
            delta_eta0: 2e-6,
            epsilon: 1e-6,
            n_bins_w: 20,
            n_bins_hist: 50,
            width_threshold: 0.05,
            area_boundary: 400,
            area_phi: (0.0, std::f64::consts::PI),
            area_eta: (0.25, 0.75),
            compare_phi: 0.6 * std::f64::consts::PI,
            compare_eta: 0.5,
            analyses: Analysis::ALL.into_iter().collect(),
            downsample: 100,
            formats: [OutputFormat::Csv, OutputFormat::Json].into_iter().collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate the pulse sequence named by the config.
    pub fn sequence(&self) -> Result<PulseSequence, ConfigError> {
        Ok(PulseSequence::parse_with_field(&self.sequence_text, self.nominal_field)?)
    }

    /// Render back to config-file text (the manifest echo).
    pub fn echo(&self) -> String {
        let kind = match self.ensemble_kind {
            EnsembleKind::FieldInhomogeneity => "field_inhomogeneity",
            EnsembleKind::ResonanceOffset => "resonance_offset",
        };
        let analyses: Vec<&str> = self.analyses.iter().map(|a| a.label()).collect();
        let formats: Vec<&str> = self
            .formats
            .iter()
            .map(|f| match f {
                OutputFormat::Csv => "csv",
                OutputFormat::Json => "json",
            })
            .collect();
        let mut out = String::new();
        out.push_str(&format!("sequence = \"{}\"\n", self.sequence_text));
        out.push_str(&format!("nominal_field = {}\n", self.nominal_field));
        out.push_str(&format!("n_steps = {}\n\n", self.n_steps));
        out.push_str("[ensemble]\n");
        out.push_str(&format!("kind = {kind}\n"));
        out.push_str(&format!("w_min = {}\n", self.w_min));
        out.push_str(&format!("w_max = {}\n", self.w_max));
        out.push_str(&format!("count = {}\n\n", self.count));
        out.push_str("[stability]\n");
        if let Some(t_i) = self.t_i {
            out.push_str(&format!("t_i = {t_i}\n"));
        }
        out.push_str(&format!("t_f_count = {}\n", self.t_f_count));
        out.push_str(&format!("delta_phi0 = {}\n", self.delta_phi0));
        out.push_str(&format!("delta_eta0 = {}\n", self.delta_eta0));
        out.push_str(&format!("epsilon = {}\n", self.epsilon));
        out.push_str(&format!("n_bins_w = {}\n", self.n_bins_w));
        out.push_str(&format!("n_bins_hist = {}\n\n", self.n_bins_hist));
        out.push_str("[width]\n");
        out.push_str(&format!("threshold = {}\n\n", self.width_threshold));
        out.push_str("[area]\n");
        out.push_str(&format!("n_boundary = {}\n", self.area_boundary));
        out.push_str(&format!("phi_min = {}\n", self.area_phi.0));
        out.push_str(&format!("phi_max = {}\n", self.area_phi.1));
        out.push_str(&format!("eta_min = {}\n", self.area_eta.0));
        out.push_str(&format!("eta_max = {}\n\n", self.area_eta.1));
        out.push_str("[canonical]\n");
        out.push_str(&format!("compare_phi = {}\n", self.compare_phi));
        out.push_str(&format!("compare_eta = {}\n\n", self.compare_eta));
        out.push_str("[output]\n");
        out.push_str(&format!("analyses = {}\n", analyses.join(", ")));
        out.push_str(&format!("downsample = {}\n", self.downsample));
        out.push_str(&format!("formats = {}\n", formats.join(", ")));
        out
    }
}

/// Read and parse a config file.
pub fn load_config(path: &Path, strict: bool) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text, strict)
}

/// Parse config text. In strict mode unknown keys are fatal; otherwise they
/// are ignored.
pub fn parse_config(text: &str, strict: bool) -> Result<ExperimentConfig, ConfigError> {
    let mut config = ExperimentConfig::default();
    let mut section = String::new();
    let mut kind_set = false;
    let mut range_set = false;
    let mut count_set = false;

    for (line_no, raw) in text.lines().enumerate() {
        let line = line_no + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                reason: "unterminated section header".into(),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key_part, value_part) = trimmed.split_once('=').ok_or_else(|| {
            ConfigError::Syntax { line, reason: format!("expected `key = value`, got `{trimmed}`") }
        })?;
        let local = key_part.trim();
        let key = if section.is_empty() || local.contains('.') {
            local.to_string()
        } else {
            format!("{section}.{local}")
        };
        let value = strip_quotes(value_part.trim());

        let invalid = |reason: String| ConfigError::InvalidValue {
            line,
            key: key.clone(),
            reason,
        };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| invalid(e.to_string()))
            };
        }

        match key.as_str() {
            "sequence" => config.sequence_text = value.to_string(),
            "nominal_field" => config.nominal_field = num!(f64)?,
            "n_steps" => config.n_steps = num!(usize)?,
            "ensemble.kind" => {
                config.ensemble_kind = match value {
                    "field_inhomogeneity" => EnsembleKind::FieldInhomogeneity,
                    "resonance_offset" => EnsembleKind::ResonanceOffset,
                    other => {
                        return Err(invalid(format!(
                            "expected field_inhomogeneity or resonance_offset, got `{other}`"
                        )))
                    }
                };
                kind_set = true;
            }
            "ensemble.w_min" => {
                config.w_min = num!(f64)?;
                range_set = true;
            }
            "ensemble.w_max" => {
                config.w_max = num!(f64)?;
                range_set = true;
            }
            "ensemble.count" => {
                config.count = num!(usize)?;
                count_set = true;
            }
            "stability.t_i" => config.t_i = Some(num!(f64)?),
            "stability.t_f_count" => config.t_f_count = num!(usize)?,
            "stability.delta_phi0" => config.delta_phi0 = num!(f64)?,
            "stability.delta_eta0" => config.delta_eta0 = num!(f64)?,
            "stability.epsilon" => config.epsilon = num!(f64)?,
            "stability.n_bins_w" => config.n_bins_w = num!(usize)?,
            "stability.n_bins_hist" => config.n_bins_hist = num!(usize)?,
            "width.threshold" => config.width_threshold = num!(f64)?,
            "area.n_boundary" => config.area_boundary = num!(usize)?,
            "area.phi_min" => config.area_phi.0 = num!(f64)?,
            "area.phi_max" => config.area_phi.1 = num!(f64)?,
            "area.eta_min" => config.area_eta.0 = num!(f64)?,
            "area.eta_max" => config.area_eta.1 = num!(f64)?,
            "canonical.compare_phi" => config.compare_phi = num!(f64)?,
            "canonical.compare_eta" => config.compare_eta = num!(f64)?,
            "output.analyses" => {
                let mut set = BTreeSet::new();
                for token in value.split(',') {
                    let token = token.trim();
                    if token.is_empty() {
                        continue;
                    }
                    let analysis = Analysis::parse(token)
                        .ok_or_else(|| invalid(format!("unknown analysis `{token}`")))?;
                    set.insert(analysis);
                }
                if set.is_empty() {
                    return Err(invalid("no analyses listed".into()));
                }
                config.analyses = set;
            }
            "output.downsample" => {
                config.downsample = num!(usize)?;
                if config.downsample == 0 {
                    return Err(invalid("downsample must be positive".into()));
                }
            }
            "output.formats" => {
                let mut set = BTreeSet::new();
                for token in value.split(',') {
                    match token.trim() {
                        "" => continue,
                        "csv" => {
                            set.insert(OutputFormat::Csv);
                        }
                        "json" => {
                            set.insert(OutputFormat::Json);
                        }
                        other => return Err(invalid(format!("unknown format `{other}`"))),
                    }
                }
                if set.is_empty() {
                    return Err(invalid("no formats listed".into()));
                }
                config.formats = set;
            }
            _ => {
                if strict {
                    return Err(ConfigError::UnknownKey { line, key });
                }
            }
        }
    }

    // If only the kind was set, pull that kind's standard range and count.
    if kind_set && !range_set {
        let (lo, hi) = config.ensemble_kind.default_range();
        config.w_min = lo;
        config.w_max = hi;
    }
    if kind_set && !count_set {
        config.count = config.ensemble_kind.default_count();
    }

    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &ExperimentConfig) -> Result<(), ConfigError> {
    config.sequence()?; // notation and field validity
    if !(config.w_min < config.w_max) {
        return Err(ConfigError::Invalid {
            reason: format!("ensemble range [{}, {}] is empty", config.w_min, config.w_max),
        });
    }
    if config.count < 2 {
        return Err(ConfigError::Invalid {
            reason: format!("ensemble count {} below 2", config.count),
        });
    }
    if config.t_f_count < 2 {
        return Err(ConfigError::Invalid {
            reason: format!("t_f_count {} below 2", config.t_f_count),
        });
    }
    if !(config.delta_phi0 > 0.0) || !(config.delta_eta0 > 0.0) || config.epsilon < 0.0 {
        return Err(ConfigError::Invalid {
            reason: "swarm shifts must be positive and epsilon non-negative".into(),
        });
    }
    if config.n_bins_w == 0 || config.n_bins_hist == 0 {
        return Err(ConfigError::Invalid { reason: "bin counts must be positive".into() });
    }
    if config.area_boundary < 3 {
        return Err(ConfigError::Invalid {
            reason: format!("area boundary needs >= 3 points, got {}", config.area_boundary),
        });
    }
    Ok(())
}

fn strip_quotes(text: &str) -> &str {
    let bytes = text.as_bytes();
    if bytes.len() >= 2
        && ((bytes[0] == b'"' && bytes[bytes.len() - 1] == b'"')
            || (bytes[0] == b'\'' && bytes[bytes.len() - 1] == b'\''))
    {
        &text[1..text.len() - 1]
    } else {
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let config = parse_config("sequence = \"90(x)180(y)90(x)\"\n", true).unwrap();
        assert_eq!(config, ExperimentConfig::default());
        assert_eq!(config.count, 101);
        assert_eq!(config.n_steps, 100_000);
        assert_eq!(config.analyses.len(), 6);
    }

    #[test]
    fn offset_kind_pulls_its_defaults() {
        let config = parse_config("ensemble.kind = resonance_offset\n", true).unwrap();
        assert_eq!(config.ensemble_kind, EnsembleKind::ResonanceOffset);
        assert_eq!((config.w_min, config.w_max), (0.4, 0.6));
        assert_eq!(config.count, 201);
    }

    #[test]
    fn sections_and_dotted_keys_are_equivalent() {
        let a = parse_config("[ensemble]\nkind = resonance_offset\ncount = 11\n", true).unwrap();
        let b = parse_config("ensemble.kind = resonance_offset\nensemble.count = 11\n", true)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, 11);
    }

    #[test]
    fn malformed_value_reports_line() {
        let err = parse_config("sequence = \"180(y)\"\nn_steps = many\n", true).unwrap_err();
        match err {
            ConfigError::InvalidValue { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "n_steps");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_key_fatal_only_in_strict_mode() {
        let text = "sequence = \"180(y)\"\nmystery = 1\n";
        assert!(matches!(
            parse_config(text, true),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(parse_config(text, false).is_ok());
    }

    #[test]
    fn bad_sequence_is_a_config_error() {
        assert!(matches!(
            parse_config("sequence = \"90(w)\"\n", true),
            Err(ConfigError::Pulse(_))
        ));
    }

    #[test]
    fn analyses_list_parses_and_rejects_unknown() {
        let config = parse_config("output.analyses = trajectories\n", true).unwrap();
        assert_eq!(config.analyses.len(), 1);
        assert!(config.analyses.contains(&Analysis::Trajectories));
        assert!(parse_config("output.analyses = plotting\n", true).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut config = ExperimentConfig::default();
        config.ensemble_kind = EnsembleKind::ResonanceOffset;
        config.w_min = 0.4;
        config.w_max = 0.6;
        config.count = 31;
        config.n_steps = 5000;
        config.t_i = Some(1.25);
        let again = parse_config(&config.echo(), true).unwrap();
        assert_eq!(config, again);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# a comment\n\nsequence = \"180(y)\"\n  # another\n";
        assert!(parse_config(text, true).is_ok());
    }
}
