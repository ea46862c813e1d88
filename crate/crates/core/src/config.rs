//! Run configuration: TOML schema, key=value overrides, shipped presets,
//! and the resolved-config sidecars that make every artifact reproducible.

use crate::error::{Error, Result};
use crate::signal::WavenumberGrid;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Top-level configuration consumed by every subcommand. Sections are
/// optional; a command fails if its section is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train: Vec<TrainJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurvesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<HierarchyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demod: Option<DemodConfig>,
}

/// Evenly spaced wavenumber grid plus camera constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// First wavenumber, rad/um.
    pub k1: f64,
    /// Spacing between adjacent wavenumbers, rad/um.
    pub dk: f64,
    /// Camera gain, electrons per ADU.
    pub gain: f64,
    /// Saturation level, ADU.
    pub adu_max: u16,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            k1: 7.22,
            dk: (7.63 - 7.22) / 3.0,
            gain: 34.4,
            adu_max: 255,
        }
    }
}

impl GridConfig {
    pub fn to_grid(self) -> Result<WavenumberGrid> {
        WavenumberGrid::evenly_spaced(self.k1, self.dk, self.gain, self.adu_max)
    }
}

/// One network (or bank) to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    /// Name recorded in the weight file and estimator tag.
    pub name: String,
    /// Constraint preset (DNN1..DNN4) supplying the (alpha, V) box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit alpha interval; overrides the preset's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<(f64, f64)>,
    /// Explicit visibility interval; overrides the preset's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<(f64, f64)>,
    /// OPL window for a single network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_um: Option<(f64, f64)>,
    /// Bank mode: windows planned across a span. Exclusive with
    /// `window_um`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<BankConfig>,
    pub opl_points: usize,
    pub param_draws: usize,
    #[serde(default)]
    pub schedule: TrainConfig,
    /// Weights file (single) or directory (bank).
    pub out: PathBuf,
    /// Also write the generated training set container here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_set: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub span_um: (f64, f64),
    pub window_um: f64,
    pub overlap_um: f64,
}

/// Point evaluations of estimators at fixed (alpha, V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    pub visibility: f64,
    pub opl_um: Vec<f64>,
    pub reps: usize,
    /// "CARRE", "CRB", "SPCRB", "dnn:<weights file>", "bank:<directory>".
    pub estimators: Vec<String>,
    pub out: PathBuf,
}

/// Sensitivity-versus-OPL sweeps at fixed (alpha, V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesConfig {
    pub alpha: f64,
    pub visibility: f64,
    pub opl_lo_um: f64,
    pub opl_hi_um: f64,
    pub points: usize,
    pub reps: usize,
    /// Same estimator syntax as [`EvalConfig`].
    pub estimators: Vec<String>,
    pub out: PathBuf,
}

/// Ordering check over a previously written curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub curves: PathBuf,
    /// Estimator tags in chain order, upper bounds first.
    pub order: Vec<String>,
    #[serde(default = "default_slack")]
    pub slack_stderrs: f64,
    pub out: PathBuf,
}

fn default_slack() -> f64 {
    3.0
}

/// Synthetic stack generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub width: usize,
    pub height: usize,
    pub phantom: PhantomConfig,
    pub alpha: f64,
    pub visibility: f64,
    pub frames: usize,
    #[serde(default = "default_true")]
    pub shot_noise: bool,
    pub out: PathBuf,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomConfig {
    Flat {
        value_um: f64,
    },
    Ramp {
        lo_um: f64,
        hi_um: f64,
    },
    Bump {
        base_um: f64,
        amplitude_um: f64,
        center_x: f64,
        center_y: f64,
        sigma_px: f64,
    },
}

/// Stack demodulation into maps and histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemodConfig {
    pub stack: PathBuf,
    /// "CARRE", "dnn:<weights file>", "bank:<directory>".
    pub estimators: Vec<String>,
    /// Prior OPL for bank member selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_um: Option<f64>,
    /// Crop (x, y, width, height) applied before demodulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<(usize, usize, usize, usize)>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Output files are named `<out_prefix>-<tag>-<product>.<ext>`.
    pub out_prefix: PathBuf,
}

fn default_bins() -> usize {
    50
}

/// A parsed estimator request.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    Carre,
    Crb,
    Spcrb,
    Dnn(PathBuf),
    Bank(PathBuf),
}

impl EstimatorSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("dnn:") {
            return Ok(EstimatorSpec::Dnn(PathBuf::from(path)));
        }
        if let Some(path) = s.strip_prefix("bank:") {
            return Ok(EstimatorSpec::Bank(PathBuf::from(path)));
        }
        match s {
            "CARRE" => Ok(EstimatorSpec::Carre),
            "CRB" => Ok(EstimatorSpec::Crb),
            "SPCRB" => Ok(EstimatorSpec::Spcrb),
            other => Err(Error::ConfigInvalid(format!(
                "unknown estimator {other:?}; expected CARRE, CRB, SPCRB, dnn:<file>, or bank:<dir>"
            ))),
        }
    }
}

const PRESETS: &[(&str, &str)] = &[
    ("fig2", include_str!("../../../presets/fig2.toml")),
    ("fig4", include_str!("../../../presets/fig4.toml")),
    ("fig6", include_str!("../../../presets/fig6.toml")),
    (
        "fig8-synthetic",
        include_str!("../../../presets/fig8-synthetic.toml"),
    ),
];

/// Names accepted by [`load_config`] in place of a file path.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Raw text of a shipped preset.
pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

/// Load a configuration from a file path or a shipped preset name, then
/// apply `key=value` overrides (dotted paths address nested tables).
pub fn load_config(path_or_preset: &str, overrides: &[String]) -> Result<RunConfig> {
    let raw = if Path::new(path_or_preset).exists() {
        std::fs::read_to_string(path_or_preset)?
    } else if let Some(text) = preset_text(path_or_preset) {
        text.to_string()
    } else {
        return Err(Error::ConfigNotFound {
            path: path_or_preset.to_string(),
        });
    };
    let mut table: toml::Table = raw
        .parse()
        .map_err(|e| Error::ConfigInvalid(format!("{path_or_preset}: {e}")))?;
    for entry in overrides {
        apply_override(&mut table, entry)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::ConfigInvalid(format!("{path_or_preset}: {e}")))
}

/// Set one dotted-path key in a parsed TOML table. The value text is
/// parsed as a TOML literal; text that does not parse as one is taken as
/// a bare string.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry.split_once('=').ok_or_else(|| {
        Error::ConfigInvalid(format!("override {entry:?} is not of the form key=value"))
    })?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::ConfigInvalid(format!(
            "override {entry:?} has an empty key"
        )));
    }
    let value = parse_override_value(raw_value.trim());
    let mut segments = path.split('.').peekable();
    let mut current = table;
    loop {
        let segment = segments.next().expect("split yields at least one");
        if segments.peek().is_none() {
            current.insert(segment.to_string(), value);
            return Ok(());
        }
        let slot = current
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = slot.as_table_mut().ok_or_else(|| {
            Error::ConfigInvalid(format!(
                "override path {path:?} descends through non-table key {segment:?}"
            ))
        })?;
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Write the resolved configuration next to an artifact as
/// `<artifact>.run.toml`. Re-running the same command with the sidecar as
/// its config reproduces the artifact byte for byte.
pub fn write_sidecar(artifact: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let path = PathBuf::from(format!("{}.run.toml", artifact.display()));
    let body = toml::to_string_pretty(cfg)
        .map_err(|e| Error::ConfigInvalid(format!("sidecar serialization: {e}")))?;
    let text = format!("# resolved configuration; rerun with: wsi {command} --config <this file>\n{body}");
    std::fs::write(&path, text)?;
    Ok(path)
}
