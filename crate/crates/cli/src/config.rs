//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Each command
//! accepts a fixed key set; anything else is rejected. Command-line flags
//! are applied as further `key=value` pairs after the file, so the last
//! assignment wins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mim_core::data::GeneratorConfig;
use mim_core::metrics::{PixelScale, SaturationMode};
use mim_core::network::NetworkConfig;

use crate::error::{CliError, CliResult};

/// One assignment and where it came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

pub fn parse_assignments(text: &str, origin: &str) -> CliResult<Vec<Assignment>> {
    let mut out: Vec<Assignment> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("{origin}:{}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("{at}: expected key = value, got `{line}`")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(CliError::config(format!("{at}: empty key")));
        }
        if let Some(prev) = out.iter().find(|a| a.key == key) {
            return Err(CliError::config(format!("{at}: `{key}` already set at {}", prev.origin)));
        }
        out.push(Assignment {
            key: key.to_owned(),
            value: v.trim().to_owned(),
            origin: at,
        });
    }
    Ok(out)
}

/// `KEY=VALUE` from the command line.
pub fn parse_override(s: &str) -> CliResult<Assignment> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
    Ok(Assignment {
        key: k.trim().to_owned(),
        value: v.trim().to_owned(),
        origin: "command line".to_owned(),
    })
}

pub fn read_config_file(path: &Path) -> CliResult<Vec<Assignment>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_assignments(&text, &path.display().to_string())
}

/// A configuration that can be built up one key at a time and written
/// back out in full.
pub trait RunConfig: Sized {
    const COMMAND: &'static str;

    /// Applies one key; `Ok(false)` means the key is unknown.
    fn set(&mut self, key: &str, value: &str) -> CliResult<bool>;

    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> CliResult<()>;

    fn apply(&mut self, assignments: &[Assignment]) -> CliResult<()> {
        for a in assignments {
            let known = self
                .set(&a.key, &a.value)
                .map_err(|e| CliError::config(format!("{}: {e}", a.origin)))?;
            if !known {
                return Err(CliError::config(format!(
                    "{}: unknown key `{}` for `{}`",
                    a.origin,
                    a.key,
                    Self::COMMAND
                )));
            }
        }
        self.validate()
    }

    /// The fully resolved configuration, loadable with `--config`.
    fn to_text(&self) -> String {
        let mut s = format!("# resolved configuration for `mim {}`\n", Self::COMMAND);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::config(format!("bad value for `{key}`: `{value}`")))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str, command: &str) -> CliResult<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| CliError::config(format!("`mim {command}` needs `{key}`")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataRun {
    pub generator: GeneratorConfig,
    pub out: PathBuf,
}

impl Default for GenDataRun {
    fn default() -> Self {
        GenDataRun {
            generator: GeneratorConfig::default(),
            out: PathBuf::from("data.mimd"),
        }
    }
}

impl RunConfig for GenDataRun {
    const COMMAND: &'static str = "gen-data";

    fn set(&mut self, key: &str, value: &str) -> CliResult<bool> {
        if key == "out" {
            self.out = PathBuf::from(value);
            return Ok(true);
        }
        Ok(self.generator.set(key, value)?)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = self.generator.entries();
        e.push(("out", self.out.display().to_string()));
        e
    }

    fn validate(&self) -> CliResult<()> {
        Ok(self.generator.validate()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub network: NetworkConfig,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Total number of steps; a resumed run continues up to this count.
    pub steps: u64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub lr: f32,
    pub clip_norm: Option<f32>,
    pub supervise_input_phase: bool,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub resume: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            network: NetworkConfig::default(),
            data: None,
            out: PathBuf::from("run"),
            steps: 1000,
            batch_size: 8,
            shuffle_seed: 0,
            lr: 0.001,
            clip_norm: None,
            supervise_input_phase: false,
            checkpoint_every: 100,
            log_every: 100,
            resume: None,
        }
    }
}

impl RunConfig for TrainRun {
    const COMMAND: &'static str = "train";

    fn set(&mut self, key: &str, value: &str) -> CliResult<bool> {
        match key {
            "data" => self.data = path_or_none(value),
            "out" => self.out = PathBuf::from(value),
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "supervise_input_phase" => self.supervise_input_phase = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "resume" => self.resume = path_or_none(value),
            _ => return Ok(self.network.set(key, value)?),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = self.network.entries();
        e.extend([
            ("data", show_path(&self.data)),
            ("out", self.out.display().to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("shuffle_seed", self.shuffle_seed.to_string()),
            ("lr", self.lr.to_string()),
            ("clip_norm", self.clip_norm.map(|c| c.to_string()).unwrap_or_else(|| "none".into())),
            ("supervise_input_phase", self.supervise_input_phase.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("resume", show_path(&self.resume)),
        ]);
        e
    }

    fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        require(&self.data, "data", Self::COMMAND)?;
        if self.batch_size == 0 {
            return Err(CliError::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CliError::config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    None,
    Copy,
}

impl FromStr for Baseline {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "" | "none" => Ok(Baseline::None),
            "copy" => Ok(Baseline::Copy),
            _ => Err(CliError::config(format!("unknown baseline `{s}` (expected copy or none)"))),
        }
    }
}

/// Parses `0.2,0.5` into thresholds.
pub fn parse_list(key: &str, value: &str) -> CliResult<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn show_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub scale: PixelScale,
    pub thresholds: Vec<f64>,
    pub sharpness: bool,
    pub baseline: Baseline,
    pub batch_size: usize,
    /// Input length and horizon for the baseline when no checkpoint is
    /// given.
    pub input_len: usize,
    pub horizon: usize,
    /// Network keys given explicitly; they must agree with the checkpoint.
    pub network_overrides: Vec<(String, String)>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            checkpoint: None,
            data: None,
            out: PathBuf::from("eval"),
            scale: PixelScale::Unit,
            thresholds: Vec::new(),
            sharpness: false,
            baseline: Baseline::None,
            batch_size: 16,
            input_len: 10,
            horizon: 10,
            network_overrides: Vec::new(),
        }
    }
}

impl RunConfig for EvalRun {
    const COMMAND: &'static str = "eval";

    fn set(&mut self, key: &str, value: &str) -> CliResult<bool> {
        match key {
            "checkpoint" => self.checkpoint = path_or_none(value),
            "data" => self.data = path_or_none(value),
            "out" => self.out = PathBuf::from(value),
            "scale" => self.scale = value.parse()?,
            "thresholds" => self.thresholds = parse_list(key, value)?,
            "sharpness" => self.sharpness = parse(key, value)?,
            "baseline" => self.baseline = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "input_len" => self.input_len = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            _ => {
                if !NetworkConfig::default().set(key, value)? {
                    return Ok(false);
                }
                self.network_overrides.retain(|(k, _)| k != key);
                self.network_overrides.push((key.to_owned(), value.to_owned()));
            }
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let scale = match self.scale {
            PixelScale::Unit => "unit",
            PixelScale::Byte => "255",
        };
        vec![
            ("checkpoint", show_path(&self.checkpoint)),
            ("data", show_path(&self.data)),
            ("out", self.out.display().to_string()),
            ("scale", scale.to_owned()),
            ("thresholds", show_list(&self.thresholds)),
            ("sharpness", self.sharpness.to_string()),
            ("baseline", if self.baseline == Baseline::Copy { "copy" } else { "none" }.to_owned()),
            ("batch_size", self.batch_size.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
        ]
    }

    fn validate(&self) -> CliResult<()> {
        require(&self.data, "data", Self::COMMAND)?;
        if self.checkpoint.is_none() && self.baseline == Baseline::None {
            return Err(CliError::config("`mim eval` needs `checkpoint` unless `baseline = copy`"));
        }
        if self.batch_size == 0 || self.input_len == 0 || self.horizon == 0 {
            return Err(CliError::config("batch_size, input_len and horizon must be positive"));
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut s = format!("# resolved configuration for `mim {}`\n", Self::COMMAND);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in &self.network_overrides {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Which layers a gate diagnosis covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelect {
    All,
    One(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSelect {
    /// The `f_t` criterion for ST-LSTM layers and `|T/C|` for MIM blocks.
    Auto,
    Fixed(SaturationMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub threshold: f64,
    pub mode: ModeSelect,
    pub layer: LayerSelect,
    /// Sequences to use from the start of the dataset; 0 means all.
    pub count: usize,
    pub batch_size: usize,
}

impl Default for DiagnoseRun {
    fn default() -> Self {
        DiagnoseRun {
            checkpoint: None,
            data: None,
            out: PathBuf::from("gates"),
            threshold: 0.1,
            mode: ModeSelect::Auto,
            layer: LayerSelect::All,
            count: 0,
            batch_size: 16,
        }
    }
}

impl RunConfig for DiagnoseRun {
    const COMMAND: &'static str = "diagnose-gates";

    fn set(&mut self, key: &str, value: &str) -> CliResult<bool> {
        match key {
            "checkpoint" => self.checkpoint = path_or_none(value),
            "data" => self.data = path_or_none(value),
            "out" => self.out = PathBuf::from(value),
            "threshold" => self.threshold = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "auto" => ModeSelect::Auto,
                    v => ModeSelect::Fixed(v.parse()?),
                }
            }
            "layer" => {
                self.layer = match value {
                    "all" => LayerSelect::All,
                    v => LayerSelect::One(parse(key, v)?),
                }
            }
            "count" => self.count = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mode = match self.mode {
            ModeSelect::Auto => "auto",
            ModeSelect::Fixed(SaturationMode::ForgetGate) => "forget",
            ModeSelect::Fixed(SaturationMode::VirtualRatio) => "ratio",
        };
        let layer = match self.layer {
            LayerSelect::All => "all".to_owned(),
            LayerSelect::One(l) => l.to_string(),
        };
        vec![
            ("checkpoint", show_path(&self.checkpoint)),
            ("data", show_path(&self.data)),
            ("out", self.out.display().to_string()),
            ("threshold", self.threshold.to_string()),
            ("mode", mode.to_owned()),
            ("layer", layer),
            ("count", self.count.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ]
    }

    fn validate(&self) -> CliResult<()> {
        require(&self.checkpoint, "checkpoint", Self::COMMAND)?;
        require(&self.data, "data", Self::COMMAND)?;
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(CliError::config(format!("threshold must be finite and non-negative, got {}", self.threshold)));
        }
        if self.batch_size == 0 || self.layer == LayerSelect::One(0) {
            return Err(CliError::config("batch_size and layer must be at least 1"));
        }
        Ok(())
    }
}
