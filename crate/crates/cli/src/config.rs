use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use memattn_core::analysis::TimingPolicy;
use memattn_core::attention::{AttentionVariant, PoolingSpec};
use memattn_core::synthetic::BankShape;
use serde::Deserialize;
use serde_json::Value;

/// A configuration problem, tied to the field that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Flags shared by every subcommand. Any flag overrides the same key in
/// the `--config` file.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// JSON file with any of the keys below (snake_case names).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Report destination; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Comma-separated seeds; `a..b` is half-open, `a..=b` inclusive.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Number of queries L.
    #[arg(short = 'L', long = "queries", value_name = "L")]
    pub l: Option<usize>,
    /// Memory grid width w.
    #[arg(short = 'w', long = "width")]
    pub w: Option<usize>,
    /// Memory grid height h.
    #[arg(long = "height")]
    pub h: Option<usize>,
    /// Spatial memory frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Object-pointer tokens P.
    #[arg(short = 'P', long = "pointers", value_name = "P")]
    pub p: Option<usize>,
    /// Attention width d.
    #[arg(short = 'd', long = "dim")]
    pub d: Option<usize>,
    /// Query feature width before projection.
    #[arg(long = "query-dim")]
    pub d_q: Option<usize>,
    /// Pooling windows, e.g. `2x2,4x4`.
    #[arg(long)]
    pub pooling: Option<String>,
    /// Variant names, comma-separated; empty for none.
    #[arg(long)]
    pub variants: Option<String>,
    /// Smoothness bandwidths of the synthetic banks.
    #[arg(long)]
    pub bandwidths: Option<String>,
    /// Segments of the local-windowed variant.
    #[arg(long)]
    pub segments: Option<usize>,
    /// Timed repetitions per measurement.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Untimed warm-up repetitions.
    #[arg(long)]
    pub warmups: Option<usize>,
    /// Scale of synthetic token values.
    #[arg(long)]
    pub amplitude: Option<f64>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    format: Option<Format>,
    seeds: Option<Value>,
    l: Option<usize>,
    w: Option<usize>,
    h: Option<usize>,
    frames: Option<usize>,
    p: Option<usize>,
    d: Option<usize>,
    d_q: Option<usize>,
    pooling: Option<Value>,
    variants: Option<Value>,
    bandwidths: Option<Value>,
    segments: Option<usize>,
    runs: Option<usize>,
    warmups: Option<usize>,
    amplitude: Option<f64>,
}

/// Fully resolved and validated run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub l: usize,
    pub w: usize,
    pub h: usize,
    pub frames: usize,
    pub p: usize,
    pub d: usize,
    pub d_q: usize,
    pub pooling: Vec<PoolingSpec>,
    pub variants: Vec<String>,
    pub bandwidths: Vec<u32>,
    pub seeds: Vec<u64>,
    pub segments: usize,
    pub runs: usize,
    pub warmups: usize,
    pub amplitude: f64,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            l: 256,
            w: 16,
            h: 16,
            frames: 2,
            p: 8,
            d: 64,
            d_q: 64,
            pooling: vec![PoolingSpec::square(2)],
            variants: AttentionVariant::NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            bandwidths: vec![2],
            seeds: vec![0, 1, 2],
            segments: 4,
            runs: 5,
            warmups: 2,
            amplitude: 1.0,
            out: None,
            format: Format::Csv,
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file, then flags; validated at the end.
    pub fn resolve(args: &RunArgs, base: RunConfig) -> Result<Self, ConfigError> {
        let file = match &args.config {
            Some(path) => read_file(path)?,
            None => FileConfig::default(),
        };
        let mut c = base;
        macro_rules! scalar {
            ($($f:ident),*) => {$(
                if let Some(v) = args.$f.clone().or(file.$f.clone()) {
                    c.$f = v;
                }
            )*};
        }
        scalar!(l, w, h, frames, p, d, d_q, segments, runs, warmups, amplitude, format);
        c.out = args.out.clone().or(file.out);

        if let Some(items) = list_source("seeds", args.seeds.as_deref(), file.seeds.as_ref())? {
            c.seeds = parse_seeds(&items)?;
        }
        if let Some(items) = list_source("pooling", args.pooling.as_deref(), file.pooling.as_ref())?
        {
            c.pooling = items
                .iter()
                .map(|s| s.parse().map_err(|e| ConfigError::new("pooling", e)))
                .collect::<Result<_, _>>()?;
        }
        if let Some(items) =
            list_source("variants", args.variants.as_deref(), file.variants.as_ref())?
        {
            c.variants = items;
        }
        if let Some(items) = list_source(
            "bandwidths",
            args.bandwidths.as_deref(),
            file.bandwidths.as_ref(),
        )? {
            c.bandwidths = items
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|e| ConfigError::new("bandwidths", format!("{s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("l", self.l),
            ("w", self.w),
            ("h", self.h),
            ("frames", self.frames),
            ("d", self.d),
            ("d_q", self.d_q),
            ("segments", self.segments),
            ("runs", self.runs),
        ] {
            if v < 1 {
                return Err(ConfigError::new(name, "must be at least 1"));
            }
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(ConfigError::new("amplitude", "must be positive and finite"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "needs at least one seed"));
        }
        if self.pooling.is_empty() {
            return Err(ConfigError::new("pooling", "needs at least one window"));
        }
        for spec in &self.pooling {
            if spec.coarse_shape(self.w, self.h).is_err() {
                return Err(ConfigError::new(
                    "pooling",
                    format!(
                        "window {spec} does not divide the {}x{} grid (l_w must divide w, l_h must divide h)",
                        self.w, self.h
                    ),
                ));
            }
        }
        if self.bandwidths.is_empty() {
            return Err(ConfigError::new(
                "bandwidths",
                "needs at least one bandwidth",
            ));
        }
        if self.bandwidths.contains(&0) {
            return Err(ConfigError::new("bandwidths", "must be at least 1"));
        }
        for name in &self.variants {
            if !AttentionVariant::NAMES.contains(&name.as_str()) {
                return Err(ConfigError::new(
                    "variants",
                    format!(
                        "unknown variant {name:?}; expected one of {}",
                        AttentionVariant::NAMES.join(", ")
                    ),
                ));
            }
        }
        if self.variants.iter().any(|v| v == "local-windowed") {
            let keys = self.spatial_len() + self.p;
            if !self.l.is_multiple_of(self.segments) || !keys.is_multiple_of(self.segments) {
                return Err(ConfigError::new(
                    "segments",
                    format!(
                        "{} segments do not split L={} queries and {keys} keys evenly",
                        self.segments, self.l
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn spatial_len(&self) -> usize {
        self.frames * self.w * self.h
    }

    pub fn bank_shape(&self) -> BankShape {
        BankShape {
            frames: self.frames,
            w: self.w,
            h: self.h,
            pointers: self.p,
            d: self.d,
        }
    }

    pub fn timing(&self) -> TimingPolicy {
        TimingPolicy {
            warmups: self.warmups,
            runs: self.runs,
        }
    }

    /// Every (variant, pooling) pair in config order, variant outermost.
    pub fn variant_grid(&self) -> Vec<(AttentionVariant, PoolingSpec)> {
        self.variants
            .iter()
            .flat_map(|name| {
                self.pooling.iter().map(move |&pool| {
                    let v = AttentionVariant::from_name(name, pool, self.segments)
                        .expect("validated name");
                    (v, pool)
                })
            })
            .collect()
    }
}

fn read_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))
}

/// Flag text wins over the file value; file lists may be JSON arrays or
/// comma-separated strings.
fn list_source(
    field: &str,
    flag: Option<&str>,
    file: Option<&Value>,
) -> Result<Option<Vec<String>>, ConfigError> {
    if let Some(text) = flag {
        return Ok(Some(split_list(text)));
    }
    match file {
        None => Ok(None),
        Some(Value::String(text)) => Ok(Some(split_list(text))),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.trim().to_string()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(ConfigError::new(
                    field,
                    format!("unexpected list item {other}"),
                )),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(other) => Err(ConfigError::new(
            field,
            format!("expected a list or string, got {other}"),
        )),
    }
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Expands seed items: plain integers, `a..b` (half-open) and `a..=b`.
pub fn parse_seeds(items: &[String]) -> Result<Vec<u64>, ConfigError> {
    let num = |s: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|e| ConfigError::new("seeds", format!("{s:?}: {e}")))
    };
    let mut out = Vec::new();
    for item in items {
        if let Some((a, b)) = item.split_once("..=") {
            out.extend(num(a)?..=num(b)?);
        } else if let Some((a, b)) = item.split_once("..") {
            out.extend(num(a)?..num(b)?);
        } else {
            out.push(num(item)?);
        }
    }
    Ok(out)
}
